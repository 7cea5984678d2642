//! Release gate. One test per numbered criterion, each ending in a
//! `criterion NN PASS` line (visible under --nocapture). Exact property
//! checks run on throwaway fixtures; the training studies share one
//! pretrained world so the whole file finishes in a few minutes.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pkt_core::data::{
    build_manifest, generate_chatter, generate_synthetic, partition_personas, split_dialogues,
    temperature_mix, Corpus, PersonaRecord, SlotVocab, SplitManifest, SyntheticSpec, Turn,
    FEW_SHOT_THRESHOLD,
};
use pkt_core::decode::generate_response;
use pkt_core::eval::{
    c_score, evaluate_setting, lcs_f1, metric_tokens, ngram_f1, param_accounting,
    ConsistencyJudge, EvalConfig, KeywordJudge, MetricBlock, PrefixProvider,
};
use pkt_core::graph::{grad_check, Graph};
use pkt_core::model::{lm_loss, pretrain_backbone, Backbone, BackboneConfig, BoundBackbone, PretrainConfig};
use pkt_core::optim::{Optimizer, Sgd};
use pkt_core::pipeline::{
    encode_split_samples, finetune_backbone, persona_seed, ppreptile_inner, ppreptile_outer,
    source_strategy_by_name, train_personalized, EntryMeta, FinetuneConfig, MetaTrainConfig,
    PersonaTrainConfig, PrefixStore, SourceTrainConfig, TrainOutput, SOURCE_KEY,
};
use pkt_core::prefix::{
    deployed_count, materialize_prefix, BoundReparam, DeployedPrefix, ReparamPrefix,
};
use pkt_core::tokenizer::{EOU, S1, S2};
use pkt_core::Result;

const SEEDS: [u64; 3] = [5, 13, 21];
const PREFIX_LEN: usize = 8;
const K_REPARAM: usize = 32;

/// Corpus, splits, and a backbone pretrained on persona-free text for the
/// directional studies. Pretraining on small talk rather than the persona
/// dialogues themselves keeps slot-matched answering and per-speaker
/// trait memory out of the backbone, so those abilities can only arrive
/// through a prefix or through fine-tuning; the study comparisons measure
/// exactly that arrival. Part A dialogue counts are deliberately spread
/// (8..30) so persona shares differ enough for reweighted mixing to bite.
struct StudyWorld {
    spec: SyntheticSpec,
    corpus: Corpus,
    manifest: SplitManifest,
    backbone: Backbone,
}

static STUDY_WORLD: OnceLock<StudyWorld> = OnceLock::new();

fn study_world() -> &'static StudyWorld {
    STUDY_WORLD.get_or_init(|| {
        let mut spec = SyntheticSpec::default();
        spec.personas_regular = 14;
        spec.personas_few_shot = 6;
        spec.regular_dialogues = (8, 30);
        spec.few_shot_dialogues = 4;
        spec.exchanges_per_dialogue = 3;
        spec.seed = 11;
        let corpus = generate_synthetic(&spec).unwrap();
        let (manifest, _) = build_manifest(&corpus, FEW_SHOT_THRESHOLD, 6, 7).unwrap();
        let chatter = generate_chatter(&spec, 256, 2).unwrap();
        let cfg = BackboneConfig {
            vocab_size: 96,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 64,
            max_context: 96,
        };
        let mut pcfg = PretrainConfig::new(60, 3);
        pcfg.lr = 5e-3;
        pcfg.batch_size = 16;
        let (backbone, _) = pretrain_backbone(&chatter, &cfg, &pcfg).unwrap();
        StudyWorld { spec, corpus, manifest, backbone }
    })
}

/// Base-strategy source prefixes per study seed, shared between the
/// criterion 8 and criterion 9 tests.
static BASE_SOURCES: OnceLock<BTreeMap<u64, ReparamPrefix>> = OnceLock::new();

fn base_source(seed: u64) -> &'static ReparamPrefix {
    let sources = BASE_SOURCES.get_or_init(|| {
        let w = study_world();
        SEEDS
            .iter()
            .map(|&s| (s, train_study_source(w, "base", s).prefix))
            .collect()
    });
    &sources[&seed]
}

fn train_study_source(w: &StudyWorld, strategy: &str, seed: u64) -> TrainOutput {
    let strat = source_strategy_by_name(strategy).unwrap();
    let mut cfg = SourceTrainConfig::new(seed);
    cfg.lr = 5e-3;
    cfg.batch_size = 8;
    cfg.max_epochs = 10;
    cfg.patience = 10;
    cfg.meta.iterations = 300;
    let init = ReparamPrefix::init(
        w.backbone.config.n_layers,
        w.backbone.config.d_model,
        PREFIX_LEN,
        K_REPARAM,
        seed,
    )
    .unwrap();
    strat.train(&w.backbone, &w.corpus, &w.manifest, init, &cfg).unwrap()
}

/// Stage two over every persona of a part, returning deployed prefixes
/// keyed by persona. `source` None means a fresh random initialization
/// per persona.
fn personalize_part(
    w: &StudyWorld,
    part: &str,
    source: Option<&ReparamPrefix>,
    epochs: usize,
    seed: u64,
) -> BTreeMap<String, DeployedPrefix> {
    let mut out = BTreeMap::new();
    for pid in w.manifest.personas_in_part(part).unwrap() {
        let pseed = persona_seed(seed, pid);
        let init = match source {
            Some(s) => s.clone(),
            None => ReparamPrefix::init(
                w.backbone.config.n_layers,
                w.backbone.config.d_model,
                PREFIX_LEN,
                K_REPARAM,
                pseed,
            )
            .unwrap(),
        };
        let mut cfg = PersonaTrainConfig::new(pseed);
        cfg.lr = 5e-3;
        cfg.batch_size = 4;
        cfg.max_epochs = epochs;
        cfg.patience = epochs;
        let rec = w.corpus.get(pid).unwrap();
        let to = train_personalized(&w.backbone, init, rec, &w.manifest.splits[pid], &cfg).unwrap();
        out.insert(pid.clone(), to.prefix.deploy().unwrap());
    }
    out
}

fn eval_part(
    w: &StudyWorld,
    backbone: &Backbone,
    provider: PrefixProvider<'_>,
    part: &str,
) -> MetricBlock {
    let slots = SlotVocab::from_spec(&w.spec);
    let mut judge = KeywordJudge::new(&slots);
    let params = param_accounting(
        backbone.config.n_layers,
        backbone.config.d_model,
        PREFIX_LEN,
        backbone.weights.param_count(),
    );
    let cfg = EvalConfig {
        setting: "study".into(),
        part: part.into(),
        beam: 3,
        max_new_tokens: 10,
    };
    evaluate_setting(backbone, &w.corpus, &w.manifest, provider, &mut judge, params, &cfg)
        .unwrap()
        .metrics
}

/// Mean C over one persona's held-out dialogues under a fixed prefix.
fn persona_c(
    backbone: &Backbone,
    prefix: &DeployedPrefix,
    rec: &PersonaRecord,
    test_idxs: &[usize],
    slots: &SlotVocab,
) -> f64 {
    let mut judge = KeywordJudge::new(slots);
    let mut total = 0i64;
    let mut n = 0usize;
    for &di in test_idxs {
        let dialogue = &rec.dialogues[di];
        for ti in 1..dialogue.len() {
            if dialogue[ti].speaker != 2 {
                continue;
            }
            let mut ids = Vec::new();
            for turn in &dialogue[..ti] {
                ids.push(if turn.speaker == 1 { S1 } else { S2 });
                ids.extend(backbone.vocab.tokenize(&turn.text));
                ids.push(EOU);
            }
            let resp = generate_response(backbone, Some(prefix), &ids, 3, 10).unwrap();
            total += c_score(&resp, &rec.description, &mut judge).unwrap();
            n += 1;
        }
    }
    total as f64 / n as f64
}

/// Small world for the exactness criteria: 2 layers, 16 dims, a handful
/// of personas. Deterministic in its arguments alone.
fn tiny_world(pretrain_epochs: usize) -> (SyntheticSpec, Corpus, SplitManifest, Backbone) {
    let mut spec = SyntheticSpec::default();
    spec.personas_regular = 4;
    spec.personas_few_shot = 1;
    spec.regular_dialogues = (6, 8);
    spec.few_shot_dialogues = 4;
    spec.exchanges_per_dialogue = 3;
    spec.seed = 17;
    let corpus = generate_synthetic(&spec).unwrap();
    let (manifest, _) = build_manifest(&corpus, FEW_SHOT_THRESHOLD, 1, 19).unwrap();
    let cfg = BackboneConfig {
        vocab_size: 64,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 32,
        max_context: 96,
    };
    let mut pcfg = PretrainConfig::new(pretrain_epochs, 23);
    pcfg.lr = 5e-3;
    pcfg.batch_size = 8;
    let (backbone, _) = pretrain_backbone(&corpus, &cfg, &pcfg).unwrap();
    (spec, corpus, manifest, backbone)
}

fn first_part_a_samples(
    corpus: &Corpus,
    manifest: &SplitManifest,
    backbone: &Backbone,
    reserve: usize,
) -> Vec<pkt_core::data::EncodedSample> {
    let pid = &manifest.personas_in_part("A").unwrap()[0];
    let rec = corpus.get(pid).unwrap();
    encode_split_samples(backbone, rec, &manifest.splits[pid].train, reserve).unwrap()
}

#[test]
fn criterion_01_prefix_gradients_match_finite_differences() {
    let (_, corpus, manifest, backbone) = tiny_world(2);
    let samples = first_part_a_samples(&corpus, &manifest, &backbone, 3);
    let sample = samples.iter().min_by_key(|s| s.ids.len()).unwrap();
    let reparam = ReparamPrefix::init(2, 16, 3, 8, 0).unwrap();
    let params: Vec<_> = reparam.param_list().into_iter().cloned().collect();
    let n_params: usize = params.iter().map(|a| a.len()).sum();

    let t0 = Instant::now();
    let worst = grad_check(
        |g, ids| -> Result<_> {
            let bound = BoundReparam {
                p_prime: ids[0],
                w1: ids[1],
                b1: ids[2],
                w2: ids[3],
                b2: ids[4],
            };
            let bb = BoundBackbone::bind(g, &backbone.weights, false);
            let prefix = materialize_prefix(g, &bound, 2, 16)?;
            lm_loss(g, &bb, &backbone.config, Some(&prefix), sample)
        },
        &params,
        1e-5,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();

    assert!(worst < 1e-4, "max relative gradient error {worst:.3e}");
    assert!(secs < 60.0, "gradient check took {secs:.1}s");
    println!(
        "criterion 01 PASS: analytic vs central-difference gradients, \
         max relative error {worst:.2e} over {n_params} prefix parameters in {secs:.1}s"
    );
}

#[test]
fn criterion_02_backbone_bytes_frozen_through_training() {
    let (_, corpus, manifest, backbone) = tiny_world(2);
    let dir = tempfile::tempdir().unwrap();
    let before_path = dir.path().join("before.pktb");
    backbone.save(&before_path).unwrap();
    let before = std::fs::read(&before_path).unwrap();
    let digest_before = backbone.digest();

    let init = |seed| ReparamPrefix::init(2, 16, 4, 8, seed).unwrap();
    let mut src_cfg = SourceTrainConfig::new(1);
    src_cfg.max_epochs = 2;
    src_cfg.patience = 2;
    source_strategy_by_name("base")
        .unwrap()
        .train(&backbone, &corpus, &manifest, init(1), &src_cfg)
        .unwrap();
    src_cfg.meta.iterations = 3;
    src_cfg.meta.n_personas = 2;
    source_strategy_by_name("ppreptile")
        .unwrap()
        .train(&backbone, &corpus, &manifest, init(2), &src_cfg)
        .unwrap();
    let pid = &manifest.personas_in_part("B").unwrap()[0];
    let mut pcfg = PersonaTrainConfig::new(3);
    pcfg.max_epochs = 2;
    pcfg.patience = 2;
    train_personalized(&backbone, init(3), corpus.get(pid).unwrap(), &manifest.splits[pid], &pcfg)
        .unwrap();

    let after_path = dir.path().join("after.pktb");
    backbone.save(&after_path).unwrap();
    let after = std::fs::read(&after_path).unwrap();
    assert_eq!(digest_before, backbone.digest());
    assert_eq!(before, after, "backbone bytes changed across training runs");
    println!(
        "criterion 02 PASS: backbone bytes identical ({} bytes) after source, \
         meta, and personalized training",
        before.len()
    );
}

#[test]
fn criterion_03_reptile_reduces_to_scaled_sgd_step() {
    let (_, corpus, manifest, backbone) = tiny_world(1);
    let samples: Vec<_> = first_part_a_samples(&corpus, &manifest, &backbone, 4)
        .into_iter()
        .take(2)
        .collect();
    let theta = ReparamPrefix::init(2, 16, 4, 8, 10).unwrap();
    let mut meta = MetaTrainConfig::new(1, 0);
    meta.alpha = 0.05;
    meta.beta = 0.7;
    meta.k_inner = 1;
    meta.n_personas = 1;
    meta.b_in = samples.len();
    meta.inner_optimizer = "sgd".into();

    // one inner step over all samples, then the outer pull toward it
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (w, _) = ppreptile_inner(&backbone, &theta, &samples, &meta, &mut rng).unwrap();
    let composed = ppreptile_outer(&theta, &[w], meta.beta).unwrap();

    // the same batch as a single descent step at the product rate,
    // assembled here from graph primitives rather than the training loop
    let mut g = Graph::new();
    let bound = theta.bind(&mut g);
    let bb = BoundBackbone::bind(&mut g, &backbone.weights, false);
    let prefix = materialize_prefix(&mut g, &bound, 2, 16).unwrap();
    let terms: Vec<_> = samples
        .iter()
        .map(|s| lm_loss(&mut g, &bb, &backbone.config, Some(&prefix), s).unwrap())
        .collect();
    let loss = g.mean_scalars(&terms).unwrap();
    g.backward(loss).unwrap();
    let grads: Vec<_> = bound.node_list().iter().map(|&n| g.grad(n)).collect();
    let mut direct: Vec<_> = theta.param_list().into_iter().cloned().collect();
    Sgd.step(&mut direct, &grads, meta.alpha * meta.beta).unwrap();

    let mut worst: f64 = 0.0;
    for (a, b) in composed.param_list().iter().zip(&direct) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let rel = (x - y).abs() / x.abs().max(1.0);
            assert!(rel <= 1e-12, "{x} vs {y}");
            worst = worst.max(rel);
        }
    }
    println!(
        "criterion 03 PASS: one meta iteration (n=1, k=1, SGD) equals one SGD step \
         at alpha*beta, worst relative difference {worst:.2e}"
    );
}

#[test]
fn criterion_04_temperature_mixing_matches_oracles() {
    let q = temperature_mix(&[8, 2], 10.0).unwrap();
    assert!((q[0] - 0.534602).abs() < 1e-5, "got {}", q[0]);
    assert!((q[1] - 0.465398).abs() < 1e-5, "got {}", q[1]);

    let q1 = temperature_mix(&[8, 2], 1.0).unwrap();
    assert_eq!(q1, vec![0.8, 0.2]);

    let qflat = temperature_mix(&[8, 2], 1e6).unwrap();
    assert!((qflat[0] - qflat[1]).abs() < 1e-4, "spread {:?}", qflat);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let len = rng.gen_range(1..=8);
        let counts: Vec<usize> = (0..len).map(|_| rng.gen_range(1..=50)).collect();
        for t in [0.5, 1.0, 2.0, 10.0, 1e6] {
            let q = temperature_mix(&counts, t).unwrap();
            let sum: f64 = q.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "sum {sum} at T={t} for {counts:?}");
            assert!(q.iter().all(|&p| p > 0.0));
        }
    }
    println!(
        "criterion 04 PASS: [8,2] at T=10 -> [{:.6}, {:.6}], T=1 exact shares, \
         T=1e6 flat; 1000 random mixes sum to 1 within 1e-12",
        q[0], q[1]
    );
}

/// Overlap F1 the slow way: count every n-gram by linear scan, no maps.
fn oracle_ngram_f1(hyp_tokens: &[String], ref_tokens: &[String], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    fn grams(tokens: &[String], n: usize) -> Vec<&[String]> {
        if tokens.len() < n {
            Vec::new()
        } else {
            tokens.windows(n).collect()
        }
    }
    let h = grams(hyp_tokens, n);
    let r = grams(ref_tokens, n);
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let count = |pool: &[&[String]], gram: &[String]| pool.iter().filter(|g| **g == gram).count();
    let mut seen: Vec<&[String]> = Vec::new();
    let mut overlap = 0usize;
    for gram in &h {
        if seen.contains(gram) {
            continue;
        }
        seen.push(gram);
        overlap += count(&h, gram).min(count(&r, gram));
    }
    let p = overlap as f64 / h.len() as f64;
    let rcl = overlap as f64 / r.len() as f64;
    if p + rcl == 0.0 {
        0.0
    } else {
        2.0 * p * rcl / (p + rcl)
    }
}

/// LCS F1 over a full quadratic table instead of rolling rows.
fn oracle_lcs_f1(hyp_tokens: &[String], ref_tokens: &[String]) -> f64 {
    if hyp_tokens.is_empty() || ref_tokens.is_empty() {
        return 0.0;
    }
    let (n, m) = (hyp_tokens.len(), ref_tokens.len());
    let mut table = vec![vec![0usize; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            table[i][j] = if hyp_tokens[i - 1] == ref_tokens[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    let l = table[n][m] as f64;
    let p = l / n as f64;
    let r = l / m as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[test]
fn criterion_05_overlap_metrics_match_brute_force_oracles() {
    assert_eq!(ngram_f1("the cat sat", "the cat ran", 1), 2.0 / 3.0);
    assert_eq!(lcs_f1("my favorite color blue", "my favorite color red"), 0.75);

    let words = ["a", "b", "c", "dog", "cat", "blue", "red", "is", "my", "."];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..1000 {
        let draw = |rng: &mut ChaCha8Rng| -> Vec<String> {
            let len = rng.gen_range(0..12);
            (0..len).map(|_| words[rng.gen_range(0..words.len())].to_string()).collect()
        };
        let hyp_tokens = draw(&mut rng);
        let ref_tokens = draw(&mut rng);
        let hyp = hyp_tokens.join(" ");
        let reference = ref_tokens.join(" ");
        // the joined strings tokenize back to the same word lists
        assert_eq!(metric_tokens(&hyp), hyp_tokens);
        for n in 1..=2 {
            let lib = ngram_f1(&hyp, &reference, n);
            let oracle = oracle_ngram_f1(&hyp_tokens, &ref_tokens, n);
            assert_eq!(lib, oracle, "case {case} n={n}: '{hyp}' vs '{reference}'");
        }
        let lib = lcs_f1(&hyp, &reference);
        let oracle = oracle_lcs_f1(&hyp_tokens, &ref_tokens);
        assert_eq!(lib, oracle, "case {case} lcs: '{hyp}' vs '{reference}'");
    }
    println!(
        "criterion 05 PASS: ngram and LCS F1 bit-identical to brute-force oracles \
         on 1000 random pairs; hand cases 2/3 and 0.75 exact"
    );
}

/// Judge with verdicts fixed by input lengths, for exercising the score
/// aggregation without any trait vocabulary.
struct ScriptedJudge;

impl ConsistencyJudge for ScriptedJudge {
    fn name(&self) -> &'static str {
        "scripted"
    }
    fn judge(&mut self, utterance: &str, persona_sentence: &str) -> Result<i32> {
        Ok(((utterance.len() + persona_sentence.len()) % 3) as i32 - 1)
    }
}

#[test]
fn criterion_06_consistency_score_additive_bounded_and_contradiction() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let utterance: String = "x".repeat(rng.gen_range(0..9));
        let m = rng.gen_range(0..6);
        let descriptions: Vec<String> =
            (0..m).map(|_| "y".repeat(rng.gen_range(0..9))).collect();
        let total = c_score(&utterance, &descriptions, &mut ScriptedJudge).unwrap();
        let by_hand: i64 = descriptions
            .iter()
            .map(|s| ScriptedJudge.judge(&utterance, s).unwrap() as i64)
            .sum();
        assert_eq!(total, by_hand);
        assert!(total.unsigned_abs() as usize <= m, "|{total}| > {m}");
    }

    let slots = SlotVocab::from_spec(&SyntheticSpec::default());
    let mut judge = KeywordJudge::new(&slots);
    let description = vec!["my favorite color is blue .".to_string()];
    assert_eq!(c_score("my favorite color is purple .", &description, &mut judge).unwrap(), -1);
    assert_eq!(c_score("my favorite color is blue .", &description, &mut judge).unwrap(), 1);
    assert_eq!(c_score("i am doing well thanks .", &description, &mut judge).unwrap(), 0);
    println!(
        "criterion 06 PASS: score equals the verdict sum and stays within +-m \
         on 200 random cases; keyword judge scores purple-vs-blue as -1"
    );
}

#[test]
fn criterion_07_parameter_accounting_scales() {
    let at_scale = param_accounting(24, 1024, 7, 345_000_000);
    assert_eq!(at_scale.deployed, 344_064);
    assert_eq!(at_scale.deployed, 2 * 24 * 7 * 1024);
    assert!(at_scale.ratio < 0.001, "ratio {}", at_scale.ratio);

    let (_, _, _, backbone) = tiny_world(1);
    let desk = param_accounting(
        backbone.config.n_layers,
        backbone.config.d_model,
        PREFIX_LEN,
        backbone.weights.param_count(),
    );
    assert_eq!(desk.deployed, 2 * 2 * PREFIX_LEN * 16);
    assert_eq!(desk.ratio, desk.deployed as f64 / desk.backbone as f64);

    // a store holds one such block per persona plus one for the source
    let dir = tempfile::tempdir().unwrap();
    let store = PrefixStore::open(dir.path(), &backbone).unwrap();
    let n_personas = 3usize;
    let meta = |key: &str| EntryMeta {
        key: key.into(),
        strategy: "base".into(),
        init: "fresh".into(),
        seed: 0,
        backbone_digest: String::new(),
        config: BTreeMap::new(),
        final_train_loss: None,
        best_valid_loss: None,
        epochs: 0,
    };
    for i in 0..=n_personas {
        let key = if i == 0 { SOURCE_KEY.to_string() } else { format!("p{i:03}") };
        let deployed =
            ReparamPrefix::init(2, 16, PREFIX_LEN, K_REPARAM, i as u64).unwrap().deploy().unwrap();
        store.save_entry(&key, &deployed, None, &meta(&key), &[]).unwrap();
    }
    let total: usize = store
        .keys()
        .unwrap()
        .iter()
        .map(|k| store.load_deployed(k).unwrap().element_count())
        .sum();
    assert_eq!(total, (n_personas + 1) * deployed_count(2, PREFIX_LEN, 16));
    println!(
        "criterion 07 PASS: 24x1024 with 7 prefix rows deploys 344064 floats \
         ({:.4}% of 345M); store totals (N+1) deployed blocks",
        at_scale.ratio * 100.0
    );
}

#[test]
fn criterion_08_personalization_beats_agnostic_baselines() {
    let w = study_world();
    let t0 = Instant::now();
    let budget = 4usize;
    let (mut a_wins, mut b_wins, mut c_wins) = (0, 0, 0);
    for seed in SEEDS {
        let src = base_source(seed);

        // (a) personalized prefixes vs a fine-tuned backbone with none
        let personalized = personalize_part(w, "B", Some(src), 30, seed);
        let mb = eval_part(w, &w.backbone, PrefixProvider::PerPersona(&personalized), "B");
        let mut ft_cfg = FinetuneConfig::new(seed);
        ft_cfg.lr = 1e-3;
        ft_cfg.batch_size = 16;
        ft_cfg.max_epochs = 4;
        ft_cfg.patience = 4;
        let (tuned, _, _) =
            finetune_backbone(&w.backbone, &w.corpus, &w.manifest, &["A", "B"], &ft_cfg).unwrap();
        let mf = eval_part(w, &tuned, PrefixProvider::None, "B");
        let (ca, cf) = (mb.c_mean.unwrap(), mf.c_mean.unwrap());
        if ca > cf {
            a_wins += 1;
        }

        // (b) source-initialized vs random-initialized at the same budget
        let si = personalize_part(w, "B", Some(src), budget, seed);
        let ri = personalize_part(w, "B", None, budget, seed);
        let f_si = eval_part(w, &w.backbone, PrefixProvider::PerPersona(&si), "B").f1_1.unwrap();
        let f_ri = eval_part(w, &w.backbone, PrefixProvider::PerPersona(&ri), "B").f1_1.unwrap();
        if f_si > f_ri {
            b_wins += 1;
        }

        // (c) reweighted persona mixing vs plain pooling, few-shot part
        let tsrc = train_study_source(w, "temperature", seed);
        let pc_t = personalize_part(w, "C", Some(&tsrc.prefix), 30, seed);
        let pc_b = personalize_part(w, "C", Some(src), 30, seed);
        let f_t = eval_part(w, &w.backbone, PrefixProvider::PerPersona(&pc_t), "C").f1_1.unwrap();
        let f_b = eval_part(w, &w.backbone, PrefixProvider::PerPersona(&pc_b), "C").f1_1.unwrap();
        if f_t >= f_b {
            c_wins += 1;
        }

        println!(
            "  seed {seed}: (a) C {ca:+.4} vs {cf:+.4} | (b) F1 {f_si:.4} vs {f_ri:.4} \
             | (c) F1 {f_t:.4} vs {f_b:.4}"
        );
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 1800.0, "study took {secs:.0}s");
    assert!(a_wins * 2 > SEEDS.len(), "(a) holds on {a_wins}/{} seeds", SEEDS.len());
    assert!(b_wins * 2 > SEEDS.len(), "(b) holds on {b_wins}/{} seeds", SEEDS.len());
    assert!(c_wins * 2 > SEEDS.len(), "(c) holds on {c_wins}/{} seeds", SEEDS.len());
    println!(
        "criterion 08 PASS: per-seed majorities (a) {a_wins}/3 personalized C beats \
         fine-tuned, (b) {b_wins}/3 source init beats random init at {budget} epochs, \
         (c) {c_wins}/3 mixing helps few-shot F1; {secs:.0}s total"
    );
}

#[test]
fn criterion_09_meta_source_adapts_in_fewer_epochs() {
    let w = study_world();
    let slots = SlotVocab::from_spec(&w.spec);
    let tau = 0.15;
    let max_ep = 6usize;
    let mut wins = 0usize;
    let mut pairs = 0usize;
    for seed in SEEDS {
        let base = base_source(seed);
        let meta = train_study_source(w, "ppreptile", seed);
        for pid in w.manifest.personas_in_part("C").unwrap() {
            let rec = w.corpus.get(pid).unwrap();
            let splits = &w.manifest.splits[pid];
            let pseed = persona_seed(seed, pid);
            // first epoch at which the adapted prefix's held-out C
            // reaches tau; epoch 0 is the unadapted source itself
            let epochs_to = |source: &ReparamPrefix| -> usize {
                let c0 = persona_c(&w.backbone, &source.deploy().unwrap(), rec, &splits.test, &slots);
                if c0 >= tau {
                    return 0;
                }
                let mut cfg = PersonaTrainConfig::new(pseed);
                cfg.lr = 5e-3;
                cfg.batch_size = 4;
                cfg.max_epochs = max_ep;
                cfg.patience = max_ep;
                cfg.snapshot_each_epoch = true;
                let to = train_personalized(&w.backbone, source.clone(), rec, splits, &cfg).unwrap();
                for (e, snap) in to.snapshots.iter().enumerate() {
                    let c = persona_c(&w.backbone, &snap.deploy().unwrap(), rec, &splits.test, &slots);
                    if c >= tau {
                        return e + 1;
                    }
                }
                max_ep + 1
            };
            let eb = epochs_to(base);
            let em = epochs_to(&meta.prefix);
            pairs += 1;
            if em <= eb {
                wins += 1;
            }
            println!("  seed {seed} {pid}: base {eb} meta {em}");
        }
    }
    assert!(pairs >= 15, "need at least 5 personas x 3 seeds, got {pairs} pairs");
    assert!(wins * 2 > pairs, "meta source faster or equal on {wins}/{pairs} pairs");
    println!(
        "criterion 09 PASS: meta-learned source reaches C >= {tau} in no more \
         epochs than the pooled source on {wins}/{pairs} persona-seed pairs"
    );
}

/// One full run into `dir`: corpus, splits, pretraining, source prefix,
/// two personalized prefixes, and an evaluation report. Everything that
/// lands on disk is a function of the constants below.
fn pipeline_artifacts(dir: &Path) {
    let (spec, corpus, manifest, backbone) = tiny_world(3);
    backbone.save(&dir.join("backbone.pktb")).unwrap();
    let store = PrefixStore::open(&dir.join("store"), &backbone).unwrap();

    let mut src_cfg = SourceTrainConfig::new(31);
    src_cfg.max_epochs = 2;
    src_cfg.patience = 2;
    let init = ReparamPrefix::init(2, 16, 4, 8, 31).unwrap();
    let src = source_strategy_by_name("base")
        .unwrap()
        .train(&backbone, &corpus, &manifest, init, &src_cfg)
        .unwrap();
    let entry = |key: &str, seed: u64, out: &TrainOutput| EntryMeta {
        key: key.into(),
        strategy: "base".into(),
        init: "source".into(),
        seed,
        backbone_digest: String::new(),
        config: BTreeMap::new(),
        final_train_loss: out.log.last().map(|l| l.train_loss),
        best_valid_loss: None,
        epochs: out.log.len(),
    };
    store
        .save_entry(SOURCE_KEY, &src.prefix.deploy().unwrap(), Some(&src.prefix), &entry(SOURCE_KEY, 31, &src), &src.log)
        .unwrap();

    let mut prefixes = BTreeMap::new();
    for pid in manifest.personas_in_part("B").unwrap() {
        let pseed = persona_seed(31, pid);
        let mut cfg = PersonaTrainConfig::new(pseed);
        cfg.max_epochs = 2;
        cfg.patience = 2;
        let out = train_personalized(
            &backbone,
            src.prefix.clone(),
            corpus.get(pid).unwrap(),
            &manifest.splits[pid],
            &cfg,
        )
        .unwrap();
        let deployed = out.prefix.deploy().unwrap();
        store.save_entry(pid, &deployed, None, &entry(pid, pseed, &out), &out.log).unwrap();
        prefixes.insert(pid.clone(), deployed);
    }

    let slots = SlotVocab::from_spec(&spec);
    let mut judge = KeywordJudge::new(&slots);
    let params = param_accounting(2, 16, 4, backbone.weights.param_count());
    let cfg = EvalConfig {
        setting: "personalized-B".into(),
        part: "B".into(),
        beam: 3,
        max_new_tokens: 10,
    };
    let report = evaluate_setting(
        &backbone,
        &corpus,
        &manifest,
        PrefixProvider::PerPersona(&prefixes),
        &mut judge,
        params,
        &cfg,
    )
    .unwrap();
    report.save(&dir.join("report.json")).unwrap();
}

#[test]
fn criterion_10_fixed_seed_runs_are_byte_identical() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    pipeline_artifacts(d1.path());
    pipeline_artifacts(d2.path());

    let mut compared = 0usize;
    let mut rel_paths = vec!["backbone.pktb".to_string(), "report.json".to_string()];
    for entry in std::fs::read_dir(d1.path().join("store")).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        rel_paths.push(format!("store/{name}"));
    }
    rel_paths.sort();
    for rel in &rel_paths {
        let a = std::fs::read(d1.path().join(rel)).unwrap();
        let b = std::fs::read(d2.path().join(rel)).unwrap();
        assert_eq!(a, b, "artifact {rel} differs between identically seeded runs");
        compared += 1;
    }
    assert!(compared > 4, "expected prefix files plus report, compared {compared}");
    println!(
        "criterion 10 PASS: two identically seeded pipeline runs produced \
         byte-identical artifacts ({compared} files compared)"
    );
}

#[test]
fn criterion_11_dialogue_and_persona_splits_are_exact() {
    let ten = split_dialogues(10, 3).unwrap();
    assert_eq!(
        (ten.lists.train.len(), ten.lists.valid.len(), ten.lists.test.len()),
        (8, 1, 1)
    );

    for d in 1..=20usize {
        let r = split_dialogues(d, 7).unwrap();
        let (tr, va, te) = (r.lists.train.len(), r.lists.valid.len(), r.lists.test.len());
        assert_eq!(tr + va + te, d);
        assert_eq!(r.degenerate, d < 3);
        let mut all: Vec<usize> = r
            .lists
            .train
            .iter()
            .chain(&r.lists.valid)
            .chain(&r.lists.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..d).collect::<Vec<_>>(), "indices lost or duplicated at d={d}");
        if d >= 3 {
            let held = std::cmp::max(1, d / 10);
            assert_eq!((va, te), (held, held));
        }
    }

    // census with 239 few-shot speakers out of 1293, 300 drawn aside
    let personas: Vec<PersonaRecord> = (0..1293)
        .map(|i| PersonaRecord {
            persona_id: format!("q{i:04}"),
            description: vec![],
            dialogues: vec![
                vec![
                    Turn { speaker: 1, text: "hi".into() },
                    Turn { speaker: 2, text: "hello".into() },
                ];
                if i < 239 { 4 } else { 8 }
            ],
        })
        .collect();
    let p = partition_personas(&Corpus { personas }, 6, 300, 3).unwrap();
    assert_eq!((p.part_a.len(), p.part_b.len(), p.part_c.len()), (754, 300, 239));
    println!(
        "criterion 11 PASS: 10 dialogues split 8/1/1, d=1..20 partitions are exact, \
         and the 1293-persona census partitions into 754/300/239"
    );
}
