//! Generation quality metrics, persona-consistency scoring with
//! pluggable judges, trainable-parameter accounting, and the per-part
//! evaluation runner that produces report JSON.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::process::{Child, Command, Stdio};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, SlotVocab, SplitManifest, Turn};
use crate::decode::generate_response;
use crate::model::Backbone;
use crate::prefix::DeployedPrefix;
use crate::tokenizer::{EOU, S1, S2};
use crate::{PktError, Result};

/// Lowercase, split punctuation into standalone tokens, then whitespace
/// split. All F1 metrics normalize both sides this way.
pub fn metric_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '\'' {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped multiset n-gram overlap F1. Either side lacking any n-gram of
/// the requested order scores 0.
pub fn ngram_f1(hypothesis: &str, reference: &str, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let hyp = metric_tokens(hypothesis);
    let refr = metric_tokens(reference);
    let hyp_grams = ngrams(&hyp, n);
    let ref_grams = ngrams(&refr, n);
    let hyp_total: usize = hyp_grams.values().sum();
    let ref_total: usize = ref_grams.values().sum();
    if hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let mut overlap = 0usize;
    for (gram, &count) in &hyp_grams {
        if let Some(&ref_count) = ref_grams.get(gram) {
            overlap += count.min(ref_count);
        }
    }
    f1(
        overlap as f64 / hyp_total as f64,
        overlap as f64 / ref_total as f64,
    )
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    // two rolling rows of the standard LCS table
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            curr[j + 1] = if ai == bj {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Token-level longest-common-subsequence F1.
pub fn lcs_f1(hypothesis: &str, reference: &str) -> f64 {
    let hyp = metric_tokens(hypothesis);
    let refr = metric_tokens(reference);
    if hyp.is_empty() || refr.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&hyp, &refr) as f64;
    f1(l / hyp.len() as f64, l / refr.len() as f64)
}

/// Entailment verdict for one persona sentence: +1 entailed, -1
/// contradicted, 0 independent.
pub trait ConsistencyJudge {
    fn name(&self) -> &'static str;
    fn judge(&mut self, utterance: &str, persona_sentence: &str) -> Result<i32>;
}

/// Deterministic judge over closed trait vocabularies: a persona sentence
/// naming one slot value is entailed by utterances mentioning that value
/// and contradicted by utterances naming a different value of the same
/// slot. Sentences that do not name exactly one known value are treated
/// as independent of everything.
pub struct KeywordJudge {
    slots: BTreeMap<String, Vec<String>>,
}

impl KeywordJudge {
    pub fn new(vocab: &SlotVocab) -> KeywordJudge {
        KeywordJudge {
            slots: vocab.slots.clone(),
        }
    }

    /// The (slot, value) claim a sentence makes, if it names exactly one
    /// known value across all slots.
    fn claim(&self, sentence: &str) -> Option<(&str, &str)> {
        let tokens = metric_tokens(sentence);
        let mut found: Option<(&str, &str)> = None;
        for (slot, values) in &self.slots {
            for value in values {
                if tokens.iter().any(|t| t == value) {
                    if found.is_some() {
                        return None;
                    }
                    found = Some((slot.as_str(), value.as_str()));
                }
            }
        }
        found
    }
}

impl ConsistencyJudge for KeywordJudge {
    fn name(&self) -> &'static str {
        "keyword"
    }

    fn judge(&mut self, utterance: &str, persona_sentence: &str) -> Result<i32> {
        let Some((slot, value)) = self.claim(persona_sentence) else {
            return Ok(0);
        };
        let tokens = metric_tokens(utterance);
        if tokens.iter().any(|t| t == value) {
            return Ok(1);
        }
        let others = &self.slots[slot];
        if others
            .iter()
            .any(|other| other != value && tokens.iter().any(|t| t == other))
        {
            return Ok(-1);
        }
        Ok(0)
    }
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    utterance: &'a str,
    persona_sentence: &'a str,
}

#[derive(Deserialize)]
struct JudgeResponse {
    label: i32,
}

/// Bridge to an external judgment program speaking line-delimited JSON:
/// one {"utterance", "persona_sentence"} request per line in, one
/// {"label": -1|0|1} per line out.
pub struct SubprocessJudge {
    child: Child,
    reader: BufReader<std::process::ChildStdout>,
}

impl SubprocessJudge {
    pub fn spawn(command: &str) -> Result<SubprocessJudge> {
        let parts: Vec<&str> = command.split_whitespace().collect();
        if parts.is_empty() {
            return Err(PktError::Config("empty judge command".into()));
        }
        let mut child = Command::new(parts[0])
            .args(&parts[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| PktError::Config(format!("cannot start judge '{command}': {e}")))?;
        let stdout = child
            .stdout
            .take()
            .ok_or_else(|| PktError::Config("judge has no stdout".into()))?;
        Ok(SubprocessJudge {
            child,
            reader: BufReader::new(stdout),
        })
    }
}

impl ConsistencyJudge for SubprocessJudge {
    fn name(&self) -> &'static str {
        "subprocess"
    }

    fn judge(&mut self, utterance: &str, persona_sentence: &str) -> Result<i32> {
        let request = serde_json::to_string(&JudgeRequest {
            utterance,
            persona_sentence,
        })?;
        let stdin = self
            .child
            .stdin
            .as_mut()
            .ok_or_else(|| PktError::Config("judge stdin closed".into()))?;
        writeln!(stdin, "{request}")?;
        stdin.flush()?;
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(PktError::Data("judge process closed its output".into()));
        }
        let response: JudgeResponse = serde_json::from_str(line.trim())
            .map_err(|e| PktError::Data(format!("bad judge response '{}': {e}", line.trim())))?;
        if !(-1..=1).contains(&response.label) {
            return Err(PktError::Data(format!(
                "judge label {} outside -1..=1",
                response.label
            )));
        }
        Ok(response.label)
    }
}

impl Drop for SubprocessJudge {
    fn drop(&mut self) {
        drop(self.child.stdin.take());
        let _ = self.child.wait();
    }
}

/// Judge selected by spec string: "keyword" (needs slot vocabularies) or
/// "subprocess:<command>".
pub fn judge_from_spec(
    spec: &str,
    slots: Option<&SlotVocab>,
) -> Result<Box<dyn ConsistencyJudge + Send>> {
    if spec == "keyword" {
        let slots = slots.ok_or_else(|| {
            PktError::Config("keyword judge needs a slot vocabulary file".into())
        })?;
        return Ok(Box::new(KeywordJudge::new(slots)));
    }
    if let Some(command) = spec.strip_prefix("subprocess:") {
        return Ok(Box::new(SubprocessJudge::spawn(command)?));
    }
    Err(PktError::Config(format!(
        "unknown judge '{spec}', expected 'keyword' or 'subprocess:<command>'"
    )))
}

/// Sum of judge verdicts over the persona's description sentences.
pub fn c_score(
    utterance: &str,
    descriptions: &[String],
    judge: &mut dyn ConsistencyJudge,
) -> Result<i64> {
    let mut total = 0i64;
    for sentence in descriptions {
        total += judge.judge(utterance, sentence)? as i64;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ParamAccounting {
    pub deployed: usize,
    pub backbone: usize,
    pub ratio: f64,
}

/// Deployed prefix floats versus backbone floats. The deployed count is
/// what a store holds per persona; the source prefix adds one more such
/// block, hence (N+1) blocks for N personas.
pub fn param_accounting(
    n_layers: usize,
    d_model: usize,
    l_prefix: usize,
    backbone_count: usize,
) -> ParamAccounting {
    let deployed = crate::prefix::deployed_count(n_layers, l_prefix, d_model);
    ParamAccounting {
        deployed,
        backbone: backbone_count,
        ratio: deployed as f64 / backbone_count as f64,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricBlock {
    pub f1_1: Option<f64>,
    pub f1_2: Option<f64>,
    pub f1_lcs: Option<f64>,
    pub c_mean: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub setting: String,
    pub part: String,
    pub metrics: MetricBlock,
    pub params: ParamAccounting,
    pub samples: usize,
    pub skipped_personas: usize,
    /// F1 numbers are means of per-response F1, not pooled counts.
    pub f1_aggregation: String,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Where each persona's prefix comes from during evaluation.
pub enum PrefixProvider<'a> {
    /// No-prefix baseline (for example a fine-tuned backbone).
    None,
    /// One prefix per persona; personas without an entry are skipped.
    PerPersona(&'a BTreeMap<String, DeployedPrefix>),
    /// One prefix applied to every persona (for example the raw source).
    Shared(&'a DeployedPrefix),
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub setting: String,
    pub part: String,
    pub beam: usize,
    pub max_new_tokens: usize,
}

/// One decoded response with everything needed to score it.
struct Scored {
    hypothesis: String,
    reference: String,
    persona_id: String,
}

/// Mean metrics over (hypothesis, reference, persona descriptions)
/// triples. Empty input yields null metrics.
fn aggregate(
    scored: &[Scored],
    descriptions: &BTreeMap<String, Vec<String>>,
    judge: &mut dyn ConsistencyJudge,
) -> Result<MetricBlock> {
    if scored.is_empty() {
        return Ok(MetricBlock {
            f1_1: None,
            f1_2: None,
            f1_lcs: None,
            c_mean: None,
        });
    }
    let n = scored.len() as f64;
    let (mut s1, mut s2, mut sl, mut sc) = (0.0, 0.0, 0.0, 0.0);
    for item in scored {
        s1 += ngram_f1(&item.hypothesis, &item.reference, 1);
        s2 += ngram_f1(&item.hypothesis, &item.reference, 2);
        sl += lcs_f1(&item.hypothesis, &item.reference);
        let desc = &descriptions[&item.persona_id];
        sc += c_score(&item.hypothesis, desc, judge)? as f64;
    }
    Ok(MetricBlock {
        f1_1: Some(s1 / n),
        f1_2: Some(s2 / n),
        f1_lcs: Some(sl / n),
        c_mean: Some(sc / n),
    })
}

fn history_budget(backbone: &Backbone, reserve: usize, max_new: usize) -> usize {
    backbone
        .config
        .max_context
        .saturating_sub(reserve + max_new + 1)
}

fn encode_history(backbone: &Backbone, turns: &[Turn], budget: usize) -> Vec<usize> {
    let mut kept: Vec<Vec<usize>> = Vec::new();
    let mut used = 0usize;
    for turn in turns.iter().rev() {
        let mut ids = vec![if turn.speaker == 1 { S1 } else { S2 }];
        ids.extend(backbone.vocab.tokenize(&turn.text));
        ids.push(EOU);
        if used + ids.len() > budget {
            break;
        }
        used += ids.len();
        kept.push(ids);
    }
    let mut out = Vec::with_capacity(used);
    for ids in kept.iter().rev() {
        out.extend_from_slice(ids);
    }
    out
}

/// Decode and score every speaker-2 test turn of every persona in the
/// part. Decoding fans out across personas; the merge order and all
/// aggregation are fixed, so reports are byte-stable for fixed inputs.
pub fn evaluate_setting(
    backbone: &Backbone,
    corpus: &Corpus,
    manifest: &SplitManifest,
    provider: PrefixProvider<'_>,
    judge: &mut dyn ConsistencyJudge,
    params: ParamAccounting,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let part_personas = manifest.personas_in_part(&cfg.part)?;
    let mut jobs: Vec<(&str, Option<&DeployedPrefix>)> = Vec::new();
    let mut skipped = 0usize;
    let mut sorted_ids: Vec<&str> = part_personas.iter().map(String::as_str).collect();
    sorted_ids.sort_unstable();
    for pid in sorted_ids {
        match &provider {
            PrefixProvider::None => jobs.push((pid, None)),
            PrefixProvider::Shared(p) => jobs.push((pid, Some(p))),
            PrefixProvider::PerPersona(map) => match map.get(pid) {
                Some(p) => jobs.push((pid, Some(p))),
                None => skipped += 1,
            },
        }
    }

    let results: Vec<Result<Vec<Scored>>> = jobs
        .par_iter()
        .map(|(pid, prefix)| -> Result<Vec<Scored>> {
            let rec = corpus
                .get(pid)
                .ok_or_else(|| PktError::Data(format!("persona '{pid}' not in corpus")))?;
            let splits = manifest
                .splits
                .get(*pid)
                .ok_or_else(|| PktError::Data(format!("persona '{pid}' missing from manifest")))?;
            let reserve = prefix.map_or(0, |p| p.l_prefix());
            let budget = history_budget(backbone, reserve, cfg.max_new_tokens);
            let mut out = Vec::new();
            for &di in &splits.test {
                let dialogue = rec.dialogues.get(di).ok_or_else(|| {
                    PktError::Data(format!("persona '{pid}' has no dialogue {di}"))
                })?;
                for (ti, turn) in dialogue.iter().enumerate() {
                    if turn.speaker != 2 || ti == 0 {
                        continue;
                    }
                    let history = encode_history(backbone, &dialogue[..ti], budget);
                    if history.is_empty() {
                        continue;
                    }
                    let hypothesis = generate_response(
                        backbone,
                        *prefix,
                        &history,
                        cfg.beam,
                        cfg.max_new_tokens,
                    )?;
                    out.push(Scored {
                        hypothesis,
                        reference: turn.text.clone(),
                        persona_id: pid.to_string(),
                    });
                }
            }
            Ok(out)
        })
        .collect();

    let mut scored = Vec::new();
    for r in results {
        scored.extend(r?);
    }
    let descriptions: BTreeMap<String, Vec<String>> = corpus
        .personas
        .iter()
        .map(|p| (p.persona_id.clone(), p.description.clone()))
        .collect();
    let metrics = aggregate(&scored, &descriptions, judge)?;
    Ok(EvalReport {
        setting: cfg.setting.clone(),
        part: cfg.part.clone(),
        metrics,
        params,
        samples: scored.len(),
        skipped_personas: skipped,
        f1_aggregation: "mean_per_sentence".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn metric_tokens_lowercase_and_split_punctuation() {
        assert_eq!(
            metric_tokens("Hello, World!"),
            vec!["hello", ",", "world", "!"]
        );
        assert_eq!(metric_tokens("it's fine"), vec!["it's", "fine"]);
    }

    #[test]
    fn ngram_f1_hand_cases() {
        assert_eq!(ngram_f1("a b c", "a b c", 1), 1.0);
        assert!((ngram_f1("a b c", "a c d", 1) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ngram_f1("a b", "c d", 1), 0.0);
        assert_eq!(ngram_f1("", "a b", 1), 0.0);
        assert!((ngram_f1("a b c", "a b d", 2) - 0.5).abs() < 1e-12);
        // single-token strings have no bigrams
        assert_eq!(ngram_f1("a", "a", 2), 0.0);
    }

    #[test]
    fn ngram_clipping_limits_repeats() {
        // hyp has three "a", ref has one: clipped overlap is 1
        let score = ngram_f1("a a a", "a", 1);
        let p: f64 = 1.0 / 3.0;
        let r = 1.0;
        assert!((score - 2.0 * p * r / (p + r)).abs() < 1e-12);
    }

    #[test]
    fn lcs_f1_hand_cases() {
        assert_eq!(lcs_f1("x y z", "x y z"), 1.0);
        assert!((lcs_f1("a b c d", "a c d e") - 0.75).abs() < 1e-12);
        assert_eq!(lcs_f1("a b", "c d"), 0.0);
        assert_eq!(lcs_f1("", "a"), 0.0);
    }

    fn random_tokens(rng: &mut StdRng, max_len: usize) -> Vec<String> {
        let len = rng.gen_range(0..=max_len);
        (0..len)
            .map(|_| {
                let c = (b'a' + rng.gen_range(0..6)) as char;
                c.to_string()
            })
            .collect()
    }

    fn brute_ngram_f1(hyp: &[String], refr: &[String], n: usize) -> f64 {
        let grams = |t: &[String]| -> Vec<Vec<String>> {
            if t.len() < n {
                Vec::new()
            } else {
                t.windows(n).map(|w| w.to_vec()).collect()
            }
        };
        let h = grams(hyp);
        let mut r = grams(refr);
        if h.is_empty() || r.is_empty() {
            return 0.0;
        }
        let mut overlap = 0usize;
        for gram in &h {
            if let Some(pos) = r.iter().position(|g| g == gram) {
                r.remove(pos);
                overlap += 1;
            }
        }
        let p = overlap as f64 / h.len() as f64;
        let rec = overlap as f64 / grams(refr).len() as f64;
        if p + rec == 0.0 {
            0.0
        } else {
            2.0 * p * rec / (p + rec)
        }
    }

    fn brute_lcs(a: &[String], b: &[String]) -> usize {
        let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                table[i][j] = if a[i - 1] == b[j - 1] {
                    table[i - 1][j - 1] + 1
                } else {
                    table[i - 1][j].max(table[i][j - 1])
                };
            }
        }
        table[a.len()][b.len()]
    }

    #[test]
    fn metrics_agree_with_brute_force_on_random_pairs() {
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..1000 {
            let a = random_tokens(&mut rng, 8);
            let b = random_tokens(&mut rng, 8);
            let sa = a.join(" ");
            let sb = b.join(" ");
            for n in 1..=2 {
                let fast = ngram_f1(&sa, &sb, n);
                let slow = brute_ngram_f1(&a, &b, n);
                assert!((fast - slow).abs() < 1e-12, "ngram n={n} '{sa}' vs '{sb}'");
            }
            let l = brute_lcs(&a, &b) as f64;
            let expect = if a.is_empty() || b.is_empty() {
                0.0
            } else {
                let p = l / a.len() as f64;
                let r = l / b.len() as f64;
                if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) }
            };
            assert!((lcs_f1(&sa, &sb) - expect).abs() < 1e-12, "lcs '{sa}' vs '{sb}'");
        }
    }

    #[test]
    fn metrics_are_symmetric() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let a = random_tokens(&mut rng, 6).join(" ");
            let b = random_tokens(&mut rng, 6).join(" ");
            assert_eq!(ngram_f1(&a, &b, 1), ngram_f1(&b, &a, 1));
            assert_eq!(ngram_f1(&a, &b, 2), ngram_f1(&b, &a, 2));
            assert_eq!(lcs_f1(&a, &b), lcs_f1(&b, &a));
        }
    }

    fn test_slots() -> SlotVocab {
        let mut slots = BTreeMap::new();
        slots.insert(
            "color".to_string(),
            vec!["purple".to_string(), "blue".to_string(), "red".to_string()],
        );
        slots.insert(
            "pet".to_string(),
            vec!["cat".to_string(), "dog".to_string()],
        );
        SlotVocab { slots }
    }

    #[test]
    fn keyword_judge_detects_contradiction() {
        let mut judge = KeywordJudge::new(&test_slots());
        let verdict = judge
            .judge("my favorite color is blue", "my favorite color is purple")
            .unwrap();
        assert_eq!(verdict, -1);
    }

    #[test]
    fn keyword_judge_detects_entailment_and_independence() {
        let mut judge = KeywordJudge::new(&test_slots());
        assert_eq!(
            judge.judge("i love purple things", "my favorite color is purple").unwrap(),
            1
        );
        assert_eq!(
            judge.judge("i have a dog", "my favorite color is purple").unwrap(),
            0
        );
        // unparseable persona sentence: no known value named
        assert_eq!(judge.judge("anything", "i enjoy mornings").unwrap(), 0);
    }

    #[test]
    fn c_score_sums_verdicts_and_stays_bounded() {
        let mut judge = KeywordJudge::new(&test_slots());
        let descriptions = vec![
            "my favorite color is purple".to_string(),
            "i have a cat".to_string(),
            "i enjoy mornings".to_string(),
        ];
        let score = c_score("my purple cat is here", &descriptions, &mut judge).unwrap();
        assert_eq!(score, 2);
        let score = c_score("my blue dog is here", &descriptions, &mut judge).unwrap();
        assert_eq!(score, -2);
        let m = descriptions.len() as i64;
        assert!((-m..=m).contains(&score));
    }

    #[test]
    fn subprocess_judge_round_trips() {
        let script = "import sys, json\nfor line in sys.stdin:\n    req = json.loads(line)\n    label = 1 if 'yes' in req['utterance'] else 0\n    print(json.dumps({'label': label}), flush=True)\n";
        let path = std::env::temp_dir().join("pkt_judge_test.py");
        std::fs::write(&path, script).unwrap();
        let mut judge = SubprocessJudge::spawn(&format!("python3 {}", path.display())).unwrap();
        assert_eq!(judge.judge("yes indeed", "whatever").unwrap(), 1);
        assert_eq!(judge.judge("no", "whatever").unwrap(), 0);
    }

    #[test]
    fn param_accounting_paper_and_desk_examples() {
        let paper = param_accounting(24, 1024, 7, 345_000_000);
        assert_eq!(paper.deployed, 344_064);
        assert!(paper.ratio < 0.001, "ratio {}", paper.ratio);
        let desk = param_accounting(4, 64, 8, 1_000_000);
        assert_eq!(desk.deployed, 4096);
        assert_eq!(param_accounting(4, 64, 0, 1).deployed, 0);
    }

    #[test]
    fn param_ratio_monotone_in_prefix_length() {
        let mut last = 0.0;
        for l in 1..10 {
            let acc = param_accounting(4, 64, l, 1_000_000);
            assert!(acc.ratio > last);
            last = acc.ratio;
        }
    }

    #[test]
    fn aggregate_perfect_match_scores_one() {
        let scored = vec![
            Scored {
                hypothesis: "my favorite color is purple".into(),
                reference: "my favorite color is purple".into(),
                persona_id: "p".into(),
            },
            Scored {
                hypothesis: "i have a cat".into(),
                reference: "i have a cat".into(),
                persona_id: "p".into(),
            },
        ];
        let mut descriptions = BTreeMap::new();
        descriptions.insert("p".to_string(), vec!["my favorite color is purple".to_string()]);
        let mut judge = KeywordJudge::new(&test_slots());
        let m = aggregate(&scored, &descriptions, &mut judge).unwrap();
        assert_eq!(m.f1_1, Some(1.0));
        assert_eq!(m.f1_2, Some(1.0));
        assert_eq!(m.f1_lcs, Some(1.0));
        assert_eq!(m.c_mean, Some(0.5));
    }

    #[test]
    fn aggregate_empty_gives_null_metrics() {
        let mut judge = KeywordJudge::new(&test_slots());
        let m = aggregate(&[], &BTreeMap::new(), &mut judge).unwrap();
        assert_eq!(m.f1_1, None);
        assert_eq!(m.c_mean, None);
    }

    #[test]
    fn report_json_has_pinned_field_names() {
        let report = EvalReport {
            setting: "demo".into(),
            part: "B".into(),
            metrics: MetricBlock {
                f1_1: Some(0.5),
                f1_2: None,
                f1_lcs: Some(0.25),
                c_mean: Some(-0.5),
            },
            params: ParamAccounting {
                deployed: 4096,
                backbone: 1_000_000,
                ratio: 0.004096,
            },
            samples: 4,
            skipped_personas: 1,
            f1_aggregation: "mean_per_sentence".into(),
        };
        let json = report.to_json().unwrap();
        for key in [
            "\"setting\"",
            "\"part\"",
            "\"metrics\"",
            "\"f1_1\"",
            "\"f1_2\"",
            "\"f1_lcs\"",
            "\"c_mean\"",
            "\"params\"",
            "\"deployed\"",
            "\"backbone\"",
            "\"ratio\"",
            "\"samples\"",
            "\"skipped_personas\"",
        ] {
            assert!(json.contains(key), "missing {key} in {json}");
        }
        assert!(json.contains("null"));
    }

    #[test]
    fn judge_registry_rejects_unknown_spec() {
        assert!(judge_from_spec("bert", None).is_err());
        assert!(judge_from_spec("keyword", None).is_err());
        assert!(judge_from_spec("keyword", Some(&test_slots())).is_ok());
    }
}
