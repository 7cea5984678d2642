//! Two-stage prefix transfer: stage one trains a shared source prefix
//! across many personas (three interchangeable strategies), stage two
//! warm-starts one prefix per persona from it. Also the persona-agnostic
//! full fine-tune baseline and the digest-bound on-disk prefix store.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    encode_sample, response_samples, temperature_mix, BatchSampler, Corpus, EncodedSample,
    PersonaRecord, SplitLists, SplitManifest,
};
use crate::graph::Graph;
use crate::model::{lm_loss, Backbone, BoundBackbone};
use crate::optim::{optimizer_by_name, AdamW, LinearSchedule, Optimizer};
use crate::prefix::{materialize_prefix, DeployedPrefix, ReparamPrefix};
use crate::tensor::Array;
use crate::{PktError, Result};

/// Meta-learning hyperparameters: inner rate alpha, outer rate beta,
/// k_inner SGD steps per sampled persona, n_personas sampled per
/// iteration (the outer batch), b_in samples per inner step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub k_inner: usize,
    pub n_personas: usize,
    pub b_in: usize,
    pub inner_optimizer: String,
    pub iterations: usize,
    pub seed: u64,
}

impl MetaTrainConfig {
    /// Defaults match the downstream per-persona adaptation recipe (AdamW
    /// at the same step size and batch); the meta-initialization is only
    /// useful under the dynamics it was trained for.
    pub fn new(iterations: usize, seed: u64) -> Self {
        MetaTrainConfig {
            alpha: 5e-3,
            beta: 1.0,
            k_inner: 6,
            n_personas: 4,
            b_in: 4,
            inner_optimizer: "adamw".into(),
            iterations,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(PktError::Config(format!("alpha {} must be positive", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(PktError::Config(format!("beta {} must be positive", self.beta)));
        }
        if self.n_personas == 0 {
            return Err(PktError::Config("n_personas must be at least 1".into()));
        }
        if self.b_in == 0 {
            return Err(PktError::Config("b_in must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-persona adaptation hyperparameters. `patience` is the number of
/// consecutive epochs without validation improvement tolerated before
/// stopping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonaTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Keep a copy of the prefix after every epoch (adaptation-speed
    /// studies); the returned prefix is still the best-validation one.
    pub snapshot_each_epoch: bool,
    pub seed: u64,
}

impl PersonaTrainConfig {
    pub fn new(seed: u64) -> Self {
        PersonaTrainConfig {
            lr: 5e-3,
            batch_size: 4,
            max_epochs: 20,
            patience: 3,
            snapshot_each_epoch: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PktError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(PktError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Source-prefix training knobs shared by the strategies. `temperature`
/// is read by the temperature strategy, `meta` by the meta-learning one;
/// the rest drive the epoch loop of the non-meta strategies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub temperature: f64,
    pub meta: MetaTrainConfig,
    pub seed: u64,
}

impl SourceTrainConfig {
    pub fn new(seed: u64) -> Self {
        SourceTrainConfig {
            lr: 5e-3,
            batch_size: 8,
            max_epochs: 50,
            patience: 3,
            temperature: 10.0,
            meta: MetaTrainConfig::new(100, seed),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(PktError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(PktError::Config("batch size must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PktError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        self.meta.validate()
    }
}

/// One line of the training log; serialized as JSONL next to the prefix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
    pub lr: f64,
}

/// Result of any prefix-training run: the selected prefix (best
/// validation loss where a validation split exists, final state
/// otherwise), the per-epoch log, surfaced warnings, and optional
/// per-epoch snapshots.
pub struct TrainOutput {
    pub prefix: ReparamPrefix,
    pub log: Vec<EpochLog>,
    pub warnings: Vec<String>,
    pub snapshots: Vec<ReparamPrefix>,
}

/// Encoded response samples for the listed dialogues of one persona.
pub fn encode_split_samples(
    backbone: &Backbone,
    rec: &PersonaRecord,
    dialogue_idxs: &[usize],
    reserve: usize,
) -> Result<Vec<EncodedSample>> {
    let mut out = Vec::new();
    for &di in dialogue_idxs {
        let dialogue = rec.dialogues.get(di).ok_or_else(|| {
            PktError::Data(format!("persona '{}' has no dialogue {di}", rec.persona_id))
        })?;
        for (history, target) in response_samples(dialogue) {
            out.push(
                encode_sample(
                    &backbone.vocab,
                    history,
                    target,
                    backbone.config.max_context,
                    reserve,
                )
                .map_err(|e| {
                    PktError::Data(format!("persona '{}' dialogue {di}: {e}", rec.persona_id))
                })?,
            );
        }
    }
    Ok(out)
}

/// Part A laid out for source training: per-persona, per-train-dialogue
/// sample groups plus the pooled validation samples.
struct PartData {
    persona_ids: Vec<String>,
    train: Vec<Vec<Vec<EncodedSample>>>,
    valid: Vec<EncodedSample>,
}

fn collect_part(
    backbone: &Backbone,
    corpus: &Corpus,
    manifest: &SplitManifest,
    part: &str,
    reserve: usize,
) -> Result<PartData> {
    let ids = manifest.personas_in_part(part)?;
    let mut persona_ids: Vec<String> = ids.to_vec();
    persona_ids.sort_unstable();
    let mut train = Vec::with_capacity(persona_ids.len());
    let mut valid = Vec::new();
    for pid in &persona_ids {
        let rec = corpus
            .get(pid)
            .ok_or_else(|| PktError::Data(format!("persona '{pid}' not in corpus")))?;
        let splits = manifest
            .splits
            .get(pid)
            .ok_or_else(|| PktError::Data(format!("persona '{pid}' missing from manifest")))?;
        let mut groups = Vec::with_capacity(splits.train.len());
        for &di in &splits.train {
            groups.push(encode_split_samples(backbone, rec, &[di], reserve)?);
        }
        train.push(groups);
        valid.extend(encode_split_samples(backbone, rec, &splits.valid, reserve)?);
    }
    Ok(PartData {
        persona_ids,
        train,
        valid,
    })
}

/// Mean response cross-entropy of a deployed prefix over samples, no
/// updates. One graph per sample keeps memory flat.
pub fn prefix_valid_loss(
    backbone: &Backbone,
    reparam: &ReparamPrefix,
    samples: &[EncodedSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(PktError::Data("validation loss over zero samples".into()));
    }
    let deployed = reparam.deploy()?;
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let prefix = deployed.bind(&mut g);
        let bb = BoundBackbone::bind(&mut g, &backbone.weights, false);
        let loss = lm_loss(&mut g, &bb, &backbone.config, Some(&prefix), s)?;
        total += g.value(loss).scalar_value();
    }
    Ok(total / samples.len() as f64)
}

/// One optimizer step on the reparametrized prefix over a batch; the
/// backbone enters the graph as constants, so its gradients are
/// structurally zero. Returns the batch loss.
fn prefix_step(
    backbone: &Backbone,
    reparam: &mut ReparamPrefix,
    batch: &[&EncodedSample],
    opt: &mut dyn Optimizer,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = reparam.bind(&mut g);
    let bb = BoundBackbone::bind(&mut g, &backbone.weights, false);
    let prefix = materialize_prefix(
        &mut g,
        &bound,
        backbone.config.n_layers,
        backbone.config.d_model,
    )?;
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        terms.push(lm_loss(&mut g, &bb, &backbone.config, Some(&prefix), s)?);
    }
    let loss = g.mean_scalars(&terms)?;
    let value = g.value(loss).scalar_value();
    if !value.is_finite() {
        return Err(PktError::Numeric(format!("non-finite training loss {value}")));
    }
    g.backward(loss)?;
    let grads: Vec<Array> = bound.node_list().iter().map(|&n| g.grad(n)).collect();
    let mut masters: Vec<Array> = reparam.param_list().into_iter().cloned().collect();
    opt.step(&mut masters, &grads, lr)?;
    for (dst, src) in reparam.param_list_mut().into_iter().zip(masters) {
        *dst = src;
    }
    Ok(value)
}

/// Tag a numeric failure with where in the run it happened.
fn at_step(e: PktError, step: usize, epoch: usize) -> PktError {
    match e {
        PktError::Numeric(msg) => PktError::Numeric(format!(
            "training diverged at step {step} (epoch {epoch}): {msg}"
        )),
        other => other,
    }
}

/// How an epoch turns the dialogue pool into batches of dialogue
/// indices: a persona-agnostic shuffle, or weighted persona draws.
enum BatchPlan {
    Shuffle(ChaCha8Rng),
    Weighted {
        sampler: BatchSampler,
        offsets: Vec<usize>,
        steps_per_epoch: usize,
    },
}

impl BatchPlan {
    fn epoch_batches(&mut self, n_dialogues: usize, batch_size: usize) -> Vec<Vec<usize>> {
        match self {
            BatchPlan::Shuffle(rng) => {
                let mut order: Vec<usize> = (0..n_dialogues).collect();
                order.shuffle(rng);
                order.chunks(batch_size).map(|c| c.to_vec()).collect()
            }
            BatchPlan::Weighted {
                sampler,
                offsets,
                steps_per_epoch,
            } => (0..*steps_per_epoch)
                .map(|_| {
                    sampler
                        .next_batch()
                        .into_iter()
                        .map(|(persona, dialogue)| offsets[persona] + dialogue)
                        .collect()
                })
                .collect(),
        }
    }
}

/// Shared epoch loop: AdamW with a linear schedule over the nominal step
/// budget, per-epoch validation, early stopping, best-checkpoint
/// selection. `dialogues` groups samples so a batch is a set of
/// dialogues, matching how both shuffle and weighted plans draw.
#[allow(clippy::too_many_arguments)]
fn train_prefix(
    backbone: &Backbone,
    init: ReparamPrefix,
    dialogues: &[Vec<EncodedSample>],
    valid: &[EncodedSample],
    mut plan: BatchPlan,
    lr: f64,
    batch_size: usize,
    max_epochs: usize,
    patience: usize,
    snapshot_each_epoch: bool,
    mut warnings: Vec<String>,
) -> Result<TrainOutput> {
    let total_samples: usize = dialogues.iter().map(Vec::len).sum();
    if total_samples == 0 {
        return Err(PktError::Data("no training samples".into()));
    }
    let steps_per_epoch = match &plan {
        BatchPlan::Shuffle(_) => dialogues.len().div_ceil(batch_size),
        BatchPlan::Weighted { steps_per_epoch, .. } => *steps_per_epoch,
    };
    let schedule = LinearSchedule::new(lr, 0, (max_epochs * steps_per_epoch).max(1));
    let mut opt = AdamW::default();
    let mut current = init;

    let has_valid = !valid.is_empty();
    if !has_valid {
        warnings.push("no validation samples; training for the full epoch budget".into());
    }
    let mut best_loss = if has_valid {
        prefix_valid_loss(backbone, &current, valid)?
    } else {
        f64::INFINITY
    };
    let mut best = current.clone();
    let mut bad_epochs = 0usize;
    let mut log = Vec::new();
    let mut snapshots = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=max_epochs {
        let batches = plan.epoch_batches(dialogues.len(), batch_size);
        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        let mut epoch_lr = lr;
        for batch_dialogues in batches {
            let batch: Vec<&EncodedSample> = batch_dialogues
                .iter()
                .flat_map(|&d| dialogues[d].iter())
                .collect();
            if batch.is_empty() {
                continue;
            }
            epoch_lr = schedule.lr(step);
            let loss = prefix_step(backbone, &mut current, &batch, &mut opt, epoch_lr)
                .map_err(|e| at_step(e, step, epoch))?;
            loss_sum += loss * batch.len() as f64;
            sample_count += batch.len();
            step += 1;
        }
        let train_loss = if sample_count > 0 {
            loss_sum / sample_count as f64
        } else {
            f64::NAN
        };
        let valid_loss = if has_valid {
            Some(prefix_valid_loss(backbone, &current, valid)?)
        } else {
            None
        };
        log.push(EpochLog {
            epoch,
            train_loss,
            valid_loss,
            lr: epoch_lr,
        });
        if snapshot_each_epoch {
            snapshots.push(current.clone());
        }
        if let Some(v) = valid_loss {
            if v < best_loss {
                best_loss = v;
                best = current.clone();
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs > patience {
                    break;
                }
            }
        }
    }

    let prefix = if has_valid { best } else { current };
    Ok(TrainOutput {
        prefix,
        log,
        warnings,
        snapshots,
    })
}

/// Source strategy registry: each entry turns Part A of a corpus into a
/// trained source prefix.
pub trait SourceStrategy {
    fn name(&self) -> &'static str;
    fn train(
        &self,
        backbone: &Backbone,
        corpus: &Corpus,
        manifest: &SplitManifest,
        init: ReparamPrefix,
        cfg: &SourceTrainConfig,
    ) -> Result<TrainOutput>;
}

pub fn source_strategy_by_name(name: &str) -> Result<Box<dyn SourceStrategy>> {
    match name {
        "base" => Ok(Box::new(BaseSource)),
        "temperature" => Ok(Box::new(TemperatureSource)),
        "ppreptile" => Ok(Box::new(PPReptileSource)),
        other => Err(PktError::Config(format!(
            "unknown source strategy '{other}', expected base, temperature, or ppreptile"
        ))),
    }
}

/// Persona-agnostic pooling: every Part A train dialogue shuffled into
/// one stream, each persona weighted by however much data it has.
pub struct BaseSource;

impl SourceStrategy for BaseSource {
    fn name(&self) -> &'static str {
        "base"
    }

    fn train(
        &self,
        backbone: &Backbone,
        corpus: &Corpus,
        manifest: &SplitManifest,
        init: ReparamPrefix,
        cfg: &SourceTrainConfig,
    ) -> Result<TrainOutput> {
        cfg.validate()?;
        let data = collect_part(backbone, corpus, manifest, "A", init.l_prefix())?;
        let dialogues: Vec<Vec<EncodedSample>> =
            data.train.into_iter().flatten().filter(|d| !d.is_empty()).collect();
        train_prefix(
            backbone,
            init,
            &dialogues,
            &data.valid,
            BatchPlan::Shuffle(ChaCha8Rng::seed_from_u64(cfg.seed)),
            cfg.lr,
            cfg.batch_size,
            cfg.max_epochs,
            cfg.patience,
            false,
            Vec::new(),
        )
    }
}

/// Dialogue draws reweighted by per-persona share raised to 1/T, so
/// low-resource personas surface more often than their raw share.
pub struct TemperatureSource;

impl SourceStrategy for TemperatureSource {
    fn name(&self) -> &'static str {
        "temperature"
    }

    fn train(
        &self,
        backbone: &Backbone,
        corpus: &Corpus,
        manifest: &SplitManifest,
        init: ReparamPrefix,
        cfg: &SourceTrainConfig,
    ) -> Result<TrainOutput> {
        cfg.validate()?;
        let data = collect_part(backbone, corpus, manifest, "A", init.l_prefix())?;
        let mut warnings = Vec::new();
        // personas whose train split produced no usable dialogues cannot
        // be sampled; drop them up front
        let mut kept_groups: Vec<Vec<Vec<EncodedSample>>> = Vec::new();
        for (pid, groups) in data.persona_ids.iter().zip(data.train) {
            let usable: Vec<Vec<EncodedSample>> =
                groups.into_iter().filter(|g| !g.is_empty()).collect();
            if usable.is_empty() {
                warnings.push(format!("persona '{pid}' has no training samples; skipped"));
            } else {
                kept_groups.push(usable);
            }
        }
        if kept_groups.is_empty() {
            return Err(PktError::Data("no persona produced training samples".into()));
        }
        let counts: Vec<usize> = kept_groups.iter().map(Vec::len).collect();
        let probabilities = temperature_mix(&counts, cfg.temperature)?;
        // the sampler draws positions into each persona's dialogue list;
        // offsets map (persona, position) to the flattened pool
        let position_lists: Vec<Vec<usize>> = counts.iter().map(|&c| (0..c).collect()).collect();
        let sampler = BatchSampler::new(position_lists, &probabilities, cfg.batch_size, cfg.seed)?;
        let mut offsets = Vec::with_capacity(counts.len());
        let mut acc = 0usize;
        for &c in &counts {
            offsets.push(acc);
            acc += c;
        }
        let dialogues: Vec<Vec<EncodedSample>> = kept_groups.into_iter().flatten().collect();
        let steps_per_epoch = dialogues.len().div_ceil(cfg.batch_size);
        train_prefix(
            backbone,
            init,
            &dialogues,
            &data.valid,
            BatchPlan::Weighted {
                sampler,
                offsets,
                steps_per_epoch,
            },
            cfg.lr,
            cfg.batch_size,
            cfg.max_epochs,
            cfg.patience,
            false,
            warnings,
        )
    }
}

/// Meta-learning strategy; delegates to [`train_source_ppreptile`].
pub struct PPReptileSource;

impl SourceStrategy for PPReptileSource {
    fn name(&self) -> &'static str {
        "ppreptile"
    }

    fn train(
        &self,
        backbone: &Backbone,
        corpus: &Corpus,
        manifest: &SplitManifest,
        init: ReparamPrefix,
        cfg: &SourceTrainConfig,
    ) -> Result<TrainOutput> {
        train_source_ppreptile(backbone, corpus, manifest, init, &cfg.meta)
    }
}

pub fn train_source_base(
    backbone: &Backbone,
    corpus: &Corpus,
    manifest: &SplitManifest,
    init: ReparamPrefix,
    cfg: &SourceTrainConfig,
) -> Result<TrainOutput> {
    BaseSource.train(backbone, corpus, manifest, init, cfg)
}

pub fn train_source_temperature(
    backbone: &Backbone,
    corpus: &Corpus,
    manifest: &SplitManifest,
    init: ReparamPrefix,
    cfg: &SourceTrainConfig,
) -> Result<TrainOutput> {
    TemperatureSource.train(backbone, corpus, manifest, init, cfg)
}

/// Inner adaptation: k_inner optimizer steps on one persona's samples,
/// starting from a copy of theta. Gradients flow through the whole
/// network but only prefix parameters move. Returns the adapted copy and
/// the per-step batch losses.
pub fn ppreptile_inner(
    backbone: &Backbone,
    theta: &ReparamPrefix,
    samples: &[EncodedSample],
    meta: &MetaTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ReparamPrefix, Vec<f64>)> {
    meta.validate()?;
    if samples.is_empty() {
        return Err(PktError::Data("inner adaptation over zero samples".into()));
    }
    let mut w = theta.clone();
    let mut opt = optimizer_by_name(&meta.inner_optimizer)?;
    let mut losses = Vec::with_capacity(meta.k_inner);
    for step in 0..meta.k_inner {
        // draw b_in samples, without replacement when the persona has
        // enough, with replacement otherwise
        let batch: Vec<&EncodedSample> = if samples.len() >= meta.b_in {
            rand::seq::index::sample(rng, samples.len(), meta.b_in)
                .iter()
                .map(|i| &samples[i])
                .collect()
        } else {
            (0..meta.b_in)
                .map(|_| &samples[rng.gen_range(0..samples.len())])
                .collect()
        };
        let loss = prefix_step(backbone, &mut w, &batch, opt.as_mut(), meta.alpha)
            .map_err(|e| at_step(e, step, 0))?;
        losses.push(loss);
    }
    Ok((w, losses))
}

/// Outer update: move theta toward the mean of the adapted copies,
/// scaled by beta. Elementwise over every prefix parameter.
pub fn ppreptile_outer(
    theta: &ReparamPrefix,
    adapted: &[ReparamPrefix],
    beta: f64,
) -> Result<ReparamPrefix> {
    if adapted.is_empty() {
        return Err(PktError::Data("outer update with no adapted copies".into()));
    }
    let theta_params = theta.param_list();
    for (wi, w) in adapted.iter().enumerate() {
        let w_params = w.param_list();
        for (pi, (tp, wp)) in theta_params.iter().zip(&w_params).enumerate() {
            if tp.shape() != wp.shape() {
                return Err(PktError::Shape {
                    op: "outer update",
                    detail: format!(
                        "adapted copy {wi} parameter {pi} has shape {:?}, expected {:?}",
                        wp.shape(),
                        tp.shape()
                    ),
                });
            }
        }
    }
    let n = adapted.len() as f64;
    let mut out = theta.clone();
    for (pi, dst) in out.param_list_mut().into_iter().enumerate() {
        let base = theta_params[pi].data();
        for (e, slot) in dst.data_mut().iter_mut().enumerate() {
            let mean_disp: f64 = adapted
                .iter()
                .map(|w| w.param_list()[pi].data()[e] - base[e])
                .sum::<f64>()
                / n;
            *slot = base[e] + beta * mean_disp;
        }
    }
    Ok(out)
}

/// Meta-training loop: each iteration samples n_personas from Part A
/// uniformly without replacement, adapts a copy per persona, then pulls
/// theta toward the mean adapted state.
pub fn train_source_ppreptile(
    backbone: &Backbone,
    corpus: &Corpus,
    manifest: &SplitManifest,
    init: ReparamPrefix,
    meta: &MetaTrainConfig,
) -> Result<TrainOutput> {
    meta.validate()?;
    let data = collect_part(backbone, corpus, manifest, "A", init.l_prefix())?;
    let n_available = data.persona_ids.len();
    if n_available < meta.n_personas {
        return Err(PktError::Data(format!(
            "part A has {n_available} personas, need at least {}",
            meta.n_personas
        )));
    }
    let per_persona: Vec<Vec<EncodedSample>> = data
        .train
        .into_iter()
        .map(|groups| groups.into_iter().flatten().collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
    let mut theta = init;
    let mut log = Vec::new();
    let mut warnings = Vec::new();
    let mut warned: BTreeSet<usize> = BTreeSet::new();

    for iteration in 1..=meta.iterations {
        let mut order: Vec<usize> = (0..n_available).collect();
        order.shuffle(&mut rng);
        let mut adapted = Vec::with_capacity(meta.n_personas);
        let mut losses = Vec::new();
        for &p in &order[..meta.n_personas] {
            if per_persona[p].is_empty() {
                if warned.insert(p) {
                    warnings.push(format!(
                        "persona '{}' has no training samples; skipped when sampled",
                        data.persona_ids[p]
                    ));
                }
                continue;
            }
            let (w, step_losses) =
                ppreptile_inner(backbone, &theta, &per_persona[p], meta, &mut rng)?;
            adapted.push(w);
            losses.extend(step_losses);
        }
        if adapted.is_empty() {
            continue;
        }
        theta = ppreptile_outer(&theta, &adapted, meta.beta)?;
        let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        log.push(EpochLog {
            epoch: iteration,
            train_loss,
            valid_loss: None,
            lr: meta.beta,
        });
    }
    Ok(TrainOutput {
        prefix: theta,
        log,
        warnings,
        snapshots: Vec::new(),
    })
}

/// Stage two: adapt an initialization (the source prefix, or a random
/// one) to a single persona's train split, early-stopped on its valid
/// split. The signature admits exactly one persona's data.
pub fn train_personalized(
    backbone: &Backbone,
    init: ReparamPrefix,
    rec: &PersonaRecord,
    splits: &SplitLists,
    cfg: &PersonaTrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let reserve = init.l_prefix();
    let mut dialogues = Vec::with_capacity(splits.train.len());
    for &di in &splits.train {
        let samples = encode_split_samples(backbone, rec, &[di], reserve)?;
        if !samples.is_empty() {
            dialogues.push(samples);
        }
    }
    if dialogues.is_empty() {
        return Err(PktError::Data(format!(
            "persona '{}' has no usable training samples",
            rec.persona_id
        )));
    }
    let valid = encode_split_samples(backbone, rec, &splits.valid, reserve)?;
    let mut warnings = Vec::new();
    if valid.is_empty() {
        warnings.push(format!(
            "persona '{}' has no validation samples; skipping early stopping",
            rec.persona_id
        ));
    }
    train_prefix(
        backbone,
        init,
        &dialogues,
        &valid,
        BatchPlan::Shuffle(ChaCha8Rng::seed_from_u64(cfg.seed)),
        cfg.lr,
        cfg.batch_size,
        cfg.max_epochs,
        cfg.patience,
        cfg.snapshot_each_epoch,
        warnings,
    )
}

/// Hyperparameters for the persona-agnostic full fine-tune baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(seed: u64) -> Self {
        FinetuneConfig {
            lr: 3e-4,
            batch_size: 8,
            max_epochs: 10,
            patience: 3,
            seed,
        }
    }
}

/// One optimizer step on every backbone weight over a batch, no prefix.
fn backbone_step(
    backbone: &mut Backbone,
    batch: &[&EncodedSample],
    opt: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let bb = BoundBackbone::bind(&mut g, &backbone.weights, true);
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        terms.push(lm_loss(&mut g, &bb, &backbone.config, None, s)?);
    }
    let loss = g.mean_scalars(&terms)?;
    let value = g.value(loss).scalar_value();
    if !value.is_finite() {
        return Err(PktError::Numeric(format!("non-finite training loss {value}")));
    }
    g.backward(loss)?;
    let grads: Vec<Array> = bb.node_list().iter().map(|&n| g.grad(n)).collect();
    let mut masters: Vec<Array> = backbone
        .weights
        .weight_list()
        .into_iter()
        .cloned()
        .collect();
    opt.step(&mut masters, &grads, lr)?;
    for (dst, src) in backbone.weights.weight_list_mut().into_iter().zip(masters) {
        *dst = src;
    }
    Ok(value)
}

fn backbone_valid_loss(backbone: &Backbone, samples: &[EncodedSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let bb = BoundBackbone::bind(&mut g, &backbone.weights, false);
        let loss = lm_loss(&mut g, &bb, &backbone.config, None, s)?;
        total += g.value(loss).scalar_value();
    }
    Ok(total / samples.len() as f64)
}

/// Fine-tune every backbone weight on a persona-agnostic pool of the
/// listed parts' train dialogues. The input backbone is untouched; the
/// trained model comes back as a new value.
pub fn finetune_backbone(
    backbone: &Backbone,
    corpus: &Corpus,
    manifest: &SplitManifest,
    parts: &[&str],
    cfg: &FinetuneConfig,
) -> Result<(Backbone, Vec<EpochLog>, Vec<String>)> {
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(PktError::Config(format!("learning rate {} must be positive", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(PktError::Config("batch size must be at least 1".into()));
    }
    if parts.is_empty() {
        return Err(PktError::Config("no parts selected for fine-tuning".into()));
    }
    let mut dialogues: Vec<Vec<EncodedSample>> = Vec::new();
    let mut valid = Vec::new();
    for part in parts {
        let data = collect_part(backbone, corpus, manifest, part, 0)?;
        dialogues.extend(data.train.into_iter().flatten().filter(|d| !d.is_empty()));
        valid.extend(data.valid);
    }
    if dialogues.is_empty() {
        return Err(PktError::Data("no training samples in the selected parts".into()));
    }
    let mut warnings = Vec::new();
    let has_valid = !valid.is_empty();
    if !has_valid {
        warnings.push("no validation samples; training for the full epoch budget".into());
    }

    let mut model = backbone.clone();
    let steps_per_epoch = dialogues.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(cfg.lr, 0, (cfg.max_epochs * steps_per_epoch).max(1));
    let mut opt = AdamW::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_loss = if has_valid {
        backbone_valid_loss(&model, &valid)?
    } else {
        f64::INFINITY
    };
    let mut best = model.clone();
    let mut bad_epochs = 0usize;
    let mut log = Vec::new();
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..dialogues.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut sample_count = 0usize;
        let mut epoch_lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedSample> =
                chunk.iter().flat_map(|&d| dialogues[d].iter()).collect();
            epoch_lr = schedule.lr(step);
            let loss = backbone_step(&mut model, &batch, &mut opt, epoch_lr)
                .map_err(|e| at_step(e, step, epoch))?;
            loss_sum += loss * batch.len() as f64;
            sample_count += batch.len();
            step += 1;
        }
        let valid_loss = if has_valid {
            Some(backbone_valid_loss(&model, &valid)?)
        } else {
            None
        };
        log.push(EpochLog {
            epoch,
            train_loss: loss_sum / sample_count.max(1) as f64,
            valid_loss,
            lr: epoch_lr,
        });
        if let Some(v) = valid_loss {
            if v < best_loss {
                best_loss = v;
                best = model.clone();
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs > cfg.patience {
                    break;
                }
            }
        }
    }
    let chosen = if has_valid { best } else { model };
    Ok((chosen, log, warnings))
}

/// Stable per-persona seed: mixes the run seed with the persona id, so
/// neither fan-out order nor job count can change any persona's draws.
pub fn persona_seed(base: u64, persona_id: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(persona_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Per-entry metadata written next to each stored prefix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryMeta {
    pub key: String,
    pub strategy: String,
    pub init: String,
    pub seed: u64,
    pub backbone_digest: String,
    pub config: BTreeMap<String, String>,
    pub final_train_loss: Option<f64>,
    pub best_valid_loss: Option<f64>,
    pub epochs: usize,
}

/// Directory of deployed prefixes bound to one backbone: a digest file
/// at the root, then per key a .pktp prefix, a .json sidecar, a
/// .log.jsonl training log, and optionally a .pktr training state (the
/// source entry always has one so stage two can warm-start from it).
pub struct PrefixStore {
    dir: PathBuf,
    digest: [u8; 32],
}

pub const SOURCE_KEY: &str = "source";

const DIGEST_FILE: &str = "backbone.digest";

fn digest_hex(digest: &[u8; 32]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn valid_key(key: &str) -> bool {
    !key.is_empty()
        && key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl PrefixStore {
    /// Open a store directory, creating it (and its digest binding) when
    /// absent. A directory bound to a different backbone is rejected.
    pub fn open(dir: &Path, backbone: &Backbone) -> Result<PrefixStore> {
        let digest = backbone.digest();
        let digest_path = dir.join(DIGEST_FILE);
        if digest_path.exists() {
            let on_disk = std::fs::read_to_string(&digest_path)?;
            if on_disk.trim() != digest_hex(&digest) {
                return Err(PktError::Data(format!(
                    "store {} is bound to a different backbone",
                    dir.display()
                )));
            }
        } else {
            std::fs::create_dir_all(dir)?;
            std::fs::write(&digest_path, digest_hex(&digest) + "\n")?;
        }
        Ok(PrefixStore {
            dir: dir.to_path_buf(),
            digest,
        })
    }

    fn check_key(key: &str) -> Result<()> {
        if valid_key(key) {
            Ok(())
        } else {
            Err(PktError::Config(format!(
                "invalid store key '{key}': use letters, digits, '-', '_'"
            )))
        }
    }

    pub fn save_entry(
        &self,
        key: &str,
        deployed: &DeployedPrefix,
        reparam: Option<&ReparamPrefix>,
        meta: &EntryMeta,
        log: &[EpochLog],
    ) -> Result<()> {
        Self::check_key(key)?;
        deployed.save(&self.dir.join(format!("{key}.pktp")), &self.digest)?;
        if let Some(r) = reparam {
            r.save(&self.dir.join(format!("{key}.pktr")), &self.digest)?;
        }
        let mut sidecar = serde_json::to_string_pretty(meta)?;
        sidecar.push('\n');
        std::fs::write(self.dir.join(format!("{key}.json")), sidecar)?;
        let mut lines = String::new();
        for entry in log {
            lines.push_str(&serde_json::to_string(entry)?);
            lines.push('\n');
        }
        std::fs::write(self.dir.join(format!("{key}.log.jsonl")), lines)?;
        Ok(())
    }

    fn entry_path(&self, key: &str, ext: &str) -> Result<PathBuf> {
        Self::check_key(key)?;
        let path = self.dir.join(format!("{key}.{ext}"));
        if !path.exists() {
            return Err(PktError::Data(format!(
                "no prefix entry '{key}' in store {}",
                self.dir.display()
            )));
        }
        Ok(path)
    }

    pub fn load_deployed(&self, key: &str) -> Result<DeployedPrefix> {
        DeployedPrefix::load(&self.entry_path(key, "pktp")?, &self.digest)
    }

    pub fn load_reparam(&self, key: &str) -> Result<ReparamPrefix> {
        ReparamPrefix::load(&self.entry_path(key, "pktr")?, &self.digest)
    }

    pub fn load_meta(&self, key: &str) -> Result<EntryMeta> {
        let text = std::fs::read_to_string(self.entry_path(key, "json")?)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Sorted entry keys, from the deployed prefix files present.
    pub fn keys(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some("pktp") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.push(stem.to_string());
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Total deployed floats across all entries; with one source and N
    /// personas at equal dims this is (N+1) times one prefix.
    pub fn total_deployed_floats(&self) -> Result<usize> {
        let mut total = 0usize;
        for key in self.keys()? {
            total += self.load_deployed(&key)?.element_count();
        }
        Ok(total)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
