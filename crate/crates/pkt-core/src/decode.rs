//! Beam-search decoding over any next-token scorer.
//!
//! The scorer abstraction keeps the search logic testable with scripted
//! distributions; the model-backed scorer rebuilds a forward graph per
//! query, which is cheap at desk scale.

use crate::graph::Graph;
use crate::model::{forward_lm, Backbone, BoundBackbone};
use crate::prefix::DeployedPrefix;
use crate::tokenizer::{EOU, S1, S2, UNK};
use crate::{PktError, Result};

pub const DEFAULT_BEAM: usize = 5;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 24;

pub trait NextTokenScorer {
    /// Log-probabilities over the vocabulary for the token following `ids`.
    fn log_probs(&mut self, ids: &[usize]) -> Result<Vec<f64>>;
}

/// Scores continuations with a frozen backbone and an optional deployed
/// prefix.
pub struct ModelScorer<'a> {
    pub backbone: &'a Backbone,
    pub prefix: Option<&'a DeployedPrefix>,
}

impl NextTokenScorer for ModelScorer<'_> {
    fn log_probs(&mut self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = BoundBackbone::bind(&mut g, &self.backbone.weights, false);
        let prefix_nodes = self.prefix.map(|p| p.bind(&mut g));
        let out = forward_lm(
            &mut g,
            &bound,
            &self.backbone.config,
            prefix_nodes.as_deref(),
            ids,
        )?;
        let logits = g.value(out.logits);
        let last = logits.rows() - 1;
        let row: Vec<f64> = (0..logits.cols()).map(|c| logits.at(last, c)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        Ok(row.into_iter().map(|v| v - log_z).collect())
    }
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl Hypothesis {
    /// Cumulative log-probability divided by generated length, so long
    /// and short finished hypotheses compete fairly.
    fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

/// Ties break toward the lexicographically smaller token sequence so the
/// search is fully deterministic.
fn rank(hyps: &mut Vec<Hypothesis>, keep: usize) {
    hyps.sort_by(|a, b| {
        b.score()
            .partial_cmp(&a.score())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    hyps.truncate(keep);
}

/// Generate up to `max_new_tokens` ids after `context`, stopping each
/// hypothesis at the end-of-utterance id. Marker and unknown ids are
/// never proposed. Returns the best finished hypothesis without its
/// terminating end-of-utterance id.
pub fn beam_decode<S: NextTokenScorer>(
    scorer: &mut S,
    context: &[usize],
    beam: usize,
    max_new_tokens: usize,
) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(PktError::Config("beam width must be at least 1".into()));
    }
    if max_new_tokens == 0 {
        return Ok(Vec::new());
    }
    let suppressed = [S1, S2, UNK];
    let mut hyps = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..max_new_tokens {
        if hyps.iter().all(|h| h.finished) {
            break;
        }
        let mut next: Vec<Hypothesis> = Vec::new();
        for hyp in &hyps {
            if hyp.finished {
                next.push(hyp.clone());
                continue;
            }
            let mut ids = Vec::with_capacity(context.len() + hyp.tokens.len());
            ids.extend_from_slice(context);
            ids.extend_from_slice(&hyp.tokens);
            let log_probs = scorer.log_probs(&ids)?;
            let mut candidates: Vec<(usize, f64)> = log_probs
                .into_iter()
                .enumerate()
                .filter(|(tok, lp)| !suppressed.contains(tok) && lp.is_finite())
                .collect();
            candidates.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
            });
            for &(tok, lp) in candidates.iter().take(beam) {
                let mut tokens = hyp.tokens.clone();
                tokens.push(tok);
                next.push(Hypothesis {
                    tokens,
                    log_prob: hyp.log_prob + lp,
                    finished: tok == EOU,
                });
            }
        }
        if next.is_empty() {
            return Err(PktError::Numeric(
                "decoding found no finite-probability continuation".into(),
            ));
        }
        rank(&mut next, beam);
        hyps = next;
    }
    // out of budget: whatever each hypothesis has counts as finished
    rank(&mut hyps, 1);
    let mut best = hyps.remove(0).tokens;
    if best.last() == Some(&EOU) {
        best.pop();
    }
    Ok(best)
}

/// Decode a speaker-2 response to the given history and return its text.
pub fn generate_response(
    backbone: &Backbone,
    prefix: Option<&DeployedPrefix>,
    history_ids: &[usize],
    beam: usize,
    max_new_tokens: usize,
) -> Result<String> {
    let mut context = history_ids.to_vec();
    context.push(S2);
    let reserve = prefix.map_or(0, |p| p.l_prefix());
    let room = backbone
        .config
        .max_context
        .saturating_sub(reserve + context.len());
    let budget = max_new_tokens.min(room);
    if budget == 0 {
        return Err(PktError::Data(format!(
            "no room to generate: history {} + prefix {reserve} fills context {}",
            context.len(),
            backbone.config.max_context
        )));
    }
    let mut scorer = ModelScorer { backbone, prefix };
    let ids = beam_decode(&mut scorer, &context, beam, budget)?;
    Ok(backbone.vocab.detokenize(&ids))
}
