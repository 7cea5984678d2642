//! Persona-grouped corpus handling: JSONL load/save, part construction,
//! per-persona dialogue splits, temperature-scaled mixing, batch sampling,
//! and a synthetic corpus generator with trait-revealing turns.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::{Vocab, EOU, S1, S2};
use crate::{PktError, Result};

pub const FEW_SHOT_THRESHOLD: usize = 6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Turn {
    pub speaker: u8,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PersonaRecord {
    pub persona_id: String,
    pub description: Vec<String>,
    pub dialogues: Vec<Vec<Turn>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub personas: Vec<PersonaRecord>,
}

impl Corpus {
    pub fn get(&self, persona_id: &str) -> Option<&PersonaRecord> {
        self.personas.iter().find(|p| p.persona_id == persona_id)
    }
}

fn validate_record(rec: &PersonaRecord, line: usize) -> Result<()> {
    for (di, dialogue) in rec.dialogues.iter().enumerate() {
        if dialogue.len() < 2 {
            return Err(PktError::Data(format!(
                "line {line}: persona '{}' dialogue {di} has {} turns, need at least 2",
                rec.persona_id,
                dialogue.len()
            )));
        }
        for (ti, turn) in dialogue.iter().enumerate() {
            if turn.speaker != 1 && turn.speaker != 2 {
                return Err(PktError::Data(format!(
                    "line {line}: persona '{}' dialogue {di} turn {ti} has speaker {}, expected 1 or 2",
                    rec.persona_id, turn.speaker
                )));
            }
            if ti > 0 && dialogue[ti - 1].speaker == turn.speaker {
                return Err(PktError::Data(format!(
                    "line {line}: persona '{}' dialogue {di} turn {ti} repeats speaker {}",
                    rec.persona_id, turn.speaker
                )));
            }
        }
    }
    Ok(())
}

/// One persona per line. Malformed lines are rejected with their line
/// number; duplicate persona ids and non-alternating speakers as well.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut personas = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PersonaRecord = serde_json::from_str(&line).map_err(|e| {
            PktError::Data(format!("line {}: {e}", i + 1))
        })?;
        validate_record(&rec, i + 1)?;
        if !seen.insert(rec.persona_id.clone()) {
            return Err(PktError::Data(format!(
                "line {}: duplicate persona id '{}'",
                i + 1,
                rec.persona_id
            )));
        }
        personas.push(rec);
    }
    Ok(Corpus { personas })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for rec in &corpus.personas {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub part_a: Vec<String>,
    pub part_b: Vec<String>,
    pub part_c: Vec<String>,
}

/// Personas with fewer than `few_shot_threshold` dialogues form Part C.
/// Of the rest, `n_regular_target` are drawn at random into Part B and
/// the remainder becomes the source-training Part A.
pub fn partition_personas(
    corpus: &Corpus,
    few_shot_threshold: usize,
    n_regular_target: usize,
    seed: u64,
) -> Result<Partition> {
    let mut regular: Vec<&str> = Vec::new();
    let mut part_c: Vec<String> = Vec::new();
    for rec in &corpus.personas {
        if rec.dialogues.len() < few_shot_threshold {
            part_c.push(rec.persona_id.clone());
        } else {
            regular.push(&rec.persona_id);
        }
    }
    if regular.len() <= n_regular_target {
        return Err(PktError::Data(format!(
            "need more than {n_regular_target} regular personas to form both parts, found {}",
            regular.len()
        )));
    }
    regular.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = regular.clone();
    shuffled.shuffle(&mut rng);
    let mut part_b: Vec<String> = shuffled[..n_regular_target]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let chosen: BTreeSet<&str> = shuffled[..n_regular_target].iter().copied().collect();
    let mut part_a: Vec<String> = regular
        .iter()
        .filter(|s| !chosen.contains(**s))
        .map(|s| s.to_string())
        .collect();
    part_a.sort_unstable();
    part_b.sort_unstable();
    part_c.sort_unstable();
    Ok(Partition {
        part_a,
        part_b,
        part_c,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitLists {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub lists: SplitLists,
    /// Set when the persona had too few dialogues for held-out shares.
    pub degenerate: bool,
}

/// Shuffle dialogue indices, then cut 8:1:1. Valid and test each take
/// max(1, floor(0.1 d)) once d reaches 3; below that everything trains
/// and the result is flagged degenerate.
pub fn split_dialogues(n_dialogues: usize, seed: u64) -> Result<SplitResult> {
    if n_dialogues == 0 {
        return Err(PktError::Data("cannot split a persona with no dialogues".into()));
    }
    let mut idx: Vec<usize> = (0..n_dialogues).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    if n_dialogues < 3 {
        return Ok(SplitResult {
            lists: SplitLists {
                train: sorted(idx),
                valid: Vec::new(),
                test: Vec::new(),
            },
            degenerate: true,
        });
    }
    let held = std::cmp::max(1, n_dialogues / 10);
    let n_train = n_dialogues - 2 * held;
    let train = sorted(idx[..n_train].to_vec());
    let valid = sorted(idx[n_train..n_train + held].to_vec());
    let test = sorted(idx[n_train + held..].to_vec());
    Ok(SplitResult {
        lists: SplitLists { train, valid, test },
        degenerate: false,
    })
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub part: BTreeMap<String, Vec<String>>,
    pub splits: BTreeMap<String, SplitLists>,
    pub seed: u64,
    pub few_shot_threshold: usize,
}

impl SplitManifest {
    pub fn part_of(&self, persona_id: &str) -> Option<&str> {
        for (name, ids) in &self.part {
            if ids.iter().any(|p| p == persona_id) {
                return Some(name);
            }
        }
        None
    }

    pub fn personas_in_part(&self, part: &str) -> Result<&[String]> {
        self.part
            .get(part)
            .map(Vec::as_slice)
            .ok_or_else(|| PktError::Config(format!("unknown part '{part}', expected A, B or C")))
    }

    pub fn load(path: &Path) -> Result<SplitManifest> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }
}

/// Partition the corpus and split every persona's dialogues. Per-persona
/// split seeds are drawn from one seeded stream over personas in sorted
/// id order, so the manifest is reproducible.
pub fn build_manifest(
    corpus: &Corpus,
    few_shot_threshold: usize,
    n_regular_target: usize,
    seed: u64,
) -> Result<(SplitManifest, Vec<String>)> {
    let partition = partition_personas(corpus, few_shot_threshold, n_regular_target, seed)?;
    let mut ids: Vec<&str> = corpus.personas.iter().map(|p| p.persona_id.as_str()).collect();
    ids.sort_unstable();
    let mut seed_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = BTreeMap::new();
    let mut warnings = Vec::new();
    for id in ids {
        let rec = corpus.get(id).expect("id came from the corpus");
        let sub_seed: u64 = seed_rng.gen();
        let result = split_dialogues(rec.dialogues.len(), sub_seed)?;
        if result.degenerate {
            warnings.push(format!(
                "persona '{id}' has only {} dialogue(s); all assigned to train",
                rec.dialogues.len()
            ));
        }
        splits.insert(id.to_string(), result.lists);
    }
    let mut part = BTreeMap::new();
    part.insert("A".to_string(), partition.part_a);
    part.insert("B".to_string(), partition.part_b);
    part.insert("C".to_string(), partition.part_c);
    Ok((
        SplitManifest {
            part,
            splits,
            seed,
            few_shot_threshold,
        },
        warnings,
    ))
}

/// Sampling weights over personas from their dialogue counts: counts are
/// normalized to shares, raised to 1/T and renormalized. T above 1
/// flattens the distribution toward uniform.
pub fn temperature_mix(counts: &[usize], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(PktError::Config(format!(
            "mixing temperature must be positive, got {temperature}"
        )));
    }
    if counts.is_empty() {
        return Err(PktError::Data("temperature_mix: no personas".into()));
    }
    if let Some(pos) = counts.iter().position(|&c| c == 0) {
        return Err(PktError::Data(format!(
            "temperature_mix: persona at index {pos} has zero training dialogues"
        )));
    }
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let powed: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / total).powf(1.0 / temperature))
        .collect();
    let norm: f64 = powed.iter().sum();
    Ok(powed.into_iter().map(|p| p / norm).collect())
}

/// Draws (persona position, dialogue index) pairs, personas by the given
/// probabilities and dialogues uniformly within the chosen persona.
pub struct BatchSampler {
    cumulative: Vec<f64>,
    dialogue_lists: Vec<Vec<usize>>,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(
        dialogue_lists: Vec<Vec<usize>>,
        probabilities: &[f64],
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if dialogue_lists.len() != probabilities.len() {
            return Err(PktError::Shape {
                op: "batch sampler",
                detail: format!(
                    "{} personas vs {} probabilities",
                    dialogue_lists.len(),
                    probabilities.len()
                ),
            });
        }
        if dialogue_lists.iter().any(|l| l.is_empty()) {
            return Err(PktError::Data("batch sampler: persona with no dialogues".into()));
        }
        let sum: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(PktError::Data(format!(
                "batch sampler: probabilities sum to {sum}, expected 1"
            )));
        }
        if batch_size == 0 {
            return Err(PktError::Config("batch size must be at least 1".into()));
        }
        let mut cumulative = Vec::with_capacity(probabilities.len());
        let mut acc = 0.0;
        for &p in probabilities {
            acc += p;
            cumulative.push(acc);
        }
        Ok(BatchSampler {
            cumulative,
            dialogue_lists,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn draw_persona(&mut self) -> usize {
        let u: f64 = self.rng.gen();
        match self
            .cumulative
            .iter()
            .position(|&c| u < c)
        {
            Some(i) => i,
            None => self.cumulative.len() - 1,
        }
    }

    pub fn next_batch(&mut self) -> Vec<(usize, usize)> {
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let persona = self.draw_persona();
            let list = &self.dialogue_lists[persona];
            let dialogue = list[self.rng.gen_range(0..list.len())];
            batch.push((persona, dialogue));
        }
        batch
    }
}

/// Token stream for one dialogue: speaker marker, words, end-of-utterance,
/// repeated per turn, truncated to the newest `max_len` tokens.
pub fn encode_dialogue_stream(vocab: &Vocab, dialogue: &[Turn], max_len: usize) -> Vec<usize> {
    let mut ids = Vec::new();
    for turn in dialogue {
        ids.push(if turn.speaker == 1 { S1 } else { S2 });
        ids.extend(vocab.tokenize(&turn.text));
        ids.push(EOU);
    }
    if ids.len() > max_len {
        ids.drain(..ids.len() - max_len);
    }
    ids
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub ids: Vec<usize>,
    /// First position belonging to the target response words; the loss
    /// covers positions from here to the end (response words plus the
    /// closing end-of-utterance id).
    pub target_start: usize,
}

/// Encode history plus one target response. Oldest history turns are
/// dropped until the sample fits `max_context` after reserving `reserve`
/// prefix positions; a target that cannot fit alone is rejected.
pub fn encode_sample(
    vocab: &Vocab,
    history: &[Turn],
    target: &Turn,
    max_context: usize,
    reserve: usize,
) -> Result<EncodedSample> {
    let budget = max_context.saturating_sub(reserve);
    let mut target_ids = vec![if target.speaker == 1 { S1 } else { S2 }];
    target_ids.extend(vocab.tokenize(&target.text));
    target_ids.push(EOU);
    if target_ids.len() > budget {
        return Err(PktError::Data(format!(
            "target of {} tokens cannot fit context {} with {} reserved prefix positions",
            target_ids.len(),
            max_context,
            reserve
        )));
    }
    let mut kept: Vec<Vec<usize>> = Vec::new();
    let mut used = target_ids.len();
    for turn in history.iter().rev() {
        let mut ids = vec![if turn.speaker == 1 { S1 } else { S2 }];
        ids.extend(vocab.tokenize(&turn.text));
        ids.push(EOU);
        if used + ids.len() > budget {
            break;
        }
        used += ids.len();
        kept.push(ids);
    }
    let mut ids = Vec::with_capacity(used);
    for turn_ids in kept.iter().rev() {
        ids.extend_from_slice(turn_ids);
    }
    ids.extend_from_slice(&target_ids);
    // skip the marker: the loss starts at the first response word
    let target_start = ids.len() - target_ids.len() + 1;
    Ok(EncodedSample { ids, target_start })
}

/// Training samples for one dialogue: every speaker-2 turn with at least
/// one preceding turn becomes a target with the turns before it as history.
pub fn response_samples(dialogue: &[Turn]) -> Vec<(&[Turn], &Turn)> {
    let mut out = Vec::new();
    for (i, turn) in dialogue.iter().enumerate() {
        if turn.speaker == 2 && i >= 1 {
            out.push((&dialogue[..i], turn));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Trait slots, each with its closed value vocabulary.
    pub slots: Vec<(String, Vec<String>)>,
    pub personas_regular: usize,
    pub personas_few_shot: usize,
    /// Inclusive dialogue-count range for regular personas.
    pub regular_dialogues: (usize, usize),
    pub few_shot_dialogues: usize,
    /// Question/answer exchanges per dialogue (turns = 2x this).
    pub exchanges_per_dialogue: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            slots: vec![
                (
                    "color".into(),
                    vec!["red".into(), "blue".into(), "green".into(), "purple".into()],
                ),
                (
                    "pet".into(),
                    vec!["cat".into(), "dog".into(), "bird".into(), "fish".into()],
                ),
                (
                    "hobby".into(),
                    vec!["hiking".into(), "painting".into(), "chess".into(), "cooking".into()],
                ),
                (
                    "job".into(),
                    vec!["teacher".into(), "doctor".into(), "chef".into(), "pilot".into()],
                ),
            ],
            personas_regular: 80,
            personas_few_shot: 10,
            regular_dialogues: (6, 10),
            few_shot_dialogues: 4,
            exchanges_per_dialogue: 4,
            seed: 0,
        }
    }
}

const FILLER_QUESTIONS: [&str; 4] = [
    "how are you today ?",
    "did you sleep well ?",
    "what are you up to ?",
    "nice weather we are having ?",
];
const FILLER_ANSWERS: [&str; 4] = [
    "i am doing well thanks .",
    "yes i slept great .",
    "just relaxing at home .",
    "it really is lovely out .",
];

fn trait_question(slot: &str) -> String {
    format!("what is your favorite {slot} ?")
}

fn trait_answer(slot: &str, value: &str) -> String {
    format!("my favorite {slot} is {value} .")
}

/// Deterministic persona corpus. Every persona gets a distinct trait
/// combination; speaker 2 reveals trait values in its answers, so a
/// slot-aware judge can score consistency without a learned model.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    if spec.slots.is_empty() || spec.slots.iter().any(|(_, vals)| vals.is_empty()) {
        return Err(PktError::Config("synthetic spec needs nonempty slot vocabularies".into()));
    }
    let n_personas = spec.personas_regular + spec.personas_few_shot;
    let combos: usize = spec.slots.iter().map(|(_, v)| v.len()).product();
    if n_personas > combos {
        return Err(PktError::Config(format!(
            "{n_personas} personas requested but only {combos} distinct trait combinations exist"
        )));
    }
    if spec.regular_dialogues.0 > spec.regular_dialogues.1 || spec.regular_dialogues.0 == 0 {
        return Err(PktError::Config(format!(
            "bad regular dialogue range {:?}",
            spec.regular_dialogues
        )));
    }
    if spec.exchanges_per_dialogue == 0 || spec.few_shot_dialogues == 0 {
        return Err(PktError::Config("dialogue and exchange counts must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut taken: BTreeSet<Vec<usize>> = BTreeSet::new();
    let mut personas = Vec::with_capacity(n_personas);
    for pi in 0..n_personas {
        let combo = loop {
            let candidate: Vec<usize> = spec
                .slots
                .iter()
                .map(|(_, vals)| rng.gen_range(0..vals.len()))
                .collect();
            if taken.insert(candidate.clone()) {
                break candidate;
            }
        };
        let values: Vec<(&str, &str)> = spec
            .slots
            .iter()
            .zip(&combo)
            .map(|((slot, vals), &vi)| (slot.as_str(), vals[vi].as_str()))
            .collect();
        let description: Vec<String> = values
            .iter()
            .map(|(slot, value)| trait_answer(slot, value))
            .collect();

        let few_shot = pi >= spec.personas_regular;
        let n_dialogues = if few_shot {
            spec.few_shot_dialogues
        } else {
            rng.gen_range(spec.regular_dialogues.0..=spec.regular_dialogues.1)
        };
        let mut dialogues = Vec::with_capacity(n_dialogues);
        for _ in 0..n_dialogues {
            let mut turns = Vec::with_capacity(spec.exchanges_per_dialogue * 2);
            for _ in 0..spec.exchanges_per_dialogue {
                // three trait exchanges for every filler exchange
                if rng.gen_range(0..4) < 3 {
                    let (slot, value) = values[rng.gen_range(0..values.len())];
                    turns.push(Turn {
                        speaker: 1,
                        text: trait_question(slot),
                    });
                    turns.push(Turn {
                        speaker: 2,
                        text: trait_answer(slot, value),
                    });
                } else {
                    let fi = rng.gen_range(0..FILLER_QUESTIONS.len());
                    turns.push(Turn {
                        speaker: 1,
                        text: FILLER_QUESTIONS[fi].into(),
                    });
                    turns.push(Turn {
                        speaker: 2,
                        text: FILLER_ANSWERS[fi].into(),
                    });
                }
            }
            dialogues.push(turns);
        }
        personas.push(PersonaRecord {
            persona_id: format!("p{pi:03}"),
            description,
            dialogues,
        });
    }
    Ok(Corpus { personas })
}

/// Persona-free small talk built from the same templates and word list as
/// the persona corpus. The answered slot and value are dealt independently
/// of the asked slot, and nothing is consistent across turns, so a model
/// pretrained on this text picks up the utterance grammar but not
/// slot-matched answering; that behaviour stays learnable downstream.
/// Values are dealt from a reshuffled deck of all slot/value pairs, which
/// keeps the word coverage identical to the persona corpus.
pub fn generate_chatter(spec: &SyntheticSpec, n_dialogues: usize, seed: u64) -> Result<Corpus> {
    if spec.slots.is_empty() || spec.slots.iter().any(|(_, vals)| vals.is_empty()) {
        return Err(PktError::Config("synthetic spec needs nonempty slot vocabularies".into()));
    }
    if n_dialogues == 0 || spec.exchanges_per_dialogue == 0 {
        return Err(PktError::Config("dialogue and exchange counts must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deck: Vec<(usize, usize)> = Vec::new();
    for (si, (_, vals)) in spec.slots.iter().enumerate() {
        for vi in 0..vals.len() {
            deck.push((si, vi));
        }
    }
    let mut dealt = deck.len();

    let mut all_dialogues = Vec::with_capacity(n_dialogues);
    for _ in 0..n_dialogues {
        let mut turns = Vec::with_capacity(spec.exchanges_per_dialogue * 2);
        for _ in 0..spec.exchanges_per_dialogue {
            // same three-to-one trait/filler ratio as the persona corpus
            if rng.gen_range(0..4) < 3 {
                let asked = rng.gen_range(0..spec.slots.len());
                if dealt == deck.len() {
                    deck.shuffle(&mut rng);
                    dealt = 0;
                }
                let (si, vi) = deck[dealt];
                dealt += 1;
                turns.push(Turn {
                    speaker: 1,
                    text: trait_question(&spec.slots[asked].0),
                });
                turns.push(Turn {
                    speaker: 2,
                    text: trait_answer(&spec.slots[si].0, &spec.slots[si].1[vi]),
                });
            } else {
                let fi = rng.gen_range(0..FILLER_QUESTIONS.len());
                turns.push(Turn {
                    speaker: 1,
                    text: FILLER_QUESTIONS[fi].into(),
                });
                turns.push(Turn {
                    speaker: 2,
                    text: FILLER_ANSWERS[fi].into(),
                });
            }
        }
        all_dialogues.push(turns);
    }

    // chunked into small records purely so the JSONL stays skimmable
    let personas = all_dialogues
        .chunks(8)
        .enumerate()
        .map(|(gi, chunk)| PersonaRecord {
            persona_id: format!("g{gi:03}"),
            description: Vec::new(),
            dialogues: chunk.to_vec(),
        })
        .collect();
    Ok(Corpus { personas })
}

/// Slot vocabularies as used by the keyword consistency judge, written
/// next to generated corpora.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SlotVocab {
    pub slots: BTreeMap<String, Vec<String>>,
}

impl SlotVocab {
    pub fn from_spec(spec: &SyntheticSpec) -> SlotVocab {
        SlotVocab {
            slots: spec
                .slots
                .iter()
                .map(|(name, vals)| (name.clone(), vals.clone()))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<SlotVocab> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n")?;
        out.flush()?;
        Ok(())
    }
}
