//! The synthetic yes/no majority task, its vocabulary, splits and JSONL
//! import/export.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LccError, Result};
use crate::lcc::RecoverySample;
use crate::lossdiff::Prompt;

pub const BOS: u32 = 0;
pub const SEP: u32 = 1;
pub const YES: u32 = 2;
pub const NO: u32 = 3;
pub const EOS: u32 = 4;
pub const SYM_A: u32 = 5;
pub const SYM_B: u32 = 6;
pub const FIRST_FILLER: u32 = 7;

/// Token ↔ text mapping. Fillers are named `x07`, `x08`, ….
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size <= FIRST_FILLER as usize {
            return Err(LccError::Config(format!(
                "vocabulary of {size} leaves no filler tokens"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn name(&self, token: u32) -> String {
        match token {
            BOS => "<bos>".into(),
            SEP => "?".into(),
            YES => "yes".into(),
            NO => "no".into(),
            EOS => "<eos>".into(),
            SYM_A => "A".into(),
            SYM_B => "B".into(),
            t => format!("x{t:02}"),
        }
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        let t = match word {
            "<bos>" => BOS,
            "?" => SEP,
            "yes" => YES,
            "no" => NO,
            "<eos>" => EOS,
            "A" => SYM_A,
            "B" => SYM_B,
            w => w.strip_prefix('x')?.parse().ok().filter(|&t| t >= FIRST_FILLER)?,
        };
        ((t as usize) < self.size).then_some(t)
    }

    pub fn encode(&self, text: &str) -> std::result::Result<Vec<u32>, String> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| w.to_string()))
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens.iter().map(|&t| self.name(t)).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Recovery,
    Probe,
    HeldOut,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Recovery, Split::Probe, Split::HeldOut];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub question: Vec<u32>,
    pub response: Vec<u32>,
    /// The answer token scored by accuracy, when known.
    pub answer: Option<u32>,
}

impl Sample {
    pub fn sequence(&self) -> Vec<u32> {
        [self.question.as_slice(), &self.response].concat()
    }

    pub fn recovery_sample(&self) -> RecoverySample {
        RecoverySample {
            tokens: self.sequence(),
            response_start: self.question.len(),
        }
    }

    /// The question as a yes/no prompt; `None` without a yes/no answer.
    pub fn prompt(&self) -> Option<Prompt> {
        let correct = self.answer?;
        let incorrect = match correct {
            YES => NO,
            NO => YES,
            _ => return None,
        };
        Some(Prompt {
            tokens: self.question.clone(),
            correct,
            incorrect,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    pub seed: u64,
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, &s)| s == split)
            .map(|(x, _)| x)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Shape of generated questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskParams {
    pub n_samples: usize,
    pub seed: u64,
    /// Inclusive range of occurrences of each symbol.
    pub min_count: usize,
    pub max_count: usize,
    /// Inclusive upper bound on filler tokens per question.
    pub max_fillers: usize,
    /// Inclusive upper bound on `|count(A) − count(B)|`; small margins make
    /// the comparison depend on exact counts.
    pub max_margin: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            seed: 0,
            min_count: 1,
            max_count: 6,
            max_fillers: 4,
            max_margin: 1,
        }
    }
}

/// The majority rule: yes iff `A` occurs strictly more often than `B`.
pub fn majority_answer(body: &[u32]) -> u32 {
    let a = body.iter().filter(|&&t| t == SYM_A).count();
    let b = body.iter().filter(|&&t| t == SYM_B).count();
    if a > b {
        YES
    } else {
        NO
    }
}

/// Generates `<bos> body ? → yes|no <eos>` samples with exactly balanced
/// labels (for even `n`), distinct questions and a seeded 70/10/10/10
/// train/recovery/probe/held-out split.
pub fn gen_synthetic_task(params: &TaskParams, vocab_size: usize) -> Result<TaskDataset> {
    let n = params.n_samples;
    if n < 200 {
        return Err(LccError::Config(format!("n_samples = {n}; need at least 200")));
    }
    if params.min_count > params.max_count || params.max_count == 0 {
        return Err(LccError::Config("symbol count range is empty".into()));
    }
    if params.max_margin == 0 {
        return Err(LccError::Config("max_margin = 0 admits no yes answers".into()));
    }
    Vocabulary::new(vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut seen = HashSet::new();
    let mut samples = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while samples.len() < n {
        attempts += 1;
        if attempts > 1000 * n {
            return Err(LccError::Config("task parameters admit too few distinct questions".into()));
        }
        let want = if samples.len() % 2 == 0 { YES } else { NO };
        let na = rng.random_range(params.min_count..=params.max_count);
        let nb = rng.random_range(params.min_count..=params.max_count);
        let answer = if na > nb { YES } else { NO };
        if answer != want || na.abs_diff(nb) > params.max_margin {
            continue;
        }
        let nf = rng.random_range(0..=params.max_fillers);
        let mut body: Vec<u32> = std::iter::repeat_n(SYM_A, na)
            .chain(std::iter::repeat_n(SYM_B, nb))
            .chain((0..nf).map(|_| rng.random_range(FIRST_FILLER..vocab_size as u32)))
            .collect();
        body.shuffle(&mut rng);
        debug_assert_eq!(majority_answer(&body), answer);
        let question: Vec<u32> = std::iter::once(BOS).chain(body).chain(std::iter::once(SEP)).collect();
        if !seen.insert(question.clone()) {
            continue;
        }
        samples.push(Sample {
            question,
            response: vec![answer, EOS],
            answer: Some(answer),
        });
    }
    samples.shuffle(&mut rng);
    let cut = |f: f64| (f * n as f64).round() as usize;
    let splits = (0..n)
        .map(|i| match i {
            i if i < cut(0.7) => Split::Train,
            i if i < cut(0.8) => Split::Recovery,
            i if i < cut(0.9) => Split::Probe,
            _ => Split::HeldOut,
        })
        .collect();
    Ok(TaskDataset {
        seed: params.seed,
        samples,
        splits,
    })
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    question: String,
    response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

/// Problems found while ingesting a JSONL file; ingestion continues past
/// each of them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IngestIssues {
    /// 1-based line numbers that failed to parse.
    pub malformed_lines: Vec<usize>,
    /// Records rejected because of unknown tokens.
    pub unknown_token_records: usize,
}

/// Reads `{"question", "response", "answer"?, "split"?}` lines. Records
/// without a split land in the training split.
pub fn ingest_jsonl(path: &Path, vocab: &Vocabulary) -> Result<(TaskDataset, IngestIssues)> {
    let file = std::fs::File::open(path).map_err(|e| LccError::io(path, e))?;
    let mut issues = IngestIssues::default();
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LccError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("{}:{}: malformed record: {e}", path.display(), i + 1);
                issues.malformed_lines.push(i + 1);
                continue;
            }
        };
        let answer = match rec.answer.as_deref().map(|a| vocab.id(a.trim())) {
            None => Ok(None),
            Some(Some(t)) => Ok(Some(t)),
            Some(None) => Err(()),
        };
        match (vocab.encode(&rec.question), vocab.encode(&rec.response), answer) {
            (Ok(question), Ok(response), Ok(answer)) if !question.is_empty() => {
                samples.push(Sample {
                    question,
                    response,
                    answer,
                });
                splits.push(rec.split.unwrap_or(Split::Train));
            }
            _ => {
                log::warn!("{}:{}: record has unknown tokens", path.display(), i + 1);
                issues.unknown_token_records += 1;
            }
        }
    }
    if samples.is_empty() {
        log::warn!("{}: no records ingested", path.display());
    }
    Ok((
        TaskDataset {
            seed: 0,
            samples,
            splits,
        },
        issues,
    ))
}

pub fn export_jsonl(ds: &TaskDataset, vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for (s, &split) in ds.samples.iter().zip(&ds.splits) {
        let rec = JsonRecord {
            question: vocab.decode(&s.question),
            response: vocab.decode(&s.response),
            answer: s.answer.map(|a| vocab.name(a)),
            split: Some(split),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").expect("writing to a Vec cannot fail");
    }
    crate::format::write_file(path, &out)
}
