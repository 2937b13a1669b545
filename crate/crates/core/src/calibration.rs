//! Threshold calibration against sampled relevance judgments.
//!
//! A score binarizes to 1 when it is at or above the threshold. Binarized
//! scores are compared with binarized judgments to get a confusion matrix
//! per candidate threshold, and the threshold with the best F1 is kept.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Judgment, JudgmentSet, RelevancePolicy};
use crate::trec_io::ScoreTable;

pub const DEFAULT_GRID_STEP: f64 = 0.05;
pub const DEFAULT_SAMPLE_FRACTION: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Threshold(value))
        } else {
            Err(Error::Invalid(format!("threshold {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Threshold {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Threshold::new(v)
    }
}

impl From<Threshold> for f64 {
    fn from(t: Threshold) -> f64 {
        t.0
    }
}

/// Binarized score: 1 at or above the threshold, 0 below it.
pub fn s_pre(score: f64, t: Threshold) -> u8 {
    u8::from(score >= t.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    fn add(&mut self, predicted: u8, actual: u8) {
        match (predicted, actual) {
            (1, 1) => self.tp += 1,
            (0, 0) => self.tn += 1,
            (1, 0) => self.fp += 1,
            _ => self.fn_ += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1, each 0 when its denominator is 0.
pub fn prf1(c: ConfusionCounts) -> Prf1 {
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    // Same value as 2PR / (P + R); one division keeps equal F1s bit-equal.
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
    Prf1 {
        precision,
        recall,
        f1,
    }
}

/// Uniform sample without replacement of `round(fraction * |judgments|)`
/// judged pairs. The result depends only on the judgment set and `seed`.
pub fn sample_judged_pairs(
    judgments: &JudgmentSet,
    fraction: f64,
    seed: u64,
) -> Result<JudgmentSet> {
    if judgments.is_empty() {
        return Err(Error::EmptyJudgments);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!(
            "sample fraction {fraction} outside (0, 1]"
        )));
    }
    let all: Vec<(&str, &str, u32)> = judgments.iter().collect();
    let k = (fraction * all.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, all.len(), k).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let (q, p, level) = all[i];
            Judgment {
                query_id: q.to_string(),
                passage_id: p.to_string(),
                level,
            }
        })
        .collect()
}

/// Sampled pairs that have a (non-fallback) score, as (score, label).
#[derive(Debug, Clone)]
pub struct LabeledScores {
    pairs: Vec<(f64, u8)>,
    skipped: usize,
}

impl LabeledScores {
    pub fn new(scores: &ScoreTable, sample: &JudgmentSet, policy: RelevancePolicy) -> Self {
        let mut pairs = Vec::with_capacity(sample.len());
        let mut skipped = 0;
        for (q, p, level) in sample.iter() {
            match scores.get(q).and_then(|m| m.get(p)) {
                Some(s) if !s.fallback => pairs.push((s.value, policy.binarize(level))),
                _ => skipped += 1,
            }
        }
        LabeledScores { pairs, skipped }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Sampled pairs without a usable score.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn confusion(&self, t: Threshold) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        for &(score, label) in &self.pairs {
            c.add(s_pre(score, t), label);
        }
        c
    }
}

/// Confusion counts of binarized scores against binarized judgments. Sampled
/// pairs without a score are skipped.
pub fn confusion(
    scores: &ScoreTable,
    sample: &JudgmentSet,
    policy: RelevancePolicy,
    t: Threshold,
) -> ConfusionCounts {
    LabeledScores::new(scores, sample, policy).confusion(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SearchMode {
    /// Every multiple of `step` in [0, 1], plus 1.
    Grid { step: f64 },
    /// Start somewhere and move one `step` at a time toward higher F1.
    HillClimb { start: f64, step: f64 },
}

impl Default for SearchMode {
    fn default() -> Self {
        SearchMode::Grid {
            step: DEFAULT_GRID_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub min_relevant_level: u32,
    pub search: SearchMode,
    pub sample_fraction: f64,
    pub seed: Option<u64>,
    pub sample_size: usize,
    pub evaluated_pairs: usize,
    pub skipped_pairs: usize,
    /// Evaluated thresholds, ascending.
    pub rows: Vec<CalibrationRow>,
    pub selected: f64,
    pub selected_f1: f64,
}

impl CalibrationReport {
    pub fn selected_threshold(&self) -> Threshold {
        Threshold(self.selected)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Rounds away accumulated float error in threshold arithmetic.
fn snap(x: f64) -> f64 {
    ((x * 1e9).round() / 1e9).clamp(0.0, 1.0)
}

/// The grid `{0, step, 2 step, ..., 1}`.
pub fn grid_thresholds(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Invalid(format!("grid step {step} outside (0, 1]")));
    }
    let n = (1.0 / step + 1e-9).floor() as usize;
    let mut grid: Vec<f64> = (0..=n).map(|i| snap(i as f64 * step)).collect();
    if *grid.last().expect("non-empty") < 1.0 {
        grid.push(1.0);
    }
    Ok(grid)
}

fn row(labeled: &LabeledScores, t: f64) -> CalibrationRow {
    let counts = labeled.confusion(Threshold(t));
    let Prf1 {
        precision,
        recall,
        f1,
    } = prf1(counts);
    CalibrationRow {
        threshold: t,
        counts,
        precision,
        recall,
        f1,
    }
}

/// Picks the F1-maximizing threshold on the sampled pairs. Ties go to the
/// smaller threshold.
pub fn select_threshold(
    scores: &ScoreTable,
    sample: &JudgmentSet,
    policy: RelevancePolicy,
    search: SearchMode,
) -> Result<CalibrationReport> {
    if sample.is_empty() {
        return Err(Error::EmptyJudgments);
    }
    let labeled = LabeledScores::new(scores, sample, policy);
    if labeled.is_empty() {
        return Err(Error::Invalid(
            "no sampled judgment has a relevance score".into(),
        ));
    }

    let (rows, selected) = match search {
        SearchMode::Grid { step } => {
            let rows: Vec<CalibrationRow> = grid_thresholds(step)?
                .into_iter()
                .map(|t| row(&labeled, t))
                .collect();
            let mut best = 0;
            for (i, r) in rows.iter().enumerate() {
                if r.f1 > rows[best].f1 {
                    best = i;
                }
            }
            let selected = rows[best].threshold;
            (rows, selected)
        }
        SearchMode::HillClimb { start, step } => hill_climb(&labeled, start, step)?,
    };

    let selected_f1 = rows
        .iter()
        .find(|r| r.threshold == selected)
        .map(|r| r.f1)
        .expect("selected threshold was evaluated");
    Ok(CalibrationReport {
        min_relevant_level: policy.min_relevant_level(),
        search,
        sample_fraction: 1.0,
        seed: None,
        sample_size: sample.len(),
        evaluated_pairs: labeled.len(),
        skipped_pairs: labeled.skipped(),
        rows,
        selected,
        selected_f1,
    })
}

fn hill_climb(
    labeled: &LabeledScores,
    start: f64,
    step: f64,
) -> Result<(Vec<CalibrationRow>, f64)> {
    if !(0.0..=1.0).contains(&start) {
        return Err(Error::Invalid(format!(
            "hill-climb start {start} outside [0, 1]"
        )));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Invalid(format!(
            "hill-climb step {step} outside (0, 1]"
        )));
    }
    let mut seen: BTreeMap<u64, CalibrationRow> = BTreeMap::new();
    let mut f1_at = |t: f64| -> f64 {
        seen.entry(t.to_bits())
            .or_insert_with(|| row(labeled, t))
            .f1
    };

    // Each move either raises F1 or keeps it and lowers t, so this ends.
    let mut cur = snap(start);
    loop {
        let up = snap(cur + step);
        let down = snap(cur - step);
        let (fc, fu, fd) = (f1_at(cur), f1_at(up), f1_at(down));
        if fu > fc && fu > fd {
            cur = up;
        } else if down < cur && fd >= fc && fd >= fu {
            cur = down;
        } else {
            break;
        }
    }

    // Non-negative f64 bit patterns sort like the values.
    let rows = seen.into_values().collect();
    Ok((rows, cur))
}

/// Samples `fraction` of the judgments and selects a threshold on them.
pub fn calibrate(
    scores: &ScoreTable,
    judgments: &JudgmentSet,
    policy: RelevancePolicy,
    fraction: f64,
    seed: u64,
    search: SearchMode,
) -> Result<CalibrationReport> {
    let sample = sample_judged_pairs(judgments, fraction, seed)?;
    let mut report = select_threshold(scores, &sample, policy, search)?;
    report.sample_fraction = fraction;
    report.seed = Some(seed);
    Ok(report)
}
