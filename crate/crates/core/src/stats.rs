//! Agreement statistics: Likert binarization, percent agreement,
//! Fleiss' kappa, pairwise metric-agreement heatmaps, and
//! consistency-versus-length summary tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ConsistencyReport, MetricKind};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("likert rating {0} is out of range 1..=6")]
    LikertOutOfRange(i64),
    #[error("lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("annotation matrix invariant violated: {0}")]
    InvariantViolation(String),
    #[error("kappa is undefined: chance agreement is 1 but observed agreement is {0}")]
    UndefinedKappa(f64),
    #[error("no comparable turns for metric pair ({0}, {1})")]
    NoComparableTurns(MetricKind, MetricKind),
}

/// A 1-6 Likert consistency rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct LikertRating(u8);

impl LikertRating {
    pub fn new(value: i64) -> Result<LikertRating, StatsError> {
        if (1..=6).contains(&value) {
            Ok(LikertRating(value as u8))
        } else {
            Err(StatsError::LikertOutOfRange(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

impl TryFrom<i64> for LikertRating {
    type Error = StatsError;
    fn try_from(value: i64) -> Result<Self, Self::Error> {
        LikertRating::new(value)
    }
}

impl From<LikertRating> for i64 {
    fn from(rating: LikertRating) -> i64 {
        rating.0 as i64
    }
}

/// Ratings of 4 and above count as consistent, 3 and below as
/// inconsistent.
pub fn binarize_likert(rating: LikertRating) -> u8 {
    u8::from(rating.value() >= 4)
}

/// Fraction of positions where the two binary lists agree.
pub fn percent_agreement(a: &[u8], b: &[u8]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let matches = a.iter().zip(b).filter(|(x, y)| x == y).count();
    Ok(matches as f64 / a.len() as f64)
}

/// Items × categories rating counts with a constant number of raters
/// per item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationMatrix {
    pub raters_per_item: u32,
    /// `counts[i][j]` — raters assigning item i to category j.
    pub counts: Vec<Vec<u32>>,
}

impl AnnotationMatrix {
    pub fn new(raters_per_item: u32, counts: Vec<Vec<u32>>) -> Result<AnnotationMatrix, StatsError> {
        let matrix = AnnotationMatrix { raters_per_item, counts };
        matrix.validate()?;
        Ok(matrix)
    }

    pub fn items(&self) -> usize {
        self.counts.len()
    }

    pub fn categories(&self) -> usize {
        self.counts.first().map(Vec::len).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.counts.is_empty() {
            return Err(StatsError::InvariantViolation("no items".into()));
        }
        let categories = self.categories();
        if categories < 2 {
            return Err(StatsError::InvariantViolation("need at least 2 categories".into()));
        }
        if self.raters_per_item < 2 {
            return Err(StatsError::InvariantViolation("need at least 2 raters per item".into()));
        }
        for (i, row) in self.counts.iter().enumerate() {
            if row.len() != categories {
                return Err(StatsError::InvariantViolation(format!(
                    "row {i} has {} categories, expected {categories}",
                    row.len()
                )));
            }
            let sum: u32 = row.iter().sum();
            if sum != self.raters_per_item {
                return Err(StatsError::InvariantViolation(format!(
                    "row {i} sums to {sum}, expected {}",
                    self.raters_per_item
                )));
            }
        }
        Ok(())
    }

    /// Builds a binary matrix from per-item 0/1 rating lists, dropping
    /// items whose rating count differs from the modal rater count.
    /// Returns the matrix and the number of dropped items.
    pub fn from_binary_ratings(items: &[Vec<u8>]) -> Result<(AnnotationMatrix, usize), StatsError> {
        if items.is_empty() {
            return Err(StatsError::EmptyInput);
        }
        let mut count_freq: BTreeMap<usize, usize> = BTreeMap::new();
        for ratings in items {
            *count_freq.entry(ratings.len()).or_insert(0) += 1;
        }
        let (&n, _) = count_freq
            .iter()
            .max_by_key(|(len, freq)| (**freq, **len))
            .expect("non-empty");
        if n < 2 {
            return Err(StatsError::InvariantViolation("need at least 2 raters per item".into()));
        }
        let mut rows = Vec::new();
        let mut dropped = 0usize;
        for ratings in items {
            if ratings.len() != n {
                dropped += 1;
                continue;
            }
            let positives = ratings.iter().filter(|&&r| r == 1).count() as u32;
            rows.push(vec![n as u32 - positives, positives]);
        }
        Ok((AnnotationMatrix::new(n as u32, rows)?, dropped))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub value: f64,
    /// True when every rating fell in a single category: chance
    /// agreement is 1 and the kappa value is the convention 1.0 rather
    /// than the undefined ratio.
    pub degenerate_chance: bool,
}

/// Fleiss' kappa: κ = (P̄ − P̄e) / (1 − P̄e), with per-item agreement
/// P_i = (Σ_j n_ij² − n) / (n(n−1)) and category shares
/// p_j = Σ_i n_ij / (N·n).
pub fn fleiss_kappa(matrix: &AnnotationMatrix) -> Result<KappaResult, StatsError> {
    matrix.validate()?;
    let n_items = matrix.items() as f64;
    let n_raters = matrix.raters_per_item as f64;

    let mut mean_agreement = 0.0;
    for row in &matrix.counts {
        let sum_sq: f64 = row.iter().map(|&c| (c as f64) * (c as f64)).sum();
        mean_agreement += (sum_sq - n_raters) / (n_raters * (n_raters - 1.0));
    }
    mean_agreement /= n_items;

    let mut chance_agreement = 0.0;
    for j in 0..matrix.categories() {
        let share: f64 =
            matrix.counts.iter().map(|row| row[j] as f64).sum::<f64>() / (n_items * n_raters);
        chance_agreement += share * share;
    }

    if chance_agreement >= 1.0 {
        // All mass in one category forces every P_i to 1 as well; treat
        // anything else as a genuine undefined kappa.
        if (mean_agreement - 1.0).abs() < 1e-9 {
            return Ok(KappaResult { value: 1.0, degenerate_chance: true });
        }
        return Err(StatsError::UndefinedKappa(mean_agreement));
    }

    Ok(KappaResult {
        value: (mean_agreement - chance_agreement) / (1.0 - chance_agreement),
        degenerate_chance: false,
    })
}

// --- metric agreement heatmap ------------------------------------------

/// Per-turn binary classification of a metric within a report: the
/// judge bit for the binary metrics, `fraction >= tau` for QA.
fn classify(report: &ConsistencyReport, metric: MetricKind, turn: usize, tau: f64) -> Option<u8> {
    let scores = report.per_turn.get(turn)?;
    match metric {
        MetricKind::PromptToLine => scores.prompt_to_line,
        MetricKind::LineToLine => scores.line_to_line,
        MetricKind::Qa => scores.qa_fraction.map(|f| u8::from(f >= tau)),
    }
}

/// Symmetric 3×3 matrix (prompt, line, qa) of the fraction of pooled
/// turns where two metrics agree in their binary classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementHeatmap {
    pub metrics: [MetricKind; 3],
    pub entries: [[f64; 3]; 3],
    /// Pooled comparable-turn counts per cell.
    pub support: [[usize; 3]; 3],
}

pub fn metric_agreement_heatmap(
    reports: &[ConsistencyReport],
    qa_threshold: f64,
) -> Result<AgreementHeatmap, StatsError> {
    let metrics = [MetricKind::PromptToLine, MetricKind::LineToLine, MetricKind::Qa];
    let mut entries = [[1.0f64; 3]; 3];
    let mut support = [[0usize; 3]; 3];

    for (row, &m1) in metrics.iter().enumerate() {
        for (col, &m2) in metrics.iter().enumerate().skip(row + 1) {
            let mut comparable = 0usize;
            let mut agreeing = 0usize;
            for report in reports {
                for turn in 0..report.per_turn.len() {
                    let (Some(a), Some(b)) = (
                        classify(report, m1, turn, qa_threshold),
                        classify(report, m2, turn, qa_threshold),
                    ) else {
                        continue;
                    };
                    comparable += 1;
                    if a == b {
                        agreeing += 1;
                    }
                }
            }
            if comparable == 0 {
                return Err(StatsError::NoComparableTurns(m1, m2));
            }
            let fraction = agreeing as f64 / comparable as f64;
            entries[row][col] = fraction;
            entries[col][row] = fraction;
            support[row][col] = comparable;
            support[col][row] = comparable;
        }
    }
    // Diagonal support is the number of turns where the metric classified
    // at all.
    for (i, &metric) in metrics.iter().enumerate() {
        support[i][i] = reports
            .iter()
            .map(|r| {
                (0..r.per_turn.len())
                    .filter(|&t| classify(r, metric, t, qa_threshold).is_some())
                    .count()
            })
            .sum();
    }
    Ok(AgreementHeatmap { metrics, entries, support })
}

// --- consistency by length ------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let count = values.len();
    let mean = values.iter().sum::<f64>() / count as f64;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
    Some(MeanStd { mean, std: variance.sqrt(), count })
}

/// Summary rows of aggregate scores grouped by target length; empty
/// buckets are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucketRow {
    pub target_length: usize,
    pub metric: MetricKind,
    pub stats: MeanStd,
}

pub fn consistency_by_length(reports: &[ConsistencyReport]) -> Vec<LengthBucketRow> {
    let mut buckets: BTreeMap<(usize, MetricKind), Vec<f64>> = BTreeMap::new();
    for report in reports {
        for metric in MetricKind::ALL {
            if let Some(value) = report.aggregate.get(metric) {
                buckets.entry((report.target_length, metric)).or_default().push(value);
            }
        }
    }
    buckets
        .into_iter()
        .filter_map(|((target_length, metric), values)| {
            mean_std(&values).map(|stats| LengthBucketRow { target_length, metric, stats })
        })
        .collect()
}
