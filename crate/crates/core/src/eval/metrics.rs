use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{AutoVerdict, EvalError, Judgement, VerdictRecord};
use crate::data::AnswerType;

/// `100·c/n` in tenths of a percent, rounded half-up, in integer arithmetic:
/// `floor(1000c/n + 1/2) = floor((2000c + n) / 2n)`.
pub fn tenths_half_up(correct: usize, n: usize) -> Option<u64> {
    (n > 0).then(|| (2000 * correct as u64 + n as u64) / (2 * n as u64))
}

/// Which verdict layer decides correctness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// Only EXACT auto verdicts count as correct.
    Exact,
    /// Final verdicts after rule suggestions and human review.
    Assisted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regime: Regime,
    pub n_open: usize,
    pub n_closed: usize,
    pub correct_open: usize,
    pub correct_closed: usize,
    /// Percentages rounded half-up to one decimal; `None` when the group is empty.
    pub acc_open: Option<f64>,
    pub acc_closed: Option<f64>,
    pub acc_overall: Option<f64>,
    /// Unrounded percentages, for comparing differences between runs.
    pub raw_open: Option<f64>,
    pub raw_closed: Option<f64>,
    pub raw_overall: Option<f64>,
}

impl MetricsReport {
    pub fn from_counts(regime: Regime, n_open: usize, n_closed: usize, correct_open: usize, correct_closed: usize) -> Self {
        assert!(correct_open <= n_open && correct_closed <= n_closed, "more correct than total");
        let rounded = |c, n| tenths_half_up(c, n).map(|t| t as f64 / 10.0);
        let raw = |c: usize, n: usize| (n > 0).then(|| 100.0 * c as f64 / n as f64);
        let (c, n) = (correct_open + correct_closed, n_open + n_closed);
        Self {
            regime,
            n_open,
            n_closed,
            correct_open,
            correct_closed,
            acc_open: rounded(correct_open, n_open),
            acc_closed: rounded(correct_closed, n_closed),
            acc_overall: rounded(c, n),
            raw_open: raw(correct_open, n_open),
            raw_closed: raw(correct_closed, n_closed),
            raw_overall: raw(c, n),
        }
    }

    /// (open, closed, overall) in tenths of a percent.
    pub fn tenths(&self) -> (Option<u64>, Option<u64>, Option<u64>) {
        (
            tenths_half_up(self.correct_open, self.n_open),
            tenths_half_up(self.correct_closed, self.n_closed),
            tenths_half_up(self.correct_open + self.correct_closed, self.n_open + self.n_closed),
        )
    }
}

/// Open/closed/overall accuracy under `regime`. In the assisted regime every
/// record needs a final verdict; the error lists the ids that lack one.
pub fn aggregate(records: &[VerdictRecord], regime: Regime) -> Result<MetricsReport, EvalError> {
    let mut seen = HashSet::new();
    let mut missing = Vec::new();
    let (mut n_open, mut n_closed, mut c_open, mut c_closed) = (0, 0, 0, 0);
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(EvalError::DuplicateId(r.id.clone()));
        }
        r.check()?;
        let correct = match regime {
            Regime::Exact => r.auto == AutoVerdict::Exact,
            Regime::Assisted => match r.final_verdict {
                Some(j) => j == Judgement::Correct,
                None => {
                    missing.push(r.id.clone());
                    continue;
                }
            },
        };
        match r.answer_type {
            AnswerType::Open => {
                n_open += 1;
                c_open += usize::from(correct);
            }
            AnswerType::Closed => {
                n_closed += 1;
                c_closed += usize::from(correct);
            }
        }
    }
    if !missing.is_empty() {
        return Err(EvalError::MissingFinal(missing));
    }
    Ok(MetricsReport::from_counts(regime, n_open, n_closed, c_open, c_closed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSolution {
    pub n_open: usize,
    pub n_closed: usize,
    pub correct_open: usize,
    pub correct_closed: usize,
}

/// Every split of `total` questions into open and closed, with correct counts,
/// whose half-up rounded accuracies equal the targets (given in tenths).
pub fn find_counts(total: usize, open: u64, closed: u64, overall: u64) -> Vec<CountSolution> {
    let mut out = Vec::new();
    for n_open in 1..total {
        let n_closed = total - n_open;
        for correct_open in (0..=n_open).filter(|&c| tenths_half_up(c, n_open) == Some(open)) {
            for correct_closed in (0..=n_closed).filter(|&c| tenths_half_up(c, n_closed) == Some(closed)) {
                if tenths_half_up(correct_open + correct_closed, total) == Some(overall) {
                    out.push(CountSolution {
                        n_open,
                        n_closed,
                        correct_open,
                        correct_closed,
                    });
                }
            }
        }
    }
    out
}
