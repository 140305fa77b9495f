//! Scoring of generated answers: normalization, exact match, the rule engine
//! that pre-sorts non-exact pairs for human review, and accuracy aggregation.
//!
//! Prediction file, one JSON object per line:
//! `{"id": "<unique>", "question": "...", "ground_truth": "...", "generated": "...", "answer_type": "open"|"closed"}`
//!
//! Verdict file, one JSON object per line:
//! `{"id", "answer_type", "auto": "EXACT"|"RULE_CORRECT"|"UNRESOLVED", "reason"?, "human": {"<annotator>": "CORRECT"|"INCORRECT"}, "final": "CORRECT"|"INCORRECT"|null, "adjudicator"?}`

mod metrics;
mod rules;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::AnswerType;

pub use metrics::{aggregate, find_counts, tenths_half_up, CountSolution, MetricsReport, Regime};
pub use rules::{rule_classify, token_containment, tokens, AutoVerdict, Classification, RuleReason, SynonymTable};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate prediction id `{0}`")]
    DuplicateId(String),
    #[error("prediction list is empty")]
    Empty,
    #[error("missing final verdict for: {}", .0.join(", "))]
    MissingFinal(Vec<String>),
    #[error("inconsistent verdict for `{id}`: {message}")]
    Inconsistent { id: String, message: String },
}

/// Lowercase, trim, collapse whitespace, drop trailing punctuation and leading
/// articles. Applied until nothing changes, so it is idempotent.
pub fn normalize(answer: &str) -> String {
    let mut cur = answer.to_string();
    loop {
        let next = normalize_once(&cur);
        if next == cur {
            return next;
        }
        cur = next;
    }
}

fn normalize_once(s: &str) -> String {
    let lower = s.to_lowercase();
    let mut words: Vec<&str> = lower.split_whitespace().collect();
    while words.len() > 1 && matches!(words[0], "a" | "an" | "the") {
        words.remove(0);
    }
    let joined = words.join(" ");
    joined
        .trim_end_matches(['.', ',', '!', '?', ';', ':'])
        .trim_end()
        .to_string()
}

pub fn exact_match(pred: &str, gt: &str) -> bool {
    normalize(pred) == normalize(gt)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub id: String,
    pub question: String,
    pub ground_truth: String,
    pub generated: String,
    pub answer_type: AnswerType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Judgement {
    Correct,
    Incorrect,
}

/// One line of a verdict file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerdictRecord {
    pub id: String,
    pub answer_type: AnswerType,
    pub auto: AutoVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RuleReason>,
    #[serde(default)]
    pub human: BTreeMap<String, Judgement>,
    #[serde(rename = "final")]
    pub final_verdict: Option<Judgement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjudicator: Option<String>,
}

impl VerdictRecord {
    /// Auto verdict only; EXACT items are final CORRECT immediately.
    pub fn from_auto(p: &Prediction, c: Classification) -> Self {
        Self {
            id: p.id.clone(),
            answer_type: p.answer_type,
            auto: c.auto,
            reason: c.reason,
            human: BTreeMap::new(),
            final_verdict: (c.auto == AutoVerdict::Exact).then_some(Judgement::Correct),
            adjudicator: None,
        }
    }

    pub fn check(&self) -> Result<(), EvalError> {
        if self.auto == AutoVerdict::Exact && self.final_verdict != Some(Judgement::Correct) {
            return Err(EvalError::Inconsistent {
                id: self.id.clone(),
                message: "EXACT items must be final CORRECT".into(),
            });
        }
        Ok(())
    }
}

/// A prediction with its rule-engine outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub prediction: Prediction,
    #[serde(flatten)]
    pub classification: Classification,
}

/// Input for a human-review session: the review items (every non-EXACT
/// prediction, RULE_CORRECT ones carrying their suggestion) and the EXACT ones,
/// which only feed the final metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanSessionSpec {
    pub items: Vec<ScoredPrediction>,
    pub exact: Vec<ScoredPrediction>,
}

pub fn score_predictions(preds: &[Prediction], synonyms: &SynonymTable) -> Vec<ScoredPrediction> {
    preds
        .iter()
        .map(|p| ScoredPrediction {
            prediction: p.clone(),
            classification: rule_classify(p, synonyms),
        })
        .collect()
}

pub fn build_human_session(preds: &[Prediction], synonyms: &SynonymTable) -> Result<HumanSessionSpec, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    check_unique(preds)?;
    let (exact, items) = score_predictions(preds, synonyms)
        .into_iter()
        .partition(|s| s.classification.auto == AutoVerdict::Exact);
    Ok(HumanSessionSpec { items, exact })
}

fn check_unique(preds: &[Prediction]) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    for p in preds {
        if !seen.insert(p.id.as_str()) {
            return Err(EvalError::DuplicateId(p.id.clone()));
        }
    }
    Ok(())
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn read(path: &Path) -> Result<String, EvalError> {
    fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let preds: Vec<Prediction> = parse_jsonl(&read(path)?)?;
    check_unique(&preds)?;
    Ok(preds)
}

pub fn load_verdicts(path: &Path) -> Result<Vec<VerdictRecord>, EvalError> {
    let v: Vec<VerdictRecord> = parse_jsonl(&read(path)?)?;
    for r in &v {
        r.check()?;
    }
    Ok(v)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for i in items {
        out.push_str(&serde_json::to_string(i).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(to_jsonl(items).as_bytes()).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn table2() -> Vec<Prediction> {
        let row = |id: &str, q: &str, gt: &str, gen: &str| Prediction {
            id: id.into(),
            question: q.into(),
            ground_truth: gt.into(),
            generated: gen.into(),
            answer_type: AnswerType::Open,
        };
        vec![
            row("t2-1", "What kind of image is this?", "x-ray", "chest x-ray"),
            row("t2-2", "The mass is found in which part of the pancreas?", "pancreatic head", "head"),
            row("t2-3", "Is the spleen present?", "on patient's left", "yes"),
            row(
                "t2-4",
                "Are pleural opacities located on the left, right, or both sides of the lung?",
                "both",
                "bilateral",
            ),
        ]
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("Chest X-ray."), "chest x-ray");
        assert_eq!(normalize("  the head "), "head");
        assert_eq!(normalize("The  left   lung!?"), "left lung");
        assert_eq!(normalize("the"), "the");
    }

    #[test]
    fn normalize_idempotent_on_table2() {
        for p in table2() {
            for s in [&p.question, &p.ground_truth, &p.generated] {
                let once = normalize(s);
                assert_eq!(normalize(&once), once);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn normalize_idempotent(s in "\\PC{0,40}") {
            let once = normalize(&s);
            proptest::prop_assert_eq!(normalize(&once), once);
        }
    }

    #[test]
    fn exact_match_examples() {
        assert!(!exact_match("chest x-ray", "x-ray"));
        assert!(!exact_match("bilateral", "both"));
        assert!(exact_match("Yes", "yes"));
    }

    #[test]
    fn table2_rules() {
        let t = SynonymTable::default();
        let got: Vec<_> = table2().iter().map(|p| rule_classify(p, &t)).collect();
        assert_eq!(got[0].auto, AutoVerdict::RuleCorrect);
        assert_eq!(got[0].reason, Some(RuleReason::Containment));
        assert_eq!(got[1].auto, AutoVerdict::RuleCorrect);
        assert_eq!(got[2].auto, AutoVerdict::Unresolved);
        assert_eq!(got[3].auto, AutoVerdict::RuleCorrect);
        assert_eq!(got[3].reason, Some(RuleReason::Synonym));
    }

    #[test]
    fn session_holds_non_exact_only() {
        let mut preds = table2();
        for i in 0..6 {
            preds.push(Prediction {
                id: format!("e{i}"),
                question: "Is it normal?".into(),
                ground_truth: "yes".into(),
                generated: "Yes.".into(),
                answer_type: AnswerType::Closed,
            });
        }
        let s = build_human_session(&preds, &SynonymTable::default()).unwrap();
        assert_eq!((s.items.len(), s.exact.len()), (4, 6));
        let json = serde_json::to_string(&s).unwrap();
        let back: HumanSessionSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
        assert!(matches!(build_human_session(&[], &SynonymTable::default()), Err(EvalError::Empty)));
    }

    #[test]
    fn jsonl_round_trip_and_duplicates() {
        let preds = table2();
        let parsed: Vec<Prediction> = parse_jsonl(&to_jsonl(&preds)).unwrap();
        assert_eq!(parsed, preds);
        let mut dup = preds.clone();
        dup.push(preds[0].clone());
        assert!(matches!(
            build_human_session(&dup, &SynonymTable::default()),
            Err(EvalError::DuplicateId(_))
        ));
        let err = parse_jsonl::<Prediction>("{\"id\":1}\n").unwrap_err();
        assert!(err.to_string().starts_with("line 1"));
    }
}
