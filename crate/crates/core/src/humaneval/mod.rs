//! Two-annotator review of non-exact predictions.
//!
//! A session moves `open → reconciling → finalized`. Annotators judge every
//! item independently and each judgement is write-once. Once both have judged
//! everything, agreeing items take the agreed value and disagreements wait for
//! an adjudicator. Every state change is an [`Event`]; replaying the events of
//! a session rebuilds it exactly.

mod agreement;
mod log;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{
    aggregate, AutoVerdict, EvalError, HumanSessionSpec, Judgement, MetricsReport, Prediction, Regime, RuleReason,
    ScoredPrediction, VerdictRecord,
};

pub use agreement::{agreement, AgreementStats};
pub use log::{replay, EventLog, LogError};

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("session is {0:?}")]
    WrongState(SessionStatus),
    #[error("unknown item `{0}`")]
    UnknownItem(String),
    #[error("`{0}` is not an annotator of this session")]
    UnknownAnnotator(String),
    #[error("sessions need exactly 2 distinct annotators, got {0:?}")]
    Annotators(Vec<String>),
    #[error("annotator `{annotator}` already judged item `{item}`")]
    AlreadyJudged { item: String, annotator: String },
    #[error("item `{0}` has no disagreement to reconcile")]
    NotDisputed(String),
    #[error("item `{0}` is already reconciled")]
    AlreadyReconciled(String),
    #[error("items without a final verdict: {}", .0.join(", "))]
    Unfinalized(Vec<String>),
    #[error("event {seq} out of order (expected {expected})")]
    Sequence { seq: u64, expected: u64 },
    #[error("first event must create the session")]
    NotCreated,
    #[error("session already created")]
    AlreadyCreated,
    #[error("{0}")]
    Eval(String),
}

impl From<EvalError> for SessionError {
    fn from(e: EvalError) -> Self {
        SessionError::Eval(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Open,
    Reconciling,
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionItem {
    pub item_id: String,
    pub prediction: Prediction,
    pub auto: AutoVerdict,
    pub reason: Option<RuleReason>,
    pub verdicts: BTreeMap<String, Judgement>,
    #[serde(rename = "final")]
    pub final_verdict: Option<Judgement>,
    pub adjudicator: Option<String>,
}

impl SessionItem {
    fn disputed(&self) -> bool {
        let mut v = self.verdicts.values();
        matches!((v.next(), v.next()), (Some(a), Some(b)) if a != b)
    }
}

/// SHA-256 of a predictions file, used to refuse duplicate sessions.
pub fn source_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Session ids are the first 16 hex digits of the source hash.
pub fn session_id_for(hash: &str) -> String {
    hash.chars().take(16).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventKind {
    Created {
        session_id: String,
        source_hash: String,
        annotators: [String; 2],
        spec: HumanSessionSpec,
    },
    Verdict {
        item_id: String,
        verdict: Judgement,
    },
    Reconciled {
        item_id: String,
        verdict: Judgement,
    },
    Finalized,
}

/// One audit-log entry. `actor` is the annotator or adjudicator id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub timestamp: String,
    pub actor: String,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSession {
    pub session_id: String,
    pub source_hash: String,
    pub annotators: [String; 2],
    pub status: SessionStatus,
    pub items: Vec<SessionItem>,
    /// EXACT predictions; not reviewed, but counted in the final metrics.
    pub exact: Vec<ScoredPrediction>,
    pub created_at: String,
    /// Sequence number of the last applied event.
    pub last_seq: u64,
}

/// What an annotator sees of one item: never the other annotator's verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    pub question: String,
    pub ground_truth: String,
    pub generated: String,
    pub answer_type: crate::data::AnswerType,
    pub my_verdict: Option<Judgement>,
    /// Machine suggestion, present only when hints are enabled.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hint: Option<RuleReason>,
}

/// Both scoring regimes plus annotator agreement for a finalized session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub exact: MetricsReport,
    pub assisted: MetricsReport,
    pub agreement: AgreementStats,
}

impl EvalSession {
    /// The creation event for a new session, validated.
    pub fn create_event(
        source_hash: &str,
        annotators: [String; 2],
        spec: HumanSessionSpec,
        timestamp: String,
    ) -> Result<Event, SessionError> {
        if annotators[0] == annotators[1] || annotators.iter().any(|a| a.trim().is_empty()) {
            return Err(SessionError::Annotators(annotators.to_vec()));
        }
        Ok(Event {
            seq: 0,
            timestamp,
            actor: "system".into(),
            kind: EventKind::Created {
                session_id: session_id_for(source_hash),
                source_hash: source_hash.to_string(),
                annotators,
                spec,
            },
        })
    }

    pub fn from_created(event: &Event) -> Result<Self, SessionError> {
        let EventKind::Created {
            session_id,
            source_hash,
            annotators,
            spec,
        } = &event.kind
        else {
            return Err(SessionError::NotCreated);
        };
        if event.seq != 0 {
            return Err(SessionError::Sequence {
                seq: event.seq,
                expected: 0,
            });
        }
        let items: Vec<SessionItem> = spec
            .items
            .iter()
            .map(|s| SessionItem {
                item_id: s.prediction.id.clone(),
                prediction: s.prediction.clone(),
                auto: s.classification.auto,
                reason: s.classification.reason,
                verdicts: BTreeMap::new(),
                final_verdict: None,
                adjudicator: None,
            })
            .collect();
        let status = if items.is_empty() {
            SessionStatus::Finalized
        } else {
            SessionStatus::Open
        };
        Ok(Self {
            session_id: session_id.clone(),
            source_hash: source_hash.clone(),
            annotators: annotators.clone(),
            status,
            items,
            exact: spec.exact.clone(),
            created_at: event.timestamp.clone(),
            last_seq: 0,
        })
    }

    fn item(&self, id: &str) -> Result<&SessionItem, SessionError> {
        self.items
            .iter()
            .find(|i| i.item_id == id)
            .ok_or_else(|| SessionError::UnknownItem(id.to_string()))
    }

    fn item_mut(&mut self, id: &str) -> Result<&mut SessionItem, SessionError> {
        self.items
            .iter_mut()
            .find(|i| i.item_id == id)
            .ok_or_else(|| SessionError::UnknownItem(id.to_string()))
    }

    fn next_event(&self, actor: &str, timestamp: String, kind: EventKind) -> Event {
        Event {
            seq: self.last_seq + 1,
            timestamp,
            actor: actor.to_string(),
            kind,
        }
    }

    /// Validates a verdict and returns the event to persist and apply.
    pub fn verdict_event(
        &self,
        item_id: &str,
        annotator: &str,
        verdict: Judgement,
        timestamp: String,
    ) -> Result<Event, SessionError> {
        let e = self.next_event(
            annotator,
            timestamp,
            EventKind::Verdict {
                item_id: item_id.to_string(),
                verdict,
            },
        );
        self.check(&e)?;
        Ok(e)
    }

    pub fn reconcile_event(
        &self,
        item_id: &str,
        adjudicator: &str,
        verdict: Judgement,
        timestamp: String,
    ) -> Result<Event, SessionError> {
        let e = self.next_event(
            adjudicator,
            timestamp,
            EventKind::Reconciled {
                item_id: item_id.to_string(),
                verdict,
            },
        );
        self.check(&e)?;
        Ok(e)
    }

    pub fn finalize_event(&self, actor: &str, timestamp: String) -> Result<Event, SessionError> {
        let e = self.next_event(actor, timestamp, EventKind::Finalized);
        self.check(&e)?;
        Ok(e)
    }

    /// Whether `event` may be applied to the current state.
    pub fn check(&self, event: &Event) -> Result<(), SessionError> {
        if event.seq != self.last_seq + 1 {
            return Err(SessionError::Sequence {
                seq: event.seq,
                expected: self.last_seq + 1,
            });
        }
        match &event.kind {
            EventKind::Created { .. } => Err(SessionError::AlreadyCreated),
            EventKind::Verdict { item_id, .. } => {
                if self.status != SessionStatus::Open {
                    return Err(SessionError::WrongState(self.status));
                }
                if !self.annotators.contains(&event.actor) {
                    return Err(SessionError::UnknownAnnotator(event.actor.clone()));
                }
                if self.item(item_id)?.verdicts.contains_key(&event.actor) {
                    return Err(SessionError::AlreadyJudged {
                        item: item_id.clone(),
                        annotator: event.actor.clone(),
                    });
                }
                Ok(())
            }
            EventKind::Reconciled { item_id, .. } => {
                if self.status != SessionStatus::Reconciling {
                    return Err(SessionError::WrongState(self.status));
                }
                let item = self.item(item_id)?;
                if !item.disputed() {
                    return Err(SessionError::NotDisputed(item_id.clone()));
                }
                if item.final_verdict.is_some() {
                    return Err(SessionError::AlreadyReconciled(item_id.clone()));
                }
                Ok(())
            }
            EventKind::Finalized => {
                if self.status != SessionStatus::Reconciling {
                    return Err(SessionError::WrongState(self.status));
                }
                let missing = self.unfinalized();
                if !missing.is_empty() {
                    return Err(SessionError::Unfinalized(missing));
                }
                Ok(())
            }
        }
    }

    /// Checks and applies one event.
    pub fn apply(&mut self, event: &Event) -> Result<(), SessionError> {
        self.check(event)?;
        match &event.kind {
            EventKind::Created { .. } => unreachable!("rejected by check"),
            EventKind::Verdict { item_id, verdict } => {
                self.item_mut(item_id)?.verdicts.insert(event.actor.clone(), *verdict);
                if self.items.iter().all(|i| i.verdicts.len() == 2) {
                    for item in &mut self.items {
                        if !item.disputed() {
                            item.final_verdict = item.verdicts.values().next().copied();
                        }
                    }
                    self.status = SessionStatus::Reconciling;
                }
            }
            EventKind::Reconciled { item_id, verdict } => {
                let item = self.item_mut(item_id)?;
                item.final_verdict = Some(*verdict);
                item.adjudicator = Some(event.actor.clone());
            }
            EventKind::Finalized => self.status = SessionStatus::Finalized,
        }
        self.last_seq = event.seq;
        Ok(())
    }

    pub fn unfinalized(&self) -> Vec<String> {
        self.items
            .iter()
            .filter(|i| i.final_verdict.is_none())
            .map(|i| i.item_id.clone())
            .collect()
    }

    /// Items both annotators judged differently, awaiting adjudication.
    pub fn disputes(&self) -> Vec<&SessionItem> {
        self.items
            .iter()
            .filter(|i| i.disputed() && i.final_verdict.is_none())
            .collect()
    }

    fn view(&self, item: &SessionItem, annotator: &str, hints: bool) -> ItemView {
        let p = &item.prediction;
        ItemView {
            item_id: item.item_id.clone(),
            question: p.question.clone(),
            ground_truth: p.ground_truth.clone(),
            generated: p.generated.clone(),
            answer_type: p.answer_type,
            my_verdict: item.verdicts.get(annotator).copied(),
            hint: if hints { item.reason } else { None },
        }
    }

    /// First item `annotator` has not judged yet.
    pub fn next_for(&self, annotator: &str, hints: bool) -> Result<Option<ItemView>, SessionError> {
        if !self.annotators.iter().any(|a| a == annotator) {
            return Err(SessionError::UnknownAnnotator(annotator.to_string()));
        }
        Ok(self
            .items
            .iter()
            .find(|i| !i.verdicts.contains_key(annotator))
            .map(|i| self.view(i, annotator, hints)))
    }

    /// All items as `annotator` may see them.
    pub fn views_for(&self, annotator: &str, hints: bool) -> Result<Vec<ItemView>, SessionError> {
        if !self.annotators.iter().any(|a| a == annotator) {
            return Err(SessionError::UnknownAnnotator(annotator.to_string()));
        }
        Ok(self.items.iter().map(|i| self.view(i, annotator, hints)).collect())
    }

    /// The raw verdict file: EXACT items first, then reviewed items.
    pub fn verdict_records(&self) -> Vec<VerdictRecord> {
        let mut out: Vec<VerdictRecord> = self
            .exact
            .iter()
            .map(|s| VerdictRecord::from_auto(&s.prediction, s.classification))
            .collect();
        out.extend(self.items.iter().map(|i| VerdictRecord {
            id: i.item_id.clone(),
            answer_type: i.prediction.answer_type,
            auto: i.auto,
            reason: i.reason,
            human: i.verdicts.clone(),
            final_verdict: i.final_verdict,
            adjudicator: i.adjudicator.clone(),
        }));
        out
    }

    pub fn agreement(&self) -> AgreementStats {
        let [a, b] = &self.annotators;
        let pairs: Vec<_> = self
            .items
            .iter()
            .filter_map(|i| Some((*i.verdicts.get(a)?, *i.verdicts.get(b)?)))
            .collect();
        agreement(&pairs)
    }

    /// Both regimes from the session's verdict records. Only available once finalized.
    pub fn report(&self) -> Result<SessionReport, SessionError> {
        if self.status != SessionStatus::Finalized {
            return Err(SessionError::WrongState(self.status));
        }
        let records = self.verdict_records();
        Ok(SessionReport {
            session_id: self.session_id.clone(),
            exact: aggregate(&records, Regime::Exact)?,
            assisted: aggregate(&records, Regime::Assisted)?,
            agreement: self.agreement(),
        })
    }
}
