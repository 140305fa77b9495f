use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{normalize, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AutoVerdict {
    Exact,
    RuleCorrect,
    Unresolved,
}

/// Which rule turned a non-exact pair into a suggestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleReason {
    Containment,
    Synonym,
    ContextCompletion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub auto: AutoVerdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<RuleReason>,
}

/// Groups of interchangeable answers. Matching is on normalized text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymTable {
    pub groups: Vec<Vec<String>>,
}

const YES: &[&str] = &["yes", "y", "yeah", "yep", "true"];
const NO: &[&str] = &["no", "n", "nope", "false"];

impl Default for SynonymTable {
    fn default() -> Self {
        let g = |words: &[&str]| words.iter().map(|w| w.to_string()).collect();
        Self {
            groups: vec![g(&["both", "bilateral"]), g(YES), g(NO)],
        }
    }
}

impl SynonymTable {
    /// TOML with a single key: `groups = [["both", "bilateral"], ...]`.
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Default groups followed by `extra`.
    pub fn extended(extra: SynonymTable) -> Self {
        let mut t = Self::default();
        t.groups.extend(extra.groups);
        t
    }

    fn index(&self) -> HashMap<String, usize> {
        let mut m = HashMap::new();
        for (i, g) in self.groups.iter().enumerate() {
            for w in g {
                m.entry(normalize(w)).or_insert(i);
            }
        }
        m
    }

    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        let idx = self.index();
        let (a, b) = (normalize(a), normalize(b));
        matches!((idx.get(&a), idx.get(&b)), (Some(x), Some(y)) if x == y)
    }
}

/// Word tokens of a normalized string. Hyphens and apostrophes stay inside
/// words, so "x-ray" and "patient's" are single tokens.
pub fn tokens(s: &str) -> Vec<String> {
    normalize(s)
        .split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// True when one token sequence occurs contiguously inside the other.
pub fn token_containment(a: &str, b: &str) -> bool {
    let (ta, tb) = (tokens(a), tokens(b));
    let (short, long) = if ta.len() <= tb.len() { (ta, tb) } else { (tb, ta) };
    !short.is_empty() && long.windows(short.len()).any(|w| w == short.as_slice())
}

/// (has a yes-word, has a no-word)
fn polarity(toks: &[String]) -> (bool, bool) {
    (
        toks.iter().any(|t| YES.contains(&t.as_str())),
        toks.iter().any(|t| NO.contains(&t.as_str())),
    )
}

fn polarity_conflict(a: &[String], b: &[String]) -> bool {
    let ((ay, an), (by, bn)) = (polarity(a), polarity(b));
    (ay && bn) || (an && by)
}

/// Context completion: every token of the shorter answer appears in the
/// longer answer or the question. Guards: the answers share at least one
/// token, and they do not differ by picking different options that the
/// question itself lists (as in "left or right").
fn context_completion(question: &str, a: &str, b: &str) -> bool {
    let (ta, tb) = (tokens(a), tokens(b));
    let q: BTreeSet<String> = tokens(question).into_iter().collect();
    match ta.len().cmp(&tb.len()) {
        std::cmp::Ordering::Less => completes(&q, &ta, &tb),
        std::cmp::Ordering::Greater => completes(&q, &tb, &ta),
        std::cmp::Ordering::Equal => completes(&q, &ta, &tb) || completes(&q, &tb, &ta),
    }
}

fn completes(q: &BTreeSet<String>, short: &[String], long: &[String]) -> bool {
    let long_set: BTreeSet<&String> = long.iter().collect();
    let short_set: BTreeSet<&String> = short.iter().collect();
    if !short.iter().any(|t| long_set.contains(t)) {
        return false;
    }
    if !short.iter().all(|t| long_set.contains(t) || q.contains(t)) {
        return false;
    }
    let short_only = short.iter().any(|t| !long_set.contains(t));
    let long_only_in_q = long.iter().any(|t| !short_set.contains(t) && q.contains(t));
    !(short_only && long_only_in_q)
}

/// Pre-classification ahead of human review: EXACT on normalized equality,
/// RULE_CORRECT when containment, a synonym pair or context completion holds,
/// and UNRESOLVED otherwise. A pair where one side says yes and the other
/// says no never gets a rule suggestion.
pub fn rule_classify(p: &Prediction, synonyms: &SynonymTable) -> Classification {
    let (g, s) = (normalize(&p.ground_truth), normalize(&p.generated));
    let unresolved = Classification {
        auto: AutoVerdict::Unresolved,
        reason: None,
    };
    if g == s {
        return Classification {
            auto: AutoVerdict::Exact,
            reason: None,
        };
    }
    if g.is_empty() || s.is_empty() {
        return unresolved;
    }
    if polarity_conflict(&tokens(&g), &tokens(&s)) {
        return unresolved;
    }
    let reason = if token_containment(&g, &s) {
        Some(RuleReason::Containment)
    } else if synonyms.are_synonyms(&g, &s) {
        Some(RuleReason::Synonym)
    } else if context_completion(&p.question, &g, &s) {
        Some(RuleReason::ContextCompletion)
    } else {
        None
    };
    match reason {
        Some(r) => Classification {
            auto: AutoVerdict::RuleCorrect,
            reason: Some(r),
        },
        None => unresolved,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AnswerType;

    fn pred(q: &str, gt: &str, gen: &str) -> Prediction {
        Prediction {
            id: "x".into(),
            question: q.into(),
            ground_truth: gt.into(),
            generated: gen.into(),
            answer_type: AnswerType::Open,
        }
    }

    fn classify(q: &str, gt: &str, gen: &str) -> Classification {
        rule_classify(&pred(q, gt, gen), &SynonymTable::default())
    }

    #[test]
    fn containment_is_token_bounded() {
        assert!(token_containment("chest x-ray", "x-ray"));
        assert!(!token_containment("x-rays", "x-ray"));
        assert!(!token_containment("no", "none"));
    }

    #[test]
    fn synonyms() {
        let t = SynonymTable::default();
        assert!(t.are_synonyms("Both", "bilateral."));
        assert!(t.are_synonyms("yes", "Yeah"));
        assert!(!t.are_synonyms("yes", "no"));
        let extra = SynonymTable::from_toml(r#"groups = [["ct", "computed tomography"]]"#).unwrap();
        assert!(SynonymTable::extended(extra).are_synonyms("CT", "computed tomography"));
    }

    #[test]
    fn yes_no_variants() {
        assert_eq!(classify("Is it normal?", "yes", "yep").auto, AutoVerdict::RuleCorrect);
        assert_eq!(classify("Is it normal?", "yes", "no").auto, AutoVerdict::Unresolved);
        assert_eq!(classify("Is it normal?", "no", "yes, no doubt").auto, AutoVerdict::Unresolved);
    }

    #[test]
    fn option_conflict_not_completed() {
        let c = classify("Is the left or right lung affected?", "left lung", "right lung");
        assert_eq!(c.auto, AutoVerdict::Unresolved);
    }

    #[test]
    fn context_completion_from_question() {
        let c = classify("Which part of the pancreas holds the mass?", "head of pancreas", "pancreas head");
        assert_eq!(c.reason, Some(RuleReason::ContextCompletion));
        // no shared token: nothing to anchor the completion
        let c = classify("Which organ?", "liver", "organ");
        assert_eq!(c.auto, AutoVerdict::Unresolved);
    }

    proptest::proptest! {
        #[test]
        fn containment_symmetric(a in "[a-z]{1,4}( [a-z]{1,4}){0,3}", b in "[a-z]{1,4}( [a-z]{1,4}){0,3}") {
            proptest::prop_assert_eq!(token_containment(&a, &b), token_containment(&b, &a));
            let q = "what is seen?";
            proptest::prop_assert_eq!(classify(q, &a, &b), classify(q, &b, &a));
        }
    }
}
