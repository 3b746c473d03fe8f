//! Scoring: entity tuple precision/recall/F1, word error
//! rate on tag-stripped text, and intent accuracy.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde_json::{json, Map, Number, Value};

use crate::error::{Error, Result};
use crate::tag_parser::StructuredTranscript;

/// Multiset of `(entity type, phrase)` pairs for one utterance.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityTupleSet {
    counts: BTreeMap<(String, String), usize>,
}

impl EntityTupleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, entity_type: &str, phrase: &str) {
        *self
            .counts
            .entry((entity_type.to_string(), phrase.to_string()))
            .or_insert(0) += 1;
    }

    pub fn count(&self, entity_type: &str, phrase: &str) -> usize {
        self.counts
            .get(&(entity_type.to_string(), phrase.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, usize)> {
        self.counts.iter().map(|((t, p), &n)| (t.as_str(), p.as_str(), n))
    }
}

impl<S: AsRef<str>> FromIterator<(S, S)> for EntityTupleSet {
    fn from_iter<I: IntoIterator<Item = (S, S)>>(iter: I) -> Self {
        let mut set = EntityTupleSet::new();
        for (t, p) in iter {
            set.add(t.as_ref(), p.as_ref());
        }
        set
    }
}

pub fn to_tuples(t: &StructuredTranscript) -> EntityTupleSet {
    t.entities.iter().map(|e| (&e.entity_type, &e.phrase)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Totals {
    pub total_reference: usize,
    pub total_system: usize,
    pub total_correct: usize,
}

impl Totals {
    fn add(&mut self, other: Totals) {
        self.total_reference += other.total_reference;
        self.total_system += other.total_system;
        self.total_correct += other.total_correct;
    }

    /// Precision, recall and F1. An empty side scores 0 unless both sides
    /// are empty, which scores 1.
    pub fn prf(&self) -> Prf {
        let ratio = |num: usize, den: usize, other: usize| match (den, other) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => num as f64 / den as f64,
        };
        let precision = ratio(self.total_correct, self.total_system, self.total_reference);
        let recall = ratio(self.total_correct, self.total_reference, self.total_system);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            totals: *self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub totals: Totals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NerScores {
    pub overall: Prf,
    pub per_type: BTreeMap<String, Prf>,
}

fn utterance_totals<'a>(reference: &'a EntityTupleSet, hypothesis: &'a EntityTupleSet) -> BTreeMap<&'a str, Totals> {
    let mut by_type: BTreeMap<&str, Totals> = BTreeMap::new();
    for (t, p, n) in reference.iter() {
        let entry = by_type.entry(t).or_default();
        entry.total_reference += n;
        entry.total_correct += n.min(hypothesis.count(t, p));
    }
    for (t, _, n) in hypothesis.iter() {
        by_type.entry(t).or_default().total_system += n;
    }
    by_type
}

/// Micro-averaged tuple scores over utterance-aligned sets.
pub fn ner_prf(reference: &[EntityTupleSet], hypothesis: &[EntityTupleSet]) -> Result<NerScores> {
    if reference.len() != hypothesis.len() {
        return Err(Error::Alignment {
            reference: reference.len(),
            hypothesis: hypothesis.len(),
        });
    }
    let mut overall = Totals::default();
    let mut per_type: BTreeMap<String, Totals> = BTreeMap::new();
    for (r, h) in reference.iter().zip(hypothesis) {
        for (t, totals) in utterance_totals(r, h) {
            overall.add(totals);
            per_type.entry(t.to_string()).or_default().add(totals);
        }
    }
    Ok(NerScores {
        overall: overall.prf(),
        per_type: per_type.into_iter().map(|(t, tot)| (t, tot.prf())).collect(),
    })
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn wer<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Total edits over total reference words.
pub fn corpus_wer<S: PartialEq>(pairs: &[(Vec<S>, Vec<S>)]) -> Result<f64> {
    let words: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    if words == 0 {
        return Err(Error::EmptyReference);
    }
    let edits: usize = pairs.iter().map(|(r, h)| edit_distance(r, h)).sum();
    Ok(edits as f64 / words as f64)
}

/// Fraction of exact matches; a missing hypothesis intent is wrong.
pub fn intent_accuracy<S: AsRef<str>>(reference: &[S], hypothesis: &[Option<S>]) -> Result<f64> {
    if reference.len() != hypothesis.len() {
        return Err(Error::Alignment {
            reference: reference.len(),
            hypothesis: hypothesis.len(),
        });
    }
    if reference.is_empty() {
        return Ok(1.0);
    }
    let hits = reference
        .iter()
        .zip(hypothesis)
        .filter(|(r, h)| h.as_ref().is_some_and(|h| h.as_ref() == r.as_ref()))
        .count();
    Ok(hits as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub wer: f64,
    pub intent_accuracy: f64,
    pub per_type: BTreeMap<String, Prf>,
    pub totals: Totals,
    pub utterances: usize,
}

/// Scores aligned transcripts. WER uses the tag-free words; intent accuracy
/// covers utterances whose reference carries an intent.
pub fn evaluate(reference: &[StructuredTranscript], hypothesis: &[StructuredTranscript]) -> Result<EvalReport> {
    if reference.len() != hypothesis.len() {
        return Err(Error::Alignment {
            reference: reference.len(),
            hypothesis: hypothesis.len(),
        });
    }
    let ref_tuples: Vec<_> = reference.iter().map(to_tuples).collect();
    let hyp_tuples: Vec<_> = hypothesis.iter().map(to_tuples).collect();
    let ner = ner_prf(&ref_tuples, &hyp_tuples)?;
    let pairs: Vec<(Vec<&str>, Vec<&str>)> = reference
        .iter()
        .zip(hypothesis)
        .map(|(r, h)| {
            (
                r.words.iter().map(String::as_str).collect(),
                h.words.iter().map(String::as_str).collect(),
            )
        })
        .collect();
    let wer = corpus_wer(&pairs)?;
    let (ref_intents, hyp_intents): (Vec<&str>, Vec<Option<&str>>) = reference
        .iter()
        .zip(hypothesis)
        .filter_map(|(r, h)| r.intent.as_deref().map(|ri| (ri, h.intent.as_deref())))
        .unzip();
    Ok(EvalReport {
        precision: ner.overall.precision,
        recall: ner.overall.recall,
        f1: ner.overall.f1,
        wer,
        intent_accuracy: intent_accuracy(&ref_intents, &hyp_intents)?,
        per_type: ner.per_type,
        totals: ner.overall.totals,
        utterances: reference.len(),
    })
}

fn fixed4(x: f64) -> Value {
    Value::Number(Number::from_str(&format!("{x:.4}")).expect("formatted float parses"))
}

impl EvalReport {
    /// JSON object with every metric printed to four decimal places.
    pub fn to_value(&self) -> Value {
        let totals = |t: &Totals| {
            json!({
                "total_correct": t.total_correct,
                "total_reference": t.total_reference,
                "total_system": t.total_system,
            })
        };
        let per_type: Map<String, Value> = self
            .per_type
            .iter()
            .map(|(t, prf)| {
                let mut obj = Map::new();
                obj.insert("f1".into(), fixed4(prf.f1));
                obj.insert("precision".into(), fixed4(prf.precision));
                obj.insert("recall".into(), fixed4(prf.recall));
                obj.insert("totals".into(), totals(&prf.totals));
                (t.clone(), Value::Object(obj))
            })
            .collect();
        let mut obj = Map::new();
        obj.insert("f1".into(), fixed4(self.f1));
        obj.insert("intent_accuracy".into(), fixed4(self.intent_accuracy));
        obj.insert("per_type".into(), Value::Object(per_type));
        obj.insert("precision".into(), fixed4(self.precision));
        obj.insert("recall".into(), fixed4(self.recall));
        obj.insert("totals".into(), totals(&self.totals));
        obj.insert("utterances".into(), json!(self.utterances));
        obj.insert("wer".into(), fixed4(self.wer));
        Value::Object(obj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag_parser::Entity;

    fn set(items: &[(&str, &str)]) -> EntityTupleSet {
        items.iter().copied().collect()
    }

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn tuples_accumulate() {
        let entity = |t: &str, p: &str, s| Entity {
            entity_type: t.into(),
            phrase: p.into(),
            word_span: s,
            frame_span: None,
        };
        let t = StructuredTranscript {
            words: words("paul and paul").iter().map(|w| w.to_string()).collect(),
            entities: vec![entity("PERSON", "paul", (0, 1)), entity("PERSON", "paul", (2, 3))],
            ..Default::default()
        };
        assert_eq!(to_tuples(&t).count("PERSON", "paul"), 2);
        assert!(to_tuples(&StructuredTranscript::default()).is_empty());
    }

    #[test]
    fn identical_sets_score_one() {
        let r = vec![set(&[("PERSON", "paul")]), set(&[]), set(&[("DATE", "today"), ("DATE", "today")])];
        let s = ner_prf(&r, &r).unwrap();
        assert_eq!((s.overall.precision, s.overall.recall, s.overall.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn half_right() {
        let r = vec![set(&[("PERSON", "paul"), ("DATE", "tomorrow")])];
        let h = vec![set(&[("PERSON", "paul"), ("DATE", "monday")])];
        let s = ner_prf(&r, &h).unwrap().overall;
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert_eq!(s.totals, Totals { total_reference: 2, total_system: 2, total_correct: 1 });
    }

    #[test]
    fn empty_hypothesis() {
        let r = vec![set(&[("PERSON", "paul")])];
        let s = ner_prf(&r, &[set(&[])]).unwrap().overall;
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let s = ner_prf(&[set(&[])], &[set(&[])]).unwrap().overall;
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert!(matches!(ner_prf(&r, &[]), Err(Error::Alignment { .. })));
    }

    #[test]
    fn per_type_breakdown() {
        let r = vec![set(&[("PERSON", "paul"), ("DATE", "tomorrow")])];
        let h = vec![set(&[("PERSON", "paul"), ("DATE", "monday")])];
        let s = ner_prf(&r, &h).unwrap();
        assert_eq!(s.per_type["PERSON"].f1, 1.0);
        assert_eq!(s.per_type["DATE"].f1, 0.0);
    }

    #[test]
    fn wer_hand_cases() {
        assert_eq!(wer(&words("a b c"), &words("a b c")).unwrap(), 0.0);
        assert_eq!(wer(&words("put meeting with paul"), &words("put meeting paul")).unwrap(), 0.25);
        assert_eq!(wer(&words("a"), &words("b c")).unwrap(), 2.0);
        assert!(matches!(wer::<&str>(&[], &words("a")), Err(Error::EmptyReference)));
    }

    #[test]
    fn intent_cases() {
        let r = ["A", "B"];
        assert_eq!(intent_accuracy(&r, &[Some("A"), Some("B")]).unwrap(), 1.0);
        assert_eq!(intent_accuracy(&r, &[Some("A"), Some("A")]).unwrap(), 0.5);
        assert_eq!(intent_accuracy(&r, &[None, None]).unwrap(), 0.0);
        assert!(intent_accuracy(&r, &[None]).is_err());
    }

    #[test]
    fn report_prints_four_decimals() {
        let t = StructuredTranscript {
            intent: Some("X".into()),
            words: vec!["a".into(), "b".into(), "c".into()],
            ..Default::default()
        };
        let mut h = t.clone();
        h.words.pop();
        let report = evaluate(std::slice::from_ref(&t), &[h]).unwrap();
        let text = serde_json::to_string(&report.to_value()).unwrap();
        assert!(text.contains("\"wer\":0.3333"), "{text}");
        assert!(text.contains("\"f1\":1.0000"), "{text}");
    }
}
