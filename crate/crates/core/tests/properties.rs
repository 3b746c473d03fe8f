use ndarray::Array2;
use proptest::prelude::*;

use tagctc::ctc::{collapse, EmissionMatrix};
use tagctc::decoder::{greedy_decode, streaming_decode};
use tagctc::eval::{edit_distance, ner_prf, EntityTupleSet};
use tagctc::formats::{decode_emissions, decode_features, encode_emissions, encode_features, EmissionKind};
use tagctc::tag_parser::{parse, render, AnomalyKind};
use tagctc::vocab::{
    build_vocab, decode_tokens, encode_tagged_text, vocab_from_json_str, vocab_to_json_string, Role, TagKind,
    TagRegistry, TokenId, Vocabulary,
};

const WORDS: [&str; 6] = ["put", "meeting", "with", "paul", "ten", "am"];

fn fixture() -> (Vocabulary, TagRegistry) {
    let vocab = build_vocab(&WORDS, 8).unwrap();
    let mut reg = TagRegistry::new();
    for (s, k) in [
        ("@CALENDER_SET@", TagKind::Intent),
        ("@PLAY_MUSIC@", TagKind::Intent),
        ("!PERSON!", TagKind::EntityBegin("PERSON".into())),
        ("!TIME!", TagKind::EntityBegin("TIME".into())),
        ("!END!", TagKind::EntityEnd),
        ("<SPK>", TagKind::SpeakerChange),
    ] {
        reg = reg.assign(&vocab, s, k).unwrap();
    }
    (vocab, reg)
}

fn emissions(frames: usize, width: usize) -> impl Strategy<Value = EmissionMatrix> {
    // small integer weights make exact ties common
    prop::collection::vec(1u8..4, frames * width).prop_map(move |w| {
        let raw = Array2::from_shape_vec((frames, width), w.into_iter().map(f64::from).collect()).unwrap();
        let sums = raw.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
        EmissionMatrix::new(&raw / &sums).unwrap()
    })
}

fn any_emissions() -> impl Strategy<Value = EmissionMatrix> {
    (1usize..30, 2usize..6).prop_flat_map(|(t, v)| emissions(t, v))
}

fn tuple_set() -> impl Strategy<Value = EntityTupleSet> {
    prop::collection::vec((0usize..3, 0usize..3), 0..5).prop_map(|v| {
        v.into_iter()
            .map(|(t, p)| (["PERSON", "DATE", "TIME"][t], ["paul", "monday", "ten am"][p]))
            .collect()
    })
}

fn sentence() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..4, 0..8)
}

proptest! {
    #[test]
    fn collapse_is_stable_under_blank_padding(path in prop::collection::vec(0usize..4, 0..20)) {
        let once = collapse(&path, 3);
        prop_assert!(!once.as_slice().contains(&3));
        prop_assert!(once.len() <= path.len());
        // re-interleaving blanks gives a path that collapses to the same labels
        let spaced: Vec<usize> = once.as_slice().iter().flat_map(|&k| [3, k, k]).collect();
        prop_assert_eq!(collapse(&spaced, 3), once);
    }

    #[test]
    fn streaming_matches_batch(e in any_emissions()) {
        prop_assert_eq!(streaming_decode(&e).unwrap(), greedy_decode(&e));
    }

    #[test]
    fn decode_is_deterministic_and_picks_lowest_tie(e in any_emissions()) {
        let d = greedy_decode(&e);
        prop_assert_eq!(&d, &greedy_decode(&e));
        for (t, &k) in d.path.0.iter().enumerate() {
            let row = e.row(t);
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(row.iter().position(|&p| p == max), Some(k));
        }
    }

    #[test]
    fn frame_spans_are_sound(e in any_emissions()) {
        let d = greedy_decode(&e);
        prop_assert_eq!(d.frame_spans.len(), d.labels.len());
        let mut prev_end = 0;
        for (&(s, end), &k) in d.frame_spans.iter().zip(d.labels.as_slice()) {
            prop_assert!(s >= prev_end && s <= end && end < e.frames());
            prop_assert!(d.path.0[s..=end].iter().all(|&p| p == k));
            prev_end = end + 1;
        }
    }

    #[test]
    fn parse_tolerates_tag_soup(ids in prop::collection::vec(0usize..14, 0..25)) {
        let (vocab, reg) = fixture();
        let t = parse(&ids, &vocab, &reg, None).unwrap();
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&i| vocab.role(i) == Some(Role::Transcription))
            .map(|&i| vocab.surface(i).unwrap())
            .collect();
        prop_assert_eq!(&t.words, &words);
        let mut prev_end = 0;
        for ent in &t.entities {
            let (s, e) = ent.word_span;
            prop_assert!(s >= prev_end && s <= e && e <= t.words.len());
            prop_assert_eq!(&ent.phrase, &t.words[s..e].join(" "));
            prev_end = e;
        }
        let begins = ids.iter().filter(|&&i| reg.by_id(i).is_some_and(|b| matches!(b.kind, TagKind::EntityBegin(_)))).count();
        let ends = ids.iter().filter(|&&i| reg.end_tag().is_some_and(|b| b.token_id == i)).count();
        let count = |k: AnomalyKind| t.anomalies.iter().filter(|a| a.kind == k).count();
        prop_assert_eq!(t.entities.len(), begins);
        prop_assert_eq!(
            ends - count(AnomalyKind::EndWithoutBegin),
            begins - count(AnomalyKind::UnclosedEntityAtEnd) - count(AnomalyKind::NestedBeginAutoClosed)
        );
    }

    #[test]
    fn render_parse_round_trip(ids in prop::collection::vec(0usize..14, 0..25)) {
        let (vocab, reg) = fixture();
        let mut t = parse(&ids, &vocab, &reg, None).unwrap();
        t.anomalies.clear();
        let text = render(&t, &reg).unwrap();
        let again = parse(&encode_tagged_text(&vocab, &reg, &text).unwrap(), &vocab, &reg, None).unwrap();
        prop_assert_eq!(again.intent, t.intent);
        prop_assert_eq!(again.words, t.words);
        prop_assert_eq!(again.entities, t.entities);
        prop_assert_eq!(again.speaker_turns, t.speaker_turns);
        prop_assert!(again.anomalies.is_empty());
        prop_assert_eq!(render(&parse(&encode_tagged_text(&vocab, &reg, &text).unwrap(), &vocab, &reg, None).unwrap(), &reg).unwrap(), text);
    }

    #[test]
    fn encode_decode_round_trip(ids in prop::collection::vec(0usize..14, 0..25)) {
        let (vocab, reg) = fixture();
        let ids: Vec<TokenId> = ids.into_iter().filter(|&i| vocab.role(i) == Some(Role::Transcription) || reg.is_tag(i)).collect();
        let text = decode_tokens(&vocab, &reg, &ids).unwrap();
        prop_assert_eq!(encode_tagged_text(&vocab, &reg, &text).unwrap(), ids);
    }

    #[test]
    fn ner_scores_are_symmetric_and_bounded(a in tuple_set(), b in tuple_set()) {
        let ab = ner_prf(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap().overall;
        let ba = ner_prf(&[b], &[a]).unwrap().overall;
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert_eq!(ab.recall, ba.precision);
        prop_assert!((ab.f1 - ba.f1).abs() < 1e-15);
        for x in [ab.precision, ab.recall, ab.f1] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        prop_assert!(ab.totals.total_correct <= ab.totals.total_reference.min(ab.totals.total_system));
    }

    #[test]
    fn adding_a_correct_tuple_never_lowers_recall(a in tuple_set(), b in tuple_set(), extra in tuple_set()) {
        let before = ner_prf(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap().overall.recall;
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        for (t, p, n) in extra.iter() {
            for _ in 0..n {
                a2.add(t, p);
                b2.add(t, p);
            }
        }
        let after = ner_prf(&[a2], &[b2]).unwrap().overall.recall;
        prop_assert!(after >= before || (a.is_empty() && b.is_empty()));
    }

    #[test]
    fn edit_distance_is_a_metric(a in sentence(), b in sentence(), c in sentence()) {
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn emission_file_round_trip(t in 0usize..8, v in 1usize..6, logits in any::<bool>(), seed in any::<u64>()) {
        let mut data = Array2::from_shape_fn((t, v), |(i, j)| 1.0 + ((seed >> ((i + j) % 48)) as u16) as f64 / 7.0);
        let kind = if logits {
            EmissionKind::Logits
        } else {
            for mut row in data.rows_mut() {
                let sum = row.sum();
                row /= sum;
            }
            EmissionKind::Probabilities
        };
        let bytes = encode_emissions(kind, &data);
        let (k2, back) = decode_emissions(&bytes).unwrap();
        prop_assert_eq!(k2, kind);
        prop_assert_eq!(encode_emissions(k2, &back), bytes.clone());
        let feat = encode_features(&data);
        prop_assert_eq!(encode_features(&decode_features(&feat).unwrap()), feat);
    }
}

#[test]
fn vocab_file_round_trip_keeps_bindings() {
    let (vocab, reg) = fixture();
    let text = vocab_to_json_string(&vocab, &reg);
    let (v2, r2) = vocab_from_json_str(&text).unwrap();
    assert_eq!(vocab_to_json_string(&v2, &r2), text);
    assert_eq!(r2.fingerprint(), reg.fingerprint());
    for id in 0..vocab.total() {
        assert_eq!(v2.role(id), vocab.role(id));
    }
}
