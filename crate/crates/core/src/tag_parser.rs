//! Turns a collapsed token sequence into a structured transcript and back.
//!
//! Entities are flat: a begin tag opens a region that the shared END tag
//! closes. Malformed sequences never fail; they are repaired and the repair
//! is recorded as an [`Anomaly`].

use serde::{Deserialize, Serialize};

use crate::decoder::FrameSpan;
use crate::error::{Error, Result};
use crate::vocab::{tag_name, Role, TagKind, TagRegistry, TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    #[serde(rename = "type")]
    pub entity_type: String,
    pub phrase: String,
    /// Half-open `[start, end)` range into the transcript words.
    pub word_span: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_span: Option<FrameSpan>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnomalyKind {
    EndWithoutBegin,
    UnclosedEntityAtEnd,
    NestedBeginAutoClosed,
    DuplicateIntentIgnored,
    IntentNotAtStart,
    /// A placeholder with no tag bound to it; dropped from the output.
    UnboundPlaceholder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anomaly {
    pub kind: AnomalyKind,
    /// Index into the parsed token sequence.
    pub position: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredTranscript {
    pub intent: Option<String>,
    pub words: Vec<String>,
    pub entities: Vec<Entity>,
    /// Word indices before which the speaker changes.
    pub speaker_turns: Vec<usize>,
    pub anomalies: Vec<Anomaly>,
}

impl StructuredTranscript {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

struct OpenEntity {
    entity_type: String,
    start: usize,
}

struct Builder {
    out: StructuredTranscript,
    word_frames: Vec<Option<FrameSpan>>,
    open: Option<OpenEntity>,
}

impl Builder {
    fn close(&mut self) {
        let Some(open) = self.open.take() else { return };
        let end = self.out.words.len();
        let frame_span = if end > open.start {
            match (self.word_frames[open.start], self.word_frames[end - 1]) {
                (Some((first, _)), Some((_, last))) => Some((first, last)),
                _ => None,
            }
        } else {
            None
        };
        self.out.entities.push(Entity {
            entity_type: open.entity_type,
            phrase: self.out.words[open.start..end].join(" "),
            word_span: (open.start, end),
            frame_span,
        });
    }

    fn flag(&mut self, kind: AnomalyKind, position: usize) {
        self.out.anomalies.push(Anomaly { kind, position });
    }
}

/// Parses `labels` into a transcript. `frame_spans`, when given, holds one
/// span per label and is used to time entities.
pub fn parse(
    labels: &[TokenId],
    vocab: &Vocabulary,
    registry: &TagRegistry,
    frame_spans: Option<&[FrameSpan]>,
) -> Result<StructuredTranscript> {
    if let Some(spans) = frame_spans {
        if spans.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} frame spans for {} labels",
                spans.len(),
                labels.len()
            )));
        }
    }
    let mut b = Builder {
        out: StructuredTranscript::default(),
        word_frames: Vec::new(),
        open: None,
    };
    for (pos, &id) in labels.iter().enumerate() {
        match vocab.role(id) {
            None => return Err(Error::UnknownToken(format!("id {id}"))),
            Some(Role::Blank) => return Err(Error::BlankInLabelSequence(pos)),
            Some(Role::Transcription) => {
                b.out.words.push(vocab.surface(id).expect("in range").to_string());
                b.word_frames.push(frame_spans.map(|s| s[pos]));
                continue;
            }
            Some(Role::Placeholder) => {}
        }
        let Some(binding) = registry.by_id(id) else {
            b.flag(AnomalyKind::UnboundPlaceholder, pos);
            continue;
        };
        match &binding.kind {
            TagKind::Intent => {
                if b.out.intent.is_some() {
                    b.flag(AnomalyKind::DuplicateIntentIgnored, pos);
                } else {
                    b.out.intent = Some(tag_name(&binding.surface).to_string());
                    if pos != 0 {
                        b.flag(AnomalyKind::IntentNotAtStart, pos);
                    }
                }
            }
            TagKind::EntityBegin(t) => {
                if b.open.is_some() {
                    b.close();
                    b.flag(AnomalyKind::NestedBeginAutoClosed, pos);
                }
                b.open = Some(OpenEntity {
                    entity_type: t.clone(),
                    start: b.out.words.len(),
                });
            }
            TagKind::EntityEnd => {
                if b.open.is_some() {
                    b.close();
                } else {
                    b.flag(AnomalyKind::EndWithoutBegin, pos);
                }
            }
            TagKind::SpeakerChange => {
                let at = b.out.words.len();
                b.out.speaker_turns.push(at);
            }
        }
    }
    if b.open.is_some() {
        b.close();
        b.flag(AnomalyKind::UnclosedEntityAtEnd, labels.len() - 1);
    }
    Ok(b.out)
}

/// Transcription tokens of `labels`, tags removed.
pub fn strip_tags(labels: &[TokenId], vocab: &Vocabulary) -> Vec<String> {
    labels
        .iter()
        .filter(|&&id| vocab.role(id) == Some(Role::Transcription))
        .map(|&id| vocab.surface(id).expect("in range").to_string())
        .collect()
}

fn check_canonical(t: &StructuredTranscript) -> Result<()> {
    if !t.anomalies.is_empty() {
        return Err(Error::NotCanonical(format!("{} anomalies present", t.anomalies.len())));
    }
    let n = t.words.len();
    let mut prev_end = 0;
    for (i, e) in t.entities.iter().enumerate() {
        let (start, end) = e.word_span;
        if start > end || end > n {
            return Err(Error::NotCanonical(format!("entity {i} span {start}..{end} out of range")));
        }
        if start < prev_end {
            return Err(Error::NotCanonical(format!("entity {i} overlaps or is out of order")));
        }
        if e.phrase != t.words[start..end].join(" ") {
            return Err(Error::NotCanonical(format!("entity {i} phrase does not match its words")));
        }
        prev_end = end;
    }
    if t.speaker_turns.windows(2).any(|w| w[0] > w[1]) || t.speaker_turns.iter().any(|&i| i > n) {
        return Err(Error::NotCanonical("speaker turns unordered or out of range".into()));
    }
    Ok(())
}

/// Canonical tagged text: intent first, then words with entity and speaker
/// tags inserted in place.
pub fn render(t: &StructuredTranscript, registry: &TagRegistry) -> Result<String> {
    check_canonical(t)?;
    let missing = |what: &str| Error::NotCanonical(format!("no tag bound for {what}"));
    let mut out: Vec<&str> = Vec::new();
    if let Some(intent) = &t.intent {
        out.push(&registry.intent_tag(intent).ok_or_else(|| missing(intent))?.surface);
    }
    let end_tag = match t.entities.is_empty() {
        true => None,
        false => Some(registry.end_tag().ok_or_else(|| missing("entity end"))?.surface.as_str()),
    };
    let spk_tag = match t.speaker_turns.is_empty() {
        true => None,
        false => Some(
            registry
                .speaker_change_tag()
                .ok_or_else(|| missing("speaker change"))?
                .surface
                .as_str(),
        ),
    };
    let mut next_entity = 0;
    let mut open_end: Option<usize> = None;
    let mut turns = t.speaker_turns.iter().peekable();
    for i in 0..=t.words.len() {
        if open_end == Some(i) {
            out.extend(end_tag);
            open_end = None;
        }
        while turns.next_if(|&&at| at == i).is_some() {
            out.extend(spk_tag);
        }
        while let Some(e) = t.entities.get(next_entity).filter(|e| e.word_span.0 == i) {
            out.push(
                &registry
                    .entity_begin_tag(&e.entity_type)
                    .ok_or_else(|| missing(&e.entity_type))?
                    .surface,
            );
            next_entity += 1;
            if e.word_span.1 == i {
                out.extend(end_tag);
            } else {
                open_end = Some(e.word_span.1);
                break;
            }
        }
        if let Some(w) = t.words.get(i) {
            out.push(w);
        }
    }
    Ok(out.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocab, encode_tagged_text};

    const LISTING: &str = "@CALENDER_SET@ put !EVENT_NAME! meeting !END! with !PERSON! paul !END! for !DATE! tomorrow !END! !TIME! ten am !END!";

    fn setup() -> (Vocabulary, TagRegistry) {
        let words = ["put", "meeting", "with", "paul", "for", "tomorrow", "ten", "am", "hello"];
        let vocab = build_vocab(&words, 10).unwrap();
        let mut reg = TagRegistry::new();
        for (s, k) in [
            ("@CALENDER_SET@", TagKind::Intent),
            ("@PLAY_MUSIC@", TagKind::Intent),
            ("!EVENT_NAME!", TagKind::EntityBegin("EVENT_NAME".into())),
            ("!PERSON!", TagKind::EntityBegin("PERSON".into())),
            ("!DATE!", TagKind::EntityBegin("DATE".into())),
            ("!TIME!", TagKind::EntityBegin("TIME".into())),
            ("!END!", TagKind::EntityEnd),
            ("<SPK>", TagKind::SpeakerChange),
        ] {
            reg = reg.assign(&vocab, s, k).unwrap();
        }
        (vocab, reg)
    }

    fn parse_text(text: &str) -> StructuredTranscript {
        let (v, r) = setup();
        parse(&encode_tagged_text(&v, &r, text).unwrap(), &v, &r, None).unwrap()
    }

    fn pairs(t: &StructuredTranscript) -> Vec<(&str, &str)> {
        t.entities.iter().map(|e| (e.entity_type.as_str(), e.phrase.as_str())).collect()
    }

    #[test]
    fn calendar_listing() {
        let t = parse_text(LISTING);
        assert_eq!(t.intent.as_deref(), Some("CALENDER_SET"));
        assert_eq!(
            pairs(&t),
            vec![("EVENT_NAME", "meeting"), ("PERSON", "paul"), ("DATE", "tomorrow"), ("TIME", "ten am")]
        );
        assert_eq!(t.text(), "put meeting with paul for tomorrow ten am");
        assert!(t.anomalies.is_empty());
        assert_eq!(t.entities[3].word_span, (6, 8));
        let (_, r) = setup();
        assert_eq!(render(&t, &r).unwrap(), LISTING);
    }

    #[test]
    fn untagged_input() {
        let t = parse_text("put meeting");
        assert_eq!(t.intent, None);
        assert!(t.entities.is_empty());
        assert!(t.anomalies.is_empty());
    }

    #[test]
    fn end_without_begin() {
        let t = parse_text("!END! hello");
        assert_eq!(t.text(), "hello");
        assert_eq!(
            t.anomalies,
            vec![Anomaly { kind: AnomalyKind::EndWithoutBegin, position: 0 }]
        );
    }

    #[test]
    fn nested_begin_and_unclosed() {
        let t = parse_text("!PERSON! paul !DATE! tomorrow");
        assert_eq!(pairs(&t), vec![("PERSON", "paul"), ("DATE", "tomorrow")]);
        let kinds: Vec<_> = t.anomalies.iter().map(|a| (a.kind, a.position)).collect();
        assert_eq!(
            kinds,
            vec![(AnomalyKind::NestedBeginAutoClosed, 2), (AnomalyKind::UnclosedEntityAtEnd, 3)]
        );
    }

    #[test]
    fn intent_handling() {
        let t = parse_text("put meeting @CALENDER_SET@ @PLAY_MUSIC@");
        assert_eq!(t.intent.as_deref(), Some("CALENDER_SET"));
        let kinds: Vec<_> = t.anomalies.iter().map(|a| (a.kind, a.position)).collect();
        assert_eq!(
            kinds,
            vec![(AnomalyKind::IntentNotAtStart, 2), (AnomalyKind::DuplicateIntentIgnored, 3)]
        );
    }

    #[test]
    fn speaker_turns_and_unbound() {
        let (v, r) = setup();
        let mut ids = encode_tagged_text(&v, &r, "hello <SPK> put meeting").unwrap();
        ids.push(v.placeholder_ids().end - 1);
        let t = parse(&ids, &v, &r, None).unwrap();
        assert_eq!(t.speaker_turns, vec![1]);
        assert_eq!(t.words.len(), 3);
        assert_eq!(t.anomalies[0].kind, AnomalyKind::UnboundPlaceholder);
    }

    #[test]
    fn blank_rejected() {
        let (v, r) = setup();
        assert!(matches!(
            parse(&[0, v.blank_id()], &v, &r, None),
            Err(Error::BlankInLabelSequence(1))
        ));
    }

    #[test]
    fn entity_frame_spans() {
        let (v, r) = setup();
        let ids = encode_tagged_text(&v, &r, "put !TIME! ten am !END!").unwrap();
        let spans = [(0, 1), (2, 2), (3, 4), (5, 7), (8, 8)];
        let t = parse(&ids, &v, &r, Some(&spans)).unwrap();
        assert_eq!(t.entities[0].frame_span, Some((3, 7)));
        assert!(parse(&ids, &v, &r, Some(&spans[..2])).is_err());
    }

    #[test]
    fn strip_matches_words() {
        let (v, r) = setup();
        let ids = encode_tagged_text(&v, &r, LISTING).unwrap();
        assert_eq!(strip_tags(&ids, &v).join(" "), "put meeting with paul for tomorrow ten am");
        let tags_only = encode_tagged_text(&v, &r, "!END! @CALENDER_SET@ <SPK>").unwrap();
        assert!(strip_tags(&tags_only, &v).is_empty());
    }

    #[test]
    fn render_edge_cases() {
        let (_, r) = setup();
        assert_eq!(render(&StructuredTranscript::default(), &r).unwrap(), "");
        let t = parse_text("!END! hello");
        assert!(matches!(render(&t, &r), Err(Error::NotCanonical(_))));
        let canonical = "hello <SPK> !PERSON! !END! !DATE! tomorrow !END! <SPK>";
        let t = parse_text(canonical);
        assert!(t.anomalies.is_empty());
        assert_eq!(render(&t, &r).unwrap(), canonical);
        // the same events in another order render canonically
        let t2 = parse_text("hello !PERSON! !END! <SPK> !DATE! tomorrow !END! <SPK>");
        assert_eq!(t2, t);
    }
}
