//! Greedy CTC decoding, in batch and frame-by-frame form, and the
//! per-frame timeline view of an emission matrix.

use std::fmt::Write as _;

use ndarray::ArrayView1;

use crate::ctc::{EmissionMatrix, LabelSequence, Path, ROW_SUM_TOLERANCE};
use crate::error::{Error, Result};
use crate::vocab::{TagRegistry, TokenId, Vocabulary};

/// Inclusive `[first, last]` frame range.
pub type FrameSpan = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub path: Path,
    pub labels: LabelSequence,
    /// One span per label: the argmax run that produced it.
    pub frame_spans: Vec<FrameSpan>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> TokenId {
    let mut best = 0;
    for (k, &p) in row.iter().enumerate().skip(1) {
        if p > row[best] {
            best = k;
        }
    }
    best
}

pub fn greedy_decode(e: &EmissionMatrix) -> DecodeResult {
    let mut stream = StreamingDecoder::new(e.width());
    for row in e.probs().rows() {
        stream.push_argmax(argmax(row));
    }
    stream.finish()
}

/// Incremental greedy decoder. A label is committed once its argmax run ends,
/// so committed output never changes as more frames arrive.
#[derive(Debug, Clone)]
pub struct StreamingDecoder {
    width: usize,
    path: Vec<TokenId>,
    labels: Vec<TokenId>,
    spans: Vec<FrameSpan>,
    run_start: usize,
}

impl StreamingDecoder {
    pub fn new(width: usize) -> Self {
        StreamingDecoder {
            width,
            path: Vec::new(),
            labels: Vec::new(),
            spans: Vec::new(),
            run_start: 0,
        }
    }

    fn blank(&self) -> TokenId {
        self.width - 1
    }

    /// Feeds one probability row. Returns the label committed by this frame,
    /// if the frame closed a non-blank run.
    pub fn push_frame(&mut self, row: &[f64]) -> Result<Option<(TokenId, FrameSpan)>> {
        if row.len() != self.width {
            return Err(Error::Shape(format!(
                "frame {} has width {}, stream width is {}",
                self.path.len(),
                row.len(),
                self.width
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidEmission(format!(
                "frame {} is not a probability row",
                self.path.len()
            )));
        }
        Ok(self.push_argmax(argmax(ArrayView1::from(row))))
    }

    fn push_argmax(&mut self, k: TokenId) -> Option<(TokenId, FrameSpan)> {
        let t = self.path.len();
        let committed = match self.path.last() {
            Some(&prev) if prev != k => {
                let done = self.close_run(prev, t - 1);
                self.run_start = t;
                done
            }
            _ => None,
        };
        self.path.push(k);
        committed
    }

    fn close_run(&mut self, label: TokenId, last: usize) -> Option<(TokenId, FrameSpan)> {
        if label == self.blank() {
            return None;
        }
        let span = (self.run_start, last);
        self.labels.push(label);
        self.spans.push(span);
        Some((label, span))
    }

    pub fn frames_seen(&self) -> usize {
        self.path.len()
    }

    /// Labels whose runs have ended so far.
    pub fn committed(&self) -> &[TokenId] {
        &self.labels
    }

    pub fn finish(mut self) -> DecodeResult {
        if let Some(&last) = self.path.last() {
            self.close_run(last, self.path.len() - 1);
        }
        DecodeResult {
            path: Path(self.path),
            labels: LabelSequence::new(self.labels, self.width - 1)
                .expect("blank runs are never committed"),
            frame_spans: self.spans,
        }
    }
}

/// Feeds every row of `e` through a fresh streaming session.
pub fn streaming_decode(e: &EmissionMatrix) -> Result<DecodeResult> {
    let mut stream = StreamingDecoder::new(e.width());
    for row in e.probs().rows() {
        stream.push_frame(row.as_slice().expect("standard layout"))?;
    }
    Ok(stream.finish())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimelineRow {
    pub t: usize,
    pub token_id: TokenId,
    pub surface: String,
    pub prob: f64,
    pub is_blank: bool,
}

pub fn emit_timeline(e: &EmissionMatrix, vocab: &Vocabulary, registry: &TagRegistry) -> Vec<TimelineRow> {
    e.probs()
        .rows()
        .into_iter()
        .enumerate()
        .map(|(t, row)| {
            let k = argmax(row);
            let surface = registry
                .by_id(k)
                .map(|b| b.surface.clone())
                .or_else(|| vocab.surface(k).map(str::to_string))
                .unwrap_or_else(|| format!("<id_{k}>"));
            TimelineRow {
                t,
                token_id: k,
                surface,
                prob: row[k],
                is_blank: k == e.blank_id(),
            }
        })
        .collect()
}

pub fn blank_fraction(rows: &[TimelineRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.is_blank).count() as f64 / rows.len() as f64
}

pub fn timeline_tsv(rows: &[TimelineRow]) -> String {
    let mut out = String::from("t\ttoken_id\tsurface\tprob\tis_blank\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{}",
            r.t, r.token_id, r.surface, r.prob, r.is_blank
        )
        .expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::collapse;
    use crate::vocab::{build_vocab, TagKind};
    use ndarray::array;

    #[test]
    fn one_hot_decodes_to_collapse() {
        let p = vec![0, 0, 3, 1, 1, 3, 1, 2];
        let e = EmissionMatrix::one_hot(&p, 4).unwrap();
        let d = greedy_decode(&e);
        assert_eq!(d.path.0, p);
        assert_eq!(d.labels, collapse(&p, 3));
        assert_eq!(d.frame_spans, vec![(0, 1), (3, 4), (6, 6), (7, 7)]);
    }

    #[test]
    fn uniform_ties_go_to_token_zero() {
        let e = EmissionMatrix::uniform(5, 4).unwrap();
        let d = greedy_decode(&e);
        assert_eq!(d.path.0, vec![0; 5]);
        assert_eq!(d.labels.as_slice(), &[0]);
        assert_eq!(d.frame_spans, vec![(0, 4)]);
    }

    #[test]
    fn streaming_commits_when_run_ends() {
        let e = EmissionMatrix::one_hot(&[1, 1, 2, 0, 0], 3).unwrap();
        let mut s = StreamingDecoder::new(3);
        let mut commits = Vec::new();
        for row in e.probs().rows() {
            commits.push(s.push_frame(row.as_slice().unwrap()).unwrap());
        }
        assert_eq!(commits, vec![None, None, Some((1, (0, 1))), None, None]);
        assert_eq!(s.committed(), &[1]);
        let d = s.finish();
        assert_eq!(d, greedy_decode(&e));
    }

    #[test]
    fn single_frame_stream() {
        let mut s = StreamingDecoder::new(3);
        assert_eq!(s.push_frame(&[0.2, 0.5, 0.3]).unwrap(), None);
        assert!(s.finish().labels.len() <= 1);
    }

    #[test]
    fn width_mismatch_mid_stream() {
        let mut s = StreamingDecoder::new(3);
        s.push_frame(&[0.2, 0.5, 0.3]).unwrap();
        assert!(matches!(s.push_frame(&[0.5, 0.5]), Err(Error::Shape(_))));
    }

    #[test]
    fn timeline_rows() {
        let vocab = build_vocab(&["a", "b"], 1).unwrap();
        let reg = TagRegistry::new()
            .assign(&vocab, "!END!", TagKind::EntityEnd)
            .unwrap();
        let e = EmissionMatrix::one_hot(&[0, 3, 2, 1], 4).unwrap();
        let rows = emit_timeline(&e, &vocab, &reg);
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.prob == 1.0));
        assert_eq!(rows[2].surface, "!END!");
        assert!(rows[1].is_blank);
        assert_eq!(rows.iter().filter(|r| r.is_blank).count() + rows.iter().filter(|r| !r.is_blank).count(), 4);
        assert_eq!(blank_fraction(&rows), 0.25);
        let tsv = timeline_tsv(&rows);
        let mut lines = tsv.lines();
        assert_eq!(lines.next(), Some("t\ttoken_id\tsurface\tprob\tis_blank"));
        assert_eq!(lines.next(), Some("0\t0\ta\t1.000000\tfalse"));
        assert_eq!(lines.next(), Some("1\t3\t<blank>\t1.000000\ttrue"));
    }

    #[test]
    fn argmax_lowest_tie() {
        assert_eq!(argmax(array![0.4, 0.2, 0.4].view()), 0);
        assert_eq!(argmax(array![0.1, 0.45, 0.45].view()), 1);
    }
}
