//! Python bindings. Matrices cross the boundary as lists of rows.

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tagctc::ctc::{self, EmissionMatrix, LabelSequence};
use tagctc::decoder;
use tagctc::eval::{self, EntityTupleSet};
use tagctc::synth::{self, Supervision, SynthConfig, TrainConfig, SYNTH_PLACEHOLDER_COUNT};
use tagctc::tag_parser::{self, AnomalyKind, StructuredTranscript};
use tagctc::vocab::{self, Role, TagKind, TokenId};

fn to_py(e: tagctc::Error) -> PyErr {
    match e {
        tagctc::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, width), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "Vocabulary", frozen)]
struct PyVocabulary(vocab::Vocabulary);

#[pymethods]
impl PyVocabulary {
    #[new]
    #[pyo3(signature = (transcription, placeholders = vocab::DEFAULT_PLACEHOLDER_COUNT))]
    fn new(transcription: Vec<String>, placeholders: usize) -> PyResult<Self> {
        vocab::build_vocab(&transcription, placeholders).map(PyVocabulary).map_err(to_py)
    }

    #[getter]
    fn total(&self) -> usize {
        self.0.total()
    }

    #[getter]
    fn blank_id(&self) -> TokenId {
        self.0.blank_id()
    }

    fn id(&self, surface: &str) -> Option<TokenId> {
        self.0.id(surface)
    }

    fn surface(&self, id: TokenId) -> Option<String> {
        self.0.surface(id).map(str::to_string)
    }

    /// "transcription", "placeholder" or "blank".
    fn role(&self, id: TokenId) -> Option<&'static str> {
        self.0.role(id).map(|r| match r {
            Role::Transcription => "transcription",
            Role::Placeholder => "placeholder",
            Role::Blank => "blank",
        })
    }

    fn __len__(&self) -> usize {
        self.0.total()
    }
}

#[pyclass(name = "TagRegistry", frozen)]
struct PyTagRegistry(vocab::TagRegistry);

#[pymethods]
impl PyTagRegistry {
    #[new]
    fn new() -> Self {
        PyTagRegistry(vocab::TagRegistry::new())
    }

    /// Returns a new registry with `surface` bound to the lowest free
    /// placeholder. `kind` is one of "intent", "entity_begin", "entity_end",
    /// "speaker_change".
    #[pyo3(signature = (vocab, surface, kind, entity_type = None))]
    fn assign(&self, vocab: &PyVocabulary, surface: &str, kind: &str, entity_type: Option<String>) -> PyResult<Self> {
        let kind = match (kind, entity_type) {
            ("intent", None) => TagKind::Intent,
            ("entity_begin", Some(t)) => TagKind::EntityBegin(t),
            ("entity_begin", None) => TagKind::EntityBegin(vocab::tag_name(surface).to_string()),
            ("entity_end", None) => TagKind::EntityEnd,
            ("speaker_change", None) => TagKind::SpeakerChange,
            (k, _) => return Err(PyValueError::new_err(format!("bad tag kind `{k}`"))),
        };
        self.0.assign(&vocab.0, surface, kind).map(PyTagRegistry).map_err(to_py)
    }

    fn token_id(&self, surface: &str) -> Option<TokenId> {
        self.0.by_surface(surface).map(|b| b.token_id)
    }

    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }

    fn to_json(&self) -> String {
        self.0.to_json_string()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyfunction]
fn encode_tagged_text(vocab: &PyVocabulary, registry: &PyTagRegistry, text: &str) -> PyResult<Vec<TokenId>> {
    vocab::encode_tagged_text(&vocab.0, &registry.0, text).map_err(to_py)
}

#[pyfunction]
fn decode_tokens(vocab: &PyVocabulary, registry: &PyTagRegistry, ids: Vec<TokenId>) -> PyResult<String> {
    vocab::decode_tokens(&vocab.0, &registry.0, &ids).map_err(to_py)
}

/// CTC loss of `labels` and its gradient with respect to `logits`.
#[pyfunction]
fn ctc_loss(logits: Vec<Vec<f64>>, labels: Vec<TokenId>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let x = matrix(logits)?;
    let l = LabelSequence::new(labels, x.ncols().saturating_sub(1)).map_err(to_py)?;
    let (loss, grad) = ctc::ctc_loss_and_gradient(x.view(), &l).map_err(to_py)?;
    Ok((loss, rows(&grad)))
}

/// P(labels | probs) by the forward recursion.
#[pyfunction]
fn sequence_probability(probs: Vec<Vec<f64>>, labels: Vec<TokenId>) -> PyResult<f64> {
    let e = EmissionMatrix::new(matrix(probs)?).map_err(to_py)?;
    let l = LabelSequence::new(labels, e.blank_id()).map_err(to_py)?;
    ctc::ctc_neg_log_likelihood(&e, &l).map(|nll| (-nll).exp()).map_err(to_py)
}

/// P(labels | probs) by enumerating every path; small inputs only.
#[pyfunction]
fn sequence_probability_bruteforce(probs: Vec<Vec<f64>>, labels: Vec<TokenId>) -> PyResult<f64> {
    let e = EmissionMatrix::new(matrix(probs)?).map_err(to_py)?;
    let l = LabelSequence::new(labels, e.blank_id()).map_err(to_py)?;
    ctc::sequence_probability_bruteforce(&e, &l).map_err(to_py)
}

/// Greedy decode; returns `(labels, frame_spans)` with inclusive spans.
#[pyfunction]
fn greedy_decode(probs: Vec<Vec<f64>>) -> PyResult<(Vec<TokenId>, Vec<decoder::FrameSpan>)> {
    let e = EmissionMatrix::new(matrix(probs)?).map_err(to_py)?;
    let d = decoder::greedy_decode(&e);
    Ok((d.labels.into_vec(), d.frame_spans))
}

#[pyclass(name = "Transcript", frozen)]
struct PyTranscript(StructuredTranscript);

#[pymethods]
impl PyTranscript {
    #[getter]
    fn intent(&self) -> Option<String> {
        self.0.intent.clone()
    }

    #[getter]
    fn words(&self) -> Vec<String> {
        self.0.words.clone()
    }

    #[getter]
    fn text(&self) -> String {
        self.0.text()
    }

    /// `(type, phrase)` pairs in order.
    #[getter]
    fn entities(&self) -> Vec<(String, String)> {
        self.0.entities.iter().map(|e| (e.entity_type.clone(), e.phrase.clone())).collect()
    }

    #[getter]
    fn speaker_turns(&self) -> Vec<usize> {
        self.0.speaker_turns.clone()
    }

    /// `(kind, position)` pairs, kind in snake_case.
    #[getter]
    fn anomalies(&self) -> Vec<(String, usize)> {
        self.0
            .anomalies
            .iter()
            .map(|a| (anomaly_name(a.kind).to_string(), a.position))
            .collect()
    }

    fn render(&self, registry: &PyTagRegistry) -> PyResult<String> {
        tag_parser::render(&self.0, &registry.0).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Transcript(intent={:?}, text={:?})", self.0.intent, self.0.text())
    }
}

fn anomaly_name(kind: AnomalyKind) -> &'static str {
    match kind {
        AnomalyKind::EndWithoutBegin => "end_without_begin",
        AnomalyKind::UnclosedEntityAtEnd => "unclosed_entity_at_end",
        AnomalyKind::NestedBeginAutoClosed => "nested_begin_auto_closed",
        AnomalyKind::DuplicateIntentIgnored => "duplicate_intent_ignored",
        AnomalyKind::IntentNotAtStart => "intent_not_at_start",
        AnomalyKind::UnboundPlaceholder => "unbound_placeholder",
    }
}

#[pyfunction]
fn parse(labels: Vec<TokenId>, vocab: &PyVocabulary, registry: &PyTagRegistry) -> PyResult<PyTranscript> {
    tag_parser::parse(&labels, &vocab.0, &registry.0, None).map(PyTranscript).map_err(to_py)
}

#[pyfunction]
fn parse_text(text: &str, vocab: &PyVocabulary, registry: &PyTagRegistry) -> PyResult<PyTranscript> {
    let ids = vocab::encode_tagged_text(&vocab.0, &registry.0, text).map_err(to_py)?;
    parse(ids, vocab, registry)
}

/// Micro-averaged `(precision, recall, f1)` over per-utterance tuple lists.
#[pyfunction]
fn ner_prf(reference: Vec<Vec<(String, String)>>, hypothesis: Vec<Vec<(String, String)>>) -> PyResult<(f64, f64, f64)> {
    let sets = |v: Vec<Vec<(String, String)>>| -> Vec<EntityTupleSet> {
        v.iter().map(|u| u.iter().map(|(t, p)| (t.as_str(), p.as_str())).collect()).collect()
    };
    let s = eval::ner_prf(&sets(reference), &sets(hypothesis)).map_err(to_py)?.overall;
    Ok((s.precision, s.recall, s.f1))
}

#[pyfunction]
fn wer(reference: Vec<String>, hypothesis: Vec<String>) -> PyResult<f64> {
    eval::wer(&reference, &hypothesis).map_err(to_py)
}

#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    reference: Vec<PyRef<'py, PyTranscript>>,
    hypothesis: Vec<PyRef<'py, PyTranscript>>,
) -> PyResult<Bound<'py, PyDict>> {
    let r: Vec<_> = reference.iter().map(|t| t.0.clone()).collect();
    let h: Vec<_> = hypothesis.iter().map(|t| t.0.clone()).collect();
    let report = eval::evaluate(&r, &h).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("precision", report.precision)?;
    d.set_item("recall", report.recall)?;
    d.set_item("f1", report.f1)?;
    d.set_item("wer", report.wer)?;
    d.set_item("intent_accuracy", report.intent_accuracy)?;
    d.set_item("utterances", report.utterances)?;
    Ok(d)
}

#[pyclass(name = "Utterance", frozen)]
struct PyUtterance(synth::Utterance);

#[pymethods]
impl PyUtterance {
    #[getter]
    fn id(&self) -> String {
        self.0.id.clone()
    }

    #[getter]
    fn tagged_text(&self) -> String {
        self.0.tagged_text.clone()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        rows(&self.0.features)
    }
}

/// Synthetic corpus from the built-in grammar: `(vocab, registry, utterances)`.
#[pyfunction]
#[pyo3(signature = (n, seed = 42, split = "train", placeholders = SYNTH_PLACEHOLDER_COUNT))]
fn generate_corpus(
    n: usize,
    seed: u64,
    split: &str,
    placeholders: usize,
) -> PyResult<(PyVocabulary, PyTagRegistry, Vec<PyUtterance>)> {
    let cfg = SynthConfig {
        seed,
        n_utterances: n,
        split: split.to_string(),
        ..SynthConfig::default()
    };
    let (v, r) = cfg.build_vocab(placeholders).map_err(to_py)?;
    let utts = synth::gen_corpus(&cfg, &v, &r).map_err(to_py)?;
    Ok((PyVocabulary(v), PyTagRegistry(r), utts.into_iter().map(PyUtterance).collect()))
}

#[pyclass(name = "Model", frozen)]
struct PyModel(synth::ToyModel);

#[pymethods]
impl PyModel {
    /// Per-frame probability rows for a feature matrix.
    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let e = self.0.predict(matrix(features)?.view()).map_err(to_py)?;
        Ok(rows(&e.into_inner()))
    }

    fn to_json(&self) -> String {
        self.0.to_json_string()
    }
}

/// Trains the toy model; returns `(model, epoch_losses)`.
#[pyfunction]
#[pyo3(signature = (utterances, vocab, registry, epochs = 30, seed = 42, transcription_only = false))]
fn train(
    py: Python<'_>,
    utterances: Vec<PyRef<'_, PyUtterance>>,
    vocab: &PyVocabulary,
    registry: &PyTagRegistry,
    epochs: usize,
    seed: u64,
    transcription_only: bool,
) -> PyResult<(PyModel, Vec<f64>)> {
    let corpus: Vec<synth::Utterance> = utterances
        .iter()
        .map(|u| synth::Utterance {
            id: u.0.id.clone(),
            tagged_text: u.0.tagged_text.clone(),
            features: u.0.features.clone(),
        })
        .collect();
    let cfg = TrainConfig {
        epochs,
        seed,
        supervision: if transcription_only { Supervision::TranscriptionOnly } else { Supervision::Tagged },
        ..TrainConfig::default()
    };
    let (v, r) = (&vocab.0, &registry.0);
    let (model, log) = py.detach(|| synth::train(&corpus, v, r, &cfg)).map_err(to_py)?;
    Ok((PyModel(model), log.epoch_losses))
}

#[pymodule]
fn tagctc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyTagRegistry>()?;
    m.add_class::<PyTranscript>()?;
    m.add_class::<PyUtterance>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(encode_tagged_text, m)?)?;
    m.add_function(wrap_pyfunction!(decode_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(sequence_probability, m)?)?;
    m.add_function(wrap_pyfunction!(sequence_probability_bruteforce, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(parse, m)?)?;
    m.add_function(wrap_pyfunction!(parse_text, m)?)?;
    m.add_function(wrap_pyfunction!(ner_prf, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
