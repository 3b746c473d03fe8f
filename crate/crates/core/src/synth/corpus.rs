use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;
use crate::tag_parser::{render, Entity, StructuredTranscript};
use crate::vocab::{encode_tagged_text, TagKind, TagRegistry, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSpec {
    pub name: String,
    /// Words that open an utterance with this intent.
    pub triggers: Vec<String>,
    pub entity_types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityLexicon {
    pub entity_type: String,
    pub words: Vec<String>,
    pub max_phrase_len: usize,
}

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub const fn new(min: usize, max: usize) -> Self {
        Span { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_utterances: usize,
    /// Salt mixed into per-utterance seeds so train and held-out sets differ
    /// while sharing word embeddings.
    pub split: String,
    pub feature_dim: usize,
    pub frames_per_token: Span,
    pub noise_sigma: f64,
    pub intents: Vec<IntentSpec>,
    pub entities: Vec<EntityLexicon>,
    pub fillers: Vec<String>,
    pub entities_per_utterance: Span,
    /// Filler words placed before each entity.
    pub fillers_per_gap: Span,
    pub trailing_fillers: Span,
    pub speaker_change_probability: f64,
}

fn words(list: &str) -> Vec<String> {
    list.split_whitespace().map(str::to_string).collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        let intent = |name: &str, triggers: &str, types: &str| IntentSpec {
            name: name.into(),
            triggers: words(triggers),
            entity_types: words(types),
        };
        let lexicon = |t: &str, w: &str, max_phrase_len| EntityLexicon {
            entity_type: t.into(),
            words: words(w),
            max_phrase_len,
        };
        SynthConfig {
            seed: 42,
            n_utterances: 2000,
            split: "train".into(),
            feature_dim: 16,
            frames_per_token: Span::new(2, 4),
            noise_sigma: 0.3,
            intents: vec![
                intent("CALENDER_SET", "put schedule book", "EVENT_NAME PERSON DATE TIME"),
                intent("PLAY_MUSIC", "play stream queue", "ARTIST PLACE DATE"),
                intent("WEATHER_QUERY", "forecast weather rain", "PLACE DATE TIME"),
                intent("EMAIL_SEND", "email mail message", "PERSON EVENT_NAME DATE"),
            ],
            entities: vec![
                lexicon("EVENT_NAME", "meeting lunch review standup party dinner", 1),
                lexicon("PERSON", "paul maria john alice kumar lena", 2),
                lexicon("DATE", "tomorrow monday friday today sunday weekend", 1),
                lexicon("TIME", "ten am pm noon seven nine", 2),
                lexicon("PLACE", "london paris boston tokyo berlin delhi", 1),
                lexicon("ARTIST", "adele queen drake coldplay shakira abba", 1),
            ],
            fillers: words("with for the a at on please me my and about to in new"),
            entities_per_utterance: Span::new(0, 3),
            fillers_per_gap: Span::new(1, 2),
            trailing_fillers: Span::new(0, 2),
            speaker_change_probability: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_utterances == 0 || self.feature_dim == 0 || self.intents.is_empty() || self.fillers.is_empty() {
            return bad("n_utterances, feature_dim, intents and fillers must be non-empty".into());
        }
        for (name, span) in [
            ("frames_per_token", self.frames_per_token),
            ("entities_per_utterance", self.entities_per_utterance),
            ("fillers_per_gap", self.fillers_per_gap),
            ("trailing_fillers", self.trailing_fillers),
        ] {
            if span.min > span.max {
                return bad(format!("{name}: min {} > max {}", span.min, span.max));
            }
        }
        if self.frames_per_token.min == 0 {
            return bad("frames_per_token must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.speaker_change_probability) {
            return bad("speaker_change_probability must lie in [0, 1]".into());
        }
        let mut seen = HashSet::new();
        let all_words = self
            .intents
            .iter()
            .flat_map(|i| &i.triggers)
            .chain(self.entities.iter().flat_map(|e| &e.words))
            .chain(&self.fillers);
        for w in all_words {
            if !seen.insert(w) {
                return bad(format!("word `{w}` appears in more than one lexicon slot"));
            }
        }
        for lex in &self.entities {
            if lex.words.is_empty() || lex.max_phrase_len == 0 {
                return bad(format!("lexicon {} needs words and max_phrase_len >= 1", lex.entity_type));
            }
        }
        for intent in &self.intents {
            for t in &intent.entity_types {
                if !self.entities.iter().any(|e| &e.entity_type == t) {
                    return bad(format!("intent {} uses unknown entity type {t}", intent.name));
                }
            }
        }
        Ok(())
    }

    /// Every transcription word in a fixed order: triggers, entity words, fillers.
    pub fn lexicon(&self) -> Vec<String> {
        self.intents
            .iter()
            .flat_map(|i| i.triggers.iter())
            .chain(self.entities.iter().flat_map(|e| e.words.iter()))
            .chain(self.fillers.iter())
            .cloned()
            .collect()
    }

    /// Vocabulary over [`Self::lexicon`] with its tags bound: intents
    /// `@NAME@`, entity begins `!TYPE!`, the shared `!END!` and `<SPK>`.
    pub fn build_vocab(&self, placeholder_count: usize) -> Result<(Vocabulary, TagRegistry)> {
        self.validate()?;
        let vocab = Vocabulary::build(&self.lexicon(), placeholder_count)?;
        let mut reg = TagRegistry::new();
        for intent in &self.intents {
            reg = reg.assign(&vocab, &format!("@{}@", intent.name), TagKind::Intent)?;
        }
        for lex in &self.entities {
            reg = reg.assign(
                &vocab,
                &format!("!{}!", lex.entity_type),
                TagKind::EntityBegin(lex.entity_type.clone()),
            )?;
        }
        reg = reg.assign(&vocab, "!END!", TagKind::EntityEnd)?;
        reg = reg.assign(&vocab, "<SPK>", TagKind::SpeakerChange)?;
        Ok((vocab, reg))
    }
}

/// Placeholder count used for generated corpora; small enough to keep the
/// toy model's output layer cheap.
pub const SYNTH_PLACEHOLDER_COUNT: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tagged_text: String,
    pub features: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub features: String,
    pub tagged_text: String,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic seed for one generation stream.
pub(crate) fn derive_seed(seed: u64, domain: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(domain)).wrapping_add(index))
}

fn seeded_vector(seed: u64, domain: &str, index: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain, index));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Fixed embedding of a word; depends on the corpus seed, not the split.
pub fn word_embedding(seed: u64, word: &str, dim: usize) -> Vec<f64> {
    seeded_vector(seed, "embedding", fnv1a(word), dim)
}

fn pick_filler<'a>(cfg: &'a SynthConfig, rng: &mut ChaCha8Rng, prev: Option<&str>) -> &'a str {
    loop {
        let w = cfg.fillers.choose(rng).expect("validated non-empty");
        if cfg.fillers.len() == 1 || Some(w.as_str()) != prev {
            return w;
        }
    }
}

fn sample_transcript(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> StructuredTranscript {
    let intent = cfg.intents.choose(rng).expect("validated non-empty");
    let mut t = StructuredTranscript {
        intent: Some(intent.name.clone()),
        ..Default::default()
    };
    if let Some(w) = intent.triggers.choose(rng) {
        t.words.push(w.clone());
    }
    let n_entities = cfg.entities_per_utterance.sample(rng).min(intent.entity_types.len());
    let mut types: Vec<&String> = intent.entity_types.iter().collect();
    types.shuffle(rng);
    for ty in types.into_iter().take(n_entities) {
        for _ in 0..cfg.fillers_per_gap.sample(rng) {
            let w = pick_filler(cfg, rng, t.words.last().map(String::as_str));
            t.words.push(w.to_string());
        }
        let lex = cfg.entities.iter().find(|e| &e.entity_type == ty).expect("validated");
        let len = rng.random_range(1..=lex.max_phrase_len.min(lex.words.len()));
        let phrase: Vec<String> = lex.words.choose_multiple(rng, len).cloned().collect();
        let start = t.words.len();
        t.words.extend(phrase.iter().cloned());
        t.entities.push(Entity {
            entity_type: ty.clone(),
            phrase: phrase.join(" "),
            word_span: (start, t.words.len()),
            frame_span: None,
        });
    }
    for _ in 0..cfg.trailing_fillers.sample(rng) {
        let w = pick_filler(cfg, rng, t.words.last().map(String::as_str));
        t.words.push(w.to_string());
    }
    if cfg.speaker_change_probability > 0.0 {
        for i in 1..t.words.len() {
            if rng.random_bool(cfg.speaker_change_probability) {
                t.speaker_turns.push(i);
            }
        }
    }
    t
}

fn synthesize_features(
    cfg: &SynthConfig,
    t: &StructuredTranscript,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let dim = cfg.feature_dim;
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
    let speakers = [
        seeded_vector(cfg.seed, "speaker", 0, dim),
        seeded_vector(cfg.seed, "speaker", 1, dim),
    ];
    let use_speakers = cfg.speaker_change_probability > 0.0;
    let mut speaker = 0;
    let mut rows: Vec<f64> = Vec::new();
    let mut frames = 0;
    for (i, word) in t.words.iter().enumerate() {
        speaker ^= t.speaker_turns.iter().filter(|&&at| at == i).count() & 1;
        let emb = word_embedding(cfg.seed, word, dim);
        for _ in 0..cfg.frames_per_token.sample(rng) {
            for (d, &base) in emb.iter().enumerate() {
                let offset = if use_speakers { speakers[speaker][d] } else { 0.0 };
                rows.push(base + offset + noise.sample(rng));
            }
            frames += 1;
        }
    }
    Array2::from_shape_vec((frames, dim), rows).expect("row-major fill")
}

/// Generates `cfg.n_utterances` utterances. Each one draws from its own
/// seed derived from `(seed, split, index)`.
pub fn gen_corpus(cfg: &SynthConfig, vocab: &Vocabulary, registry: &TagRegistry) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    (0..cfg.n_utterances)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &cfg.split, i as u64));
            let transcript = sample_transcript(cfg, &mut rng);
            let tagged_text = render(&transcript, registry).map_err(|e| match e {
                Error::NotCanonical(msg) => Error::UnknownToken(msg),
                other => other,
            })?;
            encode_tagged_text(vocab, registry, &tagged_text)?;
            let features = synthesize_features(cfg, &transcript, &mut rng);
            Ok(Utterance {
                id: format!("{}-{:05}", cfg.split, i),
                tagged_text,
                features,
            })
        })
        .collect()
}

pub const FEATURE_DIR: &str = "feats";

/// Writes `<dir>/<manifest_name>` and one feature file per utterance under
/// `<dir>/feats/`.
pub fn write_corpus(utterances: &[Utterance], dir: &Path, manifest_name: &str) -> Result<PathBuf> {
    let feat_dir = dir.join(FEATURE_DIR);
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut manifest = String::new();
    for u in utterances {
        let rel = format!("{FEATURE_DIR}/{}.feat", u.id);
        formats::write_feature_file(&dir.join(&rel), &u.features)?;
        let record = ManifestRecord {
            id: u.id.clone(),
            features: rel,
            tagged_text: u.tagged_text.clone(),
        };
        manifest.push_str(&manifest_line(&record));
    }
    let path = dir.join(manifest_name);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn manifest_line(record: &ManifestRecord) -> String {
    let mut line = serde_json::to_string(&serde_json::to_value(record).expect("record serializes"))
        .expect("value serializes");
    line.push('\n');
    line
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(out)
}

/// Reads a manifest and its feature files back into utterances.
pub fn load_corpus(manifest: &Path) -> Result<Vec<Utterance>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|r| {
            Ok(Utterance {
                features: formats::read_feature_file(&base.join(&r.features))?,
                id: r.id,
                tagged_text: r.tagged_text,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tag_parser::parse;

    #[test]
    fn default_config_is_valid_and_tags_bind() {
        let cfg = SynthConfig::default();
        cfg.validate().unwrap();
        let (vocab, reg) = cfg.build_vocab(SYNTH_PLACEHOLDER_COUNT).unwrap();
        assert_eq!(vocab.transcription_count(), cfg.lexicon().len());
        assert_eq!(reg.len(), 4 + 6 + 2);
    }

    #[test]
    fn overlapping_lexicons_rejected() {
        let mut cfg = SynthConfig::default();
        cfg.fillers.push("paul".into());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn three_fillers_two_frames_each() {
        let cfg = SynthConfig {
            n_utterances: 1,
            frames_per_token: Span::new(2, 2),
            intents: vec![IntentSpec {
                name: "CHAT".into(),
                triggers: vec![],
                entity_types: vec![],
            }],
            entities_per_utterance: Span::new(0, 0),
            trailing_fillers: Span::new(3, 3),
            ..SynthConfig::default()
        };
        let (vocab, reg) = cfg.build_vocab(16).unwrap();
        let corpus = gen_corpus(&cfg, &vocab, &reg).unwrap();
        assert_eq!(corpus[0].features.dim(), (6, 16));
        assert!(corpus[0].tagged_text.starts_with("@CHAT@ "));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            n_utterances: 20,
            ..SynthConfig::default()
        };
        let (vocab, reg) = cfg.build_vocab(SYNTH_PLACEHOLDER_COUNT).unwrap();
        let a = gen_corpus(&cfg, &vocab, &reg).unwrap();
        let b = gen_corpus(&cfg, &vocab, &reg).unwrap();
        assert_eq!(a, b);
        let other = gen_corpus(&SynthConfig { split: "heldout".into(), ..cfg.clone() }, &vocab, &reg).unwrap();
        assert_ne!(a[0].tagged_text, other[0].tagged_text);
    }

    #[test]
    fn generated_text_parses_cleanly() {
        let cfg = SynthConfig {
            n_utterances: 100,
            speaker_change_probability: 0.2,
            ..SynthConfig::default()
        };
        let (vocab, reg) = cfg.build_vocab(SYNTH_PLACEHOLDER_COUNT).unwrap();
        for u in gen_corpus(&cfg, &vocab, &reg).unwrap() {
            let ids = encode_tagged_text(&vocab, &reg, &u.tagged_text).unwrap();
            let t = parse(&ids, &vocab, &reg, None).unwrap();
            assert!(t.anomalies.is_empty(), "{}", u.tagged_text);
            assert_eq!(render(&t, &reg).unwrap(), u.tagged_text);
        }
    }

    #[test]
    fn unbound_tag_is_reported() {
        let cfg = SynthConfig {
            n_utterances: 5,
            ..SynthConfig::default()
        };
        let vocab = Vocabulary::build(&cfg.lexicon(), 4).unwrap();
        let reg = TagRegistry::new();
        assert!(matches!(gen_corpus(&cfg, &vocab, &reg), Err(Error::UnknownToken(_))));
    }
}
