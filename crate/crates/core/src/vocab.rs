//! Extended CTC vocabulary: transcription tokens, reserved placeholder tokens
//! and the blank, plus the registry that binds placeholders to event tags.
//!
//! Token ids are laid out as `[0, L)` transcription, `[L, L + D)`
//! placeholders and `L + D` blank. Placeholders carry the auto-generated
//! surface `<unused_k>` until a tag is bound to them.

use std::collections::HashMap;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BLANK_SURFACE: &str = "<blank>";
pub const VOCAB_FILE_VERSION: u64 = 1;

/// Default sizing: 624 transcription tokens and 400 placeholders.
pub const DEFAULT_TRANSCRIPTION_COUNT: usize = 624;
pub const DEFAULT_PLACEHOLDER_COUNT: usize = 400;

pub fn placeholder_surface(k: usize) -> String {
    format!("<unused_{k}>")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Transcription,
    Placeholder,
    Blank,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
    n_transcription: usize,
    n_placeholder: usize,
}

fn check_surface(surface: &str) -> Result<()> {
    if surface.is_empty() {
        return Err(Error::InvalidToken("empty surface".into()));
    }
    if surface.chars().any(char::is_whitespace) {
        return Err(Error::InvalidToken(format!(
            "surface `{surface}` contains whitespace"
        )));
    }
    Ok(())
}

impl Vocabulary {
    /// Builds a vocabulary from transcription surfaces, appending
    /// `placeholder_count` placeholders and a final blank.
    pub fn build<S: AsRef<str>>(transcription: &[S], placeholder_count: usize) -> Result<Self> {
        if transcription.is_empty() {
            return Err(Error::InvalidToken(
                "vocabulary needs at least one transcription token".into(),
            ));
        }
        let mut surfaces = Vec::with_capacity(transcription.len() + placeholder_count + 1);
        let mut index = HashMap::with_capacity(surfaces.capacity());
        let generated = (0..placeholder_count)
            .map(placeholder_surface)
            .chain(std::iter::once(BLANK_SURFACE.to_string()));
        for surface in transcription
            .iter()
            .map(|s| s.as_ref().to_string())
            .chain(generated)
        {
            check_surface(&surface)?;
            if index.insert(surface.clone(), surfaces.len()).is_some() {
                return Err(Error::DuplicateToken(surface));
            }
            surfaces.push(surface);
        }
        Ok(Vocabulary {
            surfaces,
            index,
            n_transcription: transcription.len(),
            n_placeholder: placeholder_count,
        })
    }

    pub fn transcription_count(&self) -> usize {
        self.n_transcription
    }

    pub fn placeholder_count(&self) -> usize {
        self.n_placeholder
    }

    /// `L + D + 1`, the width of an emission row.
    pub fn total(&self) -> usize {
        self.surfaces.len()
    }

    pub fn blank_id(&self) -> TokenId {
        self.surfaces.len() - 1
    }

    pub fn role(&self, id: TokenId) -> Option<Role> {
        if id < self.n_transcription {
            Some(Role::Transcription)
        } else if id < self.n_transcription + self.n_placeholder {
            Some(Role::Placeholder)
        } else if id == self.blank_id() {
            Some(Role::Blank)
        } else {
            None
        }
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id).map(String::as_str)
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn placeholder_ids(&self) -> std::ops::Range<TokenId> {
        self.n_transcription..self.n_transcription + self.n_placeholder
    }

    pub fn transcription_surfaces(&self) -> &[String] {
        &self.surfaces[..self.n_transcription]
    }
}

/// Semantics carried by a bound placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TagKind {
    Intent,
    EntityBegin(String),
    EntityEnd,
    SpeakerChange,
}

impl TagKind {
    fn kind_name(&self) -> &'static str {
        match self {
            TagKind::Intent => "intent",
            TagKind::EntityBegin(_) => "entity_begin",
            TagKind::EntityEnd => "entity_end",
            TagKind::SpeakerChange => "speaker_change",
        }
    }

    fn from_parts(kind: &str, entity_type: Option<&str>) -> Result<Self> {
        match (kind, entity_type) {
            ("intent", None) => Ok(TagKind::Intent),
            ("entity_begin", Some(t)) if !t.is_empty() => Ok(TagKind::EntityBegin(t.to_string())),
            ("entity_end", None) => Ok(TagKind::EntityEnd),
            ("speaker_change", None) => Ok(TagKind::SpeakerChange),
            _ => Err(Error::Format(format!(
                "invalid tag kind `{kind}` with entity type {entity_type:?}"
            ))),
        }
    }
}

/// Name of a tag with its delimiters removed: `@CALENDER_SET@` -> `CALENDER_SET`.
pub fn tag_name(surface: &str) -> &str {
    let trimmed = surface.trim_matches(|c| c == '@' || c == '!');
    if trimmed.is_empty() {
        surface
    } else {
        trimmed
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagBinding {
    pub surface: String,
    pub token_id: TokenId,
    pub kind: TagKind,
}

/// Bindings from tag surfaces to placeholder tokens, in assignment order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagRegistry {
    bindings: Vec<TagBinding>,
    by_surface: HashMap<String, usize>,
    by_id: HashMap<TokenId, usize>,
}

impl TagRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns a new registry with `surface` bound to the lowest-id free
    /// placeholder.
    pub fn assign(&self, vocab: &Vocabulary, surface: &str, kind: TagKind) -> Result<TagRegistry> {
        let mut next = self.clone();
        next.bind_lowest(vocab, surface, kind)?;
        Ok(next)
    }

    fn bind_lowest(&mut self, vocab: &Vocabulary, surface: &str, kind: TagKind) -> Result<TokenId> {
        let id = vocab
            .placeholder_ids()
            .find(|id| !self.by_id.contains_key(id))
            .ok_or_else(|| Error::NoFreePlaceholder(surface.to_string()))?;
        self.bind_at(vocab, surface, kind, id)?;
        Ok(id)
    }

    fn bind_at(&mut self, vocab: &Vocabulary, surface: &str, kind: TagKind, id: TokenId) -> Result<()> {
        check_surface(surface)?;
        if vocab.role(id) != Some(Role::Placeholder) {
            return Err(Error::InvalidToken(format!(
                "tag `{surface}` must bind a placeholder, token {id} is not one"
            )));
        }
        if self.by_surface.contains_key(surface) {
            return Err(Error::DuplicateTag(surface.to_string()));
        }
        if self.by_id.contains_key(&id) {
            return Err(Error::InvalidToken(format!("token {id} is bound twice")));
        }
        if let Some(vid) = vocab.id(surface) {
            if vocab.role(vid) != Some(Role::Placeholder) || vid != id {
                return Err(Error::DuplicateToken(surface.to_string()));
            }
        }
        if kind == TagKind::EntityEnd {
            if let Some(existing) = self.end_tag() {
                return Err(Error::DuplicateEndTag {
                    existing: existing.surface.clone(),
                    requested: surface.to_string(),
                });
            }
        }
        let slot = self.bindings.len();
        self.by_surface.insert(surface.to_string(), slot);
        self.by_id.insert(id, slot);
        self.bindings.push(TagBinding {
            surface: surface.to_string(),
            token_id: id,
            kind,
        });
        Ok(())
    }

    pub fn bindings(&self) -> &[TagBinding] {
        &self.bindings
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }

    pub fn by_surface(&self, surface: &str) -> Option<&TagBinding> {
        self.by_surface.get(surface).map(|&i| &self.bindings[i])
    }

    pub fn by_id(&self, id: TokenId) -> Option<&TagBinding> {
        self.by_id.get(&id).map(|&i| &self.bindings[i])
    }

    pub fn end_tag(&self) -> Option<&TagBinding> {
        self.bindings.iter().find(|b| b.kind == TagKind::EntityEnd)
    }

    pub fn speaker_change_tag(&self) -> Option<&TagBinding> {
        self.bindings.iter().find(|b| b.kind == TagKind::SpeakerChange)
    }

    pub fn intent_tag(&self, name: &str) -> Option<&TagBinding> {
        self.bindings
            .iter()
            .find(|b| b.kind == TagKind::Intent && tag_name(&b.surface) == name)
    }

    pub fn entity_begin_tag(&self, entity_type: &str) -> Option<&TagBinding> {
        self.bindings
            .iter()
            .find(|b| matches!(&b.kind, TagKind::EntityBegin(t) if t == entity_type))
    }

    pub fn is_tag(&self, id: TokenId) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Registry document: `{bindings: [...], version}` with sorted keys.
    pub fn to_json_string(&self) -> String {
        let bindings: Vec<Value> = self
            .bindings
            .iter()
            .map(|b| {
                let mut obj = Map::new();
                obj.insert("kind".into(), json!(b.kind.kind_name()));
                if let TagKind::EntityBegin(t) = &b.kind {
                    obj.insert("entity_type".into(), json!(t));
                }
                obj.insert("surface".into(), json!(b.surface));
                obj.insert("token_id".into(), json!(b.token_id));
                Value::Object(obj)
            })
            .collect();
        let doc = json!({ "bindings": bindings, "version": VOCAB_FILE_VERSION });
        crate::formats::json_document(&doc)
    }

    pub fn from_json_str(vocab: &Vocabulary, text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Binding {
            surface: String,
            token_id: TokenId,
            kind: String,
            entity_type: Option<String>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            version: u64,
            bindings: Vec<Binding>,
        }
        let doc: Doc = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if doc.version != VOCAB_FILE_VERSION {
            return Err(Error::UnsupportedVersion(doc.version as u32));
        }
        let mut registry = TagRegistry::new();
        for b in doc.bindings {
            let kind = TagKind::from_parts(&b.kind, b.entity_type.as_deref())?;
            registry.bind_at(vocab, &b.surface, kind, b.token_id)?;
        }
        Ok(registry)
    }

    pub fn read(vocab: &Vocabulary, path: &FsPath) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(vocab, &text)
    }

    pub fn write(&self, path: &FsPath) -> Result<()> {
        std::fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }

    /// Hex SHA-256 of the canonical registry document.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json_string().as_bytes()))
    }
}

pub fn build_vocab<S: AsRef<str>>(transcription: &[S], placeholder_count: usize) -> Result<Vocabulary> {
    Vocabulary::build(transcription, placeholder_count)
}

pub fn assign_tag(
    vocab: &Vocabulary,
    registry: &TagRegistry,
    tag_surface: &str,
    kind: TagKind,
) -> Result<TagRegistry> {
    registry.assign(vocab, tag_surface, kind)
}

/// Maps whitespace-separated words and tags to token ids.
pub fn encode_tagged_text(vocab: &Vocabulary, registry: &TagRegistry, text: &str) -> Result<Vec<TokenId>> {
    text.split_whitespace()
        .map(|tok| {
            if let Some(b) = registry.by_surface(tok) {
                return Ok(b.token_id);
            }
            match vocab.id(tok) {
                Some(id) if vocab.role(id) != Some(Role::Blank) => Ok(id),
                _ => Err(Error::UnknownToken(tok.to_string())),
            }
        })
        .collect()
}

pub fn decode_tokens(vocab: &Vocabulary, registry: &TagRegistry, ids: &[TokenId]) -> Result<String> {
    let mut out = Vec::with_capacity(ids.len());
    for (pos, &id) in ids.iter().enumerate() {
        match vocab.role(id) {
            None => return Err(Error::UnknownToken(format!("id {id}"))),
            Some(Role::Blank) => return Err(Error::BlankInLabelSequence(pos)),
            Some(_) => {}
        }
        let surface = match registry.by_id(id) {
            Some(b) => b.surface.as_str(),
            None => vocab.surface(id).expect("id checked above"),
        };
        out.push(surface);
    }
    Ok(out.join(" "))
}

/// Vocab document: tokens in id order with the tag bindings inlined.
pub fn vocab_to_json_string(vocab: &Vocabulary, registry: &TagRegistry) -> String {
    let tokens: Vec<Value> = (0..vocab.total())
        .map(|id| {
            let role = vocab.role(id).expect("in range");
            let mut obj = Map::new();
            obj.insert("role".into(), serde_json::to_value(role).expect("role serializes"));
            match registry.by_id(id) {
                Some(b) => {
                    obj.insert("surface".into(), json!(b.surface));
                    obj.insert("tag_kind".into(), json!(b.kind.kind_name()));
                    if let TagKind::EntityBegin(t) = &b.kind {
                        obj.insert("entity_type".into(), json!(t));
                    }
                }
                None => {
                    obj.insert("surface".into(), json!(vocab.surface(id).expect("in range")));
                }
            }
            Value::Object(obj)
        })
        .collect();
    let doc = json!({
        "D": vocab.placeholder_count(),
        "L": vocab.transcription_count(),
        "blank_id": vocab.blank_id(),
        "tokens": tokens,
        "version": VOCAB_FILE_VERSION,
    });
    crate::formats::json_document(&doc)
}

pub fn vocab_from_json_str(text: &str) -> Result<(Vocabulary, TagRegistry)> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Token {
        surface: String,
        role: Role,
        tag_kind: Option<String>,
        entity_type: Option<String>,
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Doc {
        version: u64,
        #[serde(rename = "L")]
        l: usize,
        #[serde(rename = "D")]
        d: usize,
        blank_id: TokenId,
        tokens: Vec<Token>,
    }
    let doc: Doc = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if doc.version != VOCAB_FILE_VERSION {
        return Err(Error::UnsupportedVersion(doc.version as u32));
    }
    if doc.tokens.len() != doc.l + doc.d + 1 || doc.blank_id != doc.l + doc.d {
        return Err(Error::Format(format!(
            "token count {} inconsistent with L={} D={} blank_id={}",
            doc.tokens.len(),
            doc.l,
            doc.d,
            doc.blank_id
        )));
    }
    let mut words = Vec::with_capacity(doc.l);
    let mut tags = Vec::new();
    for (id, tok) in doc.tokens.iter().enumerate() {
        let expected = if id < doc.l {
            Role::Transcription
        } else if id < doc.l + doc.d {
            Role::Placeholder
        } else {
            Role::Blank
        };
        if tok.role != expected {
            return Err(Error::Format(format!(
                "token {id} has role {:?}, expected {expected:?}",
                tok.role
            )));
        }
        match (expected, &tok.tag_kind) {
            (Role::Transcription, None) => words.push(tok.surface.as_str()),
            (Role::Placeholder, Some(kind)) => {
                tags.push((id, &tok.surface, TagKind::from_parts(kind, tok.entity_type.as_deref())?))
            }
            (Role::Placeholder, None) if tok.surface == placeholder_surface(id - doc.l) => {}
            (Role::Blank, None) if tok.surface == BLANK_SURFACE => {}
            _ => {
                return Err(Error::Format(format!(
                    "token {id} (`{}`) is malformed",
                    tok.surface
                )))
            }
        }
    }
    let vocab = Vocabulary::build(&words, doc.d)?;
    let mut registry = TagRegistry::new();
    for (id, surface, kind) in tags {
        registry.bind_at(&vocab, surface, kind, id)?;
    }
    Ok((vocab, registry))
}

pub fn read_vocab(path: &FsPath) -> Result<(Vocabulary, TagRegistry)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    vocab_from_json_str(&text)
}

pub fn write_vocab(path: &FsPath, vocab: &Vocabulary, registry: &TagRegistry) -> Result<()> {
    std::fs::write(path, vocab_to_json_string(vocab, registry)).map_err(|e| Error::io(path, e))
}
