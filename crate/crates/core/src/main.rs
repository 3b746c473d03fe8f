//! `tagctc` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

use tagctc::decoder::{emit_timeline, greedy_decode, timeline_tsv};
use tagctc::error::{Error, Result};
use tagctc::eval::evaluate;
use tagctc::formats::{self, json_document, EmissionKind, STORED_PROB_TOLERANCE};
use tagctc::synth::{
    gen_corpus, load_corpus, manifest_line, read_manifest, train, write_corpus, ManifestRecord, Span,
    Supervision, SynthConfig, ToyModel, TrainConfig, SYNTH_PLACEHOLDER_COUNT,
};
use tagctc::ctc::EmissionMatrix;
use tagctc::tag_parser::{parse, StructuredTranscript};
use tagctc::vocab::{decode_tokens, encode_tagged_text, read_vocab, write_vocab, TagRegistry, Vocabulary};

#[derive(Parser)]
#[command(name = "tagctc", version, about = "CTC transcription with inline event tags")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic tagged corpus with features.
    GenData(GenDataArgs),
    /// Train the toy frame classifier with CTC loss.
    Train(TrainArgs),
    /// Greedy-decode features or emission files into tagged transcripts.
    Decode(DecodeArgs),
    /// Score hypothesis transcripts against references.
    Eval(EvalArgs),
    /// Per-frame argmax timeline as TSV.
    Timeline(TimelineArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON document of option values; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct VocabArgs {
    /// Vocab document (tag bindings included).
    #[arg(long)]
    vocab: PathBuf,
    /// Registry document overriding the bindings in the vocab file.
    #[arg(long)]
    registry: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Existing vocab to generate against; built from the grammar if absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, requires = "vocab")]
    registry: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_heldout: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    min_frames_per_token: Option<usize>,
    #[arg(long)]
    max_frames_per_token: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    speaker_change_probability: Option<f64>,
    #[arg(long)]
    placeholders: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    vocab: VocabArgs,
    /// Training manifest.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    context: Option<usize>,
    /// Gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Train on tag-stripped targets (baseline).
    #[arg(long)]
    transcription_only: bool,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    vocab: VocabArgs,
    /// Manifest whose feature files are run through `--model`.
    #[arg(long, requires = "model", conflicts_with = "emissions")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Emission files to decode directly.
    #[arg(long, num_args = 1.., required_unless_present = "manifest")]
    emissions: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    vocab: VocabArgs,
    /// Reference manifest.
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypothesis manifest.
    #[arg(long = "hyp")]
    hypothesis: PathBuf,
}

#[derive(Args)]
struct TimelineArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    vocab: VocabArgs,
    #[arg(long, conflicts_with_all = ["features", "model"], required_unless_present = "features")]
    emissions: Option<PathBuf>,
    #[arg(long, requires = "model")]
    features: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
}

/// Values from `--config`, consumed key by key so leftovers can be rejected.
struct ConfigDoc {
    path: Option<PathBuf>,
    values: Map<String, Value>,
}

impl ConfigDoc {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigDoc { path: None, values: Map::new() });
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let values = match serde_json::from_str(&text).map_err(|e| Error::json(path, e))? {
            Value::Object(map) => map,
            _ => return Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
        };
        Ok(ConfigDoc { path: Some(path.to_path_buf()), values })
    }

    fn pick<T: DeserializeOwned>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let from_doc = match self.values.remove(key) {
            Some(v) => Some(serde_json::from_value(v).map_err(|e| {
                Error::Config(format!("config key `{key}`: {e}"))
            })?),
            None => None,
        };
        Ok(flag.or(from_doc).unwrap_or(default))
    }

    fn finish(self) -> Result<()> {
        match self.values.keys().next() {
            Some(k) => Err(Error::Config(format!(
                "{}: unknown option `{k}`",
                self.path.as_deref().unwrap_or(Path::new("config")).display()
            ))),
            None => Ok(()),
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_echo(out: &Path, command: &str, options: Value) -> Result<()> {
    let doc = json!({
        "command": command,
        "options": options,
        "tool_version": env!("CARGO_PKG_VERSION"),
    });
    write_text(&out.join("config.json"), &json_document(&doc))
}

fn load_vocab(args: &VocabArgs) -> Result<(Vocabulary, TagRegistry)> {
    let (vocab, embedded) = read_vocab(&args.vocab)?;
    let registry = match &args.registry {
        Some(path) => TagRegistry::read(&vocab, path)?,
        None => embedded,
    };
    Ok((vocab, registry))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let mut doc = ConfigDoc::load(args.common.config.as_deref())?;
    let base = SynthConfig::default();
    let seed = doc.pick("seed", args.seed, base.seed)?;
    let n_train = doc.pick("n_train", args.n_train, 2000)?;
    let n_heldout = doc.pick("n_heldout", args.n_heldout, 200)?;
    let feature_dim = doc.pick("feature_dim", args.feature_dim, base.feature_dim)?;
    let min_fpt = doc.pick("min_frames_per_token", args.min_frames_per_token, base.frames_per_token.min)?;
    let max_fpt = doc.pick("max_frames_per_token", args.max_frames_per_token, base.frames_per_token.max)?;
    let noise_sigma = doc.pick("noise_sigma", args.noise_sigma, base.noise_sigma)?;
    let spk = doc.pick(
        "speaker_change_probability",
        args.speaker_change_probability,
        base.speaker_change_probability,
    )?;
    let placeholders = doc.pick("placeholders", args.placeholders, SYNTH_PLACEHOLDER_COUNT)?;
    doc.finish()?;

    let cfg = SynthConfig {
        seed,
        n_utterances: n_train.max(1),
        feature_dim,
        frames_per_token: Span::new(min_fpt, max_fpt),
        noise_sigma,
        speaker_change_probability: spk,
        ..base
    };
    let (vocab, registry) = match &args.vocab {
        Some(v) => load_vocab(&VocabArgs { vocab: v.clone(), registry: args.registry.clone() })?,
        None => cfg.build_vocab(placeholders)?,
    };
    let out = &args.common.out;
    ensure_dir(out)?;
    write_vocab(&out.join("vocab.json"), &vocab, &registry)?;
    registry.write(&out.join("registry.json"))?;
    let mut splits = Vec::new();
    for (split, n) in [("train", n_train), ("heldout", n_heldout)] {
        if n == 0 {
            continue;
        }
        let split_cfg = SynthConfig { split: split.into(), n_utterances: n, ..cfg.clone() };
        let utterances = gen_corpus(&split_cfg, &vocab, &registry)?;
        write_corpus(&utterances, out, &format!("{split}.jsonl"))?;
        splits.push(split);
    }
    write_echo(
        out,
        "gen-data",
        json!({
            "n_heldout": n_heldout,
            "n_train": n_train,
            "placeholders": vocab.placeholder_count(),
            "registry_hash": registry.fingerprint(),
            "splits": splits,
            "synth": serde_json::to_value(&cfg).expect("config serializes"),
        }),
    )
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut doc = ConfigDoc::load(args.common.config.as_deref())?;
    let base = TrainConfig::default();
    let clip = doc.pick("clip_norm", args.clip_norm, base.clip_norm.unwrap_or(0.0))?;
    let transcription_only = doc.pick("transcription_only", Some(args.transcription_only).filter(|&b| b), false)?;
    let cfg = TrainConfig {
        lr: doc.pick("lr", args.lr, base.lr)?,
        momentum: doc.pick("momentum", args.momentum, base.momentum)?,
        epochs: doc.pick("epochs", args.epochs, base.epochs)?,
        batch: doc.pick("batch", args.batch, base.batch)?,
        seed: doc.pick("seed", args.seed, base.seed)?,
        hidden: doc.pick("hidden", args.hidden, base.hidden)?,
        context: doc.pick("context", args.context, base.context)?,
        clip_norm: (clip > 0.0).then_some(clip),
        supervision: if transcription_only { Supervision::TranscriptionOnly } else { Supervision::Tagged },
    };
    doc.finish()?;
    let (vocab, registry) = load_vocab(&args.vocab)?;
    let corpus = load_corpus(&args.manifest)?;
    let (model, log) = train(&corpus, &vocab, &registry, &cfg)?;
    let out = &args.common.out;
    ensure_dir(out)?;
    model.write(&out.join("model.json"))?;
    let mut tsv = String::from("epoch\tloss\n");
    tsv.push_str(&format!("init\t{:.6}\n", log.initial_loss));
    for (i, loss) in log.epoch_losses.iter().enumerate() {
        tsv.push_str(&format!("{}\t{loss:.6}\n", i + 1));
    }
    write_text(&out.join("loss_log.tsv"), &tsv)?;
    write_echo(
        out,
        "train",
        json!({
            "manifest": path_str(&args.manifest),
            "registry_hash": registry.fingerprint(),
            "skipped": log.skipped,
            "train": serde_json::to_value(&cfg).expect("config serializes"),
            "vocab": path_str(&args.vocab.vocab),
        }),
    )
}

struct Decoded {
    record: ManifestRecord,
    transcript: StructuredTranscript,
}

fn decode_emissions(
    id: String,
    source: String,
    e: &EmissionMatrix,
    vocab: &Vocabulary,
    registry: &TagRegistry,
) -> Result<Decoded> {
    if e.width() != vocab.total() {
        return Err(Error::Shape(format!(
            "{source}: emission width {} does not match vocabulary size {}",
            e.width(),
            vocab.total()
        )));
    }
    let d = greedy_decode(e);
    let tagged_text = decode_tokens(vocab, registry, d.labels.as_slice())?;
    let transcript = parse(d.labels.as_slice(), vocab, registry, Some(&d.frame_spans))?;
    Ok(Decoded {
        record: ManifestRecord { id, features: source, tagged_text },
        transcript,
    })
}

fn load_emission_matrix(path: &Path) -> Result<EmissionMatrix> {
    match formats::read_emission_file(path)? {
        (EmissionKind::Probabilities, data) => EmissionMatrix::from_stored(data, STORED_PROB_TOLERANCE),
        (EmissionKind::Logits, data) => EmissionMatrix::from_logits(data.view()),
    }
}

fn transcript_line(id: &str, t: &StructuredTranscript) -> String {
    let mut value = serde_json::to_value(t).expect("transcript serializes");
    value
        .as_object_mut()
        .expect("struct serializes to an object")
        .insert("id".into(), json!(id));
    let mut line = serde_json::to_string(&value).expect("value serializes");
    line.push('\n');
    line
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    ConfigDoc::load(args.common.config.as_deref())?.finish()?;
    let (vocab, registry) = load_vocab(&args.vocab)?;
    let mut decoded = Vec::new();
    if let Some(manifest) = &args.manifest {
        let model = ToyModel::read(args.model.as_deref().expect("clap requires --model"))?;
        let base = manifest.parent().unwrap_or(Path::new("."));
        for rec in read_manifest(manifest)? {
            let features = formats::read_feature_file(&base.join(&rec.features))?;
            let e = model.predict(features.view())?;
            decoded.push(decode_emissions(rec.id, rec.features, &e, &vocab, &registry)?);
        }
    } else {
        for path in &args.emissions {
            let e = load_emission_matrix(path)?;
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path_str(path));
            decoded.push(decode_emissions(id, path_str(path), &e, &vocab, &registry)?);
        }
    }
    let out = &args.common.out;
    ensure_dir(out)?;
    let hyp: String = decoded.iter().map(|d| manifest_line(&d.record)).collect();
    write_text(&out.join("hyp.jsonl"), &hyp)?;
    let transcripts: String = decoded.iter().map(|d| transcript_line(&d.record.id, &d.transcript)).collect();
    write_text(&out.join("transcripts.jsonl"), &transcripts)?;
    write_echo(
        out,
        "decode",
        json!({
            "emissions": args.emissions.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
            "manifest": args.manifest.as_deref().map(path_str),
            "model": args.model.as_deref().map(path_str),
            "registry_hash": registry.fingerprint(),
            "utterances": decoded.len(),
            "vocab": path_str(&args.vocab.vocab),
        }),
    )
}

fn parse_records(records: &[ManifestRecord], vocab: &Vocabulary, registry: &TagRegistry) -> Result<Vec<StructuredTranscript>> {
    records
        .iter()
        .map(|r| parse(&encode_tagged_text(vocab, registry, &r.tagged_text)?, vocab, registry, None))
        .collect()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    ConfigDoc::load(args.common.config.as_deref())?.finish()?;
    let (vocab, registry) = load_vocab(&args.vocab)?;
    let reference = read_manifest(&args.reference)?;
    let hyp_records = read_manifest(&args.hypothesis)?;
    let mut by_id: BTreeMap<&str, &ManifestRecord> = hyp_records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut hypothesis = Vec::with_capacity(reference.len());
    for r in &reference {
        match by_id.remove(r.id.as_str()) {
            Some(h) => hypothesis.push(h.clone()),
            None => {
                return Err(Error::Alignment { reference: reference.len(), hypothesis: hyp_records.len() })
            }
        }
    }
    if !by_id.is_empty() {
        return Err(Error::Alignment { reference: reference.len(), hypothesis: hyp_records.len() });
    }
    let report = evaluate(
        &parse_records(&reference, &vocab, &registry)?,
        &parse_records(&hypothesis, &vocab, &registry)?,
    )?;
    let out = &args.common.out;
    ensure_dir(out)?;
    let echo = json!({
        "corpus_ids": reference.iter().map(|r| r.id.clone()).collect::<Vec<_>>(),
        "hyp": path_str(&args.hypothesis),
        "ref": path_str(&args.reference),
        "registry_hash": registry.fingerprint(),
        "vocab": path_str(&args.vocab.vocab),
    });
    let mut doc = report.to_value();
    doc.as_object_mut().expect("report is an object").insert("config".into(), echo.clone());
    write_text(&out.join("report.json"), &json_document(&doc))?;
    write_echo(out, "eval", echo)
}

fn cmd_timeline(args: TimelineArgs) -> Result<()> {
    ConfigDoc::load(args.common.config.as_deref())?.finish()?;
    let (vocab, registry) = load_vocab(&args.vocab)?;
    let e = match (&args.emissions, &args.features, &args.model) {
        (Some(path), _, _) => load_emission_matrix(path)?,
        (None, Some(features), Some(model)) => {
            let x = formats::read_feature_file(features)?;
            ToyModel::read(model)?.predict(x.view())?
        }
        _ => unreachable!("clap enforces an input"),
    };
    if e.width() != vocab.total() {
        return Err(Error::Shape(format!(
            "emission width {} does not match vocabulary size {}",
            e.width(),
            vocab.total()
        )));
    }
    let rows = emit_timeline(&e, &vocab, &registry);
    let out = &args.common.out;
    ensure_dir(out)?;
    write_text(&out.join("timeline.tsv"), &timeline_tsv(&rows))?;
    write_echo(
        out,
        "timeline",
        json!({
            "emissions": args.emissions.as_deref().map(path_str),
            "features": args.features.as_deref().map(path_str),
            "frames": rows.len(),
            "model": args.model.as_deref().map(path_str),
            "registry_hash": registry.fingerprint(),
            "vocab": path_str(&args.vocab.vocab),
        }),
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Timeline(a) => cmd_timeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
