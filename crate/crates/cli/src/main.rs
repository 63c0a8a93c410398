//! `cpcl`: featurize audio, clean comments, build vocabularies, train,
//! evaluate, run the branch ablation and verify gradients.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cpcl_core::audio::{compute_mfcc, lift_audio, read_wav, LiftParams, MfccConfig};
use cpcl_core::comments::{clean_comments_with_report, segment, Vocabulary};
use cpcl_core::evaluation::{compute_metrics, format_metrics_table, run_ablation};
use cpcl_core::gradcheck::grad_check_all;
use cpcl_core::ingest::{is_wav, load_manifest, read_comments, write_comments, write_feature_file};
use cpcl_core::model::{prepare_sample, ModelParams, Resources};
use cpcl_core::sentiment::{HashingEmbedder, SkgStore};
use cpcl_core::synthetic::{generate, write_corpus};
use cpcl_core::training::{log_to_jsonl, predict_labels, train, vocab_from_samples, with_thread_cap, Dataset};
use cpcl_core::{Error, RunConfig};
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "cpcl", version, about = "Multimodal condescending-language detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; every field has a default
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run a single seed instead of the configured list
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (overrides paths.out_dir)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// WAV file or manifest to audio feature files (MFCC through an identity lift)
    Featurize { input: PathBuf },
    /// Clean a comments JSON Lines file and print drop counts
    CleanComments { input: PathBuf, output: PathBuf },
    /// Build a vocabulary from comment files, or from the manifest when none are given
    BuildVocab { inputs: Vec<PathBuf> },
    /// Train over the configured seeds and write snapshots and epoch logs
    Train,
    /// Score a predictions file, or a saved model on the manifest
    Eval,
    /// Train and evaluate the four branch-ablation variants
    Ablate,
    /// Finite-difference check of every differentiable operation
    Gradcheck,
    /// Write the synthetic corpus and a config that points at it
    Synth,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numeric(String),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Verification(_) => 4,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Usage(e.to_string()))
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self, Failure> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.train.seeds = vec![seed];
        }
        cfg.check_inputs()?;
        let out = cli
            .out
            .clone()
            .or_else(|| cfg.paths.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("cpcl-out"));
        fs::create_dir_all(&out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
        Ok(Self { cfg, out })
    }
}

fn featurize_wav(wav: &Path, mfcc: &MfccConfig, lift: &LiftParams, out: &Path) -> Result<PathBuf, Failure> {
    let (signal, rate) = read_wav(wav)?;
    let cfg = MfccConfig { sample_rate: rate as f64, ..mfcc.clone() };
    let seq = lift_audio(&compute_mfcc(&signal, &cfg)?, lift)?;
    let stem = wav.file_stem().and_then(|s| s.to_str()).unwrap_or("audio");
    let dest = out.join(format!("{stem}.audio.bin"));
    write_feature_file(&seq, &dest)?;
    println!("{} -> {} ({} x {})", wav.display(), dest.display(), seq.len(), seq.dim());
    Ok(dest)
}

fn cmd_featurize(ctx: &Ctx, input: &Path) -> CmdResult {
    if !input.exists() {
        return Err(Failure::Usage(format!("{}: no such file", input.display())));
    }
    let lift = LiftParams::identity(ctx.cfg.mfcc.n_mfcc, ctx.cfg.model.d);
    write(&ctx.out.join("lift_identity.json"), to_json(&lift)?)?;
    if is_wav(input) {
        featurize_wav(input, &ctx.cfg.mfcc, &lift, &ctx.out)?;
        return Ok(());
    }
    for d in load_manifest(input)? {
        if is_wav(&d.audio_feat_or_wav) {
            featurize_wav(&d.audio_feat_or_wav, &ctx.cfg.mfcc, &lift, &ctx.out)?;
        }
    }
    Ok(())
}

fn cmd_clean(input: &Path, output: &Path) -> CmdResult {
    let raw = read_comments(input)?;
    let (kept, report) = clean_comments_with_report(&raw);
    write_comments(output, &kept)?;
    println!("{}", serde_json::to_string(&report).map_err(|e| Failure::Usage(e.to_string()))?);
    Ok(())
}

fn cmd_build_vocab(ctx: &Ctx, inputs: &[PathBuf]) -> CmdResult {
    let m = &ctx.cfg.model;
    let vocab = if inputs.is_empty() {
        let (samples, _) = ctx.cfg.load_data()?;
        vocab_from_samples(&samples.iter().collect::<Vec<_>>(), m)?
    } else {
        let mut corpus = Vec::new();
        for p in inputs {
            let (kept, _) = clean_comments_with_report(&read_comments(p)?);
            corpus.extend(kept.iter().filter_map(|c| segment(&c.text).ok()));
        }
        cpcl_core::comments::build_vocab(&corpus, m.vocab_min_freq, m.vocab_max_size)?
    };
    let dest = ctx.cfg.paths.vocab.clone().unwrap_or_else(|| ctx.out.join("vocab.txt"));
    vocab.save(&dest)?;
    println!("{} tokens -> {}", vocab.len(), dest.display());
    Ok(())
}

fn cmd_train(ctx: &Ctx) -> CmdResult {
    let (samples, triples) = ctx.cfg.load_data()?;
    let embedder = HashingEmbedder { dim: ctx.cfg.model.sentiment_dim };
    let store = SkgStore::from_triples(triples, &embedder);
    let data = Dataset { samples: &samples, store: &store, embedder: &embedder };
    let outcome = with_thread_cap(|| train(&data, &ctx.cfg.model, &ctx.cfg.train, Default::default()))?;
    for run in &outcome.runs {
        let s = run.seed;
        write(&ctx.out.join(format!("params_seed{s}.json")), run.params.to_json()?)?;
        write(&ctx.out.join(format!("log_seed{s}.jsonl")), log_to_jsonl(&run.log)?)?;
        run.vocab.save(ctx.out.join(format!("vocab_seed{s}.txt")))?;
        println!("seed {s}: held-out accuracy {:.4}", run.metrics.accuracy);
    }
    let per_seed: Vec<_> = outcome.runs.iter().map(|r| (r.seed, r.metrics)).collect();
    let summary = serde_json::json!({ "mean": outcome.mean, "per_seed": per_seed });
    write(&ctx.out.join("summary.json"), to_json(&summary)?)?;
    print!("{}", format_metrics_table(&[("Mean over seeds".to_string(), outcome.mean)]));
    Ok(())
}

#[derive(Deserialize)]
struct PredictionLine {
    #[serde(default)]
    id: Option<String>,
    pred: u8,
    label: u8,
}

fn read_predictions(path: &Path) -> Result<(Vec<u8>, Vec<u8>), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let (mut preds, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: PredictionLine = serde_json::from_str(line)
            .map_err(|e| Failure::Usage(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let _ = p.id;
        preds.push(p.pred);
        labels.push(p.label);
    }
    Ok((preds, labels))
}

fn cmd_eval(ctx: &Ctx) -> CmdResult {
    let paths = &ctx.cfg.paths;
    let (preds, labels) = match (&paths.predictions, &paths.params, &paths.vocab) {
        (Some(p), _, _) => read_predictions(p)?,
        (None, Some(params), Some(vocab)) => {
            let text = fs::read_to_string(params).map_err(|e| Failure::Usage(format!("{}: {e}", params.display())))?;
            let params = ModelParams::from_json(&text)?;
            let vocab = Vocabulary::load(vocab)?;
            let (samples, triples) = ctx.cfg.load_data()?;
            let embedder = HashingEmbedder { dim: ctx.cfg.model.sentiment_dim };
            let store = SkgStore::from_triples(triples, &embedder);
            let res = Resources { vocab: &vocab, store: &store, embedder: &embedder };
            let prepared = samples
                .iter()
                .map(|s| prepare_sample(s, &ctx.cfg.model, &res))
                .collect::<Result<Vec<_>, _>>()?;
            let preds = predict_labels(&params, &ctx.cfg.model, &prepared, Default::default())?;
            (preds, samples.iter().map(|s| s.label).collect())
        }
        _ => {
            return Err(Failure::Usage(
                "eval needs paths.predictions, or paths.params with paths.vocab".into(),
            ))
        }
    };
    let report = compute_metrics(&preds, &labels)?;
    write(&ctx.out.join("metrics.json"), to_json(&report)?)?;
    print!("{}", format_metrics_table(&[("Model".to_string(), report.summary())]));
    if report.zero_division {
        eprintln!("warning: a metric had a zero denominator and is reported as 0");
    }
    Ok(())
}

fn cmd_ablate(ctx: &Ctx) -> CmdResult {
    let (samples, triples) = ctx.cfg.load_data()?;
    let embedder = HashingEmbedder { dim: ctx.cfg.model.sentiment_dim };
    let store = SkgStore::from_triples(triples, &embedder);
    let data = Dataset { samples: &samples, store: &store, embedder: &embedder };
    let table = with_thread_cap(|| run_ablation(&data, &ctx.cfg.model, &ctx.cfg.train))?;
    write(&ctx.out.join("ablation.json"), to_json(&table)?)?;
    let text = table.to_text();
    write(&ctx.out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(ctx: &Ctx) -> CmdResult {
    let reports = grad_check_all(&ctx.cfg.gradcheck)?;
    write(&ctx.out.join("gradcheck.json"), to_json(&reports)?)?;
    for r in &reports {
        let mark = if r.passed { "ok" } else { "FAIL" };
        println!("{:<18} {:>4}  max rel err {:.3e}  ({})", r.op, mark, r.max_rel_err, r.worst_tensor);
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_synth(ctx: &Ctx) -> CmdResult {
    let mut preset = RunConfig::synthetic_preset();
    let synth = ctx.cfg.synthetic.clone().unwrap_or_else(|| preset.synthetic.clone().unwrap_or_default());
    let corpus = generate(&synth, preset.model.n_mfcc)?;
    write_corpus(&corpus, &ctx.out, synth.sample_rate)?;
    preset.synthetic = None;
    preset.paths.manifest = Some("manifest.jsonl".into());
    preset.paths.skg = Some("skg.tsv".into());
    preset.paths.out_dir = Some("runs".into());
    write(&ctx.out.join("config.json"), to_json(&preset)?)?;
    println!("{} samples -> {}", corpus.samples.len(), ctx.out.display());
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    let ctx = Ctx::new(cli)?;
    match &cli.command {
        Command::Featurize { input } => cmd_featurize(&ctx, input),
        Command::CleanComments { input, output } => cmd_clean(input, output),
        Command::BuildVocab { inputs } => cmd_build_vocab(&ctx, inputs),
        Command::Train => cmd_train(&ctx),
        Command::Eval => cmd_eval(&ctx),
        Command::Ablate => cmd_ablate(&ctx),
        Command::Gradcheck => cmd_gradcheck(&ctx),
        Command::Synth => cmd_synth(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Usage(m) | Failure::Numeric(m) | Failure::Verification(m) => m,
            };
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
