//! `morpheus`: synthesize data, train in stages, evaluate, generate, chat
//! and inspect the persona codebook.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or checkpoint error,
//! 3 numerical failure.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use morpheus::codebook::{InitStrategy, PersonaCodebook};
use morpheus::corpus::{generate_synthetic, load_corpus, write_corpus, IdfTable, SyntheticSpec, Turn};
use morpheus::error::ErrorClass;
use morpheus::inference::{chat_repl, generate, SamplingConfig};
use morpheus::metrics::{evaluate_suite, SuiteConfig};
use morpheus::trainer::{Stage, Trainer, TrainingConfig, TrainingLog};
use morpheus::{MorpheusError, Result};

#[derive(Parser)]
#[command(name = "morpheus", version, about = "Persona codebook dialogue modeling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/valid/test corpus and its manifest.
    Synth(SynthArgs),
    /// Run training stages and write a checkpoint.
    Train(TrainArgs),
    /// Generate persona-free responses for a corpus and score them.
    Eval(EvalArgs),
    /// Generate one response per history line.
    Generate(GenerateArgs),
    /// Interactive conversation on standard input and output.
    Chat(ChatArgs),
    /// Describe the persona codebook of a checkpoint.
    InspectPc(InspectArgs),
}

#[derive(Args)]
struct Common {
    /// Random seed.
    #[arg(long, env = "MORPHEUS_SEED")]
    seed: Option<u64>,
    /// Directory holding train.jsonl, valid.jsonl and test.jsonl.
    #[arg(long, env = "MORPHEUS_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML generator spec; defaults apply to missing keys.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Output directory (defaults to the data directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Sequential,
    Average,
    Em,
}

impl From<InitArg> for InitStrategy {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Random => InitStrategy::Random,
            InitArg::Sequential => InitStrategy::Sequential,
            InitArg::Average => InitStrategy::Average,
            InitArg::Em => InitStrategy::Em,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// TOML training configuration; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Codebook initialization strategy.
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    /// Freeze encoder and decoder during joint training.
    #[arg(long)]
    peft: bool,
    /// Continue from this checkpoint; its configuration is reused.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Training corpus (defaults to <data-dir>/train.jsonl).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training log (defaults to <out>.log.jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to load.
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluation corpus (defaults to <data-dir>/test.jsonl).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Metric report to write.
    #[arg(long)]
    out: PathBuf,
    /// Generated responses (defaults to <out>.outputs.txt).
    #[arg(long)]
    outputs: Option<PathBuf>,
    /// Score only the first samples.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint to load.
    #[arg(long)]
    ckpt: PathBuf,
    /// JSON lines with `history` ([speaker, utterance] pairs) and `responder`.
    #[arg(long)]
    input: PathBuf,
    /// One response per input line.
    #[arg(long)]
    out: PathBuf,
    /// Response length cap (defaults to the checkpoint's configuration).
    #[arg(long)]
    max_tokens: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ChatArgs {
    /// Checkpoint to load.
    #[arg(long)]
    ckpt: PathBuf,
    /// Response length cap (defaults to the checkpoint's configuration).
    #[arg(long)]
    max_tokens: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint to load.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    common: Common,
}

fn usage(msg: impl Into<String>) -> MorpheusError {
    MorpheusError::InvalidArgument(msg.into())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| MorpheusError::io(path, e))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Loads a checkpoint, treating an absent file as a usage error.
fn open_checkpoint(path: &Path) -> Result<Trainer> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Trainer::load_checkpoint(path)
}

fn require_joint(trainer: &Trainer, path: &Path) -> Result<()> {
    match trainer.stage {
        Some(Stage::Joint) => Ok(()),
        other => Err(MorpheusError::StageOrder(format!(
            "{} is tagged {}, a joint checkpoint is required",
            path.display(),
            other.map_or("untrained", Stage::as_str)
        ))),
    }
}

fn sampling(trainer: &Trainer, seed: Option<u64>, max_tokens: Option<usize>) -> Result<SamplingConfig> {
    let mut cfg = SamplingConfig::from_training(&trainer.config, seed.unwrap_or(0));
    if let Some(m) = max_tokens {
        if m == 0 {
            return Err(usage("--max-tokens must be positive"));
        }
        cfg.max_tokens = m;
    }
    Ok(cfg)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| MorpheusError::io(path, e))?;
            toml::from_str::<SyntheticSpec>(&text).map_err(|e| usage(format!("spec: {e}")))?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = args.common.seed {
        spec.seed = seed;
    }
    let corpus = generate_synthetic(&spec)?;
    let dir = args.out.unwrap_or(args.common.data_dir);
    fs::create_dir_all(&dir).map_err(|e| MorpheusError::io(&dir, e))?;
    for (name, samples) in [
        ("train.jsonl", &corpus.train),
        ("valid.jsonl", &corpus.valid),
        ("test.jsonl", &corpus.test),
    ] {
        write_corpus(dir.join(name), samples)?;
    }
    let manifest = json!({
        "seed": spec.seed,
        "roles_count": spec.roles_count,
        "slots": spec.slots.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(),
        "roles": {
            "train": corpus.train_roles,
            "valid": corpus.valid_roles,
            "test": corpus.test_roles,
        },
        "samples": {
            "train": corpus.train.len(),
            "valid": corpus.valid.len(),
            "test": corpus.test.len(),
        },
        "role_attributes": corpus.role_attributes,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_text(&dir.join("manifest.json"), &text)?;
    println!(
        "wrote {} train, {} valid, {} test samples to {}",
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        dir.display()
    );
    Ok(())
}

/// CRC-32 of the encoder and decoder parameters as stored.
fn backbone_hash(trainer: &Trainer) -> String {
    let store = &trainer.model.store;
    let mut h = crc32fast::Hasher::new();
    for id in store.ids() {
        let name = store.name(id);
        if name.starts_with("encoder.") || name.starts_with("decoder.") {
            h.update(name.as_bytes());
            for v in store.get(id).iter() {
                h.update(&(*v as f32).to_le_bytes());
            }
        }
    }
    format!("{:08x}", h.finalize())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let data = args
        .data
        .clone()
        .unwrap_or_else(|| args.common.data_dir.join("train.jsonl"));
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));

    let mut trainer = match &args.resume {
        Some(path) => {
            if args.config.is_some() {
                return Err(usage("--config cannot be combined with --resume; the checkpoint carries its configuration"));
            }
            if args.stage == StageArg::All {
                return Err(usage("--stage all trains from scratch and cannot resume"));
            }
            let mut t = open_checkpoint(path)?;
            if let Some(init) = args.init {
                t.config.init_strategy = init.into();
            }
            if args.peft {
                t.config.peft = true;
            }
            t
        }
        None => {
            let mut config = match &args.config {
                Some(path) => TrainingConfig::load(path)?,
                None => TrainingConfig::default(),
            };
            if let Some(init) = args.init {
                config.init_strategy = init.into();
            }
            if args.peft {
                config.peft = true;
            }
            if let Some(seed) = args.common.seed {
                config.seed = seed;
            }
            config.validate()?;
            match args.stage {
                StageArg::One | StageArg::All => {}
                StageArg::Two => {
                    return Err(MorpheusError::StageOrder(
                        "stage 2 needs a stage-1 checkpoint (pass --resume)".into(),
                    ))
                }
                StageArg::Three => {
                    return Err(MorpheusError::StageOrder(
                        "stage 3 needs stages 1 and 2 (pass --resume with a codebook checkpoint)".into(),
                    ))
                }
            }
            Trainer::from_corpus(config, &load_corpus(&data, None)?)?
        }
    };
    let corpus = load_corpus(&data, None)?;
    trainer.set_log(Some(TrainingLog::open(&log_path)?));
    trainer.log_event(json!({
        "event": "start",
        "stage": match args.stage {
            StageArg::One => "1",
            StageArg::Two => "2",
            StageArg::Three => "3",
            StageArg::All => "all",
        },
        "resume": args.resume.as_ref().map(|p| p.display().to_string()),
        "data": data.display().to_string(),
        "config": serde_json::to_value(&trainer.config).expect("config serializes"),
    }))?;

    let run_stage1 = matches!(args.stage, StageArg::One | StageArg::All);
    let run_stage2 = matches!(args.stage, StageArg::Two | StageArg::All) && trainer.config.prefix;
    let run_stage3 = matches!(args.stage, StageArg::Three | StageArg::All);
    if args.stage == StageArg::Two && !trainer.config.prefix {
        return Err(usage("the unconditioned configuration (prefix = false) has no codebook stage"));
    }

    if run_stage1 {
        if matches!(trainer.stage, Some(Stage::PcInit | Stage::Joint)) {
            return Err(MorpheusError::StageOrder(
                "stage 1 cannot resume from a checkpoint past role awareness".into(),
            ));
        }
        let r = trainer.stage1(&corpus)?;
        if let Some(last) = r.steps.last() {
            println!("stage 1: {} steps, final generation loss {:.4}", r.steps.len(), last.generation);
        } else {
            println!("stage 1: no steps");
        }
    }
    if run_stage2 {
        let r = trainer.stage2(&corpus)?;
        match r.em_iterations {
            Some(it) => println!(
                "stage 2: {} initialization from {} points, {} EM iterations",
                r.strategy, r.points, it
            ),
            None => println!("stage 2: {} initialization from {} points", r.strategy, r.points),
        }
    }
    if run_stage3 {
        if trainer.config.prefix && !matches!(trainer.stage, Some(Stage::PcInit | Stage::Joint)) {
            return Err(MorpheusError::StageOrder(
                "stage 3 needs an initialized codebook (run stage 2 first)".into(),
            ));
        }
        let before = backbone_hash(&trainer);
        let r = trainer.stage3(&corpus)?;
        if trainer.config.peft {
            let after = backbone_hash(&trainer);
            let report = trainer.trainable_report();
            trainer.log_event(json!({
                "event": "peft",
                "trainable_fraction": report.fraction,
                "trainable": report.trainable,
                "total": report.total,
                "frozen_hash_before": before,
                "frozen_hash_after": after,
                "frozen_unchanged": before == after,
            }))?;
            println!(
                "peft: trainable fraction {:.6}, frozen backbone {}",
                report.fraction,
                if before == after { "unchanged" } else { "CHANGED" }
            );
        }
        if let Some(last) = r.steps.last() {
            println!("stage 3: {} steps, final total loss {:.4}", r.steps.len(), last.total);
        } else {
            println!("stage 3: no steps");
        }
    }
    trainer.save_checkpoint(&args.out)?;
    trainer.log_event(json!({
        "event": "checkpoint",
        "path": args.out.display().to_string(),
        "stage": trainer.stage.map(Stage::as_str),
        "step": trainer.step,
    }))?;
    println!(
        "wrote {} ({})",
        args.out.display(),
        trainer.stage.map_or("untrained", Stage::as_str)
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let trainer = open_checkpoint(&args.ckpt)?;
    require_joint(&trainer, &args.ckpt)?;
    let data = args
        .data
        .clone()
        .unwrap_or_else(|| args.common.data_dir.join("test.jsonl"));
    let corpus = load_corpus(&data, args.limit)?;
    if corpus.is_empty() {
        return Err(MorpheusError::EmptyCorpus);
    }
    let seed = args.common.seed.unwrap_or(0);
    let base = sampling(&trainer, Some(seed), None)?;
    let mut outputs = Vec::with_capacity(corpus.len());
    for (i, sample) in corpus.iter().enumerate() {
        // Generation sees the history only; the persona is dropped here.
        let masked = sample.masked();
        let cfg = SamplingConfig {
            seed: seed.wrapping_add(i as u64),
            ..base.clone()
        };
        outputs.push(generate(&trainer.model, &masked.history, &masked.responder_id, &cfg)?.text);
    }
    let references: Vec<String> = corpus.iter().map(|s| s.response.clone()).collect();
    // Personas are read for the consistency score only.
    let personas: Vec<String> = corpus.iter().map(|s| s.persona_sentences.join(" ")).collect();
    let idf = IdfTable::build(&corpus)?;
    let report = evaluate_suite(
        &outputs,
        &references,
        &personas,
        &idf,
        &SuiteConfig {
            self_bleu_seed: seed,
            config_text: trainer.config.to_toml(),
            ..SuiteConfig::default()
        },
    )?;
    let outputs_path = args
        .outputs
        .clone()
        .unwrap_or_else(|| with_suffix(&args.out, ".outputs.txt"));
    let mut text = outputs.join("\n");
    text.push('\n');
    write_text(&outputs_path, &text)?;
    write_text(&args.out, &(report.json_line() + "\n"))?;
    print!("{}", report.render());
    Ok(())
}

#[derive(Deserialize)]
struct HistoryLine {
    history: Vec<(String, String)>,
    responder: String,
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let trainer = open_checkpoint(&args.ckpt)?;
    require_joint(&trainer, &args.ckpt)?;
    let base = sampling(&trainer, args.common.seed, args.max_tokens)?;
    let text = fs::read_to_string(&args.input).map_err(|e| MorpheusError::io(&args.input, e))?;
    let mut out = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let parsed: HistoryLine = serde_json::from_str(raw).map_err(|e| MorpheusError::Schema {
            line,
            field: "$".into(),
            reason: e.to_string(),
        })?;
        let history: Vec<Turn> = parsed
            .history
            .into_iter()
            .map(|(speaker, utterance)| Turn::new(speaker, utterance))
            .collect();
        let cfg = SamplingConfig {
            seed: base.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let g = generate(&trainer.model, &history, &parsed.responder, &cfg).map_err(|e| match e {
            MorpheusError::InvalidArgument(m) => MorpheusError::Schema {
                line,
                field: "history".into(),
                reason: m,
            },
            other => other,
        })?;
        out.push_str(&g.text);
        out.push('\n');
    }
    write_text(&args.out, &out)
}

fn cmd_chat(args: ChatArgs) -> Result<()> {
    let trainer = open_checkpoint(&args.ckpt)?;
    require_joint(&trainer, &args.ckpt)?;
    let cfg = sampling(&trainer, args.common.seed, args.max_tokens)?;
    let stdin = io::stdin();
    let stdout = io::stdout();
    chat_repl(&trainer.model, &cfg, stdin.lock(), BufWriter::new(stdout.lock()))
}

fn nearest_neighbour_distances(cb: &PersonaCodebook) -> Vec<Option<(usize, f64)>> {
    let v = cb.vectors();
    (0..cb.size())
        .map(|i| {
            (0..cb.size())
                .filter(|&j| j != i)
                .map(|j| {
                    let d = (&v.row(i) - &v.row(j)).mapv(|x| x * x).sum().sqrt();
                    (j, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        })
        .collect()
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let trainer = open_checkpoint(&args.ckpt)?;
    let cb = trainer
        .model
        .codebook()
        .ok_or_else(|| MorpheusError::MissingComponent("checkpoint has no persona codebook".into()))?;
    let usage = cb.utilization().ok();
    let nn = nearest_neighbour_distances(cb);
    let dists: Vec<f64> = nn.iter().flatten().map(|&(_, d)| d).collect();

    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(format!("{:<20} {}", "N", cb.size()));
    line(format!("{:<20} {}", "d", cb.dim()));
    line(format!("{:<20} {}", "init strategy", cb.strategy));
    line(format!("{:<20} {}", "stage", trainer.stage.map_or("untrained", Stage::as_str)));
    match &usage {
        Some(u) => line(format!(
            "{:<20} {:.4} over {} lookups",
            "usage perplexity", u.perplexity, u.total
        )),
        None => line(format!("{:<20} no lookups yet", "usage perplexity")),
    }
    if !dists.is_empty() {
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let max = dists.iter().copied().fold(0.0, f64::max);
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        line(format!(
            "{:<20} min {min:.4}  mean {mean:.4}  max {max:.4}",
            "nearest-code dist"
        ));
    }
    line(format!("{:>6} {:>8} {:>10} {:>8}", "code", "nearest", "distance", "usage"));
    for (k, entry) in nn.iter().enumerate() {
        let used = cb.usage_counts()[k];
        match entry {
            Some((j, d)) => line(format!("{k:>6} {j:>8} {d:>10.4} {used:>8}")),
            None => line(format!("{k:>6} {:>8} {:>10} {used:>8}", "-", "-")),
        }
    }
    let machine = json!({
        "n": cb.size(),
        "d": cb.dim(),
        "init_strategy": cb.strategy.as_str(),
        "stage": trainer.stage.map(Stage::as_str),
        "usage_perplexity": usage.as_ref().map(|u| u.perplexity),
        "lookups": usage.as_ref().map_or(0, |u| u.total),
        "usage_counts": cb.usage_counts(),
        "nearest_code": nn.iter().map(|e| e.map(|(j, _)| j)).collect::<Vec<_>>(),
        "nearest_distance": nn.iter().map(|e| e.map(|(_, d)| d)).collect::<Vec<_>>(),
    });
    out.push_str(&serde_json::to_string(&machine).expect("json serializes"));
    out.push('\n');
    io::stdout()
        .write_all(out.as_bytes())
        .map_err(|e| MorpheusError::io("<stdout>", e))
}

fn exit_code(e: &MorpheusError) -> u8 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Chat(a) => cmd_chat(a),
        Command::InspectPc(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
