//! `stqa`: synthetic data generation, channel training, ensemble
//! evaluation, gradient checking and checkpoint inspection.
//!
//! Exit codes: 0 on success, 1 on any validation or runtime error, 2 on
//! usage errors (unknown flags, missing arguments).

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stqa_core::data::synth::{self, SynthConfig};
use stqa_core::data::{Dataset, Split};
use stqa_core::gradcheck::{find_target, gradcheck_targets, GradTarget};
use stqa_core::model::{ChannelConfig, Model, StreamChannelConfig, TextChannelConfig};
use stqa_core::train::{evaluate, train_channel, EpochRecord, StopReason, TrainConfig};
use stqa_core::video::StreamKind;
use stqa_core::{load_checkpoint, save_checkpoint, EngineError, ParamGroup, Result};

#[derive(Parser)]
#[command(
    name = "stqa",
    version,
    about = "Two-stream spatiotemporal video QA on synthetic block-world data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic block-world dataset.
    Synth(SynthArgs),
    /// Train one channel and save the checkpoint of its best epoch.
    Train(TrainArgs),
    /// Evaluate one to three checkpoints as a softmax-sum ensemble.
    Eval(EvalArgs),
    /// Compare tape gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print checkpoint metadata and the parameter table.
    Inspect(InspectArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    /// Text-only questions; no video files are written.
    Text,
    /// Motion and color questions answerable from pixels.
    Visual,
    /// Motion, color and joint questions with subtitle evidence and
    /// localization windows.
    Ensemble,
    /// Undecidable questions: subtitles carry no evidence, so any fixed
    /// model scores at chance.
    Baseline,
    /// Every question type.
    Mixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChannelArg {
    /// Subtitle text channel.
    Text,
    /// RGB appearance stream.
    Spt,
    /// Optical-flow stream.
    Tpr,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    profile: Profile,
    /// Output directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    questions: usize,
    /// Answer candidates per question.
    #[arg(long, default_value_t = 5)]
    candidates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    channel: ChannelArg,
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the channel's epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Disable global gradient-norm clipping.
    #[arg(long)]
    no_clip: bool,
    /// Also write the per-epoch metrics as tab-separated values.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file; repeat for an ensemble, one per channel.
    #[arg(long, required = true)]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Restrict to one split; default is every record.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Write raw per-channel scores as JSON for later replay.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Target name; repeat to run several. Default is every target.
    #[arg(long)]
    target: Vec<String>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = match args.profile {
        Profile::Text => SynthConfig::text(args.questions),
        Profile::Visual => SynthConfig::visual(args.questions),
        Profile::Ensemble => SynthConfig::ensemble(args.questions),
        Profile::Baseline => SynthConfig::baseline(args.questions),
        Profile::Mixed => SynthConfig::mixed(args.questions),
    };
    cfg.candidates = args.candidates;
    let manifest = synth::generate(&args.out, &cfg, args.seed)?;
    let mut splits: BTreeMap<Split, usize> = BTreeMap::new();
    for r in &manifest.records {
        *splits.entry(r.split).or_insert(0) += 1;
    }
    println!(
        "questions\t{}\ncandidates\t{}",
        manifest.records.len(),
        manifest.candidates
    );
    for (split, n) in splits {
        println!("{}\t{}", split.as_str(), n);
    }
    println!("out\t{}", args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (mut model, mut cfg, ds) = match args.channel {
        ChannelArg::Text => {
            let base = TextChannelConfig::default();
            let ds = Dataset::open(&args.data, base.embed_dim)?;
            let mcfg = TextChannelConfig {
                candidates: ds.candidates(),
                ..base
            };
            let model = Model::init_text(mcfg, ds.vocab(), args.seed)?;
            (model, TrainConfig::text(), ds)
        }
        ChannelArg::Spt | ChannelArg::Tpr => {
            let kind = match args.channel {
                ChannelArg::Spt => StreamKind::Rgb,
                _ => StreamKind::Flow,
            };
            let base = StreamChannelConfig::toy(kind);
            let ds = Dataset::open(&args.data, base.embed_dim)?;
            let mcfg = StreamChannelConfig {
                candidates: ds.candidates(),
                ..base
            };
            let model = Model::init_stream(mcfg, ds.vocab(), args.seed)?;
            (model, TrainConfig::visual(), ds)
        }
    };
    if let Some(epochs) = args.epochs {
        cfg.max_epochs = epochs;
    }
    if let Some(batch) = args.batch {
        cfg.batch_size = batch;
    }
    if let Some(patience) = args.patience {
        cfg.patience = patience;
    }
    if args.no_clip {
        cfg.clip_norm = None;
    }

    println!("{}", EpochRecord::tsv_header());
    let outcome = train_channel(&mut model, &ds, &cfg, args.seed, |r| {
        println!("{}", r.tsv());
    })?;
    if let Some(path) = &args.log {
        let mut text = String::from(EpochRecord::tsv_header());
        text.push('\n');
        for r in &outcome.history {
            text.push_str(&r.tsv());
            text.push('\n');
        }
        fs::write(path, text)
            .map_err(|e| EngineError::io(format!("writing {}", path.display()), e))?;
    }
    match &outcome.stop {
        StopReason::MaxEpochs => println!("stopped\tmax_epochs"),
        StopReason::EarlyStopped => println!("stopped\tearly"),
        StopReason::Diverged { detail } => println!("stopped\tdiverged\t{detail}"),
    }
    if let Some(epoch) = outcome.best_epoch {
        println!(
            "best_epoch\t{}\nbest_val_accuracy\t{:.4}",
            epoch, outcome.best_val_accuracy
        );
    }
    save_checkpoint(&args.out, &model, args.seed, Some(&cfg))?;
    println!("checkpoint\t{}", args.out.display());
    Ok(())
}

fn embed_dim(config: &ChannelConfig) -> usize {
    match config {
        ChannelConfig::Text { cfg, .. } => cfg.embed_dim,
        ChannelConfig::Stream { cfg, .. } => cfg.embed_dim,
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut loaded = Vec::with_capacity(args.checkpoint.len());
    for path in &args.checkpoint {
        loaded.push(load_checkpoint(path)?.0);
    }
    let dim = embed_dim(loaded[0].config());
    for m in &loaded {
        if embed_dim(m.config()) != dim {
            return Err(EngineError::Config(format!(
                "checkpoints disagree on embedding width: {} vs {}",
                embed_dim(m.config()),
                dim
            )));
        }
    }
    let ds = Dataset::open(&args.data, dim)?;
    for m in &loaded {
        if m.config().vocab_size() != ds.vocab().len() {
            return Err(EngineError::Config(format!(
                "{} checkpoint was trained with a {}-token vocabulary, dataset has {}",
                m.channel().as_str(),
                m.config().vocab_size(),
                ds.vocab().len()
            )));
        }
    }
    let models: Vec<&Model> = loaded.iter().collect();
    let report = evaluate(&models, &ds, args.split.map(Into::into), args.dump.is_some())?;
    print!("{}", report.render_text());
    if let Some(path) = &args.dump {
        let dumps = report.dumps.as_ref().expect("dumps were requested");
        let json = serde_json::to_string_pretty(dumps)
            .map_err(|e| EngineError::Validation(format!("serializing dumps: {e}")))?;
        fs::write(path, json + "\n")
            .map_err(|e| EngineError::io(format!("writing {}", path.display()), e))?;
        println!("dumps\t{}", path.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let targets: Vec<&GradTarget> = if args.target.is_empty() {
        gradcheck_targets().iter().collect()
    } else {
        let mut picked = Vec::with_capacity(args.target.len());
        for name in &args.target {
            picked.push(find_target(name).ok_or_else(|| {
                let known: Vec<&str> = gradcheck_targets().iter().map(|t| t.name).collect();
                EngineError::Config(format!(
                    "unknown gradcheck target {name:?}; known targets: {}",
                    known.join(", ")
                ))
            })?);
        }
        picked
    };
    let mut failed = 0usize;
    for target in targets {
        let report = target.run(args.seed)?;
        let verdict = if report.pass() { "pass" } else { "fail" };
        println!(
            "{}\t{:.3e}\t{:.0e}\t{}",
            target.name, report.max_rel_err, report.tolerance, verdict
        );
        failed += usize::from(!report.pass());
    }
    if failed > 0 {
        return Err(EngineError::Validation(format!(
            "{failed} gradcheck target(s) over tolerance"
        )));
    }
    Ok(())
}

fn group_name(group: ParamGroup) -> &'static str {
    match group {
        ParamGroup::Extractor => "extractor",
        ParamGroup::Head => "head",
    }
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let (model, meta) = load_checkpoint(&args.checkpoint)?;
    println!(
        "channel\t{}\nengine_version\t{}\nseed\t{}\nvocab_size\t{}\ncandidates\t{}",
        model.channel().as_str(),
        meta.engine_version,
        meta.seed,
        meta.model.vocab_size(),
        meta.model.candidates()
    );
    println!(
        "parameters\t{}\nscalars\t{}",
        model.params().len(),
        model.params().total_scalars()
    );
    println!("name\tgroup\tshape\tscalars");
    for e in model.params().iter() {
        println!(
            "{}\t{}\t{:?}\t{}",
            e.name,
            group_name(e.group),
            e.tensor.shape(),
            e.tensor.numel()
        );
    }
    Ok(())
}
