use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmfs::episode::{generate_synthetic_dataset, save_dataset, SyntheticDatasetSpec};
use mmfs::harness::{
    ablate, combined_table, dump_priors, evaluate, AblationAxis, Checkpoint, DataSource, EvalTarget, RunConfig,
    TrainState, Workspace,
};
use mmfs::adapters::MockEmbedder;
use mmfs::fuse::DropoutRates;
use mmfs::{Error, Result};

#[derive(Parser)]
#[command(name = "mmfs", version, about = "Multi-modal few-shot segmentation on synthetic or on-disk data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to disk, with embedding fixtures.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long, default_value = "checkpoint.json")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint under modality or path ablations.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        axis: AxisArg,
        /// Directory for per-run reports and the comparison table.
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Write location priors and predicted masks of one episode as PNGs.
    DumpPriors {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Class to draw the episode from (default: first evaluation class).
        #[arg(long)]
        class: Option<u32>,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, default_value = "priors")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Modalities,
    Paths,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Novel,
    Train,
    HeldOut,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    num_classes: usize,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 24)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dimension of the mock text/audio fixtures.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = MockEmbedder::DEFAULT_AUDIO_TEXT_COSINE)]
    audio_text_cosine: f64,
    /// Write images and masks only.
    #[arg(long)]
    no_fixtures: bool,
}

/// Overrides applied on top of the configuration file.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML or JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau_temp: Option<f64>,
    #[arg(long)]
    tau_overlap: Option<f64>,
    #[arg(long)]
    delta_text: Option<f64>,
    #[arg(long)]
    delta_audio: Option<f64>,
    #[arg(long)]
    infonce_include_positive: bool,
    /// Disable the visual modality.
    #[arg(long)]
    drop_visual: bool,
    #[arg(long)]
    drop_text: bool,
    #[arg(long)]
    drop_audio: bool,
    #[arg(long)]
    no_semantic: bool,
    #[arg(long)]
    no_geometric: bool,
    /// Training-time modality dropout rate, for every modality.
    #[arg(long)]
    modality_dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    eval_episodes: Option<usize>,
    #[arg(long, value_enum)]
    target: Option<TargetArg>,
    #[arg(long)]
    holdout_per_class: Option<usize>,
    /// Comma-separated training class ids.
    #[arg(long, value_delimiter = ',')]
    train_classes: Option<Vec<u32>>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    /// File config (or `base`), then flags.
    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => base.unwrap_or_default(),
        };
        if let Some(p) = &self.data {
            c.data = DataSource::Path(p.clone());
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$($field).+ = v; })*
            };
        }
        set!(
            fold => fold,
            shots => shots,
            lambda => pipeline.lambda,
            tau_temp => pipeline.tau_temp,
            tau_overlap => pipeline.tau_overlap,
            delta_text => pipeline.delta_text,
            delta_audio => pipeline.delta_audio,
            lr => optim.learning_rate,
            batch_size => optim.batch_size,
            epochs => optim.epochs,
            episodes_per_epoch => optim.episodes_per_epoch,
            eval_episodes => eval.episodes_per_class,
            holdout_per_class => holdout_per_class,
            dim => model.dim,
            stride => model.stride,
            seed => seed,
        );
        if let Some(ids) = &self.train_classes {
            c.train_classes = Some(ids.clone());
        }
        if let Some(r) = self.modality_dropout {
            c.dropout = DropoutRates {
                visual: r,
                text: r,
                audio: r,
            };
        }
        if let Some(t) = self.target {
            c.eval.target = match t {
                TargetArg::Novel => EvalTarget::Novel,
                TargetArg::Train => EvalTarget::Train,
                TargetArg::HeldOut => EvalTarget::HeldOut,
            };
        }
        c.pipeline.infonce_include_positive |= self.infonce_include_positive;
        c.modalities.visual &= !self.drop_visual;
        c.modalities.text &= !self.drop_text;
        c.modalities.audio &= !self.drop_audio;
        c.paths.semantic &= !self.no_semantic;
        c.paths.geometric &= !self.no_geometric;
        c.validate()?;
        Ok(c)
    }

    /// Config for a checkpoint consumer; the checkpoint's own config is the
    /// base unless a file is given.
    fn resolve_for(&self, ck: &Checkpoint) -> Result<RunConfig> {
        self.resolve(Some(ck.config.clone()))
    }
}

fn load_state(run: &RunArgs, path: &Path) -> Result<(RunConfig, TrainState)> {
    let ck = Checkpoint::load(path)?;
    let cfg = run.resolve_for(&ck)?;
    let state = ck.into_state(&cfg)?;
    Ok((cfg, state))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let spec = SyntheticDatasetSpec {
                num_classes: a.num_classes,
                image_size: a.image_size,
                samples_per_class: a.samples_per_class,
                seed: a.seed,
                ..Default::default()
            };
            let ds = generate_synthetic_dataset(&spec)?;
            let emb = MockEmbedder::new(a.dim).with_audio_text_cosine(a.audio_text_cosine);
            let payloads: Option<&dyn mmfs::adapters::ModalityEmbedder> = (!a.no_fixtures).then_some(&emb as _);
            let m = save_dataset(&ds, &a.out, payloads)?;
            println!("wrote {} samples of {} classes to {}", m.samples.len(), m.classes.len(), a.out.display());
        }
        Command::Train { run, resume, out } => {
            let (cfg, mut state) = match &resume {
                Some(p) => load_state(&run, p)?,
                None => {
                    let cfg = run.resolve(None)?;
                    let st = TrainState::new(&cfg)?;
                    (cfg, st)
                }
            };
            let ws = Workspace::new(&cfg)?;
            let before = state.history.len();
            state.run(&ws)?;
            Checkpoint::from_state(&state).save(&out)?;
            let last = state.history.last().map(|r| r.loss.l_total);
            println!(
                "trained {} steps over {} epochs, final loss {}; checkpoint {}",
                state.history.len() - before,
                state.epoch,
                last.map_or("n/a".into(), |l| format!("{l:.4}")),
                out.display()
            );
        }
        Command::Eval { run, checkpoint, out } => {
            let (cfg, state) = load_state(&run, &checkpoint)?;
            let ws = Workspace::new(&cfg)?;
            let report = evaluate(&cfg, &ws, &state.model, &state.store)?;
            report.save(&out)?;
            for c in &report.classes {
                println!("{:>3} {:<14} IoU {:.4}", c.class_id, c.name, c.iou);
            }
            println!("mIoU {:.4}  FB-IoU {:.4}  ({} episodes)", report.miou, report.fb_iou, report.episodes);
        }
        Command::Ablate {
            run,
            checkpoint,
            axis,
            out,
        } => {
            let (cfg, state) = load_state(&run, &checkpoint)?;
            let ws = Workspace::new(&cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Input(format!("cannot create {}: {e}", out.display())))?;
            let axes: &[AblationAxis] = match axis {
                AxisArg::Modalities => &[AblationAxis::Modalities],
                AxisArg::Paths => &[AblationAxis::Paths],
                AxisArg::Both => &[AblationAxis::Modalities, AblationAxis::Paths],
            };
            let mut reports = Vec::new();
            for &ax in axes {
                let r = ablate(&cfg, &ws, &state.model, &state.store, ax)?;
                let name = match ax {
                    AblationAxis::Modalities => "modalities",
                    AblationAxis::Paths => "paths",
                };
                write_text(&out.join(format!("{name}.json")), &serde_json::to_string_pretty(&r)?)?;
                reports.push(r);
            }
            let table = match reports.as_slice() {
                [m, p] => combined_table(m, p),
                [one] => one.table(),
                _ => unreachable!(),
            };
            write_text(&out.join("table.txt"), &table)?;
            print!("{table}");
        }
        Command::DumpPriors {
            run,
            checkpoint,
            class,
            episode,
            out,
        } => {
            let (cfg, state) = load_state(&run, &checkpoint)?;
            let ws = Workspace::new(&cfg)?;
            let class = match class {
                Some(c) => c,
                None => *ws
                    .eval_classes(cfg.eval.target)
                    .first()
                    .ok_or_else(|| Error::config("no evaluation classes"))?,
            };
            let ep = ws.eval_episode(cfg.eval.target, cfg.shots, cfg.seed, class, episode)?;
            for p in dump_priors(&cfg, &ws, &state.model, &state.store, &ep, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::DatasetSpec(_) | Error::Protocol(_) | Error::Toml(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
