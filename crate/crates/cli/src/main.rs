use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualreal::config::{Mode, RunConfig};
use dualreal::corpus::Corpus;
use dualreal::metrics::{write_report_csv, ToyEncoder};
use dualreal::pipeline::{self, Customized};
use dualreal::{io, Error, ParamRegistry};

#[derive(Parser)]
#[command(name = "dualreal", version, about = "Joint identity/motion customization of a toy video diffusion transformer")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

/// Overrides applied on top of the config file; flags win.
#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    run_id: Option<String>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    groups: Option<usize>,
    /// Customization steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    pretrain_steps: Option<usize>,
    #[arg(long, global = true)]
    sampling_steps: Option<usize>,
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    identity: Option<usize>,
    #[arg(long, global = true)]
    motion: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic corpus.
    GenCorpus,
    /// Pretrain the backbone on generic clips.
    Pretrain,
    /// Customize adapters and controller for one identity/motion pair.
    Customize,
    /// Draw videos from a customized checkpoint.
    Sample,
    /// Score sampled videos.
    Eval,
    /// Record the per-step group weights of one sampling run.
    VizController {
        /// Also draw an SVG line chart.
        #[arg(long)]
        svg: bool,
        /// Customized checkpoint; a freshly initialized one when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every ablation mode plus the group-count sweep.
    Ablate,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Config(msg),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn resolve_config(c: &Common) -> Outcome<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) if !path.exists() => {
            return Err(Failure::Config(format!("config file {} does not exist", path.display())));
        }
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var("DUALREAL_SEED") {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Failure::Config(format!("DUALREAL_SEED=`{v}` is not an unsigned integer")))?;
    }
    macro_rules! take {
        ($($field:ident),*) => {$(
            if let Some(v) = c.$field.clone() {
                cfg.$field = v;
            }
        )*};
    }
    take!(seed, mode, run_id, out_dir, groups, identity, motion, samples, sampling_steps);
    if let Some(v) = &c.cache_dir {
        cfg.cache_dir = Some(v.clone());
    }
    if let Some(v) = c.steps {
        cfg.customize_steps = v;
    }
    if let Some(v) = c.pretrain_steps {
        cfg.pretrain.steps = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Layout {
    run: PathBuf,
    key: String,
}

impl Layout {
    fn new(cfg: &RunConfig) -> Self {
        Layout {
            run: cfg.run_dir(),
            key: pipeline::backbone_key(cfg),
        }
    }

    /// Keyed by the pretraining settings, so a changed config never picks
    /// up a stale backbone.
    fn backbone(&self) -> PathBuf {
        self.run.join(format!("backbone-{}.drck", self.key))
    }

    fn mode_dir(&self, mode: Mode) -> PathBuf {
        self.run.join(mode.as_str())
    }

    fn checkpoint(&self, mode: Mode) -> PathBuf {
        self.mode_dir(mode).join("model.drck")
    }

    fn samples(&self, mode: Mode) -> PathBuf {
        self.mode_dir(mode).join("samples")
    }
}

fn mkdir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))
}

/// The run's pretrained backbone: the one saved in the run directory, or a
/// fresh (possibly cached) pretraining.
fn backbone(cfg: &RunConfig, lay: &Layout) -> Outcome<ParamRegistry> {
    if lay.backbone().exists() {
        return Ok(io::load_checkpoint(&lay.backbone())?);
    }
    let pre = pipeline::pretrain(cfg, |s, l| {
        if s % 100 == 0 {
            eprintln!("pretrain step {s} loss {l:.5}");
        }
    })?;
    io::save_checkpoint(&lay.backbone(), &pre.reg)?;
    if !pre.losses.is_empty() {
        let text: String = pre.losses.iter().enumerate().map(|(s, l)| format!("{{\"step\":{s},\"loss\":{l}}}\n")).collect();
        std::fs::write(lay.run.join("pretrain.jsonl"), text).map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    Ok(pre.reg)
}

/// Rebuild the customized model for `mode` around saved parameters.
fn load_customized(cfg: &RunConfig, mode: Mode, path: &Path) -> Outcome<Customized> {
    if !path.exists() {
        return Err(Failure::Runtime(format!(
            "no checkpoint at {}; run `customize --mode {mode}` first",
            path.display()
        )));
    }
    let groups = if mode == Mode::NoGroups { 1 } else { cfg.groups };
    let route = match mode {
        Mode::Full | Mode::NoGroups => dualreal::Route::controller(),
        Mode::NoJoint | Mode::NoController => dualreal::Route::fixed(0.5),
    };
    Ok(Customized {
        mode,
        model: pipeline::build_model(cfg, groups)?,
        reg: io::load_checkpoint(path)?,
        route,
        logs: Vec::new(),
    })
}

fn run(cli: Cli) -> Outcome {
    let cfg = resolve_config(&cli.common)?;
    let lay = Layout::new(&cfg);
    mkdir(&lay.run)?;
    cfg.save(&lay.run.join("config.json"))?;
    let enc = ToyEncoder::standard();
    match cli.cmd {
        Cmd::GenCorpus => {
            let dir = lay.run.join("corpus");
            mkdir(&dir)?;
            pipeline::corpus(&cfg)?.write(&dir)?;
            println!("{}", dir.display());
        }
        Cmd::Pretrain => {
            if lay.backbone().exists() {
                std::fs::remove_file(lay.backbone()).map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            backbone(&cfg, &lay)?;
            println!("{}", lay.backbone().display());
        }
        Cmd::Customize => {
            let bb = backbone(&cfg, &lay)?;
            let corpus = pipeline::corpus(&cfg)?;
            let data = pipeline::customization_data(&corpus, cfg.identity, cfg.motion, enc)?;
            let c = pipeline::customize(&cfg, cfg.mode, &bb, &data, |l| {
                if l.step % 50 == 0 {
                    eprintln!("step {} {} loss {:.5}", l.step, l.phase.as_str(), l.loss);
                }
            })?;
            let dir = lay.mode_dir(cfg.mode);
            mkdir(&dir)?;
            io::save_checkpoint(&lay.checkpoint(cfg.mode), &c.reg)?;
            pipeline::write_logs(&dir.join("train.jsonl"), &c.logs)?;
            println!("{}", lay.checkpoint(cfg.mode).display());
        }
        Cmd::Sample => {
            let c = load_customized(&cfg, cfg.mode, &lay.checkpoint(cfg.mode))?;
            let corpus = pipeline::corpus(&cfg)?;
            let cond = pipeline::inference_conditioning(&cfg, &corpus, enc)?;
            let samples = pipeline::draw_samples(&cfg, &c, &cond)?;
            for p in pipeline::write_samples(&lay.samples(cfg.mode), &samples)? {
                println!("{}", p.display());
            }
        }
        Cmd::Eval => {
            let dir = lay.samples(cfg.mode);
            let videos = (0..cfg.samples)
                .map(|k| io::read_video(&dir.join(format!("sample-{k}.drv"))))
                .collect::<Result<Vec<_>, _>>()?;
            let corpus = pipeline::corpus(&cfg)?;
            let refs: Vec<_> = videos.iter().collect();
            let reports = pipeline::evaluate_samples(&cfg, &corpus, &refs, enc)?;
            let path = lay.mode_dir(cfg.mode).join("report.csv");
            write_report_csv(&path, &reports)?;
            println!("{}", path.display());
        }
        Cmd::VizController { svg, checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| lay.checkpoint(Mode::Full));
            let c = if path.exists() {
                load_customized(&cfg, Mode::Full, &path)?
            } else {
                eprintln!("no checkpoint at {}; using freshly initialized adapters", path.display());
                let bb = backbone(&cfg, &lay)?;
                let data = dualreal::trainer::CustomizationData::default();
                pipeline::customize(&RunConfig { customize_steps: 0, ..cfg.clone() }, Mode::Full, &bb, &data, |_| {})?
            };
            let corpus: Corpus = pipeline::corpus(&cfg)?;
            let cond = pipeline::inference_conditioning(&cfg, &corpus, enc)?;
            let one = RunConfig { samples: 1, ..cfg.clone() };
            let samples = pipeline::draw_samples(&one, &c, &cond)?;
            pipeline::write_controller(&lay.run, &samples[0].schedules, svg)?;
            println!("{}", lay.run.join("controller.csv").display());
        }
        Cmd::Ablate => {
            let bb = backbone(&cfg, &lay)?;
            let corpus = pipeline::corpus(&cfg)?;
            let table = pipeline::ablate(&cfg, &bb, &corpus, |what| eprintln!("ablation: {what}"))?;
            pipeline::write_ablation(&lay.run, &table)?;
            println!("{}", lay.run.join("ablation.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
