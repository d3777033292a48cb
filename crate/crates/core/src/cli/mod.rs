//! The `spikedistill` command line.

mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{Resolved, RunConfig, DATA_DIR_ENV, KEYS, LOSS_KEYS};

use crate::data::{load_dataset, DatasetKind, ImageDataset, Split};
use crate::distill::{
    distill, evaluate, grid_search_weights, multistage_pipeline, train_supervised, window_sweep, write_weights_csv,
    write_window_csv, GridSearchConfig, MetricsRecord, Objective, PipelineConfig, Stage,
};
use crate::error::{Error, Result};
use crate::snn::{Network, Role};
use crate::store::{export_features, load_checkpoint, save_checkpoint, write_atomic, write_metrics, CheckpointMeta};

#[derive(Debug, Parser)]
#[command(
    name = "spikedistill",
    version,
    about = "Spiking network training and knowledge distillation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Settings shared by the training commands; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// key=value file with run settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// desk or paper
    #[arg(long)]
    pub preset: Option<String>,
    /// mnist, fashion-mnist or cifar10
    #[arg(long)]
    pub dataset: Option<String>,
    /// Dataset root (falls back to $SPIKEDISTILL_DATA_DIR, then ./data)
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub timesteps: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub tau_p: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on the first N training images, or `all`
    #[arg(long)]
    pub train_subset: Option<String>,
    /// Explicit layer widths, e.g. 784,100,10
    #[arg(long)]
    pub widths: Option<String>,
    /// Experiment directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reuse a non-empty experiment directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct LossArgs {
    /// key=value file with alpha, beta, gamma, delta, stride, m, kl_direction
    #[arg(long)]
    pub loss_config: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub delta: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Norm order of the sliding term (1 or 2)
    #[arg(long)]
    pub m: Option<u32>,
    /// student-teacher or teacher-student
    #[arg(long)]
    pub kl_direction: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepMode {
    Window,
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Supervised training from labels
    Train {
        /// teacher, ta or student
        #[arg(long)]
        role: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a student to match a frozen teacher's outputs
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Preset architecture for the student (ta or student)
        #[arg(long)]
        student_role: Option<String>,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        loss: LossArgs,
    },
    /// Teacher -> assistant -> student distillation
    Pipeline {
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        loss: LossArgs,
    },
    /// Print the accuracy of a checkpoint
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Window-length or loss-weight sweep
    Sweep {
        #[arg(long, value_enum)]
        mode: SweepMode,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student_role: Option<String>,
        /// Window lengths for window mode, e.g. 32,64,96,128
        #[arg(long)]
        deltas: Option<String>,
        /// Seeds for window mode (defaults to --seed)
        #[arg(long)]
        seeds: Option<String>,
        /// Grid spacing for weights mode
        #[arg(long, default_value_t = 0.1)]
        step: f64,
        /// Fraction of the training set scored in weights mode
        #[arg(long, default_value_t = 0.1)]
        validation_fraction: f64,
        /// Fraction of the remaining training set used per grid point
        #[arg(long, default_value_t = 0.2)]
        subset_fraction: f64,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        loss: LossArgs,
    },
    /// Write time-averaged penultimate-layer features as CSV
    Features {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Output CSV file
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn layered(common: &Common, loss: Option<&LossArgs>) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path, KEYS)?,
        None => RunConfig::default(),
    };
    if let Some(loss) = loss {
        if let Some(path) = &loss.loss_config {
            cfg.overlay(&RunConfig::load(path, LOSS_KEYS)?);
        }
    }
    let mut flags = RunConfig::default();
    let mut put = |k: &str, v: Option<String>| -> Result<()> {
        match v {
            Some(v) => flags.set(k, v),
            None => Ok(()),
        }
    };
    let s = |v: &Option<f64>| v.map(|x| x.to_string());
    put("preset", common.preset.clone())?;
    put("dataset", common.dataset.clone())?;
    put("data_dir", common.data_dir.as_ref().map(|p| p.display().to_string()))?;
    put("timesteps", common.timesteps.map(|x| x.to_string()))?;
    put("lambda", s(&common.lambda))?;
    put("tau", s(&common.tau))?;
    put("tau_p", s(&common.tau_p))?;
    put("epochs", common.epochs.map(|x| x.to_string()))?;
    put("batch_size", common.batch_size.map(|x| x.to_string()))?;
    put("lr", s(&common.lr))?;
    put("seed", common.seed.map(|x| x.to_string()))?;
    put("train_subset", common.train_subset.clone())?;
    put("widths", common.widths.clone())?;
    put("out", common.out.as_ref().map(|p| p.display().to_string()))?;
    if let Some(loss) = loss {
        put("alpha", s(&loss.alpha))?;
        put("beta", s(&loss.beta))?;
        put("gamma", s(&loss.gamma))?;
        put("delta", loss.delta.map(|x| x.to_string()))?;
        put("stride", loss.stride.map(|x| x.to_string()))?;
        put("m", loss.m.map(|x| x.to_string()))?;
        put("kl_direction", loss.kl_direction.clone())?;
    }
    cfg.overlay(&flags);
    Ok(cfg)
}

/// `<out>/{checkpoints,metrics,config}` of one run.
struct Layout {
    root: PathBuf,
}

impl Layout {
    /// Refuses a non-empty directory unless `force`. Creates nothing yet.
    fn check(out: Option<&Path>, force: bool) -> Result<Layout> {
        let root = out.ok_or_else(|| Error::Config("an output directory (--out) is required".into()))?;
        if root.exists() {
            if !root.is_dir() {
                return Err(Error::Config(format!(
                    "{} exists and is not a directory",
                    root.display()
                )));
            }
            let non_empty = fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
            if non_empty && !force {
                return Err(Error::Config(format!(
                    "{} is not empty; pass --force to overwrite",
                    root.display()
                )));
            }
        }
        Ok(Layout {
            root: root.to_path_buf(),
        })
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.root.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn checkpoint(&self, name: &str) -> Result<PathBuf> {
        Ok(self.dir("checkpoints")?.join(format!("{name}.ckpt")))
    }

    fn metrics(&self, name: &str) -> Result<PathBuf> {
        Ok(self.dir("metrics")?.join(format!("{name}.csv")))
    }

    fn write_config(&self, resolved: &Resolved) -> Result<()> {
        write_atomic(
            &self.dir("config")?.join("resolved-config.txt"),
            resolved.echo().as_bytes(),
        )
    }
}

fn load_split(kind: DatasetKind, dir: &Path, split: Split) -> Result<ImageDataset> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("data directory {} does not exist", dir.display())));
    }
    load_dataset(kind, dir, split)
}

fn load_train_test(r: &Resolved, role: Role) -> Result<(ImageDataset, ImageDataset)> {
    let train = load_split(r.dataset, &r.data_dir, Split::Train)?;
    let test = load_split(r.dataset, &r.data_dir, Split::Test)?;
    let train = match r.subset_for(role) {
        Some(n) if n < train.len() => train.head(n),
        _ => train,
    };
    Ok((train, test))
}

fn data_dir_or_default(dir: Option<PathBuf>) -> PathBuf {
    dir.or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn final_test_accuracy(records: &[MetricsRecord]) -> f64 {
    records
        .iter()
        .rev()
        .find(|r| r.split.name() == "test")
        .map_or(f64::NAN, |r| r.accuracy)
}

fn role_name(spec_role: Role) -> &'static str {
    match spec_role {
        Role::Custom => "custom",
        r => r.name(),
    }
}

/// Loads a teacher, freezes it and pins T to the teacher's unless T was set explicitly.
fn frozen_teacher(path: &Path, cfg: &mut RunConfig) -> Result<(Network, Resolved)> {
    let (mut teacher, _) = load_checkpoint(path)?;
    teacher.freeze();
    let t = teacher.spec().timesteps;
    if !cfg.contains("timesteps") {
        cfg.set("timesteps", t.to_string())?;
    }
    let resolved = cfg.resolve()?;
    if resolved.train.timesteps != t {
        return Err(Error::Spec(format!(
            "teacher runs {t} timesteps but the configuration asks for {}",
            resolved.train.timesteps
        )));
    }
    if teacher.spec().input_dim() != resolved.dataset.input_dim() {
        return Err(Error::Spec(format!(
            "teacher takes {} inputs but {} images have {}",
            teacher.spec().input_dim(),
            resolved.dataset.name(),
            resolved.dataset.input_dim()
        )));
    }
    Ok((teacher, resolved))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { role, common } => {
            let mut cfg = layered(&common, None)?;
            if let Some(r) = role {
                cfg.set("role", r)?;
            }
            let r = cfg.resolve()?;
            let layout = Layout::check(r.out.as_deref(), common.force)?;
            let spec = r.network(None)?;
            let (train, test) = load_train_test(&r, spec.role)?;
            let mut net = Network::new(spec, r.train.seed)?;
            let records = train_supervised(&mut net, &train, &test, &r.train)?;
            let name = role_name(net.spec().role);
            let meta = CheckpointMeta {
                seed: r.train.seed,
                epoch: r.train.epochs,
            };
            save_checkpoint(&net, &layout.checkpoint(name)?, &meta)?;
            write_metrics(&records, &layout.metrics(name)?)?;
            layout.write_config(&r)?;
            println!("test accuracy={:.6}", final_test_accuracy(&records));
            Ok(())
        }
        Command::Distill {
            teacher,
            student_role,
            common,
            loss,
        } => {
            let mut cfg = layered(&common, Some(&loss))?;
            let role = match &student_role {
                Some(r) => Some(Role::parse(r)?),
                None if cfg.contains("widths") => None,
                None => Some(Role::Student),
            };
            let (teacher, r) = frozen_teacher(&teacher, &mut cfg)?;
            let layout = Layout::check(r.out.as_deref(), common.force)?;
            let spec = r.network(role)?;
            let (train, test) = load_train_test(&r, spec.role)?;
            let mut student = Network::new(spec, r.train.seed)?;
            let records = distill(
                &teacher,
                &mut student,
                &train,
                &test,
                &r.train,
                &Objective::Combined(r.loss),
            )?;
            let name = role_name(student.spec().role);
            let meta = CheckpointMeta {
                seed: r.train.seed,
                epoch: r.train.epochs,
            };
            save_checkpoint(&student, &layout.checkpoint(name)?, &meta)?;
            write_metrics(&records, &layout.metrics(name)?)?;
            layout.write_config(&r)?;
            println!("test accuracy={:.6}", final_test_accuracy(&records));
            Ok(())
        }
        Command::Pipeline { teacher, common, loss } => {
            let mut cfg = layered(&common, Some(&loss))?;
            let (teacher, r) = frozen_teacher(&teacher, &mut cfg)?;
            let layout = Layout::check(r.out.as_deref(), common.force)?;
            let ta_spec = r.network(Some(Role::Ta))?;
            let student_spec = r.network(Some(Role::Student))?;
            let (train, test) = load_train_test(&r, Role::Student)?;
            layout.write_config(&r)?;
            let pipeline = PipelineConfig {
                ta: r.train.clone(),
                student: r.train.clone(),
                objective: Objective::Combined(r.loss),
            };
            let meta = CheckpointMeta {
                seed: r.train.seed,
                epoch: r.train.epochs,
            };
            let out = multistage_pipeline(
                &teacher,
                ta_spec,
                student_spec,
                &train,
                &test,
                &pipeline,
                |stage, net, records| {
                    let name = match stage {
                        Stage::Assistant => "ta",
                        Stage::Student => "student",
                    };
                    save_checkpoint(net, &layout.checkpoint(name)?, &meta)?;
                    write_metrics(records, &layout.metrics(name)?)
                },
            )?;
            println!("ta test accuracy={:.6}", final_test_accuracy(&out.ta_metrics));
            println!("student test accuracy={:.6}", final_test_accuracy(&out.student_metrics));
            Ok(())
        }
        Command::Eval {
            ckpt,
            dataset,
            data_dir,
            split,
        } => {
            let kind = DatasetKind::parse(&dataset)?;
            let (net, _) = load_checkpoint(&ckpt)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let ds = load_split(kind, &data_dir_or_default(data_dir), split)?;
            println!("accuracy={:.6}", evaluate(&net, &ds)?);
            Ok(())
        }
        Command::Features {
            ckpt,
            dataset,
            data_dir,
            split,
            out,
        } => {
            let kind = DatasetKind::parse(&dataset)?;
            let (net, _) = load_checkpoint(&ckpt)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let ds = load_split(kind, &data_dir_or_default(data_dir), split)?;
            export_features(&net, &ds, &out)
        }
        Command::Sweep {
            mode,
            teacher,
            student_role,
            deltas,
            seeds,
            step,
            validation_fraction,
            subset_fraction,
            jobs,
            common,
            loss,
        } => {
            let mut cfg = layered(&common, Some(&loss))?;
            let role = match &student_role {
                Some(r) => Some(Role::parse(r)?),
                None if cfg.contains("widths") => None,
                None => Some(Role::Student),
            };
            let (teacher, r) = frozen_teacher(&teacher, &mut cfg)?;
            let layout = Layout::check(r.out.as_deref(), common.force)?;
            let spec = r.network(role)?;
            match mode {
                SweepMode::Window => {
                    let deltas = parse_list::<usize>("deltas", deltas.as_deref().unwrap_or("32,64,96,128"))?;
                    let seeds = match seeds {
                        Some(s) => parse_list::<u64>("seeds", &s)?,
                        None => vec![r.train.seed],
                    };
                    if let Some(&bad) = deltas.iter().find(|&&d| d == 0 || d > r.train.timesteps) {
                        return Err(Error::Config(format!(
                            "window length {bad} must lie in 1..={}",
                            r.train.timesteps
                        )));
                    }
                    let (train, test) = load_train_test(&r, spec.role)?;
                    let rows = window_sweep(
                        &teacher,
                        &spec,
                        &train,
                        &test,
                        &r.train,
                        &deltas,
                        r.loss.m_sliding,
                        &seeds,
                        jobs,
                    )?;
                    write_window_csv(&rows, &layout.metrics("window-sweep")?)?;
                }
                SweepMode::Weights => {
                    crate::distill::grid_points(step)?;
                    let (train, _) = load_train_test(&r, spec.role)?;
                    let search = GridSearchConfig {
                        step,
                        delta: r.loss.delta,
                        m_sliding: r.loss.m_sliding,
                        validation_fraction,
                        subset_fraction,
                        jobs,
                    };
                    let result = grid_search_weights(&teacher, &spec, &train, &r.train, &search)?;
                    write_weights_csv(&result.table, &layout.metrics("weight-grid")?)?;
                    let b = result.best;
                    let best = format!(
                        "alpha={}\nbeta={}\ngamma={}\ndelta={}\nstride={}\nm={}\n",
                        b.alpha,
                        b.beta,
                        b.gamma,
                        b.delta,
                        b.stride,
                        b.m_sliding.order()
                    );
                    write_atomic(&layout.dir("config")?.join("best-loss-config.txt"), best.as_bytes())?;
                    println!("best alpha={} beta={} gamma={}", b.alpha, b.beta, b.gamma);
                }
            }
            layout.write_config(&r)?;
            Ok(())
        }
    }
}

fn parse_list<T: std::str::FromStr>(what: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| Error::Config(format!("`{what}` entry `{x}` is not valid")))
        })
        .collect()
}
