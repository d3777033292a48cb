use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::autodiff::Norm;
use crate::data::DatasetKind;
use crate::distill::{DistillLossConfig, KlDirection, TrainConfig};
use crate::error::{Error, Result};
use crate::preset::{Preset, PresetName};
use crate::snn::{NetworkSpec, NeuronConfig, Role};

pub const DATA_DIR_ENV: &str = "SPIKEDISTILL_DATA_DIR";

/// Every key a config file may set, in the order they are echoed.
pub const KEYS: &[&str] = &[
    "preset",
    "dataset",
    "data_dir",
    "role",
    "widths",
    "timesteps",
    "lambda",
    "tau",
    "tau_p",
    "epochs",
    "batch_size",
    "lr",
    "seed",
    "train_subset",
    "alpha",
    "beta",
    "gamma",
    "delta",
    "stride",
    "m",
    "kl_direction",
    "out",
];

/// Keys a `--loss-config` file may set.
pub const LOSS_KEYS: &[&str] = &["alpha", "beta", "gamma", "delta", "stride", "m", "kl_direction"];

/// Raw `key=value` settings, merged layer by layer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, allowed: &[&str]) -> Result<RunConfig> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !allowed.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if values.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: key `{k}` set twice", n + 1)));
            }
        }
        Ok(RunConfig { values })
    }

    pub fn load(path: &Path, allowed: &[&str]) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text, allowed).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// `other` wins on every key it sets.
    pub fn overlay(&mut self, other: &RunConfig) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("`{key}` has unparsable value `{v}`")))
            })
            .transpose()
    }

    /// Applies preset defaults and checks every value.
    pub fn resolve(&self) -> Result<Resolved> {
        let preset = Preset::get(PresetName::parse(self.get("preset").unwrap_or("desk"))?);
        let dataset = DatasetKind::parse(self.get("dataset").unwrap_or("mnist"))?;
        let data_dir = match self.get("data_dir") {
            Some(d) => PathBuf::from(d),
            None => std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from),
        };
        let role = self.get("role").map(Role::parse).transpose()?;
        let widths = self
            .get("widths")
            .map(|w| {
                w.split(',')
                    .map(|x| {
                        x.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("`widths` entry `{x}` is not a positive integer")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let neuron = NeuronConfig {
            tau: self.parsed("tau")?.unwrap_or(NeuronConfig::default().tau),
            tau_p: self.parsed("tau_p")?.unwrap_or(NeuronConfig::default().tau_p),
            lambda_decay: self.parsed("lambda")?.unwrap_or(NeuronConfig::default().lambda_decay),
        };
        neuron.validate()?;
        let seed = self.parsed("seed")?.unwrap_or(0);
        let train = TrainConfig {
            epochs: self.parsed("epochs")?.unwrap_or(preset.epochs),
            batch_size: self.parsed("batch_size")?.unwrap_or(preset.batch_size),
            lr: self.parsed("lr")?.unwrap_or(preset.lr),
            seed,
            timesteps: self.parsed("timesteps")?.unwrap_or(preset.timesteps),
            neuron,
        };
        train.validate()?;
        let train_subset = match self.get("train_subset") {
            None => None,
            Some("all") => Some(None),
            Some(_) => match self.parsed::<usize>("train_subset")? {
                Some(0) => return Err(Error::Config("`train_subset` must be positive or `all`".into())),
                n => Some(n),
            },
        };
        let defaults = preset.loss_config();
        let m = match self.parsed::<u32>("m")? {
            Some(m) => Norm::from_order(m)?,
            None => defaults.m_sliding,
        };
        let kl_direction = match self.get("kl_direction") {
            None => defaults.kl_direction,
            Some("student-teacher") => KlDirection::StudentTeacher,
            Some("teacher-student") => KlDirection::TeacherStudent,
            Some(other) => {
                return Err(Error::Config(format!(
                    "`kl_direction` must be student-teacher or teacher-student, got `{other}`"
                )))
            }
        };
        let loss = DistillLossConfig {
            alpha: self.parsed("alpha")?.unwrap_or(defaults.alpha),
            beta: self.parsed("beta")?.unwrap_or(defaults.beta),
            gamma: self.parsed("gamma")?.unwrap_or(defaults.gamma),
            delta: self.parsed("delta")?.unwrap_or(defaults.delta.min(train.timesteps)),
            m_sliding: m,
            stride: self.parsed("stride")?.unwrap_or(defaults.stride),
            kl_direction,
        };
        loss.validate(train.timesteps)?;
        Ok(Resolved {
            preset,
            dataset,
            data_dir,
            role,
            widths,
            train,
            train_subset,
            loss,
            out: self.get("out").map(PathBuf::from),
            timesteps_explicit: self.contains("timesteps"),
        })
    }
}

/// A fully typed configuration.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub preset: Preset,
    pub dataset: DatasetKind,
    pub data_dir: PathBuf,
    pub role: Option<Role>,
    pub widths: Option<Vec<usize>>,
    pub train: TrainConfig,
    /// Explicit training-set cap; `Some(None)` means the whole set.
    pub train_subset: Option<Option<usize>>,
    pub loss: DistillLossConfig,
    pub out: Option<PathBuf>,
    /// Whether T came from the file or a flag rather than the preset.
    pub timesteps_explicit: bool,
}

impl Resolved {
    /// Architecture from explicit widths or the preset widths of the role.
    pub fn network(&self, role: Option<Role>) -> Result<NetworkSpec> {
        let role = role.or(self.role);
        let spec = match (&self.widths, role) {
            (Some(w), r) => NetworkSpec {
                widths: w.clone(),
                timesteps: self.train.timesteps,
                neuron: self.train.neuron,
                role: r.unwrap_or(Role::Custom),
            },
            (None, Some(r)) => {
                let mut s = self
                    .preset
                    .network(r, self.dataset.input_dim(), crate::data::NUM_CLASSES)?;
                s.timesteps = self.train.timesteps;
                s.neuron = self.train.neuron;
                s
            }
            (None, None) => return Err(Error::Config("give either a role or explicit widths".into())),
        };
        spec.validate()?;
        if spec.input_dim() != self.dataset.input_dim() {
            return Err(Error::Spec(format!(
                "network takes {} inputs but {} images have {}",
                spec.input_dim(),
                self.dataset.name(),
                self.dataset.input_dim()
            )));
        }
        Ok(spec)
    }

    /// Training-set cap for a run producing a network of `role`: the explicit
    /// setting, else the preset's cap for anything but a teacher.
    pub fn subset_for(&self, role: Role) -> Option<usize> {
        match (self.train_subset, role) {
            (Some(explicit), _) => explicit,
            (None, Role::Teacher) => None,
            (None, _) => self.preset.student_subset,
        }
    }

    /// The settings as `key=value` lines in a fixed order.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let l = &self.loss;
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        line("preset", self.preset.name.name().into());
        line("dataset", self.dataset.name().into());
        line("data_dir", self.data_dir.display().to_string());
        line("role", self.role.map_or("none", Role::name).into());
        line(
            "widths",
            self.widths.as_ref().map_or("none".into(), |w| {
                w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            }),
        );
        line("timesteps", t.timesteps.to_string());
        line("lambda", t.neuron.lambda_decay.to_string());
        line("tau", t.neuron.tau.to_string());
        line("tau_p", t.neuron.tau_p.to_string());
        line("epochs", t.epochs.to_string());
        line("batch_size", t.batch_size.to_string());
        line("lr", t.lr.to_string());
        line("seed", t.seed.to_string());
        let subset = self.train_subset.unwrap_or(match self.role {
            Some(Role::Teacher) => None,
            _ => self.preset.student_subset,
        });
        line("train_subset", subset.map_or("all".into(), |n| n.to_string()));
        line("alpha", l.alpha.to_string());
        line("beta", l.beta.to_string());
        line("gamma", l.gamma.to_string());
        line("delta", l.delta.to_string());
        line("stride", l.stride.to_string());
        line("m", l.m_sliding.order().to_string());
        line(
            "kl_direction",
            match l.kl_direction {
                KlDirection::StudentTeacher => "student-teacher",
                KlDirection::TeacherStudent => "teacher-student",
            }
            .into(),
        );
        line(
            "out",
            self.out.as_ref().map_or("none".into(), |p| p.display().to_string()),
        );
        out
    }
}
