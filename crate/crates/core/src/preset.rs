//! Named bundles of experiment settings.

use crate::autodiff::{AdamState, Norm};
use crate::distill::{DistillLossConfig, KlDirection, TrainConfig};
use crate::error::{Error, Result};
use crate::snn::{NetworkSpec, NeuronConfig, Role};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetName {
    Desk,
    Paper,
}

impl PresetName {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(PresetName::Desk),
            "paper" => Ok(PresetName::Paper),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk or paper)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PresetName::Desk => "desk",
            PresetName::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: PresetName,
    pub timesteps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Hidden widths per role; input and class widths are added per dataset.
    pub teacher_hidden: Vec<usize>,
    pub ta_hidden: Vec<usize>,
    pub student_hidden: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: usize,
    /// Training samples used when training anything but a teacher; `None` means all.
    pub student_subset: Option<usize>,
}

impl Preset {
    pub fn get(name: PresetName) -> Preset {
        match name {
            PresetName::Desk => Preset {
                name,
                timesteps: 32,
                epochs: 10,
                batch_size: 64,
                lr: AdamState::DEFAULT_LR,
                teacher_hidden: vec![256, 192, 128, 96, 64],
                ta_hidden: vec![128, 64, 32],
                student_hidden: vec![100],
                alpha: 0.1,
                beta: 0.1,
                gamma: 0.8,
                delta: 32,
                student_subset: Some(20_000),
            },
            PresetName::Paper => Preset {
                name,
                timesteps: 128,
                epochs: 100,
                batch_size: 64,
                lr: AdamState::DEFAULT_LR,
                teacher_hidden: vec![400, 300, 200, 100, 50],
                ta_hidden: vec![300, 150, 50],
                student_hidden: vec![100],
                alpha: 0.4,
                beta: 0.3,
                gamma: 0.3,
                delta: 128,
                student_subset: None,
            },
        }
    }

    pub fn hidden(&self, role: Role) -> Result<&[usize]> {
        match role {
            Role::Teacher => Ok(&self.teacher_hidden),
            Role::Ta => Ok(&self.ta_hidden),
            Role::Student => Ok(&self.student_hidden),
            Role::Custom => Err(Error::Config("the custom role needs explicit widths".into())),
        }
    }

    pub fn network(&self, role: Role, input_dim: usize, classes: usize) -> Result<NetworkSpec> {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(self.hidden(role)?);
        widths.push(classes);
        let spec = NetworkSpec {
            widths,
            timesteps: self.timesteps,
            neuron: NeuronConfig::default(),
            role,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            timesteps: self.timesteps,
            neuron: NeuronConfig::default(),
        }
    }

    pub fn loss_config(&self) -> DistillLossConfig {
        DistillLossConfig {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            delta: self.delta,
            m_sliding: Norm::L1,
            stride: 1,
            kl_direction: KlDirection::StudentTeacher,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_internally_valid() {
        for name in [PresetName::Desk, PresetName::Paper] {
            let p = Preset::get(name);
            p.loss_config().validate(p.timesteps).unwrap();
            p.train_config(0).validate().unwrap();
            for role in [Role::Teacher, Role::Ta, Role::Student] {
                let spec = p.network(role, 784, 10).unwrap();
                assert_eq!(spec.classes(), 10);
            }
            assert_eq!(p.network(Role::Teacher, 784, 10).unwrap().depth(), 6);
            assert_eq!(p.network(Role::Ta, 784, 10).unwrap().depth(), 4);
            assert_eq!(p.network(Role::Student, 784, 10).unwrap().depth(), 2);
        }
    }

    #[test]
    fn custom_role_has_no_preset_widths() {
        assert!(Preset::get(PresetName::Desk).network(Role::Custom, 784, 10).is_err());
        assert!(PresetName::parse("huge").is_err());
    }
}
