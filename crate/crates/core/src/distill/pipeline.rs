use super::losses::Objective;
use super::train::{distill, MetricsRecord, TrainConfig};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::snn::{Network, NetworkSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Teacher → teacher assistant.
    Assistant,
    /// Teacher assistant → student.
    Student,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Assistant => "stage 1 (teacher -> ta)",
            Stage::Student => "stage 2 (ta -> student)",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub ta: TrainConfig,
    pub student: TrainConfig,
    pub objective: Objective,
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub ta: Network,
    pub student: Network,
    pub ta_metrics: Vec<MetricsRecord>,
    pub student_metrics: Vec<MetricsRecord>,
}

fn in_stage<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: stage.name().to_string(),
        source: Box::new(e),
    })
}

/// Distills teacher → TA, freezes the TA, then distills TA → student.
///
/// `on_stage` runs after each stage with the freshly trained network so its
/// artifacts are on disk before the next stage starts; an error from it aborts
/// the pipeline under that stage's name.
pub fn multistage_pipeline(
    teacher: &Network,
    ta_spec: NetworkSpec,
    student_spec: NetworkSpec,
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &PipelineConfig,
    mut on_stage: impl FnMut(Stage, &Network, &[MetricsRecord]) -> Result<()>,
) -> Result<PipelineOutput> {
    let mut ta = in_stage(Stage::Assistant, Network::new(ta_spec, cfg.ta.seed))?;
    let ta_metrics = in_stage(
        Stage::Assistant,
        distill(teacher, &mut ta, train, test, &cfg.ta, &cfg.objective),
    )?;
    ta.freeze();
    in_stage(Stage::Assistant, on_stage(Stage::Assistant, &ta, &ta_metrics))?;

    let mut student = in_stage(Stage::Student, Network::new(student_spec, cfg.student.seed))?;
    let student_metrics = in_stage(
        Stage::Student,
        distill(&ta, &mut student, train, test, &cfg.student, &cfg.objective),
    )?;
    in_stage(Stage::Student, on_stage(Stage::Student, &student, &student_metrics))?;
    Ok(PipelineOutput {
        ta,
        student,
        ta_metrics,
        student_metrics,
    })
}
