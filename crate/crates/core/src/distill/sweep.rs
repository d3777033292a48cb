use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::autodiff::{AdamState, Norm};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::snn::{Network, NetworkSpec};
use crate::store::write_atomic;

use super::losses::{DistillLossConfig, Objective};
use super::train::{distill_epoch_with_targets, evaluate, TeacherTargets, TrainConfig};

/// Interior points of the weight simplex on a grid of spacing `step`, in
/// lexicographic `(alpha, beta)` order.
pub fn grid_points(step: f64) -> Result<Vec<(f64, f64, f64)>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("grid step must lie in (0, 1], got {step}")));
    }
    let n = (1.0 / step).round() as usize;
    if (n as f64 * step - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("grid step {step} does not divide 1")));
    }
    let mut points = Vec::new();
    for i in 1..n {
        for j in 1..n - i {
            let k = n - i - j;
            points.push((i as f64 / n as f64, j as f64 / n as f64, k as f64 / n as f64));
        }
    }
    if points.is_empty() {
        return Err(Error::Config(format!(
            "grid step {step} leaves no point with all three weights positive"
        )));
    }
    Ok(points)
}

/// Runs `work` over `0..count` on up to `jobs` threads, returning results in index order.
fn run_parallel<T: Send>(count: usize, jobs: usize, work: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let jobs = jobs.clamp(1, count.max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..count).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= count {
                    break;
                }
                let r = work(i);
                results.lock().expect("no panics while held")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no panics while held")
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect()
}

/// Trains a fresh student against precomputed targets and returns its accuracy on `eval`.
fn short_run(
    targets: &TeacherTargets,
    student_spec: &NetworkSpec,
    train: &ImageDataset,
    eval: &ImageDataset,
    cfg: &TrainConfig,
    objective: &Objective,
) -> Result<f64> {
    let mut student = Network::new(student_spec.clone(), cfg.seed)?;
    let mut opt = AdamState::new(student.params(), cfg.lr);
    for epoch in 1..=cfg.epochs {
        distill_epoch_with_targets(targets, &mut student, train, cfg, objective, &mut opt, epoch)?;
    }
    evaluate(&student, eval)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchConfig {
    pub step: f64,
    pub delta: usize,
    pub m_sliding: Norm,
    /// Fraction of the training set held out for scoring.
    pub validation_fraction: f64,
    /// Fraction of the remaining training set each grid point trains on.
    pub subset_fraction: f64,
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRow {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub best: DistillLossConfig,
    pub table: Vec<WeightRow>,
}

/// Short-budget distillation at every grid point, scored on a validation
/// split carved from `train`. `cfg.epochs` is the per-point budget. Ties go to
/// the earliest grid point.
pub fn grid_search_weights(
    teacher: &Network,
    student_spec: &NetworkSpec,
    train: &ImageDataset,
    cfg: &TrainConfig,
    search: &GridSearchConfig,
) -> Result<GridSearchResult> {
    let points = grid_points(search.step)?;
    cfg.validate()?;
    if !(search.subset_fraction > 0.0 && search.subset_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "subset fraction must lie in (0, 1], got {}",
            search.subset_fraction
        )));
    }
    let probe = DistillLossConfig::new(points[0].0, points[0].1, points[0].2, search.delta);
    probe.validate(student_spec.timesteps)?;
    let (rest, validation) = train.split_validation(search.validation_fraction, cfg.seed)?;
    let keep = ((rest.len() as f64 * search.subset_fraction).round() as usize).max(cfg.batch_size);
    let subset = rest.head(keep.min(rest.len()));
    let targets = TeacherTargets::compute(teacher, &subset)?;
    let accuracies = run_parallel(points.len(), search.jobs, |i| {
        let (a, b, g) = points[i];
        let mut loss = DistillLossConfig::new(a, b, g, search.delta);
        loss.m_sliding = search.m_sliding;
        short_run(
            &targets,
            student_spec,
            &subset,
            &validation,
            cfg,
            &Objective::Combined(loss),
        )
    })?;
    let table: Vec<WeightRow> = points
        .iter()
        .zip(&accuracies)
        .map(|(&(alpha, beta, gamma), &accuracy)| WeightRow {
            alpha,
            beta,
            gamma,
            accuracy,
        })
        .collect();
    let best_row = table
        .iter()
        .fold(&table[0], |best, r| if r.accuracy > best.accuracy { r } else { best });
    let mut best = DistillLossConfig::new(best_row.alpha, best_row.beta, best_row.gamma, search.delta);
    best.m_sliding = search.m_sliding;
    Ok(GridSearchResult { best, table })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowRow {
    pub delta: usize,
    pub m: Norm,
    pub seed: u64,
    pub accuracy: f64,
}

/// One sliding-loss-only distillation per `(delta, seed)`, scored on `eval`.
/// Rows come back sorted by `(delta, seed)`.
#[allow(clippy::too_many_arguments)]
pub fn window_sweep(
    teacher: &Network,
    student_spec: &NetworkSpec,
    train: &ImageDataset,
    eval: &ImageDataset,
    cfg: &TrainConfig,
    deltas: &[usize],
    m: Norm,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<WindowRow>> {
    cfg.validate()?;
    if deltas.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "window sweep needs at least one window and one seed".into(),
        ));
    }
    let t = student_spec.timesteps;
    if let Some(&bad) = deltas.iter().find(|&&d| d == 0 || d > t) {
        return Err(Error::Config(format!("window length {bad} must lie in 1..={t}")));
    }
    let mut keys: Vec<(usize, u64)> = deltas
        .iter()
        .flat_map(|&d| seeds.iter().map(move |&s| (d, s)))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let targets = TeacherTargets::compute(teacher, train)?;
    let accuracies = run_parallel(keys.len(), jobs, |i| {
        let (delta, seed) = keys[i];
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let objective = Objective::Sliding {
            delta,
            norm: m,
            stride: 1,
        };
        short_run(&targets, student_spec, train, eval, &run_cfg, &objective)
    })?;
    Ok(keys
        .iter()
        .zip(accuracies)
        .map(|(&(delta, seed), accuracy)| WindowRow {
            delta,
            m,
            seed,
            accuracy,
        })
        .collect())
}

pub fn format_window_csv(rows: &[WindowRow]) -> String {
    let mut out = String::from("delta,m,seed,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{:.6}", r.delta, r.m.order(), r.seed, r.accuracy);
    }
    out
}

pub fn format_weights_csv(rows: &[WeightRow]) -> String {
    let mut out = String::from("alpha,beta,gamma,accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{:.6},{:.6},{:.6},{:.6}", r.alpha, r.beta, r.gamma, r.accuracy);
    }
    out
}

pub fn write_window_csv(rows: &[WindowRow], path: &Path) -> Result<()> {
    write_atomic(path, format_window_csv(rows).as_bytes())
}

pub fn write_weights_csv(rows: &[WeightRow], path: &Path) -> Result<()> {
    write_atomic(path, format_weights_csv(rows).as_bytes())
}
