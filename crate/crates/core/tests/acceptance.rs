//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. MNIST is read from `data/mnist` at the
//! workspace root or from `$SPIKEDISTILL_DATA_DIR/mnist`.

mod common;

use std::fs;
use std::io::Read;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spikedistill::autodiff::{Mode, Norm, Tape};
use spikedistill::data::{
    encode_constant, load_cifar10, load_dataset, load_idx, parse_cifar10, parse_idx_images, parse_idx_labels,
    DatasetKind, ImageDataset, Split,
};
use spikedistill::distill::{
    combined_loss, distill, evaluate, evaluate_with_loss, full_lm_loss, kl_loss, multistage_pipeline, nll_loss,
    sliding_lm_loss, train_supervised, DistillLossConfig, Objective, PipelineConfig,
};
use spikedistill::preset::{Preset, PresetName};
use spikedistill::snn::{classify_logits, neuron_step, Network, NetworkSpec, NeuronConfig, Role};
use spikedistill::store::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta};
use spikedistill::Error;

type Check = std::result::Result<String, String>;

struct Mnist {
    train: ImageDataset,
    test: ImageDataset,
}

#[derive(Default)]
struct Context {
    mnist: Option<Mnist>,
    mnist_error: String,
    teacher: Option<(Network, f64)>,
    direct_students: Vec<f64>,
}

fn data_root() -> PathBuf {
    if let Some(dir) = std::env::var_os("SPIKEDISTILL_DATA_DIR") {
        return PathBuf::from(dir);
    }
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn load_mnist(ctx: &mut Context) {
    let root = data_root();
    let load = |split| load_dataset(DatasetKind::Mnist, &root, split);
    match (load(Split::Train), load(Split::Test)) {
        (Ok(train), Ok(test)) => ctx.mnist = Some(Mnist { train, test }),
        (Err(e), _) | (_, Err(e)) => {
            ctx.mnist_error = format!(
                "MNIST not available under {} ({e}); run scripts/fetch-mnist.sh",
                root.join("mnist").display()
            )
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

// 1. Analytic gradients of the whole classification pipeline against central differences.

fn pipeline_loss(net: &Network, ds: &ImageDataset, idx: &[usize]) -> (f64, Network) {
    let mut net = net.clone();
    net.reset_state();
    let batch = encode_constant(ds, idx, net.spec().timesteps).unwrap();
    let mut tape = Tape::new();
    let trace = net.forward(&mut tape, &batch, Mode::Train).unwrap();
    let logits = classify_logits(&mut tape, trace.sat).unwrap();
    let loss = nll_loss(&mut tape, logits, &batch.labels).unwrap();
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss).unwrap();
    net.zero_grad();
    net.accumulate_grads(&grads, &trace).unwrap();
    (value, net)
}

fn gradient_check(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 6;
    let images: Vec<u8> = (0..n * 9).map(|_| rng.gen()).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..10)).collect();
    let ds = ImageDataset::new(images, labels, 3, 3, Split::Train).unwrap();
    let spec = NetworkSpec {
        widths: vec![9, 10, 10],
        timesteps: 8,
        neuron: NeuronConfig::default(),
        role: Role::Custom,
    };
    let mut net = Network::new(spec, seed).unwrap();
    // Shift the batch-norm offsets so the units spike at a mix of timesteps.
    for l in net.layers_mut() {
        for b in l.bn.beta.data_mut() {
            *b = rng.gen_range(0.5..1.5);
        }
        for g in l.bn.gamma.data_mut() {
            *g = rng.gen_range(0.5..1.5);
        }
    }
    let idx: Vec<usize> = (0..n).collect();
    let (_, with_grads) = pipeline_loss(&net, &ds, &idx);
    let analytic: Vec<f64> = with_grads
        .params()
        .iter()
        .flat_map(|p| p.grad().unwrap().to_vec())
        .collect();

    let h = 1e-6;
    let mut numeric = Vec::with_capacity(analytic.len());
    let count = net.params().len();
    for p in 0..count {
        for i in 0..net.params()[p].len() {
            let mut plus = net.clone();
            plus.params_mut()[p].data_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[p].data_mut()[i] -= h;
            let lp = pipeline_loss(&plus, &ds, &idx).0;
            let lm = pipeline_loss(&minus, &ds, &idx).0;
            numeric.push((lp - lm) / (2.0 * h));
        }
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-3 * scale))
        .fold(0.0f64, f64::max);
    (diff / na.max(nn), worst)
}

fn criterion_1(_: &mut Context) -> Check {
    let start = Instant::now();
    let mut worst_norm = 0.0f64;
    let mut worst_elem = 0.0f64;
    for seed in 1..=5 {
        let (norm, elem) = gradient_check(seed);
        worst_norm = worst_norm.max(norm);
        worst_elem = worst_elem.max(elem);
    }
    let secs = start.elapsed().as_secs_f64();
    let detail =
        format!("5 seeds, max relative error {worst_norm:.2e} (vector), {worst_elem:.2e} (per element); {secs:.1}s");
    if worst_norm < 1e-4 && worst_elem < 1e-4 && secs < 30.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 2. Neuron dynamics against hand-computed traces.

fn criterion_2(_: &mut Context) -> Check {
    // (input, previous excitation, decay) -> (output, next excitation), with
    // threshold 1.0 and penalty threshold 1.5.
    let table: [(f64, f64, f64, f64, f64); 12] = [
        (2.0, 0.0, 0.9, 1.0, -1.0),
        (0.5, 0.0, 0.9, 0.0, 0.5),
        (1.0, 0.0, 0.9, 0.0, 1.0),
        (3.0, 0.0, 0.9, 2.0, -1.5),
        (0.5, 1.0, 0.5, 0.0, 1.0),
        (1.0, 1.0, 0.5, 0.5, -0.75),
        (0.0, 4.0, 0.75, 2.0, -1.5),
        (-1.0, 2.0, 0.5, 0.0, 0.0),
        (2.0, -2.0, 0.75, 0.0, 0.5),
        (1.25, 1.0, 0.25, 0.5, -0.75),
        (-0.5, -1.0, 0.5, 0.0, -1.0),
        (5.0, 2.0, 0.5, 5.0, -3.0),
    ];
    let mut mismatches = Vec::new();
    for (n, &(i, xp, lambda, y_want, x_want)) in table.iter().enumerate() {
        let cfg = NeuronConfig {
            lambda_decay: lambda,
            ..NeuronConfig::default()
        };
        let mut tape = Tape::new();
        let iv = tape.constant(&[1], vec![i]).unwrap();
        let xv = tape.constant(&[1], vec![xp]).unwrap();
        let (y, x) = neuron_step(&mut tape, iv, xv, &cfg).unwrap();
        let (y, x) = (tape.value(y)[0], tape.value(x)[0]);
        if y != y_want || x != x_want {
            mismatches.push(format!("case {n}: got ({y}, {x}), want ({y_want}, {x_want})"));
        }
    }
    // Post-spike identity x_next = -0.5 x for arbitrary supra-threshold excitations.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = NeuronConfig::default();
    for _ in 0..1000 {
        let x: f64 = rng.gen_range(1.0001..1e6);
        let mut tape = Tape::new();
        let iv = tape.constant(&[1], vec![x]).unwrap();
        let xv = tape.constant(&[1], vec![0.0]).unwrap();
        let (_, next) = neuron_step(&mut tape, iv, xv, &cfg).unwrap();
        if tape.value(next)[0] != -0.5 * x {
            mismatches.push(format!("post-spike identity fails at x={x}"));
            break;
        }
    }
    // Three-step hand unroll through the fused layer recurrence, decay 0.5.
    let mut tape = Tape::new();
    let input = tape.constant(&[3, 1], vec![2.0, 2.0, 2.0]).unwrap();
    let (out, state) = tape.spiking(input, 1, &[0.0], 0.5, 1.0, 1.5, 0).unwrap();
    if tape.value(out) != [1.0, 0.5, 0.625] || state != [-0.8125] {
        mismatches.push(format!("unrolled trace {:?} / {state:?}", tape.value(out)));
    }
    if mismatches.is_empty() {
        Ok(format!(
            "{} scripted cases, 1000 post-spike identities, 3-step unroll exact",
            table.len()
        ))
    } else {
        Err(mismatches.join("; "))
    }
}

// 3. Loss identities on random SAT pairs.

fn loss_values(
    t: &[f64],
    s: &[f64],
    dims: [usize; 3],
    f: impl Fn(&mut Tape, spikedistill::autodiff::Var, spikedistill::autodiff::Var) -> spikedistill::autodiff::Var,
) -> f64 {
    let mut tape = Tape::new();
    let a = tape.constant(&dims, t.to_vec()).unwrap();
    let b = tape.constant(&dims, s.to_vec()).unwrap();
    let v = f(&mut tape, a, b);
    tape.value(v)[0]
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn criterion_3(_: &mut Context) -> Check {
    let (t, c, b) = (16, 10, 4);
    let dims = [t, c, b];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 4];
    let mut failures = Vec::new();
    for pair in 0..100 {
        let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..t * c * b)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        0.0
                    } else {
                        rng.gen_range(0.0..4.0)
                    }
                })
                .collect()
        };
        let st = mk(&mut rng);
        let ss = mk(&mut rng);
        let delta = rng.gen_range(1..=t);
        let weights = {
            let a: f64 = rng.gen_range(0.05..1.0);
            let bb: f64 = rng.gen_range(0.05..1.0);
            let g: f64 = rng.gen_range(0.05..1.0);
            let sum = a + bb + g;
            (a / sum, bb / sum, 1.0 - a / sum - bb / sum)
        };
        let cfg = DistillLossConfig::new(weights.0, weights.1, weights.2, delta);

        let full1 = loss_values(&st, &ss, dims, |tp, x, y| full_lm_loss(tp, x, y, Norm::L1).unwrap());
        let full2 = loss_values(&st, &ss, dims, |tp, x, y| full_lm_loss(tp, x, y, Norm::L2).unwrap());
        let kl = loss_values(&st, &ss, dims, |tp, x, y| kl_loss(tp, y, x).unwrap());
        let slide1 = loss_values(&st, &ss, dims, |tp, x, y| {
            sliding_lm_loss(tp, x, y, delta, Norm::L1, 1).unwrap()
        });
        let slide2 = loss_values(&st, &ss, dims, |tp, x, y| {
            sliding_lm_loss(tp, x, y, delta, Norm::L2, 1).unwrap()
        });
        let whole1 = loss_values(&st, &ss, dims, |tp, x, y| {
            sliding_lm_loss(tp, x, y, t, Norm::L1, 1).unwrap()
        });
        let whole2 = loss_values(&st, &ss, dims, |tp, x, y| {
            sliding_lm_loss(tp, x, y, t, Norm::L2, 1).unwrap()
        });
        let comb = loss_values(&st, &ss, dims, |tp, x, y| combined_loss(tp, x, y, &cfg).unwrap());

        for (name, v) in [
            ("full L1", full1),
            ("full L2", full2),
            ("kl", kl),
            ("sliding L1", slide1),
            ("sliding L2", slide2),
            ("combined", comb),
        ] {
            if !(v >= 0.0) {
                failures.push(format!("pair {pair}: {name} = {v}"));
            }
        }
        for (name, v) in [
            (
                "full L1",
                loss_values(&st, &st, dims, |tp, x, y| full_lm_loss(tp, x, y, Norm::L1).unwrap()),
            ),
            (
                "full L2",
                loss_values(&st, &st, dims, |tp, x, y| full_lm_loss(tp, x, y, Norm::L2).unwrap()),
            ),
            ("kl", loss_values(&st, &st, dims, |tp, x, y| kl_loss(tp, y, x).unwrap())),
            (
                "sliding",
                loss_values(&st, &st, dims, |tp, x, y| {
                    sliding_lm_loss(tp, x, y, delta, Norm::L1, 1).unwrap()
                }),
            ),
            (
                "combined",
                loss_values(&st, &st, dims, |tp, x, y| combined_loss(tp, x, y, &cfg).unwrap()),
            ),
        ] {
            if v != 0.0 {
                failures.push(format!("pair {pair}: {name} of equal SATs = {v}"));
            }
        }

        // Coverage oracle: element at step τ lies in min(τ+1, Δ, T−τ, T−Δ+1) windows.
        let mut covered = 0.0;
        for step in 0..t {
            let cov = (step + 1).min(delta).min(t - step).min(t - delta + 1) as f64;
            for j in 0..c {
                for k in 0..b {
                    let i = (step * c + j) * b + k;
                    covered += (st[i] - ss[i]).abs() * cov;
                }
            }
        }
        covered /= b as f64;

        let weighted = cfg.alpha * slide1 + cfg.beta * full2 + cfg.gamma * kl;
        let errs = [
            rel(whole1, full1).max(rel(whole2, full2)),
            rel(slide1, covered),
            rel(comb, weighted),
            0.0,
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let detail = format!(
        "100 pairs; sliding(T) vs full {:.1e}, coverage identity {:.1e}, combined vs weighted sum {:.1e}",
        worst[0], worst[1], worst[2]
    );
    if failures.is_empty() && worst[0] <= 1e-12 && worst[1] <= 1e-12 && worst[2] <= 1e-12 {
        Ok(detail)
    } else {
        failures.truncate(5);
        Err(format!("{detail}; {}", failures.join("; ")))
    }
}

// 4. Desk-scale teacher on full MNIST.

fn criterion_4(ctx: &mut Context) -> Check {
    let Some(m) = &ctx.mnist else {
        return Err(ctx.mnist_error.clone());
    };
    let preset = Preset::get(PresetName::Desk);
    let spec = preset.network(Role::Teacher, 784, 10).map_err(|e| e.to_string())?;
    let cfg = preset.train_config(1);
    let start = Instant::now();
    let mut teacher = Network::new(spec, cfg.seed).map_err(|e| e.to_string())?;
    train_supervised(&mut teacher, &m.train, &m.test, &cfg).map_err(|e| e.to_string())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let acc = evaluate(&teacher, &m.test).map_err(|e| e.to_string())?;
    teacher.freeze();
    ctx.teacher = Some((teacher, acc));
    let detail = format!(
        "{} train samples, {} epochs, T={}: test accuracy {} in {minutes:.1} min (single thread)",
        m.train.len(),
        cfg.epochs,
        cfg.timesteps,
        pct(acc)
    );
    if acc >= 0.96 && minutes < 30.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn student_data(ctx: &Context) -> std::result::Result<(ImageDataset, &ImageDataset, Preset), String> {
    let m = ctx.mnist.as_ref().ok_or_else(|| ctx.mnist_error.clone())?;
    let preset = Preset::get(PresetName::Desk);
    let train = match preset.student_subset {
        Some(n) => m.train.head(n),
        None => m.train.clone(),
    };
    Ok((train, &m.test, preset))
}

// 5. Label-free distillation against scratch training and the teacher.

fn criterion_5(ctx: &mut Context) -> Check {
    let (train, test, preset) = student_data(ctx)?;
    let (teacher, teacher_acc) = ctx.teacher.as_ref().ok_or("needs the teacher from criterion 4")?;
    let spec = preset.network(Role::Student, 784, 10).map_err(|e| e.to_string())?;
    let objective = Objective::Combined(preset.loss_config());
    let mut scratch = Vec::new();
    let mut distilled = Vec::new();
    for seed in 1..=3 {
        let cfg = preset.train_config(seed);
        let mut s = Network::new(spec.clone(), seed).map_err(|e| e.to_string())?;
        train_supervised(&mut s, &train, test, &cfg).map_err(|e| e.to_string())?;
        scratch.push(evaluate(&s, test).map_err(|e| e.to_string())?);
        let mut d = Network::new(spec.clone(), seed).map_err(|e| e.to_string())?;
        distill(teacher, &mut d, &train, test, &cfg, &objective).map_err(|e| e.to_string())?;
        distilled.push(evaluate(&d, test).map_err(|e| e.to_string())?);
    }
    ctx.direct_students = distilled.clone();
    let (ms, md) = (median(scratch.clone()), median(distilled.clone()));
    let detail = format!(
        "median distilled {} (runs {:?}) vs scratch {} (runs {:?}), teacher {}; need >= {} and >= {}",
        pct(md),
        distilled.iter().map(|&a| pct(a)).collect::<Vec<_>>(),
        pct(ms),
        scratch.iter().map(|&a| pct(a)).collect::<Vec<_>>(),
        pct(*teacher_acc),
        pct(ms - 0.005),
        pct(teacher_acc - 0.025)
    );
    if md >= ms - 0.005 && md >= teacher_acc - 0.025 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 6. Teacher -> assistant -> student against direct teacher -> student.

fn criterion_6(ctx: &mut Context) -> Check {
    let (train, test, preset) = student_data(ctx)?;
    let (teacher, _) = ctx.teacher.as_ref().ok_or("needs the teacher from criterion 4")?;
    if ctx.direct_students.len() != 3 {
        return Err("needs the direct students from criterion 5".into());
    }
    let ta_spec = preset.network(Role::Ta, 784, 10).map_err(|e| e.to_string())?;
    let student_spec = preset.network(Role::Student, 784, 10).map_err(|e| e.to_string())?;
    let mut chained = Vec::new();
    for seed in 1..=3 {
        let cfg = PipelineConfig {
            ta: preset.train_config(seed),
            student: preset.train_config(seed),
            objective: Objective::Combined(preset.loss_config()),
        };
        let out = multistage_pipeline(
            teacher,
            ta_spec.clone(),
            student_spec.clone(),
            &train,
            test,
            &cfg,
            |_, _, _| Ok(()),
        )
        .map_err(|e| e.to_string())?;
        chained.push(evaluate(&out.student, test).map_err(|e| e.to_string())?);
    }
    let (mc, md) = (median(chained.clone()), median(ctx.direct_students.clone()));
    let detail = format!(
        "median T->TA->S {} (runs {:?}) vs T->S {}; need >= {}",
        pct(mc),
        chained.iter().map(|&a| pct(a)).collect::<Vec<_>>(),
        pct(md),
        pct(md - 0.002)
    );
    if mc >= md - 0.002 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 7. Frozen teacher and run determinism through the command line.

fn cli(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_spikedistill"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn criterion_7(ctx: &mut Context) -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (data, source) = if ctx.mnist.is_some() {
        (data_root(), "MNIST subset")
    } else {
        let d = tmp.path().join("data");
        common::write_synthetic_mnist(&d, 400, 100);
        (d, "synthetic digits")
    };
    let data = data.to_str().unwrap().to_string();
    let out = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let shared = [
        "--data-dir",
        data.as_str(),
        "--timesteps",
        "8",
        "--batch-size",
        "32",
        "--train-subset",
        "400",
    ];
    let mut train_args = vec![
        "train",
        "--role",
        "teacher",
        "--widths",
        "784,32,16,10",
        "--epochs",
        "2",
        "--seed",
        "4",
    ];
    train_args.extend_from_slice(&shared);
    let t_out = out("teacher");
    cli(&[train_args.as_slice(), &["--out", &t_out]].concat())?;
    let teacher = Path::new(&t_out).join("checkpoints/teacher.ckpt");
    let before = fs::read(&teacher).map_err(|e| e.to_string())?;

    let mut runs = Vec::new();
    for name in ["run-a", "run-b"] {
        let dir = out(name);
        let mut args = vec![
            "distill",
            "--teacher",
            teacher.to_str().unwrap(),
            "--widths",
            "784,16,10",
            "--epochs",
            "2",
            "--seed",
            "9",
            "--delta",
            "4",
        ];
        args.extend_from_slice(&shared);
        args.extend_from_slice(&["--out", &dir]);
        cli(&args)?;
        let ckpt = fs::read(Path::new(&dir).join("checkpoints/custom.ckpt")).map_err(|e| e.to_string())?;
        let csv = fs::read(Path::new(&dir).join("metrics/custom.csv")).map_err(|e| e.to_string())?;
        runs.push((ckpt, csv));
    }
    let mut trains = Vec::new();
    for name in ["sup-a", "sup-b"] {
        let dir = out(name);
        cli(&[train_args.as_slice(), &["--out", &dir]].concat())?;
        trains.push((
            fs::read(Path::new(&dir).join("checkpoints/teacher.ckpt")).map_err(|e| e.to_string())?,
            fs::read(Path::new(&dir).join("metrics/teacher.csv")).map_err(|e| e.to_string())?,
        ));
    }
    let after = fs::read(&teacher).map_err(|e| e.to_string())?;
    let frozen = before == after;
    let distill_same = runs[0] == runs[1];
    let train_same = trains[0] == trains[1] && trains[0].0 == before;
    let detail = format!(
        "{source}: teacher bytes unchanged {frozen}; distill reruns identical {distill_same}; train reruns identical {train_same}"
    );
    if frozen && distill_same && train_same {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 8. Parsers against an independent reference reader.

fn gunzip_if_needed(bytes: Vec<u8>) -> Vec<u8> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::MultiGzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .unwrap();
        out
    } else {
        bytes
    }
}

fn be32(b: &[u8], at: usize) -> usize {
    ((b[at] as usize) << 24) | ((b[at + 1] as usize) << 16) | ((b[at + 2] as usize) << 8) | b[at + 3] as usize
}

/// Minimal IDX reader: (count, record size, records as slices of the raw bytes).
fn reference_idx(bytes: &[u8]) -> (usize, usize, usize) {
    let dims = bytes[3] as usize;
    let count = be32(bytes, 4);
    let record: usize = (1..dims).map(|d| be32(bytes, 4 + 4 * d)).product();
    (count, record, 4 + 4 * dims)
}

fn reference_gray(rec: &[u8], pixel: usize) -> u8 {
    let (r, g, b) = (
        rec[1 + pixel] as f64,
        rec[1 + 1024 + pixel] as f64,
        rec[1 + 2048 + pixel] as f64,
    );
    ((299.0 * r + 587.0 * g + 114.0 * b) / 1000.0).round() as u8
}

fn compare_idx(images: &Path, labels: &Path, rng: &mut ChaCha8Rng) -> std::result::Result<usize, String> {
    let ds = load_idx(images, labels).map_err(|e| e.to_string())?;
    let ib = gunzip_if_needed(fs::read(images).unwrap());
    let lb = gunzip_if_needed(fs::read(labels).unwrap());
    let (n, size, off) = reference_idx(&ib);
    let (nl, _, loff) = reference_idx(&lb);
    if n != ds.len() || nl != ds.len() || size != ds.pixels() {
        return Err(format!(
            "{}: count/size {n}/{size} vs {}/{}",
            images.display(),
            ds.len(),
            ds.pixels()
        ));
    }
    let mut picks = vec![0, n - 1];
    picks.extend((0..3).map(|_| rng.gen_range(0..n)));
    for i in picks {
        if ds.image(i) != &ib[off + i * size..off + (i + 1) * size] || ds.label(i) != lb[loff + i] as usize {
            return Err(format!("{}: record {i} differs", images.display()));
        }
    }
    Ok(n)
}

fn criterion_8(ctx: &mut Context) -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut notes = Vec::new();

    let idx_dir = if ctx.mnist.is_some() {
        notes.push("MNIST files".to_string());
        data_root().join("mnist")
    } else {
        notes.push("synthetic IDX (MNIST absent)".to_string());
        common::write_synthetic_mnist(tmp.path(), 300, 50);
        tmp.path().join("mnist")
    };
    let pick = |stem: &str| {
        let gz = idx_dir.join(format!("{stem}.gz"));
        if gz.is_file() {
            gz
        } else {
            idx_dir.join(stem)
        }
    };
    for prefix in ["train", "t10k"] {
        let n = compare_idx(
            &pick(&format!("{prefix}-images-idx3-ubyte")),
            &pick(&format!("{prefix}-labels-idx1-ubyte")),
            &mut rng,
        )?;
        notes.push(format!("{prefix} {n} records"));
    }

    let cifar_dir = tmp.path().join("cifar");
    fs::create_dir_all(&cifar_dir).unwrap();
    let mut files = Vec::new();
    let mut raw_all = Vec::new();
    for (i, n) in [37usize, 12, 25].iter().enumerate() {
        let raw = common::cifar_records(*n, 100 + i as u64);
        let path = cifar_dir.join(format!("data_batch_{}.bin", i + 1));
        fs::write(&path, &raw).unwrap();
        files.push(path);
        raw_all.extend(raw);
    }
    let ds = load_cifar10(&files).map_err(|e| e.to_string())?;
    let total = raw_all.len() / 3073;
    if ds.len() != total || ds.pixels() != 1024 {
        return Err(format!("cifar count {} vs {total}", ds.len()));
    }
    let mut picks = vec![0, total - 1];
    picks.extend((0..3).map(|_| rng.gen_range(0..total)));
    for i in picks {
        let rec = &raw_all[i * 3073..(i + 1) * 3073];
        let want: Vec<u8> = (0..1024).map(|p| reference_gray(rec, p)).collect();
        if ds.image(i) != want.as_slice() || ds.label(i) != rec[0] as usize {
            return Err(format!("cifar record {i} differs"));
        }
    }
    notes.push(format!("cifar {total} records over 3 files"));

    // Malformed inputs.
    let (images, labels) = common::synthetic_digits(4, 1);
    let good_img = common::idx_images(&images, 4, 28, 28);
    let good_lbl = common::idx_labels(&labels);
    let mut bad_magic = good_img.clone();
    bad_magic[3] = 0x05;
    let mut errors = vec![
        (
            "truncated images",
            matches!(parse_idx_images(&good_img[..good_img.len() - 1]), Err(Error::Length(_))),
        ),
        (
            "bad magic",
            matches!(parse_idx_images(&bad_magic), Err(Error::Format(_))),
        ),
        (
            "short header",
            matches!(parse_idx_labels(&good_lbl[..5]), Err(Error::Length(_))),
        ),
        (
            "ragged cifar",
            matches!(parse_cifar10(&vec![0u8; 3073 * 2 + 7]), Err(Error::Format(_))),
        ),
    ];
    let img_path = tmp.path().join("imgs");
    let lbl_path = tmp.path().join("lbls");
    fs::write(&img_path, &good_img).unwrap();
    fs::write(&lbl_path, common::idx_labels(&labels[..3])).unwrap();
    errors.push((
        "count mismatch",
        matches!(load_idx(&img_path, &lbl_path), Err(Error::Consistency(_))),
    ));
    fs::write(&img_path, [0x1f, 0x8b, 0x08, 0x00, 0x01]).unwrap();
    errors.push((
        "broken gzip",
        matches!(load_idx(&img_path, &lbl_path), Err(Error::Format(_))),
    ));
    let missing: Vec<&str> = errors.iter().filter(|e| !e.1).map(|e| e.0).collect();
    if !missing.is_empty() {
        return Err(format!("wrong error for: {}", missing.join(", ")));
    }
    notes.push(format!("{} malformed cases rejected", errors.len()));
    Ok(notes.join("; "))
}

// 9. Save, load, evaluate.

fn criterion_9(ctx: &mut Context) -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (net, ds, what) = match (&ctx.teacher, &ctx.mnist) {
        (Some((t, _)), Some(m)) => (t.clone(), m.test.head(64), "desk teacher on 64 MNIST test images"),
        _ => {
            let d = tmp.path().join("data");
            common::write_synthetic_mnist(&d, 128, 64);
            let train = load_dataset(DatasetKind::Mnist, &d, Split::Train).unwrap();
            let test = load_dataset(DatasetKind::Mnist, &d, Split::Test).unwrap();
            let spec = NetworkSpec {
                widths: vec![784, 20, 10],
                timesteps: 8,
                neuron: NeuronConfig::default(),
                role: Role::Student,
            };
            let mut net = Network::new(spec, 5).unwrap();
            let mut cfg = Preset::get(PresetName::Desk).train_config(5);
            cfg.epochs = 2;
            cfg.timesteps = 8;
            train_supervised(&mut net, &train, &test, &cfg).map_err(|e| e.to_string())?;
            (net, test, "synthetic student on 64 images (MNIST absent)")
        }
    };
    let path = tmp.path().join("net.ckpt");
    let meta = CheckpointMeta { seed: 1, epoch: 10 };
    let (loss_before, acc_before) = evaluate_with_loss(&net, &ds).map_err(|e| e.to_string())?;
    let idx: Vec<usize> = (0..64).collect();
    let batch = encode_constant(&ds, &idx, net.spec().timesteps).unwrap();
    let sat_before = net.infer(&batch).map_err(|e| e.to_string())?;
    save_checkpoint(&net, &path, &meta).map_err(|e| e.to_string())?;
    let (loaded, _) = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let (loss_after, acc_after) = evaluate_with_loss(&loaded, &ds).map_err(|e| e.to_string())?;
    let sat_after = loaded.infer(&batch).map_err(|e| e.to_string())?;
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let same_sat = bits(sat_before.data()) == bits(sat_after.data());
    let same_eval = loss_before.to_bits() == loss_after.to_bits() && acc_before.to_bits() == acc_after.to_bits();
    let bytes = fs::read(&path).unwrap();
    let resaved = encode_checkpoint(&decode_checkpoint(&bytes).unwrap().0, &meta).unwrap() == bytes;
    let detail = format!(
        "{what}: accuracy {} -> {}, SAT bit-equal {same_sat}, loss bit-equal {same_eval}, resave identical {resaved}",
        pct(acc_before),
        pct(acc_after)
    );
    if same_sat && same_eval && resaved {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(&str, &str, fn(&mut Context) -> Check); 9] = [
        ("1", "gradient correctness", criterion_1),
        ("2", "neuron dynamics oracle", criterion_2),
        ("3", "loss identities", criterion_3),
        ("4", "desk teacher accuracy", criterion_4),
        ("5", "distillation effectiveness", criterion_5),
        ("6", "assistant pipeline ordering", criterion_6),
        ("7", "frozen teacher and determinism", criterion_7),
        ("8", "data ingestion", criterion_8),
        ("9", "checkpoint round trip", criterion_9),
    ];
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(str::to_string).collect());
    let mut ctx = Context::default();
    load_mnist(&mut ctx);
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| f(&mut ctx))).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
