//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and whatever it needs for
//! the backward rule. Nodes are only ever appended, so the node list is a
//! topological order and a single reverse sweep visits each node once.

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norm order used by the SAT distance losses. `L2` is the plain sum of squares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Norm {
    L1,
    L2,
}

impl Norm {
    pub fn from_order(m: u32) -> Result<Norm> {
        match m {
            1 => Ok(Norm::L1),
            2 => Ok(Norm::L2),
            other => Err(Error::Config(format!("norm order must be 1 or 2, got {other}"))),
        }
    }

    pub fn order(self) -> u32 {
        match self {
            Norm::L1 => 1,
            Norm::L2 => 2,
        }
    }

    fn apply(self, d: f64) -> f64 {
        match self {
            Norm::L1 => d.abs(),
            Norm::L2 => d * d,
        }
    }

    /// Derivative of `apply` at `d`; zero subgradient at `d = 0` for L1.
    fn slope(self, d: f64) -> f64 {
        match self {
            Norm::L1 => {
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Norm::L2 => 2.0 * d,
        }
    }
}

/// Extents of a spiking activation tensor laid out as `[t, c, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SatDims {
    pub t: usize,
    pub c: usize,
    pub b: usize,
}

impl SatDims {
    #[inline]
    pub fn index(&self, step: usize, class: usize, item: usize) -> usize {
        (step * self.c + class) * self.b + item
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    RepeatRows {
        input: Var,
    },
    Spiking {
        input: Var,
        batch: usize,
        decay: f64,
        penalty: f64,
        gates: Vec<bool>,
    },
    RowsToSat {
        input: Var,
        dims: SatDims,
    },
    TimeMean {
        input: Var,
        dims: SatDims,
    },
    LogSoftmax(Var),
    Nll {
        input: Var,
        labels: Vec<usize>,
    },
    FullDistance {
        target: Var,
        pred: Var,
        norm: Norm,
        batch: usize,
    },
    SlidingDistance {
        target: Var,
        pred: Var,
        norm: Norm,
        dims: SatDims,
        window: usize,
        stride: usize,
    },
    Kl {
        p: Var,
        q: Var,
        dims: SatDims,
        log_p: Vec<f64>,
        log_q: Vec<f64>,
        slice_kl: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation. Rebuilt for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into the tensor's gradient slot.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        let Some(g) = self.get(v) else {
            return Ok(());
        };
        let Some(slot) = tensor.grad_mut() else {
            return Ok(());
        };
        if slot.len() != g.len() {
            return Err(Error::Dimension(format!(
                "gradient of {} values cannot accumulate into slot of {}",
                g.len(),
                slot.len()
            )));
        }
        slot.iter_mut().zip(g).for_each(|(s, d)| *s += d);
        Ok(())
    }
}

fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "{what}: value {} at flat index {pos}",
            values[pos]
        )));
    }
    Ok(())
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension(format!("{what}: expected a matrix, got {shape:?}"))),
    }
}

/// `c = a · b` (+ `c` when `accumulate`), with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe in-bounds row/column walks of `a` (m×k),
    // `b` (k×n) and the contiguous row-major `c` (m×n); callers pass slices of
    // exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the tensor onto the tape. Tracks gradients iff the tensor does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], value: Vec<f64>) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::Dimension(format!(
                "constant of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(shape.to_vec(), value, false, Op::Leaf))
    }

    /// Materializes a recorded value as a standalone (gradient-free) tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape values keep their shape")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        same_shape(self.shape(a), self.shape(b), what)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * k).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).iter().map(|x| x + k).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::AddScalar(a))
    }

    /// Elementwise product with constant coefficients; no gradient flows into
    /// the coefficients.
    pub fn mul_const(&mut self, a: Var, coeff: Vec<f64>) -> Result<Var> {
        if coeff.len() != self.value(a).len() {
            return Err(Error::Dimension(format!(
                "mul_const: {} coefficients for {} values",
                coeff.len(),
                self.value(a).len()
            )));
        }
        let out = self.value(a).iter().zip(&coeff).map(|(x, c)| x * c).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::MulConst(a, coeff)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Relu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::Mean(a))
    }

    /// `out[k, j] = Σᵢ input[k, i] · weight[i, j] + bias[j]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (rows, n) = matrix_dims(self.shape(input), "linear input")?;
        let (wn, m) = matrix_dims(self.shape(weight), "linear weight")?;
        if wn != n {
            return Err(Error::Dimension(format!(
                "linear: input has {n} features but weight expects {wn}"
            )));
        }
        if self.shape(bias) != [m] {
            return Err(Error::Dimension(format!(
                "linear: bias shape {:?}, expected [{m}]",
                self.shape(bias)
            )));
        }
        ensure_finite(self.value(input), "linear input")?;
        ensure_finite(self.value(weight), "linear weight")?;
        ensure_finite(self.value(bias), "linear bias")?;
        let bias_v = self.value(bias);
        let mut out = Vec::with_capacity(rows * m);
        for _ in 0..rows {
            out.extend_from_slice(bias_v);
        }
        gemm(
            rows,
            n,
            m,
            self.value(input),
            (n as isize, 1),
            self.value(weight),
            (m as isize, 1),
            &mut out,
            true,
        );
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(vec![rows, m], out, rg, Op::Linear { input, weight, bias }))
    }

    /// Per-feature normalization over all rows of `input`.
    ///
    /// With `stats = None` the batch statistics are used (train mode) and
    /// returned as `(mean, biased variance)`; with `Some((mean, var))` the given
    /// running statistics are used (eval mode).
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (rows, m) = matrix_dims(self.shape(input), "batch norm input")?;
        if self.shape(gamma) != [m] || self.shape(beta) != [m] {
            return Err(Error::Dimension(format!(
                "batch norm: scale/shift must have shape [{m}]"
            )));
        }
        let x = self.value(input);
        let train = stats.is_none();
        let (mean, var) = match stats {
            Some((mu, var)) => {
                if mu.len() != m || var.len() != m {
                    return Err(Error::Dimension(format!(
                        "batch norm: running statistics must have {m} entries"
                    )));
                }
                (mu.to_vec(), var.to_vec())
            }
            None => {
                if rows < 2 {
                    return Err(Error::Contract(format!(
                        "batch norm in train mode needs at least 2 rows, got {rows} (degenerate variance)"
                    )));
                }
                let mut mean = vec![0.0; m];
                for row in x.chunks_exact(m) {
                    mean.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                }
                mean.iter_mut().for_each(|s| *s /= rows as f64);
                let mut var = vec![0.0; m];
                for row in x.chunks_exact(m) {
                    for j in 0..m {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma);
        let bt = self.value(beta);
        let mut xhat = Vec::with_capacity(rows * m);
        let mut out = Vec::with_capacity(rows * m);
        for row in x.chunks_exact(m) {
            for j in 0..m {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bt[j]);
            }
        }
        ensure_finite(&out, "batch norm output")?;
        let rg = self.rg(&[input, gamma, beta]);
        let v = self.push(
            vec![rows, m],
            out,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((v, mean, var))
    }

    /// `[b, m] → [times·b, m]`, copying the block once per repetition.
    pub fn repeat_rows(&mut self, input: Var, times: usize) -> Result<Var> {
        let (b, m) = matrix_dims(self.shape(input), "repeat_rows input")?;
        if times == 0 {
            return Err(Error::Dimension("repeat_rows: zero repetitions".into()));
        }
        let src = self.value(input);
        let mut out = Vec::with_capacity(times * src.len());
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(vec![times * b, m], out, rg, Op::RepeatRows { input }))
    }

    /// Unrolled membrane recurrence over the timestep-major rows of `input`.
    ///
    /// Per step: `x = i + decay·s`, `y = relu(x − threshold)`, gate `p = y > 0`,
    /// `s' = x·(1 − p·penalty)`. `initial` is the carried-in state `s` (treated as
    /// a constant) and the state after the last step is returned alongside the
    /// stacked outputs. The gate is a constant in the backward sweep.
    #[allow(clippy::too_many_arguments)]
    pub fn spiking(
        &mut self,
        input: Var,
        batch: usize,
        initial: &[f64],
        decay: f64,
        threshold: f64,
        penalty: f64,
        layer: usize,
    ) -> Result<(Var, Vec<f64>)> {
        let (rows, m) = matrix_dims(self.shape(input), "spiking input")?;
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Dimension(format!(
                "spiking: {rows} rows are not a whole number of timesteps of batch {batch}"
            )));
        }
        let width = batch * m;
        if initial.len() != width {
            return Err(Error::Dimension(format!(
                "spiking: membrane state has {} values, expected {width}",
                initial.len()
            )));
        }
        let steps = rows / batch;
        let src = self.value(input);
        let mut state = initial.to_vec();
        let mut out = vec![0.0; rows * m];
        let mut gates = vec![false; rows * m];
        for step in 0..steps {
            let base = step * width;
            for e in 0..width {
                let x = src[base + e] + decay * state[e];
                let y = x - threshold;
                let (y, fired) = if y > 0.0 { (y, true) } else { (0.0, false) };
                out[base + e] = y;
                gates[base + e] = fired;
                state[e] = if fired { x * (1.0 - penalty) } else { x };
            }
            if let Err(Error::Numeric(detail)) = ensure_finite(&state, "membrane") {
                return Err(Error::Numeric(format!("layer {layer}, timestep {step}: {detail}")));
            }
        }
        let rg = self.rg(&[input]);
        let v = self.push(
            vec![rows, m],
            out,
            rg,
            Op::Spiking {
                input,
                batch,
                decay,
                penalty,
                gates,
            },
        );
        Ok((v, state))
    }

    /// Rearranges timestep-major rows `[t·b, c]` into a `[t, c, b]` tensor.
    pub fn rows_to_sat(&mut self, input: Var, batch: usize) -> Result<Var> {
        let (rows, c) = matrix_dims(self.shape(input), "rows_to_sat input")?;
        if batch == 0 || rows % batch != 0 {
            return Err(Error::Dimension(format!(
                "rows_to_sat: {rows} rows do not split into batch {batch}"
            )));
        }
        let dims = SatDims {
            t: rows / batch,
            c,
            b: batch,
        };
        let src = self.value(input);
        let mut out = vec![0.0; src.len()];
        for step in 0..dims.t {
            for k in 0..batch {
                let row = &src[(step * batch + k) * c..][..c];
                for (j, &v) in row.iter().enumerate() {
                    out[dims.index(step, j, k)] = v;
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(vec![dims.t, c, batch], out, rg, Op::RowsToSat { input, dims }))
    }

    fn sat_dims(&self, v: Var, what: &str) -> Result<SatDims> {
        match self.shape(v) {
            [t, c, b] => Ok(SatDims { t: *t, c: *c, b: *b }),
            other => Err(Error::Dimension(format!("{what}: expected [t, c, b], got {other:?}"))),
        }
    }

    /// `[t, c, b] → [b, c]`, averaging over timesteps.
    pub fn time_mean(&mut self, sat: Var) -> Result<Var> {
        let dims = self.sat_dims(sat, "time_mean")?;
        let src = self.value(sat);
        let mut out = vec![0.0; dims.b * dims.c];
        for step in 0..dims.t {
            for j in 0..dims.c {
                for k in 0..dims.b {
                    out[k * dims.c + j] += src[dims.index(step, j, k)];
                }
            }
        }
        let inv = 1.0 / dims.t as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[sat]);
        Ok(self.push(vec![dims.b, dims.c], out, rg, Op::TimeMean { input: sat, dims }))
    }

    /// Max-subtracted log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().expect("non-empty shape");
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        ensure_finite(&out, "log_softmax")?;
        let rg = self.rg(&[a]);
        Ok(self.push(shape, out, rg, Op::LogSoftmax(a)))
    }

    /// Mean negative log-likelihood of `labels` under row-wise log-probabilities.
    pub fn nll(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = matrix_dims(self.shape(log_probs), "nll input")?;
        if labels.len() != b {
            return Err(Error::Dimension(format!("nll: {} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let lp = self.value(log_probs);
        let total: f64 = labels.iter().enumerate().map(|(k, &l)| lp[k * c + l]).sum();
        let rg = self.rg(&[log_probs]);
        Ok(self.push(
            vec![1],
            vec![-total / b as f64],
            rg,
            Op::Nll {
                input: log_probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `Σ |target − pred|^m / b` over a whole `[t, c, b]` tensor.
    pub fn full_distance(&mut self, target: Var, pred: Var, norm: Norm) -> Result<Var> {
        same_shape(self.shape(target), self.shape(pred), "full distance")?;
        let dims = self.sat_dims(pred, "full distance")?;
        let total: f64 = self
            .value(target)
            .iter()
            .zip(self.value(pred))
            .map(|(a, b)| norm.apply(a - b))
            .sum();
        let rg = self.rg(&[target, pred]);
        Ok(self.push(
            vec![1],
            vec![total / dims.b as f64],
            rg,
            Op::FullDistance {
                target,
                pred,
                norm,
                batch: dims.b,
            },
        ))
    }

    /// Windowed distance: for every class and batch element, the norm of the
    /// difference over each length-`window` slice of the time axis starting at
    /// `0, stride, 2·stride, …`, summed over windows and divided by `b`.
    pub fn sliding_distance(
        &mut self,
        target: Var,
        pred: Var,
        norm: Norm,
        window: usize,
        stride: usize,
    ) -> Result<Var> {
        same_shape(self.shape(target), self.shape(pred), "sliding distance")?;
        let dims = self.sat_dims(pred, "sliding distance")?;
        if window == 0 || window > dims.t {
            return Err(Error::Config(format!(
                "window length {window} must lie in 1..={}",
                dims.t
            )));
        }
        if stride == 0 {
            return Err(Error::Config("window stride must be positive".into()));
        }
        let a = self.value(target);
        let b = self.value(pred);
        let mut total = 0.0;
        for j in 0..dims.c {
            for k in 0..dims.b {
                let mut start = 0;
                while start + window <= dims.t {
                    let mut acc = 0.0;
                    for step in start..start + window {
                        let i = dims.index(step, j, k);
                        acc += norm.apply(a[i] - b[i]);
                    }
                    total += acc;
                    start += stride;
                }
            }
        }
        let rg = self.rg(&[target, pred]);
        Ok(self.push(
            vec![1],
            vec![total / dims.b as f64],
            rg,
            Op::SlidingDistance {
                target,
                pred,
                norm,
                dims,
                window,
                stride,
            },
        ))
    }

    /// `KL(softmax(p) ‖ softmax(q))` with the softmax over classes, taken per
    /// (timestep, batch element) slice and averaged over all slices.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        same_shape(self.shape(p), self.shape(q), "kl divergence")?;
        let dims = self.sat_dims(p, "kl divergence")?;
        let log_p = class_log_softmax(self.value(p), dims);
        let log_q = class_log_softmax(self.value(q), dims);
        let mut slice_kl = vec![0.0; dims.t * dims.b];
        for step in 0..dims.t {
            for k in 0..dims.b {
                let mut acc = 0.0;
                for j in 0..dims.c {
                    let i = dims.index(step, j, k);
                    acc += log_p[i].exp() * (log_p[i] - log_q[i]);
                }
                slice_kl[step * dims.b + k] = acc;
            }
        }
        let mean = slice_kl.iter().sum::<f64>() / slice_kl.len() as f64;
        ensure_finite(&[mean], "kl divergence")?;
        let rg = self.rg(&[p, q]);
        Ok(self.push(
            vec![1],
            vec![mean],
            rg,
            Op::Kl {
                p,
                q,
                dims,
                log_p,
                log_q,
                slice_kl,
            },
        ))
    }

    /// Reverse sweep from a scalar root. Consumes the tape.
    pub fn backward(self, root: Var) -> Result<Gradients> {
        let Some(root_node) = self.nodes.get(root.0) else {
            return Err(Error::Contract(format!("root {} is not on this tape", root.0)));
        };
        if root_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Gradient buffer for `v`, or `None` when `v` does not need one.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, d)| *s += sign * d);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, d)| *s += sign * d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, d)| *s += k * d);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, d)| *s += d);
                }
            }
            Op::MulConst(a, coeff) => {
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        s[i] += g[i] * coeff[i];
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|s| *s += g[0] / n);
                }
            }
            Op::Linear { input, weight, bias } => {
                let (rows, n) = (self.shape(*input)[0], self.shape(*input)[1]);
                let m = self.shape(*weight)[1];
                let (x, w) = (self.value(*input), self.value(*weight));
                if let Some(s) = self.slot(grads, *input) {
                    // dX = dY · Wᵀ
                    gemm(rows, m, n, g, (m as isize, 1), w, (1, m as isize), s, true);
                }
                if let Some(s) = self.slot(grads, *weight) {
                    // dW = Xᵀ · dY
                    gemm(n, rows, m, x, (1, n as isize), g, (m as isize, 1), s, true);
                }
                if let Some(s) = self.slot(grads, *bias) {
                    for row in g.chunks_exact(m) {
                        s.iter_mut().zip(row).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (rows, m) = (node.shape[0], node.shape[1]);
                let gam = self.value(*gamma);
                if let Some(s) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..m {
                            s[j] += g[r * m + j] * xhat[r * m + j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for row in g.chunks_exact(m) {
                        s.iter_mut().zip(row).for_each(|(s, d)| *s += d);
                    }
                }
                if let Some(s) = self.slot(grads, *input) {
                    if *train {
                        let n = rows as f64;
                        let mut sum_d = vec![0.0; m];
                        let mut sum_dh = vec![0.0; m];
                        for r in 0..rows {
                            for j in 0..m {
                                let d = g[r * m + j] * gam[j];
                                sum_d[j] += d;
                                sum_dh[j] += d * xhat[r * m + j];
                            }
                        }
                        for r in 0..rows {
                            for j in 0..m {
                                let i = r * m + j;
                                let d = g[i] * gam[j];
                                s[i] += inv_std[j] / n * (n * d - sum_d[j] - xhat[i] * sum_dh[j]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..m {
                                s[r * m + j] += g[r * m + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::RepeatRows { input, .. } => {
                if let Some(s) = self.slot(grads, *input) {
                    let block = s.len();
                    for chunk in g.chunks_exact(block) {
                        s.iter_mut().zip(chunk).for_each(|(s, d)| *s += d);
                    }
                }
            }
            Op::Spiking {
                input,
                batch,
                decay,
                penalty,
                gates,
            } => {
                if let Some(s) = self.slot(grads, *input) {
                    let m = node.shape[1];
                    let width = batch * m;
                    let steps = node.shape[0] / batch;
                    // dL/ds for the state carried out of the current step.
                    let mut carry = vec![0.0; width];
                    for step in (0..steps).rev() {
                        let base = step * width;
                        for e in 0..width {
                            let i = base + e;
                            let dx = if gates[i] {
                                g[i] + carry[e] * (1.0 - penalty)
                            } else {
                                carry[e]
                            };
                            s[i] += dx;
                            carry[e] = decay * dx;
                        }
                    }
                }
            }
            Op::RowsToSat { input, dims } => {
                if let Some(s) = self.slot(grads, *input) {
                    for step in 0..dims.t {
                        for k in 0..dims.b {
                            for j in 0..dims.c {
                                s[(step * dims.b + k) * dims.c + j] += g[dims.index(step, j, k)];
                            }
                        }
                    }
                }
            }
            Op::TimeMean { input, dims } => {
                if let Some(s) = self.slot(grads, *input) {
                    let inv = 1.0 / dims.t as f64;
                    for step in 0..dims.t {
                        for j in 0..dims.c {
                            for k in 0..dims.b {
                                s[dims.index(step, j, k)] += g[k * dims.c + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let c = *node.shape.last().expect("non-empty");
                if let Some(s) = self.slot(grads, *a) {
                    for (r, (out_row, g_row)) in node.value.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                        let gs: f64 = g_row.iter().sum();
                        for j in 0..c {
                            s[r * c + j] += g_row[j] - out_row[j].exp() * gs;
                        }
                    }
                }
            }
            Op::Nll { input, labels } => {
                let c = self.shape(*input)[1];
                let b = labels.len() as f64;
                if let Some(s) = self.slot(grads, *input) {
                    for (k, &l) in labels.iter().enumerate() {
                        s[k * c + l] -= g[0] / b;
                    }
                }
            }
            Op::FullDistance {
                target,
                pred,
                norm,
                batch,
            } => {
                let (a, b) = (self.value(*target), self.value(*pred));
                let k = g[0] / *batch as f64;
                let slopes: Vec<f64> = a.iter().zip(b).map(|(x, y)| k * norm.slope(x - y)).collect();
                if let Some(s) = self.slot(grads, *target) {
                    s.iter_mut().zip(&slopes).for_each(|(s, d)| *s += d);
                }
                if let Some(s) = self.slot(grads, *pred) {
                    s.iter_mut().zip(&slopes).for_each(|(s, d)| *s -= d);
                }
            }
            Op::SlidingDistance {
                target,
                pred,
                norm,
                dims,
                window,
                stride,
            } => {
                let (a, b) = (self.value(*target), self.value(*pred));
                let k = g[0] / dims.b as f64;
                let mut slopes = vec![0.0; a.len()];
                for j in 0..dims.c {
                    for item in 0..dims.b {
                        let mut start = 0;
                        while start + window <= dims.t {
                            for step in start..start + window {
                                let i = dims.index(step, j, item);
                                slopes[i] += k * norm.slope(a[i] - b[i]);
                            }
                            start += stride;
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *target) {
                    s.iter_mut().zip(&slopes).for_each(|(s, d)| *s += d);
                }
                if let Some(s) = self.slot(grads, *pred) {
                    s.iter_mut().zip(&slopes).for_each(|(s, d)| *s -= d);
                }
            }
            Op::Kl {
                p,
                q,
                dims,
                log_p,
                log_q,
                slice_kl,
            } => {
                let k = g[0] / (dims.t * dims.b) as f64;
                if let Some(s) = self.slot(grads, *p) {
                    for step in 0..dims.t {
                        for item in 0..dims.b {
                            let kl = slice_kl[step * dims.b + item];
                            for j in 0..dims.c {
                                let i = dims.index(step, j, item);
                                s[i] += k * log_p[i].exp() * (log_p[i] - log_q[i] - kl);
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *q) {
                    for i in 0..log_q.len() {
                        s[i] += k * (log_q[i].exp() - log_p[i].exp());
                    }
                }
            }
        }
    }
}

/// Log-softmax over the class axis of a `[t, c, b]` buffer.
fn class_log_softmax(v: &[f64], dims: SatDims) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for step in 0..dims.t {
        for k in 0..dims.b {
            let mut max = f64::NEG_INFINITY;
            for j in 0..dims.c {
                max = max.max(v[dims.index(step, j, k)]);
            }
            let mut z = 0.0;
            for j in 0..dims.c {
                z += (v[dims.index(step, j, k)] - max).exp();
            }
            let lse = z.ln() + max;
            for j in 0..dims.c {
                let i = dims.index(step, j, k);
                out[i] = v[i] - lse;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    fn eval(inputs: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let root = f(&mut tape, &vars);
        tape.value(root)[0]
    }

    /// Central differences against the reverse sweep for every input element.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let inputs: Vec<Tensor> = inputs.into_iter().map(Tensor::with_grad).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let root = f(&mut tape, &vars);
        let grads = tape.backward(root).unwrap();
        let h = 1e-6;
        for (a, v) in vars.iter().enumerate() {
            let analytic = grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; inputs[a].len()]);
            for i in 0..inputs[a].len() {
                let mut plus = inputs.clone();
                plus[a].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[a].data_mut()[i] -= h;
                let numeric = (eval(&plus, &f) - eval(&minus, &f)) / (2.0 * h);
                let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
                assert!(err < 1e-5, "input {a}[{i}]: analytic {} numeric {numeric}", analytic[i]);
            }
        }
    }

    #[test]
    fn elementwise_gradients() {
        check(
            vec![random(&[2, 3], 1, -1.0, 1.0), random(&[2, 3], 2, -1.0, 1.0)],
            |t, v| {
                let s = t.add(v[0], v[1]).unwrap();
                let d = t.sub(s, v[1]).unwrap();
                let m = t.mul(d, v[1]).unwrap();
                let k = t.scale(m, -2.5);
                let c = t.add_scalar(k, 0.3);
                let r = t.relu(c);
                let w = t.mul_const(r, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
                let w = t.reshape(w, &[3, 2]).unwrap();
                let total = t.sum(w);
                let avg = t.mean(m);
                t.add(total, avg).unwrap()
            },
        );
    }

    #[test]
    fn linear_gradients() {
        check(
            vec![
                random(&[4, 3], 3, -1.0, 1.0),
                random(&[3, 5], 4, -1.0, 1.0),
                random(&[5], 5, -1.0, 1.0),
            ],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2]).unwrap();
                let y2 = t.mul(y, y).unwrap();
                t.sum(y2)
            },
        );
    }

    #[test]
    fn batch_norm_gradients_in_both_modes() {
        let inputs = vec![
            random(&[6, 3], 6, -2.0, 2.0),
            random(&[3], 7, 0.5, 1.5),
            random(&[3], 8, -0.5, 0.5),
        ];
        let weights = random(&[6, 3], 9, -1.0, 1.0).into_data();
        let w2 = weights.clone();
        check(inputs.clone(), move |t, v| {
            let (y, _, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, None).unwrap();
            let y = t.mul_const(y, w2.clone()).unwrap();
            let y2 = t.mul(y, y).unwrap();
            t.sum(y2)
        });
        check(inputs, move |t, v| {
            let (y, _, _) = t
                .batch_norm(v[0], v[1], v[2], 1e-5, Some((&[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])))
                .unwrap();
            let y = t.mul_const(y, weights.clone()).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn spiking_gradients() {
        // Inputs chosen away from the threshold so no gate flips under the probe.
        let mut x = random(&[4 * 2, 3], 10, 0.0, 3.0);
        x.data_mut().iter_mut().for_each(|v| {
            if (*v - 1.0).abs() < 0.2 {
                *v += 0.5;
            }
        });
        let weights = random(&[8, 3], 11, -1.0, 1.0).into_data();
        check(vec![x], move |t, v| {
            let (y, _) = t.spiking(v[0], 2, &[0.0; 6], 0.9, 1.0, 1.5, 0).unwrap();
            let y = t.mul_const(y, weights.clone()).unwrap();
            t.sum(y)
        });
    }

    #[test]
    fn spiking_matches_hand_recurrence() {
        let mut tape = Tape::new();
        let i = tape.constant(&[3, 1], vec![2.0, 0.5, 1.4]).unwrap();
        let (y, state) = tape.spiking(i, 1, &[0.0], 0.9, 1.0, 1.5, 0).unwrap();
        // x0 = 2 → y 1, s −1; x1 = 0.5 − 0.9 = −0.4 → 0; x2 = 1.4 − 0.36 = 1.04 → y 0.04, s −0.52.
        let v = tape.value(y);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert!((v[2] - 0.04).abs() < 1e-12);
        assert!((state[0] + 0.52).abs() < 1e-12);
    }

    #[test]
    fn repeat_and_sat_gradients() {
        let weights = random(&[3, 2, 2], 12, -1.0, 1.0).into_data();
        check(vec![random(&[2, 2], 13, -1.0, 1.0)], move |t, v| {
            let r = t.repeat_rows(v[0], 3).unwrap();
            let s = t.rows_to_sat(r, 2).unwrap();
            let s = t.mul_const(s, weights.clone()).unwrap();
            let m = t.time_mean(s).unwrap();
            let m2 = t.mul(m, m).unwrap();
            t.sum(m2)
        });
    }

    #[test]
    fn classification_gradients() {
        check(vec![random(&[3, 4], 14, -2.0, 2.0)], |t, v| {
            let lp = t.log_softmax(v[0]).unwrap();
            t.nll(lp, &[0, 3, 1]).unwrap()
        });
    }

    fn sat_pair(seed: u64) -> Vec<Tensor> {
        vec![
            random(&[5, 3, 2], seed, -2.0, 2.0),
            random(&[5, 3, 2], seed + 1, -2.0, 2.0),
        ]
    }

    #[test]
    fn distance_gradients() {
        for norm in [Norm::L1, Norm::L2] {
            check(sat_pair(20), move |t, v| t.full_distance(v[0], v[1], norm).unwrap());
            for (window, stride) in [(1, 1), (3, 1), (2, 2), (5, 3)] {
                check(sat_pair(22), move |t, v| {
                    t.sliding_distance(v[0], v[1], norm, window, stride).unwrap()
                });
            }
        }
    }

    #[test]
    fn kl_gradients() {
        check(sat_pair(30), |t, v| t.kl_divergence(v[0], v[1]).unwrap());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(&[2]).with_grad());
        assert!(matches!(tape.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_membrane_names_layer_and_step() {
        let mut tape = Tape::new();
        let i = tape.constant(&[2, 1], vec![1.0, f64::INFINITY]).unwrap();
        match tape.spiking(i, 1, &[0.0], 0.9, 1.0, 1.5, 3) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("layer 3, timestep 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }
}
