//! C interface to `spikedistill`.
//!
//! Networks and datasets are passed around as opaque pointers. Every fallible
//! call returns an [`SdStatus`]; on failure the message is available from
//! [`sd_last_error`] on the same thread. Spike-accumulation tensors use the
//! `[timesteps][classes][batch]` layout, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use spikedistill::autodiff::{Norm, Tape};
use spikedistill::data::{encode_constant, load_idx, ImageDataset, Split};
use spikedistill::distill::{combined_loss, evaluate, full_lm_loss, kl_loss, sliding_lm_loss, DistillLossConfig};
use spikedistill::snn::{argmax_rows, Network};
use spikedistill::store::{load_checkpoint, save_checkpoint, CheckpointMeta};
use spikedistill::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdStatus {
    Ok = 0,
    /// Null pointer, zero count or a buffer that is too small.
    InvalidArgument = 1,
    /// Configuration, architecture or shape mismatch.
    Config = 2,
    /// Unreadable, malformed or inconsistent file.
    Data = 3,
    /// Non-finite values or a diverged computation.
    Numeric = 4,
    /// A Rust panic was caught at the boundary.
    Internal = 5,
}

/// Norm selector for the spike-level losses.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdNorm {
    L1 = 1,
    L2 = 2,
}

/// Opaque trained network.
pub struct SdNetwork {
    net: Network,
}

/// Opaque labelled image dataset.
pub struct SdDataset {
    ds: ImageDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SdStatus {
    match e.exit_code() {
        1 => SdStatus::Config,
        2 => SdStatus::Data,
        _ => SdStatus::Numeric,
    }
}

struct Fail(SdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(SdStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            SdStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    if len < need {
        return Err(invalid(&format!("{what} holds {len} values, {need} needed")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn network_ref<'a>(net: *const SdNetwork) -> Result<&'a Network, Fail> {
    net.as_ref().map(|n| &n.net).ok_or_else(|| invalid("network is null"))
}

/// Message for the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn sd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint. The network is frozen.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sd_network_load(path: *const c_char, out: *mut *mut SdNetwork) -> SdStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = ptr::null_mut();
        let (mut net, _) = load_checkpoint(&path_arg(path, "path")?)?;
        net.freeze();
        *out = Box::into_raw(Box::new(SdNetwork { net }));
        Ok(())
    })
}

/// Writes the network to `path` atomically.
///
/// # Safety
/// `net` must come from [`sd_network_load`]; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sd_network_save(
    net: *const SdNetwork,
    path: *const c_char,
    seed: u64,
    epoch: u64,
) -> SdStatus {
    guard(|| {
        let net = network_ref(net)?;
        let meta = CheckpointMeta {
            seed,
            epoch: epoch as usize,
        };
        save_checkpoint(net, &path_arg(path, "path")?, &meta)?;
        Ok(())
    })
}

/// # Safety
/// `net` must be null or come from [`sd_network_load`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sd_network_free(net: *mut SdNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Copies `timesteps`, input width and class count. Any out pointer may be null.
///
/// # Safety
/// Non-null pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sd_network_shape(
    net: *const SdNetwork,
    timesteps: *mut usize,
    inputs: *mut usize,
    classes: *mut usize,
) -> SdStatus {
    guard(|| {
        let spec = network_ref(net)?.spec();
        for (p, v) in [
            (timesteps, spec.timesteps),
            (inputs, spec.input_dim()),
            (classes, spec.classes()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

fn raw_batch(net: &Network, pixels: &[u8], count: usize) -> Result<spikedistill::data::SpikeTrainBatch, Fail> {
    let width = net.spec().input_dim();
    if pixels.len() != count * width {
        return Err(invalid("pixel buffer does not match count times input width"));
    }
    let ds = ImageDataset::new(pixels.to_vec(), vec![0; count], 1, width, Split::Test)?;
    let idx: Vec<usize> = (0..count).collect();
    Ok(encode_constant(&ds, &idx, net.spec().timesteps)?)
}

/// Runs `count` images (8-bit pixels, `count * inputs` bytes) through the
/// network and writes the spike accumulation, `timesteps * classes * count`
/// values.
///
/// # Safety
/// `pixels` must hold `count * inputs` bytes and `sat` `sat_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sd_network_infer(
    net: *const SdNetwork,
    pixels: *const u8,
    count: usize,
    sat: *mut f64,
    sat_len: usize,
) -> SdStatus {
    guard(|| {
        let net = network_ref(net)?;
        if count == 0 {
            return Err(invalid("count is zero"));
        }
        let pixels = slice_arg(pixels, count * net.spec().input_dim(), "pixels")?;
        let need = net.spec().timesteps * net.spec().classes() * count;
        let out = out_slice(sat, sat_len, need, "sat")?;
        let result = net.infer(&raw_batch(net, pixels, count)?)?;
        out.copy_from_slice(result.data());
        Ok(())
    })
}

/// Writes one predicted class per image: the arg-max of the summed spike counts.
///
/// # Safety
/// `pixels` must hold `count * inputs` bytes and `labels` `count` entries.
#[no_mangle]
pub unsafe extern "C" fn sd_network_predict(
    net: *const SdNetwork,
    pixels: *const u8,
    count: usize,
    labels: *mut u32,
) -> SdStatus {
    guard(|| {
        let net = network_ref(net)?;
        if count == 0 {
            return Err(invalid("count is zero"));
        }
        let pixels = slice_arg(pixels, count * net.spec().input_dim(), "pixels")?;
        let out = out_slice(labels, count, count, "labels")?;
        let sat = net.infer(&raw_batch(net, pixels, count)?)?;
        let [t, c, b] = sat.shape();
        let mut totals = vec![0.0; b * c];
        for step in 0..t {
            for j in 0..c {
                for k in 0..b {
                    totals[k * c + j] += sat.at(step, j, k);
                }
            }
        }
        for (o, p) in out.iter_mut().zip(argmax_rows(&totals, c)) {
            *o = p as u32;
        }
        Ok(())
    })
}

/// Classification accuracy of the network on a dataset, in `[0, 1]`.
///
/// # Safety
/// Handles must be live; `accuracy` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sd_network_evaluate(
    net: *const SdNetwork,
    dataset: *const SdDataset,
    accuracy: *mut f64,
) -> SdStatus {
    guard(|| {
        let net = network_ref(net)?;
        let ds = dataset.as_ref().ok_or_else(|| invalid("dataset is null"))?;
        let out = accuracy.as_mut().ok_or_else(|| invalid("accuracy is null"))?;
        *out = evaluate(net, &ds.ds)?;
        Ok(())
    })
}

/// Loads an IDX image/label pair; either file may be gzip-compressed.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn sd_dataset_load_idx(
    images: *const c_char,
    labels: *const c_char,
    out: *mut *mut SdDataset,
) -> SdStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = ptr::null_mut();
        let ds = load_idx(&path_arg(images, "images")?, &path_arg(labels, "labels")?)?;
        *out = Box::into_raw(Box::new(SdDataset { ds }));
        Ok(())
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn sd_dataset_len(dataset: *const SdDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.ds.len())
}

/// Pixels per image, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn sd_dataset_pixels(dataset: *const SdDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.ds.pixels())
}

/// Copies sample `index` into `pixels` (at least `pixels()` bytes) and its label.
///
/// # Safety
/// `dataset` must be live; `pixels` must hold `pixels_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn sd_dataset_sample(
    dataset: *const SdDataset,
    index: usize,
    pixels: *mut u8,
    pixels_len: usize,
    label: *mut u32,
) -> SdStatus {
    guard(|| {
        let ds = &dataset.as_ref().ok_or_else(|| invalid("dataset is null"))?.ds;
        if index >= ds.len() {
            return Err(invalid(&format!("index {index} out of range for {} samples", ds.len())));
        }
        out_slice(pixels, pixels_len, ds.pixels(), "pixels")?.copy_from_slice(ds.image(index));
        if let Some(l) = label.as_mut() {
            *l = ds.label(index) as u32;
        }
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or come from [`sd_dataset_load_idx`], and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sd_dataset_free(dataset: *mut SdDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

unsafe fn loss_with(
    teacher: *const f64,
    student: *const f64,
    timesteps: usize,
    classes: usize,
    batch: usize,
    out: *mut f64,
    f: impl FnOnce(
        &mut Tape,
        spikedistill::autodiff::Var,
        spikedistill::autodiff::Var,
    ) -> spikedistill::Result<spikedistill::autodiff::Var>,
) -> Result<(), Fail> {
    let n = timesteps * classes * batch;
    if n == 0 {
        return Err(invalid("empty spike accumulation"));
    }
    let t = slice_arg(teacher, n, "teacher")?;
    let s = slice_arg(student, n, "student")?;
    let out = out.as_mut().ok_or_else(|| invalid("out is null"))?;
    let mut tape = Tape::new();
    let dims = [timesteps, classes, batch];
    let tv = tape.constant(&dims, t.to_vec())?;
    let sv = tape.constant(&dims, s.to_vec())?;
    let v = f(&mut tape, tv, sv)?;
    *out = tape.value(v)[0];
    Ok(())
}

fn norm_of(n: SdNorm) -> Norm {
    match n {
        SdNorm::L1 => Norm::L1,
        SdNorm::L2 => Norm::L2,
    }
}

/// Whole-sequence spike distance between two accumulations, averaged over the batch.
///
/// # Safety
/// `teacher` and `student` must each hold `timesteps * classes * batch` doubles.
#[no_mangle]
pub unsafe extern "C" fn sd_loss_full(
    teacher: *const f64,
    student: *const f64,
    timesteps: usize,
    classes: usize,
    batch: usize,
    norm: SdNorm,
    out: *mut f64,
) -> SdStatus {
    guard(|| {
        loss_with(teacher, student, timesteps, classes, batch, out, |tp, t, s| {
            full_lm_loss(tp, t, s, norm_of(norm))
        })
    })
}

/// Sliding-window spike distance with window `delta` and the given stride.
///
/// # Safety
/// As for [`sd_loss_full`].
#[no_mangle]
pub unsafe extern "C" fn sd_loss_sliding(
    teacher: *const f64,
    student: *const f64,
    timesteps: usize,
    classes: usize,
    batch: usize,
    delta: usize,
    stride: usize,
    norm: SdNorm,
    out: *mut f64,
) -> SdStatus {
    guard(|| {
        loss_with(teacher, student, timesteps, classes, batch, out, |tp, t, s| {
            sliding_lm_loss(tp, t, s, delta, norm_of(norm), stride)
        })
    })
}

/// Per-timestep KL divergence of the student from the teacher, averaged over the batch.
///
/// # Safety
/// As for [`sd_loss_full`].
#[no_mangle]
pub unsafe extern "C" fn sd_loss_kl(
    teacher: *const f64,
    student: *const f64,
    timesteps: usize,
    classes: usize,
    batch: usize,
    out: *mut f64,
) -> SdStatus {
    guard(|| {
        loss_with(teacher, student, timesteps, classes, batch, out, |tp, t, s| {
            kl_loss(tp, s, t)
        })
    })
}

/// `alpha * sliding(L1, delta) + beta * full(L2) + gamma * KL`.
///
/// # Safety
/// As for [`sd_loss_full`].
#[no_mangle]
pub unsafe extern "C" fn sd_loss_combined(
    teacher: *const f64,
    student: *const f64,
    timesteps: usize,
    classes: usize,
    batch: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    delta: usize,
    out: *mut f64,
) -> SdStatus {
    guard(|| {
        let cfg = DistillLossConfig::new(alpha, beta, gamma, delta);
        cfg.validate(timesteps)?;
        loss_with(teacher, student, timesteps, classes, batch, out, |tp, t, s| {
            combined_loss(tp, t, s, &cfg)
        })
    })
}
