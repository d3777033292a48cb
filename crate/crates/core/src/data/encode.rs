use super::ImageDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A batch of constant spike trains: every timestep carries the same frame.
///
/// Only the frame is stored; [`SpikeTrainBatch::data`] materializes the full
/// `[t, b, d]` tensor when a caller needs it.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrainBatch {
    /// `[b, d]`, values in `[0, 1]`.
    pub frames: Tensor,
    pub timesteps: usize,
    pub labels: Vec<usize>,
}

impl SpikeTrainBatch {
    pub fn batch_size(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.frames.shape()[1]
    }

    /// The full `[t, b, d]` train.
    pub fn data(&self) -> Tensor {
        let frame = self.frames.data();
        let mut out = Vec::with_capacity(frame.len() * self.timesteps);
        for _ in 0..self.timesteps {
            out.extend_from_slice(frame);
        }
        Tensor::new(&[self.timesteps, self.batch_size(), self.input_dim()], out).expect("extents are positive")
    }
}

/// Flattens the selected images, scales pixels by 1/255 and repeats them over
/// `timesteps` steps.
pub fn encode_constant(ds: &ImageDataset, indices: &[usize], timesteps: usize) -> Result<SpikeTrainBatch> {
    if timesteps == 0 {
        return Err(Error::Config("timestep count must be at least 1".into()));
    }
    if indices.is_empty() {
        return Err(Error::Dimension("cannot encode an empty batch".into()));
    }
    let d = ds.pixels();
    let mut frames = Vec::with_capacity(indices.len() * d);
    for &i in indices {
        frames.extend(ds.image(i).iter().map(|&p| f64::from(p) / 255.0));
    }
    Ok(SpikeTrainBatch {
        frames: Tensor::new(&[indices.len(), d], frames)?,
        timesteps,
        labels: indices.iter().map(|&i| ds.label(i)).collect(),
    })
}
