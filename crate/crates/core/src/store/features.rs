use std::fmt::Write as _;
use std::path::Path;

use super::checkpoint::write_atomic;
use crate::autodiff::{Mode, Tape};
use crate::data::{batches, encode_constant, ImageDataset};
use crate::distill::EVAL_BATCH;
use crate::error::{Error, Result};
use crate::snn::Network;

/// Time-averaged eval-mode output of the second-to-last layer, one row per sample.
pub fn penultimate_features(net: &Network, ds: &ImageDataset) -> Result<Vec<Vec<f64>>> {
    let depth = net.layers().len();
    if depth < 2 {
        return Err(Error::Spec("a single-layer network has no penultimate layer".into()));
    }
    let width = net.layers()[depth - 2].outputs();
    let steps = net.spec().timesteps;
    let mut rows = Vec::with_capacity(ds.len());
    for idx in batches(ds.len(), EVAL_BATCH, None, Mode::Eval) {
        let batch = encode_constant(ds, &idx, steps)?;
        let b = idx.len();
        let mut tape = Tape::new();
        let trace = net.infer_trace(&mut tape, &batch)?;
        let out = tape.value(trace.layer_outputs[depth - 2]);
        for k in 0..b {
            let mut row = vec![0.0; width];
            for t in 0..steps {
                let src = &out[(t * b + k) * width..(t * b + k + 1) * width];
                row.iter_mut().zip(src).for_each(|(r, v)| *r += v);
            }
            row.iter_mut().for_each(|r| *r /= steps as f64);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// CSV with header `label,f0,..` and one row per sample.
pub fn export_features(net: &Network, ds: &ImageDataset, path: &Path) -> Result<()> {
    let rows = penultimate_features(net, ds)?;
    let width = rows.first().map_or(0, Vec::len);
    let mut out = String::from("label");
    for j in 0..width {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        let _ = write!(out, "{}", ds.label(i));
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::Split;
    use crate::snn::{NetworkSpec, NeuronConfig, Role};

    fn dataset(n: usize) -> ImageDataset {
        let images = (0..n * 4).map(|i| (i * 37 % 256) as u8).collect();
        let labels = (0..n).map(|i| (i % 3) as u8).collect();
        ImageDataset::new(images, labels, 2, 2, Split::Test).unwrap()
    }

    fn network(widths: Vec<usize>) -> Network {
        let spec = NetworkSpec {
            widths,
            timesteps: 4,
            neuron: NeuronConfig::default(),
            role: Role::Custom,
        };
        let mut net = Network::new(spec, 3).unwrap();
        for l in net.layers_mut() {
            l.bn.updates = 1;
        }
        net
    }

    #[test]
    fn one_row_per_sample_with_penultimate_width() {
        let net = network(vec![4, 5, 3]);
        let ds = dataset(7);
        let rows = penultimate_features(&net, &ds).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().all(|r| r.len() == 5));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        export_features(&net, &ds, &path).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "label,f0,f1,f2,f3,f4");
        assert_eq!(lines.len(), 8);
        assert!(lines[2].starts_with("1,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 6));
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut net = network(vec![4, 5, 3]);
        for l in net.layers_mut() {
            l.weight = Tensor::zeros(l.weight.shape()).with_grad();
        }
        let rows = penultimate_features(&net, &dataset(5)).unwrap();
        assert!(rows.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_has_no_penultimate() {
        let net = network(vec![4, 3]);
        assert!(matches!(penultimate_features(&net, &dataset(2)), Err(Error::Spec(_))));
    }
}
