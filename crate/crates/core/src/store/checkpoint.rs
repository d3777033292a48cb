use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNorm, Tensor};
use crate::error::{Error, Result};
use crate::snn::{Network, NetworkSpec, SpikingLayer};

pub const MAGIC: &[u8; 4] = b"SNKD";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 4;

/// Run information stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
}

/// One named tensor inside the payload. `offset` and `len` are in bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerStats {
    updates: u64,
    momentum: f64,
    eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    spec: NetworkSpec,
    timesteps: usize,
    seed: u64,
    epoch: usize,
    batch_norm: Vec<LayerStats>,
    manifest: Vec<ManifestEntry>,
}

fn tensors(net: &Network) -> Vec<(String, Vec<usize>, &[f64])> {
    let mut out = Vec::new();
    for (i, l) in net.layers().iter().enumerate() {
        let feat = vec![l.outputs()];
        out.push((format!("layers.{i}.weight"), l.weight.shape().to_vec(), l.weight.data()));
        out.push((format!("layers.{i}.bias"), feat.clone(), l.bias.data()));
        out.push((format!("layers.{i}.bn.gamma"), feat.clone(), l.bn.gamma.data()));
        out.push((format!("layers.{i}.bn.beta"), feat.clone(), l.bn.beta.data()));
        out.push((
            format!("layers.{i}.bn.running_mean"),
            feat.clone(),
            &l.bn.running_mean[..],
        ));
        out.push((format!("layers.{i}.bn.running_var"), feat, &l.bn.running_var[..]));
    }
    out
}

/// Serializes a network to the checkpoint byte layout.
pub fn encode_checkpoint(net: &Network, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, values) in tensors(net) {
        manifest.push(ManifestEntry {
            name,
            shape,
            offset: payload.len(),
            len: values.len() * 8,
        });
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let md = Metadata {
        spec: net.spec().clone(),
        timesteps: net.spec().timesteps,
        seed: meta.seed,
        epoch: meta.epoch,
        batch_norm: net
            .layers()
            .iter()
            .map(|l| LayerStats {
                updates: l.bn.updates,
                momentum: l.bn.momentum,
                eps: l.bn.eps,
            })
            .collect(),
        manifest,
    };
    let json = serde_json::to_vec(&md).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let json_len = u32::try_from(json.len()).map_err(|_| Error::Format("metadata block too large".into()))?;
    let mut out = Vec::with_capacity(HEADER_BYTES + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save_checkpoint(net: &Network, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode_checkpoint(net, meta)?)
}

/// Rebuilds a network from checkpoint bytes. Parameters come back trainable.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Network, CheckpointMeta)> {
    if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let json_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(HEADER_BYTES..HEADER_BYTES + json_len)
        .ok_or_else(|| Error::Corrupt(format!("metadata block of {json_len} bytes runs past end of file")))?;
    let md: Metadata = serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("unreadable metadata: {e}")))?;
    let payload = &bytes[HEADER_BYTES + json_len..];

    md.spec
        .validate()
        .map_err(|e| Error::Corrupt(format!("stored spec is invalid: {e}")))?;
    if md.timesteps != md.spec.timesteps {
        return Err(Error::Corrupt(format!(
            "metadata T {} disagrees with spec T {}",
            md.timesteps, md.spec.timesteps
        )));
    }
    let depth = md.spec.depth();
    if md.batch_norm.len() != depth || md.manifest.len() != 6 * depth {
        return Err(Error::Corrupt(format!(
            "manifest lists {} tensors and {} batch norms for a {depth}-layer network",
            md.manifest.len(),
            md.batch_norm.len()
        )));
    }

    let mut cursor = 0;
    let mut read = |entry: &ManifestEntry, name: String, shape: Vec<usize>| -> Result<Vec<f64>> {
        let count: usize = shape.iter().product();
        if entry.name != name || entry.shape != shape || entry.offset != cursor || entry.len != count * 8 {
            return Err(Error::Corrupt(format!(
                "manifest entry {:?} {:?} @{}+{} does not match expected {name} {shape:?} @{cursor}+{}",
                entry.name,
                entry.shape,
                entry.offset,
                entry.len,
                count * 8
            )));
        }
        let slice = payload.get(cursor..cursor + entry.len).ok_or_else(|| {
            Error::Corrupt(format!(
                "{name} needs bytes {cursor}..{} but the payload has {}",
                cursor + entry.len,
                payload.len()
            ))
        })?;
        cursor += entry.len;
        Ok(slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };

    let mut layers = Vec::with_capacity(depth);
    let mut entries = md.manifest.iter();
    for (i, w) in md.spec.widths.windows(2).enumerate() {
        let (n, m) = (w[0], w[1]);
        let mut next = |suffix: &str, shape: Vec<usize>| {
            read(
                entries.next().expect("length checked"),
                format!("layers.{i}.{suffix}"),
                shape,
            )
        };
        let weight = next("weight", vec![n, m])?;
        let bias = next("bias", vec![m])?;
        let gamma = next("bn.gamma", vec![m])?;
        let beta = next("bn.beta", vec![m])?;
        let running_mean = next("bn.running_mean", vec![m])?;
        let running_var = next("bn.running_var", vec![m])?;

        let stats = &md.batch_norm[i];
        let bn = BatchNorm {
            gamma: Tensor::new(&[m], gamma)?.with_grad(),
            beta: Tensor::new(&[m], beta)?.with_grad(),
            running_mean,
            running_var,
            updates: stats.updates,
            momentum: stats.momentum,
            eps: stats.eps,
        };
        let weight = Tensor::new(&[n, m], weight)?.with_grad();
        let bias = Tensor::new(&[m], bias)?.with_grad();
        layers.push(SpikingLayer::from_parts(weight, bias, bn, md.spec.neuron)?);
    }
    if cursor != payload.len() {
        return Err(Error::Corrupt(format!(
            "payload has {} trailing bytes past the manifest",
            payload.len() - cursor
        )));
    }
    let net = Network::from_layers(md.spec, layers)?;
    Ok((
        net,
        CheckpointMeta {
            seed: md.seed,
            epoch: md.epoch,
        },
    ))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// The manifest of a checkpoint file, for inspection tools.
pub fn read_manifest(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
    if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    let json_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(HEADER_BYTES..HEADER_BYTES + json_len)
        .ok_or_else(|| Error::Corrupt("metadata block runs past end of file".into()))?;
    let md: Metadata = serde_json::from_slice(json).map_err(|e| Error::Corrupt(format!("unreadable metadata: {e}")))?;
    Ok(md.manifest)
}
