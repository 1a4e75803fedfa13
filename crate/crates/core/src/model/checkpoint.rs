//! Checkpoint file: a JSON header line naming the model config and every
//! stored tensor, followed by the tensors' values as little-endian f64 in
//! header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::backbone::{ModelConfig, ToyBackbone};

const MAGIC: &str = "attnpyr-checkpoint 1";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tensors: Vec<(String, Vec<usize>)>,
}

fn entries(model: &ToyBackbone) -> Vec<(String, &Tensor)> {
    let mut all = model.named_params();
    all.extend(model.named_buffers());
    all
}

pub fn save_checkpoint(model: &ToyBackbone, path: &Path) -> Result<()> {
    let all = entries(model);
    let header = Header {
        model: model.cfg.clone(),
        tensors: all.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    let json = serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    writeln!(w, "{json}")?;
    for (_, t) in all {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read(path: &Path) -> Result<(ModelConfig, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(&line).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for (name, shape) in header.tensors {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated at tensor {name}")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push((name, t));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((header.model, out))
}

/// Copy a checkpoint's tensors into `model`. Every name and shape must match.
pub fn restore_checkpoint(model: &mut ToyBackbone, path: &Path) -> Result<()> {
    let (_, stored) = read(path)?;
    let expected: Vec<(String, Vec<usize>)> = entries(model)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if stored.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            stored.len(),
            expected.len()
        )));
    }
    for ((name, t), (en, es)) in stored.iter().zip(&expected) {
        if name != en || t.shape() != es.as_slice() {
            return Err(Error::Checkpoint(format!(
                "checkpoint tensor {name} {:?} does not fit model tensor {en} {es:?}",
                t.shape()
            )));
        }
    }
    let mut targets = model.params_mut();
    for (dst, (_, src)) in targets.iter_mut().zip(&stored) {
        **dst = src.clone();
    }
    let n = targets.len();
    drop(targets);
    for (dst, (_, src)) in model.buffers_mut().into_iter().zip(&stored[n..]) {
        *dst = src.clone();
    }
    Ok(())
}

/// Rebuild the model recorded in a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<ToyBackbone> {
    let (cfg, _) = read(path)?;
    let mut model = ToyBackbone::zeros(cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    restore_checkpoint(&mut model, path)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{AttentionKind, PyramidConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(levels: usize) -> ModelConfig {
        ModelConfig {
            channels: vec![4, 8],
            height: 8,
            width: 4,
            classes: 3,
            pyramid: PyramidConfig::new(AttentionKind::Channel, 2, levels),
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip() {
        let mut m = ToyBackbone::new(cfg(1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.running_mean.data_mut()[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), m);
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let m = ToyBackbone::new(cfg(1), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let mut other = ToyBackbone::zeros(cfg(2)).unwrap();
        assert!(matches!(restore_checkpoint(&mut other, &p), Err(Error::Checkpoint(_))));
        std::fs::write(&p, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
