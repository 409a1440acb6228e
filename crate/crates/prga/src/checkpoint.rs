//! Trained model state and its CKP1 file format.
//!
//! Binary layout (little-endian, all tensors f32 row-major): magic `CKP1`,
//! `u32` version, graph section (`u32` layer count, then per layer `u32`
//! d_out, `u32` d_in, `f32` negative slope, `u8` activation, `W`, `a`),
//! pooling section (`u32` branch count, then per branch `u8` kind, `f32`
//! gamma, `u32` d_out, `u32` d_in, `W_m`), cache section (`u32` keys, `u32`
//! dim, `u32` classes, `theta`, `values`, `classifier`).
//!
//! A JSON sidecar at `<path>.json` carries alpha, beta, the attention mode,
//! and the aggregator list.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bytesio::{put_f32, put_u32, Cursor};
use crate::cache::CacheModel;
use crate::error::{Error, Result};
use crate::graphattn::{Activation, AttentionMode, GraphParams, LayerParams};
use crate::mat::Mat;
use crate::pooling::{AggBranch, Aggregator, PoolingParams};

const CKP_MAGIC: &[u8; 4] = b"CKP1";
const CKP_VERSION: u32 = 1;

/// Everything `train` produces: graph and pooling parameters, the refined
/// cache, and the attention mode they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub graph: GraphParams,
    pub pooling: PoolingParams,
    pub cache: CacheModel,
    pub mode: AttentionMode,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    alpha: f64,
    beta: f64,
    mode: String,
    aggregators: Vec<String>,
}

/// Sidecar path: the checkpoint path with `.json` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

fn put_mat(buf: &mut Vec<u8>, m: &Mat) {
    for &v in m.data() {
        put_f32(buf, v as f32);
    }
}

fn read_mat(cur: &mut Cursor, rows: usize, cols: usize) -> Result<Mat> {
    let offset = cur.offset();
    let raw = cur.f32s(rows * cols)?;
    for (i, &v) in raw.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                offset: offset + 4 * i as u64,
                context: "checkpoint tensor".into(),
            });
        }
    }
    Ok(Mat::from_vec(
        rows,
        cols,
        raw.into_iter().map(f64::from).collect(),
    ))
}

/// Write the binary checkpoint and its JSON sidecar.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKP_MAGIC);
    put_u32(&mut buf, CKP_VERSION);

    put_u32(&mut buf, ckpt.graph.layers.len() as u32);
    for layer in &ckpt.graph.layers {
        put_u32(&mut buf, layer.d_out() as u32);
        put_u32(&mut buf, layer.d_in() as u32);
        put_f32(&mut buf, layer.negative_slope as f32);
        buf.push(match layer.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
        put_mat(&mut buf, &layer.w);
        put_mat(&mut buf, &layer.a);
    }

    put_u32(&mut buf, ckpt.pooling.branches.len() as u32);
    for branch in &ckpt.pooling.branches {
        buf.push(match branch.kind {
            Aggregator::Mean => 0,
            Aggregator::Max => 1,
            Aggregator::Min => 2,
            Aggregator::Std => 3,
        });
        put_f32(&mut buf, branch.gamma as f32);
        put_u32(&mut buf, branch.w.rows() as u32);
        put_u32(&mut buf, branch.w.cols() as u32);
        put_mat(&mut buf, &branch.w);
    }

    let cache = &ckpt.cache;
    put_u32(&mut buf, cache.keys() as u32);
    put_u32(&mut buf, cache.dim() as u32);
    put_u32(&mut buf, cache.classes() as u32);
    put_mat(&mut buf, &cache.theta);
    put_mat(&mut buf, &cache.values);
    put_mat(&mut buf, &cache.classifier);

    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))?;

    let sidecar = Sidecar {
        alpha: cache.alpha,
        beta: cache.beta,
        mode: ckpt.mode.to_string(),
        aggregators: ckpt
            .pooling
            .branches
            .iter()
            .map(|b| b.kind.to_string())
            .collect(),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Config(format!("sidecar serialization failed: {e}")))?;
    let sc_path = sidecar_path(path);
    fs::write(&sc_path, json + "\n").map_err(|e| Error::io(sc_path.display().to_string(), e))
}

/// Read a checkpoint and its sidecar back.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor::new(&buf);
    cur.magic(CKP_MAGIC)?;
    let version = cur.u32()?;
    if version != CKP_VERSION {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {version}"
        )));
    }

    let layer_count = cur.u32()? as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let d_out = cur.u32()? as usize;
        let d_in = cur.u32()? as usize;
        let negative_slope = f64::from(cur.f32()?);
        let activation = match cur.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            other => return Err(Error::Config(format!("unknown activation tag {other}"))),
        };
        let w = read_mat(&mut cur, d_out, d_in)?;
        let a = read_mat(&mut cur, 1, 2 * d_out)?;
        layers.push(LayerParams {
            w,
            a,
            negative_slope,
            activation,
        });
    }
    let graph = GraphParams::new(layers)?;

    let branch_count = cur.u32()? as usize;
    let mut branches = Vec::with_capacity(branch_count);
    for _ in 0..branch_count {
        let kind = match cur.u8()? {
            0 => Aggregator::Mean,
            1 => Aggregator::Max,
            2 => Aggregator::Min,
            3 => Aggregator::Std,
            other => return Err(Error::Config(format!("unknown aggregator tag {other}"))),
        };
        let gamma = f64::from(cur.f32()?);
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let w = read_mat(&mut cur, rows, cols)?;
        branches.push(AggBranch { kind, gamma, w });
    }
    let pooling = PoolingParams::new(branches)?;

    let keys = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let classes = cur.u32()? as usize;
    let theta = read_mat(&mut cur, keys, dim)?;
    let values = read_mat(&mut cur, keys, classes)?;
    let classifier = read_mat(&mut cur, classes, dim)?;

    let sc_path = sidecar_path(path);
    let json = fs::read_to_string(&sc_path).map_err(|e| Error::io(sc_path.display().to_string(), e))?;
    let sidecar: Sidecar = serde_json::from_str(&json)
        .map_err(|e| Error::Config(format!("sidecar parse failed: {e}")))?;
    let mode: AttentionMode = sidecar.mode.parse()?;
    let kinds: Vec<String> = pooling.branches.iter().map(|b| b.kind.to_string()).collect();
    if sidecar.aggregators != kinds {
        return Err(Error::Config(format!(
            "sidecar aggregators {:?} disagree with checkpoint {:?}",
            sidecar.aggregators, kinds
        )));
    }

    Ok(Checkpoint {
        graph,
        pooling,
        cache: CacheModel {
            theta,
            values,
            classifier,
            alpha: sidecar.alpha,
            beta: sidecar.beta,
        },
        mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use tempfile::tempdir;

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let mut rng = SplitMix64::new(seed);
        let d = 3;
        let layer = LayerParams {
            w: Mat::uniform(d, d, 0.5, &mut rng),
            a: Mat::uniform(1, 2 * d, 0.5, &mut rng),
            negative_slope: 0.2,
            activation: Activation::Identity,
        };
        let graph = GraphParams::new(vec![layer]).unwrap();
        let pooling = PoolingParams::new(vec![
            AggBranch {
                kind: Aggregator::Mean,
                gamma: 1.0,
                w: Mat::uniform(d, d, 0.5, &mut rng),
            },
            AggBranch {
                kind: Aggregator::Std,
                gamma: -0.25,
                w: Mat::uniform(d, d, 0.5, &mut rng),
            },
        ])
        .unwrap();
        let mut theta = Mat::uniform(4, d, 1.0, &mut rng);
        for r in 0..theta.rows() {
            let row = crate::embank::l2_normalize(theta.row(r)).unwrap();
            theta.row_mut(r).copy_from_slice(&row);
        }
        let mut values = Mat::zeros(4, 2);
        for r in 0..4 {
            values[(r, r % 2)] = 1.0;
        }
        Checkpoint {
            graph,
            pooling,
            cache: CacheModel {
                theta,
                values,
                classifier: Mat::uniform(2, d, 0.5, &mut rng),
                alpha: 1.5,
                beta: 2.25,
            },
            mode: AttentionMode::Combined,
        }
    }

    #[test]
    fn round_trip_preserves_bytes() {
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ckp");
        let p2 = dir.path().join("b.ckp");
        let ckpt = sample_checkpoint(5);
        save_checkpoint(&ckpt, &p1).unwrap();
        let back = load_checkpoint(&p1).unwrap();
        save_checkpoint(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(
            fs::read(sidecar_path(&p1)).unwrap(),
            fs::read(sidecar_path(&p2)).unwrap()
        );
        assert_eq!(back.mode, AttentionMode::Combined);
        assert_eq!(back.cache.alpha, 1.5);
        assert_eq!(back.cache.beta, 2.25);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ckp");
        let ckpt = sample_checkpoint(6);
        save_checkpoint(&ckpt, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn sidecar_is_required() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.ckp");
        save_checkpoint(&sample_checkpoint(7), &path).unwrap();
        fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Io { .. })));
    }
}
