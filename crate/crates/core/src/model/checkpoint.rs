//! Binary checkpoint container.
//!
//! ```text
//! "SETF"  u32 version
//! u64 config length, config JSON (UTF-8)
//! u64 tensor count, then per tensor:
//!   u64 name length, name (UTF-8), u64 rank, rank × u64 dims, f64 payload
//! ```
//!
//! All integers and floats are little-endian, so a save/load cycle is
//! bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FittedLayer, SeTformer, SeTformerConfig};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::numerics::Matrix;
use crate::nystrom::NystromMap;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SETF";
const VERSION: u32 = 1;
const MAX_NAME: u64 = 4096;

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_tensor(w: &mut impl Write, name: &str, dims: &[usize], data: &[f64]) -> Result<()> {
    put_u64(w, name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    put_u64(w, dims.len() as u64)?;
    for &d in dims {
        put_u64(w, d as u64)?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint(model: &SeTformer, w: &mut impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg = serde_json::to_vec(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    put_u64(w, cfg.len() as u64)?;
    w.write_all(&cfg)?;
    let fitted: Vec<(usize, &FittedLayer)> =
        model.layers.iter().enumerate().filter_map(|(i, l)| l.as_ref().map(|l| (i, l))).collect();
    put_u64(w, (model.params.len() + 4 * fitted.len()) as u64)?;
    for p in model.params.entries() {
        put_tensor(w, &p.name, &[p.value.rows(), p.value.cols()], p.value.data())?;
    }
    for (i, l) in fitted {
        let a = &l.map.anchors;
        let wh = &l.map.whitener;
        put_tensor(w, &format!("layers.{i}.anchors"), &[a.rows(), a.cols()], a.data())?;
        put_tensor(w, &format!("layers.{i}.whitener"), &[wh.rows(), wh.cols()], wh.data())?;
        put_tensor(w, &format!("layers.{i}.sigma"), &[1], &[l.map.spec.sigma()])?;
        put_tensor(w, &format!("layers.{i}.delta"), &[1], &[l.map.delta])?;
    }
    Ok(())
}

pub fn save_checkpoint(model: &SeTformer, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn exact(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint is truncated".into()),
            _ => Error::Io(e),
        })
    }

    fn u64(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    fn string(&mut self, max: u64) -> Result<String> {
        let len = self.u64()?;
        if len > max {
            return Err(Error::Format(format!("string length {len} exceeds {max}")));
        }
        let mut buf = vec![0u8; len as usize];
        self.exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name = self.string(MAX_NAME)?;
        let rank = self.u64()?;
        if rank > 2 {
            return Err(Error::Format(format!("tensor {name}: rank {rank} unsupported")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let count =
            count.filter(|&c| c <= 1 << 32).ok_or_else(|| Error::Format(format!("tensor {name}: dims {dims:?}")))?;
        let mut data = Vec::with_capacity(count);
        let mut b = [0u8; 8];
        for _ in 0..count {
            self.exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        Ok((name, dims, data))
    }
}

fn as_matrix(name: &str, dims: &[usize], data: Vec<f64>) -> Result<Matrix> {
    match dims {
        [r, c] => Matrix::new(*r, *c, data),
        _ => Err(Error::Format(format!("tensor {name}: expected rank 2, got dims {dims:?}"))),
    }
}

fn as_scalar(name: &str, dims: &[usize], data: &[f64]) -> Result<f64> {
    match (dims, data) {
        ([1], [v]) => Ok(*v),
        _ => Err(Error::Format(format!("tensor {name}: expected a scalar"))),
    }
}

#[derive(Default)]
struct PartialLayer {
    anchors: Option<Matrix>,
    whitener: Option<Matrix>,
    sigma: Option<f64>,
    delta: Option<f64>,
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<SeTformer> {
    let mut r = Reader { inner: r };
    let mut magic = [0u8; 4];
    r.exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut v = [0u8; 4];
    r.exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_text = r.string(1 << 24)?;
    let config: SeTformerConfig =
        serde_json::from_str(&cfg_text).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = SeTformer::build(config, 0)?;
    let expected = model.params.len();
    let mut seen = vec![false; expected];
    let mut layers: Vec<PartialLayer> = (0..model.num_layers()).map(|_| PartialLayer::default()).collect();
    let count = r.u64()?;
    for _ in 0..count {
        let (name, dims, data) = r.tensor()?;
        if let Some(rest) = name.strip_prefix("layers.") {
            let (idx, field) = rest
                .split_once('.')
                .and_then(|(i, f)| i.parse::<usize>().ok().map(|i| (i, f)))
                .filter(|(i, _)| *i < layers.len())
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            let slot = &mut layers[idx];
            match field {
                "anchors" => slot.anchors = Some(as_matrix(&name, &dims, data)?),
                "whitener" => slot.whitener = Some(as_matrix(&name, &dims, data)?),
                "sigma" => slot.sigma = Some(as_scalar(&name, &dims, &data)?),
                "delta" => slot.delta = Some(as_scalar(&name, &dims, &data)?),
                _ => return Err(Error::Format(format!("unexpected tensor {name}"))),
            }
            continue;
        }
        let value = as_matrix(&name, &dims, data)?;
        match model.params.index_of(&name) {
            Some(i) if i < expected && !seen[i] => {
                if model.params.entry(i).value.shape() != value.shape() {
                    return Err(Error::Format(format!(
                        "tensor {name}: shape {:?}, model expects {:?}",
                        value.shape(),
                        model.params.entry(i).value.shape()
                    )));
                }
                *model.params.value_mut(i) = value;
                seen[i] = true;
            }
            Some(_) => return Err(Error::Format(format!("duplicate tensor {name}"))),
            None if name.contains(".attn.refs.") => {
                let trainable = model.config.references.trainable;
                model.params.insert(name, value, trainable, false);
            }
            None => return Err(Error::Format(format!("unexpected tensor {name}"))),
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("missing tensor {}", model.params.entry(i).name)));
    }
    for (i, l) in layers.into_iter().enumerate() {
        match l {
            PartialLayer {
                anchors: Some(anchors),
                whitener: Some(whitener),
                sigma: Some(sigma),
                delta: Some(delta),
            } => {
                let map = NystromMap { anchors, whitener, spec: KernelSpec::gaussian(sigma)?, delta };
                model.set_layer(i, FittedLayer::new(map));
            }
            PartialLayer { anchors: None, whitener: None, sigma: None, delta: None } => {}
            _ => return Err(Error::Format(format!("layer {i} is only partially stored"))),
        }
    }
    model.params.ensure_finite()?;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SeTformer> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}
