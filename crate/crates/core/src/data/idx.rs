//! IDX container: `0x00 0x00 <type> <ndim>`, big-endian `u32` dims, raw
//! payload. Only the unsigned-byte type (`0x08`) is supported.

use std::fs;
use std::path::Path;

use super::{Dataset, InputKind, Split};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const UBYTE: u8 = 0x08;

struct Idx {
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn parse(bytes: &[u8], what: &str) -> Result<Idx> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format(format!("{what}: bad IDX magic")));
    }
    if bytes[2] != UBYTE {
        return Err(Error::Format(format!("{what}: unsupported IDX type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(Error::Format(format!("{what}: IDX with zero dimensions")));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format(format!("{what}: truncated IDX header")));
    }
    let dims: Vec<usize> =
        bytes[4..header].chunks_exact(4).map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize).collect();
    let expected = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    match expected {
        Some(n) if n == bytes.len() - header => {}
        _ => {
            return Err(Error::Format(format!(
                "{what}: dims {dims:?} disagree with {} payload bytes",
                bytes.len() - header
            )))
        }
    }
    Ok(Idx { dims, payload: bytes[header..].to_vec() })
}

fn checksum(bytes: &[u8]) -> u64 {
    // FNV-1a
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Reads an image file of shape `(count, rows, cols)` and a label file of
/// shape `(count)`. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ibytes = fs::read(ip)?;
    let lbytes = fs::read(lp)?;
    let img = parse(&ibytes, "images")?;
    let lab = parse(&lbytes, "labels")?;
    if img.dims.len() != 3 {
        return Err(Error::Format(format!("images: expected 3 dims, got {:?}", img.dims)));
    }
    if lab.dims.len() != 1 {
        return Err(Error::Format(format!("labels: expected 1 dim, got {:?}", lab.dims)));
    }
    let (count, rows, cols) = (img.dims[0], img.dims[1], img.dims[2]);
    if lab.dims[0] != count {
        return Err(Error::Inconsistent(format!("{count} images but {} labels", lab.dims[0])));
    }
    let px = rows * cols;
    let inputs: Vec<Matrix> = (0..count)
        .map(|i| {
            let data = img.payload[i * px..(i + 1) * px].iter().map(|&b| b as f64 / 255.0).collect();
            Matrix::new(px, 1, data)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = lab.payload.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    Ok(Dataset {
        inputs,
        labels,
        num_classes,
        kind: InputKind::Image { channels: 1, height: rows, width: cols },
        split: Split::All,
        provenance: format!(
            "idx({}#{:016x}, {}#{:016x})",
            ip.display(),
            checksum(&ibytes),
            lp.display(),
            checksum(&lbytes)
        ),
    })
}

fn header(dims: &[usize]) -> Result<Vec<u8>> {
    let mut out = vec![0, 0, UBYTE, dims.len() as u8];
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    Ok(out)
}

/// Writes a single-channel image dataset. Pixels are rounded to the nearest
/// multiple of 1/255 after clamping to `[0, 1]`.
pub fn write_idx(data: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let InputKind::Image { channels: 1, height, width } = data.kind else {
        return Err(Error::InvalidArgument("IDX export needs single-channel images".into()));
    };
    data.validate()?;
    if data.num_classes > 256 {
        return Err(Error::InvalidArgument("IDX labels are bytes".into()));
    }
    let mut ib = header(&[data.len(), height, width])?;
    for x in &data.inputs {
        ib.extend(x.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut lb = header(&[data.len()])?;
    lb.extend(data.labels.iter().map(|&l| l as u8));
    fs::write(images, ib)?;
    fs::write(labels, lb)?;
    Ok(())
}
