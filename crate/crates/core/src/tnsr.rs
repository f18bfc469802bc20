//! TNSR binary tensor container and the multi-tensor checkpoint built on
//! top of it.
//!
//! One tensor per container: magic `TNSR`, version `u32`, dtype `u8`
//! (0 = little-endian f32, 1 = little-endian f64), rank `u32`, dims
//! `u64[rank]`, then the row-major payload. Feature maps are written as
//! f32 (dtype 0); checkpoints use f64 (dtype 1) to preserve parameters
//! exactly.

use crate::error::{Error, Result};
use crate::featurize::FeatureMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"TNSR";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// A shaped row-major array as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl StoredTensor {
    pub fn len(&self) -> usize {
        self.dims.iter().product::<u64>() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &StoredTensor, dtype: DType) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype as u8])?;
    w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for d in &t.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    match dtype {
        DType::F32 => {
            for v in &t.data {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<StoredTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::BadTensorFile("bad magic".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::BadTensorFile(format!("unsupported version {version}")));
    }
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    r.read_exact(&mut u32buf)?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(Error::BadTensorFile(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut u64buf)?;
        dims.push(u64::from_le_bytes(u64buf));
    }
    let n = dims.iter().product::<u64>() as usize;
    let mut data = Vec::with_capacity(n);
    match dtype[0] {
        0 => {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        1 => {
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        other => return Err(Error::BadTensorFile(format!("unknown dtype code {other}"))),
    }
    Ok(StoredTensor { dims, data })
}

pub fn write_tensor_file(path: &Path, t: &StoredTensor, dtype: DType) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut f, t, dtype)?;
    f.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<StoredTensor> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut f)
}

/// Write a feature map as an H' x W' x C f32 tensor with a trailer tensor
/// carrying (stride, image_w, image_h).
pub fn write_feature_map(path: &Path, fm: &FeatureMap) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let body = StoredTensor {
        dims: vec![
            fm.height_cells as u64,
            fm.width_cells as u64,
            fm.channels as u64,
        ],
        data: fm.data.clone(),
    };
    write_tensor(&mut f, &body, DType::F32)?;
    let meta = StoredTensor {
        dims: vec![3],
        data: vec![fm.stride, fm.image_size.0, fm.image_size.1],
    };
    write_tensor(&mut f, &meta, DType::F64)?;
    f.flush()?;
    Ok(())
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let body = read_tensor(&mut f)?;
    if body.dims.len() != 3 {
        return Err(Error::BadTensorFile("feature map must be rank 3".into()));
    }
    let meta = read_tensor(&mut f)?;
    if meta.data.len() != 3 {
        return Err(Error::BadTensorFile("feature map trailer must hold 3 values".into()));
    }
    let fm = FeatureMap {
        height_cells: body.dims[0] as usize,
        width_cells: body.dims[1] as usize,
        channels: body.dims[2] as usize,
        data: body.data,
        stride: meta.data[0],
        image_size: (meta.data[1], meta.data[2]),
    };
    if fm.stride <= 0.0
        || (fm.height_cells as f64) * fm.stride < fm.image_size.1
        || (fm.width_cells as f64) * fm.stride < fm.image_size.0
    {
        return Err(Error::BadTensorFile(
            "feature map does not cover its image".into(),
        ));
    }
    Ok(fm)
}

/// Multi-tensor checkpoint: a little-endian u64 manifest length, a JSON-ish
/// manifest mapping names to order, then one TNSR blob per entry.
///
/// The manifest is a plain `name\n` list to keep the reader dependency-free;
/// shapes live in the blobs themselves.
pub fn write_checkpoint(path: &Path, entries: &[(String, StoredTensor)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let manifest: String = entries
        .iter()
        .map(|(n, _)| n.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    f.write_all(&(manifest.len() as u64).to_le_bytes())?;
    f.write_all(manifest.as_bytes())?;
    for (_, t) in entries {
        write_tensor(&mut f, t, DType::F64)?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, StoredTensor)>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lenbuf = [0u8; 8];
    f.read_exact(&mut lenbuf)?;
    let mlen = u64::from_le_bytes(lenbuf) as usize;
    if mlen > 1 << 20 {
        return Err(Error::BadTensorFile("implausible manifest length".into()));
    }
    let mut manifest = vec![0u8; mlen];
    f.read_exact(&mut manifest)?;
    let manifest = String::from_utf8(manifest)
        .map_err(|_| Error::BadTensorFile("manifest is not utf-8".into()))?;
    let mut out = Vec::new();
    for name in manifest.lines().filter(|l| !l.is_empty()) {
        out.push((name.to_string(), read_tensor(&mut f)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_f64_exact() {
        let t = StoredTensor {
            dims: vec![2, 3],
            data: vec![1.0, -2.5, 3.25, 0.0, 1e-12, 6.6],
        };
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn tensor_roundtrip_f32_quantizes() {
        let t = StoredTensor {
            dims: vec![3],
            data: vec![1.0, 0.1, -7.5],
        };
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F32).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.data[0], 1.0);
        assert!((back.data[1] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn header_layout_is_fixed() {
        let t = StoredTensor {
            dims: vec![2],
            data: vec![0.0, 0.0],
        };
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F32).unwrap();
        assert_eq!(&buf[0..4], b"TNSR");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), VERSION);
        assert_eq!(buf[8], 0); // dtype f32
        assert_eq!(u32::from_le_bytes(buf[9..13].try_into().unwrap()), 1); // rank
        assert_eq!(u64::from_le_bytes(buf[13..21].try_into().unwrap()), 2); // dim
        assert_eq!(buf.len(), 21 + 2 * 4);
    }

    #[test]
    fn rejects_garbage() {
        let mut buf = b"NOPE".to_vec();
        buf.extend_from_slice(&[0u8; 32]);
        assert!(matches!(
            read_tensor(&mut buf.as_slice()),
            Err(Error::BadTensorFile(_))
        ));
    }

    #[test]
    fn feature_map_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fm.tnsr");
        let mut fm = FeatureMap::zeros(8, 4, 2, 4.0, (32.0, 16.0));
        for (i, v) in fm.data.iter_mut().enumerate() {
            *v = i as f64 * 0.5;
        }
        write_feature_map(&path, &fm).unwrap();
        let back = read_feature_map(&path).unwrap();
        assert_eq!(back.width_cells, 8);
        assert_eq!(back.height_cells, 4);
        assert_eq!(back.channels, 2);
        assert_eq!(back.stride, 4.0);
        assert_eq!(back.image_size, (32.0, 16.0));
        for (a, b) in fm.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.ckpt");
        let entries = vec![
            (
                "layer0.weight".to_string(),
                StoredTensor {
                    dims: vec![2, 2],
                    data: vec![1.0, 2.0, 3.0, 4.0],
                },
            ),
            (
                "layer0.bias".to_string(),
                StoredTensor {
                    dims: vec![2],
                    data: vec![-1.0, 1.0],
                },
            ),
        ];
        write_checkpoint(&path, &entries).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, entries);
    }
}
