//! Flat binary tensor files, named tensor archives and atomic writes.
//!
//! Tensor record layout (little-endian):
//!
//! ```text
//! magic    4 bytes  "AVTN"
//! version  u8       1
//! dtype    u8       1 = f32, 2 = f64
//! ndim     u16
//! dims     ndim × u64
//! payload  row-major elements
//! ```
//!
//! An archive is the magic `"AVTA"`, a `u32` count, then for every entry a
//! `u32` name length, the UTF-8 name and one tensor record.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::signal::Spectrogram;
use crate::tensor::{DType, Real, Tensor};

const TENSOR_MAGIC: &[u8; 4] = b"AVTN";
const ARCHIVE_MAGIC: &[u8; 4] = b"AVTA";
const VERSION: u8 = 1;

pub fn encode_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.extend_from_slice(&(t.ndim() as u16).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn err(&self, reason: &str) -> Error {
        Error::Format { path: self.path.to_path_buf(), reason: format!("{} at byte {}", reason, self.pos) }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Decodes one record, converting to `T` if the stored dtype differs.
    fn tensor<T: Real>(&mut self) -> Result<Tensor<T>> {
        if self.take(4)? != TENSOR_MAGIC {
            return Err(self.err("bad tensor magic"));
        }
        let version = self.take(1)?[0];
        if version != VERSION {
            return Err(self.err(&format!("unsupported version {}", version)));
        }
        let dtype = DType::from_code(self.take(1)?[0]).ok_or_else(|| self.err("unknown dtype"))?;
        let ndim = self.u16()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(dtype.size()).ok_or_else(|| self.err("size overflow"))?)?;
        let data: Vec<T> = match dtype {
            DType::F32 => bytes.chunks_exact(4).map(|b| T::from_f64_lossy(f32::read_le(b) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|b| T::from_f64_lossy(f64::read_le(b))).collect(),
        };
        Tensor::from_vec(&shape, data)
    }
}

/// Writes bytes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = tmp_sibling(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{}.tmp{}", name, std::process::id()))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

pub fn save_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    write_atomic(path, &buf)
}

pub fn load_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = read_bytes(path)?;
    let mut c = Cursor { buf: &bytes, pos: 0, path };
    let t = c.tensor()?;
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes"));
    }
    Ok(t)
}

pub fn save_archive<T: Real>(path: &Path, entries: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        encode_tensor(t, &mut buf);
    }
    write_atomic(path, &buf)
}

pub fn load_archive<T: Real>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let bytes = read_bytes(path)?;
    let mut c = Cursor { buf: &bytes, pos: 0, path };
    if c.take(4)? != ARCHIVE_MAGIC {
        return Err(c.err("bad archive magic"));
    }
    let count = c.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?).map_err(|_| c.err("name is not UTF-8"))?.to_string();
        let t = c.tensor()?;
        out.insert(name, t);
    }
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes"));
    }
    Ok(out)
}

/// Spectrograms are stored as a `[2, frames, bins]` f64 tensor: magnitude, then phase.
/// PNG-encodes `img` and writes it atomically.
pub fn save_png(path: &Path, img: &image::RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes)
}

pub fn spectrogram_tensor(s: &Spectrogram) -> Tensor<f64> {
    let mut data = s.magnitude.clone();
    data.extend_from_slice(&s.phase);
    Tensor::from_vec(&[2, s.frames, s.bins], data).expect("spectrogram shape")
}

pub fn save_spectrogram(path: &Path, s: &Spectrogram) -> Result<()> {
    save_tensor(path, &spectrogram_tensor(s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::<f32>::from_vec(&[2, 1], vec![1.0, -2.0]).unwrap();
        let mut b = Vec::new();
        encode_tensor(&t, &mut b);
        let mut expect = b"AVTN".to_vec();
        expect.extend_from_slice(&[1, 1, 2, 0]);
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn truncated_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.avt");
        save_tensor(&p, &Tensor::<f64>::zeros(&[3, 3])).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_tensor::<f64>(&p), Err(Error::Format { .. })));
        assert!(matches!(load_tensor::<f64>(&dir.path().join("x")), Err(Error::Missing(_))));
    }

    proptest! {
        #[test]
        fn archive_round_trip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 0..4), 1..5)) {
            let dir = tempfile::tempdir().unwrap();
            let mut m = BTreeMap::new();
            for (i, s) in shapes.iter().enumerate() {
                m.insert(format!("layer{}.w", i), Tensor::<f32>::from_fn(s, |j| j as f32 * 0.5 - i as f32));
            }
            let p = dir.path().join("a.ava");
            save_archive(&p, &m).unwrap();
            prop_assert_eq!(load_archive::<f32>(&p).unwrap(), m);
        }
    }
}
