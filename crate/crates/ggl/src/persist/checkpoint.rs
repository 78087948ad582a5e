//! Binary checkpoint and optimizer-state files.
//!
//! Checkpoint layout (little-endian throughout):
//!   magic "GGL1" | version u32 | precision u8 | pad [u8;3] | step u64 |
//!   param_count u64 | layout_hash u64 | segment_count u32 |
//!   per segment: name_len u16, name bytes, ndim u8, dims u64*ndim,
//!                decayable u8, offset u64 |
//!   payload: param_count raw values | payload_checksum u64 (FNV-1a)
//!
//! Optimizer-state files ("GGLO") carry the Adam step counter plus first
//! and second moment payloads in the same precision scheme.

use crate::error::{Error, Result};
use crate::model::{ParamLayout, ParamVector, Real};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

const CKPT_MAGIC: &[u8; 4] = b"GGL1";
const OPT_MAGIC: &[u8; 4] = b"GGLO";
const BASIS_MAGIC: &[u8; 4] = b"GGLB";
const FORMAT_VERSION: u32 = 1;

/// Writes to a temp file in the same directory, then renames into place.
/// Readers therefore never observe a partial file.
pub fn atomic_write(path: &Path, write: impl FnOnce(&mut BufWriter<std::fs::File>) -> Result<()>) -> Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| Error::format(format!("path has no parent: {}", path.display())))?;
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file")
    ));
    {
        let file = std::fs::File::create(&tmp)?;
        let mut w = BufWriter::new(file);
        write(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn write_values<T: Real>(w: &mut impl Write, values: &[T]) -> Result<u64> {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut buf = Vec::with_capacity(8192);
    for v in values {
        // Each type stores its native width.
        if T::PRECISION_TAG == 32 {
            buf.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
        } else {
            buf.extend_from_slice(&v.into_f64().to_le_bytes());
        }
        if buf.len() >= 8192 {
            for &b in &buf {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            w.write_all(&buf)?;
            buf.clear();
        }
    }
    for &b in &buf {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    w.write_all(&buf)?;
    Ok(h)
}

fn read_values<T: Real>(r: &mut impl Read, count: usize) -> Result<(Vec<T>, u64)> {
    let width = if T::PRECISION_TAG == 32 { 4 } else { 8 };
    let mut bytes = vec![0u8; count * width];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format(format!("truncated payload: {e}")))?;
    let checksum = fnv1a(&bytes);
    let mut out = Vec::with_capacity(count);
    if T::PRECISION_TAG == 32 {
        for c in bytes.chunks_exact(4) {
            out.push(T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64));
        }
    } else {
        for c in bytes.chunks_exact(8) {
            out.push(T::from_f64(f64::from_le_bytes([
                c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
            ])));
        }
    }
    Ok((out, checksum))
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}
fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn write_layout_table(w: &mut impl Write, layout: &ParamLayout) -> Result<()> {
    write_u32(w, layout.segments.len() as u32)?;
    for seg in &layout.segments {
        let name = seg.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[seg.shape.len() as u8])?;
        for &dim in &seg.shape {
            write_u64(w, dim as u64)?;
        }
        w.write_all(&[seg.decayable as u8])?;
        write_u64(w, seg.offset as u64)?;
    }
    Ok(())
}

fn read_and_check_layout_table(r: &mut impl Read, layout: &ParamLayout) -> Result<()> {
    let n = read_u32(r)? as usize;
    if n != layout.segments.len() {
        return Err(Error::format(format!(
            "layout table has {n} segments, expected {}",
            layout.segments.len()
        )));
    }
    for seg in &layout.segments {
        let name_len = read_u16(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("segment name is not UTF-8"))?;
        let ndim = read_u8(r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(r)? as usize);
        }
        let decayable = read_u8(r)? != 0;
        let offset = read_u64(r)? as usize;
        if name != seg.name
            || dims != seg.shape
            || decayable != seg.decayable
            || offset != seg.offset
        {
            return Err(Error::format(format!(
                "layout table mismatch at segment '{}' (file has '{name}')",
                seg.name
            )));
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Real>(path: &Path, step: u64, params: &ParamVector<T>) -> Result<()> {
    let layout = params.layout();
    atomic_write(path, |w| {
        w.write_all(CKPT_MAGIC)?;
        write_u32(w, FORMAT_VERSION)?;
        w.write_all(&[T::PRECISION_TAG, 0, 0, 0])?;
        write_u64(w, step)?;
        write_u64(w, layout.total() as u64)?;
        write_u64(w, layout.hash64())?;
        write_layout_table(w, layout)?;
        let checksum = write_values(w, &params.values)?;
        write_u64(w, checksum)?;
        Ok(())
    })
}

pub fn load_checkpoint<T: Real>(
    path: &Path,
    layout: &Arc<ParamLayout>,
) -> Result<(u64, ParamVector<T>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {magic:?}, not a checkpoint file",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported format version {version}")));
    }
    let mut prec = [0u8; 4];
    r.read_exact(&mut prec)?;
    if prec[0] != T::PRECISION_TAG {
        return Err(Error::format(format!(
            "precision tag {} does not match requested {}-bit load",
            prec[0],
            T::PRECISION_TAG
        )));
    }
    let step = read_u64(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    if count != layout.total() {
        return Err(Error::format(format!(
            "parameter count {count} does not match layout total {}",
            layout.total()
        )));
    }
    let hash = read_u64(&mut r)?;
    if hash != layout.hash64() {
        return Err(Error::format("layout hash mismatch"));
    }
    read_and_check_layout_table(&mut r, layout)?;
    let (values, checksum) = read_values::<T>(&mut r, count)?;
    let stored = read_u64(&mut r)?;
    if stored != checksum {
        return Err(Error::format("payload checksum mismatch"));
    }
    Ok((step, ParamVector::from_values(layout.clone(), values)))
}

/// AdamW moments plus the bias-correction counter.
pub fn save_optimizer_state<T: Real>(
    path: &Path,
    step: u64,
    t: u64,
    m: &[T],
    v: &[T],
    layout: &ParamLayout,
) -> Result<()> {
    atomic_write(path, |w| {
        w.write_all(OPT_MAGIC)?;
        write_u32(w, FORMAT_VERSION)?;
        w.write_all(&[T::PRECISION_TAG, 0, 0, 0])?;
        write_u64(w, step)?;
        write_u64(w, t)?;
        write_u64(w, layout.total() as u64)?;
        write_u64(w, layout.hash64())?;
        let hm = write_values(w, m)?;
        let hv = write_values(w, v)?;
        write_u64(w, hm)?;
        write_u64(w, hv)?;
        Ok(())
    })
}

pub fn load_optimizer_state<T: Real>(
    path: &Path,
    layout: &ParamLayout,
) -> Result<(u64, u64, Vec<T>, Vec<T>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != OPT_MAGIC {
        return Err(Error::format("not an optimizer-state file"));
    }
    if read_u32(&mut r)? != FORMAT_VERSION {
        return Err(Error::format("unsupported format version"));
    }
    let mut prec = [0u8; 4];
    r.read_exact(&mut prec)?;
    if prec[0] != T::PRECISION_TAG {
        return Err(Error::format("optimizer state precision mismatch"));
    }
    let step = read_u64(&mut r)?;
    let t = read_u64(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    if count != layout.total() {
        return Err(Error::format("optimizer state length mismatch"));
    }
    if read_u64(&mut r)? != layout.hash64() {
        return Err(Error::format("layout hash mismatch"));
    }
    let (m, hm) = read_values::<T>(&mut r, count)?;
    let (v, hv) = read_values::<T>(&mut r, count)?;
    if read_u64(&mut r)? != hm || read_u64(&mut r)? != hv {
        return Err(Error::format("optimizer payload checksum mismatch"));
    }
    Ok((step, t, m, v))
}

/// Column-orthonormal basis files: `cols` vectors of length `rows`, stored
/// column-major in f64.
pub fn save_basis(path: &Path, columns: &[Vec<f64>]) -> Result<()> {
    if columns.is_empty() {
        return Err(Error::data("refusing to save an empty basis"));
    }
    let rows = columns[0].len();
    if columns.iter().any(|c| c.len() != rows) {
        return Err(Error::data("basis columns have unequal lengths"));
    }
    atomic_write(path, |w| {
        w.write_all(BASIS_MAGIC)?;
        write_u32(w, FORMAT_VERSION)?;
        write_u64(w, rows as u64)?;
        write_u64(w, columns.len() as u64)?;
        let mut h: u64 = 0xcbf29ce484222325;
        for col in columns {
            let bytes: Vec<u8> = col.iter().flat_map(|x| x.to_le_bytes()).collect();
            for &b in &bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            w.write_all(&bytes)?;
        }
        write_u64(w, h)?;
        Ok(())
    })
}

pub fn load_basis(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != BASIS_MAGIC {
        return Err(Error::format("not a basis file"));
    }
    if read_u32(&mut r)? != FORMAT_VERSION {
        return Err(Error::format("unsupported format version"));
    }
    let rows = read_u64(&mut r)? as usize;
    let cols = read_u64(&mut r)? as usize;
    let mut columns = Vec::with_capacity(cols);
    let mut h: u64 = 0xcbf29ce484222325;
    for _ in 0..cols {
        let mut bytes = vec![0u8; rows * 8];
        r.read_exact(&mut bytes)?;
        for &b in &bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        columns.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect(),
        );
    }
    if read_u64(&mut r)? != h {
        return Err(Error::format("basis checksum mismatch"));
    }
    Ok(columns)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;
    use crate::model::{Model, ModelConfig};

    fn tiny_model() -> Model {
        Model::new(ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers: 1,
            vocab: 5,
            positions: 2,
            tasks: vec![TaskKind::Add],
        })
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_f32() {
        let model = tiny_model();
        let params: ParamVector<f32> = model.init_params(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("step_00000200.ggl");
        save_checkpoint(&path, 200, &params).unwrap();
        let (step, back) = load_checkpoint::<f32>(&path, &model.layout).unwrap();
        assert_eq!(step, 200);
        assert!(params
            .values
            .iter()
            .zip(&back.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_f64() {
        let model = tiny_model();
        let params: ParamVector<f64> = model.init_params(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ggl");
        save_checkpoint(&path, 12, &params).unwrap();
        let (_, back) = load_checkpoint::<f64>(&path, &model.layout).unwrap();
        assert!(params
            .values
            .iter()
            .zip(&back.values)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let model = tiny_model();
        let params: ParamVector<f32> = model.init_params(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ggl");
        save_checkpoint(&path, 0, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path, &model.layout).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let model = tiny_model();
        let params: ParamVector<f32> = model.init_params(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ggl");
        save_checkpoint(&path, 0, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint::<f32>(&path, &model.layout).is_err());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let model = tiny_model();
        let other = Model::new(ModelConfig {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            layers: 1,
            vocab: 5,
            positions: 2,
            tasks: vec![TaskKind::Mul],
        })
        .unwrap();
        let params: ParamVector<f32> = model.init_params(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ggl");
        save_checkpoint(&path, 0, &params).unwrap();
        assert!(load_checkpoint::<f32>(&path, &other.layout).is_err());
    }

    #[test]
    fn precision_tag_is_enforced() {
        let model = tiny_model();
        let params: ParamVector<f32> = model.init_params(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ggl");
        save_checkpoint(&path, 0, &params).unwrap();
        assert!(load_checkpoint::<f64>(&path, &model.layout).is_err());
    }

    #[test]
    fn resave_same_step_overwrites_identically() {
        let model = tiny_model();
        let params: ParamVector<f32> = model.init_params(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ggl");
        save_checkpoint(&path, 400, &params).unwrap();
        let first = std::fs::read(&path).unwrap();
        save_checkpoint(&path, 400, &params).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn optimizer_state_round_trip() {
        let model = tiny_model();
        let p = model.layout.total();
        let m: Vec<f32> = (0..p).map(|i| i as f32 * 0.25).collect();
        let v: Vec<f32> = (0..p).map(|i| i as f32 * 0.5 + 1.0).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.gglo");
        save_optimizer_state(&path, 2000, 2000, &m, &v, &model.layout).unwrap();
        let (step, t, m2, v2) = load_optimizer_state::<f32>(&path, &model.layout).unwrap();
        assert_eq!((step, t), (2000, 2000));
        assert_eq!(m, m2);
        assert_eq!(v, v2);
    }

    #[test]
    fn basis_round_trip() {
        let cols = vec![vec![1.0, 0.0, 0.5], vec![0.0, -1.0, 2.0]];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.gglb");
        save_basis(&path, &cols).unwrap();
        assert_eq!(load_basis(&path).unwrap(), cols);
    }
}
