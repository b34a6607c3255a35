//! Slice file format.
//!
//! One image per file: magic `CTSL`, version `u16`, height `u32`, width
//! `u32`, dtype `u8` (0 = f32, 1 = f64), then the row-major samples — all
//! little-endian. A training pair is five files sharing a stem with the
//! suffixes `.ldct`, `.ndct`, `.clean`, `.anoise`, `.tnoise`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::sim::{ImageHU, TrainingPair};
use crate::tensor::DType;

const MAGIC: &[u8; 4] = b"CTSL";
const VERSION: u16 = 1;

/// File suffixes of a stored pair, in the order the fields appear in
/// [`TrainingPair`].
pub const PAIR_SUFFIXES: [&str; 5] = ["ldct", "ndct", "clean", "anoise", "tnoise"];

fn dtype_code(dtype: DType) -> u8 {
    match dtype {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

/// Writes one slice. `dtype` selects the stored precision; f32 halves the
/// file size but rounds the samples, so pairs whose noise algebra must stay
/// exact should be stored as f64.
pub fn write_slice(path: &Path, img: &ImageHU, dtype: DType) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |buf: &[u8]| w.write_all(buf).map_err(|e| Error::io(path, e));
    emit(MAGIC)?;
    emit(&VERSION.to_le_bytes())?;
    emit(&(img.h() as u32).to_le_bytes())?;
    emit(&(img.w() as u32).to_le_bytes())?;
    emit(&[dtype_code(dtype)])?;
    match dtype {
        DType::F32 => {
            for &v in img.data() {
                emit(&(v as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &v in img.data() {
                emit(&v.to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one slice, returning the image and the precision it was stored at
/// (so a rewrite at the same dtype is byte-identical).
pub fn read_slice(path: &Path) -> Result<(ImageHU, DType)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}, expected \"CTSL\"")));
    }
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u16buf).map_err(|e| Error::io(path, e))?;
    let version = u16::from_le_bytes(u16buf);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let h = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf).map_err(|e| Error::io(path, e))?;
    let w = u32::from_le_bytes(u32buf) as usize;
    let mut code = [0u8; 1];
    r.read_exact(&mut code).map_err(|e| Error::io(path, e))?;
    let dtype = match code[0] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::format(path, format!("unknown dtype code {other}"))),
    };
    if h == 0 || w == 0 || h.checked_mul(w).is_none() {
        return Err(Error::format(path, format!("invalid dimensions {h}x{w}")));
    }

    let n = h * w;
    let mut data = Vec::with_capacity(n);
    match dtype {
        DType::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        DType::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                data.push(f64::from_le_bytes(buf));
            }
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after image data"));
    }
    let img = ImageHU::new(h, w, data).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((img, dtype))
}

/// Path of one pair member: `<dir>/<stem>.<suffix>`.
pub fn pair_path(dir: &Path, stem: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{stem}.{suffix}"))
}

/// Writes the five slices of a pair under `dir` with the shared `stem`.
pub fn write_pair(dir: &Path, stem: &str, pair: &TrainingPair, dtype: DType) -> Result<()> {
    let members = [
        (&pair.ldct, PAIR_SUFFIXES[0]),
        (&pair.ndct, PAIR_SUFFIXES[1]),
        (&pair.clean, PAIR_SUFFIXES[2]),
        (&pair.added_noise, PAIR_SUFFIXES[3]),
        (&pair.target_noise, PAIR_SUFFIXES[4]),
    ];
    for (img, suffix) in members {
        write_slice(&pair_path(dir, stem, suffix), img, dtype)?;
    }
    Ok(())
}

/// Reads the five slices of a pair written by [`write_pair`].
pub fn read_pair(dir: &Path, stem: &str) -> Result<TrainingPair> {
    let load = |suffix: &str| read_slice(&pair_path(dir, stem, suffix)).map(|(img, _)| img);
    Ok(TrainingPair {
        ldct: load(PAIR_SUFFIXES[0])?,
        ndct: load(PAIR_SUFFIXES[1])?,
        clean: load(PAIR_SUFFIXES[2])?,
        added_noise: load(PAIR_SUFFIXES[3])?,
        target_noise: load(PAIR_SUFFIXES[4])?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::phantom::PhantomSpec;
    use crate::sim::{gen_pair, SimConfig};

    fn tmpdir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("ctdf-slice-io-{name}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn write_read_write_is_byte_identical() {
        let dir = tmpdir("roundtrip");
        let img = ImageHU::new(3, 4, (0..12).map(|v| v as f64 * 0.37 - 1.0).collect()).unwrap();
        for dtype in [DType::F32, DType::F64] {
            let p1 = dir.join(format!("a-{dtype:?}.clean"));
            let p2 = dir.join(format!("b-{dtype:?}.clean"));
            write_slice(&p1, &img, dtype).unwrap();
            let (back, read_dtype) = read_slice(&p1).unwrap();
            assert_eq!(read_dtype, dtype);
            write_slice(&p2, &back, read_dtype).unwrap();
            let b1 = std::fs::read(&p1).unwrap();
            let b2 = std::fs::read(&p2).unwrap();
            assert_eq!(b1, b2, "rewrite at {dtype:?} must be byte-identical");
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn f64_storage_is_lossless() {
        let dir = tmpdir("lossless");
        let img =
            ImageHU::new(2, 2, vec![1.0 / 3.0, -2.0e-13, 999.999999999, 0.1 + 0.2]).unwrap();
        let path = dir.join("x.ndct");
        write_slice(&path, &img, DType::F64).unwrap();
        let (back, _) = read_slice(&path).unwrap();
        assert_eq!(img, back);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_corrupt_headers() {
        let dir = tmpdir("corrupt");
        let path = dir.join("bad.ldct");

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_slice(&path), Err(Error::Io { .. }) | Err(Error::Format { .. })));

        // Valid magic, bogus dtype code.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(7);
        bytes.extend_from_slice(&0f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_slice(&path), Err(Error::Format { .. })));

        // Truncated payload.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&0f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_slice(&path), Err(Error::Io { .. })));

        // Trailing garbage.
        let img = ImageHU::zeros(1, 1).unwrap();
        write_slice(&path, &img, DType::F32).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_slice(&path), Err(Error::Format { .. })));

        assert!(matches!(read_slice(&dir.join("missing.ldct")), Err(Error::Io { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn pair_roundtrip_preserves_the_noise_algebra() {
        let dir = tmpdir("pair");
        let spec = PhantomSpec::new(2, (-100.0, 100.0), 32, false).unwrap();
        let sim = SimConfig { n_angles: 30, n_det: 48, ..Default::default() };
        let pair = gen_pair(&spec, &sim, 77).unwrap();
        write_pair(&dir, "pair_00000", &pair, DType::F64).unwrap();
        let back = read_pair(&dir, "pair_00000").unwrap();
        assert_eq!(pair, back);
        // The stored pair satisfies the same bit-exact decomposition.
        assert_eq!(back.ndct, back.clean.add(&back.target_noise).unwrap());
        assert_eq!(back.ldct, back.ndct.add(&back.added_noise).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }
}
