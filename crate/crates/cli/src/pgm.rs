//! 8-bit binary PGM (P5) previews with the documented display windows.

use std::path::Path;

use ctdf_core::error::{Error, Result};

/// Display window for noise images, in HU around zero.
pub const NOISE_WINDOW: (f64, f64) = (-50.0, 50.0);

/// Display window for spectrum previews: raw magnitudes mapped through
/// log10 between these bounds.
pub const SPECTRUM_MAGNITUDE_WINDOW: (f64, f64) = (1e4, 1e5);

/// Maps values into `[0, 255]` linearly over `[lo, hi]`, clamping outside.
pub fn window_to_u8(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            let t = ((v - lo) / span).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect()
}

/// Maps spectral magnitudes through the log-magnitude display window:
/// `10^4 -> 0` and `10^5 -> 255`, linear in log10 between.
pub fn spectrum_log_to_u8(magnitudes: &[f64]) -> Vec<u8> {
    let (lo, hi) = SPECTRUM_MAGNITUDE_WINDOW;
    let (llo, lhi) = (lo.log10(), hi.log10());
    magnitudes
        .iter()
        .map(|&m| {
            let l = m.max(f64::MIN_POSITIVE).log10();
            let t = ((l - llo) / (lhi - llo)).clamp(0.0, 1.0);
            (t * 255.0).round() as u8
        })
        .collect()
}

/// Writes a binary (P5) PGM with maxval 255.
pub fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != w * h || w == 0 || h == 0 {
        return Err(Error::Shape(format!(
            "PGM needs w*h = {} pixels for {w}x{h}, got {}",
            w * h,
            pixels.len()
        )));
    }
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a P5 file written by [`write_pgm`]: returns (w, h, maxval, pixels).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_end = data
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .ok_or_else(|| Error::format(path, "missing PGM header lines"))?;
    let header = std::str::from_utf8(&data[..header_end])
        .map_err(|_| Error::format(path, "PGM header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(Error::format(path, "not a P5 PGM"));
    }
    let dims = lines
        .next()
        .ok_or_else(|| Error::format(path, "missing dimensions"))?;
    let (w, h) = dims
        .split_once(' ')
        .ok_or_else(|| Error::format(path, "malformed dimension line"))?;
    let w: usize = w.parse().map_err(|e| Error::format(path, format!("width: {e}")))?;
    let h: usize = h.parse().map_err(|e| Error::format(path, format!("height: {e}")))?;
    let maxval: usize = lines
        .next()
        .ok_or_else(|| Error::format(path, "missing maxval"))?
        .parse()
        .map_err(|e| Error::format(path, format!("maxval: {e}")))?;
    let pixels = data[header_end + 1..].to_vec();
    if pixels.len() != w * h {
        return Err(Error::format(
            path,
            format!("expected {} pixel bytes, found {}", w * h, pixels.len()),
        ));
    }
    Ok((w, h, maxval, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_maps_bounds_and_clamps() {
        let vals = [-50.0, 0.0, 50.0, -1000.0, 1000.0];
        let px = window_to_u8(&vals, NOISE_WINDOW.0, NOISE_WINDOW.1);
        assert_eq!(px, vec![0, 128, 255, 0, 255]);
    }

    #[test]
    fn spectrum_window_is_logarithmic() {
        let px = spectrum_log_to_u8(&[1e4, 1e5, 10f64.powf(4.5), 1.0, 1e9, 0.0]);
        assert_eq!(px[0], 0);
        assert_eq!(px[1], 255);
        assert_eq!(px[2], 128);
        assert_eq!(px[3], 0);
        assert_eq!(px[4], 255);
        assert_eq!(px[5], 0);
    }

    #[test]
    fn pgm_roundtrip_and_header() {
        let dir = std::env::temp_dir().join(format!("ctdf-pgm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        let pixels: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        write_pgm(&path, 4, 3, &pixels).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n4 3\n255\n"));
        let (w, h, maxval, back) = read_pgm(&path).unwrap();
        assert_eq!((w, h, maxval), (4, 3, 255));
        assert_eq!(back, pixels);
        assert!(write_pgm(&path, 5, 3, &pixels).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
