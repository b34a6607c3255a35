//! Image-quality metrics: RMSE, global SSIM (two variants), and CNR.
//!
//! All metrics are computed on stored-HU images (the shifted scale), so the
//! SSIM mean terms are evaluated consistently in stored units; RMSE and CNR
//! are shift-invariant anyway.

use crate::error::{Error, Result};
use crate::sim::ImageHU;

/// Root-mean-square error in HU: `sqrt(mean((a-b)^2))`.
pub fn rmse(a: &ImageHU, b: &ImageHU) -> Result<f64> {
    if a.h() != b.h() || a.w() != b.w() {
        return Err(Error::Shape(format!(
            "rmse needs equal shapes, got {}x{} vs {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    let n = a.data().len() as f64;
    let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((sq / n).sqrt())
}

/// Which numerator the SSIM structure term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsimMode {
    /// `2*sigma_a*sigma_b + a2` — the product of the standard deviations.
    PaperGlobal,
    /// `2*cov(a,b) + a2` — the usual covariance form.
    CovarianceGlobal,
}

/// Stabilizers and mode for the global SSIM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub a1: f64,
    pub a2: f64,
    pub mode: SsimMode,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { a1: 1e-4, a2: 9e-4, mode: SsimMode::PaperGlobal }
    }
}

impl SsimParams {
    pub fn with_mode(mode: SsimMode) -> Self {
        Self { mode, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a1 > 0.0 && self.a2 > 0.0) {
            return Err(Error::Config(format!(
                "SSIM stabilizers must be positive, got a1={} a2={}",
                self.a1, self.a2
            )));
        }
        Ok(())
    }
}

/// Global means, biased variances and covariance of two equally-shaped
/// images, computed with one shared two-pass code path so that identical
/// inputs produce identical statistics bit-for-bit.
fn global_stats(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut va = 0.0;
    let mut vb = 0.0;
    let mut cov = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    (ma, mb, va / n, vb / n, cov / n)
}

/// Global-statistics SSIM over the whole slice.
///
/// Identical inputs give exactly 1.0 in both modes: every term is computed
/// through one shared path, and the paper-mode product of deviations is
/// evaluated as `sqrt(va*vb)` (equal in exact arithmetic, and collapsing to
/// `va` bitwise when the inputs coincide).
pub fn ssim(a: &ImageHU, b: &ImageHU, p: &SsimParams) -> Result<f64> {
    p.validate()?;
    if a.h() != b.h() || a.w() != b.w() {
        return Err(Error::Shape(format!(
            "ssim needs equal shapes, got {}x{} vs {}x{}",
            a.h(),
            a.w(),
            b.h(),
            b.w()
        )));
    }
    let (ma, mb, va, vb, cov) = global_stats(a.data(), b.data());
    let num1 = 2.0 * (ma * mb) + p.a1;
    let den1 = ma * ma + mb * mb + p.a1;
    let num2 = match p.mode {
        SsimMode::PaperGlobal => 2.0 * (va * vb).sqrt() + p.a2,
        SsimMode::CovarianceGlobal => 2.0 * cov + p.a2,
    };
    let den2 = va + vb + p.a2;
    Ok((num1 * num2) / (den1 * den2))
}

/// Role of a region of interest in the CNR computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiRole {
    Foreground,
    Background,
}

/// Rectangular region of interest, in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub row: usize,
    pub col: usize,
    pub h: usize,
    pub w: usize,
    pub role: RoiRole,
}

impl Roi {
    pub fn new(row: usize, col: usize, h: usize, w: usize, role: RoiRole) -> Result<Self> {
        if h * w < 4 {
            return Err(Error::Config(format!(
                "ROI must cover at least 4 pixels, got {h}x{w}"
            )));
        }
        Ok(Self { row, col, h, w, role })
    }

    fn stats(&self, img: &ImageHU) -> Result<(f64, f64)> {
        if self.row + self.h > img.h() || self.col + self.w > img.w() {
            return Err(Error::Shape(format!(
                "ROI {}+{}x{}+{} exceeds image {}x{}",
                self.row,
                self.h,
                self.col,
                self.w,
                img.h(),
                img.w()
            )));
        }
        let n = (self.h * self.w) as f64;
        let mut sum = 0.0;
        for r in self.row..self.row + self.h {
            for c in self.col..self.col + self.w {
                sum += img.at(r, c);
            }
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for r in self.row..self.row + self.h {
            for c in self.col..self.col + self.w {
                let d = img.at(r, c) - mean;
                sq += d * d;
            }
        }
        Ok((mean, (sq / n).sqrt()))
    }
}

/// Contrast-to-noise ratio: `2|mu_fg - mu_bg| / |sigma_fg - sigma_bg|`, with
/// biased (population) standard deviations.
///
/// The unusual difference in the denominator makes the score undefined when
/// both regions have the same deviation; that case is an explicit error
/// rather than a silent formula switch.
pub fn cnr(img: &ImageHU, fg: &Roi, bg: &Roi) -> Result<f64> {
    let (mu_fg, sd_fg) = fg.stats(img)?;
    let (mu_bg, sd_bg) = bg.stats(img)?;
    let denom = (sd_fg - sd_bg).abs();
    if denom < 1e-9 {
        return Err(Error::Degenerate(
            "CNR undefined for equal ROI standard deviations".into(),
        ));
    }
    Ok(2.0 * (mu_fg - mu_bg).abs() / denom)
}

/// One evaluated slice: LDCT-vs-NDCT and denoised-vs-NDCT scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub id: String,
    pub rmse_ldct: f64,
    pub rmse_out: f64,
    pub ssim_paper_ldct: f64,
    pub ssim_paper_out: f64,
    pub ssim_cov_ldct: f64,
    pub ssim_cov_out: f64,
}

/// Per-slice rows plus their arithmetic mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean: MetricsRow,
}

/// CSV header emitted and required by the report serialization.
pub const CSV_HEADER: &str =
    "id,rmse_ldct,rmse_out,ssim_paper_ldct,ssim_paper_out,ssim_cov_ldct,ssim_cov_out";

/// Scores one slice against its normal-dose reference.
pub fn slice_metrics(
    id: &str,
    ndct: &ImageHU,
    ldct: &ImageHU,
    denoised: &ImageHU,
) -> Result<MetricsRow> {
    let paper = SsimParams::with_mode(SsimMode::PaperGlobal);
    let cov = SsimParams::with_mode(SsimMode::CovarianceGlobal);
    Ok(MetricsRow {
        id: id.to_string(),
        rmse_ldct: rmse(ldct, ndct)?,
        rmse_out: rmse(denoised, ndct)?,
        ssim_paper_ldct: ssim(ldct, ndct, &paper)?,
        ssim_paper_out: ssim(denoised, ndct, &paper)?,
        ssim_cov_ldct: ssim(ldct, ndct, &cov)?,
        ssim_cov_out: ssim(denoised, ndct, &cov)?,
    })
}

/// Builds a report whose aggregate row is the arithmetic mean of the rows.
pub fn report_from_rows(rows: Vec<MetricsRow>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::Config("cannot build a metrics report from zero rows".into()));
    }
    let n = rows.len() as f64;
    let mean = MetricsRow {
        id: "MEAN".to_string(),
        rmse_ldct: rows.iter().map(|r| r.rmse_ldct).sum::<f64>() / n,
        rmse_out: rows.iter().map(|r| r.rmse_out).sum::<f64>() / n,
        ssim_paper_ldct: rows.iter().map(|r| r.ssim_paper_ldct).sum::<f64>() / n,
        ssim_paper_out: rows.iter().map(|r| r.ssim_paper_out).sum::<f64>() / n,
        ssim_cov_ldct: rows.iter().map(|r| r.ssim_cov_ldct).sum::<f64>() / n,
        ssim_cov_out: rows.iter().map(|r| r.ssim_cov_out).sum::<f64>() / n,
    };
    Ok(MetricsReport { rows, mean })
}

fn format_row(row: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        row.id,
        row.rmse_ldct,
        row.rmse_out,
        row.ssim_paper_ldct,
        row.ssim_paper_out,
        row.ssim_cov_ldct,
        row.ssim_cov_out
    )
}

impl MetricsReport {
    /// Serializes the report: header, per-slice rows, then the `MEAN` row,
    /// LF line endings and shortest-roundtrip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format_row(row));
            out.push('\n');
        }
        out.push_str(&format_row(&self.mean));
        out.push('\n');
        out
    }

    /// Parses a CSV produced by [`MetricsReport::to_csv`]; an exact inverse,
    /// since float formatting round-trips.
    pub fn parse_csv(text: &str) -> Result<MetricsReport> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Config("empty metrics CSV".into()))?;
        if header != CSV_HEADER {
            return Err(Error::Config(format!("unexpected metrics CSV header: {header}")));
        }
        let mut all = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::Config(format!(
                    "metrics CSV line {}: expected 7 fields, got {}",
                    i + 2,
                    fields.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Config(format!("metrics CSV line {}: {e}", i + 2)))
            };
            all.push(MetricsRow {
                id: fields[0].to_string(),
                rmse_ldct: num(fields[1])?,
                rmse_out: num(fields[2])?,
                ssim_paper_ldct: num(fields[3])?,
                ssim_paper_out: num(fields[4])?,
                ssim_cov_ldct: num(fields[5])?,
                ssim_cov_out: num(fields[6])?,
            });
        }
        let mean = all.pop().ok_or_else(|| Error::Config("metrics CSV has no rows".into()))?;
        if mean.id != "MEAN" {
            return Err(Error::Config(format!(
                "metrics CSV must end with the MEAN row, found {}",
                mean.id
            )));
        }
        Ok(MetricsReport { rows: all, mean })
    }
}

/// Scores every pair named by `stems` under `data_dir`.
///
/// Each slice pair is loaded from disk, `denoise(stem, ldct)` produces the
/// output under test, and the rows are assembled in stem order with the
/// `MEAN` aggregate appended. Per-slice work runs in parallel; missing files
/// surface as I/O errors naming the offending path.
pub fn evaluate_manifest<F>(
    data_dir: &std::path::Path,
    stems: &[String],
    denoise: F,
) -> Result<MetricsReport>
where
    F: Fn(&str, &ImageHU) -> Result<ImageHU> + Sync,
{
    use rayon::prelude::*;
    if stems.is_empty() {
        return Err(Error::Config("cannot evaluate an empty manifest".into()));
    }
    let rows: Vec<MetricsRow> = stems
        .par_iter()
        .map(|stem| {
            let pair = crate::sim::slice_io::read_pair(data_dir, stem)?;
            let denoised = denoise(stem, &pair.ldct)?;
            slice_metrics(stem, &pair.ndct, &pair.ldct, &denoised)
        })
        .collect::<Result<_>>()?;
    report_from_rows(rows)
}
