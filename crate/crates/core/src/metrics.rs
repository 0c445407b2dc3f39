//! Full-reference quality metrics and the tab-separated report format.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` over all pixels and channels. Identical images
/// give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    check_pair(a, b)?;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    let mse = sse / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 1e-4; // (0.01·1)²
const C2: f64 = 9e-4; // (0.03·1)²

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable "valid" Gaussian filter: output is (h−10)×(w−10).
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let s = &src[y * w + x..y * w + x + SSIM_WINDOW];
            rows[y * ow + x] = s.iter().zip(taps).map(|(v, t)| v * t).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| rows[(y + k) * ow + x] * taps[k]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM on Rec.601 luminance: 11×11 Gaussian window
/// (σ = 1.5), K1 = 0.01, K2 = 0.03, peak 1, over valid windows only.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_pair(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let x = a.luminance();
    let y = b.luminance();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let f = |s: &[f64]| filter_valid(s, h, w, &taps);
    let (mx, my, sxx, syy, sxy) = (f(&x), f(&y), f(&xx), f(&yy), f(&xy));
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + C1) * (2.0 * cov + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Outcome of scoring one image.
#[derive(Clone, Debug, PartialEq)]
pub enum RowStatus {
    Ok {
        psnr_db: f64,
        ssim: f64,
    },
    /// Inputs could not be read; the message says which.
    Missing(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub id: String,
    pub status: RowStatus,
}

/// Per-image scores for one or more methods plus their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Free-form `# key: value` lines written above the table.
    pub notes: Vec<(String, String)>,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub fn push(&mut self, method: &str, id: &str, status: RowStatus) {
        self.rows.push(MetricRow {
            method: method.to_string(),
            id: id.to_string(),
            status,
        });
    }

    /// Methods in first-appearance order.
    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    /// Arithmetic means of PSNR and SSIM over the scored rows of `method`.
    pub fn mean(&self, method: &str) -> Option<(f64, f64)> {
        let scores: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| match r.status {
                RowStatus::Ok { psnr_db, ssim } => Some((psnr_db, ssim)),
                RowStatus::Missing(_) => None,
            })
            .collect();
        if scores.is_empty() {
            return None;
        }
        let n = scores.len() as f64;
        Some((
            scores.iter().map(|s| s.0).sum::<f64>() / n,
            scores.iter().map(|s| s.1).sum::<f64>() / n,
        ))
    }

    pub fn missing(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| matches!(r.status, RowStatus::Missing(_)))
            .count()
    }

    /// Header, one row per image, then one `mean` row per method.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.notes {
            let _ = writeln!(out, "# {k}: {v}");
        }
        out.push_str("method\tid\tstatus\tpsnr_db\tssim\n");
        for r in &self.rows {
            let _ = match &r.status {
                RowStatus::Ok { psnr_db, ssim } => {
                    writeln!(out, "{}\t{}\tok\t{}\t{ssim:.6}", r.method, r.id, fmt_db(*psnr_db))
                }
                RowStatus::Missing(why) => {
                    writeln!(out, "{}\t{}\tmissing: {why}\t\t", r.method, r.id)
                }
            };
        }
        for m in self.methods() {
            let _ = match self.mean(m) {
                Some((p, s)) => writeln!(out, "{m}\tmean\tok\t{}\t{s:.6}", fmt_db(p)),
                None => writeln!(out, "{m}\tmean\tmissing: no scored rows\t\t"),
            };
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = ImageBuffer::filled(4, 4, [0.2; 3]);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        // 0.3 and 0.2 are not exactly 0.1 apart in f32; the oracle uses the
        // stored values.
        let b = ImageBuffer::filled(4, 4, [0.3; 3]);
        let d = 0.3f32 as f64 - 0.2f32 as f64;
        let expected = 10.0 * (1.0 / (d * d)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - expected).abs() < 1e-9);
        assert!(psnr(&a, &ImageBuffer::filled(4, 5, [0.2; 3]), 1.0).is_err());
    }

    #[test]
    fn ssim_zero_variance_case() {
        let x = ImageBuffer::filled(16, 16, [0.5; 3]);
        let y = ImageBuffer::filled(16, 16, [0.25; 3]);
        let expected = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
        assert!((ssim(&x, &y).unwrap() - expected).abs() < 1e-5);
        assert!((expected - 0.80006).abs() < 1e-5);
        assert!(ssim(
            &ImageBuffer::filled(10, 20, [0.0; 3]),
            &ImageBuffer::filled(10, 20, [0.0; 3])
        )
        .is_err());
    }

    #[test]
    fn gaussian_taps_normalized_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(t[i], t[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn report_layout() {
        let mut r = MetricReport::default();
        r.push(
            "degraded",
            "a",
            RowStatus::Ok {
                psnr_db: 20.0,
                ssim: 0.5,
            },
        );
        r.push(
            "degraded",
            "b",
            RowStatus::Ok {
                psnr_db: f64::INFINITY,
                ssim: 1.0,
            },
        );
        r.push("model", "a", RowStatus::Missing("a_clean.png".into()));
        let tsv = r.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "method\tid\tstatus\tpsnr_db\tssim");
        assert_eq!(lines[2], "degraded\tb\tok\tinf\t1.000000");
        assert!(lines[3].starts_with("model\ta\tmissing: a_clean.png"));
        assert_eq!(lines[4], "degraded\tmean\tok\tinf\t0.750000");
        assert_eq!(r.missing(), 1);
    }
}
