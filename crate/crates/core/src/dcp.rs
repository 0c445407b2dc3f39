//! Dark-channel-prior dehazing, used as a classical comparison baseline.
//!
//! No guided-filter refinement: the transmission stays patch-blocky.

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Plane};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcpConfig {
    /// Odd side of the dark-channel window.
    pub patch: usize,
    /// Fraction of haze removed, in (0,1].
    pub omega: f32,
    /// Transmission floor.
    pub t0: f32,
    /// Fraction of darkest-channel-brightest pixels considered for airlight.
    pub airlight_percent: f32,
}

impl Default for DcpConfig {
    fn default() -> Self {
        DcpConfig {
            patch: 15,
            omega: 0.95,
            t0: 0.1,
            airlight_percent: 0.001,
        }
    }
}

impl DcpConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch % 2 == 0 {
            problems.push(format!("patch={} must be odd", self.patch));
        }
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            problems.push(format!("omega={} must lie in (0,1]", self.omega));
        }
        if !(self.t0 > 0.0 && self.t0 < 1.0) {
            problems.push(format!("t0={} must lie in (0,1)", self.t0));
        }
        if !(self.airlight_percent > 0.0 && self.airlight_percent <= 1.0) {
            problems.push(format!("airlight_percent={} must lie in (0,1]", self.airlight_percent));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }
}

/// Sliding minimum along one axis with replicate-clamped windows.
fn min_filter_1d(src: &[f32], dst: &mut [f32], len: usize, stride: usize, r: usize) {
    for i in 0..len {
        let lo = i.saturating_sub(r);
        let hi = (i + r).min(len - 1);
        let mut m = f32::INFINITY;
        for j in lo..=hi {
            m = m.min(src[j * stride]);
        }
        dst[i * stride] = m;
    }
}

/// Per-pixel minimum over RGB, then over the `patch`×`patch` neighborhood.
///
/// Clamping the window to the image is the same as replicating the border,
/// since repeated pixels cannot lower a minimum.
pub fn dark_channel(image: &ImageBuffer, patch: usize) -> Result<Plane> {
    if patch % 2 == 0 {
        return Err(Error::invalid(format!("dark channel patch must be odd, got {patch}")));
    }
    let (h, w) = (image.height(), image.width());
    let r = patch / 2;
    let mins: Vec<f32> = image.data().chunks_exact(3).map(|p| p[0].min(p[1]).min(p[2])).collect();
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        min_filter_1d(&mins[y * w..], &mut rows[y * w..], w, 1, r);
    }
    let mut out = vec![0.0; h * w];
    for x in 0..w {
        min_filter_1d(&rows[x..], &mut out[x..], h, w, r);
    }
    Plane::new(h, w, out)
}

/// Among the `ceil(percent·H·W)` pixels with the brightest dark channel, the
/// image pixel with the largest RGB sum. Both rankings break ties by the
/// lowest row-major index.
pub fn estimate_airlight(image: &ImageBuffer, dark: &Plane, percent: f32) -> Result<[f32; 3]> {
    if !(percent > 0.0 && percent <= 1.0) {
        return Err(Error::invalid(format!(
            "airlight percent must lie in (0,1], got {percent}"
        )));
    }
    if dark.height() != image.height() || dark.width() != image.width() {
        return Err(Error::invalid("dark channel and image sizes differ"));
    }
    let n = dark.data().len();
    let k = ((percent as f64 * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps equal dark values in index order.
    order.sort_by(|&a, &b| dark.data()[b].total_cmp(&dark.data()[a]));
    let px = |i: usize| {
        let d = &image.data()[i * 3..i * 3 + 3];
        [d[0], d[1], d[2]]
    };
    let sum = |i: usize| px(i).iter().map(|&v| v as f64).sum::<f64>();
    let mut best = order[0];
    for &i in &order[1..k] {
        let (s, bs) = (sum(i), sum(best));
        if s > bs || (s == bs && i < best) {
            best = i;
        }
    }
    Ok(px(best))
}

/// Dehazed image and the transmission used.
pub fn dehaze_dcp_with_transmission(image: &ImageBuffer, cfg: &DcpConfig) -> Result<(ImageBuffer, Plane)> {
    cfg.validate()?;
    let dark = dark_channel(image, cfg.patch)?;
    let a = estimate_airlight(image, &dark, cfg.airlight_percent)?;
    let safe_a = a.map(|v| v.max(1e-6));
    let normalized = ImageBuffer::from_fn(image.height(), image.width(), |y, x, c| image.get(y, x, c) / safe_a[c]);
    let t = dark_channel(&normalized, cfg.patch)?.map(|d| (1.0 - cfg.omega * d).max(cfg.t0));
    let out = ImageBuffer::from_fn(image.height(), image.width(), |y, x, c| {
        ((image.get(y, x, c) - a[c]) / t.get(y, x) + a[c]).clamp(0.0, 1.0)
    });
    Ok((out, t))
}

/// `J = (I − A)/max(1 − ω·dark(I/A), t₀) + A`, clamped to `[0,1]`.
pub fn dehaze_dcp(image: &ImageBuffer, cfg: &DcpConfig) -> Result<ImageBuffer> {
    Ok(dehaze_dcp_with_transmission(image, cfg)?.0)
}
