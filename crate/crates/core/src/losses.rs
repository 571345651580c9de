//! Unsupervised training objectives.
//!
//! * channel-adaptive exposure: pulls each channel mean of the output towards
//!   `α · ratio_c · C₀`, where the ratios and the chromatic factor `C₀` come from
//!   the input;
//! * edge-aware total variation on the enhancement map, with per-difference
//!   weight `exp(-β|∇|)`;
//! * multi-scale colour consistency: cell-wise mean colours must follow the
//!   input, and global channel means are pulled to their common gray level.
//!
//! Every loss is mean-normalised, so magnitudes do not depend on resolution.
//! Reductions run sequentially in a fixed order.
//!
//! The `*_grad` variants return the loss and add `scale · ∂loss/∂input` into a
//! caller-provided buffer laid out like the input tensor.

use crate::error::{Error, Result};
use crate::imaging::Tensor;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Exposure scale α.
    pub exp_alpha: f64,
    /// Edge sensitivity β of the smoothness weights.
    pub tv_beta: f64,
    pub lambda_local: f64,
    pub lambda_global: f64,
    /// Side of the square cells used by the local colour term.
    pub local_window: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { exp_alpha: 0.8, tv_beta: 0.4, lambda_local: 1.0, lambda_global: 1.0, local_window: 16 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.exp_alpha > 0.0 && self.exp_alpha <= 2.0) {
            return bad(format!("exposure alpha {} outside (0, 2]", self.exp_alpha));
        }
        if !(self.tv_beta >= 0.0 && self.tv_beta.is_finite()) {
            return bad(format!("tv beta {} must be >= 0", self.tv_beta));
        }
        if !(self.lambda_local >= 0.0 && self.lambda_global >= 0.0) {
            return bad("colour weights must be >= 0".into());
        }
        if self.local_window == 0 {
            return bad("local window must be >= 1".into());
        }
        Ok(())
    }
}

/// Total loss and its three addends.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub exposure: f64,
    pub tv: f64,
    pub mscol: f64,
}

impl LossBreakdown {
    pub fn from_terms(exposure: f64, tv: f64, mscol: f64) -> Self {
        Self { total: exposure + tv + mscol, exposure, tv, mscol }
    }

    pub(crate) fn scaled_add(&mut self, other: &LossBreakdown, s: f64) {
        self.total += s * other.total;
        self.exposure += s * other.exposure;
        self.tv += s * other.tv;
        self.mscol += s * other.mscol;
    }
}

/// `C₀ = 1 − ‖(r₀, g₀, b₀) − (⅓, ⅓, ⅓)‖`; lies in `[1 − √6/3, 1]` on the simplex.
pub fn chroma_factor(r0: f64, g0: f64, b0: f64) -> Result<f64> {
    if r0 < 0.0 || g0 < 0.0 || b0 < 0.0 || ((r0 + g0 + b0) - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("channel ratios ({r0}, {g0}, {b0}) are not a distribution")));
    }
    let third = 1.0 / 3.0;
    let d = (r0 - third).powi(2) + (g0 - third).powi(2) + (b0 - third).powi(2);
    Ok(1.0 - d.sqrt())
}

fn check_rgb<T: Real>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.channels() != 3 {
        return Err(Error::Shape(format!("{what}: expected 3 channels, got {}", t.channels())));
    }
    Ok(())
}

/// Per-channel exposure targets `α · ratio_c · C₀` derived from the input.
pub fn exposure_targets<T: Real>(original: &Tensor<T>, cfg: &LossConfig) -> Result<[f64; 3]> {
    check_rgb(original, "exposure")?;
    let m = original.channel_means();
    let sum: f64 = m.iter().sum();
    if sum <= 0.0 {
        return Err(Error::DegenerateInput("all-zero original image".into()));
    }
    let r = [m[0] / sum, m[1] / sum, m[2] / sum];
    let c0 = chroma_factor(r[0], r[1], r[2])?;
    Ok(r.map(|ratio| cfg.exp_alpha * ratio * c0))
}

pub fn exposure_loss<T: Real>(enhanced: &Tensor<T>, original: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    enhanced.ensure_same_shape(original, "exposure_loss")?;
    let targets = exposure_targets(original, cfg)?;
    let m = enhanced.channel_means();
    Ok((0..3).map(|c| (m[c] - targets[c]).powi(2)).sum())
}

pub(crate) fn exposure_loss_grad(
    enhanced: &Tensor<f64>,
    original: &Tensor<f64>,
    cfg: &LossConfig,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    enhanced.ensure_same_shape(original, "exposure_loss")?;
    let targets = exposure_targets(original, cfg)?;
    let m = enhanced.channel_means();
    let n = enhanced.plane_len() as f64;
    let mut loss = 0.0;
    let plane = enhanced.plane_len();
    for c in 0..3 {
        let d = m[c] - targets[c];
        loss += d * d;
        let g = scale * 2.0 * d / n;
        for v in &mut grad[c * plane..(c + 1) * plane] {
            *v += g;
        }
    }
    Ok(loss)
}

#[inline]
fn ea_term(d: f64, beta: f64) -> f64 {
    (-beta * d.abs()).exp() * d * d
}

/// `d/dd [exp(-β|d|)·d²] = exp(-β|d|)·d·(2 − β|d|)`.
#[inline]
fn ea_term_deriv(d: f64, beta: f64) -> f64 {
    (-beta * d.abs()).exp() * d * (2.0 - beta * d.abs())
}

/// Edge-aware TV: mean of `exp(-β|∇|)·∇²` over vertical differences plus the
/// same mean over horizontal differences. A direction with no differences
/// (single row or column) contributes zero.
pub fn ea_tv_loss<T: Real>(map: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    ea_tv_impl(map, cfg.tv_beta, None)
}

pub(crate) fn ea_tv_loss_grad(map: &Tensor<f64>, cfg: &LossConfig, scale: f64, grad: &mut [f64]) -> Result<f64> {
    ea_tv_impl(map, cfg.tv_beta, Some((scale, grad)))
}

fn ea_tv_impl<T: Real>(map: &Tensor<T>, beta: f64, mut grad: Option<(f64, &mut [f64])>) -> Result<f64> {
    let (h, w, ch) = (map.height(), map.width(), map.channels());
    let nv = ((h.saturating_sub(1)) * w * ch) as f64;
    let nh = (h * w.saturating_sub(1) * ch) as f64;
    let mut sv = 0.0;
    let mut sh = 0.0;
    for c in 0..ch {
        let p = map.plane(c);
        let at = |i: usize| p[i].to_f64().unwrap_or(0.0);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if y + 1 < h {
                    let d = at(i + w) - at(i);
                    sv += ea_term(d, beta);
                    if let Some((s, g)) = grad.as_mut() {
                        let v = *s * ea_term_deriv(d, beta) / nv;
                        g[c * h * w + i + w] += v;
                        g[c * h * w + i] -= v;
                    }
                }
                if x + 1 < w {
                    let d = at(i + 1) - at(i);
                    sh += ea_term(d, beta);
                    if let Some((s, g)) = grad.as_mut() {
                        let v = *s * ea_term_deriv(d, beta) / nh;
                        g[c * h * w + i + 1] += v;
                        g[c * h * w + i] -= v;
                    }
                }
            }
        }
    }
    let v = if nv > 0.0 { sv / nv } else { 0.0 };
    let hz = if nh > 0.0 { sh / nh } else { 0.0 };
    Ok(v + hz)
}

/// Cell boundaries along one axis: `[0, win), [win, 2·win), …` with a ragged tail.
fn cells(len: usize, win: usize) -> Vec<(usize, usize)> {
    (0..len).step_by(win).map(|s| (s, (s + win).min(len))).collect()
}

fn cell_means<T: Real>(t: &Tensor<T>, c: usize, ys: (usize, usize), xs: (usize, usize)) -> f64 {
    let p = t.plane(c);
    let w = t.width();
    let mut s = 0.0;
    for y in ys.0..ys.1 {
        for v in &p[y * w + xs.0..y * w + xs.1] {
            s += v.to_f64().unwrap_or(0.0);
        }
    }
    s / ((ys.1 - ys.0) * (xs.1 - xs.0)) as f64
}

/// Local (cell-mean) and global (gray-world) colour terms, already weighted.
pub fn mscol_terms<T: Real>(enhanced: &Tensor<T>, original: &Tensor<T>, cfg: &LossConfig) -> Result<(f64, f64)> {
    enhanced.ensure_same_shape(original, "mscol_loss")?;
    check_rgb(enhanced, "mscol_loss")?;
    let ys = cells(enhanced.height(), cfg.local_window);
    let xs = cells(enhanced.width(), cfg.local_window);
    let mut local = 0.0;
    for &yc in &ys {
        for &xc in &xs {
            for c in 0..3 {
                let d = cell_means(enhanced, c, yc, xc) - cell_means(original, c, yc, xc);
                local += d * d;
            }
        }
    }
    let ncells = (ys.len() * xs.len()).max(1) as f64;
    let m = enhanced.channel_means();
    let gray = (m[0] + m[1] + m[2]) / 3.0;
    let global: f64 = m.iter().map(|v| (v - gray).powi(2)).sum();
    Ok((cfg.lambda_local * local / ncells, cfg.lambda_global * global))
}

pub fn mscol_loss<T: Real>(enhanced: &Tensor<T>, original: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    let (l, g) = mscol_terms(enhanced, original, cfg)?;
    Ok(l + g)
}

pub(crate) fn mscol_loss_grad(
    enhanced: &Tensor<f64>,
    original: &Tensor<f64>,
    cfg: &LossConfig,
    scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    let (local, global) = mscol_terms(enhanced, original, cfg)?;
    let (h, w) = (enhanced.height(), enhanced.width());
    let plane = h * w;
    let ys = cells(h, cfg.local_window);
    let xs = cells(w, cfg.local_window);
    let ncells = (ys.len() * xs.len()).max(1) as f64;
    for &yc in &ys {
        for &xc in &xs {
            let n = ((yc.1 - yc.0) * (xc.1 - xc.0)) as f64;
            for c in 0..3 {
                let d = cell_means(enhanced, c, yc, xc) - cell_means(original, c, yc, xc);
                let g = scale * cfg.lambda_local * 2.0 * d / (ncells * n);
                for y in yc.0..yc.1 {
                    for v in &mut grad[c * plane + y * w + xc.0..c * plane + y * w + xc.1] {
                        *v += g;
                    }
                }
            }
        }
    }
    // The gray target moves with the means, but Σ_c (m_c − gray) = 0 cancels
    // its contribution to the derivative.
    let m = enhanced.channel_means();
    let gray = (m[0] + m[1] + m[2]) / 3.0;
    for c in 0..3 {
        let g = scale * cfg.lambda_global * 2.0 * (m[c] - gray) / plane as f64;
        for v in &mut grad[c * plane..(c + 1) * plane] {
            *v += g;
        }
    }
    Ok(local + global)
}

/// Sum of the exposure, edge-aware TV (on the enhancement map) and colour losses.
pub fn total_loss<T: Real>(
    enhanced: &Tensor<T>,
    original: &Tensor<T>,
    phi3: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let e = exposure_loss(enhanced, original, cfg)?;
    let t = ea_tv_loss(phi3, cfg)?;
    let m = mscol_loss(enhanced, original, cfg)?;
    Ok(LossBreakdown::from_terms(e, t, m))
}
