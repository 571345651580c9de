//! Full-reference quality metrics: PSNR, SSIM, MAE/MSE.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, Tensor};
use crate::Real;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    /// dB on the [0,1] scale; `+inf` for identical images.
    pub psnr: f64,
    pub ssim: f64,
    /// Mean absolute error in 8-bit units.
    pub mae: f64,
    /// Mean squared error in squared 8-bit units.
    pub mse: f64,
}

fn mse01<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.ensure_same_shape(b, "metric")?;
    let n = a.data().len().max(1) as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.to_f64().unwrap() - y.to_f64().unwrap();
            d * d
        })
        .sum();
    Ok(sum / n)
}

pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let mse = mse01(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub fn mae_mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(f64, f64)> {
    a.ensure_same_shape(b, "metric")?;
    let n = a.data().len().max(1) as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = 255.0 * x.to_f64().unwrap() - 255.0 * y.to_f64().unwrap();
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, sq / n))
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable valid-mode Gaussian filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| taps[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.ensure_same_shape(b, "metric")?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for c in 0..a.channels() {
        let pa: Vec<f64> = a.plane(c).iter().map(|v| v.to_f64().unwrap()).collect();
        let pb: Vec<f64> = b.plane(c).iter().map(|v| v.to_f64().unwrap()).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&prod(&pa, &pa), h, w, &taps);
        let e_bb = filter_valid(&prod(&pb, &pb), h, w, &taps);
        let e_ab = filter_valid(&prod(&pa, &pb), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / a.channels() as f64)
}

pub fn evaluate(enhanced: &ImageTensor, reference: &ImageTensor) -> Result<MetricsReport> {
    let (mae, mse) = mae_mse(enhanced, reference)?;
    Ok(MetricsReport { psnr: psnr(enhanced, reference)?, ssim: ssim(enhanced, reference)?, mae, mse })
}

/// One evaluated image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub report: MetricsReport,
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

/// `image, psnr, ssim, mae, mse` rows under a header.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("image, psnr, ssim, mae, mse\n");
    for r in rows {
        let m = &r.report;
        let _ = writeln!(
            s,
            "{}, {}, {}, {}, {}",
            r.image,
            fmt_metric(m.psnr),
            fmt_metric(m.ssim),
            fmt_metric(m.mae),
            fmt_metric(m.mse)
        );
    }
    s
}

/// Arithmetic mean of each metric column (PSNR averaged in dB).
pub fn mean_report(rows: &[EvalRow]) -> Option<MetricsReport> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let sum = |f: fn(&MetricsReport) -> f64| rows.iter().map(|r| f(&r.report)).sum::<f64>() / n;
    Some(MetricsReport { psnr: sum(|m| m.psnr), ssim: sum(|m| m.ssim), mae: sum(|m| m.mae), mse: sum(|m| m.mse) })
}

/// Low/reference pairing by identical filename.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Pairing {
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub unmatched_low: Vec<String>,
    pub unmatched_gt: Vec<String>,
}

pub fn pair_by_name(low: &[PathBuf], gt: &[PathBuf]) -> Pairing {
    let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut out = Pairing::default();
    for l in low {
        match gt.iter().find(|g| name(g) == name(l)) {
            Some(g) => out.pairs.push((l.clone(), g.clone())),
            None => out.unmatched_low.push(name(l)),
        }
    }
    for g in gt {
        if !low.iter().any(|l| name(l) == name(g)) {
            out.unmatched_gt.push(name(g));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(h, w, 3, |_, _, _| rng.random::<f64>())
    }

    /// Straight window-by-window SSIM with the 2-D kernel.
    fn ssim_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let t = gaussian_taps();
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for c in 0..3 {
            let mut sum = 0.0;
            let mut count = 0;
            for y0 in 0..=a.height() - 11 {
                for x0 in 0..=a.width() - 11 {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..11 {
                        for dx in 0..11 {
                            let wgt = t[dy] * t[dx];
                            let (x, y) = (a.get(c, y0 + dy, x0 + dx), b.get(c, y0 + dy, x0 + dx));
                            ma += wgt * x;
                            mb += wgt * y;
                            saa += wgt * x * x;
                            sbb += wgt * y * y;
                            sab += wgt * x * y;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
            total += sum / count as f64;
        }
        total / 3.0
    }

    #[test]
    fn psnr_identical_is_inf() {
        let a = rand_img(1, 8, 8);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_uniform_offset_is_20db() {
        let a = Tensor::<f64>::filled(5, 7, 3, 0.25);
        let b = Tensor::<f64>::filled(5, 7, 3, 0.35);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_mse_consistency() {
        let (a, b) = (rand_img(2, 9, 9), rand_img(3, 9, 9));
        let (_, mse) = mae_mse(&a, &b).unwrap();
        let p = psnr(&a, &b).unwrap();
        assert!((p - 10.0 * (255.0f64 * 255.0 / mse).log10()).abs() < 1e-9);
    }

    #[test]
    fn mae_mse_full_range() {
        let a = Tensor::<f64>::zeros(4, 4, 3);
        let b = Tensor::<f64>::filled(4, 4, 3, 1.0);
        assert_eq!(mae_mse(&a, &b).unwrap(), (255.0, 65025.0));
        assert_eq!(mae_mse(&a, &a).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f64>::zeros(4, 4, 3);
        let b = Tensor::<f64>::zeros(4, 5, 3);
        assert!(matches!(psnr(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(mae_mse(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_constant_images_luminance_only() {
        let a = Tensor::<f64>::filled(16, 16, 3, 0.5);
        let b = Tensor::<f64>::filled(16, 16, 3, 0.25);
        let want = (2.0 * 0.125 + 1e-4) / (0.3125 + 1e-4);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.8001).abs() < 1e-4);
    }

    #[test]
    fn ssim_small_image_rejected() {
        let a = Tensor::<f64>::zeros(10, 20, 3);
        assert!(matches!(ssim(&a, &a), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ssim_self_is_one() {
        let a = rand_img(4, 13, 17);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn taps_normalised() {
        assert!((gaussian_taps().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn oracles_on_100_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in 0..100 {
            let h = rng.random_range(11..18);
            let w = rng.random_range(11..18);
            let a = rand_img(case * 2, h, w);
            let b = rand_img(case * 2 + 1, h, w);
            let n = (h * w * 3) as f64;
            let mut sq = 0.0;
            let mut ab = 0.0;
            for i in 0..a.data().len() {
                let d = a.data()[i] - b.data()[i];
                sq += d * d;
                ab += (255.0 * d).abs();
            }
            let p = psnr(&a, &b).unwrap();
            assert!((p - 10.0 * (n / sq).log10()).abs() < 1e-9);
            let (mae, mse) = mae_mse(&a, &b).unwrap();
            assert!((mae - ab / n).abs() <= 1e-6 * mae);
            assert!((mse - 65025.0 * sq / n).abs() <= 1e-6 * mse);
            let s = ssim(&a, &b).unwrap();
            assert!((s - ssim_oracle(&a, &b)).abs() < 1e-9, "case {case}");
        }
    }

    #[test]
    fn pairing_reports_unmatched() {
        let low = vec![PathBuf::from("l/1.png"), PathBuf::from("l/2.png")];
        let gt = vec![PathBuf::from("g/2.png"), PathBuf::from("g/3.png")];
        let p = pair_by_name(&low, &gt);
        assert_eq!(p.pairs, vec![(PathBuf::from("l/2.png"), PathBuf::from("g/2.png"))]);
        assert_eq!(p.unmatched_low, vec!["1.png".to_string()]);
        assert_eq!(p.unmatched_gt, vec!["3.png".to_string()]);
    }

    #[test]
    fn csv_format() {
        let rows = vec![EvalRow {
            image: "a.png".into(),
            report: MetricsReport { psnr: f64::INFINITY, ssim: 1.0, mae: 0.0, mse: 0.0 },
        }];
        assert_eq!(eval_csv(&rows), "image, psnr, ssim, mae, mse\na.png, inf, 1.000000, 0.000000, 0.000000\n");
    }

    proptest! {
        #[test]
        fn metrics_symmetric(seed in 0u64..500) {
            let a = rand_img(seed, 12, 12);
            let b = rand_img(seed + 1000, 12, 12);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert_eq!(mae_mse(&a, &b).unwrap(), mae_mse(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ssim(&a, &b).unwrap() <= 1.0);
            prop_assert!(psnr(&a, &b).unwrap() >= 0.0);
        }
    }
}
