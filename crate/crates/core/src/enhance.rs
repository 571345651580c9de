//! Iterative curve enhancement and the parameter-free restoration step.
//!
//! One iteration maps `I` to `Ĩ = I + φ₃·(I² − I)` and then, with restoration
//! enabled, to `Ĩ + Σᵢ αᵢ·tanh(φᵢ)·(Ĩ² − Ĩ)·I_init`. Features are extracted once
//! from the original input and reused by every iteration.

use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, Tensor};
use crate::net::{apply_operator_band, param_count, BufferPool, FeaturePyramid, NetTopology, RowSpan, Weights};
use crate::parallel;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceConfig {
    pub iterations: usize,
    /// Mixing weights of `tanh(φ₁)`, `tanh(φ₂)`, `tanh(φ₃)` in the restoration term.
    pub irm_alphas: [f64; 3],
    /// Clamp to `[0, 1]` after every restoration step.
    pub clamp_output: bool,
    pub irm_enabled: bool,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self { iterations: 8, irm_alphas: [1.0 / 3.0; 3], clamp_output: true, irm_enabled: true }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.irm_alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "restoration weights must be finite and >= 0, got {:?}",
                self.irm_alphas
            )));
        }
        Ok(())
    }
}

/// Elements per work item of the elementwise kernels; small enough that the
/// working set of the iteration loop stays in L1.
const CHUNK: usize = 2048;

/// Output rows per band of the streaming pipeline.
const BAND_ROWS: usize = 32;

#[inline(always)]
fn curve<T: Real>(v: T, m: T) -> T {
    v + m * (v * v - v)
}

#[inline(always)]
fn clamp01<T: Real>(v: T) -> T {
    let v = if v < T::zero() { T::zero() } else { v };
    if v > T::one() {
        T::one()
    } else {
        v
    }
}

/// One enhancement step: `Ĩ = I + φ₃·(I² − I)`, elementwise.
pub fn enhance_step<T: Real>(current: &Tensor<T>, phi3: &Tensor<T>) -> Result<Tensor<T>> {
    current.ensure_same_shape(phi3, "enhance_step")?;
    let data = current.data().iter().zip(phi3.data()).map(|(&v, &m)| curve(v, m)).collect();
    Ok(Tensor::from_vec_unchecked(current.height(), current.width(), current.channels(), data))
}

fn gain_kernel<T: Real>(p1: &[T], p2: &[T], p3: &[T], init: &[T], a: [T; 3], out: &mut [T]) {
    for ((((o, &x1), &x2), &x3), &i) in out.iter_mut().zip(p1).zip(p2).zip(p3).zip(init) {
        let s = a[0] * x1.act_tanh() + a[1] * x2.act_tanh() + a[2] * x3.act_tanh();
        *o = s * i;
    }
}

/// Per-pixel restoration gain `I_init · Σᵢ αᵢ·tanh(φᵢ)`.
///
/// With non-negative weights summing to at most one the gain lies in `[-1, 1]`.
pub fn restoration_gain<T: Real>(pyr: &FeaturePyramid<T>, init: &Tensor<T>, alphas: [f64; 3]) -> Result<Tensor<T>> {
    for m in pyr.maps() {
        init.ensure_same_shape(m, "restoration_gain")?;
    }
    let a = alphas.map(|v| T::from(v).unwrap());
    let mut gain = vec![T::zero(); init.data().len()];
    parallel::for_each_chunk_mut(&mut gain, CHUNK, |ci, out| {
        let r = ci * CHUNK..ci * CHUNK + out.len();
        let [p1, p2, p3] = pyr.maps().map(|m| &m.data()[r.clone()]);
        gain_kernel(p1, p2, p3, &init.data()[r], a, out);
    });
    Ok(Tensor::from_vec_unchecked(init.height(), init.width(), init.channels(), gain))
}

/// Restoration step: `Ĩ + Σᵢ αᵢ·tanh(φᵢ)·(Ĩ² − Ĩ)·I_init`, optionally clamped.
pub fn restore_step<T: Real>(
    tilde: &Tensor<T>,
    pyr: &FeaturePyramid<T>,
    init: &Tensor<T>,
    cfg: &EnhanceConfig,
) -> Result<Tensor<T>> {
    tilde.ensure_same_shape(init, "restore_step")?;
    let gain = restoration_gain(pyr, init, cfg.irm_alphas)?;
    Ok(apply_gain(tilde, &gain, cfg.clamp_output))
}

pub(crate) fn apply_gain<T: Real>(tilde: &Tensor<T>, gain: &Tensor<T>, clamp: bool) -> Tensor<T> {
    let data = tilde
        .data()
        .iter()
        .zip(gain.data())
        .map(|(&v, &k)| {
            let r = curve(v, k);
            if clamp {
                clamp01(r)
            } else {
                r
            }
        })
        .collect();
    Tensor::from_vec_unchecked(tilde.height(), tilde.width(), tilde.channels(), data)
}

/// All `iters` iterations on `vals` in place, one L1-sized chunk at a time.
/// Performs exactly the operations of chained [`enhance_step`] and
/// [`restore_step`] calls, so results are bitwise equal.
fn iterate_kernel<T: Real>(vals: &mut [T], m: &[T], gain: Option<&[T]>, iters: usize, clamp: bool) {
    for (ci, v) in vals.chunks_mut(CHUNK).enumerate() {
        let r = ci * CHUNK..ci * CHUNK + v.len();
        let m = &m[r.clone()];
        match gain {
            Some(g) => {
                let k = &g[r];
                for _ in 0..iters {
                    if clamp {
                        for ((v, &m), &k) in v.iter_mut().zip(m).zip(k) {
                            *v = clamp01(curve(curve(*v, m), k));
                        }
                    } else {
                        for ((v, &m), &k) in v.iter_mut().zip(m).zip(k) {
                            *v = curve(curve(*v, m), k);
                        }
                    }
                }
            }
            None => {
                for _ in 0..iters {
                    for (v, &m) in v.iter_mut().zip(m) {
                        *v = curve(*v, m);
                    }
                }
            }
        }
    }
}

/// Full inference: one feature extraction, then `T` enhancement(+restoration) iterations.
pub fn enhance_image(weights: &Weights, image: &ImageTensor, cfg: &EnhanceConfig) -> Result<ImageTensor> {
    enhance_image_with(weights.topology(), weights.params(), image, cfg)
}

/// [`enhance_image`] over an arbitrary float type and raw parameters.
///
/// The image is processed in horizontal bands. Each band recomputes the rows
/// of halo its receptive field needs, so every intermediate stays
/// cache-sized; per-row arithmetic is identical to the whole-image path.
pub fn enhance_image_with<T: Real>(
    topology: &NetTopology,
    params: &[T],
    image: &Tensor<T>,
    cfg: &EnhanceConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if image.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", image.channels())));
    }
    if params.len() != param_count(topology) {
        return Err(Error::Shape(format!("{} parameters for topology {topology}", params.len())));
    }
    if cfg.iterations == 0 {
        return Ok(image.clone());
    }
    let (h, w) = (image.height(), image.width());
    let mut out = image.data().to_vec();
    if h == 0 || w == 0 {
        return Ok(image.clone());
    }
    let halo = 3 * topology.block_count();
    let alphas = cfg.irm_alphas.map(|v| T::from(v).unwrap());

    let mut bands: Vec<Vec<&mut [T]>> = (0..h.div_ceil(BAND_ROWS)).map(|_| Vec::with_capacity(3)).collect();
    for plane in out.chunks_mut(h * w) {
        for (b, rows) in plane.chunks_mut(BAND_ROWS * w).enumerate() {
            bands[b].push(rows);
        }
    }
    let results = parallel::map_with_scratch(bands, BufferPool::new, |pool, b, mut dst| -> Result<()> {
        let (y0, y1) = (b * BAND_ROWS, ((b + 1) * BAND_ROWS).min(h));
        let (s0, s1) = (y0.saturating_sub(halo), (y1 + halo).min(h));
        let span = RowSpan { start: s0, end: s1, full_height: h };

        let (mut phi1, sp1) = apply_operator_band(topology, params, image, s0..s1, span, pool)?;
        relu_in_place(&mut phi1);
        let (mut phi2, sp2) = apply_operator_band(topology, params, &phi1, 0..phi1.height(), sp1, pool)?;
        relu_in_place(&mut phi2);
        let (mut phi3, sp3) = apply_operator_band(topology, params, &phi2, 0..phi2.height(), sp2, pool)?;
        phi3.data_mut().iter_mut().for_each(|v| *v = v.act_tanh());

        let n = (y1 - y0) * w;
        fn rows<T: Real>(t: &Tensor<T>, sp: RowSpan, c: usize, y0: usize, n: usize) -> &[T] {
            &t.plane(c)[(y0 - sp.start) * t.width()..][..n]
        }
        let mut gain = pool.take();
        for (c, dst) in dst.iter_mut().enumerate() {
            let m = rows(&phi3, sp3, c, y0, n);
            let k = if cfg.irm_enabled {
                gain.clear();
                gain.resize(n, T::zero());
                let init = &image.plane(c)[y0 * w..y1 * w];
                gain_kernel(rows(&phi1, sp1, c, y0, n), rows(&phi2, sp2, c, y0, n), m, init, alphas, &mut gain);
                Some(&gain[..])
            } else {
                None
            };
            iterate_kernel(dst, m, k, cfg.iterations, cfg.clamp_output);
        }
        pool.give(gain);
        for t in [phi1, phi2, phi3] {
            pool.give(t.into_data());
        }
        Ok(())
    });
    results.into_iter().collect::<Result<()>>()?;
    Ok(Tensor::from_vec_unchecked(h, w, 3, out))
}

fn relu_in_place<T: Real>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        *v = if *v > T::zero() { *v } else { T::zero() };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{extract_features, init_weights, param_count, NetTopology};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f32) -> ImageTensor {
        ImageTensor::filled(1, 1, 3, v)
    }

    fn pyr_const(p: [f32; 3]) -> FeaturePyramid<f32> {
        FeaturePyramid { phi1: scalar(p[0]), phi2: scalar(p[1]), phi3: scalar(p[2]) }
    }

    #[test]
    fn enhance_step_scalar_cases() {
        let out = enhance_step(&scalar(0.7), &scalar(0.0)).unwrap();
        assert_eq!(out.data()[0], 0.7);
        let out = enhance_step(&scalar(0.5), &scalar(1.0)).unwrap();
        assert!((out.data()[0] - 0.25).abs() < 1e-7);
        let out = enhance_step(&scalar(0.2), &scalar(-1.0)).unwrap();
        assert!((out.data()[0] - 0.36).abs() < 1e-7);
        assert!(enhance_step(&scalar(0.2), &ImageTensor::zeros(2, 1, 3)).is_err());
    }

    #[test]
    fn restore_step_identity_cases() {
        let tilde = scalar(0.6);
        let init = scalar(0.3);
        let mut cfg = EnhanceConfig { irm_alphas: [0.0; 3], ..Default::default() };
        let out = restore_step(&tilde, &pyr_const([0.4, 0.5, 0.6]), &init, &cfg).unwrap();
        assert_eq!(out, tilde);
        cfg.irm_alphas = [1.0 / 3.0; 3];
        let out = restore_step(&tilde, &pyr_const([0.0; 3]), &init, &cfg).unwrap();
        assert_eq!(out, tilde);
    }

    #[test]
    fn restore_step_scalar_oracle() {
        // Ĩ=0.5, I_init=0.4, φᵢ=0.5, αᵢ=1/3: the three terms collapse to one tanh(0.5).
        let cfg = EnhanceConfig::default();
        let out = restore_step(&scalar(0.5), &pyr_const([0.5; 3]), &scalar(0.4), &cfg).unwrap();
        let want = 0.5 + 0.5f64.tanh() * (0.25 - 0.5) * 0.4;
        assert!((f64::from(out.data()[0]) - want).abs() < 1e-6, "{} vs {want}", out.data()[0]);
    }

    #[test]
    fn zero_iterations_and_zero_weights_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = ImageTensor::from_fn(9, 7, 3, |_, _, _| rng.random());
        let w = init_weights(&NetTopology::canonical(), 1);
        let cfg0 = EnhanceConfig { iterations: 0, ..Default::default() };
        assert_eq!(enhance_image(&w, &img, &cfg0).unwrap(), img);
        let zero = Weights::zeros(NetTopology::canonical());
        for t in [1, 3, 8] {
            let cfg = EnhanceConfig { iterations: t, ..Default::default() };
            assert_eq!(enhance_image(&zero, &img, &cfg).unwrap(), img);
        }
    }

    #[test]
    fn dark_constant_with_full_brightening_map() {
        // v ← 2v − v² eight times: 1 − (1 − v₀)^(2⁸).
        let v0 = 0.1f64;
        let mut v = v0;
        for _ in 0..8 {
            v = 2.0 * v - v * v;
        }
        let closed = 1.0 - (1.0 - v0).powi(256);
        assert!((v - closed).abs() < 1e-12);

        let img = Tensor::<f64>::filled(4, 4, 3, v0);
        let mut cur = img.clone();
        let phi3 = Tensor::<f64>::filled(4, 4, 3, -1.0);
        for _ in 0..8 {
            cur = enhance_step(&cur, &phi3).unwrap();
        }
        assert!(cur.data().iter().all(|x| (x - closed).abs() < 1e-6));
    }

    #[test]
    fn fused_matches_stepwise_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cases = [(NetTopology::canonical(), 13), (NetTopology::canonical(), 97)]
            .into_iter()
            .chain(NetTopology::studied().into_iter().map(|t| (t, 70)));
        for (t, h) in cases {
            let params: Vec<f32> = (0..param_count(&t)).map(|_| rng.random_range(-0.8..0.8)).collect();
            let w = Weights::from_params(t, params).unwrap();
            let img = ImageTensor::from_fn(h, 11, 3, |_, _, _| rng.random());
            check_fused(&w, &img);
        }
    }

    fn check_fused(w: &Weights, img: &ImageTensor) {
        let w = w.clone();
        let img = img.clone();
        for irm in [true, false] {
            let cfg = EnhanceConfig { iterations: 5, irm_enabled: irm, ..Default::default() };
            let fused = enhance_image(&w, &img, &cfg).unwrap();
            let pyr = extract_features(&w, &img).unwrap();
            let mut cur = img.clone();
            for _ in 0..cfg.iterations {
                cur = enhance_step(&cur, &pyr.phi3).unwrap();
                if irm {
                    cur = restore_step(&cur, &pyr, &img, &cfg).unwrap();
                }
            }
            assert_eq!(fused, cur);
        }
    }

    #[test]
    fn negative_alphas_rejected() {
        let cfg = EnhanceConfig { irm_alphas: [-0.1, 0.0, 0.0], ..Default::default() };
        let w = Weights::zeros(NetTopology::canonical());
        assert!(enhance_image(&w, &scalar(0.5), &cfg).is_err());
    }

    proptest! {
        #[test]
        fn step_range_monotone_and_direction(i in 0.0f64..=1.0, j in 0.0f64..=1.0, m in -1.0f64..=1.0) {
            let f = |v: f64| curve(v, m);
            let out = f(i);
            prop_assert!((0.0..=1.0).contains(&out));
            let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
            prop_assert!(f(lo) <= f(hi) + 1e-15);
            if i > 0.0 && i < 1.0 {
                if m < 0.0 { prop_assert!(out > i); }
                if m > 0.0 { prop_assert!(out < i); }
            }
        }

        #[test]
        fn deterministic_output(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = ImageTensor::from_fn(6, 5, 3, |_, _, _| rng.random());
            let w = init_weights(&NetTopology::canonical(), seed);
            let cfg = EnhanceConfig::default();
            prop_assert_eq!(enhance_image(&w, &img, &cfg).unwrap(), enhance_image(&w, &img, &cfg).unwrap());
        }
    }
}
