//! Reverse-mode gradients, finite-difference checking, Adam, and the
//! unsupervised training loop.
//!
//! Gradients are handwritten adjoints of the concrete forward pass run in
//! `f64`: three weight-shared operator stages, `T` enhancement/restoration
//! iterations, and the three losses. Because the same weights serve all three
//! stages, each stage contributes its own gradient and the results are summed.
//! Every reduction has a fixed order, so results are bit-identical for any
//! thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::enhance::{restoration_gain, EnhanceConfig};
use crate::error::{Error, Result};
use crate::imaging::{list_images, load_image, random_crop, ImageTensor, Tensor};
use crate::losses::{ea_tv_loss_grad, exposure_loss_grad, mscol_loss_grad, total_loss, LossBreakdown, LossConfig};
use crate::net::{
    apply_operator, conv3x3_same, init_weights, param_count, serialize_weights, BlockLayout, FeaturePyramid,
    NetTopology, Weights,
};
use crate::parallel;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Side of the square training crops.
    pub patch: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub loss_cfg: LossConfig,
    pub enhance_cfg: EnhanceConfig,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Base path for checkpoints; `model.lie` becomes `model.step500.lie`.
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            patch: 256,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            loss_cfg: LossConfig::default(),
            enhance_cfg: EnhanceConfig::default(),
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.patch < 3 {
            return Err(Error::InvalidArgument("patch must be >= 3".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        self.loss_cfg.validate()?;
        self.enhance_cfg.validate()
    }
}

/// `∂L_total/∂θ` in the flat parameter layout of [`Weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub topology: NetTopology,
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

// ---------------------------------------------------------------------------
// Forward pass with the intermediates the adjoints need.

struct StageTrace {
    /// Input of every convolution block; `[0]` is the stage input.
    block_inputs: Vec<Tensor<f64>>,
    /// Operator output before the stage activation.
    pre: Tensor<f64>,
}

struct Trace {
    stages: Vec<StageTrace>,
    pyramid: FeaturePyramid<f64>,
    gain: Option<Tensor<f64>>,
    /// `J₀ = I_init, J₁, …, J_T`.
    states: Vec<Tensor<f64>>,
}

fn conv_block(x: &Tensor<f64>, params: &[f64], b: &BlockLayout) -> Result<Tensor<f64>> {
    conv3x3_same(x, &params[b.kernel..b.kernel + b.kernel_len()], &params[b.bias..b.bias + b.cout])
}

fn run_stage(topology: &NetTopology, params: &[f64], input: Tensor<f64>) -> Result<StageTrace> {
    let layout = topology.layout();
    let mut block_inputs = vec![input];
    for (b, lay) in layout.iter().enumerate() {
        let out = conv_block(&block_inputs[b], params, lay)?;
        if b + 1 == layout.len() {
            return Ok(StageTrace { block_inputs, pre: out });
        }
        block_inputs.push(out);
    }
    unreachable!("topology has at least one block")
}

#[inline(always)]
fn curve(v: f64, m: f64) -> f64 {
    v + m * (v * v - v)
}

fn forward(
    topology: &NetTopology,
    stage_params: [&[f64]; 3],
    image: &Tensor<f64>,
    enh: &EnhanceConfig,
) -> Result<Trace> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", image.channels())));
    }
    let s1 = run_stage(topology, stage_params[0], image.clone())?;
    let phi1 = s1.pre.map(|v| v.max(0.0));
    let s2 = run_stage(topology, stage_params[1], phi1.clone())?;
    let phi2 = s2.pre.map(|v| v.max(0.0));
    let s3 = run_stage(topology, stage_params[2], phi2.clone())?;
    let phi3 = s3.pre.map(f64::tanh);
    let pyramid = FeaturePyramid { phi1, phi2, phi3 };
    let gain = if enh.irm_enabled { Some(restoration_gain(&pyramid, image, enh.irm_alphas)?) } else { None };
    let mut states = Vec::with_capacity(enh.iterations + 1);
    states.push(image.clone());
    for _ in 0..enh.iterations {
        let prev = states.last().expect("non-empty");
        let next = prev
            .data()
            .iter()
            .enumerate()
            .map(|(e, &j)| {
                let t = curve(j, pyramid.phi3.data()[e]);
                match &gain {
                    Some(k) => {
                        let r = curve(t, k.data()[e]);
                        if enh.clamp_output {
                            r.clamp(0.0, 1.0)
                        } else {
                            r
                        }
                    }
                    None => t,
                }
            })
            .collect();
        states.push(Tensor::from_vec_unchecked(image.height(), image.width(), 3, next));
    }
    Ok(Trace { stages: vec![s1, s2, s3], pyramid, gain, states })
}

// ---------------------------------------------------------------------------
// Adjoints.

/// Dot product with four fixed accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Adds kernel and bias gradients of one convolution block into `grads`.
fn conv_param_grads(input: &Tensor<f64>, g_out: &Tensor<f64>, lay: &BlockLayout, grads: &mut [f64]) {
    let (h, w) = (input.height(), input.width());
    let (cin, cout) = (lay.cin, lay.cout);
    let klen = lay.kernel_len();
    // Per-row partial sums, then a sequential sum over rows.
    let rows = parallel::map_indexed(h, |y| {
        let mut part = vec![0.0; klen + cout];
        for o in 0..cout {
            let g = &g_out.plane(o)[y * w..(y + 1) * w];
            part[klen + o] = g.iter().sum();
            for i in 0..cin {
                let plane = input.plane(i);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let base = ((o * cin + i) * 3 + ky) * 3;
                    if w > 1 {
                        part[base] = dot(&g[1..], &src[..w - 1]);
                        part[base + 2] = dot(&g[..w - 1], &src[1..]);
                    }
                    part[base + 1] = dot(g, src);
                }
            }
        }
        part
    });
    for part in rows {
        for (k, v) in part[..klen].iter().enumerate() {
            grads[lay.kernel + k] += v;
        }
        for (o, v) in part[klen..].iter().enumerate() {
            grads[lay.bias + o] += v;
        }
    }
}

/// Gradient w.r.t. the block input: correlation of `g_out` with the
/// transposed, spatially flipped kernel.
fn conv_input_grad(g_out: &Tensor<f64>, params: &[f64], lay: &BlockLayout) -> Tensor<f64> {
    let (cin, cout) = (lay.cin, lay.cout);
    let k = &params[lay.kernel..lay.kernel + lay.kernel_len()];
    let mut flipped = vec![0.0; k.len()];
    for o in 0..cout {
        for i in 0..cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    flipped[((i * cout + o) * 3 + ky) * 3 + kx] = k[((o * cin + i) * 3 + (2 - ky)) * 3 + (2 - kx)];
                }
            }
        }
    }
    conv3x3_same(g_out, &flipped, &vec![0.0; cin]).expect("shapes agree by construction")
}

fn stage_backward(
    topology: &NetTopology,
    params: &[f64],
    trace: &StageTrace,
    g_pre: Tensor<f64>,
    grads: &mut [f64],
    need_input: bool,
) -> Option<Tensor<f64>> {
    let layout = topology.layout();
    let mut g = g_pre;
    for (b, lay) in layout.iter().enumerate().rev() {
        conv_param_grads(&trace.block_inputs[b], &g, lay, grads);
        if b > 0 || need_input {
            g = conv_input_grad(&g, params, lay);
        } else {
            return None;
        }
    }
    Some(g)
}

fn zip_map(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec_unchecked(a.height(), a.width(), a.channels(), data)
}

/// Loss and per-stage parameter gradients for one image.
fn image_loss_and_grads(
    topology: &NetTopology,
    stage_params: [&[f64]; 3],
    image: &Tensor<f64>,
    enh: &EnhanceConfig,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, [Vec<f64>; 3])> {
    let trace = forward(topology, stage_params, image, enh)?;
    let n = image.data().len();
    let out = trace.states.last().expect("non-empty");
    let phi = &trace.pyramid;

    let mut g_state = vec![0.0; n];
    let exposure = exposure_loss_grad(out, image, loss_cfg, 1.0, &mut g_state)?;
    let mscol = mscol_loss_grad(out, image, loss_cfg, 1.0, &mut g_state)?;
    let mut g_phi3 = vec![0.0; n];
    let tv = ea_tv_loss_grad(&phi.phi3, loss_cfg, 1.0, &mut g_phi3)?;
    let breakdown = LossBreakdown::from_terms(exposure, tv, mscol);

    // Iterations, newest first.
    let mut g_gain = vec![0.0; if trace.gain.is_some() { n } else { 0 }];
    let m = phi.phi3.data();
    for t in (0..enh.iterations).rev() {
        let j = trace.states[t].data();
        for e in 0..n {
            let (jv, mv) = (j[e], m[e]);
            let tl = curve(jv, mv);
            let mut g = g_state[e];
            if let Some(gain) = &trace.gain {
                let k = gain.data()[e];
                let r = curve(tl, k);
                if enh.clamp_output && !(0.0..=1.0).contains(&r) {
                    g = 0.0;
                }
                g_gain[e] += g * (tl * tl - tl);
                g *= 1.0 + k * (2.0 * tl - 1.0);
            }
            g_phi3[e] += g * (jv * jv - jv);
            g_state[e] = g * (1.0 + mv * (2.0 * jv - 1.0));
        }
    }

    // Restoration gain K = I_init · Σ αᵢ tanh(φᵢ).
    let (h, w) = (image.height(), image.width());
    let mut g_phi = [vec![0.0; n], vec![0.0; n], g_phi3];
    if trace.gain.is_some() {
        let init = image.data();
        for (i, map) in phi.maps().into_iter().enumerate() {
            let a = enh.irm_alphas[i];
            for e in 0..n {
                let th = map.data()[e].tanh();
                g_phi[i][e] += a * g_gain[e] * init[e] * (1.0 - th * th);
            }
        }
    }
    let [g_phi1, g_phi2, g_phi3] = g_phi;
    let wrap = |v: Vec<f64>| Tensor::from_vec_unchecked(h, w, 3, v);

    let mut grads =
        [vec![0.0; stage_params[0].len()], vec![0.0; stage_params[1].len()], vec![0.0; stage_params[2].len()]];
    // Stage 3: φ₃ = tanh(pre₃).
    let g_pre3 = zip_map(&wrap(g_phi3), &phi.phi3, |g, p| g * (1.0 - p * p));
    let from3 = stage_backward(topology, stage_params[2], &trace.stages[2], g_pre3, &mut grads[2], true)
        .expect("input gradient requested");
    // Stage 2: φ₂ = relu(pre₂).
    let g_phi2 = zip_map(&wrap(g_phi2), &from3, |a, b| a + b);
    let g_pre2 = zip_map(&g_phi2, &trace.stages[1].pre, |g, p| if p > 0.0 { g } else { 0.0 });
    let from2 = stage_backward(topology, stage_params[1], &trace.stages[1], g_pre2, &mut grads[1], true)
        .expect("input gradient requested");
    // Stage 1: φ₁ = relu(pre₁); the image itself is a constant.
    let g_phi1 = zip_map(&wrap(g_phi1), &from2, |a, b| a + b);
    let g_pre1 = zip_map(&g_phi1, &trace.stages[0].pre, |g, p| if p > 0.0 { g } else { 0.0 });
    stage_backward(topology, stage_params[0], &trace.stages[0], g_pre1, &mut grads[0], false);

    Ok((breakdown, grads))
}

fn check_batch(topology: &NetTopology, params: &[f64], batch: &[Tensor<f64>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if params.len() != param_count(topology) {
        return Err(Error::Shape(format!("{} parameters for topology {topology}", params.len())));
    }
    let first = &batch[0];
    for img in batch {
        first.ensure_same_shape(img, "batch")?;
    }
    Ok(())
}

/// Batch-mean loss and the gradient contributed by each of the three stages.
///
/// Stage `s` gets its own parameter copy, so the returned vectors are the
/// partial derivatives w.r.t. each copy; their sum is the gradient of the
/// weight-shared model.
pub fn stage_gradients(
    topology: &NetTopology,
    stage_params: [&[f64]; 3],
    batch: &[Tensor<f64>],
    enh: &EnhanceConfig,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, [Vec<f64>; 3])> {
    for p in stage_params {
        check_batch(topology, p, batch)?;
    }
    let per_image =
        parallel::map_indexed(batch.len(), |b| image_loss_and_grads(topology, stage_params, &batch[b], enh, loss_cfg));
    let scale = 1.0 / batch.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grads = stage_params.map(|p| vec![0.0; p.len()]);
    for r in per_image {
        let (l, g) = r?;
        loss.scaled_add(&l, scale);
        for s in 0..3 {
            for (acc, v) in grads[s].iter_mut().zip(&g[s]) {
                *acc += scale * v;
            }
        }
    }
    Ok((loss, grads))
}

/// Batch-mean loss and its exact gradient w.r.t. the shared parameters.
pub fn loss_and_gradient(
    topology: &NetTopology,
    params: &[f64],
    batch: &[Tensor<f64>],
    enh: &EnhanceConfig,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (loss, [g1, g2, g3]) = stage_gradients(topology, [params, params, params], batch, enh, loss_cfg)?;
    let grad = g1.iter().zip(&g2).zip(&g3).map(|((a, b), c)| a + b + c).collect();
    Ok((loss, grad))
}

/// Batch-mean loss of the forward pipeline, with optional per-stage parameters.
pub fn batch_loss_staged(
    topology: &NetTopology,
    stage_params: [&[f64]; 3],
    batch: &[Tensor<f64>],
    enh: &EnhanceConfig,
    loss_cfg: &LossConfig,
) -> Result<LossBreakdown> {
    for p in stage_params {
        check_batch(topology, p, batch)?;
    }
    let scale = 1.0 / batch.len() as f64;
    let mut acc = LossBreakdown::default();
    for img in batch {
        let trace = forward(topology, stage_params, img, enh)?;
        let out = trace.states.last().expect("non-empty");
        let l = total_loss(out, img, &trace.pyramid.phi3, loss_cfg)?;
        acc.scaled_add(&l, scale);
    }
    Ok(acc)
}

pub fn batch_loss(
    topology: &NetTopology,
    params: &[f64],
    batch: &[Tensor<f64>],
    enh: &EnhanceConfig,
    loss_cfg: &LossConfig,
) -> Result<LossBreakdown> {
    batch_loss_staged(topology, [params, params, params], batch, enh, loss_cfg)
}

fn batch_to_f64(batch: &[ImageTensor]) -> Vec<Tensor<f64>> {
    batch.iter().map(|t| t.cast::<f64>()).collect()
}

/// Reverse-mode gradient of the batch-mean total loss.
pub fn backward_gradients(
    weights: &Weights,
    batch: &[ImageTensor],
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, GradientVector)> {
    let params = weights.to_f64();
    let (loss, values) =
        loss_and_gradient(weights.topology(), &params, &batch_to_f64(batch), &cfg.enhance_cfg, &cfg.loss_cfg)?;
    Ok((loss, GradientVector { topology: weights.topology().clone(), values }))
}

/// Central differences `(f(θ + εeᵢ) − f(θ − εeᵢ)) / 2ε` for every coordinate.
pub fn central_differences(params: &[f64], epsilon: f64, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut p = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        p[i] = params[i] + epsilon;
        let up = f(&p)?;
        p[i] = params[i] - epsilon;
        let down = f(&p)?;
        p[i] = params[i];
        out.push((up - down) / (2.0 * epsilon));
    }
    Ok(out)
}

/// Finite-difference gradient of the batch-mean total loss (the oracle for
/// [`backward_gradients`]).
pub fn fd_gradients(
    weights: &Weights,
    batch: &[ImageTensor],
    cfg: &TrainConfig,
    epsilon: f64,
) -> Result<GradientVector> {
    let batch = batch_to_f64(batch);
    let values = central_differences(&weights.to_f64(), epsilon, |p| {
        Ok(batch_loss(weights.topology(), p, &batch, &cfg.enhance_cfg, &cfg.loss_cfg)?.total)
    })?;
    Ok(GradientVector { topology: weights.topology().clone(), values })
}

/// Agreement between analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |a − f| / max(|a|, |f|, 1e-6)` over parameters.
    pub max_rel_err: f64,
    pub cosine: f64,
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let mut max_rel_err = 0.0f64;
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&a, &f) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(f.abs()).max(1e-6);
        max_rel_err = max_rel_err.max((a - f).abs() / denom);
        ab += a * f;
        aa += a * a;
        bb += f * f;
    }
    let cosine = if aa == 0.0 && bb == 0.0 { 1.0 } else { ab / (aa.sqrt() * bb.sqrt()) };
    GradCheck { max_rel_err, cosine }
}

/// Analytic-vs-central-difference check on one batch.
pub fn gradient_check(
    topology: &NetTopology,
    params: &[f64],
    batch: &[Tensor<f64>],
    enh: &EnhanceConfig,
    loss_cfg: &LossConfig,
    epsilon: f64,
) -> Result<GradCheck> {
    let (_, analytic) = loss_and_gradient(topology, params, batch, enh, loss_cfg)?;
    let numeric = central_differences(params, epsilon, |p| Ok(batch_loss(topology, p, batch, enh, loss_cfg)?.total))?;
    Ok(compare_gradients(&analytic, &numeric))
}

/// Step used by [`gradcheck_random`]. Larger steps straddle ReLU kinks on
/// 16×16 patches; smaller ones lose digits to cancellation.
pub const GRADCHECK_EPSILON: f64 = 1e-5;

/// Half-width of the uniform distribution for gradcheck weights.
pub const GRADCHECK_WEIGHT_RANGE: f64 = 0.5;

/// Seeded gradient check on the canonical topology: weights drawn from
/// `U(−0.5, 0.5)` and one dark 16×16 patch drawn from `U(0.02, 0.4)`.
pub fn gradcheck_random(seed: u64, iterations: usize, irm: bool, epsilon: f64) -> Result<GradCheck> {
    let topology = NetTopology::canonical();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = GRADCHECK_WEIGHT_RANGE;
    let params: Vec<f64> = (0..param_count(&topology)).map(|_| rng.random_range(-r..r)).collect();
    let patch = Tensor::from_fn(16, 16, 3, |_, _, _| rng.random_range(0.02..0.4));
    let enh = EnhanceConfig { iterations, irm_enabled: irm, ..Default::default() };
    gradient_check(&topology, &params, &[patch], &enh, &LossConfig::default(), epsilon)
}

// ---------------------------------------------------------------------------
// Optimiser.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self { learning_rate: c.learning_rate, beta1: c.adam_beta1, beta2: c.adam_beta2, eps: c.adam_eps }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

// ---------------------------------------------------------------------------
// Training loop.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    /// 1-based step index.
    pub step: usize,
    pub loss: LossBreakdown,
}

impl TrainRecord {
    /// `step, total, L_exp, L_tv, L_mscol` with round-trip float formatting.
    pub fn to_line(&self) -> String {
        let l = &self.loss;
        format!("{}, {}, {}, {}, {}", self.step, l.total, l.exposure, l.tv, l.mscol)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(s, "{}", r.to_line());
        }
        s
    }

    /// Mean total loss over the `window` records ending at 1-based `step`.
    pub fn smoothed(&self, step: usize, window: usize) -> Option<f64> {
        if step == 0 || step > self.records.len() || window == 0 {
            return None;
        }
        let lo = step.saturating_sub(window);
        let slice = &self.records[lo..step];
        Some(slice.iter().map(|r| r.loss.total).sum::<f64>() / slice.len() as f64)
    }
}

/// `model.lie` → `model.step500.lie`.
pub fn checkpoint_name(base: &Path, step: usize) -> PathBuf {
    let stem = base.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match base.extension() {
        Some(ext) => format!("{stem}.step{step}.{}", ext.to_string_lossy()),
        None => format!("{stem}.step{step}"),
    };
    base.with_file_name(name)
}

/// Loads every PNG/PPM image in a directory.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<ImageTensor>> {
    let dir = dir.as_ref();
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no PNG/PPM images in {}", dir.display())));
    }
    paths.iter().map(load_image).collect()
}

/// Trains from a directory of low-light images.
pub fn train(dataset_dir: impl AsRef<Path>, topology: &NetTopology, cfg: &TrainConfig) -> Result<(Weights, TrainLog)> {
    let images = load_dataset(dataset_dir)?;
    train_on_images(&images, topology, cfg, |_| {})
}

/// Trains on in-memory images; `on_step` sees every log record as it is produced.
pub fn train_on_images(
    images: &[ImageTensor],
    topology: &NetTopology,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainRecord),
) -> Result<(Weights, TrainLog)> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Dataset("no training images".into()));
    }
    let min_side = images.iter().map(|i| i.height().min(i.width())).min().unwrap_or(0);
    let patch = cfg.patch.min(min_side);
    if patch < 3 {
        return Err(Error::Dataset(format!("images too small for training ({min_side} px)")));
    }

    let init = init_weights(topology, cfg.seed);
    let mut params = init.to_f64();
    let mut adam = AdamState::new(params.len());
    let adam_cfg = AdamConfig::from(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c);
    let mut log = TrainLog::default();

    for step in 1..=cfg.steps {
        let batch = (0..cfg.batch_size)
            .map(|_| {
                let img = &images[rng.random_range(0..images.len())];
                random_crop(img, patch, &mut rng).map(|c| c.cast::<f64>())
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grad) = loss_and_gradient(topology, &params, &batch, &cfg.enhance_cfg, &cfg.loss_cfg)?;
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss: loss.total });
        }
        adam_step(&mut params, &grad, &mut adam, &adam_cfg);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { step, loss: loss.total });
        }
        let rec = TrainRecord { step, loss };
        on_step(&rec);
        log.records.push(rec);

        if let Some(base) = &cfg.checkpoint_path {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                let path = checkpoint_name(base, step);
                serialize_weights(&Weights::from_f64(topology.clone(), &params)?, &path)?;
                log.checkpoints.push(path);
            }
        }
    }
    if cfg.steps == 0 {
        return Ok((init, log));
    }
    Ok((Weights::from_f64(topology.clone(), &params)?, log))
}

/// Operator output for a parameter slice; exposed for tooling that needs raw `F`.
pub fn operator_output(topology: &NetTopology, params: &[f64], input: &Tensor<f64>) -> Result<Tensor<f64>> {
    apply_operator(topology, params, input)
}
