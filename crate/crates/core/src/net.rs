//! The weight-shared feature operator and its three-stage feature pyramid.
//!
//! A topology such as `3-1-3` describes the convolution stack of the operator
//! `F`: one 3×3 convolution per consecutive pair of channel widths, chained
//! without activations. `F` is applied three times with the same weights:
//!
//! ```text
//! phi1 = relu(F(I)),  phi2 = relu(F(phi1)),  phi3 = tanh(F(phi2))
//! ```

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, Tensor};
use crate::parallel;
use crate::Real;

/// Standard deviation of the Gaussian kernel initialisation.
pub const INIT_STD: f64 = 0.02;

const MAGIC: &[u8; 4] = b"LIE1";
const FORMAT_VERSION: u16 = 1;

/// Channel widths of the operator's convolution stack, e.g. `[3, 1, 3]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetTopology(Vec<usize>);

impl NetTopology {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArgument("a topology needs at least two widths".into()));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument("channel widths must be >= 1".into()));
        }
        if widths[0] != 3 || widths[widths.len() - 1] != 3 {
            return Err(Error::InvalidArgument(format!(
                "topology {} must start and end with 3 channels",
                fmt_widths(&widths)
            )));
        }
        Ok(Self(widths))
    }

    /// The 58-parameter `3-1-3` operator.
    pub fn canonical() -> Self {
        Self(vec![3, 1, 3])
    }

    /// The nine channel configurations compared in the topology study.
    pub fn studied() -> Vec<Self> {
        ["3-3", "3-1-3", "3-3-3", "3-8-3", "3-16-3", "3-1-1-3", "3-3-3-3", "3-8-8-3", "3-16-16-3"]
            .iter()
            .map(|s| s.parse().expect("static topology"))
            .collect()
    }

    pub fn widths(&self) -> &[usize] {
        &self.0
    }

    /// Number of 3×3 convolutions in the operator.
    pub fn block_count(&self) -> usize {
        self.0.len() - 1
    }

    /// `(in_channels, out_channels)` of each block.
    pub fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.windows(2).map(|p| (p[0], p[1]))
    }

    /// Offsets of each block's kernel and bias in the flat parameter vector.
    pub fn layout(&self) -> Vec<BlockLayout> {
        let mut offset = 0;
        self.blocks()
            .map(|(cin, cout)| {
                let kernel = offset;
                let bias = kernel + cout * cin * 9;
                offset = bias + cout;
                BlockLayout { cin, cout, kernel, bias }
            })
            .collect()
    }

    /// Multiply-accumulates per pixel for one application of the operator.
    pub fn macs_per_pixel(&self) -> usize {
        self.blocks().map(|(cin, cout)| cin * cout * 9).sum()
    }
}

fn fmt_widths(w: &[usize]) -> String {
    w.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-")
}

impl fmt::Display for NetTopology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&fmt_widths(&self.0))
    }
}

impl FromStr for NetTopology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let widths = s
            .split('-')
            .map(|p| p.trim().parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad topology '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(widths)
    }
}

/// Where one block's parameters sit in the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub bias: usize,
}

impl BlockLayout {
    pub fn kernel_len(&self) -> usize {
        self.cout * self.cin * 9
    }
}

/// Total parameter count: `Σ (out·in·9 + out)` over the blocks.
pub fn param_count(topology: &NetTopology) -> usize {
    topology.blocks().map(|(cin, cout)| cout * cin * 9 + cout).sum()
}

/// Parameters of one topology, stored flat as `[kernel₀, bias₀, kernel₁, bias₁, …]`.
/// Kernels are laid out `out × in × ky × kx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    topology: NetTopology,
    params: Vec<f32>,
}

impl Weights {
    pub fn from_params(topology: NetTopology, params: Vec<f32>) -> Result<Self> {
        let expected = param_count(&topology);
        if params.len() != expected {
            return Err(Error::Shape(format!(
                "{} parameters for topology {topology} (expects {expected})",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite weight".into()));
        }
        Ok(Self { topology, params })
    }

    pub fn zeros(topology: NetTopology) -> Self {
        let n = param_count(&topology);
        Self { topology, params: vec![0.0; n] }
    }

    pub fn topology(&self) -> &NetTopology {
        &self.topology
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&v| f64::from(v)).collect()
    }

    /// Rounds an `f64` parameter vector into weights of the given topology.
    pub fn from_f64(topology: NetTopology, params: &[f64]) -> Result<Self> {
        Self::from_params(topology, params.iter().map(|&v| v as f32).collect())
    }
}

/// Kernels `~ N(0, 0.02²)`, biases zero; deterministic per seed.
pub fn init_weights(topology: &NetTopology, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = vec![0f32; param_count(topology)];
    for block in topology.layout() {
        for v in &mut params[block.kernel..block.kernel + block.kernel_len()] {
            *v = normal.sample(&mut rng) as f32;
        }
    }
    Weights { topology: topology.clone(), params }
}

/// 3×3 cross-correlation, stride 1, zero padding 1.
///
/// `kernel` is `out × in × 3 × 3`; output rows are computed independently, so
/// the result does not depend on how rows are spread over threads.
pub fn conv3x3_same<T: Real>(input: &Tensor<T>, kernel: &[T], bias: &[T]) -> Result<Tensor<T>> {
    let h = input.height();
    conv_rows(input, 0..h, kernel, bias, 0..h, Vec::new())
}

/// Convolution of the band `band` of `input`'s rows (rows outside the band
/// read as zero), producing band-relative output rows `out_rows` into `buf`.
pub(crate) fn conv_rows<T: Real>(
    input: &Tensor<T>,
    band: Range<usize>,
    kernel: &[T],
    bias: &[T],
    out_rows: Range<usize>,
    mut buf: Vec<T>,
) -> Result<Tensor<T>> {
    let cout = bias.len();
    let cin = input.channels();
    if kernel.len() != cout * cin * 9 {
        return Err(Error::Shape(format!(
            "kernel has {} taps, expected {cout}x{cin}x3x3 for a {cin}-channel input",
            kernel.len()
        )));
    }
    let (h, w) = (band.len(), input.width());
    let (lo, oh) = (out_rows.start, out_rows.len());
    buf.clear();
    buf.resize(cout * oh * w, T::zero());
    if w == 0 || oh == 0 {
        return Ok(Tensor::from_vec_unchecked(oh, w, cout, buf));
    }
    parallel::for_each_chunk_mut(&mut buf, w, |idx, row| {
        let (o, y) = (idx / oh, lo + idx % oh);
        row.fill(bias[o]);
        for i in 0..cin {
            let plane = input.plane(i);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let r = band.start + sy as usize;
                let src = &plane[r * w..(r + 1) * w];
                let k = &kernel[((o * cin + i) * 3 + ky) * 3..][..3];
                accumulate_row(row, src, k[0], k[1], k[2]);
            }
        }
    });
    Ok(Tensor::from_vec_unchecked(oh, w, cout, buf))
}

/// A horizontal band holding rows `start..end` of a `full_height`-row map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct RowSpan {
    pub start: usize,
    pub end: usize,
    pub full_height: usize,
}

/// Reusable scratch vectors.
#[derive(Debug)]
pub(crate) struct BufferPool<T>(Vec<Vec<T>>);

impl<T> BufferPool<T> {
    pub fn new() -> Self {
        Self(Vec::new())
    }

    pub fn take(&mut self) -> Vec<T> {
        self.0.pop().unwrap_or_default()
    }

    pub fn give(&mut self, v: Vec<T>) {
        self.0.push(v);
    }
}

/// Applies `F` to rows `rows` of `input`, which hold rows `span` of the full
/// map. Each convolution yields every row whose 3-row neighbourhood is either
/// inside the band or beyond the map edge, so the band shrinks by one row per
/// block on each interior side.
pub(crate) fn apply_operator_band<T: Real>(
    topology: &NetTopology,
    params: &[T],
    input: &Tensor<T>,
    rows: Range<usize>,
    mut span: RowSpan,
    pool: &mut BufferPool<T>,
) -> Result<(Tensor<T>, RowSpan)> {
    let mut x: Option<Tensor<T>> = None;
    for b in topology.layout() {
        let (src, band) = match &x {
            Some(t) => (t, 0..t.height()),
            None => (input, rows.clone()),
        };
        let lo = usize::from(span.start > 0);
        let hi = band.len() - usize::from(span.end < span.full_height);
        if hi <= lo {
            return Err(Error::Shape("band too thin for the operator".into()));
        }
        let out = conv_rows(
            src,
            band,
            &params[b.kernel..b.kernel + b.kernel_len()],
            &params[b.bias..b.bias + b.cout],
            lo..hi,
            pool.take(),
        )?;
        span = RowSpan { start: span.start + lo, end: span.start + hi, full_height: span.full_height };
        if let Some(old) = x.replace(out) {
            pool.give(old.into_data());
        }
    }
    Ok((x.expect("topology has at least one block"), span))
}

/// `row[x] += k0·src[x-1] + k1·src[x] + k2·src[x+1]` with zero outside the row.
#[inline]
pub(crate) fn accumulate_row<T: Real>(row: &mut [T], src: &[T], k0: T, k1: T, k2: T) {
    let w = row.len();
    match w {
        0 => {}
        1 => row[0] = row[0] + k1 * src[0],
        _ => {
            row[0] = row[0] + (k1 * src[0] + k2 * src[1]);
            let n = w - 2;
            let (d, l, c, r) = (&mut row[1..n + 1], &src[..n], &src[1..n + 1], &src[2..n + 2]);
            for x in 0..n {
                d[x] = d[x] + ((k0 * l[x] + k1 * c[x]) + k2 * r[x]);
            }
            row[w - 1] = row[w - 1] + (k0 * src[w - 2] + k1 * src[w - 1]);
        }
    }
}

/// One application of the operator `F`: the topology's convolutions in
/// sequence with identity activation in between.
pub fn apply_operator<T: Real>(topology: &NetTopology, params: &[T], input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut layers = topology.layout().into_iter();
    let first = layers.next().expect("topology has at least one block");
    let mut x = conv_block(input, params, &first)?;
    for block in layers {
        x = conv_block(&x, params, &block)?;
    }
    Ok(x)
}

fn conv_block<T: Real>(x: &Tensor<T>, params: &[T], b: &BlockLayout) -> Result<Tensor<T>> {
    conv3x3_same(x, &params[b.kernel..b.kernel + b.kernel_len()], &params[b.bias..b.bias + b.cout])
}

/// The three stage outputs of the shared operator.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T = f32> {
    pub phi1: Tensor<T>,
    pub phi2: Tensor<T>,
    /// Enhancement map, bounded by tanh.
    pub phi3: Tensor<T>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn maps(&self) -> [&Tensor<T>; 3] {
        [&self.phi1, &self.phi2, &self.phi3]
    }
}

/// Runs the three weight-shared stages on a 3-channel image.
pub fn extract_features(weights: &Weights, image: &ImageTensor) -> Result<FeaturePyramid<f32>> {
    extract_features_with(&weights.topology, &weights.params, image)
}

/// [`extract_features`] over an arbitrary float type and raw parameter slice.
pub fn extract_features_with<T: Real>(
    topology: &NetTopology,
    params: &[T],
    image: &Tensor<T>,
) -> Result<FeaturePyramid<T>> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", image.channels())));
    }
    if params.len() != param_count(topology) {
        return Err(Error::Shape(format!("{} parameters for topology {topology}", params.len())));
    }
    let relu = |v: T| if v > T::zero() { v } else { T::zero() };
    let mut phi1 = apply_operator(topology, params, image)?;
    map_in_place(&mut phi1, relu);
    let mut phi2 = apply_operator(topology, params, &phi1)?;
    map_in_place(&mut phi2, relu);
    let mut phi3 = apply_operator(topology, params, &phi2)?;
    map_in_place(&mut phi3, |v| v.act_tanh());
    Ok(FeaturePyramid { phi1, phi2, phi3 })
}

fn map_in_place<T: Real>(t: &mut Tensor<T>, f: impl Fn(T) -> T + Send + Sync) {
    let chunk = t.width().max(1) * 8;
    parallel::for_each_chunk_mut(t.data_mut(), chunk, |_, c| {
        for v in c {
            *v = f(*v);
        }
    });
}

/// Encodes weights in the `LIE1` binary format.
pub fn encode_weights(w: &Weights) -> Vec<u8> {
    let widths = w.topology.widths();
    let mut out = Vec::with_capacity(8 + 2 * widths.len() + 4 * w.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.topology.block_count() as u16).to_le_bytes());
    for &c in widths {
        out.extend_from_slice(&(c as u16).to_le_bytes());
    }
    for &p in &w.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

/// Decodes the `LIE1` binary format.
pub fn decode_weights(bytes: &[u8]) -> Result<Weights> {
    let mut cur = bytes;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Format(format!("truncated while reading {what}")));
        }
        let (head, tail) = cur.split_at(n);
        cur = tail;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let blocks = u16::from_le_bytes(take(2, "block count")?.try_into().unwrap()) as usize;
    let widths = take(2 * (blocks + 1), "channel widths")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
        .collect::<Vec<_>>();
    let topology = NetTopology::new(widths).map_err(|e| Error::Format(format!("invalid topology: {e}")))?;
    let n = param_count(&topology);
    let payload = take(4 * n, "parameters")?;
    if !cur.is_empty() {
        return Err(Error::Format(format!(
            "{} trailing bytes after {n} parameters for topology {topology}",
            cur.len()
        )));
    }
    let params = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect::<Vec<_>>();
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite parameter".into()));
    }
    Ok(Weights { topology, params })
}

pub fn serialize_weights(w: &Weights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(w)).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn deserialize_weights(path: impl AsRef<Path>) -> Result<Weights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
