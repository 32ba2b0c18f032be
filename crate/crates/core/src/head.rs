//! Implicit point head: an MLP whose parameters are produced per instance,
//! evaluated on point features concatenated with an encoding of the point's
//! box-relative position.
//!
//! Parameters live in one flat vector, layer by layer (input -> h1 -> h2 ->
//! h3 -> output), each layer stored as row-major weights `[out][in]`
//! followed by the bias `[out]`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::loss::pixel_taps;
use crate::mask::BoundingBox;
use crate::sim::keyed_rng;

pub const HIDDEN_LAYERS: usize = 3;
const LAYERS: usize = HIDDEN_LAYERS + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadArch {
    pub feature_dim: usize,
    pub pe_dim: usize,
    pub hidden: [usize; HIDDEN_LAYERS],
}

impl HeadArch {
    /// 256-channel features, 128-dim positional encoding, three 256-wide hidden layers.
    pub fn full_scale() -> Self {
        Self {
            feature_dim: 256,
            pe_dim: 128,
            hidden: [256; 3],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.pe_dim
    }

    /// `(in, out)` for each of the four layers.
    pub fn layer_dims(&self) -> [(usize, usize); LAYERS] {
        let [h1, h2, h3] = self.hidden;
        [(self.input_dim(), h1), (h1, h2), (h2, h3), (h3, 1)]
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Offset of each layer's weights in the flat vector.
    pub fn layer_offsets(&self) -> [usize; LAYERS] {
        let mut offs = [0; LAYERS];
        let mut acc = 0;
        for (k, (i, o)) in self.layer_dims().iter().enumerate() {
            offs[k] = acc;
            acc += i * o + o;
        }
        offs
    }

    pub fn max_width(&self) -> usize {
        self.hidden.iter().copied().max().unwrap_or(1).max(self.input_dim())
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 || self.hidden.contains(&0) {
            return Err(invalid(format!("degenerate head arch {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointHeadParams {
    pub arch: HeadArch,
    pub flat: Vec<f64>,
}

/// Borrowed view of one dense layer.
#[derive(Clone, Copy, Debug)]
pub struct Layer<'a> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: &'a [f64],
    pub bias: &'a [f64],
}

impl PointHeadParams {
    pub fn zeros(arch: HeadArch) -> Self {
        Self {
            arch,
            flat: vec![0.0; arch.param_count()],
        }
    }

    pub fn from_flat(arch: HeadArch, flat: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if flat.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} parameters", arch.param_count()),
                actual: format!("{}", flat.len()),
            });
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite head parameter"));
        }
        Ok(Self { arch, flat })
    }

    /// Starting point for directly optimized heads: He-normal hidden weights,
    /// zero biases, zero output layer. The output is exactly 0 everywhere, and
    /// the hidden activations are non-zero so gradients reach every layer.
    pub fn init_free(arch: HeadArch, seed: u64) -> Self {
        let mut rng = keyed_rng(seed, 0x696e_6974, 0); // "init"
        let mut flat = vec![0.0; arch.param_count()];
        let offs = arch.layer_offsets();
        for (k, &(inp, out)) in arch.layer_dims().iter().enumerate().take(HIDDEN_LAYERS) {
            let std = (2.0 / inp as f64).sqrt();
            for w in &mut flat[offs[k]..offs[k] + inp * out] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = std * z;
            }
        }
        Self { arch, flat }
    }

    pub fn layers(&self) -> [Layer<'_>; LAYERS] {
        let offs = self.arch.layer_offsets();
        let dims = self.arch.layer_dims();
        std::array::from_fn(|k| {
            let (i, o) = dims[k];
            let w0 = offs[k];
            Layer {
                inputs: i,
                outputs: o,
                weights: &self.flat[w0..w0 + i * o],
                bias: &self.flat[w0 + i * o..w0 + i * o + o],
            }
        })
    }

    /// Splits into per-layer `(weights, bias)` pairs.
    pub fn unpack(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers()
            .iter()
            .map(|l| (l.weights.to_vec(), l.bias.to_vec()))
            .collect()
    }

    pub fn pack(arch: HeadArch, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        if layers.len() != LAYERS {
            return Err(invalid(format!("expected {LAYERS} layers, got {}", layers.len())));
        }
        let mut flat = Vec::with_capacity(arch.param_count());
        for ((w, b), (i, o)) in layers.iter().zip(arch.layer_dims()) {
            if w.len() != i * o || b.len() != o {
                return Err(Error::DimensionMismatch {
                    expected: format!("{o}x{i} weights + {o} bias"),
                    actual: format!("{} weights + {} bias", w.len(), b.len()),
                });
            }
            flat.extend_from_slice(w);
            flat.extend_from_slice(b);
        }
        Self::from_flat(arch, flat)
    }
}

// ---------------------------------------------------------------------------
// Position encoding

/// Random Fourier features `[sin(2 pi B p), cos(2 pi B p)]` with a fixed
/// `m x 2` Gaussian frequency matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierEncoding {
    pub freqs: Vec<[f64; 2]>,
    pub scale: f64,
    pub seed: u64,
}

impl FourierEncoding {
    pub const DEFAULT_FREQUENCIES: usize = 64;
    pub const DEFAULT_SCALE: f64 = 1.0;

    pub fn new(m: usize, scale: f64, seed: u64) -> Self {
        let mut rng = keyed_rng(seed, 0x666f_7572, 0); // "four"
        let normal = Normal::new(0.0, scale.abs()).expect("finite scale");
        let freqs = (0..m).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
        Self { freqs, scale, seed }
    }

    pub fn from_matrix(freqs: Vec<[f64; 2]>) -> Self {
        Self {
            freqs,
            scale: f64::NAN,
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn encode(&self, dx: f64, dy: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.encode_into(dx, dy, &mut out);
        out
    }

    pub fn encode_into(&self, dx: f64, dy: f64, out: &mut [f64]) {
        let m = self.freqs.len();
        for (k, b) in self.freqs.iter().enumerate() {
            let (s, c) = (std::f64::consts::TAU * (b[0] * dx + b[1] * dy)).sin_cos();
            out[k] = s;
            out[m + k] = c;
        }
    }
}

/// How a box-relative position enters the head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoordMode {
    /// No coordinate input.
    None,
    /// The raw `(dx, dy)` pair.
    Relative,
    /// Random Fourier features.
    Fourier { frequencies: usize, scale: f64, seed: u64 },
}

impl CoordMode {
    pub fn fourier_default(seed: u64) -> Self {
        Self::Fourier {
            frequencies: FourierEncoding::DEFAULT_FREQUENCIES,
            scale: FourierEncoding::DEFAULT_SCALE,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            CoordMode::None => 0,
            CoordMode::Relative => 2,
            CoordMode::Fourier { frequencies, .. } => 2 * frequencies,
        }
    }

    pub fn encoder(&self) -> PositionEncoder {
        match *self {
            CoordMode::None => PositionEncoder::None,
            CoordMode::Relative => PositionEncoder::Relative,
            CoordMode::Fourier {
                frequencies,
                scale,
                seed,
            } => PositionEncoder::Fourier(FourierEncoding::new(frequencies, scale, seed)),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CoordMode::None => "none",
            CoordMode::Relative => "rel",
            CoordMode::Fourier { .. } => "pe",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PositionEncoder {
    None,
    Relative,
    Fourier(FourierEncoding),
}

impl PositionEncoder {
    pub fn dim(&self) -> usize {
        match self {
            PositionEncoder::None => 0,
            PositionEncoder::Relative => 2,
            PositionEncoder::Fourier(f) => f.dim(),
        }
    }

    /// `rel` is the box-relative position in `[-0.5, 0.5]^2`.
    pub fn encode_into(&self, rel: (f64, f64), out: &mut [f64]) {
        match self {
            PositionEncoder::None => {}
            PositionEncoder::Relative => {
                out[0] = rel.0;
                out[1] = rel.1;
            }
            PositionEncoder::Fourier(f) => f.encode_into(rel.0, rel.1, out),
        }
    }

    pub fn encode(&self, rel: (f64, f64)) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.encode_into(rel, &mut out);
        out
    }
}

/// Writes `[features(x, y); encoding(box-relative(x, y))]` into `row`.
pub fn fill_head_input(fgrid: &FeatureGrid, bbox: &BoundingBox, encoder: &PositionEncoder, x: f64, y: f64, row: &mut [f64]) {
    let fdim = fgrid.channels;
    sample_point_features_into(fgrid, x, y, &mut row[..fdim]);
    encoder.encode_into(bbox.relative_to_center(x, y), &mut row[fdim..]);
}

/// Fourier encoding of a box-relative position.
pub fn encode_position(rel: (f64, f64), enc: &FourierEncoding) -> Vec<f64> {
    enc.encode(rel.0, rel.1)
}

// ---------------------------------------------------------------------------
// Forward / backward

/// Scratch buffers holding pre-activations of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Activations {
    input: Vec<f64>,
    pre: [Vec<f64>; HIDDEN_LAYERS],
    post: [Vec<f64>; HIDDEN_LAYERS],
    grad_a: Vec<f64>,
    grad_b: Vec<f64>,
}

impl Activations {
    pub fn new(arch: &HeadArch) -> Self {
        Self {
            input: vec![0.0; arch.input_dim()],
            pre: std::array::from_fn(|k| vec![0.0; arch.hidden[k]]),
            post: std::array::from_fn(|k| vec![0.0; arch.hidden[k]]),
            grad_a: vec![0.0; arch.max_width()],
            grad_b: vec![0.0; arch.max_width()],
        }
    }

    fn fits(&self, arch: &HeadArch) -> bool {
        self.input.len() == arch.input_dim() && (0..HIDDEN_LAYERS).all(|k| self.pre[k].len() == arch.hidden[k])
    }
}

#[inline]
fn dense(layer: &Layer<'_>, input: &[f64], out: &mut [f64]) {
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
        let mut acc = layer.bias[o];
        for (w, a) in row.iter().zip(input) {
            acc += w * a;
        }
        *slot = acc;
    }
}

/// Forward pass on a prepared `[feature; pe]` input. Caches activations.
pub fn forward_input(params: &PointHeadParams, input: &[f64], act: &mut Activations) -> f64 {
    if !act.fits(&params.arch) {
        *act = Activations::new(&params.arch);
    }
    act.input.copy_from_slice(input);
    let layers = params.layers();
    for k in 0..HIDDEN_LAYERS {
        let (pre, post) = (&mut act.pre, &mut act.post);
        let src: &[f64] = if k == 0 { &act.input } else { &post[k - 1] };
        let mut z = std::mem::take(&mut pre[k]);
        dense(&layers[k], src, &mut z);
        for (p, &v) in post[k].iter_mut().zip(&z) {
            *p = v.max(0.0);
        }
        pre[k] = z;
    }
    let out = &layers[HIDDEN_LAYERS];
    let mut logit = out.bias[0];
    for (w, a) in out.weights.iter().zip(&act.post[HIDDEN_LAYERS - 1]) {
        logit += w * a;
    }
    logit
}

/// Reverse pass for the most recent [`forward_input`]. Adds `upstream *
/// d logit / d params` into `dparams`; writes `d logit / d input * upstream`
/// into `dinput` when given.
pub fn backward_input(
    params: &PointHeadParams,
    act: &mut Activations,
    upstream: f64,
    dparams: &mut [f64],
    dinput: Option<&mut [f64]>,
) {
    let arch = params.arch;
    let offs = arch.layer_offsets();
    let layers = params.layers();
    // gradient w.r.t. the current layer's outputs lives in grad_a
    let mut g_out = std::mem::take(&mut act.grad_a);
    let mut g_in = std::mem::take(&mut act.grad_b);
    g_out[0] = upstream;
    for k in (0..LAYERS).rev() {
        let layer = &layers[k];
        let (ni, no) = (layer.inputs, layer.outputs);
        let src: &[f64] = if k == 0 { &act.input } else { &act.post[k - 1] };
        if k < HIDDEN_LAYERS {
            for (g, &z) in g_out[..no].iter_mut().zip(&act.pre[k]) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        let dw = &mut dparams[offs[k]..offs[k] + ni * no + no];
        for o in 0..no {
            let g = g_out[o];
            if g == 0.0 {
                continue;
            }
            let row = &mut dw[o * ni..(o + 1) * ni];
            for (d, &a) in row.iter_mut().zip(src) {
                *d += g * a;
            }
            dw[ni * no + o] += g;
        }
        if k == 0 && dinput.is_none() {
            break;
        }
        g_in[..ni].iter_mut().for_each(|v| *v = 0.0);
        for o in 0..no {
            let g = g_out[o];
            if g == 0.0 {
                continue;
            }
            let row = &layer.weights[o * ni..(o + 1) * ni];
            for (acc, &w) in g_in[..ni].iter_mut().zip(row) {
                *acc += g * w;
            }
        }
        std::mem::swap(&mut g_out, &mut g_in);
    }
    if let Some(di) = dinput {
        di.copy_from_slice(&g_out[..arch.input_dim()]);
    }
    act.grad_a = g_out;
    act.grad_b = g_in;
}

fn check_dims(params: &PointHeadParams, feature: &[f64], pe: &[f64]) -> Result<Vec<f64>> {
    params.arch.validate()?;
    if params.flat.len() != params.arch.param_count() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} parameters", params.arch.param_count()),
            actual: format!("{}", params.flat.len()),
        });
    }
    if feature.len() != params.arch.feature_dim || pe.len() != params.arch.pe_dim {
        return Err(Error::DimensionMismatch {
            expected: format!("feature {} + pe {}", params.arch.feature_dim, params.arch.pe_dim),
            actual: format!("feature {} + pe {}", feature.len(), pe.len()),
        });
    }
    let mut input = Vec::with_capacity(params.arch.input_dim());
    input.extend_from_slice(feature);
    input.extend_from_slice(pe);
    Ok(input)
}

/// Logit of the point head for one point. Callers apply the sigmoid.
pub fn head_forward(params: &PointHeadParams, feature: &[f64], pe: &[f64]) -> Result<f64> {
    let input = check_dims(params, feature, pe)?;
    Ok(forward_input(params, &input, &mut Activations::new(&params.arch)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub params: Vec<f64>,
    pub feature: Vec<f64>,
}

/// Exact gradients of `upstream * logit` w.r.t. the parameters and the feature
/// vector (the encoding is a constant input).
pub fn head_backward(params: &PointHeadParams, feature: &[f64], pe: &[f64], upstream: f64) -> Result<HeadGrad> {
    let input = check_dims(params, feature, pe)?;
    let mut act = Activations::new(&params.arch);
    forward_input(params, &input, &mut act);
    let mut dparams = vec![0.0; params.flat.len()];
    let mut dinput = vec![0.0; input.len()];
    backward_input(params, &mut act, upstream, &mut dparams, Some(&mut dinput));
    dinput.truncate(params.arch.feature_dim);
    Ok(HeadGrad {
        params: dparams,
        feature: dinput,
    })
}

pub const DEFAULT_L2_WEIGHT: f64 = 1e-5;

/// `weight * sum(theta^2)` and its gradient `2 * weight * theta`.
pub fn l2_param_loss(params: &[f64], weight: f64) -> (f64, Vec<f64>) {
    let loss = weight * params.iter().map(|t| t * t).sum::<f64>();
    (loss, params.iter().map(|t| 2.0 * weight * t).collect())
}

// ---------------------------------------------------------------------------
// Features

/// Channel-major `C x H x W` feature map in image pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * width * height || width == 0 || height == 0 {
            return Err(Error::DimensionMismatch {
                expected: format!("{channels}x{height}x{width}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Per-channel bilinear sample at an image point `(x, y)`.
pub fn sample_point_features(fgrid: &FeatureGrid, x: f64, y: f64) -> Vec<f64> {
    let mut out = vec![0.0; fgrid.channels];
    sample_point_features_into(fgrid, x, y, &mut out);
    out
}

pub fn sample_point_features_into(fgrid: &FeatureGrid, x: f64, y: f64, out: &mut [f64]) {
    let taps = pixel_taps(fgrid.width, fgrid.height, x - 0.5, y - 0.5);
    for (c, slot) in out.iter_mut().enumerate().take(fgrid.channels) {
        *slot = taps.apply(fgrid.channel(c));
    }
}

/// Adjoint of [`sample_point_features`]: spreads `dfeature` back over the grid.
pub fn sample_point_features_backward(fgrid: &FeatureGrid, x: f64, y: f64, dfeature: &[f64]) -> Vec<f64> {
    let taps = pixel_taps(fgrid.width, fgrid.height, x - 0.5, y - 0.5);
    let n = fgrid.width * fgrid.height;
    let mut grad = vec![0.0; fgrid.data.len()];
    for (c, &g) in dfeature.iter().enumerate().take(fgrid.channels) {
        for k in 0..4 {
            grad[c * n + taps.index[k]] += g * taps.weight[k];
        }
    }
    grad
}

/// Channel means over each cell of a `bins x bins` split of the box, plus a
/// trailing constant 1.
pub fn region_descriptor(fgrid: &FeatureGrid, bbox: &BoundingBox, bins: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(fgrid.channels * bins * bins + 1);
    let samples = 4;
    for c in 0..fgrid.channels {
        for by in 0..bins {
            for bx in 0..bins {
                let mut acc = 0.0;
                for sy in 0..samples {
                    for sx in 0..samples {
                        let u = (bx as f64 + (sx as f64 + 0.5) / samples as f64) / bins as f64;
                        let v = (by as f64 + (sy as f64 + 0.5) / samples as f64) / bins as f64;
                        let (x, y) = bbox.from_normalized(u, v);
                        let t = pixel_taps(fgrid.width, fgrid.height, x - 0.5, y - 0.5);
                        acc += t.apply(fgrid.channel(c));
                    }
                }
                out.push(acc / (samples * samples) as f64);
            }
        }
    }
    out.push(1.0);
    out
}

// ---------------------------------------------------------------------------
// Parameter heads

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamHeadMode {
    /// Parameters optimized directly per instance.
    Free,
    /// `params = A * descriptor + c` with `(A, c)` shared across instances.
    PooledLinear,
}

/// Shared linear map from a region descriptor to head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledLinearHead {
    pub arch: HeadArch,
    pub descriptor_dim: usize,
    /// `param_count x descriptor_dim`, row-major.
    pub a: Vec<f64>,
    pub c: Vec<f64>,
}

impl PooledLinearHead {
    pub const INIT_STD: f64 = 0.01;

    /// `A ~ N(0, 0.01^2)`; `c` starts at the free-mode initialization so the
    /// generated heads begin trainable.
    pub fn new(arch: HeadArch, descriptor_dim: usize, seed: u64) -> Self {
        let mut rng = keyed_rng(seed, 0x706f_6f6c, 0); // "pool"
        let a = (0..arch.param_count() * descriptor_dim)
            .map(|_| Self::INIT_STD * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            arch,
            descriptor_dim,
            a,
            c: PointHeadParams::init_free(arch, seed).flat,
        }
    }

    pub fn generate(&self, descriptor: &[f64]) -> Result<PointHeadParams> {
        if descriptor.len() != self.descriptor_dim {
            return Err(Error::DimensionMismatch {
                expected: format!("descriptor of {}", self.descriptor_dim),
                actual: format!("{}", descriptor.len()),
            });
        }
        let d = self.descriptor_dim;
        let flat = self
            .c
            .iter()
            .enumerate()
            .map(|(p, &c)| {
                let row = &self.a[p * d..(p + 1) * d];
                c + row.iter().zip(descriptor).map(|(a, x)| a * x).sum::<f64>()
            })
            .collect();
        Ok(PointHeadParams {
            arch: self.arch,
            flat,
        })
    }

    /// Chain rule through the linear map: accumulates `dA += dparams x
    /// descriptor^T` and `dc += dparams`.
    pub fn backward(&self, descriptor: &[f64], dparams: &[f64], da: &mut [f64], dc: &mut [f64]) {
        let d = self.descriptor_dim;
        for (p, &g) in dparams.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            dc[p] += g;
            for (slot, &x) in da[p * d..(p + 1) * d].iter_mut().zip(descriptor) {
                *slot += g * x;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamHead {
    Free(PointHeadParams),
    PooledLinear(PooledLinearHead),
}

impl ParamHead {
    pub fn mode(&self) -> ParamHeadMode {
        match self {
            ParamHead::Free(_) => ParamHeadMode::Free,
            ParamHead::PooledLinear(_) => ParamHeadMode::PooledLinear,
        }
    }

    /// Head parameters for one instance. Pooled-linear mode needs the
    /// instance's region descriptor.
    pub fn params_for(&self, descriptor: Option<&[f64]>) -> Result<PointHeadParams> {
        match self {
            ParamHead::Free(p) => Ok(p.clone()),
            ParamHead::PooledLinear(h) => {
                h.generate(descriptor.ok_or_else(|| invalid("pooled-linear head needs a region descriptor"))?)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Snapshots

const HEAD_MAGIC: &[u8; 4] = b"PSHD";
const FEATURE_MAGIC: &[u8; 4] = b"PSFG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadHeader {
    pub arch: HeadArch,
    pub coords: CoordMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
}

/// Head parameters together with the coordinate encoding they were trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSnapshot {
    pub header: HeadHeader,
    pub params: Vec<f64>,
}

impl HeadSnapshot {
    pub fn new(params: &PointHeadParams, coords: CoordMode, bbox: Option<BoundingBox>) -> Self {
        Self {
            header: HeadHeader {
                arch: params.arch,
                coords,
                bbox,
            },
            params: params.flat.clone(),
        }
    }

    pub fn head_params(&self) -> Result<PointHeadParams> {
        if self.header.coords.dim() != self.header.arch.pe_dim {
            return Err(Error::Format(format!(
                "coordinate mode yields {} dims, arch expects {}",
                self.header.coords.dim(),
                self.header.arch.pe_dim
            )));
        }
        PointHeadParams::from_flat(self.header.arch, self.params.clone())
    }

    /// Binary layout: `PSHD`, u32 LE header length, JSON header, u64 LE
    /// parameter count, f64 LE parameters.
    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(HEAD_MAGIC)?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for v in &self.params {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != HEAD_MAGIC {
            return Err(Error::Format("not a head snapshot".into()));
        }
        let len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: HeadHeader = serde_json::from_slice(&header)?;
        let n = read_u64(&mut r)? as usize;
        let params = read_f64s(&mut r, n)?;
        Ok(Self { header, params })
    }

    /// `.json` paths use the JSON form, everything else the binary one.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if is_json(path) {
            std::fs::write(path, serde_json::to_vec(self)?)?;
        } else {
            self.write_binary(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if is_json(path) {
            Ok(serde_json::from_slice(&std::fs::read(path)?)?)
        } else {
            Self::read_binary(std::io::BufReader::new(std::fs::File::open(path)?))
        }
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Feature map with the instance box it belongs to.
///
/// Binary layout: `PSFG`, u32 LE version (1), u32 LE channels, height, width,
/// u8 box flag, 4 x f64 LE box (present either way), then `C*H*W` f64 LE
/// values, channel-major.
pub fn write_features(fgrid: &FeatureGrid, bbox: Option<&BoundingBox>, mut w: impl Write) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    for v in [1u32, fgrid.channels as u32, fgrid.height as u32, fgrid.width as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&[bbox.is_some() as u8])?;
    for v in bbox.map_or([0.0; 4], |b| b.to_array()) {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &fgrid.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_features(mut r: impl Read) -> Result<(FeatureGrid, Option<BoundingBox>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format("not a feature grid file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != 1 {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let c = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let b = read_f64s(&mut r, 4)?;
    let bbox = if flag[0] != 0 {
        Some(BoundingBox::new(b[0], b[1], b[2], b[3])?)
    } else {
        None
    };
    let data = read_f64s(&mut r, c * h * w)?;
    Ok((FeatureGrid::new(c, w, h, data)?, bbox))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HeadArch {
        HeadArch {
            feature_dim: 2,
            pe_dim: 2,
            hidden: [2, 2, 2],
        }
    }

    #[test]
    fn param_count_formula() {
        assert_eq!(tiny().param_count(), (4 * 2 + 2) + (2 * 2 + 2) * 2 + (2 + 1));
        let full = HeadArch::full_scale();
        assert_eq!(full.param_count(), 384 * 256 + 256 + 2 * (256 * 256 + 256) + 257);
    }

    #[test]
    fn zero_params_give_zero_logit() {
        let p = PointHeadParams::zeros(tiny());
        assert_eq!(head_forward(&p, &[3.0, -1.0], &[0.2, 0.7]).unwrap(), 0.0);
    }

    #[test]
    fn free_init_is_zero_logit_but_not_zero() {
        let arch = HeadArch {
            feature_dim: 8,
            pe_dim: 16,
            hidden: [16; 3],
        };
        let p = PointHeadParams::init_free(arch, 7);
        assert!(p.flat.iter().any(|&v| v != 0.0));
        assert_eq!(head_forward(&p, &[1.0; 8], &[0.5; 16]).unwrap(), 0.0);
        assert_eq!(p, PointHeadParams::init_free(arch, 7));
    }

    #[test]
    fn hand_computed_forward() {
        // layer 1 picks feature 0 and pe 1, later layers pass through with
        // a bias, output sums hidden units
        let l1 = (vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], vec![0.0, -1.0]);
        let l2 = (vec![1.0, 0.0, 0.0, 1.0], vec![0.5, 0.0]);
        let l3 = (vec![2.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
        let l4 = (vec![1.0, -3.0], vec![0.25]);
        let p = PointHeadParams::pack(tiny(), &[l1, l2, l3, l4]).unwrap();
        // h1 = relu([2, 0.4 - 1]) = [2, 0]; h2 = [2.5, 0]; h3 = [5, 0]; out = 5.25
        assert_eq!(head_forward(&p, &[2.0, 9.0], &[9.0, 0.4]).unwrap(), 5.25);
        // h1 = relu([-1, 3 - 1]) = [0, 2]; h2 = [0.5, 2]; h3 = [1, 2]; out = 1 - 6 + 0.25
        assert_eq!(head_forward(&p, &[-1.0, 0.0], &[0.0, 3.0]).unwrap(), -4.75);
    }

    #[test]
    fn different_params_differ() {
        let arch = tiny();
        let a = PointHeadParams::from_flat(arch, (0..arch.param_count()).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let b = PointHeadParams::from_flat(arch, (0..arch.param_count()).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
        let (f, pe) = ([0.3, -0.2], [0.1, 0.9]);
        assert_ne!(head_forward(&a, &f, &pe).unwrap(), head_forward(&b, &f, &pe).unwrap());
    }

    #[test]
    fn dimension_errors() {
        let p = PointHeadParams::zeros(tiny());
        assert!(head_forward(&p, &[1.0], &[0.0, 0.0]).is_err());
        assert!(head_backward(&p, &[1.0, 2.0], &[0.0], 1.0).is_err());
        assert!(PointHeadParams::from_flat(tiny(), vec![0.0; 3]).is_err());
    }

    #[test]
    fn zero_upstream_zero_grad() {
        let arch = tiny();
        let p = PointHeadParams::from_flat(arch, (0..arch.param_count()).map(|i| 0.1 * i as f64 - 0.4).collect()).unwrap();
        let g = head_backward(&p, &[0.5, 1.5], &[-0.3, 0.2], 0.0).unwrap();
        assert!(g.params.iter().chain(&g.feature).all(|&v| v == 0.0));
    }

    #[test]
    fn encoding_examples() {
        let enc = FourierEncoding::new(4, 1.0, 3);
        let e = encode_position((0.0, 0.0), &enc);
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        let zero = FourierEncoding::from_matrix(vec![[0.0, 0.0]; 3]);
        assert_eq!(encode_position((0.3, -0.2), &zero), vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(FourierEncoding::new(4, 1.0, 3), enc);
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_param_loss(&[0.0; 5], 1e-5).0, 0.0);
        let (loss, grad) = l2_param_loss(&[1.0, 2.0], 1e-5);
        assert!((loss - 5e-5).abs() < 1e-20);
        assert_eq!(grad, vec![2e-5, 4e-5]);
    }

    #[test]
    fn feature_sampling() {
        let mut data = vec![0.0; 2 * 3 * 4];
        data[..12].iter_mut().for_each(|v| *v = 4.0);
        for (i, v) in data[12..].iter_mut().enumerate() {
            *v = i as f64;
        }
        let f = FeatureGrid::new(2, 4, 3, data).unwrap();
        // channel 1 is the plane 4 * row + col, reproduced exactly up to rounding
        let v = sample_point_features(&f, 1.7, 2.2);
        assert_eq!(v[0], 4.0);
        assert!((v[1] - 8.0).abs() < 1e-12);
        // pixel center (2, 1) -> exact channel values
        assert_eq!(sample_point_features(&f, 2.5, 1.5), vec![4.0, 6.0]);
    }

    #[test]
    fn pooled_linear_degenerate_when_a_zero() {
        let arch = tiny();
        let mut h = PooledLinearHead::new(arch, 3, 1);
        h.a.iter_mut().for_each(|v| *v = 0.0);
        let p1 = h.generate(&[1.0, 2.0, 3.0]).unwrap();
        let p2 = h.generate(&[-5.0, 0.0, 7.0]).unwrap();
        assert_eq!(p1, p2);
        assert!(h.generate(&[1.0]).is_err());
        let head = ParamHead::PooledLinear(h);
        assert!(head.params_for(None).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let arch = HeadArch {
            feature_dim: 2,
            pe_dim: 8,
            hidden: [3, 3, 3],
        };
        let p = PointHeadParams::init_free(arch, 2);
        let snap = HeadSnapshot::new(&p, CoordMode::Fourier { frequencies: 4, scale: 1.0, seed: 9 }, None);
        let mut buf = Vec::new();
        snap.write_binary(&mut buf).unwrap();
        let back = HeadSnapshot::read_binary(&buf[..]).unwrap();
        assert_eq!(back, snap);
        assert_eq!(back.head_params().unwrap(), p);

        let f = FeatureGrid::new(2, 3, 2, (0..12).map(|i| i as f64 * 0.5).collect()).unwrap();
        let b = BoundingBox::new(0.5, 0.0, 2.0, 1.5).unwrap();
        let mut buf = Vec::new();
        write_features(&f, Some(&b), &mut buf).unwrap();
        assert_eq!(read_features(&buf[..]).unwrap(), (f, Some(b)));
    }
}
