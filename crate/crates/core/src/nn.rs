//! Minimal convolutional machinery with hand-written backpropagation.
//!
//! Only what the two desk models need: 2-D convolutions (zero padding
//! `k/2`, output `floor(H/stride)`), ReLU, softplus, parameter collections
//! with seeded Glorot init, gradient clipping and JSON persistence.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{SeededRng, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Named tensors in a fixed (sorted) order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet(pub BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn get(&self, name: &str) -> &Tensor {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.0
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet(
            self.0
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape.clone())))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.values().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (name, t) in self.0.iter_mut() {
            for (a, b) in t.data.iter_mut().zip(&other.get(name).data) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0
            .values_mut()
            .flat_map(|t| t.data.iter_mut())
            .for_each(|v| *v *= s);
    }

    /// `self -= lr * grad`.
    pub fn descend(&mut self, grad: &ParamSet, lr: f64) {
        for (name, t) in self.0.iter_mut() {
            for (a, g) in t.data.iter_mut().zip(&grad.get(name).data) {
                *a -= lr * g;
            }
        }
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
    }

    /// Flat views over every scalar, in name order. Used by gradient checks.
    pub fn flat(&self) -> Vec<f64> {
        self.0.values().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn scalar_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in self.0.values_mut() {
            if index < t.data.len() {
                return &mut t.data[index];
            }
            index -= t.data.len();
        }
        panic!("parameter index out of range");
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
}

impl ConvSpec {
    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.stride, w / self.stride)
    }

    /// Output columns `ox` whose tap `kx` lands inside an input of width `w`.
    fn valid_range(&self, k: usize, w: usize, ow: usize) -> (usize, usize) {
        let pad = (self.kernel / 2) as isize;
        let s = self.stride as isize;
        let k = k as isize;
        let lo = if k >= pad { 0 } else { (pad - k + s - 1) / s };
        let hi_num = w as isize - 1 + pad - k;
        let hi = if hi_num < 0 { 0 } else { (hi_num / s + 1).min(ow as isize) };
        (lo as usize, hi.max(lo) as usize)
    }
}

/// Unrolls receptive fields into a `(in_ch*k*k) x (oh*ow)` matrix; taps that
/// fall in the zero padding stay zero.
fn im2col(spec: &ConvSpec, input: &Volume3D, oh: usize, ow: usize, cols: &mut Vec<f64>) {
    let (h, w) = (input.height(), input.width());
    let (k, s, pad) = (spec.kernel, spec.stride, spec.kernel / 2);
    cols.clear();
    cols.reserve(spec.in_ch * k * k * oh * ow);
    for ic in 0..spec.in_ch {
        let in_plane = input.plane(ic);
        for ky in 0..k {
            let (oy_lo, oy_hi) = spec.valid_range(ky, h, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = spec.valid_range(kx, w, ow);
                cols.resize(cols.len() + oy_lo * ow, 0.0);
                for oy in oy_lo..oy_hi {
                    cols.resize(cols.len() + ox_lo, 0.0);
                    if ox_hi > ox_lo {
                        let start = (oy * s + ky - pad) * w + ox_lo * s + kx - pad;
                        let src = &in_plane[start..start + (ox_hi - ox_lo - 1) * s + 1];
                        if s == 1 {
                            cols.extend_from_slice(src);
                        } else {
                            cols.extend(src.chunks(s).map(|c| c[0]));
                        }
                    }
                    cols.resize(cols.len() + ow - ox_hi, 0.0);
                }
                cols.resize(cols.len() + (oh - oy_hi) * ow, 0.0);
            }
        }
    }
}

thread_local! {
    // Column matrices run to megabytes; reusing them avoids a fresh mapping per call.
    static COLS: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static D_COLS: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Adjoint of [`im2col`].
fn col2im(spec: &ConvSpec, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Volume3D {
    let (k, s, pad) = (spec.kernel, spec.stride, spec.kernel / 2);
    let n = oh * ow;
    let mut out = Volume3D::zeros(spec.in_ch, h, w);
    for ic in 0..spec.in_ch {
        let plane = out.plane_mut(ic);
        for ky in 0..k {
            let (oy_lo, oy_hi) = spec.valid_range(ky, h, oh);
            for kx in 0..k {
                let (ox_lo, ox_hi) = spec.valid_range(kx, w, ow);
                let row = &cols[((ic * k + ky) * k + kx) * n..][..n];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - pad;
                    let src = &row[oy * ow + ox_lo..oy * ow + ox_hi];
                    let dst = plane[iy * w + ox_lo * s + kx - pad..(iy + 1) * w].iter_mut().step_by(s);
                    for (d, &v) in dst.zip(src) {
                        *d += v;
                    }
                }
            }
        }
    }
    out
}

/// `c = a * b + beta * c` over row-major buffers with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: all index ranges implied by the strides lie within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Convolution forward pass (pre-activation).
pub fn conv_forward(spec: &ConvSpec, input: &Volume3D, weight: &[f64], bias: &[f64]) -> Volume3D {
    debug_assert_eq!(input.channels(), spec.in_ch);
    let (oh, ow) = spec.out_dims(input.height(), input.width());
    let n = oh * ow;
    let p = spec.in_ch * spec.kernel * spec.kernel;
    let mut out = Volume3D::zeros(spec.out_ch, oh, ow);
    for (oc, &b) in bias.iter().enumerate().take(spec.out_ch) {
        out.plane_mut(oc).fill(b);
    }
    COLS.with_borrow_mut(|cols| {
        im2col(spec, input, oh, ow, cols);
        gemm(spec.out_ch, p, n, weight, (p, 1), cols, (n, 1), 1.0, out.values_mut());
    });
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn conv_backward(
    spec: &ConvSpec,
    input: &Volume3D,
    weight: &[f64],
    d_out: &Volume3D,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    want_input_grad: bool,
) -> Option<Volume3D> {
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = (d_out.height(), d_out.width());
    let n = oh * ow;
    let p = spec.in_ch * spec.kernel * spec.kernel;
    for (oc, g) in grad_b.iter_mut().enumerate().take(spec.out_ch) {
        *g += d_out.plane(oc).iter().sum::<f64>();
    }
    COLS.with_borrow_mut(|cols| {
        im2col(spec, input, oh, ow, cols);
        gemm(spec.out_ch, n, p, d_out.values(), (n, 1), cols, (1, n), 1.0, grad_w);
    });
    want_input_grad.then(|| {
        D_COLS.with_borrow_mut(|d_cols| {
            d_cols.clear();
            d_cols.resize(p * n, 0.0);
            gemm(p, spec.out_ch, n, weight, (1, p), d_out.values(), (n, 1), 0.0, d_cols);
            col2im(spec, d_cols, h, w, oh, ow)
        })
    })
}

/// A feed-forward chain of convolutions with optional ReLU after each.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub layers: Vec<ConvSpec>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StackCache {
    /// `inputs[i]` is the input of layer `i`.
    pub inputs: Vec<Volume3D>,
    /// Pre-activation output of every layer.
    pub pre: Vec<Volume3D>,
}

impl StackCache {
    pub fn output(&self) -> &Volume3D {
        self.pre.last().expect("non-empty stack")
    }
}

fn relu_in_place(v: &mut Volume3D) {
    v.values_mut().iter_mut().for_each(|x| *x = x.max(0.0));
}

impl ConvStack {
    /// Output of the final layer (after its ReLU, if any).
    pub fn forward(&self, params: &ParamSet, input: &Volume3D) -> Volume3D {
        let mut x: Option<Volume3D> = None;
        for layer in &self.layers {
            let mut y = conv_forward(
                layer,
                x.as_ref().unwrap_or(input),
                &params.get(&layer.weight_key()).data,
                &params.get(&layer.bias_key()).data,
            );
            if layer.relu {
                relu_in_place(&mut y);
            }
            x = Some(y);
        }
        x.unwrap_or_else(|| input.clone())
    }

    pub fn forward_cached(&self, params: &ParamSet, input: &Volume3D) -> StackCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let z = conv_forward(
                layer,
                &x,
                &params.get(&layer.weight_key()).data,
                &params.get(&layer.bias_key()).data,
            );
            inputs.push(x);
            x = z.clone();
            if layer.relu {
                relu_in_place(&mut x);
            }
            pre.push(z);
        }
        StackCache { inputs, pre }
    }

    /// Backpropagates `d_output` (gradient w.r.t. the post-activation
    /// output of the last layer). Returns the input gradient when asked.
    pub fn backward(
        &self,
        params: &ParamSet,
        cache: &StackCache,
        d_output: Volume3D,
        grads: &mut ParamSet,
        want_input_grad: bool,
    ) -> Option<Volume3D> {
        let mut d = d_output;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.relu {
                for (g, z) in d.values_mut().iter_mut().zip(cache.pre[i].values()) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let need = i > 0 || want_input_grad;
            let (wk, bk) = (layer.weight_key(), layer.bias_key());
            let mut gw = std::mem::take(&mut grads.get_mut(&wk).data);
            let mut gb = std::mem::take(&mut grads.get_mut(&bk).data);
            let d_in = conv_backward(
                layer,
                &cache.inputs[i],
                &params.get(&wk).data,
                &d,
                &mut gw,
                &mut gb,
                need,
            );
            grads.get_mut(&wk).data = gw;
            grads.get_mut(&bk).data = gb;
            {
                let next = d_in?;
                d = next
            }
        }
        Some(d)
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, params: &mut ParamSet, rng: &mut SeededRng) {
        for layer in &self.layers {
            let k2 = layer.kernel * layer.kernel;
            let fan_in = (layer.in_ch * k2) as f64;
            let fan_out = (layer.out_ch * k2) as f64;
            let a = (6.0 / (fan_in + fan_out)).sqrt();
            let n = layer.out_ch * layer.in_ch * k2;
            let weight: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
            params.0.insert(
                layer.weight_key(),
                Tensor {
                    shape: vec![layer.out_ch, layer.in_ch, layer.kernel, layer.kernel],
                    data: weight,
                },
            );
            params
                .0
                .insert(layer.bias_key(), Tensor::zeros(vec![layer.out_ch]));
        }
    }
}

/// Number of stride-2 stages for a downsampling ratio (power of two, >= 2).
pub fn downsampling_stages(r: usize) -> Result<usize> {
    if r < 2 || !r.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "downsampling ratio must be a power of two >= 2, got {r}"
        )));
    }
    Ok(r.trailing_zeros() as usize)
}

/// `conv3x3(3->d, /2) -> ReLU -> ... -> conv3x3(d->d, /2)`; no final ReLU.
pub fn extractor_stack(prefix: &str, r: usize, d: usize) -> Result<ConvStack> {
    let stages = downsampling_stages(r)?;
    if d == 0 {
        return Err(Error::InvalidArgument("feature channels must be positive".into()));
    }
    let layers = (0..stages)
        .map(|i| ConvSpec {
            name: format!("{prefix}.conv{i}"),
            in_ch: if i == 0 { 3 } else { d },
            out_ch: d,
            kernel: 3,
            stride: 2,
            relu: i + 1 < stages,
        })
        .collect();
    Ok(ConvStack { layers })
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Fixed-step gradient descent.
    Sgd,
    /// Adam (beta1 0.9, beta2 0.999, eps 1e-8), no weight decay.
    Adam,
}

/// Optimizer state; steps are applied after gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: ParamSet,
    second: ParamSet,
    steps: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, params: &ParamSet) -> Self {
        Self {
            kind,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet, lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => params.descend(grad, lr),
            OptimizerKind::Adam => {
                self.steps += 1;
                let c1 = 1.0 - Self::BETA1.powi(self.steps);
                let c2 = 1.0 - Self::BETA2.powi(self.steps);
                for (name, p) in params.0.iter_mut() {
                    let g = &grad.get(name).data;
                    let m = &mut self.first.get_mut(name).data;
                    let v = &mut self.second.get_mut(name).data;
                    for i in 0..p.data.len() {
                        m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                        v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                        p.data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

/// Settings shared by both trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCfg {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 3e-3,
            batch: 4,
            seed: 0,
            clip_norm: 10.0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainCfg {
    pub fn check(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument("epochs and batch must be >= 1".into()));
        }
        if self.lr.is_nan() || self.lr < 0.0 || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::InvalidArgument("lr must be >= 0 and clip_norm > 0".into()));
        }
        Ok(())
    }
}

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub kind: String,
    pub r: usize,
    pub d: usize,
    pub params: ParamSet,
    pub history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fingerprint: Option<String>,
}

impl ModelFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // serde_json writes the shortest decimal that parses back to the same f64.
        let text = serde_json::to_string(self).expect("model serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected_kind: &str) -> Result<ModelFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = path.display().to_string();
        let m: ModelFile = crate::scene::parse_json(&text, &file)?;
        if m.version != MODEL_VERSION {
            return Err(Error::parse(file, "version", 0, format!("unsupported version {}", m.version)));
        }
        if m.kind != expected_kind {
            return Err(Error::parse(
                file,
                "kind",
                0,
                format!("expected {expected_kind}, found {}", m.kind),
            ));
        }
        for (name, t) in &m.params.0 {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::parse(file, format!("params.{name}"), 0, "shape/data length mismatch"));
            }
        }
        Ok(m)
    }
}
