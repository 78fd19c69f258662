//! Fully connected `tanh` network `c(x, t)` with exact input derivatives and
//! reverse-mode parameter gradients.
//!
//! Input derivatives use Taylor-mode propagation. Every point carries eight
//! channels through the network: the value, first directional derivatives
//! along `x`, `y`, `z` and `t`, and second directional derivatives along the
//! three spatial axes. Affine layers act linearly on derivative channels;
//! `tanh` maps `(u, u', u'')` to `(phi, phi' u', phi'' u'^2 + phi' u'')`.
//! The input layer seeds the derivative channels with the normalization
//! scale factors, so outputs are in physical units.
//!
//! Parameter gradients run reverse mode over the recorded layer tape of that
//! augmented forward pass.

use std::cell::RefCell;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{linalg::general_mat_mul, ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{BoundingBox, SamplePoint};
use crate::pinn::DiffusionParam;

pub const INPUT_DIM: usize = 4;
pub const OUTPUT_DIM: usize = 1;

/// Points processed per tape chunk. Gradients are summed chunk by chunk in
/// index order, so results do not depend on the thread count.
pub const CHUNK: usize = 256;

const CH_VALUE: usize = 0;
const CH_FIRST: [usize; 4] = [1, 2, 3, 4];
const CH_T: usize = 4;
const CH_SECOND: [usize; 3] = [5, 6, 7];
const N_CHANNELS: usize = 8;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite gradient in {term} term")]
    NonFiniteGradient { term: &'static str },
    #[error("empty {0} batch")]
    EmptyBatch(&'static str),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden_layers: usize,
    pub width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 9,
            width: 64,
        }
    }
}

impl NetworkConfig {
    pub fn param_count(&self) -> usize {
        param_count(INPUT_DIM, self.hidden_layers, self.width, OUTPUT_DIM)
    }

    fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.width == 0 {
            return Err(NetError::InvalidConfig(format!(
                "{} hidden layers of width {}",
                self.hidden_layers, self.width
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(INPUT_DIM, self.width)];
        shapes.extend((1..self.hidden_layers).map(|_| (self.width, self.width)));
        shapes.push((self.width, OUTPUT_DIM));
        shapes
    }
}

/// Number of weights and biases of a network with `hidden` layers of `width`.
pub fn param_count(input: usize, hidden: usize, width: usize, output: usize) -> usize {
    (input + 1) * width + hidden.saturating_sub(1) * (width + 1) * width + (width + 1) * output
}

/// Fixed affine map of `(x, t)` onto `[-1, 1]^4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNormalization {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
    pub t_final: f64,
}

impl InputNormalization {
    pub fn new(bbox: BoundingBox, t_final: f64) -> Self {
        Self {
            lower: bbox.lower,
            upper: bbox.upper,
            t_final,
        }
    }

    /// Derivative of each normalized coordinate with respect to its physical one.
    pub fn scales(&self) -> [f64; 4] {
        [
            2.0 / (self.upper[0] - self.lower[0]),
            2.0 / (self.upper[1] - self.lower[1]),
            2.0 / (self.upper[2] - self.lower[2]),
            2.0 / self.t_final,
        ]
    }

    pub fn normalize(&self, x: &[f64; 3], t: f64) -> [f64; 4] {
        let mut z = [0.0; 4];
        for a in 0..3 {
            z[a] = 2.0 * (x[a] - self.lower[a]) / (self.upper[a] - self.lower[a]) - 1.0;
        }
        z[3] = 2.0 * t / self.t_final - 1.0;
        z
    }

    pub fn denormalize(&self, z: &[f64; 4]) -> ([f64; 3], f64) {
        let mut x = [0.0; 3];
        for a in 0..3 {
            x[a] = self.lower[a] + (z[a] + 1.0) * 0.5 * (self.upper[a] - self.lower[a]);
        }
        (x, (z[3] + 1.0) * 0.5 * self.t_final)
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerSlot {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let b = self.offset + self.fan_in * self.fan_out;
        b..b + self.fan_out
    }
}

fn layout(config: &NetworkConfig) -> Vec<LayerSlot> {
    let mut offset = 0;
    config
        .layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let slot = LayerSlot {
                fan_in,
                fan_out,
                offset,
            };
            offset += (fan_in + 1) * fan_out;
            slot
        })
        .collect()
}

/// Network weights stored as one flat vector: per layer the row-major
/// `fan_out x fan_in` weight matrix followed by the bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    config: NetworkConfig,
    normalization: InputNormalization,
    values: Vec<f64>,
}

/// Glorot-uniform weights and zero biases.
pub fn init_glorot(
    config: NetworkConfig,
    normalization: InputNormalization,
    seed: u64,
) -> Result<MlpParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; config.param_count()];
    for slot in layout(&config) {
        let bound = glorot_bound(slot.fan_in, slot.fan_out);
        for w in &mut values[slot.weights()] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(MlpParams {
        config,
        normalization,
        values,
    })
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl MlpParams {
    pub fn from_values(
        config: NetworkConfig,
        normalization: InputNormalization,
        values: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        if values.len() != config.param_count() {
            return Err(NetError::InvalidConfig(format!(
                "{} parameters for a network needing {}",
                values.len(),
                config.param_count()
            )));
        }
        Ok(Self {
            config,
            normalization,
            values,
        })
    }

    pub fn config(&self) -> NetworkConfig {
        self.config
    }

    pub fn normalization(&self) -> &InputNormalization {
        &self.normalization
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Weight matrix (`fan_out x fan_in`) of affine layer `l`.
    pub fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let slot = layout(&self.config)[l];
        ArrayView2::from_shape((slot.fan_out, slot.fan_in), &self.values[slot.weights()])
            .expect("layout")
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let slot = layout(&self.config)[l];
        &self.values[slot.bias()]
    }

    pub fn weights_mut(&mut self, l: usize) -> ArrayViewMut2<'_, f64> {
        let slot = layout(&self.config)[l];
        ArrayViewMut2::from_shape((slot.fan_out, slot.fan_in), &mut self.values[slot.weights()])
            .expect("layout")
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let slot = layout(&self.config)[l];
        &mut self.values[slot.bias()]
    }

    pub fn n_layers(&self) -> usize {
        self.config.hidden_layers + 1
    }
}

/// Network value, time derivative (per hour) and spatial Laplacian (per mm^2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivBundle {
    pub value: f64,
    pub dt: f64,
    pub laplacian: f64,
}

impl DerivBundle {
    pub fn residual(&self, diffusion: f64) -> f64 {
        self.dt - diffusion * self.laplacian
    }
}

/// Forward record and scratch space for one chunk. Rows are laid out
/// channel-major (`channel * n + point`). Buffers are reused across chunks on
/// the same thread.
#[derive(Default)]
struct Tape {
    n: usize,
    channels: usize,
    /// Input of every affine layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every affine layer; the last one is the output.
    pre: Vec<Vec<f64>>,
    abar: Vec<f64>,
    abar_next: Vec<f64>,
    hbar: Vec<f64>,
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

fn with_tape<R>(f: impl FnOnce(&mut Tape) -> R) -> R {
    TAPE.with(|t| f(&mut t.borrow_mut()))
}

impl Tape {
    fn rows(&self) -> usize {
        self.n * self.channels
    }

    fn output(&self) -> &[f64] {
        let last = self.pre.len() - 1;
        &self.pre[last][..self.rows()]
    }

    /// Output adjoint buffer, zeroed.
    fn seed_adjoint(&mut self) -> &mut [f64] {
        let rows = self.rows();
        self.abar.clear();
        self.abar.resize(rows, 0.0);
        &mut self.abar
    }
}

fn fill_inputs(h: &mut Vec<f64>, norm: &InputNormalization, points: &[SamplePoint], deriv: bool) {
    let n = points.len();
    let channels = if deriv { N_CHANNELS } else { 1 };
    h.clear();
    h.resize(channels * n * INPUT_DIM, 0.0);
    for (p, pt) in points.iter().enumerate() {
        let z = norm.normalize(&pt.x, pt.t);
        h[p * INPUT_DIM..(p + 1) * INPUT_DIM].copy_from_slice(&z);
    }
    if deriv {
        let s = norm.scales();
        for (axis, &ch) in CH_FIRST.iter().enumerate() {
            for p in 0..n {
                h[(ch * n + p) * INPUT_DIM + axis] = s[axis];
            }
        }
    }
}

/// Applies `tanh` with Taylor-mode derivative propagation to `a`.
fn taylor_tanh(a: &[f64], h: &mut [f64], n: usize, width: usize, channels: usize) {
    let row = |ch: usize, p: usize| (ch * n + p) * width;
    for p in 0..n {
        for j in 0..width {
            let a0 = a[row(CH_VALUE, p) + j];
            let phi = a0.tanh();
            let d1 = 1.0 - phi * phi;
            h[row(CH_VALUE, p) + j] = phi;
            if channels == 1 {
                continue;
            }
            let d2 = -2.0 * phi * d1;
            for &ch in &CH_FIRST {
                h[row(ch, p) + j] = d1 * a[row(ch, p) + j];
            }
            for k in 0..3 {
                let f = a[row(CH_FIRST[k], p) + j];
                let s = a[row(CH_SECOND[k], p) + j];
                h[row(CH_SECOND[k], p) + j] = d2 * f * f + d1 * s;
            }
        }
    }
}

/// Reverse of [`taylor_tanh`]: maps the output adjoint `hbar` to the
/// pre-activation adjoint `abar`, given the pre-activation `a` and output `h`.
fn taylor_tanh_backward(
    a: &[f64],
    h: &[f64],
    hbar: &[f64],
    abar: &mut [f64],
    n: usize,
    width: usize,
    channels: usize,
) {
    let row = |ch: usize, p: usize| (ch * n + p) * width;
    for p in 0..n {
        for j in 0..width {
            let iv = row(CH_VALUE, p) + j;
            let phi = h[iv];
            let d1 = 1.0 - phi * phi;
            let mut acc = hbar[iv] * d1;
            if channels > 1 {
                let d2 = -2.0 * phi * d1;
                let d3 = -2.0 * d1 * d1 + 4.0 * phi * phi * d1;
                let it = row(CH_T, p) + j;
                acc += hbar[it] * d2 * a[it];
                abar[it] = hbar[it] * d1;
                for k in 0..3 {
                    let i_f = row(CH_FIRST[k], p) + j;
                    let i_s = row(CH_SECOND[k], p) + j;
                    let (f, s) = (a[i_f], a[i_s]);
                    let (gf, gs) = (hbar[i_f], hbar[i_s]);
                    acc += gf * d2 * f + gs * (d3 * f * f + d2 * s);
                    abar[i_f] = gf * d1 + gs * 2.0 * d2 * f;
                    abar[i_s] = gs * d1;
                }
            }
            abar[iv] = acc;
        }
    }
}

fn forward(params: &MlpParams, points: &[SamplePoint], deriv: bool, tape: &mut Tape) {
    let n = points.len();
    let channels = if deriv { N_CHANNELS } else { 1 };
    let rows = n * channels;
    let slots = layout(&params.config);
    tape.n = n;
    tape.channels = channels;
    tape.inputs.resize_with(slots.len(), Vec::new);
    tape.pre.resize_with(slots.len(), Vec::new);
    fill_inputs(&mut tape.inputs[0], &params.normalization, points, deriv);
    for (l, slot) in slots.iter().enumerate() {
        let pre = &mut tape.pre[l];
        pre.resize(rows * slot.fan_out, 0.0);
        {
            let h = ArrayView2::from_shape((rows, slot.fan_in), &tape.inputs[l][..rows * slot.fan_in])
                .expect("layout");
            let mut a = ArrayViewMut2::from_shape((rows, slot.fan_out), &mut pre[..rows * slot.fan_out])
                .expect("layout");
            general_mat_mul(1.0, &h, &params.weights(l).t(), 0.0, &mut a);
        }
        let b = &params.values[slot.bias()];
        for p in 0..n {
            for (v, bj) in pre[p * slot.fan_out..(p + 1) * slot.fan_out].iter_mut().zip(b) {
                *v += bj;
            }
        }
        if l + 1 < slots.len() {
            let next = &mut tape.inputs[l + 1];
            next.resize(rows * slot.fan_out, 0.0);
            taylor_tanh(&tape.pre[l], next, n, slot.fan_out, channels);
        }
    }
}

/// Reverse sweep from the adjoint in `tape.abar`; accumulates into `grad`.
fn backward(params: &MlpParams, tape: &mut Tape, grad: &mut [f64]) {
    let slots = layout(&params.config);
    let (n, channels, rows) = (tape.n, tape.channels, tape.rows());
    for l in (0..slots.len()).rev() {
        let slot = slots[l];
        let h_in = ArrayView2::from_shape((rows, slot.fan_in), &tape.inputs[l][..rows * slot.fan_in])
            .expect("layout");
        let abar = ArrayView2::from_shape((rows, slot.fan_out), &tape.abar[..rows * slot.fan_out])
            .expect("layout");
        {
            let mut dw = ArrayViewMut2::from_shape((slot.fan_out, slot.fan_in), &mut grad[slot.weights()])
                .expect("layout");
            general_mat_mul(1.0, &abar.t(), &h_in, 1.0, &mut dw);
        }
        let db = &mut grad[slot.bias()];
        for p in 0..n {
            for (d, a) in db.iter_mut().zip(&tape.abar[p * slot.fan_out..(p + 1) * slot.fan_out]) {
                *d += a;
            }
        }
        if l == 0 {
            break;
        }
        tape.hbar.resize(rows * slot.fan_in, 0.0);
        {
            let mut hbar = ArrayViewMut2::from_shape((rows, slot.fan_in), &mut tape.hbar[..rows * slot.fan_in])
                .expect("layout");
            general_mat_mul(1.0, &abar, &params.weights(l), 0.0, &mut hbar);
        }
        tape.abar_next.resize(rows * slot.fan_in, 0.0);
        taylor_tanh_backward(
            &tape.pre[l - 1],
            &tape.inputs[l],
            &tape.hbar,
            &mut tape.abar_next,
            n,
            slot.fan_in,
            channels,
        );
        std::mem::swap(&mut tape.abar, &mut tape.abar_next);
    }
}

fn bundles_from_output(out: &[f64], n: usize) -> Vec<DerivBundle> {
    (0..n)
        .map(|p| DerivBundle {
            value: out[p],
            dt: out[CH_T * n + p],
            laplacian: CH_SECOND.iter().map(|&ch| out[ch * n + p]).sum(),
        })
        .collect()
}

/// Exact value, time derivative and Laplacian at a physical point.
pub fn forward_with_derivs(params: &MlpParams, point: &SamplePoint) -> DerivBundle {
    eval_derivs(params, std::slice::from_ref(point))[0]
}

/// [`forward_with_derivs`] over many points.
pub fn eval_derivs(params: &MlpParams, points: &[SamplePoint]) -> Vec<DerivBundle> {
    points
        .par_chunks(CHUNK)
        .map(|chunk| {
            with_tape(|tape| {
                forward(params, chunk, true, tape);
                bundles_from_output(tape.output(), chunk.len())
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Network values only.
pub fn eval_values(params: &MlpParams, points: &[SamplePoint]) -> Vec<f64> {
    points
        .par_chunks(CHUNK)
        .map(|chunk| {
            with_tape(|tape| {
                forward(params, chunk, false, tape);
                tape.output().to_vec()
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// A measured concentration at a space-time location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub point: SamplePoint,
    pub value: f64,
}

/// Weighting of the minibatch loss `data + pde_weight * mean |r|^exponent`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pde_weight: f64,
    pub exponent: f64,
}

/// Loss split into its two terms; `total = data + pde_weight * pde`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub data: f64,
    pub pde: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub delta: f64,
    pub terms: LossTerms,
}

/// `d|r|^p / dr`.
#[inline]
pub fn residual_power_derivative(r: f64, p: f64) -> f64 {
    if r == 0.0 {
        return 0.0;
    }
    if p == 1.0 {
        r.signum()
    } else if p == 2.0 {
        2.0 * r
    } else {
        p * r.abs().powf(p - 1.0) * r.signum()
    }
}

#[inline]
pub fn residual_power(r: f64, p: f64) -> f64 {
    if p == 1.0 {
        r.abs()
    } else if p == 2.0 {
        r * r
    } else {
        r.abs().powf(p)
    }
}

/// Exact gradient of the minibatch loss with respect to every network
/// parameter and the diffusion parameter `delta`.
///
/// The data term is the mean squared misfit over `data`; the PDE term is the
/// mean of `|dt c - D lap c|^p` over `pde` (skipped when its weight is zero).
pub fn grad_params(
    params: &MlpParams,
    diffusion: &DiffusionParam,
    data: &[Observation],
    pde: &[SamplePoint],
    weights: LossWeights,
) -> Result<Gradients> {
    if data.is_empty() {
        return Err(NetError::EmptyBatch("data"));
    }
    let use_pde = weights.pde_weight != 0.0;
    if use_pde && pde.is_empty() {
        return Err(NetError::EmptyBatch("pde"));
    }
    let d = diffusion.value();
    let n_params = params.len();

    let inv_nd = 1.0 / data.len() as f64;
    let data_parts: Vec<(Vec<f64>, f64)> = data
        .par_chunks(CHUNK)
        .map(|chunk| {
            let pts: Vec<SamplePoint> = chunk.iter().map(|o| o.point).collect();
            let mut g = vec![0.0; n_params];
            let mut loss = 0.0;
            with_tape(|tape| {
                forward(params, &pts, false, tape);
                let out = tape.output().to_vec();
                let bar = tape.seed_adjoint();
                for (p, obs) in chunk.iter().enumerate() {
                    let e = out[p] - obs.value;
                    loss += e * e;
                    bar[p] = 2.0 * e * inv_nd;
                }
                backward(params, tape, &mut g);
            });
            (g, loss * inv_nd)
        })
        .collect();

    let mut grad = vec![0.0; n_params];
    let mut data_loss = 0.0;
    for (g, l) in &data_parts {
        data_loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    if !data_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(NetError::NonFiniteGradient { term: "data" });
    }

    let mut pde_loss = 0.0;
    let mut d_grad = 0.0;
    if use_pde {
        let scale = weights.pde_weight / pde.len() as f64;
        let p_exp = weights.exponent;
        let pde_parts: Vec<(Vec<f64>, f64, f64)> = pde
            .par_chunks(CHUNK)
            .map(|chunk| {
                let n = chunk.len();
                let mut g = vec![0.0; n_params];
                let (mut loss, mut dd) = (0.0, 0.0);
                with_tape(|tape| {
                    forward(params, chunk, true, tape);
                    let bundles = bundles_from_output(tape.output(), n);
                    let bar = tape.seed_adjoint();
                    for (p, b) in bundles.iter().enumerate() {
                        let r = b.residual(d);
                        loss += residual_power(r, p_exp);
                        let rbar = scale * residual_power_derivative(r, p_exp);
                        bar[CH_T * n + p] = rbar;
                        for &ch in &CH_SECOND {
                            bar[ch * n + p] = -d * rbar;
                        }
                        dd -= rbar * b.laplacian;
                    }
                    backward(params, tape, &mut g);
                });
                (g, loss, dd)
            })
            .collect();
        for (g, l, dd) in &pde_parts {
            pde_loss += l;
            d_grad += dd;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        pde_loss /= pde.len() as f64;
        if !pde_loss.is_finite() || !d_grad.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteGradient { term: "pde" });
        }
    }

    let delta = d_grad * diffusion.derivative();
    if !delta.is_finite() {
        return Err(NetError::NonFiniteGradient { term: "pde" });
    }
    Ok(Gradients {
        params: grad,
        delta,
        terms: LossTerms {
            data: data_loss,
            pde: pde_loss,
            total: data_loss + weights.pde_weight * pde_loss,
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: NetworkConfig,
    seed: u64,
    epoch: usize,
    delta: f64,
    diffusion: DiffusionParam,
    normalization: InputNormalization,
}

/// Network weights plus the training state needed to resume or report.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub diffusion: DiffusionParam,
    pub seed: u64,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let header = CheckpointHeader {
            config: self.params.config,
            seed: self.seed,
            epoch: self.epoch,
            delta: self.diffusion.delta,
            diffusion: self.diffusion,
            normalization: self.params.normalization,
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for v in &self.params.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl BufRead) -> Result<Self> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        let mut blob = Vec::new();
        r.read_to_end(&mut blob)?;
        let expected = 8 * header.config.param_count();
        if blob.len() != expected {
            return Err(NetError::Checkpoint(format!(
                "parameter blob has {} bytes, expected {expected}",
                blob.len()
            )));
        }
        let values = blob
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let mut diffusion = header.diffusion;
        diffusion.delta = header.delta;
        Ok(Self {
            params: MlpParams::from_values(header.config, header.normalization, values)?,
            diffusion,
            seed: header.seed,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut BufReader::new(File::open(path)?))
    }
}
