//! PINN training: loss assembly, diffusion-coefficient parameterization,
//! minibatch ADAM with learning-rate decay, and residual-based refinement of
//! the collocation set.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{sample_pde_points, Domain, GridError, SamplePoint, SnapshotSeries};
use crate::net::{
    eval_derivs, eval_values, grad_params, residual_power, LossWeights, MlpParams, NetError,
    Observation,
};

#[derive(Debug, Error)]
pub enum PinnError {
    #[error("training aborted at epoch {epoch}: {source}")]
    NonFinite {
        epoch: usize,
        #[source]
        source: NetError,
    },
    #[error("empty {0} batch")]
    EmptyBatch(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("refinement asks for {m} points but only {available} are available")]
    RefinementSize { m: usize, available: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, PinnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMode {
    /// `D = D_min + sigmoid(delta) * D_max`.
    Bounded,
    /// `D = delta`.
    Identity,
}

/// Trainable diffusion coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionParam {
    pub mode: DiffusionMode,
    pub delta: f64,
    pub d_min: f64,
    pub d_max: f64,
}

pub const D_MIN: f64 = 0.1;
pub const D_MAX: f64 = 1.2;

impl Default for DiffusionParam {
    fn default() -> Self {
        Self::bounded(0.0)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl DiffusionParam {
    pub fn bounded(delta: f64) -> Self {
        Self {
            mode: DiffusionMode::Bounded,
            delta,
            d_min: D_MIN,
            d_max: D_MAX,
        }
    }

    pub fn identity(delta: f64) -> Self {
        Self {
            mode: DiffusionMode::Identity,
            delta,
            d_min: D_MIN,
            d_max: D_MAX,
        }
    }

    /// Starting point for a mode: `delta = 0` when bounded, and the same
    /// initial coefficient `D_min + D_max / 2` when unbounded.
    pub fn initial(mode: DiffusionMode) -> Self {
        match mode {
            DiffusionMode::Bounded => Self::bounded(0.0),
            DiffusionMode::Identity => Self::identity(D_MIN + 0.5 * D_MAX),
        }
    }

    /// Parameter giving coefficient `d`; `None` outside the bounded range.
    pub fn with_value(mode: DiffusionMode, d: f64) -> Option<Self> {
        match mode {
            DiffusionMode::Identity => Some(Self::identity(d)),
            DiffusionMode::Bounded => {
                let s = (d - D_MIN) / D_MAX;
                (s > 0.0 && s < 1.0).then(|| Self::bounded((s / (1.0 - s)).ln()))
            }
        }
    }

    pub fn value(&self) -> f64 {
        d_from_delta(self)
    }

    /// `dD / d delta`.
    pub fn derivative(&self) -> f64 {
        match self.mode {
            DiffusionMode::Bounded => {
                let s = sigmoid(self.delta);
                s * (1.0 - s) * self.d_max
            }
            DiffusionMode::Identity => 1.0,
        }
    }
}

/// Diffusion coefficient (mm^2/h) for the current `delta`.
pub fn d_from_delta(dp: &DiffusionParam) -> f64 {
    match dp.mode {
        DiffusionMode::Bounded => dp.d_min + sigmoid(dp.delta) * dp.d_max,
        DiffusionMode::Identity => dp.delta,
    }
}

/// PDE-loss weight and residual exponent, optionally switching `p = 2 -> 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub pde_weight: f64,
    pub exponent: u32,
    #[serde(default)]
    pub switch_epoch: Option<usize>,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self::new(1.0, 2)
    }
}

impl LossSpec {
    pub fn new(pde_weight: f64, exponent: u32) -> Self {
        Self {
            pde_weight,
            exponent,
            switch_epoch: None,
        }
    }

    /// `p = 2` for the first half of `epochs`, `p = 1` afterwards.
    pub fn switching(pde_weight: f64, epochs: usize) -> Self {
        Self {
            pde_weight,
            exponent: 2,
            switch_epoch: Some(epochs / 2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.exponent == 1 || self.exponent == 2) {
            return Err(PinnError::InvalidConfig(format!(
                "exponent must be 1 or 2, got {}",
                self.exponent
            )));
        }
        if self.switch_epoch.is_some() && self.exponent != 2 {
            return Err(PinnError::InvalidConfig(
                "an exponent switch starts from p = 2".into(),
            ));
        }
        if !(self.pde_weight.is_finite() && self.pde_weight >= 0.0) {
            return Err(PinnError::InvalidConfig(format!(
                "pde weight {}",
                self.pde_weight
            )));
        }
        Ok(())
    }

    pub fn exponent_at(&self, epoch: usize) -> u32 {
        match self.switch_epoch {
            Some(s) if epoch >= s => 1,
            _ => self.exponent,
        }
    }

    pub fn weights_at(&self, epoch: usize) -> LossWeights {
        LossWeights {
            pde_weight: self.pde_weight,
            exponent: f64::from(self.exponent_at(epoch)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant { rate: f64 },
    /// Geometric interpolation from `start` at epoch 0 to `end` at the last epoch.
    Exponential { start: f64, end: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| r.is_finite() && r > 0.0;
        let valid = match *self {
            LrSchedule::Constant { rate } => ok(rate),
            LrSchedule::Exponential { start, end } => ok(start) && ok(end),
        };
        if valid {
            Ok(())
        } else {
            Err(PinnError::InvalidConfig(format!("learning rate {self:?}")))
        }
    }
}

/// Learning rate at `epoch` of `epochs`.
pub fn lr_at(schedule: &LrSchedule, epoch: usize, epochs: usize) -> f64 {
    match *schedule {
        LrSchedule::Constant { rate } => rate,
        LrSchedule::Exponential { start, end } => {
            if epochs == 0 {
                return start;
            }
            start * (end / start).powf(epoch as f64 / epochs as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Refinement {
    None,
    /// Adds the `add` highest-residual of `candidates` fresh samples at every checkpoint.
    Rar {
        checkpoints: Vec<usize>,
        add: usize,
        candidates: Option<usize>,
    },
    /// As RAR, and also drops the `add` lowest-residual existing points.
    Rae {
        checkpoints: Vec<usize>,
        add: usize,
        candidates: Option<usize>,
    },
}

impl Refinement {
    fn parts(&self) -> Option<(&[usize], usize, usize)> {
        match self {
            Refinement::None => None,
            Refinement::Rar {
                checkpoints,
                add,
                candidates,
            }
            | Refinement::Rae {
                checkpoints,
                add,
                candidates,
            } => Some((checkpoints, *add, candidates.unwrap_or(10 * add))),
        }
    }
}

/// `count` checkpoints evenly spaced over `epochs`, excluding epoch 0.
pub fn even_checkpoints(epochs: usize, count: usize) -> Vec<usize> {
    (1..=count).map(|i| i * epochs / (count + 1)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub data_batch: usize,
    pub pde_batch: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub refinement: Refinement,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_batch == 0 || self.pde_batch == 0 {
            return Err(PinnError::InvalidConfig("batch sizes must be >= 1".into()));
        }
        self.schedule.validate()?;
        if let Some((cps, _, _)) = self.refinement.parts() {
            if cps.windows(2).any(|w| w[1] <= w[0]) {
                return Err(PinnError::InvalidConfig(
                    "refinement checkpoints must be strictly increasing".into(),
                ));
            }
            if cps.last().is_some_and(|&c| c >= self.epochs) {
                return Err(PinnError::InvalidConfig(
                    "refinement checkpoints must precede the last epoch".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Number of subsets of size at most `batch` covering `n` items.
pub fn batch_count(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Standard bias-corrected ADAM.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NetError::NonFiniteGradient { term: "adam" }.into());
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Every `(voxel center, t_i, c^d)` triple of a series.
pub fn observations(domain: &Domain, series: &SnapshotSeries) -> Vec<Observation> {
    let mut out = Vec::with_capacity(series.timepoints().len() * domain.n_occupied());
    for (ti, &t) in series.timepoints().iter().enumerate() {
        for (occ, &value) in series.snapshot(ti).iter().enumerate() {
            out.push(Observation {
                point: SamplePoint {
                    x: domain.center(occ),
                    t,
                },
                value,
            });
        }
    }
    out
}

/// Mean squared misfit over a batch of observations.
pub fn data_loss(params: &MlpParams, batch: &[Observation]) -> Result<f64> {
    if batch.is_empty() {
        return Err(PinnError::EmptyBatch("data"));
    }
    let pts: Vec<SamplePoint> = batch.iter().map(|o| o.point).collect();
    let vals = eval_values(params, &pts);
    let sum: f64 = vals
        .iter()
        .zip(batch)
        .map(|(c, o)| (c - o.value).powi(2))
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Mean of `|dt c - D lap c|^p` over a batch of collocation points.
pub fn pde_loss(
    params: &MlpParams,
    diffusion: &DiffusionParam,
    batch: &[SamplePoint],
    exponent: u32,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(PinnError::EmptyBatch("pde"));
    }
    let d = diffusion.value();
    let sum: f64 = residuals(params, d, batch)
        .into_iter()
        .map(|r| residual_power(r, f64::from(exponent)))
        .sum();
    Ok(sum / batch.len() as f64)
}

/// Signed PDE residuals at `points`.
pub fn residuals(params: &MlpParams, diffusion: f64, points: &[SamplePoint]) -> Vec<f64> {
    eval_derivs(params, points)
        .into_iter()
        .map(|b| b.residual(diffusion))
        .collect()
}

fn top_by_residual(
    candidates: Vec<SamplePoint>,
    residual: &dyn Fn(&[SamplePoint]) -> Vec<f64>,
    m: usize,
) -> Vec<SamplePoint> {
    let r = residual(&candidates);
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| r[b].abs().total_cmp(&r[a].abs()));
    order.truncate(m);
    order.into_iter().map(|i| candidates[i]).collect()
}

/// Residual-based adaptive refinement: appends the `m` candidates with the
/// largest `|r|`, so the set grows by exactly `m`.
pub fn rar_refine(
    points: Vec<SamplePoint>,
    candidates: Vec<SamplePoint>,
    residual: &dyn Fn(&[SamplePoint]) -> Vec<f64>,
    m: usize,
) -> Result<Vec<SamplePoint>> {
    if m > candidates.len() {
        return Err(PinnError::RefinementSize {
            m,
            available: candidates.len(),
        });
    }
    if m == 0 {
        return Ok(points);
    }
    let mut out = points;
    out.extend(top_by_residual(candidates, residual, m));
    Ok(out)
}

/// Residual-based adaptive exchange: keeps the `|P| - m` existing points of
/// smallest `|r|` and adds the `m` candidates of largest `|r|`, so `|P|` is
/// unchanged.
pub fn rae_refine(
    points: Vec<SamplePoint>,
    candidates: Vec<SamplePoint>,
    residual: &dyn Fn(&[SamplePoint]) -> Vec<f64>,
    m: usize,
) -> Result<Vec<SamplePoint>> {
    if m > candidates.len() {
        return Err(PinnError::RefinementSize {
            m,
            available: candidates.len(),
        });
    }
    if m > points.len() {
        return Err(PinnError::RefinementSize {
            m,
            available: points.len(),
        });
    }
    if m == 0 {
        return Ok(points);
    }
    let added = top_by_residual(candidates, residual, m);
    let r = residual(&points);
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| r[a].abs().total_cmp(&r[b].abs()));
    order.truncate(points.len() - m);
    let mut out: Vec<SamplePoint> = order.into_iter().map(|i| points[i]).collect();
    out.extend(added);
    Ok(out)
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub data_loss: f64,
    pub pde_loss: f64,
    pub diffusion: f64,
    pub n_pde: usize,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,lr,data_loss,pde_loss,D,n_pde";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{},{}",
            self.epoch, self.lr, self.data_loss, self.pde_loss, self.diffusion, self.n_pde
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub diffusion: DiffusionParam,
    pub pde_points: Vec<SamplePoint>,
    pub log: Vec<EpochRecord>,
    /// First epoch at which an unbounded coefficient became nonpositive.
    pub nonpositive_epoch: Option<usize>,
}

impl TrainOutcome {
    pub fn diffusion_trace(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.diffusion).collect()
    }
}

/// Everything a training run reads but does not own.
pub struct TrainInputs<'a> {
    pub domain: &'a Domain,
    pub observations: &'a [Observation],
    pub t_final: f64,
}

/// Minibatch ADAM training of network and diffusion parameter.
///
/// Every epoch optionally refines the collocation set, reshuffles data and
/// collocation points into `ceil(N/n)` subsets each, and takes
/// `max(b_d, b_r)` steps cycling through both subset lists.
pub fn train(
    params: MlpParams,
    diffusion: DiffusionParam,
    inputs: &TrainInputs,
    pde_points: Vec<SamplePoint>,
    loss: &LossSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    loss.validate()?;
    config.validate()?;
    if inputs.observations.is_empty() {
        return Err(PinnError::EmptyBatch("data"));
    }
    if pde_points.is_empty() {
        return Err(PinnError::EmptyBatch("pde"));
    }

    let mut params = params;
    let mut diffusion = diffusion;
    let mut points = pde_points;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam_theta = Adam::new(params.len());
    let mut adam_delta = Adam::new(1);
    let mut log = Vec::with_capacity(config.epochs);
    let mut nonpositive_epoch = None;

    let n_data = inputs.observations.len();
    let mut data_order: Vec<usize> = (0..n_data).collect();
    let mut data_batch = Vec::with_capacity(config.data_batch);
    let mut pde_batch = Vec::with_capacity(config.pde_batch);

    for epoch in 0..config.epochs {
        if let Some((checkpoints, add, n_candidates)) = config.refinement.parts() {
            if checkpoints.contains(&epoch) {
                let seed = rng.random::<u64>();
                let candidates =
                    sample_pde_points(inputs.domain, n_candidates, inputs.t_final, seed)?;
                let d = diffusion.value();
                let residual = |pts: &[SamplePoint]| residuals(&params, d, pts);
                points = match config.refinement {
                    Refinement::Rae { .. } => rae_refine(points, candidates, &residual, add)?,
                    _ => rar_refine(points, candidates, &residual, add)?,
                };
            }
        }

        let lr = lr_at(&config.schedule, epoch, config.epochs);
        let weights = loss.weights_at(epoch);
        data_order.shuffle(&mut rng);
        let mut pde_order: Vec<usize> = (0..points.len()).collect();
        pde_order.shuffle(&mut rng);
        let data_sets: Vec<&[usize]> = data_order.chunks(config.data_batch).collect();
        let pde_sets: Vec<&[usize]> = pde_order.chunks(config.pde_batch).collect();
        let steps = data_sets.len().max(pde_sets.len());

        let (mut data_sum, mut pde_sum) = (0.0, 0.0);
        for j in 0..steps {
            data_batch.clear();
            data_batch.extend(data_sets[j % data_sets.len()].iter().map(|&i| inputs.observations[i]));
            pde_batch.clear();
            pde_batch.extend(pde_sets[j % pde_sets.len()].iter().map(|&i| points[i]));

            let g = grad_params(&params, &diffusion, &data_batch, &pde_batch, weights)
                .map_err(|source| PinnError::NonFinite { epoch, source })?;
            data_sum += g.terms.data;
            pde_sum += g.terms.pde;
            adam_theta
                .step(params.as_mut_slice(), &g.params, lr)
                .and_then(|_| adam_delta.step(std::slice::from_mut(&mut diffusion.delta), &[g.delta], lr))
                .map_err(|e| match e {
                    PinnError::Net(source) => PinnError::NonFinite { epoch, source },
                    other => other,
                })?;
        }

        let d = diffusion.value();
        if !d.is_finite() || params.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(PinnError::NonFinite {
                epoch,
                source: NetError::NonFiniteGradient { term: "parameters" },
            });
        }
        if d <= 0.0 && nonpositive_epoch.is_none() {
            nonpositive_epoch = Some(epoch);
        }
        log.push(EpochRecord {
            epoch,
            lr,
            data_loss: data_sum / steps as f64,
            pde_loss: pde_sum / steps as f64,
            diffusion: d,
            n_pde: points.len(),
        });
    }

    Ok(TrainOutcome {
        params,
        diffusion,
        pde_points: points,
        log,
        nonpositive_epoch,
    })
}
