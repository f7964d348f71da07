//! Fine-grained hypergradient (FGH) gradient reweighting and the base
//! optimizers it feeds.
//!
//! Every weighted unit `m` (a scalar, or a class column of the FC layer)
//! carries a coefficient `alpha_m`, initialised to 1 and updated once per
//! step from the product of consecutive gradients:
//!
//! ```text
//! alpha_m <- clamp(alpha_m + gamma * g_t[m] . g_{t-1}[m], clamp_min, clamp_max)
//! ```
//!
//! The gradient handed to the base optimizer is `alpha_m * g_t[m]`. With
//! [`DotNormalization::AdamNormalized`] the dot product uses the
//! bias-corrected Adam direction `m_hat / (sqrt(v_hat) + eps)` tracked by
//! moments private to the reweighter, while the multiplication still applies
//! to the raw gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradientSet, ModelParams, FC_BIAS, FC_WEIGHT};
use crate::numkit::Matrix;

/// Name of the per-class coefficient vector in class-wise mode.
pub const CLASS_WISE_KEY: &str = "fc.class";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One coefficient per trainable scalar, every tensor.
    PerScalar,
    /// One coefficient per class, shared by the class's FC weight column and
    /// bias entry. Other tensors pass through unweighted.
    ClassWiseFc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DotNormalization {
    Raw,
    AdamNormalized { beta1: f64, beta2: f64, eps: f64 },
}

impl DotNormalization {
    pub fn adam() -> Self {
        DotNormalization::AdamNormalized {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FghConfig {
    pub gamma: f64,
    pub granularity: Granularity,
    pub normalization: DotNormalization,
    pub clamp_min: f64,
    pub clamp_max: f64,
    pub enabled: bool,
}

impl Default for FghConfig {
    fn default() -> Self {
        Self::class_wise()
    }
}

impl FghConfig {
    /// Class-wise FC weights over Adam-normalised gradients, `gamma = 1e-3`.
    pub fn class_wise() -> Self {
        Self {
            gamma: 1e-3,
            granularity: Granularity::ClassWiseFc,
            normalization: DotNormalization::adam(),
            clamp_min: 1e-3,
            clamp_max: 1e3,
            enabled: true,
        }
    }

    /// Element-wise weights on every trainable tensor over raw gradients,
    /// `gamma = 1`.
    pub fn per_scalar() -> Self {
        Self {
            gamma: 1.0,
            granularity: Granularity::PerScalar,
            normalization: DotNormalization::Raw,
            clamp_min: 1e-3,
            clamp_max: 1e3,
            enabled: true,
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.clamp_min > 0.0 && self.clamp_min <= 1.0 && 1.0 <= self.clamp_max) {
            return Err(Error::Config(format!(
                "clamp range [{}, {}] must be positive and contain 1",
                self.clamp_min, self.clamp_max
            )));
        }
        if let DotNormalization::AdamNormalized { beta1, beta2, eps } = self.normalization {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return Err(Error::Config(format!(
                    "invalid Adam normalisation beta1={beta1} beta2={beta2} eps={eps}"
                )));
            }
        }
        Ok(())
    }
}

type Named = Vec<(String, Matrix)>;

fn find<'a>(named: &'a Named, name: &str) -> Option<&'a Matrix> {
    named.iter().find(|(n, _)| n == name).map(|(_, m)| m)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FghState {
    pub weights: Named,
    pub prev_grad: Option<Named>,
    pub adam_m: Named,
    pub adam_v: Named,
    pub step: u64,
}

impl FghState {
    pub fn num_scalars(&self) -> usize {
        let count = |n: &Named| n.iter().map(|(_, m)| m.len()).sum::<usize>();
        count(&self.weights)
            + self.prev_grad.as_ref().map_or(0, count)
            + count(&self.adam_m)
            + count(&self.adam_v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub step: u64,
    pub param: String,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug)]
pub struct Fgh {
    config: FghConfig,
    state: FghState,
}

impl Fgh {
    pub fn new(config: FghConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: FghState::default(),
        })
    }

    pub fn config(&self) -> &FghConfig {
        &self.config
    }

    pub fn state(&self) -> &FghState {
        &self.state
    }

    pub fn alpha(&self, name: &str) -> Option<&Matrix> {
        find(&self.state.weights, name)
    }

    pub fn reweight(&mut self, grads: GradientSet) -> Result<GradientSet> {
        if !self.config.enabled {
            return Ok(grads);
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient tensor {name}")));
        }
        let signal = match self.config.granularity {
            Granularity::PerScalar => grads
                .iter()
                .map(|(n, g)| (n.to_string(), g.clone()))
                .collect::<Named>(),
            Granularity::ClassWiseFc => vec![(CLASS_WISE_KEY.to_string(), class_rows(&grads)?)],
        };
        let current = self.normalize(signal);

        let Some(prev) = self.state.prev_grad.take() else {
            self.state.weights = match self.config.granularity {
                Granularity::PerScalar => grads
                    .iter()
                    .map(|(n, g)| (n.to_string(), Matrix::filled(g.rows(), g.cols(), 1.0)))
                    .collect(),
                Granularity::ClassWiseFc => {
                    let c = current[0].1.rows();
                    vec![(CLASS_WISE_KEY.to_string(), Matrix::filled(1, c, 1.0))]
                }
            };
            self.state.prev_grad = Some(current);
            return Ok(grads);
        };

        let (gamma, lo, hi) = (self.config.gamma, self.config.clamp_min, self.config.clamp_max);
        for ((name, alpha), (_, now)) in self.state.weights.iter_mut().zip(&current) {
            let before = find(&prev, name)
                .ok_or_else(|| Error::Contract(format!("no cached gradient for {name}")))?;
            match self.config.granularity {
                Granularity::PerScalar => {
                    for ((a, &g), &p) in alpha.data_mut().iter_mut().zip(now.data()).zip(before.data()) {
                        *a = (*a + gamma * (g * p)).clamp(lo, hi);
                    }
                }
                Granularity::ClassWiseFc => {
                    for (j, a) in alpha.data_mut().iter_mut().enumerate() {
                        let d = crate::numkit::dot(now.row(j), before.row(j))?;
                        *a = (*a + gamma * d).clamp(lo, hi);
                    }
                }
            }
        }
        self.state.prev_grad = Some(current);
        self.apply(grads)
    }

    fn apply(&self, mut grads: GradientSet) -> Result<GradientSet> {
        match self.config.granularity {
            Granularity::PerScalar => {
                for (name, g) in grads.iter_mut() {
                    let alpha = find(&self.state.weights, name)
                        .ok_or_else(|| Error::Contract(format!("no weights for {name}")))?;
                    *g = g.hadamard(alpha)?;
                }
            }
            Granularity::ClassWiseFc => {
                let alpha = find(&self.state.weights, CLASS_WISE_KEY)
                    .expect("class-wise weights exist after the first step")
                    .clone();
                let w = grads.get_mut(FC_WEIGHT).expect("checked in class_rows");
                for r in 0..w.rows() {
                    for (v, &a) in w.row_mut(r).iter_mut().zip(alpha.data()) {
                        *v *= a;
                    }
                }
                let b = grads.get_mut(FC_BIAS).expect("checked in class_rows");
                for (v, &a) in b.data_mut().iter_mut().zip(alpha.data()) {
                    *v *= a;
                }
            }
        }
        Ok(grads)
    }

    fn normalize(&mut self, signal: Named) -> Named {
        let DotNormalization::AdamNormalized { beta1, beta2, eps } = self.config.normalization
        else {
            return signal;
        };
        if self.state.adam_m.is_empty() {
            self.state.adam_m = signal
                .iter()
                .map(|(n, g)| (n.clone(), Matrix::zeros(g.rows(), g.cols())))
                .collect();
            self.state.adam_v = self.state.adam_m.clone();
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        signal
            .into_iter()
            .zip(self.state.adam_m.iter_mut().zip(self.state.adam_v.iter_mut()))
            .map(|((name, g), ((_, m), (_, v)))| {
                let mut out = Matrix::zeros(g.rows(), g.cols());
                for (((o, &gi), mi), vi) in out
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    *o = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                }
                (name, out)
            })
            .collect()
    }

    pub fn alpha_summaries(&self, step: u64) -> Vec<AlphaSummary> {
        self.state
            .weights
            .iter()
            .map(|(name, a)| {
                let d = a.data();
                AlphaSummary {
                    step,
                    param: name.clone(),
                    min: d.iter().copied().fold(f64::INFINITY, f64::min),
                    max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mean: d.iter().sum::<f64>() / d.len().max(1) as f64,
                }
            })
            .collect()
    }
}

/// Concatenates the FC weight column and bias entry of each class into a
/// `c x (l + 1)` matrix, one row per class.
pub fn class_rows(grads: &GradientSet) -> Result<Matrix> {
    let (w, b) = match (grads.get(FC_WEIGHT), grads.get(FC_BIAS)) {
        (Some(w), Some(b)) => (w, b),
        _ => {
            return Err(Error::Contract(
                "class-wise reweighting needs trainable fc.weight and fc.bias".into(),
            ))
        }
    };
    let (l, c) = w.shape();
    let mut out = Matrix::zeros(c, l + 1);
    for j in 0..c {
        let row = out.row_mut(j);
        for k in 0..l {
            row[k] = w.get(k, j);
        }
        row[l] = b.get(0, j);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BaseOptimizer {
    kind: OptimizerKind,
    m: Named,
    v: Named,
    step: u64,
}

impl BaseOptimizer {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        if !(kind.lr() > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", kind.lr())));
        }
        Ok(Self {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.m.iter().chain(&self.v).map(|(_, m)| m.len()).sum()
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientSet) -> Result<()> {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                for (name, g) in grads.iter() {
                    let p = param_mut(params, name, g)?;
                    for (t, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *t -= lr * gi;
                    }
                }
            }
            OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = grads
                        .iter()
                        .map(|(n, g)| (n.to_string(), Matrix::zeros(g.rows(), g.cols())))
                        .collect();
                    self.v = self.m.clone();
                }
                let t = self.step as i32;
                let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for (((name, g), (_, m)), (_, v)) in
                    grads.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut())
                {
                    let p = param_mut(params, name, g)?;
                    for (((t, &gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        *t -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn param_mut<'a>(params: &'a mut ModelParams, name: &str, g: &Matrix) -> Result<&'a mut Matrix> {
    let p = params
        .get_mut(name)
        .ok_or_else(|| Error::Contract(format!("gradient for unknown tensor {name}")))?;
    if !p.same_shape(g) {
        return Err(Error::shape("optimizer step", format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HypergradCheck {
    /// `-lr * g_t[m] * g_{t-1}[m]` per coordinate.
    pub analytic: Vec<f64>,
    /// Central differences of `L(theta_t(alpha))` in each `alpha_m`.
    pub numeric: Vec<f64>,
    /// `max |numeric - analytic| / max |analytic|` (0 when both vanish).
    pub rel_error: f64,
}

/// Checks the hypergradient identity on a flat parameter vector.
///
/// Takes one SGD step `theta_t = theta - alpha * lr * grad(theta)`, then
/// compares `dL(theta_t)/d alpha_m` measured by central differences with
/// step `h` against `-lr * grad(theta_t)[m] * grad(theta)[m]`.
/// `loss_grad` returns the loss and its gradient at a point.
pub fn hypergradient_oracle_check<F>(loss_grad: F, theta: &[f64], lr: f64, alpha: &[f64], h: f64) -> HypergradCheck
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    assert_eq!(theta.len(), alpha.len(), "one alpha per parameter");
    let (_, g_prev) = loss_grad(theta);
    let step = |alpha: &[f64]| -> Vec<f64> {
        theta
            .iter()
            .zip(alpha)
            .zip(&g_prev)
            .map(|((t, a), g)| t - a * lr * g)
            .collect()
    };
    let theta_t = step(alpha);
    let (_, g_now) = loss_grad(&theta_t);
    let analytic: Vec<f64> = g_now.iter().zip(&g_prev).map(|(a, b)| -lr * a * b).collect();

    let numeric: Vec<f64> = (0..alpha.len())
        .map(|m| {
            let mut up = alpha.to_vec();
            up[m] += h;
            let mut dn = alpha.to_vec();
            dn[m] -= h;
            (loss_grad(&step(&up)).0 - loss_grad(&step(&dn)).0) / (2.0 * h)
        })
        .collect();

    let scale = analytic.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(&numeric)
        .fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
    let rel_error = if scale == 0.0 {
        if diff == 0.0 { 0.0 } else { f64::INFINITY }
    } else {
        diff / scale
    };
    HypergradCheck {
        analytic,
        numeric,
        rel_error,
    }
}
