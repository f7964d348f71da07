//! The classifier `logits = features(x) · W + b` with hand-written forward
//! and backward passes.
//!
//! Parameter tensors live in a [`ModelParams`] with a fixed iteration order:
//! extractor tensors first (`projection.weight`, or `mlp.weight` then
//! `mlp.bias`), followed by `fc.weight` (`l x c`) and `fc.bias` (`1 x c`).
//! Class `j` owns column `j` of `fc.weight` and entry `j` of `fc.bias`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

pub type ClassSet = BTreeSet<usize>;

pub const FC_WEIGHT: &str = "fc.weight";
pub const FC_BIAS: &str = "fc.bias";
pub const PROJECTION_WEIGHT: &str = "projection.weight";
pub const MLP_WEIGHT: &str = "mlp.weight";
pub const MLP_BIAS: &str = "mlp.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Extractor {
    Identity,
    FrozenRandomProjection,
    /// One ReLU hidden layer; its width is the feature dimension.
    TrainableMlp { hidden_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub extractor: Extractor,
    #[serde(default)]
    pub extractor_trainable: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        match self.extractor {
            Extractor::Identity if self.input_dim != self.feature_dim => Err(Error::Config(
                format!(
                    "identity extractor needs input_dim == feature_dim ({} != {})",
                    self.input_dim, self.feature_dim
                ),
            )),
            Extractor::Identity | Extractor::FrozenRandomProjection
                if self.extractor_trainable =>
            {
                Err(Error::Config(
                    "only the MLP extractor has trainable weights".into(),
                ))
            }
            Extractor::TrainableMlp { hidden_dim: 0 } => {
                Err(Error::Config("MLP hidden_dim must be at least 1".into()))
            }
            Extractor::TrainableMlp { hidden_dim } if hidden_dim != self.feature_dim => {
                Err(Error::Config(format!(
                    "MLP hidden_dim {hidden_dim} must equal feature_dim {}",
                    self.feature_dim
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    extractor: Extractor,
    entries: Vec<Param>,
}

impl ModelParams {
    pub fn new(extractor: Extractor, entries: Vec<Param>) -> Result<Self> {
        let expected: &[&str] = match extractor {
            Extractor::Identity => &[FC_WEIGHT, FC_BIAS],
            Extractor::FrozenRandomProjection => &[PROJECTION_WEIGHT, FC_WEIGHT, FC_BIAS],
            Extractor::TrainableMlp { .. } => &[MLP_WEIGHT, MLP_BIAS, FC_WEIGHT, FC_BIAS],
        };
        let names: Vec<&str> = entries.iter().map(|p| p.name.as_str()).collect();
        if names != expected {
            return Err(Error::Config(format!(
                "parameter names {names:?} do not match extractor layout {expected:?}"
            )));
        }
        let params = Self { extractor, entries };
        let (l, c) = params.fc_weight().shape();
        if params.fc_bias().shape() != (1, c) {
            return Err(Error::shape("ModelParams::new", "fc.bias must be 1 x c"));
        }
        if let Some(w) = params.get(PROJECTION_WEIGHT).or(params.get(MLP_WEIGHT)) {
            if w.cols() != l {
                return Err(Error::shape(
                    "ModelParams::new",
                    format!("extractor output {} vs fc input {l}", w.cols()),
                ));
            }
        }
        Ok(params)
    }

    pub fn extractor(&self) -> Extractor {
        self.extractor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn fc_weight(&self) -> &Matrix {
        self.get(FC_WEIGHT).expect("fc.weight always present")
    }

    pub fn fc_bias(&self) -> &Matrix {
        self.get(FC_BIAS).expect("fc.bias always present")
    }

    pub fn input_dim(&self) -> usize {
        match self.extractor {
            Extractor::Identity => self.fc_weight().rows(),
            Extractor::FrozenRandomProjection => self.get(PROJECTION_WEIGHT).unwrap().rows(),
            Extractor::TrainableMlp { .. } => self.get(MLP_WEIGHT).unwrap().rows(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.fc_weight().rows()
    }

    pub fn num_classes(&self) -> usize {
        self.fc_weight().cols()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.iter().any(|p| p.name == name && p.trainable)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Freezes every tensor outside the FC layer (linear probing).
    pub fn freeze_non_fc(&mut self) {
        for p in &mut self.entries {
            if p.name != FC_WEIGHT && p.name != FC_BIAS {
                p.trainable = false;
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.is_finite())
    }

    /// Trainable scalars concatenated in parameter order.
    pub fn trainable_flat(&self) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    /// Inverse of [`ModelParams::trainable_flat`].
    pub fn set_trainable_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n: usize = self.entries.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum();
        if flat.len() != n {
            return Err(Error::shape("set_trainable_flat", format!("{} values for {n} scalars", flat.len())));
        }
        let mut offset = 0;
        for p in self.entries.iter_mut().filter(|p| p.trainable) {
            let len = p.value.len();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }
}

/// Named gradient tensors in parameter order, trainable tensors only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    entries: Vec<(String, Matrix)>,
}

impl GradientSet {
    pub fn from_entries(entries: Vec<(String, Matrix)>) -> Self {
        Self { entries }
    }

    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            entries: params
                .iter()
                .filter(|p| p.trainable)
                .map(|p| {
                    let (r, c) = p.value.shape();
                    (p.name.clone(), Matrix::zeros(r, c))
                })
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds `other` tensor-by-tensor; both sets must share names and shapes.
    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::shape("GradientSet::add_assign", "different tensor sets"));
        }
        for ((n, a), (m, b)) in self.entries.iter_mut().zip(&other.entries) {
            if n != m {
                return Err(Error::shape(
                    "GradientSet::add_assign",
                    format!("{n} vs {m}"),
                ));
            }
            a.add_assign(b)?;
        }
        Ok(())
    }

    /// Adds into a single named tensor (e.g. the FC gradients of the
    /// prototype loss). Missing names are ignored when the tensor is frozen.
    pub fn add_to(&mut self, name: &str, delta: &Matrix) -> Result<()> {
        match self.get_mut(name) {
            Some(g) => g.add_assign(delta),
            None => Ok(()),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|(_, m)| m.data().iter().copied()).collect()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, m)| !m.is_finite())
            .map(|(n, _)| n.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardCache {
    pub input: Matrix,
    /// MLP pre-activations, `b x hidden`.
    pub hidden_pre: Option<Matrix>,
    pub features: Matrix,
    pub logits: Matrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

pub fn init_params(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams> {
    config.validate()?;
    let (d, l, c) = (config.input_dim, config.feature_dim, config.num_classes);
    let mut entries = Vec::new();
    match config.extractor {
        Extractor::Identity => {}
        Extractor::FrozenRandomProjection => {
            let std = 1.0 / (d as f64).sqrt();
            let data = (0..d * l).map(|_| std * rng.normal()).collect();
            entries.push(Param {
                name: PROJECTION_WEIGHT.into(),
                value: Matrix::from_vec(d, l, data)?,
                trainable: false,
            });
        }
        Extractor::TrainableMlp { hidden_dim } => {
            entries.push(Param {
                name: MLP_WEIGHT.into(),
                value: glorot_uniform(d, hidden_dim, rng),
                trainable: config.extractor_trainable,
            });
            entries.push(Param {
                name: MLP_BIAS.into(),
                value: Matrix::zeros(1, hidden_dim),
                trainable: config.extractor_trainable,
            });
        }
    }
    entries.push(Param {
        name: FC_WEIGHT.into(),
        value: glorot_uniform(l, c, rng),
        trainable: true,
    });
    entries.push(Param {
        name: FC_BIAS.into(),
        value: Matrix::zeros(1, c),
        trainable: true,
    });
    ModelParams::new(config.extractor, entries)
}

fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Matrix {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform_in(-s, s)).collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("sized by construction")
}

/// Features only, for prototype bookkeeping and evaluation.
pub fn extract_features(params: &ModelParams, x: &Matrix) -> Result<(Option<Matrix>, Matrix)> {
    if x.cols() != params.input_dim() {
        return Err(Error::shape(
            "forward",
            format!("input has {} columns, model expects {}", x.cols(), params.input_dim()),
        ));
    }
    Ok(match params.extractor() {
        Extractor::Identity => (None, x.clone()),
        Extractor::FrozenRandomProjection => {
            (None, x.matmul(params.get(PROJECTION_WEIGHT).unwrap())?)
        }
        Extractor::TrainableMlp { .. } => {
            let pre = x
                .matmul(params.get(MLP_WEIGHT).unwrap())?
                .add_row_broadcast(params.get(MLP_BIAS).unwrap())?;
            let features = pre.map(|v| v.max(0.0));
            (Some(pre), features)
        }
    })
}

pub fn forward(params: &ModelParams, x: &Matrix) -> Result<ForwardCache> {
    let (hidden_pre, features) = extract_features(params, x)?;
    let logits = features
        .matmul(params.fc_weight())?
        .add_row_broadcast(params.fc_bias())?;
    Ok(ForwardCache {
        input: x.clone(),
        hidden_pre,
        features,
        logits,
    })
}

/// Mean softmax cross-entropy with the softmax restricted to `mask`.
///
/// Columns outside the mask are excluded from the partition sum, which is
/// the same as adding `-inf` to their logits; their gradient is exactly 0.
pub fn masked_cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    mask: &ClassSet,
) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(Error::shape(
            "masked_cross_entropy",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    if mask.is_empty() {
        return Err(Error::Contract("empty logits mask".into()));
    }
    if let Some(&j) = mask.iter().next_back() {
        if j >= c {
            return Err(Error::Contract(format!("mask class {j} >= {c} classes")));
        }
    }
    if let Some(&y) = labels.iter().find(|y| !mask.contains(y)) {
        return Err(Error::Contract(format!("label {y} outside the logits mask")));
    }

    let mut dlogits = Matrix::zeros(b, c);
    let mut total = 0.0;
    let inv_b = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = mask.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &j in mask {
            z += (row[j] - max).exp();
        }
        let log_z = z.ln() + max;
        total += log_z - row[y];
        let out = dlogits.row_mut(i);
        for &j in mask {
            out[j] = (row[j] - log_z).exp() * inv_b;
        }
        out[y] -= inv_b;
    }
    Ok((total * inv_b, dlogits))
}

pub fn backward(params: &ModelParams, cache: &ForwardCache, dlogits: &Matrix) -> Result<GradientSet> {
    if dlogits.shape() != cache.logits.shape() {
        return Err(Error::shape(
            "backward",
            format!("dlogits {:?} vs logits {:?}", dlogits.shape(), cache.logits.shape()),
        ));
    }
    let mut grads = GradientSet::zeros_like(params);
    if let Some(g) = grads.get_mut(FC_WEIGHT) {
        *g = cache.features.t_matmul(dlogits)?;
    }
    if let Some(g) = grads.get_mut(FC_BIAS) {
        *g = dlogits.column_sums();
    }
    if let Extractor::TrainableMlp { .. } = params.extractor() {
        if params.is_trainable(MLP_WEIGHT) || params.is_trainable(MLP_BIAS) {
            let pre = cache
                .hidden_pre
                .as_ref()
                .ok_or_else(|| Error::Contract("cache lacks MLP pre-activations".into()))?;
            let dfeatures = dlogits.matmul(&params.fc_weight().transpose())?;
            let relu_mask = pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let dpre = dfeatures.hadamard(&relu_mask)?;
            if let Some(g) = grads.get_mut(MLP_WEIGHT) {
                *g = cache.input.t_matmul(&dpre)?;
            }
            if let Some(g) = grads.get_mut(MLP_BIAS) {
                *g = dpre.column_sums();
            }
        }
    }
    Ok(grads)
}

pub fn unique_labels(labels: &[usize]) -> ClassSet {
    labels.iter().copied().collect()
}

/// Index of the largest logit per row; ties go to the lower class id.
pub fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap()
    }

    fn mlp_config(d: usize, h: usize, c: usize) -> ModelConfig {
        ModelConfig {
            input_dim: d,
            feature_dim: h,
            num_classes: c,
            extractor: Extractor::TrainableMlp { hidden_dim: h },
            extractor_trainable: true,
        }
    }

    fn identity_params(w: Matrix, b: Matrix) -> ModelParams {
        ModelParams::new(
            Extractor::Identity,
            vec![
                Param { name: FC_WEIGHT.into(), value: w, trainable: true },
                Param { name: FC_BIAS.into(), value: b, trainable: true },
            ],
        )
        .unwrap()
    }

    #[test]
    fn identity_extractor_with_identity_weights_returns_inputs() {
        let p = identity_params(Matrix::identity(3), Matrix::zeros(1, 3));
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, 4.0]]).unwrap();
        assert_eq!(forward(&p, &x).unwrap().logits, x);
    }

    #[test]
    fn zero_input_gives_bias_rows() {
        let p = identity_params(Matrix::filled(2, 3, 0.7), Matrix::row_vector(&[1.0, 2.0, 3.0]));
        let cache = forward(&p, &Matrix::zeros(4, 2)).unwrap();
        for i in 0..4 {
            assert_eq!(cache.logits.row(i), &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn mlp_forward_matches_straight_line_code() {
        let mut rng = Rng::new(21);
        let p = init_params(&mlp_config(4, 5, 3), &mut rng).unwrap();
        let x = random_matrix(&mut rng, 6, 4);
        let got = forward(&p, &x).unwrap().logits;
        let (w1, b1) = (p.get(MLP_WEIGHT).unwrap(), p.get(MLP_BIAS).unwrap());
        let (w2, b2) = (p.fc_weight(), p.fc_bias());
        for n in 0..6 {
            let mut h = [0.0; 5];
            for (k, hk) in h.iter_mut().enumerate() {
                let mut s = b1.get(0, k);
                for i in 0..4 {
                    s += x.get(n, i) * w1.get(i, k);
                }
                *hk = if s > 0.0 { s } else { 0.0 };
            }
            for j in 0..3 {
                let mut s = b2.get(0, j);
                for (k, hk) in h.iter().enumerate() {
                    s += hk * w2.get(k, j);
                }
                assert!((got.get(n, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = identity_params(Matrix::identity(3), Matrix::zeros(1, 3));
        assert!(matches!(forward(&p, &Matrix::zeros(1, 2)), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = Rng::new(2);
        let p = init_params(&mlp_config(3, 4, 2), &mut rng).unwrap();
        let x = random_matrix(&mut rng, 5, 3);
        assert_eq!(forward(&p, &x).unwrap(), forward(&p, &x).unwrap());
    }

    #[test]
    fn symmetric_two_class_loss() {
        let logits = Matrix::from_rows(&[[0.0, 0.0]]).unwrap();
        let (loss, d) = masked_cross_entropy(&logits, &[0], &ClassSet::from([0, 1])).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d.data(), &[-0.5, 0.5]);
    }

    #[test]
    fn single_class_mask_is_certain() {
        let logits = Matrix::from_rows(&[[3.0, -1.0, 8.0]]).unwrap();
        let (loss, d) = masked_cross_entropy(&logits, &[0], &ClassSet::from([0])).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(d.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mask_contract_errors() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(
            masked_cross_entropy(&logits, &[1], &ClassSet::from([0, 2])),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            masked_cross_entropy(&logits, &[1], &ClassSet::new()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn masked_columns_are_exactly_zero_and_rest_match_finite_differences() {
        let mut rng = Rng::new(4);
        let mask = ClassSet::from([0, 2]);
        for _ in 0..10 {
            let logits = random_matrix(&mut rng, 3, 4).scale(3.0);
            let labels: Vec<usize> = (0..3).map(|_| if rng.uniform() < 0.5 { 0 } else { 2 }).collect();
            let (_, d) = masked_cross_entropy(&logits, &labels, &mask).unwrap();
            let h = 1e-6;
            for i in 0..3 {
                assert_eq!(d.get(i, 1), 0.0);
                assert_eq!(d.get(i, 3), 0.0);
                for &j in &mask {
                    let mut up = logits.clone();
                    up.set(i, j, logits.get(i, j) + h);
                    let mut dn = logits.clone();
                    dn.set(i, j, logits.get(i, j) - h);
                    let fd = (masked_cross_entropy(&up, &labels, &mask).unwrap().0
                        - masked_cross_entropy(&dn, &labels, &mask).unwrap().0)
                        / (2.0 * h);
                    assert!((fd - d.get(i, j)).abs() <= 1e-7, "{fd} vs {}", d.get(i, j));
                }
            }
        }
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let logits = Matrix::from_rows(&[[1000.0, -1000.0, 999.0]]).unwrap();
        let (loss, d) = masked_cross_entropy(&logits, &[1], &ClassSet::from([0, 1, 2])).unwrap();
        assert!(loss.is_finite() && d.is_finite());
        assert!((loss - 2000.0 - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(8);
        let p = init_params(&mlp_config(3, 4, 2), &mut rng).unwrap();
        let cache = forward(&p, &random_matrix(&mut rng, 5, 3)).unwrap();
        let g = backward(&p, &cache, &Matrix::zeros(5, 2)).unwrap();
        assert_eq!(g.len(), 4);
        assert!(g.iter().all(|(_, m)| m.max_abs() == 0.0));
    }

    #[test]
    fn bias_gradient_is_column_sum() {
        let mut rng = Rng::new(9);
        let p = init_params(&mlp_config(3, 4, 2), &mut rng).unwrap();
        let cache = forward(&p, &random_matrix(&mut rng, 5, 3)).unwrap();
        let d = random_matrix(&mut rng, 5, 2);
        let g = backward(&p, &cache, &d).unwrap();
        assert_eq!(g.get(FC_BIAS).unwrap(), &d.column_sums());
    }

    #[test]
    fn frozen_tensors_get_no_gradient_entry() {
        let mut rng = Rng::new(10);
        let cfg = ModelConfig {
            input_dim: 4,
            feature_dim: 6,
            num_classes: 3,
            extractor: Extractor::FrozenRandomProjection,
            extractor_trainable: false,
        };
        let p = init_params(&cfg, &mut rng).unwrap();
        let cache = forward(&p, &random_matrix(&mut rng, 2, 4)).unwrap();
        let g = backward(&p, &cache, &random_matrix(&mut rng, 2, 3)).unwrap();
        assert_eq!(g.names().collect::<Vec<_>>(), vec![FC_WEIGHT, FC_BIAS]);

        let mut q = init_params(&mlp_config(4, 5, 3), &mut rng).unwrap();
        q.freeze_non_fc();
        let cache = forward(&q, &random_matrix(&mut rng, 2, 4)).unwrap();
        let g = backward(&q, &cache, &random_matrix(&mut rng, 2, 3)).unwrap();
        assert_eq!(g.names().collect::<Vec<_>>(), vec![FC_WEIGHT, FC_BIAS]);
    }

    fn loss_of(p: &ModelParams, x: &Matrix, y: &[usize], mask: &ClassSet) -> f64 {
        let cache = forward(p, x).unwrap();
        masked_cross_entropy(&cache.logits, y, mask).unwrap().0
    }

    /// Max relative error of `backward` against central differences over
    /// every trainable scalar.
    pub(crate) fn gradient_check(p: &ModelParams, x: &Matrix, y: &[usize], mask: &ClassSet) -> f64 {
        let cache = forward(p, x).unwrap();
        let (_, d) = masked_cross_entropy(&cache.logits, y, mask).unwrap();
        let grads = backward(p, &cache, &d).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (name, g) in grads.iter() {
            for k in 0..g.len() {
                let mut up = p.clone();
                up.get_mut(name).unwrap().data_mut()[k] += h;
                let mut dn = p.clone();
                dn.get_mut(name).unwrap().data_mut()[k] -= h;
                let fd = (loss_of(&up, x, y, mask) - loss_of(&dn, x, y, mask)) / (2.0 * h);
                let an = g.data()[k];
                let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(12);
        let p = init_params(&mlp_config(4, 5, 3), &mut rng).unwrap();
        let x = random_matrix(&mut rng, 6, 4);
        let y = [0, 1, 2, 2, 1, 0];
        let err = gradient_check(&p, &x, &y, &ClassSet::from([0, 1, 2]));
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn init_biases_zero_and_deterministic() {
        let cfg = mlp_config(4, 5, 3);
        let a = init_params(&cfg, &mut Rng::new(1)).unwrap();
        let b = init_params(&cfg, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.fc_bias().data().iter().all(|&v| v == 0.0));
        assert!(a.get(MLP_BIAS).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fc_weight_variance_matches_uniform_bound() {
        let cfg = ModelConfig {
            input_dim: 100,
            feature_dim: 100,
            num_classes: 100,
            extractor: Extractor::Identity,
            extractor_trainable: false,
        };
        let p = init_params(&cfg, &mut Rng::new(31)).unwrap();
        let w = p.fc_weight().data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let s2 = 6.0 / 200.0;
        assert!((var - s2 / 3.0).abs() <= 0.2 * s2 / 3.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = mlp_config(3, 4, 2);
        cfg.extractor = Extractor::TrainableMlp { hidden_dim: 0 };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            input_dim: 3,
            feature_dim: 4,
            num_classes: 2,
            extractor: Extractor::Identity,
            extractor_trainable: false,
        };
        assert!(cfg.validate().is_err());
    }
}
