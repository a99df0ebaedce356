//! Affordance-weighted pooling, the embedding projector and the
//! relationship-guided contrastive objectives.
//!
//! For a batch of `2N` unit embeddings `z` with similarity `s_ik = z_i . z_k`,
//! anchor `i` with positive set `P_i` contributes
//!
//! ```text
//! loss_i = -1/(n_i) * sum_{j in P_i} log( exp(s_ij/t) / sum_{k != i} exp(s_ik/t) )
//! ```
//!
//! where `n_i` is the number of other in-batch views sharing the anchor's
//! label (`2 N_y - 1` with two views per sample). For the interaction loss
//! `P_i = { j != i : R(y_i, y_j) = 1 }`; for the object loss
//! `P_i = { j != i : o_i = o_j }`. Anchors with no positives, or with
//! `n_i = 0`, contribute nothing. Losses are summed over anchors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::FeatureGrid;
use crate::error::{Error, Result};
use crate::head::AffordanceMap;
use crate::params::{ParamId, ParamStore};
use crate::relmap::RelationshipMap;
use crate::tensor::{dot, l2_norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    pub lambda_obj: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.2,
            lambda_obj: 4.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.lambda_obj >= 0.0) {
            return Err(Error::Config(format!("lambda_obj must be nonnegative, got {}", self.lambda_obj)));
        }
        Ok(())
    }
}

/// Unit-norm projected embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedEmbedding(Vec<f64>);

impl ProjectedEmbedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&vector);
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::Numeric {
                stage: format!("embedding norm {norm}"),
            });
        }
        Ok(ProjectedEmbedding(vector))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// `f = 1/(h*w) * sum_ij F(i,j) * M(i,j)`; note the divisor is the cell
/// count, not the map mass.
pub fn pool_features(grid: &FeatureGrid, map: &AffordanceMap) -> Result<Vec<f64>> {
    if (grid.height, grid.width) != (map.height, map.width) {
        return Err(Error::shape(format!(
            "grid {}x{} vs map {}x{}",
            grid.height, grid.width, map.height, map.width
        )));
    }
    let cells = (grid.height * grid.width) as f64;
    let mut f = vec![0.0; grid.dim()];
    for (r, m) in map.values.iter().enumerate() {
        for (acc, v) in f.iter_mut().zip(grid.values.row(r)) {
            *acc += v * m;
        }
    }
    for v in &mut f {
        *v /= cells;
    }
    Ok(f)
}

/// Tape version of [`pool_features`]: `grid` is `(h*w) x d`, `map` is
/// `(h*w) x 1`; returns `1 x d`.
pub fn pool_features_tape(tape: &mut Tape, grid: Var, map: Var) -> Result<Var> {
    let (cells, _) = tape.value(grid).shape();
    if tape.value(map).shape() != (cells, 1) {
        return Err(Error::shape(format!(
            "map {:?} does not match {cells} grid cells",
            tape.value(map).shape()
        )));
    }
    let mt = tape.transpose(map);
    let f = tape.matmul(mt, grid);
    Ok(tape.scale(f, 1.0 / cells as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig {
            input: 768,
            hidden: 768,
            output: 128,
        }
    }
}

/// Three-layer perceptron (ReLU between layers) followed by L2
/// normalization.
#[derive(Debug, Clone)]
pub struct Projector {
    pub config: ProjectorConfig,
    layers: [(ParamId, ParamId); 3],
}

impl Projector {
    fn shapes(cfg: &ProjectorConfig) -> [(usize, usize); 3] {
        [
            (cfg.input, cfg.hidden),
            (cfg.hidden, cfg.hidden),
            (cfg.hidden, cfg.output),
        ]
    }

    pub fn init<R: Rng + ?Sized>(config: ProjectorConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.input == 0 || config.hidden == 0 || config.output == 0 {
            return Err(Error::Config("projector sizes must be positive".into()));
        }
        for (l, (fan_in, fan_out)) in Self::shapes(&config).into_iter().enumerate() {
            // He init keeps activations from shrinking through the ReLUs.
            let std = (2.0 / fan_in as f64).sqrt();
            store.add(format!("proj.{l}.weight"), Matrix::randn(fan_in, fan_out, std, rng));
            store.add(format!("proj.{l}.bias"), Matrix::zeros(1, fan_out));
        }
        Self::bind(config, store)
    }

    pub fn bind(config: ProjectorConfig, store: &ParamStore) -> Result<Self> {
        let shapes = Self::shapes(&config);
        let mut layers = Vec::with_capacity(3);
        for (l, (fan_in, fan_out)) in shapes.into_iter().enumerate() {
            layers.push((
                store.require(&format!("proj.{l}.weight"), (fan_in, fan_out))?,
                store.require(&format!("proj.{l}.bias"), (1, fan_out))?,
            ));
        }
        Ok(Projector {
            config,
            layers: [layers[0], layers[1], layers[2]],
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    /// `f` is `1 x input`; returns the normalized `1 x output` embedding.
    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        if tape.value(f).shape() != (1, self.config.input) {
            return Err(Error::shape(format!(
                "projector input {:?}, expected (1, {})",
                tape.value(f).shape(),
                self.config.input
            )));
        }
        if !tape.value(f).is_finite() {
            return Err(Error::Numeric {
                stage: "projector input".into(),
            });
        }
        let mut x = f;
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, *w);
            let bv = tape.param(store, *b);
            x = tape.linear(x, wv, bv);
            if l < 2 {
                x = tape.relu(x);
            }
        }
        let norm = l2_norm(&tape.value(x).data);
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(Error::Numeric {
                stage: format!("projector output norm {norm}"),
            });
        }
        Ok(tape.l2_normalize(x))
    }

    pub fn project(&self, store: &ParamStore, f: &[f64]) -> Result<ProjectedEmbedding> {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::row_vector(f.to_vec()));
        let z = self.forward_tape(&mut tape, store, x)?;
        ProjectedEmbedding::new(tape.value(z).data.clone())
    }
}

/// Loss value with its gradient with respect to each row of `Z`.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Matrix,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: f64,
    pub inter: f64,
    pub obj: f64,
    pub grad: Matrix,
}

fn check_batch(z: &Matrix, labels: usize) -> Result<()> {
    if z.rows != labels {
        return Err(Error::shape(format!("{} embeddings but {labels} labels", z.rows)));
    }
    if z.rows < 2 {
        return Err(Error::shape("contrastive batch needs at least two views"));
    }
    if !z.is_finite() {
        return Err(Error::Numeric {
            stage: "contrastive embeddings".into(),
        });
    }
    Ok(())
}

fn same_label_counts(labels: &[usize]) -> Vec<usize> {
    labels
        .iter()
        .map(|y| labels.iter().filter(|o| *o == y).count() - 1)
        .collect()
}

/// Shared contrastive kernel. `positive(i, j)` selects positives for anchor
/// `i` (callers never pass `j == i`), `norm[i]` is the anchor's divisor.
fn contrastive<F>(z: &Matrix, tau: f64, norm: &[usize], positive: F) -> LossValue
where
    F: Fn(usize, usize) -> bool,
{
    let n = z.rows;
    let sim = z.matmul_nt(z);
    let mut grad_s = Matrix::zeros(n, n);
    let mut value = 0.0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && positive(i, j)).collect();
        if pos.is_empty() || norm[i] == 0 {
            continue;
        }
        let c = 1.0 / norm[i] as f64;
        let logits: Vec<f64> = (0..n).map(|k| sim.get(i, k) / tau).collect();
        let max = (0..n).filter(|&k| k != i).map(|k| logits[k]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&k| k != i).map(|k| (logits[k] - max).exp()).sum();
        let lse = max + denom.ln();
        for &j in &pos {
            value -= c * (logits[j] - lse);
            grad_s.data[i * n + j] -= c / tau;
        }
        let weight = c * pos.len() as f64 / tau;
        for k in (0..n).filter(|&k| k != i) {
            grad_s.data[i * n + k] += weight * (logits[k] - lse).exp();
        }
    }
    // s_ik = z_i . z_k, so dZ = G Z + G^T Z.
    let mut grad = grad_s.matmul(z);
    grad.add_assign(&grad_s.matmul_tn(z));
    LossValue { value, grad }
}

/// Interaction-relationship contrastive loss. `labels[i]` indexes
/// `relmap.labels`.
pub fn l_inter(z: &Matrix, labels: &[usize], relmap: &RelationshipMap, tau: f64) -> Result<LossValue> {
    check_batch(z, labels.len())?;
    if let Some(bad) = labels.iter().find(|y| **y >= relmap.len()) {
        return Err(Error::UnknownLabel(format!("label index {bad}")));
    }
    let norm = same_label_counts(labels);
    Ok(contrastive(z, tau, &norm, |i, j| relmap.related(labels[i], labels[j])))
}

/// Object-variance mitigation loss: positives share the object label.
pub fn l_obj(z: &Matrix, objects: &[usize], tau: f64) -> Result<LossValue> {
    check_batch(z, objects.len())?;
    let norm = same_label_counts(objects);
    Ok(contrastive(z, tau, &norm, |i, j| objects[i] == objects[j]))
}

/// `l_inter + lambda_obj * l_obj`.
pub fn l_total(
    z: &Matrix,
    labels: &[usize],
    objects: &[usize],
    relmap: &RelationshipMap,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    let inter = l_inter(z, labels, relmap, cfg.temperature)?;
    let obj = l_obj(z, objects, cfg.temperature)?;
    let mut grad = inter.grad;
    if cfg.lambda_obj != 0.0 {
        for (g, o) in grad.data.iter_mut().zip(&obj.grad.data) {
            *g += cfg.lambda_obj * o;
        }
    }
    let total = if cfg.lambda_obj == 0.0 {
        inter.value
    } else {
        inter.value + cfg.lambda_obj * obj.value
    };
    Ok(TotalLoss {
        total,
        inter: inter.value,
        obj: obj.value,
        grad,
    })
}

/// Mean pairwise cosine between two groups of unit vectors (pairs with
/// identical indices excluded when the groups coincide).
pub fn mean_cosine(a: &[&[f64]], b: &[&[f64]], same_group: bool) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if same_group && i == j {
                continue;
            }
            sum += dot(x, y) / (l2_norm(x) * l2_norm(y));
            count += 1;
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        sum / count as f64
    }
}
