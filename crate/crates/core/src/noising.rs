//! Element-wise noising `q_{t|1}(z | z_1) = alpha_t delta_{z_1}(z) + (1 - alpha_t) q_0(z)`,
//! its factored form with corruption indicators, and the Markov transition
//! matrices of the classical forward chain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CorruptionMask, GraphInstance, GraphSchema, SlotKind};
use crate::prob::{check_unit, mix, CategoricalDist, RngStream, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Mask,
    Marginal,
    Uniform,
}

/// Noise distribution `q_0` for node and edge slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub schema: GraphSchema,
    pub node_q0: CategoricalDist,
    pub edge_q0: CategoricalDist,
}

impl NoiseSpec {
    /// All mass on the MASK label; the schema gains a MASK label if it lacks one.
    pub fn mask(schema: GraphSchema) -> Result<Self> {
        let schema = schema.with_mask(true);
        Ok(Self {
            kind: NoiseKind::Mask,
            node_q0: CategoricalDist::delta(schema.node_labels, schema.node_vocab())?,
            edge_q0: CategoricalDist::delta(schema.edge_labels, schema.edge_vocab())?,
            schema,
        })
    }

    /// Equal mass on every clean label.
    pub fn uniform(schema: GraphSchema) -> Result<Self> {
        let schema = schema.with_mask(false);
        Ok(Self {
            kind: NoiseKind::Uniform,
            node_q0: CategoricalDist::uniform(schema.node_labels)?,
            edge_q0: CategoricalDist::uniform(schema.edge_labels)?,
            schema,
        })
    }

    /// Empirical label frequencies of `dataset` (node slots and upper-triangle edge slots).
    pub fn marginal(schema: GraphSchema, dataset: &[GraphInstance]) -> Result<Self> {
        let schema = schema.with_mask(false);
        let mut node_counts = vec![0.0; schema.node_labels];
        let mut edge_counts = vec![0.0; schema.edge_labels];
        for g in dataset {
            schema.check(g)?;
            g.nodes().iter().for_each(|&l| node_counts[l] += 1.0);
            g.edges().iter().for_each(|&l| edge_counts[l] += 1.0);
        }
        if edge_counts.iter().sum::<f64>() == 0.0 {
            // Single-node graphs only: fall back to uniform edges.
            edge_counts.iter_mut().for_each(|c| *c = 1.0);
        }
        Ok(Self {
            kind: NoiseKind::Marginal,
            node_q0: CategoricalDist::from_weights(&node_counts)?,
            edge_q0: CategoricalDist::from_weights(&edge_counts)?,
            schema,
        })
    }

    /// Builds the spec of the given kind; `dataset` is only read for marginal noise.
    pub fn build(kind: NoiseKind, schema: GraphSchema, dataset: &[GraphInstance]) -> Result<Self> {
        match kind {
            NoiseKind::Mask => Self::mask(schema),
            NoiseKind::Uniform => Self::uniform(schema),
            NoiseKind::Marginal => Self::marginal(schema, dataset),
        }
    }

    pub fn q0(&self, kind: SlotKind) -> &CategoricalDist {
        match kind {
            SlotKind::Node => &self.node_q0,
            SlotKind::Edge => &self.edge_q0,
        }
    }

    pub fn is_mask(&self) -> bool {
        self.kind == NoiseKind::Mask
    }
}

/// Sample from `mix(delta_{z1}, q0, alpha)`.
pub fn noise_element(z1: usize, alpha: f64, q0: &CategoricalDist, rng: &mut RngStream) -> Result<usize> {
    let data = CategoricalDist::delta(z1, q0.len())?;
    Ok(mix(&data, q0, alpha)?.sample(rng))
}

/// Draws `a ~ Bernoulli(alpha)`; keeps `z1` when `a = 1`, else samples `q0`.
pub fn noise_element_factored(
    z1: usize,
    alpha: f64,
    q0: &CategoricalDist,
    rng: &mut RngStream,
) -> Result<(usize, bool)> {
    check_unit(alpha, "alpha")?;
    if rng.bernoulli(alpha) {
        Ok((z1, true))
    } else {
        Ok((q0.sample(rng), false))
    }
}

/// Factored noising of every node slot and upper-triangle edge slot at `alpha(t)`.
pub fn noise_graph(
    g1: &GraphInstance,
    t: f64,
    schedule: &Schedule,
    spec: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<(GraphInstance, CorruptionMask)> {
    noise_graph_at(g1, schedule.alpha(t)?, spec, rng)
}

/// [`noise_graph`] with the keep-probability given directly.
pub fn noise_graph_at(
    g1: &GraphInstance,
    alpha: f64,
    spec: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<(GraphInstance, CorruptionMask)> {
    check_unit(alpha, "alpha")?;
    spec.schema.check(g1)?;
    if spec.schema.contains_mask(g1) {
        return Err(Error::MaskLabelPresent);
    }
    let mut z = g1.clone();
    let mut mask = CorruptionMask::all(g1.n(), true);
    for k in 0..g1.slot_count() {
        let q0 = spec.q0(g1.slot_kind(k));
        let (label, kept) = noise_element_factored(g1.slot(k), alpha, q0, rng)?;
        z.set_slot(k, label);
        mask.set_slot(k, kept);
    }
    Ok((z, mask))
}

/// Dense `K x K` row-stochastic matrix; row `i` is the law of the next state from `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(k: usize) -> Self {
        let mut entries = vec![0.0; k * k];
        (0..k).for_each(|i| entries[i * k + i] = 1.0);
        Self { k, entries }
    }

    /// The idempotent noise kernel: every row equals `q0`.
    pub fn noise_kernel(q0: &CategoricalDist) -> Self {
        let k = q0.len();
        let entries = (0..k).flat_map(|_| q0.probs().iter().copied()).collect();
        Self { k, entries }
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.k..(i + 1) * self.k]
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.k != other.k {
            return Err(Error::DimensionMismatch { expected: self.k, got: other.k });
        }
        let k = self.k;
        let mut entries = vec![0.0; k * k];
        for i in 0..k {
            for l in 0..k {
                let a = self.get(i, l);
                if a == 0.0 {
                    continue;
                }
                for j in 0..k {
                    entries[i * k + j] += a * other.get(l, j);
                }
            }
        }
        Ok(Self { k, entries })
    }

    /// Row vector times matrix.
    pub fn apply(&self, dist: &CategoricalDist) -> Result<CategoricalDist> {
        if dist.len() != self.k {
            return Err(Error::DimensionMismatch { expected: self.k, got: dist.len() });
        }
        let mut out = vec![0.0; self.k];
        for (i, &p) in dist.probs().iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += p * self.get(i, j);
            }
        }
        CategoricalDist::new(out)
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        (0..self.k).all(|i| {
            let row = self.row(i);
            row.iter().all(|&x| x >= 0.0) && (row.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.entries.iter().zip(&other.entries).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn affine(a: f64, kernel: &Self) -> Self {
        // a * I + (1 - a) * kernel
        let k = kernel.k;
        let mut out = kernel.clone();
        for i in 0..k {
            for j in 0..k {
                let idx = i * k + j;
                out.entries[idx] = (1.0 - a) * kernel.entries[idx] + if i == j { a } else { 0.0 };
            }
        }
        out
    }

    /// `alpha_bar * I + (1 - alpha_bar) * A`, the closed form of a composed chain.
    pub fn closed_form(alpha_bar: f64, q0: &CategoricalDist) -> Result<Self> {
        check_unit(alpha_bar, "alpha_bar")?;
        Ok(Self::affine(alpha_bar, &Self::noise_kernel(q0)))
    }
}

/// One forward step `Q = (1 - beta) I + beta A`.
pub fn forward_transition_matrix(beta: f64, q0: &CategoricalDist) -> Result<TransitionMatrix> {
    check_unit(beta, "beta")?;
    Ok(TransitionMatrix::affine(1.0 - beta, &TransitionMatrix::noise_kernel(q0)))
}

/// Ordered product `Q_1 Q_2 ... Q_r` of per-step matrices.
pub fn compose_forward(betas: &[f64], q0: &CategoricalDist) -> Result<TransitionMatrix> {
    let mut acc = TransitionMatrix::identity(q0.len());
    for &beta in betas {
        acc = acc.matmul(&forward_transition_matrix(beta, q0)?)?;
    }
    Ok(acc)
}

/// Per-step noise rates of the Markov chain that walks `times` (descending from
/// clean towards noise): `beta_r = 1 - alpha(t_r) / alpha(t_{r-1})`, zero when
/// the previous keep-probability is already zero.
pub fn betas_on_grid(schedule: &Schedule, times: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(times.len().saturating_sub(1));
    for w in times.windows(2) {
        if w[1] > w[0] {
            return Err(Error::Domain("forward grid must run from clean towards noise".into()));
        }
        let prev = schedule.alpha(w[0])?;
        let next = schedule.alpha(w[1])?;
        let beta = if prev == 0.0 { 0.0 } else { (1.0 - next / prev).clamp(0.0, 1.0) };
        out.push(beta);
    }
    Ok(out)
}
