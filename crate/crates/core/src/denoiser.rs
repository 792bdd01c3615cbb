//! Denoisers `p_{1|t}(z | Z_t)`: the exact Bayes posterior over an enumerable
//! family, a bucketed tabular model and the message-passing model, plus the
//! weighted NLL loss and its training loop.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;
use std::sync::Mutex;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::graph::{enumerate_family, pairs, GraphInstance, GraphSchema, SlotKind, ToyFamily};
use crate::mpnn::{Head, Mpnn, MpnnConfig};
use crate::noising::{noise_graph, NoiseSpec};
use crate::prob::{check_unit, CategoricalDist, RngStream, Schedule};

/// Per-slot clean-label distributions for one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub nodes: Vec<CategoricalDist>,
    /// Upper-triangle pairs in row-major order.
    pub edges: Vec<CategoricalDist>,
}

impl DenoiserOutput {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn slot_count(&self) -> usize {
        self.nodes.len() + self.edges.len()
    }

    /// Slot `k`: nodes first, then upper-triangle edges.
    pub fn slot(&self, k: usize) -> &CategoricalDist {
        if k < self.nodes.len() {
            &self.nodes[k]
        } else {
            &self.edges[k - self.nodes.len()]
        }
    }

    pub fn edge(&self, i: usize, j: usize) -> &CategoricalDist {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        &self.edges[crate::graph::pair_index(self.n(), a, b)]
    }

    /// Point masses on the labels of `g`.
    pub fn delta(g: &GraphInstance, schema: &GraphSchema) -> Result<Self> {
        Ok(Self {
            nodes: g.nodes().iter().map(|&l| CategoricalDist::delta(l, schema.node_labels)).collect::<Result<_>>()?,
            edges: g.edges().iter().map(|&l| CategoricalDist::delta(l, schema.edge_labels)).collect::<Result<_>>()?,
        })
    }

    /// One independent draw per slot.
    pub fn sample(&self, rng: &mut RngStream) -> GraphInstance {
        let nodes = self.nodes.iter().map(|d| d.sample(rng)).collect();
        let edges = self.edges.iter().map(|d| d.sample(rng)).collect();
        GraphInstance::new(nodes, edges).expect("output shape is consistent")
    }

    fn check_shape(&self, g: &GraphInstance) -> Result<()> {
        if self.nodes.len() != g.n() || self.edges.len() != g.m() {
            return Err(Error::DimensionMismatch { expected: g.slot_count(), got: self.slot_count() });
        }
        Ok(())
    }
}

/// A model of `p_{1|t}(z | Z_t)`.
pub trait Denoiser {
    fn predict(&self, z_t: &GraphInstance, alpha: f64) -> Result<DenoiserOutput>;

    fn noise(&self) -> &NoiseSpec;
}

/// `gamma * sum_nodes -log p(x) + (1 - gamma) * sum_edges -log p(e)`, with
/// probabilities floored at `1e-12`.
pub fn nll_loss(output: &DenoiserOutput, g1: &GraphInstance, gamma: f64) -> Result<f64> {
    check_unit(gamma, "gamma")?;
    output.check_shape(g1)?;
    let nll = |d: &CategoricalDist, l: usize| -d.prob(l).max(PROB_FLOOR).ln();
    let nodes: f64 = output.nodes.iter().zip(g1.nodes()).map(|(d, &l)| nll(d, l)).sum();
    let edges: f64 = output.edges.iter().zip(g1.edges()).map(|(d, &l)| nll(d, l)).sum();
    Ok(gamma * nodes + (1.0 - gamma) * edges)
}

// ---------------------------------------------------------------------------
// Bayes oracle

/// Exact posterior marginals over an enumerated family.
pub struct BayesOracle {
    support: Vec<(GraphInstance, f64)>,
    noise: NoiseSpec,
    prior: DenoiserOutput,
    cache: Mutex<HashMap<(GraphInstance, u64), DenoiserOutput>>,
}

impl BayesOracle {
    pub fn new(family: &ToyFamily, noise: NoiseSpec) -> Result<Self> {
        Self::from_support(enumerate_family(family)?, noise)
    }

    /// Oracle for an explicit distribution over same-size graphs.
    pub fn from_support(support: Vec<(GraphInstance, f64)>, noise: NoiseSpec) -> Result<Self> {
        let first = support.first().ok_or(Error::EmptyFamily)?;
        let n = first.0.n();
        if support.iter().any(|(g, _)| g.n() != n) {
            return Err(Error::Domain("oracle support must share one graph size".into()));
        }
        let total: f64 = support.iter().map(|(_, p)| p).sum();
        let support: Vec<_> = support.into_iter().map(|(g, p)| (g, p / total)).collect();
        let schema = noise.schema;
        let weights: Vec<f64> = support.iter().map(|(_, p)| *p).collect();
        let prior = marginals(&support, &weights, &schema)?;
        Ok(Self { support, noise, prior, cache: Mutex::new(HashMap::new()) })
    }

    pub fn support(&self) -> &[(GraphInstance, f64)] {
        &self.support
    }

    pub fn n(&self) -> usize {
        self.support[0].0.n()
    }

    /// Per-slot marginals of the family itself.
    pub fn prior(&self) -> &DenoiserOutput {
        &self.prior
    }

    fn check_input(&self, z_t: &GraphInstance) -> Result<()> {
        if z_t.n() != self.n() {
            return Err(Error::DimensionMismatch { expected: self.n(), got: z_t.n() });
        }
        self.noise.schema.with_mask(true).check(z_t)
    }

    /// Posterior from `Z_t` alone. Slots whose likelihood does not depend on
    /// the clean label are skipped, since they cancel on normalization.
    /// When no family member is consistent with `Z_t` the prior is returned.
    pub fn posterior(&self, z_t: &GraphInstance, alpha: f64) -> Result<DenoiserOutput> {
        check_unit(alpha, "alpha")?;
        self.check_input(z_t)?;
        let likelihood = |k: usize, clean: usize| {
            let z = z_t.slot(k);
            let q0 = self.noise.q0(z_t.slot_kind(k));
            let keep = if z == clean { alpha } else { 0.0 };
            keep + (1.0 - alpha) * q0.probs().get(z).copied().unwrap_or(0.0)
        };
        self.posterior_from(z_t, likelihood)
    }

    /// Posterior from `Z_t` and the corruption indicators `A_t`. A kept slot
    /// pins its clean label; a corrupted slot's value is uninformative.
    pub fn posterior_with_indicators(
        &self,
        z_t: &GraphInstance,
        a_t: &crate::graph::CorruptionMask,
        alpha: f64,
    ) -> Result<DenoiserOutput> {
        check_unit(alpha, "alpha")?;
        self.check_input(z_t)?;
        if a_t.slot_count() != z_t.slot_count() {
            return Err(Error::DimensionMismatch { expected: z_t.slot_count(), got: a_t.slot_count() });
        }
        let likelihood = |k: usize, clean: usize| {
            let z = z_t.slot(k);
            if a_t.slot(k) {
                if z == clean { alpha } else { 0.0 }
            } else {
                let q0 = self.noise.q0(z_t.slot_kind(k));
                // a MASK placeholder carries probability one under its own encoding
                (1.0 - alpha) * q0.probs().get(z).copied().unwrap_or(1.0)
            }
        };
        self.posterior_from(z_t, likelihood)
    }

    fn posterior_from(&self, z_t: &GraphInstance, likelihood: impl Fn(usize, usize) -> f64) -> Result<DenoiserOutput> {
        let schema = self.noise.schema;
        let tables: Vec<Option<Vec<f64>>> = (0..z_t.slot_count())
            .map(|k| {
                let row: Vec<f64> = (0..schema.clean_vocab(z_t.slot_kind(k))).map(|c| likelihood(k, c)).collect();
                let informative = row.iter().any(|&v| v != row[0]);
                informative.then_some(row)
            })
            .collect();
        let weights: Vec<f64> = self
            .support
            .iter()
            .map(|(g, p)| {
                tables
                    .iter()
                    .enumerate()
                    .filter_map(|(k, row)| row.as_ref().map(|r| r[g.slot(k)]))
                    .fold(*p, |acc, l| acc * l)
            })
            .collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            return Ok(self.prior.clone());
        }
        marginals(&self.support, &weights, &schema)
    }
}

/// Per-slot marginals of `support` under unnormalized `weights`.
fn marginals(support: &[(GraphInstance, f64)], weights: &[f64], schema: &GraphSchema) -> Result<DenoiserOutput> {
    let g0 = &support[0].0;
    let mut nodes = vec![vec![0.0; schema.node_labels]; g0.n()];
    let mut edges = vec![vec![0.0; schema.edge_labels]; g0.m()];
    for ((g, _), &w) in support.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        g.nodes().iter().zip(&mut nodes).for_each(|(&l, row)| row[l] += w);
        g.edges().iter().zip(&mut edges).for_each(|(&l, row)| row[l] += w);
    }
    Ok(DenoiserOutput {
        nodes: nodes.iter().map(|w| CategoricalDist::from_weights(w)).collect::<Result<_>>()?,
        edges: edges.iter().map(|w| CategoricalDist::from_weights(w)).collect::<Result<_>>()?,
    })
}

impl Denoiser for BayesOracle {
    fn predict(&self, z_t: &GraphInstance, alpha: f64) -> Result<DenoiserOutput> {
        let key = (z_t.clone(), alpha.to_bits());
        if let Some(hit) = self.cache.lock().expect("oracle cache").get(&key) {
            return Ok(hit.clone());
        }
        let out = self.posterior(z_t, alpha)?;
        self.cache.lock().expect("oracle cache").insert(key, out.clone());
        Ok(out)
    }

    fn noise(&self) -> &NoiseSpec {
        &self.noise
    }
}

/// One-shot Bayes posterior at time `t`.
pub fn bayes_oracle_predict(
    family: &ToyFamily,
    z_t: &GraphInstance,
    t: f64,
    schedule: &Schedule,
    spec: &NoiseSpec,
) -> Result<DenoiserOutput> {
    BayesOracle::new(family, spec.clone())?.posterior(z_t, schedule.alpha(t)?)
}

// ---------------------------------------------------------------------------
// Learned models

/// Under mask noise, unmasked inputs are already clean: their output is pinned.
fn carried(noise: &NoiseSpec, z_t: &GraphInstance, k: usize) -> bool {
    noise.is_mask() && noise.schema.with_mask(true).mask(z_t.slot_kind(k)) != Some(z_t.slot(k))
}

fn pin_carried(noise: &NoiseSpec, z_t: &GraphInstance, out: &mut DenoiserOutput) -> Result<()> {
    if !noise.is_mask() {
        return Ok(());
    }
    let schema = noise.schema;
    for k in 0..z_t.slot_count() {
        if carried(noise, z_t, k) {
            let kind = z_t.slot_kind(k);
            let d = CategoricalDist::delta(z_t.slot(k), schema.clean_vocab(kind))?;
            match kind {
                SlotKind::Node => out.nodes[k] = d,
                SlotKind::Edge => out.edges[k - z_t.n()] = d,
            }
        }
    }
    Ok(())
}

/// Softmax table indexed by `(slot kind, input label, masked-neighbour count)`.
///
/// The neighbourhood of a node is its incident edges; that of an edge is its
/// two endpoints and the edges sharing an endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularTable {
    pub params: Vec<f64>,
}

fn tabular_layout(schema: &GraphSchema) -> (usize, usize, usize, usize) {
    let n_max = schema.n_max;
    let node_buckets = schema.node_vocab() * n_max;
    let edge_buckets = schema.edge_vocab() * (2 * n_max).saturating_sub(1);
    (node_buckets, edge_buckets, node_buckets * schema.node_labels, edge_buckets * schema.edge_labels)
}

/// Parameter offset of the logit row for slot `k` of `z_t`.
fn tabular_offset(schema: &GraphSchema, z_t: &GraphInstance, k: usize) -> Result<usize> {
    let n = z_t.n();
    if n > schema.n_max {
        return Err(Error::Domain(format!("graph size {n} exceeds tabular bound {}", schema.n_max)));
    }
    let is_masked = |kind: SlotKind, l: usize| schema.mask(kind) == Some(l);
    let (_, _, node_len, _) = tabular_layout(schema);
    match z_t.slot_kind(k) {
        SlotKind::Node => {
            let i = k;
            let count = (0..n).filter(|&j| j != i && is_masked(SlotKind::Edge, z_t.edge(i, j))).count();
            let bucket = z_t.node(i) * schema.n_max + count;
            Ok(bucket * schema.node_labels)
        }
        SlotKind::Edge => {
            let (i, j) = pairs(n)[k - n];
            let mut count = [i, j].iter().filter(|&&v| is_masked(SlotKind::Node, z_t.node(v))).count();
            for v in 0..n {
                if v != i && v != j {
                    count += usize::from(is_masked(SlotKind::Edge, z_t.edge(i, v)));
                    count += usize::from(is_masked(SlotKind::Edge, z_t.edge(j, v)));
                }
            }
            let width = (2 * schema.n_max).saturating_sub(1);
            let bucket = z_t.edge(i, j) * width + count;
            Ok(node_len + bucket * schema.edge_labels)
        }
    }
}

/// Architecture of a learned denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Tabular,
    Mpnn(MpnnConfig),
}

/// A trainable denoiser: tabular or message passing.
#[derive(Debug, Clone, PartialEq)]
pub enum LearnedDenoiser {
    Tabular { noise: NoiseSpec, table: TabularTable },
    Mpnn { noise: NoiseSpec, net: Mpnn },
}

/// One training example: noisy input, its keep-probability and the clean target.
#[derive(Debug, Clone)]
pub struct Example {
    pub z_t: GraphInstance,
    pub alpha: f64,
    pub g1: GraphInstance,
}

impl LearnedDenoiser {
    /// Fresh model; tabular starts uniform, MPNN starts from scaled random weights.
    pub fn new(arch: Architecture, noise: NoiseSpec, rng: &mut RngStream) -> Result<Self> {
        let input = noise.schema.with_mask(noise.is_mask());
        match arch {
            Architecture::Tabular => {
                let (_, _, a, b) = tabular_layout(&input);
                Ok(Self::Tabular { noise, table: TabularTable { params: vec![0.0; a + b] } })
            }
            Architecture::Mpnn(config) => {
                let head = Head::Labels { node_out: input.node_labels, edge_out: input.edge_labels };
                let net = Mpnn::new(config, &input, head, false, rng)?;
                Ok(Self::Mpnn { noise, net })
            }
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Self::Tabular { .. } => Architecture::Tabular,
            Self::Mpnn { net, .. } => Architecture::Mpnn(net.config),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Self::Tabular { table, .. } => &table.params,
            Self::Mpnn { net, .. } => &net.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Self::Tabular { table, .. } => &mut table.params,
            Self::Mpnn { net, .. } => &mut net.params,
        }
    }

    fn input_schema(&self) -> GraphSchema {
        let noise = self.noise();
        noise.schema.with_mask(noise.is_mask())
    }

    fn predict_raw(&self, params: &[f64], z_t: &GraphInstance, alpha: f64) -> Result<DenoiserOutput> {
        let schema = self.input_schema();
        schema.check(z_t)?;
        match self {
            Self::Tabular { .. } => {
                let row = |k: usize, width: usize| -> Result<CategoricalDist> {
                    let o = tabular_offset(&schema, z_t, k)?;
                    let probs = softmax_rows(&crate::autodiff::Matrix::from_vec(1, width, params[o..o + width].to_vec()));
                    CategoricalDist::new(probs)
                };
                let n = z_t.n();
                Ok(DenoiserOutput {
                    nodes: (0..n).map(|k| row(k, schema.node_labels)).collect::<Result<_>>()?,
                    edges: (n..z_t.slot_count()).map(|k| row(k, schema.edge_labels)).collect::<Result<_>>()?,
                })
            }
            Self::Mpnn { net, .. } => {
                let batch = net.pack(&[(z_t, alpha)])?;
                let mut tape = Tape::new();
                let (nv, ev) = net.forward_with(params, &mut tape, &batch);
                let (nl, el) = (tape.value(nv), tape.value(ev));
                if nl.data.iter().chain(&el.data).any(|v| !v.is_finite()) {
                    return Err(Error::Divergence("non-finite logits in forward pass".into()));
                }
                let split = |m: &crate::autodiff::Matrix| -> Result<Vec<CategoricalDist>> {
                    softmax_rows(m).chunks(m.cols.max(1)).take(m.rows).map(|c| CategoricalDist::new(c.to_vec())).collect()
                };
                Ok(DenoiserOutput { nodes: split(nl)?, edges: split(el)? })
            }
        }
    }

    /// Batch-mean loss and its gradient. `gamma = None` uses `n / (n + m)` per graph.
    pub fn loss_and_gradient(&self, batch: &[Example], gamma: Option<f64>) -> Result<(f64, Vec<f64>)> {
        self.loss_and_gradient_at(self.params(), batch, gamma)
    }

    /// [`LearnedDenoiser::loss_and_gradient`] at an explicit parameter vector.
    pub fn loss_and_gradient_at(&self, params: &[f64], batch: &[Example], gamma: Option<f64>) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; params.len()];
        if batch.is_empty() {
            return Ok((0.0, grad));
        }
        if let Some(g) = gamma {
            check_unit(g, "gamma")?;
        }
        let scale = 1.0 / batch.len() as f64;
        let noise = self.noise();
        let weights = |ex: &Example| -> (Vec<f64>, Vec<f64>) {
            let (n, m) = (ex.g1.n(), ex.g1.m());
            let gm = gamma.unwrap_or(crate::graph::default_gamma(&ex.g1));
            let w = |k: usize, base: f64| if carried(noise, &ex.z_t, k) { 0.0 } else { base * scale };
            let nodes = (0..n).map(|k| w(k, gm)).collect();
            let edges = (n..n + m).map(|k| w(k, 1.0 - gm)).collect();
            (nodes, edges)
        };
        for ex in batch {
            if ex.z_t.n() != ex.g1.n() {
                return Err(Error::DimensionMismatch { expected: ex.g1.n(), got: ex.z_t.n() });
            }
        }
        match self {
            Self::Tabular { .. } => {
                let schema = self.input_schema();
                let mut loss = 0.0;
                for ex in batch {
                    let (wn, we) = weights(ex);
                    let out = self.predict_raw(params, &ex.z_t, ex.alpha)?;
                    for k in 0..ex.g1.slot_count() {
                        let w = if k < ex.g1.n() { wn[k] } else { we[k - ex.g1.n()] };
                        if w == 0.0 {
                            continue;
                        }
                        let d = out.slot(k);
                        let target = ex.g1.slot(k);
                        let pt = d.prob(target);
                        loss += -w * pt.max(PROB_FLOOR).ln();
                        if pt < PROB_FLOOR {
                            continue;
                        }
                        let o = tabular_offset(&schema, &ex.z_t, k)?;
                        for (c, p) in d.probs().iter().enumerate() {
                            grad[o + c] += w * (p - if c == target { 1.0 } else { 0.0 });
                        }
                    }
                }
                Ok((loss, grad))
            }
            Self::Mpnn { net, .. } => {
                let inputs: Vec<_> = batch.iter().map(|ex| (&ex.z_t, ex.alpha)).collect();
                let packed = net.pack(&inputs)?;
                let (mut tn, mut te, mut wn, mut we) = (vec![], vec![], vec![], vec![]);
                for ex in batch {
                    let (a, b) = weights(ex);
                    tn.extend_from_slice(ex.g1.nodes());
                    te.extend_from_slice(ex.g1.edges());
                    wn.extend(a);
                    we.extend(b);
                }
                let mut tape = Tape::new();
                let (nv, ev) = net.forward_with(params, &mut tape, &packed);
                let ln = tape.softmax_xent(nv, Rc::new(tn), Rc::new(wn));
                let le = tape.softmax_xent(ev, Rc::new(te), Rc::new(we));
                let root = tape.add(ln, le);
                let loss = tape.value(root).data[0];
                let grad = tape.backward(root, params.len());
                Ok((loss, grad))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = ModelDocument::new(self.kind_name(), self.noise().clone(), self.architecture_config(), self.params());
        doc.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_document(ModelDocument::load(path)?)
    }

    fn kind_name(&self) -> &'static str {
        match self {
            Self::Tabular { .. } => "tabular",
            Self::Mpnn { .. } => "mpnn",
        }
    }

    fn architecture_config(&self) -> Option<MpnnConfig> {
        match self {
            Self::Tabular { .. } => None,
            Self::Mpnn { net, .. } => Some(net.config),
        }
    }

    pub fn from_document(doc: ModelDocument) -> Result<Self> {
        doc.check_header()?;
        let arch = match doc.kind.as_str() {
            "tabular" => Architecture::Tabular,
            "mpnn" => Architecture::Mpnn(doc.mpnn.ok_or_else(|| Error::Format("mpnn model without config".into()))?),
            other => return Err(Error::Format(format!("not a denoiser model kind: {other}"))),
        };
        let mut model = Self::new(arch, doc.noise, &mut RngStream::new(0, 0))?;
        if model.params().len() != doc.params.len() {
            return Err(Error::DimensionMismatch { expected: model.params().len(), got: doc.params.len() });
        }
        *model.params_mut() = doc.params;
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(model)
    }
}

impl Denoiser for LearnedDenoiser {
    fn predict(&self, z_t: &GraphInstance, alpha: f64) -> Result<DenoiserOutput> {
        check_unit(alpha, "alpha")?;
        let mut out = self.predict_raw(self.params(), z_t, alpha)?;
        pin_carried(self.noise(), z_t, &mut out)?;
        Ok(out)
    }

    fn noise(&self) -> &NoiseSpec {
        match self {
            Self::Tabular { noise, .. } | Self::Mpnn { noise, .. } => noise,
        }
    }
}

pub const MODEL_FORMAT: &str = "sidlab-model";
pub const MODEL_VERSION: u32 = 1;

/// On-disk model: `{"format":"sidlab-model","version":1,"kind":..,"schema":..,"params":[..]}`
/// plus the noise specification and, for message-passing models, the trunk shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub schema: GraphSchema,
    pub noise: NoiseSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpnn: Option<MpnnConfig>,
    /// Extra numbers a model kind needs, e.g. the tabular critic's time bins.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aux: Vec<f64>,
    pub params: Vec<f64>,
}

impl ModelDocument {
    pub fn new(kind: &str, noise: NoiseSpec, mpnn: Option<MpnnConfig>, params: &[f64]) -> Self {
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            kind: kind.into(),
            schema: noise.schema,
            noise,
            mpnn,
            aux: vec![],
            params: params.to_vec(),
        }
    }

    pub fn check_header(&self) -> Result<()> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model document {} v{}", self.format, self.version)));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingModel(format!("{}: {e}", path.display())))?;
        let doc: Self = serde_json::from_str(&text)?;
        doc.check_header()?;
        Ok(doc)
    }
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Rescale each gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
    /// Decay the learning rate linearly to zero over the epochs.
    pub lr_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 32, lr: 2e-4, momentum: 0.9, clip_norm: None, lr_decay: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("lr must be positive and momentum in [0, 1)".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay {
            self.lr * (1.0 - epoch as f64 / self.epochs.max(1) as f64)
        } else {
            self.lr
        }
    }
}

/// Draws `t ~ U(0, 1)` and noises `g1`.
pub fn make_example(
    g1: &GraphInstance,
    schedule: &Schedule,
    noise: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<Example> {
    let t = rng.uniform();
    let (z_t, _) = noise_graph(g1, t, schedule, noise, rng)?;
    Ok(Example { z_t, alpha: schedule.alpha(t)?, g1: g1.clone() })
}

/// Momentum update `v <- mu v + g; w <- w - lr v` with optional gradient
/// clipping; fails on any non-finite value.
pub(crate) fn sgd_step(params: &mut [f64], velocity: &mut [f64], grad: &[f64], config: &TrainConfig, epoch: usize) -> Result<()> {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = match config.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    let lr = config.lr_at(epoch);
    for ((w, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = config.momentum * *v + scale * g;
        *w -= lr * *v;
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence("non-finite parameter after update".into()));
    }
    Ok(())
}

/// Per-epoch mean training loss, plus an optional callback for held-out tracking.
pub fn train_denoiser_with(
    model: &mut LearnedDenoiser,
    dataset: &[GraphInstance],
    schedule: &Schedule,
    config: &TrainConfig,
    rng: &mut RngStream,
    mut on_epoch: impl FnMut(usize, &LearnedDenoiser) -> Result<()>,
) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let noise = model.noise().clone();
    let mut velocity = vec![0.0; model.params().len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| make_example(&dataset[i], schedule, &noise, rng))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = model.loss_and_gradient(&batch, None)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("loss {loss} at epoch {epoch}")));
            }
            sgd_step(model.params_mut(), &mut velocity, &grad, config, epoch)?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        info!("denoiser epoch {epoch}: train loss {mean:.6}");
        history.push(mean);
        on_epoch(epoch, model)?;
    }
    Ok(history)
}

pub fn train_denoiser(
    model: &mut LearnedDenoiser,
    dataset: &[GraphInstance],
    schedule: &Schedule,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    train_denoiser_with(model, dataset, schedule, config, rng, |_, _| Ok(()))
}

/// Fixed noisy copies of a held-out split, so losses are comparable across epochs.
pub fn held_out_examples(
    split: &[GraphInstance],
    copies: usize,
    schedule: &Schedule,
    noise: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(split.len() * copies);
    for g in split {
        for _ in 0..copies {
            out.push(make_example(g, schedule, noise, rng)?);
        }
    }
    Ok(out)
}

/// Mean NLL of `model` over pre-drawn examples.
pub fn evaluate_loss(model: &dyn Denoiser, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in examples {
        let out = model.predict(&ex.z_t, ex.alpha)?;
        total += nll_loss(&out, &ex.g1, crate::graph::default_gamma(&ex.g1))?;
    }
    debug!("evaluated {} examples", examples.len());
    Ok(total / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CorruptionMask;

    fn tf4() -> ToyFamily {
        ToyFamily::TriangleFree4
    }

    fn mask_spec() -> NoiseSpec {
        NoiseSpec::mask(tf4().schema(false)).unwrap()
    }

    #[test]
    fn singleton_support_gives_point_mass() {
        let g = GraphInstance::new(vec![0, 0], vec![1]).unwrap();
        let spec = NoiseSpec::uniform(GraphSchema::new(1, 2, false, 2, 2).unwrap()).unwrap();
        let oracle = BayesOracle::from_support(vec![(g.clone(), 1.0)], spec).unwrap();
        let z = GraphInstance::new(vec![0, 0], vec![0]).unwrap();
        let out = oracle.predict(&z, 0.3).unwrap();
        assert_eq!(out, DenoiserOutput::delta(&g, &GraphSchema::new(1, 2, false, 2, 2).unwrap()).unwrap());
    }

    #[test]
    fn fully_masked_input_gives_family_marginals() {
        let oracle = BayesOracle::new(&tf4(), mask_spec()).unwrap();
        let z = GraphInstance::filled(4, 1, 2);
        let out = oracle.predict(&z, 0.0).unwrap();
        // brute force: edge frequency over the family
        let family = enumerate_family(&tf4()).unwrap();
        for k in 0..6 {
            let p: f64 = family.iter().filter(|(g, _)| g.edges()[k] == 1).map(|(_, p)| p).sum();
            assert!((out.edges[k].prob(1) - p).abs() < 1e-12);
        }
        assert_eq!(out.nodes[0].probs(), &[1.0]);
    }

    #[test]
    fn clean_input_identifies_instance() {
        let oracle = BayesOracle::new(&tf4(), mask_spec()).unwrap();
        for (g, _) in oracle.support().to_vec() {
            let out = oracle.predict(&g, 1.0).unwrap();
            assert_eq!(out, DenoiserOutput::delta(&g, &tf4().schema(false)).unwrap());
        }
    }

    #[test]
    fn indicator_posterior_ignores_corrupted_values() {
        let spec = NoiseSpec::uniform(tf4().schema(false)).unwrap();
        let oracle = BayesOracle::new(&tf4(), spec).unwrap();
        let mut rng = RngStream::new(5, 0);
        let g = oracle.support()[3].0.clone();
        let (z, a) = noise_graph(&g, 0.5, &Schedule::LINEAR, oracle.noise(), &mut rng).unwrap();
        let mut masked = z.clone();
        for k in 0..z.slot_count() {
            if !a.slot(k) {
                let kind = z.slot_kind(k);
                masked.set_slot(k, tf4().schema(true).mask(kind).unwrap());
            }
        }
        let p1 = oracle.posterior_with_indicators(&z, &a, 0.5).unwrap();
        let p2 = oracle.posterior_with_indicators(&masked, &a, 0.5).unwrap();
        assert_eq!(p1, p2);
        let all = CorruptionMask::all(4, true);
        assert_eq!(oracle.posterior_with_indicators(&g, &all, 0.5).unwrap(), DenoiserOutput::delta(&g, &tf4().schema(false)).unwrap());
    }

    #[test]
    fn nll_examples() {
        let schema = GraphSchema::new(3, 2, false, 1, 5).unwrap();
        let g = GraphInstance::new(vec![0, 2, 1], vec![1, 0, 1]).unwrap();
        let exact = DenoiserOutput::delta(&g, &schema).unwrap();
        assert_eq!(nll_loss(&exact, &g, 0.5).unwrap(), 0.0);
        let uniform = DenoiserOutput {
            nodes: vec![CategoricalDist::uniform(3).unwrap(); 3],
            edges: vec![CategoricalDist::uniform(2).unwrap(); 3],
        };
        let gamma = crate::graph::default_gamma(&g);
        assert_eq!(gamma, 0.5);
        let expected = gamma * 3.0 * 3f64.ln() + (1.0 - gamma) * 3.0 * 2f64.ln();
        assert!((nll_loss(&uniform, &g, gamma).unwrap() - expected).abs() < 1e-12);
        assert!(nll_loss(&uniform, &g, 1.5).is_err());
    }

    fn mpnn_model(rng: &mut RngStream) -> LearnedDenoiser {
        let spec = NoiseSpec::mask(ToyFamily::toy_molecule().schema(false)).unwrap();
        LearnedDenoiser::new(Architecture::Mpnn(MpnnConfig { layers: 1, hidden: 8 }), spec, rng).unwrap()
    }

    fn batch(model: &LearnedDenoiser, rng: &mut RngStream) -> Vec<Example> {
        let family = ToyFamily::toy_molecule();
        let data = crate::graph::generate_dataset(&family, 2, rng).unwrap();
        data.iter().map(|g| make_example(g, &Schedule::COSINE, model.noise(), rng).unwrap()).collect()
    }

    #[test]
    fn empty_batch_has_zero_gradient() {
        let mut rng = RngStream::new(6, 0);
        let m = mpnn_model(&mut rng);
        let (loss, grad) = m.loss_and_gradient(&[], None).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let mut rng = RngStream::new(7, 0);
        let m = mpnn_model(&mut rng);
        let b = batch(&m, &mut rng);
        let doubled: Vec<_> = b.iter().chain(&b).cloned().collect();
        let (l1, g1) = m.loss_and_gradient(&b, None).unwrap();
        let (l2, g2) = m.loss_and_gradient(&doubled, None).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.iter().zip(&g2).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn batch_loss_matches_nll_of_predictions() {
        let mut rng = RngStream::new(8, 0);
        for m in [mpnn_model(&mut rng), {
            let spec = NoiseSpec::mask(ToyFamily::toy_molecule().schema(false)).unwrap();
            let mut t = LearnedDenoiser::new(Architecture::Tabular, spec, &mut rng).unwrap();
            t.params_mut().iter_mut().for_each(|p| *p = rng.normal());
            t
        }] {
            let b = batch(&m, &mut rng);
            let (loss, _) = m.loss_and_gradient(&b, None).unwrap();
            let direct = evaluate_loss(&m, &b).unwrap();
            assert!((loss - direct).abs() < 1e-10, "{loss} vs {direct}");
        }
    }

    #[test]
    fn tabular_gradient_matches_finite_differences() {
        let mut rng = RngStream::new(9, 0);
        let spec = NoiseSpec::mask(ToyFamily::toy_molecule().schema(false)).unwrap();
        let mut m = LearnedDenoiser::new(Architecture::Tabular, spec, &mut rng).unwrap();
        m.params_mut().iter_mut().for_each(|p| *p = 0.3 * rng.normal());
        let b = batch(&m, &mut rng);
        let (_, grad) = m.loss_and_gradient(&b, None).unwrap();
        let h = 1e-5;
        for i in 0..grad.len() {
            if grad[i] == 0.0 {
                continue;
            }
            let mut p = m.params().to_vec();
            p[i] += h;
            let up = m.loss_and_gradient_at(&p, &b, None).unwrap().0;
            p[i] -= 2.0 * h;
            let down = m.loss_and_gradient_at(&p, &b, None).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-5) < 1e-5);
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut rng = RngStream::new(10, 0);
        let mut m = mpnn_model(&mut rng);
        let before = m.clone();
        let data = crate::graph::generate_dataset(&ToyFamily::toy_molecule(), 4, &mut rng).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        train_denoiser(&mut m, &data, &Schedule::COSINE, &cfg, &mut rng).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn sgd_step_clips_and_decays() {
        let cfg = TrainConfig { epochs: 4, lr: 0.5, momentum: 0.0, clip_norm: Some(1.0), lr_decay: true, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 0.5);
        assert_eq!(cfg.lr_at(2), 0.25);
        let (mut w, mut v) = (vec![0.0, 0.0], vec![0.0, 0.0]);
        // gradient of norm 5 is rescaled to norm 1
        sgd_step(&mut w, &mut v, &[3.0, 4.0], &cfg, 0).unwrap();
        assert!((w[0] + 0.3).abs() < 1e-15 && (w[1] + 0.4).abs() < 1e-15);
        assert!(TrainConfig { clip_norm: Some(0.0), ..cfg }.validate().is_err());
    }

    #[test]
    fn carried_slots_are_pinned_under_mask_noise() {
        let mut rng = RngStream::new(11, 0);
        let m = mpnn_model(&mut rng);
        let g = GraphInstance::new(vec![0, 4, 1], vec![1, 3, 0]).unwrap();
        let out = m.predict(&g, 0.5).unwrap();
        assert_eq!(out.nodes[0].prob(0), 1.0);
        assert_eq!(out.nodes[2].prob(1), 1.0);
        assert!(out.nodes[1].prob(0) < 1.0);
        assert_eq!(out.edges[0].prob(1), 1.0);
        assert!(out.edges[1].probs().iter().all(|&p| p < 1.0));
    }

    #[test]
    fn model_file_roundtrip() {
        let mut rng = RngStream::new(12, 0);
        let m = mpnn_model(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(LearnedDenoiser::load(&path).unwrap(), m);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("{\"format\":\"sidlab-model\",\"version\":1,\"kind\":\"mpnn\""));
        assert!(matches!(LearnedDenoiser::load(&dir.path().join("none.json")), Err(Error::MissingModel(_))));
    }
}
