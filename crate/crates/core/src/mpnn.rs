//! Permutation-equivariant message-passing trunk shared by the learned
//! denoiser and critic.
//!
//! Every ordered pair `(i, j)`, `i != j`, carries an edge state. One layer:
//!
//! ```text
//! h_ij = relu(W_src x_i + W_trg x_j + W_edge e_ij + b)
//! e_ij <- e_ij + LN(f_edge(h_ij))
//! x_i  <- LN(x_i + sum_{j != i} f_node(h_ij))
//! ```
//!
//! Edge outputs are symmetrized as `(o_ij + o_ji) / 2` and reported once per
//! unordered pair. Parameters live in one flat vector: input embeddings,
//! then each layer in order, then the output heads; inside a block, weights are
//! row-major followed by the bias.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{pair_count, GraphInstance, GraphSchema};
use crate::prob::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpnnConfig {
    pub layers: usize,
    /// Node hidden width; edge states use a quarter of it.
    pub hidden: usize,
}

impl Default for MpnnConfig {
    fn default() -> Self {
        Self { layers: 2, hidden: 32 }
    }
}

impl MpnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("mpnn needs at least one layer".into()));
        }
        if self.hidden < 4 || !self.hidden.is_multiple_of(4) {
            return Err(Error::Config(format!("hidden width {} must be a positive multiple of 4", self.hidden)));
        }
        Ok(())
    }

    pub fn edge_hidden(&self) -> usize {
        self.hidden / 4
    }
}

/// Output head shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "snake_case")]
pub enum Head {
    /// Logits over clean node / edge labels.
    Labels { node_out: usize, edge_out: usize },
    /// One scalar per node and per unordered pair.
    Scalar,
}

impl Head {
    fn widths(&self) -> (usize, usize) {
        match *self {
            Head::Labels { node_out, edge_out } => (node_out, edge_out),
            Head::Scalar => (1, 1),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Linear {
    fn bias(&self) -> usize {
        self.offset + self.rows * self.cols
    }

    fn len(&self) -> usize {
        (self.rows + 1) * self.cols
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    offset: usize,
    width: usize,
}

#[derive(Debug, Clone)]
struct LayerBlocks {
    /// `W_src`, `W_trg` (no bias) and `W_edge` with the shared message bias.
    w_src: usize,
    w_trg: usize,
    w_edge: Linear,
    edge_mlp: (Linear, Linear),
    edge_norm: Norm,
    node_mlp: (Linear, Linear),
    node_norm: Norm,
}

#[derive(Debug, Clone)]
struct Layout {
    node_in: Linear,
    edge_in: Linear,
    layers: Vec<LayerBlocks>,
    node_head: Linear,
    edge_head: Linear,
    total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn linear(&mut self, rows: usize, cols: usize) -> Linear {
        let l = Linear { offset: self.0, rows, cols };
        self.0 += l.len();
        l
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> usize {
        let o = self.0;
        self.0 += rows * cols;
        o
    }

    fn norm(&mut self, width: usize) -> Norm {
        let n = Norm { offset: self.0, width };
        self.0 += 2 * width;
        n
    }
}

impl Layout {
    fn new(config: &MpnnConfig, node_in: usize, edge_in: usize, head: &Head) -> Self {
        let (dh, de) = (config.hidden, config.edge_hidden());
        let mut c = Cursor(0);
        let node_in = c.linear(node_in + 1, dh);
        let edge_in = c.linear(edge_in, de);
        let layers = (0..config.layers)
            .map(|_| LayerBlocks {
                w_src: c.matrix(dh, de),
                w_trg: c.matrix(dh, de),
                w_edge: c.linear(de, de),
                edge_mlp: (c.linear(de, de), c.linear(de, de)),
                edge_norm: c.norm(de),
                node_mlp: (c.linear(de, dh), c.linear(dh, dh)),
                node_norm: c.norm(dh),
            })
            .collect();
        let (no, eo) = head.widths();
        let node_head = c.linear(dh, no);
        let edge_head = c.linear(de, eo);
        Self { node_in, edge_in, layers, node_head, edge_head, total: c.0 }
    }
}

/// A batch of graphs packed as one disjoint union.
pub struct PackedBatch {
    x: Matrix,
    e: Matrix,
    src: Rc<Vec<usize>>,
    trg: Rc<Vec<usize>>,
    fwd: Rc<Vec<usize>>,
    rev: Rc<Vec<usize>>,
    /// Offsets of each graph's first node row; one extra trailing entry.
    pub node_start: Vec<usize>,
    /// Offsets of each graph's first unordered-pair row; one extra trailing entry.
    pub pair_start: Vec<usize>,
}

impl PackedBatch {
    pub fn total_nodes(&self) -> usize {
        *self.node_start.last().unwrap_or(&0)
    }

    pub fn total_pairs(&self) -> usize {
        *self.pair_start.last().unwrap_or(&0)
    }
}

/// The trunk plus one head, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mpnn {
    pub config: MpnnConfig,
    /// Input vocabularies (MASK included when present).
    pub node_vocab: usize,
    pub edge_vocab: usize,
    pub head: Head,
    pub params: Vec<f64>,
}

impl Mpnn {
    /// Random weights scaled by fan-in; layer-norm gains start at one and all
    /// biases at zero. `zero_head` zeroes the output heads.
    pub fn new(
        config: MpnnConfig,
        schema: &GraphSchema,
        head: Head,
        zero_head: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        config.validate()?;
        let (node_vocab, edge_vocab) = (schema.node_vocab(), schema.edge_vocab());
        let layout = Layout::new(&config, node_vocab, edge_vocab, &head);
        let mut params = vec![0.0; layout.total];
        let mut init = |l: Linear, gain: f64, params: &mut [f64]| {
            let std = gain / (l.rows as f64).sqrt();
            for p in &mut params[l.offset..l.offset + l.rows * l.cols] {
                *p = std * rng.normal();
            }
        };
        let relu_gain = 2f64.sqrt();
        init(layout.node_in, 1.0, &mut params);
        init(layout.edge_in, 1.0, &mut params);
        for layer in &layout.layers {
            let (dh, de) = (config.hidden, config.edge_hidden());
            init(Linear { offset: layer.w_src, rows: dh, cols: de }, 1.0, &mut params);
            init(Linear { offset: layer.w_trg, rows: dh, cols: de }, 1.0, &mut params);
            init(layer.w_edge, 1.0, &mut params);
            init(layer.edge_mlp.0, relu_gain, &mut params);
            init(layer.edge_mlp.1, relu_gain, &mut params);
            init(layer.node_mlp.0, relu_gain, &mut params);
            init(layer.node_mlp.1, relu_gain, &mut params);
            for norm in [layer.edge_norm, layer.node_norm] {
                params[norm.offset..norm.offset + norm.width].fill(1.0);
            }
        }
        if !zero_head {
            init(layout.node_head, 1.0, &mut params);
            init(layout.edge_head, 1.0, &mut params);
        }
        Ok(Self { config, node_vocab, edge_vocab, head, params })
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.config, self.node_vocab, self.edge_vocab, &self.head)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Checks the stored parameter count against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.layout().total;
        if self.params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: self.params.len() });
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Format("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Packs `(graph, alpha)` pairs; node inputs are one-hot labels plus `alpha`.
    pub fn pack(&self, inputs: &[(&GraphInstance, f64)]) -> Result<PackedBatch> {
        let total_nodes: usize = inputs.iter().map(|(g, _)| g.n()).sum();
        let total_ordered: usize = inputs.iter().map(|(g, _)| g.n() * g.n().saturating_sub(1)).sum();
        let total_pairs: usize = inputs.iter().map(|(g, _)| pair_count(g.n())).sum();
        let mut x = Matrix::zeros(total_nodes, self.node_vocab + 1);
        let mut e = Matrix::zeros(total_ordered, self.edge_vocab);
        let mut src = Vec::with_capacity(total_ordered);
        let mut trg = Vec::with_capacity(total_ordered);
        let mut fwd = Vec::with_capacity(total_pairs);
        let mut rev = Vec::with_capacity(total_pairs);
        let (mut node_start, mut pair_start) = (vec![0], vec![0]);
        let (mut node_base, mut row_base) = (0, 0);
        for &(g, alpha) in inputs {
            let n = g.n();
            for i in 0..n {
                let label = g.node(i);
                if label >= self.node_vocab {
                    return Err(Error::Domain(format!("node label {label} outside model vocabulary")));
                }
                let row = x.row_mut(node_base + i);
                row[label] = 1.0;
                row[self.node_vocab] = alpha;
            }
            // ordered pair (i, j) sits at row_base + i * (n - 1) + (j - [j > i])
            let ordered = |i: usize, j: usize| row_base + i * (n - 1) + if j > i { j - 1 } else { j };
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let label = g.edge(i, j);
                    if label >= self.edge_vocab {
                        return Err(Error::Domain(format!("edge label {label} outside model vocabulary")));
                    }
                    let r = ordered(i, j);
                    e.row_mut(r)[label] = 1.0;
                    src.push(node_base + i);
                    trg.push(node_base + j);
                }
            }
            for i in 0..n {
                for j in i + 1..n {
                    fwd.push(ordered(i, j));
                    rev.push(ordered(j, i));
                }
            }
            node_base += n;
            row_base += n * n.saturating_sub(1);
            node_start.push(node_base);
            pair_start.push(fwd.len());
        }
        Ok(PackedBatch {
            x,
            e,
            src: Rc::new(src),
            trg: Rc::new(trg),
            fwd: Rc::new(fwd),
            rev: Rc::new(rev),
            node_start,
            pair_start,
        })
    }

    /// Records the forward pass with explicit parameters; returns node outputs
    /// (`nodes x out`) and symmetrized unordered-pair outputs (`pairs x out`).
    pub fn forward_with(&self, params: &[f64], tape: &mut Tape, batch: &PackedBatch) -> (Var, Var) {
        let layout = self.layout();
        let (dh, de) = (self.config.hidden, self.config.edge_hidden());
        let lin = |tape: &mut Tape, input: Var, l: Linear| {
            let w = tape.param(params, l.offset, l.rows, l.cols);
            let b = tape.param(params, l.bias(), 1, l.cols);
            let y = tape.matmul(input, w);
            tape.add_bias(y, b)
        };
        let norm = |tape: &mut Tape, input: Var, n: Norm| {
            let g = tape.param(params, n.offset, 1, n.width);
            let b = tape.param(params, n.offset + n.width, 1, n.width);
            tape.layer_norm(input, g, b)
        };

        let x_in = tape.constant(batch.x.clone());
        let e_in = tape.constant(batch.e.clone());
        let mut x = lin(tape, x_in, layout.node_in);
        let mut e = lin(tape, e_in, layout.edge_in);
        let n_nodes = batch.total_nodes();
        for layer in &layout.layers {
            let w_src = tape.param(params, layer.w_src, dh, de);
            let w_trg = tape.param(params, layer.w_trg, dh, de);
            let xs = tape.gather_rows(x, batch.src.clone());
            let xt = tape.gather_rows(x, batch.trg.clone());
            let hs = tape.matmul(xs, w_src);
            let ht = tape.matmul(xt, w_trg);
            let he = lin(tape, e, layer.w_edge);
            let h = tape.add(hs, ht);
            let h = tape.add(h, he);
            let h = tape.relu(h);

            let fe = lin(tape, h, layer.edge_mlp.0);
            let fe = tape.relu(fe);
            let fe = lin(tape, fe, layer.edge_mlp.1);
            let fe = norm(tape, fe, layer.edge_norm);
            e = tape.add(e, fe);

            let fnode = lin(tape, h, layer.node_mlp.0);
            let fnode = tape.relu(fnode);
            let fnode = lin(tape, fnode, layer.node_mlp.1);
            let agg = tape.scatter_add_rows(fnode, batch.src.clone(), n_nodes);
            let xa = tape.add(x, agg);
            x = norm(tape, xa, layer.node_norm);
        }
        let node_out = lin(tape, x, layout.node_head);
        let edge_out = lin(tape, e, layout.edge_head);
        let ef = tape.gather_rows(edge_out, batch.fwd.clone());
        let er = tape.gather_rows(edge_out, batch.rev.clone());
        let sym = tape.add(ef, er);
        let sym = tape.scale(sym, 0.5);
        (node_out, sym)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &PackedBatch) -> (Var, Var) {
        self.forward_with(&self.params, tape, batch)
    }

    /// Forward pass for a single graph, returning raw output matrices.
    pub fn outputs(&self, g: &GraphInstance, alpha: f64) -> Result<(Matrix, Matrix)> {
        let batch = self.pack(&[(g, alpha)])?;
        let mut tape = Tape::new();
        let (nodes, pairs) = self.forward(&mut tape, &batch);
        let (nodes, pairs) = (tape.value(nodes).clone(), tape.value(pairs).clone());
        if nodes.data.iter().chain(&pairs.data).any(|v| !v.is_finite()) {
            return Err(Error::Divergence("non-finite value in forward pass".into()));
        }
        Ok((nodes, pairs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> GraphSchema {
        GraphSchema::new(3, 3, true, 1, 6).unwrap()
    }

    fn random_graph(n: usize, rng: &mut RngStream) -> GraphInstance {
        let nodes = (0..n).map(|_| rng.below(4)).collect();
        let edges = (0..pair_count(n)).map(|_| rng.below(4)).collect();
        GraphInstance::new(nodes, edges).unwrap()
    }

    #[test]
    fn layout_size_matches_parameter_vector() {
        let mut rng = RngStream::new(0, 0);
        let m = Mpnn::new(MpnnConfig { layers: 2, hidden: 8 }, &schema(), Head::Scalar, true, &mut rng).unwrap();
        m.validate().unwrap();
        assert!(MpnnConfig { layers: 1, hidden: 6 }.validate().is_err());
        assert!(MpnnConfig { layers: 0, hidden: 8 }.validate().is_err());
    }

    #[test]
    fn zero_head_outputs_zero() {
        let mut rng = RngStream::new(1, 0);
        let m = Mpnn::new(MpnnConfig { layers: 2, hidden: 8 }, &schema(), Head::Scalar, true, &mut rng).unwrap();
        let g = random_graph(5, &mut rng);
        let (nodes, pairs) = m.outputs(&g, 0.4).unwrap();
        assert_eq!((nodes.rows, pairs.rows), (5, 10));
        assert!(nodes.data.iter().chain(&pairs.data).all(|&v| v == 0.0));
    }

    #[test]
    fn batching_matches_single_graph_passes() {
        let mut rng = RngStream::new(2, 0);
        let head = Head::Labels { node_out: 3, edge_out: 3 };
        let m = Mpnn::new(MpnnConfig { layers: 2, hidden: 8 }, &schema(), head, false, &mut rng).unwrap();
        let graphs: Vec<_> = [3, 1, 5].iter().map(|&n| random_graph(n, &mut rng)).collect();
        let alphas = [0.1, 0.5, 0.9];
        let inputs: Vec<_> = graphs.iter().zip(alphas).collect();
        let batch = m.pack(&inputs).unwrap();
        let mut tape = Tape::new();
        let (nodes, pairs) = m.forward(&mut tape, &batch);
        for (k, (g, a)) in inputs.iter().enumerate() {
            let (sn, sp) = m.outputs(g, *a).unwrap();
            let nb = &tape.value(nodes).data[batch.node_start[k] * 3..batch.node_start[k + 1] * 3];
            let pb = &tape.value(pairs).data[batch.pair_start[k] * 3..batch.pair_start[k + 1] * 3];
            assert!(nb.iter().zip(&sn.data).all(|(x, y)| (x - y).abs() < 1e-12));
            assert!(pb.iter().zip(&sp.data).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn single_node_graph_has_no_pairs() {
        let mut rng = RngStream::new(3, 0);
        let m = Mpnn::new(MpnnConfig::default(), &schema(), Head::Scalar, false, &mut rng).unwrap();
        let (nodes, pairs) = m.outputs(&GraphInstance::filled(1, 0, 0), 0.5).unwrap();
        assert_eq!((nodes.rows, pairs.rows), (1, 0));
    }
}
