//! Minimal reverse-mode differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are views
//! into a flat vector; [`Tape::backward`] writes their gradients into a buffer
//! of the same length.

use std::rc::Rc;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// `a (r x k) * b (k x c)`.
fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul shapes");
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (l, &x) in a.row(i).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, &y) in orow.iter_mut().zip(b.row(l)) {
                *o += x * y;
            }
        }
    }
    out
}

/// `a * b^T`.
fn matmul_bt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_bt shapes");
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T * b`.
fn matmul_at(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "matmul_at shapes");
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let br = b.row(r);
        for (i, &x) in a.row(r).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &y) in orow.iter_mut().zip(br) {
                *o += x * y;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub const LN_EPS: f64 = 1e-5;
pub const PROB_FLOOR: f64 = 1e-12;

enum Op {
    Constant,
    Param { offset: usize },
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Relu(usize),
    Scale(usize, f64),
    Gather(usize, Rc<Vec<usize>>),
    ScatterAdd(usize, Rc<Vec<usize>>),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxXent { logits: usize, targets: Rc<Vec<usize>>, weights: Rc<Vec<f64>>, probs: Vec<f64> },
    SigmoidBce { logits: usize, offsets: Rc<Vec<f64>>, targets: Rc<Vec<f64>>, weights: Rc<Vec<f64>> },
}

struct Node {
    op: Op,
    value: Matrix,
}

/// Forward-pass recorder.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Constant, m)
    }

    /// A `rows x cols` block of `params` starting at `offset`.
    pub fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        let data = params[offset..offset + rows * cols].to_vec();
        self.push(Op::Param { offset }, Matrix::from_vec(rows, cols, data))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a.0, b.0), v)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1, "bias must be a row");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols, b.cols, "bias width");
        for r in 0..v.rows {
            v.row_mut(r).iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        self.push(Op::AddBias(a.0, bias.0), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!((v.rows, v.cols), (self.value(b).rows, self.value(b).cols), "add shapes");
        v.add_assign(self.value(b));
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(Op::Relu(a.0), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(Op::Scale(a.0, s), v)
    }

    /// Row `k` of the output is row `idx[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let src = self.value(a);
        let mut v = Matrix::zeros(idx.len(), src.cols);
        for (k, &r) in idx.iter().enumerate() {
            v.row_mut(k).copy_from_slice(src.row(r));
        }
        self.push(Op::Gather(a.0, idx), v)
    }

    /// Row `idx[k]` of the `out_rows`-row output accumulates row `k` of `a`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<Vec<usize>>, out_rows: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows, idx.len(), "scatter index length");
        let mut v = Matrix::zeros(out_rows, src.cols);
        for (k, &r) in idx.iter().enumerate() {
            v.row_mut(r).iter_mut().zip(src.row(k)).for_each(|(o, x)| *o += x);
        }
        self.push(Op::ScatterAdd(a.0, idx), v)
    }

    /// Per-row normalization with learned `1 x c` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let c = xm.cols;
        let mut v = Matrix::zeros(xm.rows, c);
        let mut xhat = vec![0.0; xm.data.len()];
        let mut inv_std = vec![0.0; xm.rows];
        for r in 0..xm.rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for k in 0..c {
                let h = (row[k] - mean) * is;
                xhat[r * c + k] = h;
                v.data[r * c + k] = g[k] * h + b[k];
            }
        }
        self.push(Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std }, v)
    }

    /// `sum_k w_k * -max(log softmax(logits_k)[t_k], log PROB_FLOOR)` as a `1 x 1` value.
    pub fn softmax_xent(&mut self, logits: Var, targets: Rc<Vec<usize>>, weights: Rc<Vec<f64>>) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows, targets.len(), "xent targets");
        assert_eq!(l.rows, weights.len(), "xent weights");
        let probs = softmax_rows(l);
        let loss: f64 = (0..l.rows)
            .map(|r| -weights[r] * probs[r * l.cols + targets[r]].max(PROB_FLOOR).ln())
            .sum();
        self.push(Op::SoftmaxXent { logits: logits.0, targets, weights, probs }, Matrix::from_vec(1, 1, vec![loss]))
    }

    /// Binary cross-entropy of `sigmoid(logits + offsets)` against targets in `[0, 1]`,
    /// weighted and summed into a `1 x 1` value. `logits` must be a single column.
    pub fn sigmoid_bce(
        &mut self,
        logits: Var,
        offsets: Rc<Vec<f64>>,
        targets: Rc<Vec<f64>>,
        weights: Rc<Vec<f64>>,
    ) -> Var {
        let l = self.value(logits);
        assert_eq!(l.cols, 1, "bce logits must be a column");
        assert!(offsets.len() == l.rows && targets.len() == l.rows && weights.len() == l.rows);
        let loss: f64 = (0..l.rows)
            .map(|r| {
                let z = l.data[r] + offsets[r];
                // -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y z
                weights[r] * (softplus(z) - targets[r] * z)
            })
            .sum();
        self.push(
            Op::SigmoidBce { logits: logits.0, offsets, targets, weights },
            Matrix::from_vec(1, 1, vec![loss]),
        )
    }

    /// Gradient of the scalar `root` with respect to every parameter, written
    /// into a zeroed buffer of length `n_params`.
    pub fn backward(&self, root: Var, n_params: usize) -> Vec<f64> {
        let mut grad_params = vec![0.0; n_params];
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = self.value(root);
        assert_eq!((rv.rows, rv.cols), (1, 1), "backward root must be scalar");
        grads[root.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    grad_params[*offset..*offset + g.data.len()]
                        .iter_mut()
                        .zip(&g.data)
                        .for_each(|(a, b)| *a += b);
                }
                Op::MatMul(a, b) => {
                    let ga = matmul_bt(&g, &self.nodes[*b].value);
                    let gb = matmul_at(&self.nodes[*a].value, &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let mut gb = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        gb.data.iter_mut().zip(g.row(r)).for_each(|(o, x)| *o += x);
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.data
                        .iter_mut()
                        .zip(&node.value.data)
                        .for_each(|(d, &y)| if y <= 0.0 { *d = 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Scale(a, s) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|d| *d *= s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Matrix::zeros(src.rows, src.cols);
                    for (k, &r) in idx.iter().enumerate() {
                        ga.row_mut(r).iter_mut().zip(g.row(k)).for_each(|(o, x)| *o += x);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterAdd(a, idx) => {
                    let mut ga = Matrix::zeros(idx.len(), g.cols);
                    for (k, &r) in idx.iter().enumerate() {
                        ga.row_mut(k).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let c = g.cols;
                    let gam = &self.nodes[*gamma].value.data;
                    let mut gg = Matrix::zeros(1, c);
                    let mut gbeta = Matrix::zeros(1, c);
                    let mut gx = Matrix::zeros(g.rows, c);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for k in 0..c {
                            gg.data[k] += gr[k] * xh[k];
                            gbeta.data[k] += gr[k];
                            let d = gr[k] * gam[k];
                            mean_d += d;
                            mean_dx += d * xh[k];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        let out = gx.row_mut(r);
                        for k in 0..c {
                            out[k] = inv_std[r] * (gr[k] * gam[k] - mean_d - xh[k] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *gamma, gg);
                    accumulate(&mut grads, *beta, gbeta);
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxXent { logits, targets, weights, probs } => {
                    let up = g.data[0];
                    let lv = &self.nodes[*logits].value;
                    let mut gl = Matrix::zeros(lv.rows, lv.cols);
                    for r in 0..lv.rows {
                        let pt = probs[r * lv.cols + targets[r]];
                        if pt < PROB_FLOOR {
                            // clamped: the loss is flat here
                            continue;
                        }
                        let w = up * weights[r];
                        for k in 0..lv.cols {
                            let ind = if k == targets[r] { 1.0 } else { 0.0 };
                            gl.data[r * lv.cols + k] = w * (probs[r * lv.cols + k] - ind);
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::SigmoidBce { logits, offsets, targets, weights } => {
                    let up = g.data[0];
                    let lv = &self.nodes[*logits].value;
                    let data = (0..lv.rows)
                        .map(|r| up * weights[r] * (sigmoid(lv.data[r] + offsets[r]) - targets[r]))
                        .collect();
                    accumulate(&mut grads, *logits, Matrix::from_vec(lv.rows, 1, data));
                }
            }
        }
        grad_params
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// Row-wise softmax, returned flat.
pub fn softmax_rows(l: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; l.data.len()];
    for r in 0..l.rows {
        let row = l.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * l.cols..(r + 1) * l.cols];
        let mut total = 0.0;
        for (x, &y) in o.iter_mut().zip(row) {
            *x = (y - max).exp();
            total += *x;
        }
        o.iter_mut().for_each(|x| *x /= total);
    }
    out
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::RngStream;

    fn random(rows: usize, cols: usize, rng: &mut RngStream) -> Vec<f64> {
        (0..rows * cols).map(|_| rng.normal()).collect()
    }

    /// Central differences of `f` at `params`.
    fn finite_diff(params: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..params.len())
            .map(|i| {
                let mut p = params.to_vec();
                p[i] += h;
                let up = f(&p);
                p[i] -= 2.0 * h;
                let down = f(&p);
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(g: &[f64], fd: &[f64]) {
        for (i, (a, b)) in g.iter().zip(fd).enumerate() {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-5);
            assert!(rel < 1e-5, "coordinate {i}: analytic {a} vs numeric {b}");
        }
    }

    // A little network touching every op: gather, matmul, bias, relu, scatter,
    // layer norm, scale, add and both losses.
    fn loss(params: &[f64], tape: &mut Tape) -> Var {
        let x = tape.param(params, 0, 3, 4);
        let w = tape.param(params, 12, 4, 2);
        let b = tape.param(params, 20, 1, 2);
        let gamma = tape.param(params, 22, 1, 2);
        let beta = tape.param(params, 24, 1, 2);
        let wc = tape.param(params, 26, 2, 1);
        let idx = Rc::new(vec![0, 2, 1, 2, 0]);
        let gx = tape.gather_rows(x, idx.clone());
        let h = tape.matmul(gx, w);
        let h = tape.add_bias(h, b);
        let h = tape.relu(h);
        let s = tape.scatter_add_rows(h, idx, 3);
        let n = tape.layer_norm(s, gamma, beta);
        let n2 = tape.scale(n, 0.7);
        let z = tape.add(n2, s);
        let xent = tape.softmax_xent(z, Rc::new(vec![1, 0, 1]), Rc::new(vec![0.5, 1.0, 0.25]));
        let c = tape.matmul(z, wc);
        let bce = tape.sigmoid_bce(c, Rc::new(vec![0.1, -2.0, 3.0]), Rc::new(vec![1.0, 0.0, 1.0]), Rc::new(vec![1.0; 3]));
        tape.add(xent, bce)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..5 {
            let params = random(1, 28, &mut rng);
            let mut tape = Tape::new();
            let root = loss(&params, &mut tape);
            let g = tape.backward(root, params.len());
            let fd = finite_diff(&params, &|p| {
                let mut t = Tape::new();
                let r = loss(p, &mut t);
                t.value(r).data[0]
            });
            assert_close(&g, &fd);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]));
        let g = tape.constant(Matrix::from_vec(1, 3, vec![1.0; 3]));
        let b = tape.constant(Matrix::zeros(1, 3));
        let y = tape.layer_norm(x, g, b);
        for r in 0..2 {
            let row = tape.value(y).row(r);
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 3.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn xent_clamps_vanishing_probabilities() {
        let mut tape = Tape::new();
        let l = tape.constant(Matrix::from_vec(1, 2, vec![0.0, 1000.0]));
        let loss = tape.softmax_xent(l, Rc::new(vec![0]), Rc::new(vec![1.0]));
        assert!((tape.value(loss).data[0] + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn sigmoid_and_logit_invert() {
        for p in [1e-6, 0.2, 0.5, 0.9, 1.0 - 1e-6] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }
}
