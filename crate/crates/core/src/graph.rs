//! Graph instances, corruption masks, toy families and dataset files.
//!
//! A graph with `n` nodes has `n` node slots and `m = n(n-1)/2` edge slots, one
//! per unordered pair `i < j`, stored in row-major upper-triangle order. The
//! matrix view mirrors those slots and fixes the diagonal to the no-edge label.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::RngStream;

/// Edge label meaning "no edge". Always index 0.
pub const NO_EDGE: usize = 0;

/// Largest state space [`enumerate_family`] will walk.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Label vocabularies and size bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSchema {
    /// Clean node labels.
    pub node_labels: usize,
    /// Clean edge labels, including no-edge.
    pub edge_labels: usize,
    /// Whether a MASK label is appended to both vocabularies.
    pub has_mask: bool,
    pub n_min: usize,
    pub n_max: usize,
}

impl GraphSchema {
    pub fn new(node_labels: usize, edge_labels: usize, has_mask: bool, n_min: usize, n_max: usize) -> Result<Self> {
        if node_labels < 1 {
            return Err(Error::Domain("schema needs at least one node label".into()));
        }
        if edge_labels < 2 {
            return Err(Error::Domain("schema needs no-edge plus at least one edge label".into()));
        }
        if n_min < 1 || n_min > n_max {
            return Err(Error::Domain(format!("invalid size bounds [{n_min}, {n_max}]")));
        }
        Ok(Self { node_labels, edge_labels, has_mask, n_min, n_max })
    }

    /// Node vocabulary size including MASK when present.
    pub fn node_vocab(&self) -> usize {
        self.node_labels + usize::from(self.has_mask)
    }

    pub fn edge_vocab(&self) -> usize {
        self.edge_labels + usize::from(self.has_mask)
    }

    pub fn node_mask(&self) -> Option<usize> {
        self.has_mask.then_some(self.node_labels)
    }

    pub fn edge_mask(&self) -> Option<usize> {
        self.has_mask.then_some(self.edge_labels)
    }

    pub fn with_mask(mut self, has_mask: bool) -> Self {
        self.has_mask = has_mask;
        self
    }

    pub fn vocab(&self, kind: SlotKind) -> usize {
        match kind {
            SlotKind::Node => self.node_vocab(),
            SlotKind::Edge => self.edge_vocab(),
        }
    }

    pub fn clean_vocab(&self, kind: SlotKind) -> usize {
        match kind {
            SlotKind::Node => self.node_labels,
            SlotKind::Edge => self.edge_labels,
        }
    }

    pub fn mask(&self, kind: SlotKind) -> Option<usize> {
        match kind {
            SlotKind::Node => self.node_mask(),
            SlotKind::Edge => self.edge_mask(),
        }
    }

    /// Checks that every label of `g` is inside the (possibly masked) vocabulary.
    pub fn check(&self, g: &GraphInstance) -> Result<()> {
        if let Some(&l) = g.nodes.iter().find(|&&l| l >= self.node_vocab()) {
            return Err(Error::Domain(format!("node label {l} outside vocabulary")));
        }
        if let Some(&l) = g.edges.iter().find(|&&l| l >= self.edge_vocab()) {
            return Err(Error::Domain(format!("edge label {l} outside vocabulary")));
        }
        Ok(())
    }

    pub fn contains_mask(&self, g: &GraphInstance) -> bool {
        self.has_mask
            && (g.nodes.contains(&self.node_labels) || g.edges.contains(&self.edge_labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotKind {
    Node,
    Edge,
}

/// Number of unordered node pairs.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Row-major upper-triangle index of the unordered pair `{i, j}`, `i != j`.
pub fn pair_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < n && j < n);
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    a * n - a * (a + 1) / 2 + (b - a - 1)
}

/// All pairs `(i, j)`, `i < j`, in slot order.
pub fn pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(pair_count(n));
    for i in 0..n {
        for j in i + 1..n {
            out.push((i, j));
        }
    }
    out
}

/// A graph instance `Z`: node labels plus upper-triangle edge labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GraphInstance {
    nodes: Vec<usize>,
    edges: Vec<usize>,
}

impl GraphInstance {
    pub fn new(nodes: Vec<usize>, edges: Vec<usize>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Domain("graph needs at least one node".into()));
        }
        let m = pair_count(nodes.len());
        if edges.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: edges.len() });
        }
        Ok(Self { nodes, edges })
    }

    /// Every node labelled `node`, every pair labelled `edge`.
    pub fn filled(n: usize, node: usize, edge: usize) -> Self {
        Self { nodes: vec![node; n], edges: vec![edge; pair_count(n)] }
    }

    /// Builds from a full matrix, which must be symmetric with a no-edge diagonal.
    pub fn from_matrix(nodes: Vec<usize>, matrix: &[Vec<usize>]) -> Result<Self> {
        let n = nodes.len();
        if matrix.len() != n || matrix.iter().any(|row| row.len() != n) {
            return Err(Error::DimensionMismatch { expected: n, got: matrix.len() });
        }
        for i in 0..n {
            if matrix[i][i] != NO_EDGE {
                return Err(Error::Domain(format!("diagonal entry ({i},{i}) must be no-edge")));
            }
            for j in 0..n {
                if matrix[i][j] != matrix[j][i] {
                    return Err(Error::Domain(format!("edge matrix not symmetric at ({i},{j})")));
                }
            }
        }
        let edges = pairs(n).into_iter().map(|(i, j)| matrix[i][j]).collect();
        Self::new(nodes, edges)
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn slot_count(&self) -> usize {
        self.n() + self.m()
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Upper-triangle edge labels in slot order.
    pub fn edges(&self) -> &[usize] {
        &self.edges
    }

    pub fn node(&self, i: usize) -> usize {
        self.nodes[i]
    }

    /// Edge label between `i` and `j`; the diagonal reads as no-edge.
    pub fn edge(&self, i: usize, j: usize) -> usize {
        if i == j {
            NO_EDGE
        } else {
            self.edges[pair_index(self.n(), i, j)]
        }
    }

    pub fn set_node(&mut self, i: usize, label: usize) {
        self.nodes[i] = label;
    }

    /// Writes both mirror entries of the pair.
    pub fn set_edge(&mut self, i: usize, j: usize, label: usize) {
        let k = pair_index(self.n(), i, j);
        self.edges[k] = label;
    }

    /// Slot `k`: nodes first, then edges in upper-triangle order.
    pub fn slot(&self, k: usize) -> usize {
        if k < self.n() {
            self.nodes[k]
        } else {
            self.edges[k - self.n()]
        }
    }

    pub fn set_slot(&mut self, k: usize, label: usize) {
        let n = self.n();
        if k < n {
            self.nodes[k] = label;
        } else {
            self.edges[k - n] = label;
        }
    }

    pub fn slot_kind(&self, k: usize) -> SlotKind {
        if k < self.n() {
            SlotKind::Node
        } else {
            SlotKind::Edge
        }
    }

    pub fn edge_matrix(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        (0..n).map(|i| (0..n).map(|j| self.edge(i, j)).collect()).collect()
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        assert_eq!(perm.len(), n, "permutation length must equal node count");
        let mut nodes = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            nodes[p] = self.nodes[i];
        }
        let mut out = Self { nodes, edges: vec![NO_EDGE; self.m()] };
        for (k, (i, j)) in pairs(n).into_iter().enumerate() {
            out.set_edge(perm[i], perm[j], self.edges[k]);
        }
        out
    }

    /// Number of incident pairs whose label is not no-edge.
    pub fn degree(&self, i: usize) -> usize {
        (0..self.n()).filter(|&j| j != i && self.edge(i, j) != NO_EDGE).count()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if !seen[v] && v != u && self.edge(u, v) != NO_EDGE {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == n
    }
}

/// Per-slot corruption indicators `A_t`; `true` means kept (`a = 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionMask {
    pub nodes: Vec<bool>,
    /// Upper-triangle flags, mirrored for both matrix entries.
    pub edges: Vec<bool>,
}

impl CorruptionMask {
    pub fn all(n: usize, kept: bool) -> Self {
        Self { nodes: vec![kept; n], edges: vec![kept; pair_count(n)] }
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn slot_count(&self) -> usize {
        self.nodes.len() + self.edges.len()
    }

    pub fn slot(&self, k: usize) -> bool {
        let n = self.n();
        if k < n {
            self.nodes[k]
        } else {
            self.edges[k - n]
        }
    }

    pub fn set_slot(&mut self, k: usize, kept: bool) {
        let n = self.n();
        if k < n {
            self.nodes[k] = kept;
        } else {
            self.edges[k - n] = kept;
        }
    }

    pub fn edge(&self, i: usize, j: usize) -> bool {
        self.edges[pair_index(self.n(), i, j)]
    }

    pub fn kept_count(&self) -> usize {
        self.nodes.iter().chain(&self.edges).filter(|&&a| a).count()
    }
}

/// `(n, m)` with `m = n(n-1)/2`.
pub fn element_count(g: &GraphInstance) -> (usize, usize) {
    (g.n(), g.m())
}

/// Node/edge loss weight `n / (n + m)`.
pub fn default_gamma(g: &GraphInstance) -> f64 {
    let (n, m) = element_count(g);
    n as f64 / (n + m) as f64
}

/// Valence table and bond orders for the toy molecule family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoleculeParams {
    /// Required bond-order sum per node label.
    pub valences: Vec<u32>,
    /// Bond order per edge label; index 0 is no-edge and must be 0.
    pub bond_orders: Vec<u32>,
    pub n_min: usize,
    pub n_max: usize,
}

impl Default for MoleculeParams {
    fn default() -> Self {
        Self { valences: vec![1, 2, 3, 4], bond_orders: vec![0, 1, 2], n_min: 3, n_max: 8 }
    }
}

impl MoleculeParams {
    pub fn with_size(mut self, n_min: usize, n_max: usize) -> Self {
        self.n_min = n_min;
        self.n_max = n_max;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.valences.is_empty() || self.valences.iter().any(|&v| v > 255) {
            return Err(Error::Domain("valences must be non-empty and at most 255".into()));
        }
        if self.bond_orders.len() < 2 || self.bond_orders[0] != 0 {
            return Err(Error::Domain("bond orders need no-edge = 0 plus at least one bond".into()));
        }
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(Error::Domain(format!("invalid size bounds [{}, {}]", self.n_min, self.n_max)));
        }
        Ok(())
    }
}

/// Toy graph families with analytic validity rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyFamily {
    /// Connected triangle-free graphs on four unlabeled nodes.
    TriangleFree4,
    /// Connected graphs whose incident bond orders sum exactly to each node's valence.
    ToyMolecule(MoleculeParams),
}

impl ToyFamily {
    pub fn toy_molecule() -> Self {
        Self::ToyMolecule(MoleculeParams::default())
    }

    pub fn schema(&self, has_mask: bool) -> GraphSchema {
        match self {
            ToyFamily::TriangleFree4 => GraphSchema {
                node_labels: 1,
                edge_labels: 2,
                has_mask,
                n_min: 4,
                n_max: 4,
            },
            ToyFamily::ToyMolecule(p) => GraphSchema {
                node_labels: p.valences.len(),
                edge_labels: p.bond_orders.len(),
                has_mask,
                n_min: p.n_min,
                n_max: p.n_max,
            },
        }
    }
}

/// Validity rule of `family`. Rejects graphs carrying MASK labels.
pub fn is_valid(g: &GraphInstance, family: &ToyFamily) -> Result<bool> {
    let schema = family.schema(false);
    for &l in g.nodes() {
        if l == schema.node_labels {
            return Err(Error::MaskLabelPresent);
        }
        if l > schema.node_labels {
            return Err(Error::Domain(format!("node label {l} outside vocabulary")));
        }
    }
    for &l in g.edges() {
        if l == schema.edge_labels {
            return Err(Error::MaskLabelPresent);
        }
        if l > schema.edge_labels {
            return Err(Error::Domain(format!("edge label {l} outside vocabulary")));
        }
    }
    match family {
        ToyFamily::TriangleFree4 => {
            let n = g.n();
            if n != 4 || !g.is_connected() {
                return Ok(false);
            }
            for a in 0..n {
                for b in a + 1..n {
                    for c in b + 1..n {
                        if g.edge(a, b) != NO_EDGE && g.edge(b, c) != NO_EDGE && g.edge(a, c) != NO_EDGE {
                            return Ok(false);
                        }
                    }
                }
            }
            Ok(true)
        }
        ToyFamily::ToyMolecule(p) => {
            for i in 0..g.n() {
                let sum: u32 = (0..g.n()).filter(|&j| j != i).map(|j| p.bond_orders[g.edge(i, j)]).sum();
                if sum != p.valences[g.node(i)] {
                    return Ok(false);
                }
            }
            Ok(g.is_connected())
        }
    }
}

/// Every valid instance with uniform probability.
///
/// Molecule families must have a fixed size (`n_min == n_max`) for enumeration.
pub fn enumerate_family(family: &ToyFamily) -> Result<Vec<(GraphInstance, f64)>> {
    let schema = family.schema(false);
    if schema.n_min != schema.n_max {
        return Err(Error::Domain("enumeration needs a fixed graph size".into()));
    }
    let n = schema.n_min;
    let m = pair_count(n);
    let size = (schema.node_labels as u128).pow(n as u32) * (schema.edge_labels as u128).pow(m as u32);
    if size > ENUMERATION_LIMIT {
        return Err(Error::StateSpaceTooLarge { size, limit: ENUMERATION_LIMIT });
    }
    let mut valid = Vec::new();
    let mut labels = vec![0usize; n + m];
    let radix: Vec<usize> = (0..n + m)
        .map(|k| if k < n { schema.node_labels } else { schema.edge_labels })
        .collect();
    loop {
        let g = GraphInstance::new(labels[..n].to_vec(), labels[n..].to_vec())?;
        if is_valid(&g, family)? {
            valid.push(g);
        }
        // Odometer increment, last slot fastest.
        let mut k = n + m;
        loop {
            if k == 0 {
                let p = 1.0 / valid.len().max(1) as f64;
                if valid.is_empty() {
                    return Err(Error::EmptyFamily);
                }
                return Ok(valid.into_iter().map(|g| (g, p)).collect());
            }
            k -= 1;
            labels[k] += 1;
            if labels[k] < radix[k] {
                break;
            }
            labels[k] = 0;
        }
    }
}

/// Draws `count` valid instances, sizes uniform on `[n_min, n_max]` and uniform
/// over valid instances within a size.
pub fn generate_dataset(family: &ToyFamily, count: usize, rng: &mut RngStream) -> Result<Vec<GraphInstance>> {
    if count == 0 {
        return Err(Error::Domain("dataset count must be at least 1".into()));
    }
    match family {
        ToyFamily::TriangleFree4 => {
            let mut out = Vec::with_capacity(count);
            let mut attempts = 0u64;
            while out.len() < count {
                attempts += 1;
                let edges = (0..6).map(|_| rng.below(2)).collect();
                let g = GraphInstance::new(vec![0; 4], edges)?;
                if is_valid(&g, family)? {
                    out.push(g);
                }
                if attempts > 1_000_000 && out.is_empty() {
                    return Err(Error::AcceptanceRateTooLow("no valid graph in 10^6 draws".into()));
                }
            }
            Ok(out)
        }
        ToyFamily::ToyMolecule(p) => {
            p.validate()?;
            let mut sampler = MoleculeSampler::new(p.clone());
            (0..count).map(|_| sampler.sample(rng)).collect()
        }
    }
}

/// Attempts per accepted molecule before the family is declared infeasible.
const MAX_CONNECTIVITY_ATTEMPTS: u64 = 1_000_000;

/// Exact uniform sampler over valence-satisfying labelled graphs of a given size.
///
/// Counts edge assignments meeting every node's valence with a memoized pass over
/// the pairs, draws a sorted label multiset in proportion to its number of
/// arrangements times its count, samples edges uniformly by walking the same
/// counts, applies a uniform node permutation and finally rejects disconnected
/// graphs.
struct MoleculeSampler {
    params: MoleculeParams,
    by_size: BTreeMap<usize, SizeTable>,
}

struct SizeTable {
    multisets: Vec<Vec<usize>>,
    cumulative: Vec<f64>,
    counters: Vec<DegreeCounter>,
}

impl MoleculeSampler {
    fn new(params: MoleculeParams) -> Self {
        Self { params, by_size: BTreeMap::new() }
    }

    fn table(&mut self, n: usize) -> &mut SizeTable {
        let params = &self.params;
        self.by_size.entry(n).or_insert_with(|| {
            let d = params.valences.len();
            let mut multisets = Vec::new();
            let mut cumulative = Vec::new();
            let mut counters = Vec::new();
            let mut total = 0.0;
            for ms in multisets_of(n, d) {
                let valences: Vec<u8> = ms.iter().map(|&l| params.valences[l] as u8).collect();
                let mut counter = DegreeCounter::new(n, params.bond_orders.clone(), valences);
                let c = counter.total();
                if c > 0.0 {
                    total += c * arrangements(&ms, d);
                    multisets.push(ms);
                    cumulative.push(total);
                    counters.push(counter);
                }
            }
            SizeTable { multisets, cumulative, counters }
        })
    }

    fn sample(&mut self, rng: &mut RngStream) -> Result<GraphInstance> {
        let feasible: Vec<usize> = (self.params.n_min..=self.params.n_max)
            .filter(|&n| !self.table(n).multisets.is_empty())
            .collect();
        if feasible.is_empty() {
            return Err(Error::AcceptanceRateTooLow(
                "no size in range admits a valence-satisfying graph".into(),
            ));
        }
        // Sizes are uniform over the requested range; sizes with no valid
        // instance are redrawn.
        let span = self.params.n_max - self.params.n_min + 1;
        let n = loop {
            let n = self.params.n_min + rng.below(span);
            if feasible.contains(&n) {
                break n;
            }
        };
        let d = self.params.valences.len();
        let table = self.table(n);
        for _ in 0..MAX_CONNECTIVITY_ATTEMPTS {
            let total = *table.cumulative.last().expect("non-empty table");
            let u = rng.uniform() * total;
            let idx = table.cumulative.partition_point(|&c| c <= u).min(table.cumulative.len() - 1);
            let labels = table.multisets[idx].clone();
            let edges = table.counters[idx].sample_edges(rng);
            debug_assert!(labels.iter().all(|&l| l < d));
            let sorted = GraphInstance::new(labels, edges)?;
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let g = sorted.permuted(&perm);
            if g.is_connected() {
                return Ok(g);
            }
        }
        Err(Error::AcceptanceRateTooLow(format!(
            "no connected molecule of size {n} in {MAX_CONNECTIVITY_ATTEMPTS} draws"
        )))
    }
}

fn multisets_of(n: usize, d: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, d: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(cur.clone());
            return;
        }
        for l in start..d {
            cur.push(l);
            rec(l, d, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, d, n, &mut Vec::new(), &mut out);
    out
}

/// Number of distinct label vectors with the same multiset.
fn arrangements(ms: &[usize], d: usize) -> f64 {
    let mut counts = vec![0usize; d];
    for &l in ms {
        counts[l] += 1;
    }
    let fact = |k: usize| (1..=k).map(|x| x as f64).product::<f64>();
    fact(ms.len()) / counts.iter().map(|&c| fact(c)).product::<f64>()
}

/// Counts edge-label assignments whose bond sums hit each node's residual valence.
struct DegreeCounter {
    n: usize,
    pairs: Vec<(usize, usize)>,
    bonds: Vec<u32>,
    start: Vec<u8>,
    memo: HashMap<(usize, Vec<u8>), f64>,
}

impl DegreeCounter {
    fn new(n: usize, bonds: Vec<u32>, valences: Vec<u8>) -> Self {
        Self { n, pairs: pairs(n), bonds, start: valences, memo: HashMap::new() }
    }

    fn total(&mut self) -> f64 {
        let mut r = self.start.clone();
        self.count(0, &mut r)
    }

    /// Residual after placing `label` on pair `p`, or `None` if infeasible.
    fn step(&self, p: usize, label: usize, resid: &[u8]) -> Option<Vec<u8>> {
        let (i, j) = self.pairs[p];
        let b = self.bonds[label];
        if b > resid[i] as u32 || b > resid[j] as u32 {
            return None;
        }
        let mut r = resid.to_vec();
        r[i] -= b as u8;
        r[j] -= b as u8;
        // Pair (i, n-1) closes row i: node i has no later pairs.
        if j == self.n - 1 && r[i] != 0 {
            return None;
        }
        Some(r)
    }

    fn count(&mut self, p: usize, resid: &mut [u8]) -> f64 {
        if p == self.pairs.len() {
            return if resid.iter().all(|&r| r == 0) { 1.0 } else { 0.0 };
        }
        if let Some(&c) = self.memo.get(&(p, resid.to_vec())) {
            return c;
        }
        let mut total = 0.0;
        for label in 0..self.bonds.len() {
            if let Some(mut r) = self.step(p, label, resid) {
                total += self.count(p + 1, &mut r);
            }
        }
        self.memo.insert((p, resid.to_vec()), total);
        total
    }

    fn sample_edges(&mut self, rng: &mut RngStream) -> Vec<usize> {
        let mut resid = self.start.clone();
        let mut edges = Vec::with_capacity(self.pairs.len());
        for p in 0..self.pairs.len() {
            let options: Vec<(usize, Vec<u8>, f64)> = (0..self.bonds.len())
                .filter_map(|label| {
                    let mut r = self.step(p, label, &resid)?;
                    let c = self.count(p + 1, &mut r);
                    (c > 0.0).then_some((label, r, c))
                })
                .collect();
            let total: f64 = options.iter().map(|o| o.2).sum();
            let mut u = rng.uniform() * total;
            let mut chosen = options.len() - 1;
            for (k, o) in options.iter().enumerate() {
                if u < o.2 {
                    chosen = k;
                    break;
                }
                u -= o.2;
            }
            let (label, r, _) = options.into_iter().nth(chosen).expect("non-empty options");
            edges.push(label);
            resid = r;
        }
        edges
    }
}

/// Empirical distribution of graph sizes, used to draw `n` at generation time.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeHistogram {
    sizes: Vec<usize>,
    cumulative: Vec<f64>,
}

impl SizeHistogram {
    pub fn from_dataset(dataset: &[GraphInstance]) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Domain("size histogram needs a non-empty dataset".into()));
        }
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for g in dataset {
            *counts.entry(g.n()).or_default() += 1;
        }
        Ok(Self::from_counts(counts))
    }

    pub fn fixed(n: usize) -> Self {
        Self::from_counts(BTreeMap::from([(n, 1)]))
    }

    fn from_counts(counts: BTreeMap<usize, usize>) -> Self {
        let total: usize = counts.values().sum();
        let mut acc = 0usize;
        let mut sizes = Vec::new();
        let mut cumulative = Vec::new();
        for (n, c) in counts {
            acc += c;
            sizes.push(n);
            cumulative.push(acc as f64 / total as f64);
        }
        Self { sizes, cumulative }
    }

    pub fn sample(&self, rng: &mut RngStream) -> usize {
        let u = rng.uniform();
        let idx = self.cumulative.partition_point(|&c| c <= u).min(self.sizes.len() - 1);
        self.sizes[idx]
    }
}

pub const GRAPHS_FORMAT: &str = "sidlab-graphs";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format: String,
    version: u32,
}

#[derive(Serialize, Deserialize)]
struct GraphRecord {
    n: usize,
    x: Vec<usize>,
    e_upper: Vec<usize>,
}

/// Writes the versioned JSON-lines dataset format.
pub fn write_graphs<W: Write>(mut w: W, graphs: &[GraphInstance]) -> Result<()> {
    let header = FileHeader { format: GRAPHS_FORMAT.into(), version: FORMAT_VERSION };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for g in graphs {
        let rec = GraphRecord { n: g.n(), x: g.nodes.clone(), e_upper: g.edges.clone() };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(())
}

pub fn read_graphs<R: BufRead>(r: R) -> Result<Vec<GraphInstance>> {
    let mut lines = r.lines();
    let header: FileHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Format("empty graph file".into())),
    };
    if header.format != GRAPHS_FORMAT || header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported graph file {} v{}",
            header.format, header.version
        )));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line)?;
        if rec.x.len() != rec.n {
            return Err(Error::Format(format!("record declares n={} but has {} node labels", rec.n, rec.x.len())));
        }
        out.push(GraphInstance::new(rec.x, rec.e_upper)?);
    }
    Ok(out)
}

pub fn save_graphs(path: &std::path::Path, graphs: &[GraphInstance]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_graphs(&mut w, graphs)?;
    w.flush()?;
    Ok(())
}

pub fn load_graphs(path: &std::path::Path) -> Result<Vec<GraphInstance>> {
    let f = std::fs::File::open(path)?;
    read_graphs(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mol(nodes: Vec<usize>, bonds: &[(usize, usize, usize)]) -> GraphInstance {
        let mut g = GraphInstance::filled(nodes.len(), 0, NO_EDGE);
        for (i, &l) in nodes.iter().enumerate() {
            g.set_node(i, l);
        }
        for &(i, j, l) in bonds {
            g.set_edge(i, j, l);
        }
        g
    }

    #[test]
    fn pair_index_matches_slot_order() {
        for n in 1..9 {
            for (k, (i, j)) in pairs(n).into_iter().enumerate() {
                assert_eq!(pair_index(n, i, j), k);
                assert_eq!(pair_index(n, j, i), k);
            }
        }
    }

    #[test]
    fn element_counts() {
        let g4 = GraphInstance::filled(4, 0, 0);
        assert_eq!(element_count(&g4), (4, 6));
        assert!((default_gamma(&g4) - 0.4).abs() < 1e-15);
        let g1 = GraphInstance::filled(1, 0, 0);
        assert_eq!(element_count(&g1), (1, 0));
        assert_eq!(default_gamma(&g1), 1.0);
        assert_eq!(element_count(&GraphInstance::filled(9, 0, 0)), (9, 36));
    }

    #[test]
    fn molecule_validity_examples() {
        let family = ToyFamily::toy_molecule();
        // A(1) - B(2) - A(1), single bonds.
        let path = mol(vec![0, 1, 0], &[(0, 1, 1), (1, 2, 1)]);
        assert!(is_valid(&path, &family).unwrap());
        // Triangle of valence-1 atoms.
        let tri = mol(vec![0, 0, 0], &[(0, 1, 1), (1, 2, 1), (0, 2, 1)]);
        assert!(!is_valid(&tri, &family).unwrap());
        let lone = mol(vec![1], &[]);
        assert!(!is_valid(&lone, &family).unwrap());
        let masked = mol(vec![4, 0], &[(0, 1, 1)]);
        assert!(matches!(is_valid(&masked, &family), Err(Error::MaskLabelPresent)));
    }

    #[test]
    fn from_matrix_rejects_asymmetry() {
        let bad = vec![vec![0, 1], vec![0, 0]];
        assert!(GraphInstance::from_matrix(vec![0, 0], &bad).is_err());
        let good = vec![vec![0, 1], vec![1, 0]];
        let g = GraphInstance::from_matrix(vec![0, 0], &good).unwrap();
        assert_eq!(g.edge_matrix(), good);
    }

    #[test]
    fn enumerate_degenerate_molecule_is_empty() {
        let family = ToyFamily::ToyMolecule(MoleculeParams {
            valences: vec![1],
            bond_orders: vec![0, 1],
            n_min: 1,
            n_max: 1,
        });
        assert!(matches!(enumerate_family(&family), Err(Error::EmptyFamily)));
    }

    #[test]
    fn enumeration_refuses_huge_spaces() {
        let family = ToyFamily::ToyMolecule(MoleculeParams::default().with_size(6, 6));
        assert!(matches!(enumerate_family(&family), Err(Error::StateSpaceTooLarge { .. })));
    }

    #[test]
    fn molecule_sampler_counts_match_enumeration() {
        // The counter's total over all multisets must match brute force.
        let p = MoleculeParams::default().with_size(4, 4);
        let family = ToyFamily::ToyMolecule(p.clone());
        let enumerated = enumerate_family(&family).unwrap();
        let mut sampler = MoleculeSampler::new(p);
        let table = sampler.table(4);
        let degree_feasible = *table.cumulative.last().unwrap();
        assert!(degree_feasible >= enumerated.len() as f64);
        let mut rng = RngStream::new(1, 1);
        for _ in 0..200 {
            let g = sampler.sample(&mut rng).unwrap();
            assert!(is_valid(&g, &family).unwrap());
        }
    }

    #[test]
    fn molecule_dataset_at_default_sizes_is_valid() {
        let family = ToyFamily::toy_molecule();
        let mut rng = RngStream::new(2, 0);
        let data = generate_dataset(&family, 300, &mut rng).unwrap();
        assert!(data.iter().all(|g| is_valid(g, &family).unwrap()));
        let sizes: std::collections::BTreeSet<usize> = data.iter().map(|g| g.n()).collect();
        assert_eq!(sizes.into_iter().collect::<Vec<_>>(), vec![3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn infeasible_family_reports_low_acceptance() {
        let family = ToyFamily::ToyMolecule(MoleculeParams {
            valences: vec![3],
            bond_orders: vec![0, 1],
            n_min: 2,
            n_max: 2,
        });
        let mut rng = RngStream::new(0, 0);
        assert!(matches!(generate_dataset(&family, 1, &mut rng), Err(Error::AcceptanceRateTooLow(_))));
    }

    #[test]
    fn graph_file_roundtrip_and_header() {
        let g = mol(vec![0, 1, 0], &[(0, 1, 1), (1, 2, 1)]);
        let mut buf = Vec::new();
        write_graphs(&mut buf, std::slice::from_ref(&g)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(
            text,
            "{\"format\":\"sidlab-graphs\",\"version\":1}\n{\"n\":3,\"x\":[0,1,0],\"e_upper\":[1,0,1]}\n"
        );
        assert_eq!(read_graphs(&buf[..]).unwrap(), vec![g]);
        assert!(read_graphs(&b"{\"format\":\"other\",\"version\":1}\n"[..]).is_err());
    }

    #[test]
    fn size_histogram_follows_dataset() {
        let data = vec![GraphInstance::filled(3, 0, 0), GraphInstance::filled(5, 0, 0), GraphInstance::filled(5, 0, 0)];
        let h = SizeHistogram::from_dataset(&data).unwrap();
        let mut rng = RngStream::new(0, 1);
        let fives = (0..30_000).filter(|_| h.sample(&mut rng) == 5).count() as f64 / 30_000.0;
        assert!((fives - 2.0 / 3.0).abs() < 0.02);
    }
}
