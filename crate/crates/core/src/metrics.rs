//! Sample-quality metrics: validity, uniqueness and novelty up to isomorphism,
//! and total variation between degree histograms.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{is_valid, GraphInstance, ToyFamily, NO_EDGE};

/// Largest size with exact canonicalization (at most 8! orderings).
pub const EXACT_CANONICAL_MAX_N: usize = 8;

/// Isomorphism-invariant code of a graph. `exact` is false when the code only
/// summarizes invariants, so distinct graphs may collide.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CanonicalForm {
    pub exact: bool,
    pub code: Vec<usize>,
}

/// Node label followed by its sorted incident edge labels.
fn node_invariants(g: &GraphInstance) -> Vec<Vec<usize>> {
    (0..g.n())
        .map(|i| {
            let mut inc: Vec<usize> = (0..g.n()).filter(|&j| j != i).map(|j| g.edge(i, j)).collect();
            inc.sort_unstable();
            let mut v = vec![g.node(i)];
            v.extend(inc);
            v
        })
        .collect()
}

/// Rearranges `v` into its next lexicographic permutation; false once wrapped around.
fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        v.reverse();
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Lexicographically smallest label string over all node orderings that sort
/// nodes by invariant (exact for `n <= 8`); a sorted invariant summary above.
pub fn canonical_form(g: &GraphInstance) -> CanonicalForm {
    let n = g.n();
    let inv = node_invariants(g);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| inv[a].cmp(&inv[b]));
    let mut head = vec![n];
    head.extend(order.iter().map(|&i| g.node(i)));

    if n > EXACT_CANONICAL_MAX_N {
        let rank = |i: usize| order.iter().position(|&o| inv[o] == inv[i]).expect("node present");
        let mut triples: Vec<[usize; 3]> = crate::graph::pairs(n)
            .into_iter()
            .map(|(i, j)| {
                let (a, b) = (rank(i), rank(j));
                [a.min(b), a.max(b), g.edge(i, j)]
            })
            .collect();
        triples.sort_unstable();
        let mut sorted_inv = inv.clone();
        sorted_inv.sort();
        head.extend(sorted_inv.into_iter().flatten());
        head.extend(triples.into_iter().flatten());
        return CanonicalForm { exact: false, code: head };
    }

    // groups of equal invariant, in sorted order
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        match groups.last_mut() {
            Some(gr) if inv[gr[0]] == inv[i] => gr.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups.iter_mut().for_each(|gr| gr.sort_unstable());
    let mut best: Option<Vec<usize>> = None;
    loop {
        let ord: Vec<usize> = groups.iter().flatten().copied().collect();
        let edges: Vec<usize> = crate::graph::pairs(n).into_iter().map(|(a, b)| g.edge(ord[a], ord[b])).collect();
        if best.as_ref().is_none_or(|b| edges < *b) {
            best = Some(edges);
        }
        // odometer over per-group permutations
        let mut advanced = false;
        for gr in groups.iter_mut().rev() {
            if next_permutation(gr) {
                advanced = true;
                break;
            }
        }
        if !advanced {
            break;
        }
    }
    head.extend(best.unwrap_or_default());
    CanonicalForm { exact: true, code: head }
}

/// `0.5 * sum |p - q|` after normalizing both histograms.
pub fn tv_distance(h1: &[f64], h2: &[f64]) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(Error::DimensionMismatch { expected: h1.len(), got: h2.len() });
    }
    let (s1, s2): (f64, f64) = (h1.iter().sum(), h2.iter().sum());
    if s1 <= 0.0 || s2 <= 0.0 || h1.iter().chain(h2).any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::Domain("histograms need non-negative entries and positive mass".into()));
    }
    Ok(0.5 * h1.iter().zip(h2).map(|(a, b)| (a / s1 - b / s2).abs()).sum::<f64>())
}

/// Counts of node degrees (number of non-empty incident edges), padded to `len`.
pub fn degree_histogram(graphs: &[GraphInstance], len: usize) -> Vec<f64> {
    let mut h = vec![0.0; len];
    for g in graphs {
        for i in 0..g.n() {
            let d = (0..g.n()).filter(|&j| j != i && g.edge(i, j) != NO_EDGE).count();
            if d >= h.len() {
                h.resize(d + 1, 0.0);
            }
            h[d] += 1.0;
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchMetrics {
    pub validity: f64,
    pub unique: f64,
    pub novel: f64,
    pub degree_tv: f64,
    /// True when some graph was too large for exact canonicalization.
    pub approximate: bool,
}

/// Validity, uniqueness, novelty (among unique samples) and degree TV of `samples`.
pub fn evaluate_batch(samples: &[GraphInstance], dataset: &[GraphInstance], family: &ToyFamily) -> Result<BatchMetrics> {
    if samples.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty batch".into()));
    }
    let count = samples.len() as f64;
    let mut valid = 0usize;
    for g in samples {
        valid += usize::from(is_valid(g, family)?);
    }
    let forms: Vec<CanonicalForm> = samples.iter().map(canonical_form).collect();
    let approximate = forms.iter().any(|f| !f.exact);
    let distinct: BTreeSet<&CanonicalForm> = forms.iter().collect();
    let train: BTreeSet<CanonicalForm> = dataset.iter().map(canonical_form).collect();
    let novel = distinct.iter().filter(|f| !train.contains(**f)).count();
    let max_n = samples.iter().chain(dataset).map(|g| g.n()).max().unwrap_or(1);
    let (hs, hd) = (degree_histogram(samples, max_n), degree_histogram(dataset, max_n));
    let degree_tv = if dataset.is_empty() { 1.0 } else { tv_distance(&hs, &hd)? };
    Ok(BatchMetrics {
        validity: valid as f64 / count,
        unique: distinct.len() as f64 / count,
        novel: novel as f64 / distinct.len() as f64,
        degree_tv,
        approximate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_dataset, pair_count};
    use crate::prob::RngStream;
    use proptest::prelude::*;

    fn random_graph(n: usize, labels: usize, rng: &mut RngStream) -> GraphInstance {
        let nodes = (0..n).map(|_| rng.below(labels)).collect();
        let edges = (0..pair_count(n)).map(|_| rng.below(3)).collect();
        GraphInstance::new(nodes, edges).unwrap()
    }

    fn isomorphic(a: &GraphInstance, b: &GraphInstance) -> bool {
        if a.n() != b.n() {
            return false;
        }
        let mut perm: Vec<usize> = (0..a.n()).collect();
        loop {
            if a.permuted(&perm) == *b {
                return true;
            }
            if !next_permutation(&mut perm) {
                return false;
            }
        }
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((tv_distance(&[0.7, 0.3], &[0.4, 0.6]).unwrap() - 0.3).abs() < 1e-12);
        assert!(tv_distance(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn canonical_form_agrees_with_brute_force_isomorphism() {
        let mut rng = RngStream::new(0, 0);
        for _ in 0..300 {
            let n = 2 + rng.below(5);
            let a = random_graph(n, 2, &mut rng);
            let b = if rng.bernoulli(0.5) {
                let mut perm: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut perm);
                a.permuted(&perm)
            } else {
                random_graph(n, 2, &mut rng)
            };
            assert_eq!(canonical_form(&a) == canonical_form(&b), isomorphic(&a, &b));
        }
    }

    #[test]
    fn large_graphs_are_flagged_approximate() {
        let mut rng = RngStream::new(1, 0);
        let g = random_graph(9, 2, &mut rng);
        let mut perm: Vec<usize> = (0..9).collect();
        rng.shuffle(&mut perm);
        let (f1, f2) = (canonical_form(&g), canonical_form(&g.permuted(&perm)));
        assert!(!f1.exact);
        assert_eq!(f1, f2);
    }

    #[test]
    fn batch_examples() {
        let family = ToyFamily::toy_molecule();
        let mut rng = RngStream::new(2, 0);
        let data = generate_dataset(&family, 30, &mut rng).unwrap();
        let m = evaluate_batch(&data, &data, &family).unwrap();
        assert_eq!((m.validity, m.novel, m.degree_tv), (1.0, 0.0, 0.0));

        // three valid chains and one invalid graph
        let ok = |nodes: Vec<usize>, edges: Vec<usize>| GraphInstance::new(nodes, edges).unwrap();
        let batch = vec![
            ok(vec![0, 0], vec![1]),
            ok(vec![1, 1], vec![2]),
            ok(vec![0, 1, 0], vec![1, 0, 1]),
            ok(vec![0, 0], vec![0]),
        ];
        let family = ToyFamily::ToyMolecule(crate::graph::MoleculeParams::default().with_size(2, 3));
        let larger: Vec<_> = data.iter().filter(|g| g.n() > 3).cloned().collect();
        let m = evaluate_batch(&batch, &larger, &family).unwrap();
        assert_eq!(m.validity, 0.75);
        assert_eq!((m.unique, m.novel), (1.0, 1.0));
        assert!(evaluate_batch(&[], &data, &family).is_err());
    }

    proptest! {
        #[test]
        fn canonical_form_is_permutation_invariant(seed in 0u64..1000, n in 1usize..9) {
            let mut rng = RngStream::new(seed, 7);
            let g = random_graph(n, 3, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            prop_assert_eq!(canonical_form(&g), canonical_form(&g.permuted(&perm)));
        }
    }
}
