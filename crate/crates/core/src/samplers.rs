//! Step rules walking the grid `0, 1/T, ..., 1` from noise to data, their exact
//! per-element one-step laws, and the generation loop.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserOutput};
use crate::error::{Error, Result};
use crate::graph::{GraphInstance, SizeHistogram, SlotKind, ENUMERATION_LIMIT};
use crate::noising::{betas_on_grid, compose_forward, noise_graph, noise_graph_at, NoiseSpec};
use crate::prob::{check_unit, mix, CategoricalDist, RngStream, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Sid,
    DdmExact,
    DfmRate,
    Corrector,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sid => "sid",
            Self::DdmExact => "ddm",
            Self::DfmRate => "dfm",
            Self::Corrector => "corrector",
        }
    }
}

/// Step rule, number of function evaluations `T`, noise and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub steps: usize,
    pub noise: NoiseSpec,
    pub schedule: Schedule,
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, steps: usize, noise: NoiseSpec, schedule: Schedule) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("number of steps must be at least 1".into()));
        }
        Ok(Self { kind, steps, noise, schedule })
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// `k / T` for `k = 0..=T`.
    pub fn grid(&self) -> Vec<f64> {
        time_grid(self.steps)
    }
}

pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| k as f64 / steps as f64).collect()
}

fn check_times(t: f64, s: f64) -> Result<()> {
    check_unit(t, "t")?;
    check_unit(s, "s")?;
    if s < t {
        return Err(Error::Domain(format!("step must move towards data: s = {s} < t = {t}")));
    }
    Ok(())
}

/// Predict a clean instance, then re-noise it at `alpha(s)`.
pub fn sid_step(
    z_t: &GraphInstance,
    denoiser: &dyn Denoiser,
    t: f64,
    s: f64,
    noise: &NoiseSpec,
    schedule: &Schedule,
    rng: &mut RngStream,
) -> Result<GraphInstance> {
    check_times(t, s)?;
    let clean = denoiser.predict(z_t, schedule.alpha(t)?)?.sample(rng);
    if s >= 1.0 {
        return Ok(clean);
    }
    Ok(noise_graph_at(&clean, schedule.alpha(s)?, noise, rng)?.0)
}

/// Denoise all the way to `t = 1`, then run the forward process up to `s`.
pub fn corrector_step_maximal(
    z_t: &GraphInstance,
    denoiser: &dyn Denoiser,
    t: f64,
    s: f64,
    noise: &NoiseSpec,
    schedule: &Schedule,
    rng: &mut RngStream,
) -> Result<GraphInstance> {
    check_times(t, s)?;
    let clean = denoiser.predict(z_t, schedule.alpha(t)?)?.sample(rng);
    if s >= 1.0 {
        return Ok(clean);
    }
    Ok(noise_graph(&clean, s, schedule, noise, rng)?.0)
}

/// Forward posterior `q(z_s | z_t, z_1)` over the full (possibly masked) vocabulary,
/// or `None` when `z_t` is impossible given `z_1`.
pub fn forward_posterior(z_t: usize, z1: usize, alpha_t: f64, alpha_s: f64, q0: &CategoricalDist) -> Option<CategoricalDist> {
    // transition s -> t keeps with probability alpha_t / alpha_s
    let keep = if alpha_s > 0.0 { (alpha_t / alpha_s).min(1.0) } else { 1.0 };
    let q = q0.probs();
    let weights: Vec<f64> = (0..q.len())
        .map(|z| {
            let to_t = keep * f64::from(u8::from(z == z_t)) + (1.0 - keep) * q[z_t];
            let from_1 = alpha_s * f64::from(u8::from(z == z1)) + (1.0 - alpha_s) * q[z];
            to_t * from_1
        })
        .collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return None;
    }
    CategoricalDist::from_weights(&weights).ok()
}

/// Classical ancestral step: sample `z_1` per element, then `z_s` from the forward posterior.
/// An element whose `z_t` is impossible under the sampled `z_1` keeps `z_t`.
pub fn ddm_exact_step(
    z_t: &GraphInstance,
    denoiser: &dyn Denoiser,
    t: f64,
    s: f64,
    noise: &NoiseSpec,
    schedule: &Schedule,
    rng: &mut RngStream,
) -> Result<GraphInstance> {
    check_times(t, s)?;
    let (alpha_t, alpha_s) = (schedule.alpha(t)?, schedule.alpha(s)?);
    let out = denoiser.predict(z_t, alpha_t)?;
    let mut z_s = z_t.clone();
    for k in 0..z_t.slot_count() {
        let z1 = out.slot(k).sample(rng);
        let q0 = noise.q0(z_t.slot_kind(k));
        if let Some(post) = forward_posterior(z_t.slot(k), z1, alpha_t, alpha_s, q0) {
            z_s.set_slot(k, post.sample(rng));
        }
    }
    Ok(z_s)
}

/// Jump probability `D_t = dt * alpha'(t) / (1 - alpha(t))`, clamped to `[0, 1]`.
pub fn dfm_rate(t: f64, dt: f64, schedule: &Schedule) -> Result<f64> {
    let alpha = schedule.alpha(t)?;
    if alpha >= 1.0 {
        return Err(Error::Domain(format!("rate step needs alpha(t) < 1, got t = {t}")));
    }
    Ok((dt * schedule.alpha_dot(t)? / (1.0 - alpha)).clamp(0.0, 1.0))
}

/// Per element: resample from the denoiser with probability `D_t`, else keep.
pub fn dfm_rate_step(
    z_t: &GraphInstance,
    denoiser: &dyn Denoiser,
    t: f64,
    dt: f64,
    schedule: &Schedule,
    rng: &mut RngStream,
) -> Result<GraphInstance> {
    let s = (t + dt).min(1.0);
    check_times(t, s)?;
    let out = denoiser.predict(z_t, schedule.alpha(t)?)?;
    if s >= 1.0 {
        return Ok(out.sample(rng));
    }
    let jump = dfm_rate(t, dt, schedule)?;
    let mut z_s = z_t.clone();
    for k in 0..z_t.slot_count() {
        if rng.bernoulli(jump) {
            z_s.set_slot(k, out.slot(k).sample(rng));
        }
    }
    Ok(z_s)
}

/// Applies `kind`'s step rule from `t` to `s`.
pub fn step(
    kind: SamplerKind,
    z_t: &GraphInstance,
    denoiser: &dyn Denoiser,
    t: f64,
    s: f64,
    noise: &NoiseSpec,
    schedule: &Schedule,
    rng: &mut RngStream,
) -> Result<GraphInstance> {
    match kind {
        SamplerKind::Sid => sid_step(z_t, denoiser, t, s, noise, schedule, rng),
        SamplerKind::DdmExact => ddm_exact_step(z_t, denoiser, t, s, noise, schedule, rng),
        SamplerKind::DfmRate => dfm_rate_step(z_t, denoiser, t, s - t, schedule, rng),
        SamplerKind::Corrector => corrector_step_maximal(z_t, denoiser, t, s, noise, schedule, rng),
    }
}

// ---------------------------------------------------------------------------
// Exact one-step laws

fn full(dist: &CategoricalDist, noise: &NoiseSpec, kind: SlotKind) -> Result<CategoricalDist> {
    dist.extended(noise.q0(kind).len())
}

fn slot_kind(out: &DenoiserOutput, k: usize) -> SlotKind {
    if k < out.n() {
        SlotKind::Node
    } else {
        SlotKind::Edge
    }
}

/// Per-element law of [`sid_step`] computed through its two stages:
/// `sum_{z1} p(z1) * mix(delta_{z1}, q0, alpha_s)`.
pub fn sid_step_law(out: &DenoiserOutput, alpha_s: f64, noise: &NoiseSpec) -> Result<Vec<CategoricalDist>> {
    check_unit(alpha_s, "alpha_s")?;
    (0..out.slot_count())
        .map(|k| {
            let kind = slot_kind(out, k);
            let q0 = noise.q0(kind);
            let mut acc = vec![0.0; q0.len()];
            for (z1, &p) in out.slot(k).probs().iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let renoised = mix(&CategoricalDist::delta(z1, q0.len())?, q0, alpha_s)?;
                acc.iter_mut().zip(renoised.probs()).for_each(|(a, r)| *a += p * r);
            }
            CategoricalDist::new(acc)
        })
        .collect()
}

/// The closed form `alpha_s * p + (1 - alpha_s) * q0`, elementwise.
pub fn mixture_law(out: &DenoiserOutput, alpha_s: f64, noise: &NoiseSpec) -> Result<Vec<CategoricalDist>> {
    (0..out.slot_count())
        .map(|k| {
            let kind = slot_kind(out, k);
            mix(&full(out.slot(k), noise, kind)?, noise.q0(kind), alpha_s)
        })
        .collect()
}

/// Per-element law of [`corrector_step_maximal`]: the clean-prediction law pushed
/// through the forward transition matrices of `forward_times` (from 1 down to `s`).
pub fn corrector_step_law(
    out: &DenoiserOutput,
    forward_times: &[f64],
    schedule: &Schedule,
    noise: &NoiseSpec,
) -> Result<Vec<CategoricalDist>> {
    let betas = betas_on_grid(schedule, forward_times)?;
    let node_chain = compose_forward(&betas, &noise.node_q0)?;
    let edge_chain = compose_forward(&betas, &noise.edge_q0)?;
    (0..out.slot_count())
        .map(|k| {
            let kind = slot_kind(out, k);
            let chain = if kind == SlotKind::Node { &node_chain } else { &edge_chain };
            chain.apply(&full(out.slot(k), noise, kind)?)
        })
        .collect()
}

/// Per-element law of [`ddm_exact_step`].
pub fn ddm_step_law(
    z_t: &GraphInstance,
    out: &DenoiserOutput,
    alpha_t: f64,
    alpha_s: f64,
    noise: &NoiseSpec,
) -> Result<Vec<CategoricalDist>> {
    (0..z_t.slot_count())
        .map(|k| {
            let q0 = noise.q0(z_t.slot_kind(k));
            let mut acc = vec![0.0; q0.len()];
            for (z1, &p) in out.slot(k).probs().iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let post = forward_posterior(z_t.slot(k), z1, alpha_t, alpha_s, q0)
                    .unwrap_or(CategoricalDist::delta(z_t.slot(k), q0.len())?);
                acc.iter_mut().zip(post.probs()).for_each(|(a, r)| *a += p * r);
            }
            CategoricalDist::new(acc)
        })
        .collect()
}

/// Per-element law of [`dfm_rate_step`] with jump probability `jump`.
pub fn dfm_step_law(z_t: &GraphInstance, out: &DenoiserOutput, jump: f64, noise: &NoiseSpec) -> Result<Vec<CategoricalDist>> {
    (0..z_t.slot_count())
        .map(|k| {
            let kind = z_t.slot_kind(k);
            let stay = CategoricalDist::delta(z_t.slot(k), noise.q0(kind).len())?;
            mix(&full(out.slot(k), noise, kind)?, &stay, jump)
        })
        .collect()
}

/// Exact per-element law of one step of `kind` from `(z_t, t)` to `s`.
pub fn step_law(
    kind: SamplerKind,
    z_t: &GraphInstance,
    denoiser: &dyn Denoiser,
    t: f64,
    s: f64,
    noise: &NoiseSpec,
    schedule: &Schedule,
) -> Result<Vec<CategoricalDist>> {
    check_times(t, s)?;
    let alpha_t = schedule.alpha(t)?;
    let out = denoiser.predict(z_t, alpha_t)?;
    let alpha_s = if s >= 1.0 { 1.0 } else { schedule.alpha(s)? };
    match kind {
        SamplerKind::Sid => sid_step_law(&out, alpha_s, noise),
        SamplerKind::Corrector => corrector_step_law(&out, &[1.0, s], schedule, noise),
        SamplerKind::DdmExact => ddm_step_law(z_t, &out, alpha_t, alpha_s, noise),
        SamplerKind::DfmRate => {
            let jump = if s >= 1.0 { 1.0 } else { dfm_rate(t, s - t, schedule)? };
            dfm_step_law(z_t, &out, jump, noise)
        }
    }
}

// ---------------------------------------------------------------------------
// Generation

/// Draws `Z_0` from `q0` slot by slot (all MASK under mask noise).
pub fn initial_state(n: usize, noise: &NoiseSpec, rng: &mut RngStream) -> GraphInstance {
    let mut z = GraphInstance::filled(n, 0, 0);
    for k in 0..z.slot_count() {
        let label = noise.q0(z.slot_kind(k)).sample(rng);
        z.set_slot(k, label);
    }
    z
}

fn mask_residue(g: &GraphInstance, noise: &NoiseSpec) -> usize {
    let schema = noise.schema.with_mask(noise.is_mask());
    (0..g.slot_count()).filter(|&k| schema.mask(g.slot_kind(k)) == Some(g.slot(k))).count()
}

/// One trajectory of `n` nodes; `visit` sees every intermediate state including `Z_0` and `Z_1`.
pub fn run_chain(
    denoiser: &dyn Denoiser,
    sampler: &SamplerSpec,
    n: usize,
    rng: &mut RngStream,
    mut visit: impl FnMut(f64, &GraphInstance),
) -> Result<GraphInstance> {
    let grid = sampler.grid();
    let mut z = initial_state(n, &sampler.noise, rng);
    visit(0.0, &z);
    for w in grid.windows(2) {
        z = step(sampler.kind, &z, denoiser, w[0], w[1], &sampler.noise, &sampler.schedule, rng)?;
        visit(w[1], &z);
    }
    let residue = mask_residue(&z, &sampler.noise);
    if residue > 0 {
        return Err(Error::MaskResidue(residue));
    }
    Ok(z)
}

/// `count` independent chains; chain `c` uses the stream `rng.fork(c)`.
pub fn generate(
    denoiser: &dyn Denoiser,
    sampler: &SamplerSpec,
    count: usize,
    sizes: &SizeHistogram,
    rng: &RngStream,
) -> Result<Vec<GraphInstance>> {
    if count == 0 {
        return Err(Error::Domain("sample count must be at least 1".into()));
    }
    (0..count)
        .map(|c| {
            let mut chain_rng = rng.fork(c as u64);
            let n = sizes.sample(&mut chain_rng);
            run_chain(denoiser, sampler, n, &mut chain_rng, |_, _| {})
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Exact trajectory law on small state spaces

/// Mixed-radix coding of graphs with fixed `n` over the full vocabularies.
struct StateCode {
    n: usize,
    radix: Vec<usize>,
    size: usize,
}

impl StateCode {
    fn new(n: usize, noise: &NoiseSpec) -> Result<Self> {
        let probe = GraphInstance::filled(n, 0, 0);
        let radix: Vec<usize> = (0..probe.slot_count()).map(|k| noise.q0(probe.slot_kind(k)).len()).collect();
        let size = radix.iter().try_fold(1u128, |acc, &r| Some(acc * r as u128)).unwrap_or(u128::MAX);
        if size > ENUMERATION_LIMIT {
            return Err(Error::StateSpaceTooLarge { size, limit: ENUMERATION_LIMIT });
        }
        Ok(Self { n, radix, size: size as usize })
    }

    fn decode(&self, mut code: usize) -> GraphInstance {
        let mut g = GraphInstance::filled(self.n, 0, 0);
        for k in (0..self.radix.len()).rev() {
            g.set_slot(k, code % self.radix[k]);
            code /= self.radix[k];
        }
        g
    }
}

/// Adds `weight * prod_k laws[k]` into `dist` (indexed by state code).
fn scatter_product(laws: &[CategoricalDist], weight: f64, code: &StateCode, dist: &mut [f64]) {
    let mut partial = vec![(0usize, weight)];
    for (k, law) in laws.iter().enumerate() {
        let mut next = Vec::with_capacity(partial.len() * law.len());
        for &(c, w) in &partial {
            for (label, &p) in law.probs().iter().enumerate() {
                if p > 0.0 {
                    next.push((c * code.radix[k] + label, w * p));
                }
            }
        }
        partial = next;
    }
    for (c, w) in partial {
        dist[c] += w;
    }
}

/// Exact distribution of `Z_1` for graphs of `n` nodes, by propagating the
/// state distribution through every step's per-element law.
pub fn exact_output_law(denoiser: &dyn Denoiser, sampler: &SamplerSpec, n: usize) -> Result<Vec<(GraphInstance, f64)>> {
    let code = StateCode::new(n, &sampler.noise)?;
    let mut dist = vec![0.0; code.size];
    // Z_0 is a product of q0 laws
    let probe = GraphInstance::filled(n, 0, 0);
    let q0s: Vec<CategoricalDist> = (0..probe.slot_count()).map(|k| sampler.noise.q0(probe.slot_kind(k)).clone()).collect();
    scatter_product(&q0s, 1.0, &code, &mut dist);
    for w in sampler.grid().windows(2) {
        let mut next = vec![0.0; code.size];
        for (c, &p) in dist.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let z = code.decode(c);
            let laws = step_law(sampler.kind, &z, denoiser, w[0], w[1], &sampler.noise, &sampler.schedule)?;
            scatter_product(&laws, p, &code, &mut next);
        }
        dist = next;
    }
    Ok(dist
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(c, &p)| (code.decode(c), p))
        .collect())
}

/// Total variation between two finitely supported laws over graphs.
pub fn graph_law_tv(a: &[(GraphInstance, f64)], b: &[(GraphInstance, f64)]) -> f64 {
    let mut diff: std::collections::BTreeMap<&GraphInstance, f64> = std::collections::BTreeMap::new();
    a.iter().for_each(|(g, p)| *diff.entry(g).or_default() += p);
    b.iter().for_each(|(g, p)| *diff.entry(g).or_default() -= p);
    0.5 * diff.values().map(|d| d.abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::BayesOracle;
    use crate::graph::{GraphSchema, ToyFamily};

    fn tf4_oracle() -> BayesOracle {
        let family = ToyFamily::TriangleFree4;
        BayesOracle::new(&family, NoiseSpec::mask(family.schema(false)).unwrap()).unwrap()
    }

    /// A fixed denoiser for single-slot checks.
    struct Fixed {
        out: DenoiserOutput,
        noise: NoiseSpec,
    }

    impl Denoiser for Fixed {
        fn predict(&self, _: &GraphInstance, _: f64) -> Result<DenoiserOutput> {
            Ok(self.out.clone())
        }

        fn noise(&self) -> &NoiseSpec {
            &self.noise
        }
    }

    fn two_node_fixed(noise: NoiseSpec) -> Fixed {
        let out = DenoiserOutput {
            nodes: vec![CategoricalDist::new(vec![0.3, 0.7]).unwrap(); 2],
            edges: vec![CategoricalDist::new(vec![0.6, 0.4]).unwrap()],
        };
        Fixed { out, noise }
    }

    fn schema2() -> GraphSchema {
        GraphSchema::new(2, 2, false, 2, 2).unwrap()
    }

    #[test]
    fn forward_posterior_examples() {
        let q0 = CategoricalDist::delta(2, 3).unwrap();
        let post = forward_posterior(2, 0, 0.4, 0.8, &q0).unwrap();
        assert!((post.prob(0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((post.prob(2) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(forward_posterior(1, 1, 0.4, 0.8, &q0).unwrap().prob(1), 1.0);
        assert!(forward_posterior(1, 0, 0.4, 0.8, &q0).is_none());
        assert_eq!(forward_posterior(2, 1, 0.0, 1.0, &q0).unwrap().prob(1), 1.0);
    }

    #[test]
    fn dfm_rate_examples() {
        let d = dfm_rate(0.5, 0.01, &Schedule::COSINE).unwrap();
        assert!((d - 0.01 * std::f64::consts::FRAC_PI_2 / 0.5).abs() < 1e-12);
        assert!((d - 0.0314).abs() < 1e-4);
        assert_eq!(dfm_rate(0.99, 0.01, &Schedule::COSINE).unwrap(), 1.0);
        assert!(dfm_rate(1.0, 0.01, &Schedule::COSINE).is_err());
    }

    #[test]
    fn sid_endpoints() {
        let noise = NoiseSpec::uniform(schema2()).unwrap();
        let den = two_node_fixed(noise.clone());
        let laws = sid_step_law(&den.out, 1.0, &noise).unwrap();
        assert_eq!(laws[0].probs(), &[0.3, 0.7]);
        let laws = sid_step_law(&den.out, 0.0, &noise).unwrap();
        assert!(laws.iter().all(|l| l.tv(&noise.node_q0).unwrap() < 1e-15));
        let mut rng = RngStream::new(0, 0);
        let z = GraphInstance::filled(2, 0, 0);
        for _ in 0..100 {
            let out = sid_step(&z, &den, 0.5, 1.0, &noise, &Schedule::COSINE, &mut rng).unwrap();
            assert!(!noise.schema.contains_mask(&out));
        }
    }

    #[test]
    fn analytic_laws_match_sampling() {
        let noise = NoiseSpec::mask(schema2()).unwrap();
        let den = two_node_fixed(noise.clone());
        let z = GraphInstance::new(vec![2, 1], vec![2]).unwrap();
        let mut rng = RngStream::new(1, 0);
        for kind in [SamplerKind::Sid, SamplerKind::DdmExact, SamplerKind::DfmRate, SamplerKind::Corrector] {
            let laws = step_law(kind, &z, &den, 0.4, 0.6, &noise, &Schedule::COSINE).unwrap();
            let mut counts = vec![vec![0.0; 3]; 3];
            let draws = 50_000;
            for _ in 0..draws {
                let out = step(kind, &z, &den, 0.4, 0.6, &noise, &Schedule::COSINE, &mut rng).unwrap();
                (0..3).for_each(|k| counts[k][out.slot(k)] += 1.0);
            }
            for k in 0..3 {
                let emp = CategoricalDist::from_weights(&counts[k]).unwrap();
                assert!(emp.tv(&laws[k]).unwrap() < 0.01, "{kind:?} slot {k}");
            }
        }
    }

    #[test]
    fn mask_ddm_never_changes_unmasked_elements() {
        let oracle = tf4_oracle();
        let noise = oracle.noise().clone();
        let sampler = SamplerSpec::new(SamplerKind::DdmExact, 16, noise, Schedule::COSINE).unwrap();
        let mask = [1usize, 2usize];
        for c in 0..50 {
            let mut rng = RngStream::new(2, c);
            let mut prev: Option<GraphInstance> = None;
            run_chain(&oracle, &sampler, 4, &mut rng, |_, z| {
                if let Some(p) = &prev {
                    for k in 0..z.slot_count() {
                        let m = mask[usize::from(k >= 4)];
                        if p.slot(k) != m {
                            assert_eq!(p.slot(k), z.slot(k));
                        }
                    }
                }
                prev = Some(z.clone());
            })
            .unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic_and_clean() {
        let oracle = tf4_oracle();
        let sampler = SamplerSpec::new(SamplerKind::Sid, 4, oracle.noise().clone(), Schedule::COSINE).unwrap();
        let rng = RngStream::new(3, 0);
        let a = generate(&oracle, &sampler, 20, &SizeHistogram::fixed(4), &rng).unwrap();
        let b = generate(&oracle, &sampler, 20, &SizeHistogram::fixed(4), &rng).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|g| !oracle.noise().schema.contains_mask(g)));
        assert!(generate(&oracle, &sampler, 0, &SizeHistogram::fixed(4), &rng).is_err());
    }

    #[test]
    fn single_step_sid_samples_the_prior() {
        let oracle = tf4_oracle();
        let sampler = SamplerSpec::new(SamplerKind::Sid, 1, oracle.noise().clone(), Schedule::COSINE).unwrap();
        let law = exact_output_law(&oracle, &sampler, 4).unwrap();
        let prior = oracle.prior();
        // product of prior marginals
        let mut direct = Vec::new();
        let code = StateCode::new(4, oracle.noise()).unwrap();
        let mut dense = vec![0.0; code.size];
        let laws: Vec<_> = (0..10).map(|k| prior.slot(k).extended(if k < 4 { 2 } else { 3 }).unwrap()).collect();
        scatter_product(&laws, 1.0, &code, &mut dense);
        for (c, &p) in dense.iter().enumerate() {
            if p > 0.0 {
                direct.push((code.decode(c), p));
            }
        }
        assert!(graph_law_tv(&law, &direct) < 1e-12);
    }

    #[test]
    fn exact_law_sums_to_one() {
        let oracle = tf4_oracle();
        let sampler = SamplerSpec::new(SamplerKind::DdmExact, 4, oracle.noise().clone(), Schedule::COSINE).unwrap();
        let law = exact_output_law(&oracle, &sampler, 4).unwrap();
        assert!((law.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(law.iter().all(|(g, _)| !oracle.noise().schema.contains_mask(g)));
    }
}
