//! The critic `alpha_hat = sigmoid(f(Z_hat, alpha) + logit(alpha))`, which
//! scores how likely each element of a predicted clean instance is to be
//! uncorrupted data, and the critic-guided sampler built on it.
//!
//! `alpha_hat` is always the keep probability; `1 - alpha_hat` is the re-mask
//! probability.

use std::path::Path;
use std::rc::Rc;

use log::info;

use crate::autodiff::{logit, sigmoid, Tape};
use crate::denoiser::{sgd_step, Denoiser, ModelDocument, TrainConfig};
use crate::error::{Error, Result};
use crate::graph::{CorruptionMask, GraphInstance, GraphSchema, SizeHistogram, ENUMERATION_LIMIT};
use crate::mpnn::{Head, Mpnn, MpnnConfig};
use crate::noising::{noise_graph, NoiseSpec};
use crate::prob::{check_unit, CategoricalDist, RngStream, Schedule};
use crate::samplers::{initial_state, time_grid};

pub const LOGIT_EPS: f64 = 1e-6;

/// `logit(clamp(alpha, eps, 1 - eps))`.
pub fn clamped_logit(alpha: f64) -> f64 {
    logit(alpha.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS))
}

/// Per-slot keep probabilities; nodes first, then upper-triangle edges.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticOutput {
    pub values: Vec<f64>,
}

/// Closed-form optimum `alpha p_data / (alpha p_data + (1 - alpha) p_pred)`.
pub fn optimal_critic(p_data: f64, p_pred: f64, alpha: f64) -> Result<f64> {
    check_unit(alpha, "alpha")?;
    if p_data < 0.0 || p_pred < 0.0 || !p_data.is_finite() || !p_pred.is_finite() {
        return Err(Error::Domain("densities must be finite and non-negative".into()));
    }
    if p_data == p_pred && p_data > 0.0 {
        // the densities cancel; avoid rounding in the general form
        return Ok(alpha);
    }
    let num = alpha * p_data;
    let den = num + (1.0 - alpha) * p_pred;
    if den == 0.0 {
        return Err(Error::UndefinedCritic);
    }
    Ok(num / den)
}

/// Table of residual logits keyed by `(time bin, slot, full Z_hat code)`.
/// Only usable for a single small graph size.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularCritic {
    pub schema: GraphSchema,
    /// Training times; a query uses the bin whose `alpha` is nearest.
    pub bins: Vec<f64>,
    pub schedule: Schedule,
    pub table: Vec<f64>,
}

impl TabularCritic {
    pub fn new(schema: GraphSchema, bins: Vec<f64>, schedule: Schedule) -> Result<Self> {
        if schema.n_min != schema.n_max {
            return Err(Error::Config("tabular critic needs a single graph size".into()));
        }
        if bins.is_empty() {
            return Err(Error::Config("tabular critic needs at least one time bin".into()));
        }
        for &t in &bins {
            check_unit(t, "time bin")?;
        }
        let probe = GraphInstance::filled(schema.n_max, 0, 0);
        let codes = Self::code_count(&schema, &probe)?;
        let size = bins.len() * probe.slot_count() * codes;
        Ok(Self { schema, bins, schedule, table: vec![0.0; size] })
    }

    fn code_count(schema: &GraphSchema, probe: &GraphInstance) -> Result<usize> {
        let size = (0..probe.slot_count()).try_fold(1u128, |acc, k| {
            let v = acc * schema.clean_vocab(probe.slot_kind(k)) as u128;
            (v <= ENUMERATION_LIMIT).then_some(v)
        });
        size.map(|s| s as usize).ok_or(Error::StateSpaceTooLarge { size: u128::MAX, limit: ENUMERATION_LIMIT })
    }

    fn slots(&self) -> usize {
        GraphInstance::filled(self.schema.n_max, 0, 0).slot_count()
    }

    pub fn code(&self, z_hat: &GraphInstance) -> Result<usize> {
        if z_hat.n() != self.schema.n_max {
            return Err(Error::DimensionMismatch { expected: self.schema.n_max, got: z_hat.n() });
        }
        let mut code = 0;
        for k in 0..z_hat.slot_count() {
            let radix = self.schema.clean_vocab(z_hat.slot_kind(k));
            if z_hat.slot(k) >= radix {
                return Err(Error::MaskLabelPresent);
            }
            code = code * radix + z_hat.slot(k);
        }
        Ok(code)
    }

    pub fn bin(&self, alpha: f64) -> Result<usize> {
        let mut best = (0, f64::INFINITY);
        for (b, &t) in self.bins.iter().enumerate() {
            let d = (self.schedule.alpha(t)? - alpha).abs();
            if d < best.1 {
                best = (b, d);
            }
        }
        Ok(best.0)
    }

    pub fn key(&self, bin: usize, slot: usize, code: usize) -> usize {
        let codes = self.table.len() / (self.bins.len() * self.slots());
        (bin * self.slots() + slot) * codes + code
    }
}

/// Critic backed by a table or by the message-passing trunk with scalar heads.
#[derive(Debug, Clone, PartialEq)]
pub enum CriticModel {
    Tabular(TabularCritic),
    Mpnn { noise: NoiseSpec, net: Mpnn },
}

impl CriticModel {
    /// Message-passing critic with zeroed heads, so it starts as `f = 0`.
    pub fn mpnn(config: MpnnConfig, noise: NoiseSpec, rng: &mut RngStream) -> Result<Self> {
        if !noise.is_mask() {
            return Err(Error::Config("the critic is only defined for mask noise".into()));
        }
        let net = Mpnn::new(config, &noise.schema.with_mask(true), Head::Scalar, true, rng)?;
        Ok(Self::Mpnn { noise, net })
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Self::Tabular(t) => &t.table,
            Self::Mpnn { net, .. } => &net.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Self::Tabular(t) => &mut t.table,
            Self::Mpnn { net, .. } => &mut net.params,
        }
    }

    /// Residual logits `f(Z_hat, alpha)` per slot.
    pub fn residual(&self, z_hat: &GraphInstance, alpha: f64) -> Result<Vec<f64>> {
        match self {
            Self::Tabular(t) => {
                let (bin, code) = (t.bin(alpha)?, t.code(z_hat)?);
                Ok((0..z_hat.slot_count()).map(|k| t.table[t.key(bin, k, code)]).collect())
            }
            Self::Mpnn { net, .. } => {
                let (nodes, pairs) = net.outputs(z_hat, alpha)?;
                Ok(nodes.data.into_iter().chain(pairs.data).collect())
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = match self {
            Self::Tabular(t) => {
                let noise = NoiseSpec::mask(t.schema)?;
                let mut doc = ModelDocument::new("critic", noise, None, &t.table);
                doc.aux = t.bins.clone();
                doc.aux.push(match t.schedule.kind {
                    crate::prob::ScheduleKind::Cosine => 0.0,
                    crate::prob::ScheduleKind::LinearAlpha => 1.0,
                });
                doc
            }
            Self::Mpnn { noise, net } => ModelDocument::new("critic", noise.clone(), Some(net.config), &net.params),
        };
        doc.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc = ModelDocument::load(path)?;
        if doc.kind != "critic" {
            return Err(Error::Format(format!("expected a critic model, found kind {}", doc.kind)));
        }
        let mut model = match doc.mpnn {
            Some(config) => Self::mpnn(config, doc.noise, &mut RngStream::new(0, 0))?,
            None => {
                let (schedule, bins) = doc.aux.split_last().ok_or_else(|| Error::Format("tabular critic without bins".into()))?;
                let schedule = if *schedule == 1.0 { Schedule::LINEAR } else { Schedule::COSINE };
                Self::Tabular(TabularCritic::new(doc.schema.with_mask(false), bins.to_vec(), schedule)?)
            }
        };
        if model.params().len() != doc.params.len() {
            return Err(Error::DimensionMismatch { expected: model.params().len(), got: doc.params.len() });
        }
        *model.params_mut() = doc.params;
        Ok(model)
    }
}

/// `sigmoid(f(Z_hat, alpha) + logit(clamp(alpha)))` per slot.
pub fn critic_forward(model: &CriticModel, z_hat: &GraphInstance, alpha: f64) -> Result<CriticOutput> {
    check_unit(alpha, "alpha")?;
    let offset = clamped_logit(alpha);
    let values = model.residual(z_hat, alpha)?.into_iter().map(|f| sigmoid(f + offset)).collect();
    Ok(CriticOutput { values })
}

/// Keeps uncorrupted elements of `z_t` and fills corrupted ones from the denoiser.
fn fill_corrupted(
    z_t: &GraphInstance,
    a_t: &CorruptionMask,
    denoiser: &dyn Denoiser,
    alpha_t: f64,
    rng: &mut RngStream,
) -> Result<GraphInstance> {
    let out = denoiser.predict(z_t, alpha_t)?;
    let mut z_hat = z_t.clone();
    for k in 0..z_t.slot_count() {
        if !a_t.slot(k) {
            z_hat.set_slot(k, out.slot(k).sample(rng));
        }
    }
    Ok(z_hat)
}

/// Noise `g1` at `t` with mask noise, then fill the corrupted elements from the
/// denoiser. The labels are the corruption indicators.
pub fn make_critic_training_example(
    g1: &GraphInstance,
    t: f64,
    schedule: &Schedule,
    noise: &NoiseSpec,
    denoiser: &dyn Denoiser,
    rng: &mut RngStream,
) -> Result<(GraphInstance, CorruptionMask)> {
    if !noise.is_mask() {
        return Err(Error::Config("critic training needs mask noise".into()));
    }
    let (z_t, a_t) = noise_graph(g1, t, schedule, noise, rng)?;
    let z_hat = fill_corrupted(&z_t, &a_t, denoiser, schedule.alpha(t)?, rng)?;
    Ok((z_hat, a_t))
}

/// Fits a tabular critic from `examples` draws: `t` uniform over the bins,
/// `g1` uniform over `dataset`. Each entry is set to the exact minimizer of its
/// binary cross-entropy, `logit(frequency) - logit(alpha)` (frequencies clamped
/// like the logits).
pub fn train_tabular_critic(
    critic: &mut TabularCritic,
    dataset: &[GraphInstance],
    denoiser: &dyn Denoiser,
    noise: &NoiseSpec,
    examples: usize,
    rng: &mut RngStream,
) -> Result<Vec<(u64, u64)>> {
    if dataset.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let mut stats = vec![(0u64, 0u64); critic.table.len()];
    for _ in 0..examples {
        let b = rng.below(critic.bins.len());
        let g1 = &dataset[rng.below(dataset.len())];
        let (z_hat, a) = make_critic_training_example(g1, critic.bins[b], &critic.schedule, noise, denoiser, rng)?;
        let code = critic.code(&z_hat)?;
        for k in 0..z_hat.slot_count() {
            let s = &mut stats[critic.key(b, k, code)];
            s.0 += 1;
            s.1 += u64::from(a.slot(k));
        }
    }
    let slots = critic.slots();
    let codes = critic.table.len() / (critic.bins.len() * slots);
    for b in 0..critic.bins.len() {
        let offset = clamped_logit(critic.schedule.alpha(critic.bins[b])?);
        for key in b * slots * codes..(b + 1) * slots * codes {
            let (count, kept) = stats[key];
            critic.table[key] = if count == 0 { 0.0 } else { clamped_logit(kept as f64 / count as f64) - offset };
        }
    }
    info!("tabular critic fitted from {examples} examples");
    Ok(stats)
}

/// Batch-mean binary cross-entropy of a message-passing critic and its gradient.
pub fn critic_loss_and_gradient(
    model: &CriticModel,
    params: &[f64],
    batch: &[(GraphInstance, CorruptionMask, f64)],
) -> Result<(f64, Vec<f64>)> {
    let CriticModel::Mpnn { net, .. } = model else {
        return Err(Error::Config("gradient training needs a message-passing critic".into()));
    };
    if batch.is_empty() {
        return Ok((0.0, vec![0.0; params.len()]));
    }
    let scale = 1.0 / batch.len() as f64;
    let inputs: Vec<_> = batch.iter().map(|(g, _, a)| (g, *a)).collect();
    let packed = net.pack(&inputs)?;
    let (mut on, mut oe, mut tn, mut te) = (vec![], vec![], vec![], vec![]);
    for (g, mask, alpha) in batch {
        let off = clamped_logit(*alpha);
        for k in 0..g.slot_count() {
            let y = f64::from(u8::from(mask.slot(k)));
            if k < g.n() {
                on.push(off);
                tn.push(y);
            } else {
                oe.push(off);
                te.push(y);
            }
        }
    }
    let (wn, we) = (vec![scale; on.len()], vec![scale; oe.len()]);
    let mut tape = Tape::new();
    let (nv, ev) = net.forward_with(params, &mut tape, &packed);
    let ln = tape.sigmoid_bce(nv, Rc::new(on), Rc::new(tn), Rc::new(wn));
    let le = tape.sigmoid_bce(ev, Rc::new(oe), Rc::new(te), Rc::new(we));
    let root = tape.add(ln, le);
    Ok((tape.value(root).data[0], tape.backward(root, params.len())))
}

/// Momentum-SGD training of a message-passing critic against a frozen denoiser,
/// `t ~ U(0, 1)` per example. Returns per-epoch mean losses.
pub fn train_critic(
    model: &mut CriticModel,
    dataset: &[GraphInstance],
    denoiser: &dyn Denoiser,
    schedule: &Schedule,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let noise = match model {
        CriticModel::Mpnn { noise, .. } => noise.clone(),
        CriticModel::Tabular(_) => return Err(Error::Config("use train_tabular_critic for tabular critics".into())),
    };
    let mut velocity = vec![0.0; model.params().len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let t = rng.uniform();
                    let (z_hat, a) = make_critic_training_example(&dataset[i], t, schedule, &noise, denoiser, rng)?;
                    Ok((z_hat, a, schedule.alpha(t)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = critic_loss_and_gradient(model, model.params(), &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("critic loss {loss} at epoch {epoch}")));
            }
            sgd_step(model.params_mut(), &mut velocity, &grad, config, epoch)?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        info!("critic epoch {epoch}: train loss {mean:.6}");
        history.push(mean);
    }
    Ok(history)
}

fn mask_label(noise: &NoiseSpec, g: &GraphInstance, k: usize) -> usize {
    noise.schema.with_mask(true).mask(g.slot_kind(k)).expect("mask schema")
}

/// One critic-guided step from `t` to `s`: fill corrupted elements from the
/// denoiser, score the result, keep each element with its critic probability
/// and mask the rest.
pub fn cid_step(
    z_t: &GraphInstance,
    a_t: &CorruptionMask,
    denoiser: &dyn Denoiser,
    critic: &CriticModel,
    t: f64,
    s: f64,
    schedule: &Schedule,
    noise: &NoiseSpec,
    rng: &mut RngStream,
) -> Result<(GraphInstance, CorruptionMask)> {
    if !noise.is_mask() {
        return Err(Error::Config("critic-guided sampling needs mask noise".into()));
    }
    let alpha_t = schedule.alpha(t)?;
    let z_hat = fill_corrupted(z_t, a_t, denoiser, alpha_t, rng)?;
    if s >= 1.0 {
        return Ok((z_hat.clone(), CorruptionMask::all(z_hat.n(), true)));
    }
    let keep = critic_keep(critic, &z_hat, alpha_t, schedule.alpha(s)?)?;
    let mut z_s = z_hat.clone();
    let mut a_s = CorruptionMask::all(z_hat.n(), true);
    for (k, &p) in keep.iter().enumerate() {
        if !rng.bernoulli(p) {
            z_s.set_slot(k, mask_label(noise, &z_hat, k));
            a_s.set_slot(k, false);
        }
    }
    Ok((z_s, a_s))
}

/// `sigmoid(f(Z_hat, alpha_t) + logit(alpha_s))` per slot.
pub fn critic_keep(critic: &CriticModel, z_hat: &GraphInstance, alpha_t: f64, alpha_s: f64) -> Result<Vec<f64>> {
    let offset = clamped_logit(alpha_s);
    Ok(critic.residual(z_hat, alpha_t)?.into_iter().map(|f| sigmoid(f + offset)).collect())
}

/// Exact per-element law of [`cid_step`] over the full masked vocabulary, by
/// enumerating every filled-in `Z_hat`.
pub fn cid_step_law(
    z_t: &GraphInstance,
    a_t: &CorruptionMask,
    denoiser: &dyn Denoiser,
    critic: &CriticModel,
    t: f64,
    s: f64,
    schedule: &Schedule,
    noise: &NoiseSpec,
) -> Result<Vec<CategoricalDist>> {
    let alpha_t = schedule.alpha(t)?;
    let out = denoiser.predict(z_t, alpha_t)?;
    let vocab = |k: usize| noise.q0(z_t.slot_kind(k)).len();
    let mut acc: Vec<Vec<f64>> = (0..z_t.slot_count()).map(|k| vec![0.0; vocab(k)]).collect();
    let mut fills = vec![(z_t.clone(), 1.0)];
    for k in 0..z_t.slot_count() {
        if a_t.slot(k) {
            continue;
        }
        let mut next = Vec::new();
        for (g, w) in &fills {
            for (label, &p) in out.slot(k).probs().iter().enumerate() {
                if p > 0.0 {
                    let mut h = g.clone();
                    h.set_slot(k, label);
                    next.push((h, w * p));
                }
            }
        }
        fills = next;
        if fills.len() as u128 > ENUMERATION_LIMIT {
            return Err(Error::StateSpaceTooLarge { size: fills.len() as u128, limit: ENUMERATION_LIMIT });
        }
    }
    for (z_hat, w) in fills {
        let keep = if s >= 1.0 { vec![1.0; z_hat.slot_count()] } else { critic_keep(critic, &z_hat, alpha_t, schedule.alpha(s)?)? };
        for (k, p) in keep.into_iter().enumerate() {
            acc[k][z_hat.slot(k)] += w * p;
            acc[k][mask_label(noise, &z_hat, k)] += w * (1.0 - p);
        }
    }
    acc.into_iter().map(CategoricalDist::new).collect()
}

/// Critic-guided generation: `count` chains of `steps` steps from the all-MASK state.
pub fn generate_cid(
    denoiser: &dyn Denoiser,
    critic: &CriticModel,
    steps: usize,
    schedule: &Schedule,
    count: usize,
    sizes: &SizeHistogram,
    rng: &RngStream,
) -> Result<Vec<GraphInstance>> {
    if steps == 0 || count == 0 {
        return Err(Error::Config("steps and count must be at least 1".into()));
    }
    let noise = denoiser.noise().clone();
    let grid = time_grid(steps);
    (0..count)
        .map(|c| {
            let mut chain = rng.fork(c as u64);
            let n = sizes.sample(&mut chain);
            let mut z = initial_state(n, &noise, &mut chain);
            let mut a = CorruptionMask::all(n, false);
            for w in grid.windows(2) {
                (z, a) = cid_step(&z, &a, denoiser, critic, w[0], w[1], schedule, &noise, &mut chain)?;
            }
            Ok(z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::BayesOracle;
    use crate::graph::ToyFamily;
    use crate::samplers::sid_step_law;

    fn oracle() -> BayesOracle {
        let family = ToyFamily::TriangleFree4;
        BayesOracle::new(&family, NoiseSpec::mask(family.schema(false)).unwrap()).unwrap()
    }

    fn zero_critic(noise: &NoiseSpec) -> CriticModel {
        CriticModel::mpnn(MpnnConfig { layers: 1, hidden: 8 }, noise.clone(), &mut RngStream::new(0, 0)).unwrap()
    }

    #[test]
    fn optimal_critic_examples() {
        assert_eq!(optimal_critic(0.3, 0.3, 0.42).unwrap(), 0.42);
        assert!((optimal_critic(0.8, 0.5, 0.5).unwrap() - 0.6154).abs() < 1e-4);
        assert_eq!(optimal_critic(0.0, 0.5, 0.5).unwrap(), 0.0);
        assert_eq!(optimal_critic(0.5, 0.0, 0.5).unwrap(), 1.0);
        assert!(matches!(optimal_critic(0.0, 0.0, 0.5), Err(Error::UndefinedCritic)));
    }

    #[test]
    fn zero_critic_returns_alpha() {
        let o = oracle();
        let c = zero_critic(o.noise());
        let g = o.support()[0].0.clone();
        for alpha in [0.1, 0.5, 0.93] {
            let out = critic_forward(&c, &g, alpha).unwrap();
            assert!(out.values.iter().all(|&v| (v - alpha).abs() < 1e-15));
        }
        let out = critic_forward(&c, &g, 0.0).unwrap();
        assert!(out.values.iter().all(|&v| (v - 1e-6).abs() < 1e-18));
    }

    #[test]
    fn critic_output_is_monotone_in_alpha() {
        let o = oracle();
        let mut c = zero_critic(o.noise());
        let mut rng = RngStream::new(1, 0);
        c.params_mut().iter_mut().for_each(|p| *p += 0.1 * rng.normal());
        let g = o.support()[5].0.clone();
        // fixed f: vary only the offset
        let f = c.residual(&g, 0.5).unwrap();
        let mut prev = vec![0.0; f.len()];
        for alpha in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let cur: Vec<f64> = f.iter().map(|x| sigmoid(x + clamped_logit(alpha))).collect();
            assert!(cur.iter().zip(&prev).all(|(a, b)| a > b));
            prev = cur;
        }
    }

    #[test]
    fn training_example_endpoints() {
        let o = oracle();
        let mut rng = RngStream::new(2, 0);
        let g = o.support()[7].0.clone();
        let (z, a) = make_critic_training_example(&g, 1.0, &Schedule::COSINE, o.noise(), &o, &mut rng).unwrap();
        assert_eq!(z, g);
        assert_eq!(a.kept_count(), g.slot_count());
        let (z, a) = make_critic_training_example(&g, 0.0, &Schedule::COSINE, o.noise(), &o, &mut rng).unwrap();
        assert_eq!(a.kept_count(), 0);
        assert!(!o.noise().schema.contains_mask(&z));
    }

    #[test]
    fn label_mean_tracks_alpha() {
        let o = oracle();
        let mut rng = RngStream::new(3, 0);
        let g = o.support()[2].0.clone();
        let t = 0.4;
        let alpha = Schedule::COSINE.alpha(t).unwrap();
        let draws = 10_000;
        let kept: usize = (0..draws)
            .map(|_| make_critic_training_example(&g, t, &Schedule::COSINE, o.noise(), &o, &mut rng).unwrap().1.kept_count())
            .sum();
        let total = (draws * g.slot_count()) as f64;
        let sigma = (alpha * (1.0 - alpha) / total).sqrt();
        assert!((kept as f64 / total - alpha).abs() < 3.0 * sigma);
    }

    #[test]
    fn zero_critic_reduces_to_mask_sid() {
        let o = oracle();
        let noise = o.noise().clone();
        let c = zero_critic(&noise);
        let mut rng = RngStream::new(4, 0);
        for probe in 0..20 {
            let g = o.support()[probe % o.support().len()].0.clone();
            let t = 0.1 + 0.04 * probe as f64;
            let (z, a) = noise_graph(&g, t, &Schedule::COSINE, &noise, &mut rng).unwrap();
            let s = t + 0.125;
            let cid = cid_step_law(&z, &a, &o, &c, t, s, &Schedule::COSINE, &noise).unwrap();
            let out = o.predict(&z, Schedule::COSINE.alpha(t).unwrap()).unwrap();
            let sid = sid_step_law(&out, Schedule::COSINE.alpha(s).unwrap(), &noise).unwrap();
            for (x, y) in cid.iter().zip(&sid) {
                assert!(x.tv(y).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn final_step_unmasks_everything() {
        let o = oracle();
        let noise = o.noise().clone();
        let c = zero_critic(&noise);
        let mut rng = RngStream::new(5, 0);
        let z = GraphInstance::filled(4, 1, 2);
        let (z1, a1) = cid_step(&z, &CorruptionMask::all(4, false), &o, &c, 0.9, 1.0, &Schedule::COSINE, &noise, &mut rng).unwrap();
        assert_eq!(a1.kept_count(), z1.slot_count());
        assert!(!noise.schema.contains_mask(&z1));
        let samples = generate_cid(&o, &c, 4, &Schedule::COSINE, 10, &SizeHistogram::fixed(4), &rng).unwrap();
        assert_eq!(samples, generate_cid(&o, &c, 4, &Schedule::COSINE, 10, &SizeHistogram::fixed(4), &rng).unwrap());
    }

    #[test]
    fn certain_elements_are_never_remasked() {
        let o = oracle();
        let noise = o.noise().clone();
        let mut c = zero_critic(&noise);
        // push the scalar-head biases far positive: keep probability rounds to one
        let n = c.params().len();
        let CriticModel::Mpnn { net, .. } = &c else { unreachable!() };
        let de = net.config.edge_hidden();
        let dh = net.config.hidden;
        let node_bias = n - (de + 1) - 1;
        let edge_bias = n - 1;
        assert_eq!(node_bias, n - (dh + 1) - (de + 1) + dh);
        c.params_mut()[node_bias] = 100.0;
        c.params_mut()[edge_bias] = 100.0;
        let mut rng = RngStream::new(6, 0);
        for _ in 0..200 {
            let (z, a) = cid_step(&GraphInstance::filled(4, 1, 2), &CorruptionMask::all(4, false), &o, &c, 0.2, 0.3, &Schedule::COSINE, &noise, &mut rng).unwrap();
            assert_eq!(a.kept_count(), z.slot_count());
        }
    }

    #[test]
    fn critic_file_roundtrip() {
        let o = oracle();
        let dir = tempfile::tempdir().unwrap();
        let mut c = zero_critic(o.noise());
        c.params_mut()[3] = 0.25;
        c.save(&dir.path().join("c.json")).unwrap();
        assert_eq!(CriticModel::load(&dir.path().join("c.json")).unwrap(), c);
        let t = CriticModel::Tabular(TabularCritic::new(ToyFamily::TriangleFree4.schema(false), vec![0.3, 0.6], Schedule::LINEAR).unwrap());
        t.save(&dir.path().join("t.json")).unwrap();
        assert_eq!(CriticModel::load(&dir.path().join("t.json")).unwrap(), t);
    }
}
