//! Optimisation: AdamW with a cosine schedule, the single-pass baseline step
//! and the unrolled refinement step with immediate per-pass updates.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::encoders::{TokenGrid, TokenKind};
use crate::error::{Error, Result};
use crate::loss::{self, LossBreakdown, LossWeights};
use crate::model::{self, is_backbone, is_refiner, Model, ReconstructionState};
use crate::params::{ParamStore, ParamVars};
use crate::scenekit::{ObjectViews, ViewRecord};
use crate::tensor::Tensor;
use crate::triplane::{render_view, TriplaneField};
use crate::util::{derive_seed, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate of backbone training.
    pub lr: f64,
    /// Peak learning rate of refiner training.
    pub refine_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub base_steps: usize,
    pub refine_steps: usize,
    pub unroll: usize,
    pub batch: usize,
    /// Supervision views rendered per object and pass; 0 uses all of them.
    pub supervision_views: usize,
    pub seed: u64,
    pub log_every: usize,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            refine_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            eps: 1e-8,
            grad_clip: 1.0,
            base_steps: 200,
            refine_steps: 100,
            unroll: 3,
            batch: 1,
            supervision_views: 0,
            seed: 0,
            log_every: 25,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unroll == 0 {
            return Err(Error::Config("unroll depth must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.refine_lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}

/// Learning rate annealed from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
}

/// AdamW with decoupled weight decay on every parameter it updates.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.eps, weight_decay: cfg.weight_decay, t: 0, moments: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name).expect("gradient for a stored parameter");
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *pi -= lr * (update + self.weight_decay * *pi);
            }
        }
    }
}

pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
}

fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let n = grad_norm(grads);
    if n > max_norm {
        let s = max_norm / n;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn add_into(acc: &mut BTreeMap<String, Tensor>, g: BTreeMap<String, Tensor>, scale: f64) {
    for (k, t) in g {
        let slot = acc.entry(k).or_insert_with(|| Tensor::zeros(t.shape().to_vec()));
        for (a, b) in slot.data_mut().iter_mut().zip(t.data()) {
            *a += scale * b;
        }
    }
}

/// Supervision views of one object at the model's render resolution.
pub fn supervision_targets(model: &Model, obj: &ObjectViews) -> Result<Vec<ViewRecord>> {
    obj.supervision.iter().map(|v| v.subsample(model.config.render_res)).collect()
}

fn pick_views(targets: &[ViewRecord], count: usize, seed: u64) -> Vec<&ViewRecord> {
    let mut refs: Vec<&ViewRecord> = targets.iter().collect();
    if count == 0 || count >= refs.len() {
        return refs;
    }
    refs.shuffle(&mut rng(seed));
    refs.truncate(count);
    refs
}

/// Loss of one reconstruction pass; returns the loss breakdown, the gradients
/// of the trainable parameters and the detached planes.
#[allow(clippy::too_many_arguments)]
pub fn pass_loss(
    model: &Model,
    trainable: fn(&str) -> bool,
    cond: &[ViewRecord],
    sem: Option<&[Tensor]>,
    targets: &[&ViewRecord],
    prev: Option<&ReconstructionState>,
    weights: &LossWeights,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>, ReconstructionState)> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &model.params, trainable);
    let sem_tokens: Vec<TokenGrid> = match sem {
        Some(ts) => ts
            .iter()
            .enumerate()
            .map(|(k, t)| TokenGrid { tokens: g.constant(t.clone()), view: k, kind: TokenKind::Semantic })
            .collect(),
        None => model::semantic_tokens(&mut g, &pv, model, cond)?,
    };
    let (planes, geometry) = model::reconstruct_once(&mut g, &pv, model, cond, &sem_tokens, prev)?;
    let field = TriplaneField { planes, params: &pv };
    let mut views = Vec::with_capacity(targets.len());
    for gt in targets {
        let r = render_view(&mut g, &field, &gt.camera, &model.config.render_options(gt.res))?;
        views.push(loss::view_loss(&mut g, &r, gt)?);
    }
    let tv = loss::density_tv(&mut g, &field, model.config.tv_grid);
    let (total, breakdown) = loss::combine(&mut g, &views, tv, weights);
    breakdown.check()?;
    let state = ReconstructionState { step: prev.map_or(0, |p| p.step + 1), planes: g.value(planes).clone(), geometry };
    let grads = if g.requires_grad(total) {
        let gr = g.backward(total);
        pv.collect_grads(&g, &gr)
    } else {
        BTreeMap::new()
    };
    Ok((breakdown, grads, state))
}

/// Semantic token values of the conditioning views under frozen parameters.
pub fn frozen_semantic_tokens(model: &Model, cond: &[ViewRecord]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &model.params, |_| false);
    let toks = model::semantic_tokens(&mut g, &pv, model, cond)?;
    Ok(toks.iter().map(|t| g.value(t.tokens).clone()).collect())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    /// One entry per unrolled pass.
    pub passes: Vec<LossBreakdown>,
}

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    pub fn totals(&self, pass: usize) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.passes.get(pass)).map(|b| b.total).collect()
    }
}

fn batch_objects(n_objects: usize, step: usize, batch: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(derive_seed(seed, &[0x57e9, step as u64]));
    let mut idx: Vec<usize> = (0..n_objects).collect();
    idx.shuffle(&mut r);
    idx.into_iter().cycle().take(batch).collect()
}

/// Trains the backbone with single-pass reconstructions.
pub fn train_baseline(
    model: &mut Model,
    objects: &[ObjectViews],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    if objects.is_empty() {
        return Err(Error::InvalidArgument("no training objects".into()));
    }
    let targets: Vec<Vec<ViewRecord>> = objects.iter().map(|o| supervision_targets(model, o)).collect::<Result<_>>()?;
    let mut opt = AdamW::new(cfg);
    let mut log = TrainLog::default();
    for step in 0..cfg.base_steps {
        let lr = cosine_lr(cfg.lr, step, cfg.base_steps);
        let mut acc = BTreeMap::new();
        let mut losses = Vec::with_capacity(cfg.batch);
        for (b, oi) in batch_objects(objects.len(), step, cfg.batch, cfg.seed).into_iter().enumerate() {
            let views = pick_views(&targets[oi], cfg.supervision_views, derive_seed(cfg.seed, &[step as u64, b as u64]));
            let (bd, grads, _) = pass_loss(model, is_backbone, &objects[oi].cond, None, &views, None, &cfg.weights)?;
            add_into(&mut acc, grads, 1.0 / cfg.batch as f64);
            losses.push(bd);
        }
        clip(&mut acc, cfg.grad_clip);
        opt.step(&mut model.params, &acc, lr);
        let entry = StepLog { step, lr, passes: vec![LossBreakdown::mean(&losses)] };
        on_step(&entry);
        log.steps.push(entry);
    }
    Ok(log)
}

/// One unrolled refinement step on a batch: for every pass, reconstruct,
/// supervise, backpropagate and update immediately. Geometry handed to the
/// next pass is rendered from detached planes. Only refiner parameters move.
pub fn unrolled_train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[(&ObjectViews, &[ViewRecord])],
    cfg: &TrainConfig,
    step: usize,
    lr: f64,
) -> Result<Vec<LossBreakdown>> {
    if model.refiner.is_none() {
        return Err(Error::InvalidArgument("refiner training needs an attached refiner".into()));
    }
    let sems: Vec<Vec<Tensor>> = batch.iter().map(|(o, _)| frozen_semantic_tokens(model, &o.cond)).collect::<Result<_>>()?;
    let mut prev: Vec<Option<ReconstructionState>> = vec![None; batch.len()];
    let mut per_pass = Vec::with_capacity(cfg.unroll);
    for pass in 0..cfg.unroll {
        let mut acc = BTreeMap::new();
        let mut losses = Vec::with_capacity(batch.len());
        for (b, (obj, targets)) in batch.iter().enumerate() {
            let seed = derive_seed(cfg.seed, &[0x4ef1, step as u64, b as u64, pass as u64]);
            let views = pick_views(targets, cfg.supervision_views, seed);
            let (bd, grads, state) =
                pass_loss(model, is_refiner, &obj.cond, Some(&sems[b]), &views, prev[b].as_ref(), &cfg.weights)?;
            add_into(&mut acc, grads, 1.0 / batch.len() as f64);
            losses.push(bd);
            prev[b] = Some(state);
        }
        // The first pass bypasses the refiner entirely and yields no gradient.
        if !acc.is_empty() {
            clip(&mut acc, cfg.grad_clip);
            opt.step(&mut model.params, &acc, lr);
        }
        per_pass.push(LossBreakdown::mean(&losses));
    }
    Ok(per_pass)
}

pub fn train_refiner(
    model: &mut Model,
    objects: &[ObjectViews],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    if objects.is_empty() {
        return Err(Error::InvalidArgument("no training objects".into()));
    }
    let targets: Vec<Vec<ViewRecord>> = objects.iter().map(|o| supervision_targets(model, o)).collect::<Result<_>>()?;
    let mut opt = AdamW::new(cfg);
    let mut log = TrainLog::default();
    for step in 0..cfg.refine_steps {
        let lr = cosine_lr(cfg.refine_lr, step, cfg.refine_steps);
        let picks = batch_objects(objects.len(), step, cfg.batch, derive_seed(cfg.seed, &[0x4ef]));
        let batch: Vec<(&ObjectViews, &[ViewRecord])> = picks.iter().map(|&i| (&objects[i], &targets[i][..])).collect();
        let passes = unrolled_train_step(model, &mut opt, &batch, cfg, step, lr)?;
        let entry = StepLog { step, lr, passes };
        on_step(&entry);
        log.steps.push(entry);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10), 1.0);
        assert!((cosine_lr(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 10).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new([2], vec![1.0, -1.0]));
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut opt = AdamW::new(&cfg);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new([2], vec![0.3, -2.0]));
        opt.step(&mut s, &g, 0.1);
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new([1], vec![2.0]));
        let mut opt = AdamW::new(&TrainConfig::default());
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::new([1], vec![0.0]));
        opt.step(&mut s, &g, 0.5);
        assert!((s.get("w").unwrap().data()[0] - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-12);
    }
}
