//! Train/held-out splitting and the refiner ablation comparison.

use crate::error::{Error, Result};
use crate::eval::{eval_model, EvalConfig, MetricsReport};
use crate::model::{Ablation, Model};
use crate::scenekit::ObjectViews;
use crate::train::{train_refiner, StepLog, TrainConfig};

/// The last `holdout` objects are held out for evaluation.
pub fn split_holdout(objects: &[ObjectViews], holdout: usize) -> Result<(&[ObjectViews], &[ObjectViews])> {
    if holdout == 0 || holdout >= objects.len() {
        return Err(Error::Config(format!(
            "holdout {holdout} must leave training and evaluation objects out of {}",
            objects.len()
        )));
    }
    Ok(objects.split_at(objects.len() - holdout))
}

pub fn scene_hashes(objects: &[ObjectViews]) -> Vec<String> {
    objects.iter().map(|o| o.scene.content_hash()).collect()
}

/// Row label of a refiner variant in comparison tables.
pub fn method_name(ablation: Ablation) -> &'static str {
    match ablation {
        Ablation::None => "proposed",
        other => other.name(),
    }
}

/// Row order of the ablation table.
pub const ABLATION_ROWS: [Ablation; 5] =
    [Ablation::RandomInit, Ablation::TokenConcat, Ablation::NormalOnly, Ablation::DepthOnly, Ablation::None];

/// Trains one refiner per variant on top of a frozen copy of `base` and
/// evaluates each at `eval.iterations`. The first row is the unrefined baseline.
pub fn ablation_table(
    base: &Model,
    train: &[ObjectViews],
    held: &[ObjectViews],
    variants: &[Ablation],
    cfg: &TrainConfig,
    eval: &EvalConfig,
    mut on_step: impl FnMut(Ablation, &StepLog),
) -> Result<Vec<MetricsReport>> {
    let train_scenes = scene_hashes(train);
    let mut rows = vec![eval_model(base, "baseline", held, &train_scenes, eval, 1)?];
    for &variant in variants {
        let mut model = base.clone();
        model.detach_refiner();
        model.attach_refiner(variant, cfg.seed)?;
        train_refiner(&mut model, train, cfg, |s| on_step(variant, s))?;
        rows.push(eval_model(&model, method_name(variant), held, &train_scenes, eval, eval.iterations)?);
    }
    Ok(rows)
}
