//! Plain-SGD training of adapter and head parameters over synthetic scenes,
//! with the backbone frozen and fingerprinted before and after.

use super::synth::{make_synthetic_task, SyntheticScene};
use super::{
    argmax_labels, mse_loss, one_hot_target, saliency_map, saliency_target, EncoderConfig,
    EncoderError, HeadKind, Model,
};
use crate::adapter::{AdapterError, AdapterMode};
use crate::lightfield::{select_views, Image, SelectionStrategy};
use crate::metrics::{mae, ConfusionMatrix};
use crate::seeds;
use crate::tensor::{Graph, Tensor, TensorError};
use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub strategy: SelectionStrategy,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 120,
            lr: 1e-2,
            strategy: SelectionStrategy::MinAngularDifference,
            train_scenes: 3,
            eval_scenes: 2,
        }
    }
}

/// Per-step losses (index 0 is the pre-training loss, the last entry the
/// loss after the final update) plus held-out metrics and backbone
/// fingerprints.
#[derive(Debug, Clone)]
pub struct TrainingReport {
    pub losses: Vec<f64>,
    pub final_metrics: Vec<(String, f64)>,
    pub backbone_hash_before: u64,
    pub backbone_hash_after: u64,
}

impl TrainingReport {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("training records at least one loss")
    }

    pub fn backbone_unchanged(&self) -> bool {
        self.backbone_hash_before == self.backbone_hash_after
    }

    /// `step,loss` rows followed by one `final,...` line of metric pairs.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (step, loss) in self.losses.iter().enumerate() {
            writeln!(out, "{step},{loss:.9}").expect("writing to a String cannot fail");
        }
        let metrics: Vec<String> = self
            .final_metrics
            .iter()
            .map(|(name, value)| format!("{name}={value:.6}"))
            .collect();
        writeln!(out, "final,{}", metrics.join(",")).expect("writing to a String cannot fail");
        out
    }
}

struct PreparedScene {
    views: Vec<Image>,
    target: Tensor,
    scene: SyntheticScene,
}

/// Trains adapters and head on procedurally generated scenes. Scene content
/// is derived from `scene_seed` (independent of the model seed); held-out
/// evaluation scenes use their own derived seeds.
pub fn train_toy(
    config: &EncoderConfig,
    mode: AdapterMode,
    head: HeadKind,
    scene_seed: u64,
    opts: &TrainOptions,
) -> Result<(Model, TrainingReport), EncoderError> {
    let mut model = Model::new(config.clone(), 1, mode, head)?;
    let train = prepare_scenes(&model, scene_seed, "train", opts.train_scenes, opts.strategy)?;
    let eval = prepare_scenes(&model, scene_seed, "eval", opts.eval_scenes, opts.strategy)?;

    let hash_before = model.backbone_fingerprint();
    let mut losses = Vec::with_capacity(opts.steps + 1);
    for step in 0..opts.steps {
        let (loss, updates) = training_step(&model, &train, opts.lr)
            .map_err(|e| diverged(e, step))?;
        if !loss.is_finite() {
            return Err(EncoderError::DivergedLoss { step });
        }
        losses.push(loss);
        model.set_trainable_data(&updates);
    }
    let final_loss = batch_loss(&model, &train).map_err(|e| diverged(e, opts.steps))?;
    if !final_loss.is_finite() {
        return Err(EncoderError::DivergedLoss { step: opts.steps });
    }
    losses.push(final_loss);
    let hash_after = model.backbone_fingerprint();

    let final_metrics = evaluate(&model, &eval).map_err(|e| diverged(e, opts.steps))?;
    Ok((
        model,
        TrainingReport {
            losses,
            final_metrics,
            backbone_hash_before: hash_before,
            backbone_hash_after: hash_after,
        },
    ))
}

fn diverged(e: EncoderError, step: usize) -> EncoderError {
    let non_finite = matches!(
        &e,
        EncoderError::Tensor(TensorError::NonFinite { .. })
            | EncoderError::Tensor(TensorError::NonFiniteLoss)
            | EncoderError::Adapter(AdapterError::Tensor(TensorError::NonFinite { .. }))
            | EncoderError::Adapter(AdapterError::Tensor(TensorError::NonFiniteLoss))
    );
    if non_finite {
        EncoderError::DivergedLoss { step }
    } else {
        e
    }
}

fn prepare_scenes(
    model: &Model,
    scene_seed: u64,
    split: &str,
    count: usize,
    strategy: SelectionStrategy,
) -> Result<Vec<PreparedScene>, EncoderError> {
    let config = model.config();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let scene = make_synthetic_task(seeds::derive(scene_seed, &format!("{split}{i}")));
        let selection = select_views(&scene.light_field, strategy, config.k)?;
        if selection.k() != config.k {
            return Err(EncoderError::ConfigInvalid(format!(
                "strategy {strategy} selects {} views but the model expects k={}",
                selection.k(),
                config.k
            )));
        }
        let views = selection.extract(&scene.light_field)?;
        let target = match model.head_kind() {
            HeadKind::Segmentation => one_hot_target(
                &scene.token_labels(config.patch_size),
                config.num_classes,
            )?,
            HeadKind::Saliency => saliency_target(&scene.token_saliency(config.patch_size))?,
        };
        out.push(PreparedScene {
            views,
            target,
            scene,
        });
    }
    Ok(out)
}

/// One full-batch gradient step; returns the pre-update loss and the updated
/// parameter buffers in canonical order.
fn training_step(
    model: &Model,
    scenes: &[PreparedScene],
    lr: f64,
) -> Result<(f64, Vec<Vec<f64>>), EncoderError> {
    let mut g = Graph::new();
    let nodes = model.register_trainable(&mut g);
    let loss = batch_loss_nodes(model, &mut g, &nodes, scenes)?;
    let loss_value = g.data(loss)[0];
    g.backward(loss)?;

    let mut updates = Vec::with_capacity(nodes.named.len());
    for (_, id) in &nodes.named {
        let data = g.data(*id);
        let update: Vec<f64> = match g.grad(*id) {
            Some(grad) => data.iter().zip(grad).map(|(w, gw)| w - lr * gw).collect(),
            None => data.to_vec(),
        };
        updates.push(update);
    }
    Ok((loss_value, updates))
}

fn batch_loss(model: &Model, scenes: &[PreparedScene]) -> Result<f64, EncoderError> {
    let mut g = Graph::new();
    let nodes = model.register_frozen(&mut g);
    let loss = batch_loss_nodes(model, &mut g, &nodes, scenes)?;
    Ok(g.data(loss)[0])
}

fn batch_loss_nodes(
    model: &Model,
    g: &mut Graph,
    nodes: &super::TrainableNodes,
    scenes: &[PreparedScene],
) -> Result<crate::tensor::NodeId, EncoderError> {
    let mut total = None;
    for prepared in scenes {
        let out = model.forward_nodes(g, &prepared.views, nodes)?;
        let target = g.constant(prepared.target.clone());
        let scene_loss = mse_loss(g, out.logits, target)?;
        total = Some(match total {
            None => scene_loss,
            Some(acc) => g.add(acc, scene_loss)?,
        });
    }
    let total = total.expect("at least one scene");
    Ok(g.scale(total, 1.0 / scenes.len() as f64)?)
}

fn evaluate(model: &Model, scenes: &[PreparedScene]) -> Result<Vec<(String, f64)>, EncoderError> {
    let config = model.config();
    let grid = |scene: &SyntheticScene| {
        let labels = scene.token_labels(config.patch_size);
        (labels.height(), labels.width())
    };
    match model.head_kind() {
        HeadKind::Segmentation => {
            let mut cm = ConfusionMatrix::new(config.num_classes);
            for prepared in scenes {
                let art = model.forward_artifacts(&prepared.views)?;
                let (gh, gw) = grid(&prepared.scene);
                let pred = argmax_labels(&art.logits, gh, gw);
                cm.accumulate(
                    &prepared.scene.token_labels(config.patch_size),
                    &pred,
                    None,
                )?;
            }
            let s = cm.scores()?;
            Ok(vec![
                ("miou".into(), s.mean_iou),
                ("macc".into(), s.mean_acc),
                ("acc".into(), s.pixel_acc),
            ])
        }
        HeadKind::Saliency => {
            let mut total = 0.0;
            for prepared in scenes {
                let art = model.forward_artifacts(&prepared.views)?;
                let (gh, gw) = grid(&prepared.scene);
                let pred = saliency_map(&art.logits, gh, gw);
                total += mae(&pred, &prepared.scene.token_saliency(config.patch_size))?;
            }
            Ok(vec![("mae".into(), total / scenes.len() as f64)])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_opts() -> TrainOptions {
        TrainOptions {
            steps: 12,
            lr: 0.05,
            strategy: SelectionStrategy::MinAngularDifference,
            train_scenes: 2,
            eval_scenes: 1,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_the_loss_flat() {
        let config = EncoderConfig::toy(3, 31);
        let opts = TrainOptions {
            lr: 0.0,
            steps: 5,
            ..quick_opts()
        };
        let (_, report) = train_toy(
            &config,
            AdapterMode::Shared,
            HeadKind::Segmentation,
            7,
            &opts,
        )
        .unwrap();
        assert_eq!(report.losses.len(), 6);
        for loss in &report.losses {
            assert_eq!(*loss, report.losses[0]);
        }
    }

    #[test]
    fn backbone_is_untouched_by_training() {
        let config = EncoderConfig::toy(3, 32);
        let (model, report) = train_toy(
            &config,
            AdapterMode::Shared,
            HeadKind::Segmentation,
            8,
            &quick_opts(),
        )
        .unwrap();
        assert!(report.backbone_unchanged());
        assert_eq!(report.backbone_hash_after, model.backbone_fingerprint());
    }

    #[test]
    fn head_only_training_reduces_the_loss() {
        let config = EncoderConfig::toy(3, 33).without_adapters();
        let opts = TrainOptions {
            steps: 40,
            ..quick_opts()
        };
        let (_, report) = train_toy(
            &config,
            AdapterMode::Shared,
            HeadKind::Segmentation,
            9,
            &opts,
        )
        .unwrap();
        assert!(
            report.final_loss() < report.losses[0],
            "loss {} -> {}",
            report.losses[0],
            report.final_loss()
        );
    }

    #[test]
    fn training_is_deterministic() {
        let config = EncoderConfig::toy(3, 34);
        let run = || {
            train_toy(
                &config,
                AdapterMode::Shared,
                HeadKind::Segmentation,
                10,
                &quick_opts(),
            )
            .unwrap()
            .1
            .to_csv()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let config = EncoderConfig::toy(3, 35);
        let opts = TrainOptions {
            lr: 1e18,
            steps: 80,
            ..quick_opts()
        };
        match train_toy(
            &config,
            AdapterMode::Shared,
            HeadKind::Segmentation,
            11,
            &opts,
        ) {
            Err(EncoderError::DivergedLoss { .. }) => {}
            Err(other) => panic!("expected divergence, got error {other}"),
            Ok(_) => panic!("expected divergence, training succeeded"),
        }
    }

    #[test]
    fn saliency_head_reports_mae() {
        let config = EncoderConfig::toy(3, 36);
        let (_, report) = train_toy(
            &config,
            AdapterMode::Shared,
            HeadKind::Saliency,
            12,
            &quick_opts(),
        )
        .unwrap();
        assert_eq!(report.final_metrics.len(), 1);
        assert_eq!(report.final_metrics[0].0, "mae");
        assert!((0.0..=1.0).contains(&report.final_metrics[0].1));
    }

    #[test]
    fn csv_has_expected_shape() {
        let config = EncoderConfig::toy(3, 37);
        let opts = TrainOptions {
            steps: 3,
            ..quick_opts()
        };
        let (_, report) = train_toy(
            &config,
            AdapterMode::Shared,
            HeadKind::Segmentation,
            13,
            &opts,
        )
        .unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,loss");
        assert_eq!(lines.len(), 1 + 4 + 1); // header + 4 losses + final
        assert!(lines.last().unwrap().starts_with("final,miou="));
    }
}
