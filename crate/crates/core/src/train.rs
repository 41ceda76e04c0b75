//! Training orchestration over the split-counting objective.

use std::io::Write;
use std::path::PathBuf;

use cmlp_tensor::{BnRunning, Mode, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::data::{
    augment, generate_indexed, load_manifest, random_crop, read_image, resize, SceneSample,
    SynthConfig,
};
use crate::error::{config_err, io_err, Result};
use crate::eval::{compute_metrics, sliding_window_count};
use crate::frontend::FrontendConfig;
use crate::model::{CrowdMlp, ModelConfig};
use crate::optim::{adam_step, schedule_lr, AdamState, MultiStepLr};
use crate::split_counting::{split_counting_step, LossBundle};
use crate::tokenizer::StreamKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic { config: SynthConfig, scenes: usize },
    Manifest { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Epoch indices; `None` places them at 60% and 85% of `epochs`.
    pub milestones: Option<Vec<usize>>,
    pub gamma: f64,
    pub seed: u64,
    /// Adds the split-counting terms to the count loss.
    pub proxy: bool,
    pub augment: bool,
    /// Global gradient-norm ceiling; off by default.
    pub grad_clip: Option<f64>,
    /// Recomputes normalization statistics from the training scenes after
    /// every epoch instead of relying on the running averages alone.
    pub recalibrate_bn: bool,
    pub val_fraction: f64,
    pub data: DataSource,
    pub log_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainConfig {
    /// Laptop-scale defaults: 128 crops, batch 4, small frontend.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig {
                frontend: FrontendConfig {
                    block_channels: vec![8, 16, 32],
                    convs_per_block: 2,
                    reduced_channels: 16,
                    weights_path: None,
                },
                token_dim: 32,
                count_scale: 30.0,
                ..ModelConfig::default()
            },
            lr: 1e-3,
            batch_size: 4,
            epochs: 63,
            max_steps: Some(500),
            milestones: None,
            gamma: 0.5,
            seed: 0,
            proxy: true,
            augment: true,
            grad_clip: None,
            recalibrate_bn: true,
            val_fraction: 0.1,
            data: DataSource::Synthetic {
                config: SynthConfig::default(),
                scenes: 32,
            },
            log_path: None,
            checkpoint_path: None,
        }
    }

    /// Full-size layout at lr 1e-5 and batch 12; slow on a CPU.
    pub fn full() -> Self {
        Self {
            model: ModelConfig::full(),
            lr: 1e-5,
            batch_size: 12,
            epochs: 200,
            max_steps: None,
            data: DataSource::Synthetic {
                config: SynthConfig {
                    width: 512,
                    height: 384,
                    count_min: 80,
                    count_max: 320,
                    ..SynthConfig::default()
                },
                scenes: 256,
            },
            ..Self::desk()
        }
    }

    /// The smallest end-to-end configuration, for checks and smoke runs.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            batch_size: 2,
            epochs: 1,
            max_steps: Some(2),
            data: DataSource::Synthetic {
                config: SynthConfig::default(),
                scenes: 4,
            },
            ..Self::desk()
        }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "full" => Some(Self::full()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn schedule(&self) -> MultiStepLr {
        MultiStepLr {
            base: self.lr,
            milestones: self
                .milestones
                .clone()
                .unwrap_or_else(|| MultiStepLr::default_milestones(self.epochs)),
            gamma: self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule().validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return config_err("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return config_err("val_fraction must lie in [0, 1)");
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return config_err("grad_clip must be positive");
            }
        }
        Ok(())
    }
}

/// The four single-stream removals plus the full model, labelled for reports.
pub fn ablation_configs(base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut out = vec![("full".to_string(), base.clone())];
    for kind in StreamKind::ALL {
        if base.streams.contains(kind) {
            let mut cfg = base.clone();
            cfg.streams = cfg.streams.without(kind);
            out.push((format!("without-{}", kind.tag()), cfg));
        }
    }
    out
}

/// One training-log line.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps completed by the end of the epoch.
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    /// Batch-mean losses of the very first step.
    pub first_step: LossBundle,
    pub steps: usize,
    /// Best validation MAE and the epoch that reached it; `None` without a validation split.
    pub best_val: Option<(f64, usize)>,
    pub best: Checkpoint,
    pub model: CrowdMlp,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Loads (or renders) every scene of the configured source.
pub fn load_scenes(source: &DataSource, input_size: usize) -> Result<Vec<SceneSample>> {
    match source {
        DataSource::Synthetic { config, scenes } => (0..*scenes)
            .map(|i| generate_indexed(config, i as u64))
            .collect(),
        DataSource::Manifest { path } => load_manifest(path)?
            .into_iter()
            .map(|r| {
                Ok(SceneSample {
                    image: resize(&read_image(&r.image)?, input_size, input_size)?,
                    count: r.count,
                    points: None,
                })
            })
            .collect(),
    }
}

/// Deterministic held-out split: `round(fraction · n)` scenes chosen by seed.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::derive(seed, 1).shuffle(&mut idx);
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    (train, val.into_iter().collect())
}

/// Model input for one training example: a random crop when points allow it,
/// otherwise the scene resized to the input side.
fn training_view(scene: &SceneSample, size: usize, augment_on: bool, rng: &mut Rng) -> Result<SceneSample> {
    let view = if scene.points.is_some() && scene.height() >= size && scene.width() >= size {
        random_crop(scene, size, rng)?
    } else {
        SceneSample {
            image: resize(&scene.image, size, size)?,
            count: scene.count,
            points: None,
        }
    };
    Ok(if augment_on { augment(&view, rng) } else { view })
}

pub fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let mut data = Vec::with_capacity(images.len() * images[0].numel());
    for t in images {
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}

/// MAE of sliding-window predictions over whole scenes.
pub fn validation_mae(model: &CrowdMlp, scenes: &[&SceneSample]) -> Result<f64> {
    let window = model.config().input_size;
    let mut preds = Vec::with_capacity(scenes.len());
    for s in scenes {
        let image = if s.height() < window || s.width() < window {
            resize(&s.image, window, window)?
        } else {
            s.image.clone()
        };
        preds.push(sliding_window_count(model, &image, window)?.total);
    }
    let gt: Vec<f64> = scenes.iter().map(|s| s.count).collect();
    Ok(compute_metrics(&preds, &gt)?.mae)
}

/// Replaces every running estimate with the average of train-mode batch
/// statistics over `scenes`, taken in batches of `batch_size` without augmentation.
pub fn recalibrate_bn(model: &mut CrowdMlp, scenes: &[&SceneSample], batch_size: usize, seed: u64) -> Result<()> {
    let size = model.config().input_size;
    let mut rng = Rng::derive(seed, 4);
    // Per layer: summed statistics and the number of batches folded in.
    let mut sums: Vec<Option<(BnRunning, usize)>> = vec![None; model.bn.len()];
    for chunk in scenes.chunks(batch_size) {
        let views = chunk
            .iter()
            .map(|s| training_view(s, size, false, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let images = stack_images(&views.iter().map(|v| &v.image).collect::<Vec<_>>())?;
        let mut s = model.session(Mode::Train, rng.split());
        let x = s.tape.constant(images);
        model.forward(&mut s, x)?;
        for obs in s.into_bn_observations() {
            let (sum, n) = sums[obs.layer].get_or_insert_with(|| {
                let zeros = vec![0.0; obs.mean.len()];
                (BnRunning { mean: zeros.clone(), var: zeros }, 0)
            });
            for (a, b) in sum.mean.iter_mut().zip(&obs.mean) {
                *a += b;
            }
            for (a, b) in sum.var.iter_mut().zip(&obs.var) {
                *a += b;
            }
            *n += 1;
        }
    }
    for ((_, running), sum) in model.bn.iter_mut().zip(sums) {
        if let Some((sum, n)) = sum {
            running.mean = sum.mean.into_iter().map(|v| v / n as f64).collect();
            running.var = sum.var.into_iter().map(|v| v / n as f64).collect();
        }
    }
    Ok(())
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scenes = load_scenes(&cfg.data, cfg.model.input_size)?;
    if scenes.is_empty() {
        return config_err("dataset is empty");
    }
    let (train_idx, val_idx) = split_indices(scenes.len(), cfg.val_fraction, cfg.seed);
    let mut model = CrowdMlp::new(&cfg.model)?;
    let mut adam = AdamState::new(&model.params);
    let schedule = cfg.schedule();
    let mut data_rng = Rng::derive(cfg.seed, 2);
    let mut step_rng = Rng::derive(cfg.seed, 3);
    let mut log_file = match &cfg.log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(io_err(p))?),
        None => None,
    };
    let size = cfg.model.input_size;
    let val_scenes: Vec<&SceneSample> = val_idx.iter().map(|&i| &scenes[i]).collect();
    let train_scenes: Vec<&SceneSample> = train_idx.iter().map(|&i| &scenes[i]).collect();

    let mut log = Vec::new();
    let mut first_step = None;
    let mut steps = 0;
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut order = train_idx.clone();
    'epochs: for epoch in 0..cfg.epochs {
        let lr = schedule_lr(epoch, &schedule);
        model.begin_epoch(&mut data_rng);
        data_rng.shuffle(&mut order);
        let mut sums = [0.0; 3];
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let views = chunk
                .iter()
                .map(|&i| training_view(&scenes[i], size, cfg.augment, &mut data_rng))
                .collect::<Result<Vec<_>>>()?;
            let images = stack_images(&views.iter().map(|v| &v.image).collect::<Vec<_>>())?;
            let counts: Vec<f64> = views.iter().map(|v| v.count).collect();
            let mut out =
                split_counting_step(&model, &images, &counts, &mut step_rng, Mode::Train, cfg.proxy)?;
            model.bn.apply(&out.bn_observations);
            if let Some(max) = cfg.grad_clip {
                let norm = out.grads.global_norm();
                if norm > max {
                    out.grads.scale(max / norm);
                }
            }
            adam_step(&mut model.params, &out.grads, &mut adam, lr)?;
            steps += 1;
            first_step.get_or_insert(out.bundle);
            for b in &out.per_example {
                sums[0] += b.l_c;
                sums[1] += b.l_ss;
                sums[2] += b.l_i;
            }
            seen += out.per_example.len();
        }
        if seen == 0 {
            break 'epochs;
        }
        let n = seen as f64;
        let (l_c, l_ss, l_i) = (sums[0] / n, sums[1] / n, sums[2] / n);
        let entry = EpochLog {
            epoch,
            step: steps,
            losses: LossBundle {
                l_c,
                l_ss,
                l_i,
                total: l_c + 0.5 * (l_ss + l_i),
            },
            lr,
        };
        if let (Some(f), Some(p)) = (log_file.as_mut(), cfg.log_path.as_ref()) {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(f, "{line}").map_err(io_err(p))?;
        }
        log.push(entry);

        if cfg.recalibrate_bn {
            recalibrate_bn(&mut model, &train_scenes, cfg.batch_size, cfg.seed ^ epoch as u64)?;
        }
        let score = if val_scenes.is_empty() {
            None
        } else {
            Some(validation_mae(&model, &val_scenes)?)
        };
        let improved = match (&best, score) {
            (None, _) => true,
            (Some((b, _, _)), Some(s)) => s < *b,
            (Some(_), None) => true,
        };
        if improved {
            let mut ckpt = Checkpoint::from_model(&model, epoch).with_adam(&adam);
            ckpt.rng = Some(step_rng.state());
            ckpt.metrics = serde_json::json!({ "val_mae": score });
            best = Some((score.unwrap_or(f64::NAN), epoch, ckpt));
        }
    }
    let (best_score, best_epoch, best_ckpt) = best.ok_or_else(|| {
        crate::Error::Config("no training step was run".into())
    })?;
    if let Some(path) = &cfg.checkpoint_path {
        save_checkpoint(path, &best_ckpt)?;
    }
    Ok(TrainOutcome {
        log,
        first_step: first_step.unwrap_or_default(),
        steps,
        best_val: (!val_scenes.is_empty()).then_some((best_score, best_epoch)),
        best: best_ckpt,
        model,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}
