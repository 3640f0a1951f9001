//! Patch-based training with Adam and a step-halving learning rate,
//! evaluation on full images, and the ablation harness.

mod ablation;
mod eval;
mod log;

pub use ablation::{run_ablation_suite, AblationReport, AblationRow, Variant, TABLE_GRID_SIZES};
pub use eval::{evaluate, evaluate_with, hazy_baseline, EvalReport};
pub use log::{EvalRecord, StepRecord, TrainLog};

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::haze::{Dataset, ScenePair};
use crate::io::{save_checkpoint, Checkpoint};
use crate::loss::{total_loss, FeatureNet, DEFAULT_LAMBDA};
use crate::network::{build, forward, Bound, GridConfig, Model, ModelParams};
use crate::tensor::{AdamState, Graph, Tensor};

/// Training hyperparameters. Defaults are desk scale: 64x64 patches,
/// batch 4, learning rate 1e-3 halved every 20 epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr0: f32,
    /// Epochs between learning-rate halvings.
    pub halve_every: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub lambda: f64,
    /// Evaluate on the held-out set every this many steps (and at the end).
    pub eval_every: Option<usize>,
    /// Where `last.gdhz`, `best.gdhz` and the logs go.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 64,
            batch_size: 4,
            lr0: 1e-3,
            halve_every: 20,
            epochs: 1,
            max_steps: None,
            seed: 0,
            lambda: DEFAULT_LAMBDA,
            eval_every: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, grid: &GridConfig) -> Result<()> {
        let m = grid.size_multiple();
        if self.patch_size == 0 || self.patch_size % m != 0 {
            return Err(Error::InvalidParameter(format!(
                "patch size {} must be a positive multiple of {m} for {} rows",
                self.patch_size, grid.rows
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be at least 1".into()));
        }
        if self.halve_every == 0 {
            return Err(Error::InvalidParameter("halve_every must be at least 1 epoch".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "learning rate {} must be positive",
                self.lr0
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lambda {} must be non-negative",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn lr_schedule(epoch: usize, lr0: f32, halve_every: usize) -> Result<f32> {
    if halve_every == 0 {
        return Err(Error::InvalidParameter("halve_every must be at least 1 epoch".into()));
    }
    let halvings = (epoch / halve_every).min(i32::MAX as usize) as i32;
    Ok(lr0 * 0.5f32.powi(halvings))
}

/// Top-left corner of a uniformly random `patch x patch` window.
fn patch_origin(h: usize, w: usize, patch: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if h < patch || w < patch {
        return Err(Error::Dataset(format!(
            "image {h}x{w} is smaller than the {patch}x{patch} patch"
        )));
    }
    Ok((rng.gen_range(0..=h - patch), rng.gen_range(0..=w - patch)))
}

/// Crop the same random window from every part of a pair: clear, hazy
/// and depth.
pub fn sample_pair_patch(pair: &ScenePair, patch: usize, rng: &mut impl Rng) -> Result<ScenePair> {
    let (y, x) = patch_origin(pair.height(), pair.width(), patch, rng)?;
    Ok(ScenePair {
        clear: pair.clear.crop(y, x, patch, patch)?,
        hazy: pair.hazy.crop(y, x, patch, patch)?,
        params: pair.params,
        depth: pair.depth.crop(y, x, patch, patch)?,
    })
}

/// `(hazy, clear)` crops sharing one random window.
pub fn sample_patch(pair: &ScenePair, patch: usize, rng: &mut impl Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (y, x) = patch_origin(pair.height(), pair.width(), patch, rng)?;
    Ok((
        pair.hazy.crop(y, x, patch, patch)?,
        pair.clear.crop(y, x, patch, patch)?,
    ))
}

/// Generator for epoch `epoch`: shuffling and crops of one epoch depend
/// only on the master seed and the epoch index.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub smooth_l1: f64,
    pub perceptual: f64,
    pub total: f64,
}

/// Model, optimizer and counters of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub grid: GridConfig,
    pub config: TrainConfig,
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub step: usize,
    pub epoch: usize,
    pub log: TrainLog,
    features: FeatureNet,
    best_psnr: Option<f64>,
}

impl Trainer {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(grid: GridConfig, config: TrainConfig) -> Result<Self> {
        config.validate(&grid)?;
        let params = build(&grid, config.seed)?;
        Ok(Trainer {
            grid,
            config,
            params,
            optimizer: AdamState::default(),
            step: 0,
            epoch: 0,
            log: TrainLog::default(),
            features: FeatureNet::default(),
            best_psnr: None,
        })
    }

    /// Continue from a checkpoint; `config.seed` is replaced by the
    /// checkpoint's master seed.
    pub fn resume(ckpt: Checkpoint, mut config: TrainConfig) -> Result<Self> {
        config.seed = ckpt.seed;
        config.validate(&ckpt.config)?;
        Ok(Trainer {
            grid: ckpt.config,
            config,
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            step: ckpt.step as usize,
            epoch: ckpt.epoch as usize,
            log: TrainLog::default(),
            features: FeatureNet::default(),
            best_psnr: None,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.grid.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            step: self.step as u64,
            epoch: self.epoch as u64,
            seed: self.config.seed,
        }
    }

    pub fn model(&self) -> Model {
        Model {
            config: self.grid.clone(),
            params: self.params.clone(),
        }
    }

    /// Loss and parameter gradients on one batch, without updating.
    pub fn gradients(
        &self,
        hazy: &Tensor<f32>,
        clear: &Tensor<f32>,
    ) -> Result<(StepLosses, BTreeMap<String, Tensor<f32>>)> {
        let mut g = Graph::<f32>::new();
        let bound = Bound::new(&mut g, &self.params, true);
        let x = g.constant(hazy.clone());
        let y = g.constant(clear.clone());
        let out = forward(&mut g, &bound, &self.grid, x)?;
        let terms = total_loss(&mut g, out.image, y, self.config.lambda, &self.features)?;
        let losses = StepLosses {
            smooth_l1: g.value(terms.smooth_l1).item() as f64,
            perceptual: g.value(terms.perceptual).item() as f64,
            total: g.value(terms.total).item() as f64,
        };
        if !(losses.smooth_l1.is_finite() && losses.perceptual.is_finite() && losses.total.is_finite()) {
            return Err(Error::Diverged { step: self.step + 1 });
        }
        g.backward(terms.total)?;
        Ok((losses, bound.grads(&g)))
    }

    /// One Adam step on a batch at learning rate `lr`. A non-finite loss or
    /// gradient leaves parameters and optimizer state untouched.
    pub fn train_step(&mut self, hazy: &Tensor<f32>, clear: &Tensor<f32>, lr: f32) -> Result<StepLosses> {
        let (losses, grads) = self.gradients(hazy, clear)?;
        if grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Diverged { step: self.step + 1 });
        }
        self.optimizer.step(&mut self.params, &grads, lr)?;
        self.step += 1;
        self.log.steps.push(StepRecord {
            step: self.step,
            lr,
            smooth_l1: losses.smooth_l1,
            perceptual: losses.perceptual,
            total: losses.total,
        });
        Ok(losses)
    }

    fn done(&self) -> bool {
        self.epoch >= self.config.epochs || self.config.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Run epochs until `config.epochs` or `config.max_steps` is reached.
    /// Each epoch shuffles `data`, crops one patch per image and steps once
    /// per batch. Checkpoints go to `config.checkpoint_dir` at the end of
    /// every epoch (`last.gdhz`) and whenever held-out PSNR improves
    /// (`best.gdhz`).
    pub fn fit(&mut self, data: &Dataset, held_out: Option<&Dataset>) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        if let Some(dir) = &self.config.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let patch = self.config.patch_size;
        while !self.done() {
            let lr = lr_schedule(self.epoch, self.config.lr0, self.config.halve_every)?;
            let mut rng = epoch_rng(self.config.seed, self.epoch);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let mut completed = true;
            for chunk in order.chunks(self.config.batch_size) {
                if self.config.max_steps.is_some_and(|m| self.step >= m) {
                    completed = false;
                    break;
                }
                let mut hazy = Vec::with_capacity(chunk.len());
                let mut clear = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let (h, c) = sample_patch(&data.pairs[i], patch, &mut rng)?;
                    hazy.push(h);
                    clear.push(c);
                }
                self.train_step(&Tensor::stack(&hazy)?, &Tensor::stack(&clear)?, lr)?;
                if let (Some(every), Some(eval_set)) = (self.config.eval_every, held_out) {
                    if self.step % every == 0 {
                        self.evaluate_and_snapshot(eval_set)?;
                    }
                }
            }
            // A step cap can end training mid-epoch; only whole epochs count.
            if !completed {
                break;
            }
            self.epoch += 1;
            self.save("last.gdhz")?;
        }
        if let Some(eval_set) = held_out {
            if self.log.evals.last().map(|e| e.step) != Some(self.step) {
                self.evaluate_and_snapshot(eval_set)?;
            }
        }
        self.save("last.gdhz")?;
        self.write_logs()
    }

    fn evaluate_and_snapshot(&mut self, eval_set: &Dataset) -> Result<()> {
        let report = evaluate(&self.model(), eval_set)?;
        self.log.evals.push(EvalRecord {
            step: self.step,
            psnr: report.mean_psnr,
            ssim: report.mean_ssim,
        });
        if self.best_psnr.is_none_or(|b| report.mean_psnr > b) {
            self.best_psnr = Some(report.mean_psnr);
            self.save("best.gdhz")?;
        }
        Ok(())
    }

    fn save(&self, name: &str) -> Result<()> {
        match &self.config.checkpoint_dir {
            Some(dir) => save_checkpoint(&self.checkpoint(), dir.join(name)),
            None => Ok(()),
        }
    }

    fn write_logs(&self) -> Result<()> {
        let Some(dir) = &self.config.checkpoint_dir else {
            return Ok(());
        };
        let path = dir.join("train.log");
        std::fs::write(&path, self.log.to_text()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("eval.log");
        std::fs::write(&path, self.log.eval_text()).map_err(|e| Error::io(&path, e))
    }
}

/// Train a freshly initialized `grid` network on `data`.
pub fn fit(grid: &GridConfig, data: &Dataset, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let mut trainer = Trainer::new(grid.clone(), config.clone())?;
    trainer.fit(data, None)?;
    Ok((trainer.params, trainer.log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::haze::{apply_haze, procedural_dataset, transmission, SynthOptions};

    fn tiny_grid() -> GridConfig {
        GridConfig::default()
            .with_grid(2, 2)
            .with_base_channels(4)
            .with_growth(4)
            .with_rdb_layers(2)
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            patch_size: 16,
            batch_size: 2,
            halve_every: 1000,
            epochs: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_closed_form() {
        assert_eq!(lr_schedule(0, 1e-3, 20).unwrap(), 1e-3);
        assert_eq!(lr_schedule(20, 1e-3, 20).unwrap(), 5e-4);
        assert_eq!(lr_schedule(59, 1e-3, 20).unwrap(), 2.5e-4);
        assert_eq!(lr_schedule(3, 1e-3, 2).unwrap(), 5e-4);
        assert!(lr_schedule(1, 1e-3, 0).is_err());
    }

    #[test]
    fn patches_are_co_located() {
        let data = procedural_dataset(1, 24, 20, &SynthOptions::indoor(), 3).unwrap();
        let pair = &data.pairs[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let p = sample_pair_patch(pair, 8, &mut rng).unwrap();
            let t = transmission(&p.depth, p.params.beta()).unwrap();
            let rehazed = apply_haze(&p.clear, &t, p.params.airlight()).unwrap();
            assert_eq!(rehazed, p.hazy);
        }
        let (h, c) = sample_patch(pair, 20, &mut rng).unwrap();
        assert_eq!(h.shape().h, 20);
        assert_eq!(c.shape(), h.shape());
        assert!(sample_patch(pair, 21, &mut rng).is_err());
    }

    #[test]
    fn full_size_patch_is_the_image() {
        let data = procedural_dataset(1, 16, 16, &SynthOptions::indoor(), 3).unwrap();
        let (h, c) = sample_patch(&data.pairs[0], 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((h, c), (data.pairs[0].hazy.clone(), data.pairs[0].clear.clone()));
    }

    #[test]
    fn crop_sequence_is_seeded() {
        let data = procedural_dataset(1, 32, 32, &SynthOptions::indoor(), 3).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..4)
                .map(|_| sample_patch(&data.pairs[0], 8, &mut rng).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn config_validation() {
        let grid = tiny_grid();
        assert!(TrainConfig {
            patch_size: 15,
            ..tiny_train()
        }
        .validate(&grid)
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..tiny_train()
        }
        .validate(&grid)
        .is_err());
        assert!(TrainConfig {
            halve_every: 0,
            ..tiny_train()
        }
        .validate(&grid)
        .is_err());
        tiny_train().validate(&grid).unwrap();
    }

    #[test]
    fn fit_is_deterministic_and_logs_every_step() {
        let data = procedural_dataset(3, 16, 16, &SynthOptions::indoor(), 1).unwrap();
        let (p1, log1) = fit(&tiny_grid(), &data, &tiny_train()).unwrap();
        let (p2, log2) = fit(&tiny_grid(), &data, &tiny_train()).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(log1.to_text(), log2.to_text());
        // 3 images in batches of 2: two steps per epoch.
        assert_eq!(log1.steps.len(), 8);
        assert!(log1.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
    }

    #[test]
    fn max_steps_stops_mid_epoch() {
        let data = procedural_dataset(3, 16, 16, &SynthOptions::indoor(), 1).unwrap();
        let config = TrainConfig {
            max_steps: Some(3),
            epochs: 100,
            ..tiny_train()
        };
        let mut t = Trainer::new(tiny_grid(), config).unwrap();
        t.fit(&data, None).unwrap();
        assert_eq!((t.step, t.epoch), (3, 1));
    }

    #[test]
    fn divergence_leaves_parameters_untouched() {
        let data = procedural_dataset(1, 16, 16, &SynthOptions::indoor(), 1).unwrap();
        let mut t = Trainer::new(tiny_grid(), tiny_train()).unwrap();
        let before = t.params.clone();
        let bad = data.pairs[0].hazy.map(|_| f32::NAN);
        let err = t.train_step(&bad, &data.pairs[0].clear, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 1 }), "{err}");
        assert_eq!(t.params, before);
        assert_eq!(t.optimizer.t, 0);
        assert!(t.log.steps.is_empty());
    }

    #[test]
    fn lambda_changes_only_the_optimized_objective() {
        let data = procedural_dataset(2, 16, 16, &SynthOptions::indoor(), 2).unwrap();
        let (_, with) = fit(&tiny_grid(), &data, &tiny_train()).unwrap();
        let (_, without) = fit(
            &tiny_grid(),
            &data,
            &TrainConfig {
                lambda: 0.0,
                ..tiny_train()
            },
        )
        .unwrap();
        // The first step sees identical parameters, so L_s and L_p agree;
        // the objectives differ, so later steps drift apart.
        assert_eq!(with.steps[0].smooth_l1, without.steps[0].smooth_l1);
        assert_eq!(without.steps[0].total, without.steps[0].smooth_l1);
        assert_ne!(
            with.steps.last().unwrap().perceptual,
            without.steps.last().unwrap().perceptual
        );
        assert!(with.steps.iter().chain(&without.steps).all(|s| s.smooth_l1.is_finite()));
    }
}
