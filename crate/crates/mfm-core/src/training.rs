//! Per-stage trainer for the velocity networks.
//!
//! Each stage owns an independent model and is trained on its own segment of
//! the path between a noised upsampled coarse cloud and a noised fine cloud:
//! draw a local time, form the interpolated state, and regress the network
//! output toward the endpoint difference. Stages never share optimizer
//! state; a fresh Adam instance is created per `train_stage` call.
//!
//! Randomness is derived from a master seed per draw index, so a training
//! run is reproducible bit-for-bit regardless of how rayon schedules the
//! batch across threads.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use crate::cloud::PointCloud;
use crate::error::{invalid_arg, Error, Result};
use crate::geometry::HierarchyPair;
use crate::model::{ModelArch, VelocityModel};
use crate::schedule::{lerp_endpoints, make_endpoints, StageSchedule};
use crate::seeds::{derive_seed_indexed, rng_from};

/// How a uniform draw `u` becomes a local training time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeWarp {
    /// `t = u`.
    Uniform,
    /// `t = sqrt(u)`: biases samples toward the end of the segment, where
    /// the state is closest to data and the regression is hardest.
    Sqrt,
}

impl TimeWarp {
    pub fn apply(&self, u: f64) -> f64 {
        match self {
            TimeWarp::Uniform => u,
            TimeWarp::Sqrt => u.sqrt(),
        }
    }
}

/// Hyperparameters for one stage's training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub ema_decay: f64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub time_warp: TimeWarp,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            lr_decay: 0.998,
            ema_decay: 0.9999,
            grad_clip: None,
            batch_size: 32,
            epochs: 1,
            time_warp: TimeWarp::Sqrt,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid_arg!("learning rate must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) {
            return Err(invalid_arg!("lr_decay must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(invalid_arg!("ema_decay must lie in [0, 1]"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(invalid_arg!("grad_clip must be finite and positive"));
            }
        }
        if self.batch_size == 0 {
            return Err(invalid_arg!("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid_arg!("epochs must be positive"));
        }
        Ok(())
    }
}

/// Adam with bias correction; moment buffers are kept in f32 to match the
/// parameters they track.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            let m = ADAM_BETA1 * self.m[i] as f64 + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            params[i] = (params[i] as f64 - update) as f32;
        }
    }
}

/// Scale `grads` so their global L2 norm is at most `clip`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f32], clip: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|&g| {
            let g = g as f64;
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > clip && norm > 0.0 {
        let scale = (clip / norm) as f32;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// The randomness of a single training sample, injectable for tests.
#[derive(Debug, Clone)]
pub struct TrainDraw {
    /// Local time in `[0, 1]` along the stage segment.
    pub t_local: f64,
    /// Standard-normal noise, one row per fine point.
    pub noise: PointCloud,
}

impl TrainDraw {
    pub fn sample<R: Rng>(pair: &HierarchyPair, warp: TimeWarp, rng: &mut R) -> Self {
        let t_local = warp.apply(rng.gen_range(0.0..1.0));
        let noise = PointCloud::standard_normal(pair.fine.n_points(), rng);
        TrainDraw { t_local, noise }
    }
}

/// One flow-matching regression sample with explicit randomness: build the
/// stage endpoints, interpolate to the drawn time, and return the loss and
/// parameter gradient of the squared error against the endpoint difference.
pub fn fm_step_drawn(
    model: &VelocityModel<f32>,
    pair: &HierarchyPair,
    stage: usize,
    schedule: &StageSchedule,
    condition: Option<u32>,
    draw: &TrainDraw,
) -> Result<(f64, Vec<f32>)> {
    let endpoints = make_endpoints(pair, stage, schedule, &draw.noise)?;
    let x_t = lerp_endpoints(&endpoints, draw.t_local)?;
    let n = pair.fine.n_points();
    let mut target = Vec::with_capacity(n);
    for i in 0..n {
        let s = endpoints.x_s.points()[i];
        let e = endpoints.x_e.points()[i];
        target.push([e[0] - s[0], e[1] - s[1], e[2] - s[2]]);
    }
    let (loss, grads) = model.eval_with_grads(draw.t_local, x_t.points(), condition, &target)?;
    Ok((loss as f64, grads))
}

/// One flow-matching sample with fresh randomness from `rng`.
pub fn fm_step<R: Rng>(
    model: &VelocityModel<f32>,
    pair: &HierarchyPair,
    stage: usize,
    schedule: &StageSchedule,
    condition: Option<u32>,
    warp: TimeWarp,
    rng: &mut R,
) -> Result<(f64, Vec<f32>)> {
    let draw = TrainDraw::sample(pair, warp, rng);
    fm_step_drawn(model, pair, stage, schedule, condition, &draw)
}

/// Outcome of one stage's training run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean loss per epoch, in order.
    pub epoch_losses: Vec<f64>,
    /// Wall-clock seconds per epoch.
    pub epoch_secs: Vec<f64>,
    /// The trained model (live weights).
    pub live: VelocityModel<f32>,
    /// Exponential moving average of the weights, same layout as `live`.
    pub ema: Vec<f32>,
}

impl TrainReport {
    pub fn ema_model(&self) -> Result<VelocityModel<f32>> {
        VelocityModel::from_params(self.live.arch().clone(), self.ema.clone())
    }
}

/// Train one stage's velocity model from scratch over `pairs`.
///
/// `labels`, when given, must supply one class per pair and the arch must be
/// conditional; samples then train their class's embedding row. Batches are
/// evaluated in parallel but reduced in a fixed order, and every random draw
/// is seeded by its global index, so results are reproducible.
pub fn train_stage(
    pairs: &[HierarchyPair],
    labels: Option<&[u32]>,
    stage: usize,
    schedule: &StageSchedule,
    arch: &ModelArch,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(invalid_arg!("no training pairs supplied"));
    }
    if stage >= schedule.stages() {
        return Err(invalid_arg!(
            "stage {stage} out of range ({} stages)",
            schedule.stages()
        ));
    }
    if let Some(labels) = labels {
        if labels.len() != pairs.len() {
            return Err(invalid_arg!(
                "{} labels for {} pairs",
                labels.len(),
                pairs.len()
            ));
        }
        let classes = arch
            .classes
            .ok_or_else(|| invalid_arg!("labels supplied but the arch is unconditional"))?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(invalid_arg!(
                "label {bad} out of range (vocabulary size {classes})"
            ));
        }
    }
    let expect_fine = schedule.level_points(stage)?;
    let expect_coarse = schedule.level_points(stage + 1)?;
    for (i, pair) in pairs.iter().enumerate() {
        if pair.fine.n_points() != expect_fine || pair.coarse.n_points() != expect_coarse {
            return Err(invalid_arg!(
                "pair {i} has {}/{} points, stage {stage} expects {expect_fine}/{expect_coarse}",
                pair.fine.n_points(),
                pair.coarse.n_points()
            ));
        }
    }

    let mut init_rng = rng_from(derive_seed_indexed(config.seed, "model-init", stage as u64));
    let mut model: VelocityModel<f32> = VelocityModel::init(arch.clone(), &mut init_rng)?;
    let mut adam = AdamState::new(model.n_params());
    let mut ema: Vec<f32> = model.params().to_vec();

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut epoch_secs = Vec::with_capacity(config.epochs);
    let mut global_step: u64 = 0;
    let mut draw_counter: u64 = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.lr * config.lr_decay.powi(epoch as i32);

        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut shuffle_rng = rng_from(derive_seed_indexed(
            config.seed,
            "epoch-shuffle",
            (stage as u64) << 32 | epoch as u64,
        ));
        use rand::seq::SliceRandom;
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0f64;
        let mut loss_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            // Each sample's randomness comes from its global draw index, so
            // the parallel map below is deterministic under any scheduling.
            let items: Vec<(usize, u64)> = chunk
                .iter()
                .enumerate()
                .map(|(slot, &pair_idx)| (pair_idx, draw_counter + slot as u64))
                .collect();
            draw_counter += chunk.len() as u64;

            let results: Vec<(f64, Vec<f32>)> = items
                .par_iter()
                .map(|&(pair_idx, draw_idx)| {
                    let mut rng =
                        rng_from(derive_seed_indexed(config.seed, "train-draw", draw_idx));
                    let cond = labels.map(|l| l[pair_idx]);
                    fm_step(
                        &model,
                        &pairs[pair_idx],
                        stage,
                        schedule,
                        cond,
                        config.time_warp,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?;

            let mut grads = vec![0.0f32; model.n_params()];
            let mut batch_loss = 0.0f64;
            let scale = 1.0 / results.len() as f32;
            for (loss, g) in &results {
                batch_loss += loss;
                for (acc, &gi) in grads.iter_mut().zip(g.iter()) {
                    *acc += gi * scale;
                }
            }
            batch_loss /= results.len() as f64;
            global_step += 1;
            if !batch_loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step: global_step as usize,
                });
            }
            loss_sum += batch_loss * results.len() as f64;
            loss_count += results.len();

            if let Some(clip) = config.grad_clip {
                clip_global_norm(&mut grads, clip);
            }
            adam.step(model.params_mut(), &grads, lr);
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainingDiverged {
                    step: global_step as usize,
                });
            }
            let decay = config.ema_decay as f32;
            for (e, &p) in ema.iter_mut().zip(model.params().iter()) {
                *e = decay * *e + (1.0 - decay) * p;
            }
        }
        epoch_losses.push(loss_sum / loss_count as f64);
        epoch_secs.push(started.elapsed().as_secs_f64());
    }

    Ok(TrainReport {
        epoch_losses,
        epoch_secs,
        live: model,
        ema,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{downsample, DEFAULT_MAX_ITERS};
    use crate::schedule::new_schedule;
    use crate::seeds::rng_from;

    fn schedule_2_stage(n: usize) -> StageSchedule {
        new_schedule(2, 4, vec![(0.6, 1.0), (0.0, 1.0)], n).unwrap()
    }

    fn random_pair(n: usize, ratio: usize, seed: u64) -> HierarchyPair {
        let mut rng = rng_from(seed);
        let pts: Vec<[f32; 3]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-1.0f32..1.0)))
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        downsample(&cloud, ratio, DEFAULT_MAX_ITERS).unwrap()
    }

    #[test]
    fn time_warp_shapes() {
        assert_eq!(TimeWarp::Uniform.apply(0.25), 0.25);
        assert_eq!(TimeWarp::Sqrt.apply(0.25), 0.5);
        // sqrt warping shifts mass toward 1: its mean over a uniform grid
        // approaches the exact value 2/3.
        let k = 10_000;
        let mean: f64 = (0..k)
            .map(|i| TimeWarp::Sqrt.apply((i as f64 + 0.5) / k as f64))
            .sum::<f64>()
            / k as f64;
        assert!((mean - 2.0 / 3.0).abs() < 1e-3, "mean {mean}");
    }

    /// With zero noise injected and a fresh (zero-field) model, the loss is
    /// exactly the mean square of the endpoint difference, which for a
    /// self-similar pair (all fine points equal) has a closed form.
    #[test]
    fn zero_noise_loss_has_closed_form() {
        let c = [0.3f32, -0.6, 0.9];
        let fine = PointCloud::new(vec![c; 4]).unwrap();
        let pair = downsample(&fine, 4, DEFAULT_MAX_ITERS).unwrap();
        let schedule = new_schedule(1, 4, vec![(0.2, 0.8)], 4).unwrap();
        let mut rng = rng_from(0x7e5);
        let model: VelocityModel<f32> = VelocityModel::init(
            ModelArch {
                widths: [4, 4, 4],
                time_dim: 4,
                classes: None,
            },
            &mut rng,
        )
        .unwrap();
        let draw = TrainDraw {
            t_local: 0.5,
            noise: PointCloud::new(vec![[0.0; 3]; 4]).unwrap(),
        };
        let (loss, _) = fm_step_drawn(&model, &pair, 0, &schedule, None, &draw).unwrap();
        // target = (0.8 - 0.2) * c per point; loss = 0.36 * mean(c^2)
        let expect = 0.36 * (0.09 + 0.36 + 0.81) / 3.0;
        assert!((loss - expect).abs() < 1e-6, "loss {loss}, expected {expect}");
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut params = vec![5.0f32, -5.0];
        let mut adam = AdamState::new(2);
        for _ in 0..500 {
            let grads = vec![2.0 * (params[0] - 1.0), 2.0 * (params[1] + 2.0)];
            adam.step(&mut params, &grads, 0.05);
        }
        assert!((params[0] - 1.0).abs() < 1e-2, "p0 {}", params[0]);
        assert!((params[1] + 2.0).abs() < 1e-2, "p1 {}", params[1]);
    }

    #[test]
    fn clip_rescales_to_the_requested_norm() {
        let mut g = vec![3.0f32, 4.0];
        let pre = clip_global_norm(&mut g, 1.0);
        assert!((pre - 5.0).abs() < 1e-6);
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
        // Under the limit: untouched.
        let mut h = vec![0.3f32, 0.4];
        let pre = clip_global_norm(&mut h, 1.0);
        assert!((pre - 0.5).abs() < 1e-6);
        assert_eq!(h, vec![0.3, 0.4]);
    }

    fn tiny_arch() -> ModelArch {
        ModelArch {
            widths: [8, 8, 8],
            time_dim: 4,
            classes: None,
        }
    }

    /// Deterministic loss of a model over a fixed set of validation draws.
    /// The training objective itself is stochastic (fresh noise per sample),
    /// so descent is measured against this frozen evaluation instead of the
    /// noisy per-epoch averages.
    fn val_loss(
        model: &VelocityModel<f32>,
        pairs: &[HierarchyPair],
        schedule: &StageSchedule,
    ) -> f64 {
        let mut acc = 0.0;
        let mut count = 0;
        for (i, pair) in pairs.iter().enumerate() {
            for j in 0..8u64 {
                let mut rng = rng_from(derive_seed_indexed(999, "val-draw", (i as u64) << 8 | j));
                let draw = TrainDraw::sample(pair, TimeWarp::Uniform, &mut rng);
                let (loss, _) = fm_step_drawn(model, pair, 0, schedule, None, &draw).unwrap();
                acc += loss;
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn training_descends_on_a_small_problem() {
        let pairs: Vec<HierarchyPair> = (0..8).map(|i| random_pair(16, 4, 100 + i)).collect();
        let schedule = schedule_2_stage(16);
        let mut descended = 0;
        for seed in 0..20 {
            let config = TrainConfig {
                lr: 3e-3,
                lr_decay: 1.0,
                ema_decay: 0.9,
                batch_size: 8,
                epochs: 25,
                seed,
                ..TrainConfig::default()
            };
            let mut init_rng = rng_from(derive_seed_indexed(config.seed, "model-init", 0));
            let fresh: VelocityModel<f32> =
                VelocityModel::init(tiny_arch(), &mut init_rng).unwrap();
            let report = train_stage(&pairs, None, 0, &schedule, &tiny_arch(), &config).unwrap();
            if val_loss(&report.live, &pairs, &schedule) < val_loss(&fresh, &pairs, &schedule) {
                descended += 1;
            }
        }
        assert!(
            descended >= 19,
            "trained model beat its init in only {descended}/20 runs"
        );
    }

    /// With the randomness frozen the objective is a plain deterministic
    /// regression, which the optimizer should crush.
    #[test]
    fn training_overfits_a_fixed_draw() {
        let pair = random_pair(16, 4, 42);
        let schedule = schedule_2_stage(16);
        let mut rng = rng_from(0xf1f);
        let mut model: VelocityModel<f32> =
            VelocityModel::init(tiny_arch(), &mut rng).unwrap();
        let draw = TrainDraw {
            t_local: 0.5,
            noise: PointCloud::standard_normal(16, &mut rng),
        };
        let (initial, _) = fm_step_drawn(&model, &pair, 0, &schedule, None, &draw).unwrap();
        let mut adam = AdamState::new(model.n_params());
        let mut last = initial;
        for _ in 0..500 {
            let (loss, grads) = fm_step_drawn(&model, &pair, 0, &schedule, None, &draw).unwrap();
            adam.step(model.params_mut(), &grads, 1e-2);
            last = loss;
        }
        assert!(
            last < 0.05 * initial,
            "expected a 20x loss drop on a fixed draw, got {initial} -> {last}"
        );
    }

    #[test]
    fn ema_decay_boundaries() {
        let pairs = vec![random_pair(16, 4, 9)];
        let schedule = schedule_2_stage(16);
        // decay 0: EMA tracks the live weights exactly.
        let config = TrainConfig {
            lr: 1e-3,
            ema_decay: 0.0,
            batch_size: 4,
            epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let report = train_stage(&pairs, None, 0, &schedule, &tiny_arch(), &config).unwrap();
        assert_eq!(report.ema, report.live.params());
        // decay 1: EMA never leaves the initialization.
        let config = TrainConfig {
            ema_decay: 1.0,
            ..config
        };
        let report = train_stage(&pairs, None, 0, &schedule, &tiny_arch(), &config).unwrap();
        let mut init_rng = rng_from(derive_seed_indexed(config.seed, "model-init", 0));
        let fresh: VelocityModel<f32> = VelocityModel::init(tiny_arch(), &mut init_rng).unwrap();
        assert_eq!(report.ema, fresh.params());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_fixed() {
        let pairs = vec![random_pair(16, 4, 11)];
        let schedule = schedule_2_stage(16);
        let config = TrainConfig {
            lr: 0.0,
            batch_size: 4,
            epochs: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = train_stage(&pairs, None, 0, &schedule, &tiny_arch(), &config).unwrap();
        let mut init_rng = rng_from(derive_seed_indexed(config.seed, "model-init", 0));
        let fresh: VelocityModel<f32> = VelocityModel::init(tiny_arch(), &mut init_rng).unwrap();
        assert_eq!(report.live.params(), fresh.params());
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let pairs = vec![random_pair(16, 4, 13)];
        let schedule = schedule_2_stage(16);
        let config = TrainConfig {
            lr: 1e12,
            batch_size: 4,
            epochs: 10,
            seed: 1,
            ..TrainConfig::default()
        };
        match train_stage(&pairs, None, 0, &schedule, &tiny_arch(), &config) {
            Err(Error::TrainingDiverged { .. }) => {}
            other => panic!("expected TrainingDiverged, got {other:?}"),
        }
    }

    #[test]
    fn training_is_reproducible() {
        let pairs: Vec<HierarchyPair> = (0..4).map(|i| random_pair(16, 4, 200 + i)).collect();
        let schedule = schedule_2_stage(16);
        let config = TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            epochs: 4,
            seed: 77,
            ..TrainConfig::default()
        };
        let a = train_stage(&pairs, None, 0, &schedule, &tiny_arch(), &config).unwrap();
        let b = train_stage(&pairs, None, 0, &schedule, &tiny_arch(), &config).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.live.params(), b.live.params());
        assert_eq!(a.ema, b.ema);
    }

    #[test]
    fn labels_require_a_conditional_arch() {
        let pairs = vec![random_pair(16, 4, 21)];
        let schedule = schedule_2_stage(16);
        let config = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let err = train_stage(&pairs, Some(&[0]), 0, &schedule, &tiny_arch(), &config);
        assert!(err.is_err());
        // Out-of-range label against a conditional arch.
        let arch = ModelArch {
            classes: Some(2),
            ..tiny_arch()
        };
        let err = train_stage(&pairs, Some(&[5]), 0, &schedule, &arch, &config);
        assert!(err.is_err());
    }

    #[test]
    fn wrong_pair_size_is_rejected() {
        let pairs = vec![random_pair(16, 4, 31)];
        let schedule = new_schedule(2, 4, vec![(0.6, 1.0), (0.0, 1.0)], 64).unwrap();
        let config = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(train_stage(&pairs, None, 0, &schedule, &tiny_arch(), &config).is_err());
    }
}
