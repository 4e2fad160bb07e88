//! Training outer loop: fresh episode sampling, per-episode gradients
//! with deterministic reduction, Adam updates, codebook re-projection
//! and a line-delimited metrics stream.

use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape};
use crate::error::Error;
use crate::geometry::{sample_channel, ChannelRealization, PilotConfig, Position, SystemLayout};
use crate::model::{
    composite_loss, run_episode, squared_error, ModelConfig, TapeModel, VqcParams,
};
use crate::rng::{derive_rng, Stream};

/// Knobs of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Total fresh episodes to generate and train on.
    pub episodes_total: usize,
    pub batch_size: usize,
    /// Validation/checkpoint segments the run is divided into.
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Raw SNR in dB; transmit power is 10^(snr/10).
    pub snr_db: f64,
    pub seed: u64,
    /// Weight on the commitment half of the quantizer losses.
    pub commitment_weight: f64,
    /// Bypass quantization entirely (performance-ceiling mode).
    pub codebook_free: bool,
    /// Rician factor of the sampled channels.
    pub rician_epsilon: f64,
    /// Held-out episodes for periodic validation.
    pub val_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes_total: 50_000,
            batch_size: 256,
            epochs: 10,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            snr_db: 25.0,
            seed: 1,
            commitment_weight: 1.0,
            codebook_free: false,
            rician_epsilon: 10.0,
            val_episodes: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if self.episodes_total == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "train: episodes_total, batch_size and epochs must be positive".into(),
            ));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0 < b && b < 1.0) {
                return Err(Error::Config(format!("train.{name} must lie in (0, 1)")));
            }
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("train.learning_rate must be >= 0".into()));
        }
        if self.rician_epsilon < 0.0 {
            return Err(Error::Config("train.rician_epsilon must be >= 0".into()));
        }
        Ok(())
    }

    pub fn pilot(&self) -> PilotConfig {
        PilotConfig::from_snr_db(self.snr_db)
    }
}

/// First/second moment buffers mirroring the parameter arrays.
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Array>,
    v: Vec<Array>,
    step: u64,
    with_codebooks: bool,
}

impl AdamState {
    pub fn new(params: &VqcParams, with_codebooks: bool) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        params.for_each(&mut |name, a| {
            if with_codebooks || !name.starts_with("codebook.") {
                names.push(name.to_string());
                m.push(Array::zeros(a.shape().to_vec()));
                v.push(Array::zeros(a.shape().to_vec()));
            }
        });
        Self {
            names,
            m,
            v,
            step: 0,
            with_codebooks,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update over all tracked parameters.
    /// `grads` must be in the canonical parameter order.
    pub fn update(
        &mut self,
        params: &mut VqcParams,
        grads: &[Array],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        assert_eq!(grads.len(), self.names.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step;
        let mut cursor = 0usize;
        let with_codebooks = self.with_codebooks;
        let names = &self.names;
        let ms = &mut self.m;
        let vs = &mut self.v;
        params.for_each_mut(&mut |name, p| {
            if !with_codebooks && name.starts_with("codebook.") {
                return;
            }
            debug_assert_eq!(names[cursor], name);
            let g = &grads[cursor];
            adam_step(p, g, &mut ms[cursor], &mut vs[cursor], t, lr, beta1, beta2, eps);
            cursor += 1;
        });
    }
}

/// One Adam recursion on a single array:
/// m = b1 m + (1-b1) g; v = b2 v + (1-b2) g^2;
/// p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    p: &mut Array,
    g: &Array,
    m: &mut Array,
    v: &mut Array,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    let pd = p.data_mut();
    for i in 0..g.numel() {
        let gi = g.data()[i];
        let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
        let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
        m.data_mut()[i] = mi;
        v.data_mut()[i] = vi;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// UE position uniform over the service area at its fixed z.
pub fn sample_ue<R: Rng>(layout: &SystemLayout, rng: &mut R) -> Position {
    let (x0, x1) = layout.service_area.x_range();
    let (y0, y1) = layout.service_area.y_range();
    Position::new(
        rng.random_range(x0..x1),
        rng.random_range(y0..y1),
        layout.service_area.z(),
    )
}

/// One episode's ground truth: position, channel block, noise draws.
pub struct EpisodeSpec {
    pub ue: Position,
    pub channel: ChannelRealization,
    pub noise: Vec<Complex64>,
}

/// Sample the episode addressed by (seed, stream, index). Draw order
/// is fixed: UE position, channel, then T noise values, so the
/// realization does not depend on batch composition.
pub fn sample_episode(
    layout: &SystemLayout,
    t_frames: usize,
    epsilon: f64,
    sigma2: f64,
    seed: u64,
    stream: Stream,
    index: u64,
) -> Result<EpisodeSpec, Error> {
    let mut rng = derive_rng(seed, stream, index);
    let ue = sample_ue(layout, &mut rng);
    let channel = sample_channel(layout, &ue, epsilon, &mut rng)?;
    let sigma = sigma2.sqrt();
    let noise = (0..t_frames)
        .map(|_| {
            let re: f64 = rng.sample(rand_distr::StandardNormal);
            let im: f64 = rng.sample(rand_distr::StandardNormal);
            Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2 * sigma
        })
        .collect();
    Ok(EpisodeSpec { ue, channel, noise })
}

/// Loss decomposition of one step, batch-averaged.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub episodes_seen: usize,
    pub loss: f64,
    pub mse: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_rmse: Option<f64>,
}

struct EpisodeResult {
    grads: Vec<Array>,
    loss: f64,
    mse: f64,
    alpha: f64,
    beta: f64,
}

fn episode_grads(
    params: &VqcParams,
    model_cfg: &ModelConfig,
    pilot: &PilotConfig,
    train_cfg: &TrainConfig,
    ep: &EpisodeSpec,
) -> Result<EpisodeResult, Error> {
    let mut tape = Tape::new();
    let model = TapeModel::insert(&mut tape, params, true, !train_cfg.codebook_free);
    let trace = run_episode(
        &mut tape,
        &model,
        model_cfg,
        pilot,
        &ep.channel,
        &ep.noise,
        train_cfg.commitment_weight,
    )?;
    let mse = squared_error(&trace, &ep.ue);
    let alpha = trace.alpha_total();
    let beta = trace.beta_total();
    let loss = composite_loss(&mut tape, std::slice::from_ref(&trace), &[ep.ue])?;
    let loss_v = tape.value(loss).item();
    if !loss_v.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss_v} (mse {mse}, alpha {alpha}, beta {beta}) at UE ({}, {}, {})",
            ep.ue.x, ep.ue.y, ep.ue.z
        )));
    }
    tape.backward(loss)?;
    let mut grads = Vec::new();
    model.for_each_node(&mut |_, node| grads.push(tape.grad(node)));
    Ok(EpisodeResult {
        grads,
        loss: loss_v,
        mse,
        alpha,
        beta,
    })
}

/// One optimizer step over a batch: per-episode tapes, gradient
/// reduction in episode order, Adam update, codebook projection.
pub fn train_step(
    params: &mut VqcParams,
    opt: &mut AdamState,
    batch: &[EpisodeSpec],
    model_cfg: &ModelConfig,
    pilot: &PilotConfig,
    train_cfg: &TrainConfig,
    parallel: bool,
) -> Result<StepMetrics, Error> {
    assert!(!batch.is_empty());
    let results: Vec<EpisodeResult> = if parallel {
        let snapshots: Result<Vec<_>, Error> = batch
            .par_iter()
            .map(|ep| episode_grads(params, model_cfg, pilot, train_cfg, ep))
            .collect();
        snapshots?
    } else {
        let mut out = Vec::with_capacity(batch.len());
        for ep in batch {
            out.push(episode_grads(params, model_cfg, pilot, train_cfg, ep)?);
        }
        out
    };

    let scale = 1.0 / batch.len() as f64;
    let mut iter = results.iter();
    let first = iter.next().unwrap();
    let mut grads: Vec<Array> = first.grads.clone();
    for r in iter {
        for (acc, g) in grads.iter_mut().zip(r.grads.iter()) {
            acc.add_assign(g);
        }
    }
    for g in grads.iter_mut() {
        g.scale_assign(scale);
    }

    opt.update(
        params,
        &grads,
        train_cfg.learning_rate,
        train_cfg.adam_beta1,
        train_cfg.adam_beta2,
        train_cfg.adam_eps,
    );
    if !train_cfg.codebook_free {
        params.ris_codebook.project();
        params.bs_codebook.project();
    }

    let mean = |f: fn(&EpisodeResult) -> f64| results.iter().map(f).sum::<f64>() * scale;
    Ok(StepMetrics {
        step: 0,
        episodes_seen: 0,
        loss: mean(|r| r.loss),
        mse: mean(|r| r.mse),
        alpha: mean(|r| r.alpha),
        beta: mean(|r| r.beta),
        val_rmse: None,
    })
}

/// Outcome of a full training run.
pub struct TrainOutcome {
    pub params: VqcParams,
    pub steps: usize,
    pub final_val_rmse: f64,
    pub metrics: Vec<StepMetrics>,
}

/// Everything a run needs.
pub struct TrainSetup<'a> {
    pub layout: &'a SystemLayout,
    pub model_cfg: &'a ModelConfig,
    pub train_cfg: &'a TrainConfig,
    pub pilot: PilotConfig,
}

/// Iterate [`train_step`] over freshly sampled episodes, validating on
/// a held-out seeded set at every epoch boundary. `on_epoch` fires
/// after each validation with the current parameters (checkpoint hook).
pub fn train_loop(
    setup: &TrainSetup,
    threads: usize,
    mut metrics_out: Option<&mut (dyn Write + Send)>,
    mut on_epoch: impl FnMut(usize, &VqcParams, f64) -> Result<(), Error> + Send,
) -> Result<TrainOutcome, Error> {
    let TrainSetup {
        layout,
        model_cfg,
        train_cfg,
        pilot,
    } = setup;
    layout.validate()?;
    model_cfg.validate()?;
    train_cfg.validate()?;
    pilot.validate()?;

    let mut init_rng = derive_rng(train_cfg.seed, Stream::Init, 0);
    let mut params = VqcParams::init(model_cfg, &mut init_rng);
    let mut opt = AdamState::new(&params, !train_cfg.codebook_free);

    let total_steps = train_cfg.episodes_total.div_ceil(train_cfg.batch_size);
    let steps_per_epoch = total_steps.div_ceil(train_cfg.epochs).max(1);
    let parallel = threads > 1;

    let mut run = |params: &mut VqcParams,
                   opt: &mut AdamState|
     -> Result<TrainOutcome, Error> {
        let mut metrics = Vec::with_capacity(total_steps);
        let mut episodes_seen = 0usize;
        let mut final_val = f64::NAN;
        for step in 0..total_steps {
            let remaining = train_cfg.episodes_total - episodes_seen;
            let batch_len = train_cfg.batch_size.min(remaining);
            let mut batch = Vec::with_capacity(batch_len);
            for i in 0..batch_len {
                batch.push(sample_episode(
                    layout,
                    model_cfg.t,
                    train_cfg.rician_epsilon,
                    pilot.sigma2,
                    train_cfg.seed,
                    Stream::TrainEpisode,
                    (episodes_seen + i) as u64,
                )?);
            }
            let mut sm = train_step(
                params, opt, &batch, model_cfg, pilot, train_cfg, parallel,
            )?;
            episodes_seen += batch_len;
            sm.step = step + 1;
            sm.episodes_seen = episodes_seen;

            let epoch_end = (step + 1) % steps_per_epoch == 0 || step + 1 == total_steps;
            if epoch_end {
                let val =
                    validation_rmse(params, layout, model_cfg, pilot, train_cfg, parallel)?;
                sm.val_rmse = Some(val);
                final_val = val;
            }
            if let Some(out) = metrics_out.as_mut() {
                serde_json::to_writer(&mut **out, &sm)?;
                writeln!(out)?;
            }
            if epoch_end {
                let epoch = (step + 1).div_ceil(steps_per_epoch);
                on_epoch(epoch, params, final_val)?;
            }
            metrics.push(sm);
        }
        Ok(TrainOutcome {
            params: params.clone(),
            steps: total_steps,
            final_val_rmse: final_val,
            metrics,
        })
    };

    if parallel {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| run(&mut params, &mut opt))
    } else {
        run(&mut params, &mut opt)
    }
}

/// RMSE over the held-out validation stream.
pub fn validation_rmse(
    params: &VqcParams,
    layout: &SystemLayout,
    model_cfg: &ModelConfig,
    pilot: &PilotConfig,
    train_cfg: &TrainConfig,
    parallel: bool,
) -> Result<f64, Error> {
    rmse_over_stream(
        params,
        layout,
        model_cfg,
        pilot,
        train_cfg.rician_epsilon,
        !train_cfg.codebook_free,
        train_cfg.commitment_weight,
        train_cfg.seed,
        Stream::ValEpisode,
        train_cfg.val_episodes,
        parallel,
    )
}

/// Forward-only RMSE over `count` episodes of a seeded stream.
#[allow(clippy::too_many_arguments)]
pub fn rmse_over_stream(
    params: &VqcParams,
    layout: &SystemLayout,
    model_cfg: &ModelConfig,
    pilot: &PilotConfig,
    epsilon: f64,
    with_codebooks: bool,
    commitment_weight: f64,
    seed: u64,
    stream: Stream,
    count: usize,
    parallel: bool,
) -> Result<f64, Error> {
    let one = |i: usize| -> Result<f64, Error> {
        let ep = sample_episode(
            layout,
            model_cfg.t,
            epsilon,
            pilot.sigma2,
            seed,
            stream,
            i as u64,
        )?;
        let mut tape = Tape::new();
        let model = TapeModel::insert(&mut tape, params, false, with_codebooks);
        let trace = run_episode(
            &mut tape,
            &model,
            model_cfg,
            pilot,
            &ep.channel,
            &ep.noise,
            commitment_weight,
        )?;
        Ok(squared_error(&trace, &ep.ue))
    };
    let sq_sum: f64 = if parallel {
        let v: Result<Vec<f64>, Error> = (0..count).into_par_iter().map(one).collect();
        v?.iter().sum()
    } else {
        let mut acc = 0.0;
        for i in 0..count {
            acc += one(i)?;
        }
        acc
    };
    Ok((sq_sum / count as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ServiceArea;

    fn desk_layout() -> SystemLayout {
        SystemLayout {
            bs_position: Position::new(0.0, 0.0, 0.0),
            ris_positions: vec![Position::new(0.0, 30.0, 0.0)],
            m: 1,
            n: 8,
            c: 4,
            spacing_ris: 1.0,
            spacing_bs: 1.0,
            service_area: ServiceArea {
                center: [20.0, 0.0, -20.0],
                half_extents: [15.0, 35.0],
            },
        }
    }

    fn desk_model() -> ModelConfig {
        let layout = desk_layout();
        let pilot = PilotConfig::from_snr_db(25.0);
        ModelConfig {
            t: 3,
            k: 1,
            n: 8,
            m: 1,
            v: 16,
            b: 1,
            hidden: 32,
            dnn_width: 64,
            dnn_depth: 2,
            pos_head_widths: vec![64, 3],
            feature_scale: crate::model::default_feature_scale(&layout, &pilot),
            pos_scale: [
                layout.service_area.half_extents[0],
                layout.service_area.half_extents[1],
                20.0,
            ],
            pos_bias_init: [0.0, 0.0, 0.0],
        }
    }

    #[test]
    fn sample_ue_ranges_single_ris_area() {
        let layout = desk_layout();
        let mut rng = derive_rng(2, Stream::TrainEpisode, 0);
        for _ in 0..200 {
            let p = sample_ue(&layout, &mut rng);
            assert!(p.x >= 5.0 && p.x <= 35.0);
            assert!(p.y >= -35.0 && p.y <= 35.0);
            assert_eq!(p.z, -20.0);
        }
    }

    #[test]
    fn sample_ue_ranges_multi_ris_area() {
        let mut layout = desk_layout();
        layout.service_area = ServiceArea {
            center: [-20.0, 40.0, -20.0],
            half_extents: [15.0, 35.0],
        };
        let mut rng = derive_rng(2, Stream::TrainEpisode, 1);
        for _ in 0..200 {
            let p = sample_ue(&layout, &mut rng);
            assert!(p.x >= -35.0 && p.x <= -5.0);
            assert!(p.y >= 5.0 && p.y <= 75.0);
            assert_eq!(p.z, -20.0);
        }
    }

    #[test]
    fn sample_ue_mean_approaches_center() {
        let layout = desk_layout();
        let mut rng = derive_rng(3, Stream::TrainEpisode, 0);
        let n = 100_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            let p = sample_ue(&layout, &mut rng);
            sx += p.x;
            sy += p.y;
        }
        let mx = sx / n as f64;
        let my = sy / n as f64;
        // 1% of the respective spans
        assert!((mx - 20.0).abs() < 0.3);
        assert!(my.abs() < 0.7);
    }

    #[test]
    fn adam_matches_hand_recursion() {
        // One scalar parameter, three steps with fixed gradients.
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.999, 1e-8);
        let grads = [0.5, -0.3, 0.2];
        let mut p = Array::scalar(1.0);
        let mut m = Array::zeros(vec![1]);
        let mut v = Array::zeros(vec![1]);

        let (mut pm, mut mm, mut vm) = (1.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam_step(
                &mut p,
                &Array::scalar(g),
                &mut m,
                &mut v,
                (t + 1) as u64,
                lr,
                b1,
                b2,
                eps,
            );
            mm = b1 * mm + (1.0 - b1) * g;
            vm = b2 * vm + (1.0 - b2) * g * g;
            let mh = mm / (1.0 - b1.powi(t as i32 + 1));
            let vh = vm / (1.0 - b2.powi(t as i32 + 1));
            pm -= lr * mh / (vh.sqrt() + eps);
            assert!(
                (p.item() - pm).abs() < 1e-12,
                "step {t}: {} vs {pm}",
                p.item()
            );
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let layout = desk_layout();
        let model_cfg = desk_model();
        let train_cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let pilot = train_cfg.pilot();
        let mut rng = derive_rng(train_cfg.seed, Stream::Init, 0);
        let mut params = VqcParams::init(&model_cfg, &mut rng);
        let before: Vec<Vec<f64>> = {
            let mut v = Vec::new();
            params.for_each(&mut |_, a| v.push(a.data().to_vec()));
            v
        };
        let mut opt = AdamState::new(&params, true);
        let batch: Vec<EpisodeSpec> = (0..4)
            .map(|i| {
                sample_episode(
                    &layout,
                    model_cfg.t,
                    10.0,
                    pilot.sigma2,
                    train_cfg.seed,
                    Stream::TrainEpisode,
                    i,
                )
                .unwrap()
            })
            .collect();
        train_step(
            &mut params, &mut opt, &batch, &model_cfg, &pilot, &train_cfg, false,
        )
        .unwrap();
        let mut idx = 0;
        params.for_each(&mut |name, a| {
            assert_eq!(a.data(), before[idx].as_slice(), "changed: {name}");
            idx += 1;
        });
    }

    #[test]
    fn non_selected_columns_unchanged_by_first_step() {
        let layout = desk_layout();
        let model_cfg = desk_model();
        let train_cfg = TrainConfig {
            batch_size: 3,
            seed: 13,
            ..TrainConfig::default()
        };
        let pilot = train_cfg.pilot();
        let mut rng = derive_rng(train_cfg.seed, Stream::Init, 0);
        let mut params = VqcParams::init(&model_cfg, &mut rng);
        let before = params.ris_codebook.entries().clone();

        let batch: Vec<EpisodeSpec> = (0..3)
            .map(|i| {
                sample_episode(
                    &layout,
                    model_cfg.t,
                    10.0,
                    pilot.sigma2,
                    train_cfg.seed,
                    Stream::TrainEpisode,
                    i,
                )
                .unwrap()
            })
            .collect();

        // Record which columns the batch selects.
        let mut selected = std::collections::HashSet::new();
        for ep in &batch {
            let mut tape = Tape::new();
            let model = TapeModel::insert(&mut tape, &params, false, true);
            let trace = run_episode(
                &mut tape, &model, &model_cfg, &pilot, &ep.channel, &ep.noise, 1.0,
            )
            .unwrap();
            for sel in &trace.selections {
                for &i in &sel.ris_indices {
                    selected.insert(i);
                }
            }
        }

        let mut opt = AdamState::new(&params, true);
        train_step(
            &mut params, &mut opt, &batch, &model_cfg, &pilot, &train_cfg, false,
        )
        .unwrap();

        for j in 0..model_cfg.v {
            if selected.contains(&j) {
                continue;
            }
            for i in 0..2 * model_cfg.n {
                assert_eq!(
                    params.ris_codebook.entries().at(i, j).to_bits(),
                    before.at(i, j).to_bits(),
                    "non-selected column {j} moved"
                );
            }
        }
    }

    #[test]
    fn episode_realization_independent_of_batch_size() {
        let layout = desk_layout();
        let a = sample_episode(&layout, 3, 10.0, 1e-13, 7, Stream::TrainEpisode, 5).unwrap();
        let b = sample_episode(&layout, 3, 10.0, 1e-13, 7, Stream::TrainEpisode, 5).unwrap();
        assert_eq!(a.ue, b.ue);
        assert_eq!(a.channel.h_d[0], b.channel.h_d[0]);
        assert_eq!(a.noise, b.noise);
    }

    #[test]
    fn codebooks_stay_unit_modulus_across_steps() {
        let layout = desk_layout();
        let model_cfg = desk_model();
        let train_cfg = TrainConfig {
            batch_size: 4,
            episodes_total: 16,
            epochs: 1,
            seed: 17,
            val_episodes: 4,
            ..TrainConfig::default()
        };
        let setup = TrainSetup {
            layout: &layout,
            model_cfg: &model_cfg,
            train_cfg: &train_cfg,
            pilot: train_cfg.pilot(),
        };
        let out = train_loop(&setup, 1, None, |_, params, _| {
            assert!(params.ris_codebook.max_modulus_error() < 1e-9);
            assert!(params.bs_codebook.max_modulus_error() < 1e-9);
            Ok(())
        })
        .unwrap();
        assert!(out.params.ris_codebook.max_modulus_error() < 1e-9);
        assert_eq!(out.steps, 4);
    }

    #[test]
    fn same_seed_same_metrics_single_threaded() {
        let layout = desk_layout();
        let model_cfg = desk_model();
        let train_cfg = TrainConfig {
            batch_size: 4,
            episodes_total: 24,
            epochs: 2,
            seed: 23,
            val_episodes: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let setup = TrainSetup {
                layout: &layout,
                model_cfg: &model_cfg,
                train_cfg: &train_cfg,
                pilot: train_cfg.pilot(),
            };
            let mut buf = Vec::new();
            train_loop(&setup, 1, Some(&mut buf), |_, _, _| Ok(())).unwrap();
            buf
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }


    fn c5_layout() -> SystemLayout {
        SystemLayout {
            bs_position: Position::new(0.0, 0.0, 0.0),
            ris_positions: vec![Position::new(-40.0, 40.0, 0.0)],
            m: 1,
            n: 16,
            c: 4,
            spacing_ris: 1.0,
            spacing_bs: 1.0,
            service_area: ServiceArea {
                center: [20.0, 0.0, -20.0],
                half_extents: [15.0, 35.0],
            },
        }
    }

    fn c5_model(t: usize, v: usize) -> ModelConfig {
        let layout = c5_layout();
        let pilot = PilotConfig::from_snr_db(25.0);
        ModelConfig {
            t,
            k: 1,
            n: 16,
            m: 1,
            v,
            b: 1,
            hidden: 64,
            dnn_width: 128,
            dnn_depth: 2,
            pos_head_widths: vec![128, 128, 3],
            feature_scale: crate::model::default_feature_scale(&layout, &pilot),
            pos_scale: [
                layout.service_area.half_extents[0],
                layout.service_area.half_extents[1],
                1.0,
            ],
            pos_bias_init: layout.service_area.center,
        }
    }

    fn per_coord_rmse(
        params: &VqcParams,
        layout: &SystemLayout,
        model_cfg: &ModelConfig,
        pilot: &PilotConfig,
        free: bool,
    ) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        let n = 200;
        for i in 0..n {
            let ep = sample_episode(layout, model_cfg.t, 10.0, pilot.sigma2, 99, Stream::EvalEpisode, i).unwrap();
            let mut tape = Tape::new();
            let model = TapeModel::insert(&mut tape, params, false, !free);
            let trace = run_episode(&mut tape, &model, model_cfg, pilot, &ep.channel, &ep.noise, 1.0).unwrap();
            acc[0] += (trace.estimate.x - ep.ue.x).powi(2);
            acc[1] += (trace.estimate.y - ep.ue.y).powi(2);
            acc[2] += (trace.estimate.z - ep.ue.z).powi(2);
        }
        [
            (acc[0] / n as f64).sqrt(),
            (acc[1] / n as f64).sqrt(),
            (acc[2] / n as f64).sqrt(),
        ]
    }

    #[test]
    #[ignore]
    fn knn_learnability_oracle() {
        use crate::geometry::measure_pilot;
        use num_complex::Complex64;
        let layout = c5_layout();
        let pilot = PilotConfig::from_snr_db(25.0);
        let t_frames = 3usize;
        // Fixed probing codewords: three columns of a random codebook.
        let mut rng = derive_rng(77, Stream::Init, 0);
        let cb = crate::codebook::Codebook::init(layout.n, t_frames, &mut rng);
        let codewords: Vec<ndarray::Array1<Complex64>> = (0..t_frames)
            .map(|j| {
                let col = cb.column(j);
                ndarray::Array1::from_iter(
                    (0..layout.n).map(|i| Complex64::new(col[i], col[layout.n + i])),
                )
            })
            .collect();
        let w = ndarray::Array1::from_elem(1, Complex64::new(1.0, 0.0));
        let fs = crate::model::default_feature_scale(&layout, &pilot);

        let sample = |idx: u64| -> (Vec<f64>, f64) {
            let ep = sample_episode(&layout, t_frames, 10.0, pilot.sigma2, 31, Stream::TrainEpisode, idx).unwrap();
            let mut feats = Vec::with_capacity(2 * t_frames);
            for t in 0..t_frames {
                let y = measure_pilot(&ep.channel, &w, &[codewords[t].clone()], &pilot, ep.noise[t]).unwrap();
                feats.push(y.re * fs);
                feats.push(y.im * fs);
            }
            (feats, ep.ue.y)
        };

        let n_train = 20_000;
        let n_test = 400;
        let train: Vec<(Vec<f64>, f64)> = (0..n_train).map(|i| sample(i)).collect();
        let mut sq = 0.0;
        for j in 0..n_test {
            let (f, y_true) = sample((n_train + j) as u64);
            // 20-NN on raw euclidean features
            let mut d: Vec<(f64, f64)> = train
                .iter()
                .map(|(g, y)| {
                    let dd: f64 = f.iter().zip(g.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (dd, *y)
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let pred: f64 = d[..20].iter().map(|(_, y)| y).sum::<f64>() / 20.0;
            sq += (pred - y_true) * (pred - y_true);
        }
        println!("kNN y-RMSE: {:.2} (prior std 20.2)", (sq / n_test as f64).sqrt());

        // Same but features = frame differences y(t) - y(0), which cancel
        // the constant direct path within the episode.
        let mut sq = 0.0;
        for j in 0..n_test {
            let (f, y_true) = sample((n_train + j) as u64);
            let fd = |f: &[f64]| -> Vec<f64> {
                vec![f[2] - f[0], f[3] - f[1], f[4] - f[0], f[5] - f[1]]
            };
            let fq = fd(&f);
            let mut d: Vec<(f64, f64)> = train
                .iter()
                .map(|(g, y)| {
                    let gq = fd(g);
                    let dd: f64 = fq.iter().zip(gq.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    (dd, *y)
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let pred: f64 = d[..20].iter().map(|(_, y)| y).sum::<f64>() / 20.0;
            sq += (pred - y_true) * (pred - y_true);
        }
        println!("kNN y-RMSE on frame differences: {:.2}", (sq / n_test as f64).sqrt());
    }

    #[test]
    #[ignore]
    fn info_diagnostic() {
        use crate::geometry::{los_channel, measure_pilot, ris_steering};
        use num_complex::Complex64;
        let layout = c5_layout();
        let pilot = PilotConfig::from_snr_db(25.0);
        let ue = Position::new(20.0, 10.0, -20.0);
        let ch = los_channel(&layout, &ue).unwrap();
        // direct vs best-aligned cascade magnitude
        let a = crate::geometry::compute_angles(&layout, &ue, 0).unwrap();
        let aligned = ris_steering(a.mu_ris, a.gamma_ris, layout.n, layout.c, 1.0).unwrap();
        let w = ndarray::Array1::from_elem(1, Complex64::new(1.0, 0.0));
        let zero = Complex64::new(0.0, 0.0);
        let y_direct = {
            let th0 = ndarray::Array1::from_elem(layout.n, zero);
            measure_pilot(&ch, &w, &[th0], &pilot, zero).unwrap()
        };
        let mut ch_nod = ch.clone();
        ch_nod.h_d.fill(zero);
        // conjugate-aligned codeword maximizes |cascade|
        let best: ndarray::Array1<Complex64> = aligned.mapv(|v| v.conj());
        let y_cascade = measure_pilot(&ch_nod, &w, &[best.clone()], &pilot, zero).unwrap();
        let mut rng = derive_rng(5, Stream::Init, 3);
        let rand_raw: Vec<f64> = (0..2 * layout.n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rand_n = crate::codebook::normalize_unit_modulus(&rand_raw);
        let rand_cw = ndarray::Array1::from_iter(
            (0..layout.n).map(|i| Complex64::new(rand_n[i], rand_n[layout.n + i])),
        );
        let y_cascade_rand = measure_pilot(&ch_nod, &w, &[rand_cw], &pilot, zero).unwrap();
        println!(
            "direct {:.3e} | cascade aligned {:.3e} ratio {:.4} | cascade random {:.3e} ratio {:.4} | noise sigma {:.3e}",
            y_direct.norm(),
            y_cascade.norm(),
            y_cascade.norm() / y_direct.norm(),
            y_cascade_rand.norm(),
            y_cascade_rand.norm() / y_direct.norm(),
            pilot.sigma2.sqrt()
        );

        // Within-episode feature spread at init vs across episodes, and
        // distinct selections per episode.
        let model_cfg = c5_model(3, 64);
        let mut rng = derive_rng(1, Stream::Init, 0);
        let params = VqcParams::init(&model_cfg, &mut rng);
        let mut within = 0.0;
        let mut distinct = std::collections::HashMap::new();
        let eps = 40;
        for i in 0..eps {
            let ep = sample_episode(&layout, 3, 10.0, pilot.sigma2, 7, Stream::TrainEpisode, i).unwrap();
            let mut tape = Tape::new();
            let model = TapeModel::insert(&mut tape, &params, false, true);
            let trace = run_episode(&mut tape, &model, &model_cfg, &pilot, &ep.channel, &ep.noise, 1.0).unwrap();
            let f: Vec<f64> = trace.features.iter().map(|p| (p[0] * p[0] + p[1] * p[1]).sqrt()).collect();
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            within += f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f.len() as f64;
            let mut set = std::collections::HashSet::new();
            for sel in &trace.selections {
                set.insert(sel.ris_indices[0]);
            }
            *distinct.entry(set.len()).or_insert(0usize) += 1;
        }
        println!(
            "mean within-episode |feature| variance at init: {:.5}; distinct-RIS-codeword histogram {:?}",
            within / eps as f64,
            distinct
        );
    }

    #[test]
    #[ignore]
    fn c5_probe() {
        // (label, batch, lr, free, episodes, commitment)
        // (label, batch, lr, free, episodes, commitment, t, seed)
        // (label, batch, lr, free, episodes, cw, t, seed, beta2, close_ris)
        let mut variants: Vec<(String, usize, f64, bool, usize, f64, usize, u64, f64, bool)> = Vec::new();
        variants.push(("A-beta99-s2".into(), 16, 1e-2, false, 150_000, 0.25, 3, 2, 0.99, false));
        variants.push(("B-close-beta99-s2".into(), 16, 1e-2, false, 150_000, 0.25, 3, 2, 0.99, true));
        variants.push(("C-close-beta99-s3".into(), 16, 1e-2, false, 150_000, 0.10, 3, 3, 0.99, true));
        for (label, batch, lr, free, episodes, commitment, t_frames, seed, beta2, close) in variants {
            let label = label.as_str();
            let (hidden, dnn, pos, t, n_el, c, v) =
                (64usize, 128usize, vec![128usize, 128, 3], t_frames, 16usize, 4usize, 64usize);
            let mut layout = c5_layout();
            layout.n = n_el;
            layout.c = c;
            layout.ris_positions = vec![Position::new(if close { 5.0 } else { 0.0 }, if close { 22.0 } else { 30.0 }, 0.0)];
            let pilot = PilotConfig::from_snr_db(25.0);
            let model_cfg = ModelConfig {
                t,
                k: 1,
                n: n_el,
                m: 1,
                v,
                b: 1,
                hidden,
                dnn_width: dnn,
                dnn_depth: 2,
                pos_head_widths: pos,
                feature_scale: crate::model::default_feature_scale(&layout, &pilot),
                pos_scale: [15.0, 35.0, 1.0],
                pos_bias_init: [20.0, 0.0, -20.0],
            };
            let train_cfg = TrainConfig {
                batch_size: batch,
                episodes_total: episodes,
                epochs: 8,
                seed,
                learning_rate: lr,
                codebook_free: free,
                commitment_weight: commitment,
                adam_beta2: beta2,
                val_episodes: 256,
                ..TrainConfig::default()
            };
            let setup = TrainSetup {
                layout: &layout,
                model_cfg: &model_cfg,
                train_cfg: &train_cfg,
                pilot: train_cfg.pilot(),
            };
            let t0 = std::time::Instant::now();
            let out = train_loop(&setup, 8, None, |e, _, v| {
                println!("  {label} epoch {e}: {v:.2}");
                Ok(())
            })
            .unwrap();
            let pc = per_coord_rmse(&out.params, &layout, &model_cfg, &pilot, free);
            println!(
                "{label}: val {:.2} | per-coord x {:.2} y {:.2} z {:.2} | {:?}",
                out.final_val_rmse, pc[0], pc[1], pc[2], t0.elapsed()
            );
        }
    }

    #[test]
    #[ignore]
    fn tuning_probe() {
        for lr in [3e-3, 1e-2, 3e-2] {
            let layout = desk_layout();
            let model_cfg = desk_model();
            let train_cfg = TrainConfig {
                batch_size: 32,
                episodes_total: 12800,
                epochs: 4,
                seed: 29,
                learning_rate: lr,
                val_episodes: 128,
                ..TrainConfig::default()
            };
            let setup = TrainSetup {
                layout: &layout,
                model_cfg: &model_cfg,
                train_cfg: &train_cfg,
                pilot: train_cfg.pilot(),
            };
            let t0 = std::time::Instant::now();
            let out = train_loop(&setup, 1, None, |_, _, _| Ok(())).unwrap();
            let chunk = |a: usize, b: usize| -> f64 {
                out.metrics[a..b].iter().map(|m| m.mse).sum::<f64>() / (b - a) as f64
            };
            let n = out.metrics.len();
            println!(
                "lr={lr}: mse {:.1} {:.1} {:.1} {:.1} | val_rmse {:.2} | {:?}",
                chunk(0, 20),
                chunk(n / 3, n / 3 + 20),
                chunk(2 * n / 3, 2 * n / 3 + 20),
                chunk(n - 20, n),
                out.final_val_rmse,
                t0.elapsed()
            );
        }
    }

    #[test]
    fn smoke_training_decreases_loss_and_beats_centroid() {
        let layout = desk_layout();
        let model_cfg = desk_model();
        let train_cfg = TrainConfig {
            batch_size: 64,
            episodes_total: 12800, // 200 steps
            epochs: 2,
            seed: 29,
            learning_rate: 1e-2,
            commitment_weight: 0.25,
            val_episodes: 128,
            ..TrainConfig::default()
        };
        let setup = TrainSetup {
            layout: &layout,
            model_cfg: &model_cfg,
            train_cfg: &train_cfg,
            pilot: train_cfg.pilot(),
        };
        let out = train_loop(&setup, 1, None, |_, _, _| Ok(())).unwrap();
        let early: f64 = out.metrics[..20].iter().map(|m| m.loss).sum::<f64>() / 20.0;
        let late: f64 = out.metrics[out.metrics.len() - 20..]
            .iter()
            .map(|m| m.loss)
            .sum::<f64>()
            / 20.0;
        assert!(
            late < 0.8 * early,
            "smoothed loss did not drop 20%: {early} -> {late}"
        );
        // Closed-form uniform-rectangle second moment: the centroid
        // predictor scores sqrt((30^2 + 70^2) / 12).
        let centroid = 21.9848432637882;
        assert!(
            out.final_val_rmse < centroid,
            "validation RMSE {} not below centroid {centroid}",
            out.final_val_rmse
        );
    }
}
