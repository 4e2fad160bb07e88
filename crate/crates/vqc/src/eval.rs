//! Evaluation metrics, the comparison schemes (random sensing, learned
//! non-adaptive sensing, codebook-free ceiling) and radio-map
//! rendering.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{normalize_pairs, sum_sq, Array, Node, Tape};
use crate::config::{Resolved, RunConfig};
use crate::error::Error;
use crate::geometry::{
    los_channel, measure_pilot, rss_map, PilotConfig, Position, RssComponents, RssMap,
    SystemLayout,
};
use crate::model::{
    channel_nodes, measure_on_tape, run_episode, AffineParams, ModelConfig, TapeModel, VqcParams,
};
use crate::rng::{derive_rng, Stream};
use crate::training::{adam_step, rmse_over_stream, sample_episode};

/// Root-mean-squared localization error over an evaluation set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    /// Optional (T, RMSE) sweep rows.
    pub per_t: Vec<(usize, f64)>,
    pub episodes: usize,
    pub seed: u64,
    pub config: RunConfig,
}

/// RMSE of the trained model over a freshly seeded held-out stream.
pub fn evaluate_rmse(
    params: &VqcParams,
    resolved: &Resolved,
    n_eval: usize,
    seed: u64,
    parallel: bool,
) -> Result<f64, Error> {
    rmse_over_stream(
        params,
        &resolved.layout,
        &resolved.model,
        &resolved.pilot,
        resolved.train.rician_epsilon,
        !resolved.train.codebook_free,
        resolved.train.commitment_weight,
        seed,
        Stream::EvalEpisode,
        n_eval,
        parallel,
    )
}

/// Closed-form RMSE of the centroid predictor over the uniform
/// rectangular service area (z is fixed, so only x and y contribute).
pub fn centroid_rmse(layout: &SystemLayout) -> f64 {
    let hx = layout.service_area.half_extents[0];
    let hy = layout.service_area.half_extents[1];
    ((hx * hx + hy * hy) / 3.0).sqrt()
}

/// RMSE of the all-zero predictor: sqrt(E ||p||^2) over the area.
pub fn origin_predictor_rmse(layout: &SystemLayout) -> f64 {
    let c = layout.service_area.center;
    let hx = layout.service_area.half_extents[0];
    let hy = layout.service_area.half_extents[1];
    (c[0] * c[0] + hx * hx / 3.0 + c[1] * c[1] + hy * hy / 3.0 + c[2] * c[2]).sqrt()
}

/// Plain feedforward position estimator used by both non-adaptive
/// baselines: rectifier hidden layers over the 2T pilot features, a
/// linear 3-wide output and the same fixed output scaling as the main
/// model.
#[derive(Clone, Debug)]
pub struct FeedforwardEstimator {
    pub layers: Vec<AffineParams>,
    pos_scale: [f64; 3],
}

impl FeedforwardEstimator {
    pub fn init<R: rand::Rng>(model: &ModelConfig, rng: &mut R) -> Self {
        let widths = [200usize, 200, 200, 3];
        let mut layers = Vec::new();
        let mut in_dim = 2 * model.t;
        for &w in &widths {
            layers.push(AffineParams::init(w, in_dim, rng));
            in_dim = w;
        }
        if let Some(last) = layers.last_mut() {
            for (i, b) in last.b.data_mut().iter_mut().enumerate() {
                *b = model.pos_bias_init[i] / model.pos_scale[i];
            }
        }
        Self {
            layers,
            pos_scale: model.pos_scale,
        }
    }

    /// Zero-weight estimator (always predicts the origin).
    pub fn zeros(model: &ModelConfig) -> Self {
        let widths = [200usize, 200, 200, 3];
        let mut layers = Vec::new();
        let mut in_dim = 2 * model.t;
        for &w in &widths {
            layers.push(AffineParams::zeros(w, in_dim));
            in_dim = w;
        }
        Self {
            layers,
            pos_scale: model.pos_scale,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.cols()
    }

    pub fn forward(&self, tape: &mut Tape, features: Node) -> Result<Node, Error> {
        let mut h = features;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.w.clone(), false);
            let b = tape.leaf(layer.b.clone(), false);
            h = crate::autodiff::affine(tape, w, h, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        let scale = tape.constant(Array::vector(&self.pos_scale));
        Ok(tape.mul(h, scale)?)
    }

    fn forward_trainable(
        &self,
        tape: &mut Tape,
        features: Node,
    ) -> Result<(Node, Vec<(Node, Node)>), Error> {
        let mut h = features;
        let mut leaves = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.leaf(layer.w.clone(), true);
            let b = tape.leaf(layer.b.clone(), true);
            leaves.push((w, b));
            h = crate::autodiff::affine(tape, w, h, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        let scale = tape.constant(Array::vector(&self.pos_scale));
        Ok((tape.mul(h, scale)?, leaves))
    }

    fn predict(&self, features: &[f64]) -> Result<Position, Error> {
        let mut tape = Tape::new();
        let f = tape.constant(Array::vector(features));
        let out = self.forward(&mut tape, f)?;
        let v = tape.value(out);
        Ok(Position::new(v.data()[0], v.data()[1], v.data()[2]))
    }
}

/// Fixed sensing vectors of the learned non-adaptive baseline: one BS
/// vector and K RIS vectors per frame, shared across episodes.
#[derive(Clone, Debug)]
pub struct FixedSensing {
    /// Per frame, stacked [re; im] of length 2M.
    pub w: Vec<Array>,
    /// Per frame and RIS, stacked [re; im] of length 2N.
    pub thetas: Vec<Vec<Array>>,
}

impl FixedSensing {
    pub fn init<R: rand::Rng>(model: &ModelConfig, rng: &mut R) -> Self {
        let unit = |len: usize, rng: &mut R| {
            let raw: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
            Array::vector(&normalize_pairs(&raw))
        };
        let w = (0..model.t).map(|_| unit(2 * model.m, rng)).collect();
        let thetas = (0..model.t)
            .map(|_| (0..model.k).map(|_| unit(2 * model.n, rng)).collect())
            .collect();
        Self { w, thetas }
    }

    pub fn project(&mut self) {
        for w in self.w.iter_mut() {
            let n = normalize_pairs(w.data());
            w.data_mut().copy_from_slice(&n);
        }
        for frame in self.thetas.iter_mut() {
            for th in frame.iter_mut() {
                let n = normalize_pairs(th.data());
                th.data_mut().copy_from_slice(&n);
            }
        }
    }

    pub fn max_modulus_error(&self) -> f64 {
        let pair_err = |v: &Array| {
            let e = v.numel() / 2;
            (0..e)
                .map(|i| {
                    ((v.data()[i].powi(2) + v.data()[e + i].powi(2)).sqrt() - 1.0).abs()
                })
                .fold(0.0f64, f64::max)
        };
        let mut worst = self.w.iter().map(pair_err).fold(0.0f64, f64::max);
        for frame in &self.thetas {
            worst = worst.max(frame.iter().map(pair_err).fold(0.0f64, f64::max));
        }
        worst
    }
}

/// Which comparison scheme to train.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    /// Codewords drawn uniformly from the (untrained) codebooks each
    /// frame; only the estimator learns.
    RandomSensing,
    /// Free trainable unit-modulus sensing vectors shared across
    /// episodes, trained jointly with the estimator.
    LearnedNonadaptive,
}

/// A trained baseline plus its evaluation RMSE.
pub struct BaselineOutcome {
    pub estimator: FeedforwardEstimator,
    pub sensing: Option<FixedSensing>,
    pub rmse: f64,
}

fn random_codewords(
    model: &ModelConfig,
    ris_cb: &crate::codebook::Codebook,
    bs_cb: &crate::codebook::Codebook,
    seed: u64,
    episode: u64,
) -> (Vec<ndarray::Array1<Complex64>>, Vec<Vec<ndarray::Array1<Complex64>>>) {
    use rand::Rng;
    let mut rng = derive_rng(seed, Stream::BaselineDraw, episode);
    let column_complex = |cb: &crate::codebook::Codebook, j: usize| {
        let col = cb.column(j);
        let e = cb.elements();
        ndarray::Array1::from_iter((0..e).map(|i| Complex64::new(col[i], col[e + i])))
    };
    let mut ws = Vec::with_capacity(model.t);
    let mut thetas = Vec::with_capacity(model.t);
    for _ in 0..model.t {
        ws.push(column_complex(bs_cb, rng.random_range(0..bs_cb.width())));
        thetas.push(
            (0..model.k)
                .map(|_| column_complex(ris_cb, rng.random_range(0..ris_cb.width())))
                .collect(),
        );
    }
    (ws, thetas)
}

/// Pilot features of one episode under externally chosen codewords.
fn episode_features(
    spec: &crate::training::EpisodeSpec,
    ws: &[ndarray::Array1<Complex64>],
    thetas: &[Vec<ndarray::Array1<Complex64>>],
    pilot: &PilotConfig,
    feature_scale: f64,
) -> Result<Vec<f64>, Error> {
    let mut features = Vec::with_capacity(2 * ws.len());
    for t in 0..ws.len() {
        let y = measure_pilot(&spec.channel, &ws[t], &thetas[t], pilot, spec.noise[t])?;
        features.push(y.re * feature_scale);
        features.push(y.im * feature_scale);
    }
    Ok(features)
}

/// Train a comparison scheme under the same episode budget and
/// evaluate it on the held-out stream.
pub fn train_baseline(
    kind: BaselineKind,
    resolved: &Resolved,
    threads: usize,
) -> Result<BaselineOutcome, Error> {
    let Resolved {
        layout,
        model,
        train,
        pilot,
        eval,
        ..
    } = resolved;
    let mut rng = derive_rng(train.seed, Stream::Init, 1);
    let mut estimator = FeedforwardEstimator::init(model, &mut rng);
    let ris_cb = crate::codebook::Codebook::init(model.n, model.v, &mut rng);
    let bs_cb = crate::codebook::Codebook::init(model.m, model.b, &mut rng);
    let mut sensing = match kind {
        BaselineKind::RandomSensing => None,
        BaselineKind::LearnedNonadaptive => Some(FixedSensing::init(model, &mut rng)),
    };

    // Flat Adam state over estimator (and sensing) arrays.
    let mut est_m: Vec<Array> = estimator
        .layers
        .iter()
        .flat_map(|l| [Array::zeros(l.w.shape().to_vec()), Array::zeros(l.b.shape().to_vec())])
        .collect();
    let mut est_v = est_m.clone();
    let (mut sen_m, mut sen_v): (Vec<Array>, Vec<Array>) = match &sensing {
        Some(s) => {
            let shapes: Vec<Array> = s
                .w
                .iter()
                .map(|a| Array::zeros(a.shape().to_vec()))
                .chain(
                    s.thetas
                        .iter()
                        .flatten()
                        .map(|a| Array::zeros(a.shape().to_vec())),
                )
                .collect();
            (shapes.clone(), shapes)
        }
        None => (Vec::new(), Vec::new()),
    };
    let mut step_count = 0u64;

    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let total_steps = train.episodes_total.div_ceil(train.batch_size);
    let mut episodes_seen = 0usize;
    for _ in 0..total_steps {
        let batch_len = train.batch_size.min(train.episodes_total - episodes_seen);
        let specs: Vec<crate::training::EpisodeSpec> = (0..batch_len)
            .map(|i| {
                sample_episode(
                    layout,
                    model.t,
                    train.rician_epsilon,
                    pilot.sigma2,
                    train.seed,
                    Stream::TrainEpisode,
                    (episodes_seen + i) as u64,
                )
            })
            .collect::<Result<_, _>>()?;

        let one = |i: usize| -> Result<(Vec<Array>, Vec<Array>), Error> {
            let spec = &specs[i];
            match kind {
                BaselineKind::RandomSensing => {
                    let (ws, thetas) = random_codewords(
                        model,
                        &ris_cb,
                        &bs_cb,
                        train.seed,
                        (episodes_seen + i) as u64,
                    );
                    let features =
                        episode_features(spec, &ws, &thetas, pilot, model.feature_scale)?;
                    let mut tape = Tape::new();
                    let f = tape.constant(Array::vector(&features));
                    let (out, leaves) = estimator.forward_trainable(&mut tape, f)?;
                    let target =
                        tape.constant(Array::vector(&[spec.ue.x, spec.ue.y, spec.ue.z]));
                    let diff = tape.sub(out, target)?;
                    let loss = sum_sq(&mut tape, diff);
                    tape.backward(loss)?;
                    let grads = leaves
                        .iter()
                        .flat_map(|(w, b)| [tape.grad(*w), tape.grad(*b)])
                        .collect();
                    Ok((grads, Vec::new()))
                }
                BaselineKind::LearnedNonadaptive => {
                    let s = sensing.as_ref().unwrap();
                    let mut tape = Tape::new();
                    let chn = channel_nodes(&mut tape, &spec.channel)?;
                    // Leaf order mirrors the optimizer state: all w's,
                    // then all thetas frame-major.
                    let w_leaves: Vec<crate::autodiff::Node> =
                        s.w.iter().map(|a| tape.leaf(a.clone(), true)).collect();
                    let theta_leaves: Vec<Vec<crate::autodiff::Node>> = s
                        .thetas
                        .iter()
                        .map(|frame| {
                            frame.iter().map(|a| tape.leaf(a.clone(), true)).collect()
                        })
                        .collect();
                    let sensing_leaves: Vec<crate::autodiff::Node> = w_leaves
                        .iter()
                        .copied()
                        .chain(theta_leaves.iter().flatten().copied())
                        .collect();
                    let mut feature_parts = Vec::new();
                    for t in 0..model.t {
                        let (y_re, y_im) = measure_on_tape(
                            &mut tape,
                            &chn,
                            w_leaves[t],
                            &theta_leaves[t],
                            pilot,
                            spec.noise[t],
                        )?;
                        feature_parts.push(y_re);
                        feature_parts.push(y_im);
                    }
                    let raw = tape.concat(&feature_parts)?;
                    let features = tape.scale(raw, model.feature_scale);
                    let (out, est_leaves) = estimator.forward_trainable(&mut tape, features)?;
                    let target =
                        tape.constant(Array::vector(&[spec.ue.x, spec.ue.y, spec.ue.z]));
                    let diff = tape.sub(out, target)?;
                    let loss = sum_sq(&mut tape, diff);
                    tape.backward(loss)?;
                    let est_grads = est_leaves
                        .iter()
                        .flat_map(|(w, b)| [tape.grad(*w), tape.grad(*b)])
                        .collect();
                    let sen_grads = sensing_leaves.iter().map(|&n| tape.grad(n)).collect();
                    Ok((est_grads, sen_grads))
                }
            }
        };

        let results: Vec<(Vec<Array>, Vec<Array>)> = match &pool {
            Some(p) => p.install(|| {
                (0..batch_len)
                    .into_par_iter()
                    .map(one)
                    .collect::<Result<Vec<_>, Error>>()
            })?,
            None => (0..batch_len)
                .map(one)
                .collect::<Result<Vec<_>, Error>>()?,
        };

        let scale = 1.0 / batch_len as f64;
        let mut est_grads = results[0].0.clone();
        let mut sen_grads = results[0].1.clone();
        for (eg, sg) in results.iter().skip(1) {
            for (a, g) in est_grads.iter_mut().zip(eg) {
                a.add_assign(g);
            }
            for (a, g) in sen_grads.iter_mut().zip(sg) {
                a.add_assign(g);
            }
        }
        for g in est_grads.iter_mut().chain(sen_grads.iter_mut()) {
            g.scale_assign(scale);
        }

        step_count += 1;
        let mut idx = 0;
        for layer in estimator.layers.iter_mut() {
            adam_step(
                &mut layer.w,
                &est_grads[idx],
                &mut est_m[idx],
                &mut est_v[idx],
                step_count,
                train.learning_rate,
                train.adam_beta1,
                train.adam_beta2,
                train.adam_eps,
            );
            idx += 1;
            adam_step(
                &mut layer.b,
                &est_grads[idx],
                &mut est_m[idx],
                &mut est_v[idx],
                step_count,
                train.learning_rate,
                train.adam_beta1,
                train.adam_beta2,
                train.adam_eps,
            );
            idx += 1;
        }
        if let Some(s) = sensing.as_mut() {
            let mut arrays: Vec<&mut Array> = Vec::new();
            for w in s.w.iter_mut() {
                arrays.push(w);
            }
            for frame in s.thetas.iter_mut() {
                for th in frame.iter_mut() {
                    arrays.push(th);
                }
            }
            for (i, p) in arrays.into_iter().enumerate() {
                adam_step(
                    p,
                    &sen_grads[i],
                    &mut sen_m[i],
                    &mut sen_v[i],
                    step_count,
                    train.learning_rate,
                    train.adam_beta1,
                    train.adam_beta2,
                    train.adam_eps,
                );
            }
            s.project();
        }
        episodes_seen += batch_len;
    }

    let rmse = baseline_rmse(
        kind,
        &estimator,
        sensing.as_ref(),
        resolved,
        eval.n_eval,
        eval.seed,
        threads > 1,
        &ris_cb,
        &bs_cb,
    )?;
    Ok(BaselineOutcome {
        estimator,
        sensing,
        rmse,
    })
}

/// Evaluate a baseline on the held-out stream: same T-pilot budget,
/// same feature convention.
#[allow(clippy::too_many_arguments)]
pub fn baseline_rmse(
    kind: BaselineKind,
    estimator: &FeedforwardEstimator,
    sensing: Option<&FixedSensing>,
    resolved: &Resolved,
    n_eval: usize,
    seed: u64,
    parallel: bool,
    ris_cb: &crate::codebook::Codebook,
    bs_cb: &crate::codebook::Codebook,
) -> Result<f64, Error> {
    let model = &resolved.model;
    let one = |i: usize| -> Result<f64, Error> {
        let spec = sample_episode(
            &resolved.layout,
            model.t,
            resolved.train.rician_epsilon,
            resolved.pilot.sigma2,
            seed,
            Stream::EvalEpisode,
            i as u64,
        )?;
        let (ws, thetas) = match kind {
            BaselineKind::RandomSensing => {
                random_codewords(model, ris_cb, bs_cb, seed, i as u64)
            }
            BaselineKind::LearnedNonadaptive => {
                let s = sensing.expect("learned baseline carries sensing vectors");
                let to_complex = |a: &Array| {
                    let e = a.numel() / 2;
                    ndarray::Array1::from_iter(
                        (0..e).map(|j| Complex64::new(a.data()[j], a.data()[e + j])),
                    )
                };
                (
                    s.w.iter().map(to_complex).collect(),
                    s.thetas
                        .iter()
                        .map(|frame| frame.iter().map(to_complex).collect())
                        .collect(),
                )
            }
        };
        let features =
            episode_features(&spec, &ws, &thetas, &resolved.pilot, model.feature_scale)?;
        let p = estimator.predict(&features)?;
        let (dx, dy, dz) = (p.x - spec.ue.x, p.y - spec.ue.y, p.z - spec.ue.z);
        Ok(dx * dx + dy * dy + dz * dz)
    };
    let total: f64 = if parallel {
        let v: Result<Vec<f64>, Error> = (0..n_eval).into_par_iter().map(one).collect();
        v?.iter().sum()
    } else {
        let mut acc = 0.0;
        for i in 0..n_eval {
            acc += one(i)?;
        }
        acc
    };
    Ok((total / n_eval as f64).sqrt())
}

/// One rendered radio map with its provenance.
pub struct LabeledRssMap {
    pub frame: usize,
    /// "all", or "ris<k>" for a single-surface decomposition.
    pub subset: String,
    pub map: RssMap,
}

/// Render per-frame radio maps for one UE: a deterministic zero-noise
/// episode on the LOS channel picks the codewords, then each frame's
/// combined map (and per-RIS decompositions when K > 1) is rasterized.
pub fn emit_radio_maps(
    params: &VqcParams,
    resolved: &Resolved,
    ue: &Position,
) -> Result<Vec<LabeledRssMap>, Error> {
    let model = &resolved.model;
    let ch = los_channel(&resolved.layout, ue)?;
    let noise = vec![Complex64::new(0.0, 0.0); model.t];
    let mut tape = Tape::new();
    let tm = TapeModel::insert(&mut tape, params, false, !resolved.train.codebook_free);
    let trace = run_episode(
        &mut tape,
        &tm,
        model,
        &resolved.pilot,
        &ch,
        &noise,
        resolved.train.commitment_weight,
    )?;

    let to_complex = |a: &Array| {
        let e = a.numel() / 2;
        ndarray::Array1::from_iter((0..e).map(|j| Complex64::new(a.data()[j], a.data()[e + j])))
    };

    let mut maps = Vec::new();
    for t in 0..model.t {
        let w = to_complex(tape.value(trace.used_w[t]));
        let thetas: Vec<ndarray::Array1<Complex64>> = trace.used_thetas[t]
            .iter()
            .map(|&n| to_complex(tape.value(n)))
            .collect();
        maps.push(LabeledRssMap {
            frame: t,
            subset: "all".to_string(),
            map: rss_map(
                &resolved.layout,
                &w,
                &thetas,
                &resolved.pilot,
                &RssComponents::default(),
            )?,
        });
        if model.k > 1 {
            for k in 0..model.k {
                maps.push(LabeledRssMap {
                    frame: t,
                    subset: format!("ris{}", k + 1),
                    map: rss_map(
                        &resolved.layout,
                        &w,
                        &thetas,
                        &resolved.pilot,
                        &RssComponents {
                            include_direct: false,
                            active_ris: Some(vec![k]),
                        },
                    )?,
                });
            }
        }
    }
    Ok(maps)
}

/// Fraction of seeded held-out episodes whose final-frame RSS at the
/// true UE cell exceeds the grid median.
pub fn focusing_fraction(
    params: &VqcParams,
    resolved: &Resolved,
    episodes: usize,
    seed: u64,
) -> Result<f64, Error> {
    let mut hits = 0usize;
    for i in 0..episodes {
        let mut rng = derive_rng(seed, Stream::EvalEpisode, i as u64);
        let ue = crate::training::sample_ue(&resolved.layout, &mut rng);
        let maps = emit_radio_maps(params, resolved, &ue)?;
        let last = maps
            .iter()
            .filter(|m| m.subset == "all")
            .max_by_key(|m| m.frame)
            .expect("at least one map");
        let cell = last
            .map
            .cell_of(&ue)
            .ok_or_else(|| Error::Numeric("UE outside the rendered grid".into()))?;
        if last.map.values[(cell.0, cell.1)] > last.map.median() {
            hits += 1;
        }
    }
    Ok(hits as f64 / episodes as f64)
}
