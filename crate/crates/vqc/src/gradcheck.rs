//! Finite-difference verification of the backward pass: per-op checks,
//! a full-episode sweep over every parameter coordinate, the
//! gradient-isolation contracts, and a mutation self-test proving the
//! harness can detect a wrong gradient.

use num_complex::Complex64;

use crate::autodiff::{Array, Node, Tape};
use crate::codebook::SelectionRecord;
use crate::error::Error;
use crate::geometry::{sample_channel, PilotConfig, Position, ServiceArea, SystemLayout};
use crate::model::{
    composite_loss, default_feature_scale, run_episode, ModelConfig, TapeModel, VqcParams,
};
use crate::rng::{derive_rng, Stream};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance per coordinate.
pub const FD_RTOL: f64 = 1e-4;
/// Absolute floor covering coordinates whose gradient sits below the
/// finite-difference noise floor (~eps * |loss| / step).
pub const FD_ATOL: f64 = 1e-6;

pub struct GradCheckReport {
    pub op_failures: Vec<String>,
    pub episode_max_rel: f64,
    pub episode_coords_checked: usize,
    pub episode_coords_skipped: usize,
    pub isolation_ok: bool,
    pub mutation_detected: bool,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.op_failures.is_empty() && self.isolation_ok && self.mutation_detected
    }
}

fn agrees(fd: f64, ad: f64) -> bool {
    (fd - ad).abs() <= FD_RTOL * fd.abs().max(ad.abs()) + FD_ATOL
}

/// Check one scalar-valued graph against central differences on every
/// input coordinate. Returns the worst mismatch description.
fn fd_check(
    name: &str,
    inputs: &[Array],
    build: &dyn Fn(&mut Tape, &[Node]) -> Result<Node, Error>,
) -> Result<(), String> {
    let eval = |values: &[Array]| -> Result<f64, String> {
        let mut tape = Tape::new();
        let nodes: Vec<Node> = values.iter().map(|a| tape.leaf(a.clone(), false)).collect();
        let out = build(&mut tape, &nodes).map_err(|e| format!("{name}: {e}"))?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let nodes: Vec<Node> = inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect();
    let out = build(&mut tape, &nodes).map_err(|e| format!("{name}: {e}"))?;
    tape.backward(out).map_err(|e| format!("{name}: {e}"))?;
    let grads: Vec<Array> = nodes.iter().map(|&n| tape.grad(n)).collect();

    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let ad = grads[i].data()[j];
            if !agrees(fd, ad) {
                return Err(format!(
                    "{name}: input {i} coord {j}: fd {fd:.6e} vs ad {ad:.6e}"
                ));
            }
        }
    }
    Ok(())
}

/// Finite-difference checks over every differentiable op.
pub fn check_ops() -> Vec<String> {
    let mut failures = Vec::new();
    let mut rng = derive_rng(2024, Stream::Init, 0);
    use rand::Rng;
    let mut rand_vec = |len: usize, lo: f64, hi: f64| -> Array {
        Array::vector(&(0..len).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>())
    };

    let mut run = |name: &str,
                   inputs: Vec<Array>,
                   build: &dyn Fn(&mut Tape, &[Node]) -> Result<Node, Error>| {
        if let Err(e) = fd_check(name, &inputs, build) {
            failures.push(e);
        }
    };

    for round in 0..10 {
        let a = rand_vec(5, -2.0, 2.0);
        let b = rand_vec(5, 0.4, 2.0);
        let s = rand_vec(1, 0.5, 1.5);

        run(
            &format!("add[{round}]"),
            vec![a.clone(), b.clone()],
            &|t, n| {
                let x = t.add(n[0], n[1])?;
                Ok(t.sum(x))
            },
        );
        run(
            &format!("sub[{round}]"),
            vec![a.clone(), b.clone()],
            &|t, n| {
                let x = t.sub(n[0], n[1])?;
                let sq = t.square(x);
                Ok(t.sum(sq))
            },
        );
        run(
            &format!("mul[{round}]"),
            vec![a.clone(), b.clone()],
            &|t, n| {
                let x = t.mul(n[0], n[1])?;
                Ok(t.sum(x))
            },
        );
        run(
            &format!("div[{round}]"),
            vec![a.clone(), b.clone()],
            &|t, n| {
                let x = t.div(n[0], n[1])?;
                Ok(t.sum(x))
            },
        );
        run(
            &format!("scalar-broadcast[{round}]"),
            vec![s.clone(), a.clone()],
            &|t, n| {
                let x = t.mul(n[0], n[1])?;
                let y = t.add(x, n[0])?;
                Ok(t.sum(y))
            },
        );
        run(&format!("neg-square[{round}]"), vec![a.clone()], &|t, n| {
            let x = t.neg(n[0]);
            let y = t.square(x);
            Ok(t.sum(y))
        });
        run(&format!("sqrt[{round}]"), vec![b.clone()], &|t, n| {
            let x = t.sqrt(n[0])?;
            Ok(t.sum(x))
        });
        run(&format!("tanh[{round}]"), vec![a.clone()], &|t, n| {
            let x = t.tanh(n[0]);
            Ok(t.sum(x))
        });
        run(&format!("sigmoid[{round}]"), vec![a.clone()], &|t, n| {
            let x = t.sigmoid(n[0]);
            Ok(t.sum(x))
        });
        // keep relu inputs away from the kink
        let relu_in = Array::vector(
            &a.data()
                .iter()
                .map(|&v| if v.abs() < 0.05 { v + 0.1 } else { v })
                .collect::<Vec<_>>(),
        );
        run(&format!("relu[{round}]"), vec![relu_in], &|t, n| {
            let x = t.relu(n[0]);
            Ok(t.sum(x))
        });
        run(&format!("mean[{round}]"), vec![a.clone()], &|t, n| {
            Ok(t.mean(n[0]))
        });
        run(
            &format!("concat-slice[{round}]"),
            vec![a.clone(), b.clone()],
            &|t, n| {
                let c = t.concat(&[n[0], n[1]])?;
                let left = t.slice(c, 0, 3)?;
                let right = t.slice(c, 3, 10)?;
                let sl = t.sum(left);
                let sq = t.square(right);
                let sr = t.sum(sq);
                Ok(t.add(sl, sr)?)
            },
        );

        let m1 = Array::matrix(3, 4, rand_vec(12, -1.0, 1.0).data().to_vec()).unwrap();
        let m2 = Array::matrix(4, 2, rand_vec(8, -1.0, 1.0).data().to_vec()).unwrap();
        run(
            &format!("matmul[{round}]"),
            vec![m1.clone(), m2.clone()],
            &|t, n| {
                let x = t.matmul(n[0], n[1])?;
                let sq = t.square(x);
                Ok(t.sum(sq))
            },
        );
        let v4 = rand_vec(4, -1.0, 1.0);
        run(
            &format!("matvec[{round}]"),
            vec![m1.clone(), v4.clone()],
            &|t, n| {
                let x = t.matvec(n[0], n[1])?;
                let sq = t.square(x);
                Ok(t.sum(sq))
            },
        );
        run(&format!("col[{round}]"), vec![m1.clone()], &|t, n| {
            let c = t.col(n[0], 2)?;
            let sq = t.square(c);
            Ok(t.sum(sq))
        });
        // unit_modulus away from zero magnitude
        let um_in = rand_vec(6, 0.3, 1.5);
        run(&format!("unit_modulus[{round}]"), vec![um_in], &|t, n| {
            let u = t.unit_modulus(n[0])?;
            let w = t.constant(Array::vector(&[0.3, -0.9, 1.7, 0.2, -0.5, 1.1]));
            let p = t.mul(u, w)?;
            Ok(t.sum(p))
        });
    }

    // stop_gradient: the blocked branch must report bit-exact zeros.
    {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::vector(&[0.5, -1.5]), true);
        let sg = tape.stop_gradient(x);
        let sq = tape.square(sg);
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        if tape.grad(x).data().iter().any(|v| v.to_bits() != 0) {
            failures.push("stop_gradient leaked a nonzero gradient".into());
        }
    }
    failures
}

/// Tiny configuration for the full-episode sweep: two antennas, two
/// RIS elements, four codewords each, two frames, hidden width four.
pub fn tiny_setup() -> (SystemLayout, ModelConfig, PilotConfig) {
    let layout = SystemLayout {
        bs_position: Position::new(0.0, 0.0, 0.0),
        ris_positions: vec![Position::new(0.0, 30.0, 0.0)],
        m: 2,
        n: 2,
        c: 2,
        spacing_ris: 1.0,
        spacing_bs: 1.0,
        service_area: ServiceArea {
            center: [20.0, 0.0, -20.0],
            half_extents: [15.0, 35.0],
        },
    };
    let pilot = PilotConfig {
        sigma2: 0.0,
        ..PilotConfig::from_snr_db(25.0)
    };
    let model = ModelConfig {
        t: 2,
        k: 1,
        n: 2,
        m: 2,
        v: 4,
        b: 4,
        hidden: 4,
        dnn_width: 8,
        dnn_depth: 2,
        pos_head_widths: vec![8, 3],
        feature_scale: default_feature_scale(&layout, &pilot),
        pos_scale: [15.0, 35.0, 1.0],
        pos_bias_init: [20.0, 0.0, -20.0],
    };
    (layout, model, pilot)
}

/// Everything the surrogate oracle freezes from the base episode:
/// the selected column index, the base pre-quantized vector and the
/// base codeword value of one quantization.
#[derive(Clone)]
struct FrozenSel {
    index: usize,
    base_pre_q: Vec<f64>,
    base_codeword: Vec<f64>,
}

#[derive(Clone)]
struct FrozenStep {
    bs: FrozenSel,
    ris: Vec<FrozenSel>,
}

/// Independent scalar reimplementation of the episode forward with the
/// stop-gradient branches held at their base-point values. That frozen
/// form is the function whose exact gradient the backward pass
/// computes, so central differences of it must match the tape.
mod surrogate {
    use super::*;
    use crate::codebook::normalize_unit_modulus;
    use crate::geometry::measure_pilot;
    use crate::model::AffineParams;

    fn affine(layer: &AffineParams, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; layer.b.numel()];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = layer.b.data()[j];
            for (col, v) in x.iter().enumerate() {
                acc += layer.w.at(j, col) * v;
            }
            *o = acc;
        }
        out
    }

    fn matvec(w: &Array, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; w.rows()];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (col, v) in x.iter().enumerate() {
                acc += w.at(j, col) * v;
            }
            *o = acc;
        }
        out
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn lstm(
        p: &crate::model::LstmParams,
        pi: &[f64],
        c_prev: &[f64],
        s_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let gate = |r: &AffineParams, u: &Array| -> Vec<f64> {
            let mut pre = affine(r, pi);
            let us = matvec(u, s_prev);
            for (a, b) in pre.iter_mut().zip(us.iter()) {
                *a += b;
            }
            pre
        };
        let i: Vec<f64> = gate(&p.r_i, &p.u_i).iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = gate(&p.r_f, &p.u_f).iter().map(|&v| sigmoid(v)).collect();
        let o: Vec<f64> = gate(&p.r_o, &p.u_o).iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = gate(&p.r_c, &p.u_c).iter().map(|&v| v.tanh()).collect();
        let c: Vec<f64> = (0..i.len())
            .map(|j| f[j] * c_prev[j] + i[j] * g[j])
            .collect();
        let s: Vec<f64> = (0..i.len()).map(|j| o[j] * c[j].tanh()).collect();
        (c, s)
    }

    fn design(params: &VqcParams, cfg: &ModelConfig, s: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut h = s.to_vec();
        for layer in &params.sensing.layers {
            h = affine(layer, &h).iter().map(|&v| v.max(0.0)).collect();
        }
        let raw_ris = affine(&params.sensing.head_ris, &h);
        let raw_bs = affine(&params.sensing.head_bs, &h);
        let w_tilde = normalize_unit_modulus(&raw_bs);
        let thetas = raw_ris
            .chunks(2 * cfg.n)
            .map(normalize_unit_modulus)
            .collect();
        (w_tilde, thetas)
    }

    fn to_complex(stacked: &[f64]) -> ndarray::Array1<Complex64> {
        let e = stacked.len() / 2;
        ndarray::Array1::from_iter((0..e).map(|i| Complex64::new(stacked[i], stacked[e + i])))
    }

    fn norm_sq(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
    }

    pub(super) struct SurrogateEval {
        pub loss: f64,
        /// Hard nearest-neighbor indices at the evaluated parameters,
        /// design-step major: (bs, ris_0..ris_{K-1}) per step.
        pub hard_indices: Vec<Vec<usize>>,
    }

    /// Evaluate the frozen-SG episode loss at (possibly perturbed)
    /// parameters, reporting what the hard selection would have been so
    /// the sweep can skip selection flips.
    pub(super) fn episode_loss(
        params: &VqcParams,
        cfg: &ModelConfig,
        pilot: &PilotConfig,
        ch: &crate::geometry::ChannelRealization,
        ue: &Position,
        commitment_weight: f64,
        frozen: &[FrozenStep],
    ) -> Result<SurrogateEval, Error> {
        let mut hard_indices = Vec::with_capacity(cfg.t + 1);
        let mut quant_loss = 0.0;

        let select = |pre_q: &[f64],
                      fr: &FrozenSel,
                      cb: &crate::codebook::Codebook|
         -> (Vec<f64>, usize) {
            let (hard, _) = cb.nearest(pre_q);
            // selected = pre_q + SG(codeword - pre_q), SG frozen at base
            let sel: Vec<f64> = pre_q
                .iter()
                .enumerate()
                .map(|(i, v)| v + (fr.base_codeword[i] - fr.base_pre_q[i]))
                .collect();
            (sel, hard)
        };

        let zero = vec![0.0; cfg.hidden];
        let (w_tilde, thetas_tilde) = design(params, cfg, &zero);
        let (mut w_sel, hard_bs) = select(&w_tilde, &frozen[0].bs, &params.bs_codebook);
        let mut hard = vec![hard_bs];
        let mut thetas_sel = Vec::with_capacity(cfg.k);
        for (k, th) in thetas_tilde.iter().enumerate() {
            let (sel, h) = select(th, &frozen[0].ris[k], &params.ris_codebook);
            thetas_sel.push(sel);
            hard.push(h);
        }
        hard_indices.push(hard);

        let mut c = zero.clone();
        let mut s = zero.clone();
        for t in 0..cfg.t {
            let w_c = to_complex(&w_sel);
            let th_c: Vec<ndarray::Array1<Complex64>> =
                thetas_sel.iter().map(|v| to_complex(v)).collect();
            let y = measure_pilot(ch, &w_c, &th_c, pilot, Complex64::new(0.0, 0.0))?;
            let pi = [y.re * cfg.feature_scale, y.im * cfg.feature_scale];
            let (c2, s2) = lstm(&params.lstm, &pi, &c, &s);
            c = c2;
            s = s2;

            let step = &frozen[t + 1];
            let (w_tilde, thetas_tilde) = design(params, cfg, &s);
            let (w_next, hard_bs) = select(&w_tilde, &step.bs, &params.bs_codebook);
            // alpha: ||SG(pre_q) - codeword||^2 + weight ||pre_q - SG(codeword)||^2
            let codeword_now = params.bs_codebook.column(step.bs.index);
            quant_loss += norm_sq(&step.bs.base_pre_q, &codeword_now)
                + commitment_weight * norm_sq(&w_tilde, &step.bs.base_codeword);
            let mut hard = vec![hard_bs];
            let mut thetas_next = Vec::with_capacity(cfg.k);
            for (k, th) in thetas_tilde.iter().enumerate() {
                let fr = &step.ris[k];
                let (sel, h) = select(th, fr, &params.ris_codebook);
                let codeword_now = params.ris_codebook.column(fr.index);
                quant_loss += norm_sq(&fr.base_pre_q, &codeword_now)
                    + commitment_weight * norm_sq(th, &fr.base_codeword);
                thetas_next.push(sel);
                hard.push(h);
            }
            hard_indices.push(hard);
            w_sel = w_next;
            thetas_sel = thetas_next;
        }

        let mut h = c;
        let last = params.position.layers.len() - 1;
        for (i, layer) in params.position.layers.iter().enumerate() {
            h = affine(layer, &h);
            if i < last {
                h = h.iter().map(|&v| v.max(0.0)).collect();
            }
        }
        for (i, v) in h.iter_mut().enumerate() {
            *v *= cfg.pos_scale[i];
        }
        let target = [ue.x, ue.y, ue.z];
        let mse: f64 = h
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(SurrogateEval {
            loss: mse + quant_loss,
            hard_indices,
        })
    }
}

/// Base-episode record: the tape loss, its gradients, and the frozen
/// quantities the surrogate oracle needs.
struct BaseEpisode {
    loss: f64,
    grads: Vec<(String, Array)>,
    frozen: Vec<FrozenStep>,
    hard_indices: Vec<Vec<usize>>,
}

fn base_episode(
    params: &VqcParams,
    model_cfg: &ModelConfig,
    pilot: &PilotConfig,
    ch: &crate::geometry::ChannelRealization,
    ue: &Position,
    commitment_weight: f64,
) -> Result<BaseEpisode, Error> {
    let noise = vec![Complex64::new(0.0, 0.0); model_cfg.t];
    let mut tape = Tape::new();
    let tm = TapeModel::insert(&mut tape, params, true, true);
    let trace = run_episode(&mut tape, &tm, model_cfg, pilot, ch, &noise, commitment_weight)?;

    let mut frozen = Vec::with_capacity(model_cfg.t + 1);
    let mut hard_indices = Vec::with_capacity(model_cfg.t + 1);
    for (step, sel) in trace.selections.iter().enumerate() {
        let bs = FrozenSel {
            index: sel.bs_index,
            base_pre_q: trace.pre_q_bs[step].clone(),
            base_codeword: params.bs_codebook.column(sel.bs_index),
        };
        let ris = sel
            .ris_indices
            .iter()
            .enumerate()
            .map(|(k, &idx)| FrozenSel {
                index: idx,
                base_pre_q: trace.pre_q_ris[step][k].clone(),
                base_codeword: params.ris_codebook.column(idx),
            })
            .collect();
        let mut hard = vec![sel.bs_index];
        hard.extend(sel.ris_indices.iter().copied());
        hard_indices.push(hard);
        frozen.push(FrozenStep { bs, ris });
    }

    let loss = composite_loss(&mut tape, std::slice::from_ref(&trace), &[*ue])?;
    let loss_v = tape.value(loss).item();
    tape.backward(loss)?;
    let mut grads = Vec::new();
    tm.for_each_node(&mut |name, node| grads.push((name.to_string(), tape.grad(node))));
    Ok(BaseEpisode {
        loss: loss_v,
        grads,
        frozen,
        hard_indices,
    })
}

pub struct EpisodeSweep {
    pub max_rel: f64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: String,
    pub failures: Vec<String>,
}

/// Sweep every parameter coordinate of the tiny episode with central
/// differences of the frozen-SG surrogate, skipping coordinates whose
/// perturbation flips a codeword selection. `ad_commitment_weight`
/// lets the mutation self-test inject an inconsistent backward pass.
pub fn episode_sweep(
    fd_commitment_weight: f64,
    ad_commitment_weight: f64,
) -> Result<EpisodeSweep, Error> {
    let (layout, model_cfg, pilot) = tiny_setup();
    let mut rng = derive_rng(7, Stream::Init, 0);
    let params = VqcParams::init(&model_cfg, &mut rng);
    let ue = Position::new(24.0, 9.0, -20.0);
    let mut ch_rng = derive_rng(7, Stream::TrainEpisode, 0);
    let ch = sample_channel(&layout, &ue, 10.0, &mut ch_rng)?;

    let base = base_episode(&params, &model_cfg, &pilot, &ch, &ue, ad_commitment_weight)?;

    // The oracle reimplements the forward pass from scratch; its value
    // at the base point must agree with the tape's.
    let check = surrogate::episode_loss(
        &params,
        &model_cfg,
        &pilot,
        &ch,
        &ue,
        ad_commitment_weight,
        &base.frozen,
    )?;
    if (check.loss - base.loss).abs() > 1e-9 * base.loss.abs().max(1.0) {
        return Err(Error::Numeric(format!(
            "surrogate forward disagrees with the tape: {} vs {}",
            check.loss, base.loss
        )));
    }
    if check.hard_indices != base.hard_indices {
        return Err(Error::Numeric(
            "surrogate selection disagrees with the tape".into(),
        ));
    }

    let mut names = Vec::new();
    params.for_each(&mut |name, a| names.push((name.to_string(), a.numel())));

    let mut sweep = EpisodeSweep {
        max_rel: 0.0,
        checked: 0,
        skipped: 0,
        worst: String::new(),
        failures: Vec::new(),
    };

    for (name, numel) in &names {
        let grad = &base
            .grads
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Numeric(format!("missing gradient for {name}")))?
            .1;
        for j in 0..*numel {
            let perturbed = |delta: f64| -> Result<surrogate::SurrogateEval, Error> {
                let mut p = params.clone();
                p.for_each_mut(&mut |n, a| {
                    if n == name {
                        a.data_mut()[j] += delta;
                    }
                });
                surrogate::episode_loss(
                    &p,
                    &model_cfg,
                    &pilot,
                    &ch,
                    &ue,
                    fd_commitment_weight,
                    &base.frozen,
                )
            };
            let plus = perturbed(FD_STEP)?;
            let minus = perturbed(-FD_STEP)?;
            if plus.hard_indices != base.hard_indices
                || minus.hard_indices != base.hard_indices
            {
                sweep.skipped += 1;
                continue;
            }
            let fd = (plus.loss - minus.loss) / (2.0 * FD_STEP);
            let ad = grad.data()[j];
            sweep.checked += 1;
            let rel = (fd - ad).abs() / (fd.abs().max(ad.abs()) + FD_ATOL);
            if rel > sweep.max_rel {
                sweep.max_rel = rel;
                sweep.worst = format!("{name}[{j}]: fd {fd:.6e} vs ad {ad:.6e}");
            }
            if !agrees(fd, ad) {
                sweep
                    .failures
                    .push(format!("{name}[{j}]: fd {fd:.6e} vs ad {ad:.6e}"));
            }
        }
    }
    Ok(sweep)
}

/// Gradient-isolation contracts on the tiny episode: the straight-
/// through path sends nothing to the codebooks from the MSE term, and
/// the selected vector is a codebook column bit-exactly.
pub fn check_isolation() -> Result<bool, Error> {
    let (layout, model_cfg, pilot) = tiny_setup();
    let mut rng = derive_rng(11, Stream::Init, 0);
    let params = VqcParams::init(&model_cfg, &mut rng);
    let ue = Position::new(14.0, -21.0, -20.0);
    let mut ch_rng = derive_rng(11, Stream::TrainEpisode, 0);
    let ch = sample_channel(&layout, &ue, 10.0, &mut ch_rng)?;
    let noise = vec![Complex64::new(0.0, 0.0); model_cfg.t];

    let mut tape = Tape::new();
    let tm = TapeModel::insert(&mut tape, &params, true, true);
    let trace = run_episode(&mut tape, &tm, &model_cfg, &pilot, &ch, &noise, 1.0)?;

    // Selected vectors are codebook columns, bit for bit.
    for (t, sel) in trace.selections.iter().enumerate().take(model_cfg.t) {
        let used = tape.value(trace.used_thetas[t][0]);
        let col = params.ris_codebook.column(sel.ris_indices[0]);
        for (a, b) in used.data().iter().zip(col.iter()) {
            if a.to_bits() != b.to_bits() {
                return Ok(false);
            }
        }
    }

    // MSE-only backward: codebooks receive bit-exact zeros.
    let target = tape.constant(Array::vector(&[ue.x, ue.y, ue.z]));
    let diff = tape.sub(trace.estimate_node, target)?;
    let mse = crate::autodiff::sum_sq(&mut tape, diff);
    tape.backward(mse)?;
    let zero_cb = tape
        .grad(tm.ris_cb.unwrap())
        .data()
        .iter()
        .chain(tape.grad(tm.bs_cb.unwrap()).data().iter())
        .all(|v| v.to_bits() == 0);
    Ok(zero_cb)
}

/// Run the whole suite.
pub fn run_gradcheck() -> Result<GradCheckReport, Error> {
    let op_failures = check_ops();
    let sweep = episode_sweep(1.0, 1.0)?;
    let isolation_ok = check_isolation()?;
    // Mutation self-test: a sign error in the commitment term's
    // backward pass (weight -1 in AD vs +1 in FD) must be detected.
    let mutated = episode_sweep(1.0, -1.0)?;
    let mutation_detected = !mutated.failures.is_empty();

    let mut failures = op_failures;
    failures.extend(sweep.failures.clone());
    Ok(GradCheckReport {
        op_failures: failures,
        episode_max_rel: sweep.max_rel,
        episode_coords_checked: sweep.checked,
        episode_coords_skipped: sweep.skipped,
        isolation_ok,
        mutation_detected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_op_checks_pass() {
        let failures = check_ops();
        assert!(failures.is_empty(), "{failures:?}");
    }

    #[test]
    fn episode_sweep_passes_and_detects_mutation() {
        let sweep = episode_sweep(1.0, 1.0).unwrap();
        assert!(
            sweep.failures.is_empty(),
            "failures: {:?} (max rel {} at {})",
            &sweep.failures[..sweep.failures.len().min(5)],
            sweep.max_rel,
            sweep.worst
        );
        assert!(sweep.checked > 200, "only {} coords checked", sweep.checked);

        let mutated = episode_sweep(1.0, -1.0).unwrap();
        assert!(
            !mutated.failures.is_empty(),
            "commitment sign flip went undetected"
        );
    }

    #[test]
    fn isolation_holds() {
        assert!(check_isolation().unwrap());
    }
}
