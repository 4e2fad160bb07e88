//! The active-sensing network: LSTM history compressor, sensing-vector
//! head with unit-modulus normalization, vector-quantized codeword
//! selection, position head, the episode forward pass and the
//! composite loss.
//!
//! All of an episode runs on one autodiff tape, including the pilot
//! measurement itself, so gradients reach the codewords and weights
//! that shaped earlier frames.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{affine, sum_sq, Array, Node, Tape};
use crate::codebook::{straight_through_select, Codebook, SelectionRecord};
use crate::error::{AdError, Error};
use crate::geometry::{cascade_channel, ChannelRealization, PilotConfig, Position};

/// Dimensions and hyperparameters of the network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Pilot frames per episode.
    pub t: usize,
    /// Number of RISs.
    pub k: usize,
    /// Reflective elements per RIS.
    pub n: usize,
    /// BS antennas.
    pub m: usize,
    /// RIS codebook size.
    pub v: usize,
    /// BS beamforming codebook size.
    pub b: usize,
    /// LSTM state width.
    pub hidden: usize,
    /// Width of the sensing-head hidden layers.
    pub dnn_width: usize,
    /// Number of sensing-head hidden layers.
    pub dnn_depth: usize,
    /// Position-head layer widths, ending in 3.
    pub pos_head_widths: Vec<usize>,
    /// Fixed scale applied to [Re y, Im y] before the LSTM. Measured
    /// pilots are tiny after path loss; see [`default_feature_scale`].
    pub feature_scale: f64,
    /// Fixed elementwise scale applied to the position head's linear
    /// output, in meters per unit. Set to the service-area half-extents
    /// so the head regresses area-normalized coordinates.
    #[serde(default = "unit_pos_scale")]
    pub pos_scale: [f64; 3],
    /// Initial predicted position (realized as the output-layer bias in
    /// normalized units). The area center is the prior mean.
    #[serde(default)]
    pub pos_bias_init: [f64; 3],
}

fn unit_pos_scale() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

/// Feature scale that maps the typical received pilot magnitude to
/// order one: the inverse of sqrt(P_u) times the direct-path amplitude
/// at the service-area center.
pub fn default_feature_scale(
    layout: &crate::geometry::SystemLayout,
    pilot: &PilotConfig,
) -> f64 {
    let center = Position::new(
        layout.service_area.center[0],
        layout.service_area.center[1],
        layout.service_area.center[2],
    );
    let d = center.distance(&layout.bs_position).max(1.0);
    let rho = crate::geometry::path_loss_amplitude(crate::geometry::PathKind::Direct, d)
        .expect("positive distance");
    1.0 / (pilot.p_u.sqrt() * rho * layout.m as f64)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let positive = [
            ("t", self.t),
            ("k", self.k),
            ("n", self.n),
            ("m", self.m),
            ("v", self.v),
            ("b", self.b),
            ("hidden", self.hidden),
            ("dnn_width", self.dnn_width),
            ("dnn_depth", self.dnn_depth),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.pos_head_widths.last() != Some(&3) {
            return Err(Error::Config(
                "model.pos_head_widths must end in 3 (x, y, z)".into(),
            ));
        }
        if !(self.feature_scale.is_finite() && self.feature_scale > 0.0) {
            return Err(Error::Config(
                "model.feature_scale must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// One affine layer.
#[derive(Clone, Debug)]
pub struct AffineParams {
    pub w: Array,
    pub b: Array,
}

impl AffineParams {
    pub(crate) fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            w: Array::matrix(out_dim, in_dim, data).unwrap(),
            b: Array::zeros(vec![out_dim]),
        }
    }

    pub(crate) fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Array::zeros(vec![out_dim, in_dim]),
            b: Array::zeros(vec![out_dim]),
        }
    }
}

/// LSTM gate weights: per gate an input map (hidden x 2) with its
/// bias, and a recurrent map (hidden x hidden).
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub r_i: AffineParams,
    pub r_f: AffineParams,
    pub r_o: AffineParams,
    pub r_c: AffineParams,
    pub u_i: Array,
    pub u_f: Array,
    pub u_o: Array,
    pub u_c: Array,
}

/// Sensing head: hidden layers, then one head for the stacked RIS
/// vectors (2NK wide) and one for the BS vector (2M wide).
#[derive(Clone, Debug)]
pub struct SensingHeadParams {
    pub layers: Vec<AffineParams>,
    pub head_ris: AffineParams,
    pub head_bs: AffineParams,
}

/// Position head: affine chain ending in a linear 3-wide output.
#[derive(Clone, Debug)]
pub struct PositionHeadParams {
    pub layers: Vec<AffineParams>,
}

/// Every trainable array of the model.
#[derive(Clone, Debug)]
pub struct VqcParams {
    pub lstm: LstmParams,
    pub sensing: SensingHeadParams,
    pub position: PositionHeadParams,
    pub ris_codebook: Codebook,
    pub bs_codebook: Codebook,
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array {
    let bound = 1.0 / (cols as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Array::matrix(rows, cols, data).unwrap()
}

impl VqcParams {
    /// Fan-in uniform initialization for all affine maps, zero biases,
    /// codebooks from the complex-Gaussian initializer.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let h = cfg.hidden;
        let mut r_f = AffineParams::init(h, 2, rng);
        for b in r_f.b.data_mut() {
            *b = 1.0; // forget-gate bias favors carrying memory
        }
        let lstm = LstmParams {
            r_i: AffineParams::init(h, 2, rng),
            r_f,
            r_o: AffineParams::init(h, 2, rng),
            r_c: AffineParams::init(h, 2, rng),
            u_i: uniform_matrix(h, h, rng),
            u_f: uniform_matrix(h, h, rng),
            u_o: uniform_matrix(h, h, rng),
            u_c: uniform_matrix(h, h, rng),
        };

        let mut layers = Vec::with_capacity(cfg.dnn_depth);
        layers.push(AffineParams::init(cfg.dnn_width, h, rng));
        for _ in 1..cfg.dnn_depth {
            layers.push(AffineParams::init(cfg.dnn_width, cfg.dnn_width, rng));
        }
        let sensing = SensingHeadParams {
            layers,
            head_ris: AffineParams::init(2 * cfg.n * cfg.k, cfg.dnn_width, rng),
            head_bs: AffineParams::init(2 * cfg.m, cfg.dnn_width, rng),
        };

        let mut pos_layers = Vec::new();
        let mut in_dim = h;
        for &w in &cfg.pos_head_widths {
            pos_layers.push(AffineParams::init(w, in_dim, rng));
            in_dim = w;
        }
        if let Some(last) = pos_layers.last_mut() {
            for (i, b) in last.b.data_mut().iter_mut().enumerate() {
                *b = cfg.pos_bias_init[i] / cfg.pos_scale[i];
            }
        }
        let position = PositionHeadParams { layers: pos_layers };

        Self {
            lstm,
            sensing,
            position,
            ris_codebook: Codebook::init(cfg.n, cfg.v, rng),
            bs_codebook: Codebook::init(cfg.m, cfg.b, rng),
        }
    }

    /// All-zero weights (codebooks still unit-modulus via the zero-pair
    /// fallback). Used by tests and the untrained-baseline contract.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden;
        let zero_gate = || AffineParams::zeros(h, 2);
        let lstm = LstmParams {
            r_i: zero_gate(),
            r_f: zero_gate(),
            r_o: zero_gate(),
            r_c: zero_gate(),
            u_i: Array::zeros(vec![h, h]),
            u_f: Array::zeros(vec![h, h]),
            u_o: Array::zeros(vec![h, h]),
            u_c: Array::zeros(vec![h, h]),
        };
        let mut layers = Vec::with_capacity(cfg.dnn_depth);
        layers.push(AffineParams::zeros(cfg.dnn_width, h));
        for _ in 1..cfg.dnn_depth {
            layers.push(AffineParams::zeros(cfg.dnn_width, cfg.dnn_width));
        }
        let sensing = SensingHeadParams {
            layers,
            head_ris: AffineParams::zeros(2 * cfg.n * cfg.k, cfg.dnn_width),
            head_bs: AffineParams::zeros(2 * cfg.m, cfg.dnn_width),
        };
        let mut pos_layers = Vec::new();
        let mut in_dim = h;
        for &w in &cfg.pos_head_widths {
            pos_layers.push(AffineParams::zeros(w, in_dim));
            in_dim = w;
        }
        let mut ris_cb = Codebook::from_entries(Array::zeros(vec![2 * cfg.n, cfg.v]), true);
        ris_cb.project();
        let mut bs_cb = Codebook::from_entries(Array::zeros(vec![2 * cfg.m, cfg.b]), true);
        bs_cb.project();
        Self {
            lstm,
            sensing,
            position: PositionHeadParams { layers: pos_layers },
            ris_codebook: ris_cb,
            bs_codebook: bs_cb,
        }
    }

    /// Visit every parameter array in a fixed canonical order. The
    /// optimizer, the checkpoint format and the gradient collection all
    /// share this order.
    pub fn for_each(&self, f: &mut impl FnMut(&str, &Array)) {
        f("lstm.r_i.w", &self.lstm.r_i.w);
        f("lstm.r_i.b", &self.lstm.r_i.b);
        f("lstm.r_f.w", &self.lstm.r_f.w);
        f("lstm.r_f.b", &self.lstm.r_f.b);
        f("lstm.r_o.w", &self.lstm.r_o.w);
        f("lstm.r_o.b", &self.lstm.r_o.b);
        f("lstm.r_c.w", &self.lstm.r_c.w);
        f("lstm.r_c.b", &self.lstm.r_c.b);
        f("lstm.u_i", &self.lstm.u_i);
        f("lstm.u_f", &self.lstm.u_f);
        f("lstm.u_o", &self.lstm.u_o);
        f("lstm.u_c", &self.lstm.u_c);
        for (i, layer) in self.sensing.layers.iter().enumerate() {
            f(&format!("sensing.layer{i}.w"), &layer.w);
            f(&format!("sensing.layer{i}.b"), &layer.b);
        }
        f("sensing.head_ris.w", &self.sensing.head_ris.w);
        f("sensing.head_ris.b", &self.sensing.head_ris.b);
        f("sensing.head_bs.w", &self.sensing.head_bs.w);
        f("sensing.head_bs.b", &self.sensing.head_bs.b);
        for (i, layer) in self.position.layers.iter().enumerate() {
            f(&format!("position.layer{i}.w"), &layer.w);
            f(&format!("position.layer{i}.b"), &layer.b);
        }
        f("codebook.ris", self.ris_codebook.entries());
        f("codebook.bs", self.bs_codebook.entries());
    }

    pub fn for_each_mut(&mut self, f: &mut impl FnMut(&str, &mut Array)) {
        f("lstm.r_i.w", &mut self.lstm.r_i.w);
        f("lstm.r_i.b", &mut self.lstm.r_i.b);
        f("lstm.r_f.w", &mut self.lstm.r_f.w);
        f("lstm.r_f.b", &mut self.lstm.r_f.b);
        f("lstm.r_o.w", &mut self.lstm.r_o.w);
        f("lstm.r_o.b", &mut self.lstm.r_o.b);
        f("lstm.r_c.w", &mut self.lstm.r_c.w);
        f("lstm.r_c.b", &mut self.lstm.r_c.b);
        f("lstm.u_i", &mut self.lstm.u_i);
        f("lstm.u_f", &mut self.lstm.u_f);
        f("lstm.u_o", &mut self.lstm.u_o);
        f("lstm.u_c", &mut self.lstm.u_c);
        for (i, layer) in self.sensing.layers.iter_mut().enumerate() {
            f(&format!("sensing.layer{i}.w"), &mut layer.w);
            f(&format!("sensing.layer{i}.b"), &mut layer.b);
        }
        f("sensing.head_ris.w", &mut self.sensing.head_ris.w);
        f("sensing.head_ris.b", &mut self.sensing.head_ris.b);
        f("sensing.head_bs.w", &mut self.sensing.head_bs.w);
        f("sensing.head_bs.b", &mut self.sensing.head_bs.b);
        for (i, layer) in self.position.layers.iter_mut().enumerate() {
            f(&format!("position.layer{i}.w"), &mut layer.w);
            f(&format!("position.layer{i}.b"), &mut layer.b);
        }
        f("codebook.ris", self.ris_codebook.entries_mut());
        f("codebook.bs", self.bs_codebook.entries_mut());
    }

    /// Parameter count across all arrays.
    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, a| n += a.numel());
        n
    }
}

/// Tape handles for one forward pass worth of parameters.
pub struct TapeModel {
    pub lstm: TapeLstm,
    pub sensing_layers: Vec<TapeAffine>,
    pub head_ris: TapeAffine,
    pub head_bs: TapeAffine,
    pub position_layers: Vec<TapeAffine>,
    /// Codebook leaves; `None` runs the codebook-free mode where the
    /// normalized sensing vectors drive the measurement directly.
    pub ris_cb: Option<Node>,
    pub bs_cb: Option<Node>,
}

pub struct TapeAffine {
    pub w: Node,
    pub b: Node,
}

pub struct TapeLstm {
    pub r_i: TapeAffine,
    pub r_f: TapeAffine,
    pub r_o: TapeAffine,
    pub r_c: TapeAffine,
    pub u_i: Node,
    pub u_f: Node,
    pub u_o: Node,
    pub u_c: Node,
}

impl TapeModel {
    /// Insert every parameter as a leaf. With `with_codebooks` false
    /// the codebooks never reach the tape at all.
    pub fn insert(
        tape: &mut Tape,
        params: &VqcParams,
        trainable: bool,
        with_codebooks: bool,
    ) -> Self {
        let leaf = |tape: &mut Tape, a: &Array| tape.leaf(a.clone(), trainable);
        let lstm = TapeLstm {
            r_i: TapeAffine {
                w: leaf(tape, &params.lstm.r_i.w),
                b: leaf(tape, &params.lstm.r_i.b),
            },
            r_f: TapeAffine {
                w: leaf(tape, &params.lstm.r_f.w),
                b: leaf(tape, &params.lstm.r_f.b),
            },
            r_o: TapeAffine {
                w: leaf(tape, &params.lstm.r_o.w),
                b: leaf(tape, &params.lstm.r_o.b),
            },
            r_c: TapeAffine {
                w: leaf(tape, &params.lstm.r_c.w),
                b: leaf(tape, &params.lstm.r_c.b),
            },
            u_i: leaf(tape, &params.lstm.u_i),
            u_f: leaf(tape, &params.lstm.u_f),
            u_o: leaf(tape, &params.lstm.u_o),
            u_c: leaf(tape, &params.lstm.u_c),
        };
        let sensing_layers = params
            .sensing
            .layers
            .iter()
            .map(|l| TapeAffine {
                w: leaf(tape, &l.w),
                b: leaf(tape, &l.b),
            })
            .collect();
        let head_ris = TapeAffine {
            w: leaf(tape, &params.sensing.head_ris.w),
            b: leaf(tape, &params.sensing.head_ris.b),
        };
        let head_bs = TapeAffine {
            w: leaf(tape, &params.sensing.head_bs.w),
            b: leaf(tape, &params.sensing.head_bs.b),
        };
        let position_layers = params
            .position
            .layers
            .iter()
            .map(|l| TapeAffine {
                w: leaf(tape, &l.w),
                b: leaf(tape, &l.b),
            })
            .collect();
        let (ris_cb, bs_cb) = if with_codebooks {
            (
                Some(params.ris_codebook.to_tape(tape)),
                Some(params.bs_codebook.to_tape(tape)),
            )
        } else {
            (None, None)
        };
        Self {
            lstm,
            sensing_layers,
            head_ris,
            head_bs,
            position_layers,
            ris_cb,
            bs_cb,
        }
    }

    /// Visit parameter nodes in the canonical [`VqcParams::for_each`]
    /// order; codebook nodes are visited only when present.
    pub fn for_each_node(&self, f: &mut impl FnMut(&str, Node)) {
        f("lstm.r_i.w", self.lstm.r_i.w);
        f("lstm.r_i.b", self.lstm.r_i.b);
        f("lstm.r_f.w", self.lstm.r_f.w);
        f("lstm.r_f.b", self.lstm.r_f.b);
        f("lstm.r_o.w", self.lstm.r_o.w);
        f("lstm.r_o.b", self.lstm.r_o.b);
        f("lstm.r_c.w", self.lstm.r_c.w);
        f("lstm.r_c.b", self.lstm.r_c.b);
        f("lstm.u_i", self.lstm.u_i);
        f("lstm.u_f", self.lstm.u_f);
        f("lstm.u_o", self.lstm.u_o);
        f("lstm.u_c", self.lstm.u_c);
        for (i, layer) in self.sensing_layers.iter().enumerate() {
            f(&format!("sensing.layer{i}.w"), layer.w);
            f(&format!("sensing.layer{i}.b"), layer.b);
        }
        f("sensing.head_ris.w", self.head_ris.w);
        f("sensing.head_ris.b", self.head_ris.b);
        f("sensing.head_bs.w", self.head_bs.w);
        f("sensing.head_bs.b", self.head_bs.b);
        for (i, layer) in self.position_layers.iter().enumerate() {
            f(&format!("position.layer{i}.w"), layer.w);
            f(&format!("position.layer{i}.b"), layer.b);
        }
        if let Some(cb) = self.ris_cb {
            f("codebook.ris", cb);
        }
        if let Some(cb) = self.bs_cb {
            f("codebook.bs", cb);
        }
    }
}

/// Standard LSTM gate update:
/// i,f,o = sigmoid(r pi + u s_prev + b), g = tanh(r_c pi + u_c s_prev + b_c),
/// c = f*c_prev + i*g, s = o*tanh(c).
pub fn lstm_step(
    tape: &mut Tape,
    p: &TapeLstm,
    pi: Node,
    c_prev: Node,
    s_prev: Node,
) -> Result<(Node, Node), AdError> {
    let gate = |tape: &mut Tape, r: &TapeAffine, u: Node| -> Result<Node, AdError> {
        let rx = tape.matvec(r.w, pi)?;
        let us = tape.matvec(u, s_prev)?;
        let sum = tape.add(rx, us)?;
        tape.add(sum, r.b)
    };
    let i_pre = gate(tape, &p.r_i, p.u_i)?;
    let i = tape.sigmoid(i_pre);
    let f_pre = gate(tape, &p.r_f, p.u_f)?;
    let f = tape.sigmoid(f_pre);
    let o_pre = gate(tape, &p.r_o, p.u_o)?;
    let o = tape.sigmoid(o_pre);
    let g_pre = gate(tape, &p.r_c, p.u_c)?;
    let g = tape.tanh(g_pre);

    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let s = tape.mul(o, tc)?;
    Ok((c, s))
}

/// Sensing head: hidden rectifier layers, two affine heads, pair-wise
/// unit-modulus normalization, RIS output split into K vectors of 2N.
pub fn design_sensing(
    tape: &mut Tape,
    model: &TapeModel,
    s: Node,
    cfg: &ModelConfig,
) -> Result<(Node, Vec<Node>), AdError> {
    let mut h = s;
    for layer in &model.sensing_layers {
        let pre = affine(tape, layer.w, h, layer.b)?;
        h = tape.relu(pre);
    }
    let raw_ris = affine(tape, model.head_ris.w, h, model.head_ris.b)?;
    let raw_bs = affine(tape, model.head_bs.w, h, model.head_bs.b)?;

    let w_tilde = tape.unit_modulus(raw_bs)?;
    let mut thetas = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let block = tape.slice(raw_ris, 2 * cfg.n * k, 2 * cfg.n * (k + 1))?;
        thetas.push(tape.unit_modulus(block)?);
    }
    Ok((w_tilde, thetas))
}

/// Position head on the final cell state: rectifier hidden layers, a
/// linear 3-wide output in normalized units, then the fixed de-
/// normalization scale (meters).
pub fn estimate_position(
    tape: &mut Tape,
    model: &TapeModel,
    c_final: Node,
    cfg: &ModelConfig,
) -> Result<Node, AdError> {
    let mut h = c_final;
    let last = model.position_layers.len() - 1;
    for (i, layer) in model.position_layers.iter().enumerate() {
        h = affine(tape, layer.w, h, layer.b)?;
        if i < last {
            h = tape.relu(h);
        }
    }
    let scale = tape.constant(Array::vector(&cfg.pos_scale));
    tape.mul(h, scale)
}

/// Channel constants inserted on the tape for one episode.
pub struct ChannelNodes {
    pub hd_re: Node,
    pub hd_im: Node,
    /// Transposed cascade channels H_ck^T as (M x N) constants.
    pub hct_re: Vec<Node>,
    pub hct_im: Vec<Node>,
}

pub fn channel_nodes(tape: &mut Tape, ch: &ChannelRealization) -> Result<ChannelNodes, Error> {
    let m = ch.h_d.len();
    let hd_re: Vec<f64> = ch.h_d.iter().map(|v| v.re).collect();
    let hd_im: Vec<f64> = ch.h_d.iter().map(|v| v.im).collect();
    let hd_re = tape.constant(Array::vector(&hd_re));
    let hd_im = tape.constant(Array::vector(&hd_im));
    let mut hct_re = Vec::with_capacity(ch.h_r.len());
    let mut hct_im = Vec::with_capacity(ch.h_r.len());
    for k in 0..ch.h_r.len() {
        let hc = cascade_channel(&ch.h_r[k], &ch.g_r[k])?;
        let n = hc.nrows();
        let mut re = vec![0.0; m * n];
        let mut im = vec![0.0; m * n];
        for j in 0..m {
            for i in 0..n {
                re[j * n + i] = hc[(i, j)].re;
                im[j * n + i] = hc[(i, j)].im;
            }
        }
        hct_re.push(tape.constant(Array::matrix(m, n, re).unwrap()));
        hct_im.push(tape.constant(Array::matrix(m, n, im).unwrap()));
    }
    Ok(ChannelNodes {
        hd_re,
        hd_im,
        hct_re,
        hct_im,
    })
}

/// The pilot measurement on the tape:
/// y = sqrt(P_u) w^T (h_d + sum_k H_ck^T theta_k) x + noise,
/// with w and theta_k as stacked [re; im] nodes. Returns (Re y, Im y).
pub fn measure_on_tape(
    tape: &mut Tape,
    chn: &ChannelNodes,
    w: Node,
    thetas: &[Node],
    cfg: &PilotConfig,
    noise: Complex64,
) -> Result<(Node, Node), AdError> {
    if thetas.len() != chn.hct_re.len() {
        return Err(AdError::Shape(format!(
            "{} RIS codewords supplied for {} RISs",
            thetas.len(),
            chn.hct_re.len()
        )));
    }
    let m = tape.value(chn.hd_re).numel();
    let mut v_re = chn.hd_re;
    let mut v_im = chn.hd_im;
    for k in 0..thetas.len() {
        let n2 = tape.value(thetas[k]).numel();
        let n = n2 / 2;
        let th_re = tape.slice(thetas[k], 0, n)?;
        let th_im = tape.slice(thetas[k], n, 2 * n)?;
        // (P + jQ)(a + jb) = (Pa - Qb) + j(Pb + Qa)
        let pa = tape.matvec(chn.hct_re[k], th_re)?;
        let qb = tape.matvec(chn.hct_im[k], th_im)?;
        let re_part = tape.sub(pa, qb)?;
        let pb = tape.matvec(chn.hct_re[k], th_im)?;
        let qa = tape.matvec(chn.hct_im[k], th_re)?;
        let im_part = tape.add(pb, qa)?;
        v_re = tape.add(v_re, re_part)?;
        v_im = tape.add(v_im, im_part)?;
    }

    let w_re = tape.slice(w, 0, m)?;
    let w_im = tape.slice(w, m, 2 * m)?;
    let rr = tape.mul(w_re, v_re)?;
    let rr = tape.sum(rr);
    let ii = tape.mul(w_im, v_im)?;
    let ii = tape.sum(ii);
    let ri = tape.mul(w_re, v_im)?;
    let ri = tape.sum(ri);
    let ir = tape.mul(w_im, v_re)?;
    let ir = tape.sum(ir);
    let dot_re = tape.sub(rr, ii)?;
    let dot_im = tape.add(ri, ir)?;

    let scale = cfg.pilot() * cfg.p_u.sqrt();
    let a = tape.scale(dot_re, scale.re);
    let b = tape.scale(dot_im, scale.im);
    let c = tape.scale(dot_re, scale.im);
    let d = tape.scale(dot_im, scale.re);
    let sig_re = tape.sub(a, b)?;
    let sig_im = tape.add(c, d)?;
    let n_re = tape.scalar(noise.re);
    let n_im = tape.scalar(noise.im);
    let y_re = tape.add(sig_re, n_re)?;
    let y_im = tape.add(sig_im, n_im)?;
    Ok((y_re, y_im))
}

/// Everything one episode produced, both as plain values and as the
/// tape nodes the loss is assembled from.
pub struct EpisodeTrace {
    /// Received pilots y^(t), t = 0..T-1.
    pub measurements: Vec<Complex64>,
    /// Scaled [Re y, Im y] features fed to the LSTM.
    pub features: Vec<[f64; 2]>,
    /// Hidden states s^(t).
    pub hidden_states: Vec<Vec<f64>>,
    /// Cell states c^(t).
    pub cell_states: Vec<Vec<f64>>,
    /// Codeword selections, design steps 0..=T. Step 0 is the fixed
    /// pre-measurement selection; step t+1 was designed after frame t.
    /// Empty in codebook-free mode.
    pub selections: Vec<SelectionRecord>,
    /// Pre-quantized RIS vectors per design step: (step, k) -> 2N reals.
    pub pre_q_ris: Vec<Vec<Vec<f64>>>,
    /// Pre-quantized BS vectors per design step -> 2M reals.
    pub pre_q_bs: Vec<Vec<f64>>,
    /// Position estimate.
    pub estimate: Position,

    pub estimate_node: Node,
    /// Per design step 1..=T: alpha = codeword + weight * commitment.
    pub alpha_nodes: Vec<Node>,
    /// Per design step 1..=T and RIS k.
    pub beta_nodes: Vec<Vec<Node>>,
    /// Plain values of the alpha and beta terms for metrics.
    pub alpha_values: Vec<f64>,
    pub beta_values: Vec<Vec<f64>>,
    /// Sensing vectors actually used for the measurement at each frame
    /// (quantized, or normalized pre-quantized in codebook-free mode).
    pub used_w: Vec<Node>,
    pub used_thetas: Vec<Vec<Node>>,
}

impl EpisodeTrace {
    pub fn alpha_total(&self) -> f64 {
        self.alpha_values.iter().sum()
    }

    pub fn beta_total(&self) -> f64 {
        self.beta_values.iter().flatten().sum()
    }

    /// Codeword indices that drove the measurement at frame t.
    pub fn used_selection(&self, t: usize) -> Option<&SelectionRecord> {
        self.selections.get(t)
    }
}

/// One design-and-quantize step; returns the vectors to use for the
/// next measurement plus loss terms when quantizing.
#[allow(clippy::too_many_arguments)]
fn design_step(
    tape: &mut Tape,
    model: &TapeModel,
    s: Node,
    cfg: &ModelConfig,
    commitment_weight: f64,
    frame: usize,
    trace_losses: bool,
    trace: &mut EpisodeTrace,
) -> Result<(Node, Vec<Node>), Error> {
    let (w_tilde, thetas_tilde) = design_sensing(tape, model, s, cfg)?;

    trace.pre_q_bs.push(tape.value(w_tilde).data().to_vec());
    trace.pre_q_ris.push(
        thetas_tilde
            .iter()
            .map(|&n| tape.value(n).data().to_vec())
            .collect(),
    );

    match (model.bs_cb, model.ris_cb) {
        (Some(bs_cb), Some(ris_cb)) => {
            let w_out = straight_through_select(tape, w_tilde, bs_cb)?;
            let mut ris_indices = Vec::with_capacity(cfg.k);
            let mut thetas = Vec::with_capacity(cfg.k);
            let mut beta_nodes = Vec::with_capacity(cfg.k);
            let mut beta_values = Vec::with_capacity(cfg.k);
            for &theta_tilde in &thetas_tilde {
                let out = straight_through_select(tape, theta_tilde, ris_cb)?;
                ris_indices.push(out.index);
                thetas.push(out.selected);
                if trace_losses {
                    let commit = tape.scale(out.commitment_loss, commitment_weight);
                    let beta = tape.add(out.codeword_loss, commit)?;
                    beta_values.push(tape.value(beta).item());
                    beta_nodes.push(beta);
                }
            }
            trace.selections.push(SelectionRecord {
                ris_indices,
                bs_index: w_out.index,
                frame,
            });
            if trace_losses {
                let commit = tape.scale(w_out.commitment_loss, commitment_weight);
                let alpha = tape.add(w_out.codeword_loss, commit)?;
                trace.alpha_values.push(tape.value(alpha).item());
                trace.alpha_nodes.push(alpha);
                trace.beta_values.push(beta_values);
                trace.beta_nodes.push(beta_nodes);
            }
            Ok((w_out.selected, thetas))
        }
        _ => Ok((w_tilde, thetas_tilde)),
    }
}

/// Run one full episode on the tape. The noise sequence must hold T
/// draws; gradients flow through every measurement into the weights
/// and codewords that produced earlier frames.
pub fn run_episode(
    tape: &mut Tape,
    model: &TapeModel,
    cfg: &ModelConfig,
    pilot: &PilotConfig,
    ch: &ChannelRealization,
    noise: &[Complex64],
    commitment_weight: f64,
) -> Result<EpisodeTrace, Error> {
    if noise.len() != cfg.t {
        return Err(Error::Config(format!(
            "noise sequence has {} draws, episode needs {}",
            noise.len(),
            cfg.t
        )));
    }
    let chn = channel_nodes(tape, ch)?;

    let zero_state = tape.constant(Array::zeros(vec![cfg.hidden]));
    let mut trace = EpisodeTrace {
        measurements: Vec::with_capacity(cfg.t),
        features: Vec::with_capacity(cfg.t),
        hidden_states: Vec::with_capacity(cfg.t),
        cell_states: Vec::with_capacity(cfg.t),
        selections: Vec::with_capacity(cfg.t + 1),
        pre_q_ris: Vec::with_capacity(cfg.t + 1),
        pre_q_bs: Vec::with_capacity(cfg.t + 1),
        estimate: Position::new(0.0, 0.0, 0.0),
        estimate_node: zero_state,
        alpha_nodes: Vec::with_capacity(cfg.t),
        beta_nodes: Vec::with_capacity(cfg.t),
        alpha_values: Vec::with_capacity(cfg.t),
        beta_values: Vec::with_capacity(cfg.t),
        used_w: Vec::with_capacity(cfg.t),
        used_thetas: Vec::with_capacity(cfg.t),
    };

    // Initial design from the zero state; it selects the same
    // codewords in every episode and carries no quantizer loss.
    let (mut w_sel, mut thetas_sel) = design_step(
        tape,
        model,
        zero_state,
        cfg,
        commitment_weight,
        0,
        false,
        &mut trace,
    )?;

    let mut c_prev = zero_state;
    let mut s_prev = zero_state;

    for t in 0..cfg.t {
        trace.used_w.push(w_sel);
        trace.used_thetas.push(thetas_sel.clone());
        let (y_re, y_im) = measure_on_tape(tape, &chn, w_sel, &thetas_sel, pilot, noise[t])?;
        trace
            .measurements
            .push(Complex64::new(tape.value(y_re).item(), tape.value(y_im).item()));

        let pi_raw = tape.concat(&[y_re, y_im])?;
        let pi = tape.scale(pi_raw, cfg.feature_scale);
        let fv = tape.value(pi);
        trace.features.push([fv.data()[0], fv.data()[1]]);

        let (c, s) = lstm_step(tape, &model.lstm, pi, c_prev, s_prev)?;
        trace.cell_states.push(tape.value(c).data().to_vec());
        trace.hidden_states.push(tape.value(s).data().to_vec());

        let (w_next, thetas_next) = design_step(
            tape,
            model,
            s,
            cfg,
            commitment_weight,
            t + 1,
            true,
            &mut trace,
        )?;
        w_sel = w_next;
        thetas_sel = thetas_next;
        c_prev = c;
        s_prev = s;
    }

    let p_hat = estimate_position(tape, model, c_prev, cfg)?;
    let est = tape.value(p_hat);
    trace.estimate = Position::new(est.data()[0], est.data()[1], est.data()[2]);
    trace.estimate_node = p_hat;
    Ok(trace)
}

/// Mean over the batch of
/// ||p_hat - p||^2 + sum_t alpha^(t+1) + sum_{k,t} beta_k^(t+1).
pub fn composite_loss(
    tape: &mut Tape,
    traces: &[EpisodeTrace],
    true_positions: &[Position],
) -> Result<Node, Error> {
    if traces.len() != true_positions.len() {
        return Err(Error::Config(format!(
            "{} traces but {} positions",
            traces.len(),
            true_positions.len()
        )));
    }
    if traces.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut totals = Vec::with_capacity(traces.len());
    for (trace, p) in traces.iter().zip(true_positions) {
        let target = tape.constant(Array::vector(&[p.x, p.y, p.z]));
        let diff = tape.sub(trace.estimate_node, target)?;
        let mut total = sum_sq(tape, diff);
        for &a in &trace.alpha_nodes {
            total = tape.add(total, a)?;
        }
        for betas in &trace.beta_nodes {
            for &b in betas {
                total = tape.add(total, b)?;
            }
        }
        totals.push(total);
    }
    let stacked = tape.concat(&totals)?;
    Ok(tape.mean(stacked))
}

/// Squared position error of one trace against the truth.
pub fn squared_error(trace: &EpisodeTrace, p: &Position) -> f64 {
    let dx = trace.estimate.x - p.x;
    let dy = trace.estimate.y - p.y;
    let dz = trace.estimate.z - p.z;
    dx * dx + dy * dy + dz * dz
}
