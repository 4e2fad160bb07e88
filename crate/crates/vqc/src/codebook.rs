//! Trainable unit-modulus codebooks: initialization, projection,
//! nearest-neighbor quantization and the straight-through selection
//! used during training.
//!
//! A codebook stores W codewords as columns of a real 2E x W matrix,
//! rows stacked as [real parts; imaginary parts].

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{normalize_pairs, sum_sq, Array, Node, Tape};
use crate::error::AdError;

/// A matrix of unit-modulus codewords.
#[derive(Clone, Debug)]
pub struct Codebook {
    entries: Array,
    pub trainable: bool,
}

/// Codeword indices drawn at one time frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionRecord {
    /// One RIS codebook index per surface.
    pub ris_indices: Vec<usize>,
    pub bs_index: usize,
    /// Design step: 0 for the pre-measurement selection, t+1 for the
    /// selection made after frame t.
    pub frame: usize,
}

/// Result of quantizing one pre-quantized sensing vector.
pub struct QuantizeOutcome {
    pub index: usize,
    /// Forward value is the selected codeword bit-exactly; backward
    /// copies the incoming gradient onto the pre-quantized vector.
    pub selected: Node,
    /// ||SG(pre_q) - codeword||^2; gradient reaches only the selected
    /// codebook column.
    pub codeword_loss: Node,
    /// ||pre_q - SG(codeword)||^2; gradient reaches only the
    /// pre-quantized vector.
    pub commitment_loss: Node,
}

impl Codebook {
    /// Codewords drawn element-wise from a complex Gaussian with
    /// variance 2*pi, then projected to unit modulus.
    pub fn init<R: Rng>(e: usize, w: usize, rng: &mut R) -> Self {
        assert!(e >= 1 && w >= 1, "codebook dimensions must be positive");
        let std = (std::f64::consts::PI).sqrt(); // per-component variance pi
        let normal = Normal::new(0.0, std).unwrap();
        let mut data = vec![0.0; 2 * e * w];
        for j in 0..w {
            for i in 0..e {
                data[i * w + j] = normal.sample(rng);
                data[(e + i) * w + j] = normal.sample(rng);
            }
        }
        let mut cb = Self {
            entries: Array::matrix(2 * e, w, data).unwrap(),
            trainable: true,
        };
        cb.project();
        cb
    }

    pub fn from_entries(entries: Array, trainable: bool) -> Self {
        assert_eq!(entries.shape().len(), 2);
        assert_eq!(entries.rows() % 2, 0);
        Self { entries, trainable }
    }

    /// Number of complex elements per codeword (E).
    pub fn elements(&self) -> usize {
        self.entries.rows() / 2
    }

    /// Number of codewords (W).
    pub fn width(&self) -> usize {
        self.entries.cols()
    }

    pub fn entries(&self) -> &Array {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Array {
        &mut self.entries
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.entries.rows()).map(|i| self.entries.at(i, j)).collect()
    }

    /// Re-normalize every codeword to unit modulus. Idempotent.
    pub fn project(&mut self) {
        let rows = self.entries.rows();
        for j in 0..self.entries.cols() {
            let col: Vec<f64> = (0..rows).map(|i| self.entries.at(i, j)).collect();
            let normed = normalize_pairs(&col);
            for i in 0..rows {
                *self.entries.at_mut(i, j) = normed[i];
            }
        }
    }

    /// Largest deviation of any codeword element from unit modulus.
    pub fn max_modulus_error(&self) -> f64 {
        let e = self.elements();
        let mut worst: f64 = 0.0;
        for j in 0..self.width() {
            for i in 0..e {
                let (re, im) = (self.entries.at(i, j), self.entries.at(e + i, j));
                worst = worst.max(((re * re + im * im).sqrt() - 1.0).abs());
            }
        }
        worst
    }

    /// Index and copy of the codeword closest to `query` in squared
    /// Euclidean distance; ties break to the smallest index.
    pub fn nearest(&self, query: &[f64]) -> (usize, Vec<f64>) {
        let j = nearest_in(&self.entries, query);
        (j, self.column(j))
    }

    /// Insert the codebook matrix as a tape leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> Node {
        tape.leaf(self.entries.clone(), self.trainable)
    }

    /// One codeword per CSV column, 2E rows of real values.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for i in 0..self.entries.rows() {
            let row: Vec<String> = (0..self.width())
                .map(|j| format!("{}", self.entries.at(i, j)))
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Element-wise unit-modulus normalization of a stacked [re; im]
/// vector (the plain-array twin of the tape op).
pub fn normalize_unit_modulus(v: &[f64]) -> Vec<f64> {
    normalize_pairs(v)
}

/// Smallest-index argmin over codebook columns by squared Euclidean
/// distance.
pub(crate) fn nearest_in(entries: &Array, query: &[f64]) -> usize {
    assert_eq!(
        query.len(),
        entries.rows(),
        "query length does not match codeword length"
    );
    let rows = entries.rows();
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for j in 0..entries.cols() {
        let mut d = 0.0;
        for i in 0..rows {
            let diff = query[i] - entries.at(i, j);
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Quantize `pre_q` against the codebook leaf `cb_node`, with a
/// straight-through gradient path. The argmin runs over the leaf's
/// recorded values, so the selected column is bit-identical to the
/// codeword the forward pass uses.
pub fn straight_through_select(
    tape: &mut Tape,
    pre_q: Node,
    cb_node: Node,
) -> Result<QuantizeOutcome, AdError> {
    let index = {
        let entries = tape.value(cb_node);
        nearest_in(entries, tape.value(pre_q).data())
    };
    let codeword = tape.col(cb_node, index)?;
    let selected = tape.straight_through(pre_q, codeword)?;

    let sg_pre = tape.stop_gradient(pre_q);
    let diff_cw = tape.sub(sg_pre, codeword)?;
    let codeword_loss = sum_sq(tape, diff_cw);

    let sg_cw = tape.stop_gradient(codeword);
    let diff_commit = tape.sub(pre_q, sg_cw)?;
    let commitment_loss = sum_sq(tape, diff_commit);

    Ok(QuantizeOutcome {
        index,
        selected,
        codeword_loss,
        commitment_loss,
    })
}
