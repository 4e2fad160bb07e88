//! Minimal reverse-mode automatic differentiation over dense real
//! arrays, with the stop-gradient and straight-through primitives the
//! quantized-selection training relies on.

mod array;
mod tape;

pub use array::Array;
pub use tape::{normalize_pairs, Node, Tape, UNIT_MODULUS_EPS};

/// Affine map `W x + b` on the tape.
pub fn affine(
    tape: &mut Tape,
    w: Node,
    x: Node,
    b: Node,
) -> Result<Node, crate::error::AdError> {
    let wx = tape.matvec(w, x)?;
    tape.add(wx, b)
}

/// Squared Euclidean norm of a vector node.
pub fn sum_sq(tape: &mut Tape, v: Node) -> Node {
    let sq = tape.square(v);
    tape.sum(sq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_values_and_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(Array::vector(&[1.0, 2.0]), true);
        let b = t.leaf(Array::vector(&[3.0, 4.0]), true);
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);
        let s = t.sum(c);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).data(), &[1.0, 1.0]);
        assert_eq!(t.grad(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(3.0), true);
        let y = t.square(x);
        assert_eq!(t.value(y).item(), 9.0);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).item(), 6.0);
    }

    #[test]
    fn incompatible_shapes_error() {
        let mut t = Tape::new();
        let a = t.leaf(Array::vector(&[1.0, 2.0]), true);
        let b = t.leaf(Array::vector(&[1.0, 2.0, 3.0]), true);
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn sqrt_of_negative_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Array::vector(&[4.0, -1.0]), true);
        assert!(t.sqrt(a).is_err());
    }

    #[test]
    fn scalar_broadcast_folds_gradient() {
        let mut t = Tape::new();
        let s = t.leaf(Array::scalar(2.0), true);
        let v = t.leaf(Array::vector(&[1.0, 2.0, 3.0]), true);
        let p = t.mul(s, v).unwrap();
        assert_eq!(t.value(p).data(), &[2.0, 4.0, 6.0]);
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert_eq!(t.grad(s).item(), 6.0);
        assert_eq!(t.grad(v).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_known_product() {
        let mut t = Tape::new();
        let a = t.leaf(Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let b = t.leaf(Array::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap(), true);
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let eye = t.constant(Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = t.leaf(Array::matrix(2, 1, vec![5.0, -3.0]).unwrap(), true);
        let out = t.matmul(eye, v).unwrap();
        assert_eq!(t.value(out).data(), &[5.0, -3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Array::matrix(2, 3, vec![0.0; 6]).unwrap(), true);
        let b = t.leaf(Array::matrix(2, 2, vec![0.0; 4]).unwrap(), true);
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn activations_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(0.0), true);
        let th = t.tanh(x);
        assert_eq!(t.value(th).item(), 0.0);
        t.backward(th).unwrap();
        assert_eq!(t.grad(x).item(), 1.0);

        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(0.0), true);
        let sg = t.sigmoid(x);
        assert_eq!(t.value(sg).item(), 0.5);
        t.backward(sg).unwrap();
        assert_eq!(t.grad(x).item(), 0.25);
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let v = t.leaf(Array::vector(&[1.0, 1.0, 1.0, 1.0]), true);
        let s = t.sum(v);
        assert_eq!(t.value(s).item(), 4.0);
        t.backward(s).unwrap();
        assert_eq!(t.grad(v).data(), &[1.0, 1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let v = t.leaf(Array::vector(&[2.0, 4.0]), true);
        let m = t.mean(v);
        assert_eq!(t.value(m).item(), 3.0);
        t.backward(m).unwrap();
        assert_eq!(t.grad(v).data(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_then_slices_invert() {
        let mut t = Tape::new();
        let a = t.leaf(Array::vector(&[1.0, 2.0]), true);
        let b = t.leaf(Array::vector(&[3.0, 4.0, 5.0]), true);
        let c = t.concat(&[a, b]).unwrap();
        let sa = t.slice(c, 0, 2).unwrap();
        let sb = t.slice(c, 2, 5).unwrap();
        assert_eq!(t.value(sa).data(), t.value(a).data());
        assert_eq!(t.value(sb).data(), t.value(b).data());
    }

    #[test]
    fn slice_out_of_range_errors() {
        let mut t = Tape::new();
        let a = t.leaf(Array::vector(&[1.0, 2.0]), true);
        assert!(t.slice(a, 0, 3).is_err());
    }

    #[test]
    fn stop_gradient_is_identity_forward_zero_backward() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(&[1.0, 2.0, 3.0]), true);
        let sg = t.stop_gradient(x);
        assert_eq!(t.value(sg).data(), &[1.0, 2.0, 3.0]);
        let l = t.sum(sg);
        t.backward(l).unwrap();
        let g = t.grad(x);
        assert!(g.data().iter().all(|&v| v.to_bits() == 0.0f64.to_bits()));
    }

    #[test]
    fn straight_through_identity_gradient() {
        // L = sum(x - SG(x)) has value 0 and gradient ones.
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(&[1.0, -2.0, 0.5]), true);
        let sg = t.stop_gradient(x);
        let d = t.sub(x, sg).unwrap();
        let l = t.sum(d);
        assert_eq!(t.value(l).item(), 0.0);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(&[1.0, 2.0]), true);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn backward_accumulates_without_reset() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(2.0), true);
        let y = t.square(x);
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).item(), 8.0);
        t.zero_grad();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).item(), 4.0);
    }

    #[test]
    fn chain_square_sum() {
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(&[1.0, 2.0]), true);
        let sq = t.square(x);
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn unit_modulus_values_and_fallback() {
        let mut t = Tape::new();
        // pairs: (3,4) -> (0.6, 0.8); (0,0) -> (1,0)
        let v = t.leaf(Array::vector(&[3.0, 0.0, 4.0, 0.0]), true);
        let n = t.unit_modulus(v).unwrap();
        assert_eq!(t.value(n).data(), &[0.6, 1.0, 0.8, 0.0]);
    }

    #[test]
    fn gradient_accumulation_order_independent() {
        // Permuting sibling branches yields identical gradients.
        let build = |swap: bool| {
            let mut t = Tape::new();
            let x = t.leaf(Array::vector(&[0.3, -0.7, 1.1]), true);
            let a = t.square(x);
            let a = t.sum(a);
            let b = t.tanh(x);
            let b = t.sum(b);
            let l = if swap {
                t.add(b, a).unwrap()
            } else {
                t.add(a, b).unwrap()
            };
            t.backward(l).unwrap();
            t.grad(x).data().to_vec()
        };
        let g1 = build(false);
        let g2 = build(true);
        for (a, b) in g1.iter().zip(g2.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    /// Central finite differences through a composite expression.
    #[test]
    fn composite_matches_finite_differences() {
        let f = |vals: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(Array::vector(vals), false);
            let sq = t.square(x);
            let c = t.scalar(0.5);
            let scaled = t.mul(sq, c).unwrap();
            let th = t.tanh(scaled);
            let sg = t.sigmoid(x);
            let prod = t.mul(th, sg).unwrap();
            let s = t.sum(prod);
            let r = t.sqrt(s).unwrap();
            t.value(r).item()
        };

        let vals = [0.4, 1.3, -0.2, 0.9];
        let mut t = Tape::new();
        let x = t.leaf(Array::vector(&vals), true);
        let sq = t.square(x);
        let c = t.scalar(0.5);
        let scaled = t.mul(sq, c).unwrap();
        let th = t.tanh(scaled);
        let sg = t.sigmoid(x);
        let prod = t.mul(th, sg).unwrap();
        let s = t.sum(prod);
        let r = t.sqrt(s).unwrap();
        t.backward(r).unwrap();
        let grad = t.grad(x);

        let h = 1e-5;
        for i in 0..vals.len() {
            let mut plus = vals;
            plus[i] += h;
            let mut minus = vals;
            minus[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let ad = grad.data()[i];
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-9);
            assert!(rel < 1e-6, "coord {i}: fd {fd} vs ad {ad}");
        }
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let a0 = [0.3, -1.2, 0.7, 0.5, 2.0, -0.4, 1.1, 0.2, -0.9, 0.6, 1.5, -0.3];
        let b0 = [0.8, -0.5, 1.3, 0.4, -1.1, 0.9, 0.2, -0.7];
        let f = |av: &[f64], bv: &[f64]| -> f64 {
            let mut t = Tape::new();
            let a = t.leaf(Array::matrix(3, 4, av.to_vec()).unwrap(), false);
            let b = t.leaf(Array::matrix(4, 2, bv.to_vec()).unwrap(), false);
            let c = t.matmul(a, b).unwrap();
            let sq = t.square(c);
            let s = t.sum(sq);
            t.value(s).item()
        };

        let mut t = Tape::new();
        let a = t.leaf(Array::matrix(3, 4, a0.to_vec()).unwrap(), true);
        let b = t.leaf(Array::matrix(4, 2, b0.to_vec()).unwrap(), true);
        let c = t.matmul(a, b).unwrap();
        let sq = t.square(c);
        let s = t.sum(sq);
        t.backward(s).unwrap();
        let (ga, gb) = (t.grad(a), t.grad(b));

        let h = 1e-5;
        for i in 0..a0.len() {
            let mut plus = a0;
            plus[i] += h;
            let mut minus = a0;
            minus[i] -= h;
            let fd = (f(&plus, &b0) - f(&minus, &b0)) / (2.0 * h);
            let rel = (fd - ga.data()[i]).abs() / fd.abs().max(1e-9);
            assert!(rel < 1e-6, "a[{i}]: fd {fd} vs ad {}", ga.data()[i]);
        }
        for i in 0..b0.len() {
            let mut plus = b0;
            plus[i] += h;
            let mut minus = b0;
            minus[i] -= h;
            let fd = (f(&a0, &plus) - f(&a0, &minus)) / (2.0 * h);
            let rel = (fd - gb.data()[i]).abs() / fd.abs().max(1e-9);
            assert!(rel < 1e-6, "b[{i}]: fd {fd} vs ad {}", gb.data()[i]);
        }
    }
}
