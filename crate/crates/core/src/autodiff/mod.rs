//! Dense f64 arrays and tape-based reverse-mode differentiation.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::grad_check;
pub use tape::{NodeId, Tape};

pub(crate) use tape::{sigmoid_scalar, softplus_scalar};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::Error;

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let mut t = Tape::inference();
        let x = t.constant_scalar(0.0);
        let y = t.softplus(x).unwrap();
        assert!((t.value(y).item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((t.value(y).item() - 0.6931471805599453).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_of_dot_gradient_at_zero_weights_is_quarter_input() {
        // d/dw sigmoid(w.x) at w=0 is sigma'(0) * x = 0.25 * x
        let xdata = [0.3, -1.2, 2.0];
        let mut t = Tape::new();
        let w = t.leaf(Arc::new(Array::zeros(&[3])), true);
        let x = t.constant(Array::from_vec(&[3], xdata.to_vec()).unwrap());
        let prod = t.mul(w, x).unwrap();
        let s = t.sum(prod).unwrap();
        let y = t.sigmoid(s).unwrap();
        t.backward(y).unwrap();
        let g = t.grad(w).unwrap();
        for (gi, xi) in g.data().iter().zip(xdata) {
            assert!((gi - 0.25 * xi).abs() < 1e-12, "{gi} vs {}", 0.25 * xi);
        }
    }

    #[test]
    fn grad_check_mlp_block() {
        let x = Array::from_vec(&[2, 4], (0..8).map(|i| 0.3 * i as f64 - 1.1).collect()).unwrap();
        let w1 = Array::from_vec(&[4, 6], (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.13).collect())
            .unwrap();
        let b1 = Array::from_vec(&[6], (0..6).map(|i| 0.05 * i as f64 - 0.1).collect()).unwrap();
        let w2 = Array::from_vec(&[6, 3], (0..18).map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.11).collect())
            .unwrap();
        let worst = grad_check(
            &[x, w1, b1, w2],
            |t, ids| {
                let h = t.matmul(ids[0], ids[1])?;
                let h = t.add_rows(h, ids[2])?;
                let h = t.silu(h)?;
                let h = t.layer_norm_rows(h, 1e-5)?;
                let h = t.matmul(h, ids[3])?;
                let h = t.gelu(h)?;
                t.mean(h)
            },
            1e-4,
        )
        .unwrap();
        assert!(worst < 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn grad_check_attention_block() {
        let mk = |seed: usize, shape: &[usize]| {
            let n: usize = shape.iter().product();
            Array::from_vec(
                shape,
                (0..n)
                    .map(|i| (((i * 31 + seed * 17) % 23) as f64 - 11.0) * 0.09)
                    .collect(),
            )
            .unwrap()
        };
        let q = mk(1, &[3, 4]);
        let k = mk(2, &[3, 4]);
        let v = mk(3, &[3, 4]);
        let worst = grad_check(
            &[q, k, v],
            |t, ids| {
                let logits = t.matmul_tb(ids[0], ids[1])?;
                let logits = t.scale(logits, 0.5)?;
                let attn = t.softmax_rows(logits)?;
                let out = t.matmul(attn, ids[2])?;
                let out = t.tanh(out)?;
                t.sum(out)
            },
            1e-4,
        )
        .unwrap();
        assert!(worst < 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn grad_check_conv_groupnorm_pool() {
        let mk = |seed: usize, shape: &[usize]| {
            let n: usize = shape.iter().product();
            Array::from_vec(
                shape,
                (0..n)
                    .map(|i| (((i * 13 + seed * 29) % 19) as f64 - 9.0) * 0.1)
                    .collect(),
            )
            .unwrap()
        };
        let x = mk(1, &[2, 5, 5]);
        let w = mk(2, &[4, 2, 3, 3]);
        let b = mk(3, &[4]);
        let gamma = Array::filled(&[4], 1.1);
        let beta = Array::filled(&[4], -0.05);
        let worst = grad_check(
            &[x, w, b, gamma, beta],
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
                let y = t.group_norm(y, ids[3], ids[4], 2, 1e-5)?;
                let y = t.silu(y)?;
                let mx = t.max_pool_spatial(y)?;
                let mn = t.mean_pool_spatial(y)?;
                let cat = t.concat(1, &[mx, mn])?;
                let cat = t.sigmoid(cat)?;
                t.sum(cat)
            },
            1e-4,
        )
        .unwrap();
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn grad_check_structural_ops() {
        let a = Array::from_vec(&[4, 3], (0..12).map(|i| 0.2 * i as f64 - 1.0).collect()).unwrap();
        let b = Array::from_vec(&[2, 3], vec![0.4, -0.2, 0.7, 1.1, -0.9, 0.3]).unwrap();
        let worst = grad_check(
            &[a, b],
            |t, ids| {
                let top = t.slice_rows(ids[0], 0, 2)?;
                let merged = t.concat(0, &[top, ids[1]])?;
                let g = t.gather_rows(merged, Arc::new(vec![3, 0, 3, 1]))?;
                let left = t.slice_cols(g, 0, 2)?;
                let e = t.exp(left)?;
                let lg = t.log(e)?;
                let sm = t.softmax_rows(lg)?;
                // weight the softmax output so the readout is not constant
                let w = t.constant(
                    Array::from_vec(&[4, 2], (0..8).map(|i| 0.3 * i as f64 - 0.9).collect())
                        .unwrap(),
                );
                let weighted = t.mul(sm, w)?;
                t.mean(weighted)
            },
            1e-4,
        )
        .unwrap();
        assert!(worst < 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn grad_check_piecewise_ops_away_from_kinks() {
        let a = Array::from_vec(&[5], vec![0.8, -0.6, 1.4, -1.9, 0.2]).unwrap();
        let b = Array::from_vec(&[5], vec![0.1, 0.4, -0.5, 1.2, 0.9]).unwrap();
        let worst = grad_check(
            &[a, b],
            |t, ids| {
                let m = t.minimum(ids[0], ids[1])?;
                let c = t.clamp(m, -1.0, 1.0)?;
                let d = t.div(c, ids[1])?;
                let s = t.softplus(d)?;
                t.sum(s)
            },
            1e-4,
        )
        .unwrap();
        // division by small denominators inflates finite-difference truncation error
        assert!(worst < 1e-5, "worst rel err {worst}");
    }

    #[test]
    fn grad_check_permute_and_mul_rows() {
        let a = Array::from_vec(&[2, 6], (0..12).map(|i| 0.15 * i as f64 - 0.8).collect()).unwrap();
        let v = Array::from_vec(&[6], vec![1.2, -0.4, 0.9, 0.3, -1.1, 0.6]).unwrap();
        // transpose [2,6] -> [6,2] via explicit index permutation
        let mut perm = Vec::with_capacity(12);
        for c in 0..6 {
            for r in 0..2 {
                perm.push(r * 6 + c);
            }
        }
        let perm = Arc::new(perm);
        let worst = grad_check(
            &[a, v],
            |t, ids| {
                let m = t.mul_rows(ids[0], ids[1])?;
                let p = t.permute(m, Arc::clone(&perm), &[6, 2])?;
                let s = t.tanh(p)?;
                t.sum(s)
            },
            1e-4,
        )
        .unwrap();
        assert!(worst < 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros(&[2, 3]));
        let b = t.constant(Array::zeros(&[3, 2]));
        assert!(matches!(t.add(a, b), Err(Error::Shape(_))));
        assert!(matches!(t.matmul(a, a), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_output_is_error() {
        let mut t = Tape::new();
        let a = t.constant(Array::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
        assert!(matches!(t.log(a), Err(Error::NonFinite(_))));
        let big = t.constant(Array::from_vec(&[1], vec![1e300]).unwrap());
        assert!(matches!(t.exp(big), Err(Error::NonFinite(_))));
    }

    #[test]
    fn inference_tape_rejects_backward_and_double_backward_fails() {
        let mut t = Tape::inference();
        let a = t.leaf(Arc::new(Array::scalar(1.0)), true);
        let y = t.sigmoid(a).unwrap();
        assert!(t.backward(y).is_err());

        let mut t = Tape::new();
        let a = t.leaf(Arc::new(Array::scalar(1.0)), true);
        let y = t.sigmoid(a).unwrap();
        t.backward(y).unwrap();
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn gradient_skips_nodes_that_do_not_need_it() {
        let mut t = Tape::new();
        let a = t.leaf(Arc::new(Array::scalar(2.0)), true);
        let c = t.constant_scalar(3.0);
        let y = t.mul(a, c).unwrap();
        t.backward(y).unwrap();
        assert!((t.grad(a).unwrap().item() - 3.0).abs() < 1e-15);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn fan_out_accumulates_gradients() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut t = Tape::new();
        let x = t.leaf(Arc::new(Array::scalar(1.5)), true);
        let sq = t.mul(x, x).unwrap();
        let y = t.add(sq, x).unwrap();
        t.backward(y).unwrap();
        assert!((t.grad(x).unwrap().item() - 4.0).abs() < 1e-12);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn random_elementwise_chain_matches_finite_difference(
                raw_a in proptest::collection::vec(-1.5f64..1.5, 6),
                raw_b in proptest::collection::vec(-1.5f64..1.5, 6),
                pick in proptest::collection::vec(0usize..5, 3),
            ) {
                let a = Array::from_vec(&[6], raw_a).unwrap();
                let b = Array::from_vec(&[6], raw_b).unwrap();
                let worst = grad_check(
                    &[a, b],
                    |t, ids| {
                        let mut cur = t.mul(ids[0], ids[1])?;
                        for p in &pick {
                            cur = match p {
                                0 => t.sigmoid(cur)?,
                                1 => t.tanh(cur)?,
                                2 => t.silu(cur)?,
                                3 => t.softplus(cur)?,
                                _ => t.add(cur, ids[1])?,
                            };
                        }
                        t.mean(cur)
                    },
                    1e-4,
                ).unwrap();
                prop_assert!(worst < 1e-5, "worst rel err {}", worst);
            }
        }
    }
}
