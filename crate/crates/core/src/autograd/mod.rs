//! Dense `f32` arrays with tape-based reverse-mode differentiation.
//!
//! Values are recorded on a [`Tape`] as the forward pass runs; each op keeps
//! the context its reverse rule needs. [`Tape::backward`] consumes the tape
//! and returns gradients for every differentiable leaf. Parameters live in a
//! [`ParamStore`] and gradients accumulate there until explicitly zeroed.

mod gemm;
mod params;
mod tape;
mod tensor;

use thiserror::Error;

pub use params::{BnUpdate, Param, ParamId, ParamStore};
pub use tape::{BnLayout, CustomFn, FnCustom, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),
    #[error("{len} values do not fill shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any differentiable value")]
    DetachedLoss,
    #[error("batch normalization needs at least 2 values per feature in training mode, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2)).unwrap();
        let p = tape.matmul(i2, i2).unwrap();
        assert_eq!(tape.value(p), &Tensor::eye(2));

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(GradError::ShapeMismatch { .. })));
    }

    #[test]
    fn conv_identity_kernel_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let id = tape.constant(t(&[1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv1d_causal(x, id, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

        let k = tape.constant(t(&[1, 1, 2], &[1.0, 1.0])).unwrap();
        let y = tape.conv1d_causal(x, k, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv_rejects_zero_dilation() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let k = tape.constant(t(&[1, 1, 2], &[1.0, 1.0])).unwrap();
        assert!(tape.conv1d_causal(x, k, None, 0).is_err());
    }

    #[test]
    fn conv_is_causal() {
        let base: Vec<f32> = (0..12).map(|v| (v as f32 * 0.7).cos()).collect();
        let w: Vec<f32> = (0..2 * 2 * 3).map(|v| v as f32 * 0.1 - 0.5).collect();
        let run = |x: &[f32]| {
            let mut tape = Tape::new();
            let xv = tape.constant(t(&[2, 6], x)).unwrap();
            let wv = tape.constant(t(&[2, 2, 3], &w)).unwrap();
            let y = tape.conv1d_causal(xv, wv, None, 2).unwrap();
            tape.value(y).clone()
        };
        let y0 = run(&base);
        for pos in 0..6 {
            let mut x = base.clone();
            x[pos] += 3.0;
            x[6 + pos] -= 1.5;
            let y = run(&x);
            for c in 0..2 {
                for tt in 0..pos {
                    assert_eq!(y.at(&[c, tt]), y0.at(&[c, tt]));
                }
            }
        }
    }

    #[test]
    fn affine_identity_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.5, -2.0, 0.25, 4.0])).unwrap();
        let w = tape.constant(Tensor::eye(2)).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let x = tape.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let w = tape.constant(t(&[2, 1], &[2.0, 3.0])).unwrap();
        let b = tape.constant(t(&[1], &[1.0])).unwrap();
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn batchnorm_hand_cases() {
        let mut tape = Tape::new();
        let gamma = tape.constant(t(&[1], &[1.0])).unwrap();
        let beta = tape.constant(t(&[1], &[0.0])).unwrap();
        let x = tape.constant(t(&[2, 1], &[-1.0, 1.0])).unwrap();
        let layout = BnLayout::for_axis(&[2, 1], 1).unwrap();
        let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, layout, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
        assert_eq!(mean, vec![0.0]);
        assert_eq!(var, vec![2.0]);

        let shift = tape.constant(t(&[1], &[0.7])).unwrap();
        let flat = tape.constant(t(&[3, 1], &[2.0, 2.0, 2.0])).unwrap();
        let layout = BnLayout::for_axis(&[3, 1], 1).unwrap();
        let (y, _, _) = tape.batchnorm_train(flat, gamma, shift, layout, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn batchnorm_rejects_single_sample_in_training() {
        let mut tape = Tape::new();
        let gamma = tape.constant(t(&[2], &[1.0, 1.0])).unwrap();
        let beta = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let x = tape.constant(t(&[1, 2], &[0.3, 0.4])).unwrap();
        let layout = BnLayout::for_axis(&[1, 2], 1).unwrap();
        assert_eq!(
            tape.batchnorm_train(x, gamma, beta, layout, 1e-5).unwrap_err(),
            GradError::BatchTooSmall(1)
        );
    }

    #[test]
    fn batchnorm_eval_is_affine_in_input() {
        let mut tape = Tape::new();
        let gamma = tape.constant(t(&[2], &[1.5, -0.5])).unwrap();
        let beta = tape.constant(t(&[2], &[0.1, 0.2])).unwrap();
        let layout = BnLayout::for_axis(&[3, 2], 1).unwrap();
        let (mean, var) = ([0.5, -1.0], [2.0, 0.25]);
        let eval = |tape: &mut Tape, data: &[f32]| {
            let x = tape.constant(t(&[3, 2], data)).unwrap();
            let y = tape.batchnorm_eval(x, gamma, beta, layout, &mean, &var, 1e-5).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = [1.0, 2.0, 3.0, -4.0, 0.5, 0.0];
        let b = [-2.0, 1.0, 0.0, 2.0, 1.5, 3.0];
        let zero = eval(&mut tape, &[0.0; 6]);
        let ya = eval(&mut tape, &a);
        let yb = eval(&mut tape, &b);
        let sum: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let ys = eval(&mut tape, &sum);
        for i in 0..6 {
            assert!((ys[i] - (ya[i] + yb[i] - zero[i])).abs() < 1e-5);
        }
        assert_eq!(eval(&mut tape, &a), ya);
    }

    #[test]
    fn backward_of_sum_and_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]), true).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        let sq = tape.square(x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(tape.backward(x), Err(GradError::NonScalarLoss(_))));

        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let s = tape.sum(c).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), GradError::DetachedLoss);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]), true).unwrap();
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param_leaf(store.value(id).clone(), id, true).unwrap();
            let sq = tape.square(w).unwrap();
            let s = tape.sum(sq).unwrap();
            store.accumulate(&tape.backward(s).unwrap());
        }
        assert_eq!(store.get(id).grad, vec![4.0, 8.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn custom_heaviside_with_arctan_backward() {
        let alpha = 2.0f32;
        let f = FnCustom::new(
            "heaviside",
            |xs| {
                let x = xs[0];
                let d = x.data().iter().map(|&v| if v >= 0.0 { 1.0 } else { 0.0 }).collect();
                Tensor::new(x.shape().to_vec(), d)
            },
            move |xs, _out, g| {
                let d = xs[0]
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&u, &gv)| {
                        let z = std::f32::consts::FRAC_PI_2 * alpha * u;
                        gv * alpha / 2.0 / (1.0 + z * z)
                    })
                    .collect();
                vec![Some(d)]
            },
        );
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-0.3, 0.0, 0.4]), true).unwrap();
        let s = tape.custom(f, &[x]).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 1.0, 1.0]);
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).unwrap().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn custom_square_matches_builtin() {
        let f = FnCustom::new(
            "square",
            |xs| {
                let x = xs[0];
                Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())
            },
            |xs, _out, g| vec![Some(xs[0].data().iter().zip(g).map(|(x, gv)| 2.0 * x * gv).collect())],
        );
        let data = [0.3, -1.2, 2.5];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &data), true).unwrap();
        let y = tape.custom(f, &[x]).unwrap();
        let l = tape.sum(y).unwrap();
        let custom = tape.backward(l).unwrap().get(x).unwrap().to_vec();

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &data), true).unwrap();
        let y = tape.square(x).unwrap();
        let l = tape.sum(y).unwrap();
        let builtin = tape.backward(l).unwrap().get(x).unwrap().to_vec();
        assert_eq!(custom, builtin);
    }

    #[test]
    fn custom_identity_with_zero_backward_blocks_parameter_gradient() {
        let f = FnCustom::new(
            "identity",
            |xs| Ok(xs[0].clone()),
            |xs, _out, _g| vec![Some(vec![0.0; xs[0].len()])],
        );
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[0.5, -0.5]), true).unwrap();
        let mut tape = Tape::new();
        let w = tape.param_leaf(store.value(id).clone(), id, true).unwrap();
        let y = tape.custom(f, &[w]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -0.5]);
        let l = tape.sum(y).unwrap();
        store.accumulate(&tape.backward(l).unwrap());
        assert_eq!(store.get(id).grad, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f32::MAX])).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(GradError::NonFinite { .. })));
    }

    #[test]
    fn permute_concat_slice_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let x = tape.constant(t(&[2, 3, 4], &data)).unwrap();
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        assert_eq!(tape.value(p).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));

        let a = tape.slice(x, 1, 0, 1).unwrap();
        let b = tape.slice(x, 1, 1, 2).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c), tape.value(x));
    }
}
