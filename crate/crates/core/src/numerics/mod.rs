//! Differentiable-computation substrate: tensors, FFT, reverse-mode tape,
//! finite-difference checking and the portable tensor file format.

pub mod fft;
pub mod gradcheck;
pub mod io;
pub mod tape;
pub mod tensor;

pub use fft::{fft2d, fft2d_tensor, ifft2d, ifft2d_real, Spectrum};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use io::{load_tensor, save_tensor};
pub use tape::{Gradients, NodeId, ParamId, ParamStore, SurrogateTerms, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod op_gradients {
    //! Finite-difference checks for every differentiable tape op.
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn check(store: &ParamStore, build: impl Fn(&mut Tape, &ParamStore) -> crate::Result<NodeId>) {
        let ids: Vec<ParamId> = store.ids().collect();
        let report = grad_check(store, &ids, build, &GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:#?}");
    }

    #[test]
    fn elementwise_and_rowwise_ops() {
        let mut s = ParamStore::new();
        let a = s.add("a", randn(&[3, 4], 1));
        let b = s.add("b", randn(&[3, 4], 2));
        let bias = s.add("bias", randn(&[4], 3));
        let k = s.add("k", Tensor::scalar(0.7));
        check(&s, |t, s| {
            let (an, bn, bi, kn) = (t.param(s, a)?, t.param(s, b)?, t.param(s, bias)?, t.param(s, k)?);
            let x = t.mul(an, bn)?;
            let x = t.add(x, an)?;
            let x = t.add_row(x, bi)?;
            let x = t.scale(x, kn)?;
            let x = t.gelu(x)?;
            let x = t.sigmoid(x)?;
            let x = t.softmax(x)?;
            t.scale_const(x, 2.5)
        });
    }

    #[test]
    fn layer_norm_and_matmul() {
        let mut s = ParamStore::new();
        let x = s.add("x", randn(&[3, 5], 4));
        let g = s.add("g", randn(&[5], 5));
        let b = s.add("b", randn(&[5], 6));
        let w = s.add("w", randn(&[5, 2], 7));
        check(&s, |t, s| {
            let (xn, gn, bn, wn) = (t.param(s, x)?, t.param(s, g)?, t.param(s, b)?, t.param(s, w)?);
            let y = t.layer_norm(xn, gn, bn, 1e-5)?;
            t.matmul(y, wn)
        });
    }

    #[test]
    fn causal_attention() {
        let mut s = ParamStore::new();
        let qkv = s.add("qkv", randn(&[5, 12], 8));
        check(&s, |t, s| {
            let q = t.param(s, qkv)?;
            t.causal_attention(q, 2)
        });
    }

    #[test]
    fn gather_scatter_concat_reshape() {
        let mut s = ParamStore::new();
        let table = s.add("table", randn(&[6, 3], 9));
        let src = s.add("src", randn(&[2, 3], 10));
        let v = s.add("v", randn(&[4], 11));
        check(&s, |t, s| {
            let tb = t.param(s, table)?;
            let g = t.gather(tb, &[1, 4, 1, 0])?;
            let sr = t.param(s, src)?;
            let x = t.scatter_add_rows(g, sr, &[2, 2])?;
            let vn = t.param(s, v)?;
            let c = t.concat(&[x, vn])?;
            t.reshape(c, &[4, 4])
        });
    }

    #[test]
    fn conv_and_masked_mean() {
        let mut s = ParamStore::new();
        let x = s.add("x", randn(&[2, 5, 6], 12));
        let w = s.add("w", randn(&[3, 2, 3, 3], 13));
        let b = s.add("b", randn(&[3], 14));
        let mut mask = Tensor::zeros(&[5, 6]);
        for i in [0, 7, 8, 29] {
            mask.data_mut()[i] = 1.0;
        }
        check(&s, |t, s| {
            let (xn, wn, bn) = (t.param(s, x)?, t.param(s, w)?, t.param(s, b)?);
            let y = t.conv2d(xn, wn, bn)?;
            let y = t.gelu(y)?;
            Ok(t.masked_mean(y, &mask)?.unwrap())
        });
    }

    #[test]
    fn log_softmax_pick_and_sum() {
        let mut s = ParamStore::new();
        let l = s.add("l", randn(&[4, 7], 15));
        check(&s, |t, s| {
            let ln = t.param(s, l)?;
            let lp = t.log_softmax_pick(ln, &[0, 6, 3, 3])?;
            t.sum(lp)
        });
    }

    #[test]
    fn grpo_surrogate_with_and_without_clipping() {
        let mut s = ParamStore::new();
        let l = s.add("l", randn(&[6, 5], 16));
        let targets = [1, 2, 0, 4, 4, 3];
        let base = {
            let mut t = Tape::new();
            let ln = t.param(&s, l).unwrap();
            let lp = t.log_softmax_pick(ln, &targets).unwrap();
            t.value(lp).data().to_vec()
        };
        // Shift old logprobs so some tokens sit outside the clip window.
        let old: Vec<f64> = base.iter().enumerate().map(|(i, v)| v + [0.0, 0.5, -0.5, 0.05, -0.4, 0.3][i]).collect();
        let reference: Vec<f64> = base.iter().map(|v| v - 0.2).collect();
        let terms = SurrogateTerms {
            old_logp: old,
            ref_logp: reference,
            advantage: vec![1.0, 1.0, -1.0, 0.5, 1.2, -0.7],
            weight: vec![1.0 / 6.0; 6],
            clip: 0.2,
            beta: 0.04,
        };
        check(&s, |t, s| {
            let ln = t.param(s, l)?;
            let lp = t.log_softmax_pick(ln, &targets)?;
            t.grpo_surrogate(lp, terms.clone())
        });
    }

    #[test]
    fn untouched_parameters_get_exact_zero_gradients() {
        let mut s = ParamStore::new();
        let used = s.add("used", randn(&[2, 2], 1));
        let unused = s.add("unused", randn(&[3], 2));
        let mut t = Tape::new();
        let u = t.param(&s, used).unwrap();
        let loss = t.sum(u).unwrap();
        let g = t.backward(loss, &s).unwrap();
        assert!(g.get(unused).data().iter().all(|&v| v == 0.0));
        assert!(g.get(used).data().iter().all(|&v| v == 1.0));
    }
}
