//! Deterministic `f32` tensor algebra, reverse-mode differentiation and Adam.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckReport, KINK_TOLERANCE};
pub use params::{ModelParams, ParamId};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, layer_norm, matmul, softmax_rows, Tensor, LAYER_NORM_EPS, NORM_CLAMP};

#[cfg(test)]
mod op_gradient_tests {
    //! Every differentiable op against central differences on random inputs.

    use super::*;
    use crate::error::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

    fn check(name: &str, shapes: &[&[usize]], build: Build, trials: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
        for trial in 0..trials {
            let mut params = ModelParams::new();
            let ids: Vec<ParamId> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    params
                        .add(format!("in{i}"), Tensor::uniform(s, 1.0, &mut rng))
                        .unwrap()
                })
                .collect();
            // weight the output so the objective is not a plain sum
            let probe = {
                let mut t = Tape::with_params(&params);
                let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
                let out = build(&mut t, &vars).unwrap();
                Tensor::uniform(t.value(out).shape(), 1.0, &mut rng)
            };
            let f = |t: &mut Tape| -> Result<Var> {
                let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
                let out = build(t, &vars)?;
                let w = t.constant(probe.clone());
                let prod = t.mul(out, w)?;
                Ok(t.sum(prod))
            };
            let seed = rng.random();
            let r = finite_diff_check(f, &params, 1e-3, 16, seed).unwrap();
            assert!(r.max_rel_error <= 1e-3, "{name} trial {trial}: {:?}", r);
        }
    }

    #[test]
    fn matmul_grad() {
        check(
            "matmul",
            &[&[3, 4], &[4, 2]],
            |t, v| t.matmul(v[0], v[1]),
            10,
        );
    }

    #[test]
    fn elementwise_grads() {
        check("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]), 5);
        check("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]), 5);
        check("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]), 5);
        check(
            "affine",
            &[&[2, 3]],
            |t, v| Ok(t.affine(v[0], -1.5, 0.3)),
            5,
        );
        check("sigmoid", &[&[3, 3]], |t, v| Ok(t.sigmoid(v[0])), 10);
        check("relu", &[&[3, 3]], |t, v| Ok(t.relu(v[0])), 10);
        check(
            "log",
            &[&[2, 3]],
            |t, v| {
                let pos = t.affine(v[0], 0.4, 1.5);
                Ok(t.log_clamped(pos, 1e-7))
            },
            5,
        );
    }

    #[test]
    fn structural_grads() {
        check("transpose", &[&[2, 5]], |t, v| Ok(t.transpose(v[0])), 3);
        check("add_row", &[&[4, 3], &[3]], |t, v| t.add_row(v[0], v[1]), 5);
        check(
            "gather",
            &[&[5, 3]],
            |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]),
            5,
        );
        check(
            "concat_rows",
            &[&[2, 3], &[1, 3]],
            |t, v| t.concat_rows(&[v[0], v[1]]),
            3,
        );
        check(
            "concat_cols",
            &[&[2, 3], &[2, 1]],
            |t, v| t.concat_cols(&[v[1], v[0]]),
            3,
        );
        check("reshape", &[&[2, 3]], |t, v| t.reshape(v[0], &[1, 6]), 3);
        check("mean", &[&[3, 3]], |t, v| Ok(t.mean(v[0])), 3);
    }

    #[test]
    fn nn_grads() {
        check("softmax", &[&[3, 5]], |t, v| Ok(t.softmax_rows(v[0])), 15);
        check(
            "layer_norm",
            &[&[3, 6], &[6], &[6]],
            |t, v| t.layer_norm(v[0], v[1], v[2]),
            15,
        );
        check("row_norms", &[&[4, 3]], |t, v| Ok(t.row_norms(v[0])), 10);
        check("cosine", &[&[4, 3]], |t, v| Ok(t.cosine_matrix(v[0])), 15);
    }

    #[test]
    fn softmax_rows_sum_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = Tensor::uniform(&[4, 6], 5.0, &mut rng);
            let s = softmax_rows(&x);
            for i in 0..4 {
                let total: f64 = s.row(i).iter().map(|&v| v as f64).sum();
                assert!((total - 1.0).abs() < 1e-6);
                assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
            let perm = [2usize, 0, 3, 1];
            let sp = softmax_rows(&x.select_rows(&perm).unwrap());
            assert_eq!(sp, s.select_rows(&perm).unwrap());
        }
    }

    #[test]
    fn tape_matches_plain_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let b = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        assert_eq!(t.value(c), &matmul(&a, &b).unwrap());
        let s = t.softmax_rows(va);
        assert_eq!(t.value(s), &softmax_rows(&a));
    }
}
