//! Caption sampling and fusion into the text tokens seen by language-guided attention.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::{FeatureKind, TextMode};
use crate::numerics::{ModelParams, ParamId, Tape, Tensor, Var};

/// Row indices `round(j·(M−1)/(m−1))`, `j = 0..m`. With `m = 1` the first caption is used.
pub fn sample_indices(m_total: usize, m_fixed: usize) -> Result<Vec<usize>> {
    if m_fixed == 0 {
        return Err(Error::Config("m_fixed must be at least 1".into()));
    }
    if m_total == 0 {
        return Err(Error::Shape("no captions to sample".into()));
    }
    if m_fixed == 1 {
        return Ok(vec![0]);
    }
    let step = (m_total - 1) as f64 / (m_fixed - 1) as f64;
    Ok((0..m_fixed)
        .map(|j| ((j as f64 * step).round() as usize).min(m_total - 1))
        .collect())
}

pub fn sample_captions(captions: &Tensor, m_fixed: usize) -> Result<Tensor> {
    captions.select_rows(&sample_indices(captions.rows(), m_fixed)?)
}

/// Linear map from the `m_fixed` concatenated captions (`1×(m·D)`) to one `1×D` vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FusionLayout {
    pub m_fixed: usize,
    pub dim: usize,
    /// `(m·D)×D`
    pub weight: ParamId,
    /// `1×D`
    pub bias: ParamId,
}

impl FusionLayout {
    pub fn init<R: Rng>(
        params: &mut ModelParams,
        m_fixed: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FusionLayout {
            m_fixed,
            dim,
            weight: params.add("fusion.weight", Tensor::glorot(m_fixed * dim, dim, rng))?,
            bias: params.add("fusion.bias", Tensor::zeros(&[1, dim]))?,
        })
    }
}

/// Concatenates the sampled rows and applies the fusion map.
pub fn fuse_text(t: &mut Tape, sampled: Var, layout: &FusionLayout) -> Result<Var> {
    let (m, d) = t.value(sampled).dims2();
    if m != layout.m_fixed || d != layout.dim {
        return Err(Error::Shape(format!(
            "fuse_text: got {m}×{d}, expected {}×{}",
            layout.m_fixed, layout.dim
        )));
    }
    let flat = t.reshape(sampled, &[1, m * d])?;
    let w = t.param(layout.weight);
    let b = t.param(layout.bias);
    let y = t.matmul(flat, w)?;
    t.add_row(y, b)
}

/// Text tokens for attention.
///
/// Query mode passes the single query row through. Generic mode yields the
/// sampled caption rows followed by the fused vector, or only the fused
/// vector when `fused_only` is set.
pub fn text_tokens(
    t: &mut Tape,
    text: &Tensor,
    kind: FeatureKind,
    mode: TextMode,
    fused_only: bool,
    layout: &FusionLayout,
) -> Result<Var> {
    match (mode, kind) {
        (TextMode::Query, FeatureKind::Query) => {
            if text.rows() != 1 {
                return Err(Error::Validation(format!(
                    "query embedding must have one row, got {}",
                    text.rows()
                )));
            }
            Ok(t.constant(text.clone()))
        }
        (TextMode::Generic, FeatureKind::Captions) => {
            let sampled = t.constant(sample_captions(text, layout.m_fixed)?);
            let fused = fuse_text(t, sampled, layout)?;
            if fused_only {
                Ok(fused)
            } else {
                t.concat_rows(&[sampled, fused])
            }
        }
        (mode, kind) => Err(Error::Usage(format!(
            "text mode {mode:?} cannot use a {kind:?} feature file"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampling_indices() {
        assert_eq!(sample_indices(7, 7).unwrap(), (0..7).collect::<Vec<_>>());
        assert_eq!(sample_indices(13, 7).unwrap(), vec![0, 2, 4, 6, 8, 10, 12]);
        // j·2/6 rounded: 0, .33, .67, 1, 1.33, 1.67, 2
        assert_eq!(sample_indices(3, 7).unwrap(), vec![0, 0, 1, 1, 1, 2, 2]);
        assert_eq!(sample_indices(5, 1).unwrap(), vec![0]);
        assert_eq!(sample_indices(1, 4).unwrap(), vec![0; 4]);
        assert!(sample_indices(3, 0).unwrap_err().is_config_error());
    }

    #[test]
    fn sampling_is_idempotent_at_m_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Tensor::uniform(&[7, 3], 1.0, &mut rng);
        let once = sample_captions(&c, 7).unwrap();
        assert_eq!(once, c);
        assert_eq!(sample_captions(&once, 7).unwrap(), once);
    }

    fn layout_with(m: usize, d: usize, w: Tensor, b: Tensor) -> (ModelParams, FusionLayout) {
        let mut p = ModelParams::new();
        let weight = p.add("w", w).unwrap();
        let bias = p.add("b", b).unwrap();
        (
            p,
            FusionLayout {
                m_fixed: m,
                dim: d,
                weight,
                bias,
            },
        )
    }

    fn fuse_eval(p: &ModelParams, l: &FusionLayout, x: &Tensor) -> Vec<f32> {
        let mut t = Tape::with_params(p);
        let v = t.constant(x.clone());
        let y = fuse_text(&mut t, v, l).unwrap();
        t.value(y).data().to_vec()
    }

    #[test]
    fn zero_weights_give_bias() {
        let (p, l) = layout_with(
            2,
            3,
            Tensor::zeros(&[6, 3]),
            Tensor::new(&[1, 3], vec![1., 2., 3.]).unwrap(),
        );
        let x = Tensor::full(&[2, 3], 5.0);
        assert_eq!(fuse_eval(&p, &l, &x), vec![1., 2., 3.]);
    }

    #[test]
    fn identity_map_with_one_caption() {
        let (p, l) = layout_with(1, 3, Tensor::identity(3), Tensor::full(&[1, 3], 0.5));
        let x = Tensor::new(&[1, 3], vec![1., -2., 4.]).unwrap();
        assert_eq!(fuse_eval(&p, &l, &x), vec![1.5, -1.5, 4.5]);
    }

    #[test]
    fn fusion_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ModelParams::new();
        let l = FusionLayout::init(&mut p, 3, 4, &mut rng).unwrap();
        *p.get_mut(l.bias) = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let y = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let (a, b) = (0.7f32, -1.3f32);
        let comb: Vec<f32> = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(u, v)| a * u + b * v)
            .collect();
        let lhs = fuse_eval(&p, &l, &Tensor::new(&[3, 4], comb).unwrap());
        let (fx, fy) = (fuse_eval(&p, &l, &x), fuse_eval(&p, &l, &y));
        let bias = p.get(l.bias).data();
        for j in 0..4 {
            let rhs = a * fx[j] + b * fy[j] - (a + b - 1.0) * bias[j];
            assert!((lhs[j] - rhs).abs() < 1e-5);
        }
    }

    #[test]
    fn fusion_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ModelParams::new();
        let l = FusionLayout::init(&mut p, 3, 4, &mut rng).unwrap();
        let x = Tensor::uniform(&[3, 4], 1.0, &mut rng);
        let probe = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let r = finite_diff_check(
            |t| {
                let v = t.constant(x.clone());
                let y = fuse_text(t, v, &l)?;
                let pr = t.constant(probe.clone());
                let m = t.mul(y, pr)?;
                Ok(t.sum(m))
            },
            &p,
            1e-3,
            16,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn token_counts_and_mode_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ModelParams::new();
        let l = FusionLayout::init(&mut p, 7, 4, &mut rng).unwrap();
        let caps = Tensor::uniform(&[7, 4], 1.0, &mut rng);
        let q = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let mut t = Tape::with_params(&p);
        let v = text_tokens(
            &mut t,
            &caps,
            FeatureKind::Captions,
            TextMode::Generic,
            false,
            &l,
        )
        .unwrap();
        assert_eq!(t.value(v).shape(), &[8, 4]);
        let v = text_tokens(
            &mut t,
            &caps,
            FeatureKind::Captions,
            TextMode::Generic,
            true,
            &l,
        )
        .unwrap();
        assert_eq!(t.value(v).shape(), &[1, 4]);
        let v = text_tokens(&mut t, &q, FeatureKind::Query, TextMode::Query, false, &l).unwrap();
        assert_eq!(t.value(v), &q);
        for (text, kind, mode) in [
            (&q, FeatureKind::Query, TextMode::Generic),
            (&caps, FeatureKind::Captions, TextMode::Query),
        ] {
            assert!(matches!(
                text_tokens(&mut t, text, kind, mode, false, &l),
                Err(Error::Usage(_))
            ));
        }
    }
}
