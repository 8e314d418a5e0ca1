//! Attention-mask algebra and scaled-dot self-attention with optional
//! pitch-conditioned queries.

mod mask;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use mask::{
    add_global, build_full_mask, build_windowed_mask, mark_global_tokens, AttentionMask, WindowSpec,
};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Which pitch level conditions a layer's scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitchLevel {
    Sentence,
    Word,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayerSpec {
    pub window: WindowSpec,
    pub global_positions: BTreeSet<usize>,
    pub heads: usize,
    pub d_model: usize,
    pub pitch_condition: Option<PitchLevel>,
}

impl AttentionLayerSpec {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        self.window.validate()?;
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if let Some(&g) = self.global_positions.iter().find(|&&g| g >= seq_len) {
            return Err(Error::Index { index: g, len: seq_len });
        }
        Ok(())
    }

    pub fn mask(&self, seq_len: usize) -> Result<AttentionMask> {
        self.window.build(seq_len)?.with_global(&self.global_positions)
    }
}

/// Projection weights of one attention layer, all `[d×d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Output of [`attend`]: the projected layer output and one weight matrix per head.
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Multi-head self-attention over `x: [t×d]`.
///
/// Scores are `(X·W^Q + P)(X·W^K)ᵀ / √d_head` per head, with `P` sliced into
/// head-sized column blocks the same way as the queries. Without `pitch` the
/// `P` term is absent.
pub fn attend(
    tape: &mut Tape,
    x: Var,
    weights: &AttentionWeights,
    mask: &AttentionMask,
    pitch: Option<Var>,
    heads: usize,
) -> Result<Attended> {
    let (t, d) = tape.value(x).require_2d("attend input")?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("d_model {d} is not divisible by {heads} heads")));
    }
    if mask.n_query() != t || mask.n_key() != t {
        return Err(Error::dim(format!("mask {}x{} for sequence length {t}", mask.n_query(), mask.n_key())));
    }
    let d_head = d / heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let mut q = tape.matmul(x, weights.wq)?;
    let k = tape.matmul(x, weights.wk)?;
    let v = tape.matmul(x, weights.wv)?;
    if let Some(p) = pitch {
        if tape.value(p).shape() != [t, d] {
            return Err(Error::dim(format!(
                "pitch condition {:?} for input [{t}, {d}]",
                tape.value(p).shape()
            )));
        }
        q = tape.add(q, p)?;
    }

    let mut head_out = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * d_head, (h + 1) * d_head);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let raw = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(raw, scale);
        let w = tape.masked_softmax(scores, mask.allow())?;
        head_out.push(tape.matmul(w, vh)?);
        head_weights.push(w);
    }
    let merged = if heads == 1 { head_out[0] } else { tape.concat_cols(&head_out)? };
    let output = tape.matmul(merged, weights.wo)?;
    Ok(Attended { output, weights: head_weights })
}

/// Plain-tensor attention weights for standalone use.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

/// Evaluates [`attend`] on a private tape and returns `(output, per-head weights)`.
pub fn attend_tensors(
    x: &Tensor,
    params: &AttentionParams,
    mask: &AttentionMask,
    pitch: Option<&Tensor>,
    heads: usize,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = AttentionWeights {
        wq: tape.constant(params.wq.clone()),
        wk: tape.constant(params.wk.clone()),
        wv: tape.constant(params.wv.clone()),
        wo: tape.constant(params.wo.clone()),
    };
    let p = pitch.map(|p| tape.constant(p.clone()));
    let out = attend(&mut tape, xv, &w, mask, p, heads)?;
    let weights = out.weights.iter().map(|&v| tape.value(v).clone()).collect();
    Ok((tape.value(out.output).clone(), weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, matmul};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(d: usize, rng: &mut ChaCha8Rng) -> AttentionParams {
        AttentionParams {
            wq: random(&[d, d], rng),
            wk: random(&[d, d], rng),
            wv: random(&[d, d], rng),
            wo: random(&[d, d], rng),
        }
    }

    /// Dense multi-head attention written directly against the formula, with
    /// no mask handling at all.
    fn reference_dense(x: &Tensor, p: &AttentionParams, heads: usize) -> Tensor {
        let (t, d) = (x.rows(), x.cols());
        let dh = d / heads;
        let q = matmul(x, &p.wq).unwrap();
        let k = matmul(x, &p.wk).unwrap();
        let v = matmul(x, &p.wv).unwrap();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut merged = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let mut s = vec![0.0; t];
                for (j, sj) in s.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in h * dh..(h + 1) * dh {
                        acc += q.at(i, c) * k.at(j, c);
                    }
                    *sj = acc * scale;
                }
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let w: Vec<f64> = e.iter().map(|v| v / z).collect();
                for c in h * dh..(h + 1) * dh {
                    let mut acc = 0.0;
                    for (j, wj) in w.iter().enumerate() {
                        acc += wj * v.at(j, c);
                    }
                    merged[i * d + c] = acc;
                }
            }
        }
        matmul(&Tensor::matrix(t, d, merged).unwrap(), &p.wo).unwrap()
    }

    #[test]
    fn single_token() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[1, 4], &mut rng);
        let p = params(4, &mut rng);
        let (out, w) = attend_tensors(&x, &p, &build_full_mask(1).unwrap(), None, 2).unwrap();
        for h in &w {
            assert_eq!(h.data(), &[1.0]);
        }
        let expected = matmul(&matmul(&x, &p.wv).unwrap(), &p.wo).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn zero_pitch_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[7, 8], &mut rng);
        let p = params(8, &mut rng);
        let mask = build_windowed_mask(7, 4).unwrap();
        let (a, wa) = attend_tensors(&x, &p, &mask, None, 2).unwrap();
        let (b, wb) = attend_tensors(&x, &p, &mask, Some(&Tensor::zeros(&[7, 8])), 2).unwrap();
        assert!(a.bit_eq(&b));
        for (u, v) in wa.iter().zip(&wb) {
            assert!(u.bit_eq(v));
        }
    }

    #[test]
    fn identity_mask_gives_identity_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[5, 4], &mut rng);
        let p = params(4, &mut rng);
        let (out, w) = attend_tensors(&x, &p, &build_windowed_mask(5, 1).unwrap(), None, 2).unwrap();
        for h in &w {
            assert!(h.bit_eq(&Tensor::identity(5)));
        }
        let expected = matmul(&matmul(&x, &p.wv).unwrap(), &p.wo).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn pitch_changes_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[6, 4], &mut rng);
        let p = params(4, &mut rng);
        let pitch = random(&[6, 4], &mut rng);
        let mask = build_full_mask(6).unwrap();
        let (_, wa) = attend_tensors(&x, &p, &mask, None, 1).unwrap();
        let (_, wb) = attend_tensors(&x, &p, &mask, Some(&pitch), 1).unwrap();
        assert!(wa[0].max_abs_diff(&wb[0]) > 1e-6);
    }

    #[test]
    fn config_and_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 6], &mut rng);
        let p = params(6, &mut rng);
        let mask = build_full_mask(3).unwrap();
        assert!(matches!(attend_tensors(&x, &p, &mask, None, 4), Err(Error::Config(_))));
        assert!(matches!(
            attend_tensors(&x, &p, &build_full_mask(4).unwrap(), None, 2),
            Err(Error::Dimension(_))
        ));
        let spec = AttentionLayerSpec {
            window: WindowSpec::Window(2),
            global_positions: BTreeSet::from([5]),
            heads: 2,
            d_model: 6,
            pitch_condition: None,
        };
        assert!(matches!(spec.validate(3), Err(Error::Index { .. })));
    }

    #[test]
    fn full_mask_matches_dense_reference_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (t, d, heads) in [(1, 4, 2), (5, 8, 2), (9, 6, 3), (12, 8, 1)] {
            let x = random(&[t, d], &mut rng);
            let p = params(d, &mut rng);
            let (out, _) = attend_tensors(&x, &p, &build_full_mask(t).unwrap(), None, heads).unwrap();
            assert!(out.bit_eq(&reference_dense(&x, &p, heads)), "t={t} d={d} heads={heads}");
        }
    }

    #[test]
    fn attend_gradient_with_random_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = 6;
        let d = 4;
        let mask = AttentionMask::from_fn(t, t, |i, j| i == j || rng.random_bool(0.4));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![
            random(&[t, d], &mut rng),
            random(&[d, d], &mut rng),
            random(&[d, d], &mut rng),
            random(&[d, d], &mut rng),
            random(&[d, d], &mut rng),
            random(&[t, d], &mut rng),
        ];
        let proj = random(&[t, d], &mut rng);
        let report = grad_check(
            |tape, v| {
                let w = AttentionWeights { wq: v[1], wk: v[2], wv: v[3], wo: v[4] };
                let out = attend(tape, v[0], &w, &mask, Some(v[5]), 2)?;
                let c = tape.constant(proj.clone());
                let m = tape.mul(out.output, c)?;
                Ok(tape.sum(m))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn weights_are_row_stochastic(t in 1usize..12, w in 1usize..10, seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[t, 4], &mut rng).map(|v| 3.0 * v);
            let p = params(4, &mut rng);
            let mask = build_windowed_mask(t, w).unwrap();
            let (_, ws) = attend_tensors(&x, &p, &mask, None, 2).unwrap();
            for h in &ws {
                for i in 0..t {
                    let mut sum = 0.0;
                    for j in 0..t {
                        if mask.allowed(i, j) {
                            sum += h.at(i, j);
                        } else {
                            prop_assert_eq!(h.at(i, j).to_bits(), 0u64);
                        }
                    }
                    prop_assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
