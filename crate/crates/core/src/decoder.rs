//! Association-mask-aware self-attention over the activity axis.
//!
//! The decoder runs two attention branches over the encoded activity
//! vectors, one steered by the positive co-occurrence mask and one by the
//! negative mask, sums their outputs and scores each activity with its own
//! linear readout. Mask probabilities enter the attention additively in the
//! log domain, so a mask value of 1 is a no-op and 0 is a soft veto.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{softmax_lastdim, softmax_lastdim_backward, stable_sum, MASK_OFF};
use crate::tensor::Tensor;
use crate::textio::{read_csv_matrix, write_csv_matrix};
use rand::Rng;

/// Leakage floor added before taking logs of mask probabilities.
pub const MASK_EPSILON: f64 = 1e-6;

/// Empirical co-occurrence masks: `positive[i][j] = P(j active | i active)`
/// and `negative = 1 - positive`, both `A×A` with entries in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct AssociationMasks {
    pub positive: Tensor,
    pub negative: Tensor,
}

impl AssociationMasks {
    /// Builds the pair from the positive mask; the negative mask is its
    /// exact elementwise complement.
    pub fn from_positive(positive: Tensor) -> Result<Self> {
        if positive.rank() != 2 || positive.extent(0) != positive.extent(1) {
            return Err(Error::invalid(format!(
                "positive mask must be square, got {:?}",
                positive.shape()
            )));
        }
        if let Some(v) = positive.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "mask entry {v} outside [0, 1]"
            )));
        }
        let negative = Tensor::new(
            positive.shape(),
            positive.data().iter().map(|v| 1.0 - v).collect(),
        )?;
        Ok(AssociationMasks { positive, negative })
    }

    pub fn activities(&self) -> usize {
        self.positive.extent(0)
    }

    /// Writes `association_mask_positive.csv` and
    /// `association_mask_negative.csv` (rows = given activity, columns =
    /// other activity) with lossless 17-significant-digit values.
    pub fn write_csv(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let a = self.activities();
        let pos = dir.join("association_mask_positive.csv");
        let neg = dir.join("association_mask_negative.csv");
        write_csv_matrix(&pos, a, a, self.positive.data())?;
        write_csv_matrix(&neg, a, a, self.negative.data())?;
        Ok(vec![pos, neg])
    }

    pub fn read_csv(dir: &Path) -> Result<Self> {
        let (r, c, pos) = read_csv_matrix(&dir.join("association_mask_positive.csv"))?;
        if r != c {
            return Err(Error::format(format!("positive mask is {r}x{c}, not square")));
        }
        let (rn, cn, neg) = read_csv_matrix(&dir.join("association_mask_negative.csv"))?;
        if (rn, cn) != (r, c) {
            return Err(Error::format("mask files disagree on shape".to_string()));
        }
        let masks = AssociationMasks::from_positive(Tensor::new(&[r, c], pos)?)?;
        if masks.negative.data() != neg.as_slice() {
            return Err(Error::format(
                "negative mask is not the complement of the positive mask".to_string(),
            ));
        }
        Ok(masks)
    }
}

/// Counts co-occurrences in an `N×A` binary label matrix:
/// `positive[i][j] = count(i∧j)/count(i)`, zero (diagonal included) for
/// activities that never occur.
pub fn build_assoc_masks(labels: &[Vec<u8>], activities: usize) -> Result<AssociationMasks> {
    if labels.is_empty() {
        return Err(Error::invalid("need at least one label row"));
    }
    for (n, row) in labels.iter().enumerate() {
        if row.len() != activities {
            return Err(Error::ShapeMismatch {
                op: "build_assoc_masks",
                left: vec![row.len()],
                right: vec![activities],
            });
        }
        if let Some(v) = row.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!(
                "label row {n} contains non-binary value {v}"
            )));
        }
    }
    let mut pair = vec![0u64; activities * activities];
    let mut single = vec![0u64; activities];
    for row in labels {
        for i in 0..activities {
            if row[i] == 1 {
                single[i] += 1;
                for j in 0..activities {
                    if row[j] == 1 {
                        pair[i * activities + j] += 1;
                    }
                }
            }
        }
    }
    let mut positive = vec![0.0; activities * activities];
    for i in 0..activities {
        if single[i] > 0 {
            for j in 0..activities {
                positive[i * activities + j] = pair[i * activities + j] as f64 / single[i] as f64;
            }
        }
    }
    AssociationMasks::from_positive(Tensor::new(&[activities, activities], positive)?)
}

/// What steers the two decoder branches.
#[derive(Debug, Clone, Copy)]
pub enum DecoderMasking<'a> {
    /// Statistical co-occurrence masks injected as `log(M + ε)`.
    Association(&'a AssociationMasks),
    /// Ablation: plain forward/backward masks over the activity axis.
    Directional,
}

/// Additive `[A, A]` matrices for the (positive, negative) branches.
fn additive_branch_masks(masking: &DecoderMasking, activities: usize) -> (Tensor, Tensor) {
    match masking {
        DecoderMasking::Association(m) => {
            let log = |t: &Tensor| {
                Tensor::new(
                    t.shape(),
                    t.data().iter().map(|v| (v + MASK_EPSILON).ln()).collect(),
                )
                .unwrap()
            };
            (log(&m.positive), log(&m.negative))
        }
        DecoderMasking::Directional => {
            let mut fwd = vec![0.0; activities * activities];
            let mut bwd = vec![0.0; activities * activities];
            for i in 0..activities {
                for j in 0..activities {
                    if j > i {
                        fwd[i * activities + j] = MASK_OFF;
                    }
                    if j < i {
                        bwd[i * activities + j] = MASK_OFF;
                    }
                }
            }
            (
                Tensor::new(&[activities, activities], fwd).unwrap(),
                Tensor::new(&[activities, activities], bwd).unwrap(),
            )
        }
    }
}

/// Decoder parameters. Alignment is feature-wise ("multi-dimensional"): each
/// branch scores pair `(i, j)` with the vector `W¹f_i + W²f_j + b`; the
/// scalar fallback uses `(W¹f_i)·(W²f_j)/√F_out` instead.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    /// `[2, F_out, F_out]` per-branch query-side alignment.
    pub align_w1: Tensor,
    /// `[2, F_out, F_out]` per-branch key-side alignment.
    pub align_w2: Tensor,
    /// `[2, F_out]` per-branch alignment bias (unused in scalar mode).
    pub align_b: Tensor,
    /// `[F_out, F_out]` value projection shared by both branches.
    pub value_w: Tensor,
    /// `[A, F_out]` per-activity output scorers.
    pub out_w: Tensor,
    /// `[A]` per-activity output biases.
    pub out_b: Tensor,
    pub multi_dim: bool,
}

impl DecoderParams {
    pub fn init(activities: usize, out_dim: usize, multi_dim: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (out_dim as f64).sqrt();
        DecoderParams {
            align_w1: Tensor::uniform(&[2, out_dim, out_dim], -bound, bound, rng),
            align_w2: Tensor::uniform(&[2, out_dim, out_dim], -bound, bound, rng),
            align_b: Tensor::zeros(&[2, out_dim]),
            value_w: Tensor::uniform(&[out_dim, out_dim], -bound, bound, rng),
            out_w: Tensor::uniform(&[activities, out_dim], -bound, bound, rng),
            out_b: Tensor::zeros(&[activities]),
            multi_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.value_w.extent(0)
    }

    pub fn activities(&self) -> usize {
        self.out_w.extent(0)
    }
}

/// Intermediates of one decode pass.
pub struct DecodeCache {
    /// Per branch: `[A, F_out, A]` (multi-dim) or `[A, 1, A]` (scalar).
    alphas: [Tensor; 2],
    p1: [Tensor; 2],
    p2: [Tensor; 2],
    u: Tensor,
    dropped: Tensor,
}

fn project(w: &[f64], fa: &Tensor, fo: usize) -> Vec<f64> {
    // rows[i,c] = Σ_e w[c,e]·fa[i,e]
    let a = fa.extent(0);
    let mut out = vec![0.0; a * fo];
    for i in 0..a {
        let frow = &fa.data()[i * fo..(i + 1) * fo];
        for c in 0..fo {
            out[i * fo + c] = w[c * fo..(c + 1) * fo]
                .iter()
                .zip(frow)
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    out
}

/// Per-activity logits from the encoded activity vectors. `dropout_mask`,
/// when given, is an `[A, F_out]` keep/scale mask applied to the combined
/// branch output right before the per-activity scorers.
pub fn decode(
    fa: &Tensor,
    masking: DecoderMasking,
    params: &DecoderParams,
    dropout_mask: Option<&Tensor>,
) -> Result<Tensor> {
    decode_cached(fa, masking, params, dropout_mask).map(|(l, _)| l)
}

pub fn decode_cached(
    fa: &Tensor,
    masking: DecoderMasking,
    params: &DecoderParams,
    dropout_mask: Option<&Tensor>,
) -> Result<(Tensor, DecodeCache)> {
    let fo = params.out_dim();
    let a = params.activities();
    if fa.rank() != 2 || fa.extent(0) != a || fa.extent(1) != fo {
        return Err(Error::ShapeMismatch {
            op: "decode",
            left: fa.shape().to_vec(),
            right: vec![a, fo],
        });
    }
    if let DecoderMasking::Association(m) = &masking {
        if m.activities() != a {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: m.positive.shape().to_vec(),
                right: vec![a, a],
            });
        }
    }
    let (add_pos, add_neg) = additive_branch_masks(&masking, a);
    let u = Tensor::new(&[a, fo], project(params.value_w.data(), fa, fo))?;

    let mut alphas = Vec::with_capacity(2);
    let mut p1s = Vec::with_capacity(2);
    let mut p2s = Vec::with_capacity(2);
    let mut total = vec![0.0; a * fo];
    let mut addends = vec![0.0; a];
    for (branch, add) in [&add_pos, &add_neg].into_iter().enumerate() {
        let w1 = &params.align_w1.data()[branch * fo * fo..(branch + 1) * fo * fo];
        let w2 = &params.align_w2.data()[branch * fo * fo..(branch + 1) * fo * fo];
        let b = &params.align_b.data()[branch * fo..(branch + 1) * fo];
        let p1 = Tensor::new(&[a, fo], project(w1, fa, fo))?;
        let p2 = Tensor::new(&[a, fo], project(w2, fa, fo))?;
        let alpha = if params.multi_dim {
            let mut scores = vec![0.0; a * fo * a];
            for i in 0..a {
                for c in 0..fo {
                    for j in 0..a {
                        scores[(i * fo + c) * a + j] =
                            p1.data()[i * fo + c] + p2.data()[j * fo + c] + b[c];
                    }
                }
            }
            let mask3 = Tensor::new(&[a, 1, a], add.data().to_vec())?;
            softmax_lastdim(&Tensor::new(&[a, fo, a], scores)?, Some(&mask3))?
        } else {
            let scale = 1.0 / (fo as f64).sqrt();
            let mut scores = vec![0.0; a * a];
            for i in 0..a {
                for j in 0..a {
                    let mut s = 0.0;
                    for c in 0..fo {
                        s += p1.data()[i * fo + c] * p2.data()[j * fo + c];
                    }
                    scores[i * a + j] = s * scale;
                }
            }
            let mask3 = Tensor::new(&[a, 1, a], add.data().to_vec())?;
            softmax_lastdim(&Tensor::new(&[a, 1, a], scores)?, Some(&mask3))?
        };
        let width = alpha.extent(1);
        for i in 0..a {
            for c in 0..fo {
                let arow = &alpha.data()[(i * width + c.min(width - 1)) * a..][..a];
                for j in 0..a {
                    addends[j] = arow[j] * u.data()[j * fo + c];
                }
                total[i * fo + c] += stable_sum(&addends);
            }
        }
        alphas.push(alpha);
        p1s.push(p1);
        p2s.push(p2);
    }

    let dropped = match dropout_mask {
        Some(m) => {
            if m.shape() != [a, fo] {
                return Err(Error::ShapeMismatch {
                    op: "decode dropout",
                    left: m.shape().to_vec(),
                    right: vec![a, fo],
                });
            }
            Tensor::new(
                &[a, fo],
                total.iter().zip(m.data()).map(|(v, k)| v * k).collect(),
            )?
        }
        None => Tensor::new(&[a, fo], total)?,
    };

    let mut logits = vec![0.0; a];
    for i in 0..a {
        logits[i] = params.out_b.data()[i]
            + params.out_w.data()[i * fo..(i + 1) * fo]
                .iter()
                .zip(&dropped.data()[i * fo..(i + 1) * fo])
                .map(|(w, o)| w * o)
                .sum::<f64>();
    }
    let mut it = alphas.into_iter();
    let cache = DecodeCache {
        alphas: [it.next().unwrap(), it.next().unwrap()],
        p1: {
            let mut it = p1s.into_iter();
            [it.next().unwrap(), it.next().unwrap()]
        },
        p2: {
            let mut it = p2s.into_iter();
            [it.next().unwrap(), it.next().unwrap()]
        },
        u,
        dropped,
    };
    Ok((Tensor::new(&[a], logits)?, cache))
}

/// The post-softmax attention of both branches, `[A, F_out, A]` each in
/// multi-dim mode and `[A, 1, A]` in scalar mode.
pub fn decode_attention(
    fa: &Tensor,
    masking: DecoderMasking,
    params: &DecoderParams,
) -> Result<(Tensor, Tensor)> {
    let (_, cache) = decode_cached(fa, masking, params, None)?;
    let [pos, neg] = cache.alphas;
    Ok((pos, neg))
}

/// Backward of [`decode`]: accumulates parameter gradients and returns the
/// gradient on the activity vectors. `dropout_mask` must be the mask used in
/// the forward pass.
pub fn decode_backward(
    fa: &Tensor,
    params: &mut DecoderParams,
    cache: &DecodeCache,
    dropout_mask: Option<&Tensor>,
    dlogits: &Tensor,
) -> Tensor {
    let fo = params.out_dim();
    let a = params.activities();
    debug_assert_eq!(dlogits.shape(), &[a]);

    let mut d_total = vec![0.0; a * fo];
    {
        let g = dlogits.data();
        let out_w = params.out_w.data().to_vec();
        let dw = params.out_w.grad_mut();
        for i in 0..a {
            for c in 0..fo {
                dw[i * fo + c] += g[i] * cache.dropped.data()[i * fo + c];
                let keep = dropout_mask.map_or(1.0, |m| m.data()[i * fo + c]);
                d_total[i * fo + c] = g[i] * out_w[i * fo + c] * keep;
            }
        }
        let db = params.out_b.grad_mut();
        for i in 0..a {
            db[i] += g[i];
        }
    }

    let mut du = vec![0.0; a * fo];
    let mut dfa = vec![0.0; a * fo];
    let scale = 1.0 / (fo as f64).sqrt();
    for branch in 0..2 {
        let alpha = &cache.alphas[branch];
        let width = alpha.extent(1);
        let (dp1, dp2) = if params.multi_dim {
            let mut dalpha = vec![0.0; a * fo * a];
            for i in 0..a {
                for c in 0..fo {
                    for j in 0..a {
                        dalpha[(i * fo + c) * a + j] =
                            d_total[i * fo + c] * cache.u.data()[j * fo + c];
                        du[j * fo + c] +=
                            d_total[i * fo + c] * alpha.data()[(i * fo + c) * a + j];
                    }
                }
            }
            let ds = softmax_lastdim_backward(alpha, &Tensor::new(&[a, fo, a], dalpha).unwrap());
            let mut dp1 = vec![0.0; a * fo];
            let mut dp2 = vec![0.0; a * fo];
            let db = &mut params.align_b.grad_mut()[branch * fo..(branch + 1) * fo];
            for i in 0..a {
                for c in 0..fo {
                    for j in 0..a {
                        let v = ds.data()[(i * fo + c) * a + j];
                        dp1[i * fo + c] += v;
                        dp2[j * fo + c] += v;
                        db[c] += v;
                    }
                }
            }
            (dp1, dp2)
        } else {
            debug_assert_eq!(width, 1);
            // The bias does not enter scalar scores; its gradient is zero.
            params.align_b.grad_mut();
            let mut dalpha = vec![0.0; a * a];
            for i in 0..a {
                for j in 0..a {
                    let mut s = 0.0;
                    for c in 0..fo {
                        s += d_total[i * fo + c] * cache.u.data()[j * fo + c];
                        du[j * fo + c] += d_total[i * fo + c] * alpha.data()[i * a + j];
                    }
                    dalpha[i * a + j] = s;
                }
            }
            let ds = softmax_lastdim_backward(
                alpha,
                &Tensor::new(&[a, 1, a], dalpha).unwrap(),
            );
            let p1 = &cache.p1[branch];
            let p2 = &cache.p2[branch];
            let mut dp1 = vec![0.0; a * fo];
            let mut dp2 = vec![0.0; a * fo];
            for i in 0..a {
                for j in 0..a {
                    let v = ds.data()[i * a + j] * scale;
                    for c in 0..fo {
                        dp1[i * fo + c] += v * p2.data()[j * fo + c];
                        dp2[j * fo + c] += v * p1.data()[i * fo + c];
                    }
                }
            }
            (dp1, dp2)
        };
        // Alignment projections: p[i,c] = Σ_e w[c,e]·fa[i,e].
        let w1 = params.align_w1.data()[branch * fo * fo..(branch + 1) * fo * fo].to_vec();
        let w2 = params.align_w2.data()[branch * fo * fo..(branch + 1) * fo * fo].to_vec();
        {
            let dw1 = &mut params.align_w1.grad_mut()[branch * fo * fo..(branch + 1) * fo * fo];
            for i in 0..a {
                for c in 0..fo {
                    let v = dp1[i * fo + c];
                    for e in 0..fo {
                        dw1[c * fo + e] += v * fa.data()[i * fo + e];
                        dfa[i * fo + e] += v * w1[c * fo + e];
                    }
                }
            }
        }
        {
            let dw2 = &mut params.align_w2.grad_mut()[branch * fo * fo..(branch + 1) * fo * fo];
            for j in 0..a {
                for c in 0..fo {
                    let v = dp2[j * fo + c];
                    for e in 0..fo {
                        dw2[c * fo + e] += v * fa.data()[j * fo + e];
                        dfa[j * fo + e] += v * w2[c * fo + e];
                    }
                }
            }
        }
    }
    {
        let value_w = params.value_w.data().to_vec();
        let dvw = params.value_w.grad_mut();
        for j in 0..a {
            for c in 0..fo {
                let v = du[j * fo + c];
                for e in 0..fo {
                    dvw[c * fo + e] += v * fa.data()[j * fo + e];
                    dfa[j * fo + e] += v * value_w[c * fo + e];
                }
            }
        }
    }
    Tensor::new(&[a, fo], dfa).unwrap()
}

/// Numerically stable sigmoid.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy over activities, computed in the logit form
/// `max(z,0) - z·y + ln(1 + e^{-|z|})` which never evaluates `log 0`.
pub fn bce_loss(logits: &Tensor, targets: &[u8]) -> Result<f64> {
    if logits.numel() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "bce_loss",
            left: logits.shape().to_vec(),
            right: vec![targets.len()],
        });
    }
    if let Some(v) = targets.iter().find(|&&v| v > 1) {
        return Err(Error::invalid(format!("non-binary target {v}")));
    }
    let mut acc = 0.0;
    for (&z, &y) in logits.data().iter().zip(targets) {
        acc += z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p();
    }
    Ok(acc / targets.len() as f64)
}

/// Gradient of [`bce_loss`] on the logits: `(σ(z) - y) / A`.
pub fn bce_loss_backward(logits: &Tensor, targets: &[u8]) -> Tensor {
    let a = targets.len() as f64;
    Tensor::new(
        logits.shape(),
        logits
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| (sigmoid(z) - y as f64) / a)
            .collect(),
    )
    .unwrap()
}

/// Thresholds sigmoid scores into a binary prediction vector. The boundary
/// goes to the positive class.
pub fn predict(logits: &Tensor, threshold: f64) -> Vec<u8> {
    logits
        .data()
        .iter()
        .map(|&z| u8::from(sigmoid(z) >= threshold))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn labels(rows: &[&[u8]]) -> Vec<Vec<u8>> {
        rows.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn occurring_activity_has_unit_diagonal() {
        let masks = build_assoc_masks(&labels(&[&[1, 0], &[1, 1], &[0, 0]]), 2).unwrap();
        assert_eq!(masks.positive.at(&[0, 0]), 1.0);
        assert_eq!(masks.positive.at(&[1, 1]), 1.0);
    }

    #[test]
    fn four_sample_counting_example() {
        let masks =
            build_assoc_masks(&labels(&[&[1, 1], &[1, 0], &[0, 1], &[0, 0]]), 2).unwrap();
        assert_eq!(masks.positive.data(), &[1.0, 0.5, 0.5, 1.0]);
        assert_eq!(masks.negative.data(), &[0.0, 0.5, 0.5, 0.0]);
    }

    #[test]
    fn positive_plus_negative_is_one() {
        let masks = build_assoc_masks(&labels(&[&[1, 0, 1], &[0, 0, 1]]), 3).unwrap();
        for (p, n) in masks.positive.data().iter().zip(masks.negative.data()) {
            assert_eq!(p + n, 1.0);
        }
        // Never-occurring activity: positive row all zeros, negative all ones.
        assert_eq!(&masks.positive.data()[3..6], &[0.0, 0.0, 0.0]);
        assert_eq!(&masks.negative.data()[3..6], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_binary_labels_are_rejected() {
        assert!(build_assoc_masks(&labels(&[&[2, 0]]), 2).is_err());
    }

    #[test]
    fn matches_brute_force_counting_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        use rand::Rng;
        for _ in 0..50 {
            let n = rng.random_range(1..=20);
            let a = rng.random_range(1..=6);
            let rows: Vec<Vec<u8>> = (0..n)
                .map(|_| (0..a).map(|_| rng.random_range(0..=1u8)).collect())
                .collect();
            let masks = build_assoc_masks(&rows, a).unwrap();
            for i in 0..a {
                for j in 0..a {
                    let ci = rows.iter().filter(|r| r[i] == 1).count();
                    let cij = rows.iter().filter(|r| r[i] == 1 && r[j] == 1).count();
                    let expect = if ci > 0 { cij as f64 / ci as f64 } else { 0.0 };
                    assert_eq!(masks.positive.at(&[i, j]), expect);
                }
            }
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let masks =
            build_assoc_masks(&labels(&[&[1, 1, 0], &[1, 0, 0], &[1, 1, 1]]), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        masks.write_csv(dir.path()).unwrap();
        let back = AssociationMasks::read_csv(dir.path()).unwrap();
        for (a, b) in masks.positive.data().iter().zip(back.positive.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    fn ones_masks(a: usize) -> AssociationMasks {
        AssociationMasks::from_positive(Tensor::filled(&[a, a], 1.0)).unwrap()
    }

    #[test]
    fn single_activity_attends_itself_with_weight_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let params = DecoderParams::init(1, 3, true, &mut rng);
        let fa = Tensor::uniform(&[1, 3], -1.0, 1.0, &mut rng);
        let masks = ones_masks(1);
        let (logits, cache) =
            decode_cached(&fa, DecoderMasking::Association(&masks), &params, None).unwrap();
        for branch in 0..2 {
            assert!(cache.alphas[branch].data().iter().all(|&v| v == 1.0));
        }
        // Both branches attend the single activity: logit = w·(2·W^v f0) + b.
        let fo = 3;
        let mut expected = params.out_b.data()[0];
        for c in 0..fo {
            let u: f64 = (0..fo)
                .map(|e| params.value_w.data()[c * fo + e] * fa.data()[e])
                .sum();
            expected += params.out_w.data()[c] * 2.0 * u;
        }
        assert!(close(logits.data()[0], expected, 1e-12));
    }

    #[test]
    fn identical_rows_and_ones_masks_give_uniform_attention() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let params = DecoderParams::init(3, 2, true, &mut rng);
        let row = [0.3, -0.7];
        let fa = Tensor::new(&[3, 2], row.repeat(3)).unwrap();
        let masks = ones_masks(3);
        let (pos, neg) = decode_attention(&fa, DecoderMasking::Association(&masks), &params)
            .unwrap();
        for alpha in [pos, neg] {
            for &v in alpha.data() {
                assert!(close(v, 1.0 / 3.0, 1e-15));
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_and_masked_entries_leak_epsilon() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let params = DecoderParams::init(3, 2, true, &mut rng);
        // Identical rows make scores equal; the mask alone shapes attention.
        let fa = Tensor::new(&[3, 2], [0.5, 0.25].repeat(3)).unwrap();
        let mut positive = Tensor::filled(&[3, 3], 1.0);
        positive.data_mut()[1] = 0.0; // M[0,1] = 0
        let masks = AssociationMasks::from_positive(positive).unwrap();
        let (pos, _) = decode_attention(&fa, DecoderMasking::Association(&masks), &params)
            .unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let row = &pos.data()[(i * 2 + c) * 3..(i * 2 + c + 1) * 3];
                assert!(close(row.iter().sum::<f64>(), 1.0, 1e-9));
            }
        }
        // With equal scores the masked weight is exactly ε/(2(1+ε)+ε).
        let eps = MASK_EPSILON;
        let expect = eps / (2.0 * (1.0 + eps) + eps);
        for c in 0..2 {
            let got = pos.at(&[0, c, 1]);
            assert!(close(got, expect, 1e-12), "{got} vs {expect}");
            assert!(got < 1e-3);
        }
    }

    #[test]
    fn two_activity_scalar_width_matches_reference_loops() {
        // A=2, F_out=1: independent straight-line reimplementation.
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let params = DecoderParams::init(2, 1, true, &mut rng);
        let fa = Tensor::uniform(&[2, 1], -1.0, 1.0, &mut rng);
        let masks = build_assoc_masks(&labels(&[&[1, 1], &[1, 0], &[0, 1]]), 2).unwrap();
        let logits = decode(&fa, DecoderMasking::Association(&masks), &params, None).unwrap();

        let f = [fa.data()[0], fa.data()[1]];
        let u = [
            params.value_w.data()[0] * f[0],
            params.value_w.data()[0] * f[1],
        ];
        let mut o = [0.0, 0.0];
        for branch in 0..2 {
            let w1 = params.align_w1.data()[branch];
            let w2 = params.align_w2.data()[branch];
            let b = params.align_b.data()[branch];
            let m = if branch == 0 {
                &masks.positive
            } else {
                &masks.negative
            };
            for i in 0..2 {
                let mut weights = [0.0, 0.0];
                for j in 0..2 {
                    weights[j] = w1 * f[i] + w2 * f[j] + b + (m.at(&[i, j]) + MASK_EPSILON).ln();
                }
                let mx = weights[0].max(weights[1]);
                let e = [(weights[0] - mx).exp(), (weights[1] - mx).exp()];
                let denom = e[0] + e[1];
                o[i] += (e[0] / denom) * u[0] + (e[1] / denom) * u[1];
            }
        }
        for i in 0..2 {
            let expect = params.out_w.data()[i] * o[i] + params.out_b.data()[i];
            assert!(close(logits.data()[i], expect, 1e-12));
        }
    }

    #[test]
    fn all_ones_masks_are_permutation_equivariant() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut params = DecoderParams::init(3, 2, true, &mut rng);
        let fa = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let masks = ones_masks(3);
        let base = decode(&fa, DecoderMasking::Association(&masks), &params, None).unwrap();

        let perm = [2usize, 0, 1];
        let mut fa2 = vec![0.0; 6];
        let mut w2 = vec![0.0; 6];
        let mut b2 = vec![0.0; 3];
        for (dst, &src) in perm.iter().enumerate() {
            fa2[dst * 2..(dst + 1) * 2].copy_from_slice(&fa.data()[src * 2..(src + 1) * 2]);
            w2[dst * 2..(dst + 1) * 2]
                .copy_from_slice(&params.out_w.data()[src * 2..(src + 1) * 2]);
            b2[dst] = params.out_b.data()[src];
        }
        params.out_w = Tensor::new(&[3, 2], w2).unwrap();
        params.out_b = Tensor::new(&[3], b2).unwrap();
        let permuted = decode(
            &Tensor::new(&[3, 2], fa2).unwrap(),
            DecoderMasking::Association(&masks),
            &params,
            None,
        )
        .unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                permuted.data()[dst].to_bits(),
                base.data()[src].to_bits()
            );
        }
    }

    #[test]
    fn bce_examples() {
        let l = bce_loss(&Tensor::new(&[2], vec![0.0, 0.0]).unwrap(), &[0, 1]).unwrap();
        assert!(close(l, 2f64.ln(), 1e-12));
        let l = bce_loss(&Tensor::new(&[1], vec![20.0]).unwrap(), &[1]).unwrap();
        assert!(l < 1e-8);
        let l = bce_loss(&Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), &[1, 0]).unwrap();
        // Direct σ/log evaluation.
        let direct = -(sigmoid(1.0).ln() + (1.0 - sigmoid(-1.0)).ln()) / 2.0;
        assert!(close(l, direct, 1e-12));
        assert!(close(l, 0.3133, 1e-4));
    }

    #[test]
    fn bce_is_stable_at_extreme_logits() {
        let l = bce_loss(&Tensor::new(&[2], vec![800.0, -800.0]).unwrap(), &[0, 1]).unwrap();
        assert!(l.is_finite() && l > 100.0);
    }

    #[test]
    fn predict_thresholds() {
        let logits = Tensor::new(&[2], vec![3.0, -3.0]).unwrap();
        assert_eq!(predict(&logits, 0.5), vec![1, 0]);
        assert_eq!(predict(&Tensor::new(&[1], vec![0.0]).unwrap(), 0.5), vec![1]);
        // σ(1.0) ≈ 0.731 < 0.9.
        assert_eq!(predict(&Tensor::new(&[1], vec![1.0]).unwrap(), 0.9), vec![0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        for multi_dim in [true, false] {
            let params = DecoderParams::init(3, 2, multi_dim, &mut rng);
            let mut with_bias = params.clone();
            // Nonzero biases so their gradients are exercised too.
            with_bias.align_b = Tensor::uniform(&[2, 2], -0.5, 0.5, &mut rng);
            with_bias.out_b = Tensor::uniform(&[3], -0.5, 0.5, &mut rng);
            let params = with_bias;
            let fa = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
            let masks =
                build_assoc_masks(&labels(&[&[1, 1, 0], &[0, 1, 1], &[1, 0, 0]]), 3).unwrap();
            let targets = [1u8, 0, 1];

            let loss_with = |p: &DecoderParams, fa: &Tensor| -> Result<f64> {
                let logits = decode(fa, DecoderMasking::Association(&masks), p, None)?;
                bce_loss(&logits, &targets)
            };

            let mut p = params.clone();
            let (logits, cache) =
                decode_cached(&fa, DecoderMasking::Association(&masks), &p, None).unwrap();
            let dlogits = bce_loss_backward(&logits, &targets);
            let dfa = decode_backward(&fa, &mut p, &cache, None, &dlogits);

            macro_rules! check {
                ($field:ident) => {{
                    let numeric = finite_diff_grad(
                        |t| {
                            let mut q = params.clone();
                            q.$field = t.clone();
                            loss_with(&q, &fa)
                        },
                        &params.$field,
                        1e-5,
                    )
                    .unwrap();
                    let rel =
                        max_relative_error(p.$field.grad().unwrap(), numeric.data());
                    assert!(rel < 1e-4, "{} rel err {rel} (multi_dim={multi_dim})",
                        stringify!($field));
                }};
            }
            check!(align_w1);
            check!(align_w2);
            check!(align_b);
            check!(value_w);
            check!(out_w);
            check!(out_b);

            let nfa = finite_diff_grad(|t| loss_with(&params, t), &fa, 1e-5).unwrap();
            assert!(max_relative_error(dfa.data(), nfa.data()) < 1e-4);
        }
    }

    #[test]
    fn dropout_path_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let params = DecoderParams::init(3, 2, true, &mut rng);
        let fa = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let masks = build_assoc_masks(&labels(&[&[1, 1, 0], &[0, 1, 1]]), 3).unwrap();
        let targets = [1u8, 0, 1];
        // A fixed keep/scale mask with one dropped entry.
        let mut keep = Tensor::filled(&[3, 2], 2.0);
        keep.data_mut()[3] = 0.0;

        let mut p = params.clone();
        let (logits, cache) = decode_cached(
            &fa,
            DecoderMasking::Association(&masks),
            &p,
            Some(&keep),
        )
        .unwrap();
        let dlogits = bce_loss_backward(&logits, &targets);
        let dfa = decode_backward(&fa, &mut p, &cache, Some(&keep), &dlogits);

        let loss = |fa: &Tensor, q: &DecoderParams| -> Result<f64> {
            let logits = decode(fa, DecoderMasking::Association(&masks), q, Some(&keep))?;
            bce_loss(&logits, &targets)
        };
        let nfa = finite_diff_grad(|t| loss(t, &params), &fa, 1e-5).unwrap();
        assert!(max_relative_error(dfa.data(), nfa.data()) < 1e-4);
        let nw = finite_diff_grad(
            |t| {
                let mut q = params.clone();
                q.out_w = t.clone();
                loss(&fa, &q)
            },
            &params.out_w,
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(p.out_w.grad().unwrap(), nw.data()) < 1e-4);
    }

    #[test]
    fn directional_masking_is_triangular() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let params = DecoderParams::init(3, 2, true, &mut rng);
        let fa = Tensor::uniform(&[3, 2], -1.0, 1.0, &mut rng);
        let (pos, neg) = decode_attention(&fa, DecoderMasking::Directional, &params).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                for j in 0..3 {
                    let pv = pos.at(&[i, c, j]);
                    let nv = neg.at(&[i, c, j]);
                    if j > i {
                        assert!(pv < 1e-12);
                    }
                    if j < i {
                        assert!(nv < 1e-12);
                    }
                }
            }
        }
    }
}
