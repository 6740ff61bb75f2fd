//! Per-activity temporal self-attention: scaled dot-product over frames with
//! directional masks instead of positional embeddings, then aggregation over
//! time into one vector per activity.
//!
//! Each activity's sequence is encoded independently; the query, key and
//! value inputs are all the same per-activity feature sequence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    mat_nn, mat_nt, mat_tn, softmax_lastdim, softmax_lastdim_backward, stable_sum, MASK_OFF,
};
use crate::tensor::Tensor;
use crate::textio::write_csv_matrix;
use rand::Rng;

/// Which frames each query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskDirection {
    /// Attend to the current and earlier frames (t' ≤ t).
    Forward,
    /// Attend to the current and later frames (t' ≥ t).
    Backward,
    /// No restriction.
    Unmasked,
}

impl MaskDirection {
    pub fn label(self) -> &'static str {
        match self {
            MaskDirection::Forward => "forward",
            MaskDirection::Backward => "backward",
            MaskDirection::Unmasked => "unmasked",
        }
    }
}

/// A direction realized as a `[T, T]` additive matrix of `{0, MASK_OFF}`.
/// The diagonal is always allowed so no query row can end up fully masked.
#[derive(Debug, Clone)]
pub struct TemporalMask {
    pub direction: MaskDirection,
    pub matrix: Tensor,
}

impl TemporalMask {
    pub fn new(direction: MaskDirection, frames: usize) -> Self {
        let mut data = vec![0.0; frames * frames];
        for t in 0..frames {
            for tp in 0..frames {
                let allowed = match direction {
                    MaskDirection::Forward => tp <= t,
                    MaskDirection::Backward => tp >= t,
                    MaskDirection::Unmasked => true,
                };
                if !allowed {
                    data[t * frames + tp] = MASK_OFF;
                }
            }
        }
        TemporalMask {
            direction,
            matrix: Tensor::new(&[frames, frames], data).unwrap(),
        }
    }
}

/// How the two directional branch outputs are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchFusion {
    /// Output is `(forward + backward) / 2`, width `d`.
    Average,
    /// Outputs are concatenated, width `2d`.
    Concat,
}

/// Query/key/value projections, either one triple per activity or a single
/// shared triple.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// `[G, F, d]` with `G = A` (per-activity) or `G = 1` (shared).
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub per_activity: bool,
}

impl EncoderParams {
    /// Seeded uniform init over `[-1/√F, 1/√F]`.
    pub fn init(
        activities: usize,
        feature_dim: usize,
        proj_dim: usize,
        per_activity: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let groups = if per_activity { activities } else { 1 };
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let shape = [groups, feature_dim, proj_dim];
        EncoderParams {
            wq: Tensor::uniform(&shape, -bound, bound, rng),
            wk: Tensor::uniform(&shape, -bound, bound, rng),
            wv: Tensor::uniform(&shape, -bound, bound, rng),
            per_activity,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.wq.extent(1)
    }

    pub fn proj_dim(&self) -> usize {
        self.wq.extent(2)
    }

    fn group(&self, activity: usize) -> usize {
        if self.per_activity {
            activity
        } else {
            0
        }
    }

    fn slices(&self, activity: usize) -> (&[f64], &[f64], &[f64]) {
        let g = self.group(activity);
        let len = self.feature_dim() * self.proj_dim();
        (
            &self.wq.data()[g * len..(g + 1) * len],
            &self.wk.data()[g * len..(g + 1) * len],
            &self.wv.data()[g * len..(g + 1) * len],
        )
    }
}

/// Mask directions and fusion mode for one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderSettings {
    pub temporal_masks: bool,
    pub fusion: BranchFusion,
}

impl EncoderSettings {
    pub fn directions(&self) -> Vec<MaskDirection> {
        if self.temporal_masks {
            vec![MaskDirection::Forward, MaskDirection::Backward]
        } else {
            vec![MaskDirection::Unmasked]
        }
    }

    /// Output width per activity given projection width `d`.
    pub fn out_dim(&self, proj_dim: usize) -> usize {
        if self.temporal_masks && self.fusion == BranchFusion::Concat {
            2 * proj_dim
        } else {
            proj_dim
        }
    }
}

/// Intermediates of one scaled dot-product pass.
#[derive(Debug, Clone)]
pub struct AttendCache {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Post-softmax attention, rows = query frame.
    pub probs: Tensor,
}

/// Scaled dot-product self-attention of one activity's `[T, F]` sequence:
/// `softmax((seq·Wq)(seq·Wk)ᵀ/√d + mask) · (seq·Wv)`, returning `[T, d]`.
pub fn scaled_dot_attend(
    seq: &Tensor,
    params: &EncoderParams,
    activity: usize,
    mask: &TemporalMask,
) -> Result<Tensor> {
    scaled_dot_attend_cached(seq, params, activity, mask).map(|(o, _)| o)
}

pub fn scaled_dot_attend_cached(
    seq: &Tensor,
    params: &EncoderParams,
    activity: usize,
    mask: &TemporalMask,
) -> Result<(Tensor, AttendCache)> {
    let f = params.feature_dim();
    let d = params.proj_dim();
    if seq.rank() != 2 || seq.extent(1) != f {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attend",
            left: seq.shape().to_vec(),
            right: vec![f, d],
        });
    }
    let t = seq.extent(0);
    if mask.matrix.extent(0) != t {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_attend",
            left: vec![t],
            right: mask.matrix.shape().to_vec(),
        });
    }
    let (wq, wk, wv) = params.slices(activity);
    let q = Tensor::new(&[t, d], mat_nn(seq.data(), wq, t, f, d))?;
    let k = Tensor::new(&[t, d], mat_nn(seq.data(), wk, t, f, d))?;
    let v = Tensor::new(&[t, d], mat_nn(seq.data(), wv, t, f, d))?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = mat_nt(q.data(), k.data(), t, d, t);
    scores.iter_mut().for_each(|s| *s *= scale);
    let probs = softmax_lastdim(&Tensor::new(&[t, t], scores)?, Some(&mask.matrix))?;

    // Attention-weighted values, summed in canonical order so an unmasked
    // pass is exactly frame-permutation invariant.
    let mut out = vec![0.0; t * d];
    let mut addends = vec![0.0; t];
    for ti in 0..t {
        for c in 0..d {
            for tp in 0..t {
                addends[tp] = probs.data()[ti * t + tp] * v.data()[tp * d + c];
            }
            out[ti * d + c] = stable_sum(&addends);
        }
    }
    Ok((
        Tensor::new(&[t, d], out)?,
        AttendCache { q, k, v, probs },
    ))
}

/// Backward of one attention pass. Accumulates projection gradients into
/// `params` and returns the gradient on the input sequence.
pub fn scaled_dot_attend_backward(
    seq: &Tensor,
    params: &mut EncoderParams,
    activity: usize,
    cache: &AttendCache,
    grad_out: &Tensor,
) -> Tensor {
    let f = params.feature_dim();
    let d = params.proj_dim();
    let t = seq.extent(0);
    debug_assert_eq!(grad_out.shape(), &[t, d]);
    let probs = &cache.probs;

    // dP = gᵀ-weighted values; dV = Pᵀ·g.
    let dp = Tensor::new(&[t, t], mat_nt(grad_out.data(), cache.v.data(), t, d, t)).unwrap();
    let dv = mat_tn(probs.data(), grad_out.data(), t, t, d);
    let mut ds = softmax_lastdim_backward(probs, &dp);
    let scale = 1.0 / (d as f64).sqrt();
    ds.data_mut().iter_mut().for_each(|v| *v *= scale);
    let dq = mat_nn(ds.data(), cache.k.data(), t, t, d);
    let dk = mat_tn(ds.data(), cache.q.data(), t, t, d);

    let (wq, wk, wv) = params.slices(activity);
    let (wq, wk, wv) = (wq.to_vec(), wk.to_vec(), wv.to_vec());
    let mut dseq = vec![0.0; t * f];
    for (dproj, w) in [(&dq, &wq), (&dk, &wk), (&dv, &wv)] {
        let part = mat_nt(dproj, w, t, d, f);
        dseq.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
    }

    let g = params.group(activity);
    let len = f * d;
    for (dproj, wgrad) in [
        (&dq, params.wq.grad_mut()),
        (&dk, params.wk.grad_mut()),
        (&dv, params.wv.grad_mut()),
    ] {
        let dw = mat_tn(seq.data(), dproj, t, f, d);
        wgrad[g * len..(g + 1) * len]
            .iter_mut()
            .zip(&dw)
            .for_each(|(a, b)| *a += b);
    }
    Tensor::new(&[t, f], dseq).unwrap()
}

/// Per-activity, per-branch intermediates of a full encode pass.
pub struct EncodeCache {
    seqs: Vec<Tensor>,
    branches: Vec<Vec<AttendCache>>,
}

impl EncodeCache {
    /// Post-softmax attention grid for one activity and branch index.
    pub fn attention(&self, activity: usize, branch: usize) -> &Tensor {
        &self.branches[activity][branch].probs
    }
}

/// Encodes `[T, A, F]` per-activity sequences into temporal features
/// `[T, A, F_out]` and their time-aggregated activity vectors `[A, F_out]`.
/// Activities never mix here.
pub fn encode(
    fm: &Tensor,
    params: &EncoderParams,
    settings: &EncoderSettings,
) -> Result<(Tensor, Tensor)> {
    encode_cached(fm, params, settings).map(|(fta, fa, _)| (fta, fa))
}

pub fn encode_cached(
    fm: &Tensor,
    params: &EncoderParams,
    settings: &EncoderSettings,
) -> Result<(Tensor, Tensor, EncodeCache)> {
    let f = params.feature_dim();
    if fm.rank() != 3 || fm.extent(2) != f {
        return Err(Error::ShapeMismatch {
            op: "encode",
            left: fm.shape().to_vec(),
            right: vec![f],
        });
    }
    let (t, a) = (fm.extent(0), fm.extent(1));
    let d = params.proj_dim();
    let directions = settings.directions();
    let fo = settings.out_dim(d);
    let averaging = directions.len() == 2 && settings.fusion == BranchFusion::Average;

    let mut fta = vec![0.0; t * a * fo];
    let mut fa = vec![0.0; a * fo];
    let mut cache = EncodeCache {
        seqs: Vec::with_capacity(a),
        branches: Vec::with_capacity(a),
    };
    let mut addends = vec![0.0; t];
    for ai in 0..a {
        let mut seq = vec![0.0; t * f];
        for ti in 0..t {
            seq[ti * f..(ti + 1) * f]
                .copy_from_slice(&fm.data()[(ti * a + ai) * f..(ti * a + ai) * f + f]);
        }
        let seq = Tensor::new(&[t, f], seq)?;
        let mut branch_caches = Vec::with_capacity(directions.len());
        for (bi, &dir) in directions.iter().enumerate() {
            let mask = TemporalMask::new(dir, t);
            let (out, bc) = scaled_dot_attend_cached(&seq, params, ai, &mask)?;
            branch_caches.push(bc);
            for ti in 0..t {
                for c in 0..d {
                    let dst = if averaging || directions.len() == 1 {
                        (ti * a + ai) * fo + c
                    } else {
                        (ti * a + ai) * fo + bi * d + c
                    };
                    let w = if averaging { 0.5 } else { 1.0 };
                    fta[dst] += w * out.data()[ti * d + c];
                }
            }
        }
        cache.seqs.push(seq);
        cache.branches.push(branch_caches);
        for c in 0..fo {
            for ti in 0..t {
                addends[ti] = fta[(ti * a + ai) * fo + c];
            }
            fa[ai * fo + c] = stable_sum(&addends);
        }
    }
    Ok((
        Tensor::new(&[t, a, fo], fta)?,
        Tensor::new(&[a, fo], fa)?,
        cache,
    ))
}

/// Backward of [`encode`] given the gradient on the activity vectors.
/// Accumulates projection gradients and returns the gradient on `fm`.
pub fn encode_backward(
    fm: &Tensor,
    params: &mut EncoderParams,
    settings: &EncoderSettings,
    cache: &EncodeCache,
    dfa: &Tensor,
) -> Tensor {
    let f = params.feature_dim();
    let d = params.proj_dim();
    let (t, a) = (fm.extent(0), fm.extent(1));
    let directions = settings.directions();
    let fo = settings.out_dim(d);
    debug_assert_eq!(dfa.shape(), &[a, fo]);
    let averaging = directions.len() == 2 && settings.fusion == BranchFusion::Average;

    let mut dfm = vec![0.0; t * a * f];
    for ai in 0..a {
        for (bi, _) in directions.iter().enumerate() {
            // Time aggregation broadcasts dfa over frames; averaging halves it.
            let mut dout = vec![0.0; t * d];
            for ti in 0..t {
                for c in 0..d {
                    let src = if averaging || directions.len() == 1 {
                        ai * fo + c
                    } else {
                        ai * fo + bi * d + c
                    };
                    let w = if averaging { 0.5 } else { 1.0 };
                    dout[ti * d + c] = w * dfa.data()[src];
                }
            }
            let dout = Tensor::new(&[t, d], dout).unwrap();
            let dseq = scaled_dot_attend_backward(
                &cache.seqs[ai],
                params,
                ai,
                &cache.branches[ai][bi],
                &dout,
            );
            for ti in 0..t {
                for fi in 0..f {
                    dfm[(ti * a + ai) * f + fi] += dseq.data()[ti * f + fi];
                }
            }
        }
    }
    Tensor::new(&[t, a, f], dfm).unwrap()
}

/// One exported post-softmax attention grid.
pub struct TemporalAttentionGrid {
    pub activity: usize,
    pub direction: MaskDirection,
    /// `[T, T]`, rows = query frame, columns = key frame.
    pub probs: Tensor,
}

/// The post-softmax attention matrices for every activity and direction,
/// exactly as computed inside [`encode`].
pub fn export_temporal_attention(
    fm: &Tensor,
    params: &EncoderParams,
    settings: &EncoderSettings,
) -> Result<Vec<TemporalAttentionGrid>> {
    let (_, _, cache) = encode_cached(fm, params, settings)?;
    let directions = settings.directions();
    let mut grids = Vec::new();
    for (ai, branches) in cache.branches.iter().enumerate() {
        for (bi, bc) in branches.iter().enumerate() {
            grids.push(TemporalAttentionGrid {
                activity: ai,
                direction: directions[bi],
                probs: bc.probs.clone(),
            });
        }
    }
    Ok(grids)
}

/// Writes one CSV per (activity, direction); returns the paths.
pub fn write_temporal_attention(
    grids: &[TemporalAttentionGrid],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for g in grids {
        let t = g.probs.extent(0);
        let path = dir.join(format!(
            "temporal_attention_a{:02}_{}.csv",
            g.activity,
            g.direction.label()
        ));
        write_csv_matrix(&path, t, t, g.probs.data())?;
        written.push(path);
    }
    Ok(written)
}
