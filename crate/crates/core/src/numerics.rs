//! Deterministic dense-tensor arithmetic: matrix products, masked softmax,
//! dropout, and the central-difference gradient oracle.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive sentinel for masked-out attention positions. Finite on purpose:
/// `exp(-1e9 - max)` underflows to zero without poisoning backward passes.
pub const MASK_OFF: f64 = -1e9;

/// Threshold below which an additive mask entry counts as "off".
const MASK_OFF_THRESHOLD: f64 = -1e8;

/// Sums values in a canonical order (sorted by total order of the bits), so
/// the result depends only on the multiset of addends. Reductions that must
/// be exactly invariant under input permutation go through here.
pub fn stable_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        _ => {
            let mut sorted = values.to_vec();
            sorted.sort_unstable_by(f64::total_cmp);
            sorted.iter().sum()
        }
    }
}

/// Standard 2-D matrix product `a[m×n] · b[n×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0) {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (m, n, p) = (a.extent(0), a.extent(1), b.extent(1));
    let mut out = vec![0.0; m * p];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for k in 0..n {
            let aik = ad[i * n + k];
            let brow = &bd[k * p..(k + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(&[m, p], out)
}

/// Reverse-mode rule for `matmul`: returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let (m, n, p) = (a.extent(0), a.extent(1), b.extent(1));
    debug_assert_eq!(grad_out.shape(), &[m, p]);
    let g = grad_out.data();
    let ad = a.data();
    let bd = b.data();
    let mut da = vec![0.0; m * n];
    let mut db = vec![0.0; n * p];
    for i in 0..m {
        for k in 0..n {
            let mut s = 0.0;
            for j in 0..p {
                s += g[i * p + j] * bd[k * p + j];
            }
            da[i * n + k] = s;
        }
    }
    for k in 0..n {
        for i in 0..m {
            let aik = ad[i * n + k];
            for j in 0..p {
                db[k * p + j] += aik * g[i * p + j];
            }
        }
    }
    (
        Tensor::new(&[m, n], da).unwrap(),
        Tensor::new(&[n, p], db).unwrap(),
    )
}

/// `a[m×k] · b[n×k]ᵀ -> [m×n]` on raw row-major slices.
pub(crate) fn mat_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k×m]ᵀ · b[k×n] -> [m×n]` on raw row-major slices.
pub(crate) fn mat_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            for j in 0..n {
                out[i * n + j] += av * brow[j];
            }
        }
    }
    out
}

/// `a[m×k] · b[k×n] -> [m×n]` on raw row-major slices.
pub(crate) fn mat_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn broadcast_strides(op: &'static str, x: &Tensor, mask: &Tensor) -> Result<Vec<usize>> {
    if mask.rank() != x.rank() {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let mut strides = vec![0usize; x.rank()];
    let mut acc = 1;
    for axis in (0..x.rank()).rev() {
        let (xe, me) = (x.extent(axis), mask.extent(axis));
        if me == xe {
            strides[axis] = acc;
        } else if me == 1 {
            strides[axis] = 0;
        } else {
            return Err(Error::ShapeMismatch {
                op,
                left: x.shape().to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        acc *= me;
    }
    Ok(strides)
}

/// Softmax over the last axis with an optional additive mask.
///
/// The mask must have the same rank, with each extent equal to the input's or
/// 1 (broadcast). Masked-out entries carry the [`MASK_OFF`] sentinel. Every
/// output slice is nonnegative and sums to 1; a slice whose mask disables all
/// positions is an error.
pub fn softmax_lastdim(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let n = *x.shape().last().expect("softmax on rank-0 tensor");
    let slices = x.numel() / n;
    let mstrides = match mask {
        Some(m) => Some(broadcast_strides("softmax_lastdim", x, m)?),
        None => None,
    };
    let mut out = vec![0.0; x.numel()];
    let mut scores = vec![0.0; n];
    let xd = x.data();
    for s in 0..slices {
        let base = s * n;
        let mut all_masked = mask.is_some();
        for j in 0..n {
            let mut v = xd[base + j];
            if let (Some(m), Some(ms)) = (mask, mstrides.as_deref()) {
                let mut flat_in = base + j;
                let mut flat_mask = 0;
                // Walk axes from last to first, mapping the input index onto
                // the (possibly broadcast) mask index.
                for axis in (0..x.rank()).rev() {
                    let coord = flat_in % x.extent(axis);
                    flat_in /= x.extent(axis);
                    flat_mask += coord.min(m.extent(axis) - 1) * ms[axis];
                }
                let mv = m.data()[flat_mask];
                if mv > MASK_OFF_THRESHOLD {
                    all_masked = false;
                }
                v += mv;
            }
            scores[j] = v;
        }
        if all_masked {
            return Err(Error::FullyMaskedRow { row: s });
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for j in 0..n {
            scores[j] = (scores[j] - max).exp();
        }
        let denom = stable_sum(&scores);
        for j in 0..n {
            out[base + j] = scores[j] / denom;
        }
    }
    Tensor::new(x.shape(), out)
}

/// Reverse-mode rule for `softmax_lastdim` given its output `y`:
/// `dx = y ⊙ (g − Σ_lastdim(g ⊙ y))`. The additive mask takes no gradient.
pub fn softmax_lastdim_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(y.shape(), grad_out.shape());
    let n = *y.shape().last().unwrap();
    let slices = y.numel() / n;
    let mut dx = vec![0.0; y.numel()];
    let yd = y.data();
    let gd = grad_out.data();
    for s in 0..slices {
        let base = s * n;
        let mut dot = 0.0;
        for j in 0..n {
            dot += gd[base + j] * yd[base + j];
        }
        for j in 0..n {
            dx[base + j] = yd[base + j] * (gd[base + j] - dot);
        }
    }
    Tensor::new(y.shape(), dx).unwrap()
}

/// Seeded keep/scale mask for inverted dropout: entries are 0 with
/// probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    let numel: usize = shape.iter().product();
    let keep_scale = 1.0 / (1.0 - rate);
    let data = (0..numel)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep_scale
            }
        })
        .collect();
    Tensor::new(shape, data)
}

/// Inverted dropout: identity when not training, otherwise kept entries are
/// rescaled by `1/(1-rate)` so the expectation matches the input.
pub fn dropout(x: &Tensor, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Tensor> {
    if !training {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.shape(), rate, rng)?;
    let data = x
        .data()
        .iter()
        .zip(mask.data())
        .map(|(v, m)| v * m)
        .collect();
    Tensor::new(x.shape(), data)
}

/// Central-difference gradient of a scalar-valued function at `x`.
///
/// This is the independent oracle the reverse-mode implementation is checked
/// against; it must stay free of any analytic-gradient code.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("step size h={h} must be positive")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad: f non-finite at perturbed element {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape(), grad)
}

/// Elementwise maximum relative error between two gradient buffers.
///
/// The denominator is floored at 1e-6 so that elements whose true gradient is
/// essentially zero are compared absolutely instead of blowing up the ratio.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
