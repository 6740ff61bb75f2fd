//! Soft-assignment residual clustering of per-frame, per-location feature
//! descriptors, with K-means centroid initialization.
//!
//! Each descriptor is assigned softly to every centroid and contributes its
//! weighted residual; the per-location residual blocks are kept unaggregated
//! so later stages can attend over space and time.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::numerics::stable_sum;
use crate::tensor::Tensor;

/// K cluster centroids plus the sharpness scalar of the soft assignment.
/// Both are trainable after initialization.
#[derive(Debug, Clone)]
pub struct ClusterCodebook {
    /// `[K, C']` centroid matrix.
    pub centroids: Tensor,
    /// `[1]` sharpness; larger values make assignments harder.
    pub alpha: Tensor,
}

impl ClusterCodebook {
    pub fn new(centroids: Tensor, alpha: f64) -> Result<Self> {
        if centroids.rank() != 2 {
            return Err(Error::invalid(format!(
                "centroids must be [K, C'], got {:?}",
                centroids.shape()
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("alpha {alpha} must be positive")));
        }
        centroids.ensure_finite("centroids")?;
        Ok(ClusterCodebook {
            centroids,
            alpha: Tensor::scalar(alpha),
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.extent(0)
    }

    pub fn channels(&self) -> usize {
        self.centroids.extent(1)
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha.data()[0]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Lloyd's algorithm with seeded distinct-point initialization.
///
/// `descriptors` is an `[N, C']` matrix of rows to cluster. Clusters that
/// empty out are re-seeded to the point farthest from its assigned centroid.
pub fn kmeans_init(
    descriptors: &Tensor,
    k: usize,
    seed: u64,
    max_iters: usize,
    alpha: f64,
) -> Result<ClusterCodebook> {
    if descriptors.rank() != 2 {
        return Err(Error::invalid(format!(
            "descriptors must be [N, C'], got {:?}",
            descriptors.shape()
        )));
    }
    if k == 0 || max_iters == 0 {
        return Err(Error::invalid("need k >= 1 and max_iters >= 1"));
    }
    let n = descriptors.extent(0);
    let c = descriptors.extent(1);
    let row = |i: usize| &descriptors.data()[i * c..(i + 1) * c];

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &i in &order {
        if centroids.iter().any(|sel| sel.as_slice() == row(i)) {
            continue;
        }
        centroids.push(row(i).to_vec());
        if centroids.len() == k {
            break;
        }
    }
    if centroids.len() < k {
        return Err(Error::Init(format!(
            "k-means needs {k} distinct descriptors, found {}",
            centroids.len()
        )));
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, cent) in centroids.iter().enumerate() {
                let d = sq_dist(row(i), cent);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; c]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        // Points ranked by distance to their centroid, farthest first, used
        // to reseed any cluster that emptied out.
        let mut farthest: Vec<usize> = (0..n).collect();
        farthest.sort_by(|&a, &b| {
            let da = sq_dist(row(a), &centroids[assign[a]]);
            let db = sq_dist(row(b), &centroids[assign[b]]);
            db.total_cmp(&da).then(a.cmp(&b))
        });
        let mut next_far = farthest.into_iter();
        for ci in 0..k {
            if counts[ci] == 0 {
                if let Some(i) = next_far.next() {
                    centroids[ci] = row(i).to_vec();
                }
            } else {
                for (dst, s) in centroids[ci].iter_mut().zip(&sums[ci]) {
                    *dst = s / counts[ci] as f64;
                }
            }
        }
    }

    let flat: Vec<f64> = centroids.into_iter().flatten().collect();
    ClusterCodebook::new(Tensor::new(&[k, c], flat)?, alpha)
}

/// Soft-assignment weights of one descriptor against every centroid:
/// `exp(-α‖x-c_k‖²)` normalized over k, computed max-stable. Sums to one.
pub fn soft_assign(x: &[f64], codebook: &ClusterCodebook) -> Vec<f64> {
    let (weights, _) = assign_with_dists(x, codebook);
    weights
}

fn assign_with_dists(x: &[f64], codebook: &ClusterCodebook) -> (Vec<f64>, Vec<f64>) {
    let k = codebook.k();
    let c = codebook.channels();
    debug_assert_eq!(x.len(), c);
    let alpha = codebook.alpha_value();
    let mut dists = vec![0.0; k];
    let mut scores = vec![0.0; k];
    for ki in 0..k {
        let cent = &codebook.centroids.data()[ki * c..(ki + 1) * c];
        dists[ki] = sq_dist(x, cent);
        scores[ki] = -alpha * dists[ki];
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
    }
    let denom = stable_sum(&scores);
    for s in scores.iter_mut() {
        *s /= denom;
    }
    (scores, dists)
}

/// Per-location intermediates kept for the backward pass.
#[derive(Debug)]
pub struct VladCache {
    /// `[locations, K]` soft-assignment weights.
    weights: Vec<f64>,
    /// `[locations, K]` squared distances to each centroid.
    sqdists: Vec<f64>,
}

/// Soft-assignment residual encoding of a `[T, W, H, C']` feature map into
/// `[T, W, H, K, C']`: every location keeps, for each cluster, its assignment
/// weight times the residual to that centroid. No spatial or temporal
/// aggregation happens here.
pub fn vlad_encode(fm: &Tensor, codebook: &ClusterCodebook) -> Result<Tensor> {
    vlad_encode_cached(fm, codebook).map(|(v, _)| v)
}

pub fn vlad_encode_cached(
    fm: &Tensor,
    codebook: &ClusterCodebook,
) -> Result<(Tensor, VladCache)> {
    if fm.rank() != 4 || fm.extent(3) != codebook.channels() {
        return Err(Error::ShapeMismatch {
            op: "vlad_encode",
            left: fm.shape().to_vec(),
            right: codebook.centroids.shape().to_vec(),
        });
    }
    let (t, w, h, c) = (fm.extent(0), fm.extent(1), fm.extent(2), fm.extent(3));
    let k = codebook.k();
    let locations = t * w * h;
    let mut out = vec![0.0; locations * k * c];
    let mut cache = VladCache {
        weights: vec![0.0; locations * k],
        sqdists: vec![0.0; locations * k],
    };
    for loc in 0..locations {
        let x = &fm.data()[loc * c..(loc + 1) * c];
        let (weights, dists) = assign_with_dists(x, codebook);
        cache.weights[loc * k..(loc + 1) * k].copy_from_slice(&weights);
        cache.sqdists[loc * k..(loc + 1) * k].copy_from_slice(&dists);
        for ki in 0..k {
            let cent = &codebook.centroids.data()[ki * c..(ki + 1) * c];
            let dst = &mut out[(loc * k + ki) * c..(loc * k + ki + 1) * c];
            for j in 0..c {
                dst[j] = weights[ki] * (x[j] - cent[j]);
            }
        }
    }
    Ok((Tensor::new(&[t, w, h, k, c], out)?, cache))
}

/// Accumulates `∂loss/∂centroids` and `∂loss/∂α` into the codebook's
/// gradient buffers given the upstream gradient on the encoded tensor.
pub fn vlad_encode_backward(
    fm: &Tensor,
    codebook: &mut ClusterCodebook,
    cache: &VladCache,
    grad_out: &Tensor,
) {
    let c = codebook.channels();
    let k = codebook.k();
    let locations = fm.numel() / c;
    debug_assert_eq!(grad_out.numel(), locations * k * c);
    let alpha = codebook.alpha_value();
    let cents = codebook.centroids.data().to_vec();
    let mut dalpha = 0.0;
    {
        let dc = codebook.centroids.grad_mut();
        for loc in 0..locations {
            let x = &fm.data()[loc * c..(loc + 1) * c];
            let weights = &cache.weights[loc * k..(loc + 1) * k];
            let dists = &cache.sqdists[loc * k..(loc + 1) * k];
            let g = &grad_out.data()[loc * k * c..(loc + 1) * k * c];
            // Gradient through the softmax scores s_k = -α‖x-c_k‖².
            let mut gw = vec![0.0; k];
            for ki in 0..k {
                let cent = &cents[ki * c..(ki + 1) * c];
                let grow = &g[ki * c..(ki + 1) * c];
                gw[ki] = grow
                    .iter()
                    .zip(x.iter().zip(cent))
                    .map(|(gv, (xv, cv))| gv * (xv - cv))
                    .sum();
            }
            let dot: f64 = weights.iter().zip(&gw).map(|(s, g)| s * g).sum();
            for ki in 0..k {
                let hk = weights[ki] * (gw[ki] - dot);
                dalpha -= hk * dists[ki];
                let cent = &cents[ki * c..(ki + 1) * c];
                let grow = &g[ki * c..(ki + 1) * c];
                let dcrow = &mut dc[ki * c..(ki + 1) * c];
                for j in 0..c {
                    dcrow[j] += 2.0 * alpha * hk * (x[j] - cent[j]) - grow[j] * weights[ki];
                }
            }
        }
    }
    codebook.alpha.grad_mut()[0] += dalpha;
}

/// Merges the `[T, W, H, K, C']` residual blocks into `[T, W, H, K·C']`
/// (cluster-major, component-minor). Values are untouched.
pub fn flatten_clusters(v: Tensor) -> Tensor {
    let shape = v.shape().to_vec();
    debug_assert_eq!(shape.len(), 5);
    let merged = [shape[0], shape[1], shape[2], shape[3] * shape[4]];
    v.reshaped(&merged).expect("element count is unchanged")
}

/// Inverse of [`flatten_clusters`].
pub fn unflatten_clusters(t: Tensor, k: usize, c: usize) -> Result<Tensor> {
    let shape = t.shape().to_vec();
    if shape.len() != 4 || shape[3] != k * c {
        return Err(Error::ShapeMismatch {
            op: "unflatten_clusters",
            left: shape,
            right: vec![k * c],
        });
    }
    t.reshaped(&[shape[0], shape[1], shape[2], k, c])
}

/// Order-insensitive whole-clip descriptor: the residual encoding summed over
/// every frame and location, in canonical order so that frame permutations
/// cannot perturb even the last bit. This is the aggregation-based baseline
/// the attention pipeline is contrasted against.
pub fn vlad_aggregate(fm: &Tensor, codebook: &ClusterCodebook) -> Result<Tensor> {
    let v = vlad_encode(fm, codebook)?;
    let k = codebook.k();
    let c = codebook.channels();
    let locations = v.numel() / (k * c);
    let mut out = vec![0.0; k * c];
    let mut addends = vec![0.0; locations];
    for ki in 0..k {
        for j in 0..c {
            for loc in 0..locations {
                addends[loc] = v.data()[(loc * k + ki) * c + j];
            }
            out[ki * c + j] = stable_sum(&addends);
        }
    }
    Tensor::new(&[k, c], out)
}
