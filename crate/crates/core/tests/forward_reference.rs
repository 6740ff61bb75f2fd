//! The full pipeline against a monolithic straight-line reimplementation:
//! one tiny case computed twice, once through the layered code and once with
//! nothing but nested loops below.

use coact::config::ModelConfig;
use coact::decoder::{build_assoc_masks, AssociationMasks, MASK_EPSILON};
use coact::model::{forward, ModelParams};
use coact::tensor::Tensor;
use coact::SeededRng;
use rand::SeedableRng;

fn reference_forward(
    config: &ModelConfig,
    params: &ModelParams,
    masks: &AssociationMasks,
    fm: &Tensor,
) -> Vec<f64> {
    let (t, w, h, cp) = (
        config.frames,
        config.grid_w,
        config.grid_h,
        config.channels,
    );
    let k = config.clusters;
    let a = config.activities;
    let f = k * cp;
    let d = config.proj_width();

    let codebook = params.codebook.as_ref().unwrap();
    let cents = codebook.centroids.data();
    let alpha = codebook.alpha_value();

    // Soft-assignment residual encoding, flattened cluster-major.
    let mut fcf = vec![0.0; t * w * h * f];
    for ti in 0..t {
        for wi in 0..w {
            for hi in 0..h {
                let loc = (ti * w + wi) * h + hi;
                let x = &fm.data()[loc * cp..(loc + 1) * cp];
                let mut scores = vec![0.0; k];
                for ki in 0..k {
                    let mut dist = 0.0;
                    for j in 0..cp {
                        let r = x[j] - cents[ki * cp + j];
                        dist += r * r;
                    }
                    scores[ki] = -alpha * dist;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for ki in 0..k {
                    let weight = scores[ki] / denom;
                    for j in 0..cp {
                        fcf[loc * f + ki * cp + j] = weight * (x[j] - cents[ki * cp + j]);
                    }
                }
            }
        }
    }

    // Spatial attention per activity.
    let bank = params.bank.as_ref().unwrap().masks.data();
    let mut fm_act = vec![0.0; t * a * f];
    for ti in 0..t {
        for ai in 0..a {
            for wi in 0..w {
                for hi in 0..h {
                    let weight = bank[(ai * w + wi) * h + hi];
                    let loc = (ti * w + wi) * h + hi;
                    for fi in 0..f {
                        fm_act[(ti * a + ai) * f + fi] += weight * fcf[loc * f + fi];
                    }
                }
            }
        }
    }

    // Per-activity temporal attention, forward and backward branch averaged.
    let mut fa = vec![0.0; a * d];
    for ai in 0..a {
        let wlen = f * d;
        let wq = &params.encoder.wq.data()[ai * wlen..(ai + 1) * wlen];
        let wk = &params.encoder.wk.data()[ai * wlen..(ai + 1) * wlen];
        let wv = &params.encoder.wv.data()[ai * wlen..(ai + 1) * wlen];
        let mut q = vec![0.0; t * d];
        let mut kk = vec![0.0; t * d];
        let mut v = vec![0.0; t * d];
        for ti in 0..t {
            for c in 0..d {
                for fi in 0..f {
                    let x = fm_act[(ti * a + ai) * f + fi];
                    q[ti * d + c] += x * wq[fi * d + c];
                    kk[ti * d + c] += x * wk[fi * d + c];
                    v[ti * d + c] += x * wv[fi * d + c];
                }
            }
        }
        for forward_dir in [true, false] {
            for ti in 0..t {
                let allowed: Vec<usize> = (0..t)
                    .filter(|&tp| if forward_dir { tp <= ti } else { tp >= ti })
                    .collect();
                let mut scores = vec![0.0; allowed.len()];
                for (si, &tp) in allowed.iter().enumerate() {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += q[ti * d + c] * kk[tp * d + c];
                    }
                    scores[si] = s / (d as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for (si, &tp) in allowed.iter().enumerate() {
                    let weight = scores[si] / denom;
                    for c in 0..d {
                        fa[ai * d + c] += 0.5 * weight * v[tp * d + c];
                    }
                }
            }
        }
    }

    // Two-branch feature-wise decoder with log-domain mask injection.
    let fo = d;
    let mut u = vec![0.0; a * fo];
    for j in 0..a {
        for c in 0..fo {
            for e in 0..fo {
                u[j * fo + c] += params.decoder.value_w.data()[c * fo + e] * fa[j * fo + e];
            }
        }
    }
    let mut o = vec![0.0; a * fo];
    for branch in 0..2 {
        let w1 = &params.decoder.align_w1.data()[branch * fo * fo..(branch + 1) * fo * fo];
        let w2 = &params.decoder.align_w2.data()[branch * fo * fo..(branch + 1) * fo * fo];
        let b = &params.decoder.align_b.data()[branch * fo..(branch + 1) * fo];
        let mask = if branch == 0 {
            masks.positive.data()
        } else {
            masks.negative.data()
        };
        for i in 0..a {
            for c in 0..fo {
                let mut scores = vec![0.0; a];
                for j in 0..a {
                    let mut p1 = 0.0;
                    let mut p2 = 0.0;
                    for e in 0..fo {
                        p1 += w1[c * fo + e] * fa[i * fo + e];
                        p2 += w2[c * fo + e] * fa[j * fo + e];
                    }
                    scores[j] = p1 + p2 + b[c] + (mask[i * a + j] + MASK_EPSILON).ln();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for j in 0..a {
                    o[i * fo + c] += (scores[j] / denom) * u[j * fo + c];
                }
            }
        }
    }
    (0..a)
        .map(|i| {
            params.decoder.out_b.data()[i]
                + (0..fo)
                    .map(|c| params.decoder.out_w.data()[i * fo + c] * o[i * fo + c])
                    .sum::<f64>()
        })
        .collect()
}

#[test]
fn full_forward_matches_the_monolithic_reference() {
    let config = ModelConfig {
        frames: 2,
        grid_w: 2,
        grid_h: 2,
        channels: 2,
        clusters: 2,
        activities: 2,
        proj_dim: None, // d = F = 4
        ..ModelConfig::default()
    };
    for seed in 0..5 {
        let mut rng = SeededRng::seed_from_u64(seed);
        let mut params = ModelParams::init(&config, &mut rng).unwrap();
        // Perturb the spatial masks and biases away from their symmetric
        // initialization so the reference exercises arbitrary values.
        let bank = params.bank.as_mut().unwrap();
        bank.masks = Tensor::uniform(&[2, 2, 2], -1.0, 1.0, &mut rng);
        params.decoder.align_b = Tensor::uniform(&[2, 4], -0.5, 0.5, &mut rng);
        params.decoder.out_b = Tensor::uniform(&[2], -0.5, 0.5, &mut rng);

        let labels = vec![vec![1, 0], vec![1, 1], vec![0, 1], vec![1, 0]];
        let masks = build_assoc_masks(&labels, 2).unwrap();
        let fm = Tensor::uniform(&config.input_shape(), -1.0, 1.0, &mut rng);

        let logits = forward(&config, &params, &masks, &fm, None).unwrap();
        let expected = reference_forward(&config, &params, &masks, &fm);
        for (got, want) in logits.data().iter().zip(&expected) {
            assert!(
                (got - want).abs() < 1e-10,
                "seed {seed}: {got} vs {want}"
            );
        }
    }
}
