//! Feature-to-activity attention: learned per-activity 2-D spatial masks
//! that carve activity-specific feature sequences out of the global
//! clustered feature map. Time is left unaggregated.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One learned `W×H` weight grid per activity. Entries are unconstrained;
/// initialization is `1/(W·H)` so the initial output is a spatial mean.
#[derive(Debug, Clone)]
pub struct ActivityAttentionBank {
    /// `[A, W, H]` mask stack.
    pub masks: Tensor,
}

impl ActivityAttentionBank {
    pub fn init(activities: usize, w: usize, h: usize) -> Self {
        ActivityAttentionBank {
            masks: Tensor::filled(&[activities, w, h], 1.0 / (w * h) as f64),
        }
    }

    pub fn from_tensor(masks: Tensor) -> Result<Self> {
        if masks.rank() != 3 {
            return Err(Error::invalid(format!(
                "attention bank must be [A, W, H], got {:?}",
                masks.shape()
            )));
        }
        masks.ensure_finite("activity attention masks")?;
        Ok(ActivityAttentionBank { masks })
    }

    pub fn activities(&self) -> usize {
        self.masks.extent(0)
    }
}

/// Applies each activity's spatial mask to the `[T, W, H, F]` clustered map
/// and sums over space, producing `[T, A, F]` per-activity sequences.
pub fn activity_attend(fcf: &Tensor, bank: &ActivityAttentionBank) -> Result<Tensor> {
    let (t, w, h, f) = check_shapes(fcf, bank)?;
    let a = bank.activities();
    let mut out = vec![0.0; t * a * f];
    let md = bank.masks.data();
    let xd = fcf.data();
    for ti in 0..t {
        for ai in 0..a {
            let orow = &mut out[(ti * a + ai) * f..(ti * a + ai + 1) * f];
            for wi in 0..w {
                for hi in 0..h {
                    let weight = md[(ai * w + wi) * h + hi];
                    let xrow = &xd[((ti * w + wi) * h + hi) * f..((ti * w + wi) * h + hi + 1) * f];
                    for fi in 0..f {
                        orow[fi] += weight * xrow[fi];
                    }
                }
            }
        }
    }
    Tensor::new(&[t, a, f], out)
}

/// Accumulates mask gradients into the bank and returns the gradient on the
/// clustered feature map.
pub fn activity_attend_backward(
    fcf: &Tensor,
    bank: &mut ActivityAttentionBank,
    grad_out: &Tensor,
) -> Tensor {
    let (t, w, h, f) = check_shapes(fcf, bank).expect("shapes already validated in forward");
    let a = bank.activities();
    debug_assert_eq!(grad_out.shape(), &[t, a, f]);
    let mut dfcf = vec![0.0; fcf.numel()];
    let md = bank.masks.data().to_vec();
    let dm = bank.masks.grad_mut();
    let xd = fcf.data();
    let gd = grad_out.data();
    for ti in 0..t {
        for ai in 0..a {
            let grow = &gd[(ti * a + ai) * f..(ti * a + ai + 1) * f];
            for wi in 0..w {
                for hi in 0..h {
                    let cell = (ai * w + wi) * h + hi;
                    let loc = ((ti * w + wi) * h + hi) * f;
                    let xrow = &xd[loc..loc + f];
                    let mut acc = 0.0;
                    for fi in 0..f {
                        acc += grow[fi] * xrow[fi];
                        dfcf[loc + fi] += grow[fi] * md[cell];
                    }
                    dm[cell] += acc;
                }
            }
        }
    }
    Tensor::new(fcf.shape(), dfcf).unwrap()
}

fn check_shapes(fcf: &Tensor, bank: &ActivityAttentionBank) -> Result<(usize, usize, usize, usize)> {
    if fcf.rank() != 4
        || bank.masks.extent(1) != fcf.extent(1)
        || bank.masks.extent(2) != fcf.extent(2)
    {
        return Err(Error::ShapeMismatch {
            op: "activity_attend",
            left: fcf.shape().to_vec(),
            right: bank.masks.shape().to_vec(),
        });
    }
    Ok((fcf.extent(0), fcf.extent(1), fcf.extent(2), fcf.extent(3)))
}

/// Per-activity spatial activation grids: the mask weight at each cell times
/// the feature norm there, averaged over frames. Shape `[A, W, H]`.
pub fn activity_maps(bank: &ActivityAttentionBank, fcf: &Tensor) -> Result<Tensor> {
    let (t, w, h, f) = check_shapes(fcf, bank)?;
    let a = bank.activities();
    let mut out = vec![0.0; a * w * h];
    for wi in 0..w {
        for hi in 0..h {
            let mut mean_norm = 0.0;
            for ti in 0..t {
                let loc = ((ti * w + wi) * h + hi) * f;
                let norm: f64 = fcf.data()[loc..loc + f].iter().map(|v| v * v).sum::<f64>();
                mean_norm += norm.sqrt();
            }
            mean_norm /= t as f64;
            for ai in 0..a {
                let cell = (ai * w + wi) * h + hi;
                out[cell] = bank.masks.data()[cell] * mean_norm;
            }
        }
    }
    Tensor::new(&[a, w, h], out)
}

/// Writes one plain-text grid per activity (rows of space-separated values)
/// plus, when requested, an 8-bit PGM rescaled to `[0, 255]` for viewing.
/// Returns the paths written.
pub fn write_activity_maps(
    maps: &Tensor,
    dir: &Path,
    with_pgm: bool,
) -> Result<Vec<PathBuf>> {
    debug_assert_eq!(maps.rank(), 3);
    let (a, w, h) = (maps.extent(0), maps.extent(1), maps.extent(2));
    let mut written = Vec::new();
    for ai in 0..a {
        let grid = &maps.data()[ai * w * h..(ai + 1) * w * h];
        let mut text = String::new();
        for wi in 0..w {
            let row: Vec<String> = (0..h).map(|hi| format!("{}", grid[wi * h + hi])).collect();
            text.push_str(&row.join(" "));
            text.push('\n');
        }
        let path = dir.join(format!("activity_{ai:02}_map.txt"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        if with_pgm {
            let path = dir.join(format!("activity_{ai:02}_map.pgm"));
            fs::write(&path, to_pgm(grid, w, h)).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn to_pgm(grid: &[f64], w: usize, h: usize) -> Vec<u8> {
    let lo = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{h} {w}\n255\n").into_bytes();
    for &v in grid {
        let byte = if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        };
        out.push(byte);
    }
    out
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

    #[test]
    fn uniform_mask_is_spatial_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let fcf = Tensor::uniform(&[2, 3, 2, 4], -1.0, 1.0, &mut rng);
        let bank = ActivityAttentionBank::from_tensor(Tensor::filled(&[1, 3, 2], 1.0)).unwrap();
        let out = activity_attend(&fcf, &bank).unwrap();
        for t in 0..2 {
            for f in 0..4 {
                let mut sum = 0.0;
                for w in 0..3 {
                    for h in 0..2 {
                        sum += fcf.at(&[t, w, h, f]);
                    }
                }
                assert!(close(out.at(&[t, 0, f]), sum, 1e-12));
            }
        }
    }

    #[test]
    fn one_hot_mask_selects_a_cell() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let fcf = Tensor::uniform(&[3, 2, 2, 3], -1.0, 1.0, &mut rng);
        let mut masks = Tensor::zeros(&[1, 2, 2]);
        masks.data_mut()[2] = 1.0; // (w, h) = (1, 0)
        let bank = ActivityAttentionBank::from_tensor(masks).unwrap();
        let out = activity_attend(&fcf, &bank).unwrap();
        for t in 0..3 {
            for f in 0..3 {
                assert_eq!(
                    out.at(&[t, 0, f]).to_bits(),
                    fcf.at(&[t, 1, 0, f]).to_bits()
                );
            }
        }
    }

    #[test]
    fn two_by_two_double_loop_oracle() {
        // F=1, frame [[1,2],[3,4]], mask [[0.5,0],[0,0.5]] -> 2.5.
        let fcf = Tensor::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let masks = Tensor::new(&[1, 2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let bank = ActivityAttentionBank::from_tensor(masks).unwrap();
        let out = activity_attend(&fcf, &bank).unwrap();
        assert!(close(out.data()[0], 2.5, 1e-15));
    }

    #[test]
    fn linear_in_the_feature_map() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let fcf = Tensor::uniform(&[2, 2, 2, 2], -1.0, 1.0, &mut rng);
        let bank = ActivityAttentionBank::from_tensor(Tensor::uniform(
            &[2, 2, 2],
            -1.0,
            1.0,
            &mut rng,
        ))
        .unwrap();
        let base = activity_attend(&fcf, &bank).unwrap();
        let scaled_in =
            Tensor::new(fcf.shape(), fcf.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        let scaled_out = activity_attend(&scaled_in, &bank).unwrap();
        for (a, b) in scaled_out.data().iter().zip(base.data()) {
            assert!(close(*a, 3.0 * b, 1e-12));
        }
    }

    #[test]
    fn modifying_one_mask_touches_only_that_activity() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let fcf = Tensor::uniform(&[2, 2, 2, 3], -1.0, 1.0, &mut rng);
        let masks = Tensor::uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
        let bank = ActivityAttentionBank::from_tensor(masks.clone()).unwrap();
        let base = activity_attend(&fcf, &bank).unwrap();

        let mut other = masks;
        other.data_mut()[4] += 0.7; // perturb activity 1
        let bank2 = ActivityAttentionBank::from_tensor(other).unwrap();
        let out = activity_attend(&fcf, &bank2).unwrap();
        for t in 0..2 {
            for a in [0usize, 2] {
                for f in 0..3 {
                    assert_eq!(out.at(&[t, a, f]).to_bits(), base.at(&[t, a, f]).to_bits());
                }
            }
            assert!(out.at(&[t, 1, 0]) != base.at(&[t, 1, 0]));
        }
    }

    #[test]
    fn frame_permutation_permutes_output_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let fcf = Tensor::uniform(&[4, 2, 2, 2], -1.0, 1.0, &mut rng);
        let bank = ActivityAttentionBank::from_tensor(Tensor::uniform(
            &[2, 2, 2],
            -1.0,
            1.0,
            &mut rng,
        ))
        .unwrap();
        let base = activity_attend(&fcf, &bank).unwrap();

        let perm = [2usize, 0, 3, 1];
        let frame = 2 * 2 * 2;
        let mut data = vec![0.0; fcf.numel()];
        for (dst, &src) in perm.iter().enumerate() {
            data[dst * frame..(dst + 1) * frame]
                .copy_from_slice(&fcf.data()[src * frame..(src + 1) * frame]);
        }
        let out = activity_attend(&Tensor::new(fcf.shape(), data).unwrap(), &bank).unwrap();
        let orow = 2 * 2;
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(
                out.data()[dst * orow..(dst + 1) * orow],
                base.data()[src * orow..(src + 1) * orow]
            );
        }
    }

    #[test]
    fn export_one_hot_grid() {
        let fcf = Tensor::filled(&[2, 2, 2, 2], 1.0);
        let mut masks = Tensor::zeros(&[1, 2, 2]);
        masks.data_mut()[3] = 2.0; // (1, 1)
        let bank = ActivityAttentionBank::from_tensor(masks).unwrap();
        let maps = activity_maps(&bank, &fcf).unwrap();
        assert_eq!(maps.shape(), &[1, 2, 2]);
        assert!(close(maps.at(&[0, 1, 1]), 2.0 * 2f64.sqrt(), 1e-12));
        assert_eq!(maps.at(&[0, 0, 0]), 0.0);
        assert_eq!(maps.at(&[0, 0, 1]), 0.0);
        assert_eq!(maps.at(&[0, 1, 0]), 0.0);
    }

    #[test]
    fn export_matches_direct_reimplementation() {
        let fcf = Tensor::new(&[2, 2, 1, 2], vec![1.0, 0.0, 0.0, 2.0, 3.0, 4.0, 1.0, 1.0]).unwrap();
        let masks = Tensor::new(&[2, 2, 1], vec![0.25, 0.5, -1.0, 2.0]).unwrap();
        let bank = ActivityAttentionBank::from_tensor(masks.clone()).unwrap();
        let maps = activity_maps(&bank, &fcf).unwrap();
        for a in 0..2 {
            for w in 0..2 {
                let mut mean = 0.0;
                for t in 0..2 {
                    let (x, y) = (fcf.at(&[t, w, 0, 0]), fcf.at(&[t, w, 0, 1]));
                    mean += (x * x + y * y).sqrt();
                }
                mean /= 2.0;
                assert!(close(maps.at(&[a, w, 0]), masks.at(&[a, w, 0]) * mean, 1e-12));
            }
        }
    }

    #[test]
    fn written_files_and_pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let maps = Tensor::new(&[2, 2, 2], vec![0.0, 1.0, 2.0, 3.0, 3.0, 3.0, 3.0, 3.0]).unwrap();
        let files = write_activity_maps(&maps, dir.path(), true).unwrap();
        assert_eq!(files.len(), 4);
        let pgm = std::fs::read(dir.path().join("activity_00_map.pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&pgm[pgm.len() - 4..], &[0u8, 85, 170, 255]);
        // Constant grid rescales to all zeros.
        let pgm = std::fs::read(dir.path().join("activity_01_map.pgm")).unwrap();
        assert_eq!(&pgm[pgm.len() - 4..], &[0u8, 0, 0, 0]);
    }

    #[test]
    fn mask_gradients_match_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let fcf = Tensor::uniform(&[2, 2, 2, 3], -1.0, 1.0, &mut rng);
        let masks = Tensor::uniform(&[2, 2, 2], -1.0, 1.0, &mut rng);
        let weights = Tensor::uniform(&[2 * 2 * 3], -1.0, 1.0, &mut rng);

        let mut bank = ActivityAttentionBank::from_tensor(masks.clone()).unwrap();
        let out = activity_attend(&fcf, &bank).unwrap();
        let grad_out = Tensor::new(out.shape(), weights.data().to_vec()).unwrap();
        let dfcf = activity_attend_backward(&fcf, &mut bank, &grad_out);

        let loss = |m: &Tensor| -> crate::error::Result<f64> {
            let b = ActivityAttentionBank::from_tensor(m.clone())?;
            let o = activity_attend(&fcf, &b)?;
            Ok(o.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
        };
        let nd = finite_diff_grad(loss, &masks, 1e-5).unwrap();
        assert!(max_relative_error(bank.masks.grad().unwrap(), nd.data()) < 1e-4);

        let loss_in = |x: &Tensor| -> crate::error::Result<f64> {
            let b = ActivityAttentionBank::from_tensor(masks.clone())?;
            let o = activity_attend(x, &b)?;
            Ok(o.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
        };
        let nd_in = finite_diff_grad(loss_in, &fcf, 1e-5).unwrap();
        assert!(max_relative_error(dfcf.data(), nd_in.data()) < 1e-4);
    }
}
