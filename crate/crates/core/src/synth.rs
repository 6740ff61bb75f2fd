//! Synthetic concurrent-activity data, spatio-temporal augmentation, and the
//! on-disk dataset format (one TNSR file per sample plus a labels CSV).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::config::{AugmentSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::SeededRng;

/// Feature maps with their multi-hot activity labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<Tensor>,
    pub labels: Vec<Vec<u8>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn activities(&self) -> usize {
        self.labels.first().map_or(0, |l| l.len())
    }

    /// Splits off the first `n` samples.
    pub fn split(mut self, n: usize) -> (Dataset, Dataset) {
        let tail_feat = self.features.split_off(n.min(self.features.len()));
        let tail_lab = self.labels.split_off(n.min(self.labels.len()));
        (
            self,
            Dataset {
                features: tail_feat,
                labels: tail_lab,
            },
        )
    }

    /// Writes `sample_#####.tnsr` files and `labels.csv` into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut csv = String::new();
        for (i, (fm, labels)) in self.features.iter().zip(&self.labels).enumerate() {
            fm.write_tnsr(&dir.join(format!("sample_{i:05}.tnsr")))?;
            let row: Vec<String> = labels.iter().map(|v| v.to_string()).collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        let path = dir.join("labels.csv");
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))
    }

    pub fn load_dir(dir: &Path) -> Result<Dataset> {
        let path = dir.join("labels.csv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut labels = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for field in line.split(',') {
                match field.trim() {
                    "0" => row.push(0u8),
                    "1" => row.push(1u8),
                    other => {
                        return Err(Error::format(format!(
                            "{}: line {}: label {other:?} is not 0/1",
                            path.display(),
                            ln + 1
                        )))
                    }
                }
            }
            labels.push(row);
        }
        if labels.is_empty() {
            return Err(Error::format(format!("{}: no labels", path.display())));
        }
        let width = labels[0].len();
        if labels.iter().any(|r| r.len() != width) {
            return Err(Error::format("ragged label rows".to_string()));
        }
        let mut features = Vec::with_capacity(labels.len());
        for i in 0..labels.len() {
            let fm = Tensor::read_tnsr(&dir.join(format!("sample_{i:05}.tnsr")))?;
            fm.ensure_finite("dataset sample")?;
            if let Some(first) = features.first() {
                let first: &Tensor = first;
                if fm.shape() != first.shape() {
                    return Err(Error::format(format!(
                        "sample {i} has shape {:?}, expected {:?}",
                        fm.shape(),
                        first.shape()
                    )));
                }
            }
            features.push(fm);
        }
        Ok(Dataset { features, labels })
    }
}

/// Draws a dataset from the generator spec, deterministically per seed.
///
/// Active sets: unpaired activities are independent Bernoulli draws;
/// correlated pairs are drawn from their exact joint distribution so the
/// conditional `P(j | i)` equals the spec entry. Each active activity adds
/// its signature vector at its cell during its window; Gaussian noise is
/// added everywhere.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let a = spec.activities;
    let mut rng = SeededRng::seed_from_u64(seed);

    let signatures: Vec<Vec<f64>> = (0..a)
        .map(|ai| {
            (0..spec.channels)
                .map(|_| rng.random_range(-1.0..1.0) * spec.signature_scale[ai])
                .collect()
        })
        .collect();

    let mut partner = vec![None; a];
    for (i, j, c) in spec.pairs() {
        partner[i] = Some((j, c));
        partner[j] = Some((i, c));
    }

    let (t, w, h, ch) = (spec.frames, spec.grid_w, spec.grid_h, spec.channels);
    let mut features = Vec::with_capacity(spec.samples);
    let mut labels = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let mut row = vec![0u8; a];
        for i in 0..a {
            match partner[i] {
                Some((j, c)) if j > i => {
                    // Joint draw: P(11)=pc, P(10)=P(01)=p(1-c).
                    let p = spec.base_prob[i];
                    let r: f64 = rng.random();
                    let p11 = p * c;
                    let p10 = p * (1.0 - c);
                    if r < p11 {
                        row[i] = 1;
                        row[j] = 1;
                    } else if r < p11 + p10 {
                        row[i] = 1;
                    } else if r < p11 + 2.0 * p10 {
                        row[j] = 1;
                    }
                }
                Some(_) => {} // handled at the lower index
                None => {
                    if rng.random::<f64>() < spec.base_prob[i] {
                        row[i] = 1;
                    }
                }
            }
        }
        let mut data = vec![0.0; t * w * h * ch];
        for v in data.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = spec.noise_sigma * z;
        }
        for (ai, &active) in row.iter().enumerate() {
            if active == 0 {
                continue;
            }
            let [cw, chh] = spec.cells[ai];
            let [start, len] = spec.windows[ai];
            for ti in start..start + len {
                let base = ((ti * w + cw) * h + chh) * ch;
                for (dst, s) in data[base..base + ch].iter_mut().zip(&signatures[ai]) {
                    *dst += s;
                }
            }
        }
        features.push(Tensor::new(&[t, w, h, ch], data)?);
        labels.push(row);
    }
    Ok(Dataset { features, labels })
}

/// Temporal downsampling with a seeded phase, a seeded contiguous window,
/// then one seeded spatial crop applied identically to every frame.
pub fn augment(fm: &Tensor, spec: &AugmentSpec, seed: u64) -> Result<Tensor> {
    if fm.rank() != 4 {
        return Err(Error::invalid(format!(
            "augment expects [T, W, H, C], got {:?}",
            fm.shape()
        )));
    }
    if spec.downsample_factor == 0 || spec.window == 0 {
        return Err(Error::invalid(
            "downsample_factor and window must be >= 1",
        ));
    }
    let (t, w, h, c) = (fm.extent(0), fm.extent(1), fm.extent(2), fm.extent(3));
    if spec.crop_w > w || spec.crop_h > h {
        return Err(Error::invalid(format!(
            "crop {}x{} larger than grid {w}x{h}",
            spec.crop_w, spec.crop_h
        )));
    }
    let mut rng = SeededRng::seed_from_u64(seed);
    let phase = rng.random_range(0..spec.downsample_factor);
    let kept: Vec<usize> = (phase..t).step_by(spec.downsample_factor).collect();
    if kept.len() < spec.window {
        return Err(Error::invalid(format!(
            "window {} longer than the {} downsampled frames",
            spec.window,
            kept.len()
        )));
    }
    let start = rng.random_range(0..=kept.len() - spec.window);
    let ow = rng.random_range(0..=w - spec.crop_w);
    let oh = rng.random_range(0..=h - spec.crop_h);

    let mut out = vec![0.0; spec.window * spec.crop_w * spec.crop_h * c];
    for (dst_t, &src_t) in kept[start..start + spec.window].iter().enumerate() {
        for dw in 0..spec.crop_w {
            for dh in 0..spec.crop_h {
                let src = ((src_t * w + ow + dw) * h + oh + dh) * c;
                let dst = ((dst_t * spec.crop_w + dw) * spec.crop_h + dh) * c;
                out[dst..dst + c].copy_from_slice(&fm.data()[src..src + c]);
            }
        }
    }
    Tensor::new(&[spec.window, spec.crop_w, spec.crop_h, c], out)
}

/// Seeded sample of up to `limit` descriptor rows (grid-cell feature
/// vectors) across the whole dataset, for K-means initialization.
pub fn sample_descriptors(data: &Dataset, limit: usize, seed: u64) -> Result<Tensor> {
    let first = data
        .features
        .first()
        .ok_or_else(|| Error::invalid("empty dataset"))?;
    let c = first.extent(3);
    let per_sample = first.numel() / c;
    let total = per_sample * data.len();
    let mut indices: Vec<usize> = (0..total).collect();
    if total > limit {
        let mut rng = SeededRng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        indices.truncate(limit);
        indices.sort_unstable();
    }
    let mut out = Vec::with_capacity(indices.len() * c);
    for idx in indices {
        let (sample, loc) = (idx / per_sample, idx % per_sample);
        out.extend_from_slice(&data.features[sample].data()[loc * c..(loc + 1) * c]);
    }
    Tensor::new(&[out.len() / c, c], out)
}
