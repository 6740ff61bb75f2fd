//! JSON configuration: model dimensions and ablation toggles, the synthetic
//! data generator spec, and augmentation options. Unknown keys are rejected;
//! missing keys take the documented defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{BranchFusion, EncoderSettings};
use crate::error::{Error, Result};

/// Every dimension and switch of the model plus the training recipe.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Frames per clip (T).
    pub frames: usize,
    /// Spatial grid extents of the incoming feature maps.
    pub grid_w: usize,
    pub grid_h: usize,
    /// Descriptor length per grid cell (C').
    pub channels: usize,
    /// Cluster count (K).
    pub clusters: usize,
    /// Number of activities (A).
    pub activities: usize,
    /// Projection width of the temporal encoder (d); `null` means the full
    /// feature width, which makes the attention scale factor √F literal.
    pub proj_dim: Option<usize>,
    /// Ablations: disable to bypass the residual clustering stage
    /// (features pass through with F = C').
    pub use_clustering: bool,
    /// Disable to replace per-activity spatial attention with a spatial mean
    /// broadcast to every activity.
    pub use_activity_attention: bool,
    /// One projection triple per activity versus a single shared triple.
    pub per_activity_projections: bool,
    /// Forward/backward temporal masks versus one unmasked branch.
    pub temporal_masks: bool,
    /// Statistical association masks versus plain forward/backward masks in
    /// the decoder.
    pub association_masks: bool,
    /// Feature-wise decoder alignment versus scalar dot-product scores.
    pub multi_dim_decoder: bool,
    /// How the encoder's two directional branches are fused.
    pub branch_fusion: BranchFusion,
    pub dropout_rate: f64,
    /// Decision threshold on sigmoid scores.
    pub threshold: f64,
    pub base_lr: f64,
    pub epochs: usize,
    /// 0 means full-batch.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 8,
            grid_w: 4,
            grid_h: 4,
            channels: 8,
            clusters: 4,
            activities: 4,
            proj_dim: None,
            use_clustering: true,
            use_activity_attention: true,
            per_activity_projections: true,
            temporal_masks: true,
            association_masks: true,
            multi_dim_decoder: true,
            branch_fusion: BranchFusion::Average,
            dropout_rate: 0.5,
            threshold: 0.5,
            base_lr: 0.01,
            epochs: 100,
            batch_size: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration the gradient gate runs on.
    pub fn tiny() -> Self {
        ModelConfig {
            frames: 4,
            grid_w: 2,
            grid_h: 2,
            channels: 4,
            clusters: 2,
            activities: 3,
            proj_dim: Some(4),
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("frames", self.frames),
            ("grid_w", self.grid_w),
            ("grid_h", self.grid_h),
            ("channels", self.channels),
            ("clusters", self.clusters),
            ("activities", self.activities),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if self.proj_dim == Some(0) {
            return Err(Error::config("proj_dim must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!(
                "threshold {} outside (0, 1)",
                self.threshold
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::config(format!("base_lr {} must be > 0", self.base_lr)));
        }
        Ok(())
    }

    /// Feature width after the clustering stage: `K·C'`, or `C'` when the
    /// stage is bypassed.
    pub fn feature_dim(&self) -> usize {
        if self.use_clustering {
            self.clusters * self.channels
        } else {
            self.channels
        }
    }

    /// Encoder projection width `d` (defaults to the feature width).
    pub fn proj_width(&self) -> usize {
        self.proj_dim.unwrap_or_else(|| self.feature_dim())
    }

    pub fn encoder_settings(&self) -> EncoderSettings {
        EncoderSettings {
            temporal_masks: self.temporal_masks,
            fusion: self.branch_fusion,
        }
    }

    /// Width of the activity vectors entering the decoder.
    pub fn out_dim(&self) -> usize {
        self.encoder_settings().out_dim(self.proj_width())
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.frames, self.grid_w, self.grid_h, self.channels]
    }
}

/// Synthetic concurrent-activity data: each activity owns a spatial cell, a
/// temporal window and a fixed random signature vector; active activities add
/// their signature there, plus i.i.d. Gaussian noise everywhere.
///
/// `co_occurrence` is a symmetric `A×A` matrix with unit diagonal. An
/// off-diagonal entry `c > 0` declares a correlated pair sampled jointly so
/// that `P(j active | i active) = c` holds exactly; `0` means independent.
/// Every activity may belong to at most one pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub samples: usize,
    pub frames: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub channels: usize,
    pub activities: usize,
    /// Marginal activation probability per activity.
    pub base_prob: Vec<f64>,
    /// Signature amplitude per activity; small values make an activity hard
    /// to detect under the noise.
    pub signature_scale: Vec<f64>,
    /// One `[w, h]` grid cell per activity.
    pub cells: Vec<[usize; 2]>,
    /// One `[start, length]` frame window per activity.
    pub windows: Vec<[usize; 2]>,
    pub co_occurrence: Vec<Vec<f64>>,
    pub noise_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            samples: 100,
            frames: 8,
            grid_w: 4,
            grid_h: 4,
            channels: 8,
            activities: 4,
            base_prob: vec![0.4; 4],
            signature_scale: vec![1.0; 4],
            cells: vec![[0, 0], [1, 2], [2, 1], [3, 3]],
            windows: vec![[0, 4], [2, 4], [4, 4], [1, 6]],
            co_occurrence: identity_matrix(4),
            noise_sigma: 0.1,
        }
    }
}

pub fn identity_matrix(a: usize) -> Vec<Vec<f64>> {
    (0..a)
        .map(|i| (0..a).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let a = self.activities;
        if self.samples == 0 {
            return Err(Error::config("samples must be >= 1"));
        }
        for (name, v) in [
            ("frames", self.frames),
            ("grid_w", self.grid_w),
            ("grid_h", self.grid_h),
            ("channels", self.channels),
            ("activities", a),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        for (name, len) in [
            ("base_prob", self.base_prob.len()),
            ("signature_scale", self.signature_scale.len()),
            ("cells", self.cells.len()),
            ("windows", self.windows.len()),
            ("co_occurrence", self.co_occurrence.len()),
        ] {
            if len != a {
                return Err(Error::config(format!(
                    "{name} has {len} entries, expected {a}"
                )));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be >= 0"));
        }
        for (i, &p) in self.base_prob.iter().enumerate() {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!(
                    "base_prob[{i}] = {p} outside [0, 1)"
                )));
            }
        }
        for (i, cell) in self.cells.iter().enumerate() {
            if cell[0] >= self.grid_w || cell[1] >= self.grid_h {
                return Err(Error::config(format!(
                    "cells[{i}] = {cell:?} outside the {}x{} grid",
                    self.grid_w, self.grid_h
                )));
            }
        }
        for (i, win) in self.windows.iter().enumerate() {
            if win[1] == 0 || win[0] + win[1] > self.frames {
                return Err(Error::config(format!(
                    "windows[{i}] = {win:?} outside 0..{}",
                    self.frames
                )));
            }
        }
        let mut partner = vec![None; a];
        for i in 0..a {
            if self.co_occurrence[i].len() != a {
                return Err(Error::config(format!(
                    "co_occurrence row {i} has {} entries, expected {a}",
                    self.co_occurrence[i].len()
                )));
            }
            if self.co_occurrence[i][i] != 1.0 {
                return Err(Error::config(format!(
                    "co_occurrence diagonal [{i}][{i}] must be 1.0"
                )));
            }
            for j in 0..a {
                let c = self.co_occurrence[i][j];
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::config(format!(
                        "co_occurrence[{i}][{j}] = {c} outside [0, 1]"
                    )));
                }
                if c != self.co_occurrence[j][i] {
                    return Err(Error::config("co_occurrence must be symmetric"));
                }
                if i != j && c > 0.0 {
                    if partner[i].is_some_and(|p| p != j) {
                        return Err(Error::config(format!(
                            "activity {i} appears in more than one correlated pair"
                        )));
                    }
                    partner[i] = Some(j);
                    if self.base_prob[i] != self.base_prob[j] {
                        return Err(Error::config(format!(
                            "correlated pair ({i}, {j}) needs equal base_prob"
                        )));
                    }
                    if self.base_prob[i] * (2.0 - c) > 1.0 {
                        return Err(Error::config(format!(
                            "pair ({i}, {j}): base_prob {} with conditional {c} is infeasible",
                            self.base_prob[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Correlated pairs `(i, j, conditional)` with `i < j`.
    pub fn pairs(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.activities {
            for j in i + 1..self.activities {
                if self.co_occurrence[i][j] > 0.0 {
                    out.push((i, j, self.co_occurrence[i][j]));
                }
            }
        }
        out
    }
}

/// Spatio-temporal augmentation: frames are downsampled with a random phase,
/// a contiguous window is cut, and one random spatial crop is applied
/// identically to every frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub downsample_factor: usize,
    /// Consecutive frames kept after downsampling.
    pub window: usize,
    pub crop_w: usize,
    pub crop_h: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            downsample_factor: 3,
            window: 8,
            crop_w: 4,
            crop_h: 4,
        }
    }
}

/// One configuration document driving every subcommand: the model, optional
/// generator and augmentation sections, and default paths. Command-line
/// flags override the file values.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: Option<SynthSpec>,
    pub augment: Option<AugmentSpec>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.model.validate()?;
        if let Some(s) = &cfg.synth {
            s.validate()?;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the resolved configuration into an output directory so every
    /// artifact records how it was produced.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}
