//! Analytic multiply-accumulate counts per pipeline stage. The encoder's
//! score and weighting terms are reported separately from its projections
//! because they scale quadratically with the frame count.

use serde::Serialize;

use crate::config::ModelConfig;

#[derive(Debug, Clone, Serialize)]
pub struct MaccReport {
    pub clustering: u64,
    pub activity_attention: u64,
    pub encoder_projections: u64,
    pub encoder_attention: u64,
    pub decoder_attention: u64,
    pub decoder_scoring: u64,
    pub total: u64,
}

/// Per-stage and total MACC counts for one forward pass of one clip.
pub fn macc_estimate(config: &ModelConfig) -> MaccReport {
    let t = config.frames as u64;
    let w = config.grid_w as u64;
    let h = config.grid_h as u64;
    let cp = config.channels as u64;
    let k = config.clusters as u64;
    let a = config.activities as u64;
    let f = config.feature_dim() as u64;
    let d = config.proj_width() as u64;
    let fo = config.out_dim() as u64;
    let branches = if config.temporal_masks { 2 } else { 1 };

    let clustering = if config.use_clustering {
        t * w * h * k * cp
    } else {
        0
    };
    let activity_attention = if config.use_activity_attention {
        t * a * w * h * f
    } else {
        0
    };
    let encoder_projections = a * branches * 3 * t * f * d;
    // Scores (T²·d) plus attention-weighted values (T²·d), per branch.
    let encoder_attention = a * branches * 2 * t * t * d;
    // Two branches, alignment plus weighting each A²·F_out.
    let decoder_attention = 2 * 2 * a * a * fo;
    let decoder_scoring = a * fo;
    MaccReport {
        clustering,
        activity_attention,
        encoder_projections,
        encoder_attention,
        decoder_attention,
        decoder_scoring,
        total: clustering
            + activity_attention
            + encoder_projections
            + encoder_attention
            + decoder_attention
            + decoder_scoring,
    }
}
