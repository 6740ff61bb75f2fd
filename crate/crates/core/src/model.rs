//! End-to-end model assembly: parameter container, the four-stage forward
//! pass with ablation toggles, the chained backward pass, gradient
//! verification against central differences, and attention export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::activity_attention::{
    activity_attend, activity_attend_backward, activity_maps, write_activity_maps,
    ActivityAttentionBank,
};
use crate::config::ModelConfig;
use crate::decoder::{
    bce_loss, bce_loss_backward, decode_backward, decode_cached, AssociationMasks, DecodeCache,
    DecoderMasking, DecoderParams,
};
use crate::encoder::{
    encode_backward, encode_cached, export_temporal_attention, write_temporal_attention,
    EncodeCache, EncoderParams,
};
use crate::error::{Error, Result};
use crate::numerics::{finite_diff_grad, max_relative_error};
use crate::tensor::Tensor;
use crate::vlad::{
    flatten_clusters, unflatten_clusters, vlad_encode_backward, vlad_encode_cached,
    ClusterCodebook, VladCache,
};
use crate::SeededRng;
use rand::{Rng, SeedableRng};

/// Every trainable tensor of the pipeline. Stages disabled by the
/// configuration simply have no parameters here.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub codebook: Option<ClusterCodebook>,
    pub bank: Option<ActivityAttentionBank>,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl ModelParams {
    /// Seeded initialization. Centroids start uniform in `[-1, 1]` (training
    /// normally replaces them with a K-means result), attention masks start
    /// as a spatial mean, projections uniform in `±1/√F`.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let codebook = if config.use_clustering {
            Some(ClusterCodebook::new(
                Tensor::uniform(&[config.clusters, config.channels], -1.0, 1.0, rng),
                1.0,
            )?)
        } else {
            None
        };
        let bank = config.use_activity_attention.then(|| {
            ActivityAttentionBank::init(config.activities, config.grid_w, config.grid_h)
        });
        let encoder = EncoderParams::init(
            config.activities,
            config.feature_dim(),
            config.proj_width(),
            config.per_activity_projections,
            rng,
        );
        let decoder = DecoderParams::init(
            config.activities,
            config.out_dim(),
            config.multi_dim_decoder,
            rng,
        );
        Ok(ModelParams {
            codebook,
            bank,
            encoder,
            decoder,
        })
    }

    /// Parameter groups in a fixed order, for the optimizer, the gradient
    /// gate and serialization.
    pub fn groups(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = Vec::new();
        if let Some(cb) = &self.codebook {
            v.push(("centroids", &cb.centroids));
            v.push(("alpha", &cb.alpha));
        }
        if let Some(bank) = &self.bank {
            v.push(("activity_masks", &bank.masks));
        }
        v.push(("encoder_wq", &self.encoder.wq));
        v.push(("encoder_wk", &self.encoder.wk));
        v.push(("encoder_wv", &self.encoder.wv));
        v.push(("decoder_align_w1", &self.decoder.align_w1));
        v.push(("decoder_align_w2", &self.decoder.align_w2));
        v.push(("decoder_align_bias", &self.decoder.align_b));
        v.push(("decoder_value_w", &self.decoder.value_w));
        v.push(("decoder_out_w", &self.decoder.out_w));
        v.push(("decoder_out_bias", &self.decoder.out_b));
        v
    }

    pub fn groups_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v = Vec::new();
        if let Some(cb) = &mut self.codebook {
            v.push(("centroids", &mut cb.centroids));
            v.push(("alpha", &mut cb.alpha));
        }
        if let Some(bank) = &mut self.bank {
            v.push(("activity_masks", &mut bank.masks));
        }
        v.push(("encoder_wq", &mut self.encoder.wq));
        v.push(("encoder_wk", &mut self.encoder.wk));
        v.push(("encoder_wv", &mut self.encoder.wv));
        v.push(("decoder_align_w1", &mut self.decoder.align_w1));
        v.push(("decoder_align_w2", &mut self.decoder.align_w2));
        v.push(("decoder_align_bias", &mut self.decoder.align_b));
        v.push(("decoder_value_w", &mut self.decoder.value_w));
        v.push(("decoder_out_w", &mut self.decoder.out_w));
        v.push(("decoder_out_bias", &mut self.decoder.out_b));
        v
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.groups_mut() {
            t.grad_mut();
            t.zero_grad();
        }
    }

    fn set_group(&mut self, name: &str, value: &Tensor) -> Result<()> {
        for (n, t) in self.groups_mut() {
            if n == name {
                if t.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "set_group",
                        left: t.shape().to_vec(),
                        right: value.shape().to_vec(),
                    });
                }
                *t = value.clone();
                return Ok(());
            }
        }
        Err(Error::invalid(format!("unknown parameter group {name}")))
    }
}

/// Intermediates of a full forward pass, consumed by [`backward`].
pub struct ForwardCache {
    vlad: Option<VladCache>,
    fcf: Tensor,
    fm_act: Tensor,
    encode: EncodeCache,
    fa: Tensor,
    decode: DecodeCache,
}

fn check_input(config: &ModelConfig, fm: &Tensor) -> Result<()> {
    if fm.shape() != config.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: fm.shape().to_vec(),
            right: config.input_shape().to_vec(),
        });
    }
    fm.ensure_finite("input feature map")
}

/// Spatial mean over the grid, broadcast to every activity: the stand-in for
/// the activity-attention stage when it is ablated away.
fn spatial_mean_broadcast(fcf: &Tensor, activities: usize) -> Tensor {
    let (t, w, h, f) = (
        fcf.extent(0),
        fcf.extent(1),
        fcf.extent(2),
        fcf.extent(3),
    );
    let cells = (w * h) as f64;
    let mut out = vec![0.0; t * activities * f];
    for ti in 0..t {
        let mut mean = vec![0.0; f];
        for cell in 0..w * h {
            let base = (ti * w * h + cell) * f;
            for fi in 0..f {
                mean[fi] += fcf.data()[base + fi];
            }
        }
        for m in mean.iter_mut() {
            *m /= cells;
        }
        for ai in 0..activities {
            out[(ti * activities + ai) * f..(ti * activities + ai + 1) * f]
                .copy_from_slice(&mean);
        }
    }
    Tensor::new(&[t, activities, f], out).unwrap()
}

fn spatial_mean_broadcast_backward(dfm_act: &Tensor, fcf_shape: &[usize]) -> Tensor {
    let (t, w, h, f) = (fcf_shape[0], fcf_shape[1], fcf_shape[2], fcf_shape[3]);
    let a = dfm_act.extent(1);
    let cells = (w * h) as f64;
    let mut dfcf = vec![0.0; t * w * h * f];
    for ti in 0..t {
        let mut acc = vec![0.0; f];
        for ai in 0..a {
            let base = (ti * a + ai) * f;
            for fi in 0..f {
                acc[fi] += dfm_act.data()[base + fi];
            }
        }
        for cell in 0..w * h {
            let base = (ti * w * h + cell) * f;
            for fi in 0..f {
                dfcf[base + fi] = acc[fi] / cells;
            }
        }
    }
    Tensor::new(fcf_shape, dfcf).unwrap()
}

fn decoder_masking<'a>(
    config: &ModelConfig,
    masks: &'a AssociationMasks,
) -> DecoderMasking<'a> {
    if config.association_masks {
        DecoderMasking::Association(masks)
    } else {
        DecoderMasking::Directional
    }
}

/// Runs the full pipeline on one `[T, W, H, C']` feature map and returns the
/// per-activity logits. `dropout_mask`, when given, must be `[A, F_out]`.
pub fn forward(
    config: &ModelConfig,
    params: &ModelParams,
    masks: &AssociationMasks,
    fm: &Tensor,
    dropout_mask: Option<&Tensor>,
) -> Result<Tensor> {
    forward_cached(config, params, masks, fm, dropout_mask).map(|(l, _)| l)
}

pub fn forward_cached(
    config: &ModelConfig,
    params: &ModelParams,
    masks: &AssociationMasks,
    fm: &Tensor,
    dropout_mask: Option<&Tensor>,
) -> Result<(Tensor, ForwardCache)> {
    check_input(config, fm)?;
    let (fcf, vlad) = match &params.codebook {
        Some(cb) => {
            let (v, cache) = vlad_encode_cached(fm, cb).map_err(|e| e.in_stage("clustering"))?;
            (flatten_clusters(v), Some(cache))
        }
        None => (fm.clone(), None),
    };
    let fm_act = match &params.bank {
        Some(bank) => {
            activity_attend(&fcf, bank).map_err(|e| e.in_stage("activity_attention"))?
        }
        None => spatial_mean_broadcast(&fcf, config.activities),
    };
    let (_, fa, encode) = encode_cached(&fm_act, &params.encoder, &config.encoder_settings())
        .map_err(|e| e.in_stage("encoder"))?;
    let (logits, decode) = decode_cached(
        &fa,
        decoder_masking(config, masks),
        &params.decoder,
        dropout_mask,
    )
    .map_err(|e| e.in_stage("decoder"))?;
    Ok((
        logits,
        ForwardCache {
            vlad,
            fcf,
            fm_act,
            encode,
            fa,
            decode,
        },
    ))
}

/// Chains the per-stage backward passes, accumulating into every parameter's
/// gradient buffer.
pub fn backward(
    config: &ModelConfig,
    params: &mut ModelParams,
    fm: &Tensor,
    cache: &ForwardCache,
    dropout_mask: Option<&Tensor>,
    dlogits: &Tensor,
) {
    let dfa = decode_backward(
        &cache.fa,
        &mut params.decoder,
        &cache.decode,
        dropout_mask,
        dlogits,
    );
    let dfm_act = encode_backward(
        &cache.fm_act,
        &mut params.encoder,
        &config.encoder_settings(),
        &cache.encode,
        &dfa,
    );
    let dfcf = match &mut params.bank {
        Some(bank) => activity_attend_backward(&cache.fcf, bank, &dfm_act),
        None => spatial_mean_broadcast_backward(&dfm_act, cache.fcf.shape()),
    };
    if let (Some(cb), Some(vcache)) = (&mut params.codebook, &cache.vlad) {
        let dv = unflatten_clusters(dfcf, cb.k(), cb.channels())
            .expect("gradient has the forward shape");
        vlad_encode_backward(fm, cb, vcache, &dv);
    }
}

/// Forward, loss, and backward for one sample. The logit gradient is scaled
/// by `grad_scale` (1/batch for mean-reduced batches); the returned loss is
/// unscaled.
pub fn loss_and_backward(
    config: &ModelConfig,
    params: &mut ModelParams,
    masks: &AssociationMasks,
    fm: &Tensor,
    targets: &[u8],
    dropout_mask: Option<&Tensor>,
    grad_scale: f64,
) -> Result<f64> {
    let (logits, cache) = forward_cached(config, params, masks, fm, dropout_mask)?;
    let loss = bce_loss(&logits, targets)?;
    let mut dlogits = bce_loss_backward(&logits, targets);
    dlogits.data_mut().iter_mut().for_each(|v| *v *= grad_scale);
    backward(config, params, fm, &cache, dropout_mask, &dlogits);
    Ok(loss)
}

// ── Persistence ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct GroupRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    mask_positive: Vec<f64>,
    groups: Vec<GroupRecord>,
}

/// Serializes config, association masks and every parameter group as JSON.
/// Values survive the round trip exactly; identical models produce
/// byte-identical files.
pub fn save_model(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams,
    masks: &AssociationMasks,
) -> Result<()> {
    let file = ModelFile {
        config: config.clone(),
        mask_positive: masks.positive.data().to_vec(),
        groups: params
            .groups()
            .iter()
            .map(|(name, t)| GroupRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let text = serde_json::to_string(&file).expect("params serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams, AssociationMasks)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    file.config.validate()?;
    let a = file.config.activities;
    if file.mask_positive.len() != a * a {
        return Err(Error::format(format!(
            "association mask has {} entries, expected {}",
            file.mask_positive.len(),
            a * a
        )));
    }
    let masks =
        AssociationMasks::from_positive(Tensor::new(&[a, a], file.mask_positive.clone())?)?;
    let mut rng = SeededRng::seed_from_u64(0);
    let mut params = ModelParams::init(&file.config, &mut rng)?;
    let expected = params.groups().len();
    if file.groups.len() != expected {
        return Err(Error::format(format!(
            "model file has {} parameter groups, expected {expected}",
            file.groups.len()
        )));
    }
    for rec in &file.groups {
        let t = Tensor::new(&rec.shape, rec.data.clone())?;
        t.ensure_finite(&rec.name)?;
        params.set_group(&rec.name, &t)?;
    }
    Ok((file.config, params, masks))
}

// ── Gradient gate ───────────────────────────────────────────────────

/// Result of checking one parameter group against central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GroupCheck>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Verifies reverse-mode gradients of the full pipeline (loss included)
/// against the central-difference oracle, group by group, on a random
/// instance. Dropout is disabled. `corrupt_group` deliberately scales one
/// group's analytic gradient to serve as a negative control.
pub fn gradcheck_model(
    config: &ModelConfig,
    seed: u64,
    tolerance: f64,
    corrupt_group: Option<&str>,
) -> Result<GradcheckReport> {
    config.validate()?;
    let mut rng = SeededRng::seed_from_u64(seed);
    let mut params = ModelParams::init(config, &mut rng)?;
    let fm = Tensor::uniform(&config.input_shape(), -1.0, 1.0, &mut rng);
    let a = config.activities;
    let label_rows: Vec<Vec<u8>> = (0..16)
        .map(|_| (0..a).map(|_| rng.random_range(0..=1u8)).collect())
        .collect();
    let masks = crate::decoder::build_assoc_masks(&label_rows, a)?;
    let targets: Vec<u8> = (0..a).map(|_| rng.random_range(0..=1u8)).collect();

    params.zero_grads();
    loss_and_backward(config, &mut params, &masks, &fm, &targets, None, 1.0)?;

    let names: Vec<&'static str> = params.groups().iter().map(|(n, _)| *n).collect();
    let mut groups = Vec::new();
    for name in names {
        let value = params
            .groups()
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| (*t).clone())
            .unwrap();
        let mut analytic = value.grad().unwrap().to_vec();
        if corrupt_group == Some(name) {
            analytic.iter_mut().for_each(|g| *g = *g * 1.01 + 1e-3);
        }
        let numeric = finite_diff_grad(
            |probe| {
                let mut trial = params.clone();
                trial.set_group(name, probe)?;
                let logits = forward(config, &trial, &masks, &fm, None)?;
                bce_loss(&logits, &targets)
            },
            &value,
            1e-5,
        )?;
        let max_rel_err = max_relative_error(&analytic, numeric.data());
        groups.push(GroupCheck {
            name: name.to_string(),
            max_rel_err,
            pass: max_rel_err < tolerance,
        });
    }
    let pass = groups.iter().all(|g| g.pass);
    Ok(GradcheckReport {
        groups,
        tolerance,
        pass,
    })
}

// ── Attention export ────────────────────────────────────────────────

/// Writes every attention artifact for one sample: per-activity spatial
/// activation maps (when the stage is enabled), per-activity temporal
/// attention grids for each direction, and the association mask CSVs.
pub fn export_attention_artifacts(
    config: &ModelConfig,
    params: &ModelParams,
    masks: &AssociationMasks,
    fm: &Tensor,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    check_input(config, fm)?;
    let mut written = Vec::new();
    let fcf = match &params.codebook {
        Some(cb) => flatten_clusters(crate::vlad::vlad_encode(fm, cb)?),
        None => fm.clone(),
    };
    if let Some(bank) = &params.bank {
        let maps = activity_maps(bank, &fcf)?;
        written.extend(write_activity_maps(&maps, out_dir, true)?);
    }
    let fm_act = match &params.bank {
        Some(bank) => activity_attend(&fcf, bank)?,
        None => spatial_mean_broadcast(&fcf, config.activities),
    };
    let grids =
        export_temporal_attention(&fm_act, &params.encoder, &config.encoder_settings())?;
    written.extend(write_temporal_attention(&grids, out_dir)?);
    written.extend(masks.write_csv(out_dir)?);
    Ok(written)
}
