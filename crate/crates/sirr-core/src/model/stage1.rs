//! Stage 1: reflection detection and prediction.
//!
//! Multi-scale Laplacian features feed the detection module, whose sigmoid
//! head emits the reflection confidence map. The suppression module masks
//! the refined features by that map so transmission structure drops out
//! before the recurrent cell predicts the reflection layer.

use crate::error::Result;
use crate::graph::{Graph, PadMode, ValueId};
use crate::model::blocks::{conv, conv_lstm_cell, prelu, se_res_block, Init, LstmState, ParamBinder};
use crate::model::{FeatureMode, ModelConfig, RcmapSource};
use crate::tensor::Tensor;

pub(crate) struct Stage1Outputs {
    pub r_hat: ValueId,
    pub c_hat: ValueId,
    pub inv_c: ValueId,
    pub state: Option<(ValueId, ValueId)>,
}

/// Multi-scale Laplacian sub-module: per-channel 3x3 kernels (learnable,
/// Laplacian-initialized) applied at each pyramid scale, upsampled back and
/// concatenated. In edge mode the kernels are bypassed and fixed forward
/// differences provide the per-channel gradient magnitude instead.
pub(crate) fn mlsm_forward(
    g: &mut Graph,
    pb: &mut ParamBinder,
    config: &ModelConfig,
    x_in: ValueId,
) -> ValueId {
    let (c, h, w) = g.value(x_in).chw();
    let mut per_scale = Vec::new();
    let mut temps = Vec::new();
    for d in config.scales_sorted() {
        let scaled = if d == 1 {
            x_in
        } else {
            let s = g.resize_bilinear(x_in, h / d, w / d);
            temps.push(s);
            s
        };
        let feat = match config.feature_mode {
            FeatureMode::Laplacian => {
                let k = pb.param(
                    g,
                    &format!("mlsm/scale{d}/kernel"),
                    &[c, 3, 3],
                    Init::LaplacianPerChannel,
                );
                g.depthwise_conv2d(scaled, k, PadMode::Reflect)
            }
            FeatureMode::Edge => {
                // the learnable kernels stay allocated (parameter count is
                // part of the ablation contract) but receive no gradient
                let _ = pb.param(
                    g,
                    &format!("mlsm/scale{d}/kernel"),
                    &[c, 3, 3],
                    Init::LaplacianPerChannel,
                );
                edge_magnitude(g, scaled, c)
            }
        };
        let restored = if d == 1 {
            feat
        } else {
            let up = g.resize_bilinear(feat, h, w);
            temps.push(feat);
            up
        };
        per_scale.push(restored);
    }
    let out = g.concat(&per_scale);
    temps.extend(per_scale);
    g.free_values(&temps);
    out
}

/// Per-channel forward-difference magnitude, sqrt(dx^2 + dy^2 + eps).
fn edge_magnitude(g: &mut Graph, x: ValueId, c: usize) -> ValueId {
    let mut dx_k = Tensor::zeros(&[c, 3, 3]);
    let mut dy_k = Tensor::zeros(&[c, 3, 3]);
    for ch in 0..c {
        // center -1, right +1
        dx_k.data_mut()[ch * 9 + 4] = -1.0;
        dx_k.data_mut()[ch * 9 + 5] = 1.0;
        // center -1, below +1
        dy_k.data_mut()[ch * 9 + 4] = -1.0;
        dy_k.data_mut()[ch * 9 + 7] = 1.0;
    }
    let dx_k = g.constant(dx_k);
    let dy_k = g.constant(dy_k);
    let dx = g.depthwise_conv2d(x, dx_k, PadMode::Reflect);
    let dy = g.depthwise_conv2d(x, dy_k, PadMode::Reflect);
    let dx2 = g.mul(dx, dx);
    let dy2 = g.mul(dy, dy);
    let sum = g.add(dx2, dy2);
    let guarded = g.add_scalar(sum, 1e-8);
    let out = g.pow_scalar(guarded, 0.5);
    g.free_values(&[dx, dy, dx2, dy2, sum, guarded]);
    out
}

/// Reflection detection module: projection, SE-residual refinement, sigmoid
/// head emitting the one-channel confidence map.
pub(crate) fn rdm_forward(
    g: &mut Graph,
    pb: &mut ParamBinder,
    config: &ModelConfig,
    features: ValueId,
    in_ch: usize,
) -> ValueId {
    let c = config.lap_channels();
    let proj = conv(g, pb, "rdm/proj", features, in_ch, c, 3, 1);
    let mut y = prelu(g, pb, "rdm/proj_act", proj);
    g.free_values(&[proj]);
    for b in 0..config.se_blocks_detect {
        let next = se_res_block(g, pb, &format!("rdm/block{b}"), y, c);
        g.free_values(&[y]);
        y = next;
    }
    let logits = conv(g, pb, "rdm/head", y, c, 1, 3, 1);
    let out = g.sigmoid(logits);
    g.free_values(&[y, logits]);
    out
}

/// Transmission-feature suppression: refine the Laplacian features, then
/// gate every channel by the confidence map.
pub(crate) fn tsm_forward(
    g: &mut Graph,
    pb: &mut ParamBinder,
    config: &ModelConfig,
    features: ValueId,
    c_hat: ValueId,
    in_ch: usize,
) -> ValueId {
    let c = config.lap_channels();
    let proj = conv(g, pb, "tsm/proj", features, in_ch, c, 3, 1);
    let mut y = prelu(g, pb, "tsm/proj_act", proj);
    g.free_values(&[proj]);
    for b in 0..config.se_blocks_detect {
        let next = se_res_block(g, pb, &format!("tsm/block{b}"), y, c);
        g.free_values(&[y]);
        y = next;
    }
    let out = g.mul_mask(y, c_hat);
    g.free_values(&[y]);
    out
}

pub(crate) fn stage1_forward(
    g: &mut Graph,
    pb: &mut ParamBinder,
    config: &ModelConfig,
    input: ValueId,
    t_prev: ValueId,
    state: Option<(ValueId, ValueId)>,
) -> Result<Stage1Outputs> {
    let (_, h, w) = g.value(input).chw();
    let bc = config.base_channels;
    let enc_ch = config.enc_channels();

    let x_in = g.concat(&[input, t_prev]);

    // image feature encoder over [I, T_prev]
    let e0 = conv(g, pb, "stage1/enc/conv0", x_in, 6, bc, 3, 1);
    let a0 = prelu(g, pb, "stage1/enc/act0", e0);
    let e1 = conv(g, pb, "stage1/enc/conv1", a0, bc, enc_ch, 3, 1);
    let a1 = prelu(g, pb, "stage1/enc/act1", e1);
    let e2 = conv(g, pb, "stage1/enc/conv2", a1, enc_ch, enc_ch, 3, 1);
    let f_img = prelu(g, pb, "stage1/enc/act2", e2);
    g.free_values(&[e0, a0, e1, a1, e2]);

    let mlsm_out = if config.needs_mlsm() {
        Some(mlsm_forward(g, pb, config, x_in))
    } else {
        None
    };

    let c_hat = if config.use_rdm {
        match config.rcmap_source {
            RcmapSource::Mlsm => {
                let feats = mlsm_out.expect("mlsm present when it sources the confidence map");
                rdm_forward(g, pb, config, feats, config.mlsm_out_channels())
            }
            RcmapSource::ImageFeatures => rdm_forward(g, pb, config, f_img, enc_ch),
        }
    } else {
        g.constant(Tensor::full(&[1, h, w], 1.0))
    };

    // inverse confidence map for stage 2
    let neg = g.scale(c_hat, -1.0);
    let inv_c = g.add_scalar(neg, 1.0);
    g.free_values(&[neg]);

    // recurrent cell input
    let z = if config.use_tsm {
        let feats = mlsm_out.expect("mlsm present when the suppression module runs");
        let suppressed = tsm_forward(g, pb, config, feats, c_hat, config.mlsm_out_channels());
        let z = g.concat(&[f_img, suppressed]);
        g.free_values(&[suppressed]);
        z
    } else {
        f_img
    };
    if let Some(m) = mlsm_out {
        g.free_values(&[m]);
    }
    let z_ch = if config.use_tsm { enc_ch + config.lap_channels() } else { enc_ch };

    let hidden_ch = config.hidden_channels();
    let (features, new_state) = if config.use_lstm {
        let (h_prev, c_prev) = state.expect("lstm state threaded when the cell is enabled");
        let st = LstmState { hidden: h_prev, cell: c_prev };
        let next = conv_lstm_cell(g, pb, "stage1/lstm", z, z_ch, &st, hidden_ch);
        (next.hidden, Some((next.hidden, next.cell)))
    } else {
        let y = conv(g, pb, "stage1/fuse", z, z_ch, hidden_ch, 3, 1);
        let y = prelu(g, pb, "stage1/fuse_act", y);
        (y, None)
    };
    if config.use_tsm {
        g.free_values(&[z]);
    }

    // reflection head
    let mut y = features;
    for b in 0..config.se_blocks_head {
        let next = se_res_block(g, pb, &format!("stage1/rhead/block{b}"), y, hidden_ch);
        if y != features {
            g.free_values(&[y]);
        }
        y = next;
    }
    let raw = conv(g, pb, "stage1/rhead/out", y, hidden_ch, 3, 3, 1);
    let r_hat = g.clamp01(raw);
    if y != features {
        g.free_values(&[y]);
    }
    g.free_values(&[raw, x_in, f_img]);

    Ok(Stage1Outputs { r_hat, c_hat, inv_c, state: new_state })
}
