//! Stage 2: transmission restoration.
//!
//! A contextual autoencoder over `[I, T_prev, R_hat, 1 - C_hat]`. Every
//! Conv+ReLU pair is followed by a CBAM gate; the decoder mirrors the
//! encoder with skip connections and taps side outputs at 1/4 and 1/2
//! resolution before the full-resolution head.

use crate::error::Result;
use crate::graph::{Graph, ValueId};
use crate::model::blocks::{cbam, conv, ParamBinder};
use crate::model::ModelConfig;

pub(crate) struct Stage2Outputs {
    pub t_full: ValueId,
    pub t_half: ValueId,
    pub t_quarter: ValueId,
}

fn conv_relu_cbam(
    g: &mut Graph,
    pb: &mut ParamBinder,
    name: &str,
    x: ValueId,
    cin: usize,
    cout: usize,
    stride: usize,
) -> ValueId {
    let y = conv(g, pb, &format!("{name}/conv"), x, cin, cout, 3, stride);
    let a = g.relu(y);
    let out = cbam(g, pb, &format!("{name}/cbam"), a, cout);
    g.free_values(&[y, a]);
    out
}

pub(crate) fn stage2_forward(
    g: &mut Graph,
    pb: &mut ParamBinder,
    config: &ModelConfig,
    input: ValueId,
    t_prev: ValueId,
    r_hat: ValueId,
    inv_c: ValueId,
) -> Result<Stage2Outputs> {
    let bc = config.base_channels;
    let y = g.concat(&[input, t_prev, r_hat, inv_c]);

    // encoder
    let e0 = conv_relu_cbam(g, pb, "stage2/e0", y, 10, bc, 1);
    let d1 = conv_relu_cbam(g, pb, "stage2/e1/down", e0, bc, 2 * bc, 2);
    let e1 = conv_relu_cbam(g, pb, "stage2/e1/refine", d1, 2 * bc, 2 * bc, 1);
    let d2 = conv_relu_cbam(g, pb, "stage2/e2/down", e1, 2 * bc, 4 * bc, 2);
    let e2 = conv_relu_cbam(g, pb, "stage2/e2/refine", d2, 4 * bc, 4 * bc, 1);
    let d3 = conv_relu_cbam(g, pb, "stage2/e3/down", e2, 4 * bc, 8 * bc, 2);
    let e3 = conv_relu_cbam(g, pb, "stage2/e3/refine", d3, 8 * bc, 8 * bc, 1);
    g.free_values(&[y, d1, d2, d3]);

    // decoder with skip connections
    let (_, h2, w2) = g.value(e2).chw();
    let (_, h1, w1) = g.value(e1).chw();
    let (_, h0, w0) = g.value(e0).chw();
    let up2 = g.resize_bilinear(e3, h2, w2);
    let r2 = conv_relu_cbam(g, pb, "stage2/d2/reduce", up2, 8 * bc, 4 * bc, 1);
    let cat2 = g.concat(&[r2, e2]);
    let f2 = conv_relu_cbam(g, pb, "stage2/d2/fuse", cat2, 8 * bc, 4 * bc, 1);
    g.free_values(&[e3, up2, r2, cat2, e2]);
    let q_raw = conv(g, pb, "stage2/side_quarter", f2, 4 * bc, 3, 3, 1);
    let t_quarter = g.clamp01(q_raw);

    let up1 = g.resize_bilinear(f2, h1, w1);
    let r1 = conv_relu_cbam(g, pb, "stage2/d1/reduce", up1, 4 * bc, 2 * bc, 1);
    let cat1 = g.concat(&[r1, e1]);
    let f1 = conv_relu_cbam(g, pb, "stage2/d1/fuse", cat1, 4 * bc, 2 * bc, 1);
    g.free_values(&[f2, up1, r1, cat1, e1, q_raw]);
    let h_raw = conv(g, pb, "stage2/side_half", f1, 2 * bc, 3, 3, 1);
    let t_half = g.clamp01(h_raw);

    let up0 = g.resize_bilinear(f1, h0, w0);
    let r0 = conv_relu_cbam(g, pb, "stage2/d0/reduce", up0, 2 * bc, bc, 1);
    let cat0 = g.concat(&[r0, e0]);
    let f0 = conv_relu_cbam(g, pb, "stage2/d0/fuse", cat0, 2 * bc, bc, 1);
    g.free_values(&[f1, up0, r0, cat0, e0, h_raw]);

    let full_raw = conv(g, pb, "stage2/head", f0, bc, 3, 3, 1);
    let t_full = g.clamp01(full_raw);
    g.free_values(&[f0, full_raw]);

    Ok(Stage2Outputs { t_full, t_half, t_quarter })
}
