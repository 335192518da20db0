//! Structural similarity with the standard 11x11 Gaussian window
//! (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1), computed per channel
//! and averaged. One differentiable builder serves both the loss and the
//! evaluation metric.

use crate::error::{Error, Result};
use crate::graph::{Graph, PadMode, ValueId};
use crate::imagecore::Image;
use crate::tensor::Tensor;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalized 1-D Gaussian taps for the separable window.
pub fn gaussian_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable Gaussian blur as two depthwise convolutions (reflect-padded).
fn window_blur(g: &mut Graph, x: ValueId, channels: usize) -> ValueId {
    let taps = gaussian_taps();
    let mut row = Tensor::zeros(&[channels, 1, WINDOW]);
    let mut col = Tensor::zeros(&[channels, WINDOW, 1]);
    for c in 0..channels {
        for (i, &t) in taps.iter().enumerate() {
            row.data_mut()[c * WINDOW + i] = t;
            col.data_mut()[c * WINDOW + i] = t;
        }
    }
    let row = g.constant(row);
    let col = g.constant(col);
    let h = g.depthwise_conv2d(x, row, PadMode::Reflect);
    let out = g.depthwise_conv2d(h, col, PadMode::Reflect);
    g.free_values(&[h]);
    out
}

/// Differentiable mean SSIM of two `[C,H,W]` values, as a scalar node.
pub fn ssim_node(g: &mut Graph, x: ValueId, y: ValueId) -> ValueId {
    assert_eq!(g.shape(x), g.shape(y), "ssim operands must share dims");
    let (c, _, _) = g.value(x).chw();
    let c1 = K1 * K1;
    let c2 = K2 * K2;

    let mu_x = window_blur(g, x, c);
    let mu_y = window_blur(g, y, c);
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let exx = window_blur(g, xx, c);
    let eyy = window_blur(g, yy, c);
    let exy = window_blur(g, xy, c);

    let mu_xx = g.mul(mu_x, mu_x);
    let mu_yy = g.mul(mu_y, mu_y);
    let mu_xy = g.mul(mu_x, mu_y);
    let var_x = g.sub(exx, mu_xx);
    let var_y = g.sub(eyy, mu_yy);
    let cov = g.sub(exy, mu_xy);

    let lum_num = {
        let m = g.scale(mu_xy, 2.0);
        g.add_scalar(m, c1)
    };
    let lum_den = {
        let s = g.add(mu_xx, mu_yy);
        g.add_scalar(s, c1)
    };
    let con_num = {
        let m = g.scale(cov, 2.0);
        g.add_scalar(m, c2)
    };
    let con_den = {
        let s = g.add(var_x, var_y);
        g.add_scalar(s, c2)
    };
    let num = g.mul(lum_num, con_num);
    let den = g.mul(lum_den, con_den);
    let map = g.div(num, den);
    let out = g.mean_all(map);
    g.free_values(&[
        mu_x, mu_y, xx, yy, xy, exx, eyy, exy, mu_xx, mu_yy, mu_xy, var_x, var_y, cov, lum_num,
        lum_den, con_num, con_den, num, den, map,
    ]);
    out
}

/// Mean SSIM of two images in `[-1, 1]`.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    if !x.same_dims(y) {
        return Err(Error::dims(format!(
            "ssim needs matching dims, got {}x{}x{} vs {}x{}x{}",
            x.height(),
            x.width(),
            x.channels(),
            y.height(),
            y.width(),
            y.channels()
        )));
    }
    let mut g = Graph::new(false);
    let xi = g.constant(x.to_tensor());
    let yi = g.constant(y.to_tensor());
    let s = ssim_node(&mut g, xi, yi);
    Ok(g.value(s).item())
}
