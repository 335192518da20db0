//! Training losses: composition (confidence + residual), perceptual, the
//! SSIM/L1 mixture, and the adversarial term, combined into the weighted
//! total that drives the optimizer.
//!
//! Every builder takes graph value ids so terms can be assembled and tested
//! independently; [`build_generator_loss`] wires the full objective for one
//! sample.

pub mod adversarial;
pub mod perceptual;
pub mod ssim;

pub use perceptual::FeatureExtractor;
pub use ssim::{ssim, ssim_node};

use crate::error::{Error, Result};
use crate::graph::{Graph, ValueId};
use crate::model::{ParamBinder, Trace};
use serde::{Deserialize, Serialize};

pub const DEFAULT_GAMMA: f64 = 2.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_comp: f64,
    pub lambda_perceptual: f64,
    pub lambda_mix: f64,
    pub lambda_adv: f64,
    /// Per-iteration attenuation: iteration i of N is weighted theta^(N-i).
    pub theta: f64,
    /// SSIM share of the mixture loss.
    pub mix_alpha: f64,
    pub gamma_full: f64,
    pub gamma_half: f64,
    pub gamma_quarter: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_comp: 0.4,
            lambda_perceptual: 0.2,
            lambda_mix: 0.4,
            lambda_adv: 0.01,
            theta: 0.85,
            mix_alpha: 0.84,
            gamma_full: 1.0,
            gamma_half: 0.8,
            gamma_quarter: 0.6,
        }
    }
}

/// Loss-term removal switches (the per-loss ablation rows).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossFlags {
    pub drop_pixel: bool,
    pub drop_ssim: bool,
    pub drop_perceptual: bool,
    pub drop_comp: bool,
    pub drop_adv: bool,
    /// Real pairs carry no reflection layer; when set, clamp(I - T) stands in
    /// for it in the confidence term.
    pub pseudo_reflection_for_real: bool,
}

impl LossFlags {
    pub fn standard() -> Self {
        LossFlags { pseudo_reflection_for_real: true, ..LossFlags::default() }
    }
}

/// Named scalars for one optimization step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub comp: f64,
    pub c_term: f64,
    pub residual: f64,
    pub perceptual: f64,
    pub pixel: f64,
    pub ssim: f64,
    pub mix: f64,
    pub adversarial: f64,
    pub total: f64,
    pub residual_skipped: bool,
}

/// `[theta^(N-1), ..., theta, 1]` — the per-iteration supervision weights.
pub fn theta_weights(theta: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| theta.powi((n - 1 - i) as i32)).collect()
}

fn mse(g: &mut Graph, a: ValueId, b: ValueId) -> ValueId {
    let d = g.sub(a, b);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

fn mean_abs(g: &mut Graph, a: ValueId, b: ValueId) -> ValueId {
    let d = g.sub(a, b);
    let ab = g.abs(d);
    g.mean_all(ab)
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, ValueId)]) -> ValueId {
    let mut acc: Option<ValueId> = None;
    for &(w, t) in terms {
        let scaled = g.scale(t, w);
        acc = Some(match acc {
            Some(a) => g.add(a, scaled),
            None => scaled,
        });
    }
    acc.expect("weighted_sum needs at least one term")
}

/// Composition from the confidence map: `(1 - C) . T + R` (unclamped; this
/// is a loss-side quantity).
pub fn compose_image(g: &mut Graph, c_hat: ValueId, t: ValueId, r: ValueId) -> ValueId {
    let neg = g.scale(c_hat, -1.0);
    let inv = g.add_scalar(neg, 1.0);
    let masked = g.mul_mask(t, inv);
    g.add(masked, r)
}

/// Theta-weighted MSE between the input and the per-iteration compositions.
pub fn loss_confidence(
    g: &mut Graph,
    c_hats: &[ValueId],
    input: ValueId,
    t: ValueId,
    r: ValueId,
    theta: f64,
) -> ValueId {
    let weights = theta_weights(theta, c_hats.len());
    let terms: Vec<(f64, ValueId)> = c_hats
        .iter()
        .zip(&weights)
        .map(|(&c, &w)| {
            let composed = compose_image(g, c, t, r);
            (w, mse(g, input, composed))
        })
        .collect();
    weighted_sum(g, &terms)
}

/// Linear-space recomposition penalty for synthetic samples: both the
/// ground-truth-transmission and predicted-transmission forms, compared to
/// the inverse-gamma input, theta-weighted and summed.
#[allow(clippy::too_many_arguments)]
pub fn loss_residual(
    g: &mut Graph,
    t_hats: &[ValueId],
    r_hats: &[ValueId],
    input: ValueId,
    t: ValueId,
    blend_alpha: f64,
    theta: f64,
    gamma: f64,
) -> ValueId {
    let weights = theta_weights(theta, t_hats.len());
    let input_lin = g.pow_scalar(input, gamma);
    let t_lin = g.pow_scalar(t, gamma);
    let t_scaled = g.scale(t_lin, blend_alpha);
    let mut terms = Vec::new();
    for ((&t_hat, &r_hat), &w) in t_hats.iter().zip(r_hats).zip(&weights) {
        let r_hat_lin = g.pow_scalar(r_hat, gamma);
        let t_hat_lin = g.pow_scalar(t_hat, gamma);
        let form_gt = g.add(t_scaled, r_hat_lin);
        let t_hat_scaled = g.scale(t_hat_lin, blend_alpha);
        let form_pred = g.add(t_hat_scaled, r_hat_lin);
        terms.push((w, mse(g, input_lin, form_gt)));
        terms.push((w, mse(g, input_lin, form_pred)));
    }
    weighted_sum(g, &terms)
}

/// Theta-weighted L1 between the ground truth and each iteration's
/// transmission estimate.
pub fn loss_pixel(g: &mut Graph, t_hats: &[ValueId], t: ValueId, theta: f64) -> ValueId {
    let weights = theta_weights(theta, t_hats.len());
    let terms: Vec<(f64, ValueId)> = t_hats
        .iter()
        .zip(&weights)
        .map(|(&th, &w)| (w, mean_abs(g, t, th)))
        .collect();
    weighted_sum(g, &terms)
}

/// Mixture of the structural and L1 terms:
/// `mix_alpha * sum_i theta^(N-i) (1 - SSIM(T, T_i)) + (1 - mix_alpha) * pixel`.
/// Returns `(mix, pixel, ssim_term)`; dropped terms contribute zero.
pub fn loss_mix(
    g: &mut Graph,
    t_hats: &[ValueId],
    t: ValueId,
    weights: &LossWeights,
    flags: &LossFlags,
) -> (ValueId, ValueId, ValueId) {
    let zero = g.constant(crate::tensor::Tensor::scalar(0.0));
    let pixel = if flags.drop_pixel {
        zero
    } else {
        loss_pixel(g, t_hats, t, weights.theta)
    };
    let ssim_term = if flags.drop_ssim {
        zero
    } else {
        let tw = theta_weights(weights.theta, t_hats.len());
        let terms: Vec<(f64, ValueId)> = t_hats
            .iter()
            .zip(&tw)
            .map(|(&th, &w)| {
                let s = ssim_node(g, t, th);
                let neg = g.scale(s, -1.0);
                (w, g.add_scalar(neg, 1.0))
            })
            .collect();
        weighted_sum(g, &terms)
    };
    let mix = weighted_sum(
        g,
        &[(weights.mix_alpha, ssim_term), (1.0 - weights.mix_alpha, pixel)],
    );
    (mix, pixel, ssim_term)
}

/// `lambda_1 comp + lambda_2 perceptual + lambda_3 mix + lambda_4 adv`.
pub fn loss_total(report: &LossReport, weights: &LossWeights) -> f64 {
    weights.lambda_comp * report.comp
        + weights.lambda_perceptual * report.perceptual
        + weights.lambda_mix * report.mix
        + weights.lambda_adv * report.adversarial
}

/// Ground-truth bundle for one training sample, as graph constants.
#[derive(Debug, Clone)]
pub struct SampleIds {
    pub input: ValueId,
    pub transmission: ValueId,
    /// Present for synthetic triples, absent for real pairs.
    pub reflection: Option<ValueId>,
    /// Known blend coefficient of the linear synthesis; absent for real pairs.
    pub blend_alpha: Option<f64>,
}

pub struct GeneratorLoss {
    pub total: ValueId,
    pub report: LossReport,
}

/// Assemble the full training objective for one sample.
///
/// `disc` supplies the discriminator parameters when the adversarial term is
/// active; the discriminator is evaluated but not trained through this graph.
#[allow(clippy::too_many_arguments)]
pub fn build_generator_loss(
    g: &mut Graph,
    trace: &Trace,
    sample: &SampleIds,
    extractor: &FeatureExtractor,
    disc: Option<&mut ParamBinder>,
    weights: &LossWeights,
    flags: &LossFlags,
    gamma: f64,
) -> Result<GeneratorLoss> {
    if gamma <= 0.0 {
        return Err(Error::invalid("gamma must be positive"));
    }
    let t_hats: Vec<ValueId> = trace.iters.iter().map(|it| it.t_hat).collect();
    let r_hats: Vec<ValueId> = trace.iters.iter().map(|it| it.r_hat).collect();
    let c_hats: Vec<ValueId> = trace.iters.iter().map(|it| it.c_hat).collect();
    let zero = g.constant(crate::tensor::Tensor::scalar(0.0));

    let mut report = LossReport::default();

    // composition loss: confidence + residual
    let (comp, c_term, residual) = if flags.drop_comp {
        (zero, zero, zero)
    } else {
        let r_for_confidence = match sample.reflection {
            Some(r) => Some(r),
            None if flags.pseudo_reflection_for_real => {
                let d = g.sub(sample.input, sample.transmission);
                Some(g.clamp01(d))
            }
            None => None,
        };
        let c_term = match r_for_confidence {
            Some(r) => loss_confidence(g, &c_hats, sample.input, sample.transmission, r, weights.theta),
            None => zero,
        };
        let residual = match (sample.reflection, sample.blend_alpha) {
            (Some(_), Some(alpha)) => loss_residual(
                g,
                &t_hats,
                &r_hats,
                sample.input,
                sample.transmission,
                alpha,
                weights.theta,
                gamma,
            ),
            _ => {
                report.residual_skipped = true;
                zero
            }
        };
        (g.add(c_term, residual), c_term, residual)
    };

    let perceptual = if flags.drop_perceptual {
        zero
    } else {
        let last = trace.last();
        perceptual::loss_perceptual(
            g,
            extractor,
            sample.transmission,
            last.t_hat,
            last.t_half,
            last.t_quarter,
            weights,
        )
    };

    let (mix, pixel, ssim_term) = loss_mix(g, &t_hats, sample.transmission, weights, flags);

    let adversarial = match (disc, flags.drop_adv) {
        (Some(pb), false) => {
            let prob = adversarial::discriminator_forward(
                g,
                pb,
                sample.transmission,
                trace.last().t_hat,
            );
            adversarial::generator_term(g, prob)
        }
        _ => zero,
    };

    let total = weighted_sum(
        g,
        &[
            (weights.lambda_comp, comp),
            (weights.lambda_perceptual, perceptual),
            (weights.lambda_mix, mix),
            (weights.lambda_adv, adversarial),
        ],
    );

    report.comp = g.value(comp).item();
    report.c_term = g.value(c_term).item();
    report.residual = g.value(residual).item();
    report.perceptual = g.value(perceptual).item();
    report.pixel = g.value(pixel).item();
    report.ssim = g.value(ssim_term).item();
    report.mix = g.value(mix).item();
    report.adversarial = g.value(adversarial).item();
    report.total = g.value(total).item();
    Ok(GeneratorLoss { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckSettings};
    use crate::tensor::Tensor;
    use rand::Rng;

    fn rand01(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = crate::rng::rng_from_seed(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.05..0.95))
    }

    #[test]
    fn theta_schedule_exact() {
        let w = theta_weights(0.85, 3);
        assert!((w[0] - 0.7225).abs() < 1e-12);
        assert!((w[1] - 0.85).abs() < 1e-12);
        assert!((w[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn compose_boundary_cases() {
        let mut g = Graph::new(false);
        let t = g.constant(Tensor::full(&[3, 4, 4], 0.4));
        let r = g.constant(Tensor::full(&[3, 4, 4], 0.1));
        let c0 = g.constant(Tensor::zeros(&[1, 4, 4]));
        let c1 = g.constant(Tensor::full(&[1, 4, 4], 1.0));
        let ch = g.constant(Tensor::full(&[1, 4, 4], 0.5));

        let i0 = compose_image(&mut g, c0, t, r);
        assert!(g.value(i0).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let i1 = compose_image(&mut g, c1, t, r);
        assert!(g.value(i1).data().iter().all(|&v| (v - 0.1).abs() < 1e-15));
        let ih = compose_image(&mut g, ch, t, r);
        assert!(g.value(ih).data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn confidence_loss_closed_form() {
        // constant composition error e at every iteration -> e^2 * sum(theta)
        let mut g = Graph::new(false);
        let t = g.constant(Tensor::full(&[3, 4, 4], 0.5));
        let r = g.constant(Tensor::zeros(&[3, 4, 4]));
        let e = 0.125;
        let input = g.constant(Tensor::full(&[3, 4, 4], 0.5 + e));
        let c_hats: Vec<_> = (0..3).map(|_| g.constant(Tensor::zeros(&[1, 4, 4]))).collect();
        let loss = loss_confidence(&mut g, &c_hats, input, t, r, 0.85);
        let want = e * e * (0.7225 + 0.85 + 1.0);
        assert!((g.value(loss).item() - want).abs() < 1e-12);

        // perfect composition -> 0
        let perfect = g.constant(Tensor::full(&[3, 4, 4], 0.5));
        let loss0 = loss_confidence(&mut g, &c_hats, perfect, t, r, 0.85);
        assert!(g.value(loss0).item() < 1e-24);
    }

    #[test]
    fn residual_loss_perfect_predictions_vanish() {
        // alpha=1, T_hat=T, R_hat=0, I composed exactly
        let mut g = Graph::new(false);
        let t_img = rand01(&[3, 4, 4], 1);
        let t = g.constant(t_img.clone());
        let r0 = g.constant(Tensor::zeros(&[3, 4, 4]));
        let input = t; // alpha=1, R=0 in gamma space composes to exactly T
        let loss = loss_residual(&mut g, &[t, t], &[r0, r0], input, t, 1.0, 0.85, 2.2);
        assert!(g.value(loss).item() < 1e-20);
    }

    #[test]
    fn residual_loss_closed_form_offset() {
        // R_hat off by constant e in linear space contributes via both forms
        let mut g = Graph::new(false);
        let gamma = 2.2;
        let t_lin = 0.3f64;
        let r_lin_err = 0.06f64;
        let t = g.constant(Tensor::full(&[3, 4, 4], t_lin.powf(1.0 / gamma)));
        let alpha = 0.9;
        let i_lin = alpha * t_lin;
        let input = g.constant(Tensor::full(&[3, 4, 4], i_lin.powf(1.0 / gamma)));
        let r_hat = g.constant(Tensor::full(&[3, 4, 4], r_lin_err.powf(1.0 / gamma)));
        let loss = loss_residual(&mut g, &[t], &[r_hat], input, t, alpha, 0.85, gamma);
        // both forms reduce to alpha*t_lin + r_err vs alpha*t_lin
        let want = 2.0 * r_lin_err * r_lin_err;
        assert!((g.value(loss).item() - want).abs() < 1e-12, "{}", g.value(loss).item());
    }

    #[test]
    fn pixel_loss_final_iteration_offset() {
        let mut g = Graph::new(false);
        let t = g.constant(Tensor::full(&[3, 4, 4], 0.5));
        let e = 0.07;
        let off = g.constant(Tensor::full(&[3, 4, 4], 0.5 + e));
        let loss = loss_pixel(&mut g, &[t, t, off], t, 0.85);
        assert!((g.value(loss).item() - e).abs() < 1e-12);
        // sign symmetry
        let off_neg = g.constant(Tensor::full(&[3, 4, 4], 0.5 - e));
        let loss2 = loss_pixel(&mut g, &[t, t, off_neg], t, 0.85);
        assert!((g.value(loss2).item() - e).abs() < 1e-12);
    }

    #[test]
    fn mix_degenerate_weights() {
        let t_img = rand01(&[3, 16, 16], 2);
        let th_img = rand01(&[3, 16, 16], 3);
        let run = |mix_alpha: f64, flags: LossFlags| {
            let mut g = Graph::new(false);
            let t = g.constant(t_img.clone());
            let th = g.constant(th_img.clone());
            let w = LossWeights { mix_alpha, ..LossWeights::default() };
            let (mix, pixel, ssim_term) = loss_mix(&mut g, &[th], t, &w, &flags);
            (
                g.value(mix).item(),
                g.value(pixel).item(),
                g.value(ssim_term).item(),
            )
        };
        let (mix0, pixel0, _) = run(0.0, LossFlags::default());
        assert!((mix0 - pixel0).abs() < 1e-15);
        let (mix1, _, ssim1) = run(1.0, LossFlags::default());
        assert!((mix1 - ssim1).abs() < 1e-15);
        // perfect predictions vanish
        let mut g = Graph::new(false);
        let t = g.constant(t_img.clone());
        let (mix, _, _) = loss_mix(&mut g, &[t], t, &LossWeights::default(), &LossFlags::default());
        assert!(g.value(mix).item().abs() < 1e-12);
    }

    #[test]
    fn total_weighting() {
        let w = LossWeights::default();
        let mut rep = LossReport { comp: 1.0, ..LossReport::default() };
        assert!((loss_total(&rep, &w) - 0.4).abs() < 1e-15);
        rep = LossReport { comp: 1.0, perceptual: 1.0, mix: 1.0, adversarial: 1.0, ..LossReport::default() };
        assert!((loss_total(&rep, &w) - 1.01).abs() < 1e-15);
        rep = LossReport::default();
        assert_eq!(loss_total(&rep, &w), 0.0);
    }

    #[test]
    fn fd_confidence_and_residual_and_pixel() {
        let input = rand01(&[3, 6, 6], 11);
        let t = rand01(&[3, 6, 6], 12);
        let r = rand01(&[3, 6, 6], 13).map(|v| v * 0.3);
        let c1 = rand01(&[1, 6, 6], 14);
        let c2 = rand01(&[1, 6, 6], 15);
        let th1 = rand01(&[3, 6, 6], 16);
        let th2 = rand01(&[3, 6, 6], 17);
        let rh1 = rand01(&[3, 6, 6], 18).map(|v| v * 0.4);
        let rh2 = rand01(&[3, 6, 6], 19).map(|v| v * 0.4);
        let report = check_gradients(
            &[
                ("c1", c1),
                ("c2", c2),
                ("th1", th1),
                ("th2", th2),
                ("rh1", rh1),
                ("rh2", rh2),
            ],
            |g, ids| {
                let input = g.constant(input.clone());
                let t = g.constant(t.clone());
                let r = g.constant(r.clone());
                let lc = loss_confidence(g, &[ids[0], ids[1]], input, t, r, 0.85);
                let lr = loss_residual(
                    g,
                    &[ids[2], ids[3]],
                    &[ids[4], ids[5]],
                    input,
                    t,
                    0.8,
                    0.85,
                    2.2,
                );
                let lp = loss_pixel(g, &[ids[2], ids[3]], t, 0.85);
                let s = g.add(lc, lr);
                g.add(s, lp)
            },
            &GradCheckSettings { max_coords_per_tensor: Some(30), ..Default::default() },
        );
        assert!(report.passed(), "losses fd: {report}");
    }
}
