//! Adversarial term: a patch-style discriminator conditioned on the ground
//! truth by channel concatenation (four stride-2 conv layers with leaky
//! activations, then a mean-reduced sigmoid probability).

use crate::graph::{Graph, PadMode, ValueId};
use crate::model::{BinderMode, Init, ParamBinder, ParamStore};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;

const LEAK: f64 = 0.2;
/// Probabilities are clamped here before the logs.
pub const LOG_FLOOR: f64 = 1e-8;

fn disc_channels(bc: usize) -> [usize; 4] {
    [2 * bc, 4 * bc, 8 * bc, 8 * bc]
}

/// Fresh discriminator parameters (paths are relative; the trainer stores
/// them under the `disc/` namespace).
pub fn discriminator_init(seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    {
        let mut g = Graph::new(false);
        let mut pb = ParamBinder::new(BinderMode::Build {
            store: &mut store,
            rng: rng_from_seed(seed),
        });
        let t = g.constant(Tensor::zeros(&[3, 8, 8]));
        discriminator_forward(&mut g, &mut pb, t, t);
    }
    store
}

/// Mean probability that `candidate` is the true transmission for `t`.
/// Consumes the 6-channel concatenation `[T, candidate]`; output in (0, 1).
pub fn discriminator_forward(
    g: &mut Graph,
    pb: &mut ParamBinder,
    t: ValueId,
    candidate: ValueId,
) -> ValueId {
    // fixed width; the discriminator does not scale with the generator
    let bc = 8;
    let chs = disc_channels(bc);
    let mut cur = g.concat(&[t, candidate]);
    let mut cin = 6;
    for (i, &cout) in chs.iter().enumerate() {
        let w = pb.param(g, &format!("conv{i}/weight"), &[cout, cin, 3, 3], Init::Normal);
        let b = pb.param(g, &format!("conv{i}/bias"), &[cout], Init::Zeros);
        let y = g.conv2d(cur, w, Some(b), 2, PadMode::Reflect);
        let a = g.leaky_relu(y, LEAK);
        g.free_values(&[cur, y]);
        cur = a;
        cin = cout;
    }
    let w = pb.param(g, "head/weight", &[1, cin, 3, 3], Init::Normal);
    let b = pb.param(g, "head/bias", &[1], Init::Zeros);
    let logits = g.conv2d(cur, w, Some(b), 1, PadMode::Reflect);
    let probs = g.sigmoid(logits);
    let out = g.mean_all(probs);
    g.free_values(&[cur, logits, probs]);
    out
}

/// Generator side: `-log D(T, T_hat)`.
pub fn generator_term(g: &mut Graph, d_prob: ValueId) -> ValueId {
    let l = g.ln(d_prob, LOG_FLOOR);
    g.scale(l, -1.0)
}

/// Discriminator side: `-log D(T,T) - log(1 - D(T, T_hat))`.
pub fn discriminator_loss(g: &mut Graph, d_real: ValueId, d_fake: ValueId) -> ValueId {
    let lr = g.ln(d_real, LOG_FLOOR);
    let neg_fake = g.scale(d_fake, -1.0);
    let one_minus = g.add_scalar(neg_fake, 1.0);
    let lf = g.ln(one_minus, LOG_FLOOR);
    let s = g.add(lr, lf);
    g.scale(s, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckSettings};
    use rand::Rng;

    fn rand01(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.05..0.95))
    }

    #[test]
    fn generator_term_reference_values() {
        let mut g = Graph::new(false);
        let half = g.constant(Tensor::scalar(0.5));
        let v = generator_term(&mut g, half);
        assert!((g.value(v).item() - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!((g.value(v).item() - 0.6931).abs() < 1e-4);

        let near_one = g.constant(Tensor::scalar(1.0 - 1e-12));
        let v1 = generator_term(&mut g, near_one);
        assert!(g.value(v1).item().abs() < 1e-9);
    }

    #[test]
    fn discriminator_outputs_probability() {
        let store = discriminator_init(3);
        let mut g = Graph::new(false);
        let mut pb = ParamBinder::new(BinderMode::Use {
            store: &store,
            trainable: false,
            frozen_prefixes: vec![],
        });
        let t = g.constant(rand01(&[3, 16, 16], 4));
        let cand = g.constant(rand01(&[3, 16, 16], 5));
        let p = discriminator_forward(&mut g, &mut pb, t, cand);
        let v = g.value(p).item();
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(discriminator_init(1), discriminator_init(1));
        assert_ne!(discriminator_init(1), discriminator_init(2));
    }

    #[test]
    fn fd_generator_term_through_discriminator() {
        // gradients of -log D with respect to the candidate image and the
        // discriminator weights
        let store = discriminator_init(7);
        let t_img = rand01(&[3, 8, 8], 8);
        let cand = rand01(&[3, 8, 8], 9);
        let report = check_gradients(
            &[("cand", cand)],
            |g, ids| {
                let mut pb = ParamBinder::new(BinderMode::Use {
                    store: &store,
                    trainable: false,
                    frozen_prefixes: vec![],
                });
                let t = g.constant(t_img.clone());
                let p = discriminator_forward(g, &mut pb, t, ids[0]);
                generator_term(g, p)
            },
            &GradCheckSettings { max_coords_per_tensor: Some(40), ..Default::default() },
        );
        assert!(report.passed(), "adv generator fd: {report}");
    }

    #[test]
    fn fd_discriminator_loss_wrt_params() {
        let store = discriminator_init(11);
        let t_img = rand01(&[3, 8, 8], 12);
        let fake_img = rand01(&[3, 8, 8], 13);
        // probe a couple of parameter tensors end to end
        let w0 = store.get("conv0/weight").unwrap().clone();
        let b2 = store.get("conv2/bias").unwrap().clone();
        let report = check_gradients(
            &[("conv0/weight", w0), ("conv2/bias", b2)],
            |g, ids| {
                let mut pb = ParamBinder::new(BinderMode::Use {
                    store: &store,
                    trainable: false,
                    frozen_prefixes: vec![],
                });
                pb.bind_existing("conv0/weight", ids[0]);
                pb.bind_existing("conv2/bias", ids[1]);
                let t = g.constant(t_img.clone());
                let fake = g.constant(fake_img.clone());
                let d_real = discriminator_forward(g, &mut pb, t, t);
                let d_fake = discriminator_forward(g, &mut pb, t, fake);
                discriminator_loss(g, d_real, d_fake)
            },
            &GradCheckSettings { max_coords_per_tensor: Some(30), ..Default::default() },
        );
        assert!(report.passed(), "disc loss fd: {report}");
    }
}
