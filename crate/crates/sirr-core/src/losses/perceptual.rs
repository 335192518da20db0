//! Multi-scale perceptual loss over a frozen feature stack.
//!
//! The default extractor is hermetic: a fixed, seeded, untrained conv stack
//! (four stride-2 stages with channel doubling, taps after each ReLU), so
//! tests and training need no downloads. Externally trained weights (e.g.
//! VGG-style features exported to the checkpoint container) can be plugged
//! in from a file; the stack layout is taken from the stored shapes.

use crate::error::{Error, Result};
use crate::graph::{Graph, PadMode, ValueId};
use crate::losses::LossWeights;
use crate::model::checkpoint;
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// Seed of the shipped hermetic feature stack; fixed forever.
pub const HERMETIC_SEED: u64 = 0x5EED_FEA7;
const HERMETIC_STAGES: [(usize, usize); 4] = [(3, 8), (8, 16), (16, 32), (32, 64)];

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    /// (weight `[Co,Ci,3,3]`, bias `[Co]`) per stage.
    stages: Vec<(Tensor, Tensor)>,
}

impl FeatureExtractor {
    /// The deterministic built-in stack.
    pub fn hermetic() -> Self {
        let mut rng = rng_from_seed(HERMETIC_SEED);
        let stages = HERMETIC_STAGES
            .iter()
            .map(|&(ci, co)| {
                // He-style scale keeps random-feature magnitudes usable
                let std = (2.0 / (ci as f64 * 9.0)).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                let w = Tensor::from_fn(&[co, ci, 3, 3], |_| dist.sample(&mut rng));
                let b = Tensor::zeros(&[co]);
                (w, b)
            })
            .collect();
        FeatureExtractor { stages }
    }

    /// Load stage weights from a checkpoint-container file holding
    /// `perc/stage{i}/weight` and `perc/stage{i}/bias` entries.
    pub fn from_weights_file(path: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let mut stages = Vec::new();
        for i in 0.. {
            let (Some(w), Some(b)) = (
                ckpt.tensors.get(&format!("perc/stage{i}/weight")),
                ckpt.tensors.get(&format!("perc/stage{i}/bias")),
            ) else {
                break;
            };
            if w.shape().len() != 4 || b.shape().len() != 1 || w.shape()[0] != b.shape()[0] {
                return Err(Error::Config(format!("malformed perceptual stage {i}")));
            }
            stages.push((w.clone(), b.clone()));
        }
        if stages.is_empty() {
            return Err(Error::Config(format!(
                "{} holds no perceptual feature stages",
                path.display()
            )));
        }
        for win in stages.windows(2) {
            if win[1].0.shape()[1] != win[0].0.shape()[0] {
                return Err(Error::Config("perceptual stage channels do not chain".into()));
            }
        }
        if stages[0].0.shape()[1] != 3 {
            return Err(Error::Config("perceptual stack must accept RGB input".into()));
        }
        Ok(FeatureExtractor { stages })
    }

    /// Export (mainly so the hermetic stack can serve as a format example).
    pub fn to_weights_file(&self, path: &Path) -> Result<()> {
        let mut tensors = std::collections::BTreeMap::new();
        for (i, (w, b)) in self.stages.iter().enumerate() {
            tensors.insert(format!("perc/stage{i}/weight"), w.clone());
            tensors.insert(format!("perc/stage{i}/bias"), b.clone());
        }
        let header = checkpoint::CheckpointHeader::new(Default::default(), HERMETIC_SEED);
        checkpoint::save(path, &checkpoint::Checkpoint { header, tensors })
    }

    pub fn n_taps(&self) -> usize {
        self.stages.len()
    }

    /// Frozen features at every tap point.
    pub fn features(&self, g: &mut Graph, x: ValueId) -> Vec<ValueId> {
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (w, b) in &self.stages {
            let wi = g.constant(w.clone());
            let bi = g.constant(b.clone());
            let y = g.conv2d(cur, wi, Some(bi), 2, PadMode::Reflect);
            let a = g.relu(y);
            g.free_values(&[y]);
            if cur != x {
                g.free_values(&[cur]);
            }
            taps.push(a);
            cur = a;
        }
        taps
    }
}

/// Scale-weighted feature-space MSE between the ground truth transmission
/// and the final iteration's multi-scale outputs.
pub fn loss_perceptual(
    g: &mut Graph,
    extractor: &FeatureExtractor,
    t: ValueId,
    t_hat_full: ValueId,
    t_hat_half: ValueId,
    t_hat_quarter: ValueId,
    weights: &LossWeights,
) -> ValueId {
    let mut terms = Vec::new();
    for (gamma_j, t_hat) in [
        (weights.gamma_full, t_hat_full),
        (weights.gamma_half, t_hat_half),
        (weights.gamma_quarter, t_hat_quarter),
    ] {
        let (_, h, w) = g.value(t_hat).chw();
        let t_scaled = {
            let (_, th, tw) = g.value(t).chw();
            if (th, tw) == (h, w) {
                t
            } else {
                g.resize_bilinear(t, h, w)
            }
        };
        let ref_taps = extractor.features(g, t_scaled);
        let hat_taps = extractor.features(g, t_hat);
        for (rf, hf) in ref_taps.iter().zip(&hat_taps) {
            let d = g.sub(*rf, *hf);
            let sq = g.mul(d, d);
            let m = g.mean_all(sq);
            g.free_values(&[d, sq]);
            terms.push((gamma_j, m));
        }
        g.free_values(&ref_taps);
        g.free_values(&hat_taps);
    }
    let mut acc: Option<ValueId> = None;
    for (w, t) in terms {
        let s = g.scale(t, w);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    acc.expect("at least one perceptual term")
}
