//! The recurrent two-stage restoration network.
//!
//! Each iteration first predicts the reflection layer and a reflection
//! confidence map from multi-scale Laplacian features (stage 1), then feeds
//! the inverse confidence map, the predicted reflection and the running
//! transmission estimate into an attention autoencoder that refines the
//! transmission layer (stage 2). The transmission estimate is initialized to
//! the input image and threaded through the iterations together with the
//! recurrent cell state.

mod blocks;
pub mod checkpoint;
mod stage1;
mod stage2;

pub use blocks::{BinderMode, Init, ParamBinder};

use crate::error::{Error, Result};
use crate::graph::{Graph, ValueId};
use crate::imagecore::Image;
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Laplacian,
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RcmapSource {
    Mlsm,
    ImageFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub n_iterations: usize,
    pub mlsm_learnable: bool,
    /// Pyramid scale divisors; must contain 1.
    pub mlsm_scales: Vec<usize>,
    pub use_rdm: bool,
    pub use_tsm: bool,
    pub use_lstm: bool,
    pub feature_mode: FeatureMode,
    pub rcmap_source: RcmapSource,
    /// SE-residual blocks inside the detection and suppression modules.
    pub se_blocks_detect: usize,
    /// SE-residual blocks in the stage-1 reflection head.
    pub se_blocks_head: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            n_iterations: 3,
            mlsm_learnable: true,
            mlsm_scales: vec![1, 2, 4, 8],
            use_rdm: true,
            use_tsm: true,
            use_lstm: true,
            feature_mode: FeatureMode::Laplacian,
            rcmap_source: RcmapSource::Mlsm,
            se_blocks_detect: 3,
            se_blocks_head: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::Config("n_iterations must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if !self.mlsm_scales.contains(&1) {
            return Err(Error::Config("mlsm_scales must include scale 1".into()));
        }
        let mut sorted = self.mlsm_scales.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.mlsm_scales.len() {
            return Err(Error::Config("mlsm_scales must be unique".into()));
        }
        for d in &self.mlsm_scales {
            if ![1usize, 2, 4, 8].contains(d) {
                return Err(Error::Config(format!("unsupported pyramid divisor {d}")));
            }
        }
        if self.se_blocks_detect == 0 || self.se_blocks_head == 0 {
            return Err(Error::Config("SE block counts must be positive".into()));
        }
        Ok(())
    }

    /// Sorted pyramid divisors.
    pub fn scales_sorted(&self) -> Vec<usize> {
        let mut s = self.mlsm_scales.clone();
        s.sort_unstable();
        s
    }

    pub(crate) fn enc_channels(&self) -> usize {
        2 * self.base_channels
    }

    pub(crate) fn lap_channels(&self) -> usize {
        2 * self.base_channels
    }

    pub(crate) fn hidden_channels(&self) -> usize {
        2 * self.base_channels
    }

    pub(crate) fn mlsm_out_channels(&self) -> usize {
        6 * self.mlsm_scales.len()
    }

    pub(crate) fn needs_mlsm(&self) -> bool {
        (self.use_rdm && self.rcmap_source == RcmapSource::Mlsm) || self.use_tsm
    }
}

/// All learnable arrays, keyed by a stable path string.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.map.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.map.get_mut(path)
    }

    pub fn insert(&mut self, path: String, t: Tensor) {
        self.map.insert(path, t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// Per-iteration outputs of the unrolled forward pass.
#[derive(Debug, Clone)]
pub struct IterationOutputs {
    pub t_hat: ValueId,
    pub r_hat: ValueId,
    pub c_hat: ValueId,
    pub t_half: ValueId,
    pub t_quarter: ValueId,
    pub hidden: Option<ValueId>,
    pub cell: Option<ValueId>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub input: ValueId,
    pub iters: Vec<IterationOutputs>,
}

impl Trace {
    pub fn last(&self) -> &IterationOutputs {
        self.iters.last().expect("trace holds at least one iteration")
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Create a model with freshly initialized parameters. The parameter set
    /// is materialized by a probe forward pass, so it always matches exactly
    /// what the configured forward graph reads.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        {
            let mut probe_cfg = config.clone();
            probe_cfg.n_iterations = 1; // params are shared across iterations
            let mut g = Graph::new(false);
            let mut binder = ParamBinder::new(BinderMode::Build {
                store: &mut store,
                rng: rng_from_seed(seed),
            });
            let dummy = Tensor::zeros(&[3, 8, 8]);
            let input = g.constant(dummy);
            forward_graph(&mut g, &mut binder, &probe_cfg, input)?;
        }
        Ok(Model { config, params: store })
    }

    pub fn param_count(&self) -> usize {
        self.params.total_len()
    }

    /// Unroll the network on a `[3,H,W]` input already in the graph.
    /// Returns the trace plus the parameter binding used (for gradients).
    pub fn forward<'s>(
        &'s self,
        g: &mut Graph,
        input: ValueId,
        trainable: bool,
    ) -> Result<(Trace, ParamBinder<'s>)> {
        let mut frozen = Vec::new();
        if !self.config.mlsm_learnable {
            frozen.push("mlsm/".to_string());
        }
        let mut binder = ParamBinder::new(BinderMode::Use {
            store: &self.params,
            trainable,
            frozen_prefixes: frozen,
        });
        let trace = forward_graph(g, &mut binder, &self.config, input)?;
        Ok((trace, binder))
    }

    /// Gradient-free restoration of one image (spatial dims must be
    /// multiples of 8; see the pad helpers in `imagecore` for arbitrary
    /// sizes). Intermediate buffers are released as the pass proceeds.
    pub fn infer(&self, img: &Image) -> Result<InferenceOutputs> {
        let mut g = Graph::new(false);
        let input = g.constant(img.to_tensor());
        let (trace, _) = self.forward(&mut g, input, false)?;
        let mut out = InferenceOutputs::default();
        for it in &trace.iters {
            out.t_hats.push(Image::from_tensor(g.value(it.t_hat)));
            out.r_hats.push(Image::from_tensor(g.value(it.r_hat)));
            out.c_hats.push(Image::from_tensor(g.value(it.c_hat)));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default)]
pub struct InferenceOutputs {
    pub t_hats: Vec<Image>,
    pub r_hats: Vec<Image>,
    pub c_hats: Vec<Image>,
}

impl InferenceOutputs {
    pub fn final_transmission(&self) -> &Image {
        self.t_hats.last().expect("at least one iteration")
    }
}

/// Validate a `[3,H,W]` network input: at least 8x8 and divisible by 8 so the
/// pyramid and the autoencoder strides line up.
fn validate_input(shape: &[usize]) -> Result<()> {
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::invalid(format!("network input must be [3,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(format!(
            "spatial dims must be >= 8 and divisible by 8, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Build the unrolled recurrent graph.
pub fn forward_graph(
    g: &mut Graph,
    binder: &mut ParamBinder,
    config: &ModelConfig,
    input: ValueId,
) -> Result<Trace> {
    validate_input(g.shape(input))?;
    let (_, h, w) = g.value(input).chw();
    let hidden_ch = config.hidden_channels();

    let mut t_prev = input;
    let mut state: Option<(ValueId, ValueId)> = if config.use_lstm {
        let zeros = Tensor::zeros(&[hidden_ch, h, w]);
        Some((g.constant(zeros.clone()), g.constant(zeros)))
    } else {
        None
    };

    let mut iters = Vec::with_capacity(config.n_iterations);
    for i in 0..config.n_iterations {
        let s1 = stage1::stage1_forward(g, binder, config, input, t_prev, state.clone())?;
        let s2 = stage2::stage2_forward(g, binder, config, input, t_prev, s1.r_hat, s1.inv_c)?;
        state = s1.state;
        t_prev = s2.t_full;
        iters.push(IterationOutputs {
            t_hat: s2.t_full,
            r_hat: s1.r_hat,
            c_hat: s1.c_hat,
            t_half: s2.t_half,
            t_quarter: s2.t_quarter,
            hidden: state.as_ref().map(|s| s.0),
            cell: state.as_ref().map(|s| s.1),
        });

        // inference: drop everything this iteration no longer needs
        let mut keep: Vec<ValueId> = binder.bound_ids();
        keep.push(input);
        keep.push(t_prev);
        if let Some((hid, cell)) = &state {
            keep.push(*hid);
            keep.push(*cell);
        }
        for it in &iters {
            keep.extend([it.t_hat, it.r_hat, it.c_hat, it.t_half, it.t_quarter]);
        }
        let _ = i;
        g.retain_only(&keep);
    }

    Ok(Trace { input, iters })
}

/// Clamp gradients of the multi-scale Laplacian kernels elementwise to
/// `[-threshold, threshold]`; every other entry is left untouched.
pub fn clip_mlsm_gradients(grads: &mut BTreeMap<String, Tensor>, threshold: f64) {
    clip_prefix(grads, "mlsm/", threshold);
}

/// Experimentation switch: clamp every gradient entry.
pub fn clip_all_gradients(grads: &mut BTreeMap<String, Tensor>, threshold: f64) {
    clip_prefix(grads, "", threshold);
}

fn clip_prefix(grads: &mut BTreeMap<String, Tensor>, prefix: &str, threshold: f64) {
    for (path, g) in grads.iter_mut() {
        if path.starts_with(prefix) {
            for v in g.data_mut() {
                *v = v.clamp(-threshold, threshold);
            }
        }
    }
}
