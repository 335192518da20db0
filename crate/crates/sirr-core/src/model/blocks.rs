//! Parameter binding and the shared network building blocks.

use crate::graph::{Graph, PadMode, ValueId};
use crate::imagecore::LAPLACIAN_KERNEL;
use crate::model::ParamStore;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// Initialization rule for a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal(0, 0.02), the default for conv and dense weights.
    Normal,
    Zeros,
    Const(f64),
    /// One 3x3 Laplacian stencil per leading channel.
    LaplacianPerChannel,
}

pub enum BinderMode<'a> {
    /// Create missing parameters on first request (model initialization).
    Build { store: &'a mut ParamStore, rng: ChaCha8Rng },
    /// Read parameters from an existing store.
    Use {
        store: &'a ParamStore,
        trainable: bool,
        frozen_prefixes: Vec<String>,
    },
}

/// Maps parameter paths to graph leaves for one forward pass. Repeated
/// requests for the same path return the same leaf, so weights shared across
/// recurrent iterations accumulate their gradients correctly.
pub struct ParamBinder<'a> {
    mode: BinderMode<'a>,
    binding: BTreeMap<String, ValueId>,
}

impl<'a> ParamBinder<'a> {
    pub fn new(mode: BinderMode<'a>) -> Self {
        ParamBinder { mode, binding: BTreeMap::new() }
    }

    pub fn param(&mut self, g: &mut Graph, path: &str, shape: &[usize], init: Init) -> ValueId {
        if let Some(id) = self.binding.get(path) {
            return *id;
        }
        let (tensor, requires_grad) = match &mut self.mode {
            BinderMode::Build { store, rng } => {
                if store.get(path).is_none() {
                    store.insert(path.to_string(), init_tensor(shape, init, rng));
                }
                (store.get(path).unwrap().clone(), false)
            }
            BinderMode::Use { store, trainable, frozen_prefixes } => {
                let t = store
                    .get(path)
                    .unwrap_or_else(|| panic!("parameter {path} missing from store"))
                    .clone();
                assert_eq!(t.shape(), shape, "parameter {path} has unexpected shape");
                let frozen = frozen_prefixes.iter().any(|p| path.starts_with(p.as_str()));
                (t, *trainable && !frozen)
            }
        };
        let id = g.leaf(tensor, requires_grad);
        self.binding.insert(path.to_string(), id);
        id
    }

    /// Pre-bind a path to an existing graph leaf; subsequent requests for
    /// that path return `id` instead of creating a new leaf. Gradient-check
    /// harnesses use this to probe parameters as ordinary inputs.
    pub fn bind_existing(&mut self, path: &str, id: ValueId) {
        self.binding.insert(path.to_string(), id);
    }

    pub fn bindings(&self) -> &BTreeMap<String, ValueId> {
        &self.binding
    }

    pub fn bound_ids(&self) -> Vec<ValueId> {
        self.binding.values().copied().collect()
    }

    /// Collect accumulated gradients by parameter path (zero tensors for
    /// parameters that received none).
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.binding
            .iter()
            .filter(|(_, id)| g.requires_grad(**id))
            .map(|(path, id)| {
                let grad = g
                    .grad(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(*id)));
                (path.clone(), grad)
            })
            .collect()
    }
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Normal => {
            let dist = Normal::new(0.0, 0.02).unwrap();
            Tensor::from_fn(shape, |_| dist.sample(rng))
        }
        Init::Zeros => Tensor::zeros(shape),
        Init::Const(v) => Tensor::full(shape, v),
        Init::LaplacianPerChannel => {
            assert_eq!(&shape[1..], &[3, 3]);
            Tensor::from_fn(shape, |i| LAPLACIAN_KERNEL[i % 9])
        }
    }
}

// ---- layer helpers ---------------------------------------------------------

pub(crate) fn conv(
    g: &mut Graph,
    pb: &mut ParamBinder,
    name: &str,
    x: ValueId,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> ValueId {
    let w = pb.param(g, &format!("{name}/weight"), &[cout, cin, k, k], Init::Normal);
    let b = pb.param(g, &format!("{name}/bias"), &[cout], Init::Zeros);
    g.conv2d(x, w, Some(b), stride, PadMode::Reflect)
}

pub(crate) fn prelu(g: &mut Graph, pb: &mut ParamBinder, name: &str, x: ValueId) -> ValueId {
    let a = pb.param(g, &format!("{name}/alpha"), &[1], Init::Const(0.25));
    g.prelu(x, a)
}

fn squeeze_width(c: usize) -> usize {
    (c / 4).max(1)
}

/// Squeeze-and-excitation gate: channel weights from the pooled descriptor.
fn se_gate(g: &mut Graph, pb: &mut ParamBinder, name: &str, x: ValueId, c: usize) -> ValueId {
    let cs = squeeze_width(c);
    let pooled = g.global_avg_pool(x);
    let w1 = pb.param(g, &format!("{name}/fc1/weight"), &[cs, c], Init::Normal);
    let b1 = pb.param(g, &format!("{name}/fc1/bias"), &[cs], Init::Zeros);
    let h = g.linear(pooled, w1, Some(b1));
    let h = g.relu(h);
    let w2 = pb.param(g, &format!("{name}/fc2/weight"), &[c, cs], Init::Normal);
    let b2 = pb.param(g, &format!("{name}/fc2/bias"), &[c], Init::Zeros);
    let s = g.linear(h, w2, Some(b2));
    let s = g.sigmoid(s);
    let out = g.scale_channels(x, s);
    g.free_values(&[pooled, h, s]);
    out
}

/// SE residual block: two 3x3 convs with PReLU, an SE gate, the residual
/// add, and a trailing PReLU (negatives are kept throughout).
pub(crate) fn se_res_block(
    g: &mut Graph,
    pb: &mut ParamBinder,
    name: &str,
    x: ValueId,
    c: usize,
) -> ValueId {
    let y1 = conv(g, pb, &format!("{name}/conv1"), x, c, c, 3, 1);
    let a1 = prelu(g, pb, &format!("{name}/act1"), y1);
    let y2 = conv(g, pb, &format!("{name}/conv2"), a1, c, c, 3, 1);
    let gated = se_gate(g, pb, &format!("{name}/se"), y2, c);
    let sum = g.add(gated, x);
    let out = prelu(g, pb, &format!("{name}/act2"), sum);
    g.free_values(&[y1, a1, y2, gated, sum]);
    out
}

/// CBAM: channel attention (shared MLP over avg- and max-pooled
/// descriptors), then spatial attention (7x7 conv over the channelwise
/// mean/max planes).
pub(crate) fn cbam(
    g: &mut Graph,
    pb: &mut ParamBinder,
    name: &str,
    x: ValueId,
    c: usize,
) -> ValueId {
    let cs = squeeze_width(c);
    let w1 = pb.param(g, &format!("{name}/ch_fc1/weight"), &[cs, c], Init::Normal);
    let w2 = pb.param(g, &format!("{name}/ch_fc2/weight"), &[c, cs], Init::Normal);
    let avg = g.global_avg_pool(x);
    let mx = g.global_max_pool(x);
    let a = g.linear(avg, w1, None);
    let a = g.relu(a);
    let a = g.linear(a, w2, None);
    let m = g.linear(mx, w1, None);
    let m = g.relu(m);
    let m = g.linear(m, w2, None);
    let s = g.add(a, m);
    let s = g.sigmoid(s);
    let xc = g.scale_channels(x, s);

    let mean_plane = g.spatial_mean_channels(xc);
    let max_plane = g.spatial_max_channels(xc);
    let planes = g.concat(&[mean_plane, max_plane]);
    let wsp = pb.param(g, &format!("{name}/spatial/weight"), &[1, 2, 7, 7], Init::Normal);
    // tiny maps cannot mirror a 3-wide border; fall back to zero padding there
    let (_, h, w) = g.value(planes).chw();
    let pad = if h.min(w) > 3 { PadMode::Reflect } else { PadMode::Zero };
    let att = g.conv2d(planes, wsp, None, 1, pad);
    let att = g.sigmoid(att);
    let out = g.mul_mask(xc, att);
    g.free_values(&[xc, mean_plane, max_plane, planes, att]);
    out
}

pub(crate) struct LstmState {
    pub hidden: ValueId,
    pub cell: ValueId,
}

/// Convolutional gated recurrent cell with input/forget/output gates and a
/// cell state; all gates are 3x3 convolutions over `[input, hidden]`.
pub(crate) fn conv_lstm_cell(
    g: &mut Graph,
    pb: &mut ParamBinder,
    name: &str,
    z: ValueId,
    z_ch: usize,
    state: &LstmState,
    hidden_ch: usize,
) -> LstmState {
    let cat = g.concat(&[z, state.hidden]);
    let gates = conv(g, pb, &format!("{name}/gates"), cat, z_ch + hidden_ch, 4 * hidden_ch, 3, 1);
    let i_raw = g.slice_channels(gates, 0, hidden_ch);
    let f_raw = g.slice_channels(gates, hidden_ch, hidden_ch);
    let o_raw = g.slice_channels(gates, 2 * hidden_ch, hidden_ch);
    let g_raw = g.slice_channels(gates, 3 * hidden_ch, hidden_ch);
    let i_gate = g.sigmoid(i_raw);
    let f_gate = g.sigmoid(f_raw);
    let o_gate = g.sigmoid(o_raw);
    let g_gate = g.tanh(g_raw);
    let keep = g.mul(f_gate, state.cell);
    let write = g.mul(i_gate, g_gate);
    let cell = g.add(keep, write);
    let cell_act = g.tanh(cell);
    let hidden = g.mul(o_gate, cell_act);
    g.free_values(&[
        cat, gates, i_raw, f_raw, o_raw, g_raw, i_gate, f_gate, o_gate, g_gate, keep, write,
        cell_act,
    ]);
    LstmState { hidden, cell }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckSettings};
    use crate::model::ParamStore;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-0.8..0.8))
    }

    /// Materialize the params a block requests, then gradcheck all of them
    /// plus the block input.
    fn gradcheck_block(
        seed: u64,
        input_shape: &[usize],
        build: impl Fn(&mut Graph, &mut ParamBinder, ValueId) -> ValueId,
    ) {
        let mut store = ParamStore::new();
        let x = rand_tensor(input_shape, seed);
        {
            let mut g = Graph::new(false);
            let mut pb = ParamBinder::new(BinderMode::Build {
                store: &mut store,
                rng: rng_from_seed(seed ^ 0xabcd),
            });
            let xi = g.constant(x.clone());
            build(&mut g, &mut pb, xi);
        }
        let mut names: Vec<String> = vec!["__input".into()];
        let mut tensors: Vec<Tensor> = vec![x];
        for (path, t) in store.iter() {
            names.push(path.clone());
            tensors.push(t.clone());
        }
        let named: Vec<(&str, Tensor)> = names
            .iter()
            .map(String::as_str)
            .zip(tensors.iter().cloned())
            .collect();
        let report = check_gradients(
            &named,
            |g, ids| {
                let mut replay = ParamStore::new();
                for (name, id) in names.iter().zip(ids.iter()).skip(1) {
                    replay.insert(name.clone(), g.value(*id).clone());
                }
                // use-mode binder would create fresh leaves; bind directly instead
                let mut pb = ParamBinder::new(BinderMode::Use {
                    store: &replay,
                    trainable: true,
                    frozen_prefixes: vec![],
                });
                for (name, id) in names.iter().zip(ids.iter()).skip(1) {
                    pb.binding.insert(name.clone(), *id);
                }
                let y = build(g, &mut pb, ids[0]);
                let sq = g.mul(y, y);
                g.mean_all(sq)
            },
            &GradCheckSettings { max_coords_per_tensor: Some(60), ..Default::default() },
        );
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn fd_se_res_block() {
        gradcheck_block(101, &[4, 6, 6], |g, pb, x| se_res_block(g, pb, "blk", x, 4));
    }

    #[test]
    fn fd_cbam_block() {
        gradcheck_block(102, &[4, 6, 6], |g, pb, x| cbam(g, pb, "att", x, 4));
    }

    #[test]
    fn fd_conv_lstm_cell() {
        gradcheck_block(103, &[3, 5, 5], |g, pb, x| {
            let zeros = Tensor::zeros(&[2, 5, 5]);
            let state = LstmState { hidden: g.constant(zeros.clone()), cell: g.constant(zeros) };
            let s = conv_lstm_cell(g, pb, "cell", x, 3, &state, 2);
            // push both outputs into the loss
            let sum = g.add(s.hidden, s.cell);
            sum
        });
    }

    #[test]
    fn cbam_gates_stay_in_unit_interval() {
        let mut store = ParamStore::new();
        let mut g = Graph::new(false);
        let mut pb = ParamBinder::new(BinderMode::Build {
            store: &mut store,
            rng: rng_from_seed(5),
        });
        let x = g.constant(rand_tensor(&[4, 8, 8], 6));
        let y = cbam(&mut g, &mut pb, "att", x, 4);
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn lstm_zero_state_gives_bounded_hidden() {
        let mut store = ParamStore::new();
        let mut g = Graph::new(false);
        let mut pb = ParamBinder::new(BinderMode::Build {
            store: &mut store,
            rng: rng_from_seed(7),
        });
        let z = g.constant(rand_tensor(&[3, 6, 6], 8));
        let zeros = Tensor::zeros(&[2, 6, 6]);
        let st = LstmState { hidden: g.constant(zeros.clone()), cell: g.constant(zeros) };
        let out = conv_lstm_cell(&mut g, &mut pb, "cell", z, 3, &st, 2);
        assert!(g.value(out.hidden).data().iter().all(|&v| v.abs() <= 1.0));
    }

    #[test]
    fn binder_reuses_leaves_across_requests() {
        let mut store = ParamStore::new();
        let mut g = Graph::new(false);
        let mut pb = ParamBinder::new(BinderMode::Build {
            store: &mut store,
            rng: rng_from_seed(9),
        });
        let a = pb.param(&mut g, "w", &[2, 2], Init::Normal);
        let b = pb.param(&mut g, "w", &[2, 2], Init::Normal);
        assert_eq!(a, b);
    }
}
