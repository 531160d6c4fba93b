//! The three decoding architectures, factored into a representer (every layer
//! up to the last one) and a single affine classification head.
//!
//! Stacks, with trials entering as `N x 1 x m x c`:
//!
//! * shallow: temporal conv `(k x 1)` -> spatial conv over all `c` channels ->
//!   square -> average pool -> `ln(max(x, 1e-6))` -> dropout -> head.
//! * eegnet: temporal conv (`F1`, same padding) -> depthwise spatial conv
//!   (depth `D`) -> BN -> ELU -> pool -> dropout -> separable conv (depthwise
//!   temporal + pointwise, `F2`) -> BN -> ELU -> pool -> dropout -> head.
//! * inception: block 1 runs one branch per kernel scale (temporal conv -> BN
//!   -> ELU -> dropout -> depthwise spatial conv -> BN -> ELU -> dropout),
//!   concatenates and pools; block 2 repeats the branches at a quarter of the
//!   kernel lengths on the spatially collapsed maps, concatenates and pools.
//!   Then head.
//!
//! Convolution weights and the head weight are Xavier-uniform; biases start at
//! zero, batch-norm scales at one.

mod spec;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::gradcheck::{check_gradients, GradCheckReport};
use crate::engine::init::xavier_uniform;
use crate::engine::{BatchStats, Graph, NodeId, ParamGroup, ParamId, ParamStore, Scalar, Tensor};
use crate::error::{bail, Result};
use crate::seed;

pub use spec::{ArchKind, ArchParams, ArchitectureSpec, EegnetParams, InceptionParams, ShallowParams};

pub const LOG_FLOOR: f64 = 1e-6;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Chunk size for inference over large trial sets.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv { w: ParamId, b: Option<ParamId>, pad: (usize, usize, usize, usize), groups: usize },
    BatchNorm { gamma: ParamId, beta: ParamId, buffer: usize },
    Elu,
    Square,
    Log,
    AvgPool { kernel: (usize, usize), stride: (usize, usize) },
    Dropout(f64),
    Branches(Vec<Vec<Layer>>),
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnBuffer<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// A decoding network: parameters, batch-norm buffers and layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ArchitectureSpec,
    pub params: ParamStore<T>,
    pub buffers: Vec<BnBuffer<T>>,
    pub mode: Mode,
    representer: Vec<Layer>,
    head: (ParamId, ParamId),
    repr_dim: usize,
}

/// Recorded forward pass through the full model.
pub struct Forward<T> {
    pub representation: NodeId,
    pub scores: NodeId,
    /// Batch statistics per batch-norm buffer (train mode only).
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
}

struct Builder<'r, T> {
    params: ParamStore<T>,
    buffers: Vec<BnBuffer<T>>,
    rng: &'r mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn conv(
        &mut self,
        name: &str,
        shape: [usize; 4],
        bias: bool,
        pad: (usize, usize, usize, usize),
        groups: usize,
    ) -> Result<Layer> {
        let w = self.params.add(&format!("{name}.weight"), ParamGroup::Representer, xavier_uniform(&shape, self.rng)?)?;
        let b = if bias {
            Some(self.params.add(&format!("{name}.bias"), ParamGroup::Representer, Tensor::zeros(&[shape[0]]))?)
        } else {
            None
        };
        Ok(Layer::Conv { w, b, pad, groups })
    }

    fn bn(&mut self, name: &str, c: usize) -> Result<Layer> {
        let gamma = self.params.add(&format!("{name}.weight"), ParamGroup::Representer, Tensor::full(&[c], T::one()))?;
        let beta = self.params.add(&format!("{name}.bias"), ParamGroup::Representer, Tensor::zeros(&[c]))?;
        self.buffers.push(BnBuffer { name: name.into(), mean: vec![T::zero(); c], var: vec![T::one(); c] });
        Ok(Layer::BatchNorm { gamma, beta, buffer: self.buffers.len() - 1 })
    }
}

/// Zero padding along time that keeps the length unchanged.
fn same_time(k: usize) -> (usize, usize, usize, usize) {
    ((k - 1) / 2, k / 2, 0, 0)
}

fn pool_len(len: usize, k: usize, s: usize) -> usize {
    (len - k) / s + 1
}

fn build_representer<T: Scalar>(spec: &ArchitectureSpec, b: &mut Builder<'_, T>) -> Result<(Vec<Layer>, usize)> {
    let (m, c) = (spec.m, spec.c);
    match &spec.params {
        ArchParams::Shallow(p) => {
            let f = p.n_filters;
            let layers = vec![
                b.conv("conv_time", [f, 1, p.filter_time_length, 1], true, (0, 0, 0, 0), 1)?,
                b.conv("conv_spat", [f, f, 1, c], true, (0, 0, 0, 0), 1)?,
                Layer::Square,
                Layer::AvgPool { kernel: (p.pool_time_length, 1), stride: (p.pool_time_stride, 1) },
                Layer::Log,
                Layer::Dropout(p.drop_prob),
            ];
            let t = m - p.filter_time_length + 1;
            Ok((layers, f * pool_len(t, p.pool_time_length, p.pool_time_stride)))
        }
        ArchParams::Eegnet(p) => {
            let fd = p.f1 * p.depth;
            let layers = vec![
                b.conv("conv_temporal", [p.f1, 1, p.kernel_length, 1], false, same_time(p.kernel_length), 1)?,
                b.conv("conv_spatial", [fd, 1, 1, c], false, (0, 0, 0, 0), p.f1)?,
                b.bn("bnorm_1", fd)?,
                Layer::Elu,
                Layer::AvgPool { kernel: (p.pool1, 1), stride: (p.pool1, 1) },
                Layer::Dropout(p.drop_prob),
                b.conv("conv_separable_depth", [fd, 1, p.separable_length, 1], false, same_time(p.separable_length), fd)?,
                b.conv("conv_separable_point", [p.f2, fd, 1, 1], false, (0, 0, 0, 0), 1)?,
                b.bn("bnorm_2", p.f2)?,
                Layer::Elu,
                Layer::AvgPool { kernel: (p.pool2, 1), stride: (p.pool2, 1) },
                Layer::Dropout(p.drop_prob),
            ];
            Ok((layers, p.f2 * ((m / p.pool1) / p.pool2)))
        }
        ArchParams::Inception(p) => {
            let kernels = spec.inception_kernels(p);
            let (f, fd) = (p.n_filters, p.n_filters * p.depth);
            let mut block1 = Vec::new();
            for (i, &k) in kernels.iter().enumerate() {
                block1.push(vec![
                    b.conv(&format!("block1.branch{i}.conv_time"), [f, 1, k, 1], false, same_time(k), 1)?,
                    b.bn(&format!("block1.branch{i}.bn_time"), f)?,
                    Layer::Elu,
                    Layer::Dropout(p.drop_prob),
                    b.conv(&format!("block1.branch{i}.conv_spat"), [fd, 1, 1, c], false, (0, 0, 0, 0), f)?,
                    b.bn(&format!("block1.branch{i}.bn_spat"), fd)?,
                    Layer::Elu,
                    Layer::Dropout(p.drop_prob),
                ]);
            }
            let c1 = fd * kernels.len();
            let mut block2 = Vec::new();
            for (i, &k) in kernels.iter().enumerate() {
                let k2 = (k / p.pool1).max(1);
                block2.push(vec![
                    b.conv(&format!("block2.branch{i}.conv_time"), [f, c1, k2, 1], false, same_time(k2), 1)?,
                    b.bn(&format!("block2.branch{i}.bn_time"), f)?,
                    Layer::Elu,
                    Layer::Dropout(p.drop_prob),
                ]);
            }
            let c2 = f * kernels.len();
            let layers = vec![
                Layer::Branches(block1),
                Layer::AvgPool { kernel: (p.pool1, 1), stride: (p.pool1, 1) },
                Layer::Branches(block2),
                Layer::AvgPool { kernel: (p.pool2, 1), stride: (p.pool2, 1) },
            ];
            Ok((layers, c2 * ((m / p.pool1) / p.pool2)))
        }
    }
}

struct Pass<'a, T> {
    mode: Mode,
    rng: Option<&'a mut ChaCha8Rng>,
    stats: Vec<(usize, BatchStats<T>)>,
}

impl<T: Scalar> Model<T> {
    /// Builds the network for `spec` with all initial weights drawn from `seed`.
    pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::derived_rng(seed, &[b"init"]);
        let mut b = Builder { params: ParamStore::new(), buffers: Vec::new(), rng: &mut rng };
        let (representer, repr_dim) = build_representer(spec, &mut b)?;
        let w = b.params.add(
            "head.weight",
            ParamGroup::Head,
            xavier_uniform(&[spec.n_classes, repr_dim], &mut seed::derived_rng(seed, &[b"head"]))?,
        )?;
        let bias = b.params.add("head.bias", ParamGroup::Head, Tensor::zeros(&[spec.n_classes]))?;
        let Builder { params, buffers, .. } = b;
        Ok(Self { spec: spec.clone(), params, buffers, mode: Mode::Eval, representer, head: (w, bias), repr_dim })
    }

    pub fn repr_dim(&self) -> usize {
        self.repr_dim
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn head_ids(&self) -> [ParamId; 2] {
        [self.head.0, self.head.1]
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn has_dropout(&self) -> bool {
        fn any(layers: &[Layer]) -> bool {
            layers.iter().any(|l| match l {
                Layer::Dropout(p) => *p > 0.0,
                Layer::Branches(bs) => bs.iter().any(|b| any(b)),
                _ => false,
            })
        }
        any(&self.representer)
    }

    fn run(&self, g: &mut Graph<T>, layers: &[Layer], mut x: NodeId, pass: &mut Pass<'_, T>) -> Result<NodeId> {
        for layer in layers {
            x = match layer {
                Layer::Conv { w, b, pad, groups } => {
                    let wn = g.param(&self.params, *w);
                    let bn = b.map(|b| g.param(&self.params, b));
                    g.conv2d(x, wn, bn, (1, 1), *pad, *groups)?
                }
                Layer::BatchNorm { gamma, beta, buffer } => {
                    let (gn, bn) = (g.param(&self.params, *gamma), g.param(&self.params, *beta));
                    match pass.mode {
                        Mode::Train => {
                            let (out, stats) = g.batch_norm_train(x, gn, bn, T::of(BN_EPS))?;
                            pass.stats.push((*buffer, stats));
                            out
                        }
                        Mode::Eval => {
                            let buf = &self.buffers[*buffer];
                            g.batch_norm_eval(x, gn, bn, &buf.mean, &buf.var, T::of(BN_EPS))?
                        }
                    }
                }
                Layer::Elu => g.elu(x),
                Layer::Square => g.square(x),
                Layer::Log => g.log_floor(x, T::of(LOG_FLOOR))?,
                Layer::AvgPool { kernel, stride } => g.avg_pool(x, *kernel, *stride)?,
                Layer::Dropout(p) => match (pass.mode, pass.rng.as_deref_mut()) {
                    (Mode::Train, Some(rng)) if *p > 0.0 => g.dropout(x, *p, rng)?,
                    (Mode::Train, None) if *p > 0.0 => bail!(InvalidArgument, "train-mode dropout needs a random stream"),
                    _ => x,
                },
                Layer::Branches(branches) => {
                    let mut outs = Vec::with_capacity(branches.len());
                    for br in branches {
                        outs.push(self.run(g, br, x, pass)?);
                    }
                    g.concat_channels(&outs)?
                }
            };
        }
        Ok(x)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.spec.m || shape[3] != self.spec.c {
            bail!(Shape, "model expects N x 1 x {} x {} input, got {:?}", self.spec.m, self.spec.c, shape);
        }
        Ok(())
    }

    /// Records representer and head on `g` for the input node `x` in the
    /// model's current mode. Train mode requires `rng` for dropout and returns
    /// the batch statistics; apply them with [`update_running_stats`](Self::update_running_stats).
    pub fn forward_graph(&self, g: &mut Graph<T>, x: NodeId, rng: Option<&mut ChaCha8Rng>) -> Result<Forward<T>> {
        self.forward_in(g, x, self.mode, rng)
    }

    fn forward_in(&self, g: &mut Graph<T>, x: NodeId, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Forward<T>> {
        self.check_input(g.shape(x))?;
        let mut pass = Pass { mode, rng, stats: Vec::new() };
        let r = self.run(g, &self.representer, x, &mut pass)?;
        let r = g.flatten(r)?;
        if g.shape(r)[1] != self.repr_dim {
            bail!(Shape, "representation has {} features, expected {}", g.shape(r)[1], self.repr_dim);
        }
        let (w, b) = (g.param(&self.params, self.head.0), g.param(&self.params, self.head.1));
        let scores = g.linear(r, w, b)?;
        Ok(Forward { representation: r, scores, batch_stats: pass.stats })
    }

    /// Exponential moving update of the batch-norm running statistics
    /// (unbiased variance, momentum 0.1).
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let mom = T::of(BN_MOMENTUM);
        let keep = T::one() - mom;
        for (idx, s) in stats {
            let buf = &mut self.buffers[*idx];
            let corr = if s.count > 1 { T::of(s.count as f64 / (s.count - 1) as f64) } else { T::one() };
            for ch in 0..buf.mean.len() {
                buf.mean[ch] = keep * buf.mean[ch] + mom * s.mean[ch];
                buf.var[ch] = keep * buf.var[ch] + mom * s.var[ch] * corr;
            }
        }
    }

    fn infer(&self, inputs: &Tensor<T>, mode: Mode, mut rng: Option<&mut ChaCha8Rng>, want_scores: bool) -> Result<Tensor<T>> {
        self.check_input(inputs.shape())?;
        let n = inputs.shape()[0];
        let width = if want_scores { self.spec.n_classes } else { self.repr_dim };
        let mut out = Vec::with_capacity(n * width);
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let mut g = Graph::new();
            let x = g.input(inputs.slice_rows(start, end));
            let f = self.forward_in(&mut g, x, mode, rng.as_deref_mut())?;
            let node = if want_scores { f.scores } else { f.representation };
            out.extend_from_slice(g.value(node).data());
            start = end;
        }
        Tensor::from_vec(&[n, width], out)
    }

    /// Representations (output of every layer before the head) for an
    /// `N x 1 x m x c` batch. Train mode uses batch statistics and dropout but
    /// never updates running statistics.
    pub fn representer_forward(&self, inputs: &Tensor<T>, mode: Mode, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor<T>> {
        self.infer(inputs, mode, rng, false)
    }

    /// Eval-mode class scores.
    pub fn predict_scores(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(inputs, Mode::Eval, None, true)
    }

    /// Applies the affine head to precomputed representations.
    pub fn head_forward(&self, representations: &Tensor<T>) -> Result<Tensor<T>> {
        head_forward(&self.params, self.head, representations)
    }

    /// Draws a fresh head for `n_classes` outputs; representer untouched.
    pub fn reset_head(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        if n_classes < 2 {
            bail!(InvalidArgument, "need at least 2 classes, got {n_classes}");
        }
        let w = xavier_uniform(&[n_classes, self.repr_dim], &mut seed::derived_rng(seed, &[b"head"]))?;
        self.params.replace(self.head.0, w);
        self.params.replace(self.head.1, Tensor::zeros(&[n_classes]));
        self.spec.n_classes = n_classes;
        Ok(())
    }

    /// Digest of every representer parameter and batch-norm buffer.
    pub fn representer_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.params.digest(ParamGroup::Representer).as_bytes());
        for b in &self.buffers {
            h.update(b.name.as_bytes());
            for v in b.mean.iter().chain(&b.var) {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn head_digest(&self) -> String {
        self.params.digest(ParamGroup::Head)
    }

    pub fn param_count(&self) -> usize {
        self.params.count(None)
    }

    pub fn head_param_count(&self) -> usize {
        self.params.count(Some(ParamGroup::Head))
    }

    /// Converts every parameter and buffer to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            let id = params.add(&p.name, p.group, p.value.cast()).expect("names already unique");
            params.get_mut(id).requires_grad = p.requires_grad;
        }
        Model {
            spec: self.spec.clone(),
            params,
            buffers: self
                .buffers
                .iter()
                .map(|b| BnBuffer {
                    name: b.name.clone(),
                    mean: b.mean.iter().map(|v| U::of(v.as_f64())).collect(),
                    var: b.var.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            mode: self.mode,
            representer: self.representer.clone(),
            head: self.head,
            repr_dim: self.repr_dim,
        }
    }
}

/// Affine head `r @ w^T + b` on precomputed representations.
pub fn head_forward<T: Scalar>(params: &ParamStore<T>, head: (ParamId, ParamId), reps: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.input(reps.clone());
    let (w, b) = (g.param(params, head.0), g.param(params, head.1));
    let y = g.linear(x, w, b)?;
    Ok(g.take_value(y))
}

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub report: GradCheckReport,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central-difference check (`h = 1e-4`) of every parameter's gradient on a
/// random parameter subset. The objective is a fixed random linear functional
/// of the class scores, so an affine model is checked exactly. The model must
/// be in eval mode: train-mode dropout makes the objective stochastic.
pub fn finite_diff_check(model: &Model<f64>, inputs: &Tensor<f64>, tolerance: f64) -> Result<GradCheck> {
    if model.mode == Mode::Train {
        bail!(InvalidArgument, "finite-difference check requires eval mode (dropout and batch statistics are active)");
    }
    model.check_input(inputs.shape())?;
    let n = inputs.shape()[0];
    let mut rng = seed::derived_rng(0x9e37_79b9, &[b"gradcheck"]);
    let probe: Vec<f64> = (0..n * model.spec.n_classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let probe = Tensor::from_vec(&[1, n * model.spec.n_classes], probe)?;
    let mut store = model.params.clone();
    let report = check_gradients(
        &mut store,
        |g, params| {
            let view = Model { params: params.clone(), ..model.clone() };
            let x = g.input(inputs.clone());
            let f = view.forward_graph(g, x, None)?;
            // `probe . scores` as a 1x1 linear node with a zero bias.
            let flat = g.reshape(f.scores, &[1, n * view.spec.n_classes])?;
            let pw = g.input(probe.clone());
            let zero = g.input(Tensor::zeros(&[1]));
            let y = g.linear(flat, pw, zero)?;
            Ok(g.sum(y))
        },
        1e-4,
        8,
        17,
    )?;
    let passed = report.passed(tolerance);
    Ok(GradCheck { report, tolerance, passed })
}
