use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Uniform};

use crate::arch::spec::{ModelSpec, Variant};
use crate::compression::{select_prune, LgcState, PrunePolicy};
use crate::error::{Error, Result};
use crate::ops::{BatchStats, ConvConfig, NormMode, RunningStats};
use crate::param::Param;
use crate::tape::{Tape, Var};
use crate::tensor::{Fill, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Param,
    pub beta: Param,
    pub running: RunningStats,
}

impl Norm {
    fn new(name: &str, channels: usize) -> Self {
        let ones = Tensor::new(&[channels], Fill::Constant(1.0)).expect("positive channels");
        let zeros = Tensor::zeros(&[channels]).expect("positive channels");
        Norm {
            gamma: Param::new(format!("{name}.gamma"), ones),
            beta: Param::new(format!("{name}.beta"), zeros),
            running: RunningStats::new(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// 1×1 learned group convolution with its pruning state.
#[derive(Debug, Clone, PartialEq)]
pub struct Lgc {
    pub weight: Param,
    pub state: LgcState,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpatialConv {
    Grouped {
        weight: Param,
        cfg: ConvConfig,
    },
    Separable {
        depthwise: Param,
        depthwise_cfg: ConvConfig,
        pointwise: Param,
        pointwise_cfg: ConvConfig,
    },
}

/// `BN-ReLU6 → LGC → BN-ReLU6 → spatial conv`; its output is appended to the
/// running concatenation of the stage.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub name: String,
    pub in_channels: usize,
    pub growth: usize,
    pub norm1: Norm,
    pub lgc: Lgc,
    pub norm2: Norm,
    pub conv: SpatialConv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub in_channels: usize,
    /// Spatial extent `(height, width)` inside the stage.
    pub extent: (usize, usize),
    pub blocks: Vec<DenseBlock>,
}

impl Stage {
    pub fn out_channels(&self) -> usize {
        self.in_channels + self.blocks.iter().map(|b| b.growth).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    pub spec: ModelSpec,
    pub stem: Param,
    pub stem_cfg: ConvConfig,
    pub stages: Vec<Stage>,
    pub final_norm: Norm,
    pub classifier_weight: Param,
    pub classifier_bias: Param,
}

/// Node kinds of the flattened graph view.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Input,
    Conv(ConvConfig),
    LearnedGroupConv {
        groups: usize,
        in_channels: usize,
        out_channels: usize,
        /// Live `(group, input)` connections.
        kept: usize,
        /// Cumulative pruning targets hit the saturation clamp.
        saturated: bool,
    },
    BatchNorm,
    Relu6,
    Concat,
    AvgPool {
        window: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Dropout,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

/// One layer of the flattened graph. Shapes are per image, `(C, H, W)`; the
/// classifier reports `(F, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
}

/// Behaviour switches for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardMode {
    pub training: bool,
    pub dropout_rate: f64,
    pub dropout_seed: u64,
}

impl ForwardMode {
    pub fn eval() -> Self {
        ForwardMode {
            training: false,
            dropout_rate: 0.0,
            dropout_seed: 0,
        }
    }

    pub fn train(dropout_rate: f64, dropout_seed: u64) -> Self {
        ForwardMode {
            training: true,
            dropout_rate,
            dropout_seed,
        }
    }
}

/// Result of [`LayerGraph::forward`].
#[derive(Debug)]
pub struct Forward {
    pub logits: Var,
    /// Tape leaves of the parameters, in declaration order.
    pub params: Vec<Var>,
    /// Batch statistics of every batch norm, in declaration order (training only).
    pub batch_stats: Vec<BatchStats>,
}

fn norm_mode(n: &Norm, training: bool) -> NormMode<'_> {
    if training {
        NormMode::Train
    } else {
        NormMode::Eval(&n.running)
    }
}

fn kaiming<R: rand::Rng>(name: String, cfg: &ConvConfig, rng: &mut R) -> Param {
    let fan_out = cfg.out_channels / cfg.groups * cfg.kernel_size * cfg.kernel_size;
    let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("finite std");
    Param::new(name, Tensor::sample(&cfg.weight_shape(), &normal, rng))
}

pub fn build_baseline(spec: &ModelSpec, seed: u64) -> Result<LayerGraph> {
    if spec.variant != Variant::Baseline {
        return Err(Error::config("build_baseline needs the baseline variant"));
    }
    LayerGraph::build(spec, seed)
}

pub fn build_condensenext(spec: &ModelSpec, seed: u64) -> Result<LayerGraph> {
    if spec.variant != Variant::CondenseNeXt {
        return Err(Error::config("build_condensenext needs the condensenext variant"));
    }
    LayerGraph::build(spec, seed)
}

/// Builds whichever variant `spec` names.
pub fn build(spec: &ModelSpec, seed: u64) -> Result<LayerGraph> {
    LayerGraph::build(spec, seed)
}

/// Eval-mode logits for a batch.
pub fn forward(graph: &LayerGraph, x: &Tensor<f32>, training: bool) -> Result<Tensor<f32>> {
    let mut tape = Tape::<f32>::new();
    let xv = tape.constant(x.clone());
    let mode = if training { ForwardMode::train(0.0, 0) } else { ForwardMode::eval() };
    let out = graph.forward_impl(&mut tape, xv, mode, false)?;
    Ok(tape.value(out.logits).clone())
}

impl LayerGraph {
    fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c_in, mut h, mut w) = spec.input_shape;
        let policy = match spec.variant {
            Variant::Baseline => PrunePolicy::CondensationFactor,
            Variant::CondenseNeXt => PrunePolicy::Cardinality,
        };

        let stem_cfg = ConvConfig::standard(c_in, spec.init_channels, 3, 1);
        let stem = kaiming("stem.weight".into(), &stem_cfg, &mut rng);

        let mut stages = Vec::with_capacity(spec.stages.len());
        let mut channels = spec.init_channels;
        let mut lgc_id = 0;
        for (s, &(blocks, growth)) in spec.stages.iter().enumerate() {
            if s > 0 {
                h /= 2;
                w /= 2;
            }
            let stage_in = channels;
            let wide = spec.bottleneck * growth;
            let mut list = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let name = format!("stage{s}.block{b}");
                let norm1 = Norm::new(&format!("{name}.norm1"), channels);
                let lgc_cfg = ConvConfig::pointwise(channels, wide);
                let lgc = Lgc {
                    weight: kaiming(format!("{name}.lgc.weight"), &lgc_cfg, &mut rng),
                    state: LgcState::new(
                        lgc_id,
                        spec.groups,
                        channels,
                        wide,
                        spec.pruning_p,
                        spec.condensation_factor,
                        policy,
                    )?,
                };
                lgc_id += 1;
                let norm2 = Norm::new(&format!("{name}.norm2"), wide);
                let conv = match spec.variant {
                    Variant::Baseline => {
                        let cfg = ConvConfig::grouped(wide, growth, 3, spec.groups, 1);
                        cfg.validate()?;
                        SpatialConv::Grouped {
                            weight: kaiming(format!("{name}.conv.weight"), &cfg, &mut rng),
                            cfg,
                        }
                    }
                    Variant::CondenseNeXt => {
                        let depthwise_cfg = ConvConfig::depthwise(wide, 3, 1);
                        let pointwise_cfg = ConvConfig::pointwise(wide, growth);
                        SpatialConv::Separable {
                            depthwise: kaiming(format!("{name}.depthwise.weight"), &depthwise_cfg, &mut rng),
                            depthwise_cfg,
                            pointwise: kaiming(format!("{name}.pointwise.weight"), &pointwise_cfg, &mut rng),
                            pointwise_cfg,
                        }
                    }
                };
                list.push(DenseBlock {
                    name,
                    in_channels: channels,
                    growth,
                    norm1,
                    lgc,
                    norm2,
                    conv,
                });
                channels += growth;
            }
            stages.push(Stage {
                in_channels: stage_in,
                extent: (h, w),
                blocks: list,
            });
        }

        let final_norm = Norm::new("final.norm", channels);
        let bound = 1.0 / (channels as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let classifier_weight = Param::new(
            "classifier.weight",
            Tensor::sample(&[spec.num_classes, channels], &uniform, &mut rng),
        );
        let classifier_bias = Param::new("classifier.bias", Tensor::zeros(&[spec.num_classes])?);
        Ok(LayerGraph {
            spec: spec.clone(),
            stem,
            stem_cfg,
            stages,
            final_norm,
            classifier_weight,
            classifier_bias,
        })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &DenseBlock> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut DenseBlock> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut())
    }

    /// Trainable parameters in declaration order.
    pub fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.stem];
        for b in self.blocks() {
            out.extend([&b.norm1.gamma, &b.norm1.beta, &b.lgc.weight, &b.norm2.gamma, &b.norm2.beta]);
            match &b.conv {
                SpatialConv::Grouped { weight, .. } => out.push(weight),
                SpatialConv::Separable { depthwise, pointwise, .. } => out.extend([depthwise, pointwise]),
            }
        }
        out.extend([
            &self.final_norm.gamma,
            &self.final_norm.beta,
            &self.classifier_weight,
            &self.classifier_bias,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.stem];
        for st in &mut self.stages {
            for b in &mut st.blocks {
                out.push(&mut b.norm1.gamma);
                out.push(&mut b.norm1.beta);
                out.push(&mut b.lgc.weight);
                out.push(&mut b.norm2.gamma);
                out.push(&mut b.norm2.beta);
                match &mut b.conv {
                    SpatialConv::Grouped { weight, .. } => out.push(weight),
                    SpatialConv::Separable { depthwise, pointwise, .. } => {
                        out.push(depthwise);
                        out.push(pointwise);
                    }
                }
            }
        }
        out.push(&mut self.final_norm.gamma);
        out.push(&mut self.final_norm.beta);
        out.push(&mut self.classifier_weight);
        out.push(&mut self.classifier_bias);
        out
    }

    pub fn norms(&self) -> Vec<&Norm> {
        let mut out: Vec<&Norm> = self.blocks().flat_map(|b| [&b.norm1, &b.norm2]).collect();
        out.push(&self.final_norm);
        out
    }

    pub fn norms_mut(&mut self) -> Vec<&mut Norm> {
        let mut out = Vec::new();
        for st in &mut self.stages {
            for b in &mut st.blocks {
                out.push(&mut b.norm1);
                out.push(&mut b.norm2);
            }
        }
        out.push(&mut self.final_norm);
        out
    }

    pub fn lgc_states(&self) -> Vec<&LgcState> {
        self.blocks().map(|b| &b.lgc.state).collect()
    }

    /// Number of scalar parameters (all entries, including pruned ones).
    pub fn dense_param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Number of live scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.kept_len()).sum()
    }

    /// Runs condensing `stage` on every learned group convolution.
    pub fn condense(&mut self, stage: usize) -> Result<()> {
        for b in self.blocks_mut() {
            let next = select_prune(&mut b.lgc.weight.value, &b.lgc.state, stage)?;
            b.lgc.weight.mask = (!next.is_full()).then(|| next.weight_mask());
            b.lgc.state = next;
        }
        Ok(())
    }

    /// Applies every condensing stage in order.
    pub fn condense_all(&mut self) -> Result<()> {
        for stage in 1..self.spec.condensation_factor {
            self.condense(stage)?;
        }
        Ok(())
    }

    /// Re-zeroes pruned weights; masks always win over parameter values.
    pub fn enforce_masks(&mut self) {
        for p in self.params_mut() {
            if let Some(m) = &p.mask {
                for (v, &k) in p.value.data_mut().iter_mut().zip(m) {
                    if !k {
                        *v = 0.0;
                    }
                }
            }
        }
    }

    /// Folds the batch statistics of a training forward pass into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let mut norms = self.norms_mut();
        if stats.len() != norms.len() {
            return Err(Error::contract(format!(
                "{} batch statistics for {} batch norms",
                stats.len(),
                norms.len()
            )));
        }
        for (n, s) in norms.iter_mut().zip(stats) {
            n.running.update(s);
        }
        Ok(())
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = self.spec.input_shape;
        match shape {
            [n, sc, sh, sw] if *n > 0 && (*sc, *sh, *sw) == (c, h, w) => Ok(()),
            _ => Err(Error::shape(format!("model expects (N, {c}, {h}, {w}) input, got {shape:?}"))),
        }
    }

    /// Records the network on `tape` with the parameters as gradient-tracked leaves.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, mode: ForwardMode) -> Result<Forward> {
        self.forward_impl(tape, x, mode, true)
    }

    fn forward_impl<T: Real>(&self, tape: &mut Tape<T>, x: Var, mode: ForwardMode, track: bool) -> Result<Forward> {
        self.check_input(tape.shape(x))?;
        let params: Vec<Var> = self
            .params()
            .iter()
            .map(|p| {
                let v = p.value.cast::<T>();
                if track {
                    tape.variable(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect();
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter order matches forward");
        let mut batch_stats = Vec::new();

        tape.set_scope("stem");
        let mut h = tape.conv2d(x, take(), &self.stem_cfg)?;
        for (s, stage) in self.stages.iter().enumerate() {
            if s > 0 {
                tape.set_scope(&format!("stage{s}.transition"));
                h = tape.avg_pool(h, 2, 2)?;
            }
            for b in &stage.blocks {
                tape.set_scope(&format!("{}.norm1", b.name));
                let (g1, b1) = (take(), take());
                let (a, st) = tape.batch_norm_relu6(h, g1, b1, norm_mode(&b.norm1, mode.training))?;
                batch_stats.extend(st);

                tape.set_scope(&format!("{}.lgc", b.name));
                let mask = Arc::new(b.lgc.state.group_mask());
                let l = tape.learned_group_conv(a, take(), mask)?;

                tape.set_scope(&format!("{}.norm2", b.name));
                let (g2, b2) = (take(), take());
                let (c, st) = tape.batch_norm_relu6(l, g2, b2, norm_mode(&b.norm2, mode.training))?;
                batch_stats.extend(st);

                let out = match &b.conv {
                    SpatialConv::Grouped { cfg, .. } => {
                        tape.set_scope(&format!("{}.conv", b.name));
                        tape.conv2d(c, take(), cfg)?
                    }
                    SpatialConv::Separable {
                        depthwise_cfg,
                        pointwise_cfg,
                        ..
                    } => {
                        tape.set_scope(&format!("{}.depthwise", b.name));
                        let d = tape.conv2d(c, take(), depthwise_cfg)?;
                        tape.set_scope(&format!("{}.pointwise", b.name));
                        tape.conv2d(d, take(), pointwise_cfg)?
                    }
                };
                tape.set_scope(&format!("{}.concat", b.name));
                h = tape.concat_channels(&[h, out])?;
            }
        }

        tape.set_scope("final.norm");
        let (g, bt) = (take(), take());
        let (f, st) = tape.batch_norm_relu6(h, g, bt, norm_mode(&self.final_norm, mode.training))?;
        batch_stats.extend(st);
        tape.set_scope("final.pool");
        let pooled = tape.global_avg_pool(f)?;
        tape.set_scope("final.dropout");
        let dropped = tape.dropout(pooled, mode.dropout_rate, mode.training, mode.dropout_seed)?;
        tape.set_scope("classifier");
        let (w, bias) = (take(), take());
        let logits = tape.linear(dropped, w, bias)?;
        Ok(Forward {
            logits,
            params,
            batch_stats,
        })
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        forward(self, x, false)
    }

    /// Flattened layer list with input edges, in evaluation order.
    pub fn nodes(&self) -> Vec<LayerNode> {
        let mut nodes = Vec::new();
        let mut push = |name: String, kind: LayerKind, inputs: Vec<usize>, in_shape: [usize; 3], out_shape: [usize; 3]| {
            let id = nodes.len();
            nodes.push(LayerNode {
                id,
                name,
                kind,
                inputs,
                in_shape,
                out_shape,
            });
            id
        };
        let (c, h0, w0) = self.spec.input_shape;
        let input = push("input".into(), LayerKind::Input, vec![], [c, h0, w0], [c, h0, w0]);
        let mut cur = push(
            "stem".into(),
            LayerKind::Conv(self.stem_cfg),
            vec![input],
            [c, h0, w0],
            [self.spec.init_channels, h0, w0],
        );
        let mut shape = [self.spec.init_channels, h0, w0];
        for (s, stage) in self.stages.iter().enumerate() {
            let (h, w) = stage.extent;
            if s > 0 {
                let out = [shape[0], h, w];
                cur = push(
                    format!("stage{s}.transition"),
                    LayerKind::AvgPool { window: 2, stride: 2 },
                    vec![cur],
                    shape,
                    out,
                );
                shape = out;
            }
            for b in &stage.blocks {
                let wide = b.lgc.state.out_channels;
                let n1 = push(format!("{}.norm1", b.name), LayerKind::BatchNorm, vec![cur], shape, shape);
                let r1 = push(format!("{}.relu1", b.name), LayerKind::Relu6, vec![n1], shape, shape);
                let saturated = crate::compression::prune_target_total(&b.lgc.state).is_ok_and(|t| t.saturated)
                    && b.lgc.state.policy == PrunePolicy::Cardinality;
                let l = push(
                    format!("{}.lgc", b.name),
                    LayerKind::LearnedGroupConv {
                        groups: b.lgc.state.groups,
                        in_channels: b.in_channels,
                        out_channels: wide,
                        kept: b.lgc.state.kept_total(),
                        saturated,
                    },
                    vec![r1],
                    shape,
                    [wide, h, w],
                );
                let n2 = push(format!("{}.norm2", b.name), LayerKind::BatchNorm, vec![l], [wide, h, w], [wide, h, w]);
                let r2 = push(format!("{}.relu2", b.name), LayerKind::Relu6, vec![n2], [wide, h, w], [wide, h, w]);
                let out = match &b.conv {
                    SpatialConv::Grouped { cfg, .. } => push(
                        format!("{}.conv", b.name),
                        LayerKind::Conv(*cfg),
                        vec![r2],
                        [wide, h, w],
                        [b.growth, h, w],
                    ),
                    SpatialConv::Separable {
                        depthwise_cfg,
                        pointwise_cfg,
                        ..
                    } => {
                        let d = push(
                            format!("{}.depthwise", b.name),
                            LayerKind::Conv(*depthwise_cfg),
                            vec![r2],
                            [wide, h, w],
                            [wide, h, w],
                        );
                        push(
                            format!("{}.pointwise", b.name),
                            LayerKind::Conv(*pointwise_cfg),
                            vec![d],
                            [wide, h, w],
                            [b.growth, h, w],
                        )
                    }
                };
                let joined = [shape[0] + b.growth, h, w];
                cur = push(format!("{}.concat", b.name), LayerKind::Concat, vec![cur, out], shape, joined);
                shape = joined;
            }
        }
        let n = push("final.norm".into(), LayerKind::BatchNorm, vec![cur], shape, shape);
        let r = push("final.relu".into(), LayerKind::Relu6, vec![n], shape, shape);
        let feat = [shape[0], 1, 1];
        let p = push("final.pool".into(), LayerKind::GlobalAvgPool, vec![r], shape, feat);
        let d = push("final.dropout".into(), LayerKind::Dropout, vec![p], feat, feat);
        push(
            "classifier".into(),
            LayerKind::Linear {
                in_features: shape[0],
                out_features: self.spec.num_classes,
            },
            vec![d],
            feat,
            [self.spec.num_classes, 1, 1],
        );
        nodes
    }
}
