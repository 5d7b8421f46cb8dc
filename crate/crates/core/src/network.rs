//! Spiking conv nets with per-block shortcut heads.
//!
//! A network is a chain of blocks. Every block is one or more
//! `conv -> batch norm -> LIF` stages; a residual block adds its input (or a
//! 1x1 projection of it) to the last stage's normalized current before the
//! final LIF. In shortcut modes every block `l` also feeds a head
//! (`spatial GAP -> mean over time -> linear`) producing logits `b_l`. The
//! head of the last block is the main classifier; the others are side heads
//! that exist only to deliver gradient to shallow blocks during training and
//! are never evaluated at inference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::neuron::{lif_unroll, FireMode, NeuronConfig, SurrogateSpec};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Training mode, which also decides whether side heads exist.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Vanilla,
    Shortcut,
    #[default]
    Evolutionary,
    /// Side heads weighted 1, i.e. the plain sum of all block outputs.
    UniformSum,
}

impl Mode {
    pub fn has_side_heads(self) -> bool {
        self != Mode::Vanilla
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Shortcut => "shortcut",
            Mode::Evolutionary => "evolutionary",
            Mode::UniformSum => "uniform-sum",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "shortcut" => Ok(Mode::Shortcut),
            "evolutionary" => Ok(Mode::Evolutionary),
            "uniform-sum" => Ok(Mode::UniformSum),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub channels_in: usize,
    pub channels_out: usize,
    /// Number of `conv -> bn -> lif` stages.
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default)]
    pub residual: bool,
    /// Stride of the block's first conv.
    #[serde(default = "one")]
    pub downsample: usize,
    #[serde(default = "three")]
    pub kernel: usize,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

impl BlockSpec {
    pub fn plain(channels_in: usize, channels_out: usize, downsample: usize) -> Self {
        BlockSpec {
            channels_in,
            channels_out,
            layers: 1,
            residual: false,
            downsample,
            kernel: 3,
        }
    }

    fn needs_projection(&self) -> bool {
        self.residual && (self.channels_in != self.channels_out || self.downsample != 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub in_channels: usize,
    /// Input height and width.
    pub input_size: [usize; 2],
    pub classes: usize,
    pub timesteps: usize,
    pub mode: Mode,
    pub blocks: Vec<BlockSpec>,
}

impl NetworkSpec {
    /// The desk-scale reference topology: eight plain 3x3 blocks, 16 then 32
    /// channels, stride-2 downsampling at blocks 3 and 6.
    pub fn deep8(in_channels: usize, input_size: [usize; 2], classes: usize, mode: Mode) -> Self {
        let blocks = vec![
            BlockSpec::plain(in_channels, 16, 1),
            BlockSpec::plain(16, 16, 1),
            BlockSpec::plain(16, 32, 2),
            BlockSpec::plain(32, 32, 1),
            BlockSpec::plain(32, 32, 1),
            BlockSpec::plain(32, 32, 2),
            BlockSpec::plain(32, 32, 1),
            BlockSpec::plain(32, 32, 1),
        ];
        NetworkSpec {
            in_channels,
            input_size,
            classes,
            timesteps: 4,
            mode,
            blocks,
        }
    }

    /// Block count `n`.
    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    /// Heads including the main classifier.
    pub fn head_count(&self) -> usize {
        if self.mode.has_side_heads() {
            self.n()
        } else {
            1
        }
    }

    /// Spatial extent after each block.
    pub fn spatial_sizes(&self) -> Result<Vec<[usize; 2]>> {
        let mut size = self.input_size;
        let mut out = Vec::with_capacity(self.n());
        for (l, b) in self.blocks.iter().enumerate() {
            let pad = b.kernel / 2;
            for (axis, s) in size.iter_mut().enumerate() {
                if *s + 2 * pad < b.kernel {
                    return Err(Error::Config(format!(
                        "block {}: spatial extent collapses below 1 on axis {axis}",
                        l + 1
                    )));
                }
                *s = (*s + 2 * pad - b.kernel) / b.downsample + 1;
            }
            out.push(size);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("network needs at least one block".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        if self.in_channels == 0 || self.input_size.contains(&0) {
            return Err(Error::Config("input extents must be positive".into()));
        }
        let mut channels = self.in_channels;
        for (l, b) in self.blocks.iter().enumerate() {
            let l = l + 1;
            if b.channels_in != channels {
                return Err(Error::Config(format!(
                    "block {l}: channels_in {} does not match incoming {channels}",
                    b.channels_in
                )));
            }
            if b.channels_out == 0 || b.layers == 0 || b.downsample == 0 {
                return Err(Error::Config(format!(
                    "block {l}: channels_out, layers and downsample must be positive"
                )));
            }
            if b.kernel % 2 == 0 {
                return Err(Error::Config(format!("block {l}: kernel {} must be odd", b.kernel)));
            }
            channels = b.channels_out;
        }
        self.spatial_sizes()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BatchNormLayer {
    gamma: ParamId,
    beta: ParamId,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Stage {
    conv: ParamId,
    stride: usize,
    pad: usize,
    bn: BatchNormLayer,
}

#[derive(Clone, Debug)]
struct Block {
    stages: Vec<Stage>,
    residual: bool,
    projection: Option<(ParamId, usize)>,
}

#[derive(Clone, Copy, Debug)]
struct Head {
    weight: ParamId,
    bias: ParamId,
}

/// Block logits recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `b_1 .. b_n` in shortcut modes, only `b_n` otherwise. Each `[batch, classes]`.
    pub b: Vec<Var>,
}

impl ForwardTrace {
    pub fn main(&self) -> Var {
        *self.b.last().expect("trace always holds the main output")
    }

    pub fn side(&self) -> &[Var] {
        &self.b[..self.b.len() - 1]
    }
}

/// `b_n + lambda * sum_{l<n} b_l`.
///
/// With `lambda == 0` or no side outputs this returns `b_n` itself.
pub fn combine_outputs(g: &mut Graph, trace: &ForwardTrace, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Input(format!("lambda must be non-negative, got {lambda}")));
    }
    let side = trace.side();
    if lambda == 0.0 || side.is_empty() {
        return Ok(trace.main());
    }
    let mut acc = side[0];
    for &b in &side[1..] {
        acc = g.add(acc, b)?;
    }
    let weighted = g.scale(acc, lambda);
    g.add(trace.main(), weighted)
}

/// Parameter and multiply-accumulate counts of one inference pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct InferenceCost {
    pub params: usize,
    /// Per sample and timestep.
    pub macs: usize,
}

#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    neuron: NeuronConfig,
    surrogate: SurrogateSpec,
    fire_mode: FireMode,
    params: ParamStore,
    blocks: Vec<Block>,
    /// Indexed by block; `None` where a side head is absent or stripped.
    heads: Vec<Option<Head>>,
    training: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl Network {
    /// Builds and initializes a network. Main-path weights come from one
    /// seeded stream and each head from its own, so the main path is
    /// identical across modes for the same seed.
    pub fn build(
        spec: NetworkSpec,
        neuron: NeuronConfig,
        surrogate: SurrogateSpec,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        neuron.validate()?;
        surrogate.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(spec.n());
        for (l, bs) in spec.blocks.iter().enumerate() {
            let l = l + 1;
            let mut stages = Vec::with_capacity(bs.layers);
            for j in 1..=bs.layers {
                let cin = if j == 1 { bs.channels_in } else { bs.channels_out };
                let k = bs.kernel;
                let fan_in = cin * k * k;
                let conv = params.add(
                    format!("block.{l}.conv{j}.weight"),
                    uniform(&mut rng, &[bs.channels_out, cin, k, k], fan_in),
                );
                let gamma = params.add(
                    format!("block.{l}.bn{j}.gamma"),
                    Tensor::full(&[bs.channels_out], 1.0),
                );
                let beta = params.add(
                    format!("block.{l}.bn{j}.beta"),
                    Tensor::zeros(&[bs.channels_out]),
                );
                stages.push(Stage {
                    conv,
                    stride: if j == 1 { bs.downsample } else { 1 },
                    pad: k / 2,
                    bn: BatchNormLayer {
                        gamma,
                        beta,
                        running_mean: vec![0.0; bs.channels_out],
                        running_var: vec![1.0; bs.channels_out],
                    },
                });
            }
            let projection = bs.needs_projection().then(|| {
                let id = params.add(
                    format!("block.{l}.proj.weight"),
                    uniform(&mut rng, &[bs.channels_out, bs.channels_in, 1, 1], bs.channels_in),
                );
                (id, bs.downsample)
            });
            blocks.push(Block {
                stages,
                residual: bs.residual,
                projection,
            });
        }

        let n = spec.n();
        let mut heads = vec![None; n];
        for (l, slot) in heads.iter_mut().enumerate() {
            let is_main = l + 1 == n;
            if !is_main && !spec.mode.has_side_heads() {
                continue;
            }
            let mut head_rng = ChaCha8Rng::seed_from_u64(seed);
            head_rng.set_stream(l as u64 + 1);
            let channels = spec.blocks[l].channels_out;
            let weight = params.add(
                format!("head.{}.weight", l + 1),
                uniform(&mut head_rng, &[spec.classes, channels], channels),
            );
            let bias = params.add(
                format!("head.{}.bias", l + 1),
                uniform(&mut head_rng, &[spec.classes], channels),
            );
            *slot = Some(Head { weight, bias });
        }

        Ok(Network {
            spec,
            neuron,
            surrogate,
            fire_mode: FireMode::Spike,
            params,
            blocks,
            heads,
            training: true,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn neuron(&self) -> &NeuronConfig {
        &self.neuron
    }

    pub fn surrogate(&self) -> &SurrogateSpec {
        &self.surrogate
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fire_mode(&self) -> FireMode {
        self.fire_mode
    }

    pub fn set_fire_mode(&mut self, mode: FireMode) {
        self.fire_mode = mode;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    /// Changes the mode tag without touching parameters. Side heads are
    /// only evaluated where they exist.
    pub fn set_mode(&mut self, mode: Mode) {
        self.spec.mode = mode;
    }

    /// Overrides the number of simulation timesteps.
    pub fn set_timesteps(&mut self, timesteps: usize) -> Result<()> {
        if timesteps == 0 {
            return Err(Error::Config("timesteps must be at least 1".into()));
        }
        self.spec.timesteps = timesteps;
        Ok(())
    }

    pub fn side_head_count(&self) -> usize {
        let n = self.heads.len();
        self.heads[..n - 1].iter().filter(|h| h.is_some()).count()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn is_side_head_param(&self, name: &str) -> bool {
        let n = self.spec.n();
        (1..n).any(|l| name.starts_with(&format!("head.{l}.")))
    }

    /// Parameters and MACs of the main path only.
    pub fn inference_cost(&self) -> InferenceCost {
        let params = self
            .params
            .iter()
            .filter(|(_, p)| !self.is_side_head_param(&p.name))
            .map(|(_, p)| p.value.numel())
            .sum();
        let sizes = self.spec.spatial_sizes().unwrap_or_default();
        let mut macs = 0;
        for (block, size) in self.blocks.iter().zip(&sizes) {
            let positions = size[0] * size[1];
            for stage in &block.stages {
                macs += self.params.get(stage.conv).value.numel() * positions;
            }
            if let Some((proj, _)) = block.projection {
                macs += self.params.get(proj).value.numel() * positions;
            }
        }
        macs += self.spec.classes * self.spec.blocks[self.spec.n() - 1].channels_out;
        InferenceCost { params, macs }
    }

    /// Copy of this network without side heads.
    pub fn strip_heads(&self) -> Network {
        let mut store = ParamStore::new();
        let mut remap = vec![None; self.params.len()];
        for (id, p) in self.params.iter() {
            if self.is_side_head_param(&p.name) {
                continue;
            }
            let new_id = store.add(p.name.clone(), p.value.clone());
            store.get_mut(new_id).grad = p.grad.clone();
            remap[id.0] = Some(new_id);
        }
        let map = |id: ParamId| remap[id.0].expect("main-path parameter kept");
        let mut out = self.clone();
        for block in &mut out.blocks {
            for stage in &mut block.stages {
                stage.conv = map(stage.conv);
                stage.bn.gamma = map(stage.bn.gamma);
                stage.bn.beta = map(stage.bn.beta);
            }
            if let Some((proj, _)) = &mut block.projection {
                *proj = map(*proj);
            }
        }
        let n = out.heads.len();
        for (l, head) in out.heads.iter_mut().enumerate() {
            if l + 1 < n {
                *head = None;
            } else if let Some(h) = head {
                h.weight = map(h.weight);
                h.bias = map(h.bias);
            }
        }
        out.params = store;
        out
    }

    /// Named non-trainable state (batch-norm running statistics).
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (l, block) in self.blocks.iter().enumerate() {
            for (j, stage) in block.stages.iter().enumerate() {
                let prefix = format!("block.{}.bn{}", l + 1, j + 1);
                out.push((format!("{prefix}.running_mean"), stage.bn.running_mean.clone()));
                out.push((format!("{prefix}.running_var"), stage.bn.running_var.clone()));
            }
        }
        out
    }

    pub fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<()> {
        for (l, block) in self.blocks.iter_mut().enumerate() {
            for (j, stage) in block.stages.iter_mut().enumerate() {
                let prefix = format!("block.{}.bn{}", l + 1, j + 1);
                let slot = if name == format!("{prefix}.running_mean") {
                    &mut stage.bn.running_mean
                } else if name == format!("{prefix}.running_var") {
                    &mut stage.bn.running_var
                } else {
                    continue;
                };
                if slot.len() != values.len() {
                    return Err(Error::Mismatch(format!(
                        "{name}: expected {} values, found {}",
                        slot.len(),
                        values.len()
                    )));
                }
                slot.copy_from_slice(values);
                return Ok(());
            }
        }
        Err(Error::Mismatch(format!("unknown buffer {name}")))
    }

    /// Names of the conv layers along the main path, input to output.
    pub fn main_conv_layers(&self) -> Vec<String> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for stage in &block.stages {
                let name = &self.params.get(stage.conv).name;
                out.push(name.trim_end_matches(".weight").to_string());
            }
        }
        out
    }

    /// Records a forward pass without touching running statistics.
    ///
    /// Evaluates every present head, or only the main one when
    /// `with_side_heads` is false. Batch norm uses batch statistics in
    /// training mode and running statistics otherwise.
    pub fn trace(
        &self,
        g: &mut Graph,
        x: &Tensor,
        with_side_heads: bool,
    ) -> Result<(ForwardTrace, Vec<BatchStats>)> {
        let s = x.shape();
        let expect = [self.spec.in_channels, self.spec.input_size[0], self.spec.input_size[1]];
        if s.len() != 4 || s[1..] != expect {
            return Err(Error::Dimension {
                op: "network input",
                lhs: s.to_vec(),
                rhs: expect.to_vec(),
            });
        }
        let batch = s[0];
        let steps = self.spec.timesteps;
        let input = g.constant(x.clone());
        // Direct encoding: the same input current at every timestep, time-major.
        let mut cur = g.repeat(input, steps)?;
        let mut stats = Vec::new();
        let mut b = Vec::new();
        let n = self.blocks.len();
        for (l, block) in self.blocks.iter().enumerate() {
            let block_in = cur;
            let last_stage = block.stages.len() - 1;
            for (j, stage) in block.stages.iter().enumerate() {
                let w = g.param(&self.params, stage.conv);
                let z = g.conv2d(cur, w, stage.stride, stage.pad)?;
                let gamma = g.param(&self.params, stage.bn.gamma);
                let beta = g.param(&self.params, stage.bn.beta);
                let mut pre = if self.training {
                    let (y, st) = g.batch_norm(z, gamma, beta, BN_EPS)?;
                    stats.push(st);
                    y
                } else {
                    g.batch_norm_eval(
                        z,
                        gamma,
                        beta,
                        &stage.bn.running_mean,
                        &stage.bn.running_var,
                        BN_EPS,
                    )?
                };
                if block.residual && j == last_stage {
                    let skip = match block.projection {
                        Some((proj, stride)) => {
                            let pw = g.param(&self.params, proj);
                            g.conv2d(block_in, pw, stride, 0)?
                        }
                        None => block_in,
                    };
                    pre = g.add(pre, skip)?;
                }
                cur = self.spike_layer(g, pre, batch, steps)?;
            }
            let is_main = l + 1 == n;
            if is_main || with_side_heads {
                if let Some(head) = self.heads[l] {
                    b.push(self.head(g, cur, head, steps)?);
                }
            }
        }
        Ok((ForwardTrace { b }, stats))
    }

    fn spike_layer(&self, g: &mut Graph, pre: Var, batch: usize, steps: usize) -> Result<Var> {
        let currents = (0..steps)
            .map(|t| g.rows(pre, t * batch, batch))
            .collect::<Result<Vec<_>>>()?;
        let spikes = lif_unroll(g, &currents, &self.neuron, &self.surrogate, self.fire_mode)?;
        g.concat(&spikes)
    }

    fn head(&self, g: &mut Graph, spikes: Var, head: Head, steps: usize) -> Result<Var> {
        let pooled = g.global_avg_pool(spikes)?;
        let rate = g.time_mean(pooled, steps)?;
        let w = g.param(&self.params, head.weight);
        let bias = g.param(&self.params, head.bias);
        g.linear(rate, w, bias)
    }

    /// Forward pass with every head; updates batch-norm running statistics
    /// when in training mode.
    pub fn forward_train(&mut self, g: &mut Graph, x: &Tensor) -> Result<ForwardTrace> {
        let (trace, stats) = self.trace(g, x, true)?;
        if self.training {
            self.update_running_stats(&stats);
        }
        Ok(trace)
    }

    fn update_running_stats(&mut self, stats: &[BatchStats]) {
        let layers = self.blocks.iter_mut().flat_map(|b| b.stages.iter_mut());
        for (stage, st) in layers.zip(stats) {
            let bn = &mut stage.bn;
            for (r, m) in bn.running_mean.iter_mut().zip(&st.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in bn.running_var.iter_mut().zip(&st.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    /// Main-path logits `b_n` without recording gradients. Uses running
    /// statistics regardless of the training flag.
    pub fn forward_infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let eval;
        let net = if self.training {
            eval = Network {
                training: false,
                ..self.clone()
            };
            &eval
        } else {
            self
        };
        let (trace, _) = net.trace(&mut g, x, false)?;
        Ok(g.value(trace.main()).clone())
    }
}
