//! Dense blocks, transition layers and the single-scale grid detector.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamId, ParamKind, ParamStore, Tape, Var};
use crate::config::{DownsampleMode, NetworkConfig, OutputPolicy};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{BatchNormMode, BatchNormState, ConvParams, Pool3d, Real, Tensor};

/// Converts an `(x, y, z)` triple to tensor `(depth, height, width)` order.
pub fn xyz_to_dhw(v: [usize; 3]) -> [usize; 3] {
    [v[2], v[1], v[0]]
}

/// Description of one dense block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseBlockSpec {
    pub num_layers: usize,
    pub growth_rate: usize,
    pub input_channels: usize,
    pub output_policy: OutputPolicy,
}

impl DenseBlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.growth_rate == 0 || self.input_channels == 0 {
            return Err(Error::Config(format!(
                "dense block needs layers, growth rate and input channels >= 1, got {self:?}"
            )));
        }
        if self.output_policy == OutputPolicy::PaperFormula && self.num_layers < 2 {
            return Err(Error::Config("paper_formula output policy needs at least 2 layers".into()));
        }
        Ok(())
    }

    /// Input channels of layer `k` (1-based): `c0 + (k - 1) * g`.
    pub fn layer_input_channels(&self, k: usize) -> usize {
        self.input_channels + (k - 1) * self.growth_rate
    }

    pub fn output_channels(&self) -> usize {
        match self.output_policy {
            OutputPolicy::Standard => self.input_channels + self.num_layers * self.growth_rate,
            OutputPolicy::PaperFormula => self.input_channels + (self.num_layers - 1) * self.growth_rate,
        }
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    params: ConvParams,
}

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// Convolution (no bias) followed by batch normalization and ReLU.
#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct DenseBlock {
    spec: DenseBlockSpec,
    layers: Vec<ConvBnRelu>,
}

#[derive(Clone, Debug)]
enum Downsample {
    Max(Pool3d),
    Avg(Pool3d),
    Conv(Conv),
}

/// Parameter factory: draws initial values in double precision from one seeded
/// stream, in construction order, and stores them at precision `T`.
struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Real> Builder<'_, T> {
    fn add(&mut self, name: String, value: Tensor<f64>, kind: ParamKind) -> Result<ParamId> {
        self.store.add(name, value.cast(), kind)
    }

    fn uniform(&mut self, shape: [usize; 5], bound: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| self.rng.gen_range(-bound..bound))
    }

    /// Weights uniform in `±sqrt(gain / fan_in)`.
    fn conv(&mut self, name: &str, params: ConvParams, bias: Option<f64>, gain: f64) -> Result<Conv> {
        let bound = (gain / params.patch_len() as f64).sqrt();
        let w = self.uniform(params.weight_shape(), bound);
        let weight = self.add(format!("{name}.weight"), w, ParamKind::Learnable)?;
        let bias = match bias {
            Some(b) => Some(self.add(
                format!("{name}.bias"),
                Tensor::full(vec![params.out_channels], b),
                ParamKind::Learnable,
            )?),
            None => None,
        };
        Ok(Conv { weight, bias, params })
    }

    fn bn(&mut self, name: &str, channels: usize) -> Result<BatchNorm> {
        let c = vec![channels];
        Ok(BatchNorm {
            gamma: self.add(format!("{name}.gamma"), Tensor::full(c.clone(), 1.0), ParamKind::Learnable)?,
            beta: self.add(format!("{name}.beta"), Tensor::zeros(c.clone()), ParamKind::Learnable)?,
            running_mean: self.add(format!("{name}.running_mean"), Tensor::zeros(c.clone()), ParamKind::Buffer)?,
            running_var: self.add(format!("{name}.running_var"), Tensor::full(c, 1.0), ParamKind::Buffer)?,
        })
    }

    fn conv_bn_relu(&mut self, name: &str, params: ConvParams) -> Result<ConvBnRelu> {
        Ok(ConvBnRelu {
            conv: self.conv(&format!("{name}.conv"), params, None, 6.0)?,
            bn: self.bn(&format!("{name}.bn"), params.out_channels)?,
        })
    }

    fn dense_block(&mut self, name: &str, spec: DenseBlockSpec, kernel: [usize; 3]) -> Result<DenseBlock> {
        spec.validate()?;
        let layers = (1..=spec.num_layers)
            .map(|k| {
                let p = ConvParams::same(spec.layer_input_channels(k), spec.growth_rate, kernel);
                self.conv_bn_relu(&format!("{name}.layer{k}"), p)
            })
            .collect::<Result<_>>()?;
        Ok(DenseBlock { spec, layers })
    }
}

/// Settings shared by every layer during one forward pass.
struct Pass<'a, T> {
    tape: &'a mut Tape<T>,
    store: &'a mut ParamStore<T>,
    mode: BatchNormMode,
    momentum: T,
    eps: T,
}

impl<T: Real> Pass<'_, T> {
    fn conv(&mut self, c: &Conv, x: &Var<T>) -> Result<Var<T>> {
        let w = self.tape.param(self.store, c.weight);
        let b = c.bias.map(|id| self.tape.param(self.store, id));
        self.tape.conv3d(x, &w, b.as_ref(), &c.params)
    }

    fn bn(&mut self, bn: &BatchNorm, x: &Var<T>) -> Result<Var<T>> {
        let gamma = self.tape.param(self.store, bn.gamma);
        let beta = self.tape.param(self.store, bn.beta);
        let mut state = BatchNormState {
            running_mean: self.store.value(bn.running_mean).data().to_vec(),
            running_var: self.store.value(bn.running_var).data().to_vec(),
            momentum: self.momentum,
        };
        let y = self.tape.batchnorm(x, &gamma, &beta, &mut state, self.mode, self.eps)?;
        if self.mode == BatchNormMode::Train {
            self.store.value_mut(bn.running_mean).data_mut().copy_from_slice(&state.running_mean);
            self.store.value_mut(bn.running_var).data_mut().copy_from_slice(&state.running_var);
        }
        Ok(y)
    }

    fn conv_bn_relu(&mut self, u: &ConvBnRelu, x: &Var<T>) -> Result<Var<T>> {
        let c = self.conv(&u.conv, x)?;
        let n = self.bn(&u.bn, &c)?;
        self.tape.relu(&n)
    }

    /// Returns the block output; `probe` receives the input of every layer.
    fn dense_block(&mut self, block: &DenseBlock, x0: &Var<T>, mut probe: Option<&mut Vec<Tensor<T>>>) -> Result<Var<T>> {
        let mut feats = vec![x0.clone()];
        for layer in &block.layers {
            let input = if feats.len() == 1 {
                feats[0].clone()
            } else {
                let refs: Vec<&Var<T>> = feats.iter().collect();
                self.tape.concat(&refs)?
            };
            if let Some(p) = probe.as_deref_mut() {
                p.push(input.value().clone());
            }
            let y = self.conv_bn_relu(layer, &input)?;
            feats.push(y);
        }
        let kept: Vec<&Var<T>> = match block.spec.output_policy {
            OutputPolicy::Standard => feats.iter().collect(),
            OutputPolicy::PaperFormula => std::iter::once(&feats[0]).chain(&feats[2..]).collect(),
        };
        self.tape.concat(&kept)
    }

    fn downsample(&mut self, d: &Downsample, x: &Var<T>) -> Result<Var<T>> {
        match d {
            Downsample::Max(p) => self.tape.maxpool3d(x, p),
            Downsample::Avg(p) => self.tape.avgpool3d(x, p),
            Downsample::Conv(c) => self.conv(c, x),
        }
    }
}

/// Spatial extents `(depth, height, width)` after each stage of a network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeometryPlan {
    pub input: [usize; 3],
    pub after_stem: [usize; 3],
    pub after_stage: Vec<[usize; 3]>,
    pub output: [usize; 3],
}

/// Checks that the stem and downsampling strides map the input exactly onto the grid.
pub fn plan_geometry(config: &NetworkConfig) -> Result<GeometryPlan> {
    let input = xyz_to_dhw(config.input_shape);
    let grid = xyz_to_dhw(config.grid_shape);
    if input.contains(&0) || grid.contains(&0) {
        return Err(Error::Geometry("input and grid extents must be >= 1".into()));
    }
    let mut achieved = xyz_to_dhw(config.stem_stride);
    for s in &config.downsample_strides {
        let s = xyz_to_dhw(*s);
        for a in 0..3 {
            achieved[a] *= s[a];
        }
    }
    let required: Vec<String> = (0..3)
        .map(|a| {
            if input[a] % grid[a] == 0 {
                (input[a] / grid[a]).to_string()
            } else {
                format!("{}/{}", input[a], grid[a])
            }
        })
        .collect();
    let mismatch = || {
        Error::Geometry(format!(
            "downsampling schedule reduces (x, y, z) by ({}, {}, {}) but mapping input {:?} onto grid {:?} requires ({}, {}, {})",
            achieved[2], achieved[1], achieved[0], config.input_shape, config.grid_shape, required[2], required[1], required[0]
        ))
    };
    for a in 0..3 {
        if achieved[a] * grid[a] != input[a] {
            return Err(mismatch());
        }
    }
    let stem_k = xyz_to_dhw(config.kernel);
    let stem = ConvParams::same(1, 1, stem_k).with_stride(xyz_to_dhw(config.stem_stride));
    let after_stem = stem.output_extent(input)?;
    let mut cur = after_stem;
    let mut after_stage = Vec::new();
    for s in &config.downsample_strides {
        let s = xyz_to_dhw(*s);
        for a in 0..3 {
            if cur[a] % s[a] != 0 {
                return Err(mismatch());
            }
            cur[a] /= s[a];
        }
        after_stage.push(cur);
    }
    if cur != grid {
        return Err(mismatch());
    }
    Ok(GeometryPlan {
        input,
        after_stem,
        after_stage,
        output: cur,
    })
}

/// Activations observed during a probed forward pass.
#[derive(Clone, Debug, Default)]
pub struct Probe<T = f64> {
    /// `layer_inputs[b][k]` is the input of layer `k + 1` of block `b + 1`.
    pub layer_inputs: Vec<Vec<Tensor<T>>>,
    pub block_outputs: Vec<Tensor<T>>,
}

/// The grid detector: stem, dense blocks with transitions and downsampling,
/// a 1x1x1 single-channel head and a sigmoid.
#[derive(Clone, Debug)]
pub struct Network<T = f64> {
    config: NetworkConfig,
    plan: GeometryPlan,
    store: ParamStore<T>,
    stem: ConvBnRelu,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Option<ConvBnRelu>>,
    downsamples: Vec<Option<Downsample>>,
    head: Conv,
}

impl<T: Real> Network<T> {
    /// Builds and initializes a network. Identical `(config, seed)` give
    /// bit-identical parameters.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let plan = plan_geometry(config)?;
        let n_blocks = config.growth_rates.len();
        if config.block_depths.len() != n_blocks {
            return Err(Error::Config("growth_rates and block_depths differ in length".into()));
        }
        let stages = config.downsample_strides.len();
        if stages > n_blocks {
            return Err(Error::Config("more downsampling stages than dense blocks".into()));
        }
        let kernel = xyz_to_dhw(config.kernel);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: rng::stream(seed, Stream::Init),
        };
        let stem_params = ConvParams::same(1, config.stem_channels, kernel).with_stride(xyz_to_dhw(config.stem_stride));
        let stem = b.conv_bn_relu("stem", stem_params)?;

        let mut channels = config.stem_channels;
        let (mut blocks, mut transitions, mut downsamples) = (Vec::new(), Vec::new(), Vec::new());
        for i in 0..n_blocks {
            let spec = DenseBlockSpec {
                num_layers: config.block_depths[i],
                growth_rate: config.growth_rates[i],
                input_channels: channels,
                output_policy: config.output_policy,
            };
            blocks.push(b.dense_block(&format!("block{}", i + 1), spec, kernel)?);
            channels = spec.output_channels();
            // Every downsampling stage is preceded by a transition, and so is the
            // last block unless the schedule already ended.
            let transition = if i + 1 < n_blocks || i < stages {
                let p = transition_params(channels, spec.growth_rate);
                channels = p.out_channels;
                Some(b.conv_bn_relu(&format!("transition{}", i + 1), p)?)
            } else {
                None
            };
            transitions.push(transition);
            let down = if i < stages {
                let s = xyz_to_dhw(config.downsample_strides[i]);
                Some(match config.downsample_mode {
                    DownsampleMode::MaxPool => Downsample::Max(Pool3d::new(s, s)),
                    DownsampleMode::AvgPool => Downsample::Avg(Pool3d::new(s, s)),
                    DownsampleMode::Stride2Conv => {
                        let p = ConvParams::same(channels, channels, [3, 3, 3]).with_stride(s);
                        Downsample::Conv(b.conv(&format!("down{}.conv", i + 1), p, Some(0.0), 6.0)?)
                    }
                })
            } else {
                None
            };
            downsamples.push(down);
        }
        let head = b.conv("head.conv", ConvParams::new(channels, 1, [1, 1, 1]), Some(config.head_bias), 1.0)?;
        Ok(Network {
            config: config.clone(),
            plan,
            store,
            stem,
            blocks,
            transitions,
            downsamples,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn geometry(&self) -> &GeometryPlan {
        &self.plan
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of learnable scalars: convolution weights and biases, batch-norm gamma and beta.
    pub fn count_parameters(&self) -> usize {
        self.store.learnable_count()
    }

    /// Number of convolution layers, including stem, transitions and head.
    pub fn conv_layer_count(&self) -> usize {
        let downs = self.downsamples.iter().flatten().filter(|d| matches!(d, Downsample::Conv(_))).count();
        1 + self.blocks.iter().map(|b| b.layers.len()).sum::<usize>()
            + self.transitions.iter().flatten().count()
            + downs
            + 1
    }

    /// Per-block specs in order.
    pub fn block_specs(&self) -> Vec<DenseBlockSpec> {
        self.blocks.iter().map(|b| b.spec).collect()
    }

    /// Expected input shape `[n, 1, D, H, W]`.
    pub fn input_shape(&self, batch: usize) -> [usize; 5] {
        let [d, h, w] = self.plan.input;
        [batch, 1, d, h, w]
    }

    /// Probability grid `[n, 1, T, S, S]` for a batch of volumes `[n, 1, D, H, W]`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: &Var<T>, mode: BatchNormMode) -> Result<Var<T>> {
        self.run(tape, x, mode, None)
    }

    /// Inference without recording a tape; batch norm uses the given mode.
    pub fn predict(&mut self, volume: &Tensor<T>, mode: BatchNormMode) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(volume.clone());
        let y = self.run(&mut tape, &x, mode, None)?;
        Ok(y.value().clone())
    }

    /// Forward pass that also records every dense-layer input and block output.
    pub fn probe(&mut self, volume: &Tensor<T>, mode: BatchNormMode) -> Result<(Tensor<T>, Probe<T>)> {
        let mut tape = Tape::inference();
        let x = tape.constant(volume.clone());
        let mut probe = Probe::default();
        let y = self.run(&mut tape, &x, mode, Some(&mut probe))?;
        Ok((y.value().clone(), probe))
    }

    fn run(&mut self, tape: &mut Tape<T>, x: &Var<T>, mode: BatchNormMode, mut probe: Option<&mut Probe<T>>) -> Result<Var<T>> {
        let [n, c, d, h, w] = x.value().dims5()?;
        let expected = self.input_shape(n);
        for (axis, (&want, got)) in expected.iter().zip([n, c, d, h, w]).enumerate().skip(1) {
            if want != got {
                return Err(Error::dim(
                    format!("network input {}", ["batch", "channel", "depth", "height", "width"][axis]),
                    want,
                    got,
                ));
            }
        }
        let mut pass = Pass {
            tape,
            store: &mut self.store,
            mode,
            momentum: T::of(self.config.bn_momentum),
            eps: T::of(self.config.bn_eps),
        };
        let mut cur = pass.conv_bn_relu(&self.stem, x)?;
        for ((block, transition), down) in self.blocks.iter().zip(&self.transitions).zip(&self.downsamples) {
            let layer_probe = probe.as_deref_mut().map(|p| {
                p.layer_inputs.push(Vec::new());
                p.layer_inputs.last_mut().unwrap()
            });
            cur = pass.dense_block(block, &cur, layer_probe)?;
            if let Some(p) = probe.as_deref_mut() {
                p.block_outputs.push(cur.value().clone());
            }
            if let Some(t) = transition {
                cur = pass.conv_bn_relu(t, &cur)?;
            }
            if let Some(dn) = down {
                cur = pass.downsample(dn, &cur)?;
            }
        }
        let logits = pass.conv(&self.head, &cur)?;
        pass.tape.sigmoid(&logits)
    }
}

/// 1x1x1 convolution to `4 * g` channels.
pub fn transition_params(in_channels: usize, growth_rate: usize) -> ConvParams {
    ConvParams::new(in_channels, 4 * growth_rate, [1, 1, 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk() -> NetworkConfig {
        NetworkConfig {
            input_shape: [64, 64, 8],
            grid_shape: [8, 8, 8],
            growth_rates: vec![8, 8],
            block_depths: vec![2, 2],
            downsample_strides: vec![[2, 2, 1]; 2],
            stem_channels: 8,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn block_channel_arithmetic() {
        let spec = DenseBlockSpec {
            num_layers: 6,
            growth_rate: 16,
            input_channels: 16,
            output_policy: OutputPolicy::Standard,
        };
        assert_eq!(spec.output_channels(), 112);
        let paper = DenseBlockSpec {
            output_policy: OutputPolicy::PaperFormula,
            ..spec
        };
        assert_eq!(paper.output_channels(), 96);
        assert_eq!(spec.layer_input_channels(3), 48);
    }

    #[test]
    fn transition_widths() {
        assert_eq!(transition_params(112, 16).out_channels, 64);
        assert_eq!(transition_params(300, 64).out_channels, 256);
    }

    #[test]
    fn bad_schedule_names_both_reductions() {
        let mut cfg = desk();
        cfg.downsample_strides.pop();
        let err = plan_geometry(&cfg).unwrap_err().to_string();
        assert!(err.contains("(4, 4, 1)") && err.contains("(8, 8, 1)"), "{err}");
    }

    #[test]
    fn default_geometry_plan() {
        let plan = plan_geometry(&NetworkConfig::default()).unwrap();
        assert_eq!(plan.after_stem, [8, 256, 256]);
        assert_eq!(plan.output, [8, 16, 16]);
    }

    #[test]
    fn desk_forward_shape_and_range() {
        let mut net = Network::<f64>::build(&desk(), 3).unwrap();
        let x = Tensor::from_fn(net.input_shape(1).to_vec(), |i| ((i * 7919) % 101) as f64 / 101.0);
        let y = net.predict(&x, BatchNormMode::Train).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8, 8]);
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn single_layer_block_concatenates_input_and_output() {
        let cfg = NetworkConfig {
            block_depths: vec![1, 1],
            ..desk()
        };
        let mut net = Network::<f64>::build(&cfg, 0).unwrap();
        let x = Tensor::from_fn(net.input_shape(1).to_vec(), |i| (i as f64 * 0.01).sin());
        let (_, probe) = net.probe(&x, BatchNormMode::Train).unwrap();
        let input = &probe.layer_inputs[0][0];
        let out = &probe.block_outputs[0];
        assert_eq!(out.channels(), 16);
        assert_eq!(&out.slice_channels(0, 8).unwrap(), input);
    }
}
