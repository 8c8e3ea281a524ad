//! The forecasting architecture: a stack of ST-Conv blocks (gated temporal
//! convolution, spatial graph convolution, gated temporal convolution)
//! followed by an output layer that collapses the remaining time axis and
//! maps channels to the forecast horizon.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor, TensorId};
use crate::error::{Error, Result};
use crate::graph::PropagationOperator;

/// Architecture hyperparameters.
///
/// Defaults follow the small-model configuration: 12 history bins
/// (6 hours), one step ahead, kernel 3, channels (1, 32, 16, 32), and a
/// single ST-Conv block — two blocks overfit this data.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct STGCNConfig {
    pub history_steps: usize,
    pub horizon_steps: usize,
    pub temporal_kernel: usize,
    pub input_channels: usize,
    pub temporal_channels_1: usize,
    pub spatial_channels: usize,
    pub temporal_channels_2: usize,
    pub n_blocks: usize,
    pub n_nodes: usize,
}

impl STGCNConfig {
    pub fn with_defaults(n_nodes: usize) -> Self {
        STGCNConfig {
            history_steps: 12,
            horizon_steps: 1,
            temporal_kernel: 3,
            input_channels: 1,
            temporal_channels_1: 32,
            spatial_channels: 16,
            temporal_channels_2: 32,
            n_blocks: 1,
            n_nodes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("history_steps", self.history_steps),
            ("horizon_steps", self.horizon_steps),
            ("temporal_kernel", self.temporal_kernel),
            ("input_channels", self.input_channels),
            ("temporal_channels_1", self.temporal_channels_1),
            ("spatial_channels", self.spatial_channels),
            ("temporal_channels_2", self.temporal_channels_2),
            ("n_blocks", self.n_blocks),
            ("n_nodes", self.n_nodes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Param(format!("model config: {name} must be >= 1")));
            }
        }
        if self.remaining_steps() < 1 {
            return Err(Error::Param(format!(
                "model config: {} history steps do not survive {} block(s) of kernel {} \
                 (need at least {})",
                self.history_steps,
                self.n_blocks,
                self.temporal_kernel,
                self.n_blocks * 2 * (self.temporal_kernel - 1) + 1
            )));
        }
        Ok(())
    }

    /// Time length entering the output layer after all ST-Conv blocks.
    pub fn remaining_steps(&self) -> isize {
        self.history_steps as isize
            - (self.n_blocks * 2 * (self.temporal_kernel - 1)) as isize
    }

    /// Input channels of block `b` (later blocks consume the previous
    /// block's output channels).
    fn block_in_channels(&self, b: usize) -> usize {
        if b == 0 {
            self.input_channels
        } else {
            self.temporal_channels_2
        }
    }

    /// Total learnable parameter count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        let kt = self.temporal_kernel;
        let (c1, cs, c2) = (
            self.temporal_channels_1,
            self.spatial_channels,
            self.temporal_channels_2,
        );
        let mut count = 0;
        for b in 0..self.n_blocks {
            let c_in = self.block_in_channels(b);
            count += kt * c_in * 2 * c1 + 2 * c1; // first temporal conv
            count += c1 * cs + cs; // spatial mixing
            count += kt * cs * 2 * c2 + 2 * c2; // second temporal conv
        }
        let m_rem = self.remaining_steps() as usize;
        count += m_rem * c2 * 2 * c2 + 2 * c2; // final temporal conv
        count += c2 * self.horizon_steps + self.horizon_steps; // forecast map
        count
    }
}

/// Learnable weights of one ST-Conv block.
#[derive(Clone, Debug)]
pub struct BlockParams<F: Scalar> {
    pub temporal1_kernel: Tensor<F>,
    pub temporal1_bias: Tensor<F>,
    pub spatial_theta: Tensor<F>,
    pub spatial_bias: Tensor<F>,
    pub temporal2_kernel: Tensor<F>,
    pub temporal2_bias: Tensor<F>,
}

/// Learnable weights of the output layer.
#[derive(Clone, Debug)]
pub struct OutputParams<F: Scalar> {
    pub kernel: Tensor<F>,
    pub bias: Tensor<F>,
    pub fc_weight: Tensor<F>,
    pub fc_bias: Tensor<F>,
}

/// All learnable weights, in the canonical order used by the checkpoint
/// payload and the optimizer: per block (temporal1 kernel, temporal1 bias,
/// spatial theta, spatial bias, temporal2 kernel, temporal2 bias), then
/// output kernel, output bias, forecast weight, forecast bias.
#[derive(Clone, Debug)]
pub struct ModelParams<F: Scalar> {
    pub blocks: Vec<BlockParams<F>>,
    pub output: OutputParams<F>,
}

fn glorot<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| F::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("static shapes").with_grad()
}

fn zeros_param<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    Tensor::zeros(shape).expect("static shapes").with_grad()
}

impl<F: Scalar> ModelParams<F> {
    /// Glorot-uniform weights, zero biases; fully reproducible from `seed`.
    pub fn init(config: &STGCNConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kt = config.temporal_kernel;
        let (c1, cs, c2) = (
            config.temporal_channels_1,
            config.spatial_channels,
            config.temporal_channels_2,
        );
        let blocks = (0..config.n_blocks)
            .map(|b| {
                let c_in = config.block_in_channels(b);
                BlockParams {
                    temporal1_kernel: glorot(&mut rng, &[kt, c_in, 2 * c1], kt * c_in, kt * 2 * c1),
                    temporal1_bias: zeros_param(&[2 * c1]),
                    spatial_theta: glorot(&mut rng, &[c1, cs], c1, cs),
                    spatial_bias: zeros_param(&[cs]),
                    temporal2_kernel: glorot(&mut rng, &[kt, cs, 2 * c2], kt * cs, kt * 2 * c2),
                    temporal2_bias: zeros_param(&[2 * c2]),
                }
            })
            .collect();
        let m_rem = config.remaining_steps() as usize;
        let output = OutputParams {
            kernel: glorot(&mut rng, &[m_rem, c2, 2 * c2], m_rem * c2, m_rem * 2 * c2),
            bias: zeros_param(&[2 * c2]),
            fc_weight: glorot(&mut rng, &[c2, config.horizon_steps], c2, config.horizon_steps),
            fc_bias: zeros_param(&[config.horizon_steps]),
        };
        Ok(ModelParams { blocks, output })
    }

    pub fn params(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([
                &b.temporal1_kernel,
                &b.temporal1_bias,
                &b.spatial_theta,
                &b.spatial_bias,
                &b.temporal2_kernel,
                &b.temporal2_bias,
            ]);
        }
        out.extend([
            &self.output.kernel,
            &self.output.bias,
            &self.output.fc_weight,
            &self.output.fc_bias,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.temporal1_kernel);
            out.push(&mut b.temporal1_bias);
            out.push(&mut b.spatial_theta);
            out.push(&mut b.spatial_bias);
            out.push(&mut b.temporal2_kernel);
            out.push(&mut b.temporal2_bias);
        }
        out.push(&mut self.output.kernel);
        out.push(&mut self.output.bias);
        out.push(&mut self.output.fc_weight);
        out.push(&mut self.output.fc_bias);
        out
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|p| p.numel()).collect()
    }

    pub fn count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Flatten into the canonical payload order, always as f64.
    pub fn to_flat_f64(&self) -> Vec<f64> {
        self.params()
            .iter()
            .flat_map(|p| p.data().iter().map(|v| v.into_f64()))
            .collect()
    }

    /// Rebuild parameters from a flat payload in canonical order.
    pub fn from_flat_f64(config: &STGCNConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != config.param_count() {
            return Err(Error::Artifact(format!(
                "parameter payload holds {} values, config wants {}",
                flat.len(),
                config.param_count()
            )));
        }
        let mut template = ModelParams::<F>::init(config, 0)?;
        let mut offset = 0;
        for p in template.params_mut() {
            let n = p.numel();
            for (dst, &src) in p.data_mut().iter_mut().zip(&flat[offset..offset + n]) {
                *dst = F::from_f64(src);
            }
            p.zero_grad();
            offset += n;
        }
        Ok(template)
    }
}

/// One training or evaluation batch: inputs `[B, M, N, c_in]`, targets
/// `[B, H, N]`, and the model's prediction once it exists. Values are in
/// normalized units inside the model.
#[derive(Clone, Debug)]
pub struct ForecastBatch<F: Scalar> {
    pub x: Tensor<F>,
    pub y: Tensor<F>,
    pub y_hat: Option<Tensor<F>>,
    /// First target-bin timestamp per sample.
    pub target_timestamps: Vec<i64>,
}

/// Tape handles for one block's parameters.
pub struct BlockBinding {
    pub temporal1_kernel: TensorId,
    pub temporal1_bias: TensorId,
    pub spatial_theta: TensorId,
    pub spatial_bias: TensorId,
    pub temporal2_kernel: TensorId,
    pub temporal2_bias: TensorId,
}

/// Tape handles for every model parameter plus the propagation operator.
pub struct ModelBinding {
    pub blocks: Vec<BlockBinding>,
    pub out_kernel: TensorId,
    pub out_bias: TensorId,
    pub fc_weight: TensorId,
    pub fc_bias: TensorId,
    pub propagation: TensorId,
}

/// Register all parameters and the graph operator on a fresh tape.
pub fn bind_model<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    propagation: &PropagationOperator,
) -> ModelBinding {
    let blocks = params
        .blocks
        .iter()
        .map(|b| BlockBinding {
            temporal1_kernel: tape.leaf(&b.temporal1_kernel),
            temporal1_bias: tape.leaf(&b.temporal1_bias),
            spatial_theta: tape.leaf(&b.spatial_theta),
            spatial_bias: tape.leaf(&b.spatial_bias),
            temporal2_kernel: tape.leaf(&b.temporal2_kernel),
            temporal2_bias: tape.leaf(&b.temporal2_bias),
        })
        .collect();
    let n = propagation.n();
    let p_data: Vec<F> = propagation.values().iter().map(|&v| F::from_f64(v)).collect();
    let p_tensor = Tensor::new(&[n, n], p_data).expect("operator is square");
    ModelBinding {
        blocks,
        out_kernel: tape.leaf(&params.output.kernel),
        out_bias: tape.leaf(&params.output.bias),
        fc_weight: tape.leaf(&params.output.fc_weight),
        fc_bias: tape.leaf(&params.output.fc_bias),
        propagation: tape.constant(&p_tensor),
    }
}

/// After backward, add each tape gradient into its parameter tensor.
pub fn harvest_grads<F: Scalar>(
    tape: &Tape<F>,
    binding: &ModelBinding,
    params: &mut ModelParams<F>,
) {
    let ids: Vec<TensorId> = binding
        .blocks
        .iter()
        .flat_map(|b| {
            [
                b.temporal1_kernel,
                b.temporal1_bias,
                b.spatial_theta,
                b.spatial_bias,
                b.temporal2_kernel,
                b.temporal2_bias,
            ]
        })
        .chain([
            binding.out_kernel,
            binding.out_bias,
            binding.fc_weight,
            binding.fc_bias,
        ])
        .collect();
    for (id, param) in ids.into_iter().zip(params.params_mut()) {
        if let Some(g) = tape.grad(id) {
            param.accumulate_grad(g);
        }
    }
}

fn layer_context(layer: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Shape(msg) => Error::Shape(format!("{layer}: {msg}")),
        other => other,
    }
}

/// Gated temporal convolution: valid 1-D convolution along time producing
/// 2C channels, gated by a GLU back down to C.
pub fn temporal_gated_conv<F: Scalar>(
    tape: &mut Tape<F>,
    x: TensorId,
    kernel: TensorId,
    bias: TensorId,
) -> Result<TensorId> {
    let conv = tape.conv1d_time(x, kernel, bias)?;
    tape.glu(conv)
}

/// Spatial graph convolution: `relu(p . x . theta + bias)` at every
/// (batch, time) slice, mixing traffic across neighboring stations.
pub fn spatial_graph_conv<F: Scalar>(
    tape: &mut Tape<F>,
    x: TensorId,
    propagation: TensorId,
    theta: TensorId,
    bias: TensorId,
) -> Result<TensorId> {
    let mixed_channels = tape.matmul(x, theta)?;
    let spread = tape.node_mix(propagation, mixed_channels)?;
    let shifted = tape.add(spread, bias)?;
    Ok(tape.relu(shifted))
}

/// Temporal convolution, spatial convolution, temporal convolution. Output
/// time length shrinks to `T - 2 (Kt - 1)`.
pub fn st_conv_block<F: Scalar>(
    tape: &mut Tape<F>,
    x: TensorId,
    propagation: TensorId,
    block: &BlockBinding,
    block_index: usize,
) -> Result<TensorId> {
    let t1 = temporal_gated_conv(tape, x, block.temporal1_kernel, block.temporal1_bias)
        .map_err(layer_context(&format!("block {block_index} first temporal conv")))?;
    let sp = spatial_graph_conv(tape, t1, propagation, block.spatial_theta, block.spatial_bias)
        .map_err(layer_context(&format!("block {block_index} spatial conv")))?;
    temporal_gated_conv(tape, sp, block.temporal2_kernel, block.temporal2_bias)
        .map_err(layer_context(&format!("block {block_index} second temporal conv")))
}

/// Final gated temporal convolution spanning the whole remaining window
/// (collapsing time to one step), then a per-node linear map from channels
/// to the forecast horizon. No output nonlinearity: this is a regression
/// head, and negative predictions are clipped only at reporting time.
pub fn output_layer<F: Scalar>(
    tape: &mut Tape<F>,
    x: TensorId,
    binding: &ModelBinding,
) -> Result<TensorId> {
    let collapsed = temporal_gated_conv(tape, x, binding.out_kernel, binding.out_bias)
        .map_err(layer_context("output temporal conv"))?;
    let shape = tape.shape(collapsed).to_vec(); // [B, 1, N, c]
    if shape[1] != 1 {
        return Err(Error::Shape(format!(
            "output temporal conv: kernel must span the remaining window, left {} steps",
            shape[1]
        )));
    }
    let (b, n, c) = (shape[0], shape[2], shape[3]);
    let ctx = layer_context("output projection");
    let squeezed = tape.reshape(collapsed, &[b, n, c]).map_err(&ctx)?;
    let projected = tape.matmul(squeezed, binding.fc_weight).map_err(&ctx)?;
    let shifted = tape.add(projected, binding.fc_bias).map_err(&ctx)?;
    tape.permute(shifted, &[0, 2, 1]).map_err(&ctx) // [B, H, N]
}

/// Full model: `n_blocks` ST-Conv blocks then the output layer.
/// `x: [B, M, N, c_in]` to `[B, H, N]`, deterministic in normalized units.
pub fn forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: TensorId,
    binding: &ModelBinding,
    config: &STGCNConfig,
) -> Result<TensorId> {
    let sx = tape.shape(x);
    if sx.len() != 4
        || sx[1] != config.history_steps
        || sx[2] != config.n_nodes
        || sx[3] != config.input_channels
    {
        return Err(Error::Shape(format!(
            "model input: want [batch, {}, {}, {}], got {sx:?}",
            config.history_steps, config.n_nodes, config.input_channels
        )));
    }
    let mut h = x;
    for (i, block) in binding.blocks.iter().enumerate() {
        h = st_conv_block(tape, h, binding.propagation, block, i)?;
    }
    output_layer(tape, h, binding)
}

/// Convenience forward pass from plain tensors; returns the prediction.
pub fn predict<F: Scalar>(
    params: &ModelParams<F>,
    propagation: &PropagationOperator,
    config: &STGCNConfig,
    x: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let binding = bind_model(&mut tape, params, propagation);
    let xid = tape.constant(x);
    let y = forward(&mut tape, xid, &binding, config)?;
    Ok(tape.value_tensor(y))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::autodiff::{finite_difference_check, DEFAULT_FD_STEP};
    use crate::graph::PropagationOperator;

    use super::*;

    fn small_config() -> STGCNConfig {
        STGCNConfig {
            history_steps: 7,
            horizon_steps: 1,
            temporal_kernel: 2,
            input_channels: 1,
            temporal_channels_1: 4,
            spatial_channels: 3,
            temporal_channels_2: 4,
            n_blocks: 1,
            n_nodes: 4,
        }
    }

    fn identity_operator(n: usize) -> PropagationOperator {
        let mut p = vec![0.0; n * n];
        for i in 0..n {
            p[i * n + i] = 1.0;
        }
        PropagationOperator::from_parts(n, p).unwrap()
    }

    fn random_input(config: &STGCNConfig, batch: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [
            batch,
            config.history_steps,
            config.n_nodes,
            config.input_channels,
        ];
        let n: usize = shape.iter().product();
        Tensor::new(&shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn config_window_arithmetic_guard() {
        let mut cfg = small_config();
        assert!(cfg.validate().is_ok());
        cfg.history_steps = 2; // 2 - 2*(2-1) = 0 survives nothing
        assert!(cfg.validate().is_err());
        cfg.history_steps = 3;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.remaining_steps(), 1);
    }

    #[test]
    fn param_count_matches_hand_arithmetic() {
        // M=12, Kt=3, channels (1, 32, 16, 32), H=1:
        //   t1 kernel 3*1*64 = 192, bias 64
        //   theta 32*16 = 512, bias 16
        //   t2 kernel 3*16*64 = 3072, bias 64
        //   M_rem = 8; out kernel 8*32*64 = 16384, bias 64
        //   fc 32*1 = 32, bias 1
        let cfg = STGCNConfig::with_defaults(1475);
        let want = 192 + 64 + 512 + 16 + 3072 + 64 + 16384 + 64 + 32 + 1;
        assert_eq!(cfg.param_count(), want);
        assert_eq!(want, 20401);
        let params = ModelParams::<f64>::init(&cfg, 1).unwrap();
        assert_eq!(params.count(), want);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = small_config();
        let a = ModelParams::<f64>::init(&cfg, 42).unwrap();
        let b = ModelParams::<f64>::init(&cfg, 42).unwrap();
        let c = ModelParams::<f64>::init(&cfg, 43).unwrap();
        assert_eq!(a.to_flat_f64(), b.to_flat_f64());
        assert_ne!(a.to_flat_f64(), c.to_flat_f64());
    }

    #[test]
    fn init_weights_center_on_zero() {
        // Large kernel so the sample mean concentrates: uniform(-b, b) has
        // sd b/sqrt(3), the mean of n draws has sd b/sqrt(3n).
        let cfg = STGCNConfig {
            history_steps: 12,
            horizon_steps: 1,
            temporal_kernel: 3,
            input_channels: 16,
            temporal_channels_1: 32,
            spatial_channels: 16,
            temporal_channels_2: 32,
            n_blocks: 1,
            n_nodes: 4,
        };
        let params = ModelParams::<f64>::init(&cfg, 7).unwrap();
        let k = &params.blocks[0].temporal1_kernel;
        let n = k.numel() as f64;
        let bound = (6.0f64 / (3.0 * 16.0 + 3.0 * 64.0)).sqrt();
        let mean: f64 = k.data().iter().sum::<f64>() / n;
        let three_sigma = 3.0 * bound / (3.0 * n).sqrt();
        assert!(mean.abs() < three_sigma, "mean {mean}, 3 sigma {three_sigma}");
        // Biases start at zero.
        assert!(params.blocks[0].temporal1_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flat_roundtrip_preserves_parameters() {
        let cfg = small_config();
        let params = ModelParams::<f64>::init(&cfg, 9).unwrap();
        let flat = params.to_flat_f64();
        let back = ModelParams::<f64>::from_flat_f64(&cfg, &flat).unwrap();
        assert_eq!(back.to_flat_f64(), flat);
        assert!(ModelParams::<f64>::from_flat_f64(&cfg, &flat[1..]).is_err());
    }

    #[test]
    fn gated_conv_zero_gate_halves_plain_conv() {
        // Kernel whose gate half is zero and zero bias: GLU sees Q = 0 and
        // outputs half the plain convolution.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (kt, c_in, c_out) = (2, 2, 3);
        let mut gated = vec![0.0; kt * c_in * 2 * c_out];
        let mut plain = vec![0.0; kt * c_in * c_out];
        for tau in 0..kt {
            for i in 0..c_in {
                for o in 0..c_out {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    plain[(tau * c_in + i) * c_out + o] = v;
                    gated[(tau * c_in + i) * 2 * c_out + o] = v; // value half, gate half stays 0
                }
            }
        }
        let x = Tensor::new(
            &[1, 4, 2, c_in],
            (0..16).map(|i| (i as f64 * 0.37).sin()).collect(),
        )
        .unwrap();

        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let gk = tape.constant(&Tensor::new(&[kt, c_in, 2 * c_out], gated).unwrap());
        let gb = tape.constant(&Tensor::zeros(&[2 * c_out]).unwrap());
        let gated_out = temporal_gated_conv(&mut tape, xid, gk, gb).unwrap();

        let pk = tape.constant(&Tensor::new(&[kt, c_in, c_out], plain).unwrap());
        let pb = tape.constant(&Tensor::zeros(&[c_out]).unwrap());
        let plain_out = tape.conv1d_time(xid, pk, pb).unwrap();

        let g = tape.value(gated_out);
        let p = tape.value(plain_out);
        assert_eq!(g.len(), p.len());
        for (gv, pv) in g.iter().zip(p) {
            assert!((gv - 0.5 * pv).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_conv_minimal_window_leaves_one_step() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(&[1, 3, 2, 1]).unwrap());
        let k = tape.constant(&Tensor::zeros(&[3, 1, 2]).unwrap());
        let b = tape.constant(&Tensor::zeros(&[2]).unwrap());
        let y = temporal_gated_conv(&mut tape, x, k, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 1]);
    }

    #[test]
    fn gated_conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::new(&[2, 5, 3, 2], (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let kernel = Tensor::new(&[2, 2, 6], (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
            .with_grad();
        let bias = Tensor::new(&[6], (0..6).map(|_| rng.gen_range(-0.5..0.5)).collect())
            .unwrap()
            .with_grad();
        let err = finite_difference_check(
            |tape, ids| {
                let xid = tape.constant(&x);
                let y = temporal_gated_conv(tape, xid, ids[0], ids[1])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum(sq))
            },
            &[kernel, bias],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "gated conv fd error {err}");
    }

    #[test]
    fn spatial_conv_identity_passthrough() {
        // p = I, theta = I, zero bias, non-negative input: relu is inert.
        let n = 3;
        let x = Tensor::new(&[1, 2, n, 2], (0..12).map(|i| i as f64 * 0.25).collect()).unwrap();
        let mut tape = Tape::new();
        let xid = tape.constant(&x);
        let p = tape.constant(&Tensor::new(&[n, n], {
            let mut v = vec![0.0; n * n];
            for i in 0..n {
                v[i * n + i] = 1.0;
            }
            v
        }).unwrap());
        let theta = tape.constant(&Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let bias = tape.constant(&Tensor::zeros(&[2]).unwrap());
        let y = spatial_graph_conv(&mut tape, xid, p, theta, bias).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn spatial_conv_spreads_between_nodes() {
        // Averaging operator over signals [2, 4] makes both nodes 3.
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 1, 2, 1], vec![2.0, 4.0]).unwrap());
        let p = tape.constant(&Tensor::new(&[2, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap());
        let theta = tape.constant(&Tensor::new(&[1, 1], vec![1.0]).unwrap());
        let bias = tape.constant(&Tensor::zeros(&[1]).unwrap());
        let y = spatial_graph_conv(&mut tape, x, p, theta, bias).unwrap();
        assert_eq!(tape.value(y), &[3.0, 3.0]);
    }

    #[test]
    fn spatial_conv_node_count_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&Tensor::zeros(&[1, 1, 3, 1]).unwrap());
        let p = tape.constant(&Tensor::zeros(&[2, 2]).unwrap());
        let theta = tape.constant(&Tensor::zeros(&[1, 1]).unwrap());
        let bias = tape.constant(&Tensor::zeros(&[1]).unwrap());
        assert!(spatial_graph_conv(&mut tape, x, p, theta, bias).is_err());
    }

    #[test]
    fn st_conv_block_time_arithmetic() {
        // M = 12, Kt = 3 leaves 8 time steps; M = 2 Kt - 1 leaves one.
        for (m, kt, want) in [(12usize, 3usize, 8usize), (3, 2, 1), (5, 3, 1), (7, 2, 5)] {
            let cfg = STGCNConfig {
                history_steps: m,
                horizon_steps: 1,
                temporal_kernel: kt,
                input_channels: 1,
                temporal_channels_1: 2,
                spatial_channels: 2,
                temporal_channels_2: 2,
                n_blocks: 1,
                n_nodes: 3,
            };
            let params = ModelParams::<f64>::init(&cfg, 3).unwrap();
            let op = identity_operator(cfg.n_nodes);
            let mut tape = Tape::new();
            let binding = bind_model(&mut tape, &params, &op);
            let x = tape.constant(&random_input(&cfg, 1, 8));
            let y = st_conv_block(&mut tape, x, binding.propagation, &binding.blocks[0], 0)
                .unwrap();
            assert_eq!(tape.shape(y)[1], want, "M={m} Kt={kt}");
        }
    }

    #[test]
    fn output_layer_shape_and_zero_params() {
        let cfg = small_config();
        let mut params = ModelParams::<f64>::init(&cfg, 10).unwrap();
        let op = identity_operator(cfg.n_nodes);
        // Zeroing every parameter forces a zero prediction whatever the input.
        for p in params.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = random_input(&cfg, 2, 11);
        let pred = predict(&params, &op, &cfg, &x).unwrap();
        assert_eq!(pred.shape(), &[2, cfg.horizon_steps, cfg.n_nodes]);
        assert!(pred.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_output_shape_for_valid_configs() {
        for (m, kt, blocks, h) in [(7usize, 2usize, 1usize, 1usize), (12, 3, 1, 2), (9, 2, 2, 3)] {
            let cfg = STGCNConfig {
                history_steps: m,
                horizon_steps: h,
                temporal_kernel: kt,
                input_channels: 1,
                temporal_channels_1: 3,
                spatial_channels: 2,
                temporal_channels_2: 3,
                n_blocks: blocks,
                n_nodes: 4,
            };
            cfg.validate().unwrap();
            let params = ModelParams::<f64>::init(&cfg, 2).unwrap();
            let op = identity_operator(cfg.n_nodes);
            let x = random_input(&cfg, 2, 13);
            let pred = predict(&params, &op, &cfg, &x).unwrap();
            assert_eq!(pred.shape(), &[2, h, 4]);
        }
    }

    #[test]
    fn duplicate_stations_predict_identically() {
        // Two nodes with identical histories and a symmetric operator must
        // receive identical forecasts.
        let cfg = STGCNConfig {
            n_nodes: 2,
            ..small_config()
        };
        let params = ModelParams::<f64>::init(&cfg, 21).unwrap();
        let op = PropagationOperator::from_parts(2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let mut data = Vec::new();
        for t in 0..cfg.history_steps {
            let v = (t as f64 * 0.7).cos();
            data.extend([v, v]); // same signal on both nodes
        }
        let x = Tensor::new(&[1, cfg.history_steps, 2, 1], data).unwrap();
        let pred = predict(&params, &op, &cfg, &x).unwrap();
        assert!((pred.data()[0] - pred.data()[1]).abs() < 1e-12);
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        // The desk-scale fixture: B=1, N=4, M=7, Kt=2, channels 1/4/3/4.
        let cfg = small_config();
        let params = ModelParams::<f64>::init(&cfg, 31).unwrap();
        let op = {
            // A mildly structured symmetric operator.
            let w = crate::graph::gaussian_adjacency(
                &crate::graph::DistanceMatrix::from_parts(
                    4,
                    vec![
                        0.0, 1.0, 2.0, 3.0, //
                        1.0, 0.0, 1.0, 2.0, //
                        2.0, 1.0, 0.0, 1.0, //
                        3.0, 2.0, 1.0, 0.0,
                    ],
                )
                .unwrap(),
                4.0,
                0.01,
            )
            .unwrap();
            crate::graph::normalize(&w)
        };
        let x = random_input(&cfg, 1, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let target = Tensor::new(
            &[1, cfg.horizon_steps, cfg.n_nodes],
            (0..cfg.horizon_steps * cfg.n_nodes)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap();

        let tensors: Vec<Tensor<f64>> = params.params().into_iter().cloned().collect();
        let err = finite_difference_check(
            |tape, ids| {
                let rebuilt = rebind(tape, ids, &cfg, &op);
                let xid = tape.constant(&x);
                let pred = forward(tape, xid, &rebuilt, &cfg)?;
                let tid = tape.constant(&target);
                tape.mse_loss(pred, tid)
            },
            &tensors,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "full model fd error {err}");
    }

    /// Build a ModelBinding from externally provided leaf ids (the order of
    /// `ModelParams::params`).
    fn rebind<F: Scalar>(
        tape: &mut Tape<F>,
        ids: &[TensorId],
        cfg: &STGCNConfig,
        op: &PropagationOperator,
    ) -> ModelBinding {
        let mut blocks = Vec::new();
        let mut i = 0;
        for _ in 0..cfg.n_blocks {
            blocks.push(BlockBinding {
                temporal1_kernel: ids[i],
                temporal1_bias: ids[i + 1],
                spatial_theta: ids[i + 2],
                spatial_bias: ids[i + 3],
                temporal2_kernel: ids[i + 4],
                temporal2_bias: ids[i + 5],
            });
            i += 6;
        }
        let n = op.n();
        let p_data: Vec<F> = op.values().iter().map(|&v| F::from_f64(v)).collect();
        let p_tensor = Tensor::new(&[n, n], p_data).unwrap();
        ModelBinding {
            blocks,
            out_kernel: ids[i],
            out_bias: ids[i + 1],
            fc_weight: ids[i + 2],
            fc_bias: ids[i + 3],
            propagation: tape.constant(&p_tensor),
        }
    }

    #[test]
    fn node_permutation_equivariance() {
        let cfg = STGCNConfig {
            n_nodes: 5,
            ..small_config()
        };
        let params = ModelParams::<f64>::init(&cfg, 41).unwrap();
        let n = cfg.n_nodes;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        // Random symmetric normalized-ish operator.
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.gen_bool(0.6) {
                    let v: f64 = rng.gen_range(0.1..1.0);
                    w[i * n + j] = v;
                    w[j * n + i] = v;
                }
            }
        }
        let adj = crate::graph::gaussian_adjacency(
            &crate::graph::DistanceMatrix::from_parts(n, {
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            d[i * n + j] = 1.0 + w[i * n + j];
                        }
                    }
                }
                d
            })
            .unwrap(),
            2.0,
            0.0,
        )
        .unwrap();
        let op = crate::graph::normalize(&adj);
        let x = random_input(&cfg, 2, 43);
        let base = predict(&params, &op, &cfg, &x).unwrap();

        let perm: Vec<usize> = vec![3, 0, 4, 1, 2];
        // Permute x's node axis and the operator on both axes.
        let (bsz, m) = (2, cfg.history_steps);
        let mut xp = vec![0.0; x.numel()];
        for b in 0..bsz {
            for t in 0..m {
                for i in 0..n {
                    xp[(b * m + t) * n + perm[i]] = x.data()[(b * m + t) * n + i];
                }
            }
        }
        let mut pv = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                pv[perm[i] * n + perm[j]] = op.get(i, j);
            }
        }
        let op_p = PropagationOperator::from_parts(n, pv).unwrap();
        let xp_t = Tensor::new(&[bsz, m, n, 1], xp).unwrap();
        let permuted = predict(&params, &op_p, &cfg, &xp_t).unwrap();

        for b in 0..bsz {
            for i in 0..n {
                let a = base.data()[b * n + i];
                let bb = permuted.data()[b * n + perm[i]];
                assert!((a - bb).abs() < 1e-9, "node {i}: {a} vs {bb}");
            }
        }
    }

    #[test]
    fn batch_evaluation_matches_per_item() {
        let cfg = small_config();
        let params = ModelParams::<f64>::init(&cfg, 51).unwrap();
        let op = identity_operator(cfg.n_nodes);
        let batch = random_input(&cfg, 3, 52);
        let all = predict(&params, &op, &cfg, &batch).unwrap();
        let per_item = cfg.history_steps * cfg.n_nodes * cfg.input_channels;
        let out_per_item = cfg.horizon_steps * cfg.n_nodes;
        for b in 0..3 {
            let x1 = Tensor::new(
                &[1, cfg.history_steps, cfg.n_nodes, cfg.input_channels],
                batch.data()[b * per_item..(b + 1) * per_item].to_vec(),
            )
            .unwrap();
            let single = predict(&params, &op, &cfg, &x1).unwrap();
            for (i, &v) in single.data().iter().enumerate() {
                let full = all.data()[b * out_per_item + i];
                assert!((full - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_names_offending_layer_on_shape_error() {
        let cfg = small_config();
        let mut params = ModelParams::<f64>::init(&cfg, 61).unwrap();
        // Corrupt the spatial theta to a wrong inner dimension.
        params.blocks[0].spatial_theta = Tensor::<f64>::zeros(&[5, 3]).unwrap().with_grad();
        let op = identity_operator(cfg.n_nodes);
        let x = random_input(&cfg, 1, 62);
        let err = predict(&params, &op, &cfg, &x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("block 0 spatial conv"), "{msg}");
    }
}
