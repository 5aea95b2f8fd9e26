//! The two-block encoder-decoder generator.
//!
//! Block 1 maps the coarse input `P_r` (`n` points) to an intermediate cloud
//! `P_m` (`m` points); block 2 maps `P_m` to the final output `P_o`. Both
//! blocks have the same architecture but separate weights.
//!
//! Encoder: shared MLP `3 -> h1 -> h2` (batchnorm + ReLU in between), max-pool
//! over points, concatenate the pooled feature back onto every point, shared
//! MLP `2*h2 -> h3 -> h4`, max-pool again. Decoder: `h4 -> d1 -> d2 -> 3m`
//! fully connected with ReLU after the first two layers, reshaped to `m x 3`.

mod checkpoint;
mod loss;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pointcloud::{PointCloud, Source};
use crate::tensor::{BatchNormMode, BatchStats, Graph, RunningStats, Tensor, Var};

pub use checkpoint::{load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use loss::{attach_loss, loss, metric_value, metric_with_grad, LossBreakdown, LossSpec, Metric, MetricOptions};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Architecture hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n: usize,
    pub m: usize,
    pub h1: usize,
    pub h2: usize,
    pub h3: usize,
    pub h4: usize,
    pub d1: usize,
    pub d2: usize,
    /// When false every batchnorm layer is replaced by the identity.
    pub batchnorm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n: 256,
            m: 1024,
            h1: 128,
            h2: 256,
            h3: 512,
            h4: 1024,
            d1: 1024,
            d2: 1024,
            batchnorm: true,
        }
    }
}

impl ModelConfig {
    /// Input and output sizes used in the original full-scale experiments.
    pub fn full_scale() -> Self {
        Self {
            n: 1024,
            m: 4096,
            ..Self::default()
        }
    }

    /// Small widths for tests and quick experiments.
    pub fn tiny(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            h1: 8,
            h2: 16,
            h3: 16,
            h4: 32,
            d1: 32,
            d2: 32,
            batchnorm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.n, self.m, self.h1, self.h2, self.h3, self.h4, self.d1, self.d2];
        if dims.contains(&0) {
            return Err(Error::usage(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Whether batchnorm uses batch statistics or the stored running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub w: Tensor,
    /// `[out]`
    pub b: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        let b = (0..fan_out).map(|_| dist.sample(rng)).collect();
        Self {
            w: Tensor::from_parts(vec![fan_in, fan_out], w).with_grad(),
            b: Tensor::from_parts(vec![fan_out], b).with_grad(),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.w.shape()[0], self.w.shape()[1])
    }

    fn apply(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let w = pass.param(&self.w);
        let b = pass.param(&self.b);
        pass.graph.linear(x, w, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

impl BatchNorm {
    fn new(d: usize) -> Self {
        Self {
            gamma: Tensor::full(&[d], 1.0).with_grad(),
            beta: Tensor::zeros(&[d]).with_grad(),
            running: RunningStats::identity(d),
        }
    }

    fn apply(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let g = pass.param(&self.gamma);
        let b = pass.param(&self.beta);
        let mode = match pass.mode {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval(&self.running),
        };
        let (y, stats) = pass.graph.batchnorm(x, g, b, mode, BN_EPS)?;
        if let Some(s) = stats {
            pass.stats.push(s);
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub mlp1_a: Linear,
    pub bn1: Option<BatchNorm>,
    pub mlp1_b: Linear,
    pub mlp2_a: Linear,
    pub bn2: Option<BatchNorm>,
    pub mlp2_b: Linear,
}

impl EncoderParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let bn = |d| cfg.batchnorm.then(|| BatchNorm::new(d));
        Self {
            mlp1_a: Linear::init(3, cfg.h1, rng),
            bn1: bn(cfg.h1),
            mlp1_b: Linear::init(cfg.h1, cfg.h2, rng),
            mlp2_a: Linear::init(2 * cfg.h2, cfg.h3, rng),
            bn2: bn(cfg.h3),
            mlp2_b: Linear::init(cfg.h3, cfg.h4, rng),
        }
    }

    /// `[B,N,3]` points to the `[B,h4]` global feature.
    pub fn encode(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let f = self.mlp1_a.apply(pass, x)?;
        let f = match &self.bn1 {
            Some(bn) => bn.apply(pass, f)?,
            None => f,
        };
        let f = pass.graph.relu(f)?;
        let f = self.mlp1_b.apply(pass, f)?;
        let (g, _) = pass.graph.max_pool_points(f)?;
        let fc = pass.graph.concat_global(f, g)?;
        let h = self.mlp2_a.apply(pass, fc)?;
        let h = match &self.bn2 {
            Some(bn) => bn.apply(pass, h)?,
            None => h,
        };
        let h = pass.graph.relu(h)?;
        let fp = self.mlp2_b.apply(pass, h)?;
        let (gf, _) = pass.graph.max_pool_points(fp)?;
        Ok(gf)
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.mlp1_a.w, &self.mlp1_a.b];
        if let Some(bn) = &self.bn1 {
            v.extend([&bn.gamma, &bn.beta]);
        }
        v.extend([&self.mlp1_b.w, &self.mlp1_b.b, &self.mlp2_a.w, &self.mlp2_a.b]);
        if let Some(bn) = &self.bn2 {
            v.extend([&bn.gamma, &bn.beta]);
        }
        v.extend([&self.mlp2_b.w, &self.mlp2_b.b]);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.mlp1_a.w, &mut self.mlp1_a.b];
        if let Some(bn) = &mut self.bn1 {
            v.extend([&mut bn.gamma, &mut bn.beta]);
        }
        v.extend([
            &mut self.mlp1_b.w,
            &mut self.mlp1_b.b,
            &mut self.mlp2_a.w,
            &mut self.mlp2_a.b,
        ]);
        if let Some(bn) = &mut self.bn2 {
            v.extend([&mut bn.gamma, &mut bn.beta]);
        }
        v.extend([&mut self.mlp2_b.w, &mut self.mlp2_b.b]);
        v
    }

    fn batchnorms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.bn1.iter_mut().chain(self.bn2.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
}

impl DecoderParams {
    fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fc1: Linear::init(cfg.h4, cfg.d1, rng),
            fc2: Linear::init(cfg.d1, cfg.d2, rng),
            fc3: Linear::init(cfg.d2, 3 * cfg.m, rng),
        }
    }

    /// Number of output points.
    pub fn m(&self) -> usize {
        self.fc3.dims().1 / 3
    }

    /// `[B,h4]` global feature to a `[B,m,3]` cloud.
    pub fn decode(&self, pass: &mut Pass, g: Var) -> Result<Var> {
        let batch = pass.graph.value(g).shape()[0];
        let h = self.fc1.apply(pass, g)?;
        let h = pass.graph.relu(h)?;
        let h = self.fc2.apply(pass, h)?;
        let h = pass.graph.relu(h)?;
        let out = self.fc3.apply(pass, h)?;
        pass.graph.reshape(out, &[batch, self.m(), 3])
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.fc1.w, &self.fc1.b, &self.fc2.w, &self.fc2.b, &self.fc3.w, &self.fc3.b]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.fc1.w,
            &mut self.fc1.b,
            &mut self.fc2.w,
            &mut self.fc2.b,
            &mut self.fc3.w,
            &mut self.fc3.b,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl Block {
    fn run(&self, pass: &mut Pass, x: Var) -> Result<Var> {
        let g = self.encoder.encode(pass, x)?;
        self.decoder.decode(pass, g)
    }
}

/// One forward evaluation recorded on a fresh graph.
///
/// Parameters are registered as graph leaves in declaration order the first
/// time a layer uses them, which for this network is also the order of
/// [`R2PModel::params`].
pub struct Pass {
    pub graph: Graph,
    pub mode: Mode,
    params: Vec<Var>,
    stats: Vec<BatchStats>,
}

impl Pass {
    pub fn new(mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            mode,
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    fn param(&mut self, t: &Tensor) -> Var {
        let v = self.graph.leaf(t);
        self.params.push(v);
        v
    }

    /// Parameter leaves in registration order.
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    /// Batch statistics measured by each batchnorm layer (train mode only).
    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.stats
    }
}

/// Result of [`R2PModel::forward_pass`].
pub struct Forward {
    pub pass: Pass,
    pub p_m: Var,
    pub p_o: Var,
}

impl Forward {
    pub fn p_m(&self) -> &Tensor {
        self.pass.graph.value(self.p_m)
    }

    pub fn p_o(&self) -> &Tensor {
        self.pass.graph.value(self.p_o)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct R2PModel {
    pub config: ModelConfig,
    pub block1: Block,
    pub block2: Block,
    /// Loss the weights were trained with, recorded in checkpoints.
    pub loss_spec: LossSpec,
}

impl R2PModel {
    /// Fresh model with fan-in scaled uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut block = || Block {
            encoder: EncoderParams::init(&config, &mut rng),
            decoder: DecoderParams::init(&config, &mut rng),
        };
        let block1 = block();
        let block2 = block();
        Ok(Self {
            config,
            block1,
            block2,
            loss_spec: LossSpec::default(),
        })
    }

    /// Records `P_r -> P_m -> P_o` on a new graph.
    pub fn forward_pass(&self, input: &Tensor, mode: Mode) -> Result<Forward> {
        let s = input.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::dim("forward input", s, &[0, self.config.n, 3]));
        }
        if s[1] != self.config.n {
            return Err(Error::dim("forward input", s, &[s[0], self.config.n, 3]));
        }
        let mut pass = Pass::new(mode);
        let x = pass.graph.constant(input.clone());
        let p_m = self.block1.run(&mut pass, x)?;
        let p_o = self.block2.run(&mut pass, p_m)?;
        Ok(Forward { pass, p_m, p_o })
    }

    /// Eval-mode forward returning `(P_m, P_o)`, each `[B,m,3]`.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.forward_pass(input, Mode::Eval)?;
        Ok((f.p_m().clone(), f.p_o().clone()))
    }

    /// Reconstructs a single cloud (eval mode), returning `P_o`.
    pub fn reconstruct(&self, input: &PointCloud) -> Result<PointCloud> {
        let (_, p_o) = self.forward(&input.to_tensor()?)?;
        let mut out = PointCloud::from_batch_tensor(&p_o, Source::Output)?;
        Ok(out.remove(0))
    }

    /// Trainable tensors in declaration order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.block1.encoder.params();
        v.extend(self.block1.decoder.params());
        v.extend(self.block2.encoder.params());
        v.extend(self.block2.decoder.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.block1.encoder.params_mut();
        v.extend(self.block1.decoder.params_mut());
        v.extend(self.block2.encoder.params_mut());
        v.extend(self.block2.decoder.params_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v: Vec<_> = self.block1.encoder.batchnorms_mut().collect();
        v.extend(self.block2.encoder.batchnorms_mut());
        v
    }

    /// Folds train-mode batch statistics (as returned by a [`Pass`]) into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let mut layers = self.batchnorms_mut();
        if layers.len() != stats.len() {
            return Err(Error::Consistency(format!(
                "{} batch statistics for {} batchnorm layers",
                stats.len(),
                layers.len()
            )));
        }
        for (bn, s) in layers.iter_mut().zip(stats) {
            bn.running.update(s, BN_MOMENTUM);
        }
        Ok(())
    }

    /// Checks the layer chain against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let expected = Self::new(*c, 0)?;
        let shapes = |m: &R2PModel| m.params().iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>();
        if shapes(self) != shapes(&expected) {
            return Err(Error::Checkpoint("parameter shapes do not match the architecture metadata".into()));
        }
        Ok(())
    }
}

/// Anything that maps a coarse input cloud to a reconstruction.
pub trait Reconstructor {
    /// Output cloud size.
    fn output_points(&self) -> usize;
    /// `[B,n,3]` inputs to `[B,m,3]` outputs.
    fn reconstruct_batch(&self, input: &Tensor) -> Result<Tensor>;
}

impl Reconstructor for R2PModel {
    fn output_points(&self) -> usize {
        self.config.m
    }

    fn reconstruct_batch(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input)?.1)
    }
}
