//! Two-level convolutional encoder-decoder predicting clean residuals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::tape::{NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::error::{CoreError, Result};
use crate::field::ResidualField;
use crate::schedule::NoiseSchedule;

pub const IN_CHANNELS: usize = 6;
pub const OUT_CHANNELS: usize = 3;
pub const GROUPS: usize = 8;
/// Spatial sizes must be multiples of this (two stride-2 stages).
pub const SIZE_MULTIPLE: usize = 4;
/// Name of the frozen sinusoid frequency buffer.
pub const FREQ_BUFFER: &str = "time.freqs";
/// Typical standard deviation of a clean residual on the bundled corpus.
pub const RESIDUAL_STD: f64 = 0.05;

/// Factor applied to `r_t` before it enters the network, so the latent
/// channels have roughly unit variance at every timestep. The network still
/// predicts `r0` itself.
pub fn latent_scale(schedule: &NoiseSchedule, t: usize) -> f64 {
    let var = schedule.alpha_bar(t) * RESIDUAL_STD * RESIDUAL_STD + schedule.one_minus_alpha_bar(t);
    1.0 / var.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Channels at full resolution; doubled at the lower levels.
    pub width: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    freqs: ParamId,
    time1: Dense,
    time2: Dense,
    conv_in: Conv,
    rb1: ResBlock,
    down1: Conv,
    rb2: ResBlock,
    down2: Conv,
    mid: ResBlock,
    up2: Conv,
    rb_up2: ResBlock,
    up1: Conv,
    rb_up1: ResBlock,
    norm_out: Norm,
    conv_out: Conv,
}

/// The conditional residual predictor `g(r_t, x_tilde, t)`.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut ChaCha8Rng,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, shape: Vec<usize>, std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        self.store.add(name, Tensor::new(shape, data), true)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.store.add(name, Tensor::new(shape, vec![value; n]), true)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, zero: bool) -> Conv {
        let fan_in = cin * k * k;
        let shape = vec![cout, cin, k, k];
        let w = if zero {
            self.constant(format!("{name}.w"), shape, 0.0)
        } else {
            self.normal(format!("{name}.w"), shape, (1.0 / fan_in as f64).sqrt())
        };
        let b = self.constant(format!("{name}.b"), vec![cout], 0.0);
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.constant(format!("{name}.gamma"), vec![c], 1.0),
            beta: self.constant(format!("{name}.beta"), vec![c], 0.0),
        }
    }

    fn dense(&mut self, name: &str, fin: usize, fout: usize) -> Dense {
        Dense {
            w: self.normal(format!("{name}.w"), vec![fout, fin], (1.0 / fin as f64).sqrt()),
            b: self.constant(format!("{name}.b"), vec![fout], 0.0),
        }
    }

    fn resblock(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1, false),
            emb: self.dense(&format!("{name}.emb"), emb, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1, false),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1, false)),
        }
    }
}

/// Sinusoid frequencies `10000^(-i / half)` for an embedding of size `dim`.
fn sinusoid_freqs(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect()
}

impl DenoiserModel {
    /// Fresh model: `N(0, 1/fan_in)` weights, zero biases, unit norm gains and
    /// a zero output convolution.
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.width == 0 || config.width % GROUPS != 0 {
            return Err(CoreError::Parameter(format!(
                "model width {} must be a positive multiple of {GROUPS}",
                config.width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.width;
        let emb = 4 * c;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let freqs = sinusoid_freqs(c);
        let freqs = b.store.add(FREQ_BUFFER, Tensor::new(vec![freqs.len()], freqs), false);
        let layout = Layout {
            freqs,
            time1: b.dense("time.fc1", c, emb),
            time2: b.dense("time.fc2", emb, emb),
            conv_in: b.conv("conv_in", IN_CHANNELS, c, 3, 1, false),
            rb1: b.resblock("down1.res", c, c, emb),
            down1: b.conv("down1.pool", c, 2 * c, 3, 2, false),
            rb2: b.resblock("down2.res", 2 * c, 2 * c, emb),
            down2: b.conv("down2.pool", 2 * c, 2 * c, 3, 2, false),
            mid: b.resblock("mid.res", 2 * c, 2 * c, emb),
            up2: b.conv("up2.conv", 2 * c, 2 * c, 3, 1, false),
            rb_up2: b.resblock("up2.res", 4 * c, 2 * c, emb),
            up1: b.conv("up1.conv", 2 * c, c, 3, 1, false),
            rb_up1: b.resblock("up1.res", 2 * c, c, emb),
            norm_out: b.norm("out.norm", c),
            conv_out: b.conv("out.conv", c, OUT_CHANNELS, 3, 1, true),
        };
        let params = b.store;
        Ok(Self { config, params, layout })
    }

    /// Rebuilds a model and replaces its parameters by `params`, which must
    /// match the fresh layout name for name and shape for shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config)?;
        let fresh = model.params.entries();
        if fresh.len() != params.entries().len() {
            return Err(CoreError::Checkpoint(format!(
                "expected {} arrays, found {}",
                fresh.len(),
                params.entries().len()
            )));
        }
        for (a, b) in fresh.iter().zip(params.entries()) {
            if a.name != b.name || a.tensor.shape != b.tensor.shape || a.trainable != b.trainable {
                return Err(CoreError::Checkpoint(format!(
                    "array '{}' {:?} does not match expected '{}' {:?}",
                    b.name, b.tensor.shape, a.name, a.tensor.shape
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Sinusoidal embedding rows `[sin(t f_i)..., cos(t f_i)...]` per timestep.
    fn time_features(&self, t: &[usize]) -> Tensor {
        let freqs = &self.params.get(self.layout.freqs).data;
        let dim = 2 * freqs.len();
        let mut data = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            data.extend(freqs.iter().map(|f| (ti as f64 * f).sin()));
            data.extend(freqs.iter().map(|f| (ti as f64 * f).cos()));
        }
        Tensor::new(vec![t.len(), dim], data)
    }

    /// Records the forward pass on `tape`. `input` is `[N, 6, H, W]`, the
    /// channelwise concatenation of `r_t` and `x_tilde`.
    pub fn forward(&self, tape: &mut Tape, input: Tensor, t: &[usize]) -> Result<NodeId> {
        let s = &input.shape;
        if s.len() != 4 || s[1] != IN_CHANNELS || s[0] != t.len() {
            return Err(CoreError::ShapeMismatch {
                expected: vec![t.len(), IN_CHANNELS, 0, 0],
                found: s.clone(),
            });
        }
        if s[2] == 0 || s[3] == 0 || s[2] % SIZE_MULTIPLE != 0 || s[3] % SIZE_MULTIPLE != 0 {
            return Err(CoreError::Parameter(format!(
                "spatial size {}x{} must be a positive multiple of {SIZE_MULTIPLE}",
                s[3], s[2]
            )));
        }
        let l = &self.layout;
        let x = tape.input(input);
        let tf = tape.input(self.time_features(t));
        let e = dense(tape, l.time1, tf);
        let e = tape.silu(e);
        let emb = dense(tape, l.time2, e);
        let emb_act = tape.silu(emb);

        let h0 = conv(tape, l.conv_in, x);
        let s1 = resblock(tape, &l.rb1, h0, emb_act);
        let d1 = conv(tape, l.down1, s1);
        let s2 = resblock(tape, &l.rb2, d1, emb_act);
        let d2 = conv(tape, l.down2, s2);
        let m = resblock(tape, &l.mid, d2, emb_act);
        let u = tape.upsample2x(m);
        let u = conv(tape, l.up2, u);
        let u = tape.concat(u, s2);
        let u = resblock(tape, &l.rb_up2, u, emb_act);
        let u = tape.upsample2x(u);
        let u = conv(tape, l.up1, u);
        let u = tape.concat(u, s1);
        let u = resblock(tape, &l.rb_up1, u, emb_act);
        let u = norm(tape, l.norm_out, u);
        let u = tape.silu(u);
        Ok(conv(tape, l.conv_out, u))
    }

    /// Predicts `r0'` for a single latent and conditioning image.
    pub fn predict(
        &self,
        schedule: &NoiseSchedule,
        r_t: &ResidualField,
        x_tilde: &ResidualField,
        t: usize,
    ) -> Result<ResidualField> {
        r_t.check_same_shape(x_tilde)?;
        let [c, h, w] = r_t.shape();
        if c != OUT_CHANNELS {
            return Err(CoreError::ShapeMismatch {
                expected: vec![OUT_CHANNELS, h, w],
                found: vec![c, h, w],
            });
        }
        let scale = latent_scale(schedule, t);
        let mut data = Vec::with_capacity(2 * r_t.len());
        data.extend(r_t.data().iter().map(|v| v * scale));
        data.extend_from_slice(x_tilde.data());
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, Tensor::new(vec![1, IN_CHANNELS, h, w], data), &[t])?;
        ResidualField::new([c, h, w], tape.value(out).to_vec())
    }
}

fn conv(tape: &mut Tape, c: Conv, x: NodeId) -> NodeId {
    let (w, b) = (tape.param(c.w), tape.param(c.b));
    tape.conv2d(x, w, b, c.stride, c.pad)
}

fn norm(tape: &mut Tape, n: Norm, x: NodeId) -> NodeId {
    let (g, b) = (tape.param(n.gamma), tape.param(n.beta));
    tape.group_norm(x, g, b, GROUPS)
}

fn dense(tape: &mut Tape, d: Dense, x: NodeId) -> NodeId {
    let (w, b) = (tape.param(d.w), tape.param(d.b));
    tape.linear(x, w, b)
}

fn resblock(tape: &mut Tape, rb: &ResBlock, x: NodeId, emb_act: NodeId) -> NodeId {
    let h = norm(tape, rb.norm1, x);
    let h = tape.silu(h);
    let h = conv(tape, rb.conv1, h);
    let e = dense(tape, rb.emb, emb_act);
    let h = tape.add_channel(h, e);
    let h = norm(tape, rb.norm2, h);
    let h = tape.silu(h);
    let h = conv(tape, rb.conv2, h);
    let skip = match rb.skip {
        Some(c) => conv(tape, c, x),
        None => x,
    };
    tape.add(h, skip)
}
