//! A small convolutional encoder-decoder with `K` evidential heads.
//!
//! Layer table for base width `w`, depth `D`, `N` classes, `K` heads
//! (`c_i = w * 2^i`, image channels `c_img = input_channels - 2`):
//!
//! | layer           | kernel | in -> out        | bias |
//! |-----------------|--------|------------------|------|
//! | `enc{i}`        | 3x3    | `c_{i-1}` -> `c_i` (`c_img` for i = 0) | yes |
//! | `bottleneck`    | 3x3    | `c_{D-1}` -> `c_{D-1}` | yes |
//! | `bottleneck.click` | 1x1 | 2 -> `c_{D-1}`  | no   |
//! | `dec{i}.proj`   | 1x1    | `c_{i+1}` -> `c_i` (`c_{D-1}` for i = D-1) | yes |
//! | `dec{i}.click`  | 1x1    | 2 -> `c_i`       | no   |
//! | `dec{i}.conv`   | 3x3    | `c_i` -> `c_i`   | yes  |
//! | `head{k}`       | 1x1    | `c_0` -> `N`     | yes  |
//!
//! Encoder level `i` is conv + ReLU (kept as skip `s_i`) then 2x2 max-pool.
//! The bottleneck sees `pool(s_{D-1})`. Decoder level `i` (from `D-1` down
//! to 0) projects, upsamples by nearest neighbour, adds `s_i` and the click
//! channels (max-pooled to that scale) through `dec{i}.click`, applies ReLU,
//! then conv + ReLU. Click channels enter only the decoder, so encoder
//! features can be computed once and reused while clicks change.
//!
//! With the defaults (8, 3, 2 classes, 3 heads) there are 29 238 parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DiffArray, Gradients, Tape};
use crate::error::{Error, Result};
use crate::evidential::{evidential_output, EvidenceActivation, EvidentialOutput};

/// Channels of click input (positive, negative).
pub const CLICK_CHANNELS: usize = 2;
/// Initial bias of the head convolutions, so every class starts with some evidence.
pub const HEAD_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegModelConfig {
    pub input_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub num_heads: usize,
    pub activation: EvidenceActivation,
    pub seed: u64,
}

impl Default for SegModelConfig {
    fn default() -> Self {
        SegModelConfig {
            input_channels: 3,
            base_width: 8,
            depth: 3,
            num_classes: 2,
            num_heads: 3,
            activation: EvidenceActivation::Relu,
            seed: 0,
        }
    }
}

impl SegModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_channels <= CLICK_CHANNELS {
            return bad("model.input_channels must exceed the 2 click channels");
        }
        if self.base_width == 0 {
            return bad("model.base_width must be >= 1");
        }
        if self.depth == 0 {
            return bad("model.depth must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("model.num_classes must be >= 2");
        }
        if self.num_heads == 0 {
            return bad("model.num_heads must be >= 1");
        }
        Ok(())
    }

    pub fn image_channels(&self) -> usize {
        self.input_channels - CLICK_CHANNELS
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn required_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = self.required_multiple();
        if height == 0 || width == 0 || !height.is_multiple_of(m) || !width.is_multiple_of(m) {
            return Err(Error::Divisibility { height, width, multiple: m });
        }
        Ok(())
    }

    /// Architecture fields only; two configs with equal keys accept each other's weights.
    fn arch_key(&self) -> [usize; 6] {
        [
            self.input_channels,
            self.base_width,
            self.depth,
            self.num_classes,
            self.num_heads,
            activation_code(self.activation),
        ]
    }
}

fn activation_code(a: EvidenceActivation) -> usize {
    match a {
        EvidenceActivation::Relu => 0,
        EvidenceActivation::Softplus => 1,
        EvidenceActivation::Exp => 2,
    }
}

fn activation_from_code(c: usize) -> Option<EvidenceActivation> {
    match c {
        0 => Some(EvidenceActivation::Relu),
        1 => Some(EvidenceActivation::Softplus),
        2 => Some(EvidenceActivation::Exp),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
}

#[derive(Clone, Debug)]
struct Layout {
    enc: Vec<Conv>,
    bottleneck: Conv,
    bottleneck_click: Conv,
    /// Indexed by level.
    dec_proj: Vec<Conv>,
    dec_click: Vec<Conv>,
    dec_conv: Vec<Conv>,
    heads: Vec<Conv>,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    config: SegModelConfig,
    tensors: Vec<Tensor>,
    layout: Layout,
}

/// Tensors of a model placed on a tape (tracked for training, constant for inference).
pub struct Bound {
    vars: Vec<DiffArray>,
}

impl Bound {
    pub fn vars(&self) -> &[DiffArray] {
        &self.vars
    }

    /// Gradients for every tensor in model order (zeros where none flowed).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars.iter().map(|v| grads.get_or_zeros(v)).collect()
    }
}

/// Encoder skips `s_0 .. s_{D-1}`, reusable across click changes.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    skips: Vec<DiffArray>,
}

/// Click channels max-pooled `0..=D` times.
#[derive(Clone, Debug)]
pub struct ClickPyramid {
    levels: Vec<DiffArray>,
}

impl ClickPyramid {
    pub fn new(clicks: &DiffArray, depth: usize) -> Result<Self> {
        if clicks.shape().len() != 3 || clicks.shape()[0] != CLICK_CHANNELS {
            return Err(Error::InvalidShape {
                op: "click_pyramid",
                detail: format!("expected [2, H, W] clicks, got {:?}", clicks.shape()),
            });
        }
        let scratch = Tape::new();
        let mut levels = vec![clicks.detach()];
        for _ in 0..depth {
            let next = scratch.max_pool2(levels.last().expect("non-empty"))?;
            levels.push(next);
        }
        Ok(ClickPyramid { levels })
    }

    pub fn zeros(height: usize, width: usize, depth: usize) -> Self {
        ClickPyramid {
            levels: (0..=depth)
                .map(|l| DiffArray::zeros(&[CLICK_CHANNELS, height >> l, width >> l]))
                .collect(),
        }
    }
}

impl SegModel {
    pub fn init(config: SegModelConfig) -> Result<Self> {
        config.validate()?;
        let mut tensors = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut conv = |tensors: &mut Vec<Tensor>, name: String, cin: usize, cout: usize, k: usize, bias: Option<f64>| {
            let fan_in = (cin * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let n = cout * cin * k * k;
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            tensors.push(Tensor {
                name: format!("{name}.weight"),
                shape: vec![cout, cin, k, k],
                data,
            });
            let weight = tensors.len() - 1;
            let bias = bias.map(|b| {
                tensors.push(Tensor {
                    name: format!("{name}.bias"),
                    shape: vec![cout],
                    data: vec![b; cout],
                });
                tensors.len() - 1
            });
            Conv { weight, bias }
        };
        let d = config.depth;
        let mut enc = Vec::with_capacity(d);
        for i in 0..d {
            let cin = if i == 0 { config.image_channels() } else { config.width_at(i - 1) };
            enc.push(conv(&mut tensors, format!("enc{i}"), cin, config.width_at(i), 3, Some(0.0)));
        }
        let top = config.width_at(d - 1);
        let bottleneck = conv(&mut tensors, "bottleneck".into(), top, top, 3, Some(0.0));
        let bottleneck_click = conv(&mut tensors, "bottleneck.click".into(), CLICK_CHANNELS, top, 1, None);
        let mut dec_proj = vec![None; d];
        let mut dec_click = vec![None; d];
        let mut dec_conv = vec![None; d];
        for i in (0..d).rev() {
            let c = config.width_at(i);
            let prev = if i == d - 1 { top } else { config.width_at(i + 1) };
            dec_proj[i] = Some(conv(&mut tensors, format!("dec{i}.proj"), prev, c, 1, Some(0.0)));
            dec_click[i] = Some(conv(&mut tensors, format!("dec{i}.click"), CLICK_CHANNELS, c, 1, None));
            dec_conv[i] = Some(conv(&mut tensors, format!("dec{i}.conv"), c, c, 3, Some(0.0)));
        }
        let heads = (0..config.num_heads)
            .map(|k| {
                conv(
                    &mut tensors,
                    format!("head{k}"),
                    config.base_width,
                    config.num_classes,
                    1,
                    Some(HEAD_BIAS_INIT),
                )
            })
            .collect();
        let unwrap = |v: Vec<Option<Conv>>| v.into_iter().map(|c| c.expect("every level built")).collect();
        Ok(SegModel {
            config,
            tensors,
            layout: Layout {
                enc,
                bottleneck,
                bottleneck_click,
                dec_proj: unwrap(dec_proj),
                dec_click: unwrap(dec_click),
                dec_conv: unwrap(dec_conv),
                heads,
            },
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// All parameters flattened in model order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.var(&t.shape, t.data.clone()).expect("tensor matches its shape"))
                .collect(),
        }
    }

    /// Parameters as tape constants: forward passes record nothing.
    pub fn bind_frozen(&self) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| DiffArray::constant(&t.shape, t.data.clone()).expect("tensor matches its shape"))
                .collect(),
        }
    }

    fn conv(&self, tape: &Tape, p: &Bound, c: Conv, x: &DiffArray) -> Result<DiffArray> {
        tape.conv2d(x, &p.vars[c.weight], c.bias.map(|b| &p.vars[b]))
    }

    pub fn encode(&self, tape: &Tape, p: &Bound, image: &DiffArray) -> Result<EncoderFeatures> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != self.config.image_channels() {
            return Err(Error::InvalidShape {
                op: "encode",
                detail: format!(
                    "expected [{}, H, W] image, got {:?}",
                    self.config.image_channels(),
                    shape
                ),
            });
        }
        self.config.check_input(shape[1], shape[2])?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = image.clone();
        for (i, &c) in self.layout.enc.iter().enumerate() {
            if i > 0 {
                x = tape.max_pool2(&x)?;
            }
            x = tape.relu(&self.conv(tape, p, c, &x)?);
            skips.push(x.clone());
        }
        Ok(EncoderFeatures { skips })
    }

    /// One logit map `[N, H, W]` per head.
    pub fn decode(
        &self,
        tape: &Tape,
        p: &Bound,
        feats: &EncoderFeatures,
        clicks: &ClickPyramid,
    ) -> Result<Vec<DiffArray>> {
        let d = self.config.depth;
        let top = feats.skips.last().expect("depth >= 1");
        let expect = [CLICK_CHANNELS, top.shape()[1] / 2, top.shape()[2] / 2];
        if clicks.levels.len() != d + 1 || clicks.levels[d].shape() != expect {
            return Err(Error::InvalidShape {
                op: "decode",
                detail: "click pyramid does not match the encoder features".into(),
            });
        }
        let l = &self.layout;
        let pooled = tape.max_pool2(top)?;
        let mut x = tape.add(
            &self.conv(tape, p, l.bottleneck, &pooled)?,
            &self.conv(tape, p, l.bottleneck_click, &clicks.levels[d])?,
        )?;
        x = tape.relu(&x);
        for i in (0..d).rev() {
            let up = tape.upsample2(&self.conv(tape, p, l.dec_proj[i], &x)?)?;
            let merged = tape.add(&tape.add(&up, &feats.skips[i])?, &self.conv(tape, p, l.dec_click[i], &clicks.levels[i])?)?;
            x = tape.relu(&self.conv(tape, p, l.dec_conv[i], &tape.relu(&merged))?);
        }
        l.heads.iter().map(|&h| self.conv(tape, p, h, &x)).collect()
    }

    /// Full pass: `image` is `[C, H, W]`, `clicks` is `[2, H, W]`.
    pub fn forward(&self, tape: &Tape, p: &Bound, image: &DiffArray, clicks: &DiffArray) -> Result<Vec<DiffArray>> {
        let feats = self.encode(tape, p, image)?;
        let pyramid = ClickPyramid::new(clicks, self.config.depth)?;
        self.decode(tape, p, &feats, &pyramid)
    }

    /// Inference without recording: per-head evidential outputs.
    pub fn predict(&self, image: &DiffArray, clicks: &DiffArray) -> Result<Vec<EvidentialOutput>> {
        let tape = Tape::new();
        let p = self.bind_frozen();
        self.forward(&tape, &p, image, clicks)?
            .iter()
            .map(|logits| evidential_output(&tape, logits, self.config.activation))
            .collect()
    }

    pub fn export_weights(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = b"EUGW1\n".to_vec();
        out.extend_from_slice(
            format!(
                "{} {} {} {} {} {} {}\n",
                c.input_channels,
                c.base_width,
                c.depth,
                c.num_classes,
                c.num_heads,
                activation_code(c.activation),
                c.seed
            )
            .as_bytes(),
        );
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn parse_blob(blob: &[u8]) -> Result<(SegModelConfig, &[u8])> {
        let err = |m: String| Error::WeightFormat(m);
        let rest = blob
            .strip_prefix(b"EUGW1\n")
            .ok_or_else(|| err("missing EUGW1 magic".into()))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("unterminated config line".into()))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| err("config line is not text".into()))?;
        let nums: Vec<u64> = line
            .split_whitespace()
            .map(|t| t.parse::<u64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(format!("bad config line {line:?}")))?;
        let [ic, bw, depth, nc, nh, act, seed] = nums[..] else {
            return Err(err(format!("expected 7 config integers, got {}", nums.len())));
        };
        let activation = activation_from_code(act as usize).ok_or_else(|| err(format!("unknown activation code {act}")))?;
        let config = SegModelConfig {
            input_channels: ic as usize,
            base_width: bw as usize,
            depth: depth as usize,
            num_classes: nc as usize,
            num_heads: nh as usize,
            activation,
            seed,
        };
        Ok((config, &rest[nl + 1..]))
    }

    /// Replaces this model's parameters with those in `blob`; the blob's
    /// architecture must match this model's.
    pub fn import_weights(&mut self, blob: &[u8]) -> Result<()> {
        let (config, payload) = Self::parse_blob(blob)?;
        if config.arch_key() != self.config.arch_key() {
            return Err(Error::WeightFormat(format!(
                "blob architecture {:?} does not match model {:?}",
                config.arch_key(),
                self.config.arch_key()
            )));
        }
        let n = self.num_params();
        if payload.len() != n * 8 {
            return Err(Error::WeightFormat(format!(
                "expected {} parameter bytes, found {}",
                n * 8,
                payload.len()
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = values.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn from_weights(blob: &[u8]) -> Result<Self> {
        let (config, _) = Self::parse_blob(blob)?;
        config.validate().map_err(|e| Error::WeightFormat(e.to_string()))?;
        let mut model = SegModel::init(config)?;
        model.import_weights(blob)?;
        Ok(model)
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(model: &SegModel, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut SegModel, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), model.tensors.len(), "one gradient per tensor");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, t) in model.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data.iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *p -= self.lr * self.weight_decay * *p;
                *p -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}
