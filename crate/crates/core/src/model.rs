//! The LSTMFormer separation network in its dual-channel and two
//! single-channel forms.
//!
//! Data flow for one utterance:
//!
//! ```text
//! g(|STFT ch1|) (,g(|STFT ch2|)) -> FC -> c                 T×C
//! [c, e]  -> FC1 relu -> LSTM1 -> LN1 -> +c -> FC2 relu -> FC3 relu
//!         -> LSTM2 -> LN2 -> +c -> FC4 relu -> FC5 relu -> FC6 (-> compress)
//!         -> sigmoid = r                                     T×F
//! ŝ = iSTFT(|STFT ch1| ⊙ r, ∠STFT ch1)
//! ```
//!
//! `g` is the fixed input scaling, `ln(1 + m)` by default. The mask is
//! always applied to the unscaled magnitude.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{apply_mask, SpectrogramPair, Stft, StftConfig, Waveform, SAMPLE_RATE};
use crate::embedding::SpeakerEmbedding;
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape, Tensor, Variable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dual,
    SingleHalf,
    SingleEqual,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dual, Variant::SingleHalf, Variant::SingleEqual];

    pub fn channels(self) -> usize {
        match self {
            Variant::Dual => 2,
            _ => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dual => "dual",
            Variant::SingleHalf => "single_half",
            Variant::SingleEqual => "single_equal",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed elementwise map on the magnitudes fed to the input FC.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputScale {
    /// Raw magnitudes.
    Linear,
    /// `ln(1 + m)`: keeps quiet bins visible next to loud low-frequency ones.
    #[default]
    Log1p,
}

impl InputScale {
    pub fn apply(self, m: &Tensor) -> Tensor {
        let mut out = m.clone();
        if self == InputScale::Log1p {
            out.data_mut().iter_mut().for_each(|v| *v = v.ln_1p());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Frequency bins per frame.
    pub n_freq: usize,
    pub emb_dim: usize,
    /// Output of the input compression layer; also the skip width.
    pub fc: usize,
    pub fc1: usize,
    pub lstm_hidden: usize,
    pub fc2: usize,
    pub fc3: usize,
    pub fc4: usize,
    pub fc5: usize,
    pub fc6: usize,
    /// Final projection to `n_freq`, dual only.
    pub compress: Option<usize>,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub input_scale: InputScale,
    #[serde(default)]
    pub stft: StftConfig,
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Full-size layer widths.
    pub fn preset(variant: Variant) -> Self {
        let stft = StftConfig::default();
        let f = stft.n_bins();
        let (w, fc2, fc4) = match variant {
            Variant::SingleHalf => (128, 100, 90),
            _ => (256, 200, 180),
        };
        Self {
            variant,
            n_freq: f,
            emb_dim: 256,
            fc: w,
            fc1: w,
            lstm_hidden: w,
            fc2,
            fc3: w,
            fc4,
            fc5: w,
            fc6: if variant == Variant::Dual { 2 * f } else { f },
            compress: (variant == Variant::Dual).then_some(f),
            layer_norm_eps: default_ln_eps(),
            input_scale: InputScale::default(),
            stft,
        }
    }

    /// A narrow model with every hidden width equal to `width`, for tests
    /// and quick experiments.
    pub fn micro(variant: Variant, stft: StftConfig, width: usize, emb_dim: usize) -> Self {
        let f = stft.n_bins();
        Self {
            variant,
            n_freq: f,
            emb_dim,
            fc: width,
            fc1: width,
            lstm_hidden: width,
            fc2: width,
            fc3: width,
            fc4: width,
            fc5: width,
            fc6: if variant == Variant::Dual { 2 * f } else { f },
            compress: (variant == Variant::Dual).then_some(f),
            layer_norm_eps: default_ln_eps(),
            input_scale: InputScale::default(),
            stft,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.variant.channels() * self.n_freq
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_freq", self.n_freq),
            ("emb_dim", self.emb_dim),
            ("fc", self.fc),
            ("fc1", self.fc1),
            ("lstm_hidden", self.lstm_hidden),
            ("fc2", self.fc2),
            ("fc3", self.fc3),
            ("fc4", self.fc4),
            ("fc5", self.fc5),
            ("fc6", self.fc6),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        Stft::new(self.stft)?;
        if self.stft.n_bins() != self.n_freq {
            return Err(Error::Config(format!(
                "n_freq {} does not match STFT bins {}",
                self.n_freq,
                self.stft.n_bins()
            )));
        }
        if self.lstm_hidden != self.fc {
            return Err(Error::Config(format!(
                "skip connection adds fc ({}) to the LSTM output ({})",
                self.fc, self.lstm_hidden
            )));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        match (self.variant, self.compress) {
            (Variant::Dual, Some(c)) if c == self.n_freq => Ok(()),
            (Variant::Dual, _) => Err(Error::Config(format!(
                "dual variant needs a compress layer to {} bins",
                self.n_freq
            ))),
            (_, Some(_)) => Err(Error::Config(
                "single-channel variants have no compress layer".into(),
            )),
            (_, None) if self.fc6 != self.n_freq => Err(Error::Config(format!(
                "single-channel fc6 must emit {} bins, got {}",
                self.n_freq, self.fc6
            ))),
            _ => Ok(()),
        }
    }
}

// Fixed parameter layout. Each FC layer is (weight, bias); each LSTM is
// (input weight, recurrent weight, bias); each layer norm is (gain, bias).
const FC: usize = 0;
const FC1: usize = 2;
const LSTM1: usize = 4;
const LN1: usize = 7;
const FC2: usize = 9;
const FC3: usize = 11;
const LSTM2: usize = 13;
const LN2: usize = 16;
const FC4: usize = 18;
const FC5: usize = 20;
const FC6: usize = 22;
const COMPRESS: usize = 24;

/// Shapes and names of every variable, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let fc = |out: &mut Vec<(String, Vec<usize>)>, name: &str, din: usize, dout: usize| {
        out.push((format!("{name}.weight"), vec![din, dout]));
        out.push((format!("{name}.bias"), vec![dout]));
    };
    let lstm = |out: &mut Vec<(String, Vec<usize>)>, name: &str, din: usize, h: usize| {
        out.push((format!("{name}.weight_ih"), vec![din, 4 * h]));
        out.push((format!("{name}.weight_hh"), vec![h, 4 * h]));
        out.push((format!("{name}.bias"), vec![4 * h]));
    };
    let ln = |out: &mut Vec<(String, Vec<usize>)>, name: &str, d: usize| {
        out.push((format!("{name}.gain"), vec![d]));
        out.push((format!("{name}.bias"), vec![d]));
    };
    let h = cfg.lstm_hidden;
    fc(&mut out, "fc", cfg.input_dim(), cfg.fc);
    fc(&mut out, "fc1", cfg.fc + cfg.emb_dim, cfg.fc1);
    lstm(&mut out, "lstm1", cfg.fc1, h);
    ln(&mut out, "ln1", h);
    fc(&mut out, "fc2", h, cfg.fc2);
    fc(&mut out, "fc3", cfg.fc2, cfg.fc3);
    lstm(&mut out, "lstm2", cfg.fc3, h);
    ln(&mut out, "ln2", h);
    fc(&mut out, "fc4", h, cfg.fc4);
    fc(&mut out, "fc5", cfg.fc4, cfg.fc5);
    fc(&mut out, "fc6", cfg.fc5, cfg.fc6);
    if let Some(c) = cfg.compress {
        fc(&mut out, "compress", cfg.fc6, c);
    }
    out
}

/// Trainable state of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    cfg: ModelConfig,
    pub vars: Vec<Variable>,
}

/// The estimated time-frequency mask, T×F with entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskOutput {
    pub r: Tensor,
}

/// Allocates and initializes a model.
///
/// FC weights are uniform in ±1/√fan_in, LSTM weights uniform in ±1/√H with
/// the forget-gate bias at 1, layer-norm gains 1, every other bias 0.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.lstm_hidden;
    let vars = layout(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let value = if name.ends_with("weight_ih") || name.ends_with("weight_hh") {
                Tensor::uniform(&shape, 1.0 / (h as f64).sqrt(), &mut rng)
            } else if name.ends_with("weight") {
                Tensor::uniform(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
            } else if name.ends_with("gain") {
                Tensor::full(&shape, 1.0)
            } else if name.starts_with("lstm") {
                let mut b = Tensor::zeros(&shape);
                b.data_mut()[h..2 * h].fill(1.0);
                b
            } else {
                Tensor::zeros(&shape)
            };
            Variable::new(name, value)
        })
        .collect();
    Ok(ModelParams {
        cfg: cfg.clone(),
        vars,
    })
}

/// Where a constant mask is pinned by [`ModelParams::force_constant_mask`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstantMask {
    Zero,
    One,
}

impl ModelParams {
    /// Reassembles parameters (e.g. from a checkpoint), checking names and
    /// shapes against the configuration.
    pub fn from_vars(cfg: ModelConfig, vars: Vec<Variable>) -> Result<Self> {
        cfg.validate()?;
        let want = layout(&cfg);
        if want.len() != vars.len() {
            return Err(Error::Config(format!(
                "expected {} variables for {}, got {}",
                want.len(),
                cfg.variant,
                vars.len()
            )));
        }
        for ((name, shape), v) in want.iter().zip(&vars) {
            if *name != v.name || shape.as_slice() != v.value.shape() {
                return Err(Error::Config(format!(
                    "variable `{}` {:?} does not match expected `{name}` {shape:?}",
                    v.name,
                    v.value.shape()
                )));
            }
        }
        Ok(Self { cfg, vars })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn zero_grads(&mut self) {
        self.vars.iter_mut().for_each(Variable::zero_grad);
    }

    /// Index of the layer whose logits feed the sigmoid.
    fn output_layer(&self) -> usize {
        if self.cfg.compress.is_some() {
            COMPRESS
        } else {
            FC6
        }
    }

    /// Pins the mask to 0 or 1 everywhere by zeroing the last layer's
    /// weights and saturating its bias.
    pub fn force_constant_mask(&mut self, value: ConstantMask) {
        let i = self.output_layer();
        self.vars[i].value.fill(0.0);
        self.vars[i + 1].value.fill(match value {
            ConstantMask::Zero => -1000.0,
            ConstantMask::One => 1000.0,
        });
    }

    /// Borrowed view used to record the forward pass.
    pub fn view(&self) -> ModelView<'_, '_> {
        ModelView {
            cfg: &self.cfg,
            vars: &self.vars,
        }
    }

    /// Total number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.vars.iter().filter(|v| v.trainable).map(Variable::numel).sum()
    }
}

/// The forward pass over a borrowed configuration and variable slice in
/// storage order.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'c, 'a> {
    cfg: &'c ModelConfig,
    vars: &'a [Variable],
}

impl<'c, 'a> ModelView<'c, 'a> {
    pub fn new(cfg: &'c ModelConfig, vars: &'a [Variable]) -> Result<Self> {
        let want = layout(cfg).len();
        if vars.len() != want {
            return Err(Error::dim("model variables", &[want], &[vars.len()]));
        }
        Ok(Self { cfg, vars })
    }

    fn fc(&self, tape: &mut Tape<'a>, x: NodeId, at: usize) -> Result<NodeId> {
        let w = tape.param(at, &self.vars[at]);
        let b = tape.param(at + 1, &self.vars[at + 1]);
        tape.linear(x, w, b)
    }

    fn fc_relu(
        &self,
        tape: &mut Tape<'a>,
        x: NodeId,
        at: usize,
        site: &str,
    ) -> Result<NodeId> {
        let y = self.fc(tape, x, at)?;
        let y = tape.relu(y);
        finite(tape, y, site)
    }

    fn lstm(&self, tape: &mut Tape<'a>, x: NodeId, at: usize) -> Result<NodeId> {
        let wx = tape.param(at, &self.vars[at]);
        let wh = tape.param(at + 1, &self.vars[at + 1]);
        let b = tape.param(at + 2, &self.vars[at + 2]);
        tape.lstm(x, wx, wh, b)
    }

    fn ln(&self, tape: &mut Tape<'a>, x: NodeId, at: usize) -> Result<NodeId> {
        let g = tape.param(at, &self.vars[at]);
        let b = tape.param(at + 1, &self.vars[at + 1]);
        tape.layer_norm(x, g, b, self.cfg.layer_norm_eps)
    }

    fn check_mags(&self, m1: &Tensor, m2: Option<&Tensor>) -> Result<()> {
        match (self.cfg.variant, m2) {
            (Variant::Dual, None) => {
                return Err(Error::VariantMismatch(
                    "dual model needs both channel magnitudes".into(),
                ))
            }
            (Variant::SingleHalf | Variant::SingleEqual, Some(_)) => {
                return Err(Error::VariantMismatch(format!(
                    "{} model takes one channel",
                    self.cfg.variant
                )))
            }
            _ => {}
        }
        for m in std::iter::once(m1).chain(m2) {
            if m.rank() != 2 || m.cols() != self.cfg.n_freq {
                return Err(Error::dim("magnitudes", m.shape(), &[m1.rows(), self.cfg.n_freq]));
            }
        }
        if let Some(m2) = m2 {
            if m2.shape() != m1.shape() {
                return Err(Error::dim("channel magnitudes", m1.shape(), m2.shape()));
            }
        }
        Ok(())
    }

    /// Records the input compression (the FC ahead of the backbone).
    pub fn compress_taped(
        &self,
        tape: &mut Tape<'a>,
        m1: &Tensor,
        m2: Option<&Tensor>,
    ) -> Result<NodeId> {
        self.check_mags(m1, m2)?;
        let scale = self.cfg.input_scale;
        let x = tape.input(scale.apply(m1));
        let x = match m2 {
            Some(m2) => {
                let y = tape.input(scale.apply(m2));
                tape.concat_cols(x, y)?
            }
            None => x,
        };
        let c = self.fc(tape, x, FC)?;
        finite(tape, c, "fc")
    }

    /// Records both LSTMFormer blocks and the mask head.
    pub fn backbone_taped(
        &self,
        tape: &mut Tape<'a>,
        compressed: NodeId,
        emb: &[f64],
    ) -> Result<NodeId> {
        let cfg = &self.cfg;
        if emb.len() != cfg.emb_dim {
            return Err(Error::dim("speaker embedding", &[cfg.emb_dim], &[emb.len()]));
        }
        let (t, c) = tape.value(compressed).dims2();
        if c != cfg.fc {
            return Err(Error::dim("compressed features", &[t, cfg.fc], &[t, c]));
        }
        let repeated: Vec<f64> = (0..t).flat_map(|_| emb.iter().copied()).collect();
        let e = tape.input(Tensor::matrix(t, cfg.emb_dim, repeated)?);
        let x = tape.concat_cols(compressed, e)?;

        let x = self.fc_relu(tape, x, FC1, "fc1")?;
        let x = self.lstm(tape, x, LSTM1)?;
        let x = self.ln(tape, x, LN1)?;
        let x = tape.add(x, compressed)?;
        let x = self.fc_relu(tape, x, FC2, "fc2")?;
        let x = self.fc_relu(tape, x, FC3, "fc3")?;

        let x = self.lstm(tape, x, LSTM2)?;
        let x = self.ln(tape, x, LN2)?;
        let x = tape.add(x, compressed)?;
        let x = self.fc_relu(tape, x, FC4, "fc4")?;
        let x = self.fc_relu(tape, x, FC5, "fc5")?;
        let mut x = self.fc(tape, x, FC6)?;
        finite(tape, x, "fc6")?;
        if cfg.compress.is_some() {
            x = self.fc(tape, x, COMPRESS)?;
            finite(tape, x, "compress")?;
        }
        Ok(tape.sigmoid(x))
    }

    /// Records the full path from magnitudes to the mask.
    pub fn mask_taped(
        &self,
        tape: &mut Tape<'a>,
        m1: &Tensor,
        m2: Option<&Tensor>,
        emb: &[f64],
    ) -> Result<NodeId> {
        let c = self.compress_taped(tape, m1, m2)?;
        self.backbone_taped(tape, c, emb)
    }

    /// Records the separated waveform of `out_len` samples. `ch1` is the
    /// reference channel spectrogram; `m2` the second channel magnitude for
    /// the dual variant.
    pub fn estimate_taped(
        &self,
        tape: &mut Tape<'a>,
        stft: &Stft,
        ch1: &SpectrogramPair,
        m2: Option<&Tensor>,
        emb: &[f64],
        out_len: usize,
    ) -> Result<NodeId> {
        let r = self.mask_taped(tape, &ch1.mag, m2, emb)?;
        let m1 = tape.input(ch1.mag.clone());
        let masked = tape.mul(m1, r)?;
        stft.synthesize_taped(tape, masked, &ch1.phase, out_len)
    }
}

fn finite(tape: &Tape<'_>, node: NodeId, site: &str) -> Result<NodeId> {
    let v = tape.value(node);
    if !v.is_finite() {
        let cols = v.cols();
        let frame = v.data().iter().position(|x| !x.is_finite()).unwrap_or(0) / cols;
        return Err(Error::NonFinite {
            site: site.to_string(),
            frame,
        });
    }
    Ok(node)
}

/// Input compression on plain tensors.
pub fn compress_magnitudes(params: &ModelParams, m1: &Tensor, m2: Option<&Tensor>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let c = params.view().compress_taped(&mut tape, m1, m2)?;
    Ok(tape.value(c).clone())
}

/// Backbone and mask head on plain tensors.
pub fn backbone_forward(
    params: &ModelParams,
    compressed: &Tensor,
    emb: &SpeakerEmbedding,
) -> Result<MaskOutput> {
    let mut tape = Tape::new();
    let c = tape.input(compressed.clone());
    let r = params.view().backbone_taped(&mut tape, c, &emb.vector)?;
    Ok(MaskOutput {
        r: tape.value(r).clone(),
    })
}

/// Mask for a mixture waveform with the channel count of the variant.
pub fn estimate_mask(params: &ModelParams, mix: &Waveform, emb: &[f64]) -> Result<MaskOutput> {
    let (_, specs) = analyze_mixture(params, mix)?;
    let mut tape = Tape::new();
    let r = params.view().mask_taped(&mut tape, &specs[0].mag, specs.get(1).map(|s| &s.mag), emb)?;
    Ok(MaskOutput {
        r: tape.value(r).clone(),
    })
}

fn analyze_mixture(params: &ModelParams, mix: &Waveform) -> Result<(Stft, Vec<SpectrogramPair>)> {
    let want = params.variant().channels();
    if mix.num_channels() != want {
        return Err(Error::VariantMismatch(format!(
            "{} model expects {want} channel(s), mixture has {}",
            params.variant(),
            mix.num_channels()
        )));
    }
    let stft = Stft::new(params.cfg.stft)?;
    let specs = mix
        .channels()
        .iter()
        .map(|ch| stft.analyze(ch))
        .collect::<Result<Vec<_>>>()?;
    Ok((stft, specs))
}

/// Separates the target speaker from `mix`; the output has the mixture's
/// length. Dual models take a stereo mixture, single models a mono one.
pub fn separate_utterance(
    params: &ModelParams,
    mix: &Waveform,
    emb: &SpeakerEmbedding,
) -> Result<Waveform> {
    let (stft, specs) = analyze_mixture(params, mix)?;
    let mut tape = Tape::new();
    let r = params.view().mask_taped(&mut tape, &specs[0].mag, specs.get(1).map(|s| &s.mag), &emb.vector)?;
    let masked = apply_mask(&specs[0].mag, tape.value(r))?;
    Ok(Waveform::mono(stft.synthesize(&masked, &specs[0].phase, mix.len())?))
}

/// Multiply-accumulate counts for one input duration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MacCount {
    pub frames: usize,
    /// Per-layer totals of the trainable network.
    pub layers: Vec<(String, u64)>,
    /// Sum of `layers`.
    pub network: u64,
    /// Fixed analysis and synthesis transforms, counted as convolutions
    /// with a 2·bins × window kernel per frame.
    pub transforms: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.network + self.transforms
    }
}

pub fn count_params(params: &ModelParams) -> usize {
    params.count_params()
}

/// Analytic MACs for `input_seconds` of 16 kHz audio: FC layers cost
/// T·Din·Dout, LSTMs T·4H·(Din + H).
pub fn count_macs(cfg: &ModelConfig, input_seconds: f64) -> MacCount {
    let samples = (input_seconds.max(0.0) * SAMPLE_RATE as f64).round() as usize;
    let t = cfg.stft.n_frames(samples) as u64;
    let layers: Vec<(String, u64)> = layout(cfg)
        .iter()
        .filter_map(|(name, shape)| {
            // FC weights are Din×Dout, LSTM input and recurrent weights
            // Din×4H and H×4H; biases and norms are not MACs.
            let layer = name.split('.').next().unwrap_or(name);
            [".weight", ".weight_ih", ".weight_hh"]
                .iter()
                .any(|s| name.ends_with(s))
                .then(|| (layer.to_string(), t * (shape[0] * shape[1]) as u64))
        })
        .fold(Vec::new(), |mut acc: Vec<(String, u64)>, (layer, macs)| {
            match acc.last_mut() {
                Some((l, m)) if *l == layer => *m += macs,
                _ => acc.push((layer, macs)),
            }
            acc
        });
    let network = layers.iter().map(|(_, m)| m).sum();
    let kernel = (2 * cfg.stft.n_bins() * cfg.stft.window_length) as u64;
    let transforms = t * kernel * (cfg.variant.channels() as u64 + 1);
    MacCount {
        frames: t as usize,
        layers,
        network,
        transforms,
    }
}
