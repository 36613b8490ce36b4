//! Small convolutional encoder-decoder segmenter.
//!
//! The input is the RGB frame concatenated with a one-channel guidance mask
//! (the previous frame's foreground probability). Four stride-2 3x3
//! convolutions encode; four bilinear-upsample + skip-concat + 3x3 convolution
//! stages decode back to the input resolution. The output of the last decoder
//! stage is the feature map handed to the attention head, and a 1x1
//! convolution followed by a channel softmax produces the class probabilities.
//!
//! | layer | kernel | in channels  | out channels | stride |
//! |-------|--------|--------------|--------------|--------|
//! | enc1  | 3x3    | 4            | w0           | 2      |
//! | enc2  | 3x3    | w0           | w1           | 2      |
//! | enc3  | 3x3    | w1           | w2           | 2      |
//! | enc4  | 3x3    | w2           | w3           | 2      |
//! | dec3  | 3x3    | w3 + w2      | w2           | 1      |
//! | dec2  | 3x3    | w2 + w1      | w1           | 1      |
//! | dec1  | 3x3    | w1 + w0      | w0           | 1      |
//! | dec0  | 3x3    | w0 + 4       | w0           | 1      |
//! | head  | 1x1    | w0           | classes      | 1      |
//!
//! Every layer has a bias; hidden layers use SiLU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DiffTensor, ParamSet, Stage, Tape, Var, PROB_EPS};

/// RGB plus one guidance channel.
pub const INPUT_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub widths: [usize; 4],
    pub classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            widths: [8, 12, 16, 16],
            classes: 2,
        }
    }
}

/// `(name, out, in, k)` for every convolution, in forward order.
fn layer_table(cfg: &BackboneConfig) -> [(&'static str, usize, usize, usize); 9] {
    let [w0, w1, w2, w3] = cfg.widths;
    [
        ("enc1", w0, INPUT_CHANNELS, 3),
        ("enc2", w1, w0, 3),
        ("enc3", w2, w1, 3),
        ("enc4", w3, w2, 3),
        ("dec3", w2, w3 + w2, 3),
        ("dec2", w1, w2 + w1, 3),
        ("dec1", w0, w1 + w0, 3),
        ("dec0", w0, w0 + INPUT_CHANNELS, 3),
        ("head", cfg.classes, w0, 1),
    ]
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::config("backbone widths must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::config("backbone needs at least two classes"));
        }
        Ok(())
    }

    /// Channels of the feature map fed to the attention head.
    pub fn feature_channels(&self) -> usize {
        self.widths[0]
    }

    pub fn param_count(&self) -> usize {
        layer_table(self)
            .iter()
            .map(|(_, o, i, k)| o * i * k * k + o)
            .sum()
    }

    /// Recovers the configuration from parameter shapes.
    pub fn infer(params: &ParamSet) -> Result<BackboneConfig> {
        let out_of = |name: &str| -> Result<usize> {
            params
                .get(&format!("backbone.{name}.weight"))
                .map(|t| t.shape()[0])
                .ok_or_else(|| Error::invalid(format!("missing parameter backbone.{name}.weight")))
        };
        let cfg = BackboneConfig {
            widths: [out_of("enc1")?, out_of("enc2")?, out_of("enc3")?, out_of("enc4")?],
            classes: out_of("head")?,
        };
        for (name, o, i, k) in layer_table(&cfg) {
            let w = params.get(&format!("backbone.{name}.weight"));
            if w.map(|t| t.shape()) != Some(&[o, i, k, k][..]) {
                return Err(Error::invalid(format!(
                    "parameter backbone.{name}.weight does not match a {o}x{i}x{k}x{k} layer"
                )));
            }
        }
        Ok(cfg)
    }
}

/// Deterministic He-uniform initialization: weights ~ U(-b, b) with
/// `b = sqrt(6 / fan_in)` for hidden layers and `sqrt(1 / fan_in)` for the
/// head; biases start at zero.
pub fn init_backbone(seed: u64, cfg: &BackboneConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new(Stage::Init);
    for (name, o, i, k) in layer_table(cfg) {
        let fan_in = (i * k * k) as f64;
        let bound = if name == "head" {
            (1.0 / fan_in).sqrt()
        } else {
            (6.0 / fan_in).sqrt()
        };
        let weights = (0..o * i * k * k)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        params.insert(
            format!("backbone.{name}.weight"),
            DiffTensor::new(vec![o, i, k, k], weights)?,
        )?;
        params.insert(format!("backbone.{name}.bias"), DiffTensor::zeros(vec![o]))?;
    }
    Ok(params)
}

/// Output of one backbone pass.
#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    /// Pre-logit features, `[w0, H, W]`.
    pub features: Var,
    /// Class probabilities, `[classes, H, W]`, each entry in `[eps, 1 - eps]`.
    pub probs: Var,
}

fn conv_layer(
    tape: &mut Tape,
    params: &ParamSet,
    name: &str,
    x: Var,
    stride: usize,
    activate: bool,
) -> Result<Var> {
    let w = tape.param(params, &format!("backbone.{name}.weight"))?;
    let b = tape.param(params, &format!("backbone.{name}.bias"))?;
    let pad = tape.shape(w)[2] / 2;
    let y = tape.conv2d(x, w, stride, pad)?;
    let y = tape.bias_add(y, b)?;
    Ok(if activate { tape.silu(y) } else { y })
}

fn up_concat_conv(
    tape: &mut Tape,
    params: &ParamSet,
    name: &str,
    deep: Var,
    skip: Var,
) -> Result<Var> {
    let (h, w) = (tape.shape(skip)[1], tape.shape(skip)[2]);
    let up = tape.bilinear_resize(deep, h, w)?;
    let cat = tape.concat_channels(&[up, skip])?;
    conv_layer(tape, params, name, cat, 1, true)
}

/// Softmax squashed into `[eps, 1 - (C - 1) eps]`: `eps + (1 - C eps) softmax(z)`.
/// Channel sums stay 1 and no entry reaches 0 or 1.
pub fn clamped_softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    let classes = tape.shape(logits)[0] as f64;
    let p = tape.softmax_over_channels(logits)?;
    let p = tape.scale(p, 1.0 - classes * PROB_EPS);
    Ok(tape.add_scalar(p, PROB_EPS))
}

/// Runs the segmenter on a `[3, H, W]` frame with a `[1, H, W]` guidance map.
pub fn forward(tape: &mut Tape, params: &ParamSet, frame: Var, guidance: Var) -> Result<BackboneOutput> {
    let fs = tape.shape(frame).to_vec();
    let gs = tape.shape(guidance).to_vec();
    if fs.len() != 3 || fs[0] != 3 {
        return Err(Error::shape(format!("frame must be [3, H, W], got {fs:?}")));
    }
    if gs.len() != 3 || gs[0] != 1 || gs[1..] != fs[1..] {
        return Err(Error::shape(format!(
            "guidance {gs:?} does not match frame extent {:?}",
            &fs[1..]
        )));
    }
    // Inputs arrive in [0, 1]; the network sees them centred on zero.
    let input = tape.concat_channels(&[frame, guidance])?;
    let input = tape.add_scalar(input, -0.5);
    let e1 = conv_layer(tape, params, "enc1", input, 2, true)?;
    let e2 = conv_layer(tape, params, "enc2", e1, 2, true)?;
    let e3 = conv_layer(tape, params, "enc3", e2, 2, true)?;
    let e4 = conv_layer(tape, params, "enc4", e3, 2, true)?;
    let d3 = up_concat_conv(tape, params, "dec3", e4, e3)?;
    let d2 = up_concat_conv(tape, params, "dec2", d3, e2)?;
    let d1 = up_concat_conv(tape, params, "dec1", d2, e1)?;
    let features = up_concat_conv(tape, params, "dec0", d1, input)?;
    let logits = conv_layer(tape, params, "head", features, 1, false)?;
    let probs = clamped_softmax(tape, logits)?;
    Ok(BackboneOutput { features, probs })
}
