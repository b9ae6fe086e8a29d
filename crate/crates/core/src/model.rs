//! Full segmentation model: encoder, cascaded upsampling decoder with
//! configurable skip connections, and the variant presets.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{Encoder, EncoderConfig, EncoderOutput, StageSpec};
use crate::error::{Error, Result};
use crate::nn::{Act, BatchNormLayer, Conv2dLayer, ConvBnAct, ParamModule};
use crate::ops;
use crate::tensor::Tensor;

/// The three model sizes, named by their first-stage width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    L128s,
    L192,
    L384,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::L128s, Variant::L192, Variant::L384];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::L128s => "128s",
            Variant::L192 => "192",
            Variant::L384 => "384",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "128s" => Ok(Variant::L128s),
            "192" => Ok(Variant::L192),
            "384" => Ok(Variant::L384),
            other => Err(Error::config(format!(
                "unknown variant '{other}' (expected 128s, 192 or 384)"
            ))),
        }
    }

    pub fn stages(&self) -> [StageSpec; 3] {
        match self {
            Variant::L128s => [
                StageSpec { width: 128, depth: 2, heads: 4 },
                StageSpec { width: 256, depth: 3, heads: 6 },
                StageSpec { width: 384, depth: 4, heads: 8 },
            ],
            Variant::L192 => [
                StageSpec { width: 192, depth: 4, heads: 3 },
                StageSpec { width: 288, depth: 4, heads: 5 },
                StageSpec { width: 384, depth: 4, heads: 6 },
            ],
            Variant::L384 => [
                StageSpec { width: 384, depth: 4, heads: 6 },
                StageSpec { width: 512, depth: 4, heads: 9 },
                StageSpec { width: 768, depth: 4, heads: 12 },
            ],
        }
    }

    /// Default decoder block widths (mid, out) from 1/8 up to full
    /// resolution, calibrated against the published parameter and FLOP
    /// budgets of each variant.
    pub fn decoder_widths(&self) -> [(usize, usize); 4] {
        match self {
            Variant::L128s => [(512, 512), (256, 256), (96, 96), (32, 32)],
            Variant::L192 => [(768, 320), (256, 128), (128, 128), (32, 32)],
            Variant::L384 => [(768, 608), (256, 128), (80, 80), (32, 32)],
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Everything needed to build a model deterministically.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub num_classes: usize,
    pub in_channels: usize,
    /// How many skip connections feed the decoder, counted from the 1/2
    /// scale down: 1 -> 1/2 only; 2 -> +1/4; 3 -> +1/8; 4 -> +the fused
    /// 1/16 bottleneck (0 replaces it with a stem projection).
    pub num_skips: usize,
    pub conv_only: bool,
    pub input_size: (usize, usize),
    pub decoder_widths: [(usize, usize); 4],
}

impl ModelConfig {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        ModelConfig {
            variant,
            num_classes,
            in_channels: 3,
            num_skips: 4,
            conv_only: false,
            input_size: (224, 224),
            decoder_widths: variant.decoder_widths(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("model: num_classes must be >= 2"));
        }
        if self.num_skips > 4 {
            return Err(Error::config(format!(
                "model: num_skips {} out of range 0..=4",
                self.num_skips
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::config("model: in_channels must be >= 1"));
        }
        if self.decoder_widths.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::config("model: decoder widths must be positive"));
        }
        self.encoder_config().validate()
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: self.in_channels,
            stages: self.variant.stages(),
            key_dim: 16,
            attn_ratio: 2,
            mlp_ratio: 2,
            conv_only: self.conv_only,
            input_size: self.input_size,
        }
    }
}

/// Decoder block: x2 bilinear upsample, optional skip concatenation, then
/// two 3x3 conv+BN+ReLU layers.
pub struct UpBlock {
    pub conv_a: ConvBnAct,
    pub conv_b: ConvBnAct,
}

impl UpBlock {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, mid: usize, out: usize) -> Result<Self> {
        Ok(UpBlock {
            conv_a: ConvBnAct::new(rng, c_in, mid, 3, 1, 1, Act::Relu)?,
            conv_b: ConvBnAct::new(rng, mid, out, 3, 1, 1, Act::Relu)?,
        })
    }

    pub fn forward(&self, x: &Tensor, skip: Option<&Tensor>, training: bool) -> Result<Tensor> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let up = ops::bilinear_resize(x, 2 * h, 2 * w)?;
        let joined = match skip {
            Some(s) => ops::concat(&[&up, s], 1)?,
            None => up,
        };
        let y = self.conv_a.forward(&joined, training)?;
        self.conv_b.forward(&y, training)
    }
}

impl ParamModule for UpBlock {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.conv_a.collect_params(&format!("{prefix}.a"), out);
        self.conv_b.collect_params(&format!("{prefix}.b"), out);
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.conv_a.collect_params_mut(&format!("{prefix}.a"), out);
        self.conv_b.collect_params_mut(&format!("{prefix}.b"), out);
    }
    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNormLayer)>) {
        self.conv_a.collect_bn(&format!("{prefix}.a"), out);
        self.conv_b.collect_bn(&format!("{prefix}.b"), out);
    }
}

/// Cascaded upsampling decoder: four UpBlocks climbing 1/16 -> 1/1, a
/// 1x1 head emitting per-class logits, and a stem projection used as the
/// bottleneck when the 1/16 skip is disabled.
pub struct Decoder {
    pub bottleneck_proj: Option<ConvBnAct>,
    pub blocks: Vec<UpBlock>,
    pub head: Conv2dLayer,
    num_skips: usize,
}

impl Decoder {
    pub fn new(
        rng: &mut ChaCha8Rng,
        fused_channels: usize,
        stem_width: usize,
        num_skips: usize,
        widths: [(usize, usize); 4],
        num_classes: usize,
    ) -> Result<Self> {
        let bottleneck_proj = if num_skips < 4 {
            Some(ConvBnAct::new(rng, stem_width, stem_width, 1, 1, 0, Act::Relu)?)
        } else {
            None
        };
        let input_ch = if num_skips == 4 { fused_channels } else { stem_width };
        let skip_ch = [stem_width / 2, stem_width / 4, stem_width / 8];
        let mut blocks = Vec::with_capacity(4);
        let mut c = input_ch;
        for (i, &(mid, out)) in widths.iter().enumerate() {
            let with_skip = match i {
                0 if num_skips >= 3 => c + skip_ch[0],
                1 if num_skips >= 2 => c + skip_ch[1],
                2 if num_skips >= 1 => c + skip_ch[2],
                _ => c,
            };
            blocks.push(UpBlock::new(rng, with_skip, mid, out)?);
            c = out;
        }
        let head = Conv2dLayer::new(rng, c, num_classes, 1, 1, 0, true)?;
        Ok(Decoder { bottleneck_proj, blocks, head, num_skips })
    }

    pub fn forward(&self, enc: &EncoderOutput, training: bool) -> Result<Tensor> {
        let mut y = match &self.bottleneck_proj {
            Some(proj) => proj.forward(&enc.stem_sixteenth, training)?,
            None => enc.fused_sixteenth.clone(),
        };
        let skips: [Option<&Tensor>; 4] = [
            (self.num_skips >= 3).then_some(&enc.skip_eighth),
            (self.num_skips >= 2).then_some(&enc.skip_quarter),
            (self.num_skips >= 1).then_some(&enc.skip_half),
            None,
        ];
        for (i, (block, skip)) in self.blocks.iter().zip(skips).enumerate() {
            y = block.forward(&y, skip, training).map_err(|e| {
                Error::config(format!("decoder block {} (to 1/{}): {e}", i + 1, 16 >> (i + 1).min(4)))
            })?;
        }
        self.head.forward(&y)
    }
}

impl ParamModule for Decoder {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        if let Some(p) = &self.bottleneck_proj {
            p.collect_params(&format!("{prefix}.proj"), out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.block{}", i + 1), out);
        }
        self.head.collect_params(&format!("{prefix}.head"), out);
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        if let Some(p) = &mut self.bottleneck_proj {
            p.collect_params_mut(&format!("{prefix}.proj"), out);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_params_mut(&format!("{prefix}.block{}", i + 1), out);
        }
        self.head.collect_params_mut(&format!("{prefix}.head"), out);
    }
    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNormLayer)>) {
        if let Some(p) = &self.bottleneck_proj {
            p.collect_bn(&format!("{prefix}.proj"), out);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_bn(&format!("{prefix}.block{}", i + 1), out);
        }
    }
}

/// The assembled segmentation model.
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Deterministic construction from a config and seed.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_cfg = config.encoder_config();
        let encoder = Encoder::new(&mut rng, enc_cfg.clone())?;
        let decoder = Decoder::new(
            &mut rng,
            enc_cfg.fused_channels(),
            config.variant.stages()[0].width,
            config.num_skips,
            config.decoder_widths,
            config.num_classes,
        )?;
        Ok(Model { config: config.clone(), encoder, decoder })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let enc = self.encoder.forward(x, training)?;
        self.decoder.forward(&enc, training)
    }

    /// Eval-mode forward: running BN statistics, no state mutation.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x, false)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.collect_params("encoder", &mut out);
        self.decoder.collect_params("decoder", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.encoder.collect_params_mut("encoder", &mut out);
        self.decoder.collect_params_mut("decoder", &mut out);
        out
    }

    pub fn bn_layers(&self) -> Vec<(String, &BatchNormLayer)> {
        let mut out = Vec::new();
        self.encoder.collect_bn("encoder", &mut out);
        self.decoder.collect_bn("decoder", &mut out);
        out
    }

    pub fn param_count(&self) -> u64 {
        self.named_params().iter().map(|(_, t)| t.elem_count() as u64).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(variant: Variant) -> ModelConfig {
        let mut c = ModelConfig::new(variant, 3);
        c.input_size = (64, 64);
        c
    }

    #[test]
    fn variant_parse_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("512").is_err());
    }

    #[test]
    fn forward_preserves_spatial_dims() {
        let cfg = small_config(Variant::L128s);
        let model = Model::build(&cfg, 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let y = model.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = small_config(Variant::L128s);
        let model = Model::build(&cfg, 7).unwrap();
        let x = Tensor::full(&[1, 3, 64, 64], 0.25);
        let a = model.forward_eval(&x).unwrap();
        let b = model.forward_eval(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn num_skips_changes_parameter_count_monotonically() {
        let mut prev = 0u64;
        for skips in 0..=4 {
            let mut cfg = small_config(Variant::L128s);
            cfg.num_skips = skips;
            let model = Model::build(&cfg, 0).unwrap();
            let n = model.param_count();
            if skips > 0 {
                assert!(n > prev, "skips={skips}: {n} <= {prev}");
            }
            prev = n;
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small_config(Variant::L128s);
        cfg.num_classes = 1;
        assert!(Model::build(&cfg, 0).is_err());
        let mut cfg = small_config(Variant::L128s);
        cfg.num_skips = 5;
        assert!(Model::build(&cfg, 0).is_err());
        let mut cfg = small_config(Variant::L128s);
        cfg.input_size = (48, 48); // divisible by 16 but grid 3x3... valid
        assert!(Model::build(&cfg, 0).is_ok());
        cfg.input_size = (50, 48);
        assert!(Model::build(&cfg, 0).is_err());
    }
}
