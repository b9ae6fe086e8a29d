//! Hybrid encoder: a four-layer strided convolutional stem (x16 resolution
//! reduction) feeding three transformer stages with biased multi-head
//! attention, joined by shrinking-attention downsampling, with multi-scale
//! fusion of the last-stage features.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Act, BatchNormLayer, ConvBnAct, LinearLayer, ParamModule};
use crate::ops::{self, BnLayout};
use crate::tensor::Tensor;

/// One transformer stage: token width, number of blocks, attention heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

/// Architectural description of the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stages: [StageSpec; 3],
    /// Query/key width per head.
    pub key_dim: usize,
    /// Value width per head, as a multiple of `key_dim`.
    pub attn_ratio: usize,
    /// MLP expansion factor.
    pub mlp_ratio: usize,
    /// Drop the transformer stages entirely; the encoder reduces to the stem.
    pub conv_only: bool,
    /// Input resolution the attention bias tables are built for.
    pub input_size: (usize, usize),
}

impl EncoderConfig {
    pub fn stem_widths(&self) -> [usize; 4] {
        let c = self.stages[0].width;
        [c / 8, c / 4, c / 2, c]
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::config(format!(
                "encoder: input {}x{} must be divisible by 16",
                h, w
            )));
        }
        if self.stages[0].width % 8 != 0 {
            return Err(Error::config("encoder: first stage width must be divisible by 8"));
        }
        if self.conv_only {
            return Ok(());
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 {
                return Err(Error::config(format!("encoder: stage {} depth must be >= 1", i + 1)));
            }
        }
        for i in 0..2 {
            if self.stages[i].width % self.key_dim != 0 {
                return Err(Error::config(format!(
                    "encoder: stage {} width {} must be divisible by key_dim {} (downsample heads)",
                    i + 1,
                    self.stages[i].width,
                    self.key_dim
                )));
            }
        }
        let g = (h / 16, w / 16);
        if g.0 < 2 || g.1 < 2 {
            return Err(Error::config(format!(
                "encoder: token grid {}x{} too small for downsampling (need >= 2x2, i.e. input >= 32)",
                g.0, g.1
            )));
        }
        Ok(())
    }

    /// Token grids of the three stages for this input size.
    pub fn stage_grids(&self) -> [(usize, usize); 3] {
        let g1 = (self.input_size.0 / 16, self.input_size.1 / 16);
        let g2 = (g1.0.div_ceil(2), g1.1.div_ceil(2));
        let g3 = (g2.0.div_ceil(2), g2.1.div_ceil(2));
        [g1, g2, g3]
    }

    /// Channel count of the fused 1/16 feature map.
    pub fn fused_channels(&self) -> usize {
        if self.conv_only {
            self.stages[0].width
        } else {
            self.stages[0].width + self.stages.iter().map(|s| s.width).sum::<usize>()
        }
    }
}

/// Map query-key displacement pairs to dense bias slots.
///
/// The query grid must equal the key grid or be its stride-2 subsampling.
/// Pairs with the same signed displacement (row_q - row_k, col_q - col_k)
/// share a slot, so the bias is translation invariant by construction.
pub fn build_offset_index(h: usize, w: usize, h_q: usize, w_q: usize) -> Result<(Vec<u32>, usize)> {
    let stride = if (h_q, w_q) == (h, w) {
        1usize
    } else if h_q == h.div_ceil(2) && w_q == w.div_ceil(2) {
        2
    } else {
        return Err(Error::config(format!(
            "offset index: query grid {}x{} is neither {}x{} nor its stride-2 subsampling",
            h_q, w_q, h, w
        )));
    };
    let mut slot_of = std::collections::HashMap::new();
    let mut index = Vec::with_capacity(h_q * w_q * h * w);
    for qr in 0..h_q {
        for qc in 0..w_q {
            let (ar, ac) = (qr * stride, qc * stride);
            for kr in 0..h {
                for kc in 0..w {
                    let d = (ar as i32 - kr as i32, ac as i32 - kc as i32);
                    let next = slot_of.len() as u32;
                    let slot = *slot_of.entry(d).or_insert(next);
                    index.push(slot);
                }
            }
        }
    }
    Ok((index, slot_of.len()))
}

/// Multi-head attention with a learned per-displacement bias.
///
/// Queries may be a stride-2 subsampling of the token grid, in which case
/// the output token count shrinks accordingly (no residual applies).
pub struct AttentionLayer {
    pub q_proj: LinearLayer,
    pub k_proj: LinearLayer,
    pub v_proj: LinearLayer,
    pub out_proj: LinearLayer,
    pub bias_table: Tensor, // [heads, n_offsets]
    pub offset_index: Vec<u32>,
    pub heads: usize,
    pub key_dim: usize,
    pub v_dim: usize,
    /// Token indices of the queries when subsampling, else None.
    pub query_tokens: Option<Vec<usize>>,
    pub key_grid: (usize, usize),
}

impl AttentionLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        heads: usize,
        key_dim: usize,
        attn_ratio: usize,
        key_grid: (usize, usize),
        subsample: bool,
    ) -> Result<Self> {
        let v_dim = attn_ratio * key_dim;
        let (kh, kw) = key_grid;
        let (qh, qw, query_tokens) = if subsample {
            let (qh, qw) = (kh.div_ceil(2), kw.div_ceil(2));
            let mut idx = Vec::with_capacity(qh * qw);
            for r in 0..qh {
                for c in 0..qw {
                    idx.push(2 * r * kw + 2 * c);
                }
            }
            (qh, qw, Some(idx))
        } else {
            (kh, kw, None)
        };
        let (offset_index, n_offsets) = build_offset_index(kh, kw, qh, qw)?;
        Ok(AttentionLayer {
            q_proj: LinearLayer::new(rng, c_in, heads * key_dim, true)?,
            k_proj: LinearLayer::new(rng, c_in, heads * key_dim, true)?,
            v_proj: LinearLayer::new(rng, c_in, heads * v_dim, true)?,
            out_proj: LinearLayer::new(rng, heads * v_dim, c_out, true)?,
            // zero-initialized: attention starts unbiased
            bias_table: Tensor::param(&[heads, n_offsets], vec![0.0; heads * n_offsets])?,
            offset_index,
            heads,
            key_dim,
            v_dim,
            query_tokens,
            key_grid,
        })
    }

    pub fn query_count(&self) -> usize {
        match &self.query_tokens {
            Some(idx) => idx.len(),
            None => self.key_grid.0 * self.key_grid.1,
        }
    }

    /// Split [n, t, heads*d] into [n, heads, t, d].
    fn split_heads(&self, x: &Tensor, d: usize) -> Result<Tensor> {
        let (n, t) = (x.shape()[0], x.shape()[1]);
        let r = ops::reshape(x, &[n, t, self.heads, d])?;
        ops::permute(&r, &[0, 2, 1, 3])
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        if tokens.ndim() != 3 {
            return Err(Error::shape(format!(
                "attention: expected tokens [n, t, c], got {:?}",
                tokens.shape()
            )));
        }
        let tk = tokens.shape()[1];
        if tk != self.key_grid.0 * self.key_grid.1 {
            return Err(Error::config(format!(
                "attention: {} tokens do not match the {}x{} bias grid",
                tk, self.key_grid.0, self.key_grid.1
            )));
        }
        let q_src = match &self.query_tokens {
            Some(idx) => ops::token_select(tokens, idx)?,
            None => tokens.clone(),
        };
        let q = self.split_heads(&self.q_proj.forward(&q_src)?, self.key_dim)?;
        let k = self.split_heads(&self.k_proj.forward(tokens)?, self.key_dim)?;
        let v = self.split_heads(&self.v_proj.forward(tokens)?, self.v_dim)?;

        let scores = ops::bmm(&q, &k, true)?;
        let scores = ops::scale(&scores, 1.0 / (self.key_dim as f32).sqrt());
        let scores = ops::add_attention_bias(&scores, &self.bias_table, &self.offset_index)?;
        let attn = ops::softmax(&scores, 3)?;
        let ctx = ops::bmm(&attn, &v, false)?;

        let (n, tq) = (ctx.shape()[0], ctx.shape()[2]);
        let merged = ops::permute(&ctx, &[0, 2, 1, 3])?;
        let merged = ops::reshape(&merged, &[n, tq, self.heads * self.v_dim])?;
        self.out_proj.forward(&ops::hardswish(&merged))
    }
}

impl ParamModule for AttentionLayer {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.q_proj.collect_params(&format!("{prefix}.q"), out);
        self.k_proj.collect_params(&format!("{prefix}.k"), out);
        self.v_proj.collect_params(&format!("{prefix}.v"), out);
        self.out_proj.collect_params(&format!("{prefix}.out"), out);
        out.push((format!("{prefix}.bias_table"), &self.bias_table));
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.q_proj.collect_params_mut(&format!("{prefix}.q"), out);
        self.k_proj.collect_params_mut(&format!("{prefix}.k"), out);
        self.v_proj.collect_params_mut(&format!("{prefix}.v"), out);
        self.out_proj.collect_params_mut(&format!("{prefix}.out"), out);
        out.push((format!("{prefix}.bias_table"), &mut self.bias_table));
    }
    fn collect_bn<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a BatchNormLayer)>) {}
}

/// BN -> expand -> hardswish -> contract. The residual is added by the caller.
pub struct TransformerMlp {
    pub bn: BatchNormLayer,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl TransformerMlp {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(TransformerMlp {
            bn: BatchNormLayer::new(width, BnLayout::ChannelsLast)?,
            fc1: LinearLayer::new(rng, width, width * mlp_ratio, true)?,
            fc2: LinearLayer::new(rng, width * mlp_ratio, width, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<Tensor> {
        let y = self.bn.forward(x, training)?;
        let y = self.fc1.forward(&y)?;
        let y = ops::hardswish(&y);
        self.fc2.forward(&y)
    }
}

impl ParamModule for TransformerMlp {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.bn.collect_params(&format!("{prefix}.bn"), out);
        self.fc1.collect_params(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params(&format!("{prefix}.fc2"), out);
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.bn.collect_params_mut(&format!("{prefix}.bn"), out);
        self.fc1.collect_params_mut(&format!("{prefix}.fc1"), out);
        self.fc2.collect_params_mut(&format!("{prefix}.fc2"), out);
    }
    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNormLayer)>) {
        self.bn.collect_bn(&format!("{prefix}.bn"), out);
    }
}

/// One stage block: an MLP sublayer followed by an MSA sublayer, each with
/// a pre-BN and a residual connection.
pub struct TransformerBlock {
    pub mlp: TransformerMlp,
    pub msa_bn: BatchNormLayer,
    pub attn: AttentionLayer,
}

impl TransformerBlock {
    pub fn new(
        rng: &mut ChaCha8Rng,
        width: usize,
        heads: usize,
        key_dim: usize,
        attn_ratio: usize,
        mlp_ratio: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        Ok(TransformerBlock {
            mlp: TransformerMlp::new(rng, width, mlp_ratio)?,
            msa_bn: BatchNormLayer::new(width, BnLayout::ChannelsLast)?,
            attn: AttentionLayer::new(rng, width, width, heads, key_dim, attn_ratio, grid, false)?,
        })
    }

    pub fn forward(&self, z: &Tensor, training: bool) -> Result<Tensor> {
        let hat = ops::add(&self.mlp.forward(z, training)?, z)?;
        let msa = self.attn.forward(&self.msa_bn.forward(&hat, training)?)?;
        ops::add(&msa, &hat)
    }
}

impl ParamModule for TransformerBlock {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.mlp.collect_params(&format!("{prefix}.mlp"), out);
        self.msa_bn.collect_params(&format!("{prefix}.msa_bn"), out);
        self.attn.collect_params(&format!("{prefix}.attn"), out);
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.mlp.collect_params_mut(&format!("{prefix}.mlp"), out);
        self.msa_bn.collect_params_mut(&format!("{prefix}.msa_bn"), out);
        self.attn.collect_params_mut(&format!("{prefix}.attn"), out);
    }
    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNormLayer)>) {
        self.mlp.collect_bn(&format!("{prefix}.mlp"), out);
        self.msa_bn.collect_bn(&format!("{prefix}.msa_bn"), out);
    }
}

/// Inter-stage downsampling: shrinking attention (stride-2 queries, all
/// keys/values, no residual) into the next stage width, then an MLP block.
pub struct Downsample {
    pub bn: BatchNormLayer,
    pub attn: AttentionLayer,
    pub mlp: TransformerMlp,
}

impl Downsample {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        key_dim: usize,
        attn_ratio: usize,
        mlp_ratio: usize,
        grid: (usize, usize),
    ) -> Result<Self> {
        let heads = c_in / key_dim;
        Ok(Downsample {
            bn: BatchNormLayer::new(c_in, BnLayout::ChannelsLast)?,
            attn: AttentionLayer::new(rng, c_in, c_out, heads, key_dim, attn_ratio, grid, true)?,
            mlp: TransformerMlp::new(rng, c_out, mlp_ratio)?,
        })
    }

    pub fn forward(&self, tokens: &Tensor, training: bool) -> Result<Tensor> {
        let y = self.attn.forward(&self.bn.forward(tokens, training)?)?;
        let m = self.mlp.forward(&y, training)?;
        ops::add(&m, &y)
    }
}

impl ParamModule for Downsample {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.bn.collect_params(&format!("{prefix}.bn"), out);
        self.attn.collect_params(&format!("{prefix}.attn"), out);
        self.mlp.collect_params(&format!("{prefix}.mlp"), out);
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.bn.collect_params_mut(&format!("{prefix}.bn"), out);
        self.attn.collect_params_mut(&format!("{prefix}.attn"), out);
        self.mlp.collect_params_mut(&format!("{prefix}.mlp"), out);
    }
    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNormLayer)>) {
        self.bn.collect_bn(&format!("{prefix}.bn"), out);
        self.mlp.collect_bn(&format!("{prefix}.mlp"), out);
    }
}

/// Four 3x3 stride-2 convolutions, each with BN and hardswish.
pub struct Stem {
    pub layers: Vec<ConvBnAct>,
}

impl Stem {
    pub fn new(rng: &mut ChaCha8Rng, in_channels: usize, widths: [usize; 4]) -> Result<Self> {
        let mut layers = Vec::with_capacity(4);
        let mut c = in_channels;
        for w in widths {
            layers.push(ConvBnAct::new(rng, c, w, 3, 2, 1, Act::Hardswish)?);
            c = w;
        }
        Ok(Stem { layers })
    }

    /// Feature maps at 1/2, 1/4, 1/8 and 1/16 resolution.
    pub fn forward(&self, x: &Tensor, training: bool) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let s2 = self.layers[0].forward(x, training)?;
        let s4 = self.layers[1].forward(&s2, training)?;
        let s8 = self.layers[2].forward(&s4, training)?;
        let s16 = self.layers[3].forward(&s8, training)?;
        Ok((s2, s4, s8, s16))
    }
}

impl ParamModule for Stem {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_params(&format!("{prefix}.{i}"), out);
        }
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_params_mut(&format!("{prefix}.{i}"), out);
        }
    }
    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNormLayer)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect_bn(&format!("{prefix}.{i}"), out);
        }
    }
}

/// Skip features plus the fused bottleneck feature map. `stem_sixteenth`
/// keeps the stem-only 1/16 features separately so the decoder can fall back
/// to a stem projection when the 1/16 skip is ablated.
pub struct EncoderOutput {
    pub skip_half: Tensor,
    pub skip_quarter: Tensor,
    pub skip_eighth: Tensor,
    pub stem_sixteenth: Tensor,
    pub fused_sixteenth: Tensor,
}

/// [n, c, h, w] -> [n, h*w, c]
pub fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let p = ops::permute(x, &[0, 2, 3, 1])?;
    ops::reshape(&p, &[n, h * w, c])
}

/// [n, h*w, c] -> [n, c, h, w]
pub fn tokens_to_map(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = (t.shape()[0], t.shape()[2]);
    let r = ops::reshape(t, &[n, h, w, c])?;
    ops::permute(&r, &[0, 3, 1, 2])
}

pub struct Encoder {
    pub config: EncoderConfig,
    pub stem: Stem,
    pub stages: Vec<Vec<TransformerBlock>>,
    pub downsamples: Vec<Downsample>,
}

impl Encoder {
    pub fn new(rng: &mut ChaCha8Rng, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let stem = Stem::new(rng, config.in_channels, config.stem_widths())?;
        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        if !config.conv_only {
            let grids = config.stage_grids();
            for (i, spec) in config.stages.iter().enumerate() {
                let mut blocks = Vec::with_capacity(spec.depth);
                for _ in 0..spec.depth {
                    blocks.push(TransformerBlock::new(
                        rng,
                        spec.width,
                        spec.heads,
                        config.key_dim,
                        config.attn_ratio,
                        config.mlp_ratio,
                        grids[i],
                    )?);
                }
                stages.push(blocks);
                if i < 2 {
                    downsamples.push(Downsample::new(
                        rng,
                        spec.width,
                        config.stages[i + 1].width,
                        config.key_dim,
                        config.attn_ratio,
                        config.mlp_ratio,
                        grids[i],
                    )?);
                }
            }
        }
        Ok(Encoder { config, stem, stages, downsamples })
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Result<EncoderOutput> {
        if x.ndim() != 4 {
            return Err(Error::shape(format!("encoder: expected [n, c, h, w], got {:?}", x.shape())));
        }
        let (h, w) = (x.shape()[2], x.shape()[3]);
        if (h, w) != self.config.input_size {
            return Err(Error::config(format!(
                "encoder: built for {}x{} input, got {}x{}",
                self.config.input_size.0, self.config.input_size.1, h, w
            )));
        }
        let (s2, s4, s8, s16) = self.stem.forward(x, training)?;
        let fused = if self.config.conv_only {
            s16.clone()
        } else {
            let grids = self.config.stage_grids();
            let mut tokens = map_to_tokens(&s16)?;
            let mut stage_maps = Vec::with_capacity(3);
            for (i, blocks) in self.stages.iter().enumerate() {
                for b in blocks {
                    tokens = b.forward(&tokens, training)?;
                }
                stage_maps.push(tokens_to_map(&tokens, grids[i].0, grids[i].1)?);
                if i < 2 {
                    tokens = self.downsamples[i].forward(&tokens, training)?;
                }
            }
            let up2 = ops::bilinear_resize(&stage_maps[1], grids[0].0, grids[0].1)?;
            let up3 = ops::bilinear_resize(&stage_maps[2], grids[0].0, grids[0].1)?;
            ops::concat(&[&s16, &stage_maps[0], &up2, &up3], 1)?
        };
        Ok(EncoderOutput {
            skip_half: s2,
            skip_quarter: s4,
            skip_eighth: s8,
            stem_sixteenth: s16,
            fused_sixteenth: fused,
        })
    }
}

impl ParamModule for Encoder {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.stem.collect_params(&format!("{prefix}.stem"), out);
        for (i, blocks) in self.stages.iter().enumerate() {
            for (j, b) in blocks.iter().enumerate() {
                b.collect_params(&format!("{prefix}.stage{}.{j}", i + 1), out);
            }
        }
        for (i, d) in self.downsamples.iter().enumerate() {
            d.collect_params(&format!("{prefix}.down{}", i + 1), out);
        }
    }
    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.stem.collect_params_mut(&format!("{prefix}.stem"), out);
        for (i, blocks) in self.stages.iter_mut().enumerate() {
            for (j, b) in blocks.iter_mut().enumerate() {
                b.collect_params_mut(&format!("{prefix}.stage{}.{j}", i + 1), out);
            }
        }
        for (i, d) in self.downsamples.iter_mut().enumerate() {
            d.collect_params_mut(&format!("{prefix}.down{}", i + 1), out);
        }
    }
    fn collect_bn<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNormLayer)>) {
        self.stem.collect_bn(&format!("{prefix}.stem"), out);
        for (i, blocks) in self.stages.iter().enumerate() {
            for (j, b) in blocks.iter().enumerate() {
                b.collect_bn(&format!("{prefix}.stage{}.{j}", i + 1), out);
            }
        }
        for (i, d) in self.downsamples.iter().enumerate() {
            d.collect_bn(&format!("{prefix}.down{}", i + 1), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_config(conv_only: bool) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            stages: [
                StageSpec { width: 8, depth: 1, heads: 2 },
                StageSpec { width: 8, depth: 1, heads: 2 },
                StageSpec { width: 8, depth: 1, heads: 2 },
            ],
            key_dim: 2,
            attn_ratio: 2,
            mlp_ratio: 2,
            conv_only,
            input_size: (64, 64),
        }
    }

    #[test]
    fn offset_index_single_token() {
        let (idx, n) = build_offset_index(1, 1, 1, 1).unwrap();
        assert_eq!(idx, vec![0]);
        assert_eq!(n, 1);
    }

    #[test]
    fn offset_index_2x2_has_9_signed_displacements() {
        let (_, n) = build_offset_index(2, 2, 2, 2).unwrap();
        assert_eq!(n, 9);
    }

    #[test]
    fn offset_index_translation_invariance() {
        // On a 3x3 grid, (0,0)->(1,1) and (1,1)->(2,2) have equal displacement.
        let (idx, _) = build_offset_index(3, 3, 3, 3).unwrap();
        let slot = |q: (usize, usize), k: (usize, usize)| {
            let qi = q.0 * 3 + q.1;
            let ki = k.0 * 3 + k.1;
            idx[qi * 9 + ki]
        };
        assert_eq!(slot((0, 0), (1, 1)), slot((1, 1), (2, 2)));
        assert_ne!(slot((0, 0), (1, 1)), slot((1, 1), (0, 0)));
    }

    #[test]
    fn offset_index_downsampled_queries() {
        let (idx, n) = build_offset_index(2, 2, 1, 1).unwrap();
        assert_eq!(idx.len(), 4);
        // displacements (0,0), (0,-1), (-1,0), (-1,-1) are all distinct
        assert_eq!(n, 4);
    }

    #[test]
    fn stem_shapes_follow_stride_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = tiny_config(true);
        let enc = Encoder::new(&mut rng, cfg).unwrap();
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let (s2, s4, s8, s16) = enc.stem.forward(&x, false).unwrap();
        assert_eq!(s2.shape(), &[1, 1, 32, 32]);
        assert_eq!(s4.shape(), &[1, 2, 16, 16]);
        assert_eq!(s8.shape(), &[1, 4, 8, 8]);
        assert_eq!(s16.shape(), &[1, 8, 4, 4]);
    }

    #[test]
    fn encoder_fused_channels_and_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_config(false);
        assert_eq!(cfg.stage_grids(), [(4, 4), (2, 2), (1, 1)]);
        assert_eq!(cfg.fused_channels(), 8 + 8 + 8 + 8);
        let enc = Encoder::new(&mut rng, cfg).unwrap();
        let x = Tensor::zeros(&[2, 3, 64, 64]);
        let out = enc.forward(&x, false).unwrap();
        assert_eq!(out.fused_sixteenth.shape(), &[2, 32, 4, 4]);
        assert_eq!(out.skip_half.shape(), &[2, 1, 32, 32]);
    }

    #[test]
    fn conv_only_has_no_transformer_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::new(&mut rng, tiny_config(true)).unwrap();
        let mut params = Vec::new();
        enc.collect_params("enc", &mut params);
        assert!(params.iter().all(|(n, _)| n.starts_with("enc.stem")));
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut cfg = tiny_config(true);
        cfg.input_size = (60, 64);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tokens_roundtrip() {
        let x = Tensor::new(&[1, 2, 2, 3], (0..12).map(|i| i as f32).collect()).unwrap();
        let t = map_to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[1, 6, 2]);
        let back = tokens_to_map(&t, 2, 3).unwrap();
        assert_eq!(back.data(), x.data());
    }
}
