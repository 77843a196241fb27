//! Desk-scale grounding transformer: a text encoder, an image encoder over a
//! grid of patch features, and a single-query decoder with a box head.
//!
//! Layer structs hold parameter ids into the model's [`ParamSet`]; the forward
//! pass binds the whole set onto a [`Tape`] once and indexes the bound vars.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::peft::{DenseKind, PeftSpec};
use crate::tensor::{ParamKind, ParamSet, Parameter, Tensor};

/// Longest token sequence the text encoder accepts.
pub const MAX_TEXT_LEN: usize = 32;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_text_layers: usize,
    pub n_image_layers: usize,
    pub n_dec_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub patch_grid: usize,
    pub patch_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 4,
            n_text_layers: 1,
            n_image_layers: 1,
            n_dec_layers: 1,
            ffn_dim: 64,
            vocab_size: 64,
            patch_grid: 8,
            patch_dim: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_text_layers", self.n_text_layers),
            ("n_image_layers", self.n_image_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("patch_grid", self.patch_grid),
            ("patch_dim", self.patch_dim),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(Error::Config { field, reason: "must be at least 1".into() });
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config {
                field: "n_heads",
                reason: format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            });
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }
}

/// The three submodules a PEFT placement policy chooses from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleTag {
    TextEncoder,
    ImageEncoder,
    Decoder,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 3] = [ModuleTag::TextEncoder, ModuleTag::ImageEncoder, ModuleTag::Decoder];

    pub fn short_name(self) -> &'static str {
        match self {
            ModuleTag::TextEncoder => "text",
            ModuleTag::ImageEncoder => "image",
            ModuleTag::Decoder => "decoder",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            ModuleTag::TextEncoder => "Text Encoder",
            ModuleTag::ImageEncoder => "Image Encoder",
            ModuleTag::Decoder => "Decoder",
        }
    }
}

impl fmt::Display for ModuleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for ModuleTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" | "text_encoder" | "textencoder" => Ok(ModuleTag::TextEncoder),
            "image" | "image_encoder" | "imageencoder" => Ok(ModuleTag::ImageEncoder),
            "decoder" | "dec" => Ok(ModuleTag::Decoder),
            other => Err(Error::Spec(format!("unknown module `{other}` (expected text, image or decoder)"))),
        }
    }
}

/// Normalized box: center and size as fractions of the image extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { cx: v[0], cy: v[1], w: v[2], h: v[3] }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LoraSlots {
    pub a: usize,
    pub b: usize,
    pub scale: f64,
}

/// Fully connected layer `y = x·Wᵀ + b`, optionally carrying a LoRA branch.
#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub path: String,
    pub weight: usize,
    pub bias: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub kind: DenseKind,
    pub lora: Option<LoraSlots>,
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub o: Dense,
}

/// Bottleneck adapter `h + up(gelu(down(h)))` on a sublayer output.
#[derive(Clone, Debug)]
pub(crate) struct Adapter {
    pub down: Dense,
    pub up: Dense,
}

/// Pre-norm transformer block. Encoders use it as self-attention; the
/// decoder uses it as cross-attention from the query onto the memory.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub path: String,
    pub ln1: Norm,
    pub attn: Attention,
    pub attn_adapter: Option<Adapter>,
    pub ln2: Norm,
    pub w1: Dense,
    pub w2: Dense,
    pub ffn_adapter: Option<Adapter>,
}

#[derive(Clone, Debug)]
pub(crate) struct TextEncoder {
    pub token_embed: usize,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct ImageEncoder {
    pub patch_proj: Dense,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

#[derive(Clone, Debug)]
pub(crate) struct Decoder {
    pub query: usize,
    pub blocks: Vec<Block>,
    pub norm: Norm,
    pub head_hidden: Dense,
    pub head_out: Dense,
}

#[derive(Clone, Debug)]
pub(crate) struct Arch {
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub decoder: Decoder,
}

impl Arch {
    /// Every base dense layer (adapter projections excluded) with its tag.
    pub fn dense_layers_mut(&mut self) -> Vec<(&mut Dense, ModuleTag)> {
        let mut out = Vec::new();
        for b in &mut self.text.blocks {
            out.extend(b.base_dense_mut().into_iter().map(|d| (d, ModuleTag::TextEncoder)));
        }
        out.push((&mut self.image.patch_proj, ModuleTag::ImageEncoder));
        for b in &mut self.image.blocks {
            out.extend(b.base_dense_mut().into_iter().map(|d| (d, ModuleTag::ImageEncoder)));
        }
        for b in &mut self.decoder.blocks {
            out.extend(b.base_dense_mut().into_iter().map(|d| (d, ModuleTag::Decoder)));
        }
        out.push((&mut self.decoder.head_hidden, ModuleTag::Decoder));
        out.push((&mut self.decoder.head_out, ModuleTag::Decoder));
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(&mut Block, ModuleTag)> {
        let text = self.text.blocks.iter_mut().map(|b| (b, ModuleTag::TextEncoder));
        let image = self.image.blocks.iter_mut().map(|b| (b, ModuleTag::ImageEncoder));
        let dec = self.decoder.blocks.iter_mut().map(|b| (b, ModuleTag::Decoder));
        text.chain(image).chain(dec).collect()
    }

    /// Applies `f` to every parameter id referenced by the architecture.
    pub fn visit_ids_mut(&mut self, f: &mut impl FnMut(&mut usize)) {
        fn dense(d: &mut Dense, f: &mut impl FnMut(&mut usize)) {
            f(&mut d.weight);
            f(&mut d.bias);
            if let Some(l) = &mut d.lora {
                f(&mut l.a);
                f(&mut l.b);
            }
        }
        fn norm(n: &mut Norm, f: &mut impl FnMut(&mut usize)) {
            f(&mut n.gamma);
            f(&mut n.beta);
        }
        fn block(b: &mut Block, f: &mut impl FnMut(&mut usize)) {
            norm(&mut b.ln1, f);
            norm(&mut b.ln2, f);
            for d in b.base_dense_mut() {
                dense(d, f);
            }
            for a in [&mut b.attn_adapter, &mut b.ffn_adapter].into_iter().flatten() {
                dense(&mut a.down, f);
                dense(&mut a.up, f);
            }
        }
        f(&mut self.text.token_embed);
        self.text.blocks.iter_mut().for_each(|b| block(b, f));
        norm(&mut self.text.norm, f);
        dense(&mut self.image.patch_proj, f);
        self.image.blocks.iter_mut().for_each(|b| block(b, f));
        norm(&mut self.image.norm, f);
        f(&mut self.decoder.query);
        self.decoder.blocks.iter_mut().for_each(|b| block(b, f));
        norm(&mut self.decoder.norm, f);
        dense(&mut self.decoder.head_hidden, f);
        dense(&mut self.decoder.head_out, f);
    }
}

impl Block {
    pub fn base_dense_mut(&mut self) -> [&mut Dense; 6] {
        let Attention { q, k, v, o } = &mut self.attn;
        [q, k, v, o, &mut self.w1, &mut self.w2]
    }
}

/// Named-parameter grounding model.
#[derive(Clone, Debug)]
pub struct GroundingModel {
    pub(crate) config: ModelConfig,
    pub(crate) params: ParamSet,
    pub(crate) tags: Vec<ModuleTag>,
    pub(crate) arch: Arch,
    pub(crate) peft: Option<PeftSpec>,
}

/// Parameter registration during construction and injection.
pub(crate) struct Builder<'a> {
    pub params: &'a mut ParamSet,
    pub tags: &'a mut Vec<ModuleTag>,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    pub fn add(&mut self, path: String, tensor: Tensor, kind: ParamKind, tag: ModuleTag) -> Result<usize> {
        let id = self.params.push(Parameter::new(path, tensor, kind)?)?;
        self.tags.push(tag);
        Ok(id)
    }

    pub fn gaussian(&mut self, shape: &[usize], std: f64) -> Tensor {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(self.rng)).collect();
        Tensor::new(shape, data).expect("gaussian: invalid shape")
    }

    pub fn dense(&mut self, path: &str, d_in: usize, d_out: usize, kind: DenseKind, tag: ModuleTag) -> Result<Dense> {
        let w = self.gaussian(&[d_out, d_in], 1.0 / (d_in as f64).sqrt());
        self.dense_with(path, w, d_in, d_out, kind, tag)
    }

    pub fn dense_with(
        &mut self,
        path: &str,
        w: Tensor,
        d_in: usize,
        d_out: usize,
        kind: DenseKind,
        tag: ModuleTag,
    ) -> Result<Dense> {
        let weight = self.add(format!("{path}.weight"), w, ParamKind::Weight, tag)?;
        let bias = self.add(format!("{path}.bias"), Tensor::zeros(&[d_out]), ParamKind::Bias, tag)?;
        Ok(Dense { path: path.to_string(), weight, bias, d_in, d_out, kind, lora: None })
    }

    fn norm(&mut self, path: &str, d: usize, tag: ModuleTag) -> Result<Norm> {
        let gamma = self.add(format!("{path}.weight"), Tensor::full(&[d], 1.0), ParamKind::Weight, tag)?;
        let beta = self.add(format!("{path}.bias"), Tensor::zeros(&[d]), ParamKind::Bias, tag)?;
        Ok(Norm { gamma, beta })
    }

    fn block(&mut self, path: &str, cfg: &ModelConfig, tag: ModuleTag, attn_name: &str) -> Result<Block> {
        let d = cfg.d_model;
        let ln1 = self.norm(&format!("{path}.ln1"), d, tag)?;
        let attn = Attention {
            q: self.dense(&format!("{path}.{attn_name}.q"), d, d, DenseKind::Attention, tag)?,
            k: self.dense(&format!("{path}.{attn_name}.k"), d, d, DenseKind::Attention, tag)?,
            v: self.dense(&format!("{path}.{attn_name}.v"), d, d, DenseKind::Attention, tag)?,
            o: self.dense(&format!("{path}.{attn_name}.o"), d, d, DenseKind::Attention, tag)?,
        };
        let ln2 = self.norm(&format!("{path}.ln2"), d, tag)?;
        let w1 = self.dense(&format!("{path}.ffn.w1"), d, cfg.ffn_dim, DenseKind::FeedForward, tag)?;
        let w2 = self.dense(&format!("{path}.ffn.w2"), cfg.ffn_dim, d, DenseKind::FeedForward, tag)?;
        Ok(Block {
            path: path.to_string(),
            ln1,
            attn,
            attn_adapter: None,
            ln2,
            w1,
            w2,
            ffn_adapter: None,
        })
    }
}

impl GroundingModel {
    /// Deterministically initializes a model from `config.seed`: Gaussian
    /// weights scaled by `1/sqrt(fan_in)`, unit-variance embeddings and
    /// query, unit layer-norm gains and zero biases. Everything is trainable.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let d = cfg.d_model;
        let mut params = ParamSet::new();
        let mut tags = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut b = Builder { params: &mut params, tags: &mut tags, rng: &mut rng };

        let embed = b.gaussian(&[cfg.vocab_size, d], 1.0);
        let token_embed = b.add("text_encoder.token_embed.weight".into(), embed, ParamKind::Weight, ModuleTag::TextEncoder)?;
        let text_blocks = (0..cfg.n_text_layers)
            .map(|i| b.block(&format!("text_encoder.block{i}"), &cfg, ModuleTag::TextEncoder, "attn"))
            .collect::<Result<_>>()?;
        let text = TextEncoder { token_embed, blocks: text_blocks, norm: b.norm("text_encoder.norm", d, ModuleTag::TextEncoder)? };

        let patch_proj = b.dense("image_encoder.patch_proj", cfg.patch_dim, d, DenseKind::Projection, ModuleTag::ImageEncoder)?;
        let image_blocks = (0..cfg.n_image_layers)
            .map(|i| b.block(&format!("image_encoder.block{i}"), &cfg, ModuleTag::ImageEncoder, "attn"))
            .collect::<Result<_>>()?;
        let image = ImageEncoder { patch_proj, blocks: image_blocks, norm: b.norm("image_encoder.norm", d, ModuleTag::ImageEncoder)? };

        let q = b.gaussian(&[1, d], 1.0);
        let query = b.add("decoder.query".into(), q, ParamKind::Weight, ModuleTag::Decoder)?;
        let dec_blocks = (0..cfg.n_dec_layers)
            .map(|i| b.block(&format!("decoder.layer{i}"), &cfg, ModuleTag::Decoder, "cross_attn"))
            .collect::<Result<_>>()?;
        let norm = b.norm("decoder.norm", d, ModuleTag::Decoder)?;
        let head_hidden = b.dense("decoder.box_head.hidden", d, d, DenseKind::Projection, ModuleTag::Decoder)?;
        let head_out = b.dense("decoder.box_head.out", d, 4, DenseKind::Projection, ModuleTag::Decoder)?;
        let decoder = Decoder { query, blocks: dec_blocks, norm, head_hidden, head_out };

        Ok(Self { config: cfg, params, tags, arch: Arch { text, image, decoder }, peft: None })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn tag_of(&self, id: usize) -> ModuleTag {
        self.tags[id]
    }

    pub fn tag_of_path(&self, path: &str) -> Option<ModuleTag> {
        self.params.id_of(path).map(|id| self.tags[id])
    }

    pub fn peft_spec(&self) -> Option<&PeftSpec> {
        self.peft.as_ref()
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Parameter::numel).sum()
    }

    /// Marks every parameter trainable (full fine-tuning) or frozen.
    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() || tokens.len() > MAX_TEXT_LEN {
            return Err(Error::Input(format!(
                "token sequence length {} outside 1..={MAX_TEXT_LEN}",
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary (size {})",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_patches(&self, patches: &Tensor) -> Result<()> {
        let want = [self.config.n_patches(), self.config.patch_dim];
        if patches.shape() != want {
            return Err(Error::Input(format!(
                "patch block has shape {:?}, expected {want:?}",
                patches.shape()
            )));
        }
        Ok(())
    }

    pub(crate) fn dense_forward(&self, tape: &mut Tape, vars: &[Var], d: &Dense, x: Var) -> Result<Var> {
        let mut y = tape.matmul_nt(x, vars[d.weight])?;
        if let Some(lora) = &d.lora {
            let down = tape.matmul_nt(x, vars[lora.b])?;
            let up = tape.matmul_nt(down, vars[lora.a])?;
            let up = tape.scale(up, lora.scale)?;
            y = tape.add(y, up)?;
        }
        tape.add_bias(y, vars[d.bias])
    }

    fn norm_forward(&self, tape: &mut Tape, vars: &[Var], n: &Norm, x: Var) -> Result<Var> {
        tape.layer_norm(x, vars[n.gamma], vars[n.beta], LN_EPS)
    }

    fn adapter_forward(&self, tape: &mut Tape, vars: &[Var], a: &Option<Adapter>, h: Var) -> Result<Var> {
        let Some(a) = a else { return Ok(h) };
        let z = self.dense_forward(tape, vars, &a.down, h)?;
        let z = tape.gelu(z)?;
        let z = self.dense_forward(tape, vars, &a.up, z)?;
        tape.add(h, z)
    }

    fn attention(&self, tape: &mut Tape, vars: &[Var], at: &Attention, xq: Var, xkv: Var) -> Result<Var> {
        let q = self.dense_forward(tape, vars, &at.q, xq)?;
        let k = self.dense_forward(tape, vars, &at.k, xkv)?;
        let v = self.dense_forward(tape, vars, &at.v, xkv)?;
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let weights = tape.softmax(scores, 1)?;
            outs.push(tape.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.dense_forward(tape, vars, &at.o, merged)
    }

    /// One pre-norm block. `memory == None` means self-attention.
    fn block_forward(&self, tape: &mut Tape, vars: &[Var], b: &Block, x: Var, memory: Option<Var>) -> Result<Var> {
        let h = self.norm_forward(tape, vars, &b.ln1, x)?;
        let a = self.attention(tape, vars, &b.attn, h, memory.unwrap_or(h))?;
        let a = self.adapter_forward(tape, vars, &b.attn_adapter, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm_forward(tape, vars, &b.ln2, x)?;
        let f = self.dense_forward(tape, vars, &b.w1, h)?;
        let f = tape.gelu(f)?;
        let f = self.dense_forward(tape, vars, &b.w2, f)?;
        let f = self.adapter_forward(tape, vars, &b.ffn_adapter, f)?;
        tape.add(x, f)
    }

    pub(crate) fn text_forward(&self, tape: &mut Tape, vars: &[Var], tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let enc = &self.arch.text;
        let x = tape.embedding(vars[enc.token_embed], tokens)?;
        let pos = tape.constant(text_positions(tokens.len(), self.config.d_model));
        let mut x = tape.add(x, pos)?;
        for b in &enc.blocks {
            x = self.block_forward(tape, vars, b, x, None)?;
        }
        self.norm_forward(tape, vars, &enc.norm, x)
    }

    pub(crate) fn image_forward(&self, tape: &mut Tape, vars: &[Var], patches: &Tensor) -> Result<Var> {
        self.check_patches(patches)?;
        let enc = &self.arch.image;
        let p = tape.constant(patches.clone());
        let x = self.dense_forward(tape, vars, &enc.patch_proj, p)?;
        let pos = tape.constant(grid_positions(self.config.patch_grid, self.config.d_model));
        let mut x = tape.add(x, pos)?;
        for b in &enc.blocks {
            x = self.block_forward(tape, vars, b, x, None)?;
        }
        self.norm_forward(tape, vars, &enc.norm, x)
    }

    /// Records the full forward pass and returns the `[1×4]` normalized box.
    ///
    /// The decoder query is the learned query plus the mean text feature; it
    /// then cross-attends over the concatenated text and image features.
    pub fn forward_box(&self, tape: &mut Tape, vars: &[Var], patches: &Tensor, tokens: &[usize]) -> Result<Var> {
        let text = self.text_forward(tape, vars, tokens)?;
        let image = self.image_forward(tape, vars, patches)?;
        let dec = &self.arch.decoder;
        let pooled = tape.mean_rows(text)?;
        let mut q = tape.add(vars[dec.query], pooled)?;
        let memory = tape.concat_rows(&[text, image])?;
        for b in &dec.blocks {
            q = self.block_forward(tape, vars, b, q, Some(memory))?;
        }
        let h = self.norm_forward(tape, vars, &dec.norm, q)?;
        let h = self.dense_forward(tape, vars, &dec.head_hidden, h)?;
        let h = tape.gelu(h)?;
        let logits = self.dense_forward(tape, vars, &dec.head_out, h)?;
        tape.sigmoid(logits)
    }

    pub fn encode_text(&self, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params);
        let out = self.text_forward(&mut tape, &vars, tokens)?;
        Ok(tape.value(out).clone())
    }

    pub fn encode_image(&self, patches: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params);
        let out = self.image_forward(&mut tape, &vars, patches)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict_box(&self, patches: &Tensor, tokens: &[usize]) -> Result<NormBox> {
        let mut tape = Tape::new();
        let vars = tape.bind(&self.params);
        let out = self.forward_box(&mut tape, &vars, patches, tokens)?;
        Ok(NormBox::from_slice(tape.data(out)))
    }
}

/// Fixed 1-D sinusoidal positions, `[len×d]`.
pub fn text_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, d], data).expect("positive dims")
}

/// Fixed 2-D sinusoidal positions for a `G×G` patch grid in row-major order,
/// `[G²×d]`. The first half of the channels encodes the column, the second
/// half the row, at frequencies `π(j+1)/2` over cell centers in `(0, 1)`.
pub fn grid_positions(grid: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = vec![0.0; grid * grid * d];
    for row in 0..grid {
        for col in 0..grid {
            let u = (col as f64 + 0.5) / grid as f64;
            let v = (row as f64 + 0.5) / grid as f64;
            let cell = row * grid + col;
            for c in 0..2 * half {
                let (coord, k) = if c < half { (u, c) } else { (v, c - half) };
                let omega = std::f64::consts::PI * ((k / 2) as f64 + 1.0) / 2.0;
                data[cell * d + c] = if k % 2 == 0 { (omega * coord).sin() } else { (omega * coord).cos() };
            }
        }
    }
    Tensor::new(&[grid * grid, d], data).expect("positive dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patches(cfg: &ModelConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let n = cfg.n_patches() * cfg.patch_dim;
        Tensor::new(&[cfg.n_patches(), cfg.patch_dim], (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
    }

    /// Closed-form count from the architecture listing.
    fn expected_count(c: &ModelConfig) -> usize {
        let d = c.d_model;
        let ln = 2 * d;
        let dense = |i: usize, o: usize| o * i + o;
        let block = 2 * ln + 4 * dense(d, d) + dense(d, c.ffn_dim) + dense(c.ffn_dim, d);
        let text = c.vocab_size * d + c.n_text_layers * block + ln;
        let image = dense(c.patch_dim, d) + c.n_image_layers * block + ln;
        let dec = d + c.n_dec_layers * block + ln + dense(d, d) + dense(d, 4);
        text + image + dec
    }

    #[test]
    fn default_parameter_count_is_golden() {
        let cfg = ModelConfig::default();
        assert_eq!(expected_count(&cfg), 29_636);
        assert_eq!(GroundingModel::build(&cfg).unwrap().num_params(), 29_636);
    }

    #[test]
    fn count_matches_formula_across_configs() {
        for (d, h, layers, ffn) in [(8, 2, 2, 16), (12, 3, 1, 7), (16, 1, 3, 32)] {
            let cfg = ModelConfig {
                d_model: d,
                n_heads: h,
                n_text_layers: layers,
                n_image_layers: layers + 1,
                n_dec_layers: layers,
                ffn_dim: ffn,
                vocab_size: 20,
                patch_grid: 3,
                patch_dim: 5,
                seed: 1,
            };
            assert_eq!(GroundingModel::build(&cfg).unwrap().num_params(), expected_count(&cfg));
        }
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = ModelConfig::default();
        let a = GroundingModel::build(&cfg).unwrap();
        let b = GroundingModel::build(&cfg).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.path, q.path);
            assert_eq!(p.tensor.data(), q.tensor.data());
        }
        assert!(a.params().iter().all(|p| p.trainable));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig { d_model: 8, n_heads: 3, ..Default::default() };
        match GroundingModel::build(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "n_heads"),
            other => panic!("expected config error, got {other:?}"),
        }
        let cfg = ModelConfig { ffn_dim: 0, ..Default::default() };
        assert!(matches!(GroundingModel::build(&cfg), Err(Error::Config { field: "ffn_dim", .. })));
    }

    #[test]
    fn tags_partition_parameters() {
        let m = GroundingModel::build(&ModelConfig::default()).unwrap();
        let per_tag: usize = ModuleTag::ALL
            .iter()
            .map(|&t| (0..m.params().len()).filter(|&i| m.tag_of(i) == t).map(|i| m.params().get(i).numel()).sum::<usize>())
            .sum();
        assert_eq!(per_tag, m.num_params());
        assert_eq!(m.tag_of_path("decoder.box_head.out.weight"), Some(ModuleTag::Decoder));
        assert_eq!(m.tag_of_path("image_encoder.patch_proj.bias"), Some(ModuleTag::ImageEncoder));
        assert_eq!(m.tag_of_path("text_encoder.token_embed.weight"), Some(ModuleTag::TextEncoder));
    }

    #[test]
    fn encode_text_contract() {
        let m = GroundingModel::build(&ModelConfig::default()).unwrap();
        let a = m.encode_text(&[3, 5, 7]).unwrap();
        assert_eq!(a.shape(), &[3, 32]);
        let b = m.encode_text(&[7, 5, 3]).unwrap();
        assert_ne!(a.data(), b.data());
        assert_eq!(a.data(), m.encode_text(&[3, 5, 7]).unwrap().data());
        assert!(matches!(m.encode_text(&[64]), Err(Error::Input(_))));
        assert!(m.encode_text(&[]).is_err());
        assert!(m.encode_text(&[1; MAX_TEXT_LEN + 1]).is_err());
    }

    #[test]
    fn encode_image_contract() {
        let cfg = ModelConfig::default();
        let m = GroundingModel::build(&cfg).unwrap();
        let zero = Tensor::zeros(&[64, 16]);
        let out = m.encode_image(&zero).unwrap();
        assert_eq!(out.shape(), &[64, 32]);
        assert!(out.all_finite());
        assert!(m.encode_image(&Tensor::zeros(&[63, 16])).is_err());

        // one foreground cell, then shifted one column right
        let mut img = Tensor::zeros(&[64, 16]);
        img.data_mut()[(2 * 8 + 3) * 16] = 1.0;
        let mut shifted = Tensor::zeros(&[64, 16]);
        shifted.data_mut()[(2 * 8 + 4) * 16] = 1.0;
        let a = m.encode_image(&img).unwrap();
        let b = m.encode_image(&shifted).unwrap();
        assert_ne!(a.row(2 * 8 + 3), b.row(2 * 8 + 3));
        assert_ne!(a.row(2 * 8 + 4), b.row(2 * 8 + 4));
    }

    #[test]
    fn predict_box_in_unit_interval_and_pure() {
        let cfg = ModelConfig::default();
        let m = GroundingModel::build(&cfg).unwrap();
        for seed in 0..5 {
            let p = patches(&cfg, seed);
            let b = m.predict_box(&p, &[1, 2, 3, 4]).unwrap();
            for v in b.to_array() {
                assert!(v > 0.0 && v < 1.0);
            }
            assert_eq!(b, m.predict_box(&p, &[1, 2, 3, 4]).unwrap());
        }
        let again = GroundingModel::build(&cfg).unwrap();
        let p = patches(&cfg, 9);
        assert_eq!(m.predict_box(&p, &[5]).unwrap(), again.predict_box(&p, &[5]).unwrap());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = ModelConfig::default();
        let mut m = GroundingModel::build(&cfg).unwrap();
        let tokens = [1usize, 2, 3, 4, 5, 6];
        for seed in 0..3 {
            let p = patches(&cfg, seed);
            let mut tape = Tape::new();
            let vars = tape.bind(&m.params);
            let out = m.forward_box(&mut tape, &vars, &p, &tokens).unwrap();
            let target = tape.constant(Tensor::new(&[1, 4], vec![0.3, 0.6, 0.2, 0.1]).unwrap());
            let diff = tape.sub(out, target).unwrap();
            let sq = tape.mul(diff, diff).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.backward(loss, &mut m.params).unwrap();
        }
        for p in m.params().iter() {
            let g = p.tensor.grad().unwrap();
            assert!(g.iter().any(|&v| v != 0.0), "dead parameter {}", p.path);
        }
    }

    #[test]
    fn module_tag_parsing() {
        assert_eq!("image".parse::<ModuleTag>().unwrap(), ModuleTag::ImageEncoder);
        assert_eq!("Text".parse::<ModuleTag>().unwrap(), ModuleTag::TextEncoder);
        assert!("backbone".parse::<ModuleTag>().is_err());
    }
}
