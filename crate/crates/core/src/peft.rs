//! LoRA, bottleneck adapters and BitFit over a [`GroundingModel`].
//!
//! Injection freezes every base weight, adds the method's structure to the
//! layers whose [`ModuleTag`] is in the placement set and marks only that
//! structure trainable. All three methods leave the forward output unchanged
//! at injection time: LoRA starts with `B = 0`, adapters with a zero
//! up-projection, and BitFit adds nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Adapter, Builder, GroundingModel, LoraSlots, ModuleTag};
use crate::tensor::{ParamKind, Parameter, Tensor};

pub const DEFAULT_LORA_RANK: usize = 16;

/// Which dense layers a LoRA or adapter placement touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseKind {
    /// Query, key, value and output projections.
    Attention,
    /// The two feed-forward layers of each block.
    FeedForward,
    /// Patch projection and box head.
    Projection,
}

impl DenseKind {
    pub const ALL: [DenseKind; 3] = [DenseKind::Attention, DenseKind::FeedForward, DenseKind::Projection];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PeftMethod {
    Lora { rank: usize, alpha: f64 },
    Adapter { bottleneck: usize },
    BitFit,
}

impl PeftMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PeftMethod::Lora { .. } => "lora",
            PeftMethod::Adapter { .. } => "adapter",
            PeftMethod::BitFit => "bitfit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeftSpec {
    pub method: PeftMethod,
    pub placement: BTreeSet<ModuleTag>,
    #[serde(default = "all_kinds")]
    pub layer_kinds: BTreeSet<DenseKind>,
}

fn all_kinds() -> BTreeSet<DenseKind> {
    DenseKind::ALL.into_iter().collect()
}

impl PeftSpec {
    pub fn new(method: PeftMethod, placement: impl IntoIterator<Item = ModuleTag>) -> Self {
        Self { method, placement: placement.into_iter().collect(), layer_kinds: all_kinds() }
    }

    pub fn lora(rank: usize, placement: impl IntoIterator<Item = ModuleTag>) -> Self {
        Self::new(PeftMethod::Lora { rank, alpha: 1.0 }, placement)
    }

    pub fn adapter(bottleneck: usize, placement: impl IntoIterator<Item = ModuleTag>) -> Self {
        Self::new(PeftMethod::Adapter { bottleneck }, placement)
    }

    pub fn bitfit(placement: impl IntoIterator<Item = ModuleTag>) -> Self {
        Self::new(PeftMethod::BitFit, placement)
    }

    pub fn validate(&self) -> Result<()> {
        if self.placement.is_empty() {
            return Err(Error::Spec("placement must name at least one module".into()));
        }
        match self.method {
            PeftMethod::Lora { rank, alpha } => {
                if rank == 0 {
                    return Err(Error::Spec("LoRA rank must be at least 1".into()));
                }
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::Spec(format!("LoRA scale must be positive, got {alpha}")));
                }
            }
            PeftMethod::Adapter { bottleneck } if bottleneck == 0 => {
                return Err(Error::Spec("adapter bottleneck must be at least 1".into()));
            }
            _ => {}
        }
        if self.layer_kinds.is_empty() && !matches!(self.method, PeftMethod::BitFit) {
            return Err(Error::Spec("layer_kinds must not be empty".into()));
        }
        Ok(())
    }
}

/// Seed for injected parameters, derived from the base model seed so that
/// injection is reproducible.
fn injection_rng(model: &GroundingModel) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(model.config.seed ^ 0x5eed_1a7e_0f_ad_a9e7)
}

/// Adds the PEFT structure described by `spec` to `model` in place.
pub fn inject(model: &mut GroundingModel, spec: &PeftSpec) -> Result<()> {
    spec.validate()?;
    if model.peft.is_some() {
        return Err(Error::State("model already carries PEFT structure".into()));
    }
    if has_lora(model) || has_adapters(model) {
        return Err(Error::State("model already carries PEFT layers".into()));
    }
    model.set_all_trainable(false);

    let mut rng = injection_rng(model);
    let GroundingModel { params, tags, arch, .. } = model;
    let mut b = Builder { params, tags, rng: &mut rng };

    match spec.method {
        PeftMethod::Lora { rank, alpha } => {
            for (dense, tag) in arch.dense_layers_mut() {
                if !spec.placement.contains(&tag) || !spec.layer_kinds.contains(&dense.kind) {
                    continue;
                }
                let a_init = b.gaussian(&[dense.d_out, rank], 1.0 / (rank as f64).sqrt());
                let a = b.add(format!("{}.lora_a", dense.path), a_init, ParamKind::Weight, tag)?;
                let b_init = Tensor::zeros(&[rank, dense.d_in]);
                let bb = b.add(format!("{}.lora_b", dense.path), b_init, ParamKind::Weight, tag)?;
                dense.lora = Some(LoraSlots { a, b: bb, scale: alpha });
            }
        }
        PeftMethod::Adapter { bottleneck } => {
            for (block, tag) in arch.blocks_mut() {
                if !spec.placement.contains(&tag) {
                    continue;
                }
                let d = block.attn.o.d_out;
                let mut make = |name: &str| -> Result<Adapter> {
                    let path = format!("{}.{name}", block.path);
                    let down =
                        b.dense(&format!("{path}.down"), d, bottleneck, DenseKind::Projection, tag)?;
                    let up = b.dense_with(
                        &format!("{path}.up"),
                        Tensor::zeros(&[d, bottleneck]),
                        bottleneck,
                        d,
                        DenseKind::Projection,
                        tag,
                    )?;
                    Ok(Adapter { down, up })
                };
                if spec.layer_kinds.contains(&DenseKind::Attention) {
                    block.attn_adapter = Some(make("attn_adapter")?);
                }
                if spec.layer_kinds.contains(&DenseKind::FeedForward) {
                    block.ffn_adapter = Some(make("ffn_adapter")?);
                }
            }
        }
        PeftMethod::BitFit => {
            for (p, tag) in b.params.iter_mut().zip(b.tags.iter()) {
                p.trainable = p.kind == ParamKind::Bias && spec.placement.contains(tag);
            }
        }
    }
    model.peft = Some(spec.clone());
    Ok(())
}

/// Returns an injected copy, leaving `model` untouched.
pub fn injected(model: &GroundingModel, spec: &PeftSpec) -> Result<GroundingModel> {
    let mut copy = model.clone();
    inject(&mut copy, spec)?;
    Ok(copy)
}

pub fn has_lora(model: &GroundingModel) -> bool {
    let mut arch = model.arch.clone();
    arch.dense_layers_mut().iter().any(|(d, _)| d.lora.is_some())
}

fn has_adapters(model: &GroundingModel) -> bool {
    let mut arch = model.arch.clone();
    arch.blocks_mut().iter().any(|(b, _)| b.attn_adapter.is_some() || b.ffn_adapter.is_some())
}

/// Folds every LoRA branch into its base weight, `W ← W + scale·A·B`, and
/// removes the LoRA parameters. The result is a plain, fully trainable model.
pub fn merge_lora(model: &mut GroundingModel) -> Result<()> {
    if !has_lora(model) {
        return Err(Error::State("model has no LoRA layers to merge".into()));
    }
    let GroundingModel { params, tags, arch, .. } = model;
    let mut removed = Vec::new();
    for (dense, _) in arch.dense_layers_mut() {
        let Some(lora) = dense.lora.take() else { continue };
        let a = params.get(lora.a).tensor.data().to_vec();
        let bm = params.get(lora.b).tensor.data().to_vec();
        let rank = bm.len() / dense.d_in;
        let w = params.get_mut(dense.weight).tensor.data_mut();
        for i in 0..dense.d_out {
            for j in 0..dense.d_in {
                let mut delta = 0.0;
                for k in 0..rank {
                    delta += a[i * rank + k] * bm[k * dense.d_in + j];
                }
                w[i * dense.d_in + j] += lora.scale * delta;
            }
        }
        removed.push(lora.a);
        removed.push(lora.b);
    }
    let remap = params.remove(&removed);
    *tags = tags.iter().enumerate().filter(|(i, _)| remap[*i].is_some()).map(|(_, t)| *t).collect();
    arch.visit_ids_mut(&mut |id| *id = remap[*id].expect("merged model references a removed parameter"));
    model.peft = None;
    model.set_all_trainable(true);
    Ok(())
}

/// Efficiency as the percentage of frozen parameters:
/// `100 − trainable / total × 100`.
pub fn efficiency(trainable: usize, total: usize) -> f64 {
    if total == 0 {
        return 100.0;
    }
    100.0 - (trainable as f64 / total as f64 * 100.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCount {
    pub total: usize,
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub total: usize,
    pub trainable: usize,
    pub per_tag: BTreeMap<ModuleTag, TagCount>,
    pub efficiency: f64,
}

impl ParamReport {
    pub fn from_counts(trainable: usize, total: usize) -> Self {
        Self { total, trainable, per_tag: BTreeMap::new(), efficiency: efficiency(trainable, total) }
    }

    /// Efficiency rounded to two decimals, as printed.
    pub fn efficiency_str(&self) -> String {
        format!("{:.2}", self.efficiency)
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "total parameters:     {}", self.total)?;
        writeln!(f, "trainable parameters: {}", self.trainable)?;
        for (tag, c) in &self.per_tag {
            writeln!(f, "  {:<14} {:>9} total {:>9} trainable", tag.display_name(), c.total, c.trainable)?;
        }
        writeln!(f, "efficiency:           {}", self.efficiency_str())
    }
}

/// Counts parameter elements, overall and per module tag.
pub fn param_report(model: &GroundingModel) -> ParamReport {
    let mut per_tag: BTreeMap<ModuleTag, TagCount> = ModuleTag::ALL.iter().map(|&t| (t, TagCount::default())).collect();
    for (id, p) in model.params().iter().enumerate() {
        let c = per_tag.get_mut(&model.tag_of(id)).unwrap();
        c.total += p.numel();
        if p.trainable {
            c.trainable += p.numel();
        }
    }
    let total = per_tag.values().map(|c| c.total).sum();
    let trainable = per_tag.values().map(|c| c.trainable).sum();
    ParamReport { total, trainable, per_tag, efficiency: efficiency(trainable, total) }
}

/// Injects `method` under each placement into a fresh copy of `model` and
/// reports parameter counts. `model` itself is not modified.
pub fn placement_sweep(
    model: &GroundingModel,
    method: &PeftMethod,
    placements: &[BTreeSet<ModuleTag>],
) -> Result<Vec<ParamReport>> {
    placements
        .iter()
        .map(|placement| {
            let spec = PeftSpec { method: method.clone(), placement: placement.clone(), layer_kinds: all_kinds() };
            Ok(param_report(&injected(model, &spec)?))
        })
        .collect()
}

/// The four placements of the LoRA ablation: image encoder, decoder, image
/// encoder + decoder, and both encoders + decoder.
pub fn ablation_placements() -> Vec<BTreeSet<ModuleTag>> {
    use ModuleTag::*;
    vec![
        [ImageEncoder].into_iter().collect(),
        [Decoder].into_iter().collect(),
        [ImageEncoder, Decoder].into_iter().collect(),
        [TextEncoder, ImageEncoder, Decoder].into_iter().collect(),
    ]
}

pub fn placement_label(placement: &BTreeSet<ModuleTag>) -> String {
    use ModuleTag::*;
    let has = |t| placement.contains(&t);
    match (has(TextEncoder), has(ImageEncoder), has(Decoder)) {
        (true, true, true) => "Encoders + Decoder".into(),
        (true, true, false) => "Encoders".into(),
        _ => placement.iter().map(|t| t.display_name()).collect::<Vec<_>>().join(" + "),
    }
}

/// Parses `text,image,decoder` style lists.
pub fn parse_placement(s: &str) -> Result<BTreeSet<ModuleTag>> {
    let set = s.split(['+', ',']).filter(|p| !p.trim().is_empty()).map(str::parse).collect::<Result<BTreeSet<_>>>()?;
    if set.is_empty() {
        return Err(Error::Spec(format!("empty placement `{s}`")));
    }
    Ok(set)
}

/// Plain-text sweep table, one row per placement.
pub fn render_sweep(placements: &[BTreeSet<ModuleTag>], reports: &[ParamReport]) -> String {
    let mut out = format!("{:<26} | {:>10} | {:>10} | {:>10}\n", "Methods", "Efficiency", "Trainable", "Total");
    out.push_str(&format!("{}\n", "-".repeat(66)));
    for (p, r) in placements.iter().zip(reports) {
        out.push_str(&format!(
            "{:<26} | {:>10} | {:>10} | {:>10}\n",
            placement_label(p),
            r.efficiency_str(),
            r.trainable,
            r.total
        ));
    }
    out
}

/// Paths and values of the trainable parameters, the content of a delta.
pub fn trainable_params(model: &GroundingModel) -> Vec<&Parameter> {
    model.params().iter().filter(|p| p.trainable).collect()
}
