//! Multi-slot conditioning: synthetic embedding providers, independent
//! per-slot dropout, and assembly of cross-attention keys plus the global
//! vector that joins the time embedding.
//!
//! Key layout per sample is fixed: `text_a tokens | text_b tokens |
//! image pooled (1 token) | null`. Dropped slots are zeroed in place, so
//! the sequence length never changes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::engine::Tensor;
use crate::error::{invalid, Result};

/// Width of the sinusoidal noise-level features.
pub const TIME_EMBED_DIM: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotName {
    TextA,
    TextB,
    Image,
}

impl SlotName {
    pub const ALL: [SlotName; 3] = [SlotName::TextA, SlotName::TextB, SlotName::Image];

    pub fn as_str(&self) -> &'static str {
        match self {
            SlotName::TextA => "text_a",
            SlotName::TextB => "text_b",
            SlotName::Image => "image",
        }
    }

    fn position(&self) -> usize {
        *self as usize
    }

    /// Whether the slot's pooled vector feeds the global conditioning vector.
    /// The sequence-style `text_b` slot only enters through attention.
    pub fn contributes_global(&self) -> bool {
        !matches!(self, SlotName::TextB)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSlot {
    pub name: SlotName,
    /// `(n_tokens, d_embed)`; may have zero rows.
    pub tokens: Tensor,
    pub pooled: Vec<f64>,
    pub dropout_rate: f64,
    /// Inference-time switch. Disabled slots are zeroed.
    pub enabled: bool,
}

impl EmbeddingSlot {
    pub fn d_embed(&self) -> usize {
        self.pooled.len()
    }

    /// Number of key tokens this slot occupies.
    pub fn key_len(&self) -> usize {
        match self.name {
            SlotName::Image => 1,
            _ => self.tokens.shape()[0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningContext {
    /// `(n_keys, d_embed)`, null token last.
    pub key_tokens: Tensor,
    pub global_vector: Vec<f64>,
    pub active_mask: [bool; 3],
}

/// Assemble one sample's context.
///
/// In training mode each slot is dropped with its own rate using one
/// uniform draw per slot. In inference mode no randomness is consumed and
/// only slots with `enabled == false` are zeroed.
pub fn assemble_context<R: Rng + ?Sized>(
    slots: &[EmbeddingSlot],
    null_token: &[f64],
    training: bool,
    rng: &mut R,
) -> Result<ConditioningContext> {
    let d = null_token.len();
    let mut last = None;
    for s in slots {
        if s.d_embed() != d || (s.tokens.numel() > 0 && s.tokens.shape()[1] != d) {
            return Err(invalid(format!(
                "slot {} has embedding width {}, expected {d}",
                s.name.as_str(),
                s.d_embed()
            )));
        }
        if last.is_some_and(|l| l >= s.name) {
            return Err(invalid("slots must be unique and ordered text_a, text_b, image"));
        }
        last = Some(s.name);
    }
    let mut active_mask = [false; 3];
    let mut rows: Vec<f64> = Vec::new();
    let mut global = vec![0.0; d];
    for s in slots {
        let keep = if training {
            let u: f64 = rng.random();
            u >= s.dropout_rate
        } else {
            s.enabled
        };
        active_mask[s.name.position()] = keep;
        let block: &[f64] = match s.name {
            SlotName::Image => &s.pooled,
            _ => s.tokens.data(),
        };
        if keep {
            rows.extend_from_slice(block);
            if s.name.contributes_global() {
                for (g, p) in global.iter_mut().zip(&s.pooled) {
                    *g += p;
                }
            }
        } else {
            rows.extend(std::iter::repeat_n(0.0, block.len()));
        }
    }
    rows.extend_from_slice(null_token);
    let n = rows.len() / d.max(1);
    Ok(ConditioningContext {
        key_tokens: Tensor::new(vec![n, d], rows)?,
        global_vector: global,
        active_mask,
    })
}

/// Contexts for a batch, stacked along a leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextBatch {
    /// `(batch, n_keys, d_embed)`; the last key row of each sample is the
    /// null slot, which models overwrite with their learned token.
    pub key_tokens: Tensor,
    /// `(batch, d_embed)`.
    pub global: Tensor,
    pub active: Vec<[bool; 3]>,
}

impl ContextBatch {
    pub fn from_contexts(items: &[ConditioningContext]) -> Result<Self> {
        let keys: Vec<Tensor> = items.iter().map(|c| c.key_tokens.clone()).collect();
        let globals: Vec<Tensor> = items
            .iter()
            .map(|c| Tensor::from_vec(c.global_vector.clone()))
            .collect();
        Ok(Self {
            key_tokens: Tensor::stack(&keys)?,
            global: Tensor::stack(&globals)?,
            active: items.iter().map(|c| c.active_mask).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.key_tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_keys(&self) -> usize {
        self.key_tokens.shape()[1]
    }

    pub fn d_embed(&self) -> usize {
        self.key_tokens.shape()[2]
    }

    /// Samples `start..end`.
    pub fn narrow(&self, start: usize, end: usize) -> Self {
        Self {
            key_tokens: self.key_tokens.narrow_rows(start, end),
            global: self.global.narrow_rows(start, end),
            active: self.active[start..end].to_vec(),
        }
    }

    /// A batch of `n` all-zero contexts with `n_keys` keys.
    pub fn empty(n: usize, n_keys: usize, d_embed: usize) -> Self {
        Self {
            key_tokens: Tensor::zeros(&[n, n_keys, d_embed]),
            global: Tensor::zeros(&[n, d_embed]),
            active: vec![[false; 3]; n],
        }
    }
}

/// Sinusoidal features of the noise-conditioning scalar `ln(sigma)/4`.
pub fn time_embedding(noise_cond: f64) -> Vec<f64> {
    let half = TIME_EMBED_DIM / 2;
    let mut out = Vec::with_capacity(TIME_EMBED_DIM);
    for k in 0..half {
        // frequencies from 1 to 100, geometric
        let freq = 100f64.powf(k as f64 / (half - 1) as f64);
        out.push((noise_cond * freq * PI).cos());
    }
    for k in 0..half {
        let freq = 100f64.powf(k as f64 / (half - 1) as f64);
        out.push((noise_cond * freq * PI).sin());
    }
    out
}

pub fn noise_conditioning(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

/// `time_embedding(ln(sigma)/4) + global_vector . projection`, where
/// `projection` is `(d_embed, TIME_EMBED_DIM)`.
pub fn global_time_conditioning(global_vector: &[f64], sigma: f64, projection: &Tensor) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    if projection.shape() != [global_vector.len(), TIME_EMBED_DIM] {
        return Err(invalid(format!(
            "projection shape {:?} does not match global width {}",
            projection.shape(),
            global_vector.len()
        )));
    }
    let mut out = time_embedding(noise_conditioning(sigma));
    for (i, g) in global_vector.iter().enumerate() {
        for (o, p) in out.iter_mut().zip(projection.row(i)) {
            *o += g * p;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProviderKind {
    ClassOnehot,
    DescriptorRandomProjection,
    StyleVector,
}

/// What a dataset exposes about each condition for the synthetic encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionDescriptors {
    /// Per condition, a list of token feature vectors (all the same width).
    pub tokens: Vec<Vec<Vec<f64>>>,
    /// Per condition, one style feature vector.
    pub style: Vec<Vec<f64>>,
}

impl ConditionDescriptors {
    pub fn n_conditions(&self) -> usize {
        self.style.len()
    }
}

fn gaussian_table(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Deterministic stand-in for a pretrained encoder.
#[derive(Clone, Debug)]
pub struct ToyEmbeddingProvider {
    pub kind: ProviderKind,
    pub d_embed: usize,
    pub n_tokens: usize,
    slot: SlotName,
    dropout_rate: f64,
    // one embedded token list + pooled vector per condition
    cache: Vec<(Tensor, Vec<f64>)>,
}

impl ToyEmbeddingProvider {
    pub fn new(
        kind: ProviderKind,
        slot: SlotName,
        descriptors: &ConditionDescriptors,
        d_embed: usize,
        n_tokens: usize,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&dropout_rate) {
            return Err(invalid(format!("dropout rate {dropout_rate} outside [0, 1]")));
        }
        if d_embed == 0 {
            return Err(invalid("embedding width must be positive"));
        }
        let n_cond = descriptors.n_conditions();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kind as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let scale = 1.0 / (d_embed as f64).sqrt();
        let cache = match kind {
            ProviderKind::ClassOnehot => {
                if n_tokens == 0 {
                    return Err(invalid("class_onehot needs at least one token"));
                }
                let table = gaussian_table(&mut rng, n_cond, d_embed, 1.0);
                let pos = gaussian_table(&mut rng, n_tokens, d_embed, 0.1);
                for i in 0..n_cond {
                    for j in 0..i {
                        let c = cosine(&table[i], &table[j]);
                        if c >= 0.99 {
                            return Err(invalid(format!(
                                "class embeddings {i} and {j} too similar (cos {c:.4})"
                            )));
                        }
                    }
                }
                table
                    .iter()
                    .map(|row| {
                        let rows: Vec<Vec<f64>> = (0..n_tokens)
                            .map(|t| {
                                row.iter()
                                    .zip(&pos[t])
                                    .map(|(a, p)| if n_tokens == 1 { *a } else { a + p })
                                    .collect()
                            })
                            .collect();
                        Self::with_pooled(rows, d_embed)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            ProviderKind::DescriptorRandomProjection => {
                if n_tokens < 4 {
                    return Err(invalid(format!(
                        "descriptor provider needs >= 4 tokens, got {n_tokens}"
                    )));
                }
                let feat = descriptors.tokens.iter().flatten().map(Vec::len).max().unwrap_or(0);
                let proj = gaussian_table(&mut rng, feat, d_embed, scale * 2.0);
                let pos = gaussian_table(&mut rng, n_tokens, d_embed, 0.3);
                descriptors
                    .tokens
                    .iter()
                    .map(|toks| {
                        let rows: Vec<Vec<f64>> = (0..n_tokens)
                            .map(|t| {
                                let mut out = pos[t].clone();
                                if let Some(f) = toks.get(t) {
                                    for (k, fv) in f.iter().enumerate() {
                                        for (o, p) in out.iter_mut().zip(&proj[k]) {
                                            *o += fv * p;
                                        }
                                    }
                                }
                                out
                            })
                            .collect();
                        Self::with_pooled(rows, d_embed)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            ProviderKind::StyleVector => {
                let feat = descriptors.style.iter().map(Vec::len).max().unwrap_or(0);
                let proj = gaussian_table(&mut rng, feat, d_embed, scale * 2.0);
                let bias = gaussian_table(&mut rng, 1, d_embed, 0.1).remove(0);
                descriptors
                    .style
                    .iter()
                    .map(|s| {
                        let mut pooled = bias.clone();
                        for (k, fv) in s.iter().enumerate() {
                            for (o, p) in pooled.iter_mut().zip(&proj[k]) {
                                *o += fv * p;
                            }
                        }
                        (Tensor::zeros(&[0, d_embed]), pooled)
                    })
                    .collect()
            }
        };
        Ok(Self {
            kind,
            d_embed,
            n_tokens: if kind == ProviderKind::StyleVector { 0 } else { n_tokens },
            slot,
            dropout_rate,
            cache,
        })
    }

    fn with_pooled(rows: Vec<Vec<f64>>, d: usize) -> Result<(Tensor, Vec<f64>)> {
        let n = rows.len() as f64;
        let mut pooled = vec![0.0; d];
        for r in &rows {
            for (p, v) in pooled.iter_mut().zip(r) {
                *p += v / n;
            }
        }
        Ok((Tensor::from_rows(&rows)?, pooled))
    }

    pub fn n_conditions(&self) -> usize {
        self.cache.len()
    }

    pub fn embed(&self, condition: usize) -> Result<EmbeddingSlot> {
        let (tokens, pooled) = self
            .cache
            .get(condition)
            .ok_or_else(|| invalid(format!("unknown condition id {condition} (have {})", self.cache.len())))?;
        Ok(EmbeddingSlot {
            name: self.slot,
            tokens: tokens.clone(),
            pooled: pooled.clone(),
            dropout_rate: self.dropout_rate,
            enabled: true,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub dim: usize,
    pub text_a_tokens: usize,
    pub text_b_tokens: usize,
    pub dropout_text_a: f64,
    pub dropout_text_b: f64,
    pub dropout_image: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            text_a_tokens: 1,
            text_b_tokens: 4,
            dropout_text_a: 0.2,
            dropout_text_b: 0.25,
            dropout_image: 0.9,
            seed: 1234,
        }
    }
}

/// The three providers bundled, producing batches of contexts.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    providers: Vec<ToyEmbeddingProvider>,
    d_embed: usize,
}

impl ConditionEncoder {
    pub fn new(cfg: &EmbedConfig, descriptors: &ConditionDescriptors) -> Result<Self> {
        let providers = vec![
            ToyEmbeddingProvider::new(
                ProviderKind::ClassOnehot,
                SlotName::TextA,
                descriptors,
                cfg.dim,
                cfg.text_a_tokens,
                cfg.dropout_text_a,
                cfg.seed,
            )?,
            ToyEmbeddingProvider::new(
                ProviderKind::DescriptorRandomProjection,
                SlotName::TextB,
                descriptors,
                cfg.dim,
                cfg.text_b_tokens,
                cfg.dropout_text_b,
                cfg.seed,
            )?,
            ToyEmbeddingProvider::new(
                ProviderKind::StyleVector,
                SlotName::Image,
                descriptors,
                cfg.dim,
                0,
                cfg.dropout_image,
                cfg.seed,
            )?,
        ];
        Ok(Self {
            providers,
            d_embed: cfg.dim,
        })
    }

    pub fn d_embed(&self) -> usize {
        self.d_embed
    }

    pub fn n_conditions(&self) -> usize {
        self.providers[0].n_conditions()
    }

    /// Keys per sample, null token included.
    pub fn n_keys(&self) -> usize {
        self.providers[0].n_tokens + self.providers[1].n_tokens + 2
    }

    /// Key index of the first token of each slot.
    pub fn slot_offsets(&self) -> [usize; 3] {
        let a = self.providers[0].n_tokens;
        let b = self.providers[1].n_tokens;
        [0, a, a + b]
    }

    pub fn slots(&self, condition: usize) -> Result<Vec<EmbeddingSlot>> {
        self.providers.iter().map(|p| p.embed(condition)).collect()
    }

    /// Training batch: independent dropout per slot and sample.
    pub fn training_batch<R: Rng + ?Sized>(&self, conditions: &[usize], rng: &mut R) -> Result<ContextBatch> {
        let null = vec![0.0; self.d_embed];
        let ctxs = conditions
            .iter()
            .map(|&c| assemble_context(&self.slots(c)?, &null, true, rng))
            .collect::<Result<Vec<_>>>()?;
        ContextBatch::from_contexts(&ctxs)
    }

    /// Inference batch with the given slots enabled.
    pub fn inference_batch(&self, conditions: &[usize], enabled: [bool; 3]) -> Result<ContextBatch> {
        let null = vec![0.0; self.d_embed];
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let ctxs = conditions
            .iter()
            .map(|&c| {
                let mut slots = self.slots(c)?;
                for s in &mut slots {
                    s.enabled = enabled[s.name.position()];
                }
                assemble_context(&slots, &null, false, &mut unused)
            })
            .collect::<Result<Vec<_>>>()?;
        ContextBatch::from_contexts(&ctxs)
    }

    pub fn conditional_batch(&self, conditions: &[usize]) -> Result<ContextBatch> {
        self.inference_batch(conditions, [true; 3])
    }

    /// Every slot dropped: the context used for unconditional evaluation.
    pub fn unconditional_batch(&self, n: usize) -> ContextBatch {
        ContextBatch::empty(n, self.n_keys(), self.d_embed)
    }
}
