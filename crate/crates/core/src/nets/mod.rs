//! Trainable raw networks `F`: an MLP for vector data and a two-level patch
//! U-Net for small images. Both use pre-norm residual blocks modulated by a
//! scale-shift derived from the noise level and the global conditioning
//! vector, followed by attention over the context keys.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{
    build_attention_bias, multihead_attention, summarize_probe, AttentionKind, AttentionProbe, LayerBias,
    ProbeRecorder, PwwInput,
};
use crate::conditioning::{time_embedding, ContextBatch, TIME_EMBED_DIM};
use crate::denoiser::{precondition_forward, Denoise, Preconditioning};
use crate::engine::{write_edt_to, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};

pub use checkpoint::{load_checkpoint, manifest_path, save_checkpoint};

const NULL_TOKEN_STD: f64 = 0.02;
const INFERENCE_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Mlp,
    TinyUnet,
}

impl NetKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NetKind::Mlp => "mlp",
            NetKind::TinyUnet => "tiny_unet",
        }
    }
}

impl FromStr for NetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(NetKind::Mlp),
            "tiny_unet" => Ok(NetKind::TinyUnet),
            _ => Err(invalid(format!("unknown network kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserNetSpec {
    pub kind: NetKind,
    /// Flattened sample length. Images are `side * side * channels`,
    /// channels last.
    pub data_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub d_embed: usize,
    pub n_heads: usize,
    pub channels: usize,
    /// Token-grid side lengths that carry attention. The MLP has the single
    /// resolution 1; the U-Net has `side/2` and `side/4`.
    pub attn_levels: Vec<usize>,
    pub seed: u64,
}

impl DenoiserNetSpec {
    pub fn mlp(data_dim: usize, width: usize, depth: usize, d_embed: usize, seed: u64) -> Self {
        Self {
            kind: NetKind::Mlp,
            data_dim,
            width,
            depth,
            d_embed,
            n_heads: 2,
            channels: 1,
            attn_levels: vec![1],
            seed,
        }
    }

    pub fn tiny_unet(side: usize, channels: usize, width: usize, depth: usize, d_embed: usize, seed: u64) -> Self {
        Self {
            kind: NetKind::TinyUnet,
            data_dim: side * side * channels,
            width,
            depth,
            d_embed,
            n_heads: 2,
            channels,
            attn_levels: vec![side / 2, side / 4],
            seed,
        }
    }

    pub fn image_side(&self) -> usize {
        ((self.data_dim / self.channels.max(1)) as f64).sqrt().round() as usize
    }

    /// Token-grid sides at which blocks run.
    pub fn resolutions(&self) -> Vec<usize> {
        match self.kind {
            NetKind::Mlp => vec![1],
            NetKind::TinyUnet => vec![self.image_side() / 2, self.image_side() / 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.d_embed == 0 || self.data_dim == 0 {
            return Err(invalid("width, depth, d_embed and data_dim must be positive"));
        }
        if self.n_heads == 0 || !self.width.is_multiple_of(self.n_heads) {
            return Err(invalid(format!(
                "{} heads do not divide width {}",
                self.n_heads, self.width
            )));
        }
        if self.kind == NetKind::TinyUnet {
            let side = self.image_side();
            if self.channels == 0
                || side * side * self.channels != self.data_dim
                || !side.is_multiple_of(4)
                || side == 0
            {
                return Err(invalid(format!(
                    "tiny_unet needs a square image with side divisible by 4, got data_dim {} with {} channels",
                    self.data_dim, self.channels
                )));
            }
        }
        let res = self.resolutions();
        if let Some(l) = self.attn_levels.iter().find(|l| !res.contains(l)) {
            return Err(invalid(format!(
                "attention level {l} is not one of the resolutions {res:?}"
            )));
        }
        Ok(())
    }

    fn has_attn(&self, res: usize) -> bool {
        self.attn_levels.contains(&res)
    }

    /// Parameter count from the spec alone.
    pub fn param_count(&self) -> usize {
        let (w, e, t) = (self.width, self.d_embed, TIME_EMBED_DIM);
        let block = |cross: bool, selfa: bool| {
            t * w
                + w
                + w * 2 * w
                + 2 * w
                + e * t
                + w * w
                + w
                + if cross { 2 * w * w + 2 * e * w } else { 0 }
                + if selfa { 4 * w * w } else { 0 }
        };
        let d = self.depth;
        match self.kind {
            NetKind::Mlp => {
                let dd = self.data_dim;
                dd * w + w + d * block(self.has_attn(1), false) + w * dd + dd + e
            }
            NetKind::TinyUnet => {
                let p = 4 * self.channels;
                let r = self.resolutions();
                let (a0, a1) = (self.has_attn(r[0]), self.has_attn(r[1]));
                p * w
                    + w
                    + 2 * d * block(a0, a0)
                    + d * block(a1, a1)
                    + 4 * w * w
                    + w
                    + w * 4 * w
                    + 4 * w
                    + w * p
                    + p
                    + e
            }
        }
    }
}

impl fmt::Display for DenoiserNetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let levels: Vec<String> = self.attn_levels.iter().map(usize::to_string).collect();
        write!(
            f,
            "kind={} data_dim={} width={} depth={} d_embed={} n_heads={} channels={} attn_levels={} seed={}",
            self.kind.as_str(),
            self.data_dim,
            self.width,
            self.depth,
            self.d_embed,
            self.n_heads,
            self.channels,
            if levels.is_empty() {
                "none".to_string()
            } else {
                levels.join(",")
            },
            self.seed
        )
    }
}

impl FromStr for DenoiserNetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = DenoiserNetSpec::mlp(2, 64, 2, 16, 0);
        let mut levels_set = false;
        for tok in s.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| invalid(format!("expected key=value, got {tok:?}")))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| invalid(format!("bad value for {k}: {v:?}")))
            };
            match k {
                "kind" => spec.kind = v.parse()?,
                "data_dim" => spec.data_dim = num(v)?,
                "width" => spec.width = num(v)?,
                "depth" => spec.depth = num(v)?,
                "d_embed" => spec.d_embed = num(v)?,
                "n_heads" => spec.n_heads = num(v)?,
                "channels" => spec.channels = num(v)?,
                "seed" => spec.seed = v.parse().map_err(|_| invalid(format!("bad seed {v:?}")))?,
                "attn_levels" => {
                    levels_set = true;
                    spec.attn_levels = if v == "none" {
                        Vec::new()
                    } else {
                        v.split(',').map(num).collect::<Result<_>>()?
                    };
                }
                _ => return Err(invalid(format!("unknown spec key {k:?}"))),
            }
        }
        if !levels_set {
            spec.attn_levels = spec.resolutions();
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Parameters of a raw network, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    spec: DenoiserNetSpec,
    params: BTreeMap<String, Tensor>,
}

/// A model's parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("parameter {name:?} is not bound")))
    }

    /// Replace a bound parameter, e.g. with a probe variable for gradient checks.
    pub fn set(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }
}

struct Init {
    rng: ChaCha8Rng,
    params: BTreeMap<String, Tensor>,
}

impl Init {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal));
        self.params.insert(name, t);
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) {
        self.normal(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt());
    }

    fn zeros(&mut self, name: String, shape: &[usize]) {
        self.params.insert(name, Tensor::zeros(shape));
    }

    fn block(&mut self, p: &str, w: usize, e: usize, cross: bool, selfa: bool) {
        let t = TIME_EMBED_DIM;
        self.weight(format!("{p}.emb.W1"), t, w);
        self.zeros(format!("{p}.emb.b1"), &[w]);
        self.weight(format!("{p}.emb.W2"), w, 2 * w);
        self.zeros(format!("{p}.emb.b2"), &[2 * w]);
        self.weight(format!("{p}.glob.W"), e, t);
        self.weight(format!("{p}.lin.W"), w, w);
        self.zeros(format!("{p}.lin.b"), &[w]);
        if selfa {
            for m in ["Wq", "Wk", "Wv", "Wo"] {
                self.weight(format!("{p}.sattn.{m}"), w, w);
            }
        }
        if cross {
            self.weight(format!("{p}.attn.Wq"), w, w);
            self.weight(format!("{p}.attn.Wk"), e, w);
            self.weight(format!("{p}.attn.Wv"), e, w);
            self.weight(format!("{p}.attn.Wo"), w, w);
        }
    }
}

struct ForwardCtx<'a> {
    time: Var,
    glob: Var,
    keys: Var,
    n_keys: usize,
    pww: Option<&'a PwwInput>,
    sigmas: Vec<f64>,
}

/// Builds a network with deterministic initialization from `spec.seed`.
pub fn build_denoiser(spec: &DenoiserNetSpec) -> Result<DenoiserModel> {
    spec.validate()?;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        params: BTreeMap::new(),
    };
    let (w, e) = (spec.width, spec.d_embed);
    match spec.kind {
        NetKind::Mlp => {
            let d = spec.data_dim;
            init.weight("in.W".into(), d, w);
            init.zeros("in.b".into(), &[w]);
            for k in 0..spec.depth {
                init.block(&format!("block{k}"), w, e, spec.has_attn(1), false);
            }
            init.zeros("out.W".into(), &[w, d]);
            init.zeros("out.b".into(), &[d]);
        }
        NetKind::TinyUnet => {
            let p = 4 * spec.channels;
            let r = spec.resolutions();
            let (a0, a1) = (spec.has_attn(r[0]), spec.has_attn(r[1]));
            init.weight("in.W".into(), p, w);
            init.zeros("in.b".into(), &[w]);
            for k in 0..spec.depth {
                init.block(&format!("enc{k}"), w, e, a0, a0);
            }
            init.weight("down.W".into(), 4 * w, w);
            init.zeros("down.b".into(), &[w]);
            for k in 0..spec.depth {
                init.block(&format!("mid{k}"), w, e, a1, a1);
            }
            init.weight("up.W".into(), w, 4 * w);
            init.zeros("up.b".into(), &[4 * w]);
            for k in 0..spec.depth {
                init.block(&format!("dec{k}"), w, e, a0, a0);
            }
            init.zeros("out.W".into(), &[w, p]);
            init.zeros("out.b".into(), &[p]);
        }
    }
    init.normal("null_token".into(), &[e], NULL_TOKEN_STD);
    Ok(DenoiserModel {
        spec: spec.clone(),
        params: init.params,
    })
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let (fan_in, fan_out) = (tape.shape(w)[0], tape.shape(w)[1]);
    let rows = xs.iter().product::<usize>() / fan_in.max(1);
    let flat = tape.reshape(x, &[rows, fan_in])?;
    let mut y = tape.matmul(flat, w)?;
    if let Some(b) = b {
        let bb = tape.repeat(b, 0, rows)?;
        y = tape.add(y, bb)?;
    }
    let mut out_shape = xs;
    *out_shape.last_mut().expect("non-scalar input") = fan_out;
    Ok(tape.reshape(y, &out_shape)?)
}

impl DenoiserModel {
    pub fn spec(&self) -> &DenoiserNetSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Replace parameter values; names and shapes must match exactly.
    pub fn set_params(&mut self, params: BTreeMap<String, Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (name, t) in &params {
            let cur = self
                .params
                .get(name)
                .ok_or_else(|| invalid(format!("unexpected parameter {name:?}")))?;
            if cur.shape() != t.shape() {
                return Err(invalid(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    t.shape(),
                    cur.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    /// All parameters as concatenated EDT1 dumps in name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for t in self.params.values() {
            write_edt_to(&mut buf, t).expect("writing to a Vec cannot fail");
        }
        buf
    }

    /// Place parameters on the tape, as named trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            let v = if trainable {
                tape.param(name, t.clone())?
            } else {
                tape.constant(t.clone())?
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound { vars })
    }

    fn check_inputs(&self, batch: usize, noise: &[f64], ctx: &ContextBatch) -> Result<()> {
        if noise.len() != batch || ctx.len() != batch {
            return Err(invalid(format!(
                "batch of {batch} rows got {} noise values and {} contexts",
                noise.len(),
                ctx.len()
            )));
        }
        if ctx.d_embed() != self.spec.d_embed || ctx.global.shape() != [batch, self.spec.d_embed] {
            return Err(invalid(format!(
                "context width {} does not match model d_embed {}",
                ctx.d_embed(),
                self.spec.d_embed
            )));
        }
        if ctx.n_keys() == 0 {
            return Err(invalid("context needs at least the null key"));
        }
        Ok(())
    }

    /// Raw network output `F(x_scaled; ctx, noise)` on a tape.
    ///
    /// `x` is `(batch, data_dim)`; `noise` holds `ln(sigma)/4` per row.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        noise: &[f64],
        ctx: &ContextBatch,
        pww: Option<&PwwInput>,
        mut probe: Option<&mut ProbeRecorder>,
    ) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != self.spec.data_dim {
            return Err(invalid(format!(
                "expected input (batch, {}), got {xs:?}",
                self.spec.data_dim
            )));
        }
        let b = xs[0];
        self.check_inputs(b, noise, ctx)?;
        let time: Vec<f64> = noise.iter().flat_map(|&n| time_embedding(n)).collect();
        let time = tape.constant(Tensor::new(vec![b, TIME_EMBED_DIM], time)?)?;
        let glob = tape.constant(ctx.global.clone())?;
        let nk = ctx.n_keys();
        let all_keys = tape.constant(ctx.key_tokens.clone())?;
        let null = p.get("null_token")?;
        let null = tape.reshape(null, &[1, self.spec.d_embed])?;
        let null = tape.repeat(null, 0, b)?;
        let keys = if nk > 1 {
            let body = tape.slice(all_keys, 1, 0, nk - 1)?;
            tape.concat(&[body, null], 1)?
        } else {
            null
        };
        let fc = ForwardCtx {
            time,
            glob,
            keys,
            n_keys: nk,
            pww,
            sigmas: noise.iter().map(|n| (4.0 * n).exp()).collect(),
        };
        match self.spec.kind {
            NetKind::Mlp => self.forward_mlp(tape, p, x, &fc, &mut probe),
            NetKind::TinyUnet => self.forward_unet(tape, p, x, &fc, &mut probe),
        }
    }

    fn forward_mlp(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        fc: &ForwardCtx<'_>,
        probe: &mut Option<&mut ProbeRecorder>,
    ) -> Result<Var> {
        let b = tape.shape(x)[0];
        let x3 = tape.reshape(x, &[b, 1, self.spec.data_dim])?;
        let mut h = linear(tape, x3, p.get("in.W")?, Some(p.get("in.b")?))?;
        for k in 0..self.spec.depth {
            h = self.stage_block(tape, p, &format!("block{k}"), h, 1, false, fc, probe)?;
        }
        let h = tape.layer_norm(h)?;
        let out = linear(tape, h, p.get("out.W")?, Some(p.get("out.b")?))?;
        Ok(tape.reshape(out, &[b, self.spec.data_dim])?)
    }

    fn forward_unet(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        fc: &ForwardCtx<'_>,
        probe: &mut Option<&mut ProbeRecorder>,
    ) -> Result<Var> {
        let b = tape.shape(x)[0];
        let (s, c, w) = (self.spec.image_side(), self.spec.channels, self.spec.width);
        let (r1, r2) = (s / 2, s / 4);
        let t = tape.reshape(x, &[b, r1, 2, r1, 2, c])?;
        let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
        let t = tape.reshape(t, &[b, r1 * r1, 4 * c])?;
        let mut h = linear(tape, t, p.get("in.W")?, Some(p.get("in.b")?))?;
        let selfa1 = self.spec.has_attn(r1);
        let selfa2 = self.spec.has_attn(r2);
        for k in 0..self.spec.depth {
            h = self.stage_block(tape, p, &format!("enc{k}"), h, r1, selfa1, fc, probe)?;
        }
        let skip = h;
        let t = tape.reshape(h, &[b, r2, 2, r2, 2, w])?;
        let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
        let t = tape.reshape(t, &[b, r2 * r2, 4 * w])?;
        h = linear(tape, t, p.get("down.W")?, Some(p.get("down.b")?))?;
        for k in 0..self.spec.depth {
            h = self.stage_block(tape, p, &format!("mid{k}"), h, r2, selfa2, fc, probe)?;
        }
        let t = linear(tape, h, p.get("up.W")?, Some(p.get("up.b")?))?;
        let t = tape.reshape(t, &[b, r2, r2, 2, 2, w])?;
        let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
        let t = tape.reshape(t, &[b, r1 * r1, w])?;
        h = tape.add(t, skip)?;
        for k in 0..self.spec.depth {
            h = self.stage_block(tape, p, &format!("dec{k}"), h, r1, selfa1, fc, probe)?;
        }
        let h = tape.layer_norm(h)?;
        let t = linear(tape, h, p.get("out.W")?, Some(p.get("out.b")?))?;
        let t = tape.reshape(t, &[b, r1, r1, 2, 2, c])?;
        let t = tape.permute(t, &[0, 1, 3, 2, 4, 5])?;
        Ok(tape.reshape(t, &[b, s * s * c])?)
    }

    /// Residual block, then self-attention and cross-attention where the
    /// resolution carries attention.
    #[allow(clippy::too_many_arguments)]
    fn stage_block(
        &self,
        tape: &mut Tape,
        p: &Bound,
        prefix: &str,
        h: Var,
        res: usize,
        self_attn: bool,
        fc: &ForwardCtx<'_>,
        probe: &mut Option<&mut ProbeRecorder>,
    ) -> Result<Var> {
        let mut h = self.res_block(tape, p, prefix, h, fc)?;
        if !self.spec.has_attn(res) {
            return Ok(h);
        }
        if self_attn {
            let n = tape.layer_norm(h)?;
            let q = linear(tape, n, p.get(&format!("{prefix}.sattn.Wq"))?, None)?;
            let k = linear(tape, n, p.get(&format!("{prefix}.sattn.Wk"))?, None)?;
            let v = linear(tape, n, p.get(&format!("{prefix}.sattn.Wv"))?, None)?;
            let a = multihead_attention(
                tape,
                q,
                k,
                v,
                self.spec.n_heads,
                None,
                AttentionKind::SelfAttention,
                probe.as_deref_mut(),
            )?;
            let a = linear(tape, a, p.get(&format!("{prefix}.sattn.Wo"))?, None)?;
            h = tape.add(h, a)?;
        }
        let n = tape.layer_norm(h)?;
        let q = linear(tape, n, p.get(&format!("{prefix}.attn.Wq"))?, None)?;
        let k = linear(tape, fc.keys, p.get(&format!("{prefix}.attn.Wk"))?, None)?;
        let v = linear(tape, fc.keys, p.get(&format!("{prefix}.attn.Wv"))?, None)?;
        let bias = match fc.pww {
            Some(pw) => Some(build_attention_bias(&pw.masks, fc.n_keys, (res, res))?),
            None => None,
        };
        let layer_bias = bias.as_ref().map(|bias| LayerBias {
            bias,
            cfg: fc.pww.expect("bias implies pww").cfg,
            sigmas: &fc.sigmas,
        });
        let a = multihead_attention(
            tape,
            q,
            k,
            v,
            self.spec.n_heads,
            layer_bias.as_ref(),
            AttentionKind::Cross,
            probe.as_deref_mut(),
        )?;
        let a = linear(tape, a, p.get(&format!("{prefix}.attn.Wo"))?, None)?;
        Ok(tape.add(h, a)?)
    }

    fn res_block(&self, tape: &mut Tape, p: &Bound, prefix: &str, h: Var, fc: &ForwardCtx<'_>) -> Result<Var> {
        let w = self.spec.width;
        let n_tok = tape.shape(h)[1];
        let g = tape.matmul(fc.glob, p.get(&format!("{prefix}.glob.W"))?)?;
        let c = tape.add(fc.time, g)?;
        let e = linear(
            tape,
            c,
            p.get(&format!("{prefix}.emb.W1"))?,
            Some(p.get(&format!("{prefix}.emb.b1"))?),
        )?;
        let e = tape.silu(e)?;
        let e = linear(
            tape,
            e,
            p.get(&format!("{prefix}.emb.W2"))?,
            Some(p.get(&format!("{prefix}.emb.b2"))?),
        )?;
        let scale = tape.slice(e, 1, 0, w)?;
        let scale = tape.add_scalar(scale, 1.0)?;
        let scale = tape.repeat(scale, 1, n_tok)?;
        let shift = tape.slice(e, 1, w, w)?;
        let shift = tape.repeat(shift, 1, n_tok)?;
        let n = tape.layer_norm(h)?;
        let n = tape.mul(n, scale)?;
        let n = tape.add(n, shift)?;
        let a = tape.silu(n)?;
        let a = linear(
            tape,
            a,
            p.get(&format!("{prefix}.lin.W"))?,
            Some(p.get(&format!("{prefix}.lin.b"))?),
        )?;
        Ok(tape.add(h, a)?)
    }

    /// Raw output on plain tensors.
    pub fn raw_forward(
        &self,
        x_scaled: &Tensor,
        noise: &[f64],
        ctx: &ContextBatch,
        pww: Option<&PwwInput>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let x = tape.constant(x_scaled.clone())?;
        let out = self.forward(&mut tape, &p, x, noise, ctx, pww, None)?;
        Ok(tape.value(out).clone())
    }

    /// Number of tape ops in one forward pass over a batch of `batch` rows.
    pub fn forward_op_count(&self, batch: usize, sigma: f64, n_keys: usize) -> Result<usize> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false)?;
        let x = tape.constant(Tensor::zeros(&[batch, self.spec.data_dim]))?;
        let ctx = ContextBatch::empty(batch, n_keys, self.spec.d_embed);
        let before = tape.op_count();
        self.forward(&mut tape, &p, x, &vec![sigma.ln() / 4.0; batch], &ctx, None, None)?;
        Ok(tape.op_count() - before)
    }
}

/// Averaged attention usage of a model at noise level `sigma`.
pub fn attention_probe(
    model: &DenoiserModel,
    x: &Tensor,
    sigma: f64,
    ctx: &ContextBatch,
    pc: &Preconditioning,
) -> Result<AttentionProbe> {
    let c = pc.coefficients(sigma)?;
    let scaled = x.map(|v| v * c.input);
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false)?;
    let xv = tape.constant(scaled)?;
    let mut rec = ProbeRecorder::default();
    let b = x.shape()[0];
    model.forward(&mut tape, &p, xv, &vec![c.noise; b], ctx, None, Some(&mut rec))?;
    summarize_probe(&rec, sigma)
}

/// A raw network wrapped in preconditioning.
#[derive(Clone, Debug)]
pub struct PreconditionedDenoiser {
    pub model: Arc<DenoiserModel>,
    pub pc: Preconditioning,
    pub pww: Option<PwwInput>,
}

impl PreconditionedDenoiser {
    pub fn new(model: Arc<DenoiserModel>) -> Self {
        Self {
            model,
            pc: Preconditioning::default(),
            pww: None,
        }
    }
}

impl Denoise for PreconditionedDenoiser {
    fn denoise(&self, x: &Tensor, sigmas: &[f64], ctx: &ContextBatch) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(0);
        if n <= INFERENCE_CHUNK {
            return precondition_forward(
                |xs, noise| self.model.raw_forward(xs, noise, ctx, self.pww.as_ref()),
                x,
                sigmas,
                &self.pc,
            );
        }
        let mut parts = Vec::new();
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(n);
            let sub_ctx = ctx.narrow(start, end);
            parts.push(precondition_forward(
                |xs, noise| self.model.raw_forward(xs, noise, &sub_ctx, self.pww.as_ref()),
                &x.narrow_rows(start, end),
                &sigmas[start..end],
                &self.pc,
            )?);
        }
        Ok(Tensor::concat_rows(&parts)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx(b: usize, nk: usize, d: usize, seed: u64) -> ContextBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c = ContextBatch::empty(b, nk, d);
        c.key_tokens = Tensor::from_fn(&[b, nk, d], |_| rng.sample(StandardNormal));
        c.global = Tensor::from_fn(&[b, d], |_| rng.sample(StandardNormal));
        c
    }

    #[test]
    fn depth_one_mlp_names() {
        let m = build_denoiser(&DenoiserNetSpec::mlp(2, 8, 1, 4, 0)).unwrap();
        for name in m.params().keys() {
            let ok = ["in.W", "in.b", "out.W", "out.b", "null_token"].contains(&name.as_str())
                || name.starts_with("block0.");
            assert!(ok, "{name}");
        }
        assert!(m.params().contains_key("block0.attn.Wq"));
    }

    #[test]
    fn count_formula_matches_walk() {
        for spec in [
            DenoiserNetSpec::mlp(2, 8, 1, 4, 0),
            DenoiserNetSpec::mlp(2, 16, 3, 4, 0),
            DenoiserNetSpec::tiny_unet(8, 3, 8, 1, 4, 0),
            DenoiserNetSpec::tiny_unet(16, 3, 16, 2, 8, 0),
        ] {
            assert_eq!(
                build_denoiser(&spec).unwrap().param_count(),
                spec.param_count(),
                "{spec}"
            );
        }
    }

    #[test]
    fn build_is_deterministic() {
        let s = DenoiserNetSpec::mlp(2, 8, 2, 4, 9);
        assert_eq!(
            build_denoiser(&s).unwrap().to_bytes(),
            build_denoiser(&s).unwrap().to_bytes()
        );
    }

    #[test]
    fn zero_output_at_init() {
        for spec in [
            DenoiserNetSpec::mlp(3, 8, 2, 4, 1),
            DenoiserNetSpec::tiny_unet(8, 3, 8, 1, 4, 1),
        ] {
            let m = build_denoiser(&spec).unwrap();
            let x = Tensor::from_fn(&[2, spec.data_dim], |i| (i as f64).sin());
            let out = m.raw_forward(&x, &[0.1, -0.3], &ctx(2, 3, 4, 0), None).unwrap();
            assert_eq!(out.shape(), x.shape());
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn spec_text_round_trip() {
        let s = DenoiserNetSpec::tiny_unet(16, 3, 16, 2, 8, 5);
        assert_eq!(s.to_string().parse::<DenoiserNetSpec>().unwrap(), s);
        assert!("kind=mlp width=7 n_heads=2".parse::<DenoiserNetSpec>().is_err());
        assert!("kind=mlp attn_levels=4".parse::<DenoiserNetSpec>().is_err());
        assert!("kind=tiny_unet data_dim=300 channels=3"
            .parse::<DenoiserNetSpec>()
            .is_err());
    }

    #[test]
    fn context_width_is_checked() {
        let m = build_denoiser(&DenoiserNetSpec::mlp(2, 8, 1, 4, 0)).unwrap();
        assert!(m
            .raw_forward(&Tensor::zeros(&[1, 2]), &[0.0], &ctx(1, 2, 5, 0), None)
            .is_err());
    }

    #[test]
    fn op_count_is_independent_of_sigma() {
        let m = build_denoiser(&DenoiserNetSpec::tiny_unet(8, 3, 8, 1, 4, 0)).unwrap();
        assert_eq!(
            m.forward_op_count(2, 0.01, 3).unwrap(),
            m.forward_op_count(2, 50.0, 3).unwrap()
        );
    }
}
