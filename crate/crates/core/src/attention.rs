//! Cross-attention with a paint-with-words bias.
//!
//! A phrase mask painted on the canvas is resampled to each attention
//! layer's token grid and added to the logits of the phrase's key tokens,
//! scaled by `w = w' * ln(1 + sigma) * max(QK^T)`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::engine::{Tape, Tensor, TensorError, Var};
use crate::error::{invalid, Error, Result};

/// A painted region and the key tokens of the phrase it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct PhraseMask {
    /// `(H, W)` of zeros and ones.
    pub grid: Tensor,
    pub token_indices: Vec<usize>,
}

impl PhraseMask {
    pub fn new(grid: Tensor, token_indices: Vec<usize>) -> Result<Self> {
        if grid.ndim() != 2 || grid.numel() == 0 {
            return Err(invalid(format!(
                "mask grid must be a non-empty matrix, got {:?}",
                grid.shape()
            )));
        }
        if grid.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid("mask grid must be binary"));
        }
        if token_indices.is_empty() {
            return Err(invalid("phrase needs at least one token"));
        }
        Ok(Self { grid, token_indices })
    }
}

/// `(N_i, N_t)` bias on cross-attention logits.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBias {
    pub a: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PwwConfig {
    pub w_prime: f64,
}

impl PwwConfig {
    pub fn new(w_prime: f64) -> Result<Self> {
        if !(w_prime >= 0.0 && w_prime.is_finite()) {
            return Err(invalid(format!("w' must be finite and non-negative, got {w_prime}")));
        }
        Ok(Self { w_prime })
    }
}

/// Masks plus strength, handed to a model's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PwwInput {
    pub masks: Vec<PhraseMask>,
    pub cfg: PwwConfig,
}

fn sample_points(src: usize, dst: usize) -> Vec<f64> {
    if dst == 1 {
        return vec![(src - 1) as f64 / 2.0];
    }
    (0..dst)
        .map(|i| i as f64 * (src - 1) as f64 / (dst - 1) as f64)
        .collect()
}

/// Bilinear resampling with corner-aligned sample points.
pub fn bilinear_downsample(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(invalid("target resolution must be positive"));
    }
    if mask.ndim() != 2 {
        return Err(invalid(format!("mask must be a matrix, got {:?}", mask.shape())));
    }
    let (sh, sw) = (mask.shape()[0], mask.shape()[1]);
    if h > sh || w > sw {
        return Err(invalid(format!("cannot downsample {sh}x{sw} to {h}x{w}")));
    }
    let ys = sample_points(sh, h);
    let xs = sample_points(sw, w);
    let at = |r: usize, c: usize| mask.data()[r * sw + c];
    let mut out = Vec::with_capacity(h * w);
    for &y in &ys {
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let fy = y - y0 as f64;
        for &x in &xs {
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let fx = x - x0 as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
        }
    }
    Ok(Tensor::new(vec![h, w], out)?)
}

/// Column `t` is the resampled mask of the phrase containing key `t`; keys in
/// several phrases take the elementwise maximum. `n_tokens` counts the null
/// token, which is last and never biased.
pub fn build_attention_bias(masks: &[PhraseMask], n_tokens: usize, layer_res: (usize, usize)) -> Result<AttentionBias> {
    let (h, w) = layer_res;
    if h == 0 || w == 0 {
        return Err(invalid("layer resolution must be positive"));
    }
    let n_i = h * w;
    let mut a = Tensor::zeros(&[n_i, n_tokens]);
    for m in masks {
        let down = bilinear_downsample(&m.grid, h, w)?;
        for &t in &m.token_indices {
            if t + 1 >= n_tokens {
                return Err(invalid(format!(
                    "token index {t} out of range for {n_tokens} keys (the last is the null token)"
                )));
            }
            for (i, &v) in down.data().iter().enumerate() {
                let slot = &mut a.data_mut()[i * n_tokens + t];
                *slot = slot.max(v);
            }
        }
    }
    Ok(AttentionBias { a })
}

/// `w' * ln(1 + sigma) * max(logits)` for one head's logit matrix.
pub fn pww_weight(cfg: PwwConfig, sigma: f64, logits: &[f64]) -> Result<f64> {
    if !(sigma >= 0.0) {
        return Err(invalid(format!("sigma must be non-negative, got {sigma}")));
    }
    if logits.is_empty() {
        return Err(invalid("empty logit matrix"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(cfg.w_prime * sigma.ln_1p() * max)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    SelfAttention,
    Cross,
}

#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub kind: AttentionKind,
    /// `(batch, heads, queries, keys)` softmax weights.
    pub weights: Tensor,
}

/// Collects attention weights from each layer of a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ProbeRecorder {
    pub records: Vec<AttentionRecord>,
}

/// Per-row bias for the cross-attention of one layer.
pub struct LayerBias<'a> {
    pub bias: &'a AttentionBias,
    pub cfg: PwwConfig,
    /// One noise level per batch row.
    pub sigmas: &'a [f64],
}

/// Multi-head attention on tape-resident projections.
///
/// `q` is `(B, Nq, C)`, `k` and `v` are `(B, Nk, C)`, with `C` divisible by
/// `n_heads`. Returns `(B, Nq, C)` before the output projection.
#[allow(clippy::too_many_arguments)]
pub fn multihead_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    bias: Option<&LayerBias<'_>>,
    kind: AttentionKind,
    probe: Option<&mut ProbeRecorder>,
) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != ks[2] || tape.shape(v) != ks.as_slice() {
        return Err(TensorError::shape("attention", &qs, &ks).into());
    }
    let (b, nq, c) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    if n_heads == 0 || c % n_heads != 0 {
        return Err(invalid(format!("{n_heads} heads do not divide width {c}")));
    }
    let dh = c / n_heads;
    let split = |tape: &mut Tape, x: Var, n: usize| -> Result<Var, TensorError> {
        let x = tape.reshape(x, &[b, n, n_heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * n_heads, n, dh])
    };
    let qh = split(tape, q, nq)?;
    let kh = split(tape, k, nk)?;
    let vh = split(tape, v, nk)?;
    let kt = tape.transpose(kh)?;
    let mut logits = tape.bmm(qh, kt)?;
    if let Some(lb) = bias {
        let a = &lb.bias.a;
        if a.shape() != [nq, nk] || lb.sigmas.len() != b {
            return Err(TensorError::shape("attention bias", a.shape(), &[nq, nk]).into());
        }
        // w is computed from the current logits but enters as a constant
        let lv = tape.value(logits).data().to_vec();
        let block = nq * nk;
        let mut add = Vec::with_capacity(lv.len());
        for bi in 0..b {
            for hi in 0..n_heads {
                let off = (bi * n_heads + hi) * block;
                let w = pww_weight(lb.cfg, lb.sigmas[bi], &lv[off..off + block])?;
                add.extend(a.data().iter().map(|x| w * x));
            }
        }
        let add = tape.constant(Tensor::new(vec![b * n_heads, nq, nk], add)?)?;
        logits = tape.add(logits, add)?;
    }
    let scaled = tape.mul_scalar(logits, 1.0 / (dh as f64).sqrt())?;
    let weights = tape.softmax(scaled)?;
    if let Some(p) = probe {
        p.records.push(AttentionRecord {
            kind,
            weights: tape.value(weights).clone().reshaped(&[b, n_heads, nq, nk])?,
        });
    }
    let out = tape.bmm(weights, vh)?;
    let out = tape.reshape(out, &[b, n_heads, nq, dh])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    Ok(tape.reshape(out, &[b, nq, c])?)
}

/// Single-head `softmax((QK^T + wA)/sqrt(d_k)) V` on plain matrices.
pub fn cross_attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&AttentionBias>, w: f64) -> Result<Tensor> {
    Ok(attention_with_weights(q, k, v, bias, w)?.0)
}

/// As [`cross_attention`], also returning the `(Nq, Nk)` weight matrix.
pub fn attention_with_weights(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&AttentionBias>,
    w: f64,
) -> Result<(Tensor, Tensor)> {
    if q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || q.shape()[1] != k.shape()[1] || k.shape()[0] != v.shape()[0] {
        return Err(TensorError::shape("cross_attention", q.shape(), k.shape()).into());
    }
    let dk = q.shape()[1] as f64;
    let mut tape = Tape::new();
    let qv = tape.constant(q.clone())?;
    let kv = tape.constant(k.clone())?;
    let vv = tape.constant(v.clone())?;
    let kt = tape.transpose(kv)?;
    let mut logits = tape.matmul(qv, kt)?;
    if let Some(b) = bias {
        if b.a.shape() != tape.shape(logits) {
            return Err(TensorError::shape("cross_attention bias", b.a.shape(), tape.shape(logits)).into());
        }
        let wa = tape.constant(b.a.map(|x| w * x))?;
        logits = tape.add(logits, wa)?;
    }
    let scaled = tape.mul_scalar(logits, 1.0 / dk.sqrt())?;
    let weights = tape.softmax(scaled)?;
    let out = tape.matmul(weights, vv)?;
    Ok((tape.value(out).clone(), tape.value(weights).clone()))
}

/// Averaged attention usage from one probed forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProbe {
    pub sigma: f64,
    /// Mean cross-attention weight per key token over layers, heads, queries
    /// and batch rows.
    pub token_mass: Vec<f64>,
    /// `(layer, head, token, mass)` for every cross-attention layer.
    pub per_head: Vec<(usize, usize, usize, f64)>,
    /// Mean self-attention weight per key location, one vector per layer.
    pub self_mass: Vec<Vec<f64>>,
}

fn mean_over_queries(weights: &Tensor) -> Vec<Vec<f64>> {
    let s = weights.shape();
    let (b, h, nq, nk) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![vec![0.0; nk]; h];
    for bi in 0..b {
        for (hi, acc) in out.iter_mut().enumerate() {
            for qi in 0..nq {
                let off = ((bi * h + hi) * nq + qi) * nk;
                for (a, w) in acc.iter_mut().zip(&weights.data()[off..off + nk]) {
                    *a += w / (b * nq) as f64;
                }
            }
        }
    }
    out
}

pub fn summarize_probe(recorder: &ProbeRecorder, sigma: f64) -> Result<AttentionProbe> {
    let mut token_mass: Option<Vec<f64>> = None;
    let mut per_head = Vec::new();
    let mut self_mass = Vec::new();
    let mut n_cross = 0usize;
    for r in &recorder.records {
        let by_head = mean_over_queries(&r.weights);
        match r.kind {
            AttentionKind::Cross => {
                let layer = n_cross;
                n_cross += 1;
                let acc = token_mass.get_or_insert_with(|| vec![0.0; by_head[0].len()]);
                if acc.len() != by_head[0].len() {
                    return Err(invalid("cross-attention layers disagree on key count"));
                }
                for (hi, masses) in by_head.iter().enumerate() {
                    for (t, &m) in masses.iter().enumerate() {
                        acc[t] += m;
                        per_head.push((layer, hi, t, m));
                    }
                }
            }
            AttentionKind::SelfAttention => {
                let n = by_head.len() as f64;
                let mut avg = vec![0.0; by_head[0].len()];
                for masses in &by_head {
                    for (a, m) in avg.iter_mut().zip(masses) {
                        *a += m / n;
                    }
                }
                self_mass.push(avg);
            }
        }
    }
    let heads = recorder
        .records
        .iter()
        .find(|r| r.kind == AttentionKind::Cross)
        .map_or(1, |r| r.weights.shape()[1]);
    let mut token_mass = token_mass.ok_or_else(|| invalid("model has no cross-attention layer"))?;
    let denom = (n_cross * heads) as f64;
    token_mass.iter_mut().for_each(|m| *m /= denom);
    Ok(AttentionProbe {
        sigma,
        token_mass,
        per_head,
        self_mass,
    })
}

/// CSV with header `layer,head,token_index,sigma,mass`.
pub fn probe_csv(probes: &[AttentionProbe]) -> String {
    let mut s = String::from("layer,head,token_index,sigma,mass\n");
    for p in probes {
        for &(l, h, t, m) in &p.per_head {
            let _ = writeln!(s, "{l},{h},{t},{},{m}", p.sigma);
        }
    }
    s
}

/// Parses a binary 8-bit PGM (`P5`) and thresholds at > 127.
pub fn parse_pgm_mask(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pgm_err("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(pgm_err(&format!("expected P5, found {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| pgm_err(&format!("bad number {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(pgm_err("only 8-bit PGM is supported"));
    }
    pos += 1; // single whitespace after maxval
    let body = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| pgm_err("truncated pixel data"))?;
    let data = body.iter().map(|&b| if b > 127 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(vec![h, w], data)?)
}

fn pgm_err(msg: &str) -> Error {
    Error::Parse {
        line: 1,
        msg: format!("pgm: {msg}"),
    }
}

pub fn load_pgm_mask(path: &Path) -> Result<Tensor> {
    parse_pgm_mask(&std::fs::read(path)?)
}

/// Writes a `[0, 1]`-valued grid as an 8-bit grayscale PGM.
pub fn write_pgm(path: &Path, grid: &Tensor) -> Result<()> {
    if grid.ndim() != 2 {
        return Err(invalid("heatmap must be a matrix"));
    }
    let (h, w) = (grid.shape()[0], grid.shape()[1]);
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = grid
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}
