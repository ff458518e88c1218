//! Toy datasets: a conditional 2-D Gaussian mixture and 16x16 RGB layouts
//! of colored blobs at four fixed positions.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::ConditionDescriptors;
use crate::denoiser::{GaussianMixture, MixtureComponent};
use crate::engine::Tensor;
use crate::error::{invalid, Result};
use crate::trainer::DataSource;

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_CHANNELS: usize = 3;
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE * IMAGE_CHANNELS;
pub const BLOB_RADIUS: f64 = 3.0;
/// Blob centers as (row, col).
pub const POSITIONS: [(usize, usize); 4] = [(4, 4), (4, 11), (11, 4), (11, 11)];
pub const BACKGROUND: [f64; 3] = [-0.5, -0.5, -0.5];
/// Offsets from the background are orthogonal, so projections separate colors.
pub const PALETTE: [[f64; 3]; 3] = [[0.5, -0.5, -0.5], [-0.5, 0.5, -0.5], [-0.5, -0.5, 0.5]];
const PIXEL_NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyKind {
    Gmm2dConditional,
    TinyImageLayout,
}

impl std::str::FromStr for ToyKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm2d" | "gmm2d_conditional" => Ok(Self::Gmm2dConditional),
            "tiny_image" | "tiny_image_layout" => Ok(Self::TinyImageLayout),
            _ => Err(invalid(format!("unknown dataset {s:?} (expected gmm2d or tiny_image)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub kind: ToyKind,
    pub n_conditions: usize,
    mixtures: Vec<GaussianMixture>,
}

/// Condition of a tiny image: blob color and blob position.
pub fn image_condition(color: usize, position: usize) -> usize {
    color * POSITIONS.len() + position
}

pub fn image_condition_parts(condition: usize) -> (usize, usize) {
    (condition / POSITIONS.len(), condition % POSITIONS.len())
}

pub fn pixel_index(row: usize, col: usize, channel: usize) -> usize {
    (row * IMAGE_SIDE + col) * IMAGE_CHANNELS + channel
}

/// Binary `[16, 16]` disc mask around a canonical position.
pub fn position_mask(position: usize) -> Result<Tensor> {
    let &(cr, cc) = POSITIONS
        .get(position)
        .ok_or_else(|| invalid(format!("position {position} out of range")))?;
    Ok(Tensor::from_fn(&[IMAGE_SIDE, IMAGE_SIDE], |i| {
        let (r, c) = ((i / IMAGE_SIDE) as f64, (i % IMAGE_SIDE) as f64);
        let d2 = (r - cr as f64).powi(2) + (c - cc as f64).powi(2);
        if d2 <= BLOB_RADIUS * BLOB_RADIUS {
            1.0
        } else {
            0.0
        }
    }))
}

impl ToyDataset {
    /// Condition `c` is a two-component mixture at angles `2 pi c / n +- 0.35`
    /// on the circle of radius 0.8.
    pub fn gmm2d_conditional(n_conditions: usize) -> Result<Self> {
        if n_conditions < 2 {
            return Err(invalid("gmm2d needs at least two conditions"));
        }
        let mixtures = (0..n_conditions)
            .map(|c| {
                let theta = 2.0 * PI * c as f64 / n_conditions as f64;
                let comps = [-0.35, 0.35]
                    .iter()
                    .map(|d| MixtureComponent {
                        weight: 0.5,
                        mean: vec![0.8 * (theta + d).cos(), 0.8 * (theta + d).sin()],
                        scale: 0.15,
                    })
                    .collect();
                GaussianMixture::new(comps)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: ToyKind::Gmm2dConditional,
            n_conditions,
            mixtures,
        })
    }

    /// Twelve conditions: three colors at four positions.
    pub fn tiny_image_layout() -> Self {
        Self {
            kind: ToyKind::TinyImageLayout,
            n_conditions: PALETTE.len() * POSITIONS.len(),
            mixtures: Vec::new(),
        }
    }

    pub fn new(kind: ToyKind, n_conditions: usize) -> Result<Self> {
        match kind {
            ToyKind::Gmm2dConditional => Self::gmm2d_conditional(n_conditions),
            ToyKind::TinyImageLayout => Ok(Self::tiny_image_layout()),
        }
    }

    /// Per-condition mixtures; empty for image data.
    pub fn mixtures(&self) -> &[GaussianMixture] {
        &self.mixtures
    }

    pub fn descriptors(&self) -> ConditionDescriptors {
        match self.kind {
            ToyKind::Gmm2dConditional => {
                let n = self.n_conditions as f64;
                let (tokens, style) = (0..self.n_conditions)
                    .map(|c| {
                        let theta = 2.0 * PI * c as f64 / n;
                        let (s, co) = theta.sin_cos();
                        let toks = (0..4).map(|t| vec![co, s, (t as f64 + 1.0) * c as f64 / n]).collect();
                        (toks, vec![co, s])
                    })
                    .unzip();
                ConditionDescriptors { tokens, style }
            }
            ToyKind::TinyImageLayout => {
                let (tokens, style) = (0..self.n_conditions)
                    .map(|c| {
                        let (color, pos) = image_condition_parts(c);
                        let mut color_tok = vec![0.0; 7];
                        color_tok[color] = 1.0;
                        let mut pos_tok = vec![0.0; 7];
                        pos_tok[3 + pos] = 1.0;
                        let mut style = color_tok.clone();
                        style[3 + pos] = 1.0;
                        (vec![color_tok, pos_tok], style)
                    })
                    .unzip();
                ConditionDescriptors { tokens, style }
            }
        }
    }

    /// `n` clean samples of one condition.
    pub fn sample_condition(&self, condition: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if condition >= self.n_conditions {
            return Err(invalid(format!("condition {condition} out of range")));
        }
        match self.kind {
            ToyKind::Gmm2dConditional => Ok(self.mixtures[condition].sample(n, 0.0, rng)),
            ToyKind::TinyImageLayout => {
                let rows: Vec<Vec<f64>> = (0..n).map(|_| render_image(condition, rng)).collect();
                if rows.is_empty() {
                    return Ok(Tensor::zeros(&[0, IMAGE_DIM]));
                }
                Ok(Tensor::from_rows(&rows)?)
            }
        }
    }

    /// Most likely condition of a clean sample.
    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        match self.kind {
            ToyKind::Gmm2dConditional => {
                let mut best = (f64::NEG_INFINITY, 0);
                for (c, m) in self.mixtures.iter().enumerate() {
                    let l = m.log_density(x, 0.0)?;
                    if l > best.0 {
                        best = (l, c);
                    }
                }
                Ok(best.1)
            }
            ToyKind::TinyImageLayout => {
                if x.len() != IMAGE_DIM {
                    return Err(invalid("image row has wrong length"));
                }
                let mut best = (f64::NEG_INFINITY, 0);
                for pos in 0..POSITIONS.len() {
                    let mask = position_mask(pos)?;
                    for color in 0..PALETTE.len() {
                        let s = color_fraction(x, &mask, color)?;
                        if s > best.0 {
                            best = (s, image_condition(color, pos));
                        }
                    }
                }
                Ok(best.1)
            }
        }
    }
}

fn render_image(condition: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (color, pos) = image_condition_parts(condition);
    let (cr, cc) = POSITIONS[pos];
    let jr = cr as f64 + rng.random_range(-1i32..=1) as f64;
    let jc = cc as f64 + rng.random_range(-1i32..=1) as f64;
    let mut out = Vec::with_capacity(IMAGE_DIM);
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let inside = (r as f64 - jr).powi(2) + (c as f64 - jc).powi(2) <= BLOB_RADIUS * BLOB_RADIUS;
            let base = if inside { PALETTE[color] } else { BACKGROUND };
            for v in base {
                out.push(v + PIXEL_NOISE * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }
    out
}

/// Mean share of `color` over the masked pixels: each pixel's offset from
/// the background projected on the color direction, clamped to [0, 1].
pub fn color_fraction(x: &[f64], mask: &Tensor, color: usize) -> Result<f64> {
    if x.len() != IMAGE_DIM || mask.shape() != [IMAGE_SIDE, IMAGE_SIDE] {
        return Err(invalid("color_fraction needs a 16x16x3 image and a 16x16 mask"));
    }
    let target = PALETTE
        .get(color)
        .ok_or_else(|| invalid(format!("color {color} out of range")))?;
    let u: Vec<f64> = target.iter().zip(BACKGROUND).map(|(t, b)| t - b).collect();
    let uu: f64 = u.iter().map(|v| v * v).sum();
    let (mut total, mut count) = (0.0, 0usize);
    for (i, &m) in mask.data().iter().enumerate() {
        if m <= 0.5 {
            continue;
        }
        let dot: f64 = (0..IMAGE_CHANNELS)
            .map(|ch| (x[i * IMAGE_CHANNELS + ch] - BACKGROUND[ch]) * u[ch])
            .sum();
        total += (dot / uu).clamp(0.0, 1.0);
        count += 1;
    }
    if count == 0 {
        return Err(invalid("mask selects no pixels"));
    }
    Ok(total / count as f64)
}

impl DataSource for ToyDataset {
    fn dim(&self) -> usize {
        match self.kind {
            ToyKind::Gmm2dConditional => 2,
            ToyKind::TinyImageLayout => IMAGE_DIM,
        }
    }

    fn n_conditions(&self) -> usize {
        self.n_conditions
    }

    fn sample_batch(&self, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
        let conds: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.n_conditions)).collect();
        let rows: Vec<Vec<f64>> = conds
            .iter()
            .map(|&c| match self.kind {
                ToyKind::Gmm2dConditional => self.mixtures[c].sample(1, 0.0, rng).into_data(),
                ToyKind::TinyImageLayout => render_image(c, rng),
            })
            .collect();
        let x = if rows.is_empty() {
            Tensor::zeros(&[0, self.dim()])
        } else {
            Tensor::from_rows(&rows).expect("rows share a width")
        };
        (x, conds)
    }
}
