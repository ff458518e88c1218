//! The log-normal noise-level law and its equal-mass binary-tree intervals.
//!
//! Node `(l, i)` of the tree owns the quantile range `(i/2^l, (i+1)/2^l]`
//! of the law. Because every bound is a dyadic rational it is exact in
//! `f64`, so siblings share bit-identical endpoints and membership is
//! decided without tolerance.

mod special;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use special::{erf, erfc, normal_cdf, normal_quantile};

use crate::error::{invalid, Error, Result};

/// Deepest tree level whose quantile bounds are exact in `f64`.
pub const MAX_LEVEL: u32 = 52;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaLaw {
    /// Mean of `ln(sigma)`.
    pub p_mean: f64,
    /// Standard deviation of `ln(sigma)`.
    pub p_std: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for SigmaLaw {
    fn default() -> Self {
        Self {
            p_mean: -1.2,
            p_std: 1.2,
            sigma_min: 0.002,
            sigma_max: 80.0,
        }
    }
}

impl SigmaLaw {
    pub fn new(p_mean: f64, p_std: f64, sigma_min: f64, sigma_max: f64) -> Result<Self> {
        let law = Self {
            p_mean,
            p_std,
            sigma_min,
            sigma_max,
        };
        law.validate()?;
        Ok(law)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_std > 0.0 && self.p_std.is_finite() && self.p_mean.is_finite()) {
            return Err(invalid(format!(
                "p_std must be positive and finite, got {}",
                self.p_std
            )));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(invalid(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    /// `exp(p_mean + p_std * Phi^-1(q))` for `q` in the open unit interval.
    pub fn quantile_sigma(&self, q: f64) -> Result<f64> {
        let z = normal_quantile(q).ok_or_else(|| invalid(format!("quantile level must lie in (0, 1), got {q}")))?;
        Ok((self.p_mean + self.p_std * z).exp())
    }

    /// Probability mass below `sigma`.
    pub fn cdf(&self, sigma: f64) -> f64 {
        if sigma <= 0.0 {
            return 0.0;
        }
        normal_cdf((sigma.ln() - self.p_mean) / self.p_std)
    }

    pub fn clamp(&self, sigma: f64) -> f64 {
        sigma.clamp(self.sigma_min, self.sigma_max)
    }

    /// The node's sigma range: `(Q(i/2^l), Q((i+1)/2^l)]`, with 0 and +inf
    /// at the outer edges.
    pub fn interval_bounds(&self, node: NodeId) -> Result<SigmaInterval> {
        node.validate()?;
        let (q_lo, q_hi) = node.quantile_range();
        let lo = if q_lo == 0.0 { 0.0 } else { self.quantile_sigma(q_lo)? };
        let hi = if q_hi == 1.0 {
            f64::INFINITY
        } else {
            self.quantile_sigma(q_hi)?
        };
        Ok(SigmaInterval {
            level: node.level,
            index: node.index,
            lo,
            hi,
        })
    }

    /// Draw a noise level by inverse-CDF sampling, restricted to `restriction`
    /// when given, then clamp to `[sigma_min, sigma_max]`.
    pub fn sample_sigma<R: Rng + ?Sized>(&self, restriction: Option<&IntervalSet>, rng: &mut R) -> Result<f64> {
        let q = match restriction {
            None => open_unit(rng),
            Some(set) => {
                let segments = set.quantile_segments();
                let mass: f64 = segments.iter().map(|(a, b)| b - a).sum();
                if mass <= 0.0 {
                    return Err(invalid(format!("restriction {set} has no probability mass")));
                }
                let mut u = open_unit(rng) * mass;
                let mut q = segments[segments.len() - 1].1;
                for &(a, b) in &segments {
                    if u <= b - a {
                        q = a + u;
                        break;
                    }
                    u -= b - a;
                }
                // stay strictly inside the open unit interval
                q.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
            }
        };
        Ok(self.clamp(self.quantile_sigma(q)?))
    }
}

fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// A node `(level, index)` of the binary tree over the noise law.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId {
    pub level: u32,
    pub index: u64,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId { level: 0, index: 0 };

    pub fn new(level: u32, index: u64) -> Result<Self> {
        let n = Self { level, index };
        n.validate()?;
        Ok(n)
    }

    fn validate(&self) -> Result<()> {
        if self.level > MAX_LEVEL {
            return Err(invalid(format!("tree level {} exceeds {MAX_LEVEL}", self.level)));
        }
        if self.index >= 1u64 << self.level {
            return Err(invalid(format!(
                "index {} out of range for level {} (must be < {})",
                self.index,
                self.level,
                1u64 << self.level
            )));
        }
        Ok(())
    }

    pub fn children(&self) -> Result<(NodeId, NodeId)> {
        Ok((
            NodeId::new(self.level + 1, 2 * self.index)?,
            NodeId::new(self.level + 1, 2 * self.index + 1)?,
        ))
    }

    pub fn quantile_range(&self) -> (f64, f64) {
        let width = (1u64 << self.level) as f64;
        (self.index as f64 / width, (self.index + 1) as f64 / width)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.level, self.index)
    }
}

impl FromStr for NodeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (l, i) = s
            .split_once(',')
            .ok_or_else(|| invalid(format!("expected <level>,<index>, got {s:?}")))?;
        let level = l.trim().parse().map_err(|_| invalid(format!("bad level in {s:?}")))?;
        let index = i.trim().parse().map_err(|_| invalid(format!("bad index in {s:?}")))?;
        NodeId::new(level, index)
    }
}

/// The sigma range `(lo, hi]` of one tree node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaInterval {
    pub level: u32,
    pub index: u64,
    pub lo: f64,
    pub hi: f64,
}

impl SigmaInterval {
    pub fn node(&self) -> NodeId {
        NodeId {
            level: self.level,
            index: self.index,
        }
    }

    /// Half-open, upper bound inclusive.
    pub fn contains(&self, sigma: f64) -> bool {
        self.lo < sigma && sigma <= self.hi
    }
}

/// A union of tree nodes minus another set of tree nodes.
///
/// An empty `members` list means "everything", so a set with only
/// exclusions is a complement: `~9,511` is all noise levels outside
/// node `(9, 511)`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalSet {
    pub members: Vec<SigmaInterval>,
    pub excluded: Vec<SigmaInterval>,
}

impl IntervalSet {
    pub fn node(law: &SigmaLaw, node: NodeId) -> Result<Self> {
        Ok(Self {
            members: vec![law.interval_bounds(node)?],
            excluded: vec![],
        })
    }

    pub fn full() -> Self {
        Self {
            members: vec![],
            excluded: vec![],
        }
    }

    pub fn complement_of(law: &SigmaLaw, nodes: &[NodeId]) -> Result<Self> {
        Ok(Self {
            members: vec![],
            excluded: nodes.iter().map(|&n| law.interval_bounds(n)).collect::<Result<_>>()?,
        })
    }

    /// Parse comma-separated `L,I` / `~L,I` tokens.
    pub fn parse(law: &SigmaLaw, text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if !parts.len().is_multiple_of(2) || parts.iter().any(|p| p.is_empty()) {
            return Err(invalid(format!("malformed interval tokens {text:?}")));
        }
        let mut set = Self::full();
        for pair in parts.chunks(2) {
            let (neg, level) = match pair[0].strip_prefix('~') {
                Some(rest) => (true, rest),
                None => (false, pair[0]),
            };
            let node: NodeId = format!("{level},{}", pair[1]).parse()?;
            let iv = law.interval_bounds(node)?;
            if neg {
                set.excluded.push(iv);
            } else {
                set.members.push(iv);
            }
        }
        Ok(set)
    }

    pub fn contains(&self, sigma: f64) -> bool {
        (self.members.is_empty() || self.members.iter().any(|m| m.contains(sigma)))
            && !self.excluded.iter().any(|m| m.contains(sigma))
    }

    /// Disjoint, sorted `(a, b]` quantile ranges covered by the set.
    pub fn quantile_segments(&self) -> Vec<(f64, f64)> {
        let include: Vec<(f64, f64)> = if self.members.is_empty() {
            vec![(0.0, 1.0)]
        } else {
            self.members.iter().map(|m| m.node().quantile_range()).collect()
        };
        let mut segs = merge_segments(include);
        for ex in &self.excluded {
            let (ea, eb) = ex.node().quantile_range();
            segs = segs
                .into_iter()
                .flat_map(|(a, b)| {
                    let mut out = Vec::with_capacity(2);
                    if ea >= b || eb <= a {
                        out.push((a, b));
                    } else {
                        if a < ea {
                            out.push((a, ea));
                        }
                        if eb < b {
                            out.push((eb, b));
                        }
                    }
                    out
                })
                .collect();
        }
        segs
    }

    /// Probability mass of the set under the law.
    pub fn mass(&self) -> f64 {
        self.quantile_segments().iter().map(|(a, b)| b - a).sum()
    }

    /// Disjoint, sorted `(lo, hi]` sigma ranges covered by the set.
    pub fn sigma_segments(&self, law: &SigmaLaw) -> Result<Vec<(f64, f64)>> {
        self.quantile_segments()
            .into_iter()
            .map(|(a, b)| {
                let lo = if a == 0.0 { 0.0 } else { law.quantile_sigma(a)? };
                let hi = if b == 1.0 {
                    f64::INFINITY
                } else {
                    law.quantile_sigma(b)?
                };
                Ok((lo, hi))
            })
            .collect()
    }

    /// Smallest and largest sigma bound of the set.
    pub fn hull(&self, law: &SigmaLaw) -> Result<(f64, f64)> {
        let segs = self.sigma_segments(law)?;
        match (segs.first(), segs.last()) {
            (Some(first), Some(last)) => Ok((first.0, last.1)),
            _ => Err(invalid(format!("interval set {self} is empty"))),
        }
    }
}

fn merge_segments(mut segs: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    segs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::with_capacity(segs.len());
    for (a, b) in segs {
        match out.last_mut() {
            Some(last) if a <= last.1 => last.1 = last.1.max(b),
            _ => out.push((a, b)),
        }
    }
    out
}

impl fmt::Display for IntervalSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut tokens: Vec<String> = self.members.iter().map(|m| m.node().to_string()).collect();
        tokens.extend(self.excluded.iter().map(|m| format!("~{}", m.node())));
        if tokens.is_empty() {
            // the whole law is the root node
            return write!(f, "0,0");
        }
        write!(f, "{}", tokens.join(","))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn law() -> SigmaLaw {
        SigmaLaw::default()
    }

    fn node(l: u32, i: u64) -> NodeId {
        NodeId::new(l, i).unwrap()
    }

    #[test]
    fn median_is_exp_p_mean() {
        let s = law().quantile_sigma(0.5).unwrap();
        assert!((s - (-1.2f64).exp()).abs() < 1e-12);
        assert!((s - 0.301194).abs() < 1e-6);
    }

    #[test]
    fn lower_quartile_and_top_leaf() {
        assert!((law().quantile_sigma(0.25).unwrap() - 0.134071).abs() < 1e-6);
        assert!((law().quantile_sigma(511.0 / 512.0).unwrap() - 9.610).abs() < 1e-3);
    }

    #[test]
    fn quantile_rejects_out_of_range() {
        for q in [0.0, 1.0, -0.1, 1.5] {
            assert!(law().quantile_sigma(q).is_err());
        }
    }

    #[test]
    fn level_one_left_node() {
        let iv = law().interval_bounds(node(1, 0)).unwrap();
        assert_eq!(iv.lo, 0.0);
        assert!((iv.hi - 0.301194).abs() < 1e-6);
        let top = law().interval_bounds(node(9, 511)).unwrap();
        assert!(top.hi.is_infinite());
        assert!((top.lo - 9.6096).abs() < 1e-3);
    }

    #[test]
    fn index_out_of_range() {
        assert!(NodeId::new(2, 4).is_err());
        assert!("3,8".parse::<NodeId>().is_err());
        assert_eq!("3,7".parse::<NodeId>().unwrap(), node(3, 7));
    }

    #[test]
    fn membership_boundary_goes_to_lower_sibling() {
        let l = law();
        let left = IntervalSet::node(&l, node(1, 0)).unwrap();
        let right = IntervalSet::node(&l, node(1, 1)).unwrap();
        let median = l.quantile_sigma(0.5).unwrap();
        assert!(left.contains(median));
        assert!(!right.contains(median));
    }

    #[test]
    fn membership_examples() {
        let l = law();
        assert!(IntervalSet::parse(&l, "9,511").unwrap().contains(10.0));
        assert!(IntervalSet::parse(&l, "~9,511").unwrap().contains(0.2));
        assert!(!IntervalSet::parse(&l, "~9,511").unwrap().contains(10.0));
    }

    #[test]
    fn token_round_trip() {
        let l = law();
        for text in ["1,0", "~9,511", "~9,511,~4,0", "2,1,~5,8"] {
            assert_eq!(IntervalSet::parse(&l, text).unwrap().to_string(), text);
        }
        assert!(IntervalSet::parse(&l, "1").is_err());
        assert!(IntervalSet::parse(&l, "1,5").is_err());
    }

    #[test]
    fn complement_mass() {
        let l = law();
        let set = IntervalSet::parse(&l, "~9,511,~4,0").unwrap();
        assert!((set.mass() - (1.0 - 1.0 / 512.0 - 1.0 / 16.0)).abs() < 1e-15);
    }

    #[test]
    fn restricted_draws_respect_bounds() {
        let l = law();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let upper = IntervalSet::node(&l, node(1, 1)).unwrap();
        let not_top = IntervalSet::parse(&l, "~9,511").unwrap();
        let top_lo = l.interval_bounds(node(9, 511)).unwrap().lo;
        for _ in 0..20_000 {
            assert!(l.sample_sigma(Some(&upper), &mut rng).unwrap() > 0.301194);
            assert!(l.sample_sigma(Some(&not_top), &mut rng).unwrap() <= top_lo);
        }
    }

    #[test]
    fn empty_restriction_is_an_error() {
        let l = law();
        let set = IntervalSet::parse(&l, "1,1,~1,1").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(l.sample_sigma(Some(&set), &mut rng).is_err());
    }

    #[test]
    fn unrestricted_draws_are_clamped() {
        let l = law();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let s = l.sample_sigma(None, &mut rng).unwrap();
            assert!((l.sigma_min..=l.sigma_max).contains(&s));
        }
    }
}
