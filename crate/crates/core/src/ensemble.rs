//! Expert registry over the noise-level tree: node ids, splitting, routing
//! by noise level, partition validation, and branch schedules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::denoiser::Denoise;
use crate::error::{invalid, Error, Result};
use crate::noise::{IntervalSet, NodeId, SigmaLaw};

/// A tree node, or the complement of one or more nodes.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ExpertId {
    Node(NodeId),
    Complement(Vec<NodeId>),
}

impl ExpertId {
    pub fn interval_set(&self, law: &SigmaLaw) -> Result<IntervalSet> {
        match self {
            ExpertId::Node(n) => IntervalSet::node(law, *n),
            ExpertId::Complement(ns) => IntervalSet::complement_of(law, ns),
        }
    }

    pub fn as_node(&self) -> Option<NodeId> {
        match self {
            ExpertId::Node(n) => Some(*n),
            ExpertId::Complement(_) => None,
        }
    }
}

impl fmt::Display for ExpertId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertId::Node(n) => write!(f, "{n}"),
            ExpertId::Complement(ns) => {
                let parts: Vec<String> = ns.iter().map(|n| format!("~{n}")).collect();
                write!(f, "{}", parts.join(","))
            }
        }
    }
}

impl FromStr for ExpertId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if !s.starts_with('~') {
            return Ok(ExpertId::Node(s.parse()?));
        }
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if !parts.len().is_multiple_of(2) {
            return Err(invalid(format!("malformed complement id {s:?}")));
        }
        let nodes = parts
            .chunks(2)
            .map(|p| {
                let level = p[0]
                    .strip_prefix('~')
                    .ok_or_else(|| invalid(format!("every node of a complement needs `~`: {s:?}")))?;
                format!("{level},{}", p[1]).parse()
            })
            .collect::<Result<Vec<NodeId>>>()?;
        Ok(ExpertId::Complement(nodes))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertNode {
    pub id: ExpertId,
    pub model_ref: String,
    pub trained_iters: u64,
}

/// Children of a plain node. Both start from the parent's weights with the
/// iteration counter reset.
pub fn split_node(parent: &ExpertNode) -> Result<(ExpertNode, ExpertNode)> {
    let ExpertId::Node(n) = parent.id else {
        return Err(invalid(format!("cannot split complement node {}", parent.id)));
    };
    let (lo, hi) = n.children()?;
    let child = |id: NodeId| ExpertNode {
        id: ExpertId::Node(id),
        model_ref: parent.model_ref.clone(),
        trained_iters: 0,
    };
    Ok((child(lo), child(hi)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterEntry {
    /// Interval set as written.
    pub set: IntervalSet,
    /// Token form of `set`.
    pub expr: String,
    pub model_ref: String,
}

/// Maps a noise level to exactly one model.
///
/// Entries that are pure complements are additionally restricted to what
/// no plain entry claims, so `{9,511; ~9,511; 3,0}` routes the middle range
/// to the complement entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleRouter {
    pub law: SigmaLaw,
    pub entries: Vec<RouterEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Overlap {
        first: String,
        second: String,
        sigma_lo: f64,
        sigma_hi: f64,
    },
    Gap {
        sigma_lo: f64,
        sigma_hi: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Overlap {
                first,
                second,
                sigma_lo,
                sigma_hi,
            } => write!(
                f,
                "overlap between {first} and {second} on ({sigma_lo:.4}, {sigma_hi:.4}]"
            ),
            Violation::Gap { sigma_lo, sigma_hi } => write!(f, "coverage gap ({sigma_lo:.4}, {sigma_hi:.4}]"),
        }
    }
}

fn subtract(segs: Vec<(f64, f64)>, cut: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = segs;
    for &(ea, eb) in cut {
        out = out
            .into_iter()
            .flat_map(|(a, b)| {
                if ea >= b || eb <= a {
                    vec![(a, b)]
                } else {
                    let mut v = Vec::new();
                    if a < ea {
                        v.push((a, ea));
                    }
                    if eb < b {
                        v.push((eb, b));
                    }
                    v
                }
            })
            .collect();
    }
    out
}

impl EnsembleRouter {
    pub fn new(law: SigmaLaw) -> Self {
        Self {
            law,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, expr: &str, model_ref: &str) -> Result<()> {
        let set = IntervalSet::parse(&self.law, expr)?;
        self.entries.push(RouterEntry {
            set,
            expr: expr.trim().to_string(),
            model_ref: model_ref.to_string(),
        });
        Ok(())
    }

    /// The three-expert layout: high-noise node, low-noise node, and the
    /// complement of both in between.
    pub fn config_d(law: SigmaLaw, high: &str, middle: &str, low: &str) -> Result<Self> {
        let mut r = Self::new(law);
        r.push("9,511", high)?;
        r.push("~9,511,~3,0", middle)?;
        r.push("3,0", low)?;
        Ok(r)
    }

    fn is_complement(e: &RouterEntry) -> bool {
        e.set.members.is_empty()
    }

    fn effective_contains(&self, idx: usize, sigma: f64) -> bool {
        let e = &self.entries[idx];
        if !e.set.contains(sigma) {
            return false;
        }
        if Self::is_complement(e) {
            return !self
                .entries
                .iter()
                .filter(|o| !Self::is_complement(o))
                .any(|o| o.set.contains(sigma));
        }
        true
    }

    fn effective_segments(&self, idx: usize) -> Vec<(f64, f64)> {
        let e = &self.entries[idx];
        let segs = e.set.quantile_segments();
        if !Self::is_complement(e) {
            return segs;
        }
        let claimed: Vec<(f64, f64)> = self
            .entries
            .iter()
            .filter(|o| !Self::is_complement(o))
            .flat_map(|o| o.set.quantile_segments())
            .collect();
        subtract(segs, &claimed)
    }

    /// Index of the single entry that owns `sigma`.
    pub fn route_index(&self, sigma: f64) -> Result<usize> {
        let mut hit = None;
        for i in 0..self.entries.len() {
            if self.effective_contains(i, sigma) {
                if hit.is_some() {
                    return Err(invalid(format!("sigma = {sigma} matches more than one router entry")));
                }
                hit = Some(i);
            }
        }
        hit.ok_or(Error::Routing { sigma })
    }

    pub fn route(&self, sigma: f64) -> Result<&str> {
        Ok(&self.entries[self.route_index(sigma)?].model_ref)
    }

    fn q_to_sigma(&self, q: f64) -> f64 {
        if q <= 0.0 {
            0.0
        } else if q >= 1.0 {
            f64::INFINITY
        } else {
            self.law.quantile_sigma(q).unwrap_or(f64::NAN)
        }
    }

    /// Disjointness and coverage, checked on exact quantile bounds.
    pub fn validate_partition(&self) -> Vec<Violation> {
        let segs: Vec<Vec<(f64, f64)>> = (0..self.entries.len()).map(|i| self.effective_segments(i)).collect();
        let mut out = Vec::new();
        for i in 0..segs.len() {
            for j in i + 1..segs.len() {
                for &(a, b) in &segs[i] {
                    for &(c, d) in &segs[j] {
                        let (lo, hi) = (a.max(c), b.min(d));
                        if lo < hi {
                            out.push(Violation::Overlap {
                                first: self.entries[i].expr.clone(),
                                second: self.entries[j].expr.clone(),
                                sigma_lo: self.q_to_sigma(lo),
                                sigma_hi: self.q_to_sigma(hi),
                            });
                        }
                    }
                }
            }
        }
        let all: Vec<(f64, f64)> = segs.into_iter().flatten().collect();
        for (a, b) in subtract(vec![(0.0, 1.0)], &all) {
            out.push(Violation::Gap {
                sigma_lo: self.q_to_sigma(a),
                sigma_hi: self.q_to_sigma(b),
            });
        }
        out
    }

    /// Lines `expert=<interval tokens> model=<name>`, `#` comments.
    pub fn parse(law: SigmaLaw, text: &str) -> Result<Self> {
        let mut r = Self::new(law);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields = kv_fields(line, i + 1)?;
            let expert = field(&fields, "expert", i + 1)?;
            let model = field(&fields, "model", i + 1)?;
            if fields.len() != 2 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "expected exactly `expert=` and `model=`".into(),
                });
            }
            r.push(expert, model).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(r)
    }

    pub fn model_refs(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.model_ref.clone()).collect()
    }
}

impl fmt::Display for EnsembleRouter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "expert={} model={}", e.expr, e.model_ref)?;
        }
        Ok(())
    }
}

fn kv_fields(line: &str, lineno: usize) -> Result<BTreeMap<&str, &str>> {
    let mut out = BTreeMap::new();
    for tok in line.split_whitespace() {
        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line: lineno,
            msg: format!("expected key=value, got {tok:?}"),
        })?;
        if out.insert(k, v).is_some() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("duplicate key {k:?}"),
            });
        }
    }
    Ok(out)
}

fn field<'a>(fields: &BTreeMap<&str, &'a str>, key: &str, lineno: usize) -> Result<&'a str> {
    fields.get(key).copied().ok_or_else(|| Error::Parse {
        line: lineno,
        msg: format!("missing `{key}=`"),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitFrom {
    Fresh,
    Node(NodeId),
    Checkpoint(String),
}

impl fmt::Display for InitFrom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitFrom::Fresh => write!(f, "fresh"),
            InitFrom::Node(n) => write!(f, "{n}"),
            InitFrom::Checkpoint(c) => write!(f, "ckpt:{c}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleEntry {
    pub target: ExpertId,
    pub init: InitFrom,
    pub iterations: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchSchedule {
    pub entries: Vec<ScheduleEntry>,
}

/// The base-model branching plan with iteration counts divided by 1000.
pub const TOY_SCHEDULE: &str = "\
node=0,0 init=fresh iters=500
node=1,0 init=0,0 iters=50
node=1,1 init=0,0 iters=50
node=2,0 init=1,0 iters=120
node=2,1 init=1,0 iters=50
node=2,2 init=1,1 iters=50
node=2,3 init=1,1 iters=130
node=3,0 init=2,0 iters=160
node=3,7 init=3,0 iters=40
node=4,0 init=3,0 iters=110
node=4,15 init=3,7 iters=190
node=5,31 init=4,15 iters=100
node=9,511 init=5,31 iters=50
node=~9,511 init=ckpt:base_final iters=50
node=~9,511,~4,0 init=ckpt:base_final iters=50
";

impl BranchSchedule {
    /// Parses and validates a schedule. Node inits must refer to a target
    /// listed on an earlier line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen: BTreeSet<NodeId> = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields = kv_fields(line, lineno)?;
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "expected `node=`, `init=` and `iters=`".into(),
                });
            }
            let perr = |e: Error| Error::Parse {
                line: lineno,
                msg: e.to_string(),
            };
            let target: ExpertId = field(&fields, "node", lineno)?.parse().map_err(perr)?;
            let init_text = field(&fields, "init", lineno)?;
            let init = if init_text == "fresh" {
                InitFrom::Fresh
            } else if let Some(name) = init_text.strip_prefix("ckpt:") {
                if name.is_empty() {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "empty checkpoint name".into(),
                    });
                }
                InitFrom::Checkpoint(name.to_string())
            } else {
                let n: NodeId = init_text.parse().map_err(perr)?;
                if !seen.contains(&n) {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("init node {n} is not trained on an earlier line"),
                    });
                }
                InitFrom::Node(n)
            };
            let iters_text = field(&fields, "iters", lineno)?;
            let iterations: u64 = iters_text.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad iteration count {iters_text:?}"),
            })?;
            if iterations == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "iterations must be positive".into(),
                });
            }
            if let ExpertId::Node(n) = &target {
                seen.insert(*n);
            }
            entries.push(ScheduleEntry {
                target,
                init,
                iterations,
            });
        }
        if entries.is_empty() {
            return Err(invalid("schedule has no entries"));
        }
        Ok(Self { entries })
    }

    pub fn toy() -> Self {
        Self::parse(TOY_SCHEDULE).expect("built-in schedule parses")
    }

    /// Every iteration count multiplied by `factor` (rounded, at least 1).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|e| ScheduleEntry {
                    iterations: ((e.iterations as f64 * factor).round() as u64).max(1),
                    ..e.clone()
                })
                .collect(),
        }
    }
}

impl fmt::Display for BranchSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "node={} init={} iters={}", e.target, e.init, e.iterations)?;
        }
        Ok(())
    }
}

/// Resolves a noise level to a denoiser.
pub trait ExpertSource: Send + Sync {
    fn select(&self, sigma: f64) -> Result<(&str, &dyn Denoise)>;
}

/// One denoiser for every noise level.
pub struct SingleExpert {
    pub name: String,
    pub denoiser: Arc<dyn Denoise>,
}

impl ExpertSource for SingleExpert {
    fn select(&self, _sigma: f64) -> Result<(&str, &dyn Denoise)> {
        Ok((&self.name, self.denoiser.as_ref()))
    }
}

/// A validated router with one denoiser per model reference.
pub struct RoutedExperts {
    router: EnsembleRouter,
    experts: BTreeMap<String, Arc<dyn Denoise>>,
}

impl RoutedExperts {
    pub fn new(router: EnsembleRouter, experts: BTreeMap<String, Arc<dyn Denoise>>) -> Result<Self> {
        let violations = router.validate_partition();
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().map(Violation::to_string).collect();
            return Err(invalid(format!("router is not a partition: {}", msgs.join("; "))));
        }
        if let Some(missing) = router.model_refs().into_iter().find(|m| !experts.contains_key(m)) {
            return Err(Error::MissingCheckpoint(missing));
        }
        Ok(Self { router, experts })
    }

    pub fn router(&self) -> &EnsembleRouter {
        &self.router
    }
}

impl ExpertSource for RoutedExperts {
    fn select(&self, sigma: f64) -> Result<(&str, &dyn Denoise)> {
        let name = self.router.route(sigma)?;
        let d = self
            .experts
            .get(name)
            .ok_or_else(|| Error::MissingCheckpoint(name.to_string()))?;
        Ok((name, d.as_ref()))
    }
}
