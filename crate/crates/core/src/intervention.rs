//! Declarative forward-pass hooks: knockouts, attention-edge blocking,
//! head patching, pruning and scaling.
//!
//! A plan is an ordered list of [`Directive`]s. Plans never touch weights;
//! [`Model::forward`](crate::model::Model::forward) compiles them into
//! per-layer lookup tables for one pass.
//!
//! Plans round-trip through a line-oriented text form, one directive per
//! line (`#` starts a comment):
//!
//! ```text
//! knockout mha layers=1,2 positions=3,4
//! block query=16 keys=3,4 layers=3 heads=all
//! block query=16 keys=5 layers=2 heads=0,1 renorm
//! prune 3:0 3:1
//! scale 2:1 alpha=0.5
//! patch 3:1 shape=17x8 data=0,0.25,...
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, RunTrace};
use crate::tensor::Tensor;
use crate::world::{ConflictExample, Element};

/// One attention head. Layers count from 1, heads from 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (l, h) = s
            .split_once(':')
            .ok_or_else(|| Error::Plan(format!("head `{s}` is not layer:head")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Plan(format!("bad head coordinate `{s}`")))
        };
        Ok(Self::new(parse(l)?, parse(h)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Mha,
    Ffn,
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mha => "mha",
            Self::Ffn => "ffn",
        })
    }
}

impl FromStr for ComponentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mha" => Ok(Self::Mha),
            "ffn" => Ok(Self::Ffn),
            _ => Err(Error::Plan(format!("unknown component `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadSelection {
    All,
    Subset(BTreeSet<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    /// Zero the MHA update `a_i^ℓ` or FFN update `m_i^ℓ` at the given
    /// positions and layers.
    Knockout {
        kind: ComponentKind,
        positions: BTreeSet<usize>,
        layers: BTreeSet<usize>,
    },
    /// Zero post-softmax attention weights `s[query, key]`. Rows stay
    /// unnormalized unless `renormalize` is set.
    BlockAttention {
        query: usize,
        keys: BTreeSet<usize>,
        layers: BTreeSet<usize>,
        heads: HeadSelection,
        renormalize: bool,
    },
    /// Replace `H^{ℓ,h}` wholesale.
    PatchHead { head: HeadId, replacement: Tensor },
    /// Replace `H^{ℓ,h}` with zeros.
    PruneHeads { heads: BTreeSet<HeadId> },
    /// Multiply `H^{ℓ,h}` by `alpha`.
    ScaleHead { head: HeadId, alpha: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterventionPlan {
    directives: Vec<Directive>,
}

impl InterventionPlan {
    pub fn new(directives: Vec<Directive>) -> Self {
        Self { directives }
    }

    pub fn prune(heads: impl IntoIterator<Item = HeadId>) -> Self {
        Self::new(vec![Directive::PruneHeads {
            heads: heads.into_iter().collect(),
        }])
    }

    pub fn scale(head: HeadId, alpha: f64) -> Self {
        Self::new(vec![Directive::ScaleHead { head, alpha }])
    }

    pub fn directives(&self) -> &[Directive] {
        &self.directives
    }

    pub fn len(&self) -> usize {
        self.directives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }

    pub fn push(&mut self, d: Directive) {
        self.directives.push(d);
    }

    /// Concatenates two plans; `other`'s directives apply after `self`'s.
    pub fn then(mut self, other: &InterventionPlan) -> Self {
        self.directives.extend(other.directives.iter().cloned());
        self
    }

    /// Checks layer and head indices against `spec`. Positions are checked
    /// per run, since they depend on the sequence length.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for d in &self.directives {
            match d {
                Directive::Knockout { layers, .. } => {
                    for &l in layers {
                        spec.check_layer(l)?;
                    }
                }
                Directive::BlockAttention { layers, heads, .. } => {
                    for &l in layers {
                        spec.check_layer(l)?;
                    }
                    if let HeadSelection::Subset(hs) = heads {
                        for &h in hs {
                            spec.check_head(HeadId::new(1, h))?;
                        }
                    }
                }
                Directive::PatchHead { head, .. } | Directive::ScaleHead { head, .. } => {
                    spec.check_head(*head)?
                }
                Directive::PruneHeads { heads } => {
                    for &h in heads {
                        spec.check_head(h)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Contiguous block of layers centred on `center` with width `size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerWindow {
    pub center: usize,
    pub size: usize,
}

impl LayerWindow {
    pub fn new(center: usize, size: usize) -> Self {
        Self { center, size }
    }

    /// `max(1, ℓ - W/2) ..= min(L, ℓ + W/2)` with floor division.
    pub fn layers(&self, total_layers: usize) -> BTreeSet<usize> {
        let half = self.size / 2;
        let lo = self.center.saturating_sub(half).max(1);
        let hi = (self.center + half).min(total_layers);
        (lo..=hi).collect()
    }
}

fn element_positions(element: Element, example: &ConflictExample) -> Result<BTreeSet<usize>> {
    let pos = example.positions(element);
    if pos.is_empty() {
        return Err(Error::MissingElement(element.to_string()));
    }
    Ok(pos.into_iter().collect())
}

/// Zero the MHA or FFN updates of `element`'s tokens across the window.
pub fn knockout(
    kind: ComponentKind,
    element: Element,
    window: LayerWindow,
    example: &ConflictExample,
    spec: &ModelSpec,
) -> Result<InterventionPlan> {
    spec.check_layer(window.center)?;
    Ok(InterventionPlan::new(vec![Directive::Knockout {
        kind,
        positions: element_positions(element, example)?,
        layers: window.layers(spec.layers),
    }]))
}

/// Block every head's attention from the last token to `element` across the window.
pub fn block_flow(
    element: Element,
    window: LayerWindow,
    example: &ConflictExample,
    spec: &ModelSpec,
) -> Result<InterventionPlan> {
    spec.check_layer(window.center)?;
    Ok(InterventionPlan::new(vec![Directive::BlockAttention {
        query: example.tokens.len() - 1,
        keys: element_positions(element, example)?,
        layers: window.layers(spec.layers),
        heads: HeadSelection::All,
        renormalize: false,
    }]))
}

/// Replace `head`'s output with its value in `source`, for a target run of
/// `target_len` tokens.
pub fn patch_head(head: HeadId, source: &RunTrace, target_len: usize) -> Result<InterventionPlan> {
    if source.seq_len() != target_len {
        return Err(Error::LengthMismatch(format!(
            "source run has {} tokens, target has {target_len}",
            source.seq_len()
        )));
    }
    Ok(InterventionPlan::new(vec![Directive::PatchHead {
        head,
        replacement: source.head_output(head)?.clone(),
    }]))
}

/// Freeze every head to its activation in `clean`, except `target`, which
/// takes its activation from `corrupted`.
pub fn freeze_except(clean: &RunTrace, target: HeadId, corrupted: &RunTrace) -> Result<InterventionPlan> {
    if clean.seq_len() != corrupted.seq_len() {
        return Err(Error::LengthMismatch(format!(
            "clean run has {} tokens, corrupted run has {}",
            clean.seq_len(),
            corrupted.seq_len()
        )));
    }
    let mut plan = InterventionPlan::default();
    for (li, lt) in clean.layers.iter().enumerate() {
        for h in 0..lt.heads.len() {
            let id = HeadId::new(li + 1, h);
            let src = if id == target { corrupted } else { clean };
            plan.push(Directive::PatchHead {
                head: id,
                replacement: src.head_output(id)?.clone(),
            });
        }
    }
    if plan.is_empty() {
        return Err(Error::Plan("clean trace has no recorded heads".into()));
    }
    Ok(plan)
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl fmt::Display for Directive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Directive::Knockout {
                kind,
                positions,
                layers,
            } => write!(f, "knockout {kind} layers={} positions={}", join(layers), join(positions)),
            Directive::BlockAttention {
                query,
                keys,
                layers,
                heads,
                renormalize,
            } => {
                let hs = match heads {
                    HeadSelection::All => "all".to_string(),
                    HeadSelection::Subset(s) => join(s),
                };
                write!(f, "block query={query} keys={} layers={} heads={hs}", join(keys), join(layers))?;
                if *renormalize {
                    write!(f, " renorm")?;
                }
                Ok(())
            }
            Directive::PatchHead { head, replacement } => {
                let shape = replacement.shape();
                write!(
                    f,
                    "patch {head} shape={}x{} data={}",
                    shape[0],
                    shape[1],
                    join(replacement.data())
                )
            }
            Directive::PruneHeads { heads } => {
                write!(f, "prune")?;
                for h in heads {
                    write!(f, " {h}")?;
                }
                Ok(())
            }
            Directive::ScaleHead { head, alpha } => write!(f, "scale {head} alpha={alpha}"),
        }
    }
}

impl fmt::Display for InterventionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in &self.directives {
            writeln!(f, "{d}")?;
        }
        Ok(())
    }
}

fn parse_list<T: FromStr + Ord>(v: &str, what: &str) -> Result<BTreeSet<T>> {
    if v.is_empty() {
        return Ok(BTreeSet::new());
    }
    v.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| Error::Plan(format!("bad {what} value `{x}`")))
        })
        .collect()
}

struct Fields<'a> {
    line: &'a str,
    pairs: Vec<(&'a str, &'a str)>,
    flags: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    fn parse(line: &'a str, words: &[&'a str]) -> Self {
        let mut pairs = Vec::new();
        let mut flags = Vec::new();
        for w in words {
            match w.split_once('=') {
                Some((k, v)) => pairs.push((k, v)),
                None => flags.push(*w),
            }
        }
        Self { line, pairs, flags }
    }

    fn get(&self, key: &str) -> Result<&'a str> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Plan(format!("missing `{key}=` in `{}`", self.line)))
    }
}

impl FromStr for Directive {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let words: Vec<&str> = line.split_whitespace().collect();
        let (cmd, rest) = words
            .split_first()
            .ok_or_else(|| Error::Plan("empty directive".into()))?;
        match *cmd {
            "knockout" => {
                let (kind, rest) = rest
                    .split_first()
                    .ok_or_else(|| Error::Plan(format!("knockout needs mha|ffn: `{line}`")))?;
                let f = Fields::parse(line, rest);
                Ok(Directive::Knockout {
                    kind: kind.parse()?,
                    positions: parse_list(f.get("positions")?, "position")?,
                    layers: parse_list(f.get("layers")?, "layer")?,
                })
            }
            "block" => {
                let f = Fields::parse(line, rest);
                let heads = match f.get("heads").unwrap_or("all") {
                    "all" => HeadSelection::All,
                    v => HeadSelection::Subset(parse_list(v, "head")?),
                };
                Ok(Directive::BlockAttention {
                    query: f
                        .get("query")?
                        .parse()
                        .map_err(|_| Error::Plan(format!("bad query in `{line}`")))?,
                    keys: parse_list(f.get("keys")?, "key")?,
                    layers: parse_list(f.get("layers")?, "layer")?,
                    heads,
                    renormalize: f.flags.contains(&"renorm"),
                })
            }
            "prune" => Ok(Directive::PruneHeads {
                heads: rest.iter().map(|w| w.parse()).collect::<Result<_>>()?,
            }),
            "scale" => {
                let (head, rest) = rest
                    .split_first()
                    .ok_or_else(|| Error::Plan(format!("scale needs a head: `{line}`")))?;
                let f = Fields::parse(line, rest);
                Ok(Directive::ScaleHead {
                    head: head.parse()?,
                    alpha: f
                        .get("alpha")?
                        .parse()
                        .map_err(|_| Error::Plan(format!("bad alpha in `{line}`")))?,
                })
            }
            "patch" => {
                let (head, rest) = rest
                    .split_first()
                    .ok_or_else(|| Error::Plan(format!("patch needs a head: `{line}`")))?;
                let f = Fields::parse(line, rest);
                let (r, c) = f
                    .get("shape")?
                    .split_once('x')
                    .ok_or_else(|| Error::Plan(format!("shape must be RxC in `{line}`")))?;
                let dim = |v: &str| v.parse::<usize>().map_err(|_| Error::Plan(format!("bad shape in `{line}`")));
                let data: Vec<f32> = f
                    .get("data")?
                    .split(',')
                    .map(|x| x.parse::<f32>().map_err(|_| Error::Plan(format!("bad value `{x}`"))))
                    .collect::<Result<_>>()?;
                Ok(Directive::PatchHead {
                    head: head.parse()?,
                    replacement: Tensor::matrix(dim(r)?, dim(c)?, data)?,
                })
            }
            other => Err(Error::Plan(format!("unknown directive `{other}`"))),
        }
    }
}

impl FromStr for InterventionPlan {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut plan = InterventionPlan::default();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                plan.push(line.parse()?);
            }
        }
        Ok(plan)
    }
}
