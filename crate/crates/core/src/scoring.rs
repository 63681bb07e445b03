//! Head localization: gradient sensitivity, path patching, ranking and
//! pruning-set construction.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{freeze_except, HeadId, InterventionPlan};
use crate::model::{Model, ModelSpec};
use crate::world::{corrupt, ConflictExample, CorruptMode};

/// Central-difference step for `dL/dα`.
pub const FD_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gradient,
    PathPatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Memory,
    Context,
}

impl Target {
    /// `(target answer, competing answer)` for an example.
    pub fn answers(self, ex: &ConflictExample) -> (usize, usize) {
        match self {
            Self::Memory => (ex.a_m, ex.a_c),
            Self::Context => (ex.a_c, ex.a_m),
        }
    }

    pub fn other(self) -> Self {
        match self {
            Self::Memory => Self::Context,
            Self::Context => Self::Memory,
        }
    }

    /// Corruption template paired with each target.
    pub fn default_corruption(self) -> CorruptMode {
        match self {
            Self::Memory => CorruptMode::MaskSubject,
            Self::Context => CorruptMode::MaskAttribute,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Memory => "memory",
            Self::Context => "context",
        })
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "memory" => Ok(Self::Memory),
            "context" => Ok(Self::Context),
            _ => Err(Error::Data(format!("unknown target `{s}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gradient => "gradient",
            Self::PathPatch => "path-patch",
        })
    }
}

/// `L × M` grid of head scores, row-major by layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadScoreMap {
    pub layers: usize,
    pub heads: usize,
    pub scores: Vec<f64>,
    pub method: Method,
    pub target: Option<Target>,
}

impl HeadScoreMap {
    pub fn zeros(spec: &ModelSpec, method: Method, target: Option<Target>) -> Self {
        Self {
            layers: spec.layers,
            heads: spec.heads,
            scores: vec![0.0; spec.layers * spec.heads],
            method,
            target,
        }
    }

    fn index(&self, id: HeadId) -> usize {
        (id.layer - 1) * self.heads + id.head
    }

    pub fn get(&self, id: HeadId) -> f64 {
        self.scores[self.index(id)]
    }

    pub fn set(&mut self, id: HeadId, v: f64) {
        let i = self.index(id);
        self.scores[i] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (HeadId, f64)> + '_ {
        let m = self.heads;
        self.scores
            .iter()
            .enumerate()
            .map(move |(i, &s)| (HeadId::new(i / m + 1, i % m), s))
    }

    /// Head with the largest `|score|`; ties go to the lowest (layer, head).
    pub fn top_by_magnitude(&self) -> HeadId {
        let mut best = (HeadId::new(1, 0), f64::NEG_INFINITY);
        for (id, s) in self.iter() {
            if s.abs() > best.1 {
                best = (id, s.abs());
            }
        }
        best.0
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.iter().find(|(_, s)| !s.is_finite()) {
            Some((id, _)) => Err(Error::NonFinite(format!("score of head {id}"))),
            None => Ok(()),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "layer,head,score")?;
        for (id, s) in self.iter() {
            writeln!(w, "{},{},{}", id.layer, id.head, s)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a `layer,head,score` table; every head of `spec` must appear once.
    pub fn read_csv(path: &Path, spec: &ModelSpec, method: Method, target: Option<Target>) -> Result<Self> {
        let mut map = Self::zeros(spec, method, target);
        let mut seen = vec![false; map.scores.len()];
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Data(format!("{}:{}: expected layer,head,score", path.display(), i + 1));
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(bad());
            }
            let layer: usize = parts[0].trim().parse().map_err(|_| bad())?;
            let head: usize = parts[1].trim().parse().map_err(|_| bad())?;
            let score: f64 = parts[2].trim().parse().map_err(|_| bad())?;
            let id = HeadId::new(layer, head);
            spec.check_head(id)?;
            let k = map.index(id);
            if seen[k] {
                return Err(Error::Data(format!("head {id} listed twice in {}", path.display())));
            }
            seen[k] = true;
            map.scores[k] = score;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Data(format!("{} does not cover every head", path.display())));
        }
        map.ensure_finite()?;
        Ok(map)
    }
}

/// Prompt plus the single answer token the loss is taken on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeled {
    pub tokens: Vec<usize>,
    pub answer: usize,
}

/// Pairs every example with its target answer (`a_m` for memory, `a_c` for context).
pub fn labeled(dataset: &[ConflictExample], target: Target) -> Vec<Labeled> {
    dataset
        .iter()
        .map(|ex| Labeled {
            tokens: ex.tokens.clone(),
            answer: target.answers(ex).0,
        })
        .collect()
}

fn nll(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[y]
}

/// `I(D) = E|dL/dα|` per head, where `α` scales the head's output and `L` is
/// the negative log-likelihood of the answer token. The derivative is a
/// central difference evaluated in `f64`.
pub fn grad_importance(model: &Model<f32>, data: &[Labeled], step: f64) -> Result<HeadScoreMap> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::Data(format!("finite-difference step {step} outside (0, 1)")));
    }
    let m64 = model.cast::<f64>();
    for ex in data {
        if ex.answer >= model.spec.vocab {
            return Err(Error::TokenOutOfRange {
                id: ex.answer,
                vocab: model.spec.vocab,
            });
        }
    }
    let heads = model.spec.all_heads();
    let jobs: Vec<(usize, usize)> = (0..heads.len())
        .flat_map(|h| (0..data.len()).map(move |e| (h, e)))
        .collect();
    let grads: Vec<f64> = jobs
        .par_iter()
        .map(|&(h, e)| {
            let ex = &data[e];
            let loss = |alpha: f64| -> Result<f64> {
                let t = m64.forward(&ex.tokens, &InterventionPlan::scale(heads[h], alpha), false)?;
                let l = nll(&t.logits, ex.answer);
                if l.is_finite() {
                    Ok(l)
                } else {
                    Err(Error::NonFinite("loss".into()))
                }
            };
            Ok((loss(1.0 + step)? - loss(1.0 - step)?) / (2.0 * step))
        })
        .collect::<Result<_>>()?;
    let mut map = HeadScoreMap::zeros(&model.spec, Method::Gradient, None);
    let n = data.len() as f64;
    for (h, id) in heads.iter().enumerate() {
        let sum: f64 = grads[h * data.len()..(h + 1) * data.len()].iter().map(|g| g.abs()).sum();
        map.set(*id, sum / n);
    }
    Ok(map)
}

/// `S = I(D_target) − I(D_swapped)`. Both sets must hold the same prompts in
/// the same order.
pub fn proxy_score(model: &Model<f32>, target: &[Labeled], swapped: &[Labeled]) -> Result<HeadScoreMap> {
    if target.len() != swapped.len() {
        return Err(Error::LengthMismatch(format!(
            "target set has {} examples, swapped set {}",
            target.len(),
            swapped.len()
        )));
    }
    if let Some(i) = target.iter().zip(swapped).position(|(a, b)| a.tokens != b.tokens) {
        return Err(Error::Data(format!("example {i} differs between the target and swapped sets")));
    }
    let a = grad_importance(model, target, FD_STEP)?;
    let b = grad_importance(model, swapped, FD_STEP)?;
    let mut out = a.clone();
    for (o, s) in out.scores.iter_mut().zip(&b.scores) {
        *o -= s;
    }
    Ok(out)
}

/// Proxy score for `target`, built from one conflict dataset.
pub fn proxy_for_target(model: &Model<f32>, dataset: &[ConflictExample], target: Target) -> Result<HeadScoreMap> {
    let mut map = proxy_score(model, &labeled(dataset, target), &labeled(dataset, target.other()))?;
    map.target = Some(target);
    Ok(map)
}

/// How the corrupted input of path patching is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Mask(CorruptMode),
    /// Corrupted input equals the clean input.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Readout {
    /// Raw logits.
    #[default]
    Logits,
    /// Softmax probabilities.
    Probs,
}

/// Path-patching score per head: freeze every other head at its clean value,
/// give the head its corrupted value, and measure how the target-vs-other
/// answer margin moves. Averaged over the dataset.
pub fn path_patch_score(
    model: &Model<f32>,
    dataset: &[ConflictExample],
    target: Target,
    corruption: Corruption,
    readout: Readout,
) -> Result<HeadScoreMap> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let heads = model.spec.all_heads();
    let per_example: Vec<Vec<f64>> = dataset
        .par_iter()
        .map(|ex| {
            let (t, o) = target.answers(ex);
            for a in [t, o] {
                if a >= model.spec.vocab {
                    return Err(Error::TokenOutOfRange {
                        id: a,
                        vocab: model.spec.vocab,
                    });
                }
            }
            let corrupted = match corruption {
                Corruption::Mask(mode) => corrupt(ex, mode)?,
                Corruption::Identity => ex.clone(),
            };
            let empty = InterventionPlan::default();
            let clean = model.forward(&ex.tokens, &empty, true)?;
            let dirty = model.forward(&corrupted.tokens, &empty, true)?;
            let pick = |logits: &[f32], probs: &[f32], a: usize| -> f64 {
                match readout {
                    Readout::Logits => logits[a] as f64,
                    Readout::Probs => probs[a] as f64,
                }
            };
            let base = pick(&clean.logits, &clean.probs, t) - pick(&clean.logits, &clean.probs, o);
            heads
                .iter()
                .map(|&h| {
                    let plan = freeze_except(&clean, h, &dirty)?;
                    let p = model.forward(&ex.tokens, &plan, false)?;
                    Ok(base - (pick(&p.logits, &p.probs, t) - pick(&p.logits, &p.probs, o)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut map = HeadScoreMap::zeros(&model.spec, Method::PathPatch, Some(target));
    let n = dataset.len() as f64;
    for (k, id) in heads.iter().enumerate() {
        let sum: f64 = per_example.iter().map(|row| row[k]).sum();
        map.set(*id, sum / n);
    }
    map.ensure_finite()?;
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    Ascending,
    Descending,
}

/// Number of heads selected by `k` percent of `total`: `⌈k·total/100⌉`.
pub fn selection_count(k_percent: f64, total: usize) -> Result<usize> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::Data(format!("pruning rate {k_percent}% outside (0, 100]")));
    }
    let x = k_percent * total as f64 / 100.0;
    // Guard against products like 60.000000000000004.
    let n = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    Ok((n as usize).clamp(1, total))
}

/// Heads at one end of the score ordering; ties broken by (layer, head).
pub fn rank_select(scores: &HeadScoreMap, k_percent: f64, order: Order) -> Result<Vec<HeadId>> {
    let count = selection_count(k_percent, scores.scores.len())?;
    let mut all: Vec<(HeadId, f64)> = scores.iter().collect();
    all.sort_by(|a, b| {
        let c = match order {
            Order::Ascending => a.1.total_cmp(&b.1),
            Order::Descending => b.1.total_cmp(&a.1),
        };
        c.then(a.0.cmp(&b.0))
    });
    Ok(all.into_iter().take(count).map(|(h, _)| h).collect())
}

/// Prunes the `k`% most negative heads for the map's target.
pub fn ph3_prune(scores: &HeadScoreMap, k_percent: f64) -> Result<InterventionPlan> {
    Ok(InterventionPlan::prune(rank_select(scores, k_percent, Order::Ascending)?))
}
