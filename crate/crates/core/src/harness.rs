//! Usage metrics, knockout and flow-blocking sweeps, pruning-rate selection.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::intervention::{block_flow, knockout, ComponentKind, InterventionPlan, LayerWindow};
use crate::model::Model;
use crate::scoring::{ph3_prune, HeadScoreMap, Target};
use crate::world::{ConflictExample, Element, Form};

/// Pruning rates tried by [`select_prune_rate`] unless told otherwise.
pub const DEFAULT_K_GRID: [f64; 6] = [1.0, 3.0, 5.0, 7.0, 9.0, 15.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UsageReport {
    pub f_m: u64,
    pub f_c: u64,
    pub f_o: u64,
    pub rm: f64,
    pub rc: f64,
    pub ro: f64,
}

impl UsageReport {
    pub fn from_counts(f_m: u64, f_c: u64, f_o: u64) -> Result<Self> {
        let total = f_m + f_c + f_o;
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        let t = total as f64;
        Ok(Self {
            f_m,
            f_c,
            f_o,
            rm: f_m as f64 / t,
            rc: f_c as f64 / t,
            ro: f_o as f64 / t,
        })
    }

    pub fn rate(&self, target: Target) -> f64 {
        match target {
            Target::Memory => self.rm,
            Target::Context => self.rc,
        }
    }
}

/// Greedy last-token predictions under `plan`, classified as memory,
/// context or other.
pub fn evaluate(model: &Model<f32>, dataset: &[ConflictExample], plan: &InterventionPlan) -> Result<UsageReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds: Vec<usize> = dataset
        .par_iter()
        .map(|ex| Ok(model.forward(&ex.tokens, plan, false)?.top_token()))
        .collect::<Result<_>>()?;
    let (mut m, mut c, mut o) = (0, 0, 0);
    for (ex, &p) in dataset.iter().zip(&preds) {
        if p == ex.a_m {
            m += 1;
        } else if p == ex.a_c {
            c += 1;
        } else {
            o += 1;
        }
    }
    UsageReport::from_counts(m, c, o)
}

/// Effects indexed by (element, center layer).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectGrid {
    pub experiment: String,
    pub window: usize,
    pub layers: usize,
    pub elements: Vec<Element>,
    /// Mean of `p_orig − p_after` for the clean answer, row-major by element.
    pub absolute: Vec<f64>,
    /// Mean of `(p_orig − p_after) / p_orig`.
    pub relative: Vec<f64>,
    /// Examples used per element row.
    pub counted: Vec<usize>,
    /// Examples skipped per element row because the element was absent.
    pub skipped: Vec<usize>,
}

impl EffectGrid {
    pub fn absolute_at(&self, element: Element, layer: usize) -> Option<f64> {
        let r = self.elements.iter().position(|&e| e == element)?;
        self.absolute.get(r * self.layers + layer.checked_sub(1)?).copied()
    }

    pub fn relative_at(&self, element: Element, layer: usize) -> Option<f64> {
        let r = self.elements.iter().position(|&e| e == element)?;
        self.relative.get(r * self.layers + layer.checked_sub(1)?).copied()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "element,layer,effect,relative,counted,skipped")?;
        for (r, el) in self.elements.iter().enumerate() {
            for l in 0..self.layers {
                let i = r * self.layers + l;
                writeln!(
                    w,
                    "{el},{},{},{},{},{}",
                    l + 1,
                    self.absolute[i],
                    self.relative[i],
                    self.counted[r],
                    self.skipped[r]
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Element rows for a dataset: seven when it is all dual-context, else six.
pub fn grid_elements(dataset: &[ConflictExample]) -> Vec<Element> {
    if !dataset.is_empty() && dataset.iter().all(|e| e.form == Form::DualContext) {
        Element::DUAL.to_vec()
    } else {
        Element::SINGLE.to_vec()
    }
}

fn sweep<F>(model: &Model<f32>, dataset: &[ConflictExample], window: usize, experiment: &str, plan_for: F) -> Result<EffectGrid>
where
    F: Fn(Element, LayerWindow, &ConflictExample) -> Result<InterventionPlan> + Sync,
{
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let layers = model.spec.layers;
    let elements = grid_elements(dataset);
    let empty = InterventionPlan::default();
    let clean: Vec<(usize, f64)> = dataset
        .par_iter()
        .map(|ex| {
            let t = model.forward(&ex.tokens, &empty, false)?;
            let a = t.top_token();
            Ok((a, t.probs[a] as f64))
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize, usize)> = (0..elements.len())
        .flat_map(|r| (1..=layers).flat_map(move |c| (0..dataset.len()).map(move |e| (r, c, e))))
        .collect();
    let results: Vec<Option<(f64, f64)>> = jobs
        .par_iter()
        .map(|&(r, c, e)| {
            let ex = &dataset[e];
            if ex.positions(elements[r]).is_empty() {
                return Ok(None);
            }
            let plan = plan_for(elements[r], LayerWindow::new(c, window), ex)?;
            let (answer, p0) = clean[e];
            let p1 = model.forward(&ex.tokens, &plan, false)?.probs[answer] as f64;
            let d = p0 - p1;
            Ok(Some((d, if p0 > 0.0 { d / p0 } else { 0.0 })))
        })
        .collect::<Result<_>>()?;

    let n = dataset.len();
    let mut grid = EffectGrid {
        experiment: experiment.to_string(),
        window,
        layers,
        elements: elements.clone(),
        absolute: vec![0.0; elements.len() * layers],
        relative: vec![0.0; elements.len() * layers],
        counted: vec![0; elements.len()],
        skipped: vec![0; elements.len()],
    };
    for r in 0..elements.len() {
        for c in 0..layers {
            let cell = &results[(r * layers + c) * n..(r * layers + c + 1) * n];
            let (mut a, mut rel, mut k) = (0.0, 0.0, 0usize);
            for (d, q) in cell.iter().flatten() {
                a += d;
                rel += q;
                k += 1;
            }
            if k > 0 {
                grid.absolute[r * layers + c] = a / k as f64;
                grid.relative[r * layers + c] = rel / k as f64;
            }
            grid.counted[r] = k;
            grid.skipped[r] = n - k;
        }
    }
    Ok(grid)
}

/// Knocks out MHA or FFN updates at an element's positions over a window of
/// layers centred on each layer in turn.
pub fn sweep_knockout(model: &Model<f32>, dataset: &[ConflictExample], kind: ComponentKind, window: usize) -> Result<EffectGrid> {
    let name = match kind {
        ComponentKind::Mha => "knockout-mha",
        ComponentKind::Ffn => "knockout-ffn",
    };
    sweep(model, dataset, window, name, |el, win, ex| knockout(kind, el, win, ex, &model.spec))
}

/// Blocks attention from the last token to an element over a window of layers.
pub fn sweep_flow_block(model: &Model<f32>, dataset: &[ConflictExample], window: usize) -> Result<EffectGrid> {
    sweep(model, dataset, window, "flow-block", |el, win, ex| block_flow(el, win, ex, &model.spec))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PruneRateChoice {
    pub k: f64,
    /// `(k, usage rate)` for every grid point, in grid order.
    pub curve: Vec<(f64, f64)>,
}

/// Picks the pruning rate that maximizes the target usage rate on `dev`;
/// ties go to the smallest `k`.
pub fn select_prune_rate(
    model: &Model<f32>,
    scores: &HeadScoreMap,
    dev: &[ConflictExample],
    k_grid: &[f64],
    target: Target,
) -> Result<PruneRateChoice> {
    if k_grid.is_empty() {
        return Err(Error::Data("empty pruning-rate grid".into()));
    }
    if dev.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut curve = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let rate = evaluate(model, dev, &ph3_prune(scores, k)?)?.rate(target);
        curve.push((k, rate));
    }
    let mut best = curve[0];
    for &(k, r) in &curve[1..] {
        if r > best.1 || (r == best.1 && k < best.0) {
            best = (k, r);
        }
    }
    Ok(PruneRateChoice { k: best.0, curve })
}

/// `<experiment>_<model>_<tag>.csv`
pub fn output_name(experiment: &str, model: &str, tag: &str) -> String {
    format!("{experiment}_{model}_{tag}.csv")
}
