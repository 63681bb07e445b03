//! Early-exit projections of intermediate updates and extraction rates.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::intervention::{HeadId, InterventionPlan};
use crate::model::{top_token, Model, RunTrace};
use crate::world::ConflictExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Site {
    Mha,
    Ffn,
    Head(HeadId),
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mha => f.write_str("MHA"),
            Self::Ffn => f.write_str("FFN"),
            Self::Head(h) => write!(f, "head({h})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractionRecord {
    pub layer: usize,
    pub site: Site,
    pub top_token: usize,
    pub final_token: usize,
    pub matched: bool,
}

/// Top token of `φ(update)`.
pub fn early_exit_top(model: &Model<f32>, update: &[f32]) -> Result<usize> {
    if update.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("early-exit input".into()));
    }
    Ok(top_token(&model.readout(update)?))
}

fn recorded(model: &Model<f32>, ex: &ConflictExample) -> Result<RunTrace> {
    model.forward(&ex.tokens, &InterventionPlan::default(), true)
}

/// Early-exit records for every layer's MHA and FFN update at the last token.
pub fn extraction_records(model: &Model<f32>, ex: &ConflictExample) -> Result<Vec<ExtractionRecord>> {
    let trace = recorded(model, ex)?;
    let last = trace.seq_len() - 1;
    let final_token = trace.top_token();
    let mut out = Vec::with_capacity(2 * model.spec.layers);
    for (i, lt) in trace.layers.iter().enumerate() {
        for (site, update) in [(Site::Mha, &lt.mha), (Site::Ffn, &lt.ffn)] {
            let top = early_exit_top(model, update.row(last))?;
            out.push(ExtractionRecord {
                layer: i + 1,
                site,
                top_token: top,
                final_token,
                matched: top == final_token,
            });
        }
    }
    Ok(out)
}

/// Fraction of examples whose `site` update at `layer` decodes to the final
/// prediction.
pub fn extraction_rate(model: &Model<f32>, dataset: &[ConflictExample], site: Site, layer: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.spec.check_layer(layer)?;
    let hits: Vec<bool> = dataset
        .par_iter()
        .map(|ex| {
            let trace = recorded(model, ex)?;
            let last = trace.seq_len() - 1;
            let lt = &trace.layers[layer - 1];
            let update = match site {
                Site::Mha => lt.mha.row(last).to_vec(),
                Site::Ffn => lt.ffn.row(last).to_vec(),
                Site::Head(h) => {
                    if h.layer != layer {
                        return Err(Error::Plan(format!("head {h} is not in layer {layer}")));
                    }
                    model.head_contribution(h, lt.heads[h.head].row(last))?
                }
            };
            Ok(early_exit_top(model, &update)? == trace.top_token())
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / dataset.len() as f64)
}

/// Rate table with one row per (layer, MHA|FFN).
pub fn layer_rates(model: &Model<f32>, dataset: &[ConflictExample]) -> Result<Vec<(usize, Site, f64)>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_example: Vec<Vec<ExtractionRecord>> = dataset
        .par_iter()
        .map(|ex| extraction_records(model, ex))
        .collect::<Result<_>>()?;
    let rows = per_example[0].len();
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let hits = per_example.iter().filter(|recs| recs[r].matched).count();
        let rec = &per_example[0][r];
        out.push((rec.layer, rec.site, hits as f64 / dataset.len() as f64));
    }
    Ok(out)
}

/// Fractions of (example, head) pairs whose head-level top token is `a_m`
/// and `a_c`, projecting each head through its slice of `W_o`.
pub fn head_extraction_rates(
    model: &Model<f32>,
    dataset: &[ConflictExample],
    heads: &[HeadId],
) -> Result<(f64, f64)> {
    for &h in heads {
        model.spec.check_head(h)?;
    }
    if dataset.is_empty() || heads.is_empty() {
        return Ok((0.0, 0.0));
    }
    let counts: Vec<(usize, usize)> = dataset
        .par_iter()
        .map(|ex| {
            let trace = recorded(model, ex)?;
            let last = trace.seq_len() - 1;
            let (mut m, mut c) = (0, 0);
            for &h in heads {
                let contrib = model.head_contribution(h, trace.head_output(h)?.row(last))?;
                let top = early_exit_top(model, &contrib)?;
                m += usize::from(top == ex.a_m);
                c += usize::from(top == ex.a_c);
            }
            Ok((m, c))
        })
        .collect::<Result<_>>()?;
    let total = (dataset.len() * heads.len()) as f64;
    let m: usize = counts.iter().map(|x| x.0).sum();
    let c: usize = counts.iter().map(|x| x.1).sum();
    Ok((m as f64 / total, c as f64 / total))
}

pub fn write_rates_csv(path: &Path, rows: &[(usize, Site, f64)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "layer,site,rate")?;
    for (layer, site, rate) in rows {
        writeln!(w, "{layer},{site},{rate}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planted::{build_planted, PlantedOptions};
    use crate::world::{gen_world, Form, Relation};

    #[test]
    fn zero_update_decodes_to_token_zero() {
        let w = gen_world(2, &[Relation::Capital], 2, 0).unwrap();
        let p = build_planted(&w, &PlantedOptions::default()).unwrap();
        assert_eq!(early_exit_top(&p.model, &vec![0.0; p.model.spec.d_model]).unwrap(), 0);
    }

    #[test]
    fn context_layer_rate_is_one() {
        let w = gen_world(4, &Relation::ALL, 3, 2).unwrap();
        let p = build_planted(&w, &PlantedOptions { lambda: 0.0, ..Default::default() }).unwrap();
        let data = w.dataset(Form::Triple, 0).unwrap();
        let rate = extraction_rate(&p.model, &data, Site::Mha, p.truth.context_head.layer).unwrap();
        assert_eq!(rate, 1.0);
        let manual = data
            .iter()
            .filter(|ex| {
                let recs = extraction_records(&p.model, ex).unwrap();
                recs.iter().any(|r| r.layer == 3 && r.site == Site::Mha && r.matched)
            })
            .count() as f64
            / data.len() as f64;
        assert_eq!(rate, manual);
    }

    #[test]
    fn top_layer_lens_is_consistent() {
        let w = gen_world(3, &Relation::ALL, 3, 4).unwrap();
        let p = build_planted(&w, &PlantedOptions { lambda: 0.8, ..Default::default() }).unwrap();
        for ex in w.dataset(Form::Document, 0).unwrap() {
            let t = p.model.forward(&ex.tokens, &InterventionPlan::default(), false).unwrap();
            assert_eq!(early_exit_top(&p.model, &t.final_hidden).unwrap(), t.top_token());
        }
    }

    #[test]
    fn memory_head_rates() {
        let w = gen_world(4, &Relation::ALL, 3, 2).unwrap();
        let p = build_planted(&w, &PlantedOptions { lambda: 1.0, ..Default::default() }).unwrap();
        let data = w.dataset(Form::Triple, 0).unwrap();
        let (m, c) = head_extraction_rates(&p.model, &data, &[p.truth.memory_head]).unwrap();
        assert_eq!((m, c), (1.0, 0.0));
    }
}
