//! Hand-built transformers with known memory and context circuits.
//!
//! The residual stream is split into disjoint coordinate blocks:
//!
//! | block   | width         | written by                                   |
//! |---------|---------------|----------------------------------------------|
//! | `ID`    | `|V|`         | token embedding (scaled by `ε`), answer heads |
//! | `ATTR`  | all attributes| layer-1 FFN at subject positions             |
//! | `REL`   | 4             | relation-word embeddings, relation head      |
//! | flags   | 10            | embeddings, position rows, circuit heads     |
//!
//! Layer 1 marks tokens after `Q:` and copies the relation onto subjects; its
//! FFN then looks up `(subject, relation) → a_m`. Layer 2 routes the question
//! subject, relation and memory attribute to the last token. Layer 3 holds the
//! memory head (reads `ATTR` at the question subject, weight `λ`) and the
//! context head (copies the context attribute, weight `1 − λ`). All other
//! heads attend to themselves with zero OV.
//!
//! Attention gains are large enough that unwanted softmax weights underflow to
//! exactly zero in `f32`, so most properties hold exactly rather than
//! approximately.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intervention::{HeadId, InterventionPlan};
use crate::model::{Activation, Model, ModelSpec, PositionalEncoding, Weights};
use crate::tensor::{matmul, Tensor};
use crate::world::{FactWorld, Form, Relation, ANSWER_MARKER, QUESTION_MARKER, UNK};

/// Maximum sequence length of planted models.
pub const MAX_SEQ: usize = 48;
/// Embedding scale; a power of two so that rescaling is exact.
pub const EPS: f32 = 0.125;
/// Score gap (after the `1/√dh` factor) used for hard attention.
const HARD_GAP: f32 = 200.0;
/// Score gap for the deliberately soft "partial focus" term.
const SOFT_GAP: f32 = 2.0;
/// Amount added to `λ = 0.5` so the two answer logits never tie.
pub const TIE_BREAK: f64 = 1e-3;

const N_FLAGS: usize = 10;
const ONE: usize = 0;
const RAMP: usize = 1;
const IS_LAST: usize = 2;
const QTOKEN: usize = 3;
const QMARK: usize = 4;
const SUBJ: usize = 5;
const ATTRFLAG: usize = 6;
const RELW: usize = 7;
const QREL: usize = 8;
const QREADY: usize = 9;

/// Where the circuit lives, plus the mix it was built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Requested mix.
    pub lambda: f64,
    /// Mix actually used after tie avoidance.
    pub effective_lambda: f64,
    pub memory_head: HeadId,
    pub context_head: HeadId,
    pub routing_head: HeadId,
    pub marker_head: HeadId,
    pub relation_head: HeadId,
    pub prefer_memory_in_dual: bool,
    #[serde(default)]
    pub rotation_seed: Option<u64>,
}

impl GroundTruth {
    pub fn circuit_heads(&self) -> [HeadId; 5] {
        [
            self.marker_head,
            self.relation_head,
            self.routing_head,
            self.memory_head,
            self.context_head,
        ]
    }

    pub fn filler_heads(&self, spec: &ModelSpec) -> Vec<HeadId> {
        let circuit = self.circuit_heads();
        spec.all_heads().into_iter().filter(|h| !circuit.contains(h)).collect()
    }

    /// Whether the model should answer with the memory attribute.
    pub fn answers_memory(&self) -> bool {
        self.effective_lambda > 0.5
    }
}

#[derive(Debug, Clone)]
pub struct PlantedOptions {
    pub layers: usize,
    pub heads: usize,
    pub lambda: f64,
    /// Overrides the computed width; rejected if too small.
    pub d_model: Option<usize>,
    /// In dual-context prompts the context head prefers the attribute that
    /// matches the model's memory.
    pub prefer_memory_in_dual: bool,
    /// Applies a random orthogonal change of residual basis.
    pub rotation_seed: Option<u64>,
}

impl Default for PlantedOptions {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 4,
            lambda: 0.5,
            d_model: None,
            prefer_memory_in_dual: true,
            rotation_seed: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub model: Model<f32>,
    pub truth: GroundTruth,
}

struct Layout {
    vocab: usize,
    attr_tokens: Vec<usize>,
    d: usize,
    dh: usize,
}

impl Layout {
    fn id(&self, tok: usize) -> usize {
        tok
    }
    fn attr(&self, j: usize) -> usize {
        self.vocab + j
    }
    fn rel(&self, r: usize) -> usize {
        self.vocab + self.attr_tokens.len() + r
    }
    fn flag(&self, f: usize) -> usize {
        self.vocab + self.attr_tokens.len() + Relation::ALL.len() + f
    }
    fn min_width(&self) -> usize {
        self.flag(N_FLAGS)
    }
}

fn rel_index(r: Relation) -> usize {
    Relation::ALL.iter().position(|&x| x == r).expect("listed relation")
}

/// Builds a planted model for `world`.
pub fn build_planted(world: &FactWorld, opts: &PlantedOptions) -> Result<PlantedModel> {
    if opts.layers < 3 {
        return Err(Error::Spec(format!("planted models need at least 3 layers, got {}", opts.layers)));
    }
    if opts.heads < 2 {
        return Err(Error::Spec(format!("planted models need at least 2 heads per layer, got {}", opts.heads)));
    }
    if !(0.0..=1.0).contains(&opts.lambda) {
        return Err(Error::Spec(format!("λ must lie in [0, 1], got {}", opts.lambda)));
    }
    let lambda = if (opts.lambda - 0.5).abs() < 1e-12 {
        opts.lambda + TIE_BREAK
    } else {
        opts.lambda
    };
    let m = opts.heads;
    let attr_tokens: Vec<usize> = world.attribute_tokens().into_iter().flatten().collect();
    let n_attr = attr_tokens.len();
    let mut lay = Layout {
        vocab: world.vocab_size(),
        attr_tokens,
        d: 0,
        dh: 0,
    };
    let slots = (n_attr + 2).max(Relation::ALL.len());
    let auto = lay.min_width().div_ceil(m).max(slots) * m;
    let d = opts.d_model.unwrap_or(auto);
    if d < lay.min_width() || d % m != 0 || d / m < slots {
        return Err(Error::Spec(format!(
            "width {d} too small for the planted channels: need d ≥ {}, d divisible by {m} and d/{m} ≥ {slots}",
            lay.min_width()
        )));
    }
    lay.d = d;
    lay.dh = d / m;
    let n_units = 2 * world.subjects.len() * world.relations.len();
    let spec = ModelSpec {
        layers: opts.layers,
        heads: m,
        d_model: d,
        d_ff: n_units,
        vocab: lay.vocab,
        max_seq: MAX_SEQ,
        use_layer_norm: false,
        activation: Activation::Relu,
        positional_encoding: PositionalEncoding::LearnedAbsolute,
        ln_eps: 1e-5,
    };
    spec.validate()?;

    let truth = GroundTruth {
        lambda: opts.lambda,
        effective_lambda: lambda,
        marker_head: HeadId::new(1, 0),
        relation_head: HeadId::new(1, 1),
        routing_head: HeadId::new(2, 1),
        memory_head: HeadId::new(3, 0),
        context_head: HeadId::new(3, m - 1),
        prefer_memory_in_dual: opts.prefer_memory_in_dual,
        rotation_seed: opts.rotation_seed,
    };

    let mut w = Weights::<f32>::zeros(&spec);
    write_embeddings(&mut w, world, &lay)?;
    let sqrt_dh = (lay.dh as f32).sqrt();
    let hard = HARD_GAP * sqrt_dh;
    let soft = SOFT_GAP * sqrt_dh;
    let inv = 1.0 / EPS;
    let g_out = ((lay.vocab as f64).ln() - 1.0).max(1.0);

    for l in 1..=opts.layers {
        for h in 0..m {
            let id = HeadId::new(l, h);
            if !truth.circuit_heads().contains(&id) {
                self_attend(&mut w, &lay, id, hard);
            }
        }
    }

    // Layer 1: question marker and relation copier.
    {
        let h = truth.marker_head;
        let lw = &mut w.layers[0];
        lw.w_q[h.head].set(lay.flag(ONE), 0, hard);
        lw.w_k[h.head].set(lay.flag(QTOKEN), 0, inv);
        lw.w_v[h.head].set(lay.flag(QTOKEN), 0, inv);
        lw.w_o.set(h.head * lay.dh, lay.flag(QMARK), 1.0);

        let h = truth.relation_head;
        lw.w_q[h.head].set(lay.flag(ONE), 0, hard);
        lw.w_k[h.head].set(lay.flag(RELW), 0, inv);
        for r in 0..Relation::ALL.len() {
            lw.w_v[h.head].set(lay.rel(r), r, inv);
            lw.w_o.set(h.head * lay.dh + r, lay.rel(r), 1.0);
        }

        // Two units per fact; their difference is a clamp that outputs exactly
        // one when subject and relation are both present.
        let mut u = 0;
        for s in 0..world.subjects.len() {
            let s_tok = world.subject_token(s);
            for (ri, &rel) in world.relations.iter().enumerate() {
                let a = world.attribute_token(ri, world.facts[s][ri]);
                let j = lay.attr_tokens.iter().position(|&t| t == a).expect("attribute listed");
                for (k, bias, out) in [(0, -6.0f32, 1.0f32), (1, -7.0, -1.0)] {
                    lw.w_1.set(lay.id(s_tok), u + k, 4.0 * inv);
                    lw.w_1.set(lay.rel(rel_index(rel)), u + k, 4.0);
                    lw.w_1.set(lay.flag(ONE), u + k, bias);
                    lw.w_2.set(u + k, lay.attr(j), out);
                }
                u += 2;
            }
        }
    }

    // Layer 2: route subject, relation and memory attribute to the last token.
    // Other positions attend to themselves through the second query slot.
    {
        let h = truth.routing_head;
        let lw = &mut w.layers[1];
        let (wq, wk, wv) = (&mut lw.w_q[h.head], &mut lw.w_k[h.head], &mut lw.w_v[h.head]);
        wq.set(lay.flag(IS_LAST), 0, hard * inv);
        wk.set(lay.flag(QMARK), 0, 1.0);
        wk.set(lay.flag(SUBJ), 0, inv);
        wk.set(lay.flag(RELW), 0, inv);
        wk.set(lay.flag(ONE), 0, -1.5);
        wq.set(lay.flag(ONE), 1, hard);
        wq.set(lay.flag(IS_LAST), 1, -hard * inv);
        wk.set(lay.flag(RAMP), 1, 1.0);
        let base = h.head * lay.dh;
        wv.set(lay.flag(SUBJ), 0, inv);
        lw.w_o.set(base, lay.flag(QREADY), 2.0);
        wv.set(lay.flag(RELW), 1, inv);
        lw.w_o.set(base + 1, lay.flag(QREL), 2.0);
        for j in 0..n_attr {
            wv.set(lay.attr(j), 2 + j, 1.0);
            lw.w_o.set(base + 2 + j, lay.attr(j), 2.0);
        }
    }

    // Layer 3: memory and context heads.
    {
        let lw = &mut w.layers[2];
        // The question subject carries ATTR = 1 from the FFN plus 2 from the
        // routing head attending to itself.
        let attr_at_subject = 3.0f32;

        let h = truth.memory_head;
        lw.w_q[h.head].set(lay.flag(IS_LAST), 0, soft * inv);
        lw.w_q[h.head].set(lay.flag(QREL), 0, hard);
        lw.w_k[h.head].set(lay.flag(QMARK), 0, 1.0);
        lw.w_k[h.head].set(lay.flag(SUBJ), 0, inv);
        lw.w_k[h.head].set(lay.flag(ONE), 0, -1.5);
        // A masked token before the question competes with the subject.
        lw.w_k[h.head].set(lay.id(UNK), 0, 2.0 * inv);
        let scale = (lambda * g_out) as f32 / (attr_at_subject * EPS);
        for j in 0..n_attr {
            lw.w_v[h.head].set(lay.attr(j), j, 1.0);
            lw.w_o.set(h.head * lay.dh + j, lay.id(lay.attr_tokens[j]), scale);
        }

        let h = truth.context_head;
        lw.w_q[h.head].set(lay.flag(IS_LAST), 0, soft * inv);
        lw.w_q[h.head].set(lay.flag(QREADY), 0, hard);
        lw.w_k[h.head].set(lay.flag(ATTRFLAG), 0, inv);
        if opts.prefer_memory_in_dual {
            for j in 0..n_attr {
                lw.w_q[h.head].set(lay.attr(j), 1 + j, hard / attr_at_subject);
                lw.w_k[h.head].set(lay.id(lay.attr_tokens[j]), 1 + j, inv);
            }
        }
        let scale = ((1.0 - lambda) * g_out) as f32 * inv;
        for j in 0..n_attr {
            lw.w_v[h.head].set(lay.id(lay.attr_tokens[j]), j, inv);
            lw.w_o.set(h.head * lay.dh + j, lay.id(lay.attr_tokens[j]), scale);
        }
    }

    if let Some(seed) = opts.rotation_seed {
        w = rotate(&w, seed)?;
    }
    let model = Model::new(spec, w)?;
    Ok(PlantedModel { model, truth })
}

fn write_embeddings(w: &mut Weights<f32>, world: &FactWorld, lay: &Layout) -> Result<()> {
    let tok = &world.tokenizer;
    let e = &mut w.embed;
    for t in 1..lay.vocab {
        e.set(t, lay.id(t), EPS);
    }
    let id = |word: &str| {
        tok.id(word)
            .ok_or_else(|| Error::Spec(format!("template word `{word}` missing from world vocabulary")))
    };
    e.set(id(QUESTION_MARKER)?, lay.flag(QTOKEN), EPS);
    e.set(id(ANSWER_MARKER)?, lay.flag(IS_LAST), EPS);
    for r in Relation::ALL {
        let t = id(r.key_word())?;
        e.set(t, lay.flag(RELW), EPS);
        e.set(t, lay.rel(rel_index(r)), EPS);
    }
    for s in 0..world.subjects.len() {
        e.set(world.subject_token(s), lay.flag(SUBJ), EPS);
    }
    for &a in &lay.attr_tokens {
        e.set(a, lay.flag(ATTRFLAG), EPS);
    }
    for p in 0..MAX_SEQ {
        w.pos.set(p, lay.flag(ONE), 1.0);
        w.pos.set(p, lay.flag(RAMP), p as f32);
    }
    Ok(())
}

/// Query on the constant channel, key on the position ramp: every position
/// attends to itself. Values stay zero.
fn self_attend(w: &mut Weights<f32>, lay: &Layout, id: HeadId, gain: f32) {
    let lw = &mut w.layers[id.layer - 1];
    lw.w_q[id.head].set(lay.flag(ONE), 0, gain);
    lw.w_k[id.head].set(lay.flag(RAMP), 0, 1.0);
}

/// Random orthogonal matrix by modified Gram–Schmidt on uniform noise.
pub fn random_orthogonal(d: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = (0..d).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    for i in 0..d {
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                let cj = cols[j].clone();
                for (x, y) in cols[i].iter_mut().zip(&cj) {
                    *x -= dot * y;
                }
            }
        }
        let norm = cols[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        cols[i].iter_mut().for_each(|x| *x /= norm);
    }
    let mut q = Tensor::<f64>::zeros(&[d, d]);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            q.set(i, j, v);
        }
    }
    q
}

/// Re-expresses the residual stream in a rotated basis: `x ↦ xQ`. Logits and
/// every attention score are unchanged up to rounding.
fn rotate(w: &Weights<f32>, seed: u64) -> Result<Weights<f32>> {
    let d = w.embed.cols();
    let q = random_orthogonal(d, seed);
    let qt = q.transpose()?;
    let w64 = w.cast::<f64>();
    let mut out = w64.clone();
    out.embed = matmul(&w64.embed, &q)?;
    out.pos = matmul(&w64.pos, &q)?;
    for (o, l) in out.layers.iter_mut().zip(&w64.layers) {
        for h in 0..l.w_q.len() {
            o.w_q[h] = matmul(&qt, &l.w_q[h])?;
            o.w_k[h] = matmul(&qt, &l.w_k[h])?;
            o.w_v[h] = matmul(&qt, &l.w_v[h])?;
        }
        o.w_o = matmul(&l.w_o, &q)?;
        o.w_1 = matmul(&qt, &l.w_1)?;
        o.w_2 = matmul(&l.w_2, &q)?;
    }
    Ok(out.cast())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PlantedReport {
    pub checked_examples: usize,
    pub violations: Vec<String>,
}

impl PlantedReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Exhaustive check of the λ behavior on triple and document prompts, plus
/// isolation of every filler head.
pub fn verify_planted(model: &Model<f32>, world: &FactWorld, truth: &GroundTruth) -> Result<PlantedReport> {
    let mut report = PlantedReport::default();
    let spec = &model.spec;
    if spec.use_layer_norm {
        report.violations.push("planted model uses layer normalization".into());
    }
    for h in truth.circuit_heads() {
        if spec.check_head(h).is_err() {
            report.violations.push(format!("circuit head {h} outside the model"));
        }
    }
    if !report.ok() {
        return Ok(report);
    }
    let dh = spec.head_dim();
    for h in truth.filler_heads(spec) {
        let lw = &model.weights.layers[h.layer - 1];
        if lw.w_v[h.head].data().iter().any(|&v| v != 0.0) {
            report.violations.push(format!("filler head {h} has a nonzero value projection"));
        }
        let rows = lw.w_o.row_block(h.head * dh, dh)?;
        if rows.data().iter().any(|&v| v != 0.0) {
            report.violations.push(format!("filler head {h} has a nonzero output projection"));
        }
    }
    let want_memory = truth.answers_memory();
    let empty = InterventionPlan::default();
    for form in [Form::Triple, Form::Document] {
        for ex in world.dataset(form, 0)? {
            report.checked_examples += 1;
            let got = model.forward(&ex.tokens, &empty, false)?.top_token();
            let want = if want_memory { ex.a_m } else { ex.a_c };
            if got != want {
                report.violations.push(format!(
                    "{form} example `{}`: predicted token {got}, expected {} ({})",
                    world.tokenizer.decode(&ex.tokens)?,
                    want,
                    if want_memory { "a_m" } else { "a_c" }
                ));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::gen_world;

    fn world() -> FactWorld {
        gen_world(4, &Relation::ALL, 3, 5).unwrap()
    }

    fn build(lambda: f64) -> PlantedModel {
        build_planted(
            &world(),
            &PlantedOptions {
                lambda,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn lambda_extremes_verify() {
        for lambda in [0.0, 0.2, 0.5, 0.8, 1.0] {
            let p = build(lambda);
            let r = verify_planted(&p.model, &world(), &p.truth).unwrap();
            assert!(r.ok(), "λ={lambda}: {:?}", r.violations);
            assert_eq!(r.checked_examples, 32);
        }
    }

    #[test]
    fn half_is_perturbed() {
        let p = build(0.5);
        assert_eq!(p.truth.effective_lambda, 0.5 + TIE_BREAK);
        assert!(p.truth.answers_memory());
    }

    #[test]
    fn filler_mutation_detected() {
        let mut p = build(1.0);
        let f = p.truth.filler_heads(&p.model.spec)[0];
        p.model.weights.layers[f.layer - 1].w_v[f.head].data_mut()[0] = 0.5;
        let r = verify_planted(&p.model, &world(), &p.truth).unwrap();
        assert!(r.violations.iter().any(|v| v.contains("filler head")));
    }

    #[test]
    fn flipped_lambda_detected() {
        let p = build(1.0);
        let mut truth = p.truth.clone();
        truth.effective_lambda = 0.0;
        let r = verify_planted(&p.model, &world(), &truth).unwrap();
        assert_eq!(r.violations.len(), 32);
    }

    #[test]
    fn width_too_small() {
        let err = build_planted(
            &world(),
            &PlantedOptions {
                d_model: Some(8),
                ..Default::default()
            },
        );
        assert!(matches!(err, Err(Error::Spec(_))));
        assert!(build_planted(&world(), &PlantedOptions { layers: 2, ..Default::default() }).is_err());
    }

    #[test]
    fn orthogonal_matrix() {
        let q = random_orthogonal(12, 3);
        let p = matmul(&q.transpose().unwrap(), &q).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((p.at(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotated_model_keeps_behavior() {
        for lambda in [0.0, 1.0] {
            let p = build_planted(
                &world(),
                &PlantedOptions {
                    lambda,
                    rotation_seed: Some(9),
                    ..Default::default()
                },
            )
            .unwrap();
            let r = verify_planted(&p.model, &world(), &p.truth).unwrap();
            assert!(r.ok(), "{:?}", r.violations);
        }
    }

    #[test]
    fn dual_context_copies_memory_attribute() {
        let w = world();
        let p = build(0.0);
        for ex in w.dataset(Form::DualContext, 1).unwrap() {
            let t = p.model.forward(&ex.tokens, &InterventionPlan::default(), false).unwrap();
            assert_eq!(t.top_token(), ex.a_m);
        }
    }

    #[test]
    fn four_layer_variant() {
        let p = build_planted(&world(), &PlantedOptions { layers: 4, lambda: 0.0, ..Default::default() }).unwrap();
        let r = verify_planted(&p.model, &world(), &p.truth).unwrap();
        assert!(r.ok(), "{:?}", r.violations);
    }
}
