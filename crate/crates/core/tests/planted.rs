use headscope::harness::{evaluate, select_prune_rate, sweep_flow_block, sweep_knockout, DEFAULT_K_GRID};
use headscope::intervention::{block_flow, knockout, ComponentKind, InterventionPlan, LayerWindow};
use headscope::lens::{early_exit_top, head_extraction_rates};
use headscope::planted::{build_planted, PlantedModel, PlantedOptions};
use headscope::scoring::{
    path_patch_score, ph3_prune, proxy_for_target, Corruption, Readout, Target,
};
use headscope::world::{gen_world, ConflictExample, CorruptMode, Element, FactWorld, Form, Relation};

fn world() -> FactWorld {
    gen_world(8, &Relation::ALL, 4, 21).unwrap()
}

fn planted(w: &FactWorld, lambda: f64) -> PlantedModel {
    build_planted(w, &PlantedOptions { lambda, ..Default::default() }).unwrap()
}

fn empty() -> InterventionPlan {
    InterventionPlan::default()
}

fn pp(p: &PlantedModel, data: &[ConflictExample], target: Target) -> headscope::scoring::HeadScoreMap {
    path_patch_score(&p.model, data, target, Corruption::Mask(target.default_corruption()), Readout::Logits).unwrap()
}

#[test]
fn lambda_extremes_give_pure_usage() {
    let w = world();
    let data = w.dataset(Form::Triple, 0).unwrap();
    assert_eq!(evaluate(&planted(&w, 1.0).model, &data, &empty()).unwrap().rm, 1.0);
    assert_eq!(evaluate(&planted(&w, 0.0).model, &data, &empty()).unwrap().rc, 1.0);
}

#[test]
fn pruning_flips_usage() {
    let w = world();
    let data = w.dataset(Form::Triple, 0).unwrap();
    let p = planted(&w, 0.2);
    let r = evaluate(&p.model, &data, &InterventionPlan::prune([p.truth.context_head])).unwrap();
    assert_eq!(r.rm, 1.0);
    let p = planted(&w, 0.8);
    let r = evaluate(&p.model, &data, &InterventionPlan::prune([p.truth.memory_head])).unwrap();
    assert_eq!(r.rc, 1.0);
}

#[test]
fn filler_pruning_changes_nothing() {
    let w = world();
    let data = w.dataset(Form::Document, 3).unwrap();
    for lambda in [0.2, 0.8] {
        let p = planted(&w, lambda);
        let fillers = p.truth.filler_heads(&p.model.spec);
        assert_eq!(
            evaluate(&p.model, &data, &empty()).unwrap(),
            evaluate(&p.model, &data, &InterventionPlan::prune(fillers)).unwrap()
        );
    }
}

#[test]
fn blocking_context_attribute_equals_pruning_context_head() {
    let w = world();
    let data = w.dataset(Form::Triple, 0).unwrap();
    for lambda in [0.0, 0.3, 0.501] {
        let p = planted(&w, lambda);
        let layer = p.truth.context_head.layer;
        for ex in &data {
            let block = block_flow(Element::ContextAttribute, LayerWindow::new(layer, 0), ex, &p.model.spec).unwrap();
            let a = p.model.forward(&ex.tokens, &block, false).unwrap().logits;
            let b = p
                .model
                .forward(&ex.tokens, &InterventionPlan::prune([p.truth.context_head]), false)
                .unwrap()
                .logits;
            assert_eq!(a, b);
        }
    }
}

#[test]
fn unattended_edges_are_no_ops() {
    let w = world();
    let p = planted(&w, 0.4);
    for ex in w.dataset(Form::Document, 0).unwrap() {
        let base = p.model.forward(&ex.tokens, &empty(), false).unwrap().logits;
        // Nothing at the last token attends to itself with a nonzero value.
        let plan = block_flow(Element::LastToken, LayerWindow::new(2, 4), &ex, &p.model.spec).unwrap();
        assert_eq!(p.model.forward(&ex.tokens, &plan, false).unwrap().logits, base);
        // The FFN writes only at subject positions.
        let plan = knockout(ComponentKind::Ffn, Element::ContextAttribute, LayerWindow::new(2, 4), &ex, &p.model.spec).unwrap();
        assert_eq!(p.model.forward(&ex.tokens, &plan, false).unwrap().logits, base);
    }
}

#[test]
fn path_patching_localizes_planted_heads() {
    let w = world();
    let p = planted(&w, 0.5);
    let data = w.dataset(Form::Triple, 0).unwrap();
    let sc = pp(&p, &data, Target::Context);
    let sm = pp(&p, &data, Target::Memory);
    assert_eq!(sc.top_by_magnitude(), p.truth.context_head);
    assert_eq!(sm.top_by_magnitude(), p.truth.memory_head);
    for f in p.truth.filler_heads(&p.model.spec) {
        assert!(sc.get(f).abs() <= 1e-6 && sm.get(f).abs() <= 1e-6);
    }
    // The other answer head is adversarial in both maps.
    assert!(sc.get(p.truth.memory_head) < 0.0);
    assert!(sm.get(p.truth.context_head) < 0.0);
}

#[test]
fn localization_survives_rotation() {
    let w = world();
    let p = build_planted(&w, &PlantedOptions { lambda: 0.5, rotation_seed: Some(4), ..Default::default() }).unwrap();
    let data = w.dataset(Form::Triple, 0).unwrap();
    let sc = pp(&p, &data, Target::Context);
    let sm = pp(&p, &data, Target::Memory);
    assert_eq!(sc.top_by_magnitude(), p.truth.context_head);
    assert_eq!(sm.top_by_magnitude(), p.truth.memory_head);
    for f in p.truth.filler_heads(&p.model.spec) {
        assert!(sc.get(f).abs() <= 1e-6 && sm.get(f).abs() <= 1e-6);
    }
}

#[test]
fn gradient_proxy_ranks_planted_heads_first() {
    let w = gen_world(4, &Relation::ALL, 3, 2).unwrap();
    let p = planted(&w, 0.5);
    let data = w.dataset(Form::Triple, 0).unwrap();
    for (target, head) in [(Target::Memory, p.truth.memory_head), (Target::Context, p.truth.context_head)] {
        let s = proxy_for_target(&p.model, &data, target).unwrap();
        let best = s.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert_eq!(best, head, "{target}: {:?}", s.scores);
    }
}

#[test]
fn path_patching_is_order_independent() {
    let w = world();
    let p = planted(&w, 0.3);
    let mut data = w.dataset(Form::Document, 2).unwrap();
    let a = pp(&p, &data, Target::Context);
    data.reverse();
    let b = pp(&p, &data, Target::Context);
    for (x, y) in a.scores.iter().zip(&b.scores) {
        assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
    }
}

#[test]
fn frozen_patch_of_context_head_drops_context_logit() {
    let w = world();
    let p = planted(&w, 0.0);
    let ex = w.render(0, Relation::Capital, Form::Triple, 0).unwrap();
    let dirty = headscope::world::corrupt(&ex, CorruptMode::MaskAttribute).unwrap();
    let tc = p.model.forward(&ex.tokens, &empty(), true).unwrap();
    let td = p.model.forward(&dirty.tokens, &empty(), true).unwrap();
    let plan = headscope::intervention::freeze_except(&tc, p.truth.context_head, &td).unwrap();
    let patched = p.model.forward(&ex.tokens, &plan, false).unwrap();
    assert!(patched.logits[ex.a_c] < tc.logits[ex.a_c]);
}

#[test]
fn ph3_and_prune_rate_selection() {
    let w = world();
    let data = w.dataset(Form::Triple, 0).unwrap();
    let dev = w.dataset(Form::Triple, 1).unwrap();
    let p = planted(&w, 0.2);
    let s = pp(&p, &data, Target::Memory);
    let choice = select_prune_rate(&p.model, &s, &dev, &DEFAULT_K_GRID, Target::Memory).unwrap();
    assert_eq!(choice.k, 1.0);
    assert!(choice.curve.iter().all(|&(_, r)| r == 1.0));
    assert_eq!(evaluate(&p.model, &data, &ph3_prune(&s, choice.k).unwrap()).unwrap().rm, 1.0);
}

#[test]
fn extraction_rates_on_planted_heads() {
    let w = world();
    let data = w.dataset(Form::Triple, 0).unwrap();
    let p0 = planted(&w, 0.0);
    assert_eq!(head_extraction_rates(&p0.model, &data, &[p0.truth.context_head]).unwrap(), (0.0, 1.0));
    let fillers = p0.truth.filler_heads(&p0.model.spec);
    let (m, c) = head_extraction_rates(&p0.model, &data, &fillers).unwrap();
    assert!(m <= 0.1 && c <= 0.1);
    let p1 = planted(&w, 1.0);
    assert_eq!(head_extraction_rates(&p1.model, &data, &[p1.truth.memory_head]).unwrap(), (1.0, 0.0));
}

#[test]
fn attribute_direction_decodes_to_attribute() {
    let w = world();
    let p = planted(&w, 0.0);
    let a = w.memory_attribute(3, Relation::Continent).unwrap();
    let dir = p.model.weights.embed.row(a).to_vec();
    assert_eq!(early_exit_top(&p.model, &dir).unwrap(), a);
    let scaled: Vec<f32> = dir.iter().map(|v| v * 7.0).collect();
    assert_eq!(early_exit_top(&p.model, &scaled).unwrap(), a);
}

#[test]
fn full_window_mha_knockout_at_last_token_matches_all_heads_pruned() {
    let w = world();
    let p = planted(&w, 0.0);
    let data = w.dataset(Form::Triple, 0).unwrap();
    let grid = sweep_knockout(&p.model, &data, ComponentKind::Mha, 2 * p.model.spec.layers).unwrap();
    let all = InterventionPlan::prune(p.model.spec.all_heads());
    let mut oracle = 0.0;
    for ex in &data {
        let t = p.model.forward(&ex.tokens, &empty(), false).unwrap();
        let a = t.top_token();
        let q = p.model.forward(&ex.tokens, &all, false).unwrap();
        oracle += t.probs[a] as f64 - q.probs[a] as f64;
    }
    oracle /= data.len() as f64;
    for l in 1..=p.model.spec.layers {
        let got = grid.absolute_at(Element::LastToken, l).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }
}

#[test]
fn ffn_knockout_at_context_attribute_is_zero() {
    let w = world();
    let p = planted(&w, 0.0);
    let data = w.dataset(Form::Triple, 0).unwrap();
    let grid = sweep_knockout(&p.model, &data, ComponentKind::Ffn, 0).unwrap();
    for l in 1..=3 {
        assert_eq!(grid.absolute_at(Element::ContextAttribute, l), Some(0.0));
    }
    assert_eq!(grid.elements.len(), 6);
}

#[test]
fn flow_sweep_directions() {
    let w = world();
    let data = w.dataset(Form::Triple, 0).unwrap();
    let p0 = planted(&w, 0.0);
    let g = sweep_flow_block(&p0.model, &data, 0).unwrap();
    assert!(g.absolute_at(Element::ContextAttribute, p0.truth.context_head.layer).unwrap() > 0.1);
    assert!(g.absolute_at(Element::QuestionSubject, p0.truth.routing_head.layer).unwrap() > 0.0);
    // Question relation blocked where the routing head reads it: the memory
    // head loses its sharp query.
    let p1 = planted(&w, 1.0);
    let g = sweep_flow_block(&p1.model, &data, 0).unwrap();
    assert!(g.absolute_at(Element::QuestionRelation, p1.truth.routing_head.layer).unwrap() > 0.0);
    // Past the last circuit layer nothing is read any more.
    let p4 = build_planted(&w, &PlantedOptions { layers: 4, lambda: 0.0, ..Default::default() }).unwrap();
    let g = sweep_flow_block(&p4.model, &data, 0).unwrap();
    for el in Element::SINGLE {
        assert_eq!(g.absolute_at(el, 4), Some(0.0));
    }
}

#[test]
fn dual_context_grid_has_seven_rows() {
    let w = gen_world(4, &[Relation::Capital, Relation::Country], 3, 1).unwrap();
    let p = planted(&w, 0.0);
    let data = w.dataset(Form::DualContext, 0).unwrap();
    let g = sweep_flow_block(&p.model, &data, 0).unwrap();
    assert_eq!(g.elements.len(), 7);
    assert!(g.absolute_at(Element::MemoryAttribute, 3).unwrap() > 0.1);
}

#[test]
fn sweep_skips_absent_elements() {
    let w = world();
    let p = planted(&w, 0.0);
    let mut data = w.dataset(Form::Triple, 0).unwrap();
    data[0].ranges.remove(&Element::ContextSubject);
    let g = sweep_knockout(&p.model, &data, ComponentKind::Mha, 0).unwrap();
    assert_eq!(g.skipped[0], 1);
    assert_eq!(g.counted[0], data.len() - 1);
}

#[test]
fn sweeps_are_order_invariant() {
    let w = world();
    let p = planted(&w, 0.3);
    let mut data = w.dataset(Form::Triple, 0).unwrap();
    let a = sweep_flow_block(&p.model, &data, 2).unwrap();
    data.reverse();
    let b = sweep_flow_block(&p.model, &data, 2).unwrap();
    for (x, y) in a.absolute.iter().zip(&b.absolute) {
        assert!((x - y).abs() <= 1e-12);
    }
}
