//! Acceptance checks. Run with `cargo test --test acceptance`; prints one
//! PASS/FAIL line per criterion and exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use headscope::harness::{evaluate, select_prune_rate, sweep_flow_block, UsageReport, DEFAULT_K_GRID};
use headscope::intervention::{HeadId, InterventionPlan};
use headscope::lens::head_extraction_rates;
use headscope::model::{Activation, Model, ModelSpec};
use headscope::planted::{build_planted, PlantedModel, PlantedOptions};
use headscope::scoring::{
    grad_importance, path_patch_score, ph3_prune, Corruption, HeadScoreMap, Labeled, Readout, Target, FD_STEP,
};
use headscope::world::{gen_world, ConflictExample, CorruptMode, Element, FactWorld, Form, Relation};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// Pinned tolerances.
const LN_RESIDUAL_TOL: f32 = 1e-5;
const FILLER_TOL: f64 = 1e-6;
const ANALYTIC_REL_TOL: f64 = 1e-4;
const HALVING_REL_TOL: f64 = 1e-5;
const FILLER_EXTRACTION_MAX: f64 = 0.1;
const RATE_SUM_TOL: f64 = 1e-9;

fn random_spec(rng: &mut ChaCha8Rng, ln: bool) -> ModelSpec {
    let heads = rng.gen_range(1..=4);
    ModelSpec {
        layers: rng.gen_range(1..=4),
        heads,
        d_model: heads * rng.gen_range(2..=6),
        d_ff: rng.gen_range(4..=16),
        vocab: rng.gen_range(5..=20),
        max_seq: 16,
        use_layer_norm: ln,
        activation: if rng.gen() { Activation::Gelu } else { Activation::Relu },
        positional_encoding: Default::default(),
        ln_eps: 1e-5,
    }
}

fn c1_residual_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0usize;
    for trace in 0..100 {
        let ln = trace >= 50;
        let spec = random_spec(&mut rng, ln);
        let m = Model::random(spec.clone(), rng.gen(), rng.gen_range(0.2..1.0)).map_err(|e| e.to_string())?;
        let n = rng.gen_range(1..=spec.max_seq);
        let toks: Vec<usize> = (0..n).map(|_| rng.gen_range(0..spec.vocab)).collect();
        let t = m.forward(&toks, &InterventionPlan::default(), true).map_err(|e| e.to_string())?;
        let mut prev = t.embedded.clone().unwrap();
        for (l, lt) in t.layers.iter().enumerate() {
            for i in 0..n {
                for j in 0..spec.d_model {
                    let want = (prev.at(i, j) + lt.mha.at(i, j)) + lt.ffn.at(i, j);
                    let got = lt.hidden.at(i, j);
                    if ln {
                        ensure!((want - got).abs() <= LN_RESIDUAL_TOL, "trace {trace} layer {} pos {i}: {got} vs {want}", l + 1);
                    } else {
                        ensure!(want.to_bits() == got.to_bits(), "trace {trace} layer {} pos {i}: {got} vs {want}", l + 1);
                    }
                    checked += 1;
                }
            }
            prev = lt.hidden.clone();
        }
    }
    Ok(format!("100 traces, {checked} residual entries"))
}

fn c2_world() -> FactWorld {
    gen_world(16, &Relation::ALL, 4, 0).unwrap()
}

fn planted(world: &FactWorld, lambda: f64) -> Result<PlantedModel, String> {
    build_planted(world, &PlantedOptions { lambda, ..Default::default() }).map_err(|e| e.to_string())
}

fn pp(p: &PlantedModel, data: &[ConflictExample], target: Target, c: Corruption) -> Result<HeadScoreMap, String> {
    path_patch_score(&p.model, data, target, c, Readout::Logits).map_err(|e| e.to_string())
}

fn c2_localization() -> Outcome {
    let w = c2_world();
    let data = w.dataset(Form::Triple, 0).map_err(|e| e.to_string())?;
    ensure!(data.len() == 64, "dataset has {} examples", data.len());
    let p = planted(&w, 0.5)?;
    ensure!(p.model.spec.layers == 3 && p.model.spec.heads == 4, "shape {:?}", p.model.spec);
    let sc = pp(&p, &data, Target::Context, Corruption::Mask(Target::Context.default_corruption()))?;
    let sm = pp(&p, &data, Target::Memory, Corruption::Mask(Target::Memory.default_corruption()))?;
    ensure!(sc.top_by_magnitude() == p.truth.context_head, "top |S_c| is {}", sc.top_by_magnitude());
    ensure!(sm.top_by_magnitude() == p.truth.memory_head, "top |S_m| is {}", sm.top_by_magnitude());
    let mut worst = 0f64;
    for f in p.truth.filler_heads(&p.model.spec) {
        worst = worst.max(sc.get(f).abs()).max(sm.get(f).abs());
    }
    ensure!(worst <= FILLER_TOL, "filler score {worst}");
    Ok(format!(
        "S_c[{}]={:.3}, S_m[{}]={:.3}, max filler |S|={worst:e}",
        p.truth.context_head,
        sc.get(p.truth.context_head),
        p.truth.memory_head,
        sm.get(p.truth.memory_head)
    ))
}

fn c3_flip() -> Outcome {
    let w = c2_world();
    let data = w.dataset(Form::Triple, 0).map_err(|e| e.to_string())?;
    let dev = w.dataset(Form::Triple, 1).map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    for (lambda, target) in [(0.2, Target::Memory), (0.8, Target::Context)] {
        let p = planted(&w, lambda)?;
        let s = pp(&p, &data, target, Corruption::Mask(target.default_corruption()))?;
        let k = select_prune_rate(&p.model, &s, &dev, &DEFAULT_K_GRID, target).map_err(|e| e.to_string())?.k;
        let plan = ph3_prune(&s, k).map_err(|e| e.to_string())?;
        let before = evaluate(&p.model, &data, &InterventionPlan::default()).map_err(|e| e.to_string())?.rate(target);
        let after = evaluate(&p.model, &data, &plan).map_err(|e| e.to_string())?.rate(target);
        ensure!(before == 0.0 && after == 1.0, "λ={lambda} {target}: {before} → {after}");
        notes.push(format!("λ={lambda} {target} {before}→{after} (k={k}, {})", plan.to_string().trim()));
    }
    Ok(notes.join("; "))
}

/// 1 layer, 2 heads, no norm, zero FFN: `dL/dα_h = (p − onehot(y)) · (c_h Eᵀ)`.
fn micro_model() -> Model<f32> {
    let spec = ModelSpec {
        layers: 1,
        heads: 2,
        d_model: 8,
        d_ff: 4,
        vocab: 12,
        max_seq: 8,
        use_layer_norm: false,
        activation: Activation::Gelu,
        positional_encoding: Default::default(),
        ln_eps: 1e-5,
    };
    let mut m = Model::random(spec, 42, 0.6).unwrap();
    m.weights.layers[0].w_1.data_mut().fill(0.0);
    m.weights.layers[0].w_2.data_mut().fill(0.0);
    m
}

fn analytic(m: &Model<f64>, ex: &Labeled, h: HeadId) -> f64 {
    let t = m.forward(&ex.tokens, &InterventionPlan::default(), true).unwrap();
    let n = ex.tokens.len() - 1;
    let c = m.head_contribution(h, t.head_output(h).unwrap().row(n)).unwrap();
    (0..m.spec.vocab)
        .map(|v| {
            let dir: f64 = (0..m.spec.d_model).map(|j| c[j] * m.weights.embed.at(v, j)).sum();
            (t.probs[v] - if v == ex.answer { 1.0 } else { 0.0 }) * dir
        })
        .sum()
}

fn c4_gradient() -> Outcome {
    let m = micro_model();
    let m64 = m.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let data: Vec<Labeled> = (0..20)
        .map(|_| {
            let n = rng.gen_range(1..=8);
            Labeled {
                tokens: (0..n).map(|_| rng.gen_range(0..12)).collect(),
                answer: rng.gen_range(0..12),
            }
        })
        .collect();
    let g = grad_importance(&m, &data, FD_STEP).map_err(|e| e.to_string())?;
    let g2 = grad_importance(&m, &data, FD_STEP / 2.0).map_err(|e| e.to_string())?;
    let (mut worst_a, mut worst_h) = (0f64, 0f64);
    for h in m.spec.all_heads() {
        let want = data.iter().map(|ex| analytic(&m64, ex, h).abs()).sum::<f64>() / data.len() as f64;
        let rel = (g.get(h) - want).abs() / want.abs();
        ensure!(rel <= ANALYTIC_REL_TOL, "{h}: fd {} vs analytic {want}", g.get(h));
        let halving = (g.get(h) - g2.get(h)).abs() / g.get(h).abs();
        ensure!(halving < HALVING_REL_TOL, "{h}: halving h moved the score by {halving:e}");
        worst_a = worst_a.max(rel);
        worst_h = worst_h.max(halving);
    }
    Ok(format!("max rel err {worst_a:e}, max halving change {worst_h:e}"))
}

fn c5_null() -> Outcome {
    let w = c2_world();
    let mut n = 0;
    for (lambda, form) in [(0.5, Form::Triple), (0.3, Form::Document), (0.0, Form::DualContext)] {
        let p = planted(&w, lambda)?;
        let data = w.dataset(form, 0).map_err(|e| e.to_string())?;
        for target in [Target::Context, Target::Memory] {
            for readout in [Readout::Logits, Readout::Probs] {
                let s = path_patch_score(&p.model, &data, target, Corruption::Identity, readout).map_err(|e| e.to_string())?;
                ensure!(s.scores.iter().all(|v| v.to_bits() == 0), "{form} {target}: {:?}", s.scores);
                n += s.scores.len();
            }
        }
    }
    Ok(format!("{n} scores, all +0.0"))
}

fn c6_antisymmetry() -> Outcome {
    let w = c2_world();
    let p = build_planted(&w, &PlantedOptions { lambda: 0.5, rotation_seed: Some(6), ..Default::default() })
        .map_err(|e| e.to_string())?;
    let data = w.dataset(Form::Document, 0).map_err(|e| e.to_string())?;
    let swapped: Vec<ConflictExample> = data
        .iter()
        .map(|ex| ConflictExample { a_m: ex.a_c, a_c: ex.a_m, ..ex.clone() })
        .collect();
    let mut n = 0;
    for mode in [CorruptMode::MaskAttribute, CorruptMode::MaskSubject] {
        let c = Corruption::Mask(mode);
        let base = pp(&p, &data, Target::Context, c)?;
        let by_target = pp(&p, &data, Target::Memory, c)?;
        let by_fields = pp(&p, &swapped, Target::Context, c)?;
        for (i, b) in base.scores.iter().enumerate() {
            ensure!(by_target.scores[i] == -b, "{mode} head {i}: {b} vs {}", by_target.scores[i]);
            ensure!(by_fields.scores[i] == -b, "{mode} head {i}: {b} vs {}", by_fields.scores[i]);
            n += 2;
        }
    }
    Ok(format!("{n} score pairs negate exactly"))
}

fn c7_extraction() -> Outcome {
    let w = c2_world();
    let p = planted(&w, 0.0)?;
    let data = w.dataset(Form::Triple, 0).map_err(|e| e.to_string())?;
    let rc = evaluate(&p.model, &data, &InterventionPlan::default()).map_err(|e| e.to_string())?.rc;
    ensure!(rc == 1.0, "planted λ=0 model answers context at rate {rc}");
    let (_, ctx) = head_extraction_rates(&p.model, &data, &[p.truth.context_head]).map_err(|e| e.to_string())?;
    ensure!(ctx == 1.0, "context head extraction rate {ctx}");
    let mut fillers = p.truth.filler_heads(&p.model.spec);
    fillers.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
    let mut notes = Vec::new();
    for &f in fillers.iter().take(3) {
        let (m, c) = head_extraction_rates(&p.model, &data, &[f]).map_err(|e| e.to_string())?;
        let rate = m + c;
        ensure!(rate <= FILLER_EXTRACTION_MAX, "filler {f} extraction rate {rate}");
        notes.push(format!("{f}={rate}"));
    }
    Ok(format!("context head {ctx}, fillers {}", notes.join(" ")))
}

fn c8_sweep_directions() -> Outcome {
    let w = c2_world();
    let p = planted(&w, 0.0)?;
    let data = w.dataset(Form::Triple, 0).map_err(|e| e.to_string())?;
    let g = sweep_flow_block(&p.model, &data, 0).map_err(|e| e.to_string())?;
    let ac = g.absolute_at(Element::ContextAttribute, p.truth.context_head.layer).unwrap();
    let sq = g.absolute_at(Element::QuestionSubject, p.truth.routing_head.layer).unwrap();
    ensure!(ac > 0.0, "blocking a_c at layer {}: effect {ac}", p.truth.context_head.layer);
    ensure!(sq > 0.0, "blocking s_q at layer {}: effect {sq}", p.truth.routing_head.layer);
    Ok(format!("drop a_c@L{}={ac:.4}, s_q@L{}={sq:.4}", p.truth.context_head.layer, p.truth.routing_head.layer))
}

fn c9_metric_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0f64;
    for _ in 0..1000 {
        let (m, c, o) = (rng.gen_range(0..100_000u64), rng.gen_range(0..100_000u64), rng.gen_range(1..100_000u64));
        let r = UsageReport::from_counts(m, c, o).map_err(|e| e.to_string())?;
        worst = worst.max((r.rm + r.rc + r.ro - 1.0).abs());
    }
    ensure!(worst <= RATE_SUM_TOL, "rate sum off by {worst}");
    let r = UsageReport::from_counts(37, 62, 1).map_err(|e| e.to_string())?;
    ensure!(r.rm == 0.37 && r.rc == 0.62 && r.ro == 0.01, "{r:?}");
    Ok(format!("max |RM+RC+RO−1| = {worst:e}; 37/62/1 → RM={}", r.rm))
}

fn run_cli(out: &Path, threads: &str, args: &[String]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_headscope"))
        .args(args)
        .args(["--threads", threads, "--out"])
        .arg(out)
        .env_remove("HEADSCOPE_OUT")
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    Ok(())
}

fn c10_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = ["--subjects", "8", "--attributes", "4", "--lambda", "0.5"];
    let commands: Vec<Vec<&str>> = vec![
        vec!["gen-world", "--form", "document"],
        vec!["build-planted"],
        vec!["knockout-sweep", "--window", "2"],
        vec!["knockout-sweep", "--kind", "ffn"],
        vec!["flow-sweep", "--form", "dual-context"],
        vec!["extraction"],
        vec!["score-heads", "--method", "gradient", "--target", "memory"],
        vec!["score-heads", "--use-probs"],
        vec!["ph3", "--target", "memory", "--lambda", "0.2"],
        vec!["evaluate", "--form", "document"],
    ];
    let mut files = 0;
    for (i, cmd) in commands.iter().enumerate() {
        let mut outs = Vec::new();
        for threads in ["1", "8"] {
            let out = dir.path().join(format!("c{i}_t{threads}"));
            let mut args: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
            for (k, v) in base.chunks(2).map(|c| (c[0], c[1])) {
                if !cmd.contains(&k) {
                    args.push(k.into());
                    args.push(v.into());
                }
            }
            run_cli(&out, threads, &args)?;
            outs.push(out);
        }
        let mut names: Vec<_> = std::fs::read_dir(&outs[0]).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
        names.sort();
        ensure!(!names.is_empty(), "{} wrote nothing", cmd[0]);
        for name in &names {
            let a = std::fs::read(outs[0].join(name)).map_err(|e| e.to_string())?;
            let b = std::fs::read(outs[1].join(name)).map_err(|e| format!("{}: {e}", name.to_string_lossy()))?;
            ensure!(a == b, "{}: {} differs between 1 and 8 threads", cmd[0], name.to_string_lossy());
            files += 1;
        }
    }
    Ok(format!("{} commands, {files} output files byte-identical", commands.len()))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("C1 residual identity", 10, c1_residual_identity),
        ("C2 localization", 60, c2_localization),
        ("C3 mitigation flip", 30, c3_flip),
        ("C4 gradient identity", 0, c4_gradient),
        ("C5 path-patching null", 0, c5_null),
        ("C6 antisymmetry", 0, c6_antisymmetry),
        ("C7 extraction rates", 0, c7_extraction),
        ("C8 sweep directions", 0, c8_sweep_directions),
        ("C9 metric algebra", 0, c9_metric_algebra),
        ("C10 thread determinism", 0, c10_determinism),
    ];
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if limit > 0 && took > Duration::from_secs(limit) => Err(format!("{msg}; over the {limit} s limit")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS {name} ({:.2} s): {msg}", took.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name} ({:.2} s): {msg}", took.as_secs_f64());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
