//! `headscope` command-line interface.
//!
//! Settings come from flags, then an optional `--config` file (flat
//! `key=value` lines or a JSON object with the same keys), then defaults.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::archive;
use crate::error::Error;
use crate::harness::{self, evaluate, output_name, select_prune_rate, UsageReport, DEFAULT_K_GRID};
use crate::intervention::{ComponentKind, InterventionPlan};
use crate::lens;
use crate::model::Model;
use crate::planted::{build_planted, verify_planted, GroundTruth, PlantedOptions};
use crate::scoring::{self, path_patch_score, ph3_prune, Corruption, HeadScoreMap, Method, Readout, Target};
use crate::world::{self, gen_world, ConflictExample, CorruptMode, FactWorld, Form, Relation};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "headscope", version, about = "Knowledge-conflict probing and attention-head pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Generate a fact world and render its conflict dataset.
    GenWorld,
    /// Build a planted-circuit model, verify it and save it.
    BuildPlanted,
    /// Knockout sweep over elements and layers.
    KnockoutSweep,
    /// Attention-edge blocking sweep from the last token.
    FlowSweep,
    /// Early-exit extraction rates per layer and per head.
    Extraction,
    /// Score every head by gradient sensitivity or path patching.
    ScoreHeads,
    /// Score, choose a pruning rate, prune and re-evaluate.
    Ph3,
    /// Memory/context usage rates under an optional intervention plan.
    Evaluate,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GenWorld => "gen-world",
            Self::BuildPlanted => "build-planted",
            Self::KnockoutSweep => "knockout-sweep",
            Self::FlowSweep => "flow-sweep",
            Self::Extraction => "extraction",
            Self::ScoreHeads => "score-heads",
            Self::Ph3 => "ph3",
            Self::Evaluate => "evaluate",
        })
    }
}

#[derive(Debug, Default, Args)]
struct Opts {
    /// Config file (key=value lines or a JSON object).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [env: HEADSCOPE_OUT, default: out].
    #[arg(long, global = true)]
    out: Option<String>,
    /// Worker threads for sweeps and scoring (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<String>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    dry_run: bool,
    /// Model archive.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Build a planted model with this memory/context mix instead of loading one.
    #[arg(long, global = true)]
    lambda: Option<String>,
    #[arg(long, global = true)]
    layers: Option<String>,
    #[arg(long, global = true)]
    heads: Option<String>,
    #[arg(long, global = true)]
    rotation_seed: Option<String>,
    #[arg(long, global = true)]
    prefer_memory_in_dual: Option<String>,
    /// World file written by gen-world.
    #[arg(long, global = true)]
    world: Option<String>,
    #[arg(long, global = true)]
    subjects: Option<String>,
    #[arg(long, global = true)]
    attributes: Option<String>,
    /// Comma-separated relations.
    #[arg(long, global = true)]
    relations: Option<String>,
    #[arg(long, global = true)]
    world_seed: Option<String>,
    /// Dataset in JSON-lines form.
    #[arg(long, global = true)]
    dataset: Option<String>,
    /// triple | document | dual-context
    #[arg(long, global = true)]
    form: Option<String>,
    #[arg(long, global = true)]
    data_seed: Option<String>,
    /// Layer window W.
    #[arg(long, global = true)]
    window: Option<String>,
    /// mha | ffn
    #[arg(long, global = true)]
    kind: Option<String>,
    /// Pruning rate in percent, or `auto`.
    #[arg(long, global = true)]
    k: Option<String>,
    /// Comma-separated pruning-rate grid.
    #[arg(long, global = true)]
    k_grid: Option<String>,
    /// memory | context
    #[arg(long, global = true)]
    target: Option<String>,
    /// gradient | path-patch
    #[arg(long, global = true)]
    method: Option<String>,
    /// mask-attribute | mask-subject | identity
    #[arg(long, global = true)]
    corrupt: Option<String>,
    /// Score path patching on probabilities instead of logits.
    #[arg(long, global = true)]
    use_probs: bool,
    /// Intervention plan file for `evaluate`.
    #[arg(long, global = true)]
    plan: Option<String>,
    /// Model name used in output file names.
    #[arg(long, global = true)]
    name: Option<String>,
}

const KEYS: &[&str] = &[
    "out",
    "threads",
    "model",
    "lambda",
    "layers",
    "heads",
    "rotation-seed",
    "prefer-memory-in-dual",
    "world",
    "subjects",
    "attributes",
    "relations",
    "world-seed",
    "dataset",
    "form",
    "data-seed",
    "window",
    "kind",
    "k",
    "k-grid",
    "target",
    "method",
    "corrupt",
    "use-probs",
    "plan",
    "name",
];

impl Opts {
    fn flag_map(&self) -> BTreeMap<String, String> {
        let pairs: [(&str, &Option<String>); 26] = [
            ("out", &self.out),
            ("threads", &self.threads),
            ("model", &self.model),
            ("lambda", &self.lambda),
            ("layers", &self.layers),
            ("heads", &self.heads),
            ("rotation-seed", &self.rotation_seed),
            ("prefer-memory-in-dual", &self.prefer_memory_in_dual),
            ("world", &self.world),
            ("subjects", &self.subjects),
            ("attributes", &self.attributes),
            ("relations", &self.relations),
            ("world-seed", &self.world_seed),
            ("dataset", &self.dataset),
            ("form", &self.form),
            ("data-seed", &self.data_seed),
            ("window", &self.window),
            ("kind", &self.kind),
            ("k", &self.k),
            ("k-grid", &self.k_grid),
            ("target", &self.target),
            ("method", &self.method),
            ("corrupt", &self.corrupt),
            ("use-probs", &None),
            ("plan", &self.plan),
            ("name", &self.name),
        ];
        let mut m: BTreeMap<String, String> = pairs
            .iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect();
        if self.use_probs {
            m.insert("use-probs".into(), "true".into());
        }
        m
    }
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
    Invariant(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Invariant(m) => Failure::Invariant(m),
            Error::NonFinite(op) => Failure::Invariant(format!("non-finite value in {op}")),
            other => Failure::Data(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(Error::Io(e))
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn parse_config_file(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    if text.trim_start().starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
        let obj = v
            .as_object()
            .ok_or_else(|| Failure::Usage("JSON config must be an object".into()))?;
        for (k, v) in obj {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|i| i.as_str().map(str::to_string).unwrap_or_else(|| i.to_string()))
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            map.insert(k.replace('_', "-"), s);
        }
    } else {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("config line {}: expected key=value", i + 1)))?;
            map.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
    }
    if let Some(k) = map.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(Failure::Usage(format!("unknown config key `{k}`")));
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
enum KChoice {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize)]
struct Config {
    command: String,
    out: PathBuf,
    threads: usize,
    model: Option<PathBuf>,
    lambda: Option<f64>,
    layers: usize,
    heads: usize,
    rotation_seed: Option<u64>,
    prefer_memory_in_dual: bool,
    world: Option<PathBuf>,
    subjects: usize,
    attributes: usize,
    relations: Vec<Relation>,
    world_seed: u64,
    dataset: Option<PathBuf>,
    form: Form,
    data_seed: u64,
    window: usize,
    kind: String,
    k: KChoice,
    k_grid: Vec<f64>,
    target: Target,
    method: Method,
    corrupt: String,
    use_probs: bool,
    plan: Option<PathBuf>,
    name: String,
}

struct Resolver {
    map: BTreeMap<String, String>,
}

impl Resolver {
    fn raw(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn opt<T: FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Failure::Usage(format!("invalid value `{v}` for --{key}"))),
        }
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> CliResult<T> {
        Ok(self.opt(key)?.unwrap_or(default))
    }

    fn list<T: FromStr>(&self, key: &str) -> CliResult<Option<Vec<T>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Failure::Usage(format!("invalid item `{x}` for --{key}")))
                })
                .collect::<CliResult<Vec<T>>>()
                .map(Some),
        }
    }
}

fn resolve(command: Command, opts: &Opts) -> CliResult<Config> {
    let mut map = match &opts.config {
        Some(p) => parse_config_file(p)?,
        None => BTreeMap::new(),
    };
    map.extend(opts.flag_map());
    let r = Resolver { map };

    let out = match r.raw("out") {
        Some(o) => PathBuf::from(o),
        None => std::env::var_os("HEADSCOPE_OUT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out")),
    };
    let model: Option<PathBuf> = r.opt("model")?;
    let mut lambda: Option<f64> = r.opt("lambda")?;
    if command == Command::BuildPlanted {
        if model.is_some() {
            return Err(Failure::Usage("build-planted does not take --model".into()));
        }
        lambda.get_or_insert(0.5);
    } else if command != Command::GenWorld {
        match (&model, lambda) {
            (Some(_), Some(_)) => {
                return Err(Failure::Usage("give exactly one model source: --model or --lambda".into()))
            }
            (None, None) => {
                return Err(Failure::Usage("no model source: pass --model <archive> or --lambda <mix>".into()))
            }
            _ => {}
        }
    }
    if let Some(l) = lambda {
        if !(0.0..=1.0).contains(&l) {
            return Err(Failure::Usage(format!("--lambda must lie in [0, 1], got {l}")));
        }
    }
    let k = match r.raw("k") {
        None | Some("auto") => KChoice::Auto,
        Some(v) => KChoice::Fixed(
            v.parse()
                .map_err(|_| Failure::Usage(format!("invalid value `{v}` for --k")))?,
        ),
    };
    let kind: String = r.get("kind", "mha".to_string())?;
    ComponentKind::from_str(&kind).map_err(|_| Failure::Usage(format!("invalid value `{kind}` for --kind")))?;
    let target: Target = r.get("target", Target::Context)?;
    let corrupt: String = r.get("corrupt", target.default_corruption().to_string())?;
    if corrupt != "identity" && CorruptMode::from_str(&corrupt).is_err() {
        return Err(Failure::Usage(format!("invalid value `{corrupt}` for --corrupt")));
    }
    let method = match r.raw("method").unwrap_or("path-patch") {
        "gradient" => Method::Gradient,
        "path-patch" => Method::PathPatch,
        other => return Err(Failure::Usage(format!("invalid value `{other}` for --method"))),
    };
    let name = match r.raw("name") {
        Some(n) => n.to_string(),
        None => match &model {
            Some(p) => p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into()),
            None => "planted".into(),
        },
    };
    Ok(Config {
        command: command.to_string(),
        out,
        threads: r.get("threads", 0)?,
        model,
        lambda,
        layers: r.get("layers", 3)?,
        heads: r.get("heads", 4)?,
        rotation_seed: r.opt("rotation-seed")?,
        prefer_memory_in_dual: r.get("prefer-memory-in-dual", true)?,
        world: r.opt("world")?,
        subjects: r.get("subjects", 16)?,
        attributes: r.get("attributes", 4)?,
        relations: r.list("relations")?.unwrap_or_else(|| Relation::ALL.to_vec()),
        world_seed: r.get("world-seed", 0)?,
        dataset: r.opt("dataset")?,
        form: r.get("form", Form::Triple)?,
        data_seed: r.get("data-seed", 0)?,
        window: r.get("window", 0)?,
        kind,
        k,
        k_grid: r.list("k-grid")?.unwrap_or_else(|| DEFAULT_K_GRID.to_vec()),
        target,
        method,
        corrupt,
        use_probs: r.get("use-probs", false)?,
        plan: r.opt("plan")?,
        name,
    })
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = resolve(cli.command, &cli.opts).and_then(|cfg| {
        if cli.opts.dry_run {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            println!("dry run: {} would write into {}", cfg.command, cfg.out.display());
            return Ok(());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Failure::Usage(format!("thread pool: {e}")))?;
        pool.install(|| execute(cli.command, &cfg))
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("invariant violated: {m}");
            EXIT_INVARIANT
        }
    }
}

fn load_world(cfg: &Config) -> CliResult<FactWorld> {
    Ok(match &cfg.world {
        Some(p) => FactWorld::load(p)?,
        None => gen_world(cfg.subjects, &cfg.relations, cfg.attributes, cfg.world_seed)?,
    })
}

fn load_dataset(cfg: &Config, world: &FactWorld, seed: u64) -> CliResult<Vec<ConflictExample>> {
    Ok(match &cfg.dataset {
        Some(p) => world::read_jsonl(p)?,
        None => world.dataset(cfg.form, seed)?,
    })
}

fn planted_options(cfg: &Config, lambda: f64) -> PlantedOptions {
    PlantedOptions {
        layers: cfg.layers,
        heads: cfg.heads,
        lambda,
        d_model: None,
        prefer_memory_in_dual: cfg.prefer_memory_in_dual,
        rotation_seed: cfg.rotation_seed,
    }
}

fn load_model(cfg: &Config, world: &FactWorld) -> CliResult<(Model<f32>, Option<GroundTruth>)> {
    if let Some(p) = &cfg.model {
        let a = archive::load(p)?;
        return Ok((a.model, a.planted));
    }
    let lambda = cfg.lambda.expect("model source checked during resolution");
    let p = build_planted(world, &planted_options(cfg, lambda))?;
    Ok((p.model, Some(p.truth)))
}

fn out_path(cfg: &Config, file: &str) -> CliResult<PathBuf> {
    std::fs::create_dir_all(&cfg.out)?;
    Ok(cfg.out.join(file))
}

fn report_line(stage: &str, r: &UsageReport) -> String {
    format!("{stage},{},{},{},{},{},{}", r.f_m, r.f_c, r.f_o, r.rm, r.rc, r.ro)
}

fn write_reports(path: &Path, rows: &[(&str, UsageReport)]) -> CliResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "stage,f_m,f_c,f_o,rm,rc,ro")?;
    for (stage, r) in rows {
        writeln!(w, "{}", report_line(stage, r))?;
    }
    w.flush()?;
    let json: BTreeMap<&str, &UsageReport> = rows.iter().map(|(s, r)| (*s, r)).collect();
    std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&json).map_err(Error::from)?)?;
    Ok(())
}

fn fmt_k(k: f64) -> String {
    format!("k{k}")
}

fn score(cfg: &Config, model: &Model<f32>, data: &[ConflictExample]) -> CliResult<HeadScoreMap> {
    Ok(match cfg.method {
        Method::Gradient => scoring::proxy_for_target(model, data, cfg.target)?,
        Method::PathPatch => {
            let corruption = match cfg.corrupt.as_str() {
                "identity" => Corruption::Identity,
                other => Corruption::Mask(CorruptMode::from_str(other)?),
            };
            let readout = if cfg.use_probs { Readout::Probs } else { Readout::Logits };
            path_patch_score(model, data, cfg.target, corruption, readout)?
        }
    })
}

fn execute(command: Command, cfg: &Config) -> CliResult<()> {
    let world = load_world(cfg)?;
    match command {
        Command::GenWorld => {
            let wp = out_path(cfg, "world.json")?;
            world.save(&wp)?;
            let data = world.dataset(cfg.form, cfg.data_seed)?;
            let dp = out_path(cfg, &format!("dataset_{}.jsonl", cfg.form))?;
            world::write_jsonl(&dp, &data)?;
            println!("wrote {} and {} ({} examples)", wp.display(), dp.display(), data.len());
        }
        Command::BuildPlanted => {
            let lambda = cfg.lambda.expect("defaulted during resolution");
            let p = build_planted(&world, &planted_options(cfg, lambda))?;
            let report = verify_planted(&p.model, &world, &p.truth)?;
            let rp = out_path(cfg, &format!("verify_{}.json", cfg.name))?;
            std::fs::write(&rp, serde_json::to_vec_pretty(&report).map_err(Error::from)?)?;
            if !report.ok() {
                return Err(Failure::Invariant(format!(
                    "{} planted-model violations, see {}",
                    report.violations.len(),
                    rp.display()
                )));
            }
            world.save(&out_path(cfg, "world.json")?)?;
            let ap = out_path(cfg, &format!("{}.hsa", cfg.name))?;
            archive::save(&ap, &p.model, Some(&p.truth))?;
            println!(
                "wrote {} (λ={}, memory head {}, context head {}); {} examples verified",
                ap.display(),
                p.truth.effective_lambda,
                p.truth.memory_head,
                p.truth.context_head,
                report.checked_examples
            );
        }
        Command::KnockoutSweep => {
            let (model, _) = load_model(cfg, &world)?;
            let data = load_dataset(cfg, &world, cfg.data_seed)?;
            let kind = ComponentKind::from_str(&cfg.kind)?;
            let grid = harness::sweep_knockout(&model, &data, kind, cfg.window)?;
            let p = out_path(cfg, &output_name(&grid.experiment, &cfg.name, &format!("W{}", cfg.window)))?;
            grid.write_csv(&p)?;
            grid.write_json(&p.with_extension("json"))?;
            println!("wrote {}", p.display());
        }
        Command::FlowSweep => {
            let (model, _) = load_model(cfg, &world)?;
            let data = load_dataset(cfg, &world, cfg.data_seed)?;
            let grid = harness::sweep_flow_block(&model, &data, cfg.window)?;
            let p = out_path(cfg, &output_name(&grid.experiment, &cfg.name, &format!("W{}", cfg.window)))?;
            grid.write_csv(&p)?;
            grid.write_json(&p.with_extension("json"))?;
            println!("wrote {}", p.display());
        }
        Command::Extraction => {
            let (model, _) = load_model(cfg, &world)?;
            let data = load_dataset(cfg, &world, cfg.data_seed)?;
            let rows = lens::layer_rates(&model, &data)?;
            let p = out_path(cfg, &output_name("extraction", &cfg.name, "layers"))?;
            lens::write_rates_csv(&p, &rows)?;
            let hp = out_path(cfg, &output_name("extraction", &cfg.name, "heads"))?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&hp)?);
            writeln!(w, "layer,head,memory_rate,context_rate")?;
            for h in model.spec.all_heads() {
                let (m, c) = lens::head_extraction_rates(&model, &data, &[h])?;
                writeln!(w, "{},{},{m},{c}", h.layer, h.head)?;
            }
            w.flush()?;
            println!("wrote {} and {}", p.display(), hp.display());
        }
        Command::ScoreHeads => {
            let (model, _) = load_model(cfg, &world)?;
            let data = load_dataset(cfg, &world, cfg.data_seed)?;
            let map = score(cfg, &model, &data)?;
            let exp = format!("scores-{}-{}", cfg.method, cfg.target);
            let p = out_path(cfg, &output_name(&exp, &cfg.name, "all"))?;
            map.write_csv(&p)?;
            println!("wrote {} (top |score|: {})", p.display(), map.top_by_magnitude());
        }
        Command::Ph3 => {
            let (model, _) = load_model(cfg, &world)?;
            let data = load_dataset(cfg, &world, cfg.data_seed)?;
            let dev = match &cfg.dataset {
                Some(_) => data.clone(),
                None => world.dataset(cfg.form, cfg.data_seed.wrapping_add(1))?,
            };
            let map = score(cfg, &model, &data)?;
            let exp = format!("scores-{}-{}", cfg.method, cfg.target);
            map.write_csv(&out_path(cfg, &output_name(&exp, &cfg.name, "all"))?)?;
            let k = match cfg.k {
                KChoice::Fixed(k) => k,
                KChoice::Auto => {
                    let choice = select_prune_rate(&model, &map, &dev, &cfg.k_grid, cfg.target)?;
                    let cp = out_path(cfg, &output_name("ph3-grid", &cfg.name, "auto"))?;
                    let mut w = std::io::BufWriter::new(std::fs::File::create(&cp)?);
                    writeln!(w, "k,rate")?;
                    for (k, r) in &choice.curve {
                        writeln!(w, "{k},{r}")?;
                    }
                    w.flush()?;
                    choice.k
                }
            };
            let plan = ph3_prune(&map, k)?;
            let before = evaluate(&model, &data, &InterventionPlan::default())?;
            let after = evaluate(&model, &data, &plan)?;
            let p = out_path(cfg, &output_name("ph3", &cfg.name, &fmt_k(k)))?;
            write_reports(&p, &[("before", before), ("after", after)])?;
            std::fs::write(p.with_extension("plan"), plan.to_string())?;
            println!(
                "k={k}: pruned {}; {} {} → {}",
                plan.to_string().trim(),
                if cfg.target == Target::Memory { "RM" } else { "RC" },
                before.rate(cfg.target),
                after.rate(cfg.target)
            );
        }
        Command::Evaluate => {
            let (model, _) = load_model(cfg, &world)?;
            let data = load_dataset(cfg, &world, cfg.data_seed)?;
            let (plan, tag) = match &cfg.plan {
                Some(p) => {
                    let text = std::fs::read_to_string(p)?;
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    (InterventionPlan::from_str(&text)?, stem)
                }
                None => (InterventionPlan::default(), "none".to_string()),
            };
            plan.validate(&model.spec)?;
            let r = evaluate(&model, &data, &plan)?;
            let p = out_path(cfg, &output_name("evaluate", &cfg.name, &tag))?;
            write_reports(&p, &[("eval", r)])?;
            println!("RM={} RC={} RO={} ({} examples)", r.rm, r.rc, r.ro, data.len());
        }
    }
    Ok(())
}
