//! Implementations behind the `excitor` binary. Each command returns the
//! process exit code on success; errors map through [`LabError::exit_code`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use excitor_core::data::{encode, decode, render_prompt, AlpacaSample, TaskKind, EOS};
use excitor_core::gradcheck::grad_check;
use excitor_core::model::{Model, TokenBatch};
use excitor_core::multimodal::{toy_encode, VisualBatch, VisualPrompt};
use excitor_core::sampling::GenerateOptions;
use excitor_core::{SplitMix64, Tensor};

use crate::ckpt::{self, Checkpoint, Scalar, MAGIC};
use crate::config::{AdapterKind, RunConfig};
use crate::error::{LabError, Result};
use crate::harness::{
    self, drift_csv, drift_report, evaluate, forgetting_protocol, prepare, probe_set, ProtocolData, TaskData,
    TrainOutcome, TrainPlan,
};
use crate::io::{self, Tensors};
use crate::metrics::{csv_table, text_table};

/// Relative-error bound for `gradcheck`.
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-4;

pub const PRECISION_ENV: &str = "EXCITOR_PRECISION";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Read `EXCITOR_PRECISION`; unset means f32.
    pub fn from_env() -> Result<Self> {
        match std::env::var(PRECISION_ENV) {
            Err(_) => Ok(Precision::F32),
            Ok(v) => match v.as_str() {
                "f32" | "" => Ok(Precision::F32),
                "f64" => Ok(Precision::F64),
                _ => Err(LabError::Config(format!("{PRECISION_ENV} must be f32 or f64, got {v:?}"))),
            },
        }
    }
}

/// Config from `path`, or the toy defaults, with `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

/// Run `f` over `items` on at most `workers` threads; results keep input order.
pub fn pool_map<T, U, F>(items: Vec<T>, workers: usize, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync,
{
    let n = items.len();
    let workers = workers.clamp(1, n.max(1));
    let queue: Mutex<Vec<Option<T>>> = Mutex::new(items.into_iter().map(Some).collect());
    let out: Mutex<Vec<Option<U>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let item = queue.lock().unwrap()[i].take().expect("each item taken once");
                let r = f(item);
                out.lock().unwrap()[i] = Some(r);
            });
        }
    });
    out.into_inner().unwrap().into_iter().map(|r| r.expect("every item ran")).collect()
}

pub fn worker_count(cfg: &RunConfig, flag: Option<usize>) -> usize {
    match flag.unwrap_or(cfg.train.workers) {
        0 => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        n => n,
    }
}

/// Base model for fine-tuning: loaded from `base` when given, else
/// pretrained on `data.pretrain_task` (or left at init when
/// `train.pretrain_steps` is 0). The config's model section follows the
/// loaded checkpoint.
pub fn base_model<R: Scalar>(cfg: &mut RunConfig, base: Option<&Path>) -> Result<(Model<R>, Option<TrainOutcome>)> {
    if let Some(p) = base {
        let ck = Checkpoint::load(p)?;
        let (m, bcfg, _) = io::from_checkpoint::<R>(&ck)?;
        cfg.model = bcfg.model;
        cfg.model_seed = bcfg.model_seed;
        let mut m = m;
        m.set_full_finetune(false);
        let base = m.clone();
        return Ok((base, None));
    }
    if cfg.train.pretrain_steps == 0 {
        return Ok((Model::new(cfg.model, cfg.model_seed)?, None));
    }
    let (m, out) = harness::pretrain::<R>(cfg)?;
    Ok((m, Some(out)))
}

fn log_pretrain(out: &Option<TrainOutcome>) {
    if let Some(o) = out {
        for (name, r) in &o.evals {
            eprintln!(
                "pretrained {} steps: {name} exact {:.4} ppl {:.4}",
                o.steps_run, r.exact, r.perplexity
            );
        }
    }
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub adapter: AdapterKind,
    pub seed: u64,
    pub out: PathBuf,
    pub steps: Option<usize>,
    pub overrides: Vec<String>,
    pub base: Option<PathBuf>,
}

/// Fine-tune one adapter and write a run directory.
pub fn train(args: &TrainArgs) -> Result<i32> {
    match Precision::from_env()? {
        Precision::F32 => train_as::<f32>(args),
        Precision::F64 => train_as::<f64>(args),
    }
}

fn train_as<R: Scalar>(args: &TrainArgs) -> Result<i32> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    let kind = args.adapter;
    let (base, pre) = if kind == AdapterKind::None && args.base.is_none() {
        (Model::<R>::new(cfg.model, cfg.model_seed)?, None)
    } else {
        base_model::<R>(&mut cfg, args.base.as_deref())?
    };
    log_pretrain(&pre);
    let (model, outcome) = finetune(&base, &cfg, kind, args.seed)?;
    println!(
        "trainable parameters: {} / {} total",
        model.trainable_count(),
        model.total_count()
    );
    report_outcome(&outcome);
    io::write_run_dir(&args.out, &cfg, kind, args.seed, &model, &outcome.metrics)?;
    if !model.adapter_param_ids().is_empty() {
        let mut ck = adapter_checkpoint(&model, &cfg, kind);
        ck.set_meta("run.seed", args.seed);
        ck.save(&args.out.join(ADAPTER_FILE))?;
    }
    println!("wrote {}", args.out.display());
    Ok(0)
}

/// Attach `kind` to a copy of `base` and train it on `data.task`. With
/// `AdapterKind::None` nothing is trained and the eval is reported at step 0.
pub fn finetune<R: Scalar>(
    base: &Model<R>,
    cfg: &RunConfig,
    kind: AdapterKind,
    seed: u64,
) -> Result<(Model<R>, TrainOutcome)> {
    let mut model = prepare(base, cfg, kind, seed)?;
    let data = TaskData::<R>::new(cfg, cfg.data.task)?;
    let mut plan = TrainPlan::from_config(cfg, SplitMix64::derive(seed, "finetune").next_u64());
    if kind == AdapterKind::None {
        plan.steps = 0;
    }
    let outcome = harness::train(&mut model, &data.train, &[&data.eval], &plan)?;
    Ok((model, outcome))
}

fn report_outcome(o: &TrainOutcome) {
    println!("steps run: {}  final loss: {:.6}", o.steps_run, o.final_loss);
    for (name, r) in &o.evals {
        println!("{name}: exact {:.4}  ppl {:.4}", r.exact, r.perplexity);
    }
}

/// Train a base model on `data.pretrain_task` and write it as a run
/// directory whose checkpoint can be passed to `--base`.
pub fn pretrain(config: Option<&Path>, overrides: &[String], out: &Path) -> Result<i32> {
    match Precision::from_env()? {
        Precision::F32 => pretrain_as::<f32>(config, overrides, out),
        Precision::F64 => pretrain_as::<f64>(config, overrides, out),
    }
}

fn pretrain_as<R: Scalar>(config: Option<&Path>, overrides: &[String], out: &Path) -> Result<i32> {
    let cfg = load_config(config, overrides)?;
    let (m, o) = harness::pretrain::<R>(&cfg)?;
    report_outcome(&o);
    io::write_run_dir(out, &cfg, AdapterKind::None, cfg.model_seed, &m, &o.metrics)?;
    println!("wrote {}", out.display());
    Ok(0)
}

/// Per-group result of a gradient check. Groups merge the same tensor
/// across layers (`excitor.layer.2.gate` counts as `excitor.gate`).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub scalars: usize,
    pub max_rel_err: f64,
    pub raw_rel_err: f64,
}

pub fn param_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let mut out = Vec::with_capacity(parts.len());
    let mut i = 0;
    while i < parts.len() {
        if parts[i] == "layer" && i + 1 < parts.len() && parts[i + 1].parse::<usize>().is_ok() {
            i += 2;
            continue;
        }
        out.push(parts[i]);
        i += 1;
    }
    out.join(".")
}

/// Finite-difference check of every trainable tensor of `kind` on a
/// randomised f64 instance of `cfg.model`, two sequences of six tokens.
pub fn gradcheck_groups(cfg: &RunConfig, kind: AdapterKind, seed: u64) -> Result<Vec<GroupError>> {
    let base = Model::<f64>::new(cfg.model, cfg.model_seed)?;
    let mut m = prepare(&base, cfg, kind, seed)?;
    m.randomize(0.3, 0.3, seed);
    let ids: Vec<_> = m.params.ids().filter(|&id| !m.params.get(id).frozen).collect();
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = SplitMix64::derive(seed, "gradcheck");
    let rows: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..6).map(|_| 1 + rng.below(cfg.model.vocab - 1)).collect())
        .collect();
    let batch = TokenBatch::padded(&rows, EOS);
    let visual = if kind == AdapterKind::ExcitorMm {
        let v = 3;
        Some(VisualBatch {
            features: Tensor::randn(&[2 * v, cfg.visual_dim()], 1.0, &mut rng),
            rows_per_sample: v,
        })
    } else {
        None
    };
    let mut targets: Vec<usize> = batch.tokens[1..].to_vec();
    targets.push(excitor_core::data::IGNORE);
    targets[batch.seq - 1] = excitor_core::data::IGNORE;
    let model = m.clone();
    let report = grad_check(&mut m.params, &ids, GRADCHECK_STEP, |g, store| {
        let mut mm = model.clone();
        mm.params = store.clone();
        let out = mm.forward(g, &batch, visual.as_ref())?;
        g.cross_entropy(out.logits, &targets, excitor_core::data::IGNORE)
    })?;
    let mut groups: BTreeMap<String, GroupError> = BTreeMap::new();
    for e in &report.entries {
        let key = param_group(&e.name);
        let slot = groups.entry(key.clone()).or_insert(GroupError {
            group: key,
            scalars: 0,
            max_rel_err: 0.0,
            raw_rel_err: 0.0,
        });
        slot.scalars += e.scalars;
        slot.max_rel_err = slot.max_rel_err.max(e.max_rel_err);
        slot.raw_rel_err = slot.raw_rel_err.max(e.raw_rel_err);
    }
    Ok(groups.into_values().collect())
}

/// Print per-group errors; exit 1 if any group reaches the bound.
pub fn gradcheck(config: Option<&Path>, overrides: &[String], kind: AdapterKind, corrupt: bool) -> Result<i32> {
    let cfg = load_config(config, overrides)?;
    excitor_core::graph::set_corrupt_backward(corrupt);
    let groups = gradcheck_groups(&cfg, kind, 1);
    excitor_core::graph::set_corrupt_backward(false);
    let groups = groups?;
    let rows: Vec<Vec<String>> = groups
        .iter()
        .map(|g| {
            vec![
                g.group.clone(),
                g.scalars.to_string(),
                format!("{:.3e}", g.max_rel_err),
                format!("{:.3e}", g.raw_rel_err),
                if g.max_rel_err < GRADCHECK_TOL { "ok" } else { "FAIL" }.to_string(),
            ]
        })
        .collect();
    print!("{}", text_table(&["group", "scalars", "max_rel_err", "raw_rel_err", "status"], &rows));
    if groups.is_empty() {
        println!("adapter {} has no trainable parameters; nothing to check", kind.name());
    }
    let ok = groups.iter().all(|g| g.max_rel_err < GRADCHECK_TOL);
    println!("gradcheck {} (tolerance {GRADCHECK_TOL:e})", if ok { "passed" } else { "FAILED" });
    Ok(if ok { 0 } else { 1 })
}

pub struct CompareArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub adapters: Vec<AdapterKind>,
    pub seeds: usize,
    pub out: PathBuf,
    pub base: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// One row per (adapter, seed) of the forgetting protocol.
#[derive(Debug, Clone)]
pub struct CompareRun {
    pub report: harness::ForgettingReport,
    pub drift: Vec<harness::LayerDrift>,
}

pub const RUNS_HEADER: [&str; 10] = [
    "adapter",
    "seed",
    "trainable",
    "steps",
    "a_before",
    "a_after",
    "degradation",
    "b_before",
    "b_after",
    "b_loss",
];

pub const SUMMARY_HEADER: [&str; 8] = [
    "adapter",
    "seeds",
    "trainable",
    "mean_degradation",
    "mean_acquisition",
    "mean_b_after",
    "mean_b_loss",
    "max_violation_rate",
];

/// Run the forgetting protocol for every adapter and seed on a shared base.
pub fn compare_runs<R: Scalar>(
    base: &Model<R>,
    cfg: &RunConfig,
    adapters: &[AdapterKind],
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<CompareRun>> {
    let data = ProtocolData::<R>::new(cfg)?;
    let probe = probe_set::<R>(cfg)?;
    let cells: Vec<(AdapterKind, u64)> = adapters
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    pool_map(cells, workers, |(kind, seed)| -> Result<CompareRun> {
        let (report, model, _) = forgetting_protocol(base, kind, cfg, seed, &data)?;
        eprintln!(
            "{} seed {seed}: {} steps, {} {:.4} -> {:.4}, {} {:.4} -> {:.4}",
            kind.name(),
            report.steps,
            cfg.data.pretrain_task.name(),
            report.acc_a_before,
            report.acc_a_after,
            cfg.data.task.name(),
            report.acc_b_before,
            report.acc_b_after
        );
        let drift = drift_report(base, &model, &probe)?;
        Ok(CompareRun { report, drift })
    })
    .into_iter()
    .collect()
}

pub fn runs_table(runs: &[CompareRun]) -> Vec<Vec<String>> {
    runs.iter()
        .map(|r| {
            let p = &r.report;
            vec![
                p.adapter.name().to_string(),
                p.seed.to_string(),
                p.trainable.to_string(),
                p.steps.to_string(),
                format!("{:.6}", p.acc_a_before),
                format!("{:.6}", p.acc_a_after),
                format!("{:.6}", p.degradation()),
                format!("{:.6}", p.acc_b_before),
                format!("{:.6}", p.acc_b_after),
                format!("{:.6}", p.loss_b_after),
            ]
        })
        .collect()
}

/// Per-adapter means over seeds, in first-seen adapter order.
pub fn summary_table(runs: &[CompareRun]) -> Vec<Vec<String>> {
    let mut order: Vec<AdapterKind> = Vec::new();
    for r in runs {
        if !order.contains(&r.report.adapter) {
            order.push(r.report.adapter);
        }
    }
    order
        .into_iter()
        .map(|a| {
            let rs: Vec<&CompareRun> = runs.iter().filter(|r| r.report.adapter == a).collect();
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&CompareRun) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let viol = rs
                .iter()
                .flat_map(|r| r.drift.iter().map(|d| d.violation_rate))
                .fold(0.0, f64::max);
            vec![
                a.name().to_string(),
                rs.len().to_string(),
                rs[0].report.trainable.to_string(),
                format!("{:.6}", mean(&|r| r.report.degradation())),
                format!("{:.6}", mean(&|r| r.report.acc_b_after - r.report.acc_b_before)),
                format!("{:.6}", mean(&|r| r.report.acc_b_after)),
                format!("{:.6}", mean(&|r| r.report.loss_b_after)),
                format!("{:.6e}", viol),
            ]
        })
        .collect()
}

pub fn compare(args: &CompareArgs) -> Result<i32> {
    match Precision::from_env()? {
        Precision::F32 => compare_as::<f32>(args),
        Precision::F64 => compare_as::<f64>(args),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

fn compare_as<R: Scalar>(args: &CompareArgs) -> Result<i32> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    if args.adapters.is_empty() || args.seeds == 0 {
        return Err(LabError::Config("need at least one adapter and one seed".into()));
    }
    let (base, pre) = base_model::<R>(&mut cfg, args.base.as_deref())?;
    log_pretrain(&pre);
    let seeds: Vec<u64> = (1..=args.seeds as u64).collect();
    let runs = compare_runs(&base, &cfg, &args.adapters, &seeds, worker_count(&cfg, args.workers))?;

    let dir = &args.out;
    std::fs::create_dir_all(dir.join("drift")).map_err(|e| LabError::io(dir, e))?;
    write_text(&dir.join("config.txt"), &cfg.render())?;
    write_text(&dir.join("runs.csv"), &csv_table(&RUNS_HEADER, &runs_table(&runs))?)?;
    let summary = summary_table(&runs);
    write_text(&dir.join("compare.csv"), &csv_table(&SUMMARY_HEADER, &summary)?)?;
    let text = text_table(&SUMMARY_HEADER, &summary);
    write_text(&dir.join("compare.txt"), &text)?;
    for r in &runs {
        let name = format!("{}-seed{}.csv", r.report.adapter.name(), r.report.seed);
        write_text(&dir.join("drift").join(name), &drift_csv(&r.drift)?)?;
    }
    write_drift_charts(dir, &cfg, &runs)?;
    print!("{text}");
    Ok(0)
}

fn write_drift_charts(dir: &Path, cfg: &RunConfig, runs: &[CompareRun]) -> Result<()> {
    let labels: Vec<String> = (0..cfg.model.n_layers).map(|l| format!("layer {l}")).collect();
    let mut drift = Vec::new();
    let mut viol = Vec::new();
    let mut seen = Vec::new();
    for r in runs {
        let a = r.report.adapter;
        if seen.contains(&a) {
            continue;
        }
        seen.push(a);
        let rs: Vec<&CompareRun> = runs.iter().filter(|x| x.report.adapter == a).collect();
        let mean = |f: fn(&harness::LayerDrift) -> f64| -> Vec<f64> {
            (0..labels.len())
                .map(|l| rs.iter().map(|x| f(&x.drift[l])).sum::<f64>() / rs.len() as f64)
                .collect()
        };
        drift.push((a.name().to_string(), mean(|d| d.drift)));
        viol.push((a.name().to_string(), mean(|d| d.violation_rate)));
    }
    write_text(
        &dir.join("drift.svg"),
        &crate::svg::bar_chart("hidden-state drift per layer", &labels, &drift),
    )?;
    write_text(
        &dir.join("violations.svg"),
        &crate::svg::bar_chart("value-span violation rate per layer", &labels, &viol),
    )
}

/// Parsed `--grid` axes. Missing axes take the config value.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rank: Vec<usize>,
    pub layers: Vec<usize>,
    pub proj: Vec<String>,
}

impl Grid {
    pub fn parse(specs: &[String], cfg: &RunConfig) -> Result<Self> {
        let mut g = Grid {
            rank: vec![cfg.excitor.rank],
            layers: vec![cfg.excitor.n_excited_layers],
            proj: vec![cfg.excitor.projection.label()],
        };
        let mut seen = Vec::new();
        for s in specs.iter().flat_map(|s| s.split_whitespace()) {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("grid axis {s:?} is not name=v1,v2")))?;
            if seen.contains(&k) {
                return Err(LabError::Config(format!("grid axis {k} given twice")));
            }
            seen.push(k);
            let vals: Vec<&str> = v.split([',', '|']).filter(|x| !x.is_empty()).collect();
            if vals.is_empty() {
                return Err(LabError::Config(format!("grid axis {k} has no values")));
            }
            let nums = || -> Result<Vec<usize>> {
                vals.iter()
                    .map(|x| x.parse().map_err(|_| LabError::Config(format!("grid {k}: bad value {x:?}"))))
                    .collect()
            };
            match k {
                "rank" => g.rank = nums()?,
                "layers" => g.layers = nums()?,
                "proj" => {
                    for p in &vals {
                        excitor_core::excitor::ProjectionSet::parse(p)?;
                    }
                    g.proj = vals.iter().map(|x| x.to_string()).collect();
                }
                _ => return Err(LabError::Config(format!("unknown grid axis {k:?} (rank, layers, proj)"))),
            }
        }
        Ok(g)
    }

    /// Every cell as config overrides, rank varying slowest.
    pub fn cells(&self) -> Vec<Vec<String>> {
        let mut out = Vec::new();
        for r in &self.rank {
            for l in &self.layers {
                for p in &self.proj {
                    out.push(vec![
                        format!("excitor.rank={r}"),
                        format!("excitor.layers={l}"),
                        format!("excitor.projection={p}"),
                    ]);
                }
            }
        }
        out
    }
}

pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub grid: Vec<String>,
    pub seed: u64,
    pub out: PathBuf,
    pub base: Option<PathBuf>,
    pub workers: Option<usize>,
}

pub const ABLATE_HEADER: [&str; 8] = ["rank", "layers", "proj", "trainable", "steps", "exact", "ppl", "loss"];

/// Fine-tune an Excitor for every grid cell from one shared base.
pub fn ablate_rows<R: Scalar>(
    base: &Model<R>,
    cfg: &RunConfig,
    grid: &Grid,
    seed: u64,
    workers: usize,
) -> Result<Vec<Vec<String>>> {
    let cells = grid.cells();
    pool_map(cells, workers, |cell| -> Result<Vec<String>> {
        let mut c = cfg.clone();
        c.apply_overrides(&cell)?;
        let (m, o) = finetune(base, &c, AdapterKind::Excitor, seed)?;
        let r = o.evals.first().map(|e| e.1).ok_or_else(|| LabError::Config("no eval set".into()))?;
        eprintln!("{}: exact {:.4} after {} steps", cell.join(" "), r.exact, o.steps_run);
        Ok(vec![
            c.excitor.rank.to_string(),
            c.excitor.n_excited_layers.to_string(),
            c.excitor.projection.label(),
            m.trainable_count().to_string(),
            o.steps_run.to_string(),
            format!("{:.6}", r.exact),
            format!("{:.6}", r.perplexity),
            format!("{:.6}", r.loss),
        ])
    })
    .into_iter()
    .collect()
}

pub fn ablate(args: &AblateArgs) -> Result<i32> {
    match Precision::from_env()? {
        Precision::F32 => ablate_as::<f32>(args),
        Precision::F64 => ablate_as::<f64>(args),
    }
}

fn ablate_as<R: Scalar>(args: &AblateArgs) -> Result<i32> {
    let mut cfg = load_config(args.config.as_deref(), &args.overrides)?;
    let grid = Grid::parse(&args.grid, &cfg)?;
    let (base, pre) = base_model::<R>(&mut cfg, args.base.as_deref())?;
    log_pretrain(&pre);
    let rows = ablate_rows(&base, &cfg, &grid, args.seed, worker_count(&cfg, args.workers))?;
    std::fs::create_dir_all(&args.out).map_err(|e| LabError::io(&args.out, e))?;
    write_text(&args.out.join("config.txt"), &cfg.render())?;
    let csv = csv_table(&ABLATE_HEADER, &rows)?;
    write_text(&args.out.join("ablate.csv"), &csv)?;
    print!("{}", text_table(&ABLATE_HEADER, &rows));
    Ok(0)
}

pub struct GenerateArgs {
    pub ckpt: PathBuf,
    pub prompt: String,
    pub instruction: Option<String>,
    pub raw: bool,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new: usize,
    pub seed: u64,
    pub image: Option<PathBuf>,
}

/// Visual prompt from either an XCT1 feature file or a raw 8x8 byte image.
pub fn load_image<R: Scalar>(path: &Path, dim: usize) -> Result<VisualPrompt<R>> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    if bytes.len() >= 4 && bytes[..4] == MAGIC {
        let vp = ckpt::visual_from_checkpoint(&Checkpoint::from_bytes(&bytes)?)?;
        if vp.dim() != dim {
            return Err(LabError::Config(format!(
                "{}: visual features have width {}, model expects {dim}",
                path.display(),
                vp.dim()
            )));
        }
        return Ok(vp);
    }
    Ok(toy_encode(&bytes, dim, &path.display().to_string())?)
}

/// Decoded continuation of the prompt.
pub fn generate_text<R: Scalar>(args: &GenerateArgs) -> Result<String> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let (model, cfg, kind) = io::from_checkpoint::<R>(&ck)?;
    let visual = match &args.image {
        Some(p) if kind != AdapterKind::ExcitorMm => {
            return Err(LabError::Config(format!(
                "--image {} needs an excitor-mm checkpoint, this one is {}",
                p.display(),
                kind.name()
            )))
        }
        Some(p) => Some(load_image::<R>(p, cfg.visual_dim())?),
        None => None,
    };
    let text = if args.raw {
        args.prompt.clone()
    } else {
        let instr = args
            .instruction
            .clone()
            .unwrap_or_else(|| cfg.data.task.instruction().to_string());
        render_prompt(&AlpacaSample::new(&instr, &args.prompt, ""), cfg.data.template)
    };
    let opts = GenerateOptions {
        max_new: args.max_new,
        temperature: args.temperature,
        top_p: args.top_p,
        eos: Some(EOS),
    };
    let mut rng = SplitMix64::derive(args.seed, "generate");
    let ids = model.generate(&encode(&text)?, &opts, &mut rng, visual.as_ref())?;
    Ok(decode(&ids))
}

pub fn generate(args: &GenerateArgs) -> Result<i32> {
    let text = match Precision::from_env()? {
        Precision::F32 => generate_text::<f32>(args)?,
        Precision::F64 => generate_text::<f64>(args)?,
    };
    println!("{text}");
    Ok(0)
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub task: Option<String>,
    pub overrides: Vec<String>,
}

/// Exact match, perplexity and loss of a checkpoint on a held-out set.
pub fn eval(args: &EvalArgs) -> Result<i32> {
    match Precision::from_env()? {
        Precision::F32 => eval_as::<f32>(args),
        Precision::F64 => eval_as::<f64>(args),
    }
}

fn eval_as<R: Scalar>(args: &EvalArgs) -> Result<i32> {
    let ck = Checkpoint::load(&args.ckpt)?;
    let (model, mut cfg, _) = io::from_checkpoint::<R>(&ck)?;
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| LabError::Config(format!("override {o:?} is not key=value")))?;
        if !k.trim().starts_with("data.") {
            return Err(LabError::Config(format!("eval only accepts data.* overrides, got {k}")));
        }
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    let task = match &args.task {
        Some(t) => TaskKind::parse(t)?,
        None => cfg.data.task,
    };
    let data = TaskData::<R>::new(&cfg, task)?;
    let r = evaluate(&model, &data.eval)?;
    print!(
        "{}",
        text_table(
            &["task", "samples", "exact", "ppl", "loss"],
            &[vec![
                task.name().to_string(),
                data.eval.len().to_string(),
                format!("{:.6}", r.exact),
                format!("{:.6}", r.perplexity),
                format!("{:.6}", r.loss),
            ]]
        )
    );
    Ok(0)
}

/// Adapter-only checkpoint written next to `ckpt.xct1` by `train`.
pub const ADAPTER_FILE: &str = "adapter.xct1";

/// Checkpoint holding only the adapter tensors of a run.
pub fn adapter_checkpoint<R: Scalar>(m: &Model<R>, cfg: &RunConfig, kind: AdapterKind) -> Checkpoint {
    io::to_checkpoint(m, cfg, kind, Tensors::AdapterOnly)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_drop_layer_indices() {
        assert_eq!(param_group("excitor.layer.2.gate"), "excitor.gate");
        assert_eq!(param_group("excitor.layer.0.visual.wk.down"), "excitor.visual.wk.down");
        assert_eq!(param_group("embed"), "embed");
    }

    #[test]
    fn pool_keeps_order_and_bounds_workers() {
        let out = pool_map((0..20).collect(), 3, |x: i32| x * x);
        assert_eq!(out, (0..20).map(|x| x * x).collect::<Vec<_>>());
        assert_eq!(pool_map(Vec::<i32>::new(), 4, |x| x), Vec::<i32>::new());
    }

    #[test]
    fn grid_expands_in_order() {
        let cfg = RunConfig::toy();
        let g = Grid::parse(&["rank=4,8".into(), "proj=q|qkv".into()], &cfg).unwrap();
        assert_eq!(g.layers, vec![cfg.excitor.n_excited_layers]);
        let cells = g.cells();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1][0], "excitor.rank=4");
        assert_eq!(cells[1][2], "excitor.projection=qkv");
        assert!(Grid::parse(&["depth=1".into()], &cfg).is_err());
        assert!(Grid::parse(&["rank=4".into(), "rank=8".into()], &cfg).is_err());
        assert!(Grid::parse(&["proj=qq".into()], &cfg).is_err());
    }
}
