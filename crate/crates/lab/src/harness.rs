//! Datasets, the training loop, evaluation, the forgetting protocol and
//! hidden-state drift reports.

use std::time::Instant;

use excitor_core::data::{
    collate, format_alpaca, gen_task, AlpacaSample, Encoded, TaskKind, TaskSpec, IGNORE,
};
use excitor_core::model::{Model, TokenBatch};
use excitor_core::multimodal::{toy_encode, VisualBatch, VisualPrompt};
use excitor_core::optim::{AdamW, AdamWConfig, Schedule};
use excitor_core::sampling::argmax;
use excitor_core::{Graph, SplitMix64, Tensor};

use crate::ckpt::Scalar;
use crate::config::{AdapterKind, RunConfig};
use crate::error::{LabError, Result};
use crate::metrics::RunMetrics;

/// Divergence: loss above `DIVERGENCE_FACTOR` × the first loss for
/// `DIVERGENCE_WINDOW` consecutive steps.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_WINDOW: usize = 50;

#[derive(Debug, Clone)]
pub struct Example<R> {
    pub sample: AlpacaSample,
    pub enc: Encoded,
    pub visual: Option<VisualPrompt<R>>,
}

#[derive(Debug, Clone)]
pub struct Dataset<R> {
    pub name: String,
    pub items: Vec<Example<R>>,
}

impl<R: Scalar> Dataset<R> {
    pub fn from_samples(name: &str, samples: Vec<AlpacaSample>, cfg: &RunConfig) -> Result<Self> {
        let d = cfg.visual_dim();
        let items = samples
            .into_iter()
            .map(|s| {
                let enc = format_alpaca(&s, cfg.data.template, cfg.model.max_seq)?;
                let visual = match &s.image {
                    Some(img) => Some(toy_encode(img, d, "toy")?),
                    None => None,
                };
                Ok(Example {
                    sample: s,
                    enc,
                    visual,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if items.is_empty() {
            return Err(LabError::Config(format!("dataset {name} is empty")));
        }
        Ok(Self {
            name: name.to_string(),
            items,
        })
    }

    /// `count` samples of `task` under the config's alphabet and lengths.
    pub fn generate(cfg: &RunConfig, task: TaskKind, count: usize, seed: u64) -> Result<Self> {
        let spec = TaskSpec {
            alphabet: cfg.data.alphabet.chars().collect(),
            min_len: cfg.data.min_len,
            max_len: cfg.data.max_len,
            ..TaskSpec::new(task, count, seed)
        };
        Self::from_samples(task.name(), gen_task(&spec)?, cfg)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Padded batch of the given items, with targets and stacked visual
    /// prompts when the items carry images.
    pub fn batch(&self, idx: &[usize]) -> Result<(TokenBatch, Vec<usize>, Option<VisualBatch<R>>)> {
        let encs: Vec<&Encoded> = idx.iter().map(|&i| &self.items[i].enc).collect();
        let (batch, targets) = collate(&encs);
        let vis: Vec<&VisualPrompt<R>> = idx.iter().filter_map(|&i| self.items[i].visual.as_ref()).collect();
        let visual = if vis.is_empty() {
            None
        } else if vis.len() == idx.len() {
            Some(VisualBatch::from_prompts(&vis)?)
        } else {
            return Err(LabError::Config(format!("dataset {} mixes samples with and without images", self.name)));
        };
        Ok((batch, targets, visual))
    }
}

/// Train, held-out eval and drift-probe sets for one config. The eval and
/// probe inputs never occur in the training set.
#[derive(Debug, Clone)]
pub struct TaskData<R> {
    pub train: Dataset<R>,
    pub eval: Dataset<R>,
}

impl<R: Scalar> TaskData<R> {
    pub fn new(cfg: &RunConfig, task: TaskKind) -> Result<Self> {
        let seed = SplitMix64::derive(cfg.data.seed, task.name()).next_u64();
        let eval = Dataset::generate(cfg, task, cfg.data.eval_samples, seed ^ 0x5eed_e7a1)?;
        let mut train = Dataset::generate(cfg, task, cfg.data.train_samples, seed)?;
        let held: std::collections::BTreeSet<(String, Option<Vec<u8>>)> = eval
            .items
            .iter()
            .map(|e| (e.sample.input.clone(), e.sample.image.clone()))
            .collect();
        train
            .items
            .retain(|e| !held.contains(&(e.sample.input.clone(), e.sample.image.clone())));
        if train.is_empty() {
            return Err(LabError::Config(format!("no {} training samples left after holding out eval", task.name())));
        }
        Ok(Self { train, eval })
    }
}

/// Drift probe: held-out sequences from the pretraining task.
pub fn probe_set<R: Scalar>(cfg: &RunConfig) -> Result<Dataset<R>> {
    let seed = SplitMix64::derive(cfg.data.seed, "probe").next_u64();
    let mut ds = Dataset::generate(cfg, cfg.data.pretrain_task, cfg.data.probe_samples, seed)?;
    ds.name = "probe".into();
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub steps: usize,
    pub batch: usize,
    pub schedule: Schedule,
    pub adamw: AdamWConfig,
    pub eval_every: usize,
    /// Stop after an eval on the first eval set reaches this exact match.
    pub target_exact: Option<f64>,
    /// Stop after an eval on the first eval set reaches this loss or lower.
    pub target_loss: Option<f64>,
    pub seed: u64,
}

impl TrainPlan {
    pub fn from_config(cfg: &RunConfig, seed: u64) -> Self {
        Self {
            steps: cfg.train.steps,
            batch: cfg.train.batch,
            schedule: cfg.schedule(cfg.train.steps, cfg.train.lr),
            adamw: cfg.adamw(),
            eval_every: cfg.train.eval_every,
            target_exact: (cfg.train.target_exact > 0.0).then_some(cfg.train.target_exact),
            target_loss: (cfg.train.target_loss > 0.0).then_some(cfg.train.target_loss),
            seed,
        }
    }

    pub fn pretrain(cfg: &RunConfig) -> Self {
        let steps = cfg.train.pretrain_steps;
        Self {
            steps,
            batch: cfg.train.batch,
            schedule: cfg.schedule(steps, cfg.train.pretrain_lr),
            adamw: cfg.adamw(),
            eval_every: cfg.train.eval_every,
            target_exact: None,
            target_loss: None,
            seed: SplitMix64::derive(cfg.model_seed, "pretrain").next_u64(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Fraction of samples whose every response token (and the terminator)
    /// is the argmax under teacher forcing. This equals greedy-decoding exact
    /// match: a fully correct teacher-forced row is exactly what greedy
    /// decoding would emit.
    pub exact: f64,
    /// `exp` of the mean response-token negative log-likelihood.
    pub perplexity: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: RunMetrics,
    pub steps_run: usize,
    pub final_loss: f64,
    pub evals: Vec<(String, EvalResult)>,
}

fn cycle_batches(n: usize, batch: usize, steps: usize, seed: u64) -> impl Iterator<Item = Vec<usize>> {
    let mut rng = SplitMix64::derive(seed, "batches");
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    (0..steps).map(move |_| {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if pos == order.len() {
                order = (0..n).collect();
                rng.shuffle(&mut order);
                pos = 0;
            }
            idx.push(order[pos]);
            pos += 1;
        }
        idx
    })
}

/// Train every non-frozen parameter of `model` on `data`.
///
/// Each step logs loss and learning rate; every `eval_every` steps and at
/// the end each eval set contributes `<name>.exact` and `<name>.ppl`.
pub fn train<R: Scalar>(
    model: &mut Model<R>,
    data: &Dataset<R>,
    evals: &[&Dataset<R>],
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut metrics = RunMetrics::new();
    let mut opt = AdamW::new(plan.adamw);
    let mut initial = None;
    let mut above = 0;
    let mut last_loss = f64::NAN;
    let mut steps_run = 0;
    let mut final_evals = Vec::new();
    let log_evals = |m: &Model<R>, step: usize, metrics: &mut RunMetrics| -> Result<Vec<(String, EvalResult)>> {
        let mut out = Vec::new();
        for ds in evals {
            let r = evaluate(m, ds)?;
            metrics.value(step, &format!("{}.exact", ds.name), r.exact);
            metrics.value(step, &format!("{}.ppl", ds.name), r.perplexity);
            out.push((ds.name.clone(), r));
        }
        Ok(out)
    };
    for (step, idx) in cycle_batches(data.len(), plan.batch, plan.steps, plan.seed).enumerate() {
        let (batch, targets, visual) = data.batch(&idx)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, visual.as_ref())?;
        let loss_var = g.cross_entropy(out.logits, &targets, IGNORE)?;
        let loss = g.value(loss_var).scalar().as_f64();
        if !loss.is_finite() {
            return Err(LabError::NonFiniteLoss { step: step + 1 });
        }
        let first = *initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * first {
            above += 1;
            if above >= DIVERGENCE_WINDOW {
                return Err(LabError::Divergence {
                    step: step + 1,
                    loss,
                    limit: DIVERGENCE_FACTOR * first,
                    window: DIVERGENCE_WINDOW,
                });
            }
        } else {
            above = 0;
        }
        model.params.zero_grad();
        g.backward(loss_var, &mut model.params)?;
        let lr = plan.schedule.lr(step);
        opt.step(&mut model.params, lr)?;
        steps_run = step + 1;
        last_loss = loss;
        metrics.step(steps_run, loss, lr);
        let last = steps_run == plan.steps;
        if !last && plan.eval_every > 0 && steps_run % plan.eval_every == 0 {
            let r = log_evals(model, steps_run, &mut metrics)?;
            if let Some((_, first)) = r.first() {
                let hit = plan.target_exact.is_some_and(|t| first.exact >= t)
                    || plan.target_loss.is_some_and(|t| first.loss <= t);
                if hit {
                    final_evals = r;
                    break;
                }
            }
        }
        if last {
            final_evals = log_evals(model, steps_run, &mut metrics)?;
        }
    }
    if plan.steps == 0 {
        final_evals = log_evals(model, 0, &mut metrics)?;
    }
    metrics.wall_time = started.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        metrics,
        steps_run,
        final_loss: last_loss,
        evals: final_evals,
    })
}

/// Teacher-forced evaluation over response tokens.
pub fn evaluate<R: Scalar>(model: &Model<R>, ds: &Dataset<R>) -> Result<EvalResult> {
    const CHUNK: usize = 64;
    let mut exact = 0usize;
    let mut nll = 0.0;
    let mut tokens = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for idx in all.chunks(CHUNK) {
        let (batch, targets, visual) = ds.batch(idx)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &batch, visual.as_ref())?;
        let logits = g.value(out.logits);
        for b in 0..idx.len() {
            let mut ok = true;
            for t in 0..batch.seq {
                let r = b * batch.seq + t;
                let target = targets[r];
                if target == IGNORE {
                    continue;
                }
                let row = logits.row(r);
                ok &= argmax(row) == target;
                nll += neg_log_softmax(row, target);
                tokens += 1;
            }
            exact += ok as usize;
        }
    }
    let loss = nll / tokens.max(1) as f64;
    Ok(EvalResult {
        exact: exact as f64 / ds.len() as f64,
        perplexity: loss.exp(),
        loss,
    })
}

fn neg_log_softmax<R: Scalar>(row: &[R], target: usize) -> f64 {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v.as_f64() - m).exp()).sum();
    m + z.ln() - row[target].as_f64()
}

/// Full training of a fresh base model on the pretraining task.
pub fn pretrain<R: Scalar>(cfg: &RunConfig) -> Result<(Model<R>, TrainOutcome)> {
    let mut model = Model::<R>::new(cfg.model, cfg.model_seed)?;
    let data = TaskData::<R>::new(cfg, cfg.data.pretrain_task)?;
    model.set_full_finetune(true);
    let outcome = train(&mut model, &data.train, &[&data.eval], &TrainPlan::pretrain(cfg))?;
    model.set_full_finetune(false);
    Ok((model, outcome))
}

/// A copy of `base` ready for fine-tuning with `kind`.
pub fn prepare<R: Scalar>(base: &Model<R>, cfg: &RunConfig, kind: AdapterKind, seed: u64) -> Result<Model<R>> {
    let mut m = base.clone();
    m.set_full_finetune(false);
    match kind {
        AdapterKind::None => {}
        AdapterKind::Full => m.set_full_finetune(true),
        _ => m.attach(cfg.adapter(kind), SplitMix64::derive(seed, "adapter").next_u64())?,
    }
    Ok(m)
}

/// Accuracy on the old task before and after learning the new one.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingReport {
    pub adapter: AdapterKind,
    pub seed: u64,
    pub acc_a_before: f64,
    pub acc_a_after: f64,
    pub acc_b_before: f64,
    pub acc_b_after: f64,
    pub loss_b_after: f64,
    pub steps: usize,
    pub trainable: usize,
}

impl ForgettingReport {
    pub fn degradation(&self) -> f64 {
        self.acc_a_before - self.acc_a_after
    }
}

/// Held-out task-A eval set plus task-B train/eval sets.
#[derive(Debug, Clone)]
pub struct ProtocolData<R> {
    pub a_eval: Dataset<R>,
    pub b: TaskData<R>,
}

impl<R: Scalar> ProtocolData<R> {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let a = TaskData::new(cfg, cfg.data.pretrain_task)?;
        Ok(Self {
            a_eval: a.eval,
            b: TaskData::new(cfg, cfg.data.task)?,
        })
    }
}

/// Fine-tune a copy of `base` (already trained on task A) on task B with
/// `kind`. `kind = None` trains nothing.
pub fn forgetting_protocol<R: Scalar>(
    base: &Model<R>,
    kind: AdapterKind,
    cfg: &RunConfig,
    seed: u64,
    data: &ProtocolData<R>,
) -> Result<(ForgettingReport, Model<R>, TrainOutcome)> {
    let acc_a_before = evaluate(base, &data.a_eval)?.exact;
    let acc_b_before = evaluate(base, &data.b.eval)?.exact;
    let mut m = prepare(base, cfg, kind, seed)?;
    let mut plan = TrainPlan::from_config(cfg, SplitMix64::derive(seed, "finetune").next_u64());
    if kind == AdapterKind::None {
        plan.steps = 0;
    }
    let outcome = train(&mut m, &data.b.train, &[&data.b.eval], &plan)?;
    let b_after = evaluate(&m, &data.b.eval)?;
    let report = ForgettingReport {
        adapter: kind,
        seed,
        acc_a_before,
        acc_a_after: evaluate(&m, &data.a_eval)?.exact,
        acc_b_before,
        acc_b_after: b_after.exact,
        loss_b_after: b_after.loss,
        steps: outcome.steps_run,
        trainable: m.trainable_count(),
    };
    Ok((report, m, outcome))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerDrift {
    pub layer: usize,
    /// Mean cosine distance between adapted and frozen hidden states.
    pub drift: f64,
    /// Fraction of pre-`W_o` attention coordinates outside the per-column
    /// range of the frozen-`W_v` values.
    pub violation_rate: f64,
}

/// Largest absolute value counted as rounding when testing hull membership.
pub const SPAN_TOL: f64 = 1e-6;

/// Per-layer hull violations of one forward pass, as `(violations,
/// checked)` counts. Values are the layer's normed input times the frozen
/// base `W_v`; a coordinate of the mixed heads at row `i` must lie within
/// the range of that column over rows `0..=i` of its own sequence, up to
/// `SPAN_TOL` relative to the column's magnitude. Rows at or beyond
/// `lens[b]` are padding and skipped.
pub fn span_violations<R: Scalar>(
    model: &Model<R>,
    g: &mut Graph<R>,
    out: &excitor_core::model::ForwardOutput,
    batch: &TokenBatch,
    lens: &[usize],
) -> Result<Vec<(usize, usize)>> {
    let seq = batch.seq;
    let c = model.config.dim;
    let mut res = Vec::with_capacity(out.layers.len());
    for (l, tr) in out.layers.iter().enumerate() {
        let wv = g.constant(model.params.value(model.layer_params(l).attn.wv).clone());
        let normed = g.detach(tr.normed);
        let vals = g.matmul(normed, wv)?;
        let v = g.value(vals);
        let mixed = g.value(tr.attn.mixed);
        let (mut bad, mut total) = (0, 0);
        for (b, &len) in lens.iter().enumerate() {
            let base = b * seq;
            for d in 0..c {
                let (mut lo, mut hi, mut mag) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64);
                for i in 0..len {
                    let x = v.at(base + i, d).as_f64();
                    lo = lo.min(x);
                    hi = hi.max(x);
                    mag = mag.max(x.abs());
                    let y = mixed.at(base + i, d).as_f64();
                    let tol = SPAN_TOL * mag.max(1.0);
                    total += 1;
                    if !(y >= lo - tol && y <= hi + tol) {
                        bad += 1;
                    }
                }
            }
        }
        res.push((bad, total));
    }
    Ok(res)
}

/// Per-layer drift of `adapted` against `base` over the probe set. Both
/// models must share the same base configuration.
pub fn drift_report<R: Scalar>(base: &Model<R>, adapted: &Model<R>, probe: &Dataset<R>) -> Result<Vec<LayerDrift>> {
    let n = base.config.n_layers;
    let c = base.config.dim;
    let mut dist = vec![0.0; n];
    let mut bad = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut tokens = 0usize;
    let all: Vec<usize> = (0..probe.len()).collect();
    for idx in all.chunks(64) {
        let (batch, _, visual) = probe.batch(idx)?;
        let lens: Vec<usize> = idx.iter().map(|&i| probe.items[i].enc.tokens.len()).collect();
        let mut gb = Graph::new();
        let ob = base.forward(&mut gb, &batch, visual.as_ref())?;
        let mut ga = Graph::new();
        let oa = adapted.forward(&mut ga, &batch, visual.as_ref())?;
        for l in 0..n {
            let hb = gb.value(ob.layers[l].output);
            let ha = ga.value(oa.layers[l].output);
            for (b, &len) in lens.iter().enumerate() {
                for i in 0..len {
                    let r = b * batch.seq + i;
                    dist[l] += cosine_distance(&hb.row(r)[..c], &ha.row(r)[..c]);
                }
            }
        }
        tokens += lens.iter().sum::<usize>();
        for (l, (b, t)) in span_violations(adapted, &mut ga, &oa, &batch, &lens)?.into_iter().enumerate() {
            bad[l] += b;
            total[l] += t;
        }
    }
    Ok((0..n)
        .map(|l| LayerDrift {
            layer: l,
            drift: dist[l] / tokens.max(1) as f64,
            violation_rate: bad[l] as f64 / total[l].max(1) as f64,
        })
        .collect())
}

fn cosine_distance<R: Scalar>(a: &[R], b: &[R]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if a == b {
        return 0.0;
    }
    let denom = (aa * bb).sqrt();
    if denom == 0.0 {
        return 1.0;
    }
    (1.0 - ab / denom).max(0.0)
}

pub const DRIFT_HEADER: [&str; 3] = ["layer", "drift", "violation_rate"];

pub fn drift_csv(rows: &[LayerDrift]) -> Result<String> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.layer.to_string(), format!("{:.9e}", r.drift), format!("{:.9e}", r.violation_rate)])
        .collect();
    crate::metrics::csv_table(&DRIFT_HEADER, &rows)
}

/// Every base parameter of `a` is bit-identical to the same-named one in `b`.
pub fn base_params_identical<R: Scalar>(a: &Model<R>, b: &Model<R>) -> bool {
    a.base_param_ids().iter().all(|&id| {
        let name = &a.params.get(id).name;
        match b.params.lookup(name) {
            Some(other) => bits(a.params.value(id)) == bits(b.params.value(other)),
            None => false,
        }
    })
}

fn bits<R: Scalar>(t: &Tensor<R>) -> Vec<u8> {
    let mut out = Vec::new();
    for &v in t.data() {
        v.put(&mut out);
    }
    out
}
