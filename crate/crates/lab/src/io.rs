//! Models to and from XCT1 checkpoints, and the run directory layout.

use std::path::Path;

use excitor_core::model::{is_adapter_param, Model};
use excitor_core::sampling::{DEFAULT_TEMPERATURE, DEFAULT_TOP_P};

use crate::ckpt::{Checkpoint, Scalar};
use crate::config::{AdapterKind, RunConfig};
use crate::error::{FormatError, LabError, Result};
use crate::metrics::RunMetrics;

const CONFIG_PREFIXES: [&str; 6] = ["model.", "excitor.", "lora.", "prefix.", "train.", "data."];

/// Which tensors go into a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tensors {
    All,
    AdapterOnly,
}

pub fn to_checkpoint<R: Scalar>(m: &Model<R>, cfg: &RunConfig, kind: AdapterKind, which: Tensors) -> Checkpoint {
    let mut ck = Checkpoint::new();
    for (k, v) in cfg.entries() {
        ck.set_meta(k, v);
    }
    ck.set_meta("adapter", kind.name());
    ck.set_meta("sampling.temperature", DEFAULT_TEMPERATURE);
    ck.set_meta("sampling.top_p", DEFAULT_TOP_P);
    ck.set_meta(
        "tensors",
        match which {
            Tensors::All => "all",
            Tensors::AdapterOnly => "adapter",
        },
    );
    for (_, p) in m.params.iter() {
        if which == Tensors::All || is_adapter_param(&p.name) {
            ck.push(&p.name, &p.value);
        }
    }
    ck
}

/// Config and adapter kind recorded in a checkpoint's metadata.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<(RunConfig, AdapterKind)> {
    let mut cfg = RunConfig::toy();
    for (k, v) in &ck.meta {
        if CONFIG_PREFIXES.iter().any(|p| k.starts_with(p)) {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    let kind = match ck.meta.get("adapter") {
        Some(a) => AdapterKind::parse(a)?,
        None => AdapterKind::None,
    };
    Ok((cfg, kind))
}

/// Copy checkpoint tensors into `m` by name. Every checkpoint tensor must
/// exist in the model with the same shape; with `require_all`, every model
/// tensor must also be present in the checkpoint. Frozen flags are kept.
pub fn load_params<R: Scalar>(m: &mut Model<R>, ck: &Checkpoint, require_all: bool) -> Result<()> {
    let unknown: Vec<String> = ck
        .tensors
        .iter()
        .filter(|t| m.params.lookup(&t.name).is_none())
        .map(|t| t.name.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(FormatError::UnknownTensors(unknown).into());
    }
    if require_all {
        let missing: Vec<String> = m
            .param_names()
            .into_iter()
            .filter(|n| ck.get(n).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(FormatError::MissingTensors(missing).into());
        }
    }
    for t in &ck.tensors {
        let id = m.params.lookup(&t.name).expect("checked above");
        let want = m.params.value(id).shape().to_vec();
        if t.shape != want {
            return Err(FormatError::Tensor {
                name: t.name.clone(),
                msg: format!("shape {:?} does not match model shape {:?}", t.shape, want),
            }
            .into());
        }
        m.params.get_mut(id).value = t.to_tensor()?;
    }
    Ok(())
}

/// Rebuild the full model, adapter included, from a checkpoint that holds
/// every tensor.
pub fn from_checkpoint<R: Scalar>(ck: &Checkpoint) -> Result<(Model<R>, RunConfig, AdapterKind)> {
    let (cfg, kind) = checkpoint_config(ck)?;
    let base = Model::<R>::new(cfg.model, cfg.model_seed)?;
    let mut m = crate::harness::prepare(&base, &cfg, kind, 0)?;
    load_params(&mut m, ck, true)?;
    Ok((m, cfg, kind))
}

/// Attach the adapter stored in `ck` to a copy of `base`. The checkpoint
/// may hold adapter tensors only; base tensors, if present, must match.
pub fn attach_from_checkpoint<R: Scalar>(base: &Model<R>, ck: &Checkpoint) -> Result<(Model<R>, AdapterKind)> {
    let (mut cfg, kind) = checkpoint_config(ck)?;
    cfg.model = base.config;
    let mut m = crate::harness::prepare(base, &cfg, kind, 0)?;
    let adapter_names: Vec<String> = m
        .param_names()
        .into_iter()
        .filter(|n| is_adapter_param(n))
        .collect();
    let missing: Vec<String> = adapter_names.into_iter().filter(|n| ck.get(n).is_none()).collect();
    if !missing.is_empty() {
        return Err(FormatError::MissingTensors(missing).into());
    }
    let adapter_only = Checkpoint {
        meta: ck.meta.clone(),
        tensors: ck.tensors.iter().filter(|t| is_adapter_param(&t.name)).cloned().collect(),
    };
    load_params(&mut m, &adapter_only, false)?;
    Ok((m, kind))
}

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CKPT_FILE: &str = "ckpt.xct1";
pub const LOSS_SVG: &str = "loss.svg";

/// Write `config.txt`, `metrics.csv`, `ckpt.xct1` and a loss chart.
pub fn write_run_dir<R: Scalar>(
    dir: &Path,
    cfg: &RunConfig,
    kind: AdapterKind,
    seed: u64,
    model: &Model<R>,
    metrics: &RunMetrics,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let config = format!(
        "# adapter = {}\n# seed = {seed}\n# precision = {}\n{}",
        kind.name(),
        R::KIND.name(),
        cfg.render()
    );
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| LabError::io(&p, e))
    };
    write(CONFIG_FILE, &config)?;
    metrics.write_csv(&dir.join(METRICS_FILE))?;
    let mut ck = to_checkpoint(model, cfg, kind, Tensors::All);
    ck.set_meta("run.seed", seed);
    ck.save(&dir.join(CKPT_FILE))?;
    let losses: Vec<(f64, f64)> = metrics.losses().into_iter().map(|(s, l)| (s as f64, l)).collect();
    write(
        LOSS_SVG,
        &crate::svg::line_chart(&format!("training loss ({})", kind.name()), "step", &[("loss".into(), losses)]),
    )?;
    Ok(())
}
