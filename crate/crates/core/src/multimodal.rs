//! Visual prompts for the Excitor.
//!
//! Features from a frozen image encoder (`V × D`, CLS row first) are
//! projected per layer with low-rank maps and concatenated below the
//! learnable prompts, giving the key and value sets of the inner key
//! reconstruction attention:
//!
//! ```text
//! Key_excitor   = [P; (I · Wk_down) · Wk_up]
//! Value_excitor = [P; (I · Wv_down) · Wv_up]
//! Key_extra     = softmax(Q_ex · Key_excitorᵀ / √C) · Value_excitor
//! ```
//!
//! The prompt rows stay unprojected; one softmax spans all `K + V` rows.

use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::low_rank;
use crate::error::{dim_err, Error, Result};
use crate::excitor::{reconstruct_with, ExcitorVars, PROMPT_INIT_STD};
use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPrompt<R> {
    /// `[V, D]`; row 0 is the global CLS token, the rest are patches.
    pub features: Tensor<R>,
    pub source_id: String,
}

impl<R: Real> VisualPrompt<R> {
    pub fn new(features: Tensor<R>, source_id: impl Into<String>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Contract(alloc::format!(
                "visual features must be rank 2, got shape {:?}",
                features.shape()
            )));
        }
        if !features.is_finite() {
            return Err(Error::Contract("visual features contain non-finite values".into()));
        }
        Ok(Self {
            features,
            source_id: source_id.into(),
        })
    }

    pub fn rows(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Visual prompts for a whole batch, one `V × D` block per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualBatch<R> {
    /// `[batch * V, D]`
    pub features: Tensor<R>,
    pub rows_per_sample: usize,
}

impl<R: Real> VisualBatch<R> {
    pub fn from_prompts(prompts: &[&VisualPrompt<R>]) -> Result<Self> {
        let first = prompts.first().ok_or(Error::EmptyBatch)?;
        let (v, d) = (first.rows(), first.dim());
        let mut data = Vec::with_capacity(prompts.len() * v * d);
        for p in prompts {
            if p.rows() != v || p.dim() != d {
                return Err(dim_err("visual batch", first.features.shape(), p.features.shape()));
            }
            data.extend_from_slice(p.features.data());
        }
        Ok(Self {
            features: Tensor::new(alloc::vec![prompts.len() * v, d], data)?,
            rows_per_sample: v,
        })
    }

    /// Same prompt repeated for every sample.
    pub fn repeat(p: &VisualPrompt<R>, batch: usize) -> Result<Self> {
        let refs: Vec<&VisualPrompt<R>> = (0..batch).map(|_| p).collect();
        Self::from_prompts(&refs)
    }
}

/// Per-layer low-rank projections of the visual features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisualProjections {
    pub wk_down: ParamId,
    pub wk_up: ParamId,
    pub wv_down: ParamId,
    pub wv_up: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct VisualVars {
    pub wk_down: Var,
    pub wk_up: Var,
    pub wv_down: Var,
    pub wv_up: Var,
}

impl VisualProjections {
    pub fn bind<R: Real>(&self, g: &mut Graph<R>, store: &ParamStore<R>) -> VisualVars {
        VisualVars {
            wk_down: g.param(store, self.wk_down),
            wk_up: g.param(store, self.wk_up),
            wv_down: g.param(store, self.wv_down),
            wv_up: g.param(store, self.wv_up),
        }
    }

    /// Down projections N(0, 0.02²), up projections zero, so a fresh
    /// multimodal block behaves exactly like the text-only one.
    pub fn init<R: Real>(
        store: &mut ParamStore<R>,
        layer: usize,
        visual_dim: usize,
        dim: usize,
        rank: usize,
        rng: &mut SplitMix64,
    ) -> Result<Self> {
        let p = |s: &str| alloc::format!("excitor.layer.{layer}.visual.{s}");
        Ok(Self {
            wk_down: store.add(
                &p("wk_down"),
                Tensor::randn(&[visual_dim, rank], PROMPT_INIT_STD, rng),
            )?,
            wk_up: store.add(&p("wk_up"), Tensor::zeros(&[rank, dim]))?,
            wv_down: store.add(
                &p("wv_down"),
                Tensor::randn(&[visual_dim, rank], PROMPT_INIT_STD, rng),
            )?,
            wv_up: store.add(&p("wv_up"), Tensor::zeros(&[rank, dim]))?,
        })
    }
}

/// Key and value rows the key reconstruction attends over.
#[derive(Debug, Clone, Copy)]
pub struct ExcitorKv {
    pub key: Var,
    pub value: Var,
    /// Rows per sample (`K` or `K + V`).
    pub rows: usize,
    /// One set shared by the whole batch (text-only case).
    pub shared: bool,
}

impl ExcitorKv {
    /// Prompt rows as key and value, through the optional key/value
    /// projections of the block.
    pub fn text_only<R: Real>(g: &mut Graph<R>, block: &ExcitorVars) -> Result<Self> {
        let key = match &block.wk {
            Some(lr) => low_rank(g, block.prompts, lr)?,
            None => block.prompts,
        };
        let value = match &block.wv {
            Some(lr) => low_rank(g, block.prompts, lr)?,
            None => block.prompts,
        };
        Ok(Self {
            key,
            value,
            rows: g.value(block.prompts).dims2().0,
            shared: true,
        })
    }
}

/// Build `[P; proj(I)]` key and value sets for each sample. `features` holds
/// `batch * v` rows. With `v == 0` this is exactly the text-only set.
pub fn build_kv<R: Real>(
    g: &mut Graph<R>,
    block: &ExcitorVars,
    proj: &VisualVars,
    features: Var,
    batch: usize,
    v: usize,
) -> Result<ExcitorKv> {
    let text = ExcitorKv::text_only(g, block)?;
    if v == 0 {
        return Ok(text);
    }
    let (rows, d) = g.value(features).dims2();
    let d_proj = g.value(proj.wk_down).dims2().0;
    if rows != batch * v || d != d_proj {
        return Err(dim_err("build_kv", g.shape(features), g.shape(proj.wk_down)));
    }
    let kd = g.matmul(features, proj.wk_down)?;
    let kp = g.matmul(kd, proj.wk_up)?;
    let vd = g.matmul(features, proj.wv_down)?;
    let vp = g.matmul(vd, proj.wv_up)?;
    let k_prompts = g.value(block.prompts).dims2().0;
    let mut key_parts = Vec::with_capacity(2 * batch);
    let mut value_parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        key_parts.push(text.key);
        key_parts.push(g.slice_rows(kp, b * v, v)?);
        value_parts.push(text.value);
        value_parts.push(g.slice_rows(vp, b * v, v)?);
    }
    Ok(ExcitorKv {
        key: g.concat_rows(&key_parts)?,
        value: g.concat_rows(&value_parts)?,
        rows: k_prompts + v,
        shared: false,
    })
}

/// Key reconstruction over the multimodal key/value set.
pub fn mm_key_reconstruct<R: Real>(
    g: &mut Graph<R>,
    t: Var,
    block: &ExcitorVars,
    kv: &ExcitorKv,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    reconstruct_with(g, t, block, kv, batch, seq)
}

/// Side length of toy images.
pub const TOY_IMAGE_SIDE: usize = 8;
const TOY_PATCH: usize = 4;
const TOY_ENCODER_SEED: u64 = 0x70e1_e5c0;

/// Deterministic stand-in for a frozen image encoder. The 8×8 grid is split
/// into four 4×4 patches (row-major); each patch is mapped to `d` dims by its
/// own fixed random projection of the 16 bytes scaled to [0, 1]. The CLS row
/// is the mean of the patch rows.
pub fn toy_encode<R: Real>(image: &[u8], d: usize, source_id: &str) -> Result<VisualPrompt<R>> {
    if image.len() != TOY_IMAGE_SIDE * TOY_IMAGE_SIDE {
        return Err(Error::Contract(alloc::format!(
            "toy image must be {}x{} bytes, got {}",
            TOY_IMAGE_SIDE,
            TOY_IMAGE_SIDE,
            image.len()
        )));
    }
    if d < 8 {
        return Err(Error::Config(alloc::format!("toy encoder needs D >= 8, got {d}")));
    }
    let n_patch = (TOY_IMAGE_SIDE / TOY_PATCH) * (TOY_IMAGE_SIDE / TOY_PATCH);
    let inner = TOY_PATCH * TOY_PATCH;
    let mut rows = alloc::vec![0.0f64; (1 + n_patch) * d];
    for patch in 0..n_patch {
        let mut rng = SplitMix64::derive(TOY_ENCODER_SEED, &alloc::format!("patch{patch}"));
        let proj: Vec<f64> = (0..inner * d)
            .map(|_| rng.normal() / num_traits::Float::sqrt(inner as f64))
            .collect();
        let (pr, pc) = (patch / 2, patch % 2);
        let out = &mut rows[(1 + patch) * d..(2 + patch) * d];
        for y in 0..TOY_PATCH {
            for x in 0..TOY_PATCH {
                let byte = image[(pr * TOY_PATCH + y) * TOY_IMAGE_SIDE + pc * TOY_PATCH + x];
                let v = byte as f64 / 255.0;
                if v == 0.0 {
                    continue;
                }
                let k = y * TOY_PATCH + x;
                for j in 0..d {
                    out[j] += v * proj[k * d + j];
                }
            }
        }
    }
    for j in 0..d {
        let mut s = 0.0;
        for patch in 0..n_patch {
            s += rows[(1 + patch) * d + j];
        }
        rows[j] = s / n_patch as f64;
    }
    let data = rows.into_iter().map(R::from_f64).collect();
    VisualPrompt::new(Tensor::new(alloc::vec![1 + n_patch, d], data)?, source_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_image_gives_zero_features() {
        let vp = toy_encode::<f64>(&[0u8; 64], 16, "zero").unwrap();
        assert_eq!(vp.features.shape(), &[5, 16]);
        assert!(vp.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_images_identical_features() {
        let img: Vec<u8> = (0..64u8).map(|i| i.wrapping_mul(37)).collect();
        let a = toy_encode::<f32>(&img, 16, "a").unwrap();
        let b = toy_encode::<f32>(&img, 16, "a").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_patch_change_touches_only_that_row_and_cls() {
        let img: Vec<u8> = (0..64u8).map(|i| i.wrapping_mul(11)).collect();
        let mut img2 = img.clone();
        // (row 5, col 6) lies in the bottom-right patch, index 3.
        img2[5 * 8 + 6] ^= 0x80;
        let a = toy_encode::<f64>(&img, 12, "a").unwrap();
        let b = toy_encode::<f64>(&img2, 12, "b").unwrap();
        for r in 0..5 {
            let same = a.features.row(r) == b.features.row(r);
            assert_eq!(same, !(r == 0 || r == 4), "row {r}");
        }
    }

    #[test]
    fn encoder_contract_errors() {
        assert!(toy_encode::<f64>(&[0u8; 63], 16, "x").is_err());
        assert!(toy_encode::<f64>(&[0u8; 64], 7, "x").is_err());
    }

    #[test]
    fn rank3_features_rejected() {
        let t = Tensor::<f64>::zeros(&[1, 2, 3]);
        assert!(VisualPrompt::new(t, "x").is_err());
    }
}
