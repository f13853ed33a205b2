//! Temperature and nucleus (top-p) sampling over one logit row.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::SplitMix64;

/// Decoding defaults used by the instruction-following runs.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_TOP_P: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub max_new: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub eos: Option<usize>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            max_new: 32,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            eos: Some(0),
        }
    }
}

impl GenerateOptions {
    pub fn greedy(max_new: usize, eos: Option<usize>) -> Self {
        Self {
            max_new,
            temperature: 0.0,
            top_p: 1.0,
            eos,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(self.temperature, self.top_p)
    }
}

fn check(temperature: f64, top_p: f64) -> Result<()> {
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::Config(alloc::format!("temperature must be >= 0, got {temperature}")));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(Error::Config(alloc::format!("top_p must be in (0, 1], got {top_p}")));
    }
    Ok(())
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<R: Real>(logits: &[R]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Probabilities after temperature scaling and top-p truncation, in the
/// original index order. The kept set is the smallest prefix of the
/// descending-sorted distribution with mass ≥ `top_p`, renormalised.
pub fn nucleus_probs<R: Real>(logits: &[R], temperature: f64, top_p: f64) -> Result<Vec<f64>> {
    check(temperature, top_p)?;
    if logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if temperature == 0.0 {
        let mut p = alloc::vec![0.0; logits.len()];
        p[argmax(logits)] = 1.0;
        return Ok(p);
    }
    let max = logits.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, |a, b| if b > a { b } else { a });
    if !max.is_finite() {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let mut p: Vec<f64> = logits
        .iter()
        .map(|v| num_traits::Float::exp((v.as_f64() - max) / temperature))
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    if top_p < 1.0 {
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        let mut mass = 0.0;
        let mut keep = order.len();
        for (n, &i) in order.iter().enumerate() {
            mass += p[i];
            if mass >= top_p {
                keep = n + 1;
                break;
            }
        }
        for &i in &order[keep..] {
            p[i] = 0.0;
        }
        let z: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= z);
    }
    Ok(p)
}

/// Draw one token id from a logit row.
pub fn sample_next<R: Real>(
    logits: &[R],
    temperature: f64,
    top_p: f64,
    rng: &mut SplitMix64,
) -> Result<usize> {
    if temperature == 0.0 {
        check(temperature, top_p)?;
        return Ok(argmax(logits));
    }
    let p = nucleus_probs(logits, temperature, top_p)?;
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}
