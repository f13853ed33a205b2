use super::*;
use crate::attention::{base_attention, causal_mask};
use alloc::vec;

fn randt(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Tensor<f64> {
    Tensor::randn(shape, std, rng)
}

fn weights(g: &mut Graph<f64>, c: usize, rng: &mut SplitMix64) -> AttentionVars {
    AttentionVars {
        wq: g.constant(randt(&[c, c], 0.5, rng)),
        wk: g.constant(randt(&[c, c], 0.5, rng)),
        wv: g.constant(randt(&[c, c], 0.5, rng)),
        wo: g.constant(randt(&[c, c], 0.5, rng)),
    }
}

fn shape(seq: usize, heads: usize) -> AttnShape {
    AttnShape {
        batch: 1,
        seq,
        heads,
        rope_base: 10000.0,
    }
}

#[test]
fn lora_zero_up_or_zero_scale_is_base() {
    let mut rng = SplitMix64::new(1);
    let mut g = Graph::new();
    let x = g.constant(randt(&[3, 6], 1.0, &mut rng));
    let w = g.constant(randt(&[6, 6], 1.0, &mut rng));
    let base = g.matmul(x, w).unwrap();
    let zero_up = LowRankVars {
        down: g.constant(randt(&[6, 2], 1.0, &mut rng)),
        up: g.constant(Tensor::zeros(&[2, 6])),
        scale: 2.0,
    };
    let y = lora_forward(&mut g, x, w, &zero_up).unwrap();
    assert_eq!(g.value(y), g.value(base));
    let zero_scale = LowRankVars {
        down: zero_up.down,
        up: g.constant(randt(&[2, 6], 1.0, &mut rng)),
        scale: 0.0,
    };
    let y = lora_forward(&mut g, x, w, &zero_scale).unwrap();
    assert_eq!(g.value(y), g.value(base));
}

#[test]
fn lora_defaults() {
    let c = LoraConfig::new(3, 4);
    assert_eq!(c.alpha, 8.0);
    assert_eq!(c.scale(), 2.0);
    assert!(c.validate(4, 64).is_ok());
    assert!(LoraConfig::new(5, 4).validate(4, 64).is_err());
    assert!(LoraConfig::new(1, 0).validate(4, 64).is_err());
}

#[test]
fn fresh_lora_block_has_zero_up() {
    let mut store = ParamStore::<f64>::new();
    let b = LoraBlock::init(&mut store, 2, 8, &LoraConfig::new(1, 3), 7).unwrap();
    assert!(store.value(b.wq.up).data().iter().all(|&v| v == 0.0));
    assert!(store.value(b.wv.up).data().iter().all(|&v| v == 0.0));
    assert_eq!(store.value(b.wq.down).shape(), &[8, 3]);
    assert!(store.lookup("lora.layer.2.wv.down").is_some());
}

#[test]
fn prefix_zero_gate_matches_base() {
    let mut rng = SplitMix64::new(2);
    let mut g = Graph::new();
    let t = g.constant(randt(&[5, 8], 1.0, &mut rng));
    let w = weights(&mut g, 8, &mut rng);
    let pb = PrefixVars {
        prefix: g.constant(randt(&[3, 8], 1.0, &mut rng)),
        gate: g.constant(Tensor::zeros(&[2])),
    };
    let base = base_attention(&mut g, &shape(5, 2), t, &w, causal_mask(5)).unwrap();
    let pre = prefix_forward(&mut g, &shape(5, 2), t, &w, &pb, causal_mask(5)).unwrap();
    let d = g.value(base.output).max_abs_diff(g.value(pre.output));
    assert!(d < 1e-7, "{d}");
}

#[test]
fn single_prefix_with_huge_gate_pulls_toward_its_value() {
    // With W_v = I and K = 1 the prefix value row is the prefix itself, and
    // tanh(gate) → 1 adds exactly that row to every mixed output.
    let mut rng = SplitMix64::new(3);
    let c = 4;
    let mut g = Graph::new();
    let t = g.constant(randt(&[3, c], 1.0, &mut rng));
    let mut eye = Tensor::zeros(&[c, c]);
    for i in 0..c {
        eye.data_mut()[i * c + i] = 1.0;
    }
    let w = AttentionVars {
        wq: g.constant(randt(&[c, c], 1.0, &mut rng)),
        wk: g.constant(randt(&[c, c], 1.0, &mut rng)),
        wv: g.constant(eye.clone()),
        wo: g.constant(eye),
    };
    let v = vec![10.0, -20.0, 30.0, 5.0];
    let pb = PrefixVars {
        prefix: g.constant(Tensor::new(vec![1, c], v.clone()).unwrap()),
        gate: g.constant(Tensor::filled(&[1], 50.0)),
    };
    let base = base_attention(&mut g, &shape(3, 1), t, &w, causal_mask(3)).unwrap();
    let pre = prefix_forward(&mut g, &shape(3, 1), t, &w, &pb, causal_mask(3)).unwrap();
    for i in 0..3 {
        for d in 0..c {
            let got = g.value(pre.output).at(i, d) - g.value(base.output).at(i, d);
            assert!((got - v[d]).abs() < 1e-9);
        }
    }
}

#[test]
fn prefix_config_checks() {
    assert!(PrefixConfig { n_layers: 2, prefix_len: 4 }.validate(4).is_ok());
    assert!(PrefixConfig { n_layers: 0, prefix_len: 4 }.validate(4).is_err());
    assert!(PrefixConfig { n_layers: 2, prefix_len: 0 }.validate(4).is_err());
    let mut store = ParamStore::<f32>::new();
    let b = PrefixAdapterBlock::init(&mut store, 1, 8, 2, &PrefixConfig { n_layers: 1, prefix_len: 3 }, 0).unwrap();
    assert_eq!(store.value(b.gate).data(), &[0.0, 0.0]);
}
