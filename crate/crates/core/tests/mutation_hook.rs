//! The corruption hook is process-global, so this check lives in its own
//! test binary.

use excitor_core::gradcheck::grad_check_inputs;
use excitor_core::graph::{set_corrupt_backward, HeadLayout};
use excitor_core::{SplitMix64, Tensor};

#[test]
fn corrupted_backward_is_detected() {
    let mut rng = SplitMix64::new(1);
    let q = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let k = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 3], 1.0, &mut rng);
    let layout = HeadLayout::self_attention(1, 1, 3);
    let check = || {
        grad_check_inputs(&[q.clone(), k.clone()], 1e-5, |g, v| {
            let s = g.batched_qk(v[0], v[1], layout, 0.5)?;
            let wv = g.constant(w.clone());
            let y = g.mul(s, wv)?;
            Ok(g.sum(y))
        })
        .unwrap()
    };
    assert!(check() < 1e-6);
    set_corrupt_backward(true);
    let corrupted = check();
    set_corrupt_backward(false);
    assert!(corrupted > 1e-3, "corruption went unnoticed: {corrupted}");
}
