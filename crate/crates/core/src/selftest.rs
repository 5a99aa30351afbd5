//! Golden check of the two-image FL1 example: one product and two
//! rotate-and-add steps on an 8-slot ciphertext, plus the 16-ciphertext
//! input of the example network.

use std::sync::Arc;

use crate::error::Result;
use crate::forward::encrypt_batch;
use crate::geometry::preset;
use crate::lhe::{Evaluator, LheParams};
use crate::meter::OpMeter;
use crate::plan::NetworkPlan;
use crate::tee::TeeService;

pub const EXAMPLE_INPUT: [f64; 8] = [20.0, 40.0, 28.0, 56.0, 84.0, 168.0, 92.0, 184.0];
pub const EXAMPLE_WEIGHTS: [f64; 8] = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0];
pub const EXAMPLE_STAGES: [[f64; 8]; 3] = [
    [20.0, 40.0, 0.0, 0.0, 0.0, 0.0, 92.0, 184.0],
    [20.0, 40.0, 0.0, 0.0, 92.0, 184.0, 112.0, 224.0],
    [112.0, 224.0, 112.0, 224.0, 112.0, 224.0, 112.0, 224.0],
];

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub expected: Vec<f64>,
    pub actual: Vec<f64>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.expected == self.actual
    }

    /// Slots that differ, as `(slot, expected, actual)`.
    pub fn diff(&self) -> Vec<(usize, f64, f64)> {
        let len = self.expected.len().max(self.actual.len());
        (0..len)
            .filter_map(|i| {
                let (e, a) = (self.expected.get(i).copied().unwrap_or(f64::NAN), self.actual.get(i).copied().unwrap_or(f64::NAN));
                (e != a).then_some((i, e, a))
            })
            .collect()
    }
}

/// Runs every check; `corrupt_slot` flips one weight slot first.
pub fn run_example(corrupt_slot: Option<usize>) -> Result<Vec<Check>> {
    let tee = TeeService::with_seed(LheParams::new(8, 4)?, 1);
    tee.attest_and_provision("selftest");
    let ev = Evaluator::new(tee.public_key(), Arc::new(OpMeter::new()));
    let mut w = EXAMPLE_WEIGHTS;
    if let Some(s) = corrupt_slot {
        w[s % 8] = 1.0 - w[s % 8];
    }
    let x = ev.encrypt_slots(EXAMPLE_INPUT.to_vec())?;
    let w = ev.encrypt_slots(w.to_vec())?;
    let p = ev.mul(&x, &w)?;
    let a = ev.rot_add(&p, 2)?;
    let b = ev.rot_add(&a, 4)?;
    let vals = tee.decrypt_for("selftest", &[p, a, b])?;
    let names = ["product", "rotate-add 1", "rotate-add 2"];
    let mut checks: Vec<Check> = names
        .iter()
        .zip(EXAMPLE_STAGES)
        .zip(vals)
        .map(|((name, expected), actual)| Check { name, expected: expected.to_vec(), actual })
        .collect();

    let p = preset("example").expect("example preset");
    let big = TeeService::with_seed(LheParams::new(p.slots, p.levels)?, 1);
    let ev = Evaluator::new(big.public_key(), Arc::new(OpMeter::new()));
    let plan = NetworkPlan::basic(&p.cfg, ev.params())?;
    let images = vec![vec![1.0; p.cfg.image_len()]; 2];
    let x = encrypt_batch(&ev, &plan, &images)?;
    checks.push(Check {
        name: "input ciphertexts",
        expected: vec![16.0, 4.0],
        actual: vec![x.len() as f64, plan.geo.kernel_sides[0] as f64],
    });
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_passes_and_corruption_is_caught() {
        let t = std::time::Instant::now();
        let ok = run_example(None).unwrap();
        assert!(ok.iter().all(Check::passed), "{ok:?}");
        assert!(t.elapsed().as_secs_f64() < 1.0);
        let bad = run_example(Some(2)).unwrap();
        assert!(!bad[0].passed());
        assert_eq!(bad[0].diff(), vec![(2, 0.0, 28.0)]);
        assert!(bad[3].passed());
    }
}
