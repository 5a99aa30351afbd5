use crate::error::{Error, LheError, Result};
use crate::lhe::{Ciphertext, Evaluator, Plaintext};

/// Signed power-of-two steps that gather a pi-set into offset `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RotationPlan {
    pub p: usize,
    pub n: usize,
    /// R_i = −1 iff bit i of p is set.
    pub directions: Vec<i8>,
}

pub fn compute_rotation_plan(p: usize, n: usize) -> Result<RotationPlan> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Config(format!("n = {n} must be a power of two")));
    }
    if p >= n {
        return Err(Error::Config(format!("offset {p} out of range for n = {n}")));
    }
    let bits = n.trailing_zeros() as usize;
    let directions = (0..bits).map(|i| if (p >> i) & 1 == 1 { -1 } else { 1 }).collect();
    Ok(RotationPlan { p, n, directions })
}

impl RotationPlan {
    /// 2^k·R_k for k < log₂ n.
    pub fn aggregation_steps(&self) -> impl Iterator<Item = i64> + '_ {
        self.directions.iter().enumerate().map(|(k, &r)| (1i64 << k) * r as i64)
    }

    /// −2^t·R_t for t < log₂ n.
    pub fn spreading_steps(&self) -> impl Iterator<Item = i64> + '_ {
        self.aggregation_steps().map(|s| -s)
    }
}

/// After this, slot `b·n + p` holds the sum of block `b`.
pub fn aggregate(ev: &Evaluator, ct: &Ciphertext, plan: &RotationPlan) -> Result<Ciphertext, LheError> {
    let mut v = ct.clone();
    for step in plan.aggregation_steps() {
        v = ev.rot_add(&v, step)?;
    }
    Ok(v)
}

/// Copies the value at offset `p` of every block to the whole block. The
/// input must be zero away from offset `p`.
pub fn spread(ev: &Evaluator, ct: &Ciphertext, plan: &RotationPlan) -> Result<Ciphertext, LheError> {
    let mut v = ct.clone();
    for step in plan.spreading_steps() {
        v = ev.rot_add(&v, step)?;
    }
    Ok(v)
}

/// Sums all S/n blocks into every block, offsets n·2^j.
pub fn block_rotate_sum(ev: &Evaluator, ct: &Ciphertext, n: usize) -> Result<Ciphertext, LheError> {
    let blocks = ct.slot_count() / n;
    let mut v = ct.clone();
    let mut step = n;
    while step < n * blocks {
        v = ev.rot_add(&v, step as i64)?;
        step *= 2;
    }
    Ok(v)
}

/// Plaintext mask with value β at slots ≡ p (mod n).
#[derive(Debug, Clone, PartialEq)]
pub struct Selector {
    pub p: usize,
    pub n: usize,
    pub beta: f64,
    pub vector: Plaintext,
}

pub fn make_selector(p: usize, n: usize, slots: usize, beta: f64) -> Result<Selector> {
    make_selector_blocks(p, n, slots, beta, slots / n.max(1))
}

/// Like [`make_selector`] but only over the first `blocks` blocks.
pub fn make_selector_blocks(p: usize, n: usize, slots: usize, beta: f64, blocks: usize) -> Result<Selector> {
    if n == 0 || p >= n || n > slots {
        return Err(Error::Config(format!("selector offset {p} with n = {n}, S = {slots}")));
    }
    let mut v = vec![0.0; slots];
    for slot in (p..slots).step_by(n).take(blocks) {
        v[slot] = beta;
    }
    Ok(Selector { p, n, beta, vector: Plaintext::new(v) })
}
