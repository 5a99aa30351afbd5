//! Operation counting by scope, kind and level, plus a latency model.

mod cost;
mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use cost::{CostEntry, CostTable};
pub use report::{OpReport, ScopeRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Add,
    Mul,
    Rot,
    CMul,
    Encrypt,
    Decrypt,
    Reencrypt,
}

impl OpKind {
    /// The four evaluation primitives covered by the cost model.
    pub const EVAL: [OpKind; 4] = [OpKind::Add, OpKind::Mul, OpKind::Rot, OpKind::CMul];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Rot => "rot",
            OpKind::CMul => "cmul",
            OpKind::Encrypt => "encrypt",
            OpKind::Decrypt => "decrypt",
            OpKind::Reencrypt => "reencrypt",
        }
    }

    pub fn is_eval(self) -> bool {
        matches!(self, OpKind::Add | OpKind::Mul | OpKind::Rot | OpKind::CMul)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Counts of the four evaluation primitives.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpTuple {
    pub add: u64,
    pub mul: u64,
    pub rot: u64,
    pub cmul: u64,
}

impl OpTuple {
    pub const fn new(add: u64, mul: u64, rot: u64, cmul: u64) -> Self {
        OpTuple { add, mul, rot, cmul }
    }

    pub fn get(&self, op: OpKind) -> u64 {
        match op {
            OpKind::Add => self.add,
            OpKind::Mul => self.mul,
            OpKind::Rot => self.rot,
            OpKind::CMul => self.cmul,
            _ => 0,
        }
    }

    pub(crate) fn bump(&mut self, op: OpKind, by: u64) {
        match op {
            OpKind::Add => self.add += by,
            OpKind::Mul => self.mul += by,
            OpKind::Rot => self.rot += by,
            OpKind::CMul => self.cmul += by,
            _ => {}
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == OpTuple::default()
    }
}

impl std::ops::Add for OpTuple {
    type Output = OpTuple;
    fn add(self, o: OpTuple) -> OpTuple {
        OpTuple::new(self.add + o.add, self.mul + o.mul, self.rot + o.rot, self.cmul + o.cmul)
    }
}

impl std::ops::AddAssign for OpTuple {
    fn add_assign(&mut self, o: OpTuple) {
        *self = *self + o;
    }
}

impl fmt::Display for OpTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.add, self.mul, self.rot, self.cmul)
    }
}

#[derive(Debug, Default)]
struct MeterState {
    order: Vec<String>,
    counts: BTreeMap<(String, OpKind, u32), u64>,
}

/// Lock-guarded counter shared by every evaluator derived from it.
#[derive(Debug, Default)]
pub struct OpMeter {
    state: Mutex<MeterState>,
}

/// Immutable copy of a meter's counts with scopes in first-use order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MeterSnapshot {
    pub order: Vec<String>,
    pub counts: BTreeMap<(String, OpKind, u32), u64>,
}

impl OpMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, scope: &str, op: OpKind, level: u32) {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let key = (scope.to_string(), op, level);
        match st.counts.get_mut(&key) {
            Some(c) => *c += 1,
            None => {
                if !st.order.iter().any(|s| s == scope) {
                    st.order.push(scope.to_string());
                }
                st.counts.insert(key, 1);
            }
        }
    }

    pub fn snapshot(&self) -> MeterSnapshot {
        let st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        MeterSnapshot { order: st.order.clone(), counts: st.counts.clone() }
    }

    pub fn reset(&self) {
        *self.state.lock().unwrap_or_else(|e| e.into_inner()) = MeterState::default();
    }

    /// Total count of `op` across scopes and levels.
    pub fn total(&self, op: OpKind) -> u64 {
        self.snapshot().total(op)
    }
}

impl MeterSnapshot {
    pub fn total(&self, op: OpKind) -> u64 {
        self.counts.iter().filter(|((_, k, _), _)| *k == op).map(|(_, c)| c).sum()
    }

    pub fn scope_count(&self, scope: &str, op: OpKind) -> u64 {
        self.counts.iter().filter(|((s, k, _), _)| s == scope && *k == op).map(|(_, c)| c).sum()
    }

    pub fn scope_tuple(&self, scope: &str) -> OpTuple {
        let mut t = OpTuple::default();
        for ((s, k, _), c) in &self.counts {
            if s == scope {
                t.bump(*k, *c);
            }
        }
        t
    }

    /// Sum over scopes starting with `prefix`.
    pub fn prefix_tuple(&self, prefix: &str) -> OpTuple {
        let mut t = OpTuple::default();
        for ((s, k, _), c) in &self.counts {
            if s.starts_with(prefix) {
                t.bump(*k, *c);
            }
        }
        t
    }

    pub fn level_tuple(&self, level: u32) -> OpTuple {
        let mut t = OpTuple::default();
        for ((_, k, l), c) in &self.counts {
            if *l == level {
                t.bump(*k, *c);
            }
        }
        t
    }

    /// Counts accrued since `earlier`.
    pub fn since(&self, earlier: &MeterSnapshot) -> MeterSnapshot {
        let mut counts = BTreeMap::new();
        for (k, c) in &self.counts {
            let before = earlier.counts.get(k).copied().unwrap_or(0);
            if *c > before {
                counts.insert(k.clone(), c - before);
            }
        }
        let order = self.order.iter().filter(|s| counts.keys().any(|(x, _, _)| x == *s)).cloned().collect();
        MeterSnapshot { order, counts }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_in_first_use_order() {
        let m = OpMeter::new();
        m.record("b", OpKind::Add, 1);
        m.record("a", OpKind::Mul, 2);
        m.record("b", OpKind::Add, 1);
        let s = m.snapshot();
        assert_eq!(s.order, vec!["b", "a"]);
        assert_eq!(s.scope_tuple("b"), OpTuple::new(2, 0, 0, 0));
        assert_eq!(s.level_tuple(2), OpTuple::new(0, 1, 0, 0));
        assert_eq!(s.total(OpKind::Add), 2);
    }

    #[test]
    fn since_subtracts() {
        let m = OpMeter::new();
        m.record("x", OpKind::Rot, 3);
        let a = m.snapshot();
        m.record("x", OpKind::Rot, 3);
        m.record("y", OpKind::Add, 0);
        let d = m.snapshot().since(&a);
        assert_eq!(d.scope_tuple("x"), OpTuple::new(0, 0, 1, 0));
        assert_eq!(d.order, vec!["x", "y"]);
    }

    #[test]
    fn concurrent_increments_are_serialized() {
        use std::sync::Arc;
        let m = Arc::new(OpMeter::new());
        let hs: Vec<_> = (0..4)
            .map(|_| {
                let m = m.clone();
                std::thread::spawn(move || {
                    for _ in 0..1000 {
                        m.record("s", OpKind::Add, 1);
                    }
                })
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        assert_eq!(m.total(OpKind::Add), 4000);
    }
}
