use std::collections::BTreeMap;

use super::OpKind;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEntry {
    pub latency_us: f64,
    pub extrapolated: bool,
}

/// Per-(op, level) latency in microseconds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostTable {
    entries: BTreeMap<(OpKind, u32), CostEntry>,
}

const ADD: [f64; 10] = [93., 127., 172., 209., 253., 298., 345., 397., 443., 498.];
const MUL: [f64; 10] = [6434., 10106., 14466., 19757., 25931., 33139., 39953., 49835., 57791., 68374.];
const ROT: [f64; 10] = [4542., 7311., 10719., 14995., 20057., 25916., 31722., 40167., 47144., 56366.];
const CMUL: [f64; 10] = [1645., 2467., 3273., 4137., 5018., 5935., 6741., 7942., 8731., 9895.];

impl CostTable {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Measured N=16384 latencies for levels 2..=11; level 1 is a linear
    /// extrapolation from levels 2 and 3.
    pub fn reference() -> Self {
        let mut t = CostTable::default();
        for (op, row) in [(OpKind::Add, ADD), (OpKind::Mul, MUL), (OpKind::Rot, ROT), (OpKind::CMul, CMUL)] {
            for (i, v) in row.iter().enumerate() {
                t.insert(op, i as u32 + 2, *v);
            }
            let lvl1 = 2.0 * row[0] - row[1];
            t.entries.insert((op, 1), CostEntry { latency_us: lvl1, extrapolated: true });
        }
        t
    }

    pub fn insert(&mut self, op: OpKind, level: u32, latency_us: f64) {
        assert!(latency_us > 0.0, "cost entries must be positive");
        self.entries.insert((op, level), CostEntry { latency_us, extrapolated: false });
    }

    pub fn get(&self, op: OpKind, level: u32) -> Option<CostEntry> {
        self.entries.get(&(op, level)).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_values() {
        let t = CostTable::reference();
        assert_eq!(t.get(OpKind::Mul, 2).unwrap().latency_us, 6434.0);
        assert_eq!(t.get(OpKind::Rot, 11).unwrap().latency_us, 56366.0);
        assert_eq!(t.get(OpKind::CMul, 6).unwrap().latency_us, 5018.0);
        let l1 = t.get(OpKind::Add, 1).unwrap();
        assert!(l1.extrapolated);
        assert_eq!(l1.latency_us, 59.0);
        assert!(t.get(OpKind::Mul, 12).is_none());
        assert!(t.get(OpKind::Rot, 0).is_none());
        for op in OpKind::EVAL {
            for lvl in 1..=11 {
                assert!(t.get(op, lvl).unwrap().latency_us > 0.0);
            }
        }
    }
}
