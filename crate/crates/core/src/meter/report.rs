use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{CostTable, MeterSnapshot, OpKind, OpMeter, OpTuple};

#[derive(Debug, Clone, PartialEq)]
pub struct ScopeRow {
    pub scope: String,
    pub by_level: BTreeMap<u32, OpTuple>,
    pub totals: OpTuple,
    /// Encrypt, decrypt and re-encrypt counts.
    pub other: BTreeMap<OpKind, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub n_inputs: u64,
    pub scopes: Vec<ScopeRow>,
    pub by_level: BTreeMap<u32, OpTuple>,
    pub totals: OpTuple,
    pub other: BTreeMap<OpKind, u64>,
    /// Σ count × latency over entries present in the cost table.
    pub latency_us: f64,
    /// Recorded (op, level) pairs with no cost entry, and their counts.
    pub gaps: Vec<(OpKind, u32, u64)>,
    /// Cost entries used that were extrapolated rather than measured.
    pub extrapolated: Vec<(OpKind, u32)>,
}

impl OpMeter {
    pub fn report(&self, cost: &CostTable, n_inputs: u64) -> OpReport {
        OpReport::from_snapshot(&self.snapshot(), cost, n_inputs)
    }
}

impl OpReport {
    pub fn from_snapshot(snap: &MeterSnapshot, cost: &CostTable, n_inputs: u64) -> OpReport {
        let n_inputs = n_inputs.max(1);
        let mut scopes: Vec<ScopeRow> = snap
            .order
            .iter()
            .map(|s| ScopeRow { scope: s.clone(), by_level: BTreeMap::new(), totals: OpTuple::default(), other: BTreeMap::new() })
            .collect();
        let mut by_level: BTreeMap<u32, OpTuple> = BTreeMap::new();
        let mut totals = OpTuple::default();
        let mut other: BTreeMap<OpKind, u64> = BTreeMap::new();
        let mut per_op_level: BTreeMap<(OpKind, u32), u64> = BTreeMap::new();
        for ((scope, op, level), c) in &snap.counts {
            let row = scopes.iter_mut().find(|r| &r.scope == scope).expect("scope recorded in order");
            if op.is_eval() {
                row.by_level.entry(*level).or_default().bump(*op, *c);
                row.totals.bump(*op, *c);
                by_level.entry(*level).or_default().bump(*op, *c);
                totals.bump(*op, *c);
                *per_op_level.entry((*op, *level)).or_default() += c;
            } else {
                *row.other.entry(*op).or_default() += c;
                *other.entry(*op).or_default() += c;
            }
        }
        let mut latency_us = 0.0;
        let mut gaps = Vec::new();
        let mut extrapolated = Vec::new();
        for ((op, level), c) in per_op_level {
            match cost.get(op, level) {
                Some(e) => {
                    latency_us += e.latency_us * c as f64;
                    if e.extrapolated {
                        extrapolated.push((op, level));
                    }
                }
                None => gaps.push((op, level, c)),
            }
        }
        OpReport { n_inputs, scopes, by_level, totals, other, latency_us, gaps, extrapolated }
    }

    pub fn scope(&self, name: &str) -> Option<&ScopeRow> {
        self.scopes.iter().find(|r| r.scope == name)
    }

    pub fn scope_totals(&self, name: &str) -> OpTuple {
        self.scope(name).map(|r| r.totals).unwrap_or_default()
    }

    pub fn other_count(&self, scope: &str, op: OpKind) -> u64 {
        self.scope(scope).and_then(|r| r.other.get(&op).copied()).unwrap_or(0)
    }

    pub fn level(&self, level: u32) -> OpTuple {
        self.by_level.get(&level).copied().unwrap_or_default()
    }

    /// Totals divided by the number of simultaneously processed inputs.
    pub fn amortized(&self) -> [f64; 4] {
        let n = self.n_inputs as f64;
        let t = self.totals;
        [t.add as f64 / n, t.mul as f64 / n, t.rot as f64 / n, t.cmul as f64 / n]
    }

    pub fn amortized_latency_us(&self) -> f64 {
        self.latency_us / self.n_inputs as f64
    }

    /// CSV with columns scope, level, add, mul, rot, cmul. Rows with scope
    /// `total` hold the per-level sums.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,level,add,mul,rot,cmul\n");
        for row in &self.scopes {
            for (lvl, t) in &row.by_level {
                let _ = writeln!(out, "{},{},{},{},{},{}", row.scope, lvl, t.add, t.mul, t.rot, t.cmul);
            }
        }
        for (lvl, t) in self.by_level.iter().rev() {
            let _ = writeln!(out, "total,{},{},{},{},{}", lvl, t.add, t.mul, t.rot, t.cmul);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "stage              (add,mul,rot,cmul)   other");
        for row in &self.scopes {
            let other: Vec<String> = row.other.iter().map(|(k, c)| format!("{k}={c}")).collect();
            let _ = writeln!(out, "{:<18} {:<20} {}", row.scope, row.totals.to_string(), other.join(" "));
        }
        let _ = writeln!(out, "{:<18} {}", "total", self.totals);
        let a = self.amortized();
        let _ = writeln!(out, "{:<18} ({},{},{},{})", "amortized", a[0], a[1], a[2], a[3]);
        let _ = writeln!(out, "per level:");
        for (lvl, t) in self.by_level.iter().rev() {
            let _ = writeln!(out, "  level {:<3} {}", lvl, t);
        }
        let _ = writeln!(out, "estimated latency: {:.0} us total, {:.1} us per input", self.latency_us, self.amortized_latency_us());
        for (op, lvl) in &self.extrapolated {
            let _ = writeln!(out, "note: {op} cost at level {lvl} is extrapolated");
        }
        for (op, lvl, c) in &self.gaps {
            let _ = writeln!(out, "gap: no cost entry for {op} at level {lvl} ({c} ops not costed)");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_meter_reports_zero() {
        let r = OpMeter::new().report(&CostTable::reference(), 64);
        assert!(r.totals.is_zero());
        assert_eq!(r.latency_us, 0.0);
        assert!(r.gaps.is_empty() && r.scopes.is_empty());
        assert_eq!(r.amortized(), [0.0; 4]);
    }

    #[test]
    fn gaps_are_explicit() {
        let m = OpMeter::new();
        m.record("x", OpKind::Rot, 0);
        m.record("x", OpKind::Mul, 3);
        let r = m.report(&CostTable::reference(), 1);
        assert_eq!(r.gaps, vec![(OpKind::Rot, 0, 1)]);
        assert_eq!(r.latency_us, 10106.0);
        assert!(r.to_text().contains("gap: no cost entry for rot at level 0"));
    }

    #[test]
    fn conservation_and_csv() {
        let m = OpMeter::new();
        m.record("a", OpKind::Add, 2);
        m.record("a", OpKind::Mul, 3);
        m.record("b", OpKind::Mul, 2);
        m.record("b", OpKind::Encrypt, 5);
        let r = m.report(&CostTable::reference(), 2);
        let by_scope = r.scopes.iter().fold(OpTuple::default(), |acc, s| acc + s.totals);
        let by_level = r.by_level.values().fold(OpTuple::default(), |acc, t| acc + *t);
        assert_eq!(by_scope, r.totals);
        assert_eq!(by_level, r.totals);
        assert_eq!(r.other_count("b", OpKind::Encrypt), 1);
        let csv = r.to_csv();
        assert!(csv.starts_with("scope,level,add,mul,rot,cmul\n"));
        assert!(csv.contains("a,3,0,1,0,0\n"));
        assert!(csv.contains("total,2,1,1,0,0\n"));
        assert!(r.to_text().contains("amortized"));
    }
}
