use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{count_params, estimate_flops, ArchConfig};
use crate::adapters::AdapterSpec;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub trainable: usize,
    pub total: usize,
    pub params_percent: f64,
    pub base_macs: u64,
    pub extra_macs: u64,
    pub overhead_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodTable {
    pub arch: String,
    pub seq_len: usize,
    pub rows: Vec<MethodRow>,
}

/// One row per spec, sorted by params% ascending; equal percentages keep
/// input order.
pub fn compare_methods(arch: &ArchConfig, specs: &[AdapterSpec], seq_len: usize) -> Result<MethodTable> {
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let p = count_params(arch, spec)?;
        let f = estimate_flops(arch, spec, seq_len)?;
        rows.push(MethodRow {
            method: spec.method.to_string(),
            trainable: p.trainable,
            total: p.total,
            params_percent: p.percent,
            base_macs: f.base_macs,
            extra_macs: f.adapter_extra_macs,
            overhead_percent: 100.0 * f.relative_overhead,
        });
    }
    rows.sort_by(|a, b| a.params_percent.total_cmp(&b.params_percent));
    Ok(MethodTable {
        arch: arch.name.clone(),
        seq_len,
        rows,
    })
}

impl MethodTable {
    pub const CSV_HEADER: &'static str = "method,trainable,total,params_percent,base_macs,extra_macs,overhead_percent";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.method, r.trainable, r.total, r.params_percent, r.base_macs, r.extra_macs, r.overhead_percent
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::Method;
    use crate::analysis::builtin_config;

    #[test]
    fn single_spec_gives_single_row() {
        let arch = builtin_config("mamba-130m").unwrap();
        let t = compare_methods(&arch, &[AdapterSpec::default_for(Method::Bitfit)], 128).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.to_csv().lines().count(), 2);
    }

    #[test]
    fn csv_and_json_agree() {
        let arch = builtin_config("mamba-1.4b").unwrap();
        let specs: Vec<_> = Method::ALL.iter().map(|&m| AdapterSpec::default_for(m)).collect();
        let t = compare_methods(&arch, &specs, 64).unwrap();
        let back: MethodTable = serde_json::from_str(&t.to_json()).unwrap();
        for (line, row) in t.to_csv().lines().skip(1).zip(&back.rows) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[0], row.method);
            assert_eq!(cells[3].parse::<f64>().unwrap(), row.params_percent);
            assert_eq!(cells[5].parse::<u64>().unwrap(), row.extra_macs);
            assert_eq!(cells[6].parse::<f64>().unwrap(), row.overhead_percent);
        }
        assert!(t.rows.windows(2).all(|w| w[0].params_percent <= w[1].params_percent));
    }
}
