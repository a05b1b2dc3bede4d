//! Published single-model and ensemble reference figures.

use serde::{Deserialize, Serialize};

const TABLE1_CSV: &str = include_str!("../../data/table1.csv");
const TABLE2_CSV: &str = include_str!("../../data/table2.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    /// One-letter model code used to name ensembles.
    pub code: String,
    pub k: usize,
    pub h: usize,
    pub f32_mb: f64,
    pub f16_mb: f64,
    pub compression_rate: f64,
    pub best_avg_ckpt_gap: f64,
    pub best_single_ckpt_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    /// Concatenated member codes.
    pub ensemble: String,
    pub size_mb: f64,
    pub local_gap: f64,
    pub public_lb_gap: Option<f64>,
    pub private_lb_gap: Option<f64>,
}

fn rows(csv: &str) -> impl Iterator<Item = Vec<&str>> {
    csv.lines().skip(1).filter(|l| !l.trim().is_empty()).map(|l| l.split(',').map(str::trim).collect())
}

fn num(s: &str) -> f64 {
    s.parse().expect("fixture cell is numeric")
}

fn opt(s: &str) -> Option<f64> {
    (!s.is_empty()).then(|| num(s))
}

/// The 18 single models, largest first.
pub fn table1() -> Vec<Table1Row> {
    rows(TABLE1_CSV)
        .map(|c| Table1Row {
            code: c[0].to_owned(),
            k: c[1].parse().expect("fixture k"),
            h: c[2].parse().expect("fixture h"),
            f32_mb: num(c[3]),
            f16_mb: num(c[4]),
            compression_rate: num(c[5]),
            best_avg_ckpt_gap: num(c[6]),
            best_single_ckpt_gap: num(c[7]),
        })
        .collect()
}

pub fn table2() -> Vec<Table2Row> {
    rows(TABLE2_CSV)
        .map(|c| Table2Row {
            ensemble: c[0].to_owned(),
            size_mb: num(c[1]),
            local_gap: num(c[2]),
            public_lb_gap: opt(c[3]),
            private_lb_gap: opt(c[4]),
        })
        .collect()
}

impl Table2Row {
    /// Sum of the half-precision member sizes, or `None` when a member code
    /// has no single-model row.
    pub fn member_half_sum(&self, singles: &[Table1Row]) -> Option<f64> {
        self.ensemble
            .chars()
            .map(|c| singles.iter().find(|r| r.code.len() == 1 && r.code.starts_with(c)).map(|r| r.f16_mb))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_shapes() {
        let t1 = table1();
        assert_eq!(t1.len(), 18);
        assert_eq!((t1[0].code.as_str(), t1[0].k, t1[0].h, t1[0].f32_mb), ("Y", 24, 1440, 714.93));
        assert!(t1.windows(2).all(|w| w[0].f32_mb >= w[1].f32_mb));
        let t2 = table2();
        assert_eq!(t2.len(), 12);
        assert_eq!(t2[1].public_lb_gap, None);
    }

    #[test]
    fn yhls_sums_to_its_listed_size() {
        let t1 = table1();
        let yhls = table2().into_iter().find(|r| r.ensemble == "YHLS").unwrap();
        assert!((yhls.member_half_sum(&t1).unwrap() - 1019.71).abs() < 1e-9);
    }

    #[test]
    fn unknown_member_has_no_sum() {
        let gfab = table2().into_iter().find(|r| r.ensemble == "GFAB").unwrap();
        assert_eq!(gfab.member_half_sum(&table1()), None);
    }
}
