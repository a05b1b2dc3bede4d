//! Discrete search for the accounting flags that best explain a table of
//! published model sizes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{enumerate_tensors, AccountingFlags, SizeModelConfig, Table1Row};
use crate::error::{Error, Result};

const AUDIO_RATIOS: [f64; 3] = [1.0, 0.5, 0.25];
const EXPERT_WIDTHS: [usize; 4] = [0, 16, 64, 256];

/// The search grid in enumeration order; earlier entries win ties.
pub fn candidate_flags() -> Vec<AccountingFlags> {
    let mut out = Vec::new();
    for ratio in AUDIO_RATIOS {
        for dummy in [true, false] {
            for gate in [true, false] {
                for width in EXPERT_WIDTHS {
                    out.push(AccountingFlags {
                        audio_cluster_ratio: ratio,
                        use_dummy_expert: dummy,
                        include_hidden_gate: gate,
                        expert_hidden_width: width,
                        count_biases: true,
                        count_bn_stats: true,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub code: String,
    pub k: usize,
    pub h: usize,
    pub target_f32_mb: f64,
    pub predicted_f32_mb: f64,
    /// `|predicted - target| / target` on the single precision size.
    pub relative_error: f64,
    pub target_f16_mb: f64,
    pub predicted_f16_mb: f64,
    pub predicted_rate: f64,
    pub big4_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub flags: AccountingFlags,
    /// Mean absolute relative error of the chosen flags.
    pub mare: f64,
    pub rows: Vec<CalibrationRow>,
    /// MARE of every candidate, in enumeration order.
    pub candidates: Vec<(AccountingFlags, f64)>,
}

impl Calibration {
    pub fn mean_predicted_rate(&self) -> f64 {
        self.rows.iter().map(|r| r.predicted_rate).sum::<f64>() / self.rows.len() as f64
    }
}

fn evaluate(flags: AccountingFlags, table: &[Table1Row]) -> Vec<CalibrationRow> {
    table
        .iter()
        .map(|row| {
            let report = enumerate_tensors(&SizeModelConfig::paper_scale(row.k, row.h, flags));
            CalibrationRow {
                code: row.code.clone(),
                k: row.k,
                h: row.h,
                target_f32_mb: row.f32_mb,
                predicted_f32_mb: report.total_mb,
                relative_error: (report.total_mb - row.f32_mb).abs() / row.f32_mb,
                target_f16_mb: row.f16_mb,
                predicted_f16_mb: report.half_compressed_mb(),
                predicted_rate: report.half_compression_rate(),
                big4_share: report.big4_share,
            }
        })
        .collect()
}

fn mare(rows: &[CalibrationRow]) -> f64 {
    rows.iter().map(|r| r.relative_error).sum::<f64>() / rows.len() as f64
}

/// Picks the candidate with the lowest mean absolute relative error on the
/// single precision sizes.
pub fn calibrate_size_model(table: &[Table1Row]) -> Result<Calibration> {
    if table.is_empty() {
        return Err(Error::Input("calibration table is empty".into()));
    }
    let grid = candidate_flags();
    let scores: Vec<f64> = grid.par_iter().map(|&f| mare(&evaluate(f, table))).collect();
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    let flags = grid[best];
    Ok(Calibration {
        flags,
        mare: scores[best],
        rows: evaluate(flags, table),
        candidates: grid.into_iter().zip(scores).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sizing::table1;

    fn synthetic(flags: AccountingFlags) -> Vec<Table1Row> {
        [(24, 1440), (100, 800), (16, 512), (48, 1024), (8, 256)]
            .into_iter()
            .map(|(k, h)| {
                let r = enumerate_tensors(&SizeModelConfig::paper_scale(k, h, flags));
                Table1Row {
                    code: format!("K{k}H{h}"),
                    k,
                    h,
                    f32_mb: r.total_mb,
                    f16_mb: r.half_compressed_mb(),
                    compression_rate: r.half_compression_rate(),
                    best_avg_ckpt_gap: 0.0,
                    best_single_ckpt_gap: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn grid_size_and_order() {
        let g = candidate_flags();
        assert_eq!(g.len(), 48);
        assert_eq!(g[0], AccountingFlags { audio_cluster_ratio: 1.0, ..AccountingFlags::default() });
    }

    #[test]
    fn recovers_generating_flags() {
        for flags in candidate_flags().into_iter().step_by(5) {
            let c = calibrate_size_model(&synthetic(flags)).unwrap();
            assert_eq!(c.flags, flags);
            assert_eq!(c.mare, 0.0);
        }
    }

    #[test]
    fn single_row_and_empty_table() {
        let t = table1();
        let c = calibrate_size_model(&t[..1]).unwrap();
        assert_eq!(c.rows.len(), 1);
        assert_eq!(c.mare, c.rows[0].relative_error);
        assert!(calibrate_size_model(&[]).is_err());
    }
}
