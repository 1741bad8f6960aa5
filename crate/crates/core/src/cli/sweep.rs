use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ctr::{train, TrainConfig};
use crate::error::Result;
use crate::textdata::Dataset;

pub const LAMBDAS: [f64; 3] = [0.05, 0.1, 0.3];
pub const CPE_CODES: [usize; 3] = [2, 4, 8];
pub const UPE_CODES: [usize; 3] = [16, 32, 48];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub cpe_codes: usize,
    pub upe_codes: usize,
    pub best_epoch: usize,
    pub dev_auc: Option<f64>,
    pub dev_mrr: Option<f64>,
    pub dev_ndcg5: Option<f64>,
    pub dev_ndcg10: Option<f64>,
    pub seconds: f64,
}

pub const TABLE_HEADER: &str = "lambda\tn\tm\tbest_epoch\tdev_auc\tdev_mrr\tdev_ndcg5\tdev_ndcg10\tseconds";

impl SweepRow {
    pub fn tsv(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.1}",
            self.lambda,
            self.cpe_codes,
            self.upe_codes,
            self.best_epoch,
            f(self.dev_auc),
            f(self.dev_mrr),
            f(self.dev_ndcg5),
            f(self.dev_ndcg10),
            self.seconds
        )
    }
}

/// Every (λ, n, m) grid point in λ-major order.
pub fn grid() -> Vec<(f64, usize, usize)> {
    let mut out = Vec::with_capacity(27);
    for &l in &LAMBDAS {
        for &n in &CPE_CODES {
            for &m in &UPE_CODES {
                out.push((l, n, m));
            }
        }
    }
    out
}

/// Trains one model per grid point and reports its best-epoch dev metrics.
/// `on_row` sees each row as soon as it is done.
pub fn run_sweep(data: &Dataset, base: &TrainConfig, points: &[(f64, usize, usize)], mut on_row: impl FnMut(&SweepRow) -> Result<()>) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(points.len());
    for &(lambda, n, m) in points {
        let mut cfg = base.clone();
        cfg.lambda = lambda;
        cfg.model.cpe_codes = n;
        cfg.model.upe_codes = m;
        let start = Instant::now();
        let out = train(data, &cfg, None, None)?;
        let best = &out.log[out.best_epoch - 1];
        let row = SweepRow {
            lambda,
            cpe_codes: n,
            upe_codes: m,
            best_epoch: out.best_epoch,
            dev_auc: best.dev_auc,
            dev_mrr: best.dev_mrr,
            dev_ndcg5: best.dev_ndcg5,
            dev_ndcg10: best.dev_ndcg10,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("sweep {}", row.tsv());
        on_row(&row)?;
        rows.push(row);
    }
    Ok(rows)
}
