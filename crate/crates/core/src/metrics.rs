//! KLD / SIM / NSS between a predicted affordance map and a ground-truth
//! heatmap.
//!
//! Both maps are bilinearly resized to 224x224 (see [`crate::imaging`] for
//! the exact convention) and min-max normalized. KLD and SIM then divide
//! each map by its sum. NSS binarizes the normalized GT at `> 0.1` and
//! averages the z-scored prediction over the positive cells.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::imaging::GrayMap;

pub const EVAL_SIZE: usize = 224;
pub const KLD_EPS: f64 = 1e-12;
pub const MINMAX_EPS: f64 = 1e-8;
pub const NSS_SIGMA_FLOOR: f64 = 1e-8;
pub const NSS_THRESHOLD: f64 = 0.1;

/// A map after resize and min-max normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub values: Vec<f64>,
    /// Input was constant; `values` is uniform.
    pub degenerate: bool,
}

/// Min-max normalizes in place semantics; a constant input becomes all ones.
pub fn minmax_uniform(values: &[f64]) -> Prepared {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    let range = hi - lo;
    if !(range >= MINMAX_EPS) {
        return Prepared {
            values: vec![1.0; values.len()],
            degenerate: true,
        };
    }
    Prepared {
        values: values.iter().map(|v| (v - lo) / range).collect(),
        degenerate: false,
    }
}

pub fn preprocess(map: &GrayMap) -> Result<Prepared> {
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            stage: "metric input".into(),
        });
    }
    let resized = map.resize(EVAL_SIZE, EVAL_SIZE);
    Ok(minmax_uniform(&resized.data))
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("metric inputs of length {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Divides by the sum; an all-zero map becomes uniform.
pub fn sum_normalize(values: &[f64]) -> Vec<f64> {
    let total: f64 = values.iter().sum();
    if total > 0.0 {
        values.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / values.len() as f64; values.len()]
    }
}

/// `sum g * ln((g + eps) / (p + eps))` over sum-normalized maps, with
/// `0 ln 0 = 0`. Smoothing both sides keeps KLD(P, P) exactly zero; it
/// differs from `g ln(g / (p + eps))` by at most `n * eps`.
pub fn kld(gt: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(gt, pred)?;
    let g = sum_normalize(gt);
    let p = sum_normalize(pred);
    Ok(g.iter()
        .zip(&p)
        .filter(|(g, _)| **g > 0.0)
        .map(|(g, p)| g * ((g + KLD_EPS) / (p + KLD_EPS)).ln())
        .sum())
}

/// Histogram intersection of the sum-normalized maps.
pub fn sim(gt: &[f64], pred: &[f64]) -> Result<f64> {
    check_len(gt, pred)?;
    let g = sum_normalize(gt);
    let p = sum_normalize(pred);
    Ok(g.iter().zip(&p).map(|(a, b)| a.min(*b)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NssValue {
    pub value: f64,
    /// Prediction had (near) zero variance; value forced to 0.
    pub degenerate: bool,
}

/// `gt` must already be min-max normalized.
pub fn nss(gt: &[f64], pred: &[f64]) -> Result<NssValue> {
    check_len(gt, pred)?;
    let n = pred.len() as f64;
    let positives: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] > NSS_THRESHOLD).collect();
    if positives.is_empty() {
        return Err(Error::validation("ground-truth mask is empty after thresholding"));
    }
    let mean = pred.iter().sum::<f64>() / n;
    let var = pred.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma < NSS_SIGMA_FLOOR {
        return Ok(NssValue {
            value: 0.0,
            degenerate: true,
        });
    }
    let total: f64 = positives.iter().map(|&i| (pred[i] - mean) / sigma).sum();
    Ok(NssValue {
        value: total / positives.len() as f64,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
    pub pred_degenerate: bool,
    pub nss_degenerate: bool,
}

/// Full pipeline for one (GT, prediction) pair of arbitrary sizes.
pub fn evaluate_pair(gt: &GrayMap, pred: &GrayMap) -> Result<PairMetrics> {
    let g = preprocess(gt)?;
    if g.degenerate && gt.data.iter().all(|v| *v <= 0.0) {
        return Err(Error::validation("ground-truth map has no positive values"));
    }
    let p = preprocess(pred)?;
    let n = nss(&g.values, &p.values)?;
    Ok(PairMetrics {
        kld: kld(&g.values, &p.values)?,
        sim: sim(&g.values, &p.values)?,
        nss: n.value,
        pred_degenerate: p.degenerate,
        nss_degenerate: n.degenerate,
    })
}

/// One evaluation item with grouping keys for the report.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub interaction: String,
    pub object: String,
    pub gt: GrayMap,
    pub pred: GrayMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub id: String,
    pub interaction: String,
    pub object: String,
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
    pub pred_degenerate: bool,
    pub nss_degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(rename = "mKLD")]
    pub m_kld: f64,
    #[serde(rename = "mSIM")]
    pub m_sim: f64,
    #[serde(rename = "mNSS")]
    pub m_nss: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<PairRow>,
    pub summary: Summary,
}

/// Per-pair metrics (computed in parallel) and their unweighted means.
pub fn evaluate_dataset(pairs: &[EvalPair]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::validation("no evaluation pairs"));
    }
    let rows = crate::par::try_map(pairs, |p| {
        let m = evaluate_pair(&p.gt, &p.pred).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("{}: {msg}", p.id)),
            other => other,
        })?;
        Ok(PairRow {
            id: p.id.clone(),
            interaction: p.interaction.clone(),
            object: p.object.clone(),
            kld: m.kld,
            sim: m.sim,
            nss: m.nss,
            pred_degenerate: m.pred_degenerate,
            nss_degenerate: m.nss_degenerate,
        })
    })?;
    let n = rows.len() as f64;
    let summary = Summary {
        m_kld: rows.iter().map(|r| r.kld).sum::<f64>() / n,
        m_sim: rows.iter().map(|r| r.sim).sum::<f64>() / n,
        m_nss: rows.iter().map(|r| r.nss).sum::<f64>() / n,
        count: rows.len(),
    };
    Ok(EvalReport { rows, summary })
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).at(path)?;
        for row in &self.rows {
            w.serialize(row).at(path)?;
        }
        w.flush().at(path)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary).at(path)?;
        fs::write(path, text).at(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_cell_hand_values() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kld(&p, &q).unwrap() - expected).abs() < 1e-12);
        assert!((kld(&p, &q).unwrap() - 0.14384).abs() < 1e-5);
        assert!((sim(&p, &q).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn identities_and_disjoint() {
        let p = [0.0, 0.2, 0.7, 1.0];
        assert_eq!(kld(&p, &p).unwrap(), 0.0);
        assert!((sim(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn nss_two_by_two() {
        // GT levels {1, 0.5, 0, 0}: cells 0 and 1 pass the 0.1 threshold.
        let gt = [1.0, 0.5, 0.0, 0.0];
        let mean = 0.375;
        let sigma = ((0.625f64.powi(2) + 0.125f64.powi(2) + 2.0 * 0.375f64.powi(2)) / 4.0).sqrt();
        let expected = ((1.0 - mean) / sigma + (0.5 - mean) / sigma) / 2.0;
        let got = nss(&gt, &gt).unwrap();
        assert!((got.value - expected).abs() < 1e-12);
        assert!(got.value > 0.0);
    }

    #[test]
    fn nss_errors_and_degenerate() {
        assert!(nss(&[0.0, 0.05], &[1.0, 2.0]).is_err());
        let v = nss(&[1.0, 0.0], &[3.0, 3.0]).unwrap();
        assert!(v.degenerate && v.value == 0.0);
    }

    #[test]
    fn preprocess_identity_size_and_range() {
        let data: Vec<f64> = (0..EVAL_SIZE * EVAL_SIZE).map(|i| (i % 17) as f64).collect();
        let m = GrayMap::new(EVAL_SIZE, EVAL_SIZE, data.clone()).unwrap();
        let p = preprocess(&m).unwrap();
        let expected: Vec<f64> = data.iter().map(|v| v / 16.0).collect();
        assert_eq!(p.values, expected);

        let small = GrayMap::new(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let p = preprocess(&small).unwrap();
        let lo = p.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (0.0, 1.0));
    }

    #[test]
    fn constant_prediction_is_uniform_and_flagged() {
        let gt = GrayMap::new(2, 1, vec![1.0, 0.0]).unwrap();
        let pred = GrayMap::new(2, 1, vec![0.3, 0.3]).unwrap();
        let m = evaluate_pair(&gt, &pred).unwrap();
        assert!(m.pred_degenerate && m.nss_degenerate);
        assert!(m.kld.is_finite() && m.sim > 0.0);
    }

    #[test]
    fn dataset_means_and_empty() {
        assert!(evaluate_dataset(&[]).is_err());
        let gt = GrayMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.5]).unwrap();
        let pred = GrayMap::new(2, 2, vec![0.8, 0.1, 0.2, 0.4]).unwrap();
        let pair = EvalPair {
            id: "a".into(),
            interaction: "hold".into(),
            object: "cup".into(),
            gt: gt.clone(),
            pred: pred.clone(),
        };
        let single = evaluate_pair(&gt, &pred).unwrap();
        let report = evaluate_dataset(&[pair]).unwrap();
        assert_eq!(report.summary.m_kld, single.kld);
        assert_eq!(report.summary.m_sim, single.sim);
        assert_eq!(report.summary.m_nss, single.nss);

        let dir = tempfile::tempdir().unwrap();
        report.write_json(&dir.path().join("s.json")).unwrap();
        report.write_csv(&dir.path().join("r.csv")).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
        for key in ["mKLD", "mSIM", "mNSS"] {
            assert!(json.get(key).is_some());
        }
    }
}
