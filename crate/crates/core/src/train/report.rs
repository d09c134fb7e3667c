use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::wilcoxon::{wilcoxon_rank_sum, SignificanceResult};
use crate::error::{MpgatError, Result};

/// Horizons (in 5-minute steps) reported for every run: 5, 15, 30 and 60
/// minutes.
pub const REPORT_HORIZONS: [usize; 4] = [1, 3, 6, 12];

pub fn horizon_minutes(h: usize) -> usize {
    h * crate::features::STEP_MINUTES as usize
}

/// MAPE per horizon, ordered by horizon; serialized as `{"h1": .., "h3": ..}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HorizonScores(pub Vec<(usize, f64)>);

impl HorizonScores {
    pub fn get(&self, horizon: usize) -> Option<f64> {
        self.0.iter().find(|(h, _)| *h == horizon).map(|(_, v)| *v)
    }

    pub fn horizons(&self) -> Vec<usize> {
        self.0.iter().map(|(h, _)| *h).collect()
    }
}

impl Serialize for HorizonScores {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (h, v) in &self.0 {
            map.serialize_entry(&format!("h{h}"), v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for HorizonScores {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(d)?;
        let mut out = raw
            .into_iter()
            .map(|(k, v)| {
                k.strip_prefix('h')
                    .and_then(|n| n.parse::<usize>().ok())
                    .map(|h| (h, v))
                    .ok_or_else(|| D::Error::custom(format!("bad horizon key {k:?}")))
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        out.sort_by_key(|(h, _)| *h);
        Ok(Self(out))
    }
}

/// One train+evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub mape: HorizonScores,
    pub epochs: usize,
    pub seconds: f64,
}

pub fn write_reports_jsonl<W: Write>(mut out: W, reports: &[RunReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_reports_jsonl<R: BufRead>(input: R) -> Result<Vec<RunReport>> {
    let mut reports = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        reports.push(serde_json::from_str(&line)?);
    }
    Ok(reports)
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4}±{std:.4}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub horizon: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn summarize(reports: &[RunReport]) -> Result<Vec<HorizonSummary>> {
    let horizons = common_horizons(reports)?;
    Ok(horizons
        .into_iter()
        .map(|h| {
            let values: Vec<f64> = reports.iter().map(|r| r.mape.get(h).unwrap()).collect();
            let (mean, std) = mean_std(&values);
            HorizonSummary { horizon: h, mean, std }
        })
        .collect())
}

fn common_horizons(reports: &[RunReport]) -> Result<Vec<usize>> {
    let first = reports
        .first()
        .ok_or_else(|| MpgatError::Data("no run reports".into()))?
        .mape
        .horizons();
    if reports.iter().any(|r| r.mape.horizons() != first) {
        return Err(MpgatError::Data("run reports cover different horizon sets".into()));
    }
    Ok(first)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonComparison {
    pub horizon: usize,
    pub a: HorizonSummary,
    pub b: HorizonSummary,
    pub test: SignificanceResult,
}

/// Per-horizon rank-sum comparison of two report sets; `h = +1` when `a`
/// is significantly better.
pub fn compare_reports(a: &[RunReport], b: &[RunReport], alpha: f64) -> Result<Vec<HorizonComparison>> {
    if a.len() < 2 || b.len() < 2 {
        return Err(MpgatError::Data("comparison needs at least two reports per side".into()));
    }
    let ha = common_horizons(a)?;
    if ha != common_horizons(b)? {
        return Err(MpgatError::Data("report sets cover different horizons".into()));
    }
    let (sa, sb) = (summarize(a)?, summarize(b)?);
    Ok(ha
        .iter()
        .zip(sa.into_iter().zip(sb))
        .map(|(&h, (sa, sb))| {
            let va: Vec<f64> = a.iter().map(|r| r.mape.get(h).unwrap()).collect();
            let vb: Vec<f64> = b.iter().map(|r| r.mape.get(h).unwrap()).collect();
            HorizonComparison {
                horizon: h,
                a: sa,
                b: sb,
                test: wilcoxon_rank_sum(&va, &vb, alpha),
            }
        })
        .collect())
}

/// Text table in the `mean±std | h` layout, one column pair per horizon.
pub fn comparison_table(rows: &[HorizonComparison], a_name: &str, b_name: &str) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<14}", "Models");
    for r in rows {
        let _ = write!(out, " | {:>15} {:>3}", format!("{}min", horizon_minutes(r.horizon)), "h");
    }
    out.push('\n');
    let _ = write!(out, "{:<14}", b_name);
    for r in rows {
        let _ = write!(out, " | {:>15} {:>3}", format_mean_std(r.b.mean, r.b.std), r.test.h);
    }
    out.push('\n');
    let _ = write!(out, "{:<14}", a_name);
    for r in rows {
        let _ = write!(out, " | {:>15} {:>3}", format_mean_std(r.a.mean, r.a.std), "");
    }
    out.push('\n');
    out
}

pub fn comparison_csv<W: Write>(out: W, rows: &[HorizonComparison]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "horizon_minutes",
        "a_mean",
        "a_std",
        "b_mean",
        "b_std",
        "a_mean_std",
        "b_mean_std",
        "p_value",
        "h",
    ])?;
    for r in rows {
        w.write_record([
            horizon_minutes(r.horizon).to_string(),
            r.a.mean.to_string(),
            r.a.std.to_string(),
            r.b.mean.to_string(),
            r.b.std.to_string(),
            format_mean_std(r.a.mean, r.a.std),
            format_mean_std(r.b.mean, r.b.std),
            r.test.p_value.to_string(),
            r.test.h.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
