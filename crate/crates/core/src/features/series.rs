use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{MpgatError, Result};

/// Five-minute sampling gives 288 steps per day.
pub const STEPS_PER_DAY: usize = 288;
pub const STEP_MINUTES: i64 = 5;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Dense per-intersection counts on a regular five-minute grid, stored
/// time-major (`counts[t * n_nodes + node]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSeries {
    node_ids: Vec<String>,
    steps_per_day: usize,
    start: NaiveDateTime,
    counts: Vec<f64>,
}

pub fn parse_timestamp(text: &str) -> Result<NaiveDateTime> {
    let text = text.trim();
    for fmt in [TIMESTAMP_FORMAT, "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(text, fmt) {
            return Ok(ts);
        }
    }
    Err(MpgatError::Data(format!("unparseable timestamp {text:?}")))
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

impl RawSeries {
    pub fn new(
        node_ids: Vec<String>,
        steps_per_day: usize,
        start: NaiveDateTime,
        counts: Vec<f64>,
    ) -> Result<Self> {
        let n = node_ids.len();
        if n == 0 || steps_per_day == 0 {
            return Err(MpgatError::Data("series needs nodes and a positive daily period".into()));
        }
        if !counts.len().is_multiple_of(n) {
            return Err(MpgatError::Data(format!(
                "{} counts do not tile {n} nodes",
                counts.len()
            )));
        }
        if let Some(bad) = counts.iter().find(|c| !c.is_finite() || **c < 0.0) {
            return Err(MpgatError::Data(format!("count {bad} is negative or non-finite")));
        }
        Ok(Self {
            node_ids,
            steps_per_day,
            start,
            counts,
        })
    }

    /// Builds a series from per-node columns (`columns[node][t]`).
    pub fn from_columns(
        node_ids: Vec<String>,
        steps_per_day: usize,
        start: NaiveDateTime,
        columns: &[Vec<f64>],
    ) -> Result<Self> {
        let t_total = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != t_total) {
            return Err(MpgatError::Data("columns have different lengths".into()));
        }
        let mut counts = Vec::with_capacity(t_total * columns.len());
        for t in 0..t_total {
            counts.extend(columns.iter().map(|c| c[t]));
        }
        Self::new(node_ids, steps_per_day, start, counts)
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_steps(&self) -> usize {
        self.counts.len() / self.n_nodes()
    }

    pub fn steps_per_day(&self) -> usize {
        self.steps_per_day
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    #[inline]
    pub fn count(&self, t: usize, node: usize) -> f64 {
        self.counts[t * self.n_nodes() + node]
    }

    pub fn column(&self, node: usize) -> Vec<f64> {
        (0..self.n_steps()).map(|t| self.count(t, node)).collect()
    }

    pub fn timestamp(&self, t: usize) -> NaiveDateTime {
        self.start + Duration::minutes(STEP_MINUTES * t as i64)
    }

    /// Step index of `ts`, if it lies on the grid inside the series.
    pub fn index_of(&self, ts: NaiveDateTime) -> Option<usize> {
        let minutes = (ts - self.start).num_minutes();
        if minutes < 0 || minutes % STEP_MINUTES != 0 || (ts - self.start).num_seconds() % 60 != 0 {
            return None;
        }
        let t = (minutes / STEP_MINUTES) as usize;
        (t < self.n_steps()).then_some(t)
    }

    /// Writes the `timestamp,node_id,count` long format.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestamp", "node_id", "count"])?;
        for t in 0..self.n_steps() {
            let ts = format_timestamp(self.timestamp(t));
            for (n, id) in self.node_ids.iter().enumerate() {
                w.write_record([ts.as_str(), id.as_str(), &self.count(t, n).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn sort_node_ids(ids: BTreeSet<String>) -> Vec<String> {
    let mut ids: Vec<String> = ids.into_iter().collect();
    if ids.iter().all(|s| s.parse::<i64>().is_ok()) {
        ids.sort_by_key(|s| s.parse::<i64>().unwrap());
    }
    ids
}

/// Parses the `timestamp,node_id,count` format into a dense grid.
///
/// With `known_nodes`, rows for other node ids are rejected and the column
/// order follows `known_nodes`; otherwise nodes are ordered numerically
/// (or lexically when ids are not integers).
pub fn read_csv<R: Read>(input: R, known_nodes: Option<&[String]>) -> Result<RawSeries> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| MpgatError::Data(format!("CSV header lacks column {name:?}")))
    };
    let (c_ts, c_node, c_count) = (col("timestamp")?, col("node_id")?, col("count")?);

    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let ts = parse_timestamp(field(c_ts))?;
        let node = field(c_node).to_string();
        let count: f64 = field(c_count).parse().map_err(|_| {
            MpgatError::Data(format!("row {}: bad count {:?}", line + 2, field(c_count)))
        })?;
        if !count.is_finite() || count < 0.0 {
            return Err(MpgatError::Data(format!("row {}: count {count} must be >= 0", line + 2)));
        }
        rows.push((ts, node, count));
    }
    if rows.is_empty() {
        return Err(MpgatError::Data("CSV has no data rows".into()));
    }

    let node_ids: Vec<String> = match known_nodes {
        Some(ids) => ids.to_vec(),
        None => sort_node_ids(rows.iter().map(|r| r.1.clone()).collect()),
    };
    let node_index: HashMap<&str, usize> =
        node_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    let start = rows.iter().map(|r| r.0).min().unwrap();
    let end = rows.iter().map(|r| r.0).max().unwrap();
    let span = (end - start).num_seconds();
    if span % (STEP_MINUTES * 60) != 0 {
        return Err(MpgatError::Data("timestamps are not on a 5-minute grid".into()));
    }
    let t_total = (span / (STEP_MINUTES * 60)) as usize + 1;
    let n = node_ids.len();
    let mut grid: Vec<Option<f64>> = vec![None; t_total * n];
    for (ts, node, count) in &rows {
        let &ni = node_index
            .get(node.as_str())
            .ok_or_else(|| MpgatError::Data(format!("unknown node_id {node:?}")))?;
        let secs = (*ts - start).num_seconds();
        if secs % (STEP_MINUTES * 60) != 0 {
            return Err(MpgatError::Data(format!(
                "timestamp {} is off the 5-minute grid",
                format_timestamp(*ts)
            )));
        }
        let t = (secs / (STEP_MINUTES * 60)) as usize;
        let cell = &mut grid[t * n + ni];
        if cell.is_some() {
            return Err(MpgatError::Data(format!(
                "duplicate row for timestamp {} node {node}",
                format_timestamp(*ts)
            )));
        }
        *cell = Some(*count);
    }
    if let Some(missing) = grid.iter().position(Option::is_none) {
        let ts = start + Duration::minutes(STEP_MINUTES * (missing / n) as i64);
        return Err(MpgatError::Data(format!(
            "gap in the 5-minute grid: first missing timestamp {} (node {})",
            format_timestamp(ts),
            node_ids[missing % n]
        )));
    }
    RawSeries::new(node_ids, STEPS_PER_DAY, start, grid.into_iter().map(Option::unwrap).collect())
}

pub fn ingest_csv(path: impl AsRef<Path>, known_nodes: Option<&[String]>) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| MpgatError::Data(format!("{}: {e}", path.display())))?;
    read_csv(std::io::BufReader::new(file), known_nodes)
}
