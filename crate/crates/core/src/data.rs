//! Traffic readings: in-memory series, CSV ingestion and export.

use std::fs;
use std::path::Path;

use crate::adjacency::{load_static_graph, parse_edge_list, AdjacencyMatrix};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Observations `[steps, N, C]` on a constant time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSeries {
    timestamps: Vec<i64>,
    values: Tensor<f64>,
    sensor_ids: Vec<String>,
}

impl TrafficSeries {
    pub fn new(timestamps: Vec<i64>, values: Tensor<f64>, sensor_ids: Vec<String>) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[0] != timestamps.len() || s[1] != sensor_ids.len() {
            return Err(Error::dim(
                "traffic_series",
                &[s, &[timestamps.len(), sensor_ids.len()]],
            ));
        }
        if let Some(step) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Input(format!(
                "timestamps must increase strictly (step {} -> {})",
                step,
                step + 1
            )));
        }
        if timestamps.len() > 2 {
            let dt = timestamps[1] - timestamps[0];
            if let Some(step) = timestamps.windows(2).position(|w| w[1] - w[0] != dt) {
                return Err(Error::Input(format!(
                    "timestamps must share one interval of {dt}s (step {} -> {})",
                    step,
                    step + 1
                )));
            }
        }
        if !values.is_finite() {
            return Err(Error::Input("readings must be finite".into()));
        }
        Ok(TrafficSeries { timestamps, values, sensor_ids })
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &Tensor<f64> {
        &self.values
    }

    pub fn sensor_ids(&self) -> &[String] {
        &self.sensor_ids
    }

    pub fn steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// Spacing of the time grid in seconds, if the series has two steps.
    pub fn interval(&self) -> Option<i64> {
        (self.timestamps.len() >= 2).then(|| self.timestamps[1] - self.timestamps[0])
    }

    /// Frame at `step` as a flat `[N * C]` slice.
    pub fn frame(&self, step: usize) -> &[f64] {
        let per = self.nodes() * self.channels();
        &self.values.data()[step * per..(step + 1) * per]
    }
}

/// Parses `timestamp,<id>...` CSV with one row per step and one channel.
pub fn parse_readings(text: &str, source: &str) -> Result<TrafficSeries> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::ingest(format!("{source}:1"), "empty readings file"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "timestamp" {
        return Err(Error::ingest(
            format!("{source}:1"),
            "header must be `timestamp,<sensor_id>...`",
        ));
    }
    let ids: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
    for (i, id) in ids.iter().enumerate() {
        if id.is_empty() {
            return Err(Error::ingest(format!("{source}:1"), format!("column {} has an empty sensor id", i + 2)));
        }
        if ids[..i].contains(id) {
            return Err(Error::ingest(format!("{source}:1"), format!("duplicate sensor id {id:?}")));
        }
    }
    let n = ids.len();
    let mut stamps = Vec::new();
    let mut values = Vec::new();
    for (idx, raw) in lines {
        let row = idx + 1;
        let cells: Vec<&str> = raw.split(',').map(str::trim).collect();
        if cells.len() != n + 1 {
            return Err(Error::ingest(
                format!("{source}:{row}"),
                format!("expected {} cells, found {}", n + 1, cells.len()),
            ));
        }
        let ts = cells[0]
            .parse::<i64>()
            .map_err(|_| Error::ingest(format!("{source}:{row}:1"), format!("bad timestamp {:?}", cells[0])))?;
        if let Some(&prev) = stamps.last() {
            if ts <= prev {
                return Err(Error::ingest(
                    format!("{source}:{row}:1"),
                    format!("timestamp {ts} does not follow {prev}"),
                ));
            }
        }
        stamps.push(ts);
        for (c, cell) in cells[1..].iter().enumerate() {
            let col = c + 2;
            if cell.is_empty() {
                return Err(Error::ingest(format!("{source}:{row}:{col}"), "missing value"));
            }
            let v = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::ingest(format!("{source}:{row}:{col}"), format!("bad value {cell:?}")))?;
            values.push(v);
        }
    }
    if stamps.is_empty() {
        return Err(Error::ingest(format!("{source}:2"), "no readings"));
    }
    let steps = stamps.len();
    let tensor = Tensor::new(vec![steps, n, 1], values)?;
    TrafficSeries::new(stamps, tensor, ids).map_err(|e| match e {
        Error::Input(msg) => Error::ingest(source.to_string(), msg),
        other => other,
    })
}

/// Writes the first channel of every sensor as `timestamp,<id>...` CSV.
pub fn format_readings(series: &TrafficSeries) -> String {
    let mut out = String::from("timestamp");
    for id in series.sensor_ids() {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    let c = series.channels();
    for (t, ts) in series.timestamps().iter().enumerate() {
        out.push_str(&ts.to_string());
        for v in series.frame(t).iter().step_by(c) {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn load_readings(path: &Path) -> Result<TrafficSeries> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display(), e))?;
    parse_readings(&text, &path.display().to_string())
}

pub fn write_readings(path: &Path, series: &TrafficSeries) -> Result<()> {
    fs::write(path, format_readings(series)).map_err(|e| Error::io(path.display(), e))
}

/// Readings plus the static road graph, cross-checked for node count.
pub fn load_dataset(readings: &Path, edges: &Path) -> Result<(TrafficSeries, AdjacencyMatrix<f64>)> {
    let series = load_readings(readings)?;
    let source = edges.display().to_string();
    let text = fs::read_to_string(edges).map_err(|e| Error::io(&source, e))?;
    let list = parse_edge_list(&text, &source)?;
    let graph = load_static_graph(&list, series.nodes()).map_err(|e| match e {
        Error::Ingestion { location, message } => Error::ingest(format!("{source}:{location}"), message),
        other => other,
    })?;
    Ok((series, graph))
}
