//! CSV and JSON serialization of trajectories, events, extensions, gains
//! and closed-loop logs.
//!
//! Floating-point values in CSV files are written with 17 significant
//! digits; JSON numbers use the shortest representation that round-trips.
//! Either way, reading a file back reproduces the values bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hybrid::{HybridError, HybridSystem, Matrix, ModeId, TransitionId, Vector};
use crate::mpc::ClosedLoopLog;
use crate::simulator::{EventRecord, HybridTrajectory, Reference, ReferenceExtension};
use crate::solver::GainSchedule;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Hybrid(#[from] HybridError),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn state_header(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}{i}"))
}

/// Writes `t, mode, x0.., u0..`, one row per knot. The last knot has no
/// input of its own and repeats the last input.
pub fn write_trajectory_csv(path: &Path, traj: &HybridTrajectory) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let n = traj.states[0].len();
    let m = traj.inputs.first().map_or(0, |u| u.len());
    let header: Vec<String> = ["t".to_string(), "mode".to_string()]
        .into_iter()
        .chain(state_header("x", n))
        .chain(state_header("u", m))
        .collect();
    w.write_record(&header).map_err(csv_err(path))?;
    for k in 0..traj.states.len() {
        let mut row = vec![fmt_f64(traj.time(k)), traj.modes[k].0.to_string()];
        row.extend(traj.states[k].iter().map(|v| fmt_f64(*v)));
        if let Some(u) = traj.inputs.get(k).or(traj.inputs.last()) {
            row.extend(u.iter().map(|v| fmt_f64(*v)));
        }
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

/// Event entry of the sidecar JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventEntry {
    pub knot: usize,
    pub source: usize,
    pub target: usize,
    pub event_time: f64,
    pub x_pre: Vec<f64>,
    pub x_post: Vec<f64>,
    pub dt1: f64,
    pub dt2: f64,
}

pub fn event_entries(traj: &HybridTrajectory) -> Vec<EventEntry> {
    traj.events
        .iter()
        .map(|(k, e)| EventEntry {
            knot: *k,
            source: e.transition.source.0,
            target: e.transition.target.0,
            event_time: e.event_time,
            x_pre: e.x_pre.as_slice().to_vec(),
            x_post: e.x_post.as_slice().to_vec(),
            dt1: e.dt1,
            dt2: e.dt2,
        })
        .collect()
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let file = File::create(path).map_err(file_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })?;
    w.write_all(b"\n").map_err(file_err(path))?;
    w.flush().map_err(file_err(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = std::fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_events_json(path: &Path, traj: &HybridTrajectory) -> Result<(), IoError> {
    write_json(path, &event_entries(traj))
}

/// Reads a trajectory and its event sidecar. Saltation matrices are not
/// stored and are recomputed from `sys`. When `dt` is `None` it is inferred
/// from the time column.
pub fn read_trajectory(
    csv_path: &Path,
    events_path: &Path,
    sys: &HybridSystem,
    dt: Option<f64>,
) -> Result<HybridTrajectory, IoError> {
    let mut r = csv::Reader::from_path(csv_path).map_err(csv_err(csv_path))?;
    let header = r.headers().map_err(csv_err(csv_path))?.clone();
    let (n, m) = (sys.state_dim(), sys.input_dim());
    if header.len() != 2 + n + m {
        return Err(format_err(
            csv_path,
            format!(
                "expected {} columns (t, mode, {n} states, {m} inputs), found {}",
                2 + n + m,
                header.len()
            ),
        ));
    }
    let mut times = Vec::new();
    let mut modes = Vec::new();
    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(csv_err(csv_path))?;
        let parse = |i: usize| -> Result<f64, IoError> {
            record[i].trim().parse::<f64>().map_err(|e| {
                format_err(csv_path, format!("row {}, column {}: {e}", line + 2, i + 1))
            })
        };
        times.push(parse(0)?);
        let mode: usize = record[1]
            .trim()
            .parse()
            .map_err(|e| format_err(csv_path, format!("row {}, mode column: {e}", line + 2)))?;
        modes.push(ModeId(mode));
        states.push(Vector::from_iterator(
            n,
            (2..2 + n).map(parse).collect::<Result<Vec<_>, _>>()?,
        ));
        inputs.push(Vector::from_iterator(
            m,
            (2 + n..2 + n + m)
                .map(parse)
                .collect::<Result<Vec<_>, _>>()?,
        ));
    }
    if times.is_empty() {
        return Err(format_err(csv_path, "no rows"));
    }
    for mode in &modes {
        sys.mode(*mode)?;
    }
    inputs.pop();
    let knots = inputs.len();
    let dt = match dt {
        Some(dt) => dt,
        None if knots > 0 => (times[knots] - times[0]) / knots as f64,
        None => 1.0,
    };
    for (k, t) in times.iter().enumerate() {
        let expected = times[0] + k as f64 * dt;
        if (t - expected).abs() > 1e-9 * dt.max(1.0) {
            return Err(format_err(
                csv_path,
                format!("time column is not uniformly spaced at row {}", k + 2),
            ));
        }
    }

    let entries: Vec<EventEntry> = read_json(events_path)?;
    let mut events = Vec::with_capacity(entries.len());
    for e in entries {
        if e.knot >= knots {
            return Err(format_err(
                events_path,
                format!("event knot {} outside the trajectory", e.knot),
            ));
        }
        let tr = TransitionId::new(ModeId(e.source), ModeId(e.target));
        let x_pre = Vector::from_vec(e.x_pre);
        let x_post = Vector::from_vec(e.x_post);
        let saltation = sys
            .saltation_matrix(tr, e.event_time, &x_pre, &inputs[e.knot])?
            .matrix;
        events.push((
            e.knot,
            EventRecord {
                transition: tr,
                event_time: e.event_time,
                x_pre,
                x_post,
                dt1: e.dt1,
                dt2: e.dt2,
                saltation,
            },
        ));
    }
    events.sort_by_key(|(k, _)| *k);
    Ok(HybridTrajectory {
        t0: times[0],
        dt,
        states,
        modes,
        inputs,
        events,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtensionEntry {
    pub knot: usize,
    pub source: usize,
    pub target: usize,
    pub event_time: f64,
    pub horizon: usize,
    pub x_pre: Vec<f64>,
    pub x_post: Vec<f64>,
    pub pre_input: Vec<f64>,
    pub post_input: Vec<f64>,
    pub pre_states: Vec<Vec<f64>>,
    pub post_states: Vec<Vec<f64>>,
}

fn rows(vs: &[Vector]) -> Vec<Vec<f64>> {
    vs.iter().map(|v| v.as_slice().to_vec()).collect()
}

pub fn extension_entries(reference: &Reference) -> Vec<ExtensionEntry> {
    reference
        .extensions
        .iter()
        .map(|e| ExtensionEntry {
            knot: e.knot,
            source: e.transition.source.0,
            target: e.transition.target.0,
            event_time: e.event_time,
            horizon: e.horizon,
            x_pre: e.x_pre.as_slice().to_vec(),
            x_post: e.x_post.as_slice().to_vec(),
            pre_input: e.pre_input.as_slice().to_vec(),
            post_input: e.post_input.as_slice().to_vec(),
            pre_states: rows(&e.pre_states),
            post_states: rows(&e.post_states),
        })
        .collect()
}

pub fn extensions_from_entries(entries: Vec<ExtensionEntry>) -> Vec<ReferenceExtension> {
    let vecs = |rows: Vec<Vec<f64>>| rows.into_iter().map(Vector::from_vec).collect();
    entries
        .into_iter()
        .map(|e| ReferenceExtension {
            knot: e.knot,
            transition: TransitionId::new(ModeId(e.source), ModeId(e.target)),
            event_time: e.event_time,
            x_pre: Vector::from_vec(e.x_pre),
            x_post: Vector::from_vec(e.x_post),
            pre_input: Vector::from_vec(e.pre_input),
            post_input: Vector::from_vec(e.post_input),
            pre_states: vecs(e.pre_states),
            post_states: vecs(e.post_states),
            horizon: e.horizon,
        })
        .collect()
}

/// Gain schedule with feedback matrices stored row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsFile {
    pub feedforward: Vec<Vec<f64>>,
    pub feedback: Vec<Vec<Vec<f64>>>,
    pub dj_linear: f64,
    pub dj_quadratic: f64,
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl From<&GainSchedule> for GainsFile {
    fn from(g: &GainSchedule) -> Self {
        Self {
            feedforward: rows(&g.feedforward),
            feedback: g.feedback.iter().map(matrix_rows).collect(),
            dj_linear: g.dj_linear,
            dj_quadratic: g.dj_quadratic,
        }
    }
}

impl GainsFile {
    pub fn into_schedule(self) -> GainSchedule {
        GainSchedule {
            feedforward: self.feedforward.into_iter().map(Vector::from_vec).collect(),
            feedback: self
                .feedback
                .into_iter()
                .map(|rows| {
                    let r = rows.len();
                    let c = rows.first().map_or(0, |row| row.len());
                    Matrix::from_row_iterator(r, c, rows.into_iter().flatten())
                })
                .collect(),
            dj_linear: self.dj_linear,
            dj_quadratic: self.dj_quadratic,
        }
    }
}

/// Writes `t, mode, x0.., u0.., converged, iterations, expected_reduction`.
/// Solve times are left out so the file is reproducible.
pub fn write_closed_loop_csv(path: &Path, log: &ClosedLoopLog) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let Some(first) = log.steps.first() else {
        return w.flush().map_err(file_err(path));
    };
    let header: Vec<String> = ["t".to_string(), "mode".to_string()]
        .into_iter()
        .chain(state_header("x", first.x.len()))
        .chain(state_header("u", first.u.len()))
        .chain(["converged", "iterations", "expected_reduction"].map(String::from))
        .collect();
    w.write_record(&header).map_err(csv_err(path))?;
    for s in &log.steps {
        let mut row = vec![fmt_f64(s.t), s.mode.0.to_string()];
        row.extend(s.x.iter().map(|v| fmt_f64(*v)));
        row.extend(s.u.iter().map(|v| fmt_f64(*v)));
        row.push(s.converged.to_string());
        row.push(s.iterations.to_string());
        row.push(fmt_f64(s.expected_reduction));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -9.81e-300, 123456.789, f64::MAX, 5e-324] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn gains_round_trip() {
        let g = GainSchedule {
            feedforward: vec![Vector::from_vec(vec![0.25]), Vector::from_vec(vec![-1.5])],
            feedback: vec![
                Matrix::from_row_slice(1, 2, &[1.0, 2.0]),
                Matrix::from_row_slice(1, 2, &[3.0, 4.0]),
            ],
            dj_linear: -0.5,
            dj_quadratic: 0.25,
        };
        let file = GainsFile::from(&g);
        assert_eq!(file.feedback[1], vec![vec![3.0, 4.0]]);
        assert_eq!(file.into_schedule(), g);
    }
}
