//! Flat per-tick and per-stride records with CSV import/export.
//!
//! Tick logs hold one row per control cycle; stride logs hold one row per
//! completed stride. Both formats carry a version line and echo the
//! resolved configuration as comment lines above a mandatory header row,
//! and both round-trip through their parsers.

use std::fmt::Write as _;

use thiserror::Error;

use crate::model::{JointVec, StateVec, N_JOINTS, N_STATE};

pub const TICK_FORMAT: &str = "# tick-log format 1";
pub const METRICS_FORMAT: &str = "# stride-metrics format 1";

pub const TICK_HEADER: &str = "time,q_x,q_z,q_thigh_f,q_calf_f,q_thigh_r,q_calf_r,\
qd_x,qd_z,qd_thigh_f,qd_calf_f,qd_thigh_r,qd_calf_r,s,mode,\
e_thigh_f,e_calf_f,e_thigh_r,e_calf_r,ed_thigh_f,ed_calf_f,ed_thigh_r,ed_calf_r,\
tau_b_thigh_f,tau_b_calf_f,tau_b_thigh_r,tau_b_calf_r,\
tau_f_thigh_f,tau_f_calf_f,tau_f_thigh_r,tau_f_calf_r,\
tau_thigh_f,tau_calf_f,tau_thigh_r,tau_calf_r,\
lam_t_front,lam_t_rear,lam_n_front,lam_n_rear,sat_flags";

pub const METRICS_HEADER: &str = "stride,speed_cmd,avg_speed,apex_height,stance_ticks,\
max_e_thigh_f,max_e_calf_f,max_e_thigh_r,max_e_calf_r,\
rms_e_thigh_f,rms_e_calf_f,rms_e_thigh_r,rms_e_calf_r,\
ff_delta,learning_active";

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing {0} line")]
    MissingHeader(&'static str),
}

/// Contact mode of a control tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickMode {
    Flight,
    Stance,
}

impl TickMode {
    pub fn name(self) -> &'static str {
        match self {
            TickMode::Flight => "flight",
            TickMode::Stance => "stance",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "flight" => Some(TickMode::Flight),
            "stance" => Some(TickMode::Stance),
            _ => None,
        }
    }
}

/// One control cycle of a run, flattened for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub time: f64,
    pub q: StateVec,
    pub qd: StateVec,
    pub s: f64,
    pub mode: TickMode,
    pub error: JointVec,
    pub error_rate: JointVec,
    pub tau_feedback: JointVec,
    pub tau_feedforward: JointVec,
    pub tau_total: JointVec,
    /// Tangential ground force per leg (front, rear); zero out of contact.
    pub lam_t: [f64; 2],
    /// Normal ground force per leg (front, rear); zero out of contact.
    pub lam_n: [f64; 2],
    /// Bit `j` set when joint `j` hit its torque limit.
    pub sat_flags: u8,
}

impl TickRecord {
    pub fn csv_row(&self) -> String {
        let mut row = String::with_capacity(512);
        let mut push = |v: f64| {
            let _ = write!(row, "{v:.9e},");
        };
        push(self.time);
        for i in 0..N_STATE {
            push(self.q[i]);
        }
        for i in 0..N_STATE {
            push(self.qd[i]);
        }
        push(self.s);
        let _ = write!(row, "{},", self.mode.name());
        for vec in [&self.error, &self.error_rate, &self.tau_feedback, &self.tau_feedforward, &self.tau_total]
        {
            for i in 0..N_JOINTS {
                let _ = write!(row, "{:.9e},", vec[i]);
            }
        }
        let _ = write!(
            row,
            "{:.9e},{:.9e},{:.9e},{:.9e},{}",
            self.lam_t[0], self.lam_t[1], self.lam_n[0], self.lam_n[1], self.sat_flags
        );
        row
    }

    pub fn from_csv_row(line: &str, line_no: usize) -> Result<Self, LogError> {
        let fields: Vec<&str> = line.split(',').collect();
        let expected = TICK_HEADER.split(',').count();
        if fields.len() != expected {
            return Err(LogError::Parse {
                line: line_no,
                message: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        let mut idx = 0usize;
        let mut next_f64 = |name: &str| -> Result<f64, LogError> {
            let raw = fields[idx];
            idx += 1;
            raw.parse().map_err(|_| LogError::Parse {
                line: line_no,
                message: format!("bad value {raw:?} for {name}"),
            })
        };
        let time = next_f64("time")?;
        let mut q = StateVec::zeros();
        for i in 0..N_STATE {
            q[i] = next_f64("q")?;
        }
        let mut qd = StateVec::zeros();
        for i in 0..N_STATE {
            qd[i] = next_f64("qd")?;
        }
        let s = next_f64("s")?;
        let mode_raw = fields[idx];
        idx += 1;
        let mode = TickMode::parse(mode_raw).ok_or(LogError::Parse {
            line: line_no,
            message: format!("bad mode {mode_raw:?}"),
        })?;
        let mut next_f64 = |name: &str| -> Result<f64, LogError> {
            let raw = fields[idx];
            idx += 1;
            raw.parse().map_err(|_| LogError::Parse {
                line: line_no,
                message: format!("bad value {raw:?} for {name}"),
            })
        };
        let mut joints = |name: &'static str| -> Result<JointVec, LogError> {
            let mut v = JointVec::zeros();
            for i in 0..N_JOINTS {
                v[i] = next_f64(name)?;
            }
            Ok(v)
        };
        let error = joints("error")?;
        let error_rate = joints("error_rate")?;
        let tau_feedback = joints("tau_feedback")?;
        let tau_feedforward = joints("tau_feedforward")?;
        let tau_total = joints("tau_total")?;
        let lam_t = [next_f64("lam_t")?, next_f64("lam_t")?];
        let lam_n = [next_f64("lam_n")?, next_f64("lam_n")?];
        let sat_raw = fields[idx];
        let sat_flags: u8 = sat_raw.parse().map_err(|_| LogError::Parse {
            line: line_no,
            message: format!("bad saturation flags {sat_raw:?}"),
        })?;
        Ok(Self {
            time,
            q,
            qd,
            s,
            mode,
            error,
            error_rate,
            tau_feedback,
            tau_feedforward,
            tau_total,
            lam_t,
            lam_n,
            sat_flags,
        })
    }
}

/// Aggregates of one completed stride.
#[derive(Debug, Clone, PartialEq)]
pub struct StrideMetrics {
    pub stride: usize,
    pub speed_cmd: f64,
    /// Mean horizontal base speed over the stride.
    pub avg_speed: f64,
    /// Highest base height reached during the stride.
    pub apex_height: f64,
    pub stance_ticks: usize,
    /// Per-joint peak |tracking error| over stance.
    pub max_error: JointVec,
    /// Per-joint RMS tracking error over stance.
    pub rms_error: JointVec,
    /// Sup-norm change of the feedforward profile produced at stride end.
    pub ff_delta: f64,
    pub learning_active: bool,
}

impl StrideMetrics {
    pub fn csv_row(&self) -> String {
        let mut row = String::with_capacity(256);
        let _ = write!(
            row,
            "{},{:.17e},{:.17e},{:.17e},{},",
            self.stride, self.speed_cmd, self.avg_speed, self.apex_height, self.stance_ticks
        );
        for vec in [&self.max_error, &self.rms_error] {
            for i in 0..N_JOINTS {
                let _ = write!(row, "{:.17e},", vec[i]);
            }
        }
        let _ = write!(row, "{:.17e},{}", self.ff_delta, u8::from(self.learning_active));
        row
    }

    pub fn from_csv_row(line: &str, line_no: usize) -> Result<Self, LogError> {
        let fields: Vec<&str> = line.split(',').collect();
        let expected = METRICS_HEADER.split(',').count();
        if fields.len() != expected {
            return Err(LogError::Parse {
                line: line_no,
                message: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        let parse_f64 = |raw: &str, name: &str| -> Result<f64, LogError> {
            raw.parse().map_err(|_| LogError::Parse {
                line: line_no,
                message: format!("bad value {raw:?} for {name}"),
            })
        };
        let stride: usize = fields[0].parse().map_err(|_| LogError::Parse {
            line: line_no,
            message: format!("bad stride index {:?}", fields[0]),
        })?;
        let stance_ticks: usize = fields[4].parse().map_err(|_| LogError::Parse {
            line: line_no,
            message: format!("bad stance tick count {:?}", fields[4]),
        })?;
        let mut max_error = JointVec::zeros();
        let mut rms_error = JointVec::zeros();
        for i in 0..N_JOINTS {
            max_error[i] = parse_f64(fields[5 + i], "max_error")?;
            rms_error[i] = parse_f64(fields[9 + i], "rms_error")?;
        }
        let learning_active = match fields[14] {
            "0" => false,
            "1" => true,
            other => {
                return Err(LogError::Parse {
                    line: line_no,
                    message: format!("bad learning flag {other:?}"),
                })
            }
        };
        Ok(Self {
            stride,
            speed_cmd: parse_f64(fields[1], "speed_cmd")?,
            avg_speed: parse_f64(fields[2], "avg_speed")?,
            apex_height: parse_f64(fields[3], "apex_height")?,
            stance_ticks,
            max_error,
            rms_error,
            ff_delta: parse_f64(fields[13], "ff_delta")?,
            learning_active,
        })
    }
}

/// Assemble a tick log: version line, config echo comments, header, rows.
pub fn render_tick_csv(records: &[TickRecord], config_echo: &[String]) -> String {
    let mut out = String::new();
    out.push_str(TICK_FORMAT);
    out.push('\n');
    for line in config_echo {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(TICK_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Assemble a stride-metrics log in the same layout as the tick log.
pub fn render_metrics_csv(metrics: &[StrideMetrics], config_echo: &[String]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_FORMAT);
    out.push('\n');
    for line in config_echo {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

fn parse_csv_body<T>(
    text: &str,
    format_line: &'static str,
    header: &'static str,
    parse_row: impl Fn(&str, usize) -> Result<T, LogError>,
) -> Result<Vec<T>, LogError> {
    let mut saw_format = false;
    let mut saw_header = false;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if line.trim() == format_line.trim() {
                saw_format = true;
            }
            continue;
        }
        if !saw_header {
            if line.trim() != header {
                return Err(LogError::Parse {
                    line: line_no,
                    message: "first data line must be the column header".into(),
                });
            }
            saw_header = true;
            continue;
        }
        rows.push(parse_row(line, line_no)?);
    }
    if !saw_format {
        return Err(LogError::MissingHeader("format version"));
    }
    if !saw_header {
        return Err(LogError::MissingHeader("column header"));
    }
    Ok(rows)
}

pub fn parse_tick_csv(text: &str) -> Result<Vec<TickRecord>, LogError> {
    parse_csv_body(text, TICK_FORMAT, TICK_HEADER, TickRecord::from_csv_row)
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<StrideMetrics>, LogError> {
    parse_csv_body(text, METRICS_FORMAT, METRICS_HEADER, StrideMetrics::from_csv_row)
}
