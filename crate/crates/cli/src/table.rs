//! Comma-delimited tables and the record file format of the fitter.

use std::io::Write;

use clonesim::fit::{DataSet, ObservableKind, Record};
use clonesim::scenarios::{Arm, Experiment, SimulationResult};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Full-precision scientific notation (17 significant digits).
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// `start + k * grid` up to the horizon, merged with the observation times.
pub fn output_grid(result: &SimulationResult, grid: f64) -> Result<Vec<f64>, CliError> {
    if !(grid.is_finite() && grid > 0.0) {
        return Err(CliError::Config(format!("output grid must be > 0, got {grid}")));
    }
    let start = result.trajectory.t0();
    let end = result.horizon();
    let n = ((end - start) / grid + 1e-9).floor() as usize;
    let mut times: Vec<f64> = (0..=n).map(|k| start + k as f64 * grid).filter(|&t| t <= end).collect();
    times.extend(result.spec.observation_times.iter().copied().filter(|&t| t >= start));
    times.push(end);
    times.sort_by(f64::total_cmp);
    times.dedup();
    Ok(times)
}

pub fn write_trajectory<W: Write>(out: W, result: &SimulationResult, grid: f64) -> Result<(), CliError> {
    let k = result.spec.params.k;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time_h".to_string(), "antigen".to_string()];
    for c in &result.spec.cohorts {
        let l = &c.label;
        header.push(format!("{l}.N"));
        header.extend((1..=k).map(|i| format!("{l}.T{i}")));
        header.push(format!("{l}.D_N"));
        header.extend((1..k).map(|i| format!("{l}.D{i}")));
        header.push(format!("{l}.total"));
    }
    w.write_record(&header)?;
    for t in output_grid(result, grid)? {
        let state = result.state_at(t)?;
        let mut row = vec![num(t), num(state.antigen())];
        for c in 0..result.spec.cohorts.len() {
            row.push(num(state.naive(c)));
            row.extend(state.activated(c).iter().map(|&v| num(v)));
            row.push(num(state.naive_transit(c)));
            row.extend(state.transit(c).iter().map(|&v| num(v)));
            row.push(num(state.naive(c) + state.activated_total(c)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// One row of a data file. `value` is `log10(count)` for `log_count` rows and
/// a percentage otherwise; `division` is required for `profile` rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRow {
    pub experiment: String,
    pub arm: String,
    pub kind: String,
    pub division: Option<usize>,
    pub time_h: f64,
    pub value: f64,
    pub weight: Option<f64>,
}

impl DataRow {
    fn into_record(self, line: usize) -> Result<Record, CliError> {
        let bad = |msg: String| CliError::Data(format!("row {line}: {msg}"));
        let experiment: Experiment = self.experiment.parse().map_err(|e| bad(format!("{e}")))?;
        let arm = Arm::parse(experiment, &self.arm).map_err(|e| bad(format!("{e}")))?;
        let kind = match (self.kind.as_str(), self.division) {
            ("log_count", None) => ObservableKind::LogCount,
            ("recruitment", None) => ObservableKind::Recruitment,
            ("profile", Some(division)) => ObservableKind::Profile { division },
            ("profile", None) => return Err(bad("profile rows need a division".into())),
            ("log_count" | "recruitment", Some(_)) => return Err(bad("division is only used by profile rows".into())),
            (other, _) => return Err(bad(format!("unknown observable kind '{other}'"))),
        };
        Ok(Record { experiment, arm, kind, time: self.time_h, value: self.value, weight: self.weight.unwrap_or(1.0) })
    }

    fn from_record(r: &Record) -> Self {
        let (kind, division) = match r.kind {
            ObservableKind::LogCount => ("log_count", None),
            ObservableKind::Recruitment => ("recruitment", None),
            ObservableKind::Profile { division } => ("profile", Some(division)),
        };
        Self {
            experiment: r.experiment.tag().to_string(),
            arm: r.arm.to_string(),
            kind: kind.to_string(),
            division,
            time_h: r.time,
            value: r.value,
            weight: Some(r.weight),
        }
    }
}

pub fn read_data<R: std::io::Read>(input: R) -> Result<DataSet, CliError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(input);
    let mut records = Vec::new();
    for (i, row) in reader.deserialize::<DataRow>().enumerate() {
        records.push(row?.into_record(i + 2)?);
    }
    let data = DataSet::new(records);
    data.validate()?;
    Ok(data)
}

pub fn write_data<W: Write>(out: W, data: &DataSet) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DATA_HEADER.split(','))?;
    for r in &data.records {
        let row = DataRow::from_record(r);
        w.write_record([
            row.experiment,
            row.arm,
            row.kind,
            row.division.map(|d| d.to_string()).unwrap_or_default(),
            num(row.time_h),
            num(row.value),
            num(row.weight.unwrap_or(1.0)),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub const DATA_HEADER: &str = "experiment,arm,kind,division,time_h,value,weight";
