use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column order of the metrics file.
pub const METRICS_COLUMNS: [&str; 17] = [
    "event_type",
    "iteration",
    "env_steps",
    "eval_return_mean",
    "eval_return_std",
    "obs_nll",
    "policy_prior_nll",
    "state_kl",
    "policy_kl",
    "epistemic_kl",
    "expected_reward",
    "value_loss",
    "grad_norm_theta",
    "grad_norm_phi",
    "grad_norm_psi",
    "grad_norm_omega",
    "wall_seconds",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventType {
    Update,
    Eval,
}

/// One metrics line. Columns that do not apply to an event stay empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub event_type: Option<EventType>,
    pub iteration: usize,
    pub env_steps: usize,
    pub eval_return_mean: Option<f64>,
    pub eval_return_std: Option<f64>,
    pub obs_nll: Option<f64>,
    pub policy_prior_nll: Option<f64>,
    pub state_kl: Option<f64>,
    pub policy_kl: Option<f64>,
    pub epistemic_kl: Option<f64>,
    pub expected_reward: Option<f64>,
    pub value_loss: Option<f64>,
    pub grad_norm_theta: Option<f64>,
    pub grad_norm_phi: Option<f64>,
    pub grad_norm_psi: Option<f64>,
    pub grad_norm_omega: Option<f64>,
    pub wall_seconds: Option<f64>,
}

impl MetricsRow {
    /// Checks that the filled columns match the event type.
    pub fn check(&self) -> std::result::Result<(), String> {
        let eval = [self.eval_return_mean, self.eval_return_std];
        let losses = [
            self.obs_nll,
            self.policy_prior_nll,
            self.state_kl,
            self.policy_kl,
        ];
        match self.event_type {
            None => Err("missing event_type".into()),
            Some(EventType::Eval) => {
                if eval.iter().any(Option::is_none) {
                    Err("eval row without return statistics".into())
                } else if losses.iter().any(Option::is_some) {
                    Err("eval row carries loss values".into())
                } else {
                    Ok(())
                }
            }
            Some(EventType::Update) => {
                if eval.iter().any(Option::is_some) {
                    Err("update row carries return statistics".into())
                } else if losses.iter().any(Option::is_none) {
                    Err("update row without model losses".into())
                } else {
                    Ok(())
                }
            }
        }
    }
}

pub struct MetricsWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(w: W) -> Result<Self> {
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        inner.write_record(METRICS_COLUMNS)?;
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row)?;
        Ok(())
    }

    pub fn into_inner(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }
}

/// Parses a metrics file, rejecting a wrong header, malformed rows, event
/// rows with the wrong columns filled and iteration counters that go back.
pub fn read_metrics<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_owned).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Format(format!(
            "metrics header {header:?} does not match the schema"
        )));
    }
    let mut rows = Vec::new();
    let mut last = 0;
    for (i, rec) in rd.deserialize::<MetricsRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| Error::Format(format!("metrics line {line}: {e}")))?;
        row.check()
            .map_err(|e| Error::Format(format!("metrics line {line}: {e}")))?;
        if row.iteration < last {
            return Err(Error::Format(format!(
                "metrics line {line}: iteration {} after {last}",
                row.iteration
            )));
        }
        last = row.iteration;
        rows.push(row);
    }
    Ok(rows)
}
