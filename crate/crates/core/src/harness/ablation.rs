//! Hyperparameter sweeps for the gradient attack.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::experiment::{
    run_experiment, AnswerMetric, ExperimentConfig, ExperimentError, Method, MethodSummary,
    ReportFormat, ResultSink,
};
use crate::attack::AtpConfig;
use crate::table::TqaExample;
use crate::victim::ToyVictim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Both entropy weights together.
    Lambda,
    Lambda1,
    Lambda2,
    NAttack,
    LearningRate,
}

impl SweepParam {
    fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
            SweepParam::NAttack => "n_attack",
            SweepParam::LearningRate => "learning_rate",
        }
    }

    fn apply(self, cfg: &AtpConfig, value: f64) -> AtpConfig {
        let mut cfg = cfg.clone();
        match self {
            SweepParam::Lambda => (cfg.lambda1, cfg.lambda2) = (value, value),
            SweepParam::Lambda1 => cfg.lambda1 = value,
            SweepParam::Lambda2 => cfg.lambda2 = value,
            SweepParam::NAttack => cfg.n_attack = value as usize,
            SweepParam::LearningRate => cfg.learning_rate = value,
        }
        cfg
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A parameter and the values it takes, written `name=v1,v2,...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, list) = s
            .split_once('=')
            .ok_or_else(|| format!("expected name=v1,v2,... in {s:?}"))?;
        let param = match name.trim() {
            "lambda" => SweepParam::Lambda,
            "lambda1" => SweepParam::Lambda1,
            "lambda2" => SweepParam::Lambda2,
            "n_attack" => SweepParam::NAttack,
            "learning_rate" | "lr" => SweepParam::LearningRate,
            other => return Err(format!("unknown sweep parameter {other:?}")),
        };
        let values = list
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| format!("bad value {v:?} for {name}"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let sweep = Sweep { param, values };
        sweep.validate()?;
        Ok(sweep)
    }
}

impl Sweep {
    pub fn validate(&self) -> Result<(), String> {
        if self.values.is_empty() {
            return Err(format!("empty grid for {}", self.param));
        }
        if self.param == SweepParam::NAttack
            && self.values.iter().any(|&v| v < 1.0 || v.fract() != 0.0)
        {
            return Err("n_attack values must be positive integers".into());
        }
        Ok(())
    }
}

/// Summary of one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub param: SweepParam,
    pub value: f64,
    pub summary: MethodSummary,
}

/// Run `method` once per grid value. Only gradient-attack methods respond
/// to the swept parameters.
pub fn run_ablation(
    victim: &ToyVictim,
    examples: &[TqaExample],
    method: Method,
    sweep: &Sweep,
    cfg: &ExperimentConfig,
    metric: &dyn AnswerMetric,
) -> Result<Vec<AblationRow>, ExperimentError> {
    sweep.validate().map_err(ExperimentError::Config)?;
    if !matches!(method, Method::Atp { .. }) {
        return Err(ExperimentError::Config(format!(
            "{method} has no attack hyperparameters to sweep"
        )));
    }
    sweep
        .values
        .iter()
        .map(|&value| {
            let cfg = ExperimentConfig {
                atp: sweep.param.apply(&cfg.atp, value),
                ..cfg.clone()
            };
            let report = run_experiment(
                victim,
                examples,
                &[method],
                &cfg,
                metric,
                ResultSink::memory(),
            )?;
            let summary = report.summaries.into_iter().next().expect("one method");
            Ok(AblationRow {
                param: sweep.param,
                value,
                summary,
            })
        })
        .collect()
}

pub fn render_ablation(rows: &[AblationRow], format: ReportFormat) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(rows).expect("rows serialize") + "\n",
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "param",
                "value",
                "method",
                "n",
                "n_failed",
                "mean_attacked_score",
                "mean_attacked_loss",
            ])
            .expect("in-memory write");
            for r in rows {
                let s = &r.summary;
                w.write_record([
                    r.param.to_string(),
                    r.value.to_string(),
                    s.method.to_string(),
                    s.n.to_string(),
                    s.n_failed.to_string(),
                    opt(s.mean_attacked_score),
                    opt(s.mean_attacked_loss),
                ])
                .expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
        }
        ReportFormat::Table => {
            let mut out = String::from("setting | attacked score | attacked loss\n");
            for r in rows {
                let s = &r.summary;
                let score = s
                    .mean_attacked_score
                    .map_or("-".into(), |v| format!("{v:.3}"));
                let loss = s
                    .mean_attacked_loss
                    .map_or("-".into(), |v| format!("{v:.3}"));
                out += &format!("{}={} | {score} | {loss}\n", r.param, r.value);
            }
            out
        }
    }
}
