//! The `kw-plan/1` JSON plan document.
//!
//! Actions are stored one string per stage over the alphabet `C` (continue),
//! `A` (accept H0) and `R` (reject H0); row `n` has `n + 1` characters, one
//! per success count.

use kw_core::backward::Action;
use kw_core::evaluate::{self, asn, oc, quantile, stop_distribution};
use kw_core::solve::{SolveReport, SolveStatus};
use kw_core::{effective_horizon, Hypotheses, KwError, LagrangeConfig, Plan};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: &str = "kw-plan/1";

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("plan document is not valid JSON for {SCHEMA_VERSION}: {0}")]
    Json(#[from] serde_json::Error),

    #[error("plan document violates {SCHEMA_VERSION}: {}", .0.join("; "))]
    Schema(Vec<String>),

    #[error("plan document describes an invalid plan: {0}")]
    Plan(#[from] KwError),
}

/// Outcome of the solve that produced a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanStatus {
    Solved,
    ModifiedOnly,
    Nearest,
    /// Best iterate when the multiplier search hit its evaluation cap.
    NotConverged,
}

impl From<SolveStatus> for PlanStatus {
    fn from(status: SolveStatus) -> Self {
        match status {
            SolveStatus::Solved => PlanStatus::Solved,
            SolveStatus::ModifiedOnly => PlanStatus::ModifiedOnly,
            SolveStatus::Nearest => PlanStatus::Nearest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentCharacteristics {
    pub alpha: f64,
    pub beta: f64,
    pub asn_at_star: f64,
    pub q99: usize,
    pub delta: f64,
    pub lagrangian_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDocument {
    pub schema_version: String,
    pub hypotheses: Hypotheses,
    pub theta_star: f64,
    pub lambda0: f64,
    pub lambda1: f64,
    pub horizon: usize,
    pub effective_horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<PlanStatus>,
    pub actions: Vec<String>,
    pub characteristics: DocumentCharacteristics,
}

fn encode_rows(plan: &Plan) -> Vec<String> {
    (1..=plan.horizon())
        .map(|n| plan.row(n).iter().map(|a| a.code()).collect())
        .collect()
}

impl PlanDocument {
    pub fn from_report(report: &SolveReport, status: PlanStatus) -> Self {
        let plan = &report.plan;
        let cfg = plan.config();
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            hypotheses: *plan.hypotheses(),
            theta_star: cfg.theta_star,
            lambda0: cfg.lambda0,
            lambda1: cfg.lambda1,
            horizon: plan.horizon(),
            effective_horizon: report.effective_horizon,
            status: Some(status),
            actions: encode_rows(plan),
            characteristics: DocumentCharacteristics {
                alpha: report.alpha_achieved,
                beta: report.beta_achieved,
                asn_at_star: report.asn_at_star,
                q99: report.q99,
                delta: report.delta,
                lagrangian_value: plan.lagrangian_value(),
            },
        }
    }

    /// Document for an arbitrary plan, with its characteristics evaluated exactly.
    pub fn from_plan(plan: &Plan) -> Result<Self, KwError> {
        let cfg = plan.config();
        let hyp = plan.hypotheses();
        let star = cfg.theta_star;
        Ok(Self {
            schema_version: SCHEMA_VERSION.to_string(),
            hypotheses: *hyp,
            theta_star: star,
            lambda0: cfg.lambda0,
            lambda1: cfg.lambda1,
            horizon: plan.horizon(),
            effective_horizon: effective_horizon(plan),
            status: None,
            actions: encode_rows(plan),
            characteristics: DocumentCharacteristics {
                alpha: 1.0 - oc(plan, hyp.theta0())?,
                beta: oc(plan, hyp.theta1())?,
                asn_at_star: asn(plan, star)?,
                q99: quantile(&stop_distribution(plan, star)?, 0.99)?,
                delta: evaluate::delta(plan),
                lagrangian_value: plan.lagrangian_value(),
            },
        })
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("document fields are serializable");
        out.push('\n');
        out
    }

    /// Parse and validate a document; every schema violation found is reported.
    pub fn parse(text: &str) -> Result<Self, DocumentError> {
        let doc: PlanDocument = serde_json::from_str(text)?;
        let problems = doc.violations();
        if problems.is_empty() {
            Ok(doc)
        } else {
            Err(DocumentError::Schema(problems))
        }
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            out.push(format!(
                "schema_version: expected \"{SCHEMA_VERSION}\", found \"{}\"",
                self.schema_version
            ));
        }
        if self.horizon == 0 {
            out.push("horizon: must be at least 1".into());
        }
        if self.actions.len() != self.horizon {
            out.push(format!(
                "actions: expected {} rows (one per stage), found {}",
                self.horizon,
                self.actions.len()
            ));
        }
        for (i, row) in self.actions.iter().enumerate() {
            let n = i + 1;
            if row.chars().count() != n + 1 {
                out.push(format!(
                    "actions[{i}]: stage {n} needs {} characters, found {}",
                    n + 1,
                    row.chars().count()
                ));
            }
            if let Some((s, c)) = row
                .chars()
                .enumerate()
                .find(|(_, c)| Action::from_code(*c).is_none())
            {
                out.push(format!(
                    "actions[{i}]: invalid action '{c}' at s = {s}, expected C, A or R"
                ));
            }
        }
        if let Some(last) = self.actions.last() {
            if self.actions.len() == self.horizon && last.contains('C') {
                out.push(format!(
                    "actions[{}]: the horizon stage may not continue",
                    self.horizon - 1
                ));
            }
        }
        if self.effective_horizon == 0 || self.effective_horizon > self.horizon {
            out.push(format!(
                "effective_horizon: {} is outside 1..={}",
                self.effective_horizon, self.horizon
            ));
        }
        let ch = &self.characteristics;
        for (name, p) in [
            ("characteristics.alpha", ch.alpha),
            ("characteristics.beta", ch.beta),
        ] {
            if !(0.0..=1.0).contains(&p) {
                out.push(format!("{name}: {p} is not a probability"));
            }
        }
        if ch.q99 == 0 || ch.q99 > self.horizon {
            out.push(format!(
                "characteristics.q99: {} is outside 1..={}",
                ch.q99, self.horizon
            ));
        }
        if let Err(e) =
            LagrangeConfig::new(self.hypotheses, self.theta_star, self.lambda0, self.lambda1)
        {
            out.push(format!("theta_star/lambda0/lambda1: {e}"));
        }
        out
    }

    /// Rebuild the plan; its Lagrangian value is re-evaluated from the actions.
    pub fn to_plan(&self) -> Result<Plan, DocumentError> {
        let problems = self.violations();
        if !problems.is_empty() {
            return Err(DocumentError::Schema(problems));
        }
        let config =
            LagrangeConfig::new(self.hypotheses, self.theta_star, self.lambda0, self.lambda1)?;
        let rows = self
            .actions
            .iter()
            .map(|row| {
                row.chars()
                    .map(|c| Action::from_code(c).expect("validated"))
                    .collect()
            })
            .collect();
        Ok(Plan::from_rows(config, rows)?)
    }
}
