use inloop::meta::verify::{verify_unbiasedness, VerifyProblem, VerifyReport};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::output::write_json;

/// Runs the enumeration check on the tiny problem (or its no-effect
/// variant) and writes `report.json`.
pub fn run_verify(cfg: &ExperimentConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let mut problem = if cfg.no_effect {
        VerifyProblem::no_effect(cfg.seed)?
    } else {
        VerifyProblem::tiny(cfg.seed)?
    };
    problem.batch_sizes = cfg.verify_batch_sizes.clone();
    problem.fd_step = cfg.fd_step;
    let report = verify_unbiasedness(&problem)?;
    write_json(&report, &cfg.out.join("report.json"))?;
    Ok(report)
}
