//! The `gradcheck` report.

use tsn_core::gradcheck::{end_to_end_check, pixel_only_instance_grad, primitive_suite};
use tsn_core::ModelConfig;

use crate::error::{Result, TsnError};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub primitives: Vec<(String, f64)>,
    pub end_to_end: f64,
    pub pixel_only_instance_grad: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.primitives.iter().all(|(_, e)| *e < PRIMITIVE_TOL) && self.end_to_end < END_TO_END_TOL && self.pixel_only_instance_grad == 0.0
    }

    pub fn render(&self) -> String {
        let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
        let mut s = format!("{:<28} {:>12}\n", "check", "max rel err");
        for (name, e) in &self.primitives {
            s += &format!("{name:<28} {e:>12.3e} {}\n", mark(*e < PRIMITIVE_TOL));
        }
        s += &format!("{:<28} {:>12.3e} {}\n", "end to end (E_init, 8x8)", self.end_to_end, mark(self.end_to_end < END_TO_END_TOL));
        s += &format!(
            "{:<28} {:>12.3e} {}\n",
            "pixel_only instance grads",
            self.pixel_only_instance_grad,
            mark(self.pixel_only_instance_grad == 0.0)
        );
        s
    }
}

pub fn grad_report(seed: u64) -> Result<GradReport> {
    let cfg = ModelConfig::default();
    Ok(GradReport {
        primitives: primitive_suite(seed)?.into_iter().map(|r| (r.name.to_string(), r.max_rel_err)).collect(),
        end_to_end: end_to_end_check(&cfg, seed)?,
        pixel_only_instance_grad: pixel_only_instance_grad(&cfg, seed)?,
    })
}

/// The `gradcheck` command: prints the report, fails numerically when a
/// check is out of tolerance.
pub fn run() -> Result<GradReport> {
    let report = grad_report(0)?;
    print!("{}", report.render());
    if !report.passed() {
        return Err(TsnError::Numerical("gradient check out of tolerance".into()));
    }
    Ok(report)
}
