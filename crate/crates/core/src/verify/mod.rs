//! Oracle-backed self checks: each suite compares the implementation with
//! an independent brute-force or straight-line computation on random
//! instances and reports the worst discrepancy.

mod oracles;
mod suites;

use std::fmt;
use std::time::Duration;

pub use oracles::{
    brute_force_ctc_log_prob, brute_force_prefix_log_probs, random_log_probs, spec_sub_replay,
};
pub use suites::{
    causality_suite, ctc_suite, gradient_suite, gradient_toy_config, mirror_decoders, prefix_beam_suite,
    spec_sub_suite, symmetry_suite,
};

/// Deliberate defects for checking that the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The right-to-left decoder gets a left (past-only) self-attention mask.
    BrokenRightMask,
}

impl std::str::FromStr for Fault {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "broken_right_mask" => Ok(Fault::BrokenRightMask),
            other => Err(format!("unknown fault '{other}' (expected broken_right_mask)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_error <= self.tolerance
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<12} {} cases={} max_err={:.3e} tol={:.0e} time={:.2}s",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.cases,
            self.max_error,
            self.tolerance,
            self.elapsed.as_secs_f64()
        )?;
        for msg in self.failures.iter().take(5) {
            write!(f, "\n    {msg}")?;
        }
        Ok(())
    }
}

/// Case counts for [`run_all`].
#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub ctc_cases: usize,
    pub gradient_seeds: usize,
    pub prefix_cases: usize,
    pub causality_cases: usize,
    pub symmetry_cases: usize,
    pub spec_sub_cases: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 1,
            fault: None,
            ctc_cases: 500,
            gradient_seeds: 20,
            prefix_cases: 300,
            causality_cases: 40,
            symmetry_cases: 100,
            spec_sub_cases: 1000,
        }
    }
}

pub fn run_all(opts: &VerifyOptions) -> Vec<SuiteReport> {
    vec![
        ctc_suite(opts.seed, opts.ctc_cases),
        gradient_suite(opts.seed, opts.gradient_seeds),
        prefix_beam_suite(opts.seed, opts.prefix_cases),
        causality_suite(opts.seed, opts.causality_cases, opts.fault),
        symmetry_suite(opts.seed, opts.symmetry_cases, opts.fault),
        spec_sub_suite(opts.seed, opts.spec_sub_cases),
    ]
}
