//! Acceptance suite: one PASS/FAIL line per criterion.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use trajattn::synth::selftest::{
    check_adjoint_round_trip, check_attention_contracts, check_formats, check_geometry_analytics,
    check_gradients, check_metric_fixtures, check_oracle_equivalence, check_trajectory_constancy,
    check_zero_init_identity, CheckResult,
};
use trajattn::Result;

const SEED: u64 = 0;

struct Criterion {
    id: u8,
    title: &'static str,
    budget: Option<Duration>,
    run: fn() -> Result<Vec<CheckResult>>,
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn selftest_twice() -> Result<Vec<CheckResult>> {
    let run = || {
        let start = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_trajattn"))
            .args(["selftest", "--seed", &SEED.to_string()])
            .output()
            .expect("binary runs");
        (out, start.elapsed())
    };
    let (a, ta) = run();
    let (b, tb) = run();
    let slowest = ta.max(tb).as_secs_f64();
    let mut checks = vec![
        CheckResult::at_most(
            "selftest.first_run_exit",
            a.status.code().unwrap_or(-1) as f64,
            0.0,
        ),
        CheckResult::at_most(
            "selftest.second_run_exit",
            b.status.code().unwrap_or(-1) as f64,
            0.0,
        ),
        CheckResult::at_most(
            "selftest.reports_differ",
            (a.stdout != b.stdout) as u8 as f64,
            0.0,
        ),
        CheckResult::at_most("selftest.wall_clock_s", slowest, 120.0),
    ];
    checks.extend(check_formats(SEED)?);
    Ok(checks)
}

fn criteria() -> Vec<Criterion> {
    vec![
        Criterion {
            id: 1,
            title: "zero-init identity, 20 instances bit-exact",
            budget: secs(5),
            run: || check_zero_init_identity(SEED, None),
        },
        Criterion {
            id: 2,
            title: "adjoint round trip on dense identity trajectories",
            budget: None,
            run: || check_adjoint_round_trip(SEED),
        },
        Criterion {
            id: 3,
            title: "oracle equivalence, 100 instances per op",
            budget: secs(30),
            run: || check_oracle_equivalence(SEED),
        },
        Criterion {
            id: 4,
            title: "gradients vs central differences (h=1e-3, rel <= 1e-6)",
            budget: None,
            run: || check_gradients(SEED),
        },
        Criterion {
            id: 5,
            title: "geometry analytics: 65 px lateral shift and zoom law within 1e-4 px",
            budget: None,
            run: check_geometry_analytics,
        },
        Criterion {
            id: 6,
            title: "trajectory constancy on 5 camera paths with 10x negative control",
            budget: secs(60),
            run: || check_trajectory_constancy(SEED),
        },
        Criterion {
            id: 7,
            title: "metric fixtures: ATE, alignment, 1 deg/step drift",
            budget: None,
            run: || check_metric_fixtures(SEED),
        },
        Criterion {
            id: 8,
            title: "attention contracts: row sums, masking, stats profiles",
            budget: None,
            run: || check_attention_contracts(SEED),
        },
        Criterion {
            id: 9,
            title: "selftest twice with identical reports, format round trips",
            budget: secs(120),
            run: selftest_twice,
        },
    ]
}

fn main() -> ExitCode {
    let mut failed = 0;
    for c in criteria() {
        let start = Instant::now();
        let result = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match &result {
            Ok(checks) => {
                let bad: Vec<String> = checks
                    .iter()
                    .filter(|r| !r.passed)
                    .map(|r| format!("{}={:.3e} (limit {:.3e})", r.name, r.value, r.threshold))
                    .collect();
                let all = checks
                    .iter()
                    .map(|r| format!("{}={:.3e}/{:.3e}", r.name, r.value, r.threshold))
                    .collect::<Vec<_>>()
                    .join(", ");
                if bad.is_empty() {
                    (true, all)
                } else {
                    (false, bad.join(", "))
                }
            }
            Err(e) => (false, format!("error: {e}")),
        };
        let in_budget = c.budget.is_none_or(|b| elapsed <= b);
        let pass = ok && in_budget;
        let budget = c
            .budget
            .map(|b| format!(" budget {}s", b.as_secs()))
            .unwrap_or_default();
        println!(
            "{} [{}] {} ({:.2}s{}){}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.title,
            elapsed.as_secs_f64(),
            budget,
            if pass {
                String::new()
            } else {
                format!(": {detail}")
            }
        );
        if !in_budget {
            println!("    over time budget");
        }
        if std::env::var_os("ACCEPTANCE_VERBOSE").is_some() && pass {
            println!("    {detail}");
        }
        failed += !pass as usize;
    }
    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
