//! Acceptance criteria 1–8, run sequentially so timings are not disturbed
//! by concurrent tests. Prints one line per criterion and fails if any does.

use linattn_bench::ProfileOptions;
use linattn_cli::checks::{self, DemoSettings, Tolerances};

fn main() {
    let tol = Tolerances::default();
    let runs: [&dyn Fn() -> checks::Check; 8] = [
        &|| checks::exactness(&tol),
        &checks::compute_figures,
        &checks::memory_figures,
        &|| checks::scaling(&ProfileOptions::default()),
        &|| checks::gradients(&tol),
        &|| checks::metrics_oracle(&tol),
        &|| checks::training(&DemoSettings::default()),
        &checks::structural,
    ];
    let mut failed = Vec::new();
    for run in runs {
        let c = run();
        println!("{c}");
        if !c.passed {
            failed.push(c.id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 8 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
