//! Runs the finite-difference check over every registered operation and
//! prints the pass/fail table.

use textspot::gradcheck::registry::{format_table, run_all};
use textspot::gradcheck::{DEFAULT_EPSILON, DEFAULT_TOLERANCE};

fn main() {
    let outcomes = run_all(DEFAULT_EPSILON);
    print!("{}", format_table(&outcomes, DEFAULT_TOLERANCE));
    let failed = outcomes.iter().filter(|o| !o.passed(DEFAULT_TOLERANCE)).count();
    if failed > 0 {
        eprintln!("{failed} operation(s) failed");
        std::process::exit(1);
    }
}
