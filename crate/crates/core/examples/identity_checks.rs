//! The randomized identity suite at reduced size.

use esrf::checks::{run_identity_suite, SuiteSize};

fn main() {
    for r in run_identity_suite(SuiteSize::QUICK, 1) {
        println!("{r}");
    }
}
