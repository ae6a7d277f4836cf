//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails.

use std::process::ExitCode;

use chc::verify::{run, Options, CRITERIA};

fn main() -> ExitCode {
    let opts = Options {
        binary: Some(env!("CARGO_BIN_EXE_chc").into()),
        ..Options::default()
    };
    let mut failed = 0;
    for (id, _) in CRITERIA {
        let r = run(*id, &opts).expect("listed criterion");
        failed += !r.pass as usize;
        println!("{r}");
    }
    println!("acceptance: {} passed, {failed} failed", CRITERIA.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
