//! Finite-difference check of every op and loss, plus a deliberately broken
//! gradient to show the checker catching it.

use cafseg::gradcheck::{format_table, run_suite, SuiteOptions};

fn main() -> cafseg::Result<()> {
    let results = run_suite(&SuiteOptions::default())?;
    print!("{}", format_table(&results));

    let broken = SuiteOptions {
        seeds: vec![0],
        corrupt: Some("loss_ad".into()),
        ..SuiteOptions::default()
    };
    let caught = run_suite(&broken)?.into_iter().filter(|r| !r.passed).count();
    println!("corrupted loss_ad gradient: {caught} failing case(s)");
    Ok(())
}
