//! Configuration text, environment seed and `key=value` overrides.

use cafseg::config;

fn main() -> cafseg::Result<()> {
    let text = "# short run\nepochs_first = 5\nlambda_ad = 0.5\nseed = 1\n";
    let mut cfg = config::from_text(text)?;
    config::apply_env(&mut cfg)?;
    config::apply_overrides(&mut cfg, &["seed=9", "grad_clip=1"])?;
    cfg.validate()?;
    print!("{}", config::to_text(&cfg));
    match config::from_text("epochs_first = many") {
        Err(e) => println!("rejected: {e}"),
        Ok(_) => println!("unexpectedly accepted"),
    }
    Ok(())
}
