//! `key = value` configuration files and overrides.
//!
//! ```text
//! # comments start with '#'
//! seed = 3
//! epochs_first = 30
//! enc_widths = 16, 32
//! snapshot_epochs = 1, 3
//! eval_mode = skip
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Environment variable that overrides the seed.
pub const SEED_ENV: &str = "CAF_SEED";

/// Every accepted key, in the order [`to_text`] writes them.
pub const KEYS: [&str; 17] = [
    "seed",
    "epochs_first",
    "epochs_later",
    "batch_size",
    "lr_first",
    "lr_later",
    "momentum",
    "weight_decay",
    "poly_power",
    "lambda_ad",
    "lambda_d",
    "gamma_max",
    "grad_clip",
    "eval_mode",
    "enc_widths",
    "channels",
    "snapshot_epochs",
];

/// Splits `text` into `(line number, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| num(key, s.trim())).collect()
}

/// Sets one field of `cfg`.
pub fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "seed" => cfg.seed = num(key, value)?,
        "epochs_first" => cfg.epochs_first = num(key, value)?,
        "epochs_later" => cfg.epochs_later = num(key, value)?,
        "batch_size" => cfg.batch_size = num(key, value)?,
        "lr_first" => cfg.lr_first = num(key, value)?,
        "lr_later" => cfg.lr_later = num(key, value)?,
        "momentum" => cfg.momentum = num(key, value)?,
        "weight_decay" => cfg.weight_decay = num(key, value)?,
        "poly_power" => cfg.poly_power = num(key, value)?,
        "lambda_ad" => cfg.lambda_ad = num(key, value)?,
        "lambda_d" => cfg.lambda_d = num(key, value)?,
        "gamma_max" => cfg.gamma_max = num(key, value)?,
        "grad_clip" => cfg.grad_clip = num(key, value)?,
        "eval_mode" => cfg.eval_mode = value.parse()?,
        "channels" => cfg.channels = num(key, value)?,
        "enc_widths" => {
            let v = list(key, value)?;
            cfg.enc_widths = v
                .try_into()
                .map_err(|_| Error::Config(format!("`enc_widths` needs two values, got `{value}`")))?;
        }
        "snapshot_epochs" => cfg.snapshot_epochs = list(key, value)?,
        other => return Err(Error::Config(format!("unknown key `{other}`"))),
    }
    Ok(())
}

/// Parses a whole configuration text on top of the defaults.
pub fn from_text(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (line, k, v) in parse_pairs(text)? {
        apply(&mut cfg, &k, &v).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("line {line}: {msg}")),
            other => other,
        })?;
    }
    Ok(cfg)
}

pub fn load(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Applies `CAF_SEED` if set.
pub fn apply_env(cfg: &mut TrainConfig) -> Result<()> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = num(SEED_ENV, v.trim())?;
    }
    Ok(())
}

/// Applies `key=value` override strings.
pub fn apply_overrides<S: AsRef<str>>(cfg: &mut TrainConfig, overrides: &[S]) -> Result<()> {
    for o in overrides {
        let o = o.as_ref();
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
        apply(cfg, k.trim(), v.trim())?;
    }
    Ok(())
}

/// Configuration text that [`from_text`] reads back to `cfg`.
pub fn to_text(cfg: &TrainConfig) -> String {
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
    let values = [
        cfg.seed.to_string(),
        cfg.epochs_first.to_string(),
        cfg.epochs_later.to_string(),
        cfg.batch_size.to_string(),
        format!("{:?}", cfg.lr_first),
        format!("{:?}", cfg.lr_later),
        format!("{:?}", cfg.momentum),
        format!("{:?}", cfg.weight_decay),
        format!("{:?}", cfg.poly_power),
        format!("{:?}", cfg.lambda_ad),
        format!("{:?}", cfg.lambda_d),
        format!("{:?}", cfg.gamma_max),
        format!("{:?}", cfg.grad_clip),
        cfg.eval_mode.to_string(),
        join(&cfg.enc_widths),
        cfg.channels.to_string(),
        join(&cfg.snapshot_epochs),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caf::FusionMode;

    #[test]
    fn parses_and_overrides() {
        let text = "# run\nseed = 4\nenc_widths = 8, 8 # small\nsnapshot_epochs = 1,3\neval_mode = concat\n";
        let mut cfg = from_text(text).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.enc_widths, [8, 8]);
        assert_eq!(cfg.snapshot_epochs, vec![1, 3]);
        assert_eq!(cfg.eval_mode, FusionMode::TestConcat);
        apply_overrides(&mut cfg, &["seed=9", "lr_first = 0.5"]).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lr_first, 0.5);
    }

    #[test]
    fn errors_name_the_line() {
        let err = from_text("seed = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("bogus"), "{err}");
        assert!(from_text("seed 1\n").is_err());
        assert!(from_text("enc_widths = 1,2,3\n").is_err());
        assert!(from_text("seed = -1\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.snapshot_epochs = vec![1, 2];
        cfg.lr_later = 3e-4;
        assert_eq!(from_text(&to_text(&cfg)).unwrap(), cfg);
        assert_eq!(to_text(&cfg).lines().count(), KEYS.len());
    }
}
