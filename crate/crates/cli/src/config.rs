//! Flat `key = value` config files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are the
//! [`TrainConfig`] field names plus `data_root`, `adam_beta1`, `adam_beta2`
//! and `lambda_cycle`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use haze_core::training::TrainConfig;

pub fn parse(text: &str) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value", n + 1);
        };
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn load(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).with_context(|| format!("in {}", path.display()))
}

fn value<T: std::str::FromStr>(key: &str, v: &str) -> anyhow::Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow::anyhow!("{key} = {v:?}: {e}"))
}

/// Applies every key to `cfg`. Returns `data_root` if set.
pub fn apply(cfg: &mut TrainConfig, entries: &BTreeMap<String, String>) -> anyhow::Result<Option<PathBuf>> {
    let mut data_root = None;
    for (k, v) in entries {
        let v = v.as_str();
        match k.as_str() {
            "data_root" => data_root = Some(PathBuf::from(v)),
            "checkpoint_dir" => cfg.checkpoint_dir = PathBuf::from(v),
            "lr" => cfg.lr = value(k, v)?,
            "adam_beta1" => cfg.adam_betas.0 = value(k, v)?,
            "adam_beta2" => cfg.adam_betas.1 = value(k, v)?,
            "epochs" => cfg.epochs = value(k, v)?,
            "batch_size" => cfg.batch_size = value(k, v)?,
            "grad_accum_steps" => cfg.grad_accum_steps = value(k, v)?,
            "k_paired" => cfg.k_paired = value(k, v)?,
            "seed" => cfg.seed = value(k, v)?,
            "image_size" => cfg.image_size = value(k, v)?,
            "lambda_cycle" => cfg.loss.lambda_cycle = value(k, v)?,
            "finetune_l1_weight" => cfg.finetune_l1_weight = value(k, v)?,
            "normalize" => cfg.normalize = value(k, v)?,
            "augment" => cfg.augment = value(k, v)?,
            "unpaired_samples" => cfg.unpaired_samples = Some(value(k, v)?),
            "checkpoint_every" => cfg.checkpoint_every = value(k, v)?,
            "sample_every" => cfg.sample_every = value(k, v)?,
            "eval_every" => cfg.eval_every = value(k, v)?,
            "max_steps" => cfg.max_steps = Some(value(k, v)?),
            "allow_any_k" => cfg.allow_any_k = value(k, v)?,
            other => bail!("unknown config key {other:?}"),
        }
    }
    Ok(data_root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use haze_core::training::Phase;

    #[test]
    fn parses_comments_and_spacing() {
        let m = parse("# comment\n\nlr = 0.01\n epochs=3 \n").unwrap();
        assert_eq!(m["lr"], "0.01");
        assert_eq!(m["epochs"], "3");
        assert!(parse("nonsense").is_err());
    }

    #[test]
    fn applies_known_keys_and_rejects_unknown() {
        let mut cfg = TrainConfig::new(Phase::Finetune);
        let m = parse("lr = 0.5\nk_paired = 10\ndata_root = /tmp/x\nadam_beta1 = 0.1").unwrap();
        assert_eq!(apply(&mut cfg, &m).unwrap(), Some(PathBuf::from("/tmp/x")));
        assert_eq!((cfg.lr, cfg.k_paired, cfg.adam_betas.0), (0.5, 10, 0.1));
        assert!(apply(&mut cfg, &parse("colour = red").unwrap()).is_err());
        assert!(apply(&mut cfg, &parse("epochs = many").unwrap()).is_err());
    }
}
