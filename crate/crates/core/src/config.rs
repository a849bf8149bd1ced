//! Run configuration loading: an optional TOML file merged over the built-in
//! defaults, then dotted-key command line overrides (`optim.lr_max=2e-4`)
//! applied on top.

use std::path::Path;

use toml::Value;

use crate::error::{Error, Result};
use crate::training::RunConfig;

/// Splits `key=value` override arguments; the first `=` wins.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(Error::Config(format!("override '{arg}' is not of the form key=value"))),
    }
}

/// Sets a dotted-path key inside a TOML tree. The raw value is parsed as
/// TOML; anything unparseable is kept as a string.
pub fn apply_override(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parsed: Value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));

    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("override key '{key}' has an empty segment")));
        }
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key '{key}' descends into a non-table value")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(toml::Table::new()));
    }
    unreachable!("split never yields an empty iterator")
}

/// Builds the effective run configuration: defaults, then the file (if any),
/// then overrides; the merged tree must still deserialize cleanly.
pub fn load_run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree = Value::try_from(RunConfig::default())
        .map_err(|e| Error::Config(format!("default config did not serialize: {e}")))?;

    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        let file_tree: Value = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            file: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        merge(&mut tree, &file_tree);
    }

    for arg in overrides {
        let (key, raw) = parse_override(arg)?;
        apply_override(&mut tree, &key, &raw)?;
    }

    let cfg: RunConfig = tree
        .try_into()
        .map_err(|e| Error::Config(format!("invalid run configuration: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursively overlays `patch` onto `base`; tables merge, leaves replace.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Table(base), Value::Table(patch)) => {
            for (k, v) in patch {
                match base.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        base.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (base, patch) => *base = patch.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn defaults_load_without_a_file() {
        let cfg = load_run_config(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn file_values_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "seed = 99\n[optim]\nbatch_size = 4").unwrap();
        let cfg = load_run_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.optim.batch_size, 4);
        // untouched keys keep their defaults
        assert_eq!(cfg.optim.lr_max, RunConfig::default().optim.lr_max);
    }

    #[test]
    fn dotted_overrides_beat_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[optim]\nepochs = 5\n").unwrap();
        let cfg = load_run_config(
            Some(&path),
            &["optim.epochs=9".into(), "optim.lr_max=2e-4".into(), "augment=false".into()],
        )
        .unwrap();
        assert_eq!(cfg.optim.epochs, 9);
        assert_eq!(cfg.optim.lr_max, 2e-4);
        assert!(!cfg.augment);
    }

    #[test]
    fn string_overrides_reach_enums() {
        let cfg = load_run_config(
            None,
            &["counter.backbone=\"tiny_cnn\"".into(), "counter.gmp_enabled=false".into()],
        )
        .unwrap();
        assert_eq!(cfg.counter.backbone, crate::counter::BackboneKind::TinyCnn);
        assert!(!cfg.counter.gmp_enabled);
        // bare strings work without quoting
        let cfg = load_run_config(None, &["counter.backbone=tiny_cnn".into()]).unwrap();
        assert_eq!(cfg.counter.backbone, crate::counter::BackboneKind::TinyCnn);
    }

    #[test]
    fn bad_inputs_are_config_or_parse_errors() {
        assert!(matches!(load_run_config(None, &["no_equals".into()]), Err(Error::Config(_))));
        assert!(matches!(load_run_config(None, &["optim.epochs=zero".into()]), Err(Error::Config(_))));
        assert!(matches!(
            load_run_config(None, &["optim.lr_min=5.0".into()]),
            Err(Error::Config(_)) // validate(): lr_min > lr_max
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.toml");
        std::fs::write(&path, "seed = [unclosed").unwrap();
        assert!(matches!(load_run_config(Some(&path), &[]), Err(Error::Parse { .. })));
    }
}
