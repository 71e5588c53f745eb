use std::path::{Path, PathBuf};

use igr_core::PipelineConfig;

use crate::error::{CliError, CliResult};

/// Parse a TOML config. Relative paths resolve against the file's directory.
pub fn load(path: &Path) -> CliResult<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
    let mut cfg: PipelineConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {}", path.display(), e.message())]))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    resolve(&mut cfg.paths.workdir);
    if let Some(p) = cfg.paths.reviews.as_mut() {
        resolve(p);
    }
    if let Some(p) = cfg.paths.metadata.as_mut() {
        resolve(p);
    }
    Ok(cfg)
}

/// Field constraints plus existence of referenced input files.
pub fn check(cfg: &PipelineConfig) -> CliResult<()> {
    let mut problems = cfg.validate();
    for (name, p) in [("paths.reviews", &cfg.paths.reviews), ("paths.metadata", &cfg.paths.metadata)] {
        if let Some(p) = p {
            if !p.exists() {
                problems.push(format!("{name}: {} does not exist", p.display()));
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(problems))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[paths]\nworkdir = \"w\"\n[tokenizer]\nlevels = 3\n").unwrap();
        let cfg = load(&p).unwrap();
        assert_eq!(cfg.paths.workdir, dir.path().join("w"));
        assert_eq!((cfg.seed, cfg.tokenizer.levels, cfg.tokenizer.codebook_size), (3, 3, 256));
    }

    #[test]
    fn unknown_syntax_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = \"x\"").unwrap();
        assert_eq!(load(&p).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn missing_input_file_reported() {
        let mut cfg = PipelineConfig::default();
        cfg.paths.reviews = Some("/nonexistent/r.jsonl".into());
        cfg.paths.metadata = Some("/nonexistent/m.jsonl".into());
        let err = check(&cfg).unwrap_err();
        assert!(err.to_string().contains("paths.reviews"));
        assert!(err.to_string().contains("paths.metadata"));
    }
}
