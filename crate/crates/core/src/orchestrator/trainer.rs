//! The external fine-tuning command.
//!
//! The template is split like a shell would (no shell is involved), then
//! `{trainset}`, `{base_model}` and `{output_model}` are substituted inside
//! each argument. The command runs in the run's output directory and must
//! write the produced model identifier to `{output_model}`.

use std::fs;
use std::path::Path;
use std::process::Command;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("trainset {0} is missing or empty")]
    EmptyTrainset(String),
    #[error("bad trainer command: {0}")]
    BadTemplate(String),
    #[error("could not start `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error("trainer exited with {status}: {stderr}")]
    Failed { status: String, stderr: String },
    #[error("trainer did not write {0}")]
    MissingOutput(String),
    #[error("trainer wrote an empty model id to {0}")]
    EmptyOutput(String),
}

/// Substitutes placeholders in one pass, so a value that itself looks like a
/// placeholder is left alone.
fn substitute_arg(arg: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(arg.len());
    let mut rest = arg;
    'outer: while !rest.is_empty() {
        for (name, value) in values {
            if let Some(after) = rest.strip_prefix(name) {
                out.push_str(value);
                rest = after;
                continue 'outer;
            }
        }
        let c = rest.chars().next().unwrap();
        out.push(c);
        rest = &rest[c.len_utf8()..];
    }
    out
}

pub fn render_command(
    template: &str,
    trainset: &str,
    base_model: &str,
    output_model: &str,
) -> Result<Vec<String>, TrainerError> {
    let argv = shell_words::split(template).map_err(|e| TrainerError::BadTemplate(e.to_string()))?;
    if argv.is_empty() {
        return Err(TrainerError::BadTemplate("empty command".into()));
    }
    let values = [
        ("{trainset}", trainset),
        ("{base_model}", base_model),
        ("{output_model}", output_model),
    ];
    Ok(argv.iter().map(|a| substitute_arg(a, &values)).collect())
}

/// Runs the trainer and returns the substituted argv and the produced model
/// id. `trainset` and `output_model` are relative to `workdir`.
pub fn invoke_trainer(
    template: &str,
    workdir: &Path,
    trainset: &str,
    base_model: &str,
    output_model: &str,
) -> Result<(Vec<String>, String), TrainerError> {
    let has_examples = fs::read_to_string(workdir.join(trainset))
        .map(|s| s.lines().any(|l| !l.trim().is_empty()))
        .unwrap_or(false);
    if !has_examples {
        return Err(TrainerError::EmptyTrainset(trainset.to_string()));
    }
    let argv = render_command(template, trainset, base_model, output_model)?;
    let out_path = workdir.join(output_model);
    let _ = fs::remove_file(&out_path);

    log::info!("running trainer: {}", shell_words::join(&argv));
    let output = Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(workdir)
        .output()
        .map_err(|source| TrainerError::Spawn {
            program: argv[0].clone(),
            source,
        })?;
    if !output.status.success() {
        return Err(TrainerError::Failed {
            status: output.status.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    let text = fs::read_to_string(&out_path)
        .map_err(|_| TrainerError::MissingOutput(output_model.to_string()))?;
    let id = text.lines().next().unwrap_or("").trim().to_string();
    if id.is_empty() {
        return Err(TrainerError::EmptyOutput(output_model.to_string()));
    }
    Ok((argv, id))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution() {
        let argv = render_command("{trainset} {base_model} {output_model}", "a", "b", "c").unwrap();
        assert_eq!(argv, ["a", "b", "c"]);
        let argv = render_command("train --data={trainset} 'x y'", "{base_model}", "b", "c").unwrap();
        assert_eq!(argv, ["train", "--data={base_model}", "x y"]);
        assert!(render_command("   ", "a", "b", "c").is_err());
    }

    fn workdir_with_trainset() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("ts.jsonl"), "{}\n").unwrap();
        d
    }

    #[test]
    fn mock_trainer_contract() {
        let d = workdir_with_trainset();
        let (argv, id) = invoke_trainer(
            r#"sh -c 'echo model-iter1 > "$1"' _ {output_model}"#,
            d.path(),
            "ts.jsonl",
            "m0",
            "out.txt",
        )
        .unwrap();
        assert_eq!(id, "model-iter1");
        assert_eq!(argv.last().unwrap(), "out.txt");
    }

    #[test]
    fn failures() {
        let d = workdir_with_trainset();
        let err = invoke_trainer("sh -c 'echo oom >&2; exit 1'", d.path(), "ts.jsonl", "m0", "o").unwrap_err();
        match err {
            TrainerError::Failed { stderr, .. } => assert_eq!(stderr, "oom"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            invoke_trainer("true", d.path(), "ts.jsonl", "m0", "o").unwrap_err(),
            TrainerError::MissingOutput(_)
        ));
        fs::write(d.path().join("empty.jsonl"), "").unwrap();
        assert!(matches!(
            invoke_trainer("true", d.path(), "empty.jsonl", "m0", "o").unwrap_err(),
            TrainerError::EmptyTrainset(_)
        ));
    }
}
