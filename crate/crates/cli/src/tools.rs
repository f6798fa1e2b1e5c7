use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde_json::{json, Value};

use stl_core::dataset::{load_dataset, DatasetFormat, DatasetSplit};
use stl_core::gateway::sha256_hex;
use stl_core::rationale::{
    extract_answer, parse_caption_free, parse_negative, parse_positive, AnswerMatch, ParseMode,
};

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Positive,
    CaptionFree,
    Negative,
}

#[derive(Args)]
pub struct ParseArgs {
    /// A `.jsonl` file holds one response per line, either a JSON string or an
    /// object with `raw_text` (generation artifacts and transcripts qualify).
    /// Any other file is a single response.
    input: PathBuf,
    #[arg(long, value_enum, default_value = "positive")]
    kind: Kind,
    #[arg(long, default_value = "lenient")]
    mode: ParseMode,
    /// Resolve conclusions against the choices of `sample_id` in this split.
    #[arg(long)]
    split: Option<PathBuf>,
}

fn responses(path: &Path) -> Result<Vec<Value>> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string())?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("line {}", i + 1)))
            .collect()
    } else {
        Ok(vec![Value::String(text)])
    }
}

fn answer_json(m: AnswerMatch) -> Value {
    match m {
        AnswerMatch::Index(i) => json!(i),
        AnswerMatch::NoMatch => json!("no_match"),
        AnswerMatch::Ambiguous => json!("ambiguous"),
    }
}

fn parse_one(a: &ParseArgs, record: &Value, split: Option<&DatasetSplit>) -> Value {
    let (text, sample_id) = match record {
        Value::String(s) => (s.as_str(), None),
        v => (v["raw_text"].as_str().unwrap_or_default(), v["sample_id"].as_str()),
    };
    let mut out = json!({});
    if let Some(id) = sample_id {
        out["sample_id"] = json!(id);
    }
    let parsed = match a.kind {
        Kind::Negative => parse_negative(text, a.mode).map(|r| json!(r)),
        Kind::Positive | Kind::CaptionFree => {
            let r = match a.kind {
                Kind::Positive => parse_positive(text, a.mode),
                _ => parse_caption_free(text, a.mode),
            };
            r.map(|r| {
                let sample = split.zip(sample_id).and_then(|(s, id)| s.get(id));
                if let Some(s) = sample {
                    out["answer"] = answer_json(extract_answer(&r.conclusion_raw, &s.choices));
                    out["gold"] = json!(s.answer_index);
                }
                json!(r)
            })
        }
    };
    match parsed {
        Ok(p) => {
            out["ok"] = json!(true);
            out["parsed"] = p;
        }
        Err(e) => {
            out["ok"] = json!(false);
            out["error"] = json!(e.to_string());
        }
    }
    out
}

pub fn parse(a: &ParseArgs) -> Result<()> {
    let split = a
        .split
        .as_deref()
        .map(|p| load_dataset(p, DatasetFormat::Jsonl))
        .transpose()?;
    let stdout = io::stdout();
    let mut w = stdout.lock();
    let (mut ok, mut total) = (0, 0);
    for (i, record) in responses(&a.input)?.iter().enumerate() {
        let mut out = parse_one(a, record, split.as_ref());
        ok += out["ok"].as_bool().unwrap_or(false) as usize;
        total += 1;
        out["index"] = json!(i);
        match writeln!(w, "{out}") {
            Err(e) if e.kind() == io::ErrorKind::BrokenPipe => return Ok(()),
            r => r?,
        }
    }
    log::info!("{ok} of {total} responses parsed");
    Ok(())
}

pub fn validate(split: &Path, image_root: Option<&Path>) -> Result<()> {
    let s = load_dataset(split, DatasetFormat::Jsonl)?;
    let root = image_root.map_or_else(
        || split.parent().map(PathBuf::from).unwrap_or_default(),
        PathBuf::from,
    );
    let missing = s.missing_images(&root);
    for (id, path) in &missing {
        eprintln!("{id}: missing image {}", path.display());
    }
    if !missing.is_empty() {
        bail!("{} of {} samples have no image under {}", missing.len(), s.len(), root.display());
    }
    println!("{}: {} samples, all valid", split.display(), s.len());
    Ok(())
}

/// Reads the trainset so a missing or unreadable file still fails, then
/// names the "trained" model after the base model and the trainset digest.
pub fn mock_trainer(trainset: &Path, base_model: &str, output_model: &Path) -> Result<()> {
    let bytes = fs::read(trainset).with_context(|| trainset.display().to_string())?;
    let n = bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count();
    if n == 0 {
        bail!("{} has no examples", trainset.display());
    }
    let id = format!("{base_model}-ft-{}", &sha256_hex(&bytes)[..12]);
    fs::write(output_model, format!("{id}\n")).with_context(|| output_model.display().to_string())?;
    log::info!("mock-trained {id} on {n} examples");
    Ok(())
}
