//! Transcripts: one JSON object per line, keyed by
//! `(model_id, prompt_sha256, image_sha256, seed)`.
//!
//! The prompt text is stored alongside its hash so transcripts can be read
//! and recounted without the dataset.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{sha256_hex, Backend, BackendCall, BackendError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub model_id: String,
    pub prompt_sha256: String,
    pub image_sha256: String,
    pub seed: Option<u64>,
    pub prompt: String,
    pub raw_text: String,
}

type Key = (String, String, String, Option<u64>);

impl TranscriptEntry {
    fn key(&self) -> Key {
        (
            self.model_id.clone(),
            self.prompt_sha256.clone(),
            self.image_sha256.clone(),
            self.seed,
        )
    }
}

fn call_key(call: &BackendCall<'_>) -> Key {
    (
        call.endpoint.model_id.clone(),
        sha256_hex(call.prompt.as_bytes()),
        call.image.sha256.clone(),
        call.decoding.seed,
    )
}

pub fn read_transcript(path: &Path) -> io::Result<Vec<TranscriptEntry>> {
    let content = fs::read_to_string(path)?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("{}: line {}: {e}", path.display(), i + 1),
                )
            })
        })
        .collect()
}

/// Passes calls through to `inner` and appends every successful reply to the
/// transcript. Lines are written under a lock, so concurrent batches never
/// interleave.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    out: Mutex<fs::File>,
}

impl RecordingBackend {
    pub fn create(inner: Arc<dyn Backend>, path: &Path) -> io::Result<Self> {
        let out = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RecordingBackend {
            inner,
            out: Mutex::new(out),
        })
    }
}

impl Backend for RecordingBackend {
    fn complete(&self, call: &BackendCall<'_>) -> Result<String, BackendError> {
        let raw_text = self.inner.complete(call)?;
        let (model_id, prompt_sha256, image_sha256, seed) = call_key(call);
        let entry = TranscriptEntry {
            model_id,
            prompt_sha256,
            image_sha256,
            seed,
            prompt: call.prompt.to_string(),
            raw_text: raw_text.clone(),
        };
        let mut line = serde_json::to_string(&entry).expect("transcript entry serializes");
        line.push('\n');
        let mut out = self.out.lock().unwrap();
        out.write_all(line.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| BackendError::Fatal(format!("writing transcript: {e}")))?;
        Ok(raw_text)
    }
}

/// Serves replies from a transcript. A request with no entry is an error,
/// never a fallback to a live backend.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    entries: HashMap<Key, String>,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> io::Result<Self> {
        Ok(Self::from_entries(read_transcript(path)?))
    }

    /// The first entry for a key wins.
    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        let mut map = HashMap::new();
        for e in entries {
            map.entry(e.key()).or_insert(e.raw_text);
        }
        ReplayBackend { entries: map }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, call: &BackendCall<'_>) -> Result<String, BackendError> {
        let key = call_key(call);
        self.entries
            .get(&key)
            .cloned()
            .ok_or(BackendError::ReplayMiss {
                model_id: key.0,
                prompt_sha256: key.1,
                image_sha256: key.2,
            })
    }
}

/// Where replies come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TranscriptMode {
    Live,
    Record(PathBuf),
    Replay(PathBuf),
}

/// Wraps `live` for the mode. In replay mode `live` is dropped unused, so no
/// request can reach the network.
pub fn with_transcript(live: Arc<dyn Backend>, mode: &TranscriptMode) -> io::Result<Arc<dyn Backend>> {
    Ok(match mode {
        TranscriptMode::Live => live,
        TranscriptMode::Record(path) => Arc::new(RecordingBackend::create(live, path)?),
        TranscriptMode::Replay(path) => Arc::new(ReplayBackend::open(path)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{
        GenerationRequest, GenerationStatus, FailureReason, Gateway, ImageResolver, ModelEndpoint,
        RetryPolicy, ScriptedBackend,
    };
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn setup() -> (tempfile::TempDir, Vec<GenerationRequest>) {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"img-a").unwrap();
        fs::write(dir.path().join("b.png"), b"img-b").unwrap();
        let reqs = (0..3)
            .map(|i| GenerationRequest {
                request_index: i,
                prompt: format!("question {i}"),
                image_ref: if i == 1 { "b.png" } else { "a.png" }.into(),
                decoding: None,
            })
            .collect();
        (dir, reqs)
    }

    #[test]
    fn record_then_replay() {
        let (dir, reqs) = setup();
        let path = dir.path().join("t.jsonl");
        let calls = Arc::new(AtomicUsize::new(0));
        let c = calls.clone();
        let live = Arc::new(ScriptedBackend::new(move |call| {
            c.fetch_add(1, Ordering::SeqCst);
            Ok(format!("answer to {}", call.prompt))
        }));
        let ep = ModelEndpoint::new("m0", "mock:x");
        let images = ImageResolver::new(dir.path());

        let rec = Gateway::new(
            Arc::new(RecordingBackend::create(live, &path).unwrap()),
            images.clone(),
            RetryPolicy::no_wait(0),
        );
        let recorded = rec.generate_batch(&ep, &reqs, 2);
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(read_transcript(&path).unwrap().len(), 3);

        let replay = Gateway::new(
            Arc::new(ReplayBackend::open(&path).unwrap()),
            images,
            RetryPolicy::no_wait(0),
        );
        let a = replay.generate_batch(&ep, &reqs, 1);
        let b = replay.generate_batch(&ep, &reqs, 8);
        let texts = |v: &[crate::gateway::GenerationResult]| {
            v.iter().map(|r| r.raw_text.clone()).collect::<Vec<_>>()
        };
        assert_eq!(texts(&a), texts(&recorded));
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let mut novel = reqs[0].clone();
        novel.prompt = "never seen".into();
        let miss = replay.generate(&ep, &novel);
        let want = sha256_hex(b"never seen");
        match miss.status {
            GenerationStatus::Failed(FailureReason::ReplayMiss(m)) => assert!(m.contains(&want), "{m}"),
            other => panic!("expected replay miss, got {other:?}"),
        }
        let other_model = replay.generate(&ep.with_model("m1"), &reqs[0]);
        assert!(!other_model.is_ok());
    }

    #[test]
    fn replay_requires_transcript() {
        assert!(ReplayBackend::open(Path::new("/nonexistent/transcript.jsonl")).is_err());
    }
}
