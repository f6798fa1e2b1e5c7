use super::{sha256_hex, Backend, BackendCall, BackendError};

type Script = dyn Fn(&BackendCall<'_>) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure. Never touches the network.
pub struct ScriptedBackend {
    script: Box<Script>,
}

impl ScriptedBackend {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&BackendCall<'_>) -> Result<String, BackendError> + Send + Sync + 'static,
    {
        ScriptedBackend {
            script: Box::new(f),
        }
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, call: &BackendCall<'_>) -> Result<String, BackendError> {
        (self.script)(call)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pick {
    Letter(char),
    /// Letter chosen from a hash of the prompt, so answers vary per question.
    Hash,
}

/// Offline stand-in for a model, selected with `mock:letter=B` or
/// `mock:hash`. It recognizes the prompt kind and answers in the matching
/// format.
#[derive(Debug, Clone)]
pub struct FixedLetterMock {
    pick: Pick,
}

impl FixedLetterMock {
    pub fn from_designator(spec: &str) -> Result<Self, String> {
        let pick = match spec {
            "" | "hash" => Pick::Hash,
            s => match s.strip_prefix("letter=") {
                Some(l) if l.len() == 1 && l.chars().all(|c| c.is_ascii_uppercase()) => {
                    Pick::Letter(l.chars().next().unwrap())
                }
                _ => return Err(format!("unknown mock designator `mock:{spec}`")),
            },
        };
        Ok(FixedLetterMock { pick })
    }

    fn letter(&self, prompt: &str) -> char {
        match self.pick {
            Pick::Letter(c) => c,
            Pick::Hash => {
                let n = prompt
                    .lines()
                    .filter(|l| l.len() > 3 && l.starts_with('(') && l.as_bytes()[2] == b')')
                    .count()
                    .max(1);
                let h = sha256_hex(prompt.as_bytes());
                let v = u64::from_str_radix(&h[..8], 16).unwrap_or(0);
                (b'A' + (v % n as u64) as u8) as char
            }
        }
    }
}

impl Backend for FixedLetterMock {
    fn complete(&self, call: &BackendCall<'_>) -> Result<String, BackendError> {
        let p = call.prompt;
        let l = self.letter(p);
        let caption = "The image shows the scene the question refers to.";
        Ok(if p.contains("explain why the answer is wrong") {
            format!("###CAPTION: {caption}\n###EXPLANATION: The image does not support this answer.")
        } else if p.contains("Answer with only the letter") {
            format!("({l})")
        } else if p.contains("Let's think step by step") {
            format!("Looking at the image and the options.\n###CONCLUSION: ({l})")
        } else if p.contains("###CAPTION:") {
            format!("###CAPTION: {caption}\n###REASONING: The visible details point to one option.\n###CONCLUSION: ({l})")
        } else {
            format!("###REASONING: The visible details point to one option.\n###CONCLUSION: ({l})")
        })
    }
}
