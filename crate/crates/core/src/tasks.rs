//! Synthetic prompts with rule-based rewards.
//!
//! Prompts are laid out as `BOS body SEP`; symbols start after the reserved
//! ids and the separator. Responses are scored up to the first EOS.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::policy::{Token, BOS, EOS, RESERVED};
use crate::rng::RngStream;

/// Marks the end of the prompt body.
pub const SEP: Token = RESERVED;
/// First id used for task symbols.
pub const FIRST_SYMBOL: Token = RESERVED + 1;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("infeasible task: {0}")]
    Infeasible(String),
    #[error("prompt file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Written as `copy_pattern`, `parity` or `modsum:<base>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TaskKind {
    /// Reproduce the first `target_len` body symbols.
    CopyPattern,
    /// Emit the parity of a bit string (symbols "0" and "1").
    Parity,
    /// Emit the sum of the body digits modulo `base`.
    Modsum { base: u32 },
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::CopyPattern => f.write_str("copy_pattern"),
            TaskKind::Parity => f.write_str("parity"),
            TaskKind::Modsum { base } => write!(f, "modsum:{base}"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "copy_pattern" => Ok(TaskKind::CopyPattern),
            "parity" => Ok(TaskKind::Parity),
            other => other
                .strip_prefix("modsum:")
                .and_then(|b| b.parse::<u32>().ok())
                .map(|base| TaskKind::Modsum { base })
                .ok_or_else(|| format!("unknown task kind `{other}`")),
        }
    }
}

impl TryFrom<String> for TaskKind {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TaskKind> for String {
    fn from(k: TaskKind) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub prompt_len: usize,
    pub target_len: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec { kind: TaskKind::CopyPattern, prompt_len: 4, target_len: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub tokens: Vec<Token>,
    pub answer_key: Vec<Token>,
}

impl TaskSpec {
    /// Number of distinct body symbols.
    pub fn alphabet(&self, vocab_size: usize) -> usize {
        match self.kind {
            TaskKind::CopyPattern => vocab_size.saturating_sub(FIRST_SYMBOL as usize),
            TaskKind::Parity => 2,
            TaskKind::Modsum { base } => base as usize,
        }
    }

    /// Feasibility against a vocabulary size and context window.
    ///
    /// Every body symbol an answer depends on must still be visible in the
    /// window when that answer token is emitted.
    pub fn validate(&self, vocab_size: usize, window: usize) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::Infeasible(m));
        if self.prompt_len == 0 || self.target_len == 0 {
            return bad("prompt_len and target_len must be positive".into());
        }
        if self.prompt_len + 1 > window {
            return bad(format!("prompt body of {} plus separator does not fit a window of {window}", self.prompt_len));
        }
        let needed = FIRST_SYMBOL as usize + self.alphabet(vocab_size);
        match self.kind {
            TaskKind::CopyPattern => {
                if self.target_len > self.prompt_len {
                    return bad("copy target longer than the prompt body".into());
                }
                if self.alphabet(vocab_size) < 2 {
                    return bad("vocabulary too small for copy symbols".into());
                }
            }
            TaskKind::Parity | TaskKind::Modsum { .. } => {
                if self.target_len != 1 {
                    return bad("parity and modsum answers are a single token".into());
                }
                if let TaskKind::Modsum { base } = self.kind {
                    if !(2..=10).contains(&base) {
                        return bad(format!("modsum base {base} outside [2, 10]"));
                    }
                }
                if needed > vocab_size {
                    return bad(format!("needs {needed} token ids, vocabulary has {vocab_size}"));
                }
            }
        }
        Ok(())
    }

    /// Longest response worth sampling: the answer plus EOS.
    pub fn max_response_len(&self) -> usize {
        self.target_len + 1
    }
}

/// `n` prompts with ids `0..n`, a pure function of `(spec, n, seed)`.
pub fn gen_prompts(spec: &TaskSpec, n: usize, seed: u64, vocab_size: usize, window: usize) -> Result<Vec<Prompt>, TaskError> {
    spec.validate(vocab_size, window)?;
    if n == 0 {
        return Err(TaskError::Infeasible("n must be at least 1".into()));
    }
    let alphabet = spec.alphabet(vocab_size) as u64;
    Ok((0..n as u64)
        .map(|id| {
            let mut rng = RngStream::new(seed, &[0x7a5c, id]);
            let body: Vec<u32> = (0..spec.prompt_len).map(|_| rng.below(alphabet) as u32).collect();
            let answer_key = match spec.kind {
                TaskKind::CopyPattern => body[..spec.target_len].iter().map(|&s| FIRST_SYMBOL + s).collect(),
                TaskKind::Parity => vec![FIRST_SYMBOL + body.iter().sum::<u32>() % 2],
                TaskKind::Modsum { base } => vec![FIRST_SYMBOL + body.iter().sum::<u32>() % base],
            };
            let mut tokens = Vec::with_capacity(spec.prompt_len + 2);
            tokens.push(BOS);
            tokens.extend(body.iter().map(|&s| FIRST_SYMBOL + s));
            tokens.push(SEP);
            Prompt { id, tokens, answer_key }
        })
        .collect())
}

/// Reward in `[0, 1]` for `response`. Tokens after the first EOS are ignored.
pub fn score(kind: TaskKind, prompt: &Prompt, response: &[Token]) -> f64 {
    let end = response.iter().position(|&t| t == EOS).unwrap_or(response.len());
    let emitted = &response[..end];
    match kind {
        TaskKind::CopyPattern => {
            let target = &prompt.answer_key;
            if target.is_empty() {
                return 0.0;
            }
            let hits = target.iter().zip(emitted).filter(|(a, b)| a == b).count();
            hits as f64 / target.len() as f64
        }
        TaskKind::Parity | TaskKind::Modsum { .. } => match (emitted.first(), prompt.answer_key.first()) {
            (Some(a), Some(b)) if a == b => 1.0,
            _ => 0.0,
        },
    }
}

/// One JSON object per line: `{"id", "tokens", "answer_key"}`.
pub fn write_prompts<W: Write>(prompts: &[Prompt], mut w: W) -> Result<(), TaskError> {
    for p in prompts {
        serde_json::to_writer(&mut w, p).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_prompts<R: BufRead>(r: R) -> Result<Vec<Prompt>, TaskError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p = serde_json::from_str(&line).map_err(|e| TaskError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(p);
    }
    Ok(out)
}
