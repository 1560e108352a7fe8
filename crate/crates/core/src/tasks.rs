//! Synthetic verifiable-reward environment.
//!
//! Tasks are left-nested integer arithmetic chains. The prompt shows the
//! full nested expression (`((7+5)*2)-4=?`), the gold trace expands it one
//! step per line and ends in an answer block:
//!
//! ```text
//! 7+5=12
//! 12*2=24
//! 24-4=20
//! <answer>20</answer>
//! ```
//!
//! Digits of intermediate results are causally pivotal for the final
//! answer while connectives (`=`, newlines, operand echoes) are filler,
//! which is exactly the structure the attribution studies probe.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Fixed symbol-level vocabulary shared by tasks and policy.
pub mod vocab {
    use crate::error::{Error, Result};

    pub const PAD: u32 = 0; // doubles as the perturbation mask token
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const ANS_OPEN: u32 = 3; // "<answer>"
    pub const ANS_CLOSE: u32 = 4; // "</answer>"
    pub const DIGIT0: u32 = 5; // '0'..'9' are 5..=14

    pub const PLUS: u32 = 15;
    pub const MINUS: u32 = 16;
    pub const TIMES: u32 = 17;
    pub const LPAREN: u32 = 18;
    pub const RPAREN: u32 = 19;
    pub const EQUALS: u32 = 20;
    pub const QMARK: u32 = 21;
    pub const NEWLINE: u32 = 22;

    /// Number of distinct symbols actually used.
    pub const USED: usize = 23;

    fn char_id(c: char) -> Option<u32> {
        match c {
            '0'..='9' => Some(DIGIT0 + (c as u32 - '0' as u32)),
            '+' => Some(PLUS),
            '-' => Some(MINUS),
            '*' => Some(TIMES),
            '(' => Some(LPAREN),
            ')' => Some(RPAREN),
            '=' => Some(EQUALS),
            '?' => Some(QMARK),
            '\n' => Some(NEWLINE),
            _ => None,
        }
    }

    /// Encodes text; `<answer>` and `</answer>` become single tokens.
    pub fn encode(text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            if let Some(r) = rest.strip_prefix("</answer>") {
                out.push(ANS_CLOSE);
                rest = r;
            } else if let Some(r) = rest.strip_prefix("<answer>") {
                out.push(ANS_OPEN);
                rest = r;
            } else {
                let c = rest.chars().next().unwrap();
                let id = char_id(c)
                    .ok_or_else(|| Error::Contract(format!("unencodable character {c:?}")))?;
                out.push(id);
                rest = &rest[c.len_utf8()..];
            }
        }
        Ok(out)
    }

    pub fn decode_token(id: u32) -> &'static str {
        match id {
            PAD => "␣",
            BOS => "",
            EOS => "",
            ANS_OPEN => "<answer>",
            ANS_CLOSE => "</answer>",
            PLUS => "+",
            MINUS => "-",
            TIMES => "*",
            LPAREN => "(",
            RPAREN => ")",
            EQUALS => "=",
            QMARK => "?",
            NEWLINE => "\n",
            d if (DIGIT0..DIGIT0 + 10).contains(&d) => {
                const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
                DIGITS[(d - DIGIT0) as usize]
            }
            _ => "?",
        }
    }

    pub fn decode(ids: &[u32]) -> String {
        ids.iter().map(|&i| decode_token(i)).collect()
    }
}

/// One generated problem with its gold reasoning trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub seed: u64,
    /// Number of arithmetic steps, 1..=6.
    pub difficulty: u32,
    /// BOS + encoded expression + `=?` + newline.
    pub prompt: Vec<u32>,
    pub gold_answer: String,
    /// Encoded step-by-step trace ending in the answer block + EOS.
    pub gold_trace: Vec<u32>,
}

/// Rule-based reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub accuracy: f64,
    pub format: f64,
    pub overall: f64,
}

/// Location of the first well-formed answer block's content within the
/// response, plus the extracted string.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerSpan {
    /// Response position of the first content token (just after the
    /// opening tag).
    pub start: usize,
    /// One past the last content token (the closing-tag position).
    pub end: usize,
    pub text: String,
}

/// Format-reward weight: `overall = accuracy + W_FORMAT * format`.
pub const W_FORMAT: f64 = 0.1;

/// Deterministic task generation: identical `(seed, difficulty)` yields an
/// identical instance. Intermediate values stay within `0..=99`.
pub fn generate_task(seed: u64, difficulty: u32) -> Result<TaskInstance> {
    if !(1..=6).contains(&difficulty) {
        return Err(Error::Contract(format!("difficulty {difficulty} outside 1..=6")));
    }
    let mut r = rng::substream(seed, "task-gen", difficulty as u64);
    let mut value: i64 = r.gen_range(2..=19);
    let mut expr = value.to_string();
    let mut steps: Vec<String> = Vec::new();
    for _ in 0..difficulty {
        let prev = value;
        // Pick among ops that keep the running value in range.
        let mut candidates: Vec<(char, i64)> = Vec::new();
        let add: i64 = r.gen_range(1..=9);
        if prev + add <= 99 {
            candidates.push(('+', add));
        }
        let sub: i64 = r.gen_range(1..=9);
        if prev - sub >= 0 {
            candidates.push(('-', sub));
        }
        let mul: i64 = r.gen_range(2..=9);
        if prev * mul <= 99 {
            candidates.push(('*', mul));
        }
        let (op, operand) = candidates[r.gen_range(0..candidates.len())];
        value = match op {
            '+' => prev + operand,
            '-' => prev - operand,
            _ => prev * operand,
        };
        expr = if steps.is_empty() {
            format!("{expr}{op}{operand}")
        } else {
            format!("({expr}){op}{operand}")
        };
        steps.push(format!("{prev}{op}{operand}={value}"));
    }
    let gold_answer = value.to_string();
    let mut prompt = vec![vocab::BOS];
    prompt.extend(vocab::encode(&format!("{expr}=?\n"))?);
    let trace_text = format!("{}\n<answer>{gold_answer}</answer>", steps.join("\n"));
    let mut gold_trace = vocab::encode(&trace_text)?;
    gold_trace.push(vocab::EOS);
    Ok(TaskInstance { seed, difficulty, prompt, gold_answer, gold_trace })
}

/// First well-formed `<answer>...</answer>` block, scanning tokens the way
/// a non-greedy regex scans characters. Absence is a value, not an error.
pub fn extract_answer_span(response: &[u32]) -> Option<AnswerSpan> {
    let mut i = 0;
    while i < response.len() {
        if response[i] == vocab::ANS_OPEN {
            if let Some(close) =
                response[i + 1..].iter().position(|&t| t == vocab::ANS_CLOSE)
            {
                let start = i + 1;
                let end = start + close;
                return Some(AnswerSpan {
                    start,
                    end,
                    text: vocab::decode(&response[start..end]),
                });
            }
        }
        i += 1;
    }
    None
}

/// Pure function of `(response, instance)`.
pub fn compute_reward(response: &[u32], task: &TaskInstance) -> RewardBreakdown {
    match extract_answer_span(response) {
        Some(span) => {
            let accuracy = if span.text.trim() == task.gold_answer { 1.0 } else { 0.0 };
            RewardBreakdown { accuracy, format: 1.0, overall: accuracy + W_FORMAT }
        }
        None => RewardBreakdown { accuracy: 0.0, format: 0.0, overall: 0.0 },
    }
}

#[derive(Serialize, Deserialize)]
struct TaskLine {
    seed: u64,
    difficulty: u32,
    prompt: String,
    gold_answer: String,
    gold_trace: String,
}

/// One instance per line, text fields decoded for readability.
pub fn dump_jsonl(tasks: &[TaskInstance], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tasks {
        let line = TaskLine {
            seed: t.seed,
            difficulty: t.difficulty,
            prompt: vocab::decode(&t.prompt),
            gold_answer: t.gold_answer.clone(),
            gold_trace: vocab::decode(&t.gold_trace),
        };
        serde_json::to_writer(&mut f, &line)
            .map_err(|e| Error::Contract(format!("jsonl encode: {e}")))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tl: TaskLine = serde_json::from_str(&line)
            .map_err(|e| Error::Contract(format!("jsonl decode: {e}")))?;
        let mut prompt = vec![vocab::BOS];
        prompt.extend(vocab::encode(&tl.prompt)?);
        let mut gold_trace = vocab::encode(&tl.gold_trace)?;
        gold_trace.push(vocab::EOS);
        out.push(TaskInstance {
            seed: tl.seed,
            difficulty: tl.difficulty,
            prompt,
            gold_answer: tl.gold_answer,
            gold_trace,
        });
    }
    Ok(out)
}
