//! Spoken-command normalisation, parsing and canonical rendering.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_MOVE_CELLS: u32 = 50;
pub const MAX_REPEAT: u32 = 100;
pub const MAX_DEPTH: usize = 8;

const FILLERS: [&str; 3] = ["please", "uh", "um"];
const NUMBER_WORDS: [&str; 21] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
    "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
];
const STMT_START: &str =
    "\"move\", \"go\", \"turn\", \"repeat\", \"where\", \"what\", \"yes\", \"no\", \"left\", \"right\", \"forward\" or \"stop\"";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    /// Token position; equals the token count when input ended early.
    pub index: usize,
    pub lexeme: String,
    pub expected: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "token {} ({}): expected {}", self.index, self.lexeme, self.expected)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommandError {
    #[error("nothing to parse after normalization")]
    EmptyUtterance,
    #[error("parse error at {0}")]
    Parse(ParseError),
    #[error("limit exceeded at token {index}: {detail}")]
    LimitExceeded { index: usize, detail: String },
    #[error("recognition rate of an empty corpus is undefined")]
    EmptyCorpus,
    #[error("script line {line}: {detail}")]
    Script { line: usize, detail: String },
}

impl CommandError {
    /// Token index the error points at, if any.
    pub fn index(&self) -> Option<usize> {
        match self {
            CommandError::Parse(p) => Some(p.index),
            CommandError::LimitExceeded { index, .. } => Some(*index),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnDir {
    Left,
    Right,
    Around,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Answer {
    Yes,
    No,
    Left,
    Right,
    Forward,
}

impl Answer {
    pub fn word(self) -> &'static str {
        match self {
            Answer::Yes => "yes",
            Answer::No => "no",
            Answer::Left => "left",
            Answer::Right => "right",
            Answer::Forward => "forward",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommandAst {
    Move { cells: u32 },
    Turn { dir: TurnDir },
    Repeat { count: u32, body: Vec<CommandAst> },
    QueryPosition,
    QuerySurroundings,
    Answer { answer: Answer },
    Go,
    Stop,
}

/// Lowercases, strips punctuation, splits parentheses into their own tokens,
/// maps number words to digits and drops fillers.
pub fn normalize(text: &str) -> Result<Vec<String>, CommandError> {
    let mut cleaned = String::with_capacity(text.len());
    for ch in text.chars().flat_map(char::to_lowercase) {
        match ch {
            '.' | ',' | '!' | '?' | ';' | ':' | '\u{2026}' => cleaned.push(' '),
            '(' | ')' => {
                cleaned.push(' ');
                cleaned.push(ch);
                cleaned.push(' ');
            }
            c => cleaned.push(c),
        }
    }
    let tokens: Vec<String> = cleaned
        .split_whitespace()
        .filter(|t| !FILLERS.contains(t))
        .map(|t| match NUMBER_WORDS.iter().position(|w| *w == t) {
            Some(n) => n.to_string(),
            None => t.to_string(),
        })
        .collect();
    if tokens.is_empty() {
        return Err(CommandError::EmptyUtterance);
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: &'a [String],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.tokens.get(self.pos).map(String::as_str)
    }

    fn error(&self, expected: &str) -> CommandError {
        CommandError::Parse(ParseError {
            index: self.pos,
            lexeme: self.peek().unwrap_or("<end>").to_string(),
            expected: expected.to_string(),
        })
    }

    fn expect(&mut self, word: &str) -> Result<(), CommandError> {
        if self.peek() == Some(word) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("\"{word}\"")))
        }
    }

    fn int(&mut self, lo: u32, hi: u32, what: &str) -> Result<u32, CommandError> {
        let Some(tok) = self.peek().filter(|t| t.bytes().all(|b| b.is_ascii_digit())) else {
            return Err(self.error("a number"));
        };
        let value = tok.parse::<u64>().unwrap_or(u64::MAX);
        if value < lo as u64 || value > hi as u64 {
            return Err(CommandError::LimitExceeded {
                index: self.pos,
                detail: format!("{what} {tok} outside [{lo}, {hi}]"),
            });
        }
        self.pos += 1;
        Ok(value as u32)
    }

    fn is_int(&self) -> bool {
        self.peek()
            .is_some_and(|t| !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit()))
    }

    fn stmts(&mut self, depth: usize, until_close: bool) -> Result<Vec<CommandAst>, CommandError> {
        let mut out = vec![self.stmt(depth)?];
        while let Some(tok) = self.peek() {
            if until_close && tok == ")" {
                break;
            }
            out.push(self.stmt(depth)?);
        }
        Ok(out)
    }

    fn stmt(&mut self, depth: usize) -> Result<CommandAst, CommandError> {
        let Some(tok) = self.peek() else {
            return Err(self.error(STMT_START));
        };
        self.pos += 1;
        let ast = match tok {
            "move" => self.move_rest()?,
            "go" if self.peek() == Some("forward") => self.move_rest()?,
            "go" => CommandAst::Go,
            "stop" => CommandAst::Stop,
            "turn" => {
                let dir = match self.peek() {
                    Some("left") => TurnDir::Left,
                    Some("right") => TurnDir::Right,
                    Some("around") => TurnDir::Around,
                    _ => return Err(self.error("\"left\", \"right\" or \"around\"")),
                };
                self.pos += 1;
                CommandAst::Turn { dir }
            }
            "repeat" => {
                if depth >= MAX_DEPTH {
                    return Err(CommandError::LimitExceeded {
                        index: self.pos - 1,
                        detail: format!("repeat nesting deeper than {MAX_DEPTH}"),
                    });
                }
                let count = self.int(1, MAX_REPEAT, "repeat count")?;
                if self.peek() == Some("times") {
                    self.pos += 1;
                }
                self.expect("(")?;
                let body = self.stmts(depth + 1, true)?;
                self.expect(")")?;
                CommandAst::Repeat { count, body }
            }
            "where" => {
                self.expect("am")?;
                self.expect("i")?;
                CommandAst::QueryPosition
            }
            "what" => {
                self.expect("is")?;
                self.expect("around")?;
                if self.peek() == Some("me") {
                    self.pos += 1;
                }
                CommandAst::QuerySurroundings
            }
            "yes" => CommandAst::Answer { answer: Answer::Yes },
            "no" => CommandAst::Answer { answer: Answer::No },
            "left" => CommandAst::Answer { answer: Answer::Left },
            "right" => CommandAst::Answer { answer: Answer::Right },
            "forward" => CommandAst::Answer { answer: Answer::Forward },
            _ => {
                self.pos -= 1;
                return Err(self.error(STMT_START));
            }
        };
        Ok(ast)
    }

    fn move_rest(&mut self) -> Result<CommandAst, CommandError> {
        self.expect("forward")?;
        let cells = if self.is_int() {
            self.int(1, MAX_MOVE_CELLS, "move distance")?
        } else {
            1
        };
        Ok(CommandAst::Move { cells })
    }
}

/// Parses a whole utterance; any error rejects all of it.
pub fn parse(tokens: &[String]) -> Result<Vec<CommandAst>, CommandError> {
    let mut p = Parser { tokens, pos: 0 };
    let program = p.stmts(0, false)?;
    // A stray ")" stops `stmts` only inside a repeat, so reaching here means
    // every token was consumed.
    debug_assert_eq!(p.pos, tokens.len());
    Ok(program)
}

pub fn parse_text(text: &str) -> Result<Vec<CommandAst>, CommandError> {
    parse(&normalize(text)?)
}

/// Canonical text form. `[Go, Answer(Forward)]` has no text form of its own:
/// it renders as "go forward", which reads back as a single move.
pub fn render(program: &[CommandAst]) -> String {
    program.iter().map(render_one).collect::<Vec<_>>().join(" ")
}

fn render_one(ast: &CommandAst) -> String {
    match ast {
        CommandAst::Move { cells } => format!("move forward {cells}"),
        CommandAst::Turn { dir } => match dir {
            TurnDir::Left => "turn left".into(),
            TurnDir::Right => "turn right".into(),
            TurnDir::Around => "turn around".into(),
        },
        CommandAst::Repeat { count, body } => format!("repeat {count} times ({})", render(body)),
        CommandAst::QueryPosition => "where am i".into(),
        CommandAst::QuerySurroundings => "what is around me".into(),
        CommandAst::Answer { answer } => answer.word().into(),
        CommandAst::Go => "go".into(),
        CommandAst::Stop => "stop".into(),
    }
}

/// Parsed fraction of a corpus of (utterance, parsed) outcomes.
pub fn recognition_rate(outcomes: &[(String, bool)]) -> Result<f64, CommandError> {
    if outcomes.is_empty() {
        return Err(CommandError::EmptyCorpus);
    }
    let ok = outcomes.iter().filter(|(_, parsed)| *parsed).count();
    Ok(ok as f64 / outcomes.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptLine {
    /// 1-based line number in the source file.
    pub line: usize,
    pub text: String,
    pub expect_error: bool,
}

/// Reads an utterance script: one utterance per line, `#` comments, and
/// `@expect-error` marking the next utterance as one that must not parse.
pub fn parse_script(source: &str) -> Result<Vec<ScriptLine>, CommandError> {
    let mut out = Vec::new();
    let mut pending: Option<usize> = None;
    for (i, raw) in source.lines().enumerate() {
        let text = raw.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        if text == "@expect-error" {
            if pending.is_some() {
                return Err(CommandError::Script {
                    line: i + 1,
                    detail: "two @expect-error markers in a row".into(),
                });
            }
            pending = Some(i + 1);
            continue;
        }
        out.push(ScriptLine {
            line: i + 1,
            text: text.to_string(),
            expect_error: pending.take().is_some(),
        });
    }
    if let Some(line) = pending {
        return Err(CommandError::Script {
            line,
            detail: "@expect-error is not followed by an utterance".into(),
        });
    }
    Ok(out)
}

/// Parses every utterance of a script, pairing each with whether it parsed.
pub fn evaluate_script(lines: &[ScriptLine]) -> Vec<(String, bool)> {
    lines
        .iter()
        .map(|l| (l.text.clone(), parse_text(&l.text).is_ok()))
        .collect()
}
