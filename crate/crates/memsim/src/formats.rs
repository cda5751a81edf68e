//! Versioned text formats for scripts, banks, and parameter vectors.
//!
//! All three are line-based with a header line and an `end` sentinel, stable
//! field order, and exact round-trips (floats use the shortest
//! representation that parses back bit-identically). Payload token lists sit
//! after a ` | ` separator; an empty token list is written as `-`.

use std::collections::BTreeSet;
use std::fmt;

use memsim_core::memory_bank::{MemoryBank, MemoryEntry, MemoryId};
use memsim_core::policy::PolicyParams;
use memsim_core::synth_env::{DialogueScript, FactId, FactKind, FactSpec, QAItem, Statement};

pub const SCRIPT_HEADER: &str = "MEMSIM-SCRIPT v1";
pub const BANK_HEADER: &str = "MEMSIM-BANK v1";
pub const PARAMS_HEADER: &str = "MEMSIM-PARAMS v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatError {
    /// Byte offset of the line where parsing stopped.
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at byte offset {}", self.message, self.offset)
    }
}

impl std::error::Error for FormatError {}

fn err<T>(offset: usize, message: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError {
        offset,
        message: message.into(),
    })
}

/// Line reader with one-line lookahead, tracking byte offsets.
struct Lines<'a> {
    text: &'a str,
    pos: usize,
    peeked: Option<(usize, &'a str)>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            text,
            pos: 0,
            peeked: None,
        }
    }

    fn advance(&mut self) -> Option<(usize, &'a str)> {
        while self.pos < self.text.len() {
            let start = self.pos;
            let rest = &self.text[start..];
            let (line, advance) = match rest.find('\n') {
                Some(i) => (&rest[..i], i + 1),
                None => (rest, rest.len()),
            };
            self.pos += advance;
            let trimmed = line.trim_end_matches('\r');
            if !trimmed.trim().is_empty() {
                return Some((start, trimmed));
            }
        }
        None
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        self.peeked.take().or_else(|| self.advance())
    }

    fn peek(&mut self) -> Option<(usize, &'a str)> {
        if self.peeked.is_none() {
            self.peeked = self.advance();
        }
        self.peeked
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str), FormatError> {
        match self.next() {
            Some(pair) => Ok(pair),
            None => err(self.text.len(), format!("truncated file, expected {what}")),
        }
    }

    /// Consumes a line of the form `<key> <raw>` and returns the raw part.
    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str), FormatError> {
        let (off, line) = self.expect(key)?;
        match line.strip_prefix(key).and_then(|r| r.strip_prefix(' ')) {
            Some(raw) => Ok((off, raw)),
            None => err(off, format!("expected `{key}`, found `{line}`")),
        }
    }
}

fn join_tokens(tokens: &[String]) -> String {
    if tokens.is_empty() {
        "-".to_string()
    } else {
        tokens.join(" ")
    }
}

fn split_tokens(text: &str) -> Vec<String> {
    if text.trim() == "-" {
        Vec::new()
    } else {
        text.split_whitespace().map(str::to_string).collect()
    }
}

fn parse_usize(offset: usize, field: &str, raw: &str) -> Result<usize, FormatError> {
    raw.parse().map_err(|_| FormatError {
        offset,
        message: format!("bad {field} value `{raw}`"),
    })
}

fn parse_u64(offset: usize, field: &str, raw: &str) -> Result<u64, FormatError> {
    raw.parse().map_err(|_| FormatError {
        offset,
        message: format!("bad {field} value `{raw}`"),
    })
}

// --- script ---------------------------------------------------------------

pub fn serialize_script(script: &DialogueScript) -> String {
    let mut out = String::new();
    out.push_str(SCRIPT_HEADER);
    out.push('\n');
    out.push_str(&format!("seed {}\n", script.seed));
    out.push_str(&format!(
        "speakers {} {}\n",
        script.speakers[0], script.speakers[1]
    ));
    out.push_str(&format!("sessions {}\n", script.session_count()));
    out.push_str(&format!("chunks {}\n", script.chunk_count()));
    for (t0, session) in script.sessions.iter().enumerate() {
        out.push_str(&format!(
            "session {} time {}\n",
            t0 + 1,
            script.session_times[t0]
        ));
        for (k0, chunk) in session.iter().enumerate() {
            out.push_str(&format!("chunk {}\n", k0 + 1));
            for stmt in chunk {
                let fact = match stmt.fact {
                    Some(FactId(i)) => i.to_string(),
                    None => "-".to_string(),
                };
                out.push_str(&format!(
                    "stmt {} {} fact {} | {}\n",
                    stmt.dia_id,
                    stmt.speaker,
                    fact,
                    join_tokens(&stmt.text)
                ));
            }
        }
    }
    out.push_str(&format!("facts {}\n", script.facts.len()));
    for (i, fact) in script.facts.iter().enumerate() {
        let supersedes = match fact.supersedes {
            Some(FactId(p)) => p.to_string(),
            None => "-".to_string(),
        };
        out.push_str(&format!(
            "fact {} subject {} attribute {} kind {} supersedes {} introduced {} {} | {}\n",
            i,
            fact.subject,
            fact.attribute,
            fact.kind,
            supersedes,
            fact.introduced_at.0,
            fact.introduced_at.1,
            join_tokens(&fact.value)
        ));
    }
    out.push_str(&format!("qa {}\n", script.qa_items.len()));
    for qa in &script.qa_items {
        let evidence: Vec<&str> = qa.evidence.iter().map(String::as_str).collect();
        out.push_str(&format!(
            "qa {} evidence {} | {} | {}\n",
            qa.attributed_session,
            evidence.join(","),
            join_tokens(&qa.question),
            join_tokens(&qa.gold_answer)
        ));
    }
    out.push_str("end\n");
    out
}

fn parse_statement(off: usize, line: &str) -> Result<Statement, FormatError> {
    let rest = line
        .strip_prefix("stmt ")
        .expect("caller checked the prefix");
    let (head, payload) = match rest.split_once(" | ") {
        Some(pair) => pair,
        None => return err(off, "statement missing ` | ` payload"),
    };
    let fields: Vec<&str> = head.split_whitespace().collect();
    if fields.len() != 4 || fields[2] != "fact" {
        return err(off, "statement fields must be `<dia> <speaker> fact <id>`");
    }
    let fact = match fields[3] {
        "-" => None,
        raw => Some(FactId(parse_usize(off, "fact ref", raw)?)),
    };
    Ok(Statement {
        dia_id: fields[0].to_string(),
        speaker: fields[1].to_string(),
        fact,
        text: split_tokens(payload),
    })
}

pub fn parse_script(text: &str) -> Result<DialogueScript, FormatError> {
    let mut lines = Lines::new(text);
    let (off, header) = lines.expect("header")?;
    if header != SCRIPT_HEADER {
        return err(off, format!("unrecognized header `{header}`"));
    }

    let (off, raw) = lines.keyed("seed")?;
    let seed = parse_u64(off, "seed", raw)?;
    let (off, raw) = lines.keyed("speakers")?;
    let speakers: Vec<&str> = raw.split_whitespace().collect();
    if speakers.len() != 2 {
        return err(off, "expected exactly two speakers");
    }
    let speakers = [speakers[0].to_string(), speakers[1].to_string()];
    let (off, raw) = lines.keyed("sessions")?;
    let session_count = parse_usize(off, "sessions", raw)?;
    let (off, raw) = lines.keyed("chunks")?;
    let chunk_count = parse_usize(off, "chunks", raw)?;

    let mut sessions = Vec::with_capacity(session_count);
    let mut session_times = Vec::with_capacity(session_count);
    for t in 1..=session_count {
        let (off, raw) = lines.keyed("session")?;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 3 || fields[1] != "time" {
            return err(off, "session line must be `session <t> time <stamp>`");
        }
        let idx = parse_usize(off, "session index", fields[0])?;
        if idx != t {
            return err(off, format!("expected session {t}, found {idx}"));
        }
        session_times.push(parse_u64(off, "time", fields[2])?);

        let mut session = Vec::with_capacity(chunk_count);
        for k in 1..=chunk_count {
            let (off, line) = lines.expect("chunk line")?;
            if line != format!("chunk {k}") {
                return err(off, format!("expected `chunk {k}`, found `{line}`"));
            }
            let mut chunk = Vec::new();
            while let Some((off, line)) = lines.peek() {
                if !line.starts_with("stmt ") {
                    break;
                }
                lines.next();
                chunk.push(parse_statement(off, line)?);
            }
            session.push(chunk);
        }
        sessions.push(session);
    }

    let (off, raw) = lines.keyed("facts")?;
    let fact_count = parse_usize(off, "facts", raw)?;
    let mut facts = Vec::with_capacity(fact_count);
    for i in 0..fact_count {
        let (off, raw) = lines.keyed("fact")?;
        let (head, payload) = match raw.split_once(" | ") {
            Some(pair) => pair,
            None => return err(off, "fact missing ` | ` payload"),
        };
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() != 12
            || fields[1] != "subject"
            || fields[3] != "attribute"
            || fields[5] != "kind"
            || fields[7] != "supersedes"
            || fields[9] != "introduced"
        {
            return err(off, "malformed fact fields");
        }
        let idx = parse_usize(off, "fact index", fields[0])?;
        if idx != i {
            return err(off, format!("expected fact {i}, found {idx}"));
        }
        let kind = match fields[6] {
            "new" => FactKind::New,
            "refinement" => FactKind::Refinement,
            "contradiction" => FactKind::Contradiction,
            other => return err(off, format!("unknown fact kind `{other}`")),
        };
        let supersedes = match fields[8] {
            "-" => None,
            raw => Some(FactId(parse_usize(off, "supersedes", raw)?)),
        };
        facts.push(FactSpec {
            subject: fields[2].to_string(),
            attribute: fields[4].to_string(),
            kind,
            supersedes,
            introduced_at: (
                parse_usize(off, "introduced session", fields[10])?,
                parse_usize(off, "introduced chunk", fields[11])?,
            ),
            value: split_tokens(payload),
        });
    }

    let (off, raw) = lines.keyed("qa")?;
    let qa_count = parse_usize(off, "qa", raw)?;
    let mut qa_items = Vec::with_capacity(qa_count);
    for _ in 0..qa_count {
        let (off, raw) = lines.keyed("qa")?;
        let (attributed_raw, tail) = match raw.split_once(" evidence ") {
            Some(pair) => pair,
            None => return err(off, "qa missing evidence"),
        };
        let attributed = parse_usize(off, "attributed session", attributed_raw)?;
        let mut segments = tail.splitn(3, " | ");
        let evidence_raw = segments.next().unwrap_or("");
        let question = match segments.next() {
            Some(q) => split_tokens(q),
            None => return err(off, "qa missing question payload"),
        };
        let gold = match segments.next() {
            Some(g) => split_tokens(g),
            None => return err(off, "qa missing answer payload"),
        };
        let evidence: BTreeSet<String> = evidence_raw.split(',').map(str::to_string).collect();
        qa_items.push(QAItem {
            question,
            gold_answer: gold,
            evidence,
            attributed_session: attributed,
        });
    }

    let (off, line) = lines.expect("`end`")?;
    if line != "end" {
        return err(off, format!("expected `end`, found `{line}`"));
    }

    Ok(DialogueScript {
        speakers,
        sessions,
        session_times,
        facts,
        qa_items,
        seed,
    })
}

// --- bank ------------------------------------------------------------------

pub fn serialize_bank(bank: &MemoryBank) -> String {
    let mut out = String::new();
    out.push_str(BANK_HEADER);
    out.push('\n');
    out.push_str(&format!("id_counter {}\n", bank.id_counter));
    out.push_str(&format!("entries {}\n", bank.entries.len()));
    for entry in &bank.entries {
        let dias: Vec<&str> = entry.dia_ids.iter().map(String::as_str).collect();
        out.push_str(&format!(
            "entry {} speaker {} time {} dias {} | {}\n",
            entry.memory_id,
            entry.speaker,
            entry.session_time,
            dias.join(","),
            join_tokens(&entry.content)
        ));
    }
    out.push_str("end\n");
    out
}

pub fn parse_bank(text: &str) -> Result<MemoryBank, FormatError> {
    let mut lines = Lines::new(text);
    let (off, header) = lines.expect("header")?;
    if header != BANK_HEADER {
        return err(off, format!("unrecognized header `{header}`"));
    }
    let (off, raw) = lines.keyed("id_counter")?;
    let id_counter = parse_u64(off, "id_counter", raw)?;
    let (off, raw) = lines.keyed("entries")?;
    let count = parse_usize(off, "entries", raw)?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let (off, raw) = lines.keyed("entry")?;
        let (head, payload) = match raw.split_once(" | ") {
            Some(pair) => pair,
            None => return err(off, "entry missing ` | ` payload"),
        };
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() != 7 || fields[1] != "speaker" || fields[3] != "time" || fields[5] != "dias"
        {
            return err(off, "malformed entry fields");
        }
        let dia_ids: BTreeSet<String> = fields[6].split(',').map(str::to_string).collect();
        entries.push(MemoryEntry {
            memory_id: MemoryId(parse_u64(off, "memory_id", fields[0])?),
            speaker: fields[2].to_string(),
            session_time: parse_u64(off, "session_time", fields[4])?,
            dia_ids,
            content: split_tokens(payload),
        });
    }
    let (off, line) = lines.expect("`end`")?;
    if line != "end" {
        return err(off, format!("expected `end`, found `{line}`"));
    }
    Ok(MemoryBank {
        entries,
        id_counter,
    })
}

// --- params ----------------------------------------------------------------

pub fn serialize_params(params: &PolicyParams) -> String {
    let mut out = String::new();
    out.push_str(PARAMS_HEADER);
    out.push('\n');
    out.push_str(&format!("dim {}\n", params.theta.len()));
    for w in &params.theta {
        out.push_str(&format!("{w:?}\n"));
    }
    out.push_str("end\n");
    out
}

pub fn parse_params(text: &str) -> Result<PolicyParams, FormatError> {
    let mut lines = Lines::new(text);
    let (off, header) = lines.expect("header")?;
    if header != PARAMS_HEADER {
        return err(off, format!("unrecognized header `{header}`"));
    }
    let (off, raw) = lines.keyed("dim")?;
    let dim = parse_usize(off, "dim", raw)?;
    let mut theta = Vec::with_capacity(dim);
    for _ in 0..dim {
        let (off, line) = lines.expect("weight")?;
        let w: f64 = line.trim().parse().map_err(|_| FormatError {
            offset: off,
            message: format!("bad weight `{line}`"),
        })?;
        theta.push(w);
    }
    let (off, line) = lines.expect("`end`")?;
    if line != "end" {
        return err(off, format!("expected `end`, found `{line}`"));
    }
    Ok(PolicyParams { theta })
}
