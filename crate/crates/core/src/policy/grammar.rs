//! Tag grammar for one generated turn:
//! `<think>…</think>? (<tool_call>…</tool_call>)* (<answer>…</answer>)?`.
//!
//! Whitespace between regions is ignored. A region may not contain another
//! tag. Each tool-call region holds exactly one call record; an answer must
//! carry a score in `[1, 5]`.

use std::fmt::Write as _;

use crate::toolbox::ToolCall;
use crate::trajectory::{MAX_SCORE, MIN_SCORE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    Think,
    ToolCall,
    Answer,
}

impl Tag {
    const ALL: [Tag; 3] = [Tag::Think, Tag::ToolCall, Tag::Answer];

    fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::ToolCall => "tool_call",
            Tag::Answer => "answer",
        }
    }
}

/// A region of a parsed turn, in emission order.
#[derive(Debug, Clone, PartialEq)]
pub enum ParsedSegment {
    Think {
        text: String,
        tokens: u32,
    },
    ToolCall {
        call: ToolCall,
        tokens: u32,
    },
    /// `score` is `None` when the answer carries no in-range score.
    Answer {
        rationale: String,
        score: Option<f64>,
        tokens: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub segments: Vec<ParsedSegment>,
    pub format_ok: bool,
}

impl ParsedOutput {
    pub fn think(&self) -> Option<(&str, u32)> {
        self.segments.iter().find_map(|s| match s {
            ParsedSegment::Think { text, tokens } => Some((text.as_str(), *tokens)),
            _ => None,
        })
    }

    pub fn calls(&self) -> (Vec<ToolCall>, u32) {
        let mut calls = Vec::new();
        let mut total = 0;
        for s in &self.segments {
            if let ParsedSegment::ToolCall { call, tokens } = s {
                calls.push(call.clone());
                total += tokens;
            }
        }
        (calls, total)
    }

    /// The answer's rationale, score and token count, if a valid score was given.
    pub fn answer(&self) -> Option<(&str, f64, u32)> {
        self.segments.iter().find_map(|s| match s {
            ParsedSegment::Answer {
                rationale,
                score: Some(score),
                tokens,
            } => Some((rationale.as_str(), *score, *tokens)),
            _ => None,
        })
    }
}

struct Region<'a> {
    tag: Tag,
    body: &'a str,
}

/// Parses one turn. `segment_tokens`, when it has one entry per region,
/// overrides the whitespace token estimate.
pub fn parse_output(text: &str, segment_tokens: Option<&[u32]>) -> ParsedOutput {
    let (regions, mut format_ok) = split_regions(text);
    if regions.is_empty() {
        format_ok = false;
    }
    let counts = segment_tokens.filter(|c| c.len() == regions.len());
    let mut segments = Vec::with_capacity(regions.len());
    let mut answered = false;
    for (i, r) in regions.iter().enumerate() {
        let tokens = counts.map_or_else(|| whitespace_tokens(r.body), |c| c[i]);
        // think only first, nothing after the answer
        if answered || (r.tag == Tag::Think && i > 0) {
            format_ok = false;
        }
        answered |= r.tag == Tag::Answer;
        match r.tag {
            Tag::Think => segments.push(ParsedSegment::Think {
                text: r.body.trim().to_string(),
                tokens,
            }),
            Tag::ToolCall => match ToolCall::parse(r.body.trim()) {
                Ok(call) => segments.push(ParsedSegment::ToolCall { call, tokens }),
                Err(_) => format_ok = false,
            },
            Tag::Answer => {
                let (rationale, score) = split_answer(r.body);
                if score.is_none() {
                    format_ok = false;
                }
                segments.push(ParsedSegment::Answer {
                    rationale,
                    score,
                    tokens,
                });
            }
        }
    }
    ParsedOutput {
        segments,
        format_ok,
    }
}

fn whitespace_tokens(body: &str) -> u32 {
    body.split_whitespace().count() as u32
}

fn next_tag(text: &str, from: usize) -> Option<(usize, usize, Tag, bool)> {
    let mut best: Option<(usize, usize, Tag, bool)> = None;
    for tag in Tag::ALL {
        for close in [false, true] {
            let pat = if close {
                format!("</{}>", tag.name())
            } else {
                format!("<{}>", tag.name())
            };
            if let Some(p) = text[from..].find(&pat) {
                let at = from + p;
                if best.is_none_or(|b| at < b.0) {
                    best = Some((at, at + pat.len(), tag, close));
                }
            }
        }
    }
    best
}

/// Splits `text` into tagged regions, best effort. Returns `false` if any
/// stray text, nesting, or unbalanced tag was seen.
fn split_regions(text: &str) -> (Vec<Region<'_>>, bool) {
    let mut regions = Vec::new();
    let mut ok = true;
    let mut pos = 0;
    let mut open: Option<(Tag, usize)> = None;
    while let Some((start, end, tag, close)) = next_tag(text, pos) {
        match (open, close) {
            (None, false) => {
                if !text[pos..start].trim().is_empty() {
                    ok = false;
                }
                open = Some((tag, end));
            }
            (None, true) => ok = false,
            (Some((t, body_start)), true) if t == tag => {
                regions.push(Region {
                    tag,
                    body: &text[body_start..start],
                });
                open = None;
            }
            (Some((t, body_start)), _) => {
                // nested or mismatched: close the open region here
                ok = false;
                regions.push(Region {
                    tag: t,
                    body: &text[body_start..start],
                });
                open = if close { None } else { Some((tag, end)) };
            }
        }
        pos = end;
    }
    match open {
        Some((t, body_start)) => {
            ok = false;
            regions.push(Region {
                tag: t,
                body: &text[body_start..],
            });
        }
        None => {
            if !text[pos..].trim().is_empty() {
                ok = false;
            }
        }
    }
    (regions, ok)
}

/// Extracts the score from an answer body: a `score:` label wins over the
/// first bare number. Returns the remaining text as the rationale.
pub fn split_answer(body: &str) -> (String, Option<f64>) {
    let found = labelled_score(body).or_else(|| first_number(body, 0));
    match found {
        Some((start, end, v)) if (MIN_SCORE..=MAX_SCORE).contains(&v) => {
            let mut rest = String::with_capacity(body.len());
            rest.push_str(body[..start].trim_end());
            let tail = body[end..].trim_start();
            if !rest.is_empty() && !tail.is_empty() {
                rest.push(' ');
            }
            rest.push_str(tail);
            (rest.trim().to_string(), Some(v))
        }
        _ => (body.trim().to_string(), None),
    }
}

fn labelled_score(body: &str) -> Option<(usize, usize, f64)> {
    let lower = body.to_ascii_lowercase();
    let mut from = 0;
    while let Some(p) = lower[from..].find("score") {
        let label = from + p;
        let mut i = label + "score".len();
        let bytes = body.as_bytes();
        while i < bytes.len() && bytes[i] == b' ' {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b':' {
            if let Some((s, e, v)) = first_number(body, i + 1) {
                if body[i + 1..s].trim().is_empty() {
                    return Some((label, e, v));
                }
            }
        }
        from = label + 1;
    }
    None
}

/// First standalone decimal literal at or after `from`.
fn first_number(body: &str, from: usize) -> Option<(usize, usize, f64)> {
    let bytes = body.as_bytes();
    let mut i = from;
    while i < bytes.len() {
        let c = bytes[i];
        let boundary = i == 0
            || !(bytes[i - 1].is_ascii_alphanumeric()
                || bytes[i - 1] == b'.'
                || bytes[i - 1] == b'_');
        if c.is_ascii_digit() && boundary {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let trailing_ok =
                i == bytes.len() || !(bytes[i].is_ascii_alphabetic() || bytes[i] == b'_');
            if trailing_ok {
                return body[start..i].parse().ok().map(|v| (start, i, v));
            }
        }
        i += 1;
    }
    None
}

/// Renders segments back into tag form. Inverse of [`parse_output`] for
/// well-formed segments whose text contains no tags.
pub fn render_output(segments: &[ParsedSegment]) -> String {
    let mut s = String::new();
    for seg in segments {
        match seg {
            ParsedSegment::Think { text, .. } => {
                let _ = write!(s, "<think>{text}</think>");
            }
            ParsedSegment::ToolCall { call, .. } => {
                let _ = write!(s, "<tool_call>{}</tool_call>", call.render());
            }
            ParsedSegment::Answer {
                rationale, score, ..
            } => {
                s.push_str("<answer>");
                if !rationale.is_empty() {
                    s.push_str(rationale);
                    s.push(' ');
                }
                if let Some(v) = score {
                    let _ = write!(s, "score: {v}");
                }
                s.push_str("</answer>");
            }
        }
    }
    s
}
