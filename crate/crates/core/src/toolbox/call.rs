use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

/// A named parametric edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolCall {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    /// Control points of a tone curve.
    Curve(Vec<[f64; 2]>),
    /// Inner adjustment wrapped by a mask tool.
    Call(Box<ToolCall>),
}

impl ToolCall {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<ParamValue>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }

    pub fn number(&self, key: &str) -> Option<f64> {
        match self.params.get(key) {
            Some(ParamValue::Number(v)) => Some(*v),
            _ => None,
        }
    }

    /// Compact record syntax, e.g. `{exposure, ev: 1}`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        self.render_into(&mut s);
        s
    }

    fn render_into(&self, s: &mut String) {
        s.push('{');
        s.push_str(&self.name);
        for (k, v) in &self.params {
            let _ = write!(s, ", {k}: ");
            match v {
                ParamValue::Number(n) => {
                    let _ = write!(s, "{n}");
                }
                ParamValue::Curve(pts) => {
                    s.push('[');
                    for (i, p) in pts.iter().enumerate() {
                        if i > 0 {
                            s.push_str(", ");
                        }
                        let _ = write!(s, "[{}, {}]", p[0], p[1]);
                    }
                    s.push(']');
                }
                ParamValue::Call(inner) => inner.render_into(s),
            }
        }
        s.push('}');
    }

    /// Parses either the compact record syntax or the JSON form
    /// `{"name": ..., "params": {...}}`.
    pub fn parse(text: &str) -> Result<Self, CallSyntaxError> {
        let trimmed = text.trim();
        if trimmed.starts_with("{\"") {
            return serde_json::from_str(trimmed).map_err(|e| CallSyntaxError {
                offset: e.column().saturating_sub(1),
                message: e.to_string(),
            });
        }
        let mut p = Parser {
            src: trimmed.as_bytes(),
            pos: 0,
        };
        let call = p.record()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("trailing input after record"));
        }
        Ok(call)
    }
}

impl fmt::Display for ToolCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Number(v)
    }
}

impl From<Vec<[f64; 2]>> for ParamValue {
    fn from(v: Vec<[f64; 2]>) -> Self {
        ParamValue::Curve(v)
    }
}

impl From<ToolCall> for ParamValue {
    fn from(v: ToolCall) -> Self {
        ParamValue::Call(Box::new(v))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("tool-call syntax error at byte {offset}: {message}")]
pub struct CallSyntaxError {
    pub offset: usize,
    pub message: String,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, message: &str) -> CallSyntaxError {
        CallSyntaxError {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), CallSyntaxError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected '{}'", c as char)))
        }
    }

    fn ident(&mut self) -> Result<String, CallSyntaxError> {
        self.skip_ws();
        let start = self.pos;
        while let Some(&c) = self.src.get(self.pos) {
            let ok = if self.pos == start {
                c.is_ascii_alphabetic() || c == b'_'
            } else {
                c.is_ascii_alphanumeric() || c == b'_'
            };
            if !ok {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected identifier"));
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn number(&mut self) -> Result<f64, CallSyntaxError> {
        self.skip_ws();
        let start = self.pos;
        while let Some(&c) = self.src.get(self.pos) {
            if c.is_ascii_digit() || matches!(c, b'+' | b'-' | b'.' | b'e' | b'E') {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => {
                self.pos = start;
                Err(self.err("expected finite number"))
            }
        }
    }

    fn record(&mut self) -> Result<ToolCall, CallSyntaxError> {
        self.expect(b'{')?;
        let name = self.ident()?;
        let mut params = BTreeMap::new();
        loop {
            match self.peek() {
                Some(b'}') => {
                    self.pos += 1;
                    break;
                }
                Some(b',') => {
                    self.pos += 1;
                    if self.peek() == Some(b'}') {
                        continue;
                    }
                    let key = self.ident()?;
                    self.expect(b':')?;
                    let value = self.value()?;
                    if params.insert(key, value).is_some() {
                        return Err(self.err("duplicate parameter"));
                    }
                }
                _ => return Err(self.err("expected ',' or '}'")),
            }
        }
        Ok(ToolCall { name, params })
    }

    fn value(&mut self) -> Result<ParamValue, CallSyntaxError> {
        match self.peek() {
            Some(b'{') => Ok(ParamValue::Call(Box::new(self.record()?))),
            Some(b'[') => {
                self.pos += 1;
                let mut pts = Vec::new();
                if self.peek() == Some(b']') {
                    self.pos += 1;
                    return Ok(ParamValue::Curve(pts));
                }
                loop {
                    self.expect(b'[')?;
                    let x = self.number()?;
                    self.expect(b',')?;
                    let y = self.number()?;
                    self.expect(b']')?;
                    pts.push([x, y]);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b']') => {
                            self.pos += 1;
                            break;
                        }
                        _ => return Err(self.err("expected ',' or ']'")),
                    }
                }
                Ok(ParamValue::Curve(pts))
            }
            _ => Ok(ParamValue::Number(self.number()?)),
        }
    }
}
