//! Validator for the restricted regex dialect accepted in route rules.
//!
//! The dialect covers literals, escaped punctuation, `.`, character
//! classes with ranges, grouping, alternation, and the `*` `+` `?`
//! quantifiers. Everything else — counted repetition, anchors, group
//! modifiers, class shorthands like `\d`, backreferences — is rejected
//! up front so that config validation, not the matcher, is the place
//! where a bad pattern surfaces. Accepted patterns compile on the
//! `regex` crate, wrapped as `^(?:pat)$` so matching is always against
//! the whole field value.

use regex::Regex;

const MAX_GROUP_DEPTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid pattern at byte {pos}: {reason}")]
pub struct PatternError {
    pub pos: usize,
    pub reason: &'static str,
}

struct Parser {
    chars: Vec<char>,
    i: usize,
}

fn is_escapable(c: char) -> bool {
    c.is_ascii_punctuation()
}

impl Parser {
    fn err(&self, reason: &'static str) -> PatternError {
        PatternError { pos: self.i, reason }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.i).copied()
    }

    fn peek2(&self) -> Option<char> {
        self.chars.get(self.i + 1).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek();
        if c.is_some() {
            self.i += 1;
        }
        c
    }

    fn alternation(&mut self, depth: usize) -> Result<(), PatternError> {
        self.concat(depth)?;
        while self.peek() == Some('|') {
            self.i += 1;
            self.concat(depth)?;
        }
        Ok(())
    }

    fn concat(&mut self, depth: usize) -> Result<(), PatternError> {
        loop {
            match self.peek() {
                None | Some('|') | Some(')') => return Ok(()),
                Some('*') | Some('+') | Some('?') => {
                    return Err(self.err("quantifier without a target"))
                }
                Some(_) => {
                    self.atom(depth)?;
                    if matches!(self.peek(), Some('*') | Some('+') | Some('?')) {
                        self.i += 1;
                        if matches!(self.peek(), Some('*') | Some('+') | Some('?')) {
                            return Err(self.err("stacked quantifiers"));
                        }
                    }
                }
            }
        }
    }

    fn atom(&mut self, depth: usize) -> Result<(), PatternError> {
        match self.bump().expect("caller checked") {
            '\\' => {
                let Some(n) = self.bump() else {
                    return Err(self.err("dangling escape"));
                };
                if !is_escapable(n) {
                    self.i -= 1;
                    return Err(self.err("unsupported escape"));
                }
                Ok(())
            }
            '.' => Ok(()),
            '(' => {
                if self.peek() == Some('?') {
                    return Err(self.err("group modifiers unsupported"));
                }
                if depth + 1 > MAX_GROUP_DEPTH {
                    return Err(self.err("groups nested too deeply"));
                }
                self.alternation(depth + 1)?;
                if self.bump() != Some(')') {
                    return Err(self.err("unterminated group"));
                }
                Ok(())
            }
            '[' => self.class(),
            '{' | '}' => {
                self.i -= 1;
                Err(self.err("counted repetition unsupported"))
            }
            '^' | '$' => {
                self.i -= 1;
                Err(self.err("anchors unsupported (matches are whole-value)"))
            }
            ']' => {
                self.i -= 1;
                Err(self.err("unescaped ] outside class"))
            }
            _ => Ok(()),
        }
    }

    fn class(&mut self) -> Result<(), PatternError> {
        if self.peek() == Some('^') {
            self.i += 1;
        }
        let mut items = 0usize;
        loop {
            match self.peek() {
                None => return Err(self.err("unterminated class")),
                Some(']') => {
                    if items == 0 {
                        return Err(self.err("empty class"));
                    }
                    self.i += 1;
                    return Ok(());
                }
                Some(_) => {
                    let lo = self.class_char()?;
                    if self.peek() == Some('-')
                        && self.peek2().is_some()
                        && self.peek2() != Some(']')
                    {
                        self.i += 1;
                        let hi = self.class_char()?;
                        if lo > hi {
                            return Err(self.err("inverted range"));
                        }
                    }
                    items += 1;
                }
            }
        }
    }

    fn class_char(&mut self) -> Result<char, PatternError> {
        match self.bump() {
            None => Err(self.err("unterminated class")),
            Some('\\') => {
                let Some(n) = self.bump() else {
                    return Err(self.err("dangling escape"));
                };
                if !is_escapable(n) {
                    self.i -= 1;
                    return Err(self.err("unsupported escape"));
                }
                Ok(n)
            }
            Some(c) => Ok(c),
        }
    }
}

/// Check `pat` against the dialect without compiling it.
pub fn validate_pattern(pat: &str) -> Result<(), PatternError> {
    let mut p = Parser {
        chars: pat.chars().collect(),
        i: 0,
    };
    p.alternation(0)?;
    if p.i != p.chars.len() {
        // alternation only stops early on an unmatched ')'
        return Err(p.err("unmatched )"));
    }
    Ok(())
}

/// Validate and compile, anchored for whole-value matching.
pub fn compile(pat: &str) -> Result<Regex, PatternError> {
    validate_pattern(pat)?;
    Regex::new(&format!("^(?:{pat})$")).map_err(|_| PatternError {
        pos: 0,
        reason: "pattern failed to compile",
    })
}
