//! Instruction templates:
//!
//! ```text
//! add a {size} {color} {shape} to the {position}
//! remove the object at the {position}
//! make the object at the {position} a {size} {color} {shape}
//! ```
//!
//! Parsing is case-insensitive and tolerant of repeated whitespace, nothing else.

use super::{Attributes, Cell, Color, Instruction, ShapeKind, Size};
use crate::error::{Error, Result};

pub const POSITION_ROWS: [&str; 3] = ["top", "middle", "bottom"];
pub const POSITION_COLS: [&str; 3] = ["left", "center", "right"];

const FIXED_WORDS: [&str; 8] = ["add", "a", "to", "the", "remove", "object", "at", "make"];

/// Every word the templates can emit, sorted and deduplicated.
pub fn vocabulary_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = FIXED_WORDS
        .iter()
        .copied()
        .chain(POSITION_ROWS)
        .chain(POSITION_COLS)
        .chain(Size::ALL.iter().map(|s| s.word()))
        .chain(Color::ALL.iter().map(|c| c.word()))
        .chain(ShapeKind::ALL.iter().map(|s| s.word()))
        .collect();
    words.sort_unstable();
    words.dedup();
    words
}

pub(super) fn render(instruction: &Instruction) -> String {
    match instruction {
        Instruction::Add { cell, attributes } => {
            format!("add a {} to the {}", attributes.phrase(), cell.position())
        }
        Instruction::Remove { cell } => format!("remove the object at the {}", cell.position()),
        Instruction::Modify { cell, attributes } => {
            format!("make the object at the {} a {}", cell.position(), attributes.phrase())
        }
    }
}

struct Words<'a> {
    text: &'a str,
    words: Vec<String>,
    pos: usize,
}

impl<'a> Words<'a> {
    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            text: self.text.to_string(),
            reason: reason.into(),
        })
    }

    fn next(&mut self) -> Result<&str> {
        match self.words.get(self.pos) {
            Some(w) => {
                self.pos += 1;
                Ok(w.as_str())
            }
            None => Err(Error::Parse {
                text: self.text.to_string(),
                reason: "unexpected end of instruction".into(),
            }),
        }
    }

    fn expect(&mut self, literal: &str) -> Result<()> {
        let pos = self.pos;
        let word = self.next()?.to_string();
        if word != literal {
            return self.fail(format!("expected {literal:?} at word {pos}, found {word:?}"));
        }
        Ok(())
    }

    fn pick<T: Copy>(&mut self, what: &str, options: &[T], word_of: impl Fn(T) -> &'static str) -> Result<T> {
        let word = self.next()?.to_string();
        match options.iter().copied().find(|&o| word_of(o) == word) {
            Some(v) => Ok(v),
            None => self.fail(format!("{word:?} is not a {what}")),
        }
    }

    fn position(&mut self) -> Result<Cell> {
        let row = self.pick("row word", &[0usize, 1, 2], |i| POSITION_ROWS[i])?;
        let col = self.pick("column word", &[0usize, 1, 2], |i| POSITION_COLS[i])?;
        Cell::new(row, col)
    }

    fn attributes(&mut self) -> Result<Attributes> {
        Ok(Attributes {
            size: self.pick("size", &Size::ALL, Size::word)?,
            color: self.pick("color", &Color::ALL, Color::word)?,
            shape: self.pick("shape", &ShapeKind::ALL, ShapeKind::word)?,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.words.len() {
            return self.fail(format!("trailing words after position {}", self.pos));
        }
        Ok(())
    }
}

pub(super) fn parse(text: &str) -> Result<Instruction> {
    let mut w = Words {
        text,
        words: text.split_whitespace().map(str::to_lowercase).collect(),
        pos: 0,
    };
    let verb = w.next()?.to_string();
    let instruction = match verb.as_str() {
        "add" => {
            w.expect("a")?;
            let attributes = w.attributes()?;
            w.expect("to")?;
            w.expect("the")?;
            let cell = w.position()?;
            Instruction::Add { cell, attributes }
        }
        "remove" => {
            for lit in ["the", "object", "at", "the"] {
                w.expect(lit)?;
            }
            Instruction::Remove { cell: w.position()? }
        }
        "make" => {
            for lit in ["the", "object", "at", "the"] {
                w.expect(lit)?;
            }
            let cell = w.position()?;
            w.expect("a")?;
            let attributes = w.attributes()?;
            Instruction::Modify { cell, attributes }
        }
        other => return w.fail(format!("unknown verb {other:?}")),
    };
    w.finish()?;
    Ok(instruction)
}
