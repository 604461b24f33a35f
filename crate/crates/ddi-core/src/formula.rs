//! Formula grammar and design-matrix construction.
//!
//! Candidate propensity models are written in a small formula language:
//!
//! ```text
//! formula := term ('+' term)*
//! term    := factor (':' factor)?
//! factor  := IDENT | ('exp' | 'log' | 'sq') '(' IDENT ')'
//! ```
//!
//! `:` denotes an elementwise product of its two factors. An intercept
//! column is always prepended when the design matrix is built; the empty
//! formula denotes an intercept-only model.

use crate::data::Dataset;
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use std::fmt;

/// Transformation applied to a single covariate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Exp,
    Log,
    Square,
}

impl Transform {
    fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Exp => x.exp(),
            Transform::Log => x.ln(),
            Transform::Square => x * x,
        }
    }
}

/// A covariate reference with an optional wrapping transform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factor {
    pub name: String,
    pub transform: Transform,
}

impl Factor {
    fn evaluate(&self, d: &Dataset) -> Result<Vec<f64>> {
        let col = d.covariate(&self.name)?;
        if self.transform == Transform::Log {
            if let Some(i) = col.iter().position(|&x| x <= 0.0) {
                return Err(Error::Domain(format!(
                    "log({}) undefined: value {} at row {i}",
                    self.name, col[i]
                )));
            }
        }
        Ok(col.into_iter().map(|x| self.transform.apply(x)).collect())
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.transform {
            Transform::Identity => write!(f, "{}", self.name),
            Transform::Exp => write!(f, "exp({})", self.name),
            Transform::Log => write!(f, "log({})", self.name),
            Transform::Square => write!(f, "sq({})", self.name),
        }
    }
}

/// One regressor of a propensity model: a transformed covariate or a
/// two-factor interaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormulaTerm {
    Single(Factor),
    Interaction(Factor, Factor),
}

impl FormulaTerm {
    pub fn variable(name: &str) -> FormulaTerm {
        FormulaTerm::Single(Factor { name: name.into(), transform: Transform::Identity })
    }

    /// Terms are duplicates when they produce identical columns; the factor
    /// order of an interaction does not matter.
    fn same_column(&self, other: &FormulaTerm) -> bool {
        match (self, other) {
            (FormulaTerm::Single(a), FormulaTerm::Single(b)) => a == b,
            (FormulaTerm::Interaction(a1, a2), FormulaTerm::Interaction(b1, b2)) => {
                (a1 == b1 && a2 == b2) || (a1 == b2 && a2 == b1)
            }
            _ => false,
        }
    }
}

impl fmt::Display for FormulaTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormulaTerm::Single(factor) => write!(f, "{factor}"),
            FormulaTerm::Interaction(lhs, rhs) => write!(f, "{lhs}:{rhs}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Ident(String),
    Plus,
    Colon,
    LParen,
    RParen,
}

/// Tokens paired with their byte offset in the source text.
fn tokenize(text: &str) -> Result<Vec<(Token, usize)>> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' => i += 1,
            '+' => {
                tokens.push((Token::Plus, i));
                i += 1;
            }
            ':' => {
                tokens.push((Token::Colon, i));
                i += 1;
            }
            '(' => {
                tokens.push((Token::LParen, i));
                i += 1;
            }
            ')' => {
                tokens.push((Token::RParen, i));
                i += 1;
            }
            _ if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() {
                    let c = bytes[i] as char;
                    if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                        i += 1;
                    } else {
                        break;
                    }
                }
                tokens.push((Token::Ident(text[start..i].to_string()), start));
            }
            _ => {
                return Err(Error::Parse {
                    position: i,
                    message: format!("unexpected character `{c}`"),
                })
            }
        }
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: &'a [(Token, usize)],
    pos: usize,
    end: usize,
    names: &'a [String],
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&(Token, usize)> {
        self.tokens.get(self.pos)
    }

    fn error_here(&self, message: &str) -> Error {
        let position = self.peek().map_or(self.end, |(_, p)| *p);
        Error::Parse { position, message: message.into() }
    }

    fn factor(&mut self) -> Result<Factor> {
        let (token, position) = self.peek().cloned().ok_or_else(|| self.error_here("expected a factor"))?;
        match token {
            Token::Ident(word) => {
                self.pos += 1;
                let transform = match word.as_str() {
                    "exp" => Some(Transform::Exp),
                    "log" => Some(Transform::Log),
                    "sq" => Some(Transform::Square),
                    _ => None,
                };
                // `exp`/`log`/`sq` are keywords only when followed by `(`.
                if let Some(transform) = transform {
                    if matches!(self.peek(), Some((Token::LParen, _))) {
                        self.pos += 1;
                        let name = match self.peek().cloned() {
                            Some((Token::Ident(name), _)) => {
                                self.pos += 1;
                                name
                            }
                            _ => return Err(self.error_here("expected a covariate name")),
                        };
                        if !matches!(self.peek(), Some((Token::RParen, _))) {
                            return Err(self.error_here("expected `)`"));
                        }
                        self.pos += 1;
                        self.check_name(&name)?;
                        return Ok(Factor { name, transform });
                    }
                }
                self.check_name(&word)?;
                Ok(Factor { name: word, transform: Transform::Identity })
            }
            _ => Err(Error::Parse { position, message: "expected a factor".into() }),
        }
    }

    fn check_name(&self, name: &str) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            Ok(())
        } else {
            Err(Error::UnknownVariable(name.to_string()))
        }
    }

    fn term(&mut self) -> Result<FormulaTerm> {
        let lhs = self.factor()?;
        if matches!(self.peek(), Some((Token::Colon, _))) {
            self.pos += 1;
            let rhs = self.factor()?;
            Ok(FormulaTerm::Interaction(lhs, rhs))
        } else {
            Ok(FormulaTerm::Single(lhs))
        }
    }
}

/// Parse a formula against the available covariate names.
///
/// Returns terms in left-to-right order; duplicate terms are rejected. The
/// empty (or all-whitespace) formula parses to no terms, i.e. an
/// intercept-only model.
pub fn parse_formula(text: &str, names: &[String]) -> Result<Vec<FormulaTerm>> {
    let tokens = tokenize(text)?;
    if tokens.is_empty() {
        return Ok(Vec::new());
    }
    let mut parser = Parser { tokens: &tokens, pos: 0, end: text.len(), names };
    let mut terms = Vec::new();
    let first_pos = tokens[0].1;
    terms.push((parser.term()?, first_pos));
    while let Some((token, position)) = parser.peek().cloned() {
        match token {
            Token::Plus => {
                parser.pos += 1;
                let term_pos = parser.peek().map_or(text.len(), |(_, p)| *p);
                terms.push((parser.term()?, term_pos));
            }
            _ => {
                return Err(Error::Parse {
                    position,
                    message: "expected `+` between terms".into(),
                })
            }
        }
    }
    for (i, (term, position)) in terms.iter().enumerate() {
        if terms[..i].iter().any(|(prev, _)| prev.same_column(term)) {
            return Err(Error::Parse {
                position: *position,
                message: format!("duplicate term `{term}`"),
            });
        }
    }
    Ok(terms.into_iter().map(|(t, _)| t).collect())
}

/// Build the `n x (1+q)` design matrix: an all-ones intercept column
/// followed by one column per term in order.
pub fn build_design_matrix(d: &Dataset, terms: &[FormulaTerm]) -> Result<DMatrix<f64>> {
    let n = d.n();
    let mut design = DMatrix::zeros(n, 1 + terms.len());
    design.column_mut(0).fill(1.0);
    for (j, term) in terms.iter().enumerate() {
        let values = match term {
            FormulaTerm::Single(factor) => factor.evaluate(d)?,
            FormulaTerm::Interaction(lhs, rhs) => {
                let l = lhs.evaluate(d)?;
                let r = rhs.evaluate(d)?;
                l.into_iter().zip(r).map(|(a, b)| a * b).collect()
            }
        };
        for (i, v) in values.into_iter().enumerate() {
            design[(i, 1 + j)] = v;
        }
    }
    Ok(design)
}
