//! Lexer, recursive-descent parser and canonical printer for spec files.
//!
//! ```text
//! spec   := "fusion" "{" dims branch+ plan [seed] "}"
//! dims   := "dims" "{" assign+ "}"            # keys: dq dv tq tv to classes
//! assign := key "=" integer ";"
//! branch := "branch" ident "{" "fq" "=" act ";" "fv" "=" act ";" [post] "}"
//! post   := "post" "=" "mlp" "(" "layers" "=" int "," "hidden" "=" int
//!           ["," "skip" "=" int] ["," "dropout" "=" real] ")" ";"
//! plan   := "reduce" "{" step+ "}"
//! step   := ("sum" | "prod") "(" ident ("," ident)* ["with" "squash" "=" act] ")" ";"
//! seed   := "seed" "=" integer ";"
//! act    := "identity" | "lrelu" | "selu" | "sigmoid" | "tanh"
//! ```
//!
//! Whitespace is insignificant and `#` starts a line comment. Keywords are
//! contextual, so a branch may be named `sum`.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use thiserror::Error;

use super::{
    validate_spec, BranchSpec, Dims, FusionSpec, Location, PostFusion, ReduceOp, ReductionPlan, ReductionStep,
    Violation,
};
use crate::tensor::Activation;

/// 1-based line and column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Pos {
    pub line: usize,
    pub col: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{pos}: {message}")]
pub struct ParseError {
    pub pos: Pos,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("{0}")]
    Syntax(ParseError),
    #[error("{}", format_violations(.0))]
    Invalid(Vec<(Pos, Violation)>),
}

fn format_violations(v: &[(Pos, Violation)]) -> String {
    v.iter()
        .map(|(p, v)| format!("{p}: {}", v.message))
        .collect::<Vec<_>>()
        .join("\n")
}

impl SpecError {
    /// One positioned message per problem.
    pub fn messages(&self) -> Vec<String> {
        match self {
            SpecError::Syntax(e) => vec![e.to_string()],
            SpecError::Invalid(v) => v.iter().map(|(p, v)| format!("{p}: {}", v.message)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    Real(f64),
    LBrace,
    RBrace,
    LParen,
    RParen,
    Eq,
    Semi,
    Comma,
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "`{s}`"),
            Tok::Int(n) => write!(f, "`{n}`"),
            Tok::Real(x) => write!(f, "`{x}`"),
            Tok::LBrace => f.write_str("`{`"),
            Tok::RBrace => f.write_str("`}`"),
            Tok::LParen => f.write_str("`(`"),
            Tok::RParen => f.write_str("`)`"),
            Tok::Eq => f.write_str("`=`"),
            Tok::Semi => f.write_str("`;`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

fn lex(src: &str) -> Result<Vec<(Tok, Pos)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    while i < chars.len() {
        let c = chars[i];
        let pos = Pos { line, col };
        if c == '\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        let single = match c {
            '{' => Some(Tok::LBrace),
            '}' => Some(Tok::RBrace),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '=' => Some(Tok::Eq),
            ';' => Some(Tok::Semi),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(t) = single {
            out.push((t, pos));
            i += 1;
            col += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            col += i - start;
            out.push((Tok::Ident(chars[start..i].iter().collect()), pos));
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            let mut real = false;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if i < chars.len() && chars[i] == '.' {
                real = true;
                i += 1;
                let frac = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                if i == frac {
                    return Err(ParseError {
                        pos: Pos {
                            line,
                            col: col + (i - start),
                        },
                        message: "expected digits after decimal point".into(),
                    });
                }
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                real = true;
                i += 1;
                if i < chars.len() && (chars[i] == '+' || chars[i] == '-') {
                    i += 1;
                }
                let exp = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                if i == exp {
                    return Err(ParseError {
                        pos: Pos {
                            line,
                            col: col + (i - start),
                        },
                        message: "expected digits in exponent".into(),
                    });
                }
            }
            let text: String = chars[start..i].iter().collect();
            col += i - start;
            let tok = if real {
                Tok::Real(text.parse().map_err(|_| ParseError {
                    pos,
                    message: format!("invalid number `{text}`"),
                })?)
            } else {
                Tok::Int(text.parse().map_err(|_| ParseError {
                    pos,
                    message: format!("integer `{text}` out of range"),
                })?)
            };
            out.push((tok, pos));
            continue;
        }
        return Err(ParseError {
            pos,
            message: format!("unexpected character {c:?}"),
        });
    }
    out.push((Tok::Eof, Pos { line, col }));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, Pos)>,
    at: usize,
    spans: HashMap<Location, Pos>,
}

type PResult<T> = Result<T, ParseError>;

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> Pos {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> (Tok, Pos) {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn error<T>(&self, message: impl Into<String>) -> PResult<T> {
        Err(ParseError {
            pos: self.pos(),
            message: message.into(),
        })
    }

    fn expect(&mut self, want: Tok) -> PResult<Pos> {
        if *self.peek() == want {
            Ok(self.bump().1)
        } else {
            self.error(format!("expected {want}, found {}", self.peek()))
        }
    }

    fn ident(&mut self, what: &str) -> PResult<(String, Pos)> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                let p = self.bump().1;
                Ok((s, p))
            }
            t => self.error(format!("expected {what}, found {t}")),
        }
    }

    fn keyword(&mut self, kw: &str) -> PResult<Pos> {
        match self.peek() {
            Tok::Ident(s) if s == kw => Ok(self.bump().1),
            t => self.error(format!("expected `{kw}`, found {t}")),
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn int(&mut self) -> PResult<u64> {
        match *self.peek() {
            Tok::Int(n) => {
                self.bump();
                Ok(n)
            }
            ref t => self.error(format!("expected integer, found {t}")),
        }
    }

    fn usize_value(&mut self) -> PResult<usize> {
        let pos = self.pos();
        let n = self.int()?;
        usize::try_from(n).map_err(|_| ParseError {
            pos,
            message: format!("integer {n} out of range"),
        })
    }

    fn real(&mut self) -> PResult<f64> {
        match *self.peek() {
            Tok::Int(n) => {
                self.bump();
                Ok(n as f64)
            }
            Tok::Real(x) => {
                self.bump();
                Ok(x)
            }
            ref t => self.error(format!("expected number, found {t}")),
        }
    }

    fn activation(&mut self) -> PResult<Activation> {
        let (name, pos) = self.ident("activation name")?;
        Activation::from_name(&name).ok_or_else(|| ParseError {
            pos,
            message: format!("unknown activation `{name}` (expected identity, lrelu, selu, sigmoid or tanh)"),
        })
    }

    fn spec(&mut self) -> PResult<FusionSpec> {
        self.keyword("fusion")?;
        self.expect(Tok::LBrace)?;
        let dims = self.dims()?;
        let mut branches = Vec::new();
        while self.at_keyword("branch") {
            let idx = branches.len();
            branches.push(self.branch(idx)?);
        }
        if branches.is_empty() {
            return self.error(format!("expected `branch`, found {}", self.peek()));
        }
        let plan = self.plan()?;
        let seed_hint = if self.at_keyword("seed") {
            self.bump();
            self.expect(Tok::Eq)?;
            let s = self.int()?;
            self.expect(Tok::Semi)?;
            Some(s)
        } else {
            None
        };
        self.expect(Tok::RBrace)?;
        if *self.peek() != Tok::Eof {
            return self.error(format!("unexpected {} after spec", self.peek()));
        }
        Ok(FusionSpec {
            dims,
            branches,
            plan,
            seed_hint,
        })
    }

    fn dims(&mut self) -> PResult<Dims> {
        let block = self.keyword("dims")?;
        self.expect(Tok::LBrace)?;
        let mut values: [Option<usize>; 6] = [None; 6];
        const KEYS: [&str; 6] = ["dq", "dv", "tq", "tv", "to", "classes"];
        loop {
            let (key, pos) = self.ident("dims key")?;
            let Some(slot) = KEYS.iter().position(|k| *k == key) else {
                return Err(ParseError {
                    pos,
                    message: format!("unknown dims key `{key}` (expected dq, dv, tq, tv, to or classes)"),
                });
            };
            if values[slot].is_some() {
                return Err(ParseError {
                    pos,
                    message: format!("duplicate dims key `{key}`"),
                });
            }
            self.expect(Tok::Eq)?;
            let value_pos = self.pos();
            values[slot] = Some(self.usize_value()?);
            self.expect(Tok::Semi)?;
            self.spans.insert(Location::Dim(KEYS[slot]), value_pos);
            if *self.peek() == Tok::RBrace {
                break;
            }
        }
        self.expect(Tok::RBrace)?;
        if let Some(missing) = values.iter().position(Option::is_none) {
            return Err(ParseError {
                pos: block,
                message: format!("dims block is missing key `{}`", KEYS[missing]),
            });
        }
        let v = values.map(Option::unwrap);
        Ok(Dims::new(v[0], v[1], v[2], v[3], v[4], v[5]))
    }

    fn branch(&mut self, index: usize) -> PResult<BranchSpec> {
        self.keyword("branch")?;
        let (id, pos) = self.ident("branch name")?;
        self.spans.insert(Location::Branch(index), pos);
        self.expect(Tok::LBrace)?;
        self.keyword("fq")?;
        self.expect(Tok::Eq)?;
        let f_q = self.activation()?;
        self.expect(Tok::Semi)?;
        self.keyword("fv")?;
        self.expect(Tok::Eq)?;
        let f_v = self.activation()?;
        self.expect(Tok::Semi)?;
        let post = if self.at_keyword("post") {
            self.post()?
        } else {
            PostFusion::default()
        };
        self.expect(Tok::RBrace)?;
        Ok(BranchSpec { id, f_q, f_v, post })
    }

    fn post(&mut self) -> PResult<PostFusion> {
        self.keyword("post")?;
        self.expect(Tok::Eq)?;
        self.keyword("mlp")?;
        self.expect(Tok::LParen)?;
        self.keyword("layers")?;
        self.expect(Tok::Eq)?;
        let layers = self.usize_value()?;
        self.expect(Tok::Comma)?;
        self.keyword("hidden")?;
        self.expect(Tok::Eq)?;
        let hidden = self.usize_value()?;
        let mut post = PostFusion {
            layers,
            hidden,
            ..PostFusion::default()
        };
        let mut allow_skip = true;
        while *self.peek() == Tok::Comma {
            self.bump();
            if allow_skip && self.at_keyword("skip") {
                self.bump();
                self.expect(Tok::Eq)?;
                post.skip = self.usize_value()?;
                allow_skip = false;
            } else if self.at_keyword("dropout") {
                self.bump();
                self.expect(Tok::Eq)?;
                post.dropout = self.real()?;
                break;
            } else {
                let want = if allow_skip { "`skip` or `dropout`" } else { "`dropout`" };
                return self.error(format!("expected {want}, found {}", self.peek()));
            }
        }
        self.expect(Tok::RParen)?;
        self.expect(Tok::Semi)?;
        Ok(post)
    }

    fn plan(&mut self) -> PResult<ReductionPlan> {
        let pos = self.keyword("reduce")?;
        self.spans.insert(Location::Plan, pos);
        self.expect(Tok::LBrace)?;
        let mut steps = Vec::new();
        loop {
            let (word, pos) = self.ident("`sum` or `prod`")?;
            let op = match word.as_str() {
                "sum" => ReduceOp::Sum,
                "prod" => ReduceOp::Prod,
                _ => {
                    return Err(ParseError {
                        pos,
                        message: format!("unknown reduction operator `{word}` (expected sum or prod)"),
                    })
                }
            };
            let s = steps.len();
            self.spans.insert(Location::Step(s), pos);
            self.expect(Tok::LParen)?;
            let mut members = Vec::new();
            let mut squash = None;
            loop {
                let (id, pos) = self.ident("branch name")?;
                self.spans.insert(
                    Location::Member {
                        step: s,
                        member: members.len(),
                    },
                    pos,
                );
                members.push(id);
                match self.peek() {
                    Tok::Comma => {
                        self.bump();
                    }
                    Tok::Ident(w) if w == "with" => {
                        self.bump();
                        self.keyword("squash")?;
                        self.expect(Tok::Eq)?;
                        squash = Some(self.activation()?);
                        break;
                    }
                    _ => break,
                }
            }
            self.expect(Tok::RParen)?;
            self.expect(Tok::Semi)?;
            steps.push(ReductionStep { op, members, squash });
            if *self.peek() == Tok::RBrace {
                break;
            }
        }
        self.expect(Tok::RBrace)?;
        Ok(ReductionPlan { steps })
    }
}

/// Parse and validate spec text. Syntax errors stop at the first problem;
/// semantic violations are all reported, each with the position of the
/// offending token.
pub fn parse_spec(text: &str) -> Result<FusionSpec, SpecError> {
    let toks = lex(text).map_err(SpecError::Syntax)?;
    let mut parser = Parser {
        toks,
        at: 0,
        spans: HashMap::new(),
    };
    let spec = parser.spec().map_err(SpecError::Syntax)?;
    let violations = validate_spec(&spec);
    if violations.is_empty() {
        return Ok(spec);
    }
    let start = Pos { line: 1, col: 1 };
    let positioned = violations
        .into_iter()
        .map(|v| {
            let pos = parser.spans.get(&v.location).copied().unwrap_or(start);
            (pos, v)
        })
        .collect();
    Err(SpecError::Invalid(positioned))
}

/// Canonical text: two-space indent, fields in grammar order, branches in
/// declaration order. `post` is omitted when it equals the default (no
/// layers) and `seed` when absent.
///
/// The text syntax only knows the default leaky-ReLU slope; other slopes are
/// printed as plain `lrelu`.
pub fn serialize_spec(spec: &FusionSpec) -> String {
    let mut s = String::new();
    s.push_str("fusion {\n  dims {\n");
    for (k, v) in spec.dims.fields() {
        let _ = writeln!(s, "    {k} = {v};");
    }
    s.push_str("  }\n");
    for b in &spec.branches {
        let _ = writeln!(s, "  branch {} {{", b.id);
        let _ = writeln!(s, "    fq = {};", b.f_q.name());
        let _ = writeln!(s, "    fv = {};", b.f_v.name());
        if b.post != PostFusion::default() {
            let p = &b.post;
            let _ = writeln!(
                s,
                "    post = mlp(layers = {}, hidden = {}, skip = {}, dropout = {:?});",
                p.layers, p.hidden, p.skip, p.dropout
            );
        }
        s.push_str("  }\n");
    }
    s.push_str("  reduce {\n");
    for step in &spec.plan.steps {
        let _ = write!(s, "    {}({}", step.op.name(), step.members.join(", "));
        if let Some(sq) = step.squash {
            let _ = write!(s, " with squash = {}", sq.name());
        }
        s.push_str(");\n");
    }
    s.push_str("  }\n");
    if let Some(seed) = spec.seed_hint {
        let _ = writeln!(s, "  seed = {seed};");
    }
    s.push_str("}\n");
    s
}
