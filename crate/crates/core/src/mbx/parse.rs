//! Parser and semantic checks for the middlebox modeling language.
//!
//! Grammar (UTF-8 text, one model per file):
//!
//! ```text
//! model      := "model" Ident "(" params? ")" "{" decls rules "}"
//! params     := Ident ":" psort ("," Ident ":" psort)*
//! psort      := sort | "Set" "[" stuple "]"
//! sort       := "Address" | "Port" | "Content" | "Flow" | "Packet"
//! stuple     := sort | "(" sort ("," sort)* ")"
//! decls      := ( "state" Ident ":" rsort
//!               | "oracle" Ident "(" oargs? ")" ":" sort "range" rangeexpr
//!               | "class" Ident ("excludes" Ident)*
//!               | "failure" ("closed" | "open" | "explicit") )*
//! rsort      := "Set" "[" stuple "]" | "Map" "[" stuple "," stuple "]"
//! oargs      := Ident ":" sort ("," Ident ":" sort)*
//! rangeexpr  := sort | Ident                     -- a whole sort, or a config set
//! rules      := ("when" guard "=>" "{" stmt* term "}")*
//!               "otherwise" "=>" "{" stmt* term "}"
//! stmt       := "let" Ident "=" expr ";"
//!             | "p" "." field "=" expr ";"
//!             | Ident "+=" expr ";"              -- set insert
//!             | Ident "[" expr "]" "=" expr ";"  -- map put
//! term       := "forward" "(" "p" ("," "p")* ")" | "drop"
//! guard      := or-combination of: expr ("==" | "!=") expr
//!             | Ident ".contains" "(" expr ")"
//!             | Ident "?" "(" "p" ")"            -- abstract class predicate
//!             | "fail" "(" "self" ")"
//!             with "!", "&&", "||" and parentheses
//! expr       := "p" | "p" "." field | "flow" "(" "p" ")" | Ident
//!             | Ident "(" expr ("," expr)* ")"   -- oracle call
//!             | Ident "[" expr "]"               -- map lookup
//!             | "(" expr ("," expr)* ")"         -- tuple
//!             | expr "." digit                   -- tuple projection
//! field      := "src" | "dst" | "src_port" | "dst_port" | "origin" | "content"
//! ```

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::ast::*;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("parse error at {line}:{col}: {msg}")]
    Parse { line: u32, col: u32, msg: String },
    #[error("semantic error on {symbol:?}: {msg}")]
    Semantic { symbol: String, msg: String },
}

impl ModelError {
    fn sem(symbol: impl Into<String>, msg: impl Into<String>) -> ModelError {
        ModelError::Semantic { symbol: symbol.into(), msg: msg.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(usize),
    LParen,
    RParen,
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Comma,
    Semi,
    Colon,
    Dot,
    Question,
    Bang,
    EqEq,
    Ne,
    AndAnd,
    OrOr,
    Arrow,
    PlusEq,
    Assign,
    Eof,
}

impl std::fmt::Display for Tok {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Tok::Ident(i) => return write!(f, "{i:?}"),
            Tok::Number(n) => return write!(f, "{n}"),
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::LBrace => "{",
            Tok::RBrace => "}",
            Tok::LBracket => "[",
            Tok::RBracket => "]",
            Tok::Comma => ",",
            Tok::Semi => ";",
            Tok::Colon => ":",
            Tok::Dot => ".",
            Tok::Question => "?",
            Tok::Bang => "!",
            Tok::EqEq => "==",
            Tok::Ne => "!=",
            Tok::AndAnd => "&&",
            Tok::OrOr => "||",
            Tok::Arrow => "=>",
            Tok::PlusEq => "+=",
            Tok::Assign => "=",
            Tok::Eof => "end of input",
        };
        write!(f, "{s}")
    }
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer { src: src.as_bytes(), pos: 0, line: 1, col: 1 }
    }

    fn bump(&mut self) -> Option<u8> {
        let c = self.src.get(self.pos).copied()?;
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn tokens(mut self) -> Result<Vec<(Tok, u32, u32)>, ModelError> {
        let mut out = Vec::new();
        loop {
            while let Some(c) = self.peek() {
                if c.is_ascii_whitespace() {
                    self.bump();
                } else if c == b'/' && self.src.get(self.pos + 1) == Some(&b'/') {
                    while let Some(c) = self.peek() {
                        if c == b'\n' {
                            break;
                        }
                        self.bump();
                    }
                } else {
                    break;
                }
            }
            let (line, col) = (self.line, self.col);
            let Some(c) = self.peek() else {
                out.push((Tok::Eof, line, col));
                return Ok(out);
            };
            let tok = match c {
                b'(' => {
                    self.bump();
                    Tok::LParen
                }
                b')' => {
                    self.bump();
                    Tok::RParen
                }
                b'{' => {
                    self.bump();
                    Tok::LBrace
                }
                b'}' => {
                    self.bump();
                    Tok::RBrace
                }
                b'[' => {
                    self.bump();
                    Tok::LBracket
                }
                b']' => {
                    self.bump();
                    Tok::RBracket
                }
                b',' => {
                    self.bump();
                    Tok::Comma
                }
                b';' => {
                    self.bump();
                    Tok::Semi
                }
                b':' => {
                    self.bump();
                    Tok::Colon
                }
                b'.' => {
                    self.bump();
                    Tok::Dot
                }
                b'?' => {
                    self.bump();
                    Tok::Question
                }
                b'!' => {
                    self.bump();
                    if self.peek() == Some(b'=') {
                        self.bump();
                        Tok::Ne
                    } else {
                        Tok::Bang
                    }
                }
                b'=' => {
                    self.bump();
                    match self.peek() {
                        Some(b'=') => {
                            self.bump();
                            Tok::EqEq
                        }
                        Some(b'>') => {
                            self.bump();
                            Tok::Arrow
                        }
                        _ => Tok::Assign,
                    }
                }
                b'&' => {
                    self.bump();
                    if self.peek() == Some(b'&') {
                        self.bump();
                        Tok::AndAnd
                    } else {
                        return Err(ModelError::Parse {
                            line,
                            col,
                            msg: "expected '&&'".into(),
                        });
                    }
                }
                b'|' => {
                    self.bump();
                    if self.peek() == Some(b'|') {
                        self.bump();
                        Tok::OrOr
                    } else {
                        return Err(ModelError::Parse {
                            line,
                            col,
                            msg: "expected '||'".into(),
                        });
                    }
                }
                b'+' => {
                    self.bump();
                    if self.peek() == Some(b'=') {
                        self.bump();
                        Tok::PlusEq
                    } else {
                        return Err(ModelError::Parse {
                            line,
                            col,
                            msg: "expected '+='".into(),
                        });
                    }
                }
                c if c.is_ascii_digit() => {
                    let mut n = 0usize;
                    while let Some(d) = self.peek() {
                        if d.is_ascii_digit() {
                            n = n * 10 + (d - b'0') as usize;
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    Tok::Number(n)
                }
                c if c.is_ascii_alphabetic() || c == b'_' => {
                    let start = self.pos;
                    while let Some(d) = self.peek() {
                        if d.is_ascii_alphanumeric() || d == b'_' {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                    Tok::Ident(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
                }
                other => {
                    return Err(ModelError::Parse {
                        line,
                        col,
                        msg: format!("unexpected character {:?}", other as char),
                    });
                }
            };
            out.push((tok, line, col));
        }
    }
}

struct Parser {
    toks: Vec<(Tok, u32, u32)>,
    idx: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.idx].0
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.idx + 1).min(self.toks.len() - 1)].0
    }

    fn pos(&self) -> (u32, u32) {
        let (_, l, c) = self.toks[self.idx];
        (l, c)
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.idx].0.clone();
        if self.idx + 1 < self.toks.len() {
            self.idx += 1;
        }
        t
    }

    fn err(&self, msg: impl Into<String>) -> ModelError {
        let (line, col) = self.pos();
        ModelError::Parse { line, col, msg: msg.into() }
    }

    fn expect(&mut self, t: Tok) -> Result<(), ModelError> {
        if *self.peek() == t {
            self.bump();
            Ok(())
        } else {
            Err(self.err(format!("expected {t}, found {}", self.peek())))
        }
    }

    fn ident(&mut self) -> Result<String, ModelError> {
        match self.peek().clone() {
            Tok::Ident(s) => {
                self.bump();
                Ok(s)
            }
            other => Err(self.err(format!("expected identifier, found {other}"))),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ModelError> {
        match self.peek() {
            Tok::Ident(s) if s == kw => {
                self.bump();
                Ok(())
            }
            other => Err(self.err(format!("expected '{kw}', found {other}"))),
        }
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Ident(s) if s == kw)
    }

    fn scalar_sort(&mut self) -> Result<Sort, ModelError> {
        let name = self.ident()?;
        match name.as_str() {
            "Address" => Ok(Sort::Address),
            "Port" => Ok(Sort::Port),
            "Content" => Ok(Sort::Content),
            "Flow" => Ok(Sort::Flow),
            "Packet" => Ok(Sort::Packet),
            other => Err(self.err(format!("unknown sort {other:?}"))),
        }
    }

    /// A sort tuple: bare sort or parenthesized comma list.
    fn sort_tuple(&mut self) -> Result<Vec<Sort>, ModelError> {
        if *self.peek() == Tok::LParen {
            self.bump();
            let mut out = vec![self.scalar_sort()?];
            while *self.peek() == Tok::Comma {
                self.bump();
                out.push(self.scalar_sort()?);
            }
            self.expect(Tok::RParen)?;
            Ok(out)
        } else {
            Ok(vec![self.scalar_sort()?])
        }
    }

    fn param_sort(&mut self) -> Result<ParamSort, ModelError> {
        if self.at_keyword("Set") {
            self.bump();
            self.expect(Tok::LBracket)?;
            let elems = self.sort_tuple()?;
            self.expect(Tok::RBracket)?;
            Ok(ParamSort::SetOf(elems))
        } else {
            Ok(ParamSort::Scalar(self.scalar_sort()?))
        }
    }

    fn register_shape(&mut self) -> Result<RegisterShape, ModelError> {
        if self.at_keyword("Set") {
            self.bump();
            self.expect(Tok::LBracket)?;
            let elems = self.sort_tuple()?;
            self.expect(Tok::RBracket)?;
            Ok(RegisterShape::SetOf(elems))
        } else if self.at_keyword("Map") {
            self.bump();
            self.expect(Tok::LBracket)?;
            let key = self.sort_tuple()?;
            self.expect(Tok::Comma)?;
            let value = self.sort_tuple()?;
            self.expect(Tok::RBracket)?;
            Ok(RegisterShape::MapOf(key, value))
        } else {
            Err(self.err("expected Set[...] or Map[...] register shape"))
        }
    }

    fn model(&mut self) -> Result<MiddleboxModel, ModelError> {
        self.keyword("model")?;
        let name = self.ident()?;
        self.expect(Tok::LParen)?;
        let mut params = Vec::new();
        if *self.peek() != Tok::RParen {
            loop {
                let pname = self.ident()?;
                self.expect(Tok::Colon)?;
                let sort = self.param_sort()?;
                params.push(ParamDecl { name: pname, sort });
                if *self.peek() == Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen)?;
        self.expect(Tok::LBrace)?;

        let mut registers = Vec::new();
        let mut oracles = Vec::new();
        let mut classes = Vec::new();
        let mut failure = None;
        loop {
            if self.at_keyword("state") {
                self.bump();
                let rname = self.ident()?;
                self.expect(Tok::Colon)?;
                let shape = self.register_shape()?;
                registers.push(RegisterDecl { name: rname, shape });
            } else if self.at_keyword("oracle") {
                self.bump();
                let oname = self.ident()?;
                self.expect(Tok::LParen)?;
                let mut args = Vec::new();
                if *self.peek() != Tok::RParen {
                    loop {
                        let aname = self.ident()?;
                        self.expect(Tok::Colon)?;
                        let asort = self.scalar_sort()?;
                        args.push((aname, asort));
                        if *self.peek() == Tok::Comma {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                }
                self.expect(Tok::RParen)?;
                self.expect(Tok::Colon)?;
                let result = self.scalar_sort()?;
                self.keyword("range")?;
                let range = match self.peek().clone() {
                    Tok::Ident(s)
                        if matches!(
                            s.as_str(),
                            "Address" | "Port" | "Content" | "Flow" | "Packet"
                        ) =>
                    {
                        RangeExpr::Sort(self.scalar_sort()?)
                    }
                    Tok::Ident(_) => RangeExpr::Param(self.ident()?),
                    other => return Err(self.err(format!("expected range, found {other}"))),
                };
                oracles.push(OracleFnDecl { name: oname, args, result, range });
            } else if self.at_keyword("class") {
                self.bump();
                let cname = self.ident()?;
                let mut excludes = Vec::new();
                while self.at_keyword("excludes") {
                    self.bump();
                    excludes.push(self.ident()?);
                }
                classes.push(ClassDecl { name: cname, excludes });
            } else if self.at_keyword("failure") {
                self.bump();
                let mode = self.ident()?;
                let policy = match mode.as_str() {
                    "closed" => FailurePolicy::Closed,
                    "open" => FailurePolicy::Open,
                    "explicit" => FailurePolicy::Explicit,
                    other => return Err(self.err(format!("unknown failure mode {other:?}"))),
                };
                if failure.replace(policy).is_some() {
                    return Err(self.err("duplicate failure declaration"));
                }
            } else {
                break;
            }
        }

        let mut rules = Vec::new();
        let mut saw_otherwise = false;
        loop {
            if self.at_keyword("when") {
                if saw_otherwise {
                    return Err(self.err("rules after the otherwise-rule"));
                }
                self.bump();
                let guard = self.guard()?;
                self.expect(Tok::Arrow)?;
                let (actions, terminator) = self.body()?;
                rules.push(Rule { guard, actions, terminator });
            } else if self.at_keyword("otherwise") {
                self.bump();
                self.expect(Tok::Arrow)?;
                let (actions, terminator) = self.body()?;
                rules.push(Rule { guard: Guard::True, actions, terminator });
                saw_otherwise = true;
            } else {
                break;
            }
        }
        self.expect(Tok::RBrace)?;
        if *self.peek() != Tok::Eof {
            return Err(self.err(format!("trailing input: {}", self.peek())));
        }
        if !saw_otherwise {
            return Err(ModelError::sem(&name, "model is missing the mandatory otherwise-rule"));
        }

        Ok(MiddleboxModel {
            name,
            params,
            registers,
            oracles,
            classes,
            failure: failure.unwrap_or(FailurePolicy::Closed),
            rules,
        })
    }

    fn body(&mut self) -> Result<(Vec<Action>, Terminator), ModelError> {
        self.expect(Tok::LBrace)?;
        let mut actions = Vec::new();
        let terminator;
        loop {
            if self.at_keyword("forward") {
                self.bump();
                self.expect(Tok::LParen)?;
                let mut n = 0;
                if *self.peek() != Tok::RParen {
                    loop {
                        self.keyword("p")?;
                        n += 1;
                        if *self.peek() == Tok::Comma {
                            self.bump();
                        } else {
                            break;
                        }
                    }
                }
                self.expect(Tok::RParen)?;
                terminator = if n == 0 { Terminator::Drop } else { Terminator::Forward(n) };
                break;
            } else if self.at_keyword("drop") {
                self.bump();
                terminator = Terminator::Drop;
                break;
            } else if self.at_keyword("let") {
                self.bump();
                let name = self.ident()?;
                self.expect(Tok::Assign)?;
                let expr = self.expr()?;
                self.expect(Tok::Semi)?;
                actions.push(Action::Let { name, expr });
            } else if self.at_keyword("p") && *self.peek2() == Tok::Dot {
                self.bump();
                self.bump();
                let field = self.field()?;
                self.expect(Tok::Assign)?;
                let expr = self.expr()?;
                self.expect(Tok::Semi)?;
                actions.push(Action::FieldAssign { field, expr });
            } else if matches!(self.peek(), Tok::Ident(_)) {
                let reg = self.ident()?;
                match self.peek().clone() {
                    Tok::PlusEq => {
                        self.bump();
                        let tuple = self.expr()?;
                        self.expect(Tok::Semi)?;
                        actions.push(Action::SetAdd { register: reg, tuple });
                    }
                    Tok::LBracket => {
                        self.bump();
                        let key = self.expr()?;
                        self.expect(Tok::RBracket)?;
                        self.expect(Tok::Assign)?;
                        let value = self.expr()?;
                        self.expect(Tok::Semi)?;
                        actions.push(Action::MapPut { register: reg, key, value });
                    }
                    other => {
                        return Err(self.err(format!("expected '+=' or '[', found {other}")));
                    }
                }
            } else {
                return Err(self.err(format!(
                    "expected statement or terminator, found {}",
                    self.peek()
                )));
            }
        }
        self.expect(Tok::RBrace)?;
        Ok((actions, terminator))
    }

    fn field(&mut self) -> Result<Field, ModelError> {
        let name = self.ident()?;
        match name.as_str() {
            "src" => Ok(Field::Src),
            "dst" => Ok(Field::Dst),
            "src_port" => Ok(Field::SrcPort),
            "dst_port" => Ok(Field::DstPort),
            "origin" => Ok(Field::Origin),
            "content" => Ok(Field::Content),
            other => Err(self.err(format!("unknown packet field {other:?}"))),
        }
    }

    fn guard(&mut self) -> Result<Guard, ModelError> {
        let mut lhs = self.guard_and()?;
        while *self.peek() == Tok::OrOr {
            self.bump();
            let rhs = self.guard_and()?;
            lhs = Guard::Or(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn guard_and(&mut self) -> Result<Guard, ModelError> {
        let mut lhs = self.guard_unary()?;
        while *self.peek() == Tok::AndAnd {
            self.bump();
            let rhs = self.guard_unary()?;
            lhs = Guard::And(Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn guard_unary(&mut self) -> Result<Guard, ModelError> {
        if *self.peek() == Tok::Bang {
            self.bump();
            return Ok(Guard::Not(Box::new(self.guard_unary()?)));
        }
        // fail(self)
        if self.at_keyword("fail") && *self.peek2() == Tok::LParen {
            self.bump();
            self.bump();
            self.keyword("self")?;
            self.expect(Tok::RParen)?;
            return Ok(Guard::FailSelf);
        }
        // class predicate: ident?(p)
        if matches!(self.peek(), Tok::Ident(_)) && *self.peek2() == Tok::Question {
            let name = self.ident()?;
            self.bump(); // '?'
            self.expect(Tok::LParen)?;
            self.keyword("p")?;
            self.expect(Tok::RParen)?;
            return Ok(Guard::Class(name));
        }
        // containment: ident.contains(expr)
        if matches!(self.peek(), Tok::Ident(s) if s != "p" && s != "flow") && *self.peek2() == Tok::Dot {
            let save = self.idx;
            let container = self.ident()?;
            self.bump(); // '.'
            if self.at_keyword("contains") {
                self.bump();
                self.expect(Tok::LParen)?;
                let arg = self.expr()?;
                self.expect(Tok::RParen)?;
                // Kind is resolved during semantic analysis.
                return Ok(Guard::Contains {
                    container,
                    kind: ContainerKind::SetRegister,
                    arg: Box::new(arg),
                });
            }
            self.idx = save;
        }
        // parenthesized guard vs. tuple expression: a '(' here is ambiguous,
        // so try a guard first and fall back to an expression comparison.
        if *self.peek() == Tok::LParen {
            let save = self.idx;
            self.bump();
            if let Ok(inner) = self.guard() {
                if *self.peek() == Tok::RParen {
                    let after = self.toks[(self.idx + 1).min(self.toks.len() - 1)].0.clone();
                    if !matches!(after, Tok::EqEq | Tok::Ne | Tok::Dot) {
                        self.bump();
                        return Ok(inner);
                    }
                }
            }
            self.idx = save;
        }
        let lhs = self.expr()?;
        match self.bump() {
            Tok::EqEq => Ok(Guard::Eq(lhs, self.expr()?)),
            Tok::Ne => Ok(Guard::Ne(lhs, self.expr()?)),
            other => Err(self.err(format!("expected '==' or '!=', found {other}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr, ModelError> {
        let mut e = self.expr_primary()?;
        loop {
            match self.peek().clone() {
                Tok::Dot => {
                    match self.peek2().clone() {
                        Tok::Number(n) => {
                            self.bump();
                            self.bump();
                            e = Expr::TupleIndex(Box::new(e), n);
                        }
                        _ => break,
                    };
                }
                _ => break,
            }
        }
        Ok(e)
    }

    fn expr_primary(&mut self) -> Result<Expr, ModelError> {
        match self.peek().clone() {
            Tok::LParen => {
                self.bump();
                let mut items = vec![self.expr()?];
                while *self.peek() == Tok::Comma {
                    self.bump();
                    items.push(self.expr()?);
                }
                self.expect(Tok::RParen)?;
                if items.len() == 1 {
                    Ok(items.pop().unwrap())
                } else {
                    Ok(Expr::Tuple(items))
                }
            }
            Tok::Ident(name) => {
                if name == "p" {
                    self.bump();
                    if *self.peek() == Tok::Dot && matches!(self.peek2(), Tok::Ident(_)) {
                        self.bump();
                        let field = self.field()?;
                        return Ok(Expr::PktField(field));
                    }
                    return Ok(Expr::Pkt);
                }
                if name == "flow" {
                    self.bump();
                    self.expect(Tok::LParen)?;
                    self.keyword("p")?;
                    self.expect(Tok::RParen)?;
                    return Ok(Expr::FlowOfPkt);
                }
                self.bump();
                match self.peek().clone() {
                    Tok::LParen => {
                        self.bump();
                        let mut args = Vec::new();
                        if *self.peek() != Tok::RParen {
                            loop {
                                args.push(self.expr()?);
                                if *self.peek() == Tok::Comma {
                                    self.bump();
                                } else {
                                    break;
                                }
                            }
                        }
                        self.expect(Tok::RParen)?;
                        Ok(Expr::OracleCall { name, args })
                    }
                    Tok::LBracket => {
                        self.bump();
                        let key = self.expr()?;
                        self.expect(Tok::RBracket)?;
                        Ok(Expr::MapGet { register: name, key: Box::new(key) })
                    }
                    // Bare identifier: local or scalar param, resolved in
                    // semantic analysis (locals win).
                    _ => Ok(Expr::Local(name)),
                }
            }
            other => Err(self.err(format!("expected expression, found {other}"))),
        }
    }
}

/// Inferred sort of an expression.
fn sort_of(
    e: &Expr,
    model: &MiddleboxModel,
    locals: &BTreeMap<String, Sort>,
) -> Result<Sort, ModelError> {
    match e {
        Expr::PktField(f) => Ok(f.sort()),
        Expr::FlowOfPkt => Ok(Sort::Flow),
        Expr::Pkt => Ok(Sort::Packet),
        Expr::Local(name) => {
            if let Some(s) = locals.get(name) {
                return Ok(s.clone());
            }
            match model.param(name) {
                Some(ParamDecl { sort: ParamSort::Scalar(s), .. }) => Ok(s.clone()),
                Some(_) => Err(ModelError::sem(name, "config set used as a scalar value")),
                None => Err(ModelError::sem(name, "undeclared identifier")),
            }
        }
        Expr::Param(name) => match model.param(name) {
            Some(ParamDecl { sort: ParamSort::Scalar(s), .. }) => Ok(s.clone()),
            Some(_) => Err(ModelError::sem(name, "config set used as a scalar value")),
            None => Err(ModelError::sem(name, "undeclared config parameter")),
        },
        Expr::OracleCall { name, args } => {
            let decl = model
                .oracle(name)
                .ok_or_else(|| ModelError::sem(name, "undeclared oracle function"))?;
            if args.len() != decl.args.len() {
                return Err(ModelError::sem(
                    name,
                    format!("oracle expects {} arguments, got {}", decl.args.len(), args.len()),
                ));
            }
            for (arg, (aname, asort)) in args.iter().zip(&decl.args) {
                let got = sort_of(arg, model, locals)?;
                if got != *asort {
                    return Err(ModelError::sem(
                        name,
                        format!("oracle argument {aname} expects sort {asort}, got {got}"),
                    ));
                }
            }
            Ok(decl.result.clone())
        }
        Expr::MapGet { register, key } => {
            let idx = model
                .register_index(register)
                .ok_or_else(|| ModelError::sem(register, "undeclared register"))?;
            match &model.registers[idx].shape {
                RegisterShape::MapOf(ks, vs) => {
                    let got = sort_of(key, model, locals)?;
                    let want = tuple_sort(ks);
                    if got != want {
                        return Err(ModelError::sem(
                            register,
                            format!("map key expects sort {want}, got {got}"),
                        ));
                    }
                    Ok(tuple_sort(vs))
                }
                RegisterShape::SetOf(_) => {
                    Err(ModelError::sem(register, "indexed lookup on a set register"))
                }
            }
        }
        Expr::TupleIndex(inner, i) => match sort_of(inner, model, locals)? {
            Sort::Tuple(ts) => ts
                .get(*i)
                .cloned()
                .ok_or_else(|| ModelError::sem(format!(".{i}"), "tuple index out of bounds")),
            other => Err(ModelError::sem(format!(".{i}"), format!("projection on sort {other}"))),
        },
        Expr::Tuple(items) => {
            let ts = items
                .iter()
                .map(|it| sort_of(it, model, locals))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Sort::Tuple(ts))
        }
    }
}

fn tuple_sort(sorts: &[Sort]) -> Sort {
    if sorts.len() == 1 {
        sorts[0].clone()
    } else {
        Sort::Tuple(sorts.to_vec())
    }
}

/// Rewrites bare identifiers to `Param` where they name a config parameter,
/// then checks sorts. Returns the expression's sort.
fn resolve_expr(
    e: &mut Expr,
    model: &MiddleboxModel,
    locals: &BTreeMap<String, Sort>,
) -> Result<Sort, ModelError> {
    match e {
        Expr::Local(name) => {
            if !locals.contains_key(name.as_str()) {
                if model.param(name).is_some() {
                    let name = name.clone();
                    *e = Expr::Param(name);
                }
            }
        }
        Expr::OracleCall { args, .. } => {
            for a in args.iter_mut() {
                resolve_expr(a, model, locals)?;
            }
        }
        Expr::MapGet { key, .. } => {
            resolve_expr(key, model, locals)?;
        }
        Expr::TupleIndex(inner, _) => {
            resolve_expr(inner, model, locals)?;
        }
        Expr::Tuple(items) => {
            for it in items.iter_mut() {
                resolve_expr(it, model, locals)?;
            }
        }
        _ => {}
    }
    sort_of(e, model, locals)
}

fn resolve_guard(
    g: &mut Guard,
    model: &MiddleboxModel,
    locals: &BTreeMap<String, Sort>,
) -> Result<(), ModelError> {
    match g {
        Guard::True | Guard::FailSelf => Ok(()),
        Guard::Eq(a, b) | Guard::Ne(a, b) => {
            let sa = resolve_expr(a, model, locals)?;
            let sb = resolve_expr(b, model, locals)?;
            if sa != sb {
                return Err(ModelError::sem(
                    "==",
                    format!("comparison between sorts {sa} and {sb}"),
                ));
            }
            Ok(())
        }
        Guard::Contains { container, kind, arg } => {
            let want = if let Some(idx) = model.register_index(container) {
                match &model.registers[idx].shape {
                    RegisterShape::SetOf(elems) => {
                        *kind = ContainerKind::SetRegister;
                        tuple_sort(elems)
                    }
                    RegisterShape::MapOf(keys, _) => {
                        *kind = ContainerKind::MapRegisterKey;
                        tuple_sort(keys)
                    }
                }
            } else if let Some(p) = model.param(container) {
                match &p.sort {
                    ParamSort::SetOf(elems) => {
                        *kind = ContainerKind::ParamSet;
                        tuple_sort(elems)
                    }
                    ParamSort::Scalar(_) => {
                        return Err(ModelError::sem(
                            container.as_str(),
                            "contains() on a scalar config parameter",
                        ));
                    }
                }
            } else {
                return Err(ModelError::sem(container.as_str(), "undeclared container"));
            };
            let got = resolve_expr(arg, model, locals)?;
            if got != want {
                return Err(ModelError::sem(
                    container.as_str(),
                    format!("contains() expects sort {want}, got {got}"),
                ));
            }
            Ok(())
        }
        Guard::Class(name) => {
            if model.class(name).is_none() {
                return Err(ModelError::sem(name.as_str(), "undeclared abstract class"));
            }
            Ok(())
        }
        Guard::Not(inner) => resolve_guard(inner, model, locals),
        Guard::And(a, b) | Guard::Or(a, b) => {
            resolve_guard(a, model, locals)?;
            resolve_guard(b, model, locals)
        }
    }
}

fn check_model(mut model: MiddleboxModel) -> Result<MiddleboxModel, ModelError> {
    // Unique names per namespace.
    let mut names = BTreeSet::new();
    for r in &model.registers {
        if !names.insert(r.name.clone()) {
            return Err(ModelError::sem(&r.name, "duplicate register name"));
        }
    }
    for p in &model.params {
        if !names.insert(p.name.clone()) {
            return Err(ModelError::sem(&p.name, "parameter name collides with another symbol"));
        }
    }
    for o in &model.oracles {
        if !names.insert(o.name.clone()) {
            return Err(ModelError::sem(&o.name, "oracle name collides with another symbol"));
        }
    }
    for c in &model.classes {
        if !names.insert(c.name.clone()) {
            return Err(ModelError::sem(&c.name, "class name collides with another symbol"));
        }
        for e in &c.excludes {
            if model.classes.iter().all(|d| d.name != *e) {
                return Err(ModelError::sem(e, "excludes references an undeclared class"));
            }
        }
    }
    for o in &model.oracles {
        match &o.range {
            RangeExpr::Sort(s) => {
                if *s != o.result {
                    return Err(ModelError::sem(
                        &o.name,
                        format!("range sort {s} differs from result sort {}", o.result),
                    ));
                }
            }
            RangeExpr::Param(p) => match model.param(p) {
                Some(ParamDecl { sort: ParamSort::SetOf(elems), .. }) => {
                    if tuple_sort(elems) != o.result {
                        return Err(ModelError::sem(
                            &o.name,
                            "range set element sort differs from result sort",
                        ));
                    }
                }
                Some(_) => {
                    return Err(ModelError::sem(p, "oracle range must be a config set"));
                }
                None => return Err(ModelError::sem(p, "undeclared config parameter in range")),
            },
        }
    }

    // Resolve and sort-check every rule.
    let model_view = model.clone();
    for rule in &mut model.rules {
        let mut locals: BTreeMap<String, Sort> = BTreeMap::new();
        resolve_guard(&mut rule.guard, &model_view, &locals)?;
        for action in &mut rule.actions {
            match action {
                Action::Let { name, expr } => {
                    let sort = resolve_expr(expr, &model_view, &locals)?;
                    if model_view.param(name).is_some() || model_view.register_index(name).is_some()
                    {
                        return Err(ModelError::sem(
                            name.as_str(),
                            "local shadows a declared symbol",
                        ));
                    }
                    locals.insert(name.clone(), sort);
                }
                Action::FieldAssign { field, expr } => {
                    let got = resolve_expr(expr, &model_view, &locals)?;
                    if got != field.sort() {
                        return Err(ModelError::sem(
                            field.name(),
                            format!("assignment of sort {got} to field of sort {}", field.sort()),
                        ));
                    }
                }
                Action::SetAdd { register, tuple } => {
                    let idx = model_view
                        .register_index(register)
                        .ok_or_else(|| ModelError::sem(register.as_str(), "undeclared register"))?;
                    let want = match &model_view.registers[idx].shape {
                        RegisterShape::SetOf(elems) => tuple_sort(elems),
                        RegisterShape::MapOf(..) => {
                            return Err(ModelError::sem(
                                register.as_str(),
                                "'+=' on a map register",
                            ));
                        }
                    };
                    let got = resolve_expr(tuple, &model_view, &locals)?;
                    if got != want {
                        return Err(ModelError::sem(
                            register.as_str(),
                            format!("set insert expects sort {want}, got {got}"),
                        ));
                    }
                }
                Action::MapPut { register, key, value } => {
                    let idx = model_view
                        .register_index(register)
                        .ok_or_else(|| ModelError::sem(register.as_str(), "undeclared register"))?;
                    let (wk, wv) = match &model_view.registers[idx].shape {
                        RegisterShape::MapOf(k, v) => (tuple_sort(k), tuple_sort(v)),
                        RegisterShape::SetOf(_) => {
                            return Err(ModelError::sem(
                                register.as_str(),
                                "indexed assignment on a set register",
                            ));
                        }
                    };
                    let gk = resolve_expr(key, &model_view, &locals)?;
                    let gv = resolve_expr(value, &model_view, &locals)?;
                    if gk != wk {
                        return Err(ModelError::sem(
                            register.as_str(),
                            format!("map key expects sort {wk}, got {gk}"),
                        ));
                    }
                    if gv != wv {
                        return Err(ModelError::sem(
                            register.as_str(),
                            format!("map value expects sort {wv}, got {gv}"),
                        ));
                    }
                }
            }
        }
    }
    Ok(model)
}

/// Parses and semantically checks one model.
pub fn parse_model(text: &str) -> Result<MiddleboxModel, ModelError> {
    let toks = Lexer::new(text).tokens()?;
    let mut parser = Parser { toks, idx: 0 };
    let model = parser.model()?;
    check_model(model)
}
