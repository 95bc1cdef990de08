use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::token::{tokenize, Token, TokenKind};

/// A checker rule and the error code it reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Rule {
    Syntax,
    DuplicateClock,
    ProbeInitZero,
    StrayAssignment,
    PulseUndeclared,
    UndeclaredUse,
    InputDriven,
    Undriven,
}

impl Rule {
    pub const ALL: [Rule; 8] = [
        Rule::Syntax,
        Rule::DuplicateClock,
        Rule::ProbeInitZero,
        Rule::StrayAssignment,
        Rule::PulseUndeclared,
        Rule::UndeclaredUse,
        Rule::InputDriven,
        Rule::Undriven,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Rule::Syntax => "S-error-1",
            Rule::DuplicateClock => "T-error-2",
            Rule::ProbeInitZero => "T-error-4",
            Rule::StrayAssignment => "T-error-18",
            Rule::PulseUndeclared => "T-error-27",
            Rule::UndeclaredUse => "C-error-1",
            Rule::InputDriven => "C-error-2",
            Rule::Undriven => "P-error-8",
        }
    }

    /// Must match the description of the same code in `data/error_db.jsonl`.
    pub fn description(self) -> &'static str {
        match self {
            Rule::Syntax => "Script syntax error",
            Rule::DuplicateClock => "Clock definition duplicate",
            Rule::ProbeInitZero => "Probe initilized as 0 in **",
            Rule::StrayAssignment => "Assignment in non-initialization stage",
            Rule::PulseUndeclared => "Pulse non-exist variable",
            Rule::UndeclaredUse => "Netlist not correctly obtain defined signal",
            Rule::InputDriven => "Not define top port as output",
            Rule::Undriven => "Definition lack of shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Diagnostic {
    pub line: usize,
    pub code: String,
    pub description: String,
}

impl Diagnostic {
    pub fn new(rule: Rule, line: usize) -> Self {
        Diagnostic {
            line,
            code: rule.code().to_string(),
            description: rule.description().to_string(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} at line {}: {}",
            self.code, self.line, self.description
        )
    }
}

/// Render diagnostics as an error message, one per line.
pub fn format_message(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PortDir {
    Input,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum DeclKind {
    Wire,
    Reg,
    Clock,
    Probe,
}

impl DeclKind {
    fn from_keyword(kw: &str) -> Option<Self> {
        Some(match kw {
            "wire" => DeclKind::Wire,
            "reg" => DeclKind::Reg,
            "clock" => DeclKind::Clock,
            "probe" => DeclKind::Probe,
            _ => return None,
        })
    }
}

/// Token index ranges refer to the significant-token vector of the parse.
#[derive(Debug, Clone)]
pub(crate) enum Item<'a> {
    Decl {
        kind: DeclKind,
        name: Token<'a>,
        /// index of the first and of the terminating `;` token
        first: usize,
        semi: usize,
    },
    Assign {
        target: Token<'a>,
        rhs: Vec<Token<'a>>,
        first: usize,
        semi: usize,
    },
    Pulse {
        target: Token<'a>,
        first: usize,
        semi: usize,
    },
    Init {
        target: Token<'a>,
        value: Token<'a>,
        first: usize,
        semi: usize,
    },
}

impl<'a> Item<'a> {
    pub(crate) fn first(&self) -> usize {
        match self {
            Item::Decl { first, .. }
            | Item::Assign { first, .. }
            | Item::Pulse { first, .. }
            | Item::Init { first, .. } => *first,
        }
    }

    pub(crate) fn semi(&self) -> usize {
        match self {
            Item::Decl { semi, .. }
            | Item::Assign { semi, .. }
            | Item::Pulse { semi, .. }
            | Item::Init { semi, .. } => *semi,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Port<'a> {
    pub dir: PortDir,
    /// the `input`/`output` keyword token
    pub dir_token: Token<'a>,
    pub name: Token<'a>,
}

/// Result of parsing a source file, including partial results for
/// malformed input.
#[derive(Debug, Clone)]
pub(crate) struct Parsed<'a> {
    pub toks: Vec<Token<'a>>,
    pub ports: Vec<Port<'a>>,
    pub items: Vec<Item<'a>>,
    /// index into `toks` of the `endmodule` keyword, if found
    pub endmodule: Option<usize>,
    pub syntax_errors: Vec<usize>,
}

const STATEMENT_START: &[&str] = &[
    "module",
    "endmodule",
    "input",
    "output",
    "wire",
    "reg",
    "clock",
    "probe",
    "assign",
    "pulse",
    "init",
];

struct Parser<'a> {
    toks: Vec<Token<'a>>,
    pos: usize,
    /// tokens at or beyond `limit` are invisible to `peek`
    limit: usize,
    last_line: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Token<'a>> {
        if self.pos < self.limit {
            self.toks.get(self.pos)
        } else {
            None
        }
    }

    fn line_here(&self) -> usize {
        self.peek().map_or(self.last_line, |t| t.line)
    }

    fn expect(&mut self, pred: impl Fn(&Token<'a>) -> bool) -> Result<Token<'a>, usize> {
        match self.peek() {
            Some(t) if pred(t) => {
                let t = t.clone();
                self.pos += 1;
                Ok(t)
            }
            _ => Err(self.line_here()),
        }
    }

    fn expect_ident(&mut self) -> Result<Token<'a>, usize> {
        self.expect(|t| t.kind == TokenKind::Identifier)
    }

    fn expect_punct(&mut self, p: &str) -> Result<Token<'a>, usize> {
        self.expect(|t| t.is_punct(p))
    }

    fn skip_past_semicolon(&mut self) {
        while let Some(is_semi) = self.peek().map(|t| t.is_punct(";")) {
            self.pos += 1;
            if is_semi {
                break;
            }
        }
    }

    fn header(&mut self, ports: &mut Vec<Port<'a>>) -> Result<(), usize> {
        self.expect(|t| t.is_keyword("module"))?;
        self.expect_ident()?;
        self.expect_punct("(")?;
        if self.peek().is_some_and(|t| t.is_punct(")")) {
            self.pos += 1;
        } else {
            loop {
                let dir_token = self.expect(|t| t.is_keyword("input") || t.is_keyword("output"))?;
                let dir = if dir_token.text == "input" {
                    PortDir::Input
                } else {
                    PortDir::Output
                };
                let name = self.expect_ident()?;
                ports.push(Port {
                    dir,
                    dir_token,
                    name,
                });
                if self.peek().is_some_and(|t| t.is_punct(",")) {
                    self.pos += 1;
                    continue;
                }
                self.expect_punct(")")?;
                break;
            }
        }
        self.expect_punct(";")?;
        Ok(())
    }

    /// Statement extent: up to and including the next `;`, stopping early
    /// before a token that can only start a new statement.
    fn statement_extent(&self) -> usize {
        let mut end = self.pos;
        while end < self.toks.len() {
            let t = &self.toks[end];
            if end > self.pos && t.kind == TokenKind::Keyword && STATEMENT_START.contains(&t.text) {
                return end;
            }
            end += 1;
            if t.is_punct(";") {
                return end;
            }
        }
        end
    }

    fn item(&mut self, end: usize) -> Option<Item<'a>> {
        let first = self.pos;
        self.limit = end;
        let item = self.item_inner(first);
        self.limit = self.toks.len();
        self.pos = end;
        item.filter(|it| it.semi() + 1 == end)
    }

    fn item_inner(&mut self, first: usize) -> Option<Item<'a>> {
        let head = self.peek().cloned()?;
        if head.kind != TokenKind::Keyword {
            return None;
        }
        self.pos += 1;
        let item = if let Some(kind) = DeclKind::from_keyword(head.text) {
            let name = self.expect_ident().ok()?;
            self.expect_punct(";").ok()?;
            Item::Decl {
                kind,
                name,
                first,
                semi: self.pos - 1,
            }
        } else if head.text == "assign" {
            let target = self.expect_ident().ok()?;
            self.expect_punct("=").ok()?;
            let rhs_start = self.pos;
            self.expr().ok()?;
            let rhs = self.toks[rhs_start..self.pos].to_vec();
            self.expect_punct(";").ok()?;
            Item::Assign {
                target,
                rhs,
                first,
                semi: self.pos - 1,
            }
        } else if head.text == "pulse" {
            let target = self.expect_ident().ok()?;
            self.expect_punct(";").ok()?;
            Item::Pulse {
                target,
                first,
                semi: self.pos - 1,
            }
        } else if head.text == "init" {
            let target = self.expect_ident().ok()?;
            self.expect_punct("=").ok()?;
            let value = self.expect(|t| t.kind == TokenKind::Number).ok()?;
            self.expect_punct(";").ok()?;
            Item::Init {
                target,
                value,
                first,
                semi: self.pos - 1,
            }
        } else {
            return None;
        };
        Some(item)
    }

    fn expr(&mut self) -> Result<(), usize> {
        self.operand()?;
        while self.peek().is_some_and(|t| {
            t.kind == TokenKind::Punct && matches!(t.text, "&" | "|" | "^" | "+" | "-" | "*")
        }) {
            self.pos += 1;
            self.operand()?;
        }
        Ok(())
    }

    fn operand(&mut self) -> Result<(), usize> {
        let t = self.peek().cloned().ok_or(self.last_line)?;
        match t.kind {
            TokenKind::Identifier | TokenKind::Number => {
                self.pos += 1;
                Ok(())
            }
            TokenKind::Punct if matches!(t.text, "~" | "!" | "-") => {
                self.pos += 1;
                self.operand()
            }
            TokenKind::Punct if t.text == "(" => {
                self.pos += 1;
                self.expr()?;
                self.expect_punct(")").map(drop)
            }
            _ => Err(t.line),
        }
    }
}

pub(crate) fn parse(text: &str) -> Parsed<'_> {
    let toks: Vec<Token<'_>> = tokenize(text)
        .into_iter()
        .filter(|t| !t.kind.is_trivia())
        .collect();
    let last_line = 1 + text.bytes().filter(|&b| b == b'\n').count();
    let limit = toks.len();
    let mut p = Parser {
        toks,
        pos: 0,
        limit,
        last_line: last_line.max(1),
    };
    let mut ports = Vec::new();
    let mut items = Vec::new();
    let mut syntax_errors = Vec::new();
    let mut endmodule = None;

    if let Err(line) = p.header(&mut ports) {
        syntax_errors.push(line);
        // resume after the header terminator, if there is one
        p.skip_past_semicolon();
    }

    while let Some(t) = p.peek().cloned() {
        if t.is_keyword("endmodule") {
            endmodule = Some(p.pos);
            p.pos += 1;
            break;
        }
        let end = p.statement_extent();
        match p.item(end) {
            Some(item) => items.push(item),
            None => syntax_errors.push(t.line),
        }
    }
    if endmodule.is_none() {
        syntax_errors.push(p.toks.last().map_or(p.last_line, |t| t.line));
    } else if let Some(t) = p.peek() {
        syntax_errors.push(t.line);
    }

    Parsed {
        toks: p.toks,
        ports,
        items,
        endmodule,
        syntax_errors,
    }
}

fn is_zero(number: &str) -> bool {
    number.bytes().all(|b| b == b'0' || b == b'_')
}

/// Run every checker rule over `text`. Deterministic; the result is sorted
/// by `(line, code)` and free of duplicates.
pub fn check(text: &str) -> Vec<Diagnostic> {
    let parsed = parse(text);
    let mut diags: BTreeSet<Diagnostic> = parsed
        .syntax_errors
        .iter()
        .map(|&line| Diagnostic::new(Rule::Syntax, line))
        .collect();

    #[derive(Clone, Copy)]
    enum Sym {
        Port(PortDir),
        Decl(DeclKind),
    }
    let mut symbols: BTreeMap<&str, Sym> = BTreeMap::new();
    for port in &parsed.ports {
        if symbols
            .insert(port.name.text, Sym::Port(port.dir))
            .is_some()
        {
            diags.insert(Diagnostic::new(Rule::UndeclaredUse, port.name.line));
        }
    }
    let mut last_decl = None;
    for (idx, item) in parsed.items.iter().enumerate() {
        if let Item::Decl { kind, name, .. } = item {
            last_decl = Some(idx);
            match symbols.get(name.text) {
                None => {
                    symbols.insert(name.text, Sym::Decl(*kind));
                }
                Some(Sym::Decl(DeclKind::Clock)) if *kind == DeclKind::Clock => {
                    diags.insert(Diagnostic::new(Rule::DuplicateClock, name.line));
                }
                Some(_) => {
                    diags.insert(Diagnostic::new(Rule::UndeclaredUse, name.line));
                }
            }
        }
    }

    let mut driven: BTreeSet<&str> = BTreeSet::new();
    for (idx, item) in parsed.items.iter().enumerate() {
        match item {
            Item::Decl { .. } => {}
            Item::Assign { target, rhs, .. } => {
                if last_decl.is_some_and(|last| idx < last) {
                    diags.insert(Diagnostic::new(Rule::StrayAssignment, target.line));
                }
                match symbols.get(target.text) {
                    None => {
                        diags.insert(Diagnostic::new(Rule::UndeclaredUse, target.line));
                    }
                    Some(Sym::Port(PortDir::Input)) => {
                        diags.insert(Diagnostic::new(Rule::InputDriven, target.line));
                    }
                    Some(_) => {}
                }
                driven.insert(target.text);
                for t in rhs.iter().filter(|t| t.kind == TokenKind::Identifier) {
                    if !symbols.contains_key(t.text) {
                        diags.insert(Diagnostic::new(Rule::UndeclaredUse, t.line));
                    }
                }
            }
            Item::Pulse { target, .. } => {
                if !symbols.contains_key(target.text) {
                    diags.insert(Diagnostic::new(Rule::PulseUndeclared, target.line));
                }
            }
            Item::Init { target, value, .. } => match symbols.get(target.text) {
                None => {
                    diags.insert(Diagnostic::new(Rule::UndeclaredUse, target.line));
                }
                Some(Sym::Decl(DeclKind::Probe)) if is_zero(value.text) => {
                    diags.insert(Diagnostic::new(Rule::ProbeInitZero, value.line));
                }
                Some(_) => {}
            },
        }
    }

    for port in &parsed.ports {
        if port.dir == PortDir::Output && !driven.contains(port.name.text) {
            diags.insert(Diagnostic::new(Rule::Undriven, port.name.line));
        }
    }
    for item in &parsed.items {
        if let Item::Decl {
            kind: DeclKind::Wire,
            name,
            ..
        } = item
        {
            if !driven.contains(name.text) {
                diags.insert(Diagnostic::new(Rule::Undriven, name.line));
            }
        }
    }

    let mut out: Vec<Diagnostic> = diags.into_iter().collect();
    out.sort_by(|a, b| (a.line, &a.code).cmp(&(b.line, &b.code)));
    out
}
