//! Block structure and statement classification over logical lines.
//!
//! Only the constructs the rules need are modelled: assignments,
//! augmented assignments, `if`/`elif`/`else`, `def`, `return` and imports.
//! Everything else is an opaque statement that still contributes its
//! tokens (and therefore its calls and name references).

use super::lexer::{tokenize, Comment, LogicalLine, Token, TokenKind};
use super::ParseError;

pub const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue", "def", "del",
    "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "in", "is", "lambda", "nonlocal",
    "not", "or", "pass", "raise", "return", "try", "while", "with", "yield",
];

const COMPOUND: &[&str] =
    &["if", "elif", "else", "for", "while", "def", "class", "try", "except", "finally", "with", "async"];

const AUG_OPS: &[&str] = &["+=", "-=", "*=", "/=", "//=", "%=", "**=", ">>=", "<<=", "&=", "|=", "^=", "@="];

pub fn is_keyword(text: &str) -> bool {
    KEYWORDS.contains(&text)
}

#[derive(Debug, Clone)]
pub enum StmtKind {
    Assign {
        targets: Vec<Vec<Token>>,
        value: Vec<Token>,
    },
    AugAssign {
        target: Vec<Token>,
        op: String,
        value: Vec<Token>,
    },
    Return {
        value: Vec<Token>,
    },
    Import,
    If {
        test: Vec<Token>,
    },
    Elif {
        test: Vec<Token>,
    },
    Else,
    Def,
    /// Any other compound statement (`for`, `while`, `try`, `with`, ...),
    /// named by its leading keyword.
    Compound {
        keyword: String,
    },
    Other,
}

#[derive(Debug, Clone)]
pub struct Stmt {
    pub line: usize,
    pub kind: StmtKind,
    /// Tokens of the statement itself (the header for compound statements).
    pub tokens: Vec<Token>,
    pub body: Vec<Stmt>,
}

impl Stmt {
    pub fn is_compound(&self) -> bool {
        matches!(
            self.kind,
            StmtKind::If { .. } | StmtKind::Elif { .. } | StmtKind::Else | StmtKind::Def | StmtKind::Compound { .. }
        )
    }

    /// Depth-first walk over this statement and everything nested in it.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Stmt)) {
        f(self);
        for child in &self.body {
            child.walk(f);
        }
    }
}

#[derive(Debug)]
pub struct Module {
    pub body: Vec<Stmt>,
    pub comments: Vec<Comment>,
}

impl Module {
    pub fn walk<'a>(&'a self, mut f: impl FnMut(&'a Stmt)) {
        for stmt in &self.body {
            stmt.walk(&mut f);
        }
    }
}

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError { line, message: message.into() }
}

pub fn parse(source: &str) -> Result<Module, ParseError> {
    let lexed = tokenize(source)?;
    let mut lines = lexed.lines.into_iter().peekable();
    let first_indent = lines.peek().map_or(0, |l| l.indent);
    if first_indent != 0 {
        return Err(err(lines.peek().map_or(1, |l| l.line), "unexpected indent"));
    }
    let mut parser = BlockParser { lines: lines.collect(), pos: 0 };
    let body = parser.block(0)?;
    if parser.pos < parser.lines.len() {
        let line = &parser.lines[parser.pos];
        return Err(err(line.line, "unindent does not match any outer indentation level"));
    }
    Ok(Module { body, comments: lexed.comments })
}

struct BlockParser {
    lines: Vec<LogicalLine>,
    pos: usize,
}

impl BlockParser {
    fn block(&mut self, indent: usize) -> Result<Vec<Stmt>, ParseError> {
        let mut stmts: Vec<Stmt> = Vec::new();
        while self.pos < self.lines.len() {
            let line = &self.lines[self.pos];
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return Err(err(line.line, "unexpected indent"));
            }
            let line = self.lines[self.pos].clone();
            self.pos += 1;
            let mut parsed = parse_line(&line)?;
            let needs_body = parsed.last().is_some_and(|s| s.is_compound() && s.body.is_empty());
            if needs_body {
                let next = self.lines.get(self.pos);
                match next {
                    Some(next) if next.indent > indent => {
                        let child_indent = next.indent;
                        let body = self.block(child_indent)?;
                        parsed.last_mut().expect("non-empty").body = body;
                    }
                    _ => return Err(err(line.line, "expected an indented block")),
                }
            }
            for stmt in parsed {
                check_clause_order(stmts.last(), &stmt)?;
                stmts.push(stmt);
            }
            if let Some(next) = self.lines.get(self.pos) {
                if next.indent > indent {
                    return Err(err(next.line, "unexpected indent"));
                }
                if next.indent < indent {
                    break;
                }
            }
        }
        Ok(stmts)
    }
}

fn check_clause_order(previous: Option<&Stmt>, stmt: &Stmt) -> Result<(), ParseError> {
    let keyword = |s: &Stmt| s.tokens.first().map(|t| t.text.clone()).unwrap_or_default();
    let prev = previous.map(keyword).unwrap_or_default();
    let allowed: &[&str] = match keyword(stmt).as_str() {
        "elif" => &["if", "elif"],
        "else" => &["if", "elif", "for", "while", "try", "except", "async"],
        "except" => &["try", "except"],
        "finally" => &["try", "except", "else"],
        _ => return Ok(()),
    };
    if allowed.contains(&prev.as_str()) {
        Ok(())
    } else {
        Err(err(stmt.line, format!("'{}' without a matching block", keyword(stmt))))
    }
}

/// Splits a token run at depth-0 occurrences of `sep`.
pub fn split_top_level(tokens: &[Token], is_sep: impl Fn(&Token) -> bool) -> Vec<&[Token]> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, token) in tokens.iter().enumerate() {
        if token.kind == TokenKind::Op {
            match token.text.as_str() {
                "(" | "[" | "{" => depth += 1,
                ")" | "]" | "}" => depth -= 1,
                _ => {}
            }
        }
        if depth == 0 && is_sep(token) {
            parts.push(&tokens[start..i]);
            start = i + 1;
        }
    }
    parts.push(&tokens[start..]);
    parts
}

/// Index of the colon ending a compound statement header, skipping the
/// colons of depth-0 lambdas.
fn header_colon(tokens: &[Token]) -> Option<usize> {
    let mut depth = 0i32;
    let mut lambdas = 0;
    for (i, token) in tokens.iter().enumerate() {
        match (&token.kind, token.text.as_str()) {
            (TokenKind::Op, "(" | "[" | "{") => depth += 1,
            (TokenKind::Op, ")" | "]" | "}") => depth -= 1,
            (TokenKind::Name, "lambda") if depth == 0 => lambdas += 1,
            (TokenKind::Op, ":") if depth == 0 => {
                if lambdas > 0 {
                    lambdas -= 1;
                } else {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn is_compound_start(tokens: &[Token]) -> bool {
    let Some(first) = tokens.first() else { return false };
    if first.kind != TokenKind::Name {
        return false;
    }
    if COMPOUND.contains(&first.text.as_str()) {
        return true;
    }
    // Soft keywords: `match subject:` / `case pattern:`.
    matches!(first.text.as_str(), "match" | "case")
        && tokens.get(1).is_some_and(|t| {
            !(t.kind == TokenKind::Op && matches!(t.text.as_str(), "=" | "." | "(" | "[" | ","))
                && !AUG_OPS.contains(&t.text.as_str())
        })
        && tokens.last().is_some_and(|t| t.is_op(":"))
}

fn parse_line(line: &LogicalLine) -> Result<Vec<Stmt>, ParseError> {
    let tokens = &line.tokens;
    if is_compound_start(tokens) {
        let colon =
            header_colon(tokens).ok_or_else(|| err(line.line, "expected ':' after compound statement header"))?;
        let header = tokens[..colon].to_vec();
        let mut stmt = compound(header, line.line)?;
        let inline = &tokens[colon + 1..];
        if !inline.is_empty() {
            stmt.body = simple_statements(inline, line.line)?;
        }
        return Ok(vec![stmt]);
    }
    simple_statements(tokens, line.line)
}

fn compound(header: Vec<Token>, line: usize) -> Result<Stmt, ParseError> {
    let keyword = header[0].text.clone();
    let rest = header[1..].to_vec();
    let kind = match keyword.as_str() {
        "if" | "elif" | "while" if rest.is_empty() => {
            return Err(err(line, format!("'{keyword}' without a condition")))
        }
        "if" => StmtKind::If { test: rest },
        "elif" => StmtKind::Elif { test: rest },
        "else" if !rest.is_empty() => return Err(err(line, "unexpected tokens after 'else'")),
        "else" => StmtKind::Else,
        "def" => {
            if !rest.first().is_some_and(|t| t.is_name()) {
                return Err(err(line, "expected function name"));
            }
            if !rest.get(1).is_some_and(|t| t.is_op("(")) {
                return Err(err(line, "expected '(' after function name"));
            }
            StmtKind::Def
        }
        "async" => match rest.first().map(|t| t.text.as_str()) {
            Some("def") => {
                let mut inner = compound(rest, line)?;
                inner.tokens = header.clone();
                return Ok(inner);
            }
            Some("for") | Some("with") => StmtKind::Compound { keyword },
            _ => return Err(err(line, "expected 'def', 'for' or 'with' after 'async'")),
        },
        _ => StmtKind::Compound { keyword },
    };
    Ok(Stmt { line, kind, tokens: header, body: Vec::new() })
}

fn simple_statements(tokens: &[Token], line: usize) -> Result<Vec<Stmt>, ParseError> {
    split_top_level(tokens, |t| t.is_op(";"))
        .into_iter()
        .filter(|part| !part.is_empty())
        .map(|part| simple(part, line))
        .collect()
}

fn simple(tokens: &[Token], line: usize) -> Result<Stmt, ParseError> {
    let first = &tokens[0];
    if first.is_name() && COMPOUND.contains(&first.text.as_str()) {
        return Err(err(line, format!("'{}' cannot follow ':' on the same line", first.text)));
    }
    let kind = match first.text.as_str() {
        "return" if first.is_name() => StmtKind::Return { value: tokens[1..].to_vec() },
        "import" | "from" if first.is_name() => StmtKind::Import,
        _ => classify_assignment(tokens, line)?,
    };
    Ok(Stmt { line, kind, tokens: tokens.to_vec(), body: Vec::new() })
}

fn classify_assignment(tokens: &[Token], line: usize) -> Result<StmtKind, ParseError> {
    if let Some(pos) = top_level_position(tokens, |t| t.kind == TokenKind::Op && AUG_OPS.contains(&t.text.as_str())) {
        if pos == 0 || pos + 1 == tokens.len() {
            return Err(err(line, "incomplete augmented assignment"));
        }
        return Ok(StmtKind::AugAssign {
            target: tokens[..pos].to_vec(),
            op: tokens[pos].text.clone(),
            value: tokens[pos + 1..].to_vec(),
        });
    }
    let parts = split_top_level(tokens, |t| t.is_op("="));
    if parts.len() == 1 {
        return Ok(StmtKind::Other);
    }
    if parts.iter().any(|p| p.is_empty()) {
        return Err(err(line, "incomplete assignment"));
    }
    let (value, targets) = parts.split_last().expect("at least two parts");
    let targets = targets
        .iter()
        .map(|target| {
            // Annotated assignment: `name: type = value`.
            split_top_level(target, |t| t.is_op(":"))[0].to_vec()
        })
        .collect();
    Ok(StmtKind::Assign { targets, value: value.to_vec() })
}

fn top_level_position(tokens: &[Token], pred: impl Fn(&Token) -> bool) -> Option<usize> {
    let mut depth = 0i32;
    for (i, token) in tokens.iter().enumerate() {
        if token.kind == TokenKind::Op {
            match token.text.as_str() {
                "(" | "[" | "{" => depth += 1,
                ")" | "]" | "}" => depth -= 1,
                _ => {}
            }
        }
        if depth == 0 && pred(token) {
            return Some(i);
        }
    }
    None
}
