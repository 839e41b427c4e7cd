//! Tokenizer for the reward scripting dialect (a Python subset).
//!
//! Produces logical lines (physical lines joined across brackets and
//! backslash continuations) with their indentation, plus the comments.

use super::ParseError;

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    Name,
    Number,
    /// String literal. For f-strings, the tokens of the embedded
    /// `{expression}` parts are kept so references inside them are visible.
    Str {
        embedded: Vec<Token>,
    },
    Op,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub kind: TokenKind,
    pub text: String,
    pub line: usize,
}

impl Token {
    pub fn is_op(&self, op: &str) -> bool {
        self.kind == TokenKind::Op && self.text == op
    }

    pub fn is_name(&self) -> bool {
        self.kind == TokenKind::Name
    }

    pub fn is_keyword(&self, kw: &str) -> bool {
        self.kind == TokenKind::Name && self.text == kw
    }
}

#[derive(Debug, Clone)]
pub struct LogicalLine {
    pub indent: usize,
    pub line: usize,
    pub tokens: Vec<Token>,
}

#[derive(Debug, Clone)]
pub struct Comment {
    pub line: usize,
    pub text: String,
}

#[derive(Debug, Default)]
pub struct Lexed {
    pub lines: Vec<LogicalLine>,
    pub comments: Vec<Comment>,
}

const OPERATORS: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "...", "->", ":=", "**", "//", "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "%=",
    "&=", "|=", "^=", "@=", "<<", ">>", "+", "-", "*", "/", "%", "@", "&", "|", "^", "~", "<", ">", "(", ")", "[", "]",
    "{", "}", ",", ":", ".", ";", "=", "!",
];

struct Lexer {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    out: Lexed,
    brackets: Vec<(char, usize)>,
    current: Option<LogicalLine>,
}

pub fn tokenize(source: &str) -> Result<Lexed, ParseError> {
    let mut lexer = Lexer {
        chars: source.chars().collect(),
        pos: 0,
        line: 1,
        out: Lexed::default(),
        brackets: Vec::new(),
        current: None,
    };
    lexer.run()?;
    Ok(lexer.out)
}

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError { line, message: message.into() }
}

fn is_ident_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

fn is_ident_continue(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

impl Lexer {
    fn peek(&self, offset: usize) -> Option<char> {
        self.chars.get(self.pos + offset).copied()
    }

    fn run(&mut self) -> Result<(), ParseError> {
        while self.pos < self.chars.len() {
            if self.current.is_none() && self.brackets.is_empty() {
                self.start_line()?;
                continue;
            }
            let c = self.chars[self.pos];
            match c {
                '\n' => {
                    self.pos += 1;
                    self.line += 1;
                    if self.brackets.is_empty() {
                        self.finish_line();
                    }
                }
                ' ' | '\t' | '\x0c' | '\r' => self.pos += 1,
                '#' => self.comment(),
                '\\' => {
                    // Explicit line continuation.
                    let mut look = self.pos + 1;
                    while look < self.chars.len() && self.chars[look] == '\r' {
                        look += 1;
                    }
                    if self.chars.get(look) == Some(&'\n') {
                        self.pos = look + 1;
                        self.line += 1;
                    } else {
                        return Err(err(self.line, "unexpected character after line continuation"));
                    }
                }
                c if is_ident_start(c) => {
                    if let Some(token) = self.string_with_prefix()? {
                        self.push(token);
                    } else {
                        let start = self.pos;
                        while self.peek(0).is_some_and(is_ident_continue) {
                            self.pos += 1;
                        }
                        let text: String = self.chars[start..self.pos].iter().collect();
                        self.push(Token { kind: TokenKind::Name, text, line: self.line });
                    }
                }
                '"' | '\'' => {
                    let token = self.string(String::new())?;
                    self.push(token);
                }
                c if c.is_ascii_digit() || (c == '.' && self.peek(1).is_some_and(|d| d.is_ascii_digit())) => {
                    self.number();
                }
                _ => self.operator()?,
            }
        }
        if let Some(&(open, line)) = self.brackets.last() {
            return Err(err(line, format!("unclosed '{open}'")));
        }
        self.finish_line();
        Ok(())
    }

    /// Measures indentation at the start of a physical line; skips blank
    /// and comment-only lines entirely.
    fn start_line(&mut self) -> Result<(), ParseError> {
        let mut indent = 0;
        loop {
            match self.peek(0) {
                Some(' ') => indent += 1,
                Some('\t') => indent = (indent / 8 + 1) * 8,
                Some('\x0c') | Some('\r') => {}
                _ => break,
            }
            self.pos += 1;
        }
        match self.peek(0) {
            None => Ok(()),
            Some('\n') => {
                self.pos += 1;
                self.line += 1;
                Ok(())
            }
            Some('#') => {
                self.comment();
                Ok(())
            }
            Some('\\') => Err(err(self.line, "line continuation at start of line")),
            Some(_) => {
                self.current = Some(LogicalLine { indent, line: self.line, tokens: Vec::new() });
                Ok(())
            }
        }
    }

    fn finish_line(&mut self) {
        if let Some(line) = self.current.take() {
            if !line.tokens.is_empty() {
                self.out.lines.push(line);
            }
        }
    }

    fn push(&mut self, token: Token) {
        if self.current.is_none() {
            self.current = Some(LogicalLine { indent: 0, line: token.line, tokens: Vec::new() });
        }
        self.current.as_mut().expect("line started").tokens.push(token);
    }

    fn comment(&mut self) {
        let start = self.pos + 1;
        while self.peek(0).is_some_and(|c| c != '\n') {
            self.pos += 1;
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        self.out.comments.push(Comment { line: self.line, text: text.trim().to_owned() });
    }

    fn string_with_prefix(&mut self) -> Result<Option<Token>, ParseError> {
        let mut len = 0;
        while len < 3 && self.peek(len).is_some_and(|c| "rRbBuUfF".contains(c)) {
            len += 1;
        }
        if len == 0 || !matches!(self.peek(len), Some('"') | Some('\'')) {
            return Ok(None);
        }
        let prefix: String = self.chars[self.pos..self.pos + len].iter().collect::<String>().to_lowercase();
        let valid = matches!(prefix.as_str(), "r" | "b" | "u" | "f" | "rb" | "br" | "fr" | "rf");
        if !valid {
            return Ok(None);
        }
        self.pos += len;
        self.string(prefix).map(Some)
    }

    fn string(&mut self, prefix: String) -> Result<Token, ParseError> {
        let start_line = self.line;
        let quote = self.chars[self.pos];
        let triple = self.peek(1) == Some(quote) && self.peek(2) == Some(quote);
        self.pos += if triple { 3 } else { 1 };
        let body_start = self.pos;
        loop {
            match self.peek(0) {
                None => return Err(err(start_line, "unterminated string literal")),
                Some('\\') => {
                    if self.peek(1) == Some('\n') {
                        self.line += 1;
                    }
                    self.pos += 2;
                }
                Some('\n') if !triple => return Err(err(start_line, "unterminated string literal")),
                Some('\n') => {
                    self.line += 1;
                    self.pos += 1;
                }
                Some(c) if c == quote => {
                    if !triple {
                        break;
                    }
                    if self.peek(1) == Some(quote) && self.peek(2) == Some(quote) {
                        break;
                    }
                    self.pos += 1;
                }
                Some(_) => self.pos += 1,
            }
        }
        let body: String = self.chars[body_start..self.pos].iter().collect();
        self.pos += if triple { 3 } else { 1 };
        let embedded = if prefix.contains('f') { fstring_expressions(&body, start_line)? } else { Vec::new() };
        Ok(Token { kind: TokenKind::Str { embedded }, text: body, line: start_line })
    }

    fn number(&mut self) {
        let start = self.pos;
        while let Some(c) = self.peek(0) {
            let exponent_sign = (c == '+' || c == '-')
                && matches!(self.chars.get(self.pos.wrapping_sub(1)), Some('e') | Some('E'))
                && !self.chars[start..self.pos].iter().any(|d| matches!(d, 'x' | 'X'));
            if c.is_ascii_alphanumeric() || c == '_' || c == '.' || exponent_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text: String = self.chars[start..self.pos].iter().collect();
        self.push(Token { kind: TokenKind::Number, text, line: self.line });
    }

    fn operator(&mut self) -> Result<(), ParseError> {
        let rest: String = self.chars[self.pos..(self.pos + 3).min(self.chars.len())].iter().collect();
        let op = OPERATORS
            .iter()
            .find(|op| rest.starts_with(**op))
            .ok_or_else(|| err(self.line, format!("invalid character {:?}", self.chars[self.pos])))?;
        match *op {
            "(" | "[" | "{" => self.brackets.push((op.chars().next().unwrap(), self.line)),
            ")" | "]" | "}" => {
                let expected = match *op {
                    ")" => '(',
                    "]" => '[',
                    _ => '{',
                };
                match self.brackets.pop() {
                    Some((open, _)) if open == expected => {}
                    Some((open, line)) => {
                        return Err(err(self.line, format!("'{op}' does not match '{open}' opened on line {line}")))
                    }
                    None => return Err(err(self.line, format!("unmatched '{op}'"))),
                }
            }
            _ => {}
        }
        self.pos += op.chars().count();
        self.push(Token { kind: TokenKind::Op, text: (*op).to_owned(), line: self.line });
        Ok(())
    }
}

/// Tokens of the `{...}` replacement fields of an f-string body.
fn fstring_expressions(body: &str, line: usize) -> Result<Vec<Token>, ParseError> {
    let chars: Vec<char> = body.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        match chars[i] {
            '{' if chars.get(i + 1) == Some(&'{') => i += 2,
            '}' if chars.get(i + 1) == Some(&'}') => i += 2,
            '{' => {
                let mut depth = 1;
                let start = i + 1;
                i += 1;
                while i < chars.len() && depth > 0 {
                    match chars[i] {
                        '{' | '(' | '[' => depth += 1,
                        '}' | ')' | ']' => depth -= 1,
                        _ => {}
                    }
                    i += 1;
                }
                if depth != 0 {
                    return Err(err(line, "unterminated f-string replacement field"));
                }
                let inner: String = chars[start..i - 1].iter().collect();
                // Drop conversion and format spec.
                let expr = split_format_spec(&inner);
                let lexed = tokenize(expr).map_err(|e| err(line, format!("in f-string: {}", e.message)))?;
                for mut token in lexed.lines.into_iter().flat_map(|l| l.tokens) {
                    token.line = line;
                    tokens.push(token);
                }
            }
            _ => i += 1,
        }
    }
    Ok(tokens)
}

fn split_format_spec(field: &str) -> &str {
    let mut depth = 0;
    let mut quote: Option<char> = None;
    for (i, c) in field.char_indices() {
        match (quote, c) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), _) => {}
            (None, '\'' | '"') => quote = Some(c),
            (None, '(' | '[' | '{') => depth += 1,
            (None, ')' | ']' | '}') => depth -= 1,
            (None, '!') if depth == 0 && !field[i + 1..].starts_with('=') => return &field[..i],
            (None, ':') if depth == 0 => return &field[..i],
            _ => {}
        }
    }
    field
}
