use std::collections::BTreeSet;

use super::lexer::{Token, TokenKind};
use super::parser::{is_keyword, split_top_level, Module, Stmt, StmtKind};
use super::{PatternId, Scanner};

const COMPARISONS: &[&str] = &["==", "!=", "<", ">", "<=", ">="];

/// Every statement in document order, with the guards that enclose it.
struct Visit<'a> {
    stmt: &'a Stmt,
    /// Enclosing guards, outermost first.
    guards: Vec<Guard<'a>>,
}

#[derive(Clone, Copy)]
struct Guard<'a> {
    line: usize,
    test: &'a [Token],
    block: &'a [Stmt],
}

struct Increment<'a> {
    line: usize,
    value: &'a [Token],
    guards: Vec<Guard<'a>>,
}

pub(super) fn run(scanner: &Scanner, module: &Module) -> Vec<(usize, PatternId)> {
    let mut visits = Vec::new();
    collect(&module.body, &[], &mut visits);
    let increments: Vec<(usize, Increment)> =
        visits.iter().enumerate().filter_map(|(i, v)| scanner.increment(v).map(|inc| (i, inc))).collect();

    let mut hits = Vec::new();
    direct_bool(scanner, &visits, &increments, &mut hits);
    placeholder(scanner, module, &mut hits);
    hardcoded_success(scanner, &visits, &mut hits);
    bare_existence(scanner, &increments, &mut hits);
    child_process(scanner, &visits, &mut hits);
    comment_only(scanner, module, &increments, &mut hits);
    hits
}

fn collect<'a>(block: &'a [Stmt], guards: &[Guard<'a>], out: &mut Vec<Visit<'a>>) {
    let mut last_test: Option<&'a [Token]> = None;
    for stmt in block {
        out.push(Visit { stmt, guards: guards.to_vec() });
        let own_test: Option<&'a [Token]> = match &stmt.kind {
            StmtKind::If { test } | StmtKind::Elif { test } => Some(test),
            StmtKind::Else => last_test,
            StmtKind::Compound { keyword } if keyword == "while" => Some(&stmt.tokens[1..]),
            _ => None,
        };
        match &stmt.kind {
            StmtKind::If { test } | StmtKind::Elif { test } => last_test = Some(test),
            StmtKind::Else => {}
            _ => last_test = None,
        }
        if matches!(stmt.kind, StmtKind::Def) {
            collect(&stmt.body, &[], out);
        } else if let Some(test) = own_test {
            let mut inner = guards.to_vec();
            inner.push(Guard { line: stmt.line, test, block: &stmt.body });
            collect(&stmt.body, &inner, out);
        } else {
            collect(&stmt.body, guards, out);
        }
    }
}

/// Tokens with f-string embedded expressions spliced in after their string.
fn flatten(tokens: &[Token]) -> Vec<&Token> {
    let mut out = Vec::with_capacity(tokens.len());
    for token in tokens {
        out.push(token);
        if let TokenKind::Str { embedded } = &token.kind {
            out.extend(flatten(embedded));
        }
    }
    out
}

/// Dotted callee of each call expression. Calls on a non-name expression
/// (`f()()`, `xs[0]()`) have an empty chain.
fn calls(tokens: &[Token]) -> Vec<Vec<String>> {
    let flat = flatten(tokens);
    let mut out = Vec::new();
    for i in 1..flat.len() {
        if !flat[i].is_op("(") {
            continue;
        }
        let prev = flat[i - 1];
        if prev.is_name() && !is_keyword(&prev.text) {
            if i >= 2 && (flat[i - 2].is_keyword("def") || flat[i - 2].is_keyword("class")) {
                continue;
            }
            out.push(chain_ending_at(&flat, i - 1));
        } else if prev.is_op(")") || prev.is_op("]") {
            out.push(Vec::new());
        }
    }
    out
}

fn chain_ending_at(flat: &[&Token], end: usize) -> Vec<String> {
    let mut chain = vec![flat[end].text.clone()];
    let mut i = end;
    while i >= 2 && flat[i - 1].is_op(".") && flat[i - 2].is_name() {
        chain.insert(0, flat[i - 2].text.clone());
        i -= 2;
    }
    chain
}

/// Identifiers read by an expression (attribute names excluded).
fn referenced_names(tokens: &[Token]) -> BTreeSet<String> {
    let flat = flatten(tokens);
    flat.iter()
        .enumerate()
        .filter(|(i, t)| t.is_name() && !is_keyword(&t.text) && !(*i > 0 && flat[i - 1].is_op(".")))
        .map(|(_, t)| t.text.clone())
        .collect()
}

fn single_name(tokens: &[Token]) -> Option<&str> {
    match tokens {
        [t] if t.is_name() && !is_keyword(&t.text) => Some(&t.text),
        _ => None,
    }
}

/// A literal constant: number, string, `True`, `False`, `None`, or a negated number.
fn constant(tokens: &[Token]) -> Option<&Token> {
    match tokens {
        [t] if matches!(t.kind, TokenKind::Number | TokenKind::Str { .. }) => Some(t),
        [t] if ["True", "False", "None"].iter().any(|k| t.is_keyword(k)) => Some(t),
        [minus, t] if minus.is_op("-") && t.kind == TokenKind::Number => Some(t),
        _ => None,
    }
}

fn number_value(token: &Token) -> Option<f64> {
    let text: String = token.text.chars().filter(|c| *c != '_').collect();
    text.parse::<f64>().ok().or_else(|| text.parse::<i64>().ok().map(|v| v as f64))
}

/// Names assigned by a statement, including nested statements.
fn assigns(stmt: &Stmt, name: &str) -> bool {
    let mut found = false;
    stmt.walk(&mut |s| match &s.kind {
        StmtKind::Assign { targets, .. } => {
            if targets.iter().any(|t| target_names(t).iter().any(|n| n == name)) {
                found = true;
            }
        }
        StmtKind::AugAssign { target, .. } => {
            if target_names(target).iter().any(|n| n == name) {
                found = true;
            }
        }
        StmtKind::Compound { keyword }
            if keyword == "for" && s.tokens.iter().any(|t| t.is_name() && t.text == name) =>
        {
            found = true;
        }
        _ => {}
    });
    found
}

/// Plain names bound by an assignment target (`a`, `a, b`, `(a, b)`).
fn target_names(target: &[Token]) -> Vec<String> {
    split_top_level(target, |t| t.is_op(","))
        .into_iter()
        .flat_map(|part| {
            let part = strip_parens(part);
            match single_name(part) {
                Some(name) => vec![name.to_string()],
                None if part.len() > 1 && part.iter().any(|t| t.is_op(",")) => target_names(part),
                None => Vec::new(),
            }
        })
        .collect()
}

fn strip_parens(tokens: &[Token]) -> &[Token] {
    let mut tokens = tokens;
    while tokens.len() >= 2
        && (tokens[0].is_op("(") || tokens[0].is_op("["))
        && matching_close(tokens, 0) == Some(tokens.len() - 1)
    {
        tokens = &tokens[1..tokens.len() - 1];
    }
    tokens
}

fn matching_close(tokens: &[Token], open: usize) -> Option<usize> {
    let mut depth = 0i32;
    for (i, t) in tokens.iter().enumerate().skip(open) {
        if t.kind != TokenKind::Op {
            continue;
        }
        match t.text.as_str() {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

fn matching_open(tokens: &[Token], close: usize) -> Option<usize> {
    let mut depth = 0i32;
    for i in (0..=close).rev() {
        let t = &tokens[i];
        if t.kind != TokenKind::Op {
            continue;
        }
        match t.text.as_str() {
            ")" | "]" | "}" => depth += 1,
            "(" | "[" | "{" => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// Condition of a top-level conditional expression `a if cond else b`.
fn ternary_condition(value: &[Token]) -> Option<&[Token]> {
    let mut depth = 0i32;
    let mut start = None;
    for (i, t) in value.iter().enumerate() {
        match (&t.kind, t.text.as_str()) {
            (TokenKind::Op, "(" | "[" | "{") => depth += 1,
            (TokenKind::Op, ")" | "]" | "}") => depth -= 1,
            (TokenKind::Name, "if") if depth == 0 && start.is_none() => start = Some(i + 1),
            (TokenKind::Name, "else") if depth == 0 => {
                if let Some(s) = start {
                    return Some(&value[s..i]);
                }
            }
            _ => {}
        }
    }
    None
}

impl Scanner {
    fn is_score_target(&self, target: &[Token]) -> Option<String> {
        // `score`, `self.score`, `result.total`.
        let names_and_dots =
            target.iter().enumerate().all(|(i, t)| if i % 2 == 0 { t.is_name() } else { t.is_op(".") });
        if target.is_empty() || !names_and_dots || target.len().is_multiple_of(2) {
            return None;
        }
        let last = &target[target.len() - 1].text;
        self.score.is_match(last).then(|| last.clone())
    }

    fn increment<'a>(&self, visit: &Visit<'a>) -> Option<Increment<'a>> {
        let stmt = visit.stmt;
        let value: &'a [Token] = match &stmt.kind {
            StmtKind::AugAssign { target, op, value } if op == "+=" => {
                self.is_score_target(target)?;
                value
            }
            StmtKind::Assign { targets, value } if targets.len() == 1 => {
                let target = &targets[0];
                self.is_score_target(target)?;
                let n = target.len();
                let same = value.len() > n + 1
                    && value[..n].iter().zip(target).all(|(a, b)| a.text == b.text)
                    && value[n].is_op("+");
                if !same {
                    return None;
                }
                &value[n + 1..]
            }
            _ => return None,
        };
        let mut guards = visit.guards.clone();
        if let Some(cond) = ternary_condition(value) {
            guards.push(Guard { line: stmt.line, test: cond, block: std::slice::from_ref(stmt) });
        }
        Some(Increment { line: stmt.line, value, guards })
    }

    fn is_flag_name(&self, name: &str) -> bool {
        self.flag.is_match(name) && !self.score.is_match(name)
    }

    fn is_read_call(&self, chain: &[String]) -> bool {
        chain
            .last()
            .map(|name| name.to_lowercase())
            .is_some_and(|name| self.read.iter().any(|r| name.starts_with(r.as_str())))
    }

    fn reads_in(&self, block: &[Stmt]) -> bool {
        block.iter().any(|stmt| {
            let mut found = false;
            stmt.walk(&mut |s| {
                if calls(&s.tokens).iter().any(|c| self.is_read_call(c)) {
                    found = true;
                }
            });
            found
        })
    }

    fn existence_only(&self, tokens: &[Token]) -> bool {
        let tokens = strip_parens(tokens);
        if tokens.is_empty() {
            return false;
        }
        let parts = split_top_level(tokens, |t| t.is_keyword("and") || t.is_keyword("or"));
        if parts.len() > 1 {
            return parts.into_iter().all(|p| self.existence_only(p));
        }
        if tokens[0].is_keyword("not") {
            return self.existence_only(&tokens[1..]);
        }
        let comparison = split_top_level(tokens, |t| {
            (t.kind == TokenKind::Op && COMPARISONS.contains(&t.text.as_str()))
                || t.is_keyword("in")
                || t.is_keyword("is")
        });
        if comparison.len() > 1 {
            return false;
        }
        let close = tokens.len() - 1;
        if !tokens[close].is_op(")") {
            return false;
        }
        match matching_open(tokens, close) {
            Some(open) if open >= 1 => {
                let callee = &tokens[open - 1];
                callee.is_name() && self.existence.contains(&callee.text.to_lowercase())
            }
            _ => false,
        }
    }

    fn is_spawn_chain(&self, chain: &[String]) -> bool {
        let lowered: Vec<String> = chain.iter().map(|s| s.to_lowercase()).collect();
        self.spawn.iter().any(|symbol| {
            if symbol.contains('.') {
                let parts: Vec<&str> = symbol.split('.').collect();
                lowered.windows(parts.len()).any(|w| w.iter().zip(&parts).all(|(a, b)| a == b))
            } else {
                lowered.iter().any(|segment| segment.starts_with(symbol.as_str()))
            }
        })
    }
}

fn direct_bool(
    scanner: &Scanner,
    visits: &[Visit],
    increments: &[(usize, Increment)],
    hits: &mut Vec<(usize, PatternId)>,
) {
    for (i, visit) in visits.iter().enumerate() {
        let StmtKind::Assign { targets, value } = &visit.stmt.kind else { continue };
        if !matches!(value.as_slice(), [t] if t.is_keyword("True")) {
            continue;
        }
        for name in targets.iter().filter_map(|t| single_name(t)) {
            if !scanner.is_flag_name(name) {
                continue;
            }
            let stop =
                visits[i + 1..].iter().position(|v| own_assigns(v.stmt, name)).map_or(visits.len(), |p| i + 1 + p);
            let used = increments.iter().any(|(j, inc)| {
                *j > i
                    && *j < stop
                    && (inc.guards.iter().any(|g| referenced_names(g.test).contains(name))
                        || referenced_names(inc.value).contains(name))
            });
            if used {
                hits.push((visit.stmt.line, PatternId::DirectBool));
            }
        }
    }
}

/// Assignment by this statement alone (not its body).
fn own_assigns(stmt: &Stmt, name: &str) -> bool {
    match &stmt.kind {
        StmtKind::Assign { targets, .. } => targets.iter().any(|t| target_names(t).iter().any(|n| n == name)),
        StmtKind::AugAssign { target, .. } => target_names(target).iter().any(|n| n == name),
        StmtKind::Compound { keyword } if keyword == "for" => stmt.tokens.iter().any(|t| t.is_name() && t.text == name),
        _ => false,
    }
}

fn placeholder(scanner: &Scanner, module: &Module, hits: &mut Vec<(usize, PatternId)>) {
    let mut blocks: Vec<&[Stmt]> = vec![&module.body];
    module.walk(|s| {
        if !s.body.is_empty() {
            blocks.push(&s.body);
        }
    });
    for block in blocks {
        for (i, stmt) in block.iter().enumerate() {
            let StmtKind::Assign { targets, value } = &stmt.kind else { continue };
            let Some(literal) = constant(value) else { continue };
            let is_bool_literal = ["True", "False", "None"].iter().any(|k| literal.is_keyword(k));
            for name in targets.iter().filter_map(|t| single_name(t)) {
                if scanner.score.is_match(name) || !(is_bool_literal || scanner.is_flag_name(name)) {
                    continue;
                }
                if placeholder_use(scanner, &block[i + 1..], name) {
                    hits.push((stmt.line, PatternId::Placeholder));
                }
            }
        }
    }
}

/// Walks the straight-line continuation of a block after a flag assignment.
fn placeholder_use(scanner: &Scanner, rest: &[Stmt], name: &str) -> bool {
    for stmt in rest {
        let header_calls = !calls(&stmt.tokens).is_empty();
        match &stmt.kind {
            StmtKind::If { test } | StmtKind::Elif { test } => {
                if header_calls {
                    return false;
                }
                if referenced_names(test).contains(name) && contains_increment(scanner, &stmt.body) {
                    return true;
                }
            }
            StmtKind::AugAssign { .. } | StmtKind::Assign { .. } => {
                let visit = Visit { stmt, guards: Vec::new() };
                if let Some(inc) = scanner.increment(&visit) {
                    if referenced_names(inc.value).contains(name) && calls(inc.value).is_empty() {
                        return true;
                    }
                }
                if header_calls {
                    return false;
                }
            }
            _ if header_calls => return false,
            _ => {}
        }
        let mut evaluates = false;
        stmt.walk(&mut |s| evaluates |= !calls(&s.tokens).is_empty());
        if evaluates || assigns(stmt, name) {
            return false;
        }
    }
    false
}

fn contains_increment(scanner: &Scanner, block: &[Stmt]) -> bool {
    let mut visits = Vec::new();
    collect(block, &[], &mut visits);
    visits.iter().any(|v| scanner.increment(v).is_some())
}

fn hardcoded_success(scanner: &Scanner, visits: &[Visit], hits: &mut Vec<(usize, PatternId)>) {
    for visit in visits {
        if !matches!(visit.stmt.kind, StmtKind::Def) {
            continue;
        }
        if scanner.reads_in(&visit.stmt.body) {
            continue;
        }
        for ret in own_returns(&visit.stmt.body) {
            let StmtKind::Return { value } = &ret.kind else { continue };
            let hardcoded = constant(value)
                .filter(|t| t.kind == TokenKind::Number && !value[0].is_op("-"))
                .and_then(number_value)
                .is_some_and(|v| scanner.success.iter().any(|c| (c - v).abs() < 1e-12));
            if hardcoded {
                hits.push((ret.line, PatternId::HardcodedSuccess));
            }
        }
    }
}

/// Return statements of a function body, excluding nested functions.
fn own_returns(block: &[Stmt]) -> Vec<&Stmt> {
    let mut out = Vec::new();
    for stmt in block {
        match stmt.kind {
            StmtKind::Return { .. } => out.push(stmt),
            StmtKind::Def => {}
            _ => out.extend(own_returns(&stmt.body)),
        }
    }
    out
}

fn bare_existence(scanner: &Scanner, increments: &[(usize, Increment)], hits: &mut Vec<(usize, PatternId)>) {
    for (_, inc) in increments {
        let Some(guard) = inc.guards.last() else { continue };
        if scanner.existence_only(guard.test) && !scanner.reads_in(guard.block) {
            hits.push((guard.line, PatternId::BareExistence));
        }
    }
}

fn child_process(scanner: &Scanner, visits: &[Visit], hits: &mut Vec<(usize, PatternId)>) {
    for visit in visits {
        let stmt = visit.stmt;
        if matches!(stmt.kind, StmtKind::Import) {
            for (line, chain) in import_chains(&stmt.tokens) {
                if scanner.is_spawn_chain(&chain) {
                    hits.push((line, PatternId::ChildProcess));
                }
            }
        }
        let flat = flatten(&stmt.tokens);
        let mut i = 0;
        while i < flat.len() {
            let token = flat[i];
            if token.is_name() && !is_keyword(&token.text) {
                let mut end = i;
                while end + 2 < flat.len() && flat[end + 1].is_op(".") && flat[end + 2].is_name() {
                    end += 2;
                }
                let chain: Vec<String> = (i..=end).step_by(2).map(|k| flat[k].text.clone()).collect();
                if scanner.is_spawn_chain(&chain) {
                    hits.push((token.line, PatternId::ChildProcess));
                }
                i = end + 1;
                continue;
            }
            if let TokenKind::Str { .. } = token.kind {
                let literal = token.text.to_lowercase();
                let module = literal.split('.').next().unwrap_or("");
                if scanner.spawn.iter().any(|s| *s == literal || (!s.contains('.') && module == s.as_str())) {
                    hits.push((token.line, PatternId::ChildProcess));
                }
            }
            i += 1;
        }
    }
}

/// `from m import a, b as c` binds `m.a` and `m.b`.
fn import_chains(tokens: &[Token]) -> Vec<(usize, Vec<String>)> {
    if !tokens.first().is_some_and(|t| t.is_keyword("from")) {
        return Vec::new();
    }
    let Some(split) = tokens.iter().position(|t| t.is_keyword("import")) else {
        return Vec::new();
    };
    let module: Vec<String> = tokens[1..split].iter().filter(|t| t.is_name()).map(|t| t.text.clone()).collect();
    let mut out = Vec::new();
    let mut expect_name = true;
    for t in &tokens[split + 1..] {
        if t.is_op(",") {
            expect_name = true;
        } else if t.is_name() && expect_name && !is_keyword(&t.text) {
            let mut chain = module.clone();
            chain.push(t.text.clone());
            out.push((t.line, chain));
            expect_name = false;
        } else if t.is_keyword("as") {
            expect_name = false;
        }
    }
    out
}

fn comment_only(
    scanner: &Scanner,
    module: &Module,
    increments: &[(usize, Increment)],
    hits: &mut Vec<(usize, PatternId)>,
) {
    for (_, inc) in increments {
        let lo = inc.line.saturating_sub(3);
        let asserted =
            module.comments.iter().any(|c| c.line >= lo && c.line <= inc.line && scanner.comment.is_match(&c.text));
        if !asserted {
            continue;
        }
        let guard_calls = inc.guards.last().is_some_and(|g| !calls(g.test).is_empty());
        if !guard_calls {
            hits.push((inc.line, PatternId::CommentOnly));
        }
    }
}
