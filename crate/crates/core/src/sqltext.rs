//! A small, dialect-tolerant SQL token scanner.
//!
//! This is not a parser. It knows enough about quoting, comments and
//! parenthesis depth to answer structural questions about a statement:
//! where statements end, what the leading keyword is, which tables appear
//! after `FROM`/`JOIN`, and whether an `ORDER BY` sits at the top level.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LexError {
    #[error("unterminated {0} starting at byte {1}")]
    Unterminated(&'static str, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenKind {
    /// Bare word: keyword or unquoted identifier.
    Word,
    /// `"x"`, `` `x` `` or `[x]`.
    QuotedIdent,
    StringLit,
    Number,
    Semicolon,
    OpenParen,
    CloseParen,
    Comma,
    Dot,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub kind: TokenKind,
    /// Source text of the token, quotes included.
    pub text: String,
    /// Byte offset into the source.
    pub start: usize,
    /// Parenthesis depth at which the token sits (the paren tokens
    /// themselves report the outer depth).
    pub depth: usize,
}

impl Token {
    pub fn is_word(&self, upper: &str) -> bool {
        self.kind == TokenKind::Word && self.text.eq_ignore_ascii_case(upper)
    }

    /// Identifier value with quoting removed, for words and quoted identifiers.
    pub fn ident(&self) -> Option<String> {
        match self.kind {
            TokenKind::Word => Some(self.text.clone()),
            TokenKind::QuotedIdent => {
                let inner = &self.text[1..self.text.len() - 1];
                Some(match self.text.as_bytes()[0] {
                    b'"' => inner.replace("\"\"", "\""),
                    b'`' => inner.replace("``", "`"),
                    _ => inner.to_string(),
                })
            }
            _ => None,
        }
    }
}

pub fn tokenize(sql: &str) -> Result<Vec<Token>, LexError> {
    let bytes = sql.as_bytes();
    let mut tokens = Vec::new();
    let mut depth = 0usize;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = match c {
            b' ' | b'\t' | b'\n' | b'\r' | 0x0c => {
                i += 1;
                continue;
            }
            b'-' if bytes.get(i + 1) == Some(&b'-') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            b'/' if bytes.get(i + 1) == Some(&b'*') => {
                match sql[i + 2..].find("*/") {
                    Some(end) => i = i + 2 + end + 2,
                    None => return Err(LexError::Unterminated("comment", start)),
                }
                continue;
            }
            b'\'' => {
                i = scan_quoted(bytes, i, b'\'').ok_or(LexError::Unterminated("string", start))?;
                TokenKind::StringLit
            }
            b'"' | b'`' => {
                i = scan_quoted(bytes, i, c).ok_or(LexError::Unterminated("identifier", start))?;
                TokenKind::QuotedIdent
            }
            b'[' => {
                match sql[i..].find(']') {
                    Some(end) => i += end + 1,
                    None => return Err(LexError::Unterminated("identifier", start)),
                }
                TokenKind::QuotedIdent
            }
            b';' => {
                i += 1;
                TokenKind::Semicolon
            }
            b'(' => {
                i += 1;
                tokens.push(Token { kind: TokenKind::OpenParen, text: "(".into(), start, depth });
                depth += 1;
                continue;
            }
            b')' => {
                i += 1;
                depth = depth.saturating_sub(1);
                tokens.push(Token { kind: TokenKind::CloseParen, text: ")".into(), start, depth });
                continue;
            }
            b',' => {
                i += 1;
                TokenKind::Comma
            }
            b'.' if !bytes.get(i + 1).is_some_and(u8::is_ascii_digit) => {
                i += 1;
                TokenKind::Dot
            }
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'.') {
                    i += 1;
                }
                TokenKind::Number
            }
            _ if is_word_byte(c) => {
                while i < bytes.len() && is_word_byte(bytes[i]) {
                    i += 1;
                }
                TokenKind::Word
            }
            _ => {
                // One (possibly multi-byte) character.
                i += sql[i..].chars().next().map_or(1, char::len_utf8);
                TokenKind::Other
            }
        };
        tokens.push(Token { kind, text: sql[start..i].to_string(), start, depth });
    }
    Ok(tokens)
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b == b'$' || b >= 0x80
}

/// Returns the index just past the closing quote; doubled quotes escape.
fn scan_quoted(bytes: &[u8], open: usize, quote: u8) -> Option<usize> {
    let mut i = open + 1;
    while i < bytes.len() {
        if bytes[i] == quote {
            if bytes.get(i + 1) == Some(&quote) {
                i += 2;
                continue;
            }
            return Some(i + 1);
        }
        i += 1;
    }
    None
}

/// Splits source text into statements at top-level semicolons. Empty
/// statements (stray separators, comments only) are dropped.
pub fn split_statements(sql: &str) -> Result<Vec<String>, LexError> {
    let tokens = tokenize(sql)?;
    let mut out = Vec::new();
    let mut first: Option<usize> = None;
    for tok in &tokens {
        if tok.kind == TokenKind::Semicolon {
            if let Some(s) = first.take() {
                out.push(sql[s..tok.start].trim().to_string());
            }
        } else if first.is_none() {
            first = Some(tok.start);
        }
    }
    if let Some(s) = first {
        out.push(trim_trailing_comment(sql[s..].trim()));
    }
    Ok(out)
}

// A trailing `-- note` after the last statement has no semicolon to stop at.
fn trim_trailing_comment(stmt: &str) -> String {
    match tokenize(stmt) {
        Ok(tokens) => match tokens.last() {
            Some(last) => stmt[..last.start + last.text.len()].to_string(),
            None => String::new(),
        },
        Err(_) => stmt.to_string(),
    }
}

/// Upper-cased first keyword of the statement, if it starts with a word.
pub fn leading_keyword(tokens: &[Token]) -> Option<String> {
    let first = tokens.iter().find(|t| t.kind != TokenKind::OpenParen)?;
    (first.kind == TokenKind::Word).then(|| first.text.to_ascii_uppercase())
}

/// True when `ORDER BY` appears outside any parentheses.
pub fn has_top_level_order_by(tokens: &[Token]) -> bool {
    tokens.windows(2).any(|w| w[0].depth == 0 && w[0].is_word("ORDER") && w[1].is_word("BY"))
}

pub const AGGREGATES: [&str; 5] = ["SUM", "AVG", "COUNT", "MIN", "MAX"];

/// True when any aggregate function call appears, at any depth.
pub fn uses_aggregate(tokens: &[Token]) -> bool {
    tokens.windows(2).any(|w| {
        w[0].kind == TokenKind::Word
            && w[1].kind == TokenKind::OpenParen
            && AGGREGATES.iter().any(|a| w[0].text.eq_ignore_ascii_case(a))
    })
}

const CLAUSE_WORDS: [&str; 22] = [
    "WHERE",
    "GROUP",
    "ORDER",
    "HAVING",
    "LIMIT",
    "JOIN",
    "INNER",
    "LEFT",
    "RIGHT",
    "FULL",
    "CROSS",
    "NATURAL",
    "OUTER",
    "ON",
    "USING",
    "UNION",
    "EXCEPT",
    "INTERSECT",
    "WINDOW",
    "AS",
    "OFFSET",
    "SELECT",
];

fn is_clause_word(tok: &Token) -> bool {
    tok.kind == TokenKind::Word && CLAUSE_WORDS.iter().any(|w| tok.is_word(w))
}

/// Names introduced by a leading `WITH` clause (common table expressions).
pub fn cte_names(tokens: &[Token]) -> BTreeSet<String> {
    let mut names = BTreeSet::new();
    let mut i = match tokens.first() {
        Some(t) if t.is_word("WITH") => 1,
        _ => return names,
    };
    if tokens.get(i).is_some_and(|t| t.is_word("RECURSIVE")) {
        i += 1;
    }
    while let Some(tok) = tokens.get(i) {
        let Some(name) = tok.ident() else { break };
        names.insert(name.to_ascii_lowercase());
        // Skip an optional column list and the AS ( ... ) body.
        i += 1;
        while let Some(t) = tokens.get(i) {
            if t.is_word("AS") {
                break;
            }
            i += 1;
        }
        i += 1;
        if tokens.get(i).is_some_and(|t| t.is_word("MATERIALIZED") || t.is_word("NOT")) {
            while tokens.get(i).is_some_and(|t| t.kind == TokenKind::Word) {
                i += 1;
            }
        }
        let Some(open) = tokens.get(i).filter(|t| t.kind == TokenKind::OpenParen) else { break };
        let body_depth = open.depth;
        i += 1;
        while let Some(t) = tokens.get(i) {
            if t.kind == TokenKind::CloseParen && t.depth == body_depth {
                break;
            }
            i += 1;
        }
        i += 1;
        match tokens.get(i) {
            Some(t) if t.kind == TokenKind::Comma => i += 1,
            _ => break,
        }
    }
    names
}

/// Lower-cased base table names referenced after `FROM` or `JOIN`, at any
/// depth. Subqueries in table position are skipped and CTE names excluded.
pub fn referenced_tables(tokens: &[Token]) -> BTreeSet<String> {
    let ctes = cte_names(tokens);
    let mut tables = BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        let tok = &tokens[i];
        let is_from = tok.is_word("FROM");
        if !(is_from || tok.is_word("JOIN")) {
            i += 1;
            continue;
        }
        let depth = tok.depth;
        i += 1;
        while let Some(next) = tokens.get(i) {
            if next.kind == TokenKind::OpenParen {
                break;
            }
            let Some(mut name) = next.ident() else { break };
            if next.kind == TokenKind::Word && is_clause_word(next) {
                break;
            }
            i += 1;
            // schema.table
            while tokens.get(i).is_some_and(|t| t.kind == TokenKind::Dot) {
                match tokens.get(i + 1).and_then(Token::ident) {
                    Some(part) => {
                        name = part;
                        i += 2;
                    }
                    None => break,
                }
            }
            let lowered = name.to_ascii_lowercase();
            if !ctes.contains(&lowered) {
                tables.insert(lowered);
            }
            if !is_from {
                break;
            }
            // Optional alias, then a comma continues the FROM list.
            if tokens.get(i).is_some_and(|t| t.is_word("AS")) {
                i += 1;
            }
            if tokens.get(i).is_some_and(|t| t.ident().is_some() && !(t.kind == TokenKind::Word && is_clause_word(t))) {
                i += 1;
            }
            match tokens.get(i) {
                Some(t) if t.kind == TokenKind::Comma && t.depth == depth => i += 1,
                _ => break,
            }
        }
    }
    tables
}

/// Matches a plain, unquoted SQL identifier.
pub fn is_plain_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Double-quotes an identifier when it is not a plain identifier.
pub fn quote_ident(name: &str) -> String {
    if is_plain_identifier(name) {
        name.to_string()
    } else {
        format!("\"{}\"", name.replace('"', "\"\""))
    }
}
