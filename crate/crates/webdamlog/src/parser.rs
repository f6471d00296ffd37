//! Surface syntax and canonical rendering.
//!
//! ```text
//! program  := (decl | header | stmt)*
//! decl     := ("ext" | "int") relname "@" peername "/" arity
//! header   := "[" "rule"? "at" peername "]"
//! stmt     := rule | fact
//! rule     := atom ":-" literal ("," literal)*
//! literal  := "not"? atom
//! atom     := relterm "@" peerterm "(" (term ("," term)*)? ")"
//! term     := var | integer | quoted-string | ident
//! var      := "$" ident
//! ```
//!
//! `//` starts a comment that runs to end of line; whitespace is otherwise
//! insignificant. Identifiers are `[A-Za-z_][A-Za-z0-9_]*`; peer names may
//! additionally contain `.` and `:`. A bare identifier in argument position
//! is a string constant. Quoted strings support exactly two escapes, `\"`
//! and `\\`. A `[at p]` header attributes the statements that follow to
//! peer `p`.
//!
//! Rendering is canonical: one line, `", "` between arguments and body
//! literals, string values always quoted. `parse(render(x)) = x` for rules,
//! facts, and declarations.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::ast::{Atom, Fact, Literal, Rule, Term, Value};
use crate::schema::{RelationKey, RelationKind};

/// A surface declaration: `ext m@p/2` or `int v@q/1`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Decl {
    pub kind: RelationKind,
    pub key: RelationKey,
    pub arity: usize,
}

/// One parsed statement with the peer it is attributed to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Item {
    Decl { at: String, decl: Decl },
    Fact { at: String, fact: Fact },
    Rule { at: String, rule: Rule },
}

/// An ordered, peer-attributed program.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SourceProgram {
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at line {line}, col {col}: expected {}, found {found}", expected.join(" or "))]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub expected: Vec<String>,
    pub found: String,
}

struct Cursor {
    chars: Vec<char>,
    pos: usize,
    line: usize,
    col: usize,
}

type Mark = (usize, usize, usize);

impl Cursor {
    fn new(text: &str) -> Self {
        Cursor { chars: text.chars().collect(), pos: 0, line: 1, col: 1 }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn peek_at(&self, offset: usize) -> Option<char> {
        self.chars.get(self.pos + offset).copied()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += 1;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn save(&self) -> Mark {
        (self.pos, self.line, self.col)
    }

    fn restore(&mut self, mark: Mark) {
        (self.pos, self.line, self.col) = mark;
    }

    fn skip_trivia(&mut self) {
        loop {
            match self.peek() {
                Some(c) if c.is_whitespace() => {
                    self.bump();
                }
                Some('/') if self.peek_at(1) == Some('/') => {
                    while let Some(c) = self.peek() {
                        if c == '\n' {
                            break;
                        }
                        self.bump();
                    }
                }
                _ => break,
            }
        }
    }

    fn found(&self) -> String {
        match self.peek() {
            Some(c) => format!("{c:?}"),
            None => "end of input".to_string(),
        }
    }

    fn err<T>(&self, expected: &[&str]) -> Result<T, ParseError> {
        Err(ParseError {
            line: self.line,
            col: self.col,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: self.found(),
        })
    }

    fn err_at<T>(&self, mark: Mark, expected: &[&str], found: &str) -> Result<T, ParseError> {
        Err(ParseError {
            line: mark.1,
            col: mark.2,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: found.to_string(),
        })
    }

    fn expect(&mut self, c: char) -> Result<(), ParseError> {
        if self.peek() == Some(c) {
            self.bump();
            Ok(())
        } else {
            let label = format!("{c:?}");
            self.err(&[label.as_str()])
        }
    }

    fn eat_seq(&mut self, s: &str) -> bool {
        let mark = self.save();
        for want in s.chars() {
            if self.peek() == Some(want) {
                self.bump();
            } else {
                self.restore(mark);
                return false;
            }
        }
        true
    }

    fn is_ident_start(c: char) -> bool {
        c.is_ascii_alphabetic() || c == '_'
    }

    fn is_ident_continue(c: char) -> bool {
        c.is_ascii_alphanumeric() || c == '_'
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(c) if Self::is_ident_start(c) => {}
            _ => return self.err(&["identifier"]),
        }
        let mut out = String::new();
        while let Some(c) = self.peek() {
            if Self::is_ident_continue(c) {
                out.push(c);
                self.bump();
            } else {
                break;
            }
        }
        Ok(out)
    }

    /// Peer names extend identifiers with `.` and `:`, but a `:` directly
    /// followed by `-` is left alone so the name never swallows a `:-`.
    fn peer_ident(&mut self) -> Result<String, ParseError> {
        match self.peek() {
            Some(c) if Self::is_ident_start(c) => {}
            _ => return self.err(&["peer name"]),
        }
        let mut out = String::new();
        while let Some(c) = self.peek() {
            // `:` continues a host:port name unless it starts `:-`.
            if Self::is_ident_continue(c)
                || c == '.'
                || (c == ':' && self.peek_at(1) != Some('-'))
            {
                out.push(c);
                self.bump();
            } else {
                break;
            }
        }
        Ok(out)
    }

    fn integer(&mut self) -> Result<i64, ParseError> {
        let mark = self.save();
        let mut text = String::new();
        if self.peek() == Some('-') {
            text.push('-');
            self.bump();
        }
        if !matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            return self.err(&["integer"]);
        }
        while let Some(c) = self.peek() {
            if c.is_ascii_digit() {
                text.push(c);
                self.bump();
            } else {
                break;
            }
        }
        match text.parse::<i64>() {
            Ok(n) => Ok(n),
            Err(_) => self.err_at(mark, &["integer in 64-bit range"], &text),
        }
    }

    fn quoted_string(&mut self) -> Result<String, ParseError> {
        self.expect('"')?;
        let mut out = String::new();
        loop {
            match self.bump() {
                None => return self.err(&["closing '\"'"]),
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('"') => out.push('"'),
                    Some('\\') => out.push('\\'),
                    _ => return self.err(&["escape '\\\"'", "'\\\\'"]),
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn var(&mut self) -> Result<Term, ParseError> {
        self.expect('$')?;
        Ok(Term::Var(self.ident()?))
    }

    fn term(&mut self) -> Result<Term, ParseError> {
        match self.peek() {
            Some('$') => self.var(),
            Some('"') => Ok(Term::Const(Value::Str(self.quoted_string()?))),
            Some(c) if c == '-' || c.is_ascii_digit() => Ok(Term::Const(Value::Int(self.integer()?))),
            Some(c) if Self::is_ident_start(c) => Ok(Term::Const(Value::Str(self.ident()?))),
            _ => self.err(&["term"]),
        }
    }

    fn name_term(&mut self, peer_position: bool) -> Result<Term, ParseError> {
        if self.peek() == Some('$') {
            self.var()
        } else if peer_position {
            Ok(Term::Const(Value::Str(self.peer_ident()?)))
        } else {
            Ok(Term::Const(Value::Str(self.ident()?)))
        }
    }

    fn atom(&mut self) -> Result<Atom, ParseError> {
        let relation = self.name_term(false)?;
        self.expect('@')?;
        let peer = self.name_term(true)?;
        self.skip_trivia();
        self.expect('(')?;
        let mut args = Vec::new();
        self.skip_trivia();
        if self.peek() == Some(')') {
            self.bump();
            return Ok(Atom::new(relation, peer, args));
        }
        loop {
            self.skip_trivia();
            args.push(self.term()?);
            self.skip_trivia();
            match self.peek() {
                Some(',') => {
                    self.bump();
                }
                Some(')') => {
                    self.bump();
                    return Ok(Atom::new(relation, peer, args));
                }
                _ => return self.err(&["','", "')'"]),
            }
        }
    }

    fn literal(&mut self) -> Result<Literal, ParseError> {
        let mark = self.save();
        if matches!(self.peek(), Some(c) if Self::is_ident_start(c)) {
            let word = self.ident()?;
            if word == "not" {
                self.skip_trivia();
                // `not@p(...)` is an atom whose relation is named "not".
                if self.peek() != Some('@') {
                    return Ok(Literal::neg(self.atom()?));
                }
            }
            self.restore(mark);
        }
        Ok(Literal::pos(self.atom()?))
    }

    fn rule_body(&mut self) -> Result<Vec<Literal>, ParseError> {
        let mut body = Vec::new();
        loop {
            self.skip_trivia();
            body.push(self.literal()?);
            let mark = self.save();
            self.skip_trivia();
            if self.peek() == Some(',') {
                self.bump();
            } else {
                self.restore(mark);
                return Ok(body);
            }
        }
    }

    fn header(&mut self) -> Result<String, ParseError> {
        self.expect('[')?;
        self.skip_trivia();
        let mut word = self.ident()?;
        if word == "rule" {
            self.skip_trivia();
            word = self.ident()?;
        }
        if word != "at" {
            return self.err(&["'at'"]);
        }
        self.skip_trivia();
        let peer = self.peer_ident()?;
        self.skip_trivia();
        self.expect(']')?;
        Ok(peer)
    }

    fn fact_from_atom(&self, atom: Atom, mark: Mark) -> Result<Fact, ParseError> {
        let relation = match atom.relation.const_name() {
            Some(r) => r.to_string(),
            None => return self.err_at(mark, &["constant relation name in fact"], "variable"),
        };
        let peer = match atom.peer.const_name() {
            Some(p) => p.to_string(),
            None => return self.err_at(mark, &["constant peer name in fact"], "variable"),
        };
        let mut tuple = Vec::with_capacity(atom.args.len());
        for t in atom.args {
            match t {
                Term::Const(v) => tuple.push(v),
                Term::Var(v) => {
                    return self.err_at(mark, &["constant fact argument"], &format!("${v}"))
                }
            }
        }
        Ok(Fact { relation, peer, tuple })
    }
}

/// Parses a program, attributing statements to `[at p]` headers or to
/// `default_peer` when no header has appeared yet.
pub fn parse_program(
    text: &str,
    default_peer: Option<&str>,
) -> Result<SourceProgram, ParseError> {
    let mut cur = Cursor::new(text);
    let mut at: Option<String> = default_peer.map(|p| p.to_string());
    let mut items = Vec::new();
    loop {
        cur.skip_trivia();
        if cur.peek().is_none() {
            return Ok(SourceProgram { items });
        }
        if cur.peek() == Some('[') {
            at = Some(cur.header()?);
            continue;
        }
        let stmt_mark = cur.save();
        // `ext`/`int` start a declaration unless an `@` follows directly
        // (then they name a relation in an ordinary atom).
        if matches!(cur.peek(), Some(c) if Cursor::is_ident_start(c)) {
            let word = cur.ident()?;
            if word == "ext" || word == "int" {
                cur.skip_trivia();
                if cur.peek() != Some('@') {
                    let kind = if word == "ext" {
                        RelationKind::Extensional
                    } else {
                        RelationKind::Intensional
                    };
                    let relation = cur.ident()?;
                    cur.expect('@')?;
                    let peer = cur.peer_ident()?;
                    cur.expect('/')?;
                    let arity = cur.integer()?;
                    if arity < 0 {
                        return cur.err(&["non-negative arity"]);
                    }
                    let at = attributed(&cur, &at, stmt_mark)?;
                    items.push(Item::Decl {
                        at,
                        decl: Decl {
                            kind,
                            key: RelationKey::new(&relation, &peer),
                            arity: arity as usize,
                        },
                    });
                    continue;
                }
            }
            cur.restore(stmt_mark);
        }
        let atom = cur.atom()?;
        let mark = cur.save();
        cur.skip_trivia();
        if cur.eat_seq(":-") {
            let body = cur.rule_body()?;
            let at = attributed(&cur, &at, stmt_mark)?;
            items.push(Item::Rule { at, rule: Rule::new(atom, body) });
        } else {
            cur.restore(mark);
            let at = attributed(&cur, &at, stmt_mark)?;
            items.push(Item::Fact { at, fact: cur.fact_from_atom(atom, stmt_mark)? });
        }
    }
}

fn attributed(cur: &Cursor, at: &Option<String>, mark: Mark) -> Result<String, ParseError> {
    match at {
        Some(p) => Ok(p.clone()),
        None => cur.err_at(mark, &["a '[at <peer>]' header or a default peer"], "statement"),
    }
}

/// Parses a single rule (no headers, no trailing input).
pub fn parse_rule(text: &str) -> Result<Rule, ParseError> {
    let mut cur = Cursor::new(text);
    cur.skip_trivia();
    let head = cur.atom()?;
    cur.skip_trivia();
    if !cur.eat_seq(":-") {
        return cur.err(&["':-'"]);
    }
    let body = cur.rule_body()?;
    cur.skip_trivia();
    if cur.peek().is_some() {
        return cur.err(&["end of input"]);
    }
    Ok(Rule::new(head, body))
}

/// Parses a single ground fact (no trailing input).
pub fn parse_fact(text: &str) -> Result<Fact, ParseError> {
    let mut cur = Cursor::new(text);
    cur.skip_trivia();
    let mark = cur.save();
    let atom = cur.atom()?;
    let fact = cur.fact_from_atom(atom, mark)?;
    cur.skip_trivia();
    if cur.peek().is_some() {
        return cur.err(&["end of input"]);
    }
    Ok(fact)
}

/// Parses a single declaration like `ext m@p/2` (no trailing input).
pub fn parse_decl(text: &str) -> Result<Decl, ParseError> {
    let mut cur = Cursor::new(text);
    cur.skip_trivia();
    let word = cur.ident()?;
    let kind = match word.as_str() {
        "ext" => RelationKind::Extensional,
        "int" => RelationKind::Intensional,
        _ => return cur.err(&["'ext'", "'int'"]),
    };
    cur.skip_trivia();
    let relation = cur.ident()?;
    cur.expect('@')?;
    let peer = cur.peer_ident()?;
    cur.expect('/')?;
    let arity = cur.integer()?;
    if arity < 0 {
        return cur.err(&["non-negative arity"]);
    }
    cur.skip_trivia();
    if cur.peek().is_some() {
        return cur.err(&["end of input"]);
    }
    Ok(Decl { kind, key: RelationKey::new(&relation, &peer), arity: arity as usize })
}

// ---- canonical rendering ----

pub fn render_value(v: &Value) -> String {
    match v {
        Value::Int(n) => n.to_string(),
        Value::Str(s) => {
            let mut out = String::with_capacity(s.len() + 2);
            out.push('"');
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    _ => out.push(c),
                }
            }
            out.push('"');
            out
        }
    }
}

fn render_arg(t: &Term) -> String {
    match t {
        Term::Var(v) => format!("${v}"),
        Term::Const(v) => render_value(v),
    }
}

fn render_name(t: &Term) -> String {
    match t {
        Term::Var(v) => format!("${v}"),
        Term::Const(Value::Str(s)) => s.clone(),
        Term::Const(Value::Int(n)) => n.to_string(),
    }
}

pub fn render_atom(atom: &Atom) -> String {
    let args: Vec<String> = atom.args.iter().map(render_arg).collect();
    format!(
        "{}@{}({})",
        render_name(&atom.relation),
        render_name(&atom.peer),
        args.join(", ")
    )
}

pub fn render_literal(lit: &Literal) -> String {
    if lit.positive {
        render_atom(&lit.atom)
    } else {
        format!("not {}", render_atom(&lit.atom))
    }
}

pub fn render_rule(rule: &Rule) -> String {
    let body: Vec<String> = rule.body.iter().map(render_literal).collect();
    format!("{} :- {}", render_atom(&rule.head), body.join(", "))
}

pub fn render_fact(fact: &Fact) -> String {
    let args: Vec<String> = fact.tuple.iter().map(render_value).collect();
    format!("{}@{}({})", fact.relation, fact.peer, args.join(", "))
}

pub fn render_decl(decl: &Decl) -> String {
    format!("{} {}@{}/{}", decl.kind, decl.key.relation, decl.key.peer, decl.arity)
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_atom(self))
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_literal(self))
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_rule(self))
    }
}

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_fact(self))
    }
}

impl fmt::Display for Decl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render_decl(self))
    }
}

/// Reads and parses a program file, attributing statements to
/// `default_peer` unless headers override.
pub fn parse_program_file(
    path: &Path,
    default_peer: Option<&str>,
) -> Result<SourceProgram, std::io::Error> {
    let text = std::fs::read_to_string(path)?;
    parse_program(&text, default_peer).map_err(|e| {
        std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{}: {e}", path.display()),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::Term;

    #[test]
    fn parses_facts_rules_and_headers() {
        let text = r#"
            // Sue's filtering program.
            [at sue]
            ext friends@alice/1
            blocked@sue("joe")
            allFriends@sue($name) :- friends@alice($name), not blocked@sue($name)
        "#;
        let prog = parse_program(text, None).unwrap();
        assert_eq!(prog.items.len(), 3);
        match &prog.items[0] {
            Item::Decl { at, decl } => {
                assert_eq!(at, "sue");
                assert_eq!(decl.kind, RelationKind::Extensional);
                assert_eq!(decl.key, RelationKey::new("friends", "alice"));
                assert_eq!(decl.arity, 1);
            }
            other => panic!("expected decl, got {other:?}"),
        }
        match &prog.items[1] {
            Item::Fact { at, fact } => {
                assert_eq!(at, "sue");
                assert_eq!(fact, &Fact::new("blocked", "sue", vec![Value::Str("joe".into())]));
            }
            other => panic!("expected fact, got {other:?}"),
        }
        match &prog.items[2] {
            Item::Rule { rule, .. } => {
                assert_eq!(rule.body.len(), 2);
                assert!(!rule.body[1].positive);
            }
            other => panic!("expected rule, got {other:?}"),
        }
    }

    #[test]
    fn default_peer_applies_until_header() {
        let text = "m@p(1)\n[at q]\nm@p(2)";
        let prog = parse_program(text, Some("p")).unwrap();
        match (&prog.items[0], &prog.items[1]) {
            (Item::Fact { at: a0, .. }, Item::Fact { at: a1, .. }) => {
                assert_eq!(a0, "p");
                assert_eq!(a1, "q");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn statement_without_origin_is_an_error() {
        let err = parse_program("m@p(1)", None).unwrap_err();
        assert!(err.expected[0].contains("[at <peer>]"), "{err}");
    }

    #[test]
    fn unclosed_argument_list_reports_position() {
        let err = parse_program("m@p(1,", Some("p")).unwrap_err();
        assert_eq!((err.line, err.col), (1, 7));
        assert_eq!(err.found, "end of input");
    }

    #[test]
    fn bare_identifiers_are_string_constants() {
        let fact = parse_fact("features@danPicasa(photo1, alice)").unwrap();
        assert_eq!(
            fact.tuple,
            vec![Value::Str("photo1".into()), Value::Str("alice".into())]
        );
    }

    #[test]
    fn negative_integers_and_escapes() {
        let fact = parse_fact(r#"m@p(-42, "a\"b\\c")"#).unwrap();
        assert_eq!(
            fact.tuple,
            vec![Value::Int(-42), Value::Str("a\"b\\c".into())]
        );
        let err = parse_fact(r#"m@p("a\nb")"#).unwrap_err();
        assert!(err.expected.iter().any(|e| e.contains("escape")), "{err}");
    }

    #[test]
    fn peer_names_take_dots_and_colons() {
        let fact = parse_fact("m@node1.example.org:7070(1)").unwrap();
        assert_eq!(fact.peer, "node1.example.org:7070");
        let rule = parse_rule("m@host:90($x) :- r@host:90($x)").unwrap();
        assert_eq!(rule.head.peer.const_name(), Some("host:90"));
    }

    #[test]
    fn rule_headers_and_zero_arity_atoms() {
        let prog = parse_program("[rule at dan]\nguard@dan() :- member@sue(dan)", None).unwrap();
        match &prog.items[0] {
            Item::Rule { at, rule } => {
                assert_eq!(at, "dan");
                assert!(rule.head.args.is_empty());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn not_and_kind_words_can_name_relations() {
        let rule = parse_rule("ok@p($x) :- not@p($x), not ext@p($x)").unwrap();
        assert!(rule.body[0].positive);
        assert_eq!(rule.body[0].atom.relation.const_name(), Some("not"));
        assert!(!rule.body[1].positive);
        assert_eq!(rule.body[1].atom.relation.const_name(), Some("ext"));
        // And `ext`/`int` still parse as declarations when not atoms.
        let prog = parse_program("[at p]\nint v@p/1\next@p(1)", None).unwrap();
        assert!(matches!(&prog.items[0], Item::Decl { .. }));
        assert!(matches!(&prog.items[1], Item::Fact { .. }));
    }

    #[test]
    fn facts_with_variables_are_rejected() {
        let err = parse_fact("m@p($x)").unwrap_err();
        assert!(err.expected[0].contains("constant fact argument"), "{err}");
    }

    #[test]
    fn rules_end_where_commas_stop() {
        // Two statements: a one-literal rule, then a fact.
        let prog = parse_program("[at p]\nh@p($x) :- a@p($x) b@p(1)", None).unwrap();
        assert_eq!(prog.items.len(), 2);
        assert!(matches!(&prog.items[0], Item::Rule { rule, .. } if rule.body.len() == 1));
        assert!(matches!(&prog.items[1], Item::Fact { .. }));
    }

    #[test]
    fn render_is_canonical_and_reparses() {
        let fact = Fact::new("m", "p", vec![Value::Int(1), Value::Str("a".into())]);
        assert_eq!(render_fact(&fact), r#"m@p(1, "a")"#);
        assert_eq!(parse_fact(&render_fact(&fact)).unwrap(), fact);

        let rule = parse_rule(
            r#"album@sue($photo, $name) :- allFriends@sue($name), photoLocation@$name($peer), photos@$peer($photo), not blocked@sue($name)"#,
        )
        .unwrap();
        assert_eq!(parse_rule(&render_rule(&rule)).unwrap(), rule);

        let decl = Decl { kind: RelationKind::Intensional, key: RelationKey::new("v", "q"), arity: 3 };
        assert_eq!(render_decl(&decl), "int v@q/3");
        assert_eq!(parse_decl(&render_decl(&decl)).unwrap(), decl);
    }

    #[test]
    fn render_quotes_strings_even_when_bare_safe() {
        let rule = Rule::new(
            Atom::ground_names("m", "p", vec![Term::Const(Value::Str("alice".into()))]),
            vec![Literal::pos(Atom::ground_names("r", "p", vec![Term::Var("x".into())]))],
        );
        assert_eq!(render_rule(&rule), r#"m@p("alice") :- r@p($x)"#);
        // A bare-identifier source form reparses to the same value.
        assert_eq!(parse_rule("m@p(alice) :- r@p($x)").unwrap(), rule);
    }
}
