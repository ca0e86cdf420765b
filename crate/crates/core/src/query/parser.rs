//! Parser for the supported query subset: `PREFIX` declarations, a
//! `SELECT` clause (`*` or a variable list) and a `WHERE` block of triple
//! patterns over IRIs, prefixed names, literals and variables.

use std::collections::HashMap;

use thiserror::Error;

use super::{Query, Term, TriplePattern};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("offset {0}: expected {1}")]
    Expected(usize, &'static str),
    #[error("offset {0}: unknown prefix '{1}'")]
    UnknownPrefix(usize, String),
    #[error("offset {0}: unterminated {1}")]
    Unterminated(usize, &'static str),
    #[error("query selects unknown variable '?{0}'")]
    UnknownVariable(String),
    #[error("empty where clause")]
    EmptyWhere,
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        loop {
            let rest = &self.text[self.pos..];
            let trimmed = rest.trim_start();
            self.pos += rest.len() - trimmed.len();
            if trimmed.starts_with('#') {
                match trimmed.find('\n') {
                    Some(n) => self.pos += n,
                    None => self.pos = self.text.len(),
                }
            } else {
                break;
            }
        }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        self.skip_ws();
        let rest = self.rest();
        if rest.len() >= kw.len() && rest[..kw.len()].eq_ignore_ascii_case(kw) {
            self.pos += kw.len();
            true
        } else {
            false
        }
    }

    fn eat_char(&mut self, c: char) -> bool {
        self.skip_ws();
        if self.rest().starts_with(c) {
            self.pos += c.len_utf8();
            true
        } else {
            false
        }
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> &'a str {
        let rest = self.rest();
        let end = rest.find(|c| !pred(c)).unwrap_or(rest.len());
        self.pos += end;
        &rest[..end]
    }
}

fn is_name_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '-'
}

fn parse_iri(cur: &mut Cursor) -> Result<String, ParseError> {
    let start = cur.pos;
    cur.pos += 1; // '<'
    let rest = cur.rest();
    let end = rest
        .find('>')
        .ok_or(ParseError::Unterminated(start, "IRI"))?;
    let iri = format!("<{}>", &rest[..end]);
    cur.pos += end + 1;
    Ok(iri)
}

fn parse_literal(cur: &mut Cursor) -> Result<String, ParseError> {
    let start = cur.pos;
    let bytes = cur.rest().as_bytes();
    let mut i = 1; // skip the opening '"'
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => i += 2,
            b'"' => break,
            _ => i += 1,
        }
    }
    if i >= bytes.len() {
        return Err(ParseError::Unterminated(start, "literal"));
    }
    let mut end = i + 1;
    let tail = &cur.rest()[end..];
    if let Some(t) = tail.strip_prefix("^^<") {
        let close = t
            .find('>')
            .ok_or(ParseError::Unterminated(start, "datatype"))?;
        end += 3 + close + 1;
    } else if let Some(t) = tail.strip_prefix('@') {
        let stop = t
            .find(|c: char| !is_name_char(c))
            .map(|n| n + 1)
            .unwrap_or(tail.len());
        end += stop;
    }
    let lit = cur.rest()[..end].to_owned();
    cur.pos += end;
    Ok(lit)
}

fn parse_term(
    cur: &mut Cursor,
    prefixes: &HashMap<String, String>,
) -> Result<Term, ParseError> {
    cur.skip_ws();
    let pos = cur.pos;
    let rest = cur.rest();
    if rest.starts_with('?') || rest.starts_with('$') {
        cur.pos += 1;
        let name = cur.take_while(is_name_char);
        if name.is_empty() {
            return Err(ParseError::Expected(pos, "variable name"));
        }
        return Ok(Term::Var(name.to_owned()));
    }
    if rest.starts_with('<') {
        return Ok(Term::Bound(parse_iri(cur)?));
    }
    if rest.starts_with('"') {
        return Ok(Term::Bound(parse_literal(cur)?));
    }
    if rest.starts_with('a')
        && rest[1..]
            .chars()
            .next()
            .is_none_or(|c| c.is_whitespace())
    {
        cur.pos += 1;
        return Ok(Term::Bound(
            "<http://www.w3.org/1999/02/22-rdf-syntax-ns#type>".to_owned(),
        ));
    }
    // prefixed name
    let pfx = cur.take_while(is_name_char).to_owned();
    if !cur.rest().starts_with(':') {
        return Err(ParseError::Expected(pos, "IRI, literal or variable"));
    }
    cur.pos += 1;
    let local = cur.take_while(|c| is_name_char(c) || c == '.' || c == '/');
    let base = prefixes
        .get(&pfx)
        .ok_or_else(|| ParseError::UnknownPrefix(pos, pfx.clone()))?;
    Ok(Term::Bound(format!("<{base}{local}>")))
}

/// Parse one query.
pub fn parse(text: &str) -> Result<Query, ParseError> {
    let mut cur = Cursor { text, pos: 0 };
    let mut prefixes = HashMap::new();

    while cur.eat_keyword("PREFIX") {
        cur.skip_ws();
        let pos = cur.pos;
        let name = cur.take_while(is_name_char).to_owned();
        if !cur.eat_char(':') {
            return Err(ParseError::Expected(pos, "':' after prefix name"));
        }
        cur.skip_ws();
        if !cur.rest().starts_with('<') {
            return Err(ParseError::Expected(cur.pos, "IRI"));
        }
        let iri = parse_iri(&mut cur)?;
        prefixes.insert(name, iri[1..iri.len() - 1].to_owned());
    }

    if !cur.eat_keyword("SELECT") {
        return Err(ParseError::Expected(cur.pos, "SELECT"));
    }
    let mut select = Vec::new();
    let star = cur.eat_char('*');
    if !star {
        loop {
            cur.skip_ws();
            if !(cur.rest().starts_with('?') || cur.rest().starts_with('$')) {
                break;
            }
            cur.pos += 1;
            let name = cur.take_while(is_name_char);
            if name.is_empty() {
                return Err(ParseError::Expected(cur.pos, "variable name"));
            }
            select.push(name.to_owned());
        }
        if select.is_empty() {
            return Err(ParseError::Expected(cur.pos, "projection variables or '*'"));
        }
    }

    if !cur.eat_keyword("WHERE") {
        return Err(ParseError::Expected(cur.pos, "WHERE"));
    }
    if !cur.eat_char('{') {
        return Err(ParseError::Expected(cur.pos, "'{'"));
    }
    let mut patterns = Vec::new();
    loop {
        cur.skip_ws();
        if cur.rest().starts_with('}') {
            break;
        }
        if cur.rest().is_empty() {
            return Err(ParseError::Unterminated(cur.pos, "where clause"));
        }
        let s = parse_term(&mut cur, &prefixes)?;
        let p = parse_term(&mut cur, &prefixes)?;
        let o = parse_term(&mut cur, &prefixes)?;
        patterns.push(TriplePattern { s, p, o });
        // the dot after the last pattern is optional
        cur.eat_char('.');
    }
    if patterns.is_empty() {
        return Err(ParseError::EmptyWhere);
    }

    let mut vars: Vec<String> = patterns.iter().flat_map(|p| p.variables()).collect();
    vars.sort();
    vars.dedup();
    if star {
        select = vars;
    } else {
        for v in &select {
            if !vars.contains(v) {
                return Err(ParseError::UnknownVariable(v.clone()));
            }
        }
    }
    Ok(Query { select, patterns })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_star_query() {
        let q = parse(
            "PREFIX sosa: <http://www.w3.org/ns/sosa/>\n\
             SELECT * WHERE {\n\
               ?obs a sosa:Observation .\n\
               ?obs sosa:hasSimpleResult ?v .\n\
             }",
        )
        .unwrap();
        assert_eq!(q.select, vec!["obs", "v"]);
        assert_eq!(q.patterns.len(), 2);
        assert_eq!(
            q.patterns[0].p,
            Term::Bound("<http://www.w3.org/1999/02/22-rdf-syntax-ns#type>".into())
        );
        assert_eq!(
            q.patterns[0].o,
            Term::Bound("<http://www.w3.org/ns/sosa/Observation>".into())
        );
    }

    #[test]
    fn projection_subset_and_optional_final_dot() {
        let q = parse("SELECT ?v WHERE { <http://s> <http://p> ?v }").unwrap();
        assert_eq!(q.select, vec!["v"]);
    }

    #[test]
    fn literal_objects() {
        let q = parse("SELECT ?s WHERE { ?s <http://p> \"42\"^^<http://t> . }").unwrap();
        assert_eq!(q.patterns[0].o, Term::Bound("\"42\"^^<http://t>".into()));
    }

    #[test]
    fn errors_point_at_offset() {
        assert!(matches!(
            parse("SELECT ?v WHERE { ?v x:p ?o }"),
            Err(ParseError::UnknownPrefix(..))
        ));
        assert_eq!(
            parse("ASK { ?s ?p ?o }"),
            Err(ParseError::Expected(0, "SELECT"))
        );
        assert!(matches!(
            parse("SELECT ?x WHERE { <http://s> <http://p> <http://o> }"),
            Err(ParseError::UnknownVariable(v)) if v == "x"
        ));
        assert!(matches!(
            parse("SELECT * WHERE { "),
            Err(ParseError::Unterminated(..))
        ));
    }
}
