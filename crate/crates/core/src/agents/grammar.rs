//! Labeled-line response grammar shared by all agents.
//!
//! A response is a sequence of `Label: value` lines. Labels match
//! case-insensitively and may be decorated with list bullets, heading marks,
//! numbering, or bold markers. Lines that start no known label continue the
//! previous value. A label listed as a heading may also appear alone on a line.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    /// Index into the label list passed to [`parse_fields`].
    pub label: usize,
    pub value: String,
}

fn strip_decorations(line: &str) -> &str {
    let mut s = line.trim_start();
    loop {
        let before = s;
        for prefix in ["\\item", "- ", "* ", "+ ", "• ", "#", "**", "__"] {
            if let Some(rest) = s.strip_prefix(prefix) {
                s = rest.trim_start();
            }
        }
        // "1." / "2)" enumerators
        let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
        if digits > 0 {
            let rest = &s[digits..];
            if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
                if r.starts_with(' ') {
                    s = r.trim_start();
                }
            }
        }
        if s == before {
            return s;
        }
    }
}

/// Matches `label` at the start of `s`; returns the remainder after the colon,
/// or an empty remainder when the line is just the bare label.
fn match_label<'a>(s: &'a str, label: &str) -> Option<&'a str> {
    let head = s.get(..label.len())?;
    if !head.eq_ignore_ascii_case(label) {
        return None;
    }
    let rest = s[label.len()..].trim_start_matches(['*', '_']).trim_start();
    if let Some(after) = rest.strip_prefix(':') {
        return Some(after.trim_start_matches(['*', '_']).trim());
    }
    if rest.is_empty() {
        return Some("");
    }
    None
}

/// Splits `text` into labeled fields, in order of appearance.
pub fn parse_fields(text: &str, labels: &[&str]) -> Vec<Field> {
    // Longest labels first so "Tags to Update" beats "Tags".
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(labels[i].len()));

    let mut fields: Vec<Field> = Vec::new();
    for raw in text.lines() {
        let stripped = strip_decorations(raw);
        let hit = order
            .iter()
            .find_map(|&i| match_label(stripped, labels[i]).map(|rest| (i, rest)));
        match hit {
            Some((label, rest)) => fields.push(Field {
                label,
                value: rest.to_string(),
            }),
            None => {
                if let Some(last) = fields.last_mut() {
                    last.value.push('\n');
                    last.value.push_str(raw.trim_end());
                }
            }
        }
    }
    for f in &mut fields {
        f.value = f.value.trim().to_string();
    }
    fields
}

/// First value for `label`, if present.
pub fn first(fields: &[Field], label: usize) -> Option<&str> {
    fields
        .iter()
        .find(|f| f.label == label)
        .map(|f| f.value.as_str())
}

/// A parsed list literal: either a string or a nested list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Literal {
    Str(String),
    List(Vec<Literal>),
}

struct LiteralParser<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

impl LiteralParser<'_> {
    fn skip_ws(&mut self) {
        while self.chars.peek().is_some_and(|c| c.is_whitespace()) {
            self.chars.next();
        }
    }

    fn value(&mut self) -> Result<Literal, String> {
        self.skip_ws();
        match self.chars.peek() {
            Some('[') => self.list(),
            Some('\'') | Some('"') => self.quoted().map(Literal::Str),
            Some(_) => Ok(Literal::Str(self.bare())),
            None => Err("unexpected end of list".into()),
        }
    }

    fn list(&mut self) -> Result<Literal, String> {
        self.chars.next();
        let mut items = Vec::new();
        loop {
            self.skip_ws();
            match self.chars.peek() {
                Some(']') => {
                    self.chars.next();
                    return Ok(Literal::List(items));
                }
                Some(',') => {
                    self.chars.next();
                }
                Some(_) => items.push(self.value()?),
                None => return Err("unterminated list".into()),
            }
        }
    }

    fn quoted(&mut self) -> Result<String, String> {
        let quote = self.chars.next().expect("peeked");
        let mut out = String::new();
        while let Some(c) = self.chars.next() {
            match c {
                '\\' => match self.chars.next() {
                    Some('n') => out.push('\n'),
                    Some('t') => out.push('\t'),
                    Some(other) => out.push(other),
                    None => return Err("dangling escape".into()),
                },
                c if c == quote => return Ok(out),
                c => out.push(c),
            }
        }
        Err("unterminated string".into())
    }

    fn bare(&mut self) -> String {
        let mut out = String::new();
        while let Some(&c) = self.chars.peek() {
            if c == ',' || c == ']' {
                break;
            }
            out.push(c);
            self.chars.next();
        }
        out.trim().to_string()
    }
}

/// Parses a bracketed list literal such as `['a', "b's", c]`.
pub fn parse_literal(text: &str) -> Result<Literal, String> {
    let mut p = LiteralParser {
        chars: text.trim().chars().peekable(),
    };
    let v = p.value()?;
    p.skip_ws();
    if p.chars.next().is_some() {
        return Err(format!("trailing characters after list in `{text}`"));
    }
    Ok(v)
}

fn clean_item(s: &str) -> String {
    let s = s.trim();
    let s = s
        .strip_prefix("- ")
        .or_else(|| s.strip_prefix("* "))
        .unwrap_or(s);
    // leading "1." / "2)" numbering
    let digits = s.chars().take_while(|c| c.is_ascii_digit()).count();
    let s = if digits > 0 && s[digits..].starts_with(['.', ')']) {
        &s[digits + 1..]
    } else {
        s
    };
    s.trim().to_string()
}

fn is_empty_marker(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("none") || t.eq_ignore_ascii_case("n/a")
}

/// Parses a flat list of strings. Accepts a bracketed literal, one item per
/// line, or a `;`/`,`-separated line.
pub fn parse_string_list(text: &str) -> Result<Vec<String>, String> {
    let t = text.trim();
    if is_empty_marker(t) {
        return Ok(Vec::new());
    }
    if t.starts_with('[') {
        return match parse_literal(t)? {
            Literal::List(items) => items
                .into_iter()
                .map(|item| match item {
                    Literal::Str(s) => Ok(s.trim().to_string()),
                    Literal::List(_) => Err(format!("nested list where strings expected: `{t}`")),
                })
                .filter(|r| r.as_ref().map_or(true, |s| !s.is_empty()))
                .collect(),
            Literal::Str(_) => unreachable!("bracketed input parses as a list"),
        };
    }
    let items: Vec<&str> = if t.lines().count() > 1 {
        t.lines().collect()
    } else if t.contains(';') {
        t.split(';').collect()
    } else {
        t.split(',').collect()
    };
    Ok(items
        .into_iter()
        .map(clean_item)
        .filter(|s| !s.is_empty())
        .collect())
}

/// Parses a list of string lists, e.g. `[['a', 'b'], ['c']]`. A bare string
/// element is read as a comma-separated list.
pub fn parse_nested_list(text: &str) -> Result<Vec<Vec<String>>, String> {
    let t = text.trim();
    if is_empty_marker(t) {
        return Ok(Vec::new());
    }
    match parse_literal(t)? {
        Literal::List(items) => items
            .into_iter()
            .map(|item| match item {
                Literal::List(inner) => inner
                    .into_iter()
                    .map(|x| match x {
                        Literal::Str(s) => Ok(s.trim().to_string()),
                        Literal::List(_) => Err("lists nested deeper than two levels".to_string()),
                    })
                    .collect(),
                Literal::Str(s) => parse_string_list(&s),
            })
            .collect(),
        Literal::Str(s) => Err(format!("expected a list of lists, got `{s}`")),
    }
}

/// Reads a leading integer, e.g. `2`, `2/2`, `2 (fully met)`.
pub fn leading_int(text: &str) -> Option<i64> {
    let t = text.trim().trim_start_matches(['*', '_']);
    let digits: String = t.chars().take_while(|c| c.is_ascii_digit()).collect();
    digits.parse().ok()
}

pub fn parse_bool(text: &str) -> Option<bool> {
    let t = text.trim().trim_matches(|c: char| c == '*' || c == '.' || c == '`');
    match t.to_ascii_lowercase().as_str() {
        "true" | "yes" => Some(true),
        "false" | "no" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_lines_with_continuations() {
        let text = "- Thought: first line\n  second line\n**Action:** do it\nIntermediate table:\n| a |\n| --- |\nAnswer: x";
        let labels = ["Thought", "Action", "Intermediate table", "Answer"];
        let fields = parse_fields(text, &labels);
        assert_eq!(fields.len(), 4);
        assert_eq!(first(&fields, 0), Some("first line\n  second line"));
        assert_eq!(first(&fields, 1), Some("do it"));
        assert_eq!(first(&fields, 2), Some("| a |\n| --- |"));
        assert_eq!(first(&fields, 3), Some("x"));
    }

    #[test]
    fn longest_label_wins() {
        let fields = parse_fields("Tags to Update: [a]\nTags: [b]", &["Tags", "Tags to Update"]);
        assert_eq!(fields[0].label, 1);
        assert_eq!(fields[1].label, 0);
    }

    #[test]
    fn bare_heading_lines() {
        let fields = parse_fields(
            "### Answer Type Checking\n- Score: 2\n1. Format Validation:\nScore: 1",
            &["Answer Type Checking", "Format Validation", "Score"],
        );
        let labels: Vec<usize> = fields.iter().map(|f| f.label).collect();
        assert_eq!(labels, vec![0, 2, 1, 2]);
    }

    #[test]
    fn label_prefix_of_word_is_not_a_label() {
        let fields = parse_fields("Answer: a\nAnswered quickly", &["Answer"]);
        assert_eq!(fields.len(), 1);
        assert_eq!(fields[0].value, "a\nAnswered quickly");
    }

    #[test]
    fn string_lists() {
        assert_eq!(
            parse_string_list("['filter', 'compare', 'identify max']").unwrap(),
            vec!["filter", "compare", "identify max"]
        );
        assert_eq!(
            parse_string_list(r#"["Identify players with Donovan's start", 'Return it']"#).unwrap(),
            vec!["Identify players with Donovan's start", "Return it"]
        );
        assert!(parse_string_list("[ ]").unwrap().is_empty());
        assert!(parse_string_list("none").unwrap().is_empty());
        assert_eq!(
            parse_string_list("- a; - b; - c").unwrap(),
            vec!["a", "b", "c"]
        );
        assert_eq!(parse_string_list("x, y").unwrap(), vec!["x", "y"]);
        assert_eq!(parse_string_list("1. one\n2. two").unwrap(), vec!["one", "two"]);
        assert!(parse_string_list("['open").is_err());
    }

    #[test]
    fn nested_lists() {
        assert_eq!(
            parse_nested_list("[['a', 'b'], [\"c\"], []]").unwrap(),
            vec![vec!["a".to_string(), "b".into()], vec!["c".into()], vec![]]
        );
        assert_eq!(
            parse_nested_list("['a, b']").unwrap(),
            vec![vec!["a".to_string(), "b".into()]]
        );
        assert!(parse_nested_list("[ ]").unwrap().is_empty());
    }

    #[test]
    fn scalars() {
        assert_eq!(leading_int("2"), Some(2));
        assert_eq!(leading_int("**1**/2"), Some(1));
        assert_eq!(leading_int("two"), None);
        assert_eq!(parse_bool("False"), Some(false));
        assert_eq!(parse_bool("**true**"), Some(true));
        assert_eq!(parse_bool("maybe"), None);
    }
}
