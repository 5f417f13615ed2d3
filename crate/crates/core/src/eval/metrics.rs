//! Answer scoring: denotation match for free-form answers, exact label match
//! for yes/no verification.

use unicode_normalization::UnicodeNormalization;

pub const NUMERIC_TOLERANCE: f64 = 1e-6;
pub const VALUE_SEPARATOR: char = '|';

const QUOTE_PAIRS: [(char, char); 5] = [
    ('"', '"'),
    ('\'', '\''),
    ('`', '`'),
    ('\u{201c}', '\u{201d}'),
    ('\u{2018}', '\u{2019}'),
];

fn strip_quotes(mut s: &str) -> &str {
    loop {
        let mut chars = s.chars();
        let (Some(first), Some(last)) = (chars.next(), chars.next_back()) else {
            return s;
        };
        if !QUOTE_PAIRS.contains(&(first, last)) {
            return s;
        }
        s = s[first.len_utf8()..s.len() - last.len_utf8()].trim();
    }
}

/// NFKC, trim, lowercase, strip surrounding quotes, collapse whitespace.
pub fn normalize_value(s: &str) -> String {
    let nfkc: String = s.nfkc().collect();
    let lower = nfkc.trim().to_lowercase();
    strip_quotes(&lower)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

/// `[+-]` digits `[. digits]` or `[+-] . digits`, then an optional exponent.
fn is_plain_number(s: &str) -> bool {
    let s = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], Some(&s[i + 1..])),
        None => (s, None),
    };
    let mantissa_ok = match mantissa.split_once('.') {
        Some((int, frac)) => {
            (is_digits(int) && (frac.is_empty() || is_digits(frac))) || (int.is_empty() && is_digits(frac))
        }
        None => is_digits(mantissa),
    };
    let exponent_ok = exponent.is_none_or(|e| is_digits(e.strip_prefix(['+', '-']).unwrap_or(e)));
    mantissa_ok && exponent_ok
}

/// `1,234,567[.89]` with well-formed thousands groups, commas removed.
fn strip_thousands(s: &str) -> Option<String> {
    let (sign, body) = match s.strip_prefix(['+', '-']) {
        Some(rest) => (&s[..1], rest),
        None => ("", s),
    };
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) if is_digits(f) => (i, Some(f)),
        Some(_) => return None,
        None => (body, None),
    };
    let groups: Vec<&str> = int.split(',').collect();
    if groups.len() < 2
        || !(1..=3).contains(&groups[0].len())
        || !groups.iter().all(|g| is_digits(g))
        || groups[1..].iter().any(|g| g.len() != 3)
    {
        return None;
    }
    let mut out = format!("{sign}{}", groups.concat());
    if let Some(f) = frac {
        out.push('.');
        out.push_str(f);
    }
    Some(out)
}

/// Numeric reading of an already normalized value.
pub fn parse_number(s: &str) -> Option<f64> {
    let candidate = if s.contains(',') {
        strip_thousands(s)?
    } else {
        s.to_string()
    };
    if !is_plain_number(&candidate) {
        return None;
    }
    candidate.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn values_equal(a: &str, b: &str) -> bool {
    match (parse_number(a), parse_number(b)) {
        (Some(x), Some(y)) => (x - y).abs() <= NUMERIC_TOLERANCE,
        _ => a == b,
    }
}

fn split_values<'a>(items: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    items
        .into_iter()
        .flat_map(|s| s.split(VALUE_SEPARATOR))
        .map(normalize_value)
        .collect()
}

/// Augmenting-path bipartite matching; value lists are tiny.
fn perfect_matching(left: &[String], right: &[String]) -> bool {
    fn augment(
        i: usize,
        left: &[String],
        right: &[String],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for j in 0..right.len() {
            if seen[j] || !values_equal(&left[i], &right[j]) {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|o| augment(o, left, right, seen, owner)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    if left.len() != right.len() {
        return false;
    }
    let mut owner = vec![None; right.len()];
    (0..left.len()).all(|i| augment(i, left, right, &mut vec![false; right.len()], &mut owner))
}

/// True when `predicted` denotes the same multiset of values as `gold`.
/// Values are `|`-separated on both sides.
pub fn denotation_match(predicted: &str, gold: &[String]) -> bool {
    let p = split_values([predicted]);
    let g = split_values(gold.iter().map(String::as_str));
    perfect_matching(&p, &g)
}

/// The yes/no reading of a label, if it has one.
pub fn normalize_label(s: &str) -> Option<&'static str> {
    match s.trim().to_lowercase().as_str() {
        "yes" => Some("yes"),
        "no" => Some("no"),
        _ => None,
    }
}

/// Case-insensitive yes/no comparison. A prediction outside {yes, no} is
/// logged and scored as wrong.
pub fn exact_match(predicted: &str, gold: &str) -> bool {
    let Some(p) = normalize_label(predicted) else {
        tracing::warn!("invalid label `{predicted}`: expected yes or no");
        return false;
    };
    normalize_label(gold) == Some(p)
}
