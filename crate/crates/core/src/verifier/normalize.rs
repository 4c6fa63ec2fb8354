//! Ordered normalization passes and exact numeric parsing.
//!
//! The pass list is fixed and versioned by [`NORMALIZATION_VERSION`]; any
//! change to the passes must bump it, which changes every config digest.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};

use super::extract::{last_boxed_span, matching_brace};

pub const NORMALIZATION_VERSION: &str = "norm-v1";

/// Longest decimal fraction converted to an exact rational.
pub const MAX_FRACTION_DIGITS: usize = 12;

/// Wrappers whose braced argument is kept and the command dropped.
const UNWRAP_COMMANDS: [&str; 7] = [
    "\\text",
    "\\textbf",
    "\\textit",
    "\\mathrm",
    "\\mathbf",
    "\\mbox",
    "\\operatorname",
];

const DROPPED_TOKENS: [&str; 14] = [
    "\\displaystyle",
    "\\qquad",
    "\\quad",
    "^{\\circ}",
    "^\\circ",
    "\\circ",
    "\u{b0}",
    "\\%",
    "%",
    "\\,",
    "\\;",
    "\\:",
    "\\!",
    "\\ ",
];

/// Applies the pass list in order. The result is what string comparison uses.
pub fn normalize_text(input: &str) -> String {
    let mut s = unwrap_outer_box(input).to_string();
    s = s.replace("\\$", "").replace('$', "").replace('\u{2212}', "-");
    s = strip_sizing(&s);
    s = unwrap_commands(&s);
    s = s.replace("\\dfrac", "\\frac").replace("\\tfrac", "\\frac");
    for token in DROPPED_TOKENS {
        s = s.replace(token, "");
    }
    s.retain(|c| !c.is_whitespace());
    s = s.replace("{,}", "");
    s = brace_short_arguments(&s);
    s = brace_scripts(&s);
    while s.ends_with('.') {
        s.pop();
    }
    s
}

fn unwrap_outer_box(s: &str) -> &str {
    match last_boxed_span(s) {
        Some(span) => &s[span],
        None => s,
    }
}

/// Removes `\left` and `\right` but not longer commands such as `\rightarrow`.
fn strip_sizing(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('\\') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let cmd = ["\\left", "\\right"]
            .into_iter()
            .find(|c| tail.starts_with(c) && !tail.as_bytes().get(c.len()).is_some_and(|b| b.is_ascii_alphabetic()));
        match cmd {
            Some(c) => rest = &tail[c.len()..],
            None => {
                out.push('\\');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

fn unwrap_commands(s: &str) -> String {
    let mut s = s.to_string();
    loop {
        let bytes = s.as_bytes();
        let hit = UNWRAP_COMMANDS.iter().find_map(|cmd| {
            let mut from = 0;
            while let Some(pos) = s[from..].find(cmd) {
                let at = from + pos;
                let open = at + cmd.len();
                if bytes.get(open) == Some(&b'{') {
                    if let Some(close) = matching_brace(bytes, open) {
                        return Some((at, open, close));
                    }
                }
                from = open;
            }
            None
        });
        match hit {
            Some((at, open, close)) => {
                let inner = s[open + 1..close].to_string();
                s.replace_range(at..=close, &inner);
            }
            None => return s,
        }
    }
}

/// `\frac12` becomes `\frac{1}{2}` and `\sqrt3` becomes `\sqrt{3}`.
fn brace_short_arguments(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 8);
    let mut rest = s;
    while let Some(pos) = rest.find('\\') {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        let (cmd, arity) = if tail.starts_with("\\frac") {
            ("\\frac", 2)
        } else if tail.starts_with("\\sqrt") {
            ("\\sqrt", 1)
        } else {
            out.push('\\');
            rest = &tail[1..];
            continue;
        };
        let after = &tail[cmd.len()..];
        if after.as_bytes().first().is_some_and(|b| b.is_ascii_alphabetic()) {
            out.push('\\');
            rest = &tail[1..];
            continue;
        }
        out.push_str(cmd);
        rest = after;
        for _ in 0..arity {
            match rest.chars().next() {
                Some('{') => {
                    let Some(close) = matching_brace(rest.as_bytes(), 0) else {
                        break;
                    };
                    out.push('{');
                    out.push_str(&brace_short_arguments(&rest[1..close]));
                    out.push('}');
                    rest = &rest[close + 1..];
                }
                Some(c) if c.is_ascii_alphanumeric() => {
                    out.push('{');
                    out.push(c);
                    out.push('}');
                    rest = &rest[1..];
                }
                _ => break,
            }
        }
    }
    out.push_str(rest);
    out
}

/// `x^2` becomes `x^{2}` and `a_n` becomes `a_{n}`.
fn brace_scripts(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 4);
    let mut chars = s.chars().peekable();
    let mut escaped = false;
    while let Some(c) = chars.next() {
        out.push(c);
        if escaped {
            escaped = false;
            continue;
        }
        if c == '\\' {
            escaped = true;
            continue;
        }
        if c == '^' || c == '_' {
            if let Some(&next) = chars.peek() {
                if next.is_ascii_alphanumeric() {
                    chars.next();
                    out.push('{');
                    out.push(next);
                    out.push('}');
                }
            }
        }
    }
    out
}

/// How a numeric answer was written, or why it is not numeric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerKind {
    Integer,
    Rational,
    Decimal,
    Symbolic,
    Unparsed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedAnswer {
    pub normalized: String,
    pub kind: AnswerKind,
    pub value: Option<BigRational>,
}

/// Normalizes and, where the result is a number, parses it exactly. Numeric
/// answers normalize to their reduced `p` or `p/q` form.
pub fn normalize_answer(input: &str) -> NormalizedAnswer {
    let text = normalize_text(input);
    match parse_numeric(&text) {
        NumericParse::Value(kind, value) => NormalizedAnswer {
            normalized: canonical_rational(&value),
            kind,
            value: Some(value),
        },
        NumericParse::Invalid => NormalizedAnswer {
            normalized: text,
            kind: AnswerKind::Unparsed,
            value: None,
        },
        NumericParse::NotNumeric => NormalizedAnswer {
            kind: if text.is_empty() {
                AnswerKind::Unparsed
            } else {
                AnswerKind::Symbolic
            },
            normalized: text,
            value: None,
        },
    }
}

pub fn canonical_rational(value: &BigRational) -> String {
    if value.denom().is_one() {
        value.numer().to_string()
    } else {
        format!("{}/{}", value.numer(), value.denom())
    }
}

#[derive(Debug, PartialEq)]
enum NumericParse {
    Value(AnswerKind, BigRational),
    /// Looks numeric but has no exact value we accept (zero denominator,
    /// too many decimal places).
    Invalid,
    NotNumeric,
}

fn parse_numeric(s: &str) -> NumericParse {
    let (negative, body) = split_sign(s);
    let parsed = if let Some(v) = parse_frac_command(body) {
        v
    } else if let Some((num, den)) = body.split_once('/') {
        match (parse_signed_integer(num), parse_signed_integer(den)) {
            (Some(n), Some(d)) => ratio(AnswerKind::Rational, n, d),
            _ => NumericParse::NotNumeric,
        }
    } else if let Some(n) = parse_integer(body) {
        NumericParse::Value(AnswerKind::Integer, BigRational::from_integer(n))
    } else {
        parse_decimal(body)
    };
    match parsed {
        NumericParse::Value(kind, v) if negative => NumericParse::Value(kind, -v),
        other => other,
    }
}

fn split_sign(s: &str) -> (bool, &str) {
    if let Some(rest) = s.strip_prefix('-') {
        (true, rest)
    } else if let Some(rest) = s.strip_prefix('+') {
        (false, rest)
    } else {
        (false, s)
    }
}

fn ratio(kind: AnswerKind, num: BigInt, den: BigInt) -> NumericParse {
    if den.is_zero() {
        NumericParse::Invalid
    } else {
        NumericParse::Value(kind, BigRational::new(num, den))
    }
}

fn parse_frac_command(s: &str) -> Option<NumericParse> {
    let rest = s.strip_prefix("\\frac")?;
    let bytes = rest.as_bytes();
    if bytes.first() != Some(&b'{') {
        return None;
    }
    let close_num = matching_brace(bytes, 0)?;
    let num = &rest[1..close_num];
    let rest = &rest[close_num + 1..];
    let bytes = rest.as_bytes();
    if bytes.first() != Some(&b'{') {
        return None;
    }
    let close_den = matching_brace(bytes, 0)?;
    if close_den + 1 != rest.len() {
        return None;
    }
    let den = &rest[1..close_den];
    match (parse_signed_integer(num), parse_signed_integer(den)) {
        (Some(n), Some(d)) => Some(ratio(AnswerKind::Rational, n, d)),
        _ => None,
    }
}

fn parse_signed_integer(s: &str) -> Option<BigInt> {
    let (negative, body) = split_sign(s);
    let n = parse_integer(body)?;
    Some(if negative { -n } else { n })
}

/// Plain digits, or digits grouped in threes by commas (`12,345`).
fn parse_integer(s: &str) -> Option<BigInt> {
    if s.is_empty() {
        return None;
    }
    if s.bytes().all(|b| b.is_ascii_digit()) {
        return s.parse().ok();
    }
    let mut groups = s.split(',');
    let first = groups.next()?;
    if first.is_empty() || first.len() > 3 || !first.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mut digits = first.to_string();
    let mut any = false;
    for g in groups {
        if g.len() != 3 || !g.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.push_str(g);
        any = true;
    }
    if any {
        digits.parse().ok()
    } else {
        None
    }
}

fn parse_decimal(s: &str) -> NumericParse {
    let Some((int_part, frac_part)) = s.split_once('.') else {
        return NumericParse::NotNumeric;
    };
    let int_part = if int_part.contains(',') {
        match parse_integer(int_part) {
            Some(n) => n.to_string(),
            None => return NumericParse::NotNumeric,
        }
    } else {
        int_part.to_string()
    };
    let int_ok = int_part.is_empty() || int_part.bytes().all(|b| b.is_ascii_digit());
    let frac_ok = !frac_part.is_empty() && frac_part.bytes().all(|b| b.is_ascii_digit());
    if !int_ok || !frac_ok {
        return NumericParse::NotNumeric;
    }
    if frac_part.len() > MAX_FRACTION_DIGITS {
        return NumericParse::Invalid;
    }
    let digits = format!("{int_part}{frac_part}");
    let Ok(num) = digits.parse::<BigInt>() else {
        return NumericParse::NotNumeric;
    };
    let den = num_traits::pow(BigInt::from(10), frac_part.len());
    NumericParse::Value(AnswerKind::Decimal, BigRational::new(num, den))
}
