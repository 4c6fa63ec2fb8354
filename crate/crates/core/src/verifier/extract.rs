//! Locating the final answer span inside a free-form response.

use std::ops::Range;

/// Commands whose braced argument is treated as an answer box.
const BOX_COMMANDS: [&str; 2] = ["\\boxed", "\\fbox"];

pub const DEFAULT_ANSWER_MARKERS: [&str; 4] = ["final answer is", "the answer is", "answer:", "####"];

/// Byte range of the content of the last balanced `\boxed{...}` in `text`.
pub fn last_boxed_span(text: &str) -> Option<Range<usize>> {
    let bytes = text.as_bytes();
    let mut starts: Vec<usize> = Vec::new();
    for cmd in BOX_COMMANDS {
        let mut from = 0;
        while let Some(pos) = text[from..].find(cmd) {
            let at = from + pos;
            let mut open = at + cmd.len();
            while open < bytes.len() && bytes[open] == b' ' {
                open += 1;
            }
            if open < bytes.len() && bytes[open] == b'{' {
                starts.push(open);
            }
            from = at + cmd.len();
        }
    }
    starts.sort_unstable();
    starts
        .into_iter()
        .rev()
        .find_map(|open| matching_brace(bytes, open).map(|close| open + 1..close))
}

/// Index of the `}` closing the `{` at `open`, honoring nesting and `\{`/`\}` escapes.
pub(crate) fn matching_brace(bytes: &[u8], open: usize) -> Option<usize> {
    debug_assert_eq!(bytes.get(open), Some(&b'{'));
    let mut depth = 0usize;
    let mut i = open;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => {
                i += 2;
                continue;
            }
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
        i += 1;
    }
    None
}

/// Byte range of the expression following the last answer marker, up to the
/// end of that line. Markers match ASCII case-insensitively.
pub fn marker_span(text: &str, markers: &[String]) -> Option<Range<usize>> {
    let lowered = text.to_ascii_lowercase();
    let (_, after) = markers
        .iter()
        .filter(|m| !m.is_empty())
        .filter_map(|m| {
            let m = m.to_ascii_lowercase();
            lowered.rfind(&m).map(|pos| (pos, pos + m.len()))
        })
        .max()?;
    let rest = &text[after..];
    let line_end = rest.find('\n').map_or(text.len(), |i| after + i);
    let mut start = after;
    let mut end = line_end;
    let bytes = text.as_bytes();
    while start < end && (bytes[start] == b':' || bytes[start].is_ascii_whitespace()) {
        start += 1;
    }
    while end > start && (bytes[end - 1].is_ascii_whitespace() || bytes[end - 1] == b'.') {
        end -= 1;
    }
    (start < end).then_some(start..end)
}
