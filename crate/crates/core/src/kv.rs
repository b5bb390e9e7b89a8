//! The `key=value` line dialect shared by `catalog.meta` and `trapline.conf`.
//!
//! Blank lines and lines starting with `#` are ignored. Keys and values are
//! trimmed; the first `=` splits a line. Later duplicates win when the pairs
//! are collected into a map.

use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
#[error("line {line}: expected `key=value`, found {text:?}")]
pub struct KvError {
    pub line: usize,
    pub text: String,
}

pub fn parse(text: &str) -> Result<Vec<(String, String)>, KvError> {
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('=') {
            Some((k, v)) if !k.trim().is_empty() => {
                pairs.push((k.trim().to_string(), v.trim().to_string()));
            }
            _ => return Err(KvError { line: idx + 1, text: raw.to_string() }),
        }
    }
    Ok(pairs)
}

pub fn parse_map(text: &str) -> Result<BTreeMap<String, String>, KvError> {
    Ok(parse(text)?.into_iter().collect())
}

pub fn render<'a, I>(pairs: I) -> String
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k}={v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_comments_and_blank_lines() {
        let pairs = parse("# header\n\nformat_version = 1\ncreated_at=2024-05-03T10:00:00\n").unwrap();
        assert_eq!(
            pairs,
            vec![
                ("format_version".to_string(), "1".to_string()),
                ("created_at".to_string(), "2024-05-03T10:00:00".to_string()),
            ]
        );
    }

    #[test]
    fn value_may_contain_equals() {
        let map = parse_map("adapter.md=external:run --x=1").unwrap();
        assert_eq!(map["adapter.md"], "external:run --x=1");
    }

    #[test]
    fn rejects_line_without_separator() {
        let err = parse("a=1\nbogus\n").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn render_then_parse() {
        let text = render([("a", "1"), ("b", "two words")]);
        assert_eq!(text, "a=1\nb=two words\n");
        assert_eq!(parse_map(&text).unwrap()["b"], "two words");
    }
}
