//! Minimal Python token scan: enough to tell keywords from text inside
//! strings and comments.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LexError {
    #[error("unterminated string starting at line {0}")]
    UnterminatedString(usize),
}

/// Identifier and keyword tokens of `source`, skipping comments and string literals.
pub fn names(source: &str) -> Result<Vec<&str>, LexError> {
    let bytes = source.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let mut line = 1;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b'\n' => {
                line += 1;
                i += 1;
            }
            b'#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            b'"' | b'\'' => {
                i = skip_string(bytes, i, &mut line)?;
            }
            c if c == b'_' || c.is_ascii_alphabetic() || c >= 0x80 => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i] == b'_' || bytes[i].is_ascii_alphanumeric() || bytes[i] >= 0x80)
                {
                    i += 1;
                }
                let word = &source[start..i];
                if i < bytes.len() && (bytes[i] == b'"' || bytes[i] == b'\'') && is_string_prefix(word) {
                    i = skip_string(bytes, i, &mut line)?;
                } else {
                    out.push(word);
                }
            }
            c if c.is_ascii_digit() => {
                // numeric literals, including 1e5, 0x1f, 1_000, 3j
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.') {
                    i += 1;
                }
            }
            _ => i += 1,
        }
    }
    Ok(out)
}

fn is_string_prefix(word: &str) -> bool {
    word.len() <= 2
        && word
            .chars()
            .all(|c| matches!(c.to_ascii_lowercase(), 'r' | 'b' | 'u' | 'f'))
}

fn skip_string(bytes: &[u8], start: usize, line: &mut usize) -> Result<usize, LexError> {
    let quote = bytes[start];
    let start_line = *line;
    let triple = bytes.len() >= start + 3 && bytes[start + 1] == quote && bytes[start + 2] == quote;
    let mut i = start + if triple { 3 } else { 1 };
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\\' {
            if bytes.get(i + 1) == Some(&b'\n') {
                *line += 1;
            }
            i += 2;
            continue;
        }
        if c == b'\n' {
            if !triple {
                return Err(LexError::UnterminatedString(start_line));
            }
            *line += 1;
        }
        if c == quote {
            if !triple {
                return Ok(i + 1);
            }
            if bytes.len() >= i + 3 && bytes[i + 1] == quote && bytes[i + 2] == quote {
                return Ok(i + 3);
            }
        }
        i += 1;
    }
    Err(LexError::UnterminatedString(start_line))
}

/// Number of `assert` statements in a test source.
pub fn count_asserts(source: &str) -> Result<usize, LexError> {
    Ok(names(source)?.into_iter().filter(|w| *w == "assert").count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skips_strings_and_comments() {
        let src = r#"
# assert in a comment
def test_a():
    s = "assert not counted"
    t = 'assert'
    doc = """
    assert inside a docstring
    """
    raw = rb'assert'
    assert s != t  # assert trailing
    assert_equal = 3
"#;
        assert_eq!(count_asserts(src), Ok(1));
    }

    #[test]
    fn escaped_quotes() {
        assert_eq!(count_asserts(r#"x = "a\"assert"; assert x"#), Ok(1));
    }

    #[test]
    fn unterminated_is_error() {
        assert!(count_asserts("x = 'abc\nassert x").is_err());
        assert!(count_asserts("x = \"\"\"abc").is_err());
    }

    #[test]
    fn identifiers_with_prefix_letters() {
        assert_eq!(names("rb = 1\nfoo(b)").unwrap(), vec!["rb", "foo", "b"]);
    }
}
