//! Token-file parsing and atomic output.

use std::fs;
use std::io::Write;
use std::path::Path;

use dipmark::detector::DetectionReport;
use dipmark::types::TokenId;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InputError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: token id {id} is outside a vocabulary of size {size}")]
    OutOfVocab { line: usize, id: u32, size: usize },
}

#[derive(Deserialize)]
struct TokenLine {
    tokens: Vec<u32>,
}

fn read_file(path: &Path) -> Result<String, InputError> {
    fs::read_to_string(path).map_err(|source| InputError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses one line as either a JSON object with a `tokens` array or
/// whitespace-separated integer ids.
pub fn parse_line(text: &str, line: usize) -> Result<Vec<u32>, InputError> {
    let text = text.trim();
    if text.starts_with('{') {
        let parsed: TokenLine = serde_json::from_str(text).map_err(|e| InputError::Parse {
            line,
            message: e.to_string(),
        })?;
        return Ok(parsed.tokens);
    }
    text.split_whitespace()
        .map(|word| {
            word.parse::<u32>().map_err(|_| InputError::Parse {
                line,
                message: format!("'{word}' is not a token id"),
            })
        })
        .collect()
}

/// Parses token sequences, one per non-blank line, rejecting ids outside
/// `vocab_size` when it is given.
pub fn parse_tokens(text: &str, vocab_size: Option<usize>) -> Result<Vec<Vec<TokenId>>, InputError> {
    let mut sequences = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line = i + 1;
        let ids = parse_line(raw, line)?;
        if let Some(size) = vocab_size {
            if let Some(&id) = ids.iter().find(|&&id| id as usize >= size) {
                return Err(InputError::OutOfVocab { line, id, size });
            }
        }
        sequences.push(ids.into_iter().map(TokenId).collect());
    }
    Ok(sequences)
}

pub fn read_tokens(path: &Path, vocab_size: Option<usize>) -> Result<Vec<Vec<TokenId>>, InputError> {
    parse_tokens(&read_file(path)?, vocab_size)
}

/// Reads detection reports written by `detect`, one JSON object per line.
pub fn read_reports(path: &Path) -> Result<Vec<DetectionReport>, InputError> {
    read_file(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| InputError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(seqs: &[Vec<TokenId>]) -> Vec<Vec<u32>> {
        seqs.iter().map(|s| s.iter().map(|t| t.0).collect()).collect()
    }

    #[test]
    fn whitespace_line() {
        assert_eq!(ids(&parse_tokens("3 1 4 1 5\n", None).unwrap()), vec![vec![3, 1, 4, 1, 5]]);
    }

    #[test]
    fn json_line() {
        assert_eq!(ids(&parse_tokens("{\"tokens\":[0,1]}", None).unwrap()), vec![vec![0, 1]]);
    }

    #[test]
    fn json_line_with_extra_fields() {
        let text = "{\"tokens\":[2],\"trace\":[]}\n\n7 8\n";
        assert_eq!(ids(&parse_tokens(text, None).unwrap()), vec![vec![2], vec![7, 8]]);
    }

    #[test]
    fn bad_token_reports_line() {
        match parse_tokens("3 x 4", None) {
            Err(InputError::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match parse_tokens("1 2\n\n{\"tokens\":[1,", None) {
            Err(InputError::Parse { line: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_vocab() {
        match parse_tokens("0 1\n1 9 2", Some(5)) {
            Err(InputError::OutOfVocab { line: 2, id: 9, size: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_tokens("0 4", Some(5)).is_ok());
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
