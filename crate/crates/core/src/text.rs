//! Tokenization helpers shared by retrieval, memory matching, and the loss
//! utilities. Everything here is deterministic: no locale, no stemming.

use std::collections::HashSet;
use std::sync::OnceLock;

static STOPWORD_SOURCE: &str = include_str!("../resources/stopwords.txt");

fn stopword_set() -> &'static HashSet<&'static str> {
    static SET: OnceLock<HashSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORD_SOURCE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

pub fn is_stopword(token: &str) -> bool {
    stopword_set().contains(token)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Lowercased word tokens: maximal runs of alphanumeric/underscore characters.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if is_word_char(c) {
            cur.extend(c.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Identifier-like tokens in source order, first occurrence only, case kept.
pub fn identifiers(source: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut cur = String::new();
    let flush = |cur: &mut String, out: &mut Vec<String>, seen: &mut HashSet<String>| {
        if cur.is_empty() {
            return;
        }
        let tok = std::mem::take(cur);
        // identifiers start with a letter or underscore
        if tok.chars().next().is_some_and(|c| c.is_alphabetic() || c == '_')
            && seen.insert(tok.clone())
        {
            out.push(tok);
        }
    };
    for c in source.chars() {
        if is_word_char(c) {
            cur.push(c);
        } else {
            flush(&mut cur, &mut out, &mut seen);
        }
    }
    flush(&mut cur, &mut out, &mut seen);
    out
}

/// Byte spans of tokens under the whitespace+punctuation splitter: word runs
/// form one token, every other non-whitespace character is its own token.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if is_word_char(c) {
            if word_start.is_none() {
                word_start = Some(i);
            }
        } else {
            if let Some(s) = word_start.take() {
                spans.push((s, i));
            }
            if !c.is_whitespace() {
                spans.push((i, i + c.len_utf8()));
            }
        }
    }
    if let Some(s) = word_start {
        spans.push((s, text.len()));
    }
    spans
}

/// Tokens under the whitespace+punctuation splitter, as owned strings.
pub fn tokens(text: &str) -> Vec<String> {
    token_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_string())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_lowercase_and_split() {
        assert_eq!(words("Split a Coin!"), vec!["split", "a", "coin"]);
        assert_eq!(words("x_1+y"), vec!["x_1", "y"]);
        assert!(words("  ,,  ").is_empty());
    }

    #[test]
    fn identifiers_keep_order_and_case() {
        assert_eq!(
            identifiers("fun transfer_coin(addr: address)"),
            vec!["fun", "transfer_coin", "addr", "address"]
        );
        // numbers are not identifiers, repeats collapse to first occurrence
        assert_eq!(identifiers("x 42 x _y"), vec!["x", "_y"]);
    }

    #[test]
    fn stopwords_loaded() {
        assert!(is_stopword("the"));
        assert!(is_stopword("a"));
        assert!(!is_stopword("coin"));
        assert!(!is_stopword("transfer"));
    }

    #[test]
    fn token_spans_cover_punctuation() {
        let text = "fun f(x) ->x";
        let toks = tokens(text);
        assert_eq!(toks, vec!["fun", "f", "(", "x", ")", "-", ">", "x"]);
        for (s, e) in token_spans(text) {
            assert!(s < e && e <= text.len());
        }
    }
}
