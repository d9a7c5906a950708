//! Script-aware word/character tokenizer shared by every language.
//!
//! CJK ideographs and kana become one token per character. Everything else is
//! split on whitespace and then on punctuation, with each punctuation mark a
//! token of its own, and lowercased.

/// A token with its character span `[start, end)` in the source text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Ideographs, kana and Hangul syllables: one token per character.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x309F   // hiragana
        | 0x30A0..=0x30FF // katakana
        | 0x31F0..=0x31FF
        | 0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xAC00..=0xD7AF
        | 0xF900..=0xFAFF
        | 0xFF66..=0xFF9F
        | 0x20000..=0x2FA1F)
}

/// CJK characters plus CJK/fullwidth punctuation. No spaces are placed around
/// these when joining tokens back into text.
pub fn is_cjk_like(c: char) -> bool {
    is_cjk(c) || matches!(c as u32, 0x3000..=0x303F | 0xFF00..=0xFFEF)
}

pub fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace() && c != '_'
}

pub fn tokenize_with_offsets(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut word_start = 0;

    let flush = |word: &mut String, start: usize, end: usize, out: &mut Vec<Token>| {
        if !word.is_empty() {
            out.push(Token {
                text: word.to_lowercase(),
                start,
                end,
            });
            word.clear();
        }
    };

    let mut pos = 0;
    for c in text.chars() {
        if c.is_whitespace() {
            flush(&mut word, word_start, pos, &mut out);
        } else if is_cjk(c) || is_punctuation(c) {
            flush(&mut word, word_start, pos, &mut out);
            out.push(Token {
                text: c.to_lowercase().collect(),
                start: pos,
                end: pos + 1,
            });
        } else {
            if word.is_empty() {
                word_start = pos;
            }
            word.push(c);
        }
        pos += 1;
    }
    flush(&mut word, word_start, pos, &mut out);
    out
}

pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_offsets(text)
        .into_iter()
        .map(|t| t.text)
        .collect()
}

/// Surface form of a token run: CJK tokens abut, everything else is
/// separated by one space.
pub fn join_tokens<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    let mut prev_cjk = true;
    for (i, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        let cjk = tok.chars().next().is_some_and(is_cjk_like);
        if i > 0 && !cjk && !prev_cjk {
            out.push(' ');
        }
        out.push_str(tok);
        prev_cjk = tok.chars().last().is_some_and(is_cjk_like);
    }
    out
}
