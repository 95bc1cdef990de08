use serde::{Deserialize, Serialize};

use super::MiniHdlError;

pub const KEYWORDS: &[&str] = &[
    "module",
    "endmodule",
    "input",
    "output",
    "wire",
    "reg",
    "clock",
    "probe",
    "assign",
    "pulse",
    "init",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Keyword,
    Identifier,
    Number,
    Punct,
    Whitespace,
    Comment,
}

impl TokenKind {
    /// Whitespace and comments carry no meaning for the checker or the
    /// edit-distance metric.
    pub fn is_trivia(self) -> bool {
        matches!(self, TokenKind::Whitespace | TokenKind::Comment)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token<'a> {
    pub kind: TokenKind,
    pub text: &'a str,
    /// Byte offset of `text` within the source.
    pub offset: usize,
    /// 1-based line on which the token starts.
    pub line: usize,
}

impl Token<'_> {
    pub fn end(&self) -> usize {
        self.offset + self.text.len()
    }

    pub fn is_keyword(&self, kw: &str) -> bool {
        self.kind == TokenKind::Keyword && self.text == kw
    }

    pub fn is_punct(&self, p: &str) -> bool {
        self.kind == TokenKind::Punct && self.text == p
    }
}

/// Tokenize raw bytes, rejecting invalid UTF-8.
pub fn tokenize_bytes(bytes: &[u8]) -> Result<Vec<Token<'_>>, MiniHdlError> {
    let text = std::str::from_utf8(bytes).map_err(|e| MiniHdlError::Encoding {
        valid_up_to: e.valid_up_to(),
    })?;
    Ok(tokenize(text))
}

/// Split `text` into tokens whose texts concatenate back to `text`.
pub fn tokenize(text: &str) -> Vec<Token<'_>> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut pos = 0;
    let mut line = 1;
    while pos < bytes.len() {
        let start = pos;
        let c = bytes[pos];
        let kind = if c.is_ascii_whitespace() {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            TokenKind::Whitespace
        } else if c == b'/' && bytes.get(pos + 1) == Some(&b'/') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            TokenKind::Comment
        } else if c == b'/' && bytes.get(pos + 1) == Some(&b'*') {
            pos += 2;
            while pos < bytes.len() && !(bytes[pos] == b'*' && bytes.get(pos + 1) == Some(&b'/')) {
                pos += 1;
            }
            // an unterminated block comment runs to end of input
            pos = (pos + 2).min(bytes.len());
            TokenKind::Comment
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while pos < bytes.len() && (bytes[pos].is_ascii_alphanumeric() || bytes[pos] == b'_') {
                pos += 1;
            }
            if KEYWORDS.contains(&&text[start..pos]) {
                TokenKind::Keyword
            } else {
                TokenKind::Identifier
            }
        } else if c.is_ascii_digit() {
            while pos < bytes.len() && (bytes[pos].is_ascii_digit() || bytes[pos] == b'_') {
                pos += 1;
            }
            TokenKind::Number
        } else {
            // one character, which may be multi-byte
            let ch = text[pos..]
                .chars()
                .next()
                .expect("pos is on a char boundary");
            pos += ch.len_utf8();
            TokenKind::Punct
        };
        let slice = &text[start..pos];
        out.push(Token {
            kind,
            text: slice,
            offset: start,
            line,
        });
        line += slice.bytes().filter(|&b| b == b'\n').count();
    }
    out
}

pub fn detokenize(tokens: &[Token<'_>]) -> String {
    tokens.iter().map(|t| t.text).collect()
}

/// Texts of the non-trivia tokens, the unit used by edit distance and TF-IDF.
pub fn significant_texts(text: &str) -> Vec<&str> {
    tokenize(text)
        .into_iter()
        .filter(|t| !t.kind.is_trivia())
        .map(|t| t.text)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_input() {
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn assign_statement() {
        let toks = tokenize("assign a = b;");
        let got: Vec<_> = toks.iter().map(|t| (t.kind, t.text)).collect();
        use TokenKind::*;
        assert_eq!(
            got,
            vec![
                (Keyword, "assign"),
                (Whitespace, " "),
                (Identifier, "a"),
                (Whitespace, " "),
                (Punct, "="),
                (Whitespace, " "),
                (Identifier, "b"),
                (Punct, ";"),
            ]
        );
    }

    #[test]
    fn lines_and_comments() {
        let src = "wire a; // note\n/* two\nlines */ reg b;";
        let toks = tokenize(src);
        let reg = toks.iter().find(|t| t.text == "reg").unwrap();
        assert_eq!(reg.line, 3);
        assert!(toks
            .iter()
            .any(|t| t.kind == TokenKind::Comment && t.text == "// note"));
        assert_eq!(detokenize(&toks), src);
    }

    #[test]
    fn invalid_utf8_rejected() {
        let err = tokenize_bytes(&[b'a', 0xff, b'b']).unwrap_err();
        assert!(matches!(err, MiniHdlError::Encoding { valid_up_to: 1 }));
    }

    #[test]
    fn unterminated_block_comment() {
        let toks = tokenize("a /* open");
        assert_eq!(toks.last().unwrap().kind, TokenKind::Comment);
        assert_eq!(detokenize(&toks), "a /* open");
    }

    #[test]
    fn shipped_seeds_round_trip() {
        let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/seeds");
        for entry in std::fs::read_dir(dir).unwrap() {
            let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
            assert_eq!(detokenize(&tokenize(&text)), text);
        }
    }

    proptest! {
        #[test]
        fn tokens_partition_input(s in "\\PC*") {
            let toks = tokenize(&s);
            prop_assert_eq!(detokenize(&toks), s.clone());
            let mut at = 0;
            for t in &toks {
                prop_assert_eq!(t.offset, at);
                prop_assert!(!t.text.is_empty());
                at = t.end();
            }
        }
    }
}
