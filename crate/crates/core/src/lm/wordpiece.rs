//! Uncased BERT tokenization: basic cleanup and punctuation splitting
//! followed by greedy longest-match WordPiece.

use std::collections::HashMap;
use std::path::Path;

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

use super::Tokenizer;
use crate::dataset::{read_text, SingleTokenTest};
use crate::error::{Error, Result};

const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone)]
pub struct WordPiece {
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    lowercase: bool,
    unk: u32,
    cls: u32,
    sep: u32,
    mask: u32,
}

impl WordPiece {
    pub fn from_vocab_file(path: &Path, lowercase: bool) -> Result<Self> {
        Self::from_tokens(read_text(path)?.lines().map(str::to_string).collect(), lowercase)
    }

    pub fn from_tokens(vocab: Vec<String>, lowercase: bool) -> Result<Self> {
        let ids: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let special = |t: &str| {
            ids.get(t)
                .copied()
                .ok_or_else(|| Error::Lm(format!("vocabulary lacks {t}")))
        };
        Ok(WordPiece {
            unk: special("[UNK]")?,
            cls: special("[CLS]")?,
            sep: special("[SEP]")?,
            mask: special("[MASK]")?,
            vocab,
            ids,
            lowercase,
        })
    }

    fn basic_tokens(&self, text: &str) -> Vec<String> {
        let mut cleaned = String::with_capacity(text.len());
        for c in text.chars() {
            if c == '\0' || c == '\u{fffd}' || (c.is_control() && !c.is_whitespace()) {
                continue;
            }
            if c.is_whitespace() {
                cleaned.push(' ');
            } else if is_cjk(c) {
                cleaned.push(' ');
                cleaned.push(c);
                cleaned.push(' ');
            } else {
                cleaned.push(c);
            }
        }
        let mut out = Vec::new();
        for word in cleaned.split_whitespace() {
            let word: String = if self.lowercase {
                word.to_lowercase()
                    .nfd()
                    .filter(|c| !is_combining_mark(*c))
                    .collect()
            } else {
                word.to_string()
            };
            let mut current = String::new();
            for c in word.chars() {
                if is_punctuation(c) {
                    if !current.is_empty() {
                        out.push(std::mem::take(&mut current));
                    }
                    out.push(c.to_string());
                } else {
                    current.push(c);
                }
            }
            if !current.is_empty() {
                out.push(current);
            }
        }
        out
    }

    fn word_pieces(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(self.unk);
            return;
        }
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece.insert_str(0, "##");
                }
                if let Some(&id) = self.ids.get(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(self.unk);
                    return;
                }
            }
        }
        out.extend(pieces);
    }
}

impl Tokenizer for WordPiece {
    fn encode(&self, text: &str, _leading_space: bool) -> Vec<u32> {
        let mut out = Vec::new();
        for w in self.basic_tokens(text) {
            self.word_pieces(&w, &mut out);
        }
        out
    }

    fn bos(&self) -> u32 {
        self.cls
    }

    fn eos(&self) -> u32 {
        self.sep
    }

    fn mask(&self) -> u32 {
        self.mask
    }

    fn unk(&self) -> u32 {
        self.unk
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn surface(&self, id: u32) -> String {
        self.vocab.get(id as usize).cloned().unwrap_or_default()
    }
}

impl SingleTokenTest for WordPiece {
    fn is_single_token(&self, phrase: &str) -> bool {
        let ids = self.encode(phrase, true);
        ids.len() == 1 && ids[0] != self.unk
    }
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0x2A700..=0x2B73F
        | 0x2B740..=0x2B81F | 0x2B820..=0x2CEAF | 0xF900..=0xFAFF | 0x2F800..=0x2FA1F)
}

fn is_punctuation(c: char) -> bool {
    if c.is_ascii() {
        return c.is_ascii_punctuation();
    }
    // Common Unicode punctuation blocks.
    matches!(c as u32,
        0x00A1..=0x00BF | 0x2010..=0x2027 | 0x2030..=0x205E | 0x3001..=0x3003
        | 0x3008..=0x3011 | 0x3014..=0x301F | 0xFF01..=0xFF0F | 0xFF1A..=0xFF20
        | 0xFF3B..=0xFF40 | 0xFF5B..=0xFF65)
        && !matches!(c as u32, 0x00AC | 0x00B0 | 0x00B1 | 0x00B4 | 0x00B5 | 0x00B8 | 0x00BC..=0x00BE)
}
