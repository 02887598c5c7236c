//! Byte-level BPE as used by RoBERTa-family models (`vocab.json` plus
//! `merges.txt`).

use std::collections::HashMap;
use std::path::Path;

use super::Tokenizer;
use crate::dataset::{read_text, SingleTokenTest};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ByteBpe {
    encoder: HashMap<String, u32>,
    decoder: Vec<String>,
    ranks: HashMap<(String, String), usize>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
    bos: u32,
    eos: u32,
    mask: u32,
    unk: u32,
}

fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| {
        (u32::from(b'!')..=u32::from(b'~')).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b)
    };
    let mut n = 0;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).unwrap()
        } else {
            n += 1;
            char::from_u32(255 + n).unwrap()
        };
    }
    table
}

impl ByteBpe {
    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self> {
        let encoder: HashMap<String, u32> = serde_json::from_str(&read_text(vocab)?)?;
        Self::new(encoder, &read_text(merges)?)
    }

    pub fn new(encoder: HashMap<String, u32>, merges: &str) -> Result<Self> {
        let mut ranks = HashMap::new();
        for line in merges.lines() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Lm(format!("bad merge line `{line}`")))?;
            let rank = ranks.len();
            ranks.insert((a.to_string(), b.to_string()), rank);
        }
        let size = encoder.values().map(|&v| v as usize + 1).max().unwrap_or(0);
        let mut decoder = vec![String::new(); size];
        for (tok, &id) in &encoder {
            decoder[id as usize] = tok.clone();
        }
        let special = |t: &str| {
            encoder
                .get(t)
                .copied()
                .ok_or_else(|| Error::Lm(format!("vocabulary lacks {t}")))
        };
        let byte_to_char = bytes_to_unicode();
        Ok(ByteBpe {
            bos: special("<s>")?,
            eos: special("</s>")?,
            mask: special("<mask>")?,
            unk: special("<unk>")?,
            char_to_byte: byte_to_char
                .iter()
                .enumerate()
                .map(|(b, &c)| (c, b as u8))
                .collect(),
            byte_to_char,
            encoder,
            decoder,
            ranks,
        })
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(String::from).collect();
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, at)) = best else { break };
            let pair = (parts[at].clone(), parts[at + 1].clone());
            // Merge every occurrence of the best pair, left to right.
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == pair.0 && parts[i + 1] == pair.1 {
                    merged.push(format!("{}{}", pair.0, pair.1));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
        }
        parts
    }
}

#[derive(PartialEq, Clone, Copy)]
enum Class {
    Letter,
    Number,
    Other,
    Space,
}

fn class(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Number
    } else {
        Class::Other
    }
}

/// GPT-2 pre-tokenization: contractions, optionally space-prefixed runs of
/// letters, numbers or other symbols, and whitespace runs that leave their
/// final space to the following word.
pub(crate) fn pre_tokenize(text: &str) -> Vec<String> {
    const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let rest: String = chars[i..chars.len().min(i + 3)].iter().collect();
        if let Some(c) = CONTRACTIONS.iter().find(|c| rest.starts_with(*c)) {
            out.push(c.to_string());
            i += c.chars().count();
            continue;
        }
        let mut j = i;
        if chars[j] == ' ' && j + 1 < chars.len() && class(chars[j + 1]) != Class::Space {
            j += 1;
        }
        let k = class(chars[j]);
        if k != Class::Space {
            let mut end = j + 1;
            while end < chars.len() && class(chars[end]) == k {
                end += 1;
            }
            out.push(chars[i..end].iter().collect());
            i = end;
            continue;
        }
        let mut end = i;
        while end < chars.len() && class(chars[end]) == Class::Space {
            end += 1;
        }
        if end < chars.len() && end - i > 1 {
            end -= 1;
        }
        out.push(chars[i..end].iter().collect());
        i = end;
    }
    out
}

impl Tokenizer for ByteBpe {
    fn encode(&self, text: &str, leading_space: bool) -> Vec<u32> {
        let text = if leading_space && !text.is_empty() {
            format!(" {text}")
        } else {
            text.to_string()
        };
        let mut ids = Vec::new();
        for piece in pre_tokenize(&text) {
            let mapped: String = piece.bytes().map(|b| self.byte_to_char[b as usize]).collect();
            for tok in self.bpe(&mapped) {
                ids.push(self.encoder.get(&tok).copied().unwrap_or(self.unk));
            }
        }
        ids
    }

    fn bos(&self) -> u32 {
        self.bos
    }

    fn eos(&self) -> u32 {
        self.eos
    }

    fn mask(&self) -> u32 {
        self.mask
    }

    fn unk(&self) -> u32 {
        self.unk
    }

    fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    fn surface(&self, id: u32) -> String {
        let tok = self.decoder.get(id as usize).map(String::as_str).unwrap_or("");
        let bytes: Vec<u8> = tok
            .chars()
            .filter_map(|c| self.char_to_byte.get(&c).copied())
            .collect();
        String::from_utf8_lossy(&bytes).trim().to_string()
    }
}

impl SingleTokenTest for ByteBpe {
    fn is_single_token(&self, phrase: &str) -> bool {
        let ids = self.encode(phrase, true);
        ids.len() == 1 && ids[0] != self.unk
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let distinct: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(distinct.len(), 256);
        assert_eq!(t[b'a' as usize], 'a');
        assert_eq!(t[b' ' as usize], 'Ġ');
    }

    #[test]
    fn pre_tokenization_matches_gpt2_pattern() {
        assert_eq!(
            pre_tokenize("Hello world's  end 42!"),
            vec!["Hello", " world", "'s", " ", " end", " 42", "!"]
        );
        assert_eq!(pre_tokenize("a\nb"), vec!["a", "\n", "b"]);
        assert_eq!(pre_tokenize("x   "), vec!["x", "   "]);
    }
}
