use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Ix2};

use crate::dataset::OpenKg;
use crate::error::{Error, Result};
use crate::lm::safetensors::{self, SafeTensors};

/// Reserved word shared by every out-of-vocabulary token.
pub const UNK_WORD: &str = "<unk>";

/// Word vocabulary of the relation-phrase encoder. Phrases are lowercased
/// and split on whitespace; the inverse marker is an ordinary word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseVocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl PhraseVocab {
    /// Words in order of first appearance over the RP list, after the
    /// reserved UNK entry at index 0.
    pub fn from_phrases<'a>(phrases: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = vec![UNK_WORD.to_string()];
        let mut ids = HashMap::from([(UNK_WORD.to_string(), 0)]);
        for p in phrases {
            for w in Self::split(p) {
                if !ids.contains_key(&w) {
                    ids.insert(w.clone(), words.len());
                    words.push(w);
                }
            }
        }
        PhraseVocab { words, ids }
    }

    pub fn from_kg(kg: &OpenKg) -> Self {
        Self::from_phrases(kg.rps.iter().map(String::as_str))
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(UNK_WORD) {
            return Err(Error::Invalid(format!("word vocabulary must start with {UNK_WORD}")));
        }
        let ids = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(PhraseVocab { words, ids })
    }

    fn split(phrase: &str) -> Vec<String> {
        phrase.to_lowercase().split_whitespace().map(str::to_string).collect()
    }

    /// Word ids of a phrase; unknown words map to UNK and an empty phrase to
    /// a single UNK.
    pub fn encode(&self, phrase: &str) -> Vec<usize> {
        let ids: Vec<usize> = Self::split(phrase)
            .iter()
            .map(|w| self.ids.get(w).copied().unwrap_or(0))
            .collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// LM vectors for initializing NP and word embeddings. Stored as a
/// safetensors file with an `np` tensor (one row per NP) and an optional
/// `word` tensor (one row per [`PhraseVocab`] entry).
#[derive(Debug, Clone)]
pub struct InitVectors {
    pub np: Array2<f64>,
    pub word: Option<Array2<f64>>,
}

impl InitVectors {
    pub fn load(path: &Path) -> Result<Self> {
        let st = SafeTensors::open(path)?;
        let mat = |name: &str| -> Result<Array2<f64>> {
            st.tensor(name)?
                .into_dimensionality::<Ix2>()
                .map(|a| a.mapv(f64::from))
                .map_err(|e| Error::Invalid(format!("{}: `{name}` {e}", path.display())))
        };
        Ok(InitVectors {
            np: mat("np")?,
            word: if st.contains("word") { Some(mat("word")?) } else { None },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let np = self.np.mapv(|v| v as f32).into_dyn();
        let word = self.word.as_ref().map(|w| w.mapv(|v| v as f32).into_dyn());
        let mut tensors = vec![("np", &np)];
        if let Some(w) = &word {
            tensors.push(("word", w));
        }
        std::fs::write(path, safetensors::serialize(&tensors)).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_in_first_appearance_order() {
        let v = PhraseVocab::from_phrases(["Moved to", "born in", "<inv> moved to"]);
        assert_eq!(v.words(), &["<unk>", "moved", "to", "born", "in", "<inv>"]);
        assert_eq!(v.encode("moved from"), vec![1, 0]);
        assert_eq!(v.encode("  "), vec![0]);
    }

    #[test]
    fn init_vectors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("init.safetensors");
        let iv = InitVectors {
            np: Array2::from_elem((3, 2), 0.5),
            word: None,
        };
        iv.save(&p).unwrap();
        let back = InitVectors::load(&p).unwrap();
        assert_eq!(back.np, iv.np);
        assert!(back.word.is_none());
    }
}
