//! Context vectors from a frozen masked language model.
//!
//! For a query `(h, r, ?)` the prompt is the head phrase, the relation
//! phrase and a mask token; the context vector is the final hidden state at
//! the mask. Head prediction masks the first slot instead:
//! `MASK r t`. Phrases are lowercased before tokenization.

pub mod bpe;
mod cache;
pub mod safetensors;
mod transformer;
pub mod wordpiece;

use std::fmt;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataset::OpenKg;
use crate::encoder::{InitVectors, PhraseVocab};
use crate::error::{Error, Result};

pub use cache::ContextVectorCache;
pub use transformer::{EncoderConfig, MaskedLanguageModel, TransformerEncoder};

/// Which slot of the triple is masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Tail = 0,
    Head = 1,
}

impl Direction {
    pub fn from_u8(v: u8) -> Option<Direction> {
        match v {
            0 => Some(Direction::Tail),
            1 => Some(Direction::Head),
            _ => None,
        }
    }
}

/// The identity of a prompt: the masked slot, the NP shown in the prompt and
/// the original (non-inverse) relation id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextQuery {
    pub direction: Direction,
    pub np: u32,
    pub rp: u32,
}

impl ContextQuery {
    pub fn tail(np: u32, rp: u32) -> Self {
        ContextQuery {
            direction: Direction::Tail,
            np,
            rp,
        }
    }

    pub fn head(np: u32, rp: u32) -> Self {
        ContextQuery {
            direction: Direction::Head,
            np,
            rp,
        }
    }

    /// Maps a query `(np, rp)` of an inverse-augmented KG, whose first
    /// `offset` relations are the originals, to its prompt identity.
    pub fn from_augmented(np: u32, rp: u32, offset: usize) -> Self {
        if (rp as usize) < offset {
            ContextQuery::tail(np, rp)
        } else {
            ContextQuery::head(np, rp - offset as u32)
        }
    }
}

impl fmt::Display for ContextQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.direction {
            Direction::Tail => write!(f, "(np {}, rp {}, ?)", self.np, self.rp),
            Direction::Head => write!(f, "(?, rp {}, np {})", self.rp, self.np),
        }
    }
}

/// Tokenizer surface needed to build prompts.
pub trait Tokenizer: Send + Sync {
    /// Encodes a text fragment. `leading_space` marks a fragment that follows
    /// other text; byte-level vocabularies encode the separating space.
    fn encode(&self, text: &str, leading_space: bool) -> Vec<u32>;
    fn bos(&self) -> u32;
    fn eos(&self) -> u32;
    fn mask(&self) -> u32;
    fn unk(&self) -> u32;
    fn vocab_size(&self) -> usize;
    /// Printable form of a vocabulary entry without subword markers.
    fn surface(&self, id: u32) -> String;
}

/// Prompt text for a query, before tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub direction: Direction,
    pub np: String,
    pub rp: String,
}

impl Prompt {
    pub fn new(direction: Direction, np: &str, rp: &str) -> Self {
        Prompt {
            direction,
            np: np.trim().to_lowercase(),
            rp: rp.trim().to_lowercase(),
        }
    }

    /// Resolves the phrases of `q` in `kg`. Inverse markers never reach the
    /// prompt because queries carry original relation ids.
    pub fn for_query(kg: &OpenKg, q: ContextQuery) -> Result<Self> {
        let np = kg
            .nps
            .get(q.np as usize)
            .ok_or_else(|| Error::Invalid(format!("NP id {} out of range", q.np)))?;
        let rp = kg
            .rps
            .get(q.rp as usize)
            .ok_or_else(|| Error::Invalid(format!("RP id {} out of range", q.rp)))?;
        Ok(Prompt::new(q.direction, np, rp))
    }

    /// Token ids including the boundary tokens, and the mask position.
    /// Relation tokens are dropped from the right when the prompt would not
    /// fit in `max_len`.
    pub fn token_ids(&self, tok: &dyn Tokenizer, max_len: usize) -> (Vec<u32>, usize) {
        let (np, mut rp) = match self.direction {
            Direction::Tail => (tok.encode(&self.np, false), tok.encode(&self.rp, true)),
            Direction::Head => (tok.encode(&self.np, true), tok.encode(&self.rp, true)),
        };
        let mut np = np;
        let budget = max_len.saturating_sub(3);
        if np.len() + rp.len() > budget {
            let keep = budget.saturating_sub(np.len());
            log::warn!(
                "prompt `{} / {}` exceeds {max_len} tokens; truncating relation tokens",
                self.np,
                self.rp
            );
            rp.truncate(keep);
            np.truncate(budget);
        }
        let mut ids = Vec::with_capacity(np.len() + rp.len() + 3);
        ids.push(tok.bos());
        let mask_pos = match self.direction {
            Direction::Tail => {
                ids.extend(&np);
                ids.extend(&rp);
                ids.push(tok.mask());
                ids.len() - 1
            }
            Direction::Head => {
                ids.push(tok.mask());
                ids.extend(&rp);
                ids.extend(&np);
                1
            }
        };
        ids.push(tok.eos());
        (ids, mask_pos)
    }
}

/// A source of context vectors keyed by prompt identity.
pub trait ContextProvider {
    fn provider_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn context_vector(&self, kg: &OpenKg, q: ContextQuery) -> Result<Vec<f32>>;
}

/// Named context sources recognized by the command line and configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    MlmBase,
    MlmLarge,
    MlmAlt,
    Concat,
    Add,
    Typing,
}

impl ProviderKind {
    pub fn id(self) -> &'static str {
        match self {
            ProviderKind::MlmBase => "mlm-base",
            ProviderKind::MlmLarge => "mlm-large",
            ProviderKind::MlmAlt => "mlm-alt",
            ProviderKind::Concat => "concat",
            ProviderKind::Add => "add",
            ProviderKind::Typing => "typing",
        }
    }

    /// Concat and add are functions of trainable embeddings and are
    /// recomputed on every step instead of being cached.
    pub fn is_live(self) -> bool {
        matches!(self, ProviderKind::Concat | ProviderKind::Add)
    }
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mlm-base" => ProviderKind::MlmBase,
            "mlm-large" => ProviderKind::MlmLarge,
            "mlm-alt" => ProviderKind::MlmAlt,
            "concat" => ProviderKind::Concat,
            "add" => ProviderKind::Add,
            "typing" => ProviderKind::Typing,
            other => return Err(Error::Config(format!("unknown provider `{other}`"))),
        })
    }
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// Every distinct prompt identity needed to score the given splits of an
/// inverse-augmented KG, in sorted order.
pub fn required_queries(kg: &OpenKg, splits: &[crate::dataset::Split]) -> Result<Vec<ContextQuery>> {
    let offset = kg
        .inverse_offset()
        .ok_or_else(|| Error::Invalid("knowledge graph lacks inverse relations".into()))?;
    let mut out: Vec<ContextQuery> = splits
        .iter()
        .flat_map(|&s| kg.split(s).iter())
        .map(|t| ContextQuery::from_augmented(t.head, t.rp, offset))
        .collect();
    out.sort();
    out.dedup();
    Ok(out)
}

/// Top-`k` vocabulary tokens by masked-LM score for the prompt of `q`,
/// best first, ties by vocabulary index; `k` is clamped to the vocabulary.
pub fn nearest_vocab_predictions(
    lm: &MaskedLanguageModel,
    kg: &OpenKg,
    q: ContextQuery,
    k: usize,
) -> Result<Vec<(String, f32)>> {
    let prompt = Prompt::for_query(kg, q)?;
    Ok(lm.predict_mask(&prompt, k)?.into_iter().map(|(_, s, v)| (s, v)).collect())
}

/// LM phrase vectors for every NP and every relation word of `kg`, for
/// the LM-initialized baselines. The UNK word row is zero.
pub fn lm_init_vectors(lm: &MaskedLanguageModel, kg: &OpenKg) -> Result<InitVectors> {
    let dim = lm.encoder().hidden_size();
    let mut np = Array2::zeros((kg.num_nps(), dim));
    for (i, phrase) in kg.nps.iter().enumerate() {
        let v = lm.phrase_vector(phrase)?;
        np.row_mut(i).assign(&Array1::from_iter(v.iter().map(|&x| f64::from(x))));
    }
    let vocab = PhraseVocab::from_kg(kg);
    let mut word = Array2::zeros((vocab.len(), dim));
    for (i, w) in vocab.words().iter().enumerate().skip(1) {
        let v = lm.phrase_vector(w)?;
        word.row_mut(i).assign(&Array1::from_iter(v.iter().map(|&x| f64::from(x))));
    }
    Ok(InitVectors { np, word: Some(word) })
}

/// Per-query distributions from an external entity typer, used verbatim as
/// context vectors. File format: `direction<TAB>np<TAB>rp<TAB>p1,p2,...`
/// with direction `tail` or `head`.
#[derive(Debug, Clone, Default)]
pub struct TypingDistributions {
    dim: usize,
    rows: std::collections::HashMap<ContextQuery, Vec<f32>>,
}

impl TypingDistributions {
    pub fn new(dim: usize) -> Self {
        TypingDistributions {
            dim,
            rows: Default::default(),
        }
    }

    pub fn insert(&mut self, q: ContextQuery, dist: Vec<f32>) -> Result<()> {
        if dist.len() != self.dim {
            return Err(Error::Dimension {
                context: "typing distribution",
                expected: self.dim,
                actual: dist.len(),
            });
        }
        self.rows.insert(q, dist);
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = crate::dataset::read_text(path)?;
        let mut out: Option<TypingDistributions> = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(parse_err(format!("expected 4 fields, found {}", f.len())));
            }
            let direction = match f[0] {
                "tail" => Direction::Tail,
                "head" => Direction::Head,
                d => return Err(parse_err(format!("bad direction `{d}`"))),
            };
            let np = f[1].parse().map_err(|_| parse_err("bad NP id".into()))?;
            let rp = f[2].parse().map_err(|_| parse_err("bad RP id".into()))?;
            let dist: Vec<f32> = f[3]
                .split(',')
                .map(|v| v.trim().parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err("bad probability".into()))?;
            let table = out.get_or_insert_with(|| TypingDistributions::new(dist.len()));
            table.insert(ContextQuery { direction, np, rp }, dist)?;
        }
        out.ok_or_else(|| Error::Invalid(format!("{}: no distributions", path.display())))
    }

    pub fn get(&self, q: &ContextQuery) -> Option<&[f32]> {
        self.rows.get(q).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl ContextProvider for TypingDistributions {
    fn provider_id(&self) -> &str {
        ProviderKind::Typing.id()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn context_vector(&self, _kg: &OpenKg, q: ContextQuery) -> Result<Vec<f32>> {
        self.get(&q)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| Error::MissingContext(format!("typer distribution for {q}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClusterMap, Triple};

    struct Chars;

    impl Tokenizer for Chars {
        fn encode(&self, text: &str, _: bool) -> Vec<u32> {
            text.split_whitespace().map(|w| w.len() as u32 + 10).collect()
        }
        fn bos(&self) -> u32 {
            1
        }
        fn eos(&self) -> u32 {
            2
        }
        fn mask(&self) -> u32 {
            3
        }
        fn unk(&self) -> u32 {
            0
        }
        fn vocab_size(&self) -> usize {
            100
        }
        fn surface(&self, id: u32) -> String {
            id.to_string()
        }
    }

    #[test]
    fn tail_and_head_prompt_layout() {
        let p = Prompt::new(Direction::Tail, "Tesla", "return to");
        assert_eq!(p.token_ids(&Chars, 64), (vec![1, 15, 16, 12, 3, 2], 4));
        let p = Prompt::new(Direction::Head, "New York", "return to");
        assert_eq!(p.token_ids(&Chars, 64), (vec![1, 3, 16, 12, 13, 14, 2], 1));
    }

    #[test]
    fn long_relation_is_truncated_from_the_right() {
        let p = Prompt::new(Direction::Tail, "a", "bb ccc dddd eeeee");
        let (ids, mask) = p.token_ids(&Chars, 6);
        assert_eq!(ids, vec![1, 11, 12, 13, 3, 2]);
        assert_eq!(mask, 4);
    }

    #[test]
    fn augmented_queries_map_to_original_relations() {
        assert_eq!(ContextQuery::from_augmented(4, 2, 5), ContextQuery::tail(4, 2));
        assert_eq!(ContextQuery::from_augmented(4, 7, 5), ContextQuery::head(4, 2));
    }

    #[test]
    fn required_queries_are_distinct() {
        let kg = OpenKg {
            nps: vec!["a".into(), "b".into(), "c".into()],
            rps: vec!["r".into()],
            train: vec![Triple::new(0, 0, 1), Triple::new(0, 0, 2)],
            valid: vec![],
            test: vec![],
            clusters: ClusterMap::singletons(3),
        }
        .augment_inverse_relations()
        .unwrap();
        let q = required_queries(&kg, &[crate::dataset::Split::Train]).unwrap();
        assert_eq!(
            q,
            vec![
                ContextQuery::tail(0, 0),
                ContextQuery::head(1, 0),
                ContextQuery::head(2, 0)
            ]
        );
    }

    #[test]
    fn typing_distribution_passes_through() {
        let mut t = TypingDistributions::new(3);
        t.insert(ContextQuery::tail(0, 0), vec![0.5, 0.3, 0.2]).unwrap();
        let kg = OpenKg {
            nps: vec!["a".into()],
            rps: vec!["r".into()],
            train: vec![],
            valid: vec![],
            test: vec![],
            clusters: ClusterMap::singletons(1),
        };
        assert_eq!(
            t.context_vector(&kg, ContextQuery::tail(0, 0)).unwrap(),
            vec![0.5, 0.3, 0.2]
        );
        assert!(matches!(
            t.context_vector(&kg, ContextQuery::head(0, 0)),
            Err(Error::MissingContext(_))
        ));
        assert!(t.insert(ContextQuery::head(0, 0), vec![1.0]).is_err());
    }
}
