use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_text, SingleTokenTest};
use crate::error::{Error, Result};
use crate::lm::{Direction, MaskedLanguageModel, Prompt};
use crate::model::{rng_stream, Stream};

/// One triple of a typed KG, with textual entity names.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TypedTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

/// Freebase-style triples plus a gold type set per entity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TypedKg {
    pub triples: Vec<TypedTriple>,
    /// Lowercased entity name → types.
    pub types: BTreeMap<String, BTreeSet<String>>,
}

fn key(name: &str) -> String {
    name.trim().to_lowercase()
}

/// `/award/award_winner` → `/award`; other strings are kept.
fn primary_type(t: &str) -> String {
    match t.strip_prefix('/') {
        Some(rest) => format!("/{}", rest.split('/').next().unwrap_or_default()),
        None => t.to_string(),
    }
}

fn tsv_columns<'a>(path: &Path, text: &'a str, want: usize) -> Result<Vec<(usize, Vec<&'a str>)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() == want {
                Ok((i + 1, cols))
            } else {
                Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected {want} tab-separated columns, found {}", cols.len()),
                })
            }
        })
        .collect()
}

fn type_list(s: &str) -> BTreeSet<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(primary_type).collect()
}

impl TypedKg {
    /// Reads `head<TAB>relation<TAB>tail` triples and
    /// `entity<TAB>type1,type2,...` types. Types are reduced to their
    /// primary (first path segment) form.
    pub fn load(triples: &Path, types: &Path) -> Result<Self> {
        let text = read_text(triples)?;
        let triples_out = tsv_columns(triples, &text, 3)?
            .into_iter()
            .map(|(_, c)| TypedTriple {
                head: c[0].trim().to_string(),
                relation: c[1].trim().to_string(),
                tail: c[2].trim().to_string(),
            })
            .collect();
        let text = read_text(types)?;
        let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (line, c) in tsv_columns(types, &text, 2)? {
            let t = type_list(c[1]);
            if t.is_empty() {
                return Err(Error::Validation {
                    path: types.to_path_buf(),
                    line,
                    message: format!("entity `{}` has no types", c[0]),
                });
            }
            map.entry(key(c[0])).or_default().extend(t);
        }
        Ok(TypedKg {
            triples: triples_out,
            types: map,
        })
    }

    pub fn types_of(&self, entity: &str) -> Option<&BTreeSet<String>> {
        self.types.get(&key(entity))
    }

    pub fn type_vocab(&self) -> BTreeSet<String> {
        self.types.values().flatten().cloned().collect()
    }

    /// Types by the number of typed entities carrying them, most frequent
    /// first, ties by name.
    pub fn type_frequencies(&self) -> Vec<(String, usize)> {
        let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
        for t in self.types.values().flatten() {
            *counts.entry(t).or_default() += 1;
        }
        let mut out: Vec<(String, usize)> = counts.into_iter().map(|(t, c)| (t.clone(), c)).collect();
        out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        out
    }

    /// Triples whose tail is typed and a single LM token.
    pub fn single_token_subset(&self, test: &dyn SingleTokenTest) -> Vec<TypedTriple> {
        self.triples
            .iter()
            .filter(|t| self.types_of(&t.tail).is_some() && test.is_single_token(&t.tail))
            .cloned()
            .collect()
    }
}

/// Union of annotator types per triple from
/// `head<TAB>relation<TAB>tail<TAB>type1,type2,...`, one line per annotator.
pub fn load_human_annotations(path: &Path) -> Result<BTreeMap<TypedTriple, BTreeSet<String>>> {
    let text = read_text(path)?;
    let mut out: BTreeMap<TypedTriple, BTreeSet<String>> = BTreeMap::new();
    for (_, c) in tsv_columns(path, &text, 4)? {
        let t = TypedTriple {
            head: c[0].trim().to_string(),
            relation: c[1].trim().to_string(),
            tail: c[2].trim().to_string(),
        };
        out.entry(t).or_default().extend(type_list(c[3]));
    }
    Ok(out)
}

/// Top-1 masked-LM token for the tail slot of each triple.
pub fn probe_predictions(lm: &MaskedLanguageModel, triples: &[TypedTriple]) -> Result<Vec<String>> {
    triples
        .iter()
        .map(|t| {
            let prompt = Prompt::new(Direction::Tail, &t.head, &t.relation);
            Ok(lm
                .predict_mask(&prompt, 1)?
                .into_iter()
                .next()
                .map(|(_, s, _)| s)
                .unwrap_or_default())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeMethod {
    Random,
    Mft,
    Lm,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub method: ProbeMethod,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub subset_size: usize,
    /// Subset triples whose predicted token names no typed entity.
    pub skipped: usize,
    pub rows: Vec<ProbeRow>,
}

#[derive(Default)]
struct Acc {
    p: f64,
    r: f64,
    f: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, gold: &BTreeSet<String>, pred: &BTreeSet<String>) {
        let inter = gold.intersection(pred).count() as f64;
        self.p += if pred.is_empty() { 0.0 } else { inter / pred.len() as f64 };
        self.r += inter / gold.len() as f64;
        self.f += 2.0 * inter / (gold.len() + pred.len()) as f64;
        self.n += 1;
    }

    fn row(&self, method: ProbeMethod) -> ProbeRow {
        let n = self.n.max(1) as f64;
        ProbeRow {
            method,
            precision: self.p / n,
            recall: self.r / n,
            f1: self.f / n,
            evaluated: self.n,
        }
    }
}

/// Precision, recall and F1 of the LM's implied types on `subset`, with the
/// Random and most-frequent-types baselines size-matched to the LM's type
/// sets, and the human row when annotations are given.
pub fn freebase_type_probe(
    kg: &TypedKg,
    subset: &[TypedTriple],
    predictions: &[String],
    human: Option<&BTreeMap<TypedTriple, BTreeSet<String>>>,
    seed: u64,
) -> Result<ProbeReport> {
    if subset.is_empty() {
        return Err(Error::Invalid("typed subset is empty".into()));
    }
    if subset.len() != predictions.len() {
        return Err(Error::Invalid(format!(
            "{} triples but {} predictions",
            subset.len(),
            predictions.len()
        )));
    }
    let vocab: Vec<String> = kg.type_vocab().into_iter().collect();
    let frequent: Vec<String> = kg.type_frequencies().into_iter().map(|(t, _)| t).collect();
    let mut rng = rng_stream(seed, Stream::Baseline);
    let (mut lm, mut random, mut mft, mut hum) = (Acc::default(), Acc::default(), Acc::default(), Acc::default());
    let mut skipped = 0;
    for (t, pred) in subset.iter().zip(predictions) {
        let gold = kg
            .types_of(&t.tail)
            .ok_or_else(|| Error::Invalid(format!("tail `{}` has no gold types", t.tail)))?;
        if let Some(h) = human.and_then(|h| h.get(t)) {
            hum.add(gold, h);
        }
        let Some(predicted) = kg.types_of(pred) else {
            skipped += 1;
            continue;
        };
        let k = predicted.len();
        lm.add(gold, predicted);
        random.add(gold, &vocab.choose_multiple(&mut rng, k).cloned().collect());
        mft.add(gold, &frequent.iter().take(k).cloned().collect());
    }
    let mut rows = vec![
        random.row(ProbeMethod::Random),
        mft.row(ProbeMethod::Mft),
        lm.row(ProbeMethod::Lm),
    ];
    if human.is_some() {
        rows.push(hum.row(ProbeMethod::Human));
    }
    Ok(ProbeReport {
        subset_size: subset.len(),
        skipped,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kg() -> TypedKg {
        let mut types = BTreeMap::new();
        types.insert("paris".into(), BTreeSet::from(["/location".to_string()]));
        types.insert("france".into(), BTreeSet::from(["/location".to_string(), "/country".to_string()]));
        types.insert("bach".into(), BTreeSet::from(["/people".to_string()]));
        TypedKg {
            triples: vec![TypedTriple {
                head: "bach".into(),
                relation: "lived in".into(),
                tail: "paris".into(),
            }],
            types,
        }
    }

    #[test]
    fn primary_types_truncate_paths() {
        assert_eq!(primary_type("/award/award_winner"), "/award");
        assert_eq!(primary_type("/people"), "/people");
        assert_eq!(primary_type("person"), "person");
    }

    #[test]
    fn exact_prediction_scores_one() {
        let kg = kg();
        let r = freebase_type_probe(&kg, &kg.triples, &["Paris".into()], None, 1).unwrap();
        let lm = r.rows.iter().find(|r| r.method == ProbeMethod::Lm).unwrap();
        assert_eq!((lm.precision, lm.recall, lm.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn untyped_predictions_are_skipped() {
        let kg = kg();
        let r = freebase_type_probe(&kg, &kg.triples, &["the".into()], None, 1).unwrap();
        assert_eq!(r.skipped, 1);
        assert!(freebase_type_probe(&kg, &[], &[], None, 1).is_err());
    }

    #[test]
    fn frequencies_rank_by_count_then_name() {
        let f = kg().type_frequencies();
        assert_eq!(f[0], ("/location".to_string(), 2));
        assert_eq!(f[1].0, "/country");
    }
}
