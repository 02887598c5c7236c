use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{read_text, OpenKg, Split};
use crate::error::{Error, Result};
use crate::lm::Direction;
use crate::model::{ContextTable, OkgitModel};

use super::{original_triples, top1_predictions};

/// Number of typer predictions kept per mention.
pub const TYPER_TOP_K: usize = 5;

/// Cached outputs of an external entity typer, keyed by
/// `(sentence, mention)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TyperResults {
    entries: BTreeMap<(String, String), Vec<String>>,
}

impl TyperResults {
    /// Reads `sentence<TAB>mention<TAB>type1,type2,...`, keeping the first
    /// five types of each line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut out = TyperResults::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected 3 tab-separated columns, found {}", cols.len()),
                });
            }
            let types = cols[2].split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from);
            out.insert(cols[0], cols[1], types);
        }
        Ok(out)
    }

    pub fn insert(&mut self, sentence: &str, mention: &str, types: impl IntoIterator<Item = String>) {
        let types = types.into_iter().take(TYPER_TOP_K).collect();
        self.entries.insert((sentence.to_string(), mention.to_string()), types);
    }

    pub fn get(&self, sentence: &str, mention: &str) -> Option<&[String]> {
        self.entries
            .get(&(sentence.to_string(), mention.to_string()))
            .map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `2 |A ∩ B| / (|A| + |B|)`, zero when both sets are empty.
pub fn type_f1_term<T: Ord>(gold: &BTreeSet<T>, predicted: &BTreeSet<T>) -> f64 {
    let denom = gold.len() + predicted.len();
    if denom == 0 {
        return 0.0;
    }
    2.0 * gold.intersection(predicted).count() as f64 / denom as f64
}

/// One scored prediction: the evaluation triple, the predicted slot and NP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypedPrediction {
    pub head: u32,
    pub rp: u32,
    pub tail: u32,
    pub direction: Direction,
    pub predicted: u32,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeEvalReport {
    pub split: Split,
    pub f1: f64,
    pub evaluated: usize,
    pub skipped: usize,
    pub per_prediction: Vec<TypedPrediction>,
}

impl TypeEvalReport {
    /// Per-prediction F1 values present in both reports, in a shared order.
    pub fn paired_with(&self, other: &TypeEvalReport) -> (Vec<f64>, Vec<f64>) {
        let key = |p: &TypedPrediction| (p.head, p.rp, p.tail, p.direction);
        let theirs: BTreeMap<_, f64> = other.per_prediction.iter().map(|p| (key(p), p.f1)).collect();
        self.per_prediction
            .iter()
            .filter_map(|p| theirs.get(&key(p)).map(|&b| (p.f1, b)))
            .unzip()
    }
}

fn sentence(kg: &OpenKg, h: u32, r: u32, t: u32) -> String {
    format!("{} {} {}", kg.nps[h as usize], kg.rps[r as usize], kg.nps[t as usize])
}

struct Slot {
    triple: (u32, u32, u32),
    direction: Direction,
    predicted: u32,
}

impl Slot {
    /// `(sentence, mention)` for the gold and the predicted NP.
    fn keys(&self, kg: &OpenKg) -> [(String, String); 2] {
        let (h, r, t) = self.triple;
        let p = self.predicted;
        let np = |i: u32| kg.nps[i as usize].clone();
        match self.direction {
            Direction::Tail => [(sentence(kg, h, r, t), np(t)), (sentence(kg, h, r, p), np(p))],
            Direction::Head => [(sentence(kg, h, r, t), np(h)), (sentence(kg, p, r, t), np(p))],
        }
    }
}

fn slots(
    model: &OkgitModel,
    kg: &OpenKg,
    context: Option<&ContextTable>,
    split: Split,
    batch_size: usize,
) -> Result<Vec<Slot>> {
    let triples = original_triples(kg, split)?;
    let offset = kg.inverse_offset().expect("checked by original_triples") as u32;
    let queries: Vec<(u32, u32)> = triples
        .iter()
        .flat_map(|&(h, r, t)| [(h, r), (t, r + offset)])
        .collect();
    let top = top1_predictions(model, context, &queries, batch_size)?;
    Ok(triples
        .iter()
        .enumerate()
        .flat_map(|(i, &triple)| {
            [
                Slot {
                    triple,
                    direction: Direction::Tail,
                    predicted: top[2 * i],
                },
                Slot {
                    triple,
                    direction: Direction::Head,
                    predicted: top[2 * i + 1],
                },
            ]
        })
        .collect())
}

/// Every `(sentence, mention)` pair the typer must cover to evaluate
/// `model` on `split`, sorted and deduplicated.
pub fn typer_requests(
    model: &OkgitModel,
    kg: &OpenKg,
    context: Option<&ContextTable>,
    split: Split,
    batch_size: usize,
) -> Result<Vec<(String, String)>> {
    let set: BTreeSet<(String, String)> = slots(model, kg, context, split, batch_size)?
        .iter()
        .flat_map(|s| s.keys(kg))
        .collect();
    Ok(set.into_iter().collect())
}

/// Mean type-compatibility F1 of the top-1 predictions over both
/// directions. Predictions lacking a typer entry are skipped and counted.
pub fn type_compat_f1(
    model: &OkgitModel,
    kg: &OpenKg,
    context: Option<&ContextTable>,
    split: Split,
    typer: &TyperResults,
    batch_size: usize,
) -> Result<TypeEvalReport> {
    let mut per_prediction = Vec::new();
    let mut skipped = 0;
    for slot in slots(model, kg, context, split, batch_size)? {
        let [gold, pred] = slot.keys(kg);
        let (Some(g), Some(p)) = (typer.get(&gold.0, &gold.1), typer.get(&pred.0, &pred.1)) else {
            skipped += 1;
            continue;
        };
        let g: BTreeSet<&String> = g.iter().collect();
        let p: BTreeSet<&String> = p.iter().collect();
        let (head, rp, tail) = slot.triple;
        per_prediction.push(TypedPrediction {
            head,
            rp,
            tail,
            direction: slot.direction,
            predicted: slot.predicted,
            f1: type_f1_term(&g, &p),
        });
    }
    let evaluated = per_prediction.len();
    let f1 = if evaluated == 0 {
        0.0
    } else {
        per_prediction.iter().map(|p| p.f1).sum::<f64>() / evaluated as f64
    };
    Ok(TypeEvalReport {
        split,
        f1,
        evaluated,
        skipped,
        per_prediction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn f1_term_examples() {
        let five = set(&["a", "b", "c", "d", "e"]);
        assert_eq!(type_f1_term(&five, &five), 1.0);
        assert_eq!(type_f1_term(&five, &set(&["x", "y"])), 0.0);
        assert_eq!(type_f1_term(&set(&["a", "b"]), &set(&["b"])), 2.0 / 3.0);
    }

    #[test]
    fn typer_file_keeps_top_five() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("typer.tsv");
        std::fs::write(&p, "bach moved to leipzig\tleipzig\tcity,place,location,area,town,region\n").unwrap();
        let t = TyperResults::load(&p).unwrap();
        assert_eq!(t.get("bach moved to leipzig", "leipzig").unwrap().len(), 5);
        assert!(t.get("bach moved to leipzig", "bach").is_none());
        std::fs::write(&p, "only two\tcols\n").unwrap();
        assert!(TyperResults::load(&p).is_err());
    }
}
