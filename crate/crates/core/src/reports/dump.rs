//! Top-k prediction tables for qualitative comparison of checkpoints.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClusterMap, OpenKg};
use crate::error::{Error, Result};
use crate::model::{ContextTable, OkgitModel};

/// Predictions for one `(head, relation)` query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKRow {
    pub head: String,
    pub relation: String,
    pub predictions: Vec<String>,
}

/// Parses `head<TAB>relation` lines; blank lines and `#` comments are
/// skipped.
pub fn parse_queries(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(h), Some(r), None) => out.push((h.to_string(), r.to_string())),
            _ => {
                return Err(Error::Invalid(format!(
                    "query line {}: expected `head<TAB>relation`",
                    i + 1
                )))
            }
        }
    }
    Ok(out)
}

fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Id of `phrase` in `list`: exact match first, then ignoring case and
/// whitespace runs.
pub fn resolve_phrase(list: &[String], phrase: &str) -> Result<u32> {
    if let Some(i) = list.iter().position(|p| p == phrase) {
        return Ok(i as u32);
    }
    let key = squash(phrase);
    list.iter()
        .position(|p| squash(p) == key)
        .map(|i| i as u32)
        .ok_or_else(|| Error::UnknownPhrase(phrase.to_string()))
}

/// The first `k` clusters in descending score order, each represented by
/// its best-scoring member; ties by ascending NP id.
pub fn top_cluster_representatives(scores: ArrayView1<f64>, clusters: &ClusterMap, k: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..scores.len() as u32).collect();
    ids.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    let mut seen = BTreeSet::new();
    ids.into_iter()
        .filter(|&np| seen.insert(clusters.cluster_of(np)))
        .take(k)
        .collect()
}

/// Unfiltered top-`k` cluster representatives for each query, as surface
/// strings.
pub fn dump_topk_predictions(
    model: &OkgitModel,
    kg: &OpenKg,
    context: Option<&ContextTable>,
    queries: &[(String, String)],
    k: usize,
) -> Result<Vec<TopKRow>> {
    let ids = query_ids(kg, queries)?;
    if ids.is_empty() {
        return Ok(Vec::new());
    }
    let scores = model.score_queries(&ids, context)?;
    Ok(ids
        .iter()
        .zip(scores.okgit.rows())
        .map(|(&(h, r), row)| TopKRow {
            head: kg.nps[h as usize].clone(),
            relation: kg.rps[r as usize].clone(),
            predictions: top_cluster_representatives(row, &kg.clusters, k)
                .into_iter()
                .map(|np| kg.nps[np as usize].clone())
                .collect(),
        })
        .collect())
}

/// `(np, rp)` ids of phrase queries.
pub fn query_ids(kg: &OpenKg, queries: &[(String, String)]) -> Result<Vec<(u32, u32)>> {
    queries
        .iter()
        .map(|(h, r)| Ok((resolve_phrase(&kg.nps, h)?, resolve_phrase(&kg.rps, r)?)))
        .collect()
}

/// Markdown table with one prediction column per named dump.
pub fn render_side_by_side(columns: &[(&str, &[TopKRow])]) -> Result<String> {
    let Some((_, first)) = columns.first() else {
        return Err(Error::Invalid("no prediction columns to render".into()));
    };
    for (name, rows) in columns {
        let same = rows.len() == first.len()
            && rows.iter().zip(first.iter()).all(|(a, b)| (&a.head, &a.relation) == (&b.head, &b.relation));
        if !same {
            return Err(Error::Invalid(format!("column `{name}` covers different queries")));
        }
    }
    let mut out = String::from("| query |");
    for (name, _) in columns {
        let _ = write!(out, " {name} |");
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(columns.len()));
    out.push('\n');
    for (i, row) in first.iter().enumerate() {
        let _ = write!(out, "| ({}, {}, ?) |", row.head, row.relation);
        for (_, rows) in columns {
            let _ = write!(out, " {} |", rows[i].predictions.join(", "));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn representatives_skip_cluster_mates() {
        let clusters = ClusterMap::from_assignment(&[0, 0, 1, 2]);
        let s = array![0.9, 0.8, 0.1, 0.5];
        assert_eq!(top_cluster_representatives(s.view(), &clusters, 3), vec![0, 3, 2]);
        assert_eq!(top_cluster_representatives(s.view(), &clusters, 1), vec![0]);
    }

    #[test]
    fn phrases_resolve_loosely() {
        let list = vec!["New York".to_string(), "paris".to_string()];
        assert_eq!(resolve_phrase(&list, "new  york").unwrap(), 0);
        assert!(matches!(resolve_phrase(&list, "rome"), Err(Error::UnknownPhrase(_))));
    }

    #[test]
    fn query_file_format() {
        let q = parse_queries("# comment\nbach\tmoved to\n\n").unwrap();
        assert_eq!(q, vec![("bach".to_string(), "moved to".to_string())]);
        assert!(parse_queries("only one field").is_err());
    }

    #[test]
    fn side_by_side_table() {
        let row = |p: &str| TopKRow {
            head: "bach".into(),
            relation: "moved to".into(),
            predictions: vec![p.into()],
        };
        let a = [row("leipzig")];
        let b = [row("1723")];
        let t = render_side_by_side(&[("okgit", &a), ("care", &b)]).unwrap();
        assert_eq!(
            t,
            "| query | okgit | care |\n|---|---|---|\n| (bach, moved to, ?) | leipzig | 1723 |\n"
        );
    }
}
