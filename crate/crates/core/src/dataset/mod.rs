//! Open knowledge graph ingestion.
//!
//! A dataset directory holds two vocabularies (`npvocab.txt`, `rpvocab.txt`,
//! line number = id), three triple splits (`train.tsv`, `valid.tsv`,
//! `test.tsv`, each `head<TAB>rp<TAB>tail` as decimal ids) and the gold
//! canonicalization clusters (`clusters.tsv`, `np<TAB>cluster`).

mod care;
mod filter;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use care::convert_care_release;
pub use filter::{filter_single_token, SingleTokenTest, VocabSet};

/// Reserved token prepended to a relation phrase to name its inverse.
pub const INVERSE_MARKER: &str = "<inv>";

pub const NP_VOCAB: &str = "npvocab.txt";
pub const RP_VOCAB: &str = "rpvocab.txt";
pub const CLUSTERS: &str = "clusters.tsv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: u32,
    pub rp: u32,
    pub tail: u32,
    /// Always `true` for triples read from split files; `false` only appears
    /// when one-vs-all expansion materializes negatives.
    pub label: bool,
}

impl Triple {
    pub fn new(head: u32, rp: u32, tail: u32) -> Self {
        Triple {
            head,
            rp,
            tail,
            label: true,
        }
    }

    pub fn key(&self) -> (u32, u32, u32) {
        (self.head, self.rp, self.tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tsv",
            Split::Valid => "valid.tsv",
            Split::Test => "test.tsv",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Partition of the NPs into gold canonicalization clusters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMap {
    np_to_cluster: Vec<u32>,
    cluster_to_nps: Vec<Vec<u32>>,
}

impl ClusterMap {
    /// Every NP alone in its own cluster.
    pub fn singletons(num_nps: usize) -> Self {
        ClusterMap {
            np_to_cluster: (0..num_nps as u32).collect(),
            cluster_to_nps: (0..num_nps as u32).map(|i| vec![i]).collect(),
        }
    }

    /// Builds the map from a total assignment NP → arbitrary cluster label.
    /// Cluster ids are assigned densely in ascending label order.
    pub fn from_assignment(labels: &[u64]) -> Self {
        let distinct: BTreeSet<u64> = labels.iter().copied().collect();
        let dense: BTreeMap<u64, u32> = distinct
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l, i as u32))
            .collect();
        let mut cluster_to_nps = vec![Vec::new(); dense.len()];
        let np_to_cluster = labels
            .iter()
            .enumerate()
            .map(|(np, l)| {
                let c = dense[l];
                cluster_to_nps[c as usize].push(np as u32);
                c
            })
            .collect();
        ClusterMap {
            np_to_cluster,
            cluster_to_nps,
        }
    }

    pub fn cluster_of(&self, np: u32) -> u32 {
        self.np_to_cluster[np as usize]
    }

    pub fn members(&self, cluster: u32) -> &[u32] {
        &self.cluster_to_nps[cluster as usize]
    }

    /// All NPs sharing a cluster with `np`, including `np` itself.
    pub fn cluster_mates(&self, np: u32) -> &[u32] {
        self.members(self.cluster_of(np))
    }

    pub fn num_clusters(&self) -> usize {
        self.cluster_to_nps.len()
    }

    pub fn num_nps(&self) -> usize {
        self.np_to_cluster.len()
    }

    pub fn assignment(&self) -> &[u32] {
        &self.np_to_cluster
    }
}

/// Headline counts of a dataset, in the layout of the usual statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub nps: usize,
    pub rps: usize,
    pub gold_clusters: usize,
    pub avg_nps_per_cluster: f64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone)]
pub struct OpenKg {
    pub nps: Vec<String>,
    pub rps: Vec<String>,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub clusters: ClusterMap,
}

/// Map from a `(known NP, relation)` query to the set of correct answers.
pub type QueryIndex = BTreeMap<(u32, u32), BTreeSet<u32>>;

impl OpenKg {
    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Triple> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn num_nps(&self) -> usize {
        self.nps.len()
    }

    pub fn num_rps(&self) -> usize {
        self.rps.len()
    }

    /// Counts of the original graph; inverse relations and triples are
    /// left out.
    pub fn stats(&self) -> DatasetStats {
        let clusters = self.clusters.num_clusters();
        let avg = if clusters == 0 {
            0.0
        } else {
            ((self.nps.len() as f64 / clusters as f64) * 100.0).round() / 100.0
        };
        let rps = self.inverse_offset().unwrap_or(self.rps.len());
        let count = |split: Split| self.split(split).iter().filter(|t| (t.rp as usize) < rps).count();
        DatasetStats {
            nps: self.nps.len(),
            rps,
            gold_clusters: clusters,
            avg_nps_per_cluster: avg,
            train: count(Split::Train),
            valid: count(Split::Valid),
            test: count(Split::Test),
        }
    }

    /// Number of original relations when the KG carries inverse companions.
    pub fn inverse_offset(&self) -> Option<usize> {
        let n = self.rps.len();
        if n == 0 || n % 2 != 0 {
            return None;
        }
        let half = n / 2;
        let (base, inv) = self.rps.split_at(half);
        let marked = |s: &String| s.starts_with(INVERSE_MARKER);
        (inv.iter().all(marked) && !base.iter().any(marked)).then_some(half)
    }

    pub fn is_augmented(&self) -> bool {
        self.rps.iter().any(|r| r.starts_with(INVERSE_MARKER))
    }

    /// Adds the inverse relation `r + |R|` for every relation and the
    /// companion triple `(t, r + |R|, h)` for every triple of every split.
    pub fn augment_inverse_relations(&self) -> Result<OpenKg> {
        if self.is_augmented() {
            return Err(Error::AlreadyAugmented);
        }
        let offset = self.rps.len() as u32;
        let mut out = self.clone();
        out.rps
            .extend(self.rps.iter().map(|r| format!("{INVERSE_MARKER} {r}")));
        for split in Split::ALL {
            let inverse: Vec<Triple> = self
                .split(split)
                .iter()
                .map(|t| Triple {
                    head: t.tail,
                    rp: t.rp + offset,
                    tail: t.head,
                    label: t.label,
                })
                .collect();
            out.split_mut(split).extend(inverse);
        }
        Ok(out)
    }

    /// Groups a split by `(head, rp)`; the value is the set of tails.
    pub fn query_index(&self, split: Split) -> QueryIndex {
        index_triples(self.split(split).iter())
    }

    /// Like [`OpenKg::query_index`] but for a split given by name.
    pub fn query_index_named(&self, split: &str) -> Result<QueryIndex> {
        Ok(self.query_index(split.parse()?))
    }

    /// Every known answer across all splits, used for filtered ranking.
    pub fn known_answers(&self) -> QueryIndex {
        index_triples(Split::ALL.iter().flat_map(|&s| self.split(s).iter()))
    }

    pub fn np_id(&self, phrase: &str) -> Option<u32> {
        self.nps.iter().position(|n| n == phrase).map(|i| i as u32)
    }

    pub fn rp_id(&self, phrase: &str) -> Option<u32> {
        self.rps.iter().position(|n| n == phrase).map(|i| i as u32)
    }

    /// Writes the canonical TSV layout.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_lines(&dir.join(NP_VOCAB), self.nps.iter().map(|s| s.to_string()))?;
        write_lines(&dir.join(RP_VOCAB), self.rps.iter().map(|s| s.to_string()))?;
        for split in Split::ALL {
            write_lines(
                &dir.join(split.file_name()),
                self.split(split)
                    .iter()
                    .map(|t| format!("{}\t{}\t{}", t.head, t.rp, t.tail)),
            )?;
        }
        write_lines(
            &dir.join(CLUSTERS),
            self.clusters
                .assignment()
                .iter()
                .enumerate()
                .map(|(np, c)| format!("{np}\t{c}")),
        )
    }

    /// Checks the index and disjointness invariants.
    pub fn validate(&self) -> Result<()> {
        let nps = self.nps.len() as u32;
        let rps = self.rps.len() as u32;
        for split in Split::ALL {
            for (i, t) in self.split(split).iter().enumerate() {
                if t.head >= nps || t.tail >= nps || t.rp >= rps {
                    return Err(Error::Validation {
                        path: PathBuf::from(split.file_name()),
                        line: i + 1,
                        message: format!("triple {:?} out of range", t.key()),
                    });
                }
            }
        }
        if self.clusters.num_nps() != self.nps.len() {
            return Err(Error::Invalid(format!(
                "cluster map covers {} NPs, vocabulary has {}",
                self.clusters.num_nps(),
                self.nps.len()
            )));
        }
        Ok(())
    }
}

fn index_triples<'a>(triples: impl Iterator<Item = &'a Triple>) -> QueryIndex {
    let mut index = QueryIndex::new();
    for t in triples {
        index.entry((t.head, t.rp)).or_default().insert(t.tail);
    }
    index
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_lines(path: &Path, lines: impl Iterator<Item = String>) -> Result<()> {
    let mut buf = String::new();
    for line in lines {
        buf.push_str(&line);
        buf.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

fn read_vocab(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?.lines().map(str::to_string).collect())
}

fn parse_u64(path: &Path, line: usize, field: &str) -> Result<u64> {
    field.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("expected a decimal id, found `{field}`"),
    })
}

fn read_triples(path: &Path, nps: usize, rps: usize) -> Result<Vec<Triple>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let h = parse_u64(path, line, fields[0])?;
        let r = parse_u64(path, line, fields[1])?;
        let t = parse_u64(path, line, fields[2])?;
        let bad = if h as usize >= nps {
            Some(format!("head id {h} out of range ({nps} NPs)"))
        } else if t as usize >= nps {
            Some(format!("tail id {t} out of range ({nps} NPs)"))
        } else if r as usize >= rps {
            Some(format!("relation id {r} out of range ({rps} RPs)"))
        } else {
            None
        };
        if let Some(message) = bad {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                line,
                message,
            });
        }
        out.push(Triple::new(h as u32, r as u32, t as u32));
    }
    Ok(out)
}

fn read_clusters(path: &Path, nps: usize) -> Result<ClusterMap> {
    let text = read_text(path)?;
    let mut labels: Vec<Option<u64>> = vec![None; nps];
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected 2 tab-separated fields, found {}", fields.len()),
            });
        }
        let np = parse_u64(path, line, fields[0])? as usize;
        let cluster = parse_u64(path, line, fields[1])?;
        if np >= nps {
            return Err(Error::Validation {
                path: path.to_path_buf(),
                line,
                message: format!("NP id {np} out of range ({nps} NPs)"),
            });
        }
        if let Some(prev) = labels[np].replace(cluster) {
            log::warn!(
                "{}:{line}: NP {np} reassigned from cluster {prev} to {cluster}",
                path.display()
            );
        }
    }
    // Unlisted NPs become singletons with fresh labels above every listed one.
    let mut next = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut missing = 0usize;
    let total: Vec<u64> = labels
        .into_iter()
        .map(|l| {
            l.unwrap_or_else(|| {
                missing += 1;
                next += 1;
                next - 1
            })
        })
        .collect();
    if missing > 0 {
        log::warn!(
            "{}: {missing} NPs without a cluster were placed in singleton clusters",
            path.display()
        );
    }
    Ok(ClusterMap::from_assignment(&total))
}

/// Loads a dataset directory in the canonical TSV layout.
pub fn load_openkg(dir: &Path) -> Result<OpenKg> {
    let nps = read_vocab(&dir.join(NP_VOCAB))?;
    let rps = read_vocab(&dir.join(RP_VOCAB))?;
    let mut splits = Vec::with_capacity(3);
    for split in Split::ALL {
        splits.push(read_triples(
            &dir.join(split.file_name()),
            nps.len(),
            rps.len(),
        )?);
    }
    let clusters = read_clusters(&dir.join(CLUSTERS), nps.len())?;
    let test = splits.pop().unwrap_or_default();
    let valid = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    let kg = OpenKg {
        nps,
        rps,
        train,
        valid,
        test,
        clusters,
    };
    warn_on_overlap(&kg);
    Ok(kg)
}

fn warn_on_overlap(kg: &OpenKg) {
    let train: HashSet<_> = kg.train.iter().map(Triple::key).collect();
    let valid: HashSet<_> = kg.valid.iter().map(Triple::key).collect();
    let overlaps = [
        ("train/valid", kg.valid.iter().filter(|t| train.contains(&t.key())).count()),
        ("train/test", kg.test.iter().filter(|t| train.contains(&t.key())).count()),
        ("valid/test", kg.test.iter().filter(|t| valid.contains(&t.key())).count()),
    ];
    for (pair, n) in overlaps {
        if n > 0 {
            log::warn!("{n} triples shared between {pair} splits");
        }
    }
}
