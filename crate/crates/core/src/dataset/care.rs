//! Adapter for the layout the ReVerb datasets are distributed in:
//!
//! * `ent2id.txt`, `rel2id.txt`: `phrase<TAB>id` per line, optionally preceded
//!   by a line holding only the entry count;
//! * `train_trip.txt`, `valid_trip.txt`, `test_trip.txt`: three tab-separated
//!   fields per line, either ids or phrases;
//! * `gold_npclust.txt`: `np_id<TAB>size<TAB>member_id...`, one line per NP
//!   listing the NPs canonicalized together with it.

use std::collections::HashMap;
use std::path::Path;

use super::{read_text, ClusterMap, OpenKg, Split, Triple};
use crate::error::{Error, Result};

fn read_id_map(path: &Path) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut entries: Vec<(usize, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let Some((phrase, id)) = raw.rsplit_once('\t') else {
            if i == 0 && raw.trim().parse::<usize>().is_ok() {
                continue;
            }
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "expected `phrase<TAB>id`".into(),
            });
        };
        let id: usize = id.trim().parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("bad id `{id}`"),
        })?;
        entries.push((id, phrase.to_string()));
    }
    let n = entries.len();
    let mut out = vec![None; n];
    for (id, phrase) in entries {
        if id >= n || out[id].is_some() {
            return Err(Error::Invalid(format!(
                "{}: ids must be a permutation of 0..{n}, saw {id}",
                path.display()
            )));
        }
        out[id] = Some(phrase);
    }
    Ok(out.into_iter().map(Option::unwrap_or_default).collect())
}

fn resolve(
    field: &str,
    ids: &HashMap<&str, u32>,
    limit: usize,
    path: &Path,
    line: usize,
) -> Result<u32> {
    if let Ok(id) = field.parse::<u32>() {
        if (id as usize) < limit {
            return Ok(id);
        }
    }
    ids.get(field).copied().ok_or_else(|| Error::Validation {
        path: path.to_path_buf(),
        line,
        message: format!("unknown phrase or id `{field}`"),
    })
}

fn find(dir: &Path, names: &[&str]) -> Result<std::path::PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| Error::MissingFile(dir.join(names[0])))
}

/// Reads a dataset in the distribution layout and returns it in memory;
/// call [`OpenKg::save`] to materialize the canonical layout.
pub fn convert_care_release(dir: &Path) -> Result<OpenKg> {
    let nps = read_id_map(&find(dir, &["ent2id.txt"])?)?;
    let rps = read_id_map(&find(dir, &["rel2id.txt"])?)?;
    let np_ids: HashMap<&str, u32> = nps
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32))
        .collect();
    let rp_ids: HashMap<&str, u32> = rps
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i as u32))
        .collect();

    let mut splits = Vec::new();
    for split in Split::ALL {
        let name = format!("{split}_trip.txt");
        let path = find(dir, &[&name])?;
        let text = read_text(&path)?;
        let mut triples = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = raw.split('\t').map(str::trim).collect();
            if f.len() != 3 {
                return Err(Error::Parse {
                    path: path.clone(),
                    line,
                    message: format!("expected 3 fields, found {}", f.len()),
                });
            }
            triples.push(Triple::new(
                resolve(f[0], &np_ids, nps.len(), &path, line)?,
                resolve(f[1], &rp_ids, rps.len(), &path, line)?,
                resolve(f[2], &np_ids, nps.len(), &path, line)?,
            ));
        }
        splits.push(triples);
    }

    let clusters = match find(dir, &["gold_npclust.txt", "cesi_npclust.txt"]) {
        Ok(path) => read_member_lists(&path, nps.len())?,
        Err(_) => {
            log::warn!("no cluster file in {}; using singletons", dir.display());
            ClusterMap::singletons(nps.len())
        }
    };

    let test = splits.pop().unwrap_or_default();
    let valid = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    Ok(OpenKg {
        nps,
        rps,
        train,
        valid,
        test,
        clusters,
    })
}

/// Member lists are merged transitively into a partition.
fn read_member_lists(path: &Path, nps: usize) -> Result<ClusterMap> {
    let text = read_text(path)?;
    let mut parent: Vec<usize> = (0..nps).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (i, raw) in text.lines().enumerate() {
        let ids: Vec<usize> = raw
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected integer fields".into(),
            })?;
        if ids.is_empty() {
            continue;
        }
        let anchor = ids[0];
        let members = ids.get(2..).unwrap_or(&[]);
        for &m in std::iter::once(&anchor).chain(members) {
            if m >= nps {
                return Err(Error::Validation {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("NP id {m} out of range"),
                });
            }
        }
        for &m in members {
            let (a, b) = (root(&mut parent, anchor), root(&mut parent, m));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let labels: Vec<u64> = (0..nps).map(|i| root(&mut parent, i) as u64).collect();
    Ok(ClusterMap::from_assignment(&labels))
}
