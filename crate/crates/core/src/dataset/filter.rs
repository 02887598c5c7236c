use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::{ClusterMap, OpenKg, Split, Triple};

/// Decides whether a phrase is a single token of some language model.
pub trait SingleTokenTest {
    fn is_single_token(&self, phrase: &str) -> bool;
}

/// Plain membership in a token list, after lowercasing.
#[derive(Debug, Clone, Default)]
pub struct VocabSet(pub HashSet<String>);

impl VocabSet {
    pub fn from_lines(text: &str) -> Self {
        VocabSet(
            text.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }
}

impl SingleTokenTest for VocabSet {
    fn is_single_token(&self, phrase: &str) -> bool {
        self.0.contains(&phrase.trim().to_lowercase())
    }
}

impl<F: Fn(&str) -> bool> SingleTokenTest for F {
    fn is_single_token(&self, phrase: &str) -> bool {
        self(phrase)
    }
}

/// Keeps the triples whose head and tail are single tokens and re-indexes
/// NPs, RPs and clusters densely over what survives. Old ids map to new ids
/// monotonically.
pub fn filter_single_token(kg: &OpenKg, oracle: &dyn SingleTokenTest) -> OpenKg {
    let single: Vec<bool> = kg.nps.iter().map(|np| oracle.is_single_token(np)).collect();
    let keep = |t: &Triple| single[t.head as usize] && single[t.tail as usize];

    let mut used_nps = BTreeSet::new();
    let mut used_rps = BTreeSet::new();
    for split in Split::ALL {
        for t in kg.split(split).iter().filter(|t| keep(t)) {
            used_nps.insert(t.head);
            used_nps.insert(t.tail);
            used_rps.insert(t.rp);
        }
    }
    let np_map: BTreeMap<u32, u32> = used_nps
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new as u32))
        .collect();
    let rp_map: BTreeMap<u32, u32> = used_rps
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new as u32))
        .collect();

    let remap = |triples: &[Triple]| -> Vec<Triple> {
        triples
            .iter()
            .filter(|t| keep(t))
            .map(|t| Triple {
                head: np_map[&t.head],
                rp: rp_map[&t.rp],
                tail: np_map[&t.tail],
                label: t.label,
            })
            .collect()
    };

    let labels: Vec<u64> = used_nps
        .iter()
        .map(|&old| kg.clusters.cluster_of(old) as u64)
        .collect();

    let out = OpenKg {
        nps: used_nps.iter().map(|&i| kg.nps[i as usize].clone()).collect(),
        rps: used_rps.iter().map(|&i| kg.rps[i as usize].clone()).collect(),
        train: remap(&kg.train),
        valid: remap(&kg.valid),
        test: remap(&kg.test),
        clusters: ClusterMap::from_assignment(&labels),
    };
    if out.train.is_empty() && out.valid.is_empty() && out.test.is_empty() {
        log::warn!("single-token filter removed every triple");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kg() -> OpenKg {
        OpenKg {
            nps: vec![
                "new york".into(),
                "tesla".into(),
                "paris".into(),
                "edison".into(),
            ],
            rps: vec!["return to".into(), "meet".into(), "unused".into()],
            train: vec![Triple::new(1, 0, 0), Triple::new(3, 1, 2)],
            valid: vec![],
            test: vec![],
            clusters: ClusterMap::from_assignment(&[5, 1, 5, 2]),
        }
    }

    fn whitespace_single(p: &str) -> bool {
        !p.contains(' ')
    }

    #[test]
    fn keeps_only_single_token_triples_and_reindexes() {
        let out = filter_single_token(&kg(), &whitespace_single);
        // Only (edison, meet, paris) survives: old ids 3,1,2 -> new 1,0,0.
        assert_eq!(out.train, vec![Triple::new(1, 0, 0)]);
        assert_eq!(out.nps, vec!["paris".to_string(), "edison".to_string()]);
        assert_eq!(out.rps, vec!["meet".to_string()]);
        assert_eq!(out.clusters.num_clusters(), 2);
        out.validate().unwrap();
    }

    #[test]
    fn all_multi_word_gives_empty_splits() {
        let mut k = kg();
        k.nps = k.nps.iter().map(|n| format!("the {n}")).collect();
        let out = filter_single_token(&k, &whitespace_single);
        assert!(out.train.is_empty());
        assert!(out.nps.is_empty());
    }

    #[test]
    fn vocab_set_is_case_insensitive() {
        let v = VocabSet::from_lines("paris\nTesla\n");
        assert!(v.is_single_token("Paris"));
        assert!(v.is_single_token("tesla"));
        assert!(!v.is_single_token("new york"));
    }

    #[test]
    fn surviving_strings_round_trip() {
        let k = kg();
        let out = filter_single_token(&k, &whitespace_single);
        for t in &out.train {
            let h = &out.nps[t.head as usize];
            let r = &out.rps[t.rp as usize];
            assert!(k.train.iter().any(|o| &k.nps[o.head as usize] == h
                && &k.rps[o.rp as usize] == r));
        }
    }
}
