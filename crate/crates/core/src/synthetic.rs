//! Small typed knowledge graphs for tests, demos and the book.
//!
//! Every NP carries a latent type. Each relation links NPs of one type to
//! NPs of another through a fixed rule, so the graph is learnable, and a
//! matching context provider exposes the answer type of each query.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClusterMap, OpenKg, Triple};
use crate::error::Result;
use crate::lm::{ContextProvider, ContextQuery, Direction};
use crate::model::{rng_stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub num_nps: usize,
    pub num_rps: usize,
    pub num_types: usize,
    /// Distinct triples before splitting.
    pub num_triples: usize,
    /// Fractions of triples in valid and test.
    pub valid_fraction: f64,
    pub test_fraction: f64,
    /// Number of two-NP clusters; remaining NPs are singletons.
    pub paired_clusters: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            num_nps: 20,
            num_rps: 4,
            num_types: 3,
            num_triples: 60,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            paired_clusters: 2,
            seed: 7,
        }
    }
}

/// A generated graph with the latent structure that produced it.
#[derive(Debug, Clone)]
pub struct ToyKg {
    pub kg: OpenKg,
    pub np_types: Vec<usize>,
    /// `(head type, tail type)` of each original relation.
    pub relation_types: Vec<(usize, usize)>,
    pub num_types: usize,
}

impl ToyKg {
    pub fn generate(spec: &ToySpec) -> Result<Self> {
        let mut rng = rng_stream(spec.seed, Stream::Baseline);
        let t = spec.num_types.max(1);
        let np_types: Vec<usize> = (0..spec.num_nps).map(|i| i % t).collect();
        let members = |ty: usize| -> Vec<u32> { (0..spec.num_nps as u32).filter(|&i| np_types[i as usize] == ty).collect() };
        let relation_types: Vec<(usize, usize)> = (0..spec.num_rps)
            .map(|r| (r % t, (r + 1 + r / t) % t))
            .collect();
        let mut all = BTreeSet::new();
        let mut attempts = 0;
        while all.len() < spec.num_triples && attempts < spec.num_triples * 50 {
            attempts += 1;
            let r = rng.random_range(0..spec.num_rps.max(1));
            let (a, b) = relation_types[r];
            let (heads, tails) = (members(a), members(b));
            if heads.is_empty() || tails.is_empty() {
                continue;
            }
            let h = heads[rng.random_range(0..heads.len())];
            // Each head has two plausible tails per relation.
            let k = (h as usize * 3 + r * 5 + rng.random_range(0..2)) % tails.len();
            all.insert((h, r as u32, tails[k]));
        }
        let mut triples: Vec<(u32, u32, u32)> = all.into_iter().collect();
        triples.shuffle(&mut rng);
        let n = triples.len();
        let n_test = ((n as f64) * spec.test_fraction).round() as usize;
        let n_valid = ((n as f64) * spec.valid_fraction).round() as usize;
        let to_triples = |s: &[(u32, u32, u32)]| -> Vec<Triple> {
            let mut v: Vec<Triple> = s.iter().map(|&(h, r, t)| Triple::new(h, r, t)).collect();
            v.sort_by_key(Triple::key);
            v
        };
        let test = to_triples(&triples[..n_test]);
        let valid = to_triples(&triples[n_test..n_test + n_valid]);
        let train = to_triples(&triples[n_test + n_valid..]);
        let mut labels: Vec<u64> = (0..spec.num_nps as u64).collect();
        for c in 0..spec.paired_clusters {
            // Pair NP i with the next NP of the same type.
            let i = c * 2 * t;
            if i + t < spec.num_nps {
                labels[i + t] = labels[i];
            }
        }
        let kg = OpenKg {
            nps: (0..spec.num_nps).map(|i| format!("np{i}")).collect(),
            rps: (0..spec.num_rps).map(|r| format!("rel{r}")).collect(),
            train,
            valid,
            test,
            clusters: ClusterMap::from_assignment(&labels),
        };
        Ok(ToyKg {
            kg,
            np_types,
            relation_types,
            num_types: t,
        })
    }

    /// Context provider returning the one-hot answer type of each query,
    /// padded with Gaussian noise up to `dim`.
    pub fn type_oracle(&self, dim: usize, noise: f64, seed: u64) -> TypeOracle {
        TypeOracle {
            relation_types: self.relation_types.clone(),
            num_types: self.num_types,
            dim: dim.max(self.num_types),
            noise,
            seed,
        }
    }
}

/// Context vectors that reveal the answer type of a query.
#[derive(Debug, Clone)]
pub struct TypeOracle {
    relation_types: Vec<(usize, usize)>,
    num_types: usize,
    dim: usize,
    noise: f64,
    seed: u64,
}

impl ContextProvider for TypeOracle {
    fn provider_id(&self) -> &str {
        "type-oracle"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn context_vector(&self, _kg: &OpenKg, q: ContextQuery) -> Result<Vec<f32>> {
        let (a, b) = self.relation_types[q.rp as usize];
        let ty = match q.direction {
            Direction::Tail => b,
            Direction::Head => a,
        };
        let key = ((q.direction as u64) << 62) ^ ((q.np as u64) << 31) ^ q.rp as u64;
        let mut rng = rng_stream(self.seed ^ key, Stream::Baseline);
        let normal = Normal::new(0.0, self.noise.max(0.0)).expect("finite noise scale");
        Ok((0..self.dim)
            .map(|i| {
                let base = if i < self.num_types && i == ty { 1.0 } else { 0.0 };
                (base + normal.sample(&mut rng)) as f32
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded_and_valid() {
        let a = ToyKg::generate(&ToySpec::default()).unwrap();
        let b = ToyKg::generate(&ToySpec::default()).unwrap();
        assert_eq!(a.kg.train, b.kg.train);
        a.kg.validate().unwrap();
        assert_eq!(a.kg.num_nps(), 20);
        assert!(a.kg.clusters.num_clusters() < 20);
        for t in a.kg.train.iter().chain(&a.kg.test) {
            let (ha, tb) = a.relation_types[t.rp as usize];
            assert_eq!((a.np_types[t.head as usize], a.np_types[t.tail as usize]), (ha, tb));
        }
    }

    #[test]
    fn oracle_marks_answer_type() {
        let toy = ToyKg::generate(&ToySpec::default()).unwrap();
        let o = toy.type_oracle(5, 0.0, 1);
        let v = o.context_vector(&toy.kg, ContextQuery::tail(0, 1)).unwrap();
        let b = toy.relation_types[1].1;
        assert_eq!(v.len(), 5);
        assert_eq!(v[b], 1.0);
        assert_eq!(v.iter().sum::<f32>(), 1.0);
    }
}
