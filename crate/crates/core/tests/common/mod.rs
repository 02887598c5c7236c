#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use okgit::dataset::OpenKg;
use okgit::encoder::{ContextSpec, ModelConfig};
use okgit::lm::{ContextProvider, ContextQuery};
use okgit::model::ContextTable;
use okgit::synthetic::{ToyKg, ToySpec, TypeOracle};
use okgit::training::{TrainConfig, TrainOptions};

pub const ORACLE_DIM: usize = 6;

/// Inverse-augmented toy graph and its type-oracle context table.
pub fn toy(spec: &ToySpec) -> (OpenKg, ContextTable) {
    let (kg, table, _) = toy_with_oracle(spec);
    (kg, table)
}

pub fn toy_with_oracle(spec: &ToySpec) -> (OpenKg, ContextTable, TypeOracle) {
    let toy = ToyKg::generate(spec).unwrap();
    let kg = toy.kg.augment_inverse_relations().unwrap();
    let oracle = toy.type_oracle(ORACLE_DIM, 0.05, 3);
    let table = ContextTable::from_provider(&oracle, &kg, &okgit::dataset::Split::ALL).unwrap();
    assert_eq!(table.provider_id(), oracle.provider_id());
    (kg, table, oracle)
}

/// Context rows for arbitrary `(np, rp)` queries of the augmented graph.
pub fn table_for(kg: &OpenKg, oracle: &TypeOracle, queries: &[(u32, u32)]) -> ContextTable {
    let offset = kg.inverse_offset().unwrap();
    let mut q: Vec<ContextQuery> = queries.iter().map(|&(h, r)| ContextQuery::from_augmented(h, r, offset)).collect();
    q.sort();
    q.dedup();
    ContextTable::from_queries(oracle, kg, &q).unwrap()
}

pub fn oracle_context() -> ContextSpec {
    ContextSpec::Cached {
        provider: "type-oracle".into(),
        dim: ORACLE_DIM,
    }
}

pub fn toy_train_config(context: ContextSpec, epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig::toy(context),
        options: TrainOptions {
            epochs,
            batch_size: 16,
            ..TrainOptions::default()
        },
    }
}
