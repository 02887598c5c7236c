//! The full scorer: CaRE encoders plus the optional type head, with
//! checkpoint I/O and context-vector lookup.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::{read_text, OpenKg, Split};
use crate::encoder::{Binder, BnUpdate, CareNetwork, ContextSpec, InitVectors, Mode, ModelConfig, NpInit, PhraseVocab, WordInit};
use crate::error::{Error, Result};
use crate::lm::{required_queries, ContextProvider, ContextQuery, ContextVectorCache};
use crate::params::ParamStore;
use crate::training::TrainOptions;
use crate::typecomp::{ScoreBundle, TypeHead};

/// Independent random streams derived from one seed, so that adding the
/// type head never changes the encoder's initialization or dropout masks.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Encoder = 0,
    TypeHead = 1,
    Training = 2,
    Baseline = 3,
}

pub fn rng_stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Context vectors for a fixed set of queries, held as `f64` rows.
#[derive(Debug, Clone)]
pub struct ContextTable {
    provider_id: String,
    offset: usize,
    index: HashMap<ContextQuery, usize>,
    rows: Array2<f64>,
}

impl ContextTable {
    /// Builds the table row by row; `f` yields the vector of each query.
    pub fn from_fn(
        kg: &OpenKg,
        queries: &[ContextQuery],
        dim: usize,
        provider_id: &str,
        mut f: impl FnMut(ContextQuery) -> Result<Vec<f32>>,
    ) -> Result<Self> {
        let offset = kg
            .inverse_offset()
            .ok_or_else(|| Error::Invalid("knowledge graph lacks inverse relations".into()))?;
        let mut rows = Array2::zeros((queries.len(), dim));
        let mut index = HashMap::with_capacity(queries.len());
        for (i, &q) in queries.iter().enumerate() {
            let v = f(q)?;
            if v.len() != dim {
                return Err(Error::Dimension {
                    context: "context vector",
                    expected: dim,
                    actual: v.len(),
                });
            }
            rows.row_mut(i).iter_mut().zip(&v).for_each(|(r, &x)| *r = f64::from(x));
            index.insert(q, i);
        }
        Ok(ContextTable {
            provider_id: provider_id.to_string(),
            offset,
            index,
            rows,
        })
    }

    /// Loads every query of `splits` from a cache, failing with the list of
    /// absent queries.
    pub fn from_cache(cache: &ContextVectorCache, kg: &OpenKg, splits: &[Split]) -> Result<Self> {
        Self::from_cache_queries(cache, kg, &required_queries(kg, splits)?)
    }

    /// Loads the given queries from a cache, failing with the list of absent
    /// queries.
    pub fn from_cache_queries(cache: &ContextVectorCache, kg: &OpenKg, queries: &[ContextQuery]) -> Result<Self> {
        let missing = cache.missing(queries);
        if !missing.is_empty() {
            let shown: Vec<String> = missing.iter().take(5).map(|q| q.to_string()).collect();
            return Err(Error::MissingContext(format!(
                "{} queries absent from {}: {}{}",
                missing.len(),
                cache.path().display(),
                shown.join(", "),
                if missing.len() > 5 { ", ..." } else { "" }
            )));
        }
        Self::from_fn(kg, queries, cache.dim(), cache.provider_id(), |q| {
            Ok(cache.get(&q).expect("checked above").to_vec())
        })
    }

    /// Computes the given queries with `provider` directly.
    pub fn from_queries(provider: &dyn ContextProvider, kg: &OpenKg, queries: &[ContextQuery]) -> Result<Self> {
        Self::from_fn(kg, queries, provider.dim(), provider.provider_id(), |q| provider.context_vector(kg, q))
    }

    /// Computes every query of `splits` with `provider` directly.
    pub fn from_provider(provider: &dyn ContextProvider, kg: &OpenKg, splits: &[Split]) -> Result<Self> {
        let queries = required_queries(kg, splits)?;
        Self::from_fn(kg, &queries, provider.dim(), provider.provider_id(), |q| provider.context_vector(kg, q))
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Context rows for `(head, relation)` queries of the augmented KG.
    pub fn rows_for(&self, queries: &[(u32, u32)]) -> Result<Array2<f64>> {
        let mut idx = Vec::with_capacity(queries.len());
        let mut missing = BTreeSet::new();
        for &(h, r) in queries {
            let q = ContextQuery::from_augmented(h, r, self.offset);
            match self.index.get(&q) {
                Some(&i) => idx.push(i),
                None => {
                    missing.insert(q);
                }
            }
        }
        if !missing.is_empty() {
            let shown: Vec<String> = missing.iter().take(5).map(|q| q.to_string()).collect();
            return Err(Error::MissingContext(format!(
                "{} queries missing from the `{}` table: {}{}",
                missing.len(),
                self.provider_id,
                shown.join(", "),
                if missing.len() > 5 { ", ..." } else { "" }
            )));
        }
        Ok(self.rows.select(ndarray::Axis(0), &idx))
    }
}

/// Contents of a checkpoint's `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub training: Option<TrainOptions>,
    pub num_nps: usize,
    pub num_rps: usize,
    pub words: Vec<String>,
}

/// Output of one forward pass over a batch of queries.
pub struct BatchOutput {
    pub binder: Binder,
    /// `B × N` dot-product scores.
    pub psi_pred: Var,
    /// `B × N` type scores, when the model has a type head.
    pub psi_type: Option<Var>,
    /// `B × N` combined scores.
    pub psi: Var,
    pub updates: Vec<BnUpdate>,
}

/// Score matrices for a batch of queries (rows) against all NPs (columns).
#[derive(Debug, Clone)]
pub struct ScoreMatrices {
    pub pred: Array2<f64>,
    pub type_: Option<Array2<f64>>,
    pub okgit: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct OkgitModel {
    config: ModelConfig,
    params: ParamStore,
    net: CareNetwork,
    head: Option<TypeHead>,
}

impl OkgitModel {
    /// Builds a freshly initialized model for `kg` (which must already carry
    /// inverse relations if head prediction is wanted).
    pub fn new(config: &ModelConfig, kg: &OpenKg, init: Option<&InitVectors>) -> Result<Self> {
        let vocab = PhraseVocab::from_kg(kg);
        Self::build(config, kg, vocab, init)
    }

    fn build(config: &ModelConfig, kg: &OpenKg, vocab: PhraseVocab, init: Option<&InitVectors>) -> Result<Self> {
        let loaded;
        let init = match (init, &config.init_vectors) {
            (Some(i), _) => Some(i),
            (None, Some(path)) if config.np_init != NpInit::Random || config.word_init != WordInit::Random => {
                loaded = InitVectors::load(path)?;
                Some(&loaded)
            }
            _ => None,
        };
        let mut params = ParamStore::new();
        let mut enc_rng = rng_stream(config.seed, Stream::Encoder);
        let net = CareNetwork::build(config, kg, vocab, &mut params, &mut enc_rng, init)?;
        let head = match config.context_dim() {
            None => None,
            Some(d_b) => {
                let mut rng = rng_stream(config.seed, Stream::TypeHead);
                Some(TypeHead::build(
                    &mut params,
                    &mut rng,
                    config.d_e,
                    d_b,
                    config.type_dim,
                    config.type_score_variant,
                ))
            }
        };
        Ok(OkgitModel {
            config: config.clone(),
            params,
            net,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn network(&self) -> &CareNetwork {
        &self.net
    }

    pub fn type_head(&self) -> Option<&TypeHead> {
        self.head.as_ref()
    }

    pub fn num_nps(&self) -> usize {
        self.net.num_nps()
    }

    /// Sets `γ`, the weight of the type score at scoring time.
    pub fn set_gamma(&mut self, gamma: f64) {
        self.config.gamma = gamma;
    }

    /// Forward pass for `(head, relation)` queries against every NP.
    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: &[(u32, u32)],
        context: Option<&ContextTable>,
        mode: &mut Mode,
    ) -> Result<BatchOutput> {
        let n = self.num_nps();
        let mut b = Binder::new();
        let mut updates = Vec::new();
        let heads = queries
            .iter()
            .map(|&(h, _)| {
                if (h as usize) < n {
                    Ok(h as usize)
                } else {
                    Err(Error::Invalid(format!("NP id {h} out of range")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let rps: Vec<u32> = queries.iter().map(|q| q.1).collect();
        let nps = self.net.encode_all_nps(tape, &mut b, &self.params);
        let h = tape.gather_rows(nps, &heads);
        let r = self.net.encode_rps(tape, &mut b, &self.params, &rps)?;
        let t_c = self.net.predict(tape, &mut b, &self.params, h, r, mode, &mut updates);
        let psi_pred = tape.matmul_t(t_c, nps);
        let (psi_type, psi) = match &self.head {
            None => (None, psi_pred),
            Some(head) => {
                let ctx = match &self.config.context {
                    ContextSpec::Cached { provider, dim } => {
                        let table = context.ok_or_else(|| {
                            Error::MissingContext(format!("a context table from `{provider}` is required"))
                        })?;
                        if table.provider_id() != provider {
                            return Err(Error::Cache(format!(
                                "model expects context from `{provider}`, table holds `{}`",
                                table.provider_id()
                            )));
                        }
                        if table.dim() != *dim {
                            return Err(Error::Dimension {
                                context: "context vectors",
                                expected: *dim,
                                actual: table.dim(),
                            });
                        }
                        tape.constant(table.rows_for(queries)?)
                    }
                    ContextSpec::Concat => tape.concat_cols(&[h, r]),
                    ContextSpec::Add => tape.add(h, r),
                    ContextSpec::None => unreachable!("no type head without context"),
                };
                let ty = head.scores(tape, &mut b, &self.params, ctx, nps);
                let scaled = tape.scale(ty, self.config.gamma);
                (Some(ty), tape.add(psi_pred, scaled))
            }
        };
        Ok(BatchOutput {
            binder: b,
            psi_pred,
            psi_type,
            psi,
            updates,
        })
    }

    /// Evaluation-mode scores of `queries` against all NPs.
    pub fn score_queries(&self, queries: &[(u32, u32)], context: Option<&ContextTable>) -> Result<ScoreMatrices> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, queries, context, &mut Mode::Eval)?;
        Ok(ScoreMatrices {
            pred: tape.value(out.psi_pred).clone(),
            type_: out.psi_type.map(|v| tape.value(v).clone()),
            okgit: tape.value(out.psi).clone(),
        })
    }

    /// Folds training-batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        let m = self.config.bn_momentum;
        for u in updates {
            let mean = self.params.get_mut(u.mean);
            mean.iter_mut()
                .zip(u.stats.mean.iter())
                .for_each(|(r, s)| *r = (1.0 - m) * *r + m * s);
            let var = self.params.get_mut(u.var);
            var.iter_mut()
                .zip(u.stats.var.iter())
                .for_each(|(r, s)| *r = (1.0 - m) * *r + m * s);
        }
    }

    /// Every NP encoding, `N × d_e`.
    pub fn np_encodings(&self) -> Array2<f64> {
        let mut tape = Tape::new();
        let mut b = Binder::new();
        let v = self.net.encode_all_nps(&mut tape, &mut b, &self.params);
        tape.value(v).clone()
    }

    /// Cluster-mean encoding of one NP.
    pub fn encode_np(&self, np: u32) -> Result<Vec<f64>> {
        let all = self.np_encodings();
        if np as usize >= all.nrows() {
            return Err(Error::Invalid(format!("NP id {np} out of range")));
        }
        Ok(all.row(np as usize).to_vec())
    }

    /// Phrase-encoder output of one relation.
    pub fn encode_rp(&self, rp: u32) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut b = Binder::new();
        let v = self.net.encode_rps(&mut tape, &mut b, &self.params, &[rp])?;
        Ok(tape.value(v).row(0).to_vec())
    }

    /// Evaluation-mode predicted tail vector `t_C`.
    pub fn predict_tail_vector(&self, h: u32, r: u32) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut b = Binder::new();
        let nps = self.net.encode_all_nps(&mut tape, &mut b, &self.params);
        if h as usize >= self.num_nps() {
            return Err(Error::Invalid(format!("NP id {h} out of range")));
        }
        let hv = tape.gather_rows(nps, &[h as usize]);
        let rv = self.net.encode_rps(&mut tape, &mut b, &self.params, &[r])?;
        let t = self.net.predict(&mut tape, &mut b, &self.params, hv, rv, &mut Mode::Eval, &mut Vec::new());
        Ok(tape.value(t).row(0).to_vec())
    }

    /// `t_C · encode_np(t)`.
    pub fn score_pred(&self, t_c: &[f64], t: u32) -> Result<f64> {
        let e = self.encode_np(t)?;
        if e.len() != t_c.len() {
            return Err(Error::Dimension {
                context: "predicted tail vector",
                expected: e.len(),
                actual: t_c.len(),
            });
        }
        Ok(t_c.iter().zip(&e).map(|(a, b)| a * b).sum())
    }

    /// Type-space vector `P · encode_np(np)` of every NP, `N × d_τ`.
    pub fn np_type_vectors(&self) -> Result<Array2<f64>> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::Invalid("model has no type projector".into()))?;
        Ok(self.np_encodings().dot(&self.params.get(head.p).t()))
    }

    /// All three scores of the triple `(h, r, t)`.
    pub fn combined_score(&self, h: u32, r: u32, t: u32, context: Option<&ContextTable>) -> Result<ScoreBundle> {
        if t as usize >= self.num_nps() {
            return Err(Error::Invalid(format!("NP id {t} out of range")));
        }
        let s = self.score_queries(&[(h, r)], context)?;
        let pred = s.pred[[0, t as usize]];
        let ty = s.type_.map(|m| m[[0, t as usize]]).unwrap_or(0.0);
        Ok(ScoreBundle {
            psi_pred: pred,
            psi_type: ty,
            psi_okgit: s.okgit[[0, t as usize]],
        })
    }

    /// Writes `config.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path, training: Option<&TrainOptions>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = CheckpointConfig {
            model: self.config.clone(),
            training: training.cloned(),
            num_nps: self.num_nps(),
            num_rps: self.net.num_rps(),
            words: self.net.vocab().words().to_vec(),
        };
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&cfg)? + "\n").map_err(|e| Error::io(&path, e))?;
        self.params.save(&dir.join("params.bin"))
    }

    pub fn read_config(dir: &Path) -> Result<CheckpointConfig> {
        Ok(serde_json::from_str(&read_text(&dir.join("config.json"))?)?)
    }

    /// Restores a checkpoint written by [`OkgitModel::save`] for `kg`.
    pub fn load(dir: &Path, kg: &OpenKg) -> Result<(Self, CheckpointConfig)> {
        let cfg = Self::read_config(dir)?;
        if cfg.num_nps != kg.num_nps() || cfg.num_rps != kg.num_rps() {
            return Err(Error::Invalid(format!(
                "checkpoint was trained on {} NPs / {} RPs, dataset has {} / {}",
                cfg.num_nps,
                cfg.num_rps,
                kg.num_nps(),
                kg.num_rps()
            )));
        }
        let params_path = dir.join("params.bin");
        // LM-initialized tables take their shapes from the stored records.
        let init = if cfg.model.np_init != NpInit::Random || cfg.model.word_init != WordInit::Random {
            let bytes = std::fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
            let records = ParamStore::read_records(&mut bytes.as_slice()).map_err(|e| Error::io(&params_path, e))?;
            let table = |name: &str| {
                records.iter().find(|r| r.0 == name).map(|(_, dims, _)| Array2::zeros((dims[0], dims[1])))
            };
            Some(InitVectors {
                np: table("np.embedding").ok_or_else(|| Error::Invalid("params.bin lacks np.embedding".into()))?,
                word: table("word.embedding"),
            })
        } else {
            None
        };
        let vocab = PhraseVocab::from_words(cfg.words.clone())?;
        let mut model = Self::build(&cfg.model, kg, vocab, init.as_ref())?;
        model.params.load_values(&params_path)?;
        Ok((model, cfg))
    }
}
