use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{InitVectors, ModelConfig, NpInit, PhraseVocab, WordInit};
use crate::autodiff::{BatchStats, ConvGeom, Tape, Var};
use crate::dataset::OpenKg;
use crate::error::{Error, Result};
use crate::params::{matrix_shape, ParamId, ParamStore};

/// Lazily places parameters on a tape, once each.
#[derive(Debug, Default)]
pub struct Binder {
    vars: HashMap<ParamId, Var>,
}

impl Binder {
    pub fn new() -> Self {
        Binder::default()
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        *self
            .vars
            .entry(id)
            .or_insert_with(|| tape.param(store.get(id).clone()))
    }

    /// Parameters placed on the tape so far.
    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().map(|(&p, &v)| (p, v))
    }
}

/// Forward-pass mode. Training draws dropout masks from the given stream
/// and normalizes with batch statistics.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Batch statistics to fold into a normalization layer's running estimates.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
}

#[derive(Debug, Clone)]
struct Gru {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    channels: usize,
}

/// Parameter layout and forward computation of the CaRE scorer.
#[derive(Debug, Clone)]
pub struct CareNetwork {
    cfg: ModelConfig,
    np_embedding: ParamId,
    np_projection: Option<(ParamId, ParamId)>,
    word_embedding: ParamId,
    gru_forward: Gru,
    gru_backward: Gru,
    rp_out_w: ParamId,
    rp_out_b: ParamId,
    bn0: Norm,
    conv_w: ParamId,
    conv_b: ParamId,
    bn1: Norm,
    fc_w: ParamId,
    fc_b: ParamId,
    bn2: Norm,
    vocab: PhraseVocab,
    rp_tokens: Vec<Vec<usize>>,
    cluster_mix: Vec<Vec<(usize, f64)>>,
}

fn xavier_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-bound..=bound))
}

fn add_uniform(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dims: &[usize], bound: f64) -> ParamId {
    let v = uniform(rng, matrix_shape(dims), bound);
    store.add(name, dims, v, true)
}

fn add_norm(store: &mut ParamStore, name: &str, channels: usize) -> Norm {
    Norm {
        gamma: store.add(&format!("{name}.weight"), &[channels], Array2::ones((1, channels)), true),
        beta: store.add(&format!("{name}.bias"), &[channels], Array2::zeros((1, channels)), true),
        mean: store.add(&format!("{name}.running_mean"), &[channels], Array2::zeros((1, channels)), false),
        var: store.add(&format!("{name}.running_var"), &[channels], Array2::ones((1, channels)), false),
        channels,
    }
}

fn add_gru(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Gru {
    let k = 1.0 / (hidden as f64).sqrt();
    Gru {
        w_ih: add_uniform(store, rng, &format!("{name}.weight_ih"), &[3 * hidden, input], k),
        w_hh: add_uniform(store, rng, &format!("{name}.weight_hh"), &[3 * hidden, hidden], k),
        b_ih: add_uniform(store, rng, &format!("{name}.bias_ih"), &[3 * hidden], k),
        b_hh: add_uniform(store, rng, &format!("{name}.bias_hh"), &[3 * hidden], k),
    }
}

/// Mixing weights that average each NP's gold cluster.
fn cluster_mix(kg: &OpenKg) -> Vec<Vec<(usize, f64)>> {
    (0..kg.num_nps() as u32)
        .map(|np| {
            let mates = kg.clusters.cluster_mates(np);
            let w = 1.0 / mates.len() as f64;
            mates.iter().map(|&m| (m as usize, w)).collect()
        })
        .collect()
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<f64>() < p { 0.0 } else { keep })
}

impl CareNetwork {
    /// Registers all parameters in `store`, drawing random initial values
    /// from `rng`.
    pub fn build(
        cfg: &ModelConfig,
        kg: &OpenKg,
        vocab: PhraseVocab,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        init: Option<&InitVectors>,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = kg.num_nps();
        let need_init = || init.ok_or_else(|| Error::Config("LM initialization needs init vectors".into()));
        let (np_table, raw_dim) = match cfg.np_init {
            NpInit::Random => (xavier_normal(rng, n, cfg.d_e), cfg.d_e),
            NpInit::Lm | NpInit::LmProjected => {
                let iv = need_init()?;
                if iv.np.nrows() != n {
                    return Err(Error::Dimension {
                        context: "NP init vectors",
                        expected: n,
                        actual: iv.np.nrows(),
                    });
                }
                if cfg.np_init == NpInit::Lm && iv.np.ncols() != cfg.d_e {
                    return Err(Error::Dimension {
                        context: "NP init vectors (d_e)",
                        expected: cfg.d_e,
                        actual: iv.np.ncols(),
                    });
                }
                (iv.np.clone(), iv.np.ncols())
            }
        };
        let np_embedding = store.add("np.embedding", &[n, raw_dim], np_table, true);
        let np_projection = if cfg.np_init == NpInit::LmProjected {
            let k = 1.0 / (raw_dim as f64).sqrt();
            Some((
                add_uniform(store, rng, "np.projection.weight", &[cfg.d_e, raw_dim], k),
                add_uniform(store, rng, "np.projection.bias", &[cfg.d_e], k),
            ))
        } else {
            None
        };
        let words = match cfg.word_init {
            WordInit::Random => xavier_normal(rng, vocab.len(), cfg.d_w),
            WordInit::Lm => {
                let w = need_init()?
                    .word
                    .as_ref()
                    .ok_or_else(|| Error::Config("init vectors lack word rows".into()))?;
                if w.dim() != (vocab.len(), cfg.d_w) {
                    return Err(Error::Invalid(format!(
                        "word init vectors are {:?}, expected ({}, {})",
                        w.dim(),
                        vocab.len(),
                        cfg.d_w
                    )));
                }
                w.clone()
            }
        };
        let word_embedding = store.add("word.embedding", &[vocab.len(), cfg.d_w], words, true);
        let h = cfg.gru_hidden;
        let gru_forward = add_gru(store, rng, "rp.gru.forward", cfg.d_w, h);
        let gru_backward = add_gru(store, rng, "rp.gru.backward", cfg.d_w, h);
        let k = 1.0 / ((2 * h) as f64).sqrt();
        let rp_out_w = add_uniform(store, rng, "rp.output.weight", &[cfg.d_r, 2 * h], k);
        let rp_out_b = add_uniform(store, rng, "rp.output.bias", &[cfg.d_r], k);
        let bn0 = add_norm(store, "conv.bn0", 1);
        let ks = cfg.kernel_size;
        let k = 1.0 / ((ks * ks) as f64).sqrt();
        let conv_w = add_uniform(store, rng, "conv.filter.weight", &[cfg.conv_channels, 1, ks, ks], k);
        let conv_b = add_uniform(store, rng, "conv.filter.bias", &[cfg.conv_channels], k);
        let bn1 = add_norm(store, "conv.bn1", cfg.conv_channels);
        let flat = Self::geom_of(cfg).out_len();
        let k = 1.0 / (flat as f64).sqrt();
        let fc_w = add_uniform(store, rng, "conv.fc.weight", &[cfg.d_e, flat], k);
        let fc_b = add_uniform(store, rng, "conv.fc.bias", &[cfg.d_e], k);
        let bn2 = add_norm(store, "conv.bn2", cfg.d_e);
        let rp_tokens = kg.rps.iter().map(|r| vocab.encode(r)).collect();
        Ok(CareNetwork {
            cfg: cfg.clone(),
            np_embedding,
            np_projection,
            word_embedding,
            gru_forward,
            gru_backward,
            rp_out_w,
            rp_out_b,
            bn0,
            conv_w,
            conv_b,
            bn1,
            fc_w,
            fc_b,
            bn2,
            vocab,
            rp_tokens,
            cluster_mix: cluster_mix(kg),
        })
    }

    fn geom_of(cfg: &ModelConfig) -> ConvGeom {
        ConvGeom {
            in_channels: 1,
            height: cfg.image_height(),
            width: cfg.reshape_width,
            kernel: cfg.kernel_size,
            out_channels: cfg.conv_channels,
        }
    }

    pub fn vocab(&self) -> &PhraseVocab {
        &self.vocab
    }

    pub fn num_nps(&self) -> usize {
        self.cluster_mix.len()
    }

    pub fn num_rps(&self) -> usize {
        self.rp_tokens.len()
    }

    pub fn np_embedding(&self) -> ParamId {
        self.np_embedding
    }

    /// Cluster-mean encodings of every NP, `N × d_e`.
    pub fn encode_all_nps(&self, tape: &mut Tape, b: &mut Binder, store: &ParamStore) -> Var {
        let table = b.var(tape, store, self.np_embedding);
        let mixed = tape.row_mix(table, self.cluster_mix.clone());
        match self.np_projection {
            None => mixed,
            Some((w, bias)) => {
                let w = b.var(tape, store, w);
                let bias = b.var(tape, store, bias);
                let p = tape.matmul_t(mixed, w);
                tape.add_row(p, bias)
            }
        }
    }

    fn gru_step(&self, tape: &mut Tape, b: &mut Binder, store: &ParamStore, g: &Gru, x: Var, h: Var) -> Var {
        let hid = self.cfg.gru_hidden;
        let (w_ih, w_hh) = (b.var(tape, store, g.w_ih), b.var(tape, store, g.w_hh));
        let (b_ih, b_hh) = (b.var(tape, store, g.b_ih), b.var(tape, store, g.b_hh));
        let gi = tape.matmul_t(x, w_ih);
        let gi = tape.add_row(gi, b_ih);
        let gh = tape.matmul_t(h, w_hh);
        let gh = tape.add_row(gh, b_hh);
        let (ir, hr) = (tape.slice_cols(gi, 0, hid), tape.slice_cols(gh, 0, hid));
        let (iz, hz) = (tape.slice_cols(gi, hid, 2 * hid), tape.slice_cols(gh, hid, 2 * hid));
        let (in_, hn) = (tape.slice_cols(gi, 2 * hid, 3 * hid), tape.slice_cols(gh, 2 * hid, 3 * hid));
        let r = tape.add(ir, hr);
        let r = tape.sigmoid(r);
        let z = tape.add(iz, hz);
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, hn);
        let n = tape.add(in_, rn);
        let n = tape.tanh(n);
        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let d = tape.sub(h, n);
        let zd = tape.mul(z, d);
        tape.add(n, zd)
    }

    /// Runs one direction of the GRU over padded sequences; rows whose
    /// sequence has ended keep their state.
    fn run_gru(&self, tape: &mut Tape, b: &mut Binder, store: &ParamStore, g: &Gru, seqs: &[&[usize]], reverse: bool) -> Var {
        let words = b.var(tape, store, self.word_embedding);
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut h = tape.constant(Array2::zeros((seqs.len(), self.cfg.gru_hidden)));
        for t in 0..max_len {
            let ids: Vec<usize> = seqs
                .iter()
                .map(|s| match (t < s.len(), reverse) {
                    (false, _) => 0,
                    (true, false) => s[t],
                    (true, true) => s[s.len() - 1 - t],
                })
                .collect();
            let mask = Array1::from_iter(seqs.iter().map(|s| if t < s.len() { 1.0 } else { 0.0 }));
            let x = tape.gather_rows(words, &ids);
            let cand = self.gru_step(tape, b, store, g, x, h);
            if mask.iter().all(|&m| m == 1.0) {
                h = cand;
            } else {
                let delta = tape.sub(cand, h);
                let delta = tape.mul_rows(delta, mask);
                h = tape.add(h, delta);
            }
        }
        h
    }

    /// Encodings of the given relation ids, `B × d_r`. Each distinct
    /// relation is encoded once.
    pub fn encode_rps(&self, tape: &mut Tape, b: &mut Binder, store: &ParamStore, rps: &[u32]) -> Result<Var> {
        let mut unique: Vec<u32> = rps.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let seqs = unique
            .iter()
            .map(|&r| {
                self.rp_tokens
                    .get(r as usize)
                    .map(Vec::as_slice)
                    .ok_or_else(|| Error::Invalid(format!("RP id {r} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let hf = self.run_gru(tape, b, store, &self.gru_forward, &seqs, false);
        let hb = self.run_gru(tape, b, store, &self.gru_backward, &seqs, true);
        let cat = tape.concat_cols(&[hf, hb]);
        let (w, bias) = (b.var(tape, store, self.rp_out_w), b.var(tape, store, self.rp_out_b));
        let out = tape.matmul_t(cat, w);
        let out = tape.add_row(out, bias);
        let pos: HashMap<u32, usize> = unique.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        let order: Vec<usize> = rps.iter().map(|r| pos[r]).collect();
        Ok(tape.gather_rows(out, &order))
    }

    fn norm(&self, tape: &mut Tape, b: &mut Binder, store: &ParamStore, x: Var, n: &Norm, mode: &Mode, updates: &mut Vec<BnUpdate>) -> Var {
        let (g, bt) = (b.var(tape, store, n.gamma), b.var(tape, store, n.beta));
        if mode.is_train() {
            let (y, stats) = tape.batch_norm(x, g, bt, n.channels, self.cfg.bn_eps);
            updates.push(BnUpdate {
                mean: n.mean,
                var: n.var,
                stats,
            });
            y
        } else {
            let mean = store.get(n.mean).row(0).to_owned();
            let var = store.get(n.var).row(0).to_owned();
            tape.channel_affine(x, g, bt, n.channels, &mean, &var, self.cfg.bn_eps)
        }
    }

    /// The predicted tail vector `t_C` for head encodings `h` (`B × d_e`)
    /// and relation encodings `r` (`B × d_r`).
    #[allow(clippy::too_many_arguments)]
    pub fn predict(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        store: &ParamStore,
        h: Var,
        r: Var,
        mode: &mut Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Var {
        let cfg = &self.cfg;
        let geom = Self::geom_of(cfg);
        let batch = tape.value(h).nrows();
        // Row-major [h | r] is the two reshaped encodings stacked vertically.
        let x = tape.concat_cols(&[h, r]);
        let x = self.norm(tape, b, store, x, &self.bn0, mode, updates);
        let x = match mode {
            Mode::Train(rng) if cfg.input_dropout > 0.0 => {
                let m = dropout_mask(rng, batch, cfg.d_e + cfg.d_r, cfg.input_dropout);
                tape.mul_const(x, m)
            }
            _ => x,
        };
        let (w, cb) = (b.var(tape, store, self.conv_w), b.var(tape, store, self.conv_b));
        let x = tape.conv2d(x, w, geom);
        let x = tape.channel_bias(x, cb, geom.out_channels);
        let x = self.norm(tape, b, store, x, &self.bn1, mode, updates);
        let x = tape.relu(x);
        let x = match mode {
            Mode::Train(rng) if cfg.feature_dropout > 0.0 => {
                // Whole feature maps are dropped together.
                let spatial = geom.out_height() * geom.out_width();
                let ch = dropout_mask(rng, batch, geom.out_channels, cfg.feature_dropout);
                let m = Array2::from_shape_fn((batch, geom.out_len()), |(i, j)| ch[[i, j / spatial]]);
                tape.mul_const(x, m)
            }
            _ => x,
        };
        let (fw, fb) = (b.var(tape, store, self.fc_w), b.var(tape, store, self.fc_b));
        let x = tape.matmul_t(x, fw);
        let x = tape.add_row(x, fb);
        let x = match mode {
            Mode::Train(rng) if cfg.hidden_dropout > 0.0 => {
                let m = dropout_mask(rng, batch, cfg.d_e, cfg.hidden_dropout);
                tape.mul_const(x, m)
            }
            _ => x,
        };
        let x = self.norm(tape, b, store, x, &self.bn2, mode, updates);
        tape.relu(x)
    }
}
