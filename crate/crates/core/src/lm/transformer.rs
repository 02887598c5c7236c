//! Inference-only transformer encoder with a masked-LM head, loading
//! BERT- or RoBERTa-style checkpoints (`config.json` + `model.safetensors`).

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Ix1, Ix2};
use serde::Deserialize;

use super::bpe::ByteBpe;
use super::safetensors::SafeTensors;
use super::wordpiece::WordPiece;
use super::{ContextProvider, ContextQuery, Prompt, Tokenizer};
use crate::dataset::{read_text, OpenKg, SingleTokenTest};
use crate::error::{Error, Result};

fn default_act() -> String {
    "gelu".into()
}

fn default_eps() -> f64 {
    1e-12
}

#[derive(Debug, Clone, Deserialize)]
pub struct EncoderConfig {
    #[serde(default)]
    pub model_type: String,
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    #[serde(default = "default_act")]
    pub hidden_act: String,
    pub max_position_embeddings: usize,
    #[serde(default)]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub pad_token_id: Option<u32>,
}

impl EncoderConfig {
    fn is_roberta(&self) -> bool {
        matches!(self.model_type.as_str(), "roberta" | "xlm-roberta" | "camembert")
    }

    /// RoBERTa numbers positions from `pad + 1`.
    fn position_offset(&self) -> usize {
        if self.is_roberta() {
            self.pad_token_id.unwrap_or(1) as usize + 1
        } else {
            0
        }
    }

    /// Longest usable input including boundary tokens.
    pub fn max_len(&self) -> usize {
        self.max_position_embeddings - self.position_offset()
    }
}

struct Linear {
    weight: Array2<f32>,
    bias: Array1<f32>,
}

impl Linear {
    fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

struct LayerNorm {
    gamma: Array1<f32>,
    beta: Array1<f32>,
    eps: f32,
}

impl LayerNorm {
    fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f32;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma[i] + self.beta[i];
            }
        }
        out
    }
}

struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    intermediate: Linear,
    output: Linear,
    out_norm: LayerNorm,
}

pub struct TransformerEncoder {
    config: EncoderConfig,
    word: Array2<f32>,
    position: Array2<f32>,
    token_type: Option<Array2<f32>>,
    emb_norm: LayerNorm,
    layers: Vec<Layer>,
    head_dense: Linear,
    head_norm: LayerNorm,
    decoder: Array2<f32>,
    decoder_bias: Array1<f32>,
}

struct Weights<'a> {
    st: &'a SafeTensors,
    prefix: String,
}

impl Weights<'_> {
    fn get(&self, names: &[String]) -> Result<ndarray::ArrayD<f32>> {
        for n in names {
            if self.st.contains(n) {
                return self.st.tensor(n);
            }
        }
        Err(Error::Lm(format!("missing weight {}", names[0])))
    }

    fn mat(&self, name: &str) -> Result<Array2<f32>> {
        self.get(&[format!("{}{name}", self.prefix), name.to_string()])?
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Lm(format!("{name}: {e}")))
    }

    fn vec(&self, name: &str) -> Result<Array1<f32>> {
        self.get(&[format!("{}{name}", self.prefix), name.to_string()])?
            .into_dimensionality::<Ix1>()
            .map_err(|e| Error::Lm(format!("{name}: {e}")))
    }

    fn linear(&self, name: &str) -> Result<Linear> {
        Ok(Linear {
            weight: self.mat(&format!("{name}.weight"))?,
            bias: self.vec(&format!("{name}.bias"))?,
        })
    }

    fn norm(&self, name: &str, eps: f64) -> Result<LayerNorm> {
        let pick = |a: &str, b: &str| {
            let first = format!("{name}.{a}");
            if self.st.contains(&format!("{}{first}", self.prefix)) || self.st.contains(&first) {
                self.vec(&first)
            } else {
                self.vec(&format!("{name}.{b}"))
            }
        };
        Ok(LayerNorm {
            gamma: pick("weight", "gamma")?,
            beta: pick("bias", "beta")?,
            eps: eps as f32,
        })
    }
}

impl TransformerEncoder {
    pub fn from_safetensors(config: EncoderConfig, st: &SafeTensors) -> Result<Self> {
        let base = if config.is_roberta() { "roberta." } else { "bert." };
        let prefix = if st.names().any(|n| n.starts_with(base)) {
            base.to_string()
        } else {
            String::new()
        };
        let w = Weights { st, prefix };
        let eps = config.layer_norm_eps;
        let mut layers = Vec::with_capacity(config.num_hidden_layers);
        for i in 0..config.num_hidden_layers {
            let p = format!("encoder.layer.{i}");
            layers.push(Layer {
                query: w.linear(&format!("{p}.attention.self.query"))?,
                key: w.linear(&format!("{p}.attention.self.key"))?,
                value: w.linear(&format!("{p}.attention.self.value"))?,
                attn_out: w.linear(&format!("{p}.attention.output.dense"))?,
                attn_norm: w.norm(&format!("{p}.attention.output.LayerNorm"), eps)?,
                intermediate: w.linear(&format!("{p}.intermediate.dense"))?,
                output: w.linear(&format!("{p}.output.dense"))?,
                out_norm: w.norm(&format!("{p}.output.LayerNorm"), eps)?,
            });
        }
        let word = w.mat("embeddings.word_embeddings.weight")?;
        let token_type = if st.contains(&format!("{}embeddings.token_type_embeddings.weight", w.prefix))
            || st.contains("embeddings.token_type_embeddings.weight")
        {
            Some(w.mat("embeddings.token_type_embeddings.weight")?)
        } else {
            None
        };
        let head = Weights {
            st,
            prefix: String::new(),
        };
        let (dense, norm, decoder, bias) = if config.is_roberta() {
            ("lm_head.dense", "lm_head.layer_norm", "lm_head.decoder", "lm_head.bias")
        } else {
            (
                "cls.predictions.transform.dense",
                "cls.predictions.transform.LayerNorm",
                "cls.predictions.decoder",
                "cls.predictions.bias",
            )
        };
        let decoder_weight = if st.contains(&format!("{decoder}.weight")) {
            head.mat(&format!("{decoder}.weight"))?
        } else {
            word.clone()
        };
        let decoder_bias = if st.contains(bias) {
            head.vec(bias)?
        } else {
            head.vec(&format!("{decoder}.bias"))?
        };
        let enc = TransformerEncoder {
            position: w.mat("embeddings.position_embeddings.weight")?,
            emb_norm: w.norm("embeddings.LayerNorm", eps)?,
            head_dense: head.linear(dense)?,
            head_norm: head.norm(norm, eps)?,
            decoder: decoder_weight,
            decoder_bias,
            token_type,
            word,
            layers,
            config,
        };
        if enc.word.dim() != (enc.config.vocab_size, enc.config.hidden_size) {
            return Err(Error::Lm("word embedding shape disagrees with config".into()));
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    fn activation(&self, x: f32) -> f32 {
        match self.config.hidden_act.as_str() {
            "gelu_new" | "gelu_pytorch_tanh" | "gelu_fast" => {
                let c = (2.0f32 / std::f32::consts::PI).sqrt();
                0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
            }
            "relu" => x.max(0.0),
            _ => 0.5 * x * (1.0 + statrs::function::erf::erf(x as f64 / std::f64::consts::SQRT_2) as f32),
        }
    }

    /// Final-layer hidden states, one row per input token.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<Array2<f32>> {
        let len = ids.len();
        let offset = self.config.position_offset();
        if len + offset > self.config.max_position_embeddings {
            return Err(Error::Lm(format!("input of {len} tokens exceeds model limit")));
        }
        let h = self.config.hidden_size;
        let mut x = Array2::<f32>::zeros((len, h));
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= self.config.vocab_size {
                return Err(Error::Lm(format!("token id {id} out of vocabulary")));
            }
            let mut row = x.row_mut(i);
            row += &self.word.row(id);
            row += &self.position.row(i + offset);
            if let Some(tt) = &self.token_type {
                row += &tt.row(0);
            }
        }
        let mut x = self.emb_norm.forward(&x);
        let heads = self.config.num_attention_heads;
        let dh = h / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        for layer in &self.layers {
            let q = layer.query.forward(&x);
            let k = layer.key.forward(&x);
            let v = layer.value.forward(&x);
            let mut ctx = Array2::<f32>::zeros((len, h));
            for head in 0..heads {
                let cols = s![.., head * dh..(head + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                for mut row in scores.rows_mut() {
                    let max = row.fold(f32::NEG_INFINITY, |m, &v| m.max(v));
                    row.mapv_inplace(|v| (v - max).exp());
                    let sum = row.sum();
                    row /= sum;
                }
                ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            }
            let attn = layer.attn_out.forward(&ctx) + &x;
            let attn = layer.attn_norm.forward(&attn);
            let inter = layer.intermediate.forward(&attn).mapv(|v| self.activation(v));
            let out = layer.output.forward(&inter) + &attn;
            x = layer.out_norm.forward(&out);
        }
        Ok(x)
    }

    /// Vocabulary logits of the masked-LM head for one hidden state.
    pub fn mlm_logits(&self, hidden: ArrayView1<f32>) -> Array1<f32> {
        let x = hidden.insert_axis(Axis(0)).to_owned();
        let t = self.head_dense.forward(&x).mapv(|v| self.activation(v));
        let t = self.head_norm.forward(&t);
        self.decoder.dot(&t.row(0)) + &self.decoder_bias
    }
}

/// A tokenizer and encoder loaded from one model directory.
pub struct MaskedLanguageModel {
    provider_id: String,
    tokenizer: Box<dyn Tokenizer>,
    encoder: TransformerEncoder,
}

impl MaskedLanguageModel {
    /// Loads `config.json`, `model.safetensors` and either `vocab.txt`
    /// (WordPiece) or `vocab.json` + `merges.txt` (byte-level BPE).
    pub fn load(dir: &Path, provider_id: &str) -> Result<Self> {
        let config: EncoderConfig = serde_json::from_str(&read_text(&dir.join("config.json"))?)?;
        let weights_path = dir.join("model.safetensors");
        if !weights_path.exists() {
            return Err(Error::MissingFile(weights_path));
        }
        let st = SafeTensors::open(&weights_path)?;
        let tokenizer: Box<dyn Tokenizer> = if config.is_roberta() {
            Box::new(ByteBpe::from_files(&dir.join("vocab.json"), &dir.join("merges.txt"))?)
        } else {
            let lowercase = std::fs::read_to_string(dir.join("tokenizer_config.json"))
                .ok()
                .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
                .and_then(|v| v.get("do_lower_case").and_then(|b| b.as_bool()))
                .unwrap_or(true);
            Box::new(WordPiece::from_vocab_file(&dir.join("vocab.txt"), lowercase)?)
        };
        let encoder = TransformerEncoder::from_safetensors(config, &st)?;
        Ok(MaskedLanguageModel {
            provider_id: provider_id.to_string(),
            tokenizer,
            encoder,
        })
    }

    pub fn from_parts(provider_id: &str, tokenizer: Box<dyn Tokenizer>, encoder: TransformerEncoder) -> Self {
        MaskedLanguageModel {
            provider_id: provider_id.to_string(),
            tokenizer,
            encoder,
        }
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn encoder(&self) -> &TransformerEncoder {
        &self.encoder
    }

    pub fn prompt_ids(&self, prompt: &Prompt) -> (Vec<u32>, usize) {
        prompt.token_ids(self.tokenizer.as_ref(), self.encoder.config.max_len())
    }

    /// Final hidden state at the mask position.
    pub fn mask_vector(&self, prompt: &Prompt) -> Result<Vec<f32>> {
        let (ids, pos) = self.prompt_ids(prompt);
        Ok(self.encoder.hidden_states(&ids)?.row(pos).to_vec())
    }

    /// Top-`k` vocabulary entries by masked-LM score at the mask, best
    /// first; equal scores keep ascending vocabulary order. `k` is clamped
    /// to the vocabulary size.
    pub fn predict_mask(&self, prompt: &Prompt, k: usize) -> Result<Vec<(u32, String, f32)>> {
        let logits = self.mask_logits(prompt)?;
        Ok(top_k(&logits, k)
            .into_iter()
            .map(|(id, score)| (id, self.tokenizer.surface(id), score))
            .collect())
    }

    /// Full vocabulary scores at the mask.
    pub fn mask_logits(&self, prompt: &Prompt) -> Result<Array1<f32>> {
        let (ids, pos) = self.prompt_ids(prompt);
        let hidden = self.encoder.hidden_states(&ids)?;
        Ok(self.encoder.mlm_logits(hidden.row(pos)))
    }

    /// Hidden state of the leading boundary token for a lone phrase.
    pub fn phrase_vector(&self, phrase: &str) -> Result<Vec<f32>> {
        let tok = self.tokenizer.as_ref();
        let mut ids = vec![tok.bos()];
        let mut body = tok.encode(&phrase.trim().to_lowercase(), false);
        body.truncate(self.encoder.config.max_len() - 2);
        ids.extend(body);
        ids.push(tok.eos());
        Ok(self.encoder.hidden_states(&ids)?.row(0).to_vec())
    }

    /// Vocabulary id of a phrase that is exactly one token.
    pub fn single_token_id(&self, phrase: &str) -> Option<u32> {
        let ids = self.tokenizer.encode(&phrase.trim().to_lowercase(), true);
        (ids.len() == 1 && ids[0] != self.tokenizer.unk()).then(|| ids[0])
    }
}

impl SingleTokenTest for MaskedLanguageModel {
    fn is_single_token(&self, phrase: &str) -> bool {
        self.single_token_id(phrase).is_some()
    }
}

impl ContextProvider for MaskedLanguageModel {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dim(&self) -> usize {
        self.encoder.hidden_size()
    }

    fn context_vector(&self, kg: &OpenKg, q: ContextQuery) -> Result<Vec<f32>> {
        self.mask_vector(&Prompt::for_query(kg, q)?)
    }
}

/// Indices of the `k` largest scores, ties broken by ascending index.
pub(crate) fn top_k(scores: &Array1<f32>, k: usize) -> Vec<(u32, f32)> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    order.sort_by(|&a, &b| {
        scores[b as usize]
            .total_cmp(&scores[a as usize])
            .then(a.cmp(&b))
    });
    order.truncate(k.min(scores.len()));
    order.into_iter().map(|i| (i, scores[i as usize])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_breaks_ties_by_index_and_clamps() {
        let s = Array1::from(vec![0.5f32, 0.9, 0.9, 0.1]);
        assert_eq!(top_k(&s, 1), vec![(1, 0.9)]);
        assert_eq!(
            top_k(&s, 10).iter().map(|p| p.0).collect::<Vec<_>>(),
            vec![1, 2, 0, 3]
        );
    }
}
