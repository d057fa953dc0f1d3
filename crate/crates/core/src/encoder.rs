//! Dual-channel sentence encoding.
//!
//! The backbone is a BERT-architecture transformer: either a pretrained
//! checkpoint loaded from disk or a small randomly initialized instance for
//! desk-scale runs. Its word-level output is the BERT channel; the same
//! features run through a BiLSTM and one multi-head self-attention layer to
//! form the LSTM channel.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Result, Tensor};
use candle_nn::{Embedding, Linear, Module};
use serde::{Deserialize, Serialize};

use crate::config::{EncoderConfig, WordPooling};
use crate::params::{
    embedding, linear, linear_with, masked_softmax, ForwardCtx, Init, LayerNorm, ParamStore,
    Scope,
};
use crate::tokenizer::{Encoded, Vocab};

/// Hyperparameters of a BERT-shaped transformer. Reads the subset of a
/// Hugging Face `config.json` it needs and ignores the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_type_vocab() -> usize {
    2
}

fn default_ln_eps() -> f64 {
    1e-12
}

impl TransformerConfig {
    pub fn toy(cfg: &EncoderConfig, vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            hidden_size: cfg.hidden_bert,
            num_hidden_layers: cfg.toy.layers,
            num_attention_heads: cfg.toy.heads,
            intermediate_size: cfg.toy.intermediate,
            max_position_embeddings: cfg.toy.max_positions,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
        }
    }
}

/// Splits `(B, N, H*d)` into heads and returns `(B, H, N, d)`.
fn split_heads(xs: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = xs.dims3()?;
    xs.reshape((b, n, heads, d / heads))?
        .transpose(1, 2)?
        .contiguous()
}

fn merge_heads(xs: &Tensor) -> Result<Tensor> {
    let (b, h, n, d) = xs.dims4()?;
    xs.transpose(1, 2)?.contiguous()?.reshape((b, n, h * d))
}

/// Scaled dot-product attention probabilities per head, `(B, H, N, N)`.
/// Padded keys get exactly zero weight and padded query rows are all zero.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize, mask: &Tensor) -> Result<Tensor> {
    let (b, n, d) = q.dims3()?;
    let scale = 1.0 / ((d / heads) as f64).sqrt();
    let q = split_heads(q, heads)?;
    let k = split_heads(k, heads)?;
    let scores = (q.matmul(&k.t()?)? * scale)?;
    let key_mask = mask.reshape((b, 1, 1, n))?;
    let query_mask = mask.reshape((b, 1, n, 1))?;
    masked_softmax(&scores, &key_mask)?.broadcast_mul(&query_mask)
}

struct TransformerLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    intermediate: Linear,
    output: Linear,
    out_norm: LayerNorm,
    heads: usize,
}

impl TransformerLayer {
    fn new(scope: &Scope, cfg: &TransformerConfig) -> Result<Self> {
        let h = cfg.hidden_size;
        let init = Init::Normal(0.02);
        let attn = scope.pp("attention");
        Ok(TransformerLayer {
            query: linear_with(&attn.pp("self").pp("query"), h, h, true, init)?,
            key: linear_with(&attn.pp("self").pp("key"), h, h, true, init)?,
            value: linear_with(&attn.pp("self").pp("value"), h, h, true, init)?,
            attn_out: linear_with(&attn.pp("output").pp("dense"), h, h, true, init)?,
            attn_norm: LayerNorm::new(&attn.pp("output").pp("LayerNorm"), h, cfg.layer_norm_eps)?,
            intermediate: linear_with(
                &scope.pp("intermediate").pp("dense"),
                h,
                cfg.intermediate_size,
                true,
                init,
            )?,
            output: linear_with(
                &scope.pp("output").pp("dense"),
                cfg.intermediate_size,
                h,
                true,
                init,
            )?,
            out_norm: LayerNorm::new(&scope.pp("output").pp("LayerNorm"), h, cfg.layer_norm_eps)?,
            heads: cfg.num_attention_heads,
        })
    }

    fn forward(&self, xs: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, n, _) = xs.dims3()?;
        let q = self.query.forward(xs)?;
        let k = self.key.forward(xs)?;
        let v = split_heads(&self.value.forward(xs)?, self.heads)?;
        // padded query rows still attend so hidden states stay finite
        let d = q.dim(2)? / self.heads;
        let scores = (split_heads(&q, self.heads)?.matmul(&split_heads(&k, self.heads)?.t()?)?
            * (1.0 / (d as f64).sqrt()))?;
        let probs = masked_softmax(&scores, &mask.reshape((b, 1, 1, n))?)?;
        let ctx = merge_heads(&probs.matmul(&v)?)?;
        let xs = self.attn_norm.forward(&(xs + self.attn_out.forward(&ctx)?)?)?;
        let ff = self
            .output
            .forward(&self.intermediate.forward(&xs)?.gelu_erf()?)?;
        self.out_norm.forward(&(xs + ff)?)
    }
}

/// BERT-architecture encoder. Parameter names follow the Hugging Face layout
/// so pretrained weights load by name.
pub struct Transformer {
    config: TransformerConfig,
    word_embeddings: Embedding,
    position_embeddings: Embedding,
    token_type_embeddings: Embedding,
    embed_norm: LayerNorm,
    layers: Vec<TransformerLayer>,
}

impl Transformer {
    pub fn new(scope: &Scope, config: TransformerConfig) -> Result<Self> {
        let emb = scope.pp("embeddings");
        let h = config.hidden_size;
        let init = Init::Normal(0.02);
        let layers = (0..config.num_hidden_layers)
            .map(|i| TransformerLayer::new(&scope.pp("encoder").pp("layer").pp(i), &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Transformer {
            word_embeddings: embedding(&emb.pp("word_embeddings"), config.vocab_size, h, init)?,
            position_embeddings: embedding(
                &emb.pp("position_embeddings"),
                config.max_position_embeddings,
                h,
                init,
            )?,
            token_type_embeddings: embedding(
                &emb.pp("token_type_embeddings"),
                config.type_vocab_size,
                h,
                init,
            )?,
            embed_norm: LayerNorm::new(&emb.pp("LayerNorm"), h, config.layer_norm_eps)?,
            layers,
            config,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// `ids` is `(B, T)` u32, `mask` `(B, T)` with 1 on real subtokens.
    /// Returns `(B, T, hidden)`.
    pub fn forward(&self, ids: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let positions = Tensor::arange(0u32, t as u32, ids.device())?;
        let pos = self.position_embeddings.forward(&positions)?.unsqueeze(0)?;
        let types = self
            .token_type_embeddings
            .forward(&Tensor::zeros((b, t), DType::U32, ids.device())?)?;
        let mut xs = self
            .word_embeddings
            .forward(ids)?
            .broadcast_add(&pos)?
            .add(&types)?;
        xs = self.embed_norm.forward(&xs)?;
        for layer in &self.layers {
            xs = layer.forward(&xs, mask)?;
        }
        Ok(xs)
    }
}

/// Files of a pretrained backbone directory.
pub struct PretrainedFiles {
    pub config: TransformerConfig,
    pub vocab: Vocab,
    pub weights: std::path::PathBuf,
}

impl PretrainedFiles {
    pub fn open(dir: &Path) -> std::result::Result<Self, String> {
        let cfg_path = dir.join("config.json");
        let text = fs::read_to_string(&cfg_path).map_err(|e| format!("{}: {e}", cfg_path.display()))?;
        let config: TransformerConfig =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", cfg_path.display()))?;
        let lowercase = fs::read_to_string(dir.join("tokenizer_config.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| v.get("do_lower_case").and_then(|b| b.as_bool()))
            .unwrap_or(true);
        let vocab =
            Vocab::from_file(&dir.join("vocab.txt"), lowercase).map_err(|e| e.to_string())?;
        let weights = dir.join("model.safetensors");
        if !weights.exists() {
            return Err(format!("{} not found", weights.display()));
        }
        Ok(PretrainedFiles {
            config,
            vocab,
            weights,
        })
    }
}

/// Copies pretrained tensors into every parameter under `prefix`. Accepts
/// files with or without the `bert.` prefix and the legacy `gamma`/`beta`
/// layer-norm names.
pub fn load_backbone_weights(store: &ParamStore, prefix: &str, weights: &Path) -> Result<usize> {
    let file = candle_core::safetensors::load(weights, &Device::Cpu)?;
    let mut loaded = 0;
    for (name, _) in store.vars() {
        let Some(local) = name.strip_prefix(&format!("{prefix}.")) else {
            continue;
        };
        let legacy = local
            .replace("LayerNorm.weight", "LayerNorm.gamma")
            .replace("LayerNorm.bias", "LayerNorm.beta");
        let candidates = [
            local.to_owned(),
            format!("bert.{local}"),
            legacy.clone(),
            format!("bert.{legacy}"),
        ];
        let tensor = candidates
            .iter()
            .find_map(|c| file.get(c))
            .ok_or_else(|| candle_core::Error::Msg(format!("pretrained weights lack {local}")))?;
        store.assign(&name, tensor)?;
        loaded += 1;
    }
    Ok(loaded)
}

struct LstmCell {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl LstmCell {
    fn new(scope: &Scope, input: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(LstmCell {
            input: linear_with(&scope.pp("input"), input, 4 * hidden, true, Init::Uniform(bound))?,
            recurrent: linear_with(
                &scope.pp("recurrent"),
                hidden,
                4 * hidden,
                true,
                Init::Uniform(bound),
            )?,
            hidden,
        })
    }

    /// Runs left to right over `(B, N, in)`; gate order is input, forget,
    /// cell, output.
    fn run(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, n, _) = xs.dims3()?;
        let projected = self.input.forward(xs)?;
        let mut h = Tensor::zeros((b, self.hidden), xs.dtype(), xs.device())?;
        let mut c = h.clone();
        let mut outputs = Vec::with_capacity(n);
        for t in 0..n {
            let gates = (projected.narrow(1, t, 1)?.squeeze(1)? + self.recurrent.forward(&h)?)?;
            let chunks = gates.chunk(4, 1)?;
            let i = candle_nn::ops::sigmoid(&chunks[0])?;
            let f = candle_nn::ops::sigmoid(&chunks[1])?;
            let g = chunks[2].tanh()?;
            let o = candle_nn::ops::sigmoid(&chunks[3])?;
            c = ((f * &c)? + (i * g)?)?;
            h = (o * c.tanh()?)?;
            outputs.push(h.unsqueeze(1)?);
        }
        Tensor::cat(&outputs, 1)
    }
}

/// Reverses each sequence within its own length, leaving padding in place.
fn reverse_within_lengths(xs: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    let (b, n, d) = xs.dims3()?;
    let idx: Vec<u32> = lengths
        .iter()
        .enumerate()
        .flat_map(|(bi, &len)| {
            (0..n).map(move |t| (bi * n + if t < len { len - 1 - t } else { t }) as u32)
        })
        .collect();
    let idx = Tensor::from_vec(idx, b * n, xs.device())?;
    xs.contiguous()?.reshape((b * n, d))?.index_select(&idx, 0)?.reshape((b, n, d))
}

/// Bidirectional LSTM; directions are concatenated, forward first.
pub struct BiLstm {
    forward: LstmCell,
    backward: LstmCell,
}

impl BiLstm {
    pub fn new(scope: &Scope, input: usize, hidden_half: usize) -> Result<Self> {
        Ok(BiLstm {
            forward: LstmCell::new(&scope.pp("forward"), input, hidden_half)?,
            backward: LstmCell::new(&scope.pp("backward"), input, hidden_half)?,
        })
    }

    pub fn forward(&self, xs: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let fw = self.forward.run(xs)?;
        let bw = reverse_within_lengths(
            &self.backward.run(&reverse_within_lengths(xs, lengths)?)?,
            lengths,
        )?;
        Tensor::cat(&[fw, bw], 2)
    }
}

/// One multi-head self-attention layer with a residual connection.
pub struct SelfAttention {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(scope: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(SelfAttention {
            query: linear(&scope.pp("query"), dim, dim, true)?,
            key: linear(&scope.pp("key"), dim, dim, true)?,
            value: linear(&scope.pp("value"), dim, dim, true)?,
            out: linear(&scope.pp("out"), dim, dim, true)?,
            heads,
        })
    }

    /// Attention weights `(B, H, N, N)`.
    pub fn probs(&self, xs: &Tensor, mask: &Tensor) -> Result<Tensor> {
        attention_probs(
            &self.query.forward(xs)?,
            &self.key.forward(xs)?,
            self.heads,
            mask,
        )
    }

    pub fn forward(&self, xs: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let probs = self.probs(xs, mask)?;
        let v = split_heads(&self.value.forward(xs)?, self.heads)?;
        let attended = self.out.forward(&merge_heads(&probs.matmul(&v)?)?)?;
        (xs + attended)?.broadcast_mul(&mask.unsqueeze(2)?)
    }
}

/// The recurrent half of the LSTM channel followed by self-attention.
pub struct LstmChannel {
    lstm: BiLstm,
    attention: SelfAttention,
}

impl LstmChannel {
    pub fn new(scope: &Scope, input: usize, hidden_half: usize, heads: usize) -> Result<Self> {
        Ok(LstmChannel {
            lstm: BiLstm::new(&scope.pp("bilstm"), input, hidden_half)?,
            attention: SelfAttention::new(&scope.pp("attention"), 2 * hidden_half, heads)?,
        })
    }

    pub fn recurrent(&self) -> &BiLstm {
        &self.lstm
    }

    pub fn attention(&self) -> &SelfAttention {
        &self.attention
    }

    pub fn forward(&self, words: &Tensor, mask: &Tensor, lengths: &[usize]) -> Result<Tensor> {
        let h = self.lstm.forward(words, lengths)?;
        let h = h.broadcast_mul(&mask.unsqueeze(2)?)?;
        self.attention.forward(&h, mask)
    }
}

/// Which encoders feed the two channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channels {
    /// BERT channel and BERT-BiLSTM-SA channel.
    Dual,
    /// BERT only; the LSTM channel is a linear projection of it.
    BertOnly,
    /// BERT-BiLSTM-SA only; the BERT channel is a linear projection of it.
    LstmOnly,
}

/// Tensors describing one padded batch at subtoken and word level.
pub struct EncoderInputs {
    /// `(B, T)` u32 subtoken ids.
    pub ids: Tensor,
    /// `(B, T)` 1 on real subtokens.
    pub subtoken_mask: Tensor,
    /// `(B, N, T)` word-from-subtoken pooling weights.
    pub pooling: Tensor,
    /// `(B, N)` 1 on real words.
    pub word_mask: Tensor,
    pub lengths: Vec<usize>,
}

impl EncoderInputs {
    pub fn new(
        encoded: &[Encoded],
        pad_id: u32,
        pooling: WordPooling,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let b = encoded.len();
        let t_max = encoded.iter().map(|e| e.ids.len()).max().unwrap_or(0);
        let n_max = encoded.iter().map(|e| e.word_spans.len()).max().unwrap_or(0);
        let mut ids = vec![pad_id; b * t_max];
        let mut sub_mask = vec![0f64; b * t_max];
        let mut pool = vec![0f64; b * n_max * t_max];
        let mut word_mask = vec![0f64; b * n_max];
        for (bi, e) in encoded.iter().enumerate() {
            for (t, &id) in e.ids.iter().enumerate() {
                ids[bi * t_max + t] = id;
                sub_mask[bi * t_max + t] = 1.0;
            }
            for (w, &(first, last)) in e.word_spans.iter().enumerate() {
                word_mask[bi * n_max + w] = 1.0;
                let row = (bi * n_max + w) * t_max;
                match pooling {
                    WordPooling::First => pool[row + first] = 1.0,
                    WordPooling::Mean => {
                        let k = (last - first + 1) as f64;
                        for t in first..=last {
                            pool[row + t] = 1.0 / k;
                        }
                    }
                }
            }
        }
        let f = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Tensor::from_vec(v, shape, device)?.to_dtype(dtype)
        };
        Ok(EncoderInputs {
            ids: Tensor::from_vec(ids, (b, t_max), device)?,
            subtoken_mask: f(sub_mask, &[b, t_max])?,
            pooling: f(pool, &[b, n_max, t_max])?,
            word_mask: f(word_mask, &[b, n_max])?,
            lengths: encoded.iter().map(|e| e.word_spans.len()).collect(),
        })
    }
}

/// Output of the encoding layer.
pub struct ChannelStates {
    /// `(B, N, d_b)`
    pub h_bert: Tensor,
    /// `(B, N, d_l)`
    pub h_lstm: Tensor,
    /// `(B, d_b)` backbone state at the sentence-start position.
    pub cls: Tensor,
    /// `(B, N)`
    pub mask: Tensor,
}

pub struct Encoder {
    backbone: Transformer,
    channels: Channels,
    lstm: Option<LstmChannel>,
    projection: Option<Linear>,
    dropout: f64,
}

impl Encoder {
    pub fn new(
        scope: &Scope,
        cfg: &EncoderConfig,
        backbone: TransformerConfig,
        channels: Channels,
    ) -> Result<Self> {
        if backbone.hidden_size != cfg.hidden_bert {
            candle_core::bail!(
                "backbone hidden size {} does not match hidden_bert {}",
                backbone.hidden_size,
                cfg.hidden_bert
            );
        }
        let d_b = cfg.hidden_bert;
        let d_l = cfg.hidden_lstm();
        let lstm = match channels {
            Channels::Dual | Channels::LstmOnly => Some(LstmChannel::new(
                &scope.pp("lstm_channel"),
                d_b,
                cfg.hidden_lstm_half,
                cfg.self_attention_heads,
            )?),
            Channels::BertOnly => None,
        };
        let projection = match channels {
            Channels::Dual => None,
            Channels::BertOnly => Some(linear(&scope.pp("lstm_from_bert"), d_b, d_l, true)?),
            Channels::LstmOnly => Some(linear(&scope.pp("bert_from_lstm"), d_l, d_b, true)?),
        };
        Ok(Encoder {
            backbone: Transformer::new(&scope.pp("backbone"), backbone)?,
            channels,
            lstm,
            projection,
            dropout: cfg.dropout,
        })
    }

    pub fn backbone(&self) -> &Transformer {
        &self.backbone
    }

    pub fn lstm_channel(&self) -> Option<&LstmChannel> {
        self.lstm.as_ref()
    }

    /// Word-level backbone features `(B, N, d_b)` and the sentence feature
    /// `(B, d_b)`.
    pub fn encode_bert(&self, inputs: &EncoderInputs) -> Result<(Tensor, Tensor)> {
        let sub = self.backbone.forward(&inputs.ids, &inputs.subtoken_mask)?;
        let cls = sub.narrow(1, 0, 1)?.squeeze(1)?;
        let words = inputs.pooling.matmul(&sub)?;
        Ok((words, cls))
    }

    pub fn encode_lstm_channel(&self, words: &Tensor, inputs: &EncoderInputs) -> Result<Tensor> {
        match &self.lstm {
            Some(lstm) => lstm.forward(words, &inputs.word_mask, &inputs.lengths),
            None => candle_core::bail!("this encoder has no LSTM channel"),
        }
    }

    pub fn forward(&self, inputs: &EncoderInputs, ctx: &mut ForwardCtx) -> Result<ChannelStates> {
        ctx.record("encoder.backbone");
        let (words, cls) = self.encode_bert(inputs)?;
        let (h_bert, h_lstm) = match self.channels {
            Channels::Dual => {
                ctx.record("encoder.lstm_channel");
                let h_lstm = self.encode_lstm_channel(&words, inputs)?;
                (words, h_lstm)
            }
            Channels::BertOnly => {
                ctx.record("encoder.lstm_from_bert");
                let h_lstm = self.projection.as_ref().unwrap().forward(&words)?;
                (words, h_lstm)
            }
            Channels::LstmOnly => {
                ctx.record("encoder.lstm_channel");
                ctx.record("encoder.bert_from_lstm");
                let h_lstm = self.encode_lstm_channel(&words, inputs)?;
                let h_bert = self.projection.as_ref().unwrap().forward(&h_lstm)?;
                (h_bert, h_lstm)
            }
        };
        let mask3 = inputs.word_mask.unsqueeze(2)?;
        let h_bert = ctx.dropout(&h_bert, self.dropout)?.broadcast_mul(&mask3)?;
        let h_lstm = ctx.dropout(&h_lstm, self.dropout)?.broadcast_mul(&mask3)?;
        Ok(ChannelStates {
            h_bert,
            h_lstm,
            cls,
            mask: inputs.word_mask.clone(),
        })
    }
}
