//! The full extractor: encoder, word graphs, interaction, fusion, span filter
//! and relation classifier, wired according to the configured ablation.

use std::path::Path;

use candle_core::{DType, Device, Result, Tensor};
use thiserror::Error;

use crate::config::{Ablation, BackboneKind, InteractionMode, RunConfig};
use crate::corpus::{Sentence, Triplet};
use crate::encoder::{
    load_backbone_weights, Channels, Encoder, EncoderInputs, PretrainedFiles, TransformerConfig,
};
use crate::graphs::{syn_adjacency_batch, GcnStack, SemAdjacency};
use crate::hfim::{split_channels, BranchKind, Fuse, HfimBranch, MutualBiaffine};
use crate::params::{ForwardCtx, ParamStore};
use crate::separation::separation_loss;
use crate::spans::{add_gold, filter_loss, select_candidates, SpanModule};
use crate::tokenizer::{TokenizerError, Vocab};
use crate::triplet::{cross_pairs, decode, predicted_relations, triplet_loss, TripletModule};

pub const BACKBONE_PREFIX: &str = "encoder.backbone";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("pretrained backbone: {0}")]
    Backbone(String),
}

/// Interaction stage between the graph convolutions and fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interaction {
    Hfim,
    Biaffine,
    /// Graph-convolution outputs go straight to fusion.
    Skip,
}

/// Which stages run, derived from the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wiring {
    pub channels: Channels,
    /// SynGCN and SemGCN stacks; when off their inputs pass through unchanged.
    pub graph_convolutions: bool,
    pub separation_loss: bool,
    pub interaction: Interaction,
    pub zero_syntactic: bool,
    pub zero_semantic: bool,
}

impl Wiring {
    pub fn for_config(cfg: &RunConfig) -> Self {
        let mut w = Wiring {
            channels: Channels::Dual,
            graph_convolutions: true,
            separation_loss: true,
            interaction: match cfg.interaction_mode() {
                InteractionMode::Hfim => Interaction::Hfim,
                InteractionMode::Biaffine => Interaction::Biaffine,
            },
            zero_syntactic: false,
            zero_semantic: false,
        };
        match cfg.ablation {
            Ablation::Full | Ablation::Biaffine => {}
            Ablation::WoSs => {
                w.graph_convolutions = false;
                w.separation_loss = false;
            }
            Ablation::WoSyn => w.zero_syntactic = true,
            Ablation::WoSem => w.zero_semantic = true,
            Ablation::WoHfim => w.interaction = Interaction::Skip,
            Ablation::E1Only => w.channels = Channels::BertOnly,
            Ablation::E2Only => w.channels = Channels::LstmOnly,
        }
        w
    }
}

/// A padded batch ready for the model.
pub struct ModelBatch {
    pub inputs: EncoderInputs,
    /// `(B, N, N)`
    pub a_syn: Tensor,
    pub gold: Vec<Vec<Triplet>>,
}

/// Loss terms, each already averaged over the batch.
pub struct Losses {
    pub span: Tensor,
    pub triplet: Tensor,
    pub separation: Option<Tensor>,
    pub total: Tensor,
}

pub struct ForwardOutput {
    pub losses: Losses,
    pub predictions: Vec<Vec<Triplet>>,
}

pub struct AsteModel {
    config: RunConfig,
    wiring: Wiring,
    encoder: Encoder,
    sem_adjacency: SemAdjacency,
    /// (LSTM channel, BERT channel)
    syn_gcn: Option<(GcnStack, GcnStack)>,
    sem_gcn: Option<(GcnStack, GcnStack)>,
    hfim: Option<(HfimBranch, HfimBranch)>,
    biaffine: Option<MutualBiaffine>,
    fuse: Fuse,
    spans: SpanModule,
    triplet: TripletModule,
}

impl AsteModel {
    pub fn new(store: &ParamStore, cfg: &RunConfig, backbone: TransformerConfig) -> Result<Self> {
        let wiring = Wiring::for_config(cfg);
        let root = store.root();
        let d_b = cfg.encoder.hidden_bert;
        let d_l = cfg.encoder.hidden_lstm();
        let encoder = Encoder::new(&root.pp("encoder"), &cfg.encoder, backbone, wiring.channels)?;
        let graphs = root.pp("graphs");
        let sem_adjacency = SemAdjacency::new(
            &graphs.pp("sem_adjacency"),
            d_b,
            cfg.graphs.sem_attention_heads,
            cfg.graphs.head_combine,
        )?;
        let stacks = |name: &str| -> Result<Option<(GcnStack, GcnStack)>> {
            if !wiring.graph_convolutions {
                return Ok(None);
            }
            let s = graphs.pp(name);
            Ok(Some((
                GcnStack::new(&s.pp("lstm"), d_l, cfg.graphs.gcn_layers)?,
                GcnStack::new(&s.pp("bert"), d_b, cfg.graphs.gcn_layers)?,
            )))
        };
        let syn_gcn = stacks("syn_gcn")?;
        let sem_gcn = stacks("sem_gcn")?;
        let h = &cfg.hfim;
        let hfim = match wiring.interaction {
            Interaction::Hfim => {
                let branch = |name: &str, kind| {
                    HfimBranch::new(
                        &root.pp("hfim").pp(name),
                        kind,
                        d_l + d_b,
                        h.gcnconv_layers,
                        h.gatedconv_layers,
                        h.sadpool_layers,
                        h.sparsify_threshold,
                    )
                };
                Some((
                    branch("syntactic", BranchKind::Syntactic)?,
                    branch("semantic", BranchKind::Semantic)?,
                ))
            }
            _ => None,
        };
        let biaffine = match wiring.interaction {
            Interaction::Biaffine => Some(MutualBiaffine::new(&root.pp("biaffine"), d_l + d_b)?),
            _ => None,
        };
        let fused = cfg.fused_width();
        let spans = SpanModule::new(
            &root.pp("spans"),
            fused,
            d_b,
            cfg.spans.max_span_length,
            cfg.spans.width_embedding_dim,
            cfg.spans.classifier_hidden,
        )?;
        let triplet = TripletModule::new(
            &root.pp("triplet"),
            spans.dim(),
            d_b,
            cfg.triplet.pair_width_embedding_dim,
            cfg.triplet.classifier_hidden,
        )?;
        Ok(AsteModel {
            config: cfg.clone(),
            wiring,
            encoder,
            sem_adjacency,
            syn_gcn,
            sem_gcn,
            hfim,
            biaffine,
            fuse: Fuse::new(&root.pp("fuse"), d_l, d_b, fused)?,
            spans,
            triplet,
        })
    }

    pub fn wiring(&self) -> Wiring {
        self.wiring
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Word-level features after fusion `(B, N, fused)`, the sentence
    /// features `(B, d_b)`, both adjacencies and the mask.
    fn features(&self, batch: &ModelBatch, ctx: &mut ForwardCtx) -> Result<Features> {
        let states = self.encoder.forward(&batch.inputs, ctx)?;
        let mask = &states.mask;
        ctx.record("graphs.sem_adjacency");
        let a_sem = self.sem_adjacency.forward(&states.h_bert, mask)?;
        let a_syn = &batch.a_syn;

        let run = |stacks: &Option<(GcnStack, GcnStack)>, a: &Tensor| -> Result<(Tensor, Tensor)> {
            match stacks {
                Some((l, b)) => Ok((
                    l.forward(&states.h_lstm, a, mask)?,
                    b.forward(&states.h_bert, a, mask)?,
                )),
                None => Ok((states.h_lstm.clone(), states.h_bert.clone())),
            }
        };
        if self.wiring.graph_convolutions {
            ctx.record("graphs.syn_gcn");
            ctx.record("graphs.sem_gcn");
        }
        let (l_syn, b_syn) = run(&self.syn_gcn, a_syn)?;
        let (l_sem, b_sem) = run(&self.sem_gcn, &a_sem)?;

        let d_l = self.config.encoder.hidden_lstm();
        let (l_syn, b_sem) = match self.wiring.interaction {
            Interaction::Hfim => {
                let (syn_branch, sem_branch) = self.hfim.as_ref().unwrap();
                ctx.record("hfim.syntactic_branch");
                let syn = syn_branch.forward(&Tensor::cat(&[&l_syn, &b_syn], 2)?, a_syn, &a_sem, mask, ctx)?;
                ctx.record("hfim.semantic_branch");
                let sem = sem_branch.forward(&Tensor::cat(&[&l_sem, &b_sem], 2)?, a_syn, &a_sem, mask, ctx)?;
                (split_channels(&syn, d_l)?.0, split_channels(&sem, d_l)?.1)
            }
            Interaction::Biaffine => {
                ctx.record("interaction.mutual_biaffine");
                let (syn, sem) = self.biaffine.as_ref().unwrap().forward(
                    &Tensor::cat(&[&l_syn, &b_syn], 2)?,
                    &Tensor::cat(&[&l_sem, &b_sem], 2)?,
                    mask,
                )?;
                (split_channels(&syn, d_l)?.0, split_channels(&sem, d_l)?.1)
            }
            Interaction::Skip => {
                ctx.record("interaction.skipped");
                (l_syn, b_sem)
            }
        };
        let l_syn = if self.wiring.zero_syntactic {
            ctx.record("fuse.zero_syntactic");
            l_syn.zeros_like()?
        } else {
            l_syn
        };
        let b_sem = if self.wiring.zero_semantic {
            ctx.record("fuse.zero_semantic");
            b_sem.zeros_like()?
        } else {
            b_sem
        };
        ctx.record("fuse");
        let fused = self.fuse.forward(&l_syn, &b_sem, mask)?;
        Ok(Features {
            fused,
            cls: states.cls,
            a_syn: a_syn.clone(),
            a_sem,
            mask: mask.clone(),
        })
    }

    /// Runs the whole model. In training mode gold spans join the kept
    /// candidates when the config asks for it; predictions are only
    /// meaningful in evaluation mode.
    pub fn forward(&self, batch: &ModelBatch, ctx: &mut ForwardCtx) -> Result<ForwardOutput> {
        let f = self.features(batch, ctx)?;
        let b = batch.gold.len();
        let zero = f.cls.zeros_like()?.sum_all()?;
        let mut span_loss = zero.clone();
        let mut triplet_loss_sum = zero.clone();
        let mut predictions = Vec::with_capacity(b);
        ctx.record("spans");
        ctx.record("triplet");
        for (i, gold) in batch.gold.iter().enumerate() {
            let n = batch.inputs.lengths[i];
            let h = f.fused.get(i)?.narrow(0, 0, n)?;
            let cls = f.cls.get(i)?;
            let scored = self.spans.score(&h, &cls)?;
            span_loss = (span_loss + filter_loss(&scored, gold)?)?;
            let mut sel = select_candidates(&scored, n, self.config.spans.keep_ratio);
            if ctx.train && self.config.spans.train_with_gold_spans {
                add_gold(&mut sel, &scored, gold);
            }
            let pairs = cross_pairs(&sel.targets, &sel.opinions, &scored.spans);
            if pairs.is_empty() {
                predictions.push(Vec::new());
                continue;
            }
            let t = self.triplet.represent(&scored.features, &cls, &pairs)?;
            let logits = self.triplet.classify(&t)?;
            triplet_loss_sum = (triplet_loss_sum + triplet_loss(Some(&logits), &pairs, gold, &zero)?)?;
            predictions.push(decode(&pairs, &predicted_relations(&logits)?));
        }
        let span = (span_loss / b as f64)?;
        let triplet = (triplet_loss_sum / b as f64)?;
        let separation = if self.wiring.separation_loss {
            ctx.record("loss.separation");
            Some(separation_loss(&f.a_syn, &f.a_sem, &f.mask, self.config.separation.epsilon)?)
        } else {
            None
        };
        let mut total = (&span + &triplet)?;
        if let Some(sep) = &separation {
            total = (total + (sep * self.config.separation.alpha)?)?;
        }
        Ok(ForwardOutput {
            losses: Losses {
                span,
                triplet,
                separation,
                total,
            },
            predictions,
        })
    }
}

struct Features {
    fused: Tensor,
    cls: Tensor,
    a_syn: Tensor,
    a_sem: Tensor,
    mask: Tensor,
}

/// Model, parameters and vocabulary together.
pub struct Extractor {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub model: AsteModel,
    max_positions: usize,
}

impl Extractor {
    pub fn new(
        config: &RunConfig,
        vocab: Vocab,
        backbone: TransformerConfig,
        device: &Device,
    ) -> Result<Self> {
        let store = ParamStore::new(config.seed, config.precision.dtype(), device.clone());
        let max_positions = backbone.max_position_embeddings;
        let model = AsteModel::new(&store, config, backbone)?;
        Ok(Extractor {
            config: config.clone(),
            vocab,
            store,
            model,
            max_positions,
        })
    }

    /// Toy backbone with a vocabulary built from `words`.
    pub fn toy<'a>(
        config: &RunConfig,
        words: impl IntoIterator<Item = &'a str>,
        device: &Device,
    ) -> Result<Self> {
        let vocab = Vocab::build_toy(words, config.encoder.toy.min_word_freq);
        let backbone = TransformerConfig::toy(&config.encoder, vocab.len());
        Self::new(config, vocab, backbone, device)
    }

    /// Pretrained backbone read from `config.encoder.pretrained_path`.
    pub fn pretrained(config: &RunConfig, device: &Device) -> std::result::Result<Self, ModelError> {
        let dir = config
            .encoder
            .pretrained_path
            .as_deref()
            .ok_or_else(|| ModelError::Backbone("encoder.pretrained_path is not set".into()))?;
        let files = PretrainedFiles::open(dir).map_err(ModelError::Backbone)?;
        let ex = Self::new(config, files.vocab, files.config, device)?;
        load_backbone_weights(&ex.store, BACKBONE_PREFIX, &files.weights)?;
        Ok(ex)
    }

    /// Builds the extractor the config asks for; the toy vocabulary comes
    /// from `train`.
    pub fn from_config(
        config: &RunConfig,
        train: &[Sentence],
        device: &Device,
    ) -> std::result::Result<Self, ModelError> {
        match config.encoder.backbone {
            BackboneKind::Toy => Ok(Self::toy(
                config,
                train.iter().flat_map(|s| s.words.iter().map(String::as_str)),
                device,
            )?),
            BackboneKind::Pretrained => Self::pretrained(config, device),
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn batch(&self, sentences: &[&Sentence]) -> std::result::Result<ModelBatch, ModelError> {
        let encoded = sentences
            .iter()
            .map(|s| self.vocab.encode(&s.words, self.max_positions))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let inputs = EncoderInputs::new(
            &encoded,
            self.vocab.pad_id(),
            self.config.encoder.word_pooling,
            self.dtype(),
            self.store.device(),
        )?;
        let n_max = inputs.lengths.iter().copied().max().unwrap_or(0);
        let a_syn = syn_adjacency_batch(sentences, n_max, self.dtype(), self.store.device())?;
        Ok(ModelBatch {
            inputs,
            a_syn,
            gold: sentences.iter().map(|s| s.gold_triplets.clone()).collect(),
        })
    }

    /// Evaluation-mode predictions in input order.
    pub fn predict(
        &self,
        sentences: &[Sentence],
        batch_size: usize,
    ) -> std::result::Result<Vec<Vec<Triplet>>, ModelError> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(batch_size.max(1)) {
            let refs: Vec<&Sentence> = chunk.iter().collect();
            let batch = self.batch(&refs)?;
            out.extend(self.model.forward(&batch, &mut ForwardCtx::eval())?.predictions);
        }
        Ok(out)
    }

    pub fn load_backbone(&self, weights: &Path) -> Result<usize> {
        load_backbone_weights(&self.store, BACKBONE_PREFIX, weights)
    }
}
