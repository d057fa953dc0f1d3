//! Aspect-opinion pair features, the sentiment relation classifier and
//! triplet decoding.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Result, Tensor, D};
use candle_nn::{Embedding, Module};

use crate::corpus::{Polarity, Span, Triplet};
use crate::params::{cross_entropy_sum, embedding, Init, Mlp, Scope};

/// Relation classes for a candidate pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    Positive = 0,
    Negative = 1,
    Neutral = 2,
    Invalid = 3,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Positive,
        Relation::Negative,
        Relation::Neutral,
        Relation::Invalid,
    ];

    pub fn polarity(self) -> Option<Polarity> {
        match self {
            Relation::Positive => Some(Polarity::Positive),
            Relation::Negative => Some(Polarity::Negative),
            Relation::Neutral => Some(Polarity::Neutral),
            Relation::Invalid => None,
        }
    }

    pub fn from_polarity(p: Polarity) -> Self {
        match p {
            Polarity::Positive => Relation::Positive,
            Polarity::Negative => Relation::Negative,
            Polarity::Neutral => Relation::Neutral,
        }
    }
}

pub const DISTANCE_BUCKETS: usize = 8;

/// Words strictly between the two spans (0 when adjacent or overlapping).
pub fn span_distance(a: Span, b: Span) -> usize {
    (a.start.max(b.start)).saturating_sub(a.end.min(b.end) + 1)
}

/// Buckets `[0, 1, 2, 3, 4, 5–7, 8–15, 16+]`.
pub fn distance_bucket(distance: usize) -> usize {
    match distance {
        0..=4 => distance,
        5..=7 => 5,
        8..=15 => 6,
        _ => 7,
    }
}

/// A candidate pair: indices into the span list plus the spans themselves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairIndex {
    pub aspect: usize,
    pub opinion: usize,
    pub aspect_span: Span,
    pub opinion_span: Span,
}

/// Full cross product of kept targets and opinions, target-major.
pub fn cross_pairs(targets: &[usize], opinions: &[usize], spans: &[Span]) -> Vec<PairIndex> {
    targets
        .iter()
        .flat_map(|&a| {
            opinions.iter().map(move |&o| PairIndex {
                aspect: a,
                opinion: o,
                aspect_span: spans[a],
                opinion_span: spans[o],
            })
        })
        .collect()
}

/// Gold relation per pair; pairs absent from the gold set are Invalid.
pub fn relation_labels(pairs: &[PairIndex], gold: &[Triplet]) -> Vec<u32> {
    let mut lookup: BTreeMap<(Span, Span), Polarity> = BTreeMap::new();
    for t in gold {
        lookup.entry((t.aspect, t.opinion)).or_insert(t.polarity);
    }
    pairs
        .iter()
        .map(|p| {
            lookup
                .get(&(p.aspect_span, p.opinion_span))
                .map_or(Relation::Invalid, |&pol| Relation::from_polarity(pol)) as u32
        })
        .collect()
}

/// Pair representation and relation classifier.
pub struct TripletModule {
    distance_embedding: Embedding,
    classifier: Mlp,
}

impl TripletModule {
    pub fn new(
        scope: &Scope,
        span_dim: usize,
        cls_dim: usize,
        width_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(TripletModule {
            distance_embedding: embedding(
                &scope.pp("distance_embedding"),
                DISTANCE_BUCKETS,
                width_dim,
                Init::Normal(1.0),
            )?,
            classifier: Mlp::new(
                &scope.pp("classifier"),
                2 * span_dim + width_dim + cls_dim,
                hidden,
                Relation::ALL.len(),
            )?,
        })
    }

    /// s_aspect ⊕ distance embedding ⊕ cls ⊕ s_opinion per pair.
    pub fn represent(&self, span_features: &Tensor, cls: &Tensor, pairs: &[PairIndex]) -> Result<Tensor> {
        let device = span_features.device();
        let idx = |f: fn(&PairIndex) -> usize| -> Result<Tensor> {
            let v: Vec<u32> = pairs.iter().map(|p| f(p) as u32).collect();
            Tensor::new(v.as_slice(), device)
        };
        let aspects = span_features.contiguous()?.index_select(&idx(|p| p.aspect)?, 0)?;
        let opinions = span_features.contiguous()?.index_select(&idx(|p| p.opinion)?, 0)?;
        let buckets: Vec<u32> = pairs
            .iter()
            .map(|p| distance_bucket(span_distance(p.aspect_span, p.opinion_span)) as u32)
            .collect();
        let dist = self
            .distance_embedding
            .forward(&Tensor::new(buckets.as_slice(), device)?)?;
        let cls = cls.unsqueeze(0)?.broadcast_as((pairs.len(), cls.dim(0)?))?;
        Tensor::cat(&[aspects, dist, cls, opinions], 1)
    }

    /// Relation logits `(P, 4)`.
    pub fn classify(&self, pair_features: &Tensor) -> Result<Tensor> {
        self.classifier.forward(pair_features)
    }
}

/// Summed cross entropy over pairs; zero when there are none.
pub fn triplet_loss(logits: Option<&Tensor>, pairs: &[PairIndex], gold: &[Triplet], like: &Tensor) -> Result<Tensor> {
    match logits {
        Some(l) if !pairs.is_empty() => cross_entropy_sum(l, &relation_labels(pairs, gold)),
        _ => like.zeros_like()?.sum_all(),
    }
}

/// Argmax relation per pair, read out of the logits.
pub fn predicted_relations(logits: &Tensor) -> Result<Vec<Relation>> {
    let argmax = logits.to_dtype(DType::F64)?.argmax(D::Minus1)?.to_vec1::<u32>()?;
    Ok(argmax.into_iter().map(|i| Relation::ALL[i as usize]).collect())
}

/// One triplet per pair not classified Invalid, without duplicates, in pair
/// order.
pub fn decode(pairs: &[PairIndex], relations: &[Relation]) -> Vec<Triplet> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (p, r) in pairs.iter().zip(relations) {
        if let Some(polarity) = r.polarity() {
            let t = Triplet {
                aspect: p.aspect_span,
                opinion: p.opinion_span,
                polarity,
            };
            if seen.insert(t) {
                out.push(t);
            }
        }
    }
    out
}
