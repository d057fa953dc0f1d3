//! Span enumeration, span features, the mention-type filter and candidate
//! selection.

use std::collections::BTreeMap;

use candle_core::{DType, Result, Tensor, D};
use candle_nn::{Embedding, Module};

use crate::corpus::{Span, Triplet};
use crate::params::{cross_entropy_sum, embedding, Init, Mlp, Scope};

/// Mention classes predicted for every candidate span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MentionType {
    Target = 0,
    Opinion = 1,
    None = 2,
}

impl MentionType {
    pub const ALL: [MentionType; 3] = [MentionType::Target, MentionType::Opinion, MentionType::None];

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

/// All spans of width at most `max_width`, start-major then by end.
pub fn enumerate_spans(n: usize, max_width: usize) -> Vec<Span> {
    (0..n)
        .flat_map(|start| (start..n.min(start + max_width)).map(move |end| Span::new(start, end)))
        .collect()
}

/// Gold mention label per span. A span that is both an aspect and an opinion
/// is labelled Target.
pub fn gold_mentions(triplets: &[Triplet]) -> BTreeMap<Span, MentionType> {
    let mut out = BTreeMap::new();
    for t in triplets {
        out.entry(t.opinion).or_insert(MentionType::Opinion);
    }
    for t in triplets {
        out.insert(t.aspect, MentionType::Target);
    }
    out
}

pub fn mention_labels(spans: &[Span], triplets: &[Triplet]) -> Vec<u32> {
    let gold = gold_mentions(triplets);
    spans
        .iter()
        .map(|s| *gold.get(s).unwrap_or(&MentionType::None) as u32)
        .collect()
}

/// Max-pooled span features `(S, d)` for one sentence. `h` is `(N, d)`; the
/// pooled rows come out in `spans` order.
pub fn max_pool_spans(h: &Tensor, spans: &[Span], max_width: usize) -> Result<Tensor> {
    let n = h.dim(0)?;
    // running[w][i] = max over h[i..=i+w]
    let mut running = vec![h.clone()];
    for w in 1..max_width.min(n) {
        let prev = &running[w - 1];
        let len = n - w;
        running.push(prev.narrow(0, 0, len)?.maximum(&h.narrow(0, w, len)?)?);
    }
    let mut by_width: BTreeMap<usize, Vec<(usize, u32)>> = BTreeMap::new();
    for (k, s) in spans.iter().enumerate() {
        by_width.entry(s.width()).or_default().push((k, s.start as u32));
    }
    let mut pieces = Vec::new();
    let mut order = Vec::new();
    for (w, items) in by_width {
        let idx: Vec<u32> = items.iter().map(|(_, s)| *s).collect();
        let idx = Tensor::new(idx.as_slice(), h.device())?;
        pieces.push(running[w - 1].contiguous()?.index_select(&idx, 0)?);
        order.extend(items.iter().map(|(k, _)| *k));
    }
    let stacked = Tensor::cat(&pieces, 0)?;
    // undo the width grouping
    let mut inverse = vec![0u32; order.len()];
    for (pos, &k) in order.iter().enumerate() {
        inverse[k] = pos as u32;
    }
    stacked.contiguous()?.index_select(&Tensor::new(inverse.as_slice(), h.device())?, 0)
}

/// Candidate spans of one sentence with their features and mention logits.
pub struct ScoredSpans {
    pub spans: Vec<Span>,
    /// `(S, d_span)`
    pub features: Tensor,
    /// `(S, 3)`
    pub logits: Tensor,
    /// Softmax of `logits`, copied out for selection.
    pub probs: Vec<[f64; 3]>,
}

impl ScoredSpans {
    pub fn predicted(&self, k: usize) -> MentionType {
        let p = &self.probs[k];
        let best = (0..3).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        MentionType::from_index(best)
    }
}

/// Span representation and mention classifier.
pub struct SpanModule {
    width_embedding: Embedding,
    classifier: Mlp,
    max_width: usize,
    out_dim: usize,
}

impl SpanModule {
    pub fn new(
        scope: &Scope,
        token_dim: usize,
        cls_dim: usize,
        max_width: usize,
        width_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        let out_dim = token_dim + width_dim + cls_dim;
        Ok(SpanModule {
            width_embedding: embedding(&scope.pp("width_embedding"), max_width, width_dim, Init::Normal(1.0))?,
            classifier: Mlp::new(&scope.pp("classifier"), out_dim, hidden, 3)?,
            max_width,
            out_dim,
        })
    }

    pub fn max_width(&self) -> usize {
        self.max_width
    }

    /// Width of a span representation.
    pub fn dim(&self) -> usize {
        self.out_dim
    }

    /// g ⊕ width embedding ⊕ cls for each span; `h` is `(N, d)`, `cls` `(d_b)`.
    pub fn represent(&self, h: &Tensor, cls: &Tensor, spans: &[Span]) -> Result<Tensor> {
        let pooled = max_pool_spans(h, spans, self.max_width)?;
        let widths: Vec<u32> = spans.iter().map(|s| (s.width() - 1) as u32).collect();
        let widths = self
            .width_embedding
            .forward(&Tensor::new(widths.as_slice(), h.device())?)?;
        let cls = cls.unsqueeze(0)?.broadcast_as((spans.len(), cls.dim(0)?))?;
        Tensor::cat(&[pooled, widths, cls], 1)
    }

    pub fn score(&self, h: &Tensor, cls: &Tensor) -> Result<ScoredSpans> {
        let spans = enumerate_spans(h.dim(0)?, self.max_width);
        let features = self.represent(h, cls, &spans)?;
        let logits = self.classifier.forward(&features)?;
        let probs = candle_nn::ops::softmax(&logits, D::Minus1)?
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?
            .into_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect();
        Ok(ScoredSpans {
            spans,
            features,
            logits,
            probs,
        })
    }
}

/// Summed cross entropy of the mention classifier against gold labels.
pub fn filter_loss(scored: &ScoredSpans, gold: &[Triplet]) -> Result<Tensor> {
    cross_entropy_sum(&scored.logits, &mention_labels(&scored.spans, gold))
}

/// Indices into `scored.spans` of the kept targets and opinions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub targets: Vec<usize>,
    pub opinions: Vec<usize>,
}

/// Per type, keeps spans whose argmax is that type, at most
/// ceil(keep_ratio·n) (at least 1), by descending probability with ties
/// broken by smaller start then smaller end. Each list ends up in that order.
pub fn select_candidates(scored: &ScoredSpans, n: usize, keep_ratio: f64) -> Selection {
    let cap = ((keep_ratio * n as f64).ceil() as usize).max(1);
    let pick = |ty: MentionType| -> Vec<usize> {
        let mut ks: Vec<usize> = (0..scored.spans.len())
            .filter(|&k| scored.predicted(k) == ty)
            .collect();
        ks.sort_by(|&a, &b| {
            let (pa, pb) = (scored.probs[a][ty as usize], scored.probs[b][ty as usize]);
            pb.total_cmp(&pa)
                .then(scored.spans[a].start.cmp(&scored.spans[b].start))
                .then(scored.spans[a].end.cmp(&scored.spans[b].end))
        });
        ks.truncate(cap);
        ks
    };
    Selection {
        targets: pick(MentionType::Target),
        opinions: pick(MentionType::Opinion),
    }
}

/// Adds the gold aspects and opinions to a selection (teacher forcing for
/// the relation classifier). Spans already present are not repeated.
pub fn add_gold(selection: &mut Selection, scored: &ScoredSpans, gold: &[Triplet]) {
    let index: BTreeMap<Span, usize> = scored.spans.iter().enumerate().map(|(k, s)| (*s, k)).collect();
    for t in gold {
        for (span, list) in [(t.aspect, &mut selection.targets), (t.opinion, &mut selection.opinions)] {
            if let Some(&k) = index.get(&span) {
                if !list.contains(&k) {
                    list.push(k);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Polarity;
    use crate::params::ParamStore;
    use candle_core::Device;
    use proptest::prelude::*;

    fn brute_force(n: usize, l: usize) -> Vec<Span> {
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i <= j && j - i < l {
                    out.push(Span::new(i, j));
                }
            }
        }
        out
    }

    #[test]
    fn span_counts() {
        assert_eq!(enumerate_spans(5, 8).len(), 15);
        assert_eq!(enumerate_spans(10, 8).len(), 52);
        assert_eq!(enumerate_spans(1, 8), vec![Span::new(0, 0)]);
        for n in 1..=50 {
            for l in [1, 8, 100] {
                assert_eq!(enumerate_spans(n, l), brute_force(n, l));
            }
        }
    }

    fn triplet(a: (usize, usize), o: (usize, usize)) -> Triplet {
        Triplet {
            aspect: Span::new(a.0, a.1),
            opinion: Span::new(o.0, o.1),
            polarity: Polarity::Positive,
        }
    }

    #[test]
    fn target_wins_role_collisions() {
        let g = gold_mentions(&[triplet((0, 0), (2, 2)), triplet((2, 2), (4, 5))]);
        assert_eq!(g[&Span::new(2, 2)], MentionType::Target);
        assert_eq!(g[&Span::new(4, 5)], MentionType::Opinion);
        assert_eq!(g[&Span::new(0, 0)], MentionType::Target);
    }

    proptest! {
        #[test]
        fn max_pool_matches_loop(
            n in 1usize..9,
            l in 1usize..10,
            vals in proptest::collection::vec(-5.0f64..5.0, 9 * 3),
        ) {
            let h = Tensor::from_vec(vals[..n * 3].to_vec(), (n, 3), &Device::Cpu).unwrap();
            let rows = h.to_vec2::<f64>().unwrap();
            let spans = enumerate_spans(n, l);
            let pooled = max_pool_spans(&h, &spans, l).unwrap().to_vec2::<f64>().unwrap();
            for (s, got) in spans.iter().zip(&pooled) {
                for d in 0..3 {
                    let want = s.indices().map(|i| rows[i][d]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert_eq!(got[d], want);
                }
            }
        }
    }

    fn module(store: &ParamStore) -> SpanModule {
        SpanModule::new(&store.root(), 4, 2, 8, 3, 5).unwrap()
    }

    #[test]
    fn representation_layout() {
        let store = ParamStore::new(1, DType::F64, Device::Cpu);
        let m = module(&store);
        let h = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0], [0.0, 5.0, -1.0, 4.0]], &Device::Cpu).unwrap();
        let cls = Tensor::new(&[9.0f64, 8.0], &Device::Cpu).unwrap();
        let spans = [Span::new(1, 1), Span::new(0, 1)];
        let r = m.represent(&h, &cls, &spans).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(r[0].len(), 4 + 3 + 2);
        assert_eq!(&r[0][..4], &[0.0, 5.0, -1.0, 4.0]);
        assert_eq!(&r[1][..4], &[1.0, 5.0, 3.0, 4.0]);
        assert_eq!(&r[0][7..], &[9.0, 8.0]);
        assert_ne!(&r[0][4..7], &r[1][4..7]);
    }

    #[test]
    fn uniform_prediction_costs_ln3_per_span() {
        let store = ParamStore::new(1, DType::F64, Device::Cpu);
        let m = module(&store);
        for (name, var) in store.vars() {
            if name.starts_with("classifier.out") {
                store.assign(&name, &var.zeros_like().unwrap()).unwrap();
            }
        }
        let h = Tensor::ones((3, 4), DType::F64, &Device::Cpu).unwrap();
        let cls = Tensor::ones(2, DType::F64, &Device::Cpu).unwrap();
        let scored = m.score(&h, &cls).unwrap();
        let loss = filter_loss(&scored, &[triplet((0, 0), (2, 2))]).unwrap();
        let per_span = loss.to_scalar::<f64>().unwrap() / scored.spans.len() as f64;
        assert!((per_span - 3f64.ln()).abs() < 1e-12);
    }

    fn fake(spans: Vec<Span>, probs: Vec<[f64; 3]>) -> ScoredSpans {
        let s = spans.len();
        ScoredSpans {
            spans,
            features: Tensor::zeros((s, 1), DType::F64, &Device::Cpu).unwrap(),
            logits: Tensor::zeros((s, 3), DType::F64, &Device::Cpu).unwrap(),
            probs,
        }
    }

    #[test]
    fn selection_rules() {
        let spans = vec![Span::new(0, 0), Span::new(0, 1), Span::new(1, 1), Span::new(2, 2)];
        let none = fake(spans.clone(), vec![[0.1, 0.1, 0.8]; 4]);
        let sel = select_candidates(&none, 3, 0.5);
        assert!(sel.targets.is_empty() && sel.opinions.is_empty());

        let ties = fake(
            spans.clone(),
            vec![[0.6, 0.2, 0.2], [0.6, 0.2, 0.2], [0.6, 0.2, 0.2], [0.1, 0.7, 0.2]],
        );
        // cap = ceil(0.5 * 3) = 2
        let sel = select_candidates(&ties, 3, 0.5);
        assert_eq!(sel.targets, vec![0, 1]);
        assert_eq!(sel.opinions, vec![3]);

        let ranked = fake(
            spans,
            vec![[0.5, 0.2, 0.3], [0.9, 0.05, 0.05], [0.6, 0.2, 0.2], [0.1, 0.7, 0.2]],
        );
        let sel = select_candidates(&ranked, 1, 0.5);
        assert_eq!(sel.targets, vec![1]);
    }

    #[test]
    fn gold_is_added_once() {
        let spans = vec![Span::new(0, 0), Span::new(1, 1)];
        let scored = fake(spans, vec![[0.9, 0.05, 0.05], [0.1, 0.1, 0.8]]);
        let mut sel = select_candidates(&scored, 2, 0.5);
        add_gold(&mut sel, &scored, &[triplet((0, 0), (1, 1))]);
        assert_eq!(sel.targets, vec![0]);
        assert_eq!(sel.opinions, vec![1]);
    }
}
