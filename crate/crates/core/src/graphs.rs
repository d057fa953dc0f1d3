//! Word graphs: the dependency adjacency, the attention adjacency and the
//! graph-convolution stacks that run over them.

use candle_core::{DType, Device, Result, Tensor, D};
use candle_nn::{Linear, Module};

use crate::config::HeadCombine;
use crate::corpus::Sentence;
use crate::encoder::attention_probs;
use crate::params::{linear, Scope};

/// Dense 0/1 dependency adjacency, symmetric with an empty diagonal.
pub fn build_syn_adjacency(sentence: &Sentence) -> Vec<Vec<f64>> {
    let n = sentence.len();
    let mut a = vec![vec![0.0; n]; n];
    for (child, head) in sentence.edges() {
        a[child][head] = 1.0;
        a[head][child] = 1.0;
    }
    a
}

/// Dependency adjacencies of a batch padded to `(B, n_max, n_max)`.
pub fn syn_adjacency_batch(
    sentences: &[&Sentence],
    n_max: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut flat = vec![0f64; sentences.len() * n_max * n_max];
    for (b, s) in sentences.iter().enumerate() {
        for (i, row) in build_syn_adjacency(s).iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                flat[(b * n_max + i) * n_max + j] = v;
            }
        }
    }
    Tensor::from_vec(flat, (sentences.len(), n_max, n_max), device)?.to_dtype(dtype)
}

/// Attention-score adjacency over the BERT channel. Each real row is a
/// distribution over the real words of its sentence; padded rows are zero.
pub struct SemAdjacency {
    query: Linear,
    key: Linear,
    heads: usize,
    combine: HeadCombine,
}

impl SemAdjacency {
    pub fn new(scope: &Scope, dim: usize, heads: usize, combine: HeadCombine) -> Result<Self> {
        Ok(SemAdjacency {
            query: linear(&scope.pp("query"), dim, dim, true)?,
            key: linear(&scope.pp("key"), dim, dim, true)?,
            heads,
            combine,
        })
    }

    pub fn forward(&self, h_bert: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let probs = attention_probs(
            &self.query.forward(h_bert)?,
            &self.key.forward(h_bert)?,
            self.heads,
            mask,
        )?;
        match self.combine {
            HeadCombine::Mean => probs.mean(1),
            HeadCombine::Max => {
                let m = probs.max(1)?;
                // padded rows sum to 0; add 1 there so they stay 0
                let row_mask = mask.unsqueeze(2)?;
                let sums = (m.sum_keepdim(D::Minus1)? + (row_mask.ones_like()? - &row_mask)?)?;
                m.broadcast_div(&sums)
            }
        }
    }
}

/// D̂^{-1/2}(A + I)D̂^{-1/2} over real nodes, with D̂ the row sums of A + I.
/// Padded rows and columns are zero. `a` is `(B, N, N)`, `mask` `(B, N)`.
pub fn normalized_adjacency(a: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let n = mask.dim(1)?;
    let eye = Tensor::eye(n, a.dtype(), a.device())?;
    let mask_r = mask.unsqueeze(2)?;
    let mask_c = mask.unsqueeze(1)?;
    let pair = mask_r.broadcast_mul(&mask_c)?;
    let a_hat = (a.broadcast_mul(&pair)? + pair.broadcast_mul(&eye)?)?;
    let deg = a_hat.sum(D::Minus1)?;
    // padded nodes have degree 0; shift to 1 before the root so they stay finite
    let inv_sqrt = ((deg + (mask.ones_like()? - mask)?)?.sqrt()?.recip()? * mask)?;
    a_hat
        .broadcast_mul(&inv_sqrt.unsqueeze(2)?)?
        .broadcast_mul(&inv_sqrt.unsqueeze(1)?)
}

/// One propagation step ReLU(Â_norm H W + b).
pub struct GcnLayer {
    linear: Linear,
}

impl GcnLayer {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(GcnLayer {
            linear: linear(scope, dim, dim, true)?,
        })
    }

    pub fn forward(&self, h: &Tensor, a_norm: &Tensor, mask: &Tensor) -> Result<Tensor> {
        a_norm
            .matmul(&self.linear.forward(h)?)?
            .relu()?
            .broadcast_mul(&mask.unsqueeze(2)?)
    }
}

/// Stacked graph convolutions over one channel.
pub struct GcnStack {
    layers: Vec<GcnLayer>,
}

impl GcnStack {
    pub fn new(scope: &Scope, dim: usize, layers: usize) -> Result<Self> {
        assert!(layers >= 1, "a GCN stack needs at least one layer");
        Ok(GcnStack {
            layers: (0..layers)
                .map(|i| GcnLayer::new(&scope.pp(i), dim))
                .collect::<Result<_>>()?,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, h: &Tensor, a: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let a_norm = normalized_adjacency(a, mask)?;
        let mut h = h.clone();
        for layer in &self.layers {
            h = layer.forward(&h, &a_norm, mask)?;
        }
        Ok(h)
    }
}
