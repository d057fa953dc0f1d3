//! Heterogeneous feature interaction between the syntactic and semantic
//! branches: attention double-pooling, normalized graph convolution and a
//! gated graph convolution over cosine-weighted edges. The mutual biaffine
//! exchange is the drop-in alternative used in ablations.

use candle_core::{Result, Tensor, D};
use candle_nn::{Linear, Module};

use crate::graphs::normalized_adjacency;
use crate::params::{linear, linear_with, masked_softmax, ForwardCtx, Init, Mlp, Scope};

/// Sparse edge list derived from a dense score matrix. An edge `(src, dst)`
/// carries messages from `src` to `dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    pub num_nodes: usize,
    pub edge_index: Vec<(usize, usize)>,
    pub edge_attr: Vec<f64>,
}

impl SparseGraph {
    /// Dense 0/1 adjacency with a one wherever an edge exists.
    pub fn adjacency(&self) -> Vec<Vec<f64>> {
        let mut a = vec![vec![0.0; self.num_nodes]; self.num_nodes];
        for &(s, d) in &self.edge_index {
            a[s][d] = 1.0;
        }
        a
    }

    /// Message weights indexed `[dst][src]`.
    pub fn message_weights(&self) -> Vec<Vec<f64>> {
        let mut w = vec![vec![0.0; self.num_nodes]; self.num_nodes];
        for (&(s, d), &e) in self.edge_index.iter().zip(&self.edge_attr) {
            w[d][s] += e;
        }
        w
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Keeps entries of `dense` above `threshold` as edges, row index as source,
/// weighted by the cosine similarity of the endpoint features.
pub fn sparsify(dense: &[Vec<f64>], features: &[Vec<f64>], threshold: f64) -> SparseGraph {
    let n = dense.len();
    let mut edge_index = Vec::new();
    let mut edge_attr = Vec::new();
    for (i, row) in dense.iter().enumerate() {
        assert_eq!(row.len(), n, "dense matrix must be square");
        for (j, &v) in row.iter().enumerate() {
            if v > threshold {
                edge_index.push((i, j));
                edge_attr.push(cosine(&features[i], &features[j]));
            }
        }
    }
    SparseGraph {
        num_nodes: n,
        edge_index,
        edge_attr,
    }
}

/// Batched counterpart of [`sparsify`] followed by
/// [`SparseGraph::message_weights`]: `W[b][dst][src]` is the cosine of the
/// endpoints when `dense[b][src][dst] > threshold`, else 0. Differentiable in
/// `features`.
pub fn message_weights(
    dense: &Tensor,
    features: &Tensor,
    mask: &Tensor,
    threshold: f64,
) -> Result<Tensor> {
    // clamp before the root: padded rows are all zero and sqrt has no finite slope there
    let norm = features.sqr()?.sum_keepdim(D::Minus1)?.maximum(1e-24)?.sqrt()?;
    let unit = features.broadcast_div(&norm)?;
    let cos = unit.matmul(&unit.t()?)?;
    let pair = mask.unsqueeze(2)?.broadcast_mul(&mask.unsqueeze(1)?)?;
    let keep = dense
        .t()?
        .gt(threshold)?
        .to_dtype(features.dtype())?
        .mul(&pair)?;
    cos.mul(&keep)
}

/// Row statistics of the attention matrix used to rescale node features:
/// H' = ReLU(H ⊙ (1 + mean_j A[i][j] + max_j A[i][j])). The mean runs over
/// real nodes.
pub fn sadpool(h: &Tensor, a_sem: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let n = mask.sum_keepdim(1)?.unsqueeze(2)?;
    let s_mean = a_sem.sum_keepdim(D::Minus1)?.broadcast_div(&n)?;
    let s_max = a_sem.max_keepdim(D::Minus1)?;
    let scale = ((s_mean + s_max)? + 1.0)?;
    h.broadcast_mul(&scale)?.relu()
}

/// Normalized graph convolution D̂^{-1/2}(A + I)D̂^{-1/2} H Θ without bias.
pub struct GcnConv {
    theta: Linear,
}

impl GcnConv {
    pub fn new(scope: &Scope, input: usize, output: usize) -> Result<Self> {
        Ok(GcnConv {
            theta: linear(scope, input, output, false)?,
        })
    }

    pub fn forward(&self, h: &Tensor, a: &Tensor, mask: &Tensor) -> Result<Tensor> {
        normalized_adjacency(a, mask)?.matmul(&self.theta.forward(h)?)
    }

    /// Same propagation over a sparse edge list for a single graph.
    pub fn forward_sparse(&self, h: &Tensor, graph: &SparseGraph) -> Result<Tensor> {
        let n = graph.num_nodes;
        let a = Tensor::from_vec(graph.adjacency().concat(), (1, n, n), h.device())?
            .to_dtype(h.dtype())?;
        let mask = Tensor::ones((1, n), h.dtype(), h.device())?;
        self.forward(&h.unsqueeze(0)?, &a, &mask)?.squeeze(0)
    }
}

/// Gated recurrent cell with reset, update and candidate gates:
/// h' = (1 − z) ⊙ n + z ⊙ h.
pub struct GruCell {
    input: Linear,
    hidden: Linear,
}

impl GruCell {
    pub fn new(scope: &Scope, input: usize, hidden: usize) -> Result<Self> {
        let init = Init::Uniform(1.0 / (hidden as f64).sqrt());
        Ok(GruCell {
            input: linear_with(&scope.pp("input"), input, 3 * hidden, true, init)?,
            hidden: linear_with(&scope.pp("hidden"), hidden, 3 * hidden, true, init)?,
        })
    }

    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let gi = self.input.forward(x)?.chunk(3, D::Minus1)?;
        let gh = self.hidden.forward(h)?.chunk(3, D::Minus1)?;
        let r = candle_nn::ops::sigmoid(&(&gi[0] + &gh[0])?)?;
        let z = candle_nn::ops::sigmoid(&(&gi[1] + &gh[1])?)?;
        let n = (&gi[2] + (r * &gh[2])?)?.tanh()?;
        let keep = z.affine(-1.0, 1.0)?;
        (keep * n)? + (z * h)?
    }
}

/// Gated graph convolution: per layer, m_i = Σ_j W[i][j] Θ h_j followed by
/// a shared gated cell h_i ← GRU(m_i, h_i).
pub struct GatedGraphConv {
    thetas: Vec<Linear>,
    cell: GruCell,
}

impl GatedGraphConv {
    pub fn new(scope: &Scope, dim: usize, layers: usize) -> Result<Self> {
        Ok(GatedGraphConv {
            thetas: (0..layers)
                .map(|i| linear(&scope.pp("theta").pp(i), dim, dim, false))
                .collect::<Result<_>>()?,
            cell: GruCell::new(&scope.pp("cell"), dim, dim)?,
        })
    }

    pub fn cell(&self) -> &GruCell {
        &self.cell
    }

    /// `weights` is `(B, N, N)` indexed `[dst][src]`, as from
    /// [`message_weights`].
    pub fn forward(&self, h: &Tensor, weights: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let mut h = h.clone();
        for theta in &self.thetas {
            let m = weights.matmul(&theta.forward(&h)?)?;
            h = self.cell.step(&m, &h)?;
        }
        h.broadcast_mul(&mask.unsqueeze(2)?)
    }

    pub fn forward_sparse(&self, h: &Tensor, graph: &SparseGraph) -> Result<Tensor> {
        let n = graph.num_nodes;
        let w = Tensor::from_vec(graph.message_weights().concat(), (1, n, n), h.device())?
            .to_dtype(h.dtype())?;
        let mask = Tensor::ones((1, n), h.dtype(), h.device())?;
        self.forward(&h.unsqueeze(0)?, &w, &mask)?.squeeze(0)
    }
}

/// Which adjacency drives a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Syntactic,
    Semantic,
}

/// One branch of the interaction module: concatenate the two channels,
/// propagate over the branch graph, pool with the attention statistics and
/// run the gated convolution. [`split_channels`] separates the result.
pub struct HfimBranch {
    kind: BranchKind,
    convs: Vec<GcnConv>,
    gated: GatedGraphConv,
    sadpool_layers: usize,
    threshold: f64,
}

impl HfimBranch {
    pub fn new(
        scope: &Scope,
        kind: BranchKind,
        dim: usize,
        gcnconv_layers: usize,
        gatedconv_layers: usize,
        sadpool_layers: usize,
        threshold: f64,
    ) -> Result<Self> {
        Ok(HfimBranch {
            kind,
            convs: (0..gcnconv_layers)
                .map(|i| GcnConv::new(&scope.pp("gcn_conv").pp(i), dim, dim))
                .collect::<Result<_>>()?,
            gated: GatedGraphConv::new(&scope.pp("gated_conv"), dim, gatedconv_layers)?,
            sadpool_layers,
            threshold,
        })
    }

    /// `h` is the concatenated `(B, N, d_l + d_b)` input.
    pub fn forward(
        &self,
        h: &Tensor,
        a_syn: &Tensor,
        a_sem: &Tensor,
        mask: &Tensor,
        ctx: &mut ForwardCtx,
    ) -> Result<Tensor> {
        let mask3 = mask.unsqueeze(2)?;
        let graph = match self.kind {
            BranchKind::Syntactic => a_syn,
            BranchKind::Semantic => a_sem,
        };
        let mut x = h.clone();
        for conv in &self.convs {
            ctx.record("hfim.gcn_conv");
            x = conv.forward(&x, graph, mask)?.relu()?.broadcast_mul(&mask3)?;
        }
        for _ in 0..self.sadpool_layers {
            ctx.record("hfim.sadpool");
            x = sadpool(&x, a_sem, mask)?;
        }
        // the dependency graph is already sparse, so no threshold there
        let threshold = match self.kind {
            BranchKind::Syntactic => 0.0,
            BranchKind::Semantic => self.threshold,
        };
        let w = message_weights(graph, &x, mask, threshold)?;
        ctx.record("hfim.gated_graph_conv");
        self.gated.forward(&x, &w, mask)
    }
}

/// Cross-attention exchange between the syntactic and semantic streams:
/// H_syn' = softmax(H_syn W₁ H_semᵀ) H_sem and symmetrically.
pub struct MutualBiaffine {
    w_syn: Tensor,
    w_sem: Tensor,
}

impl MutualBiaffine {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        let init = Init::Uniform(1.0 / (dim as f64).sqrt());
        Ok(MutualBiaffine {
            w_syn: scope.get("syn_weight", &[dim, dim], init)?,
            w_sem: scope.get("sem_weight", &[dim, dim], init)?,
        })
    }

    pub fn forward(&self, h_syn: &Tensor, h_sem: &Tensor, mask: &Tensor) -> Result<(Tensor, Tensor)> {
        let col = mask.unsqueeze(1)?;
        let row = mask.unsqueeze(2)?;
        let exchange = |a: &Tensor, b: &Tensor, w: &Tensor| -> Result<Tensor> {
            let scores = a.broadcast_matmul(w)?.matmul(&b.t()?)?;
            masked_softmax(&scores, &col)?.matmul(b)?.broadcast_mul(&row)
        };
        Ok((
            exchange(h_syn, h_sem, &self.w_syn)?,
            exchange(h_sem, h_syn, &self.w_sem)?,
        ))
    }
}

/// Splits `(B, N, d_l + d_b)` positionally into the LSTM and BERT blocks.
pub fn split_channels(h: &Tensor, d_lstm: usize) -> Result<(Tensor, Tensor)> {
    let total = h.dim(D::Minus1)?;
    Ok((h.narrow(2, 0, d_lstm)?, h.narrow(2, d_lstm, total - d_lstm)?))
}

/// Final fusion MLP over syntactic LSTM features and semantic BERT features.
pub struct Fuse {
    mlp: Mlp,
}

impl Fuse {
    pub fn new(scope: &Scope, d_lstm: usize, d_bert: usize, out: usize) -> Result<Self> {
        Ok(Fuse {
            mlp: Mlp::new(scope, d_lstm + d_bert, out, out)?,
        })
    }

    pub fn forward(&self, lstm_syn: &Tensor, bert_sem: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.mlp
            .forward(&Tensor::cat(&[lstm_syn, bert_sem], 2)?)?
            .broadcast_mul(&mask.unsqueeze(2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::{DType, Device};

    fn t3(rows: &[Vec<f64>]) -> Tensor {
        let n = rows.len();
        let m = rows[0].len();
        Tensor::from_vec(rows.concat(), (1, n, m), &Device::Cpu).unwrap()
    }

    fn ones(n: usize) -> Tensor {
        Tensor::ones((1, n), DType::F64, &Device::Cpu).unwrap()
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.get(0).unwrap().to_vec2::<f64>().unwrap()
    }

    #[test]
    fn sadpool_degenerate_and_uniform() {
        let h = vec![vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 0.0], vec![2.0, 2.0]];
        let zero = vec![vec![0.0; 4]; 4];
        let out = rows(&sadpool(&t3(&h), &t3(&zero), &ones(4)).unwrap());
        for (o, r) in out.iter().zip(&h) {
            for (a, b) in o.iter().zip(r) {
                assert_eq!(*a, b.max(0.0));
            }
        }
        let uniform = vec![vec![0.25; 4]; 4];
        let out = rows(&sadpool(&t3(&h), &t3(&uniform), &ones(4)).unwrap());
        for (o, r) in out.iter().zip(&h) {
            for (a, b) in o.iter().zip(r) {
                assert!((a - (1.5 * b).max(0.0)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gcn_conv_isolated_node_and_edge() {
        let store = ParamStore::new(1, DType::F64, Device::Cpu);
        let conv = GcnConv::new(&store.root(), 2, 2).unwrap();
        store
            .assign("weight", &Tensor::eye(2, DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let h = t3(&[vec![0.7, -0.2]]);
        let out = conv.forward(&h, &t3(&[vec![0.0]]), &ones(1)).unwrap();
        assert_eq!(rows(&out), vec![vec![0.7, -0.2]]);
        let g = SparseGraph {
            num_nodes: 2,
            edge_index: vec![(0, 1), (1, 0)],
            edge_attr: vec![1.0, 1.0],
        };
        let eye = Tensor::eye(2, DType::F64, &Device::Cpu).unwrap();
        let out = conv.forward_sparse(&eye, &g).unwrap().to_vec2::<f64>().unwrap();
        for v in out.iter().flatten() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn sparsify_threshold_and_cosine() {
        let dense = vec![vec![0.2, 0.0, 0.5], vec![0.1, 0.3, 0.0], vec![0.4, 0.4, 0.4]];
        let feats = vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 0.0]];
        let g = sparsify(&dense, &feats, 0.0);
        assert_eq!(g.edge_index, vec![(0, 0), (0, 2), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)]);
        assert_eq!(g.edge_attr, vec![1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let full = sparsify(&vec![vec![0.5; 3]; 3], &feats, 0.0);
        assert_eq!(full.edge_index.len(), 9);
        assert!(full.edge_attr.iter().all(|w| (-1.0..=1.0).contains(w)));
    }

    #[test]
    fn batched_message_weights_match_sparse_graph() {
        let dense = vec![vec![0.2, 0.0, 0.5], vec![0.1, 0.3, 0.0], vec![0.4, 0.0, 0.4]];
        let feats = vec![vec![1.0, 0.5], vec![-0.3, 2.0], vec![3.0, 0.1]];
        let expected = sparsify(&dense, &feats, 0.15).message_weights();
        let w = message_weights(&t3(&dense), &t3(&feats), &ones(3), 0.15).unwrap();
        for (a, b) in rows(&w).iter().flatten().zip(expected.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_feature_rows_keep_gradients_finite() {
        let dense = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let feats = candle_core::Var::from_tensor(&t3(&[vec![1.0, 2.0], vec![0.0, 0.0]])).unwrap();
        let mask = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
        let w = message_weights(&t3(&dense), feats.as_tensor(), &mask, 0.0).unwrap();
        let grads = w.sum_all().unwrap().backward().unwrap();
        let g = grads.get(&feats).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|v| v.is_finite()), "{g:?}");
    }

    #[test]
    fn gated_conv_without_edges_is_the_bare_cell() {
        let store = ParamStore::new(2, DType::F64, Device::Cpu);
        let gated = GatedGraphConv::new(&store.root(), 3, 1).unwrap();
        let h = t3(&[vec![0.3, -1.0, 0.8], vec![1.1, 0.2, -0.4]]);
        let none = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let out = gated.forward(&h, &none, &ones(2)).unwrap();
        let bare = gated.cell().step(&h.zeros_like().unwrap(), &h).unwrap();
        assert_eq!(rows(&out), rows(&bare));
    }

    #[test]
    fn gated_conv_self_edge_with_identity_theta() {
        let store = ParamStore::new(2, DType::F64, Device::Cpu);
        let gated = GatedGraphConv::new(&store.root(), 3, 1).unwrap();
        store
            .assign("theta.0.weight", &Tensor::eye(3, DType::F64, &Device::Cpu).unwrap())
            .unwrap();
        let h = Tensor::new(&[[0.3f64, -1.0, 0.8]], &Device::Cpu).unwrap();
        let g = SparseGraph {
            num_nodes: 1,
            edge_index: vec![(0, 0)],
            edge_attr: vec![1.0],
        };
        let out = gated.forward_sparse(&h, &g).unwrap().to_vec2::<f64>().unwrap();
        let expected = gated.cell().step(&h, &h).unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in out[0].iter().zip(&expected[0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn biaffine_keeps_shapes_and_ignores_padding() {
        let store = ParamStore::new(2, DType::F64, Device::Cpu);
        let bi = MutualBiaffine::new(&store.root(), 2).unwrap();
        let a = t3(&[vec![1.0, 0.0], vec![0.5, 0.5], vec![9.0, 9.0]]);
        let b = t3(&[vec![0.0, 1.0], vec![-0.5, 0.2], vec![9.0, -9.0]]);
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0]], &Device::Cpu).unwrap();
        let (x, y) = bi.forward(&a, &b, &mask).unwrap();
        let (x, y) = (rows(&x), rows(&y));
        assert_eq!(x[2], vec![0.0, 0.0]);
        assert_eq!(y[2], vec![0.0, 0.0]);
        // each real output row is a convex combination of the real rows of the other stream
        for row in &x[..2] {
            assert!(row[0] <= 0.0 + 1e-12 && row[0] >= -0.5 - 1e-12);
        }
    }

    #[test]
    fn split_is_positional() {
        let h = t3(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]);
        let (l, b) = split_channels(&h, 2).unwrap();
        assert_eq!(rows(&l), vec![vec![1.0, 2.0]]);
        assert_eq!(rows(&b), vec![vec![3.0, 4.0, 5.0]]);
    }

    #[test]
    fn fuse_zero_in_zero_out() {
        let store = ParamStore::new(2, DType::F64, Device::Cpu);
        let fuse = Fuse::new(&store.root(), 2, 3, 4).unwrap();
        for (name, var) in store.vars() {
            if name.ends_with("bias") {
                store.assign(&name, &var.zeros_like().unwrap()).unwrap();
            }
        }
        let l = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        let out = fuse.forward(&l, &b, &ones(2)).unwrap();
        assert_eq!(out.dims(), &[1, 2, 4]);
        assert!(rows(&out).iter().flatten().all(|&v| v == 0.0));
    }
}
