//! Root-cause ranking: event-weighted node features, a graph convolution
//! stack and a node scorer trained with the logistic loss.

use std::path::Path;

use candle_core::Tensor;
use ktele_core::metrics::{rank_of, Order};
use ktele_core::nn::{ops, Activation, Mlp2, ParamStore};
use ktele_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Network-element graph with abnormal-event counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkStateGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub num_events: usize,
    /// Sparse `(node, event, count)` triplets of the count matrix.
    #[serde(rename = "X")]
    pub counts: Vec<(usize, usize, u32)>,
    pub roots: Vec<usize>,
}

impl NetworkStateGraph {
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(Error::InvalidArgument("graph has no nodes".into()));
        }
        if self.edges.iter().any(|&(a, b)| a >= n || b >= n) {
            return Err(Error::InvalidArgument("edge endpoint out of range".into()));
        }
        if self.counts.iter().any(|&(v, e, _)| v >= n || e >= self.num_events) {
            return Err(Error::InvalidArgument("count entry out of range".into()));
        }
        if self.roots.iter().any(|&r| r >= n) {
            return Err(Error::InvalidArgument("root out of range".into()));
        }
        Ok(())
    }

    pub fn dense_counts(&self) -> Vec<Vec<f64>> {
        let mut x = vec![vec![0.0; self.num_events]; self.nodes.len()];
        for &(v, e, c) in &self.counts {
            x[v][e] += c as f64;
        }
        x
    }

    /// `+1` on roots, `−1` elsewhere.
    pub fn labels(&self) -> Vec<f64> {
        (0..self.nodes.len())
            .map(|i| if self.roots.contains(&i) { 1.0 } else { -1.0 })
            .collect()
    }

    /// The same graph with node `i` moved to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut nodes = vec![String::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            nodes[perm[i]] = n.clone();
        }
        Self {
            nodes,
            edges: self.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect(),
            num_events: self.num_events,
            counts: self.counts.iter().map(|&(v, e, c)| (perm[v], e, c)).collect(),
            roots: self.roots.iter().map(|&r| perm[r]).collect(),
        }
    }
}

pub fn read_graphs(path: &Path) -> Result<Vec<NetworkStateGraph>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let g: NetworkStateGraph = serde_json::from_str(l)?;
            g.validate()?;
            Ok(g)
        })
        .collect()
}

pub fn write_graphs(path: &Path, graphs: &[NetworkStateGraph]) -> Result<()> {
    let mut out = String::new();
    for g in graphs {
        out.push_str(&serde_json::to_string(g)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Count-weighted mean of event embeddings per node; nodes without events get zeros.
pub fn init_features(g: &NetworkStateGraph, events: &Tensor) -> Result<Tensor> {
    let (ne, _) = events.dims2()?;
    if ne != g.num_events {
        return Err(Error::InvalidArgument(format!(
            "{ne} event embeddings for {} event types",
            g.num_events
        )));
    }
    let x = g.dense_counts();
    let weights: Vec<f64> = x
        .iter()
        .flat_map(|row| {
            let total: f64 = row.iter().sum();
            row.iter().map(move |c| if total > 0.0 { c / total } else { 0.0 })
        })
        .collect();
    Ok(ops::mat(&weights, g.nodes.len(), ne)?.matmul(events)?)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for an undirected edge list.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Result<Tensor> {
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for &(x, y) in edges {
        if x != y {
            a[x][y] = 1.0;
            a[y][x] = 1.0;
        }
    }
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum::<f64>()).collect();
    let flat: Vec<f64> = (0..n)
        .flat_map(|i| {
            let (a, deg) = (&a, &deg);
            (0..n).map(move |j| a[i][j] / (deg[i] * deg[j]).sqrt())
        })
        .collect();
    ops::mat(&flat, n, n)
}

/// Graph convolution stack `H ← σ(Â H Ω)`.
#[derive(Clone, Debug)]
pub struct Gcn {
    pub weights: Vec<Tensor>,
    pub activation: Activation,
}

impl Gcn {
    pub fn new(ps: &mut ParamStore, name: &str, dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("GCN needs at least input and output dims".into()));
        }
        let weights = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                ps.normal(
                    &format!("{name}.layer{l}"),
                    &[w[0], w[1]],
                    (2.0 / (w[0] + w[1]) as f64).sqrt(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { weights, activation })
    }

    pub fn forward(&self, adj: &Tensor, h: &Tensor) -> Result<Tensor> {
        let mut h = h.clone();
        for w in &self.weights {
            h = self.activation.apply(&adj.matmul(&h.matmul(w)?)?)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcaConfig {
    pub gcn_dims: Vec<usize>,
    pub scorer_hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl RcaConfig {
    /// Hidden and output widths of 1024 and 512 with a 128-unit scorer.
    pub fn full_scale(input_dim: usize) -> Self {
        Self {
            gcn_dims: vec![input_dim, 1024, 512],
            scorer_hidden: 128,
            learning_rate: 1e-3,
            epochs: 100,
        }
    }

    pub fn desk(input_dim: usize) -> Self {
        Self {
            gcn_dims: vec![input_dim, 64, 32],
            scorer_hidden: 128,
            learning_rate: 5e-3,
            epochs: 60,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RcaModel {
    pub gcn: Gcn,
    pub scorer: Mlp2,
}

impl RcaModel {
    pub fn new(ps: &mut ParamStore, cfg: &RcaConfig) -> Result<Self> {
        let out = *cfg.gcn_dims.last().expect("validated dims");
        Ok(Self {
            gcn: Gcn::new(ps, "rca.gcn", &cfg.gcn_dims, Activation::Relu)?,
            scorer: Mlp2::new(ps, "rca.scorer", out, cfg.scorer_hidden, 1, Activation::Relu)?,
        })
    }

    /// Node scores `[V]` for one graph with node features `h0: [V, d]`.
    pub fn scores(&self, g: &NetworkStateGraph, h0: &Tensor) -> Result<Tensor> {
        let adj = normalized_adjacency(g.nodes.len(), &g.edges)?;
        let h = self.gcn.forward(&adj, h0)?;
        Ok(self.scorer.forward(&h)?.squeeze(1)?)
    }
}

/// `Σ_j ln(1 + e^{−y_j s_j})`.
pub fn logistic_loss(scores: &Tensor, labels: &[f64]) -> Result<Tensor> {
    if scores.elem_count() != labels.len() {
        return Err(Error::InvalidArgument("score and label counts differ".into()));
    }
    let margin = (scores.flatten_all()? * ops::vec1(labels)?)?;
    Ok(ops::softplus(&margin.neg()?)?.sum_all()?)
}

/// Rank of every root under descending scores.
pub fn root_ranks(scores: &[f64], roots: &[usize]) -> Vec<f64> {
    roots.iter().map(|&r| rank_of(scores, r, Order::Descending)).collect()
}
