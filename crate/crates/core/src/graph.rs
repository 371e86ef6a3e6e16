//! Graph reasoning branch.
//!
//! Each modality contributes `n` nodes, one per pooling scale; all nodes are
//! resampled to a common resolution so edge features `Conv(v_l - v_k)` are
//! defined. Nodes connect across scales within a modality and across
//! modalities at equal scale, in both directions. Every round refreshes the
//! edges, sums sigmoid-gated neighbour features into a message, and updates
//! each node with a convolutional GRU. A shared convolution reads each
//! modality's nodes back out at input resolution.

use candle_core::{Module, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{conv, sigmoid, Conv};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrConfig {
    /// Pooling scales per modality; scale `i` pools by `2^(i+1)`.
    pub scales: usize,
    /// Message-passing rounds.
    pub rounds: usize,
    /// Kernel size of the GRU convolutions.
    pub gru_kernel: usize,
}

impl Default for GrConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            rounds: 1,
            gru_kernel: 3,
        }
    }
}

impl GrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 2 {
            return Err(invalid!(
                "graph needs at least 2 scales, got {}",
                self.scales
            ));
        }
        if self.rounds == 0 {
            return Err(invalid!("graph needs at least one message-passing round"));
        }
        if self.gru_kernel.is_multiple_of(2) {
            return Err(invalid!("GRU kernel must be odd, got {}", self.gru_kernel));
        }
        Ok(())
    }

    pub fn pooling_factors(&self) -> Vec<usize> {
        (1..=self.scales).map(|i| 1usize << i).collect()
    }

    /// Downsampling factor of the shared node resolution (the middle scale).
    pub fn common_factor(&self) -> usize {
        self.pooling_factors()[(self.scales - 1) / 2]
    }

    /// Spatial sizes must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        1usize << self.scales
    }
}

/// Node indices: `0..n` are visible nodes `c_i`, `n..2n` infrared `d_i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    scales: usize,
    edges: Vec<(usize, usize)>,
}

impl Adjacency {
    pub fn new(scales: usize) -> Self {
        let n = scales;
        let mut edges = Vec::new();
        for l in 0..2 * n {
            for k in 0..2 * n {
                if k == l {
                    continue;
                }
                let same_modality = (k < n) == (l < n);
                let same_scale = k % n == l % n;
                if same_modality || same_scale {
                    edges.push((k, l));
                }
            }
        }
        Self { scales, edges }
    }

    pub fn node_count(&self) -> usize {
        2 * self.scales
    }

    /// Ordered `(source, target)` pairs.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edge indices and sources of the edges entering `l`.
    pub fn incoming(&self, l: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, (_, t))| *t == l)
            .map(|(i, (k, _))| (i, *k))
    }
}

/// Nodes, edge features (aligned with `adjacency.edges()`) and connectivity.
#[derive(Debug, Clone)]
pub struct GraphBundle {
    pub nodes: Vec<Tensor>,
    pub edges: Vec<Tensor>,
    pub adjacency: Adjacency,
}

#[derive(Debug, Clone)]
pub struct ConvGru {
    gates: Conv,
    candidate: Conv,
    channels: usize,
}

impl ConvGru {
    fn new(vb: VarBuilder, channels: usize, k: usize) -> Result<Self> {
        Ok(Self {
            gates: conv(vb.pp("gates"), 2 * channels, 2 * channels, k)?,
            candidate: conv(vb.pp("candidate"), 2 * channels, channels, k)?,
            channels,
        })
    }

    /// Convolution producing the update and reset gates.
    pub fn gates(&self) -> &Conv {
        &self.gates
    }

    pub fn candidate(&self) -> &Conv {
        &self.candidate
    }

    /// One GRU step: `z` and `r` from `[input, hidden]`, candidate from
    /// `[input, r * hidden]`, result `(1 - z) * hidden + z * candidate`.
    pub fn step(&self, hidden: &Tensor, input: &Tensor) -> Result<Tensor> {
        let c = self.channels;
        let g = sigmoid(&self.gates.forward(&Tensor::cat(&[input, hidden], 1)?)?)?;
        let z = g.narrow(1, 0, c)?;
        let r = g.narrow(1, c, c)?;
        let cand = self
            .candidate
            .forward(&Tensor::cat(&[input.clone(), (&r * hidden)?], 1)?)?
            .tanh()?;
        let keep = (z.ones_like()? - &z)?;
        Ok(((keep * hidden)? + (z * cand)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GraphReasoning {
    cfg: GrConfig,
    branches: Vec<Conv>,
    edge_conv: Conv,
    gru: ConvGru,
    readout: Conv,
    adjacency: Adjacency,
}

impl GraphReasoning {
    pub fn new(vb: VarBuilder, channels: usize, cfg: &GrConfig) -> Result<Self> {
        cfg.validate()?;
        let branches = (0..cfg.scales)
            .map(|i| conv(vb.pp(format!("branch{i}")), channels, channels, 3))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: *cfg,
            branches,
            edge_conv: conv(vb.pp("edge"), channels, channels, 3)?,
            gru: ConvGru::new(vb.pp("gru"), channels, cfg.gru_kernel)?,
            readout: conv(vb.pp("readout"), cfg.scales * channels, channels, 1)?,
            adjacency: Adjacency::new(cfg.scales),
        })
    }

    pub fn config(&self) -> &GrConfig {
        &self.cfg
    }

    pub fn gru(&self) -> &ConvGru {
        &self.gru
    }

    fn scale_nodes(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, _, h, w) = x.dims4()?;
        let fc = self.cfg.common_factor();
        self.cfg
            .pooling_factors()
            .into_iter()
            .zip(&self.branches)
            .map(|(f, branch)| {
                let node = branch.forward(&x.avg_pool2d(f)?)?;
                let node = if f < fc {
                    node.avg_pool2d(fc / f)?
                } else if f > fc {
                    node.upsample_nearest2d(h / fc, w / fc)?
                } else {
                    node
                };
                Ok(node)
            })
            .collect()
    }

    /// Pools both modalities into `2n` nodes and initializes every edge.
    pub fn build_nodes(&self, phi_v: &Tensor, phi_i: &Tensor) -> Result<GraphBundle> {
        if phi_v.dims() != phi_i.dims() {
            return Err(Error::ShapeMismatch {
                expected: phi_v.dims().to_vec(),
                actual: phi_i.dims().to_vec(),
            });
        }
        let (_, _, h, w) = phi_v.dims4()?;
        let m = self.cfg.required_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(invalid!(
                "graph input {h}x{w} is not a multiple of {m}; pad first"
            ));
        }
        let mut nodes = self.scale_nodes(phi_v)?;
        nodes.extend(self.scale_nodes(phi_i)?);
        let mut g = GraphBundle {
            nodes,
            edges: Vec::new(),
            adjacency: self.adjacency.clone(),
        };
        self.refresh_edges(&mut g)?;
        Ok(g)
    }

    /// `e_{k,l} = Conv(v_l - v_k)`.
    pub fn edge_embed(&self, v_k: &Tensor, v_l: &Tensor) -> Result<Tensor> {
        if v_k.dims() != v_l.dims() {
            return Err(Error::ShapeMismatch {
                expected: v_k.dims().to_vec(),
                actual: v_l.dims().to_vec(),
            });
        }
        Ok(self.edge_conv.forward(&(v_l - v_k)?)?)
    }

    pub fn refresh_edges(&self, g: &mut GraphBundle) -> Result<()> {
        g.edges = g
            .adjacency
            .edges()
            .iter()
            .map(|&(k, l)| self.edge_embed(&g.nodes[k], &g.nodes[l]))
            .collect::<Result<Vec<_>>>()?;
        Ok(())
    }

    /// Messages `m_l = sum_{k in N(l)} sigmoid(e_{k,l}) * v_k`.
    pub fn message_pass(&self, g: &GraphBundle) -> Result<Vec<Tensor>> {
        message_pass(g)
    }

    /// GRU update of every node from the previous snapshot.
    pub fn node_update(&self, g: &GraphBundle, messages: &[Tensor]) -> Result<GraphBundle> {
        if messages.len() != g.nodes.len() {
            return Err(invalid!(
                "{} messages for {} nodes",
                messages.len(),
                g.nodes.len()
            ));
        }
        let nodes = g
            .nodes
            .iter()
            .zip(messages)
            .map(|(v, m)| self.gru.step(v, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(GraphBundle {
            nodes,
            edges: g.edges.clone(),
            adjacency: g.adjacency.clone(),
        })
    }

    /// Merges one modality's nodes back to `h x w`.
    pub fn readout(&self, nodes: &[Tensor], h: usize, w: usize) -> Result<Tensor> {
        let up = nodes
            .iter()
            .map(|n| n.upsample_nearest2d(h, w))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(self.readout.forward(&Tensor::cat(&up, 1)?)?)
    }

    /// Runs the rounds starting from an already built bundle.
    pub fn reason(&self, mut g: GraphBundle) -> Result<GraphBundle> {
        for round in 0..self.cfg.rounds {
            if round > 0 {
                self.refresh_edges(&mut g)?;
            }
            let messages = self.message_pass(&g)?;
            g = self.node_update(&g, &messages)?;
        }
        Ok(g)
    }

    /// `(Phi_G^V, Phi_G^I)` at input resolution.
    pub fn forward(&self, phi_v: &Tensor, phi_i: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = phi_v.dims4()?;
        let g = self.reason(self.build_nodes(phi_v, phi_i)?)?;
        let n = self.cfg.scales;
        Ok((
            self.readout(&g.nodes[..n], h, w)?,
            self.readout(&g.nodes[n..], h, w)?,
        ))
    }
}

/// Sigmoid-gated neighbour sums for every node of `g`.
pub fn message_pass(g: &GraphBundle) -> Result<Vec<Tensor>> {
    if g.edges.len() != g.adjacency.edge_count() {
        return Err(invalid!(
            "graph has {} edge features for {} edges",
            g.edges.len(),
            g.adjacency.edge_count()
        ));
    }
    (0..g.nodes.len())
        .map(|l| {
            let mut acc: Option<Tensor> = None;
            for (e, k) in g.adjacency.incoming(l) {
                let term = (sigmoid(&g.edges[e])? * &g.nodes[k])?;
                acc = Some(match acc {
                    Some(a) => (a + term)?,
                    None => term,
                });
            }
            acc.ok_or_else(|| invalid!("node {l} has no neighbours"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_counts() {
        for n in 2..6 {
            let a = Adjacency::new(n);
            let intra = 2 * n * (n - 1);
            let inter = 2 * n;
            assert_eq!(a.edge_count(), intra + inter);
            assert_eq!(a.node_count(), 2 * n);
        }
        assert_eq!(Adjacency::new(3).edge_count(), 18);
    }

    #[test]
    fn adjacency_pattern() {
        let a = Adjacency::new(3);
        let has = |k, l| a.edges().contains(&(k, l));
        assert!(has(0, 1) && has(1, 0) && has(0, 2));
        assert!(has(3, 4) && has(5, 3));
        assert!(has(0, 3) && has(3, 0) && has(2, 5));
        assert!(!has(0, 4) && !has(1, 5) && !has(0, 0));
        // Every node has (n - 1) same-modality neighbours plus its twin.
        for l in 0..6 {
            assert_eq!(a.incoming(l).count(), 3);
        }
    }

    #[test]
    fn pooling_bookkeeping() {
        let c = GrConfig::default();
        assert_eq!(c.pooling_factors(), vec![2, 4, 8]);
        assert_eq!(c.common_factor(), 4);
        assert_eq!(c.required_multiple(), 8);
        let c2 = GrConfig { scales: 2, ..c };
        assert_eq!(c2.common_factor(), 2);
        assert!(GrConfig { scales: 1, ..c }.validate().is_err());
        assert!(GrConfig { rounds: 0, ..c }.validate().is_err());
    }
}
