//! The relaxed hierarchical search space: an L-layer grid of feature nodes
//! at up to four resolutions, connected by up-/same-/down-sampling blocks
//! with eta-weighted edges, and partial-channel mixed cells over eight
//! candidate convolutional operations.

use serde::{Deserialize, Serialize};

use crate::ndtensor::{Result, TensorError};

mod cell;
mod supernet;

pub use cell::{cell_op_forward, make_cell_ops, make_one_cell_op, mixed_op_partial, CellOpWeights, LEAKY_SLOPE};
pub use supernet::{
    build_supernet, canonical_unet_path, normalize_eta, BlockParams, PartialChannelConfig,
    Supernet, TopologyMode,
};

/// Resolutions per layer; fixed by the search-space design.
pub const RESOLUTIONS: usize = 4;

/// Number of candidate operations per cell.
pub const CANDIDATE_OPS: usize = 8;

/// Geometry of the topology grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyShape {
    /// Layer count L.
    pub layers: usize,
    /// Feature-node resolutions per layer (fixed at 4).
    pub resolutions: usize,
    /// Channels at the finest resolution.
    pub base_channels: usize,
    /// Spatial rank (2 or 3).
    pub dims: usize,
    /// Cap on the channel multiplier at coarse resolutions.
    pub channel_cap: usize,
    /// Forced encoder/decoder transitions at each end (0 = fully
    /// searchable).
    pub u_shape_stem: usize,
}

impl Default for TopologyShape {
    fn default() -> Self {
        Self {
            layers: 8,
            resolutions: RESOLUTIONS,
            base_channels: 8,
            dims: 2,
            channel_cap: 8,
            u_shape_stem: 0,
        }
    }
}

impl TopologyShape {
    pub fn validate(&self) -> Result<()> {
        if self.resolutions != RESOLUTIONS {
            return Err(TensorError::Invalid {
                op: "TopologyShape",
                msg: format!("resolutions is fixed at {RESOLUTIONS}"),
            });
        }
        if self.layers < 2 {
            return Err(TensorError::Invalid {
                op: "TopologyShape",
                msg: "need at least 2 layers".into(),
            });
        }
        if !(self.dims == 2 || self.dims == 3) {
            return Err(TensorError::Invalid {
                op: "TopologyShape",
                msg: format!("dims must be 2 or 3, got {}", self.dims),
            });
        }
        if self.base_channels == 0 || self.channel_cap == 0 {
            return Err(TensorError::Invalid {
                op: "TopologyShape",
                msg: "base_channels and channel_cap must be >= 1".into(),
            });
        }
        if self.u_shape_stem > 0 {
            if self.layers < 5 {
                return Err(TensorError::Invalid {
                    op: "TopologyShape",
                    msg: "u_shape_stem requires at least 5 layers".into(),
                });
            }
            if 2 * self.u_shape_stem >= self.layers || self.u_shape_stem >= self.resolutions {
                return Err(TensorError::Invalid {
                    op: "TopologyShape",
                    msg: format!(
                        "u_shape_stem {} too deep for {} layers / {} resolutions",
                        self.u_shape_stem, self.layers, self.resolutions
                    ),
                });
            }
        }
        Ok(())
    }

    /// Channel count at resolution index s (0 = finest).
    pub fn channels(&self, s: usize) -> usize {
        self.base_channels * (1usize << s).min(self.channel_cap)
    }

    /// Spatial extents at resolution s for a given input extent set.
    pub fn extents(&self, input: &[usize], s: usize) -> Vec<usize> {
        input.iter().map(|&e| e >> s).collect()
    }

    /// Input extents must be divisible by this for the grid to nest.
    pub fn extent_divisor(&self) -> usize {
        1 << (self.resolutions - 1)
    }
}

/// Candidate operations of each cell, in canonical (serialization and
/// tie-break) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv1,
    Conv3,
    Conv5,
    SepConv3,
    SepConv5,
    AtrousConv3,
    AtrousConv5,
    AtrousConv7,
}

impl OpKind {
    pub const ALL: [OpKind; CANDIDATE_OPS] = [
        OpKind::Conv1,
        OpKind::Conv3,
        OpKind::Conv5,
        OpKind::SepConv3,
        OpKind::SepConv5,
        OpKind::AtrousConv3,
        OpKind::AtrousConv5,
        OpKind::AtrousConv7,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv1 => "conv1",
            OpKind::Conv3 => "conv3",
            OpKind::Conv5 => "conv5",
            OpKind::SepConv3 => "sep_conv3",
            OpKind::SepConv5 => "sep_conv5",
            OpKind::AtrousConv3 => "atrous_conv3",
            OpKind::AtrousConv5 => "atrous_conv5",
            OpKind::AtrousConv7 => "atrous_conv7",
        }
    }

    pub fn kernel_extent(self) -> usize {
        match self {
            OpKind::Conv1 => 1,
            OpKind::Conv3 | OpKind::SepConv3 | OpKind::AtrousConv3 => 3,
            OpKind::Conv5 | OpKind::SepConv5 | OpKind::AtrousConv5 => 5,
            OpKind::AtrousConv7 => 7,
        }
    }

    pub fn dilation(self) -> usize {
        match self {
            OpKind::AtrousConv3 | OpKind::AtrousConv5 | OpKind::AtrousConv7 => 2,
            _ => 1,
        }
    }

    pub fn is_separable(self) -> bool {
        matches!(self, OpKind::SepConv3 | OpKind::SepConv5)
    }
}

/// Block / edge kind between adjacent layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    /// Coarser-to-finer transition (resolution doubles).
    Up,
    /// Same-resolution transition (with identity skip).
    Same,
    /// Finer-to-coarser transition (resolution halves).
    Down,
}

impl EdgeKind {
    pub fn name(self) -> &'static str {
        match self {
            EdgeKind::Up => "up",
            EdgeKind::Same => "same",
            EdgeKind::Down => "down",
        }
    }

    /// Index into the per-kind alpha rows / block tables.
    pub fn index(self) -> usize {
        match self {
            EdgeKind::Up => 0,
            EdgeKind::Same => 1,
            EdgeKind::Down => 2,
        }
    }
}

/// A feature node at (layer, resolution index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeRef {
    pub layer: usize,
    pub res: usize,
}

/// A directed block edge between nodes in adjacent layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeRef {
    pub from: NodeRef,
    pub to: NodeRef,
    pub kind: EdgeKind,
}

/// The layered DAG of live nodes and searchable edges. Only nodes that
/// lie on some path from the input node (layer 0, finest) to the output
/// node (last layer, finest) are instantiated, so every edge can carry
/// gradient from the objective.
#[derive(Debug, Clone)]
pub struct TopologyGraph {
    pub shape: TopologyShape,
    /// Live nodes ordered by (layer, resolution).
    pub nodes: Vec<NodeRef>,
    /// Edges ordered by (target layer, target resolution, Up < Same < Down).
    pub edges: Vec<EdgeRef>,
    /// Per node (same order as `nodes`): indices into `edges` of its
    /// incoming edges.
    pub incoming: Vec<Vec<usize>>,
}

impl TopologyGraph {
    pub fn node_index(&self, node: NodeRef) -> Option<usize> {
        self.nodes.iter().position(|&n| n == node)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn source(&self) -> NodeRef {
        NodeRef { layer: 0, res: 0 }
    }

    pub fn sink(&self) -> NodeRef {
        NodeRef {
            layer: self.shape.layers - 1,
            res: 0,
        }
    }

    /// Live resolution indices at a layer.
    pub fn live_resolutions(&self, layer: usize) -> Vec<usize> {
        self.nodes
            .iter()
            .filter(|n| n.layer == layer)
            .map(|n| n.res)
            .collect()
    }
}

/// Edge count of the hypothetical fully connected grid with all four
/// resolutions present in every layer: (2+3+3+2) per transition.
pub fn full_grid_edge_count(layers: usize) -> usize {
    10 * layers.saturating_sub(1)
}

/// The 10L - 40 edge count quoted for the path-connected search space;
/// matches [`TopologyGraph::edge_count`] for fully searchable shapes with
/// L >= 7.
pub fn path_edge_formula(layers: usize) -> isize {
    10 * layers as isize - 40
}

/// Build the live node set and edge list for a shape.
pub fn build_graph(shape: &TopologyShape) -> Result<TopologyGraph> {
    shape.validate()?;
    let l_count = shape.layers;
    let n_res = shape.resolutions;
    let stem = shape.u_shape_stem;

    // Forward reachability from the source node under the stem constraint.
    let mut forward: Vec<Vec<bool>> = vec![vec![false; n_res]; l_count];
    forward[0][0] = true;
    for l in 1..l_count {
        for s in 0..n_res {
            forward[l][s] = if l <= stem {
                // Within the head stem only Down edges exist.
                s >= 1 && forward[l - 1][s - 1]
            } else {
                (s + 1 < n_res && forward[l - 1][s + 1]) // Up from coarser
                    || forward[l - 1][s] // Same
                    || (s >= 1 && forward[l - 1][s - 1]) // Down from finer
            };
        }
    }

    // Backward reachability from the sink under the tail stem constraint.
    let mut backward: Vec<Vec<bool>> = vec![vec![false; n_res]; l_count];
    backward[l_count - 1][0] = true;
    for l in (0..l_count - 1).rev() {
        let tail = l >= l_count - 1 - stem; // the last `stem` transitions carry only Up edges
        for s in 0..n_res {
            backward[l][s] = if tail {
                s >= 1 && backward[l + 1][s - 1]
            } else {
                (s >= 1 && backward[l + 1][s - 1]) // Up to finer
                    || backward[l + 1][s] // Same
                    || (s + 1 < n_res && backward[l + 1][s + 1]) // Down to coarser
            };
        }
    }

    let live = |l: usize, s: usize| forward[l][s] && backward[l][s];

    let mut nodes = Vec::new();
    for l in 0..l_count {
        for s in 0..n_res {
            if live(l, s) {
                nodes.push(NodeRef { layer: l, res: s });
            }
        }
    }

    let mut edges = Vec::new();
    let mut incoming = vec![Vec::new(); nodes.len()];
    for (ni, node) in nodes.iter().enumerate() {
        let l = node.layer;
        let s = node.res;
        if l == 0 {
            continue;
        }
        let head_stem = l <= stem;
        let tail_stem = l > l_count - 1 - stem;
        // Eq-order: Up (from coarser), Same, Down (from finer).
        let candidates = [
            (s + 1, EdgeKind::Up),
            (s, EdgeKind::Same),
            (s.wrapping_sub(1), EdgeKind::Down),
        ];
        for (s_from, kind) in candidates {
            if s_from >= n_res {
                continue;
            }
            if head_stem && kind != EdgeKind::Down {
                continue;
            }
            if tail_stem && kind != EdgeKind::Up {
                continue;
            }
            if !live(l - 1, s_from) {
                continue;
            }
            let edge_idx = edges.len();
            edges.push(EdgeRef {
                from: NodeRef {
                    layer: l - 1,
                    res: s_from,
                },
                to: *node,
                kind,
            });
            incoming[ni].push(edge_idx);
        }
        if incoming[ni].is_empty() {
            return Err(TensorError::Invalid {
                op: "build_graph",
                msg: format!("node (layer {l}, res {s}) has no incoming edges"),
            });
        }
    }

    Ok(TopologyGraph {
        shape: shape.clone(),
        nodes,
        edges,
        incoming,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(layers: usize) -> TopologyShape {
        TopologyShape {
            layers,
            ..Default::default()
        }
    }

    #[test]
    fn eight_candidate_ops_in_canonical_order() {
        assert_eq!(OpKind::ALL.len(), 8);
        assert_eq!(OpKind::ALL[0], OpKind::Conv1);
        assert_eq!(OpKind::AtrousConv7.kernel_extent(), 7);
        assert_eq!(OpKind::AtrousConv7.dilation(), 2);
        assert_eq!(OpKind::Conv5.dilation(), 1);
        assert!(OpKind::SepConv5.is_separable());
    }

    #[test]
    fn graph_l8_matches_path_connected_count() {
        let g = build_graph(&shape(8)).unwrap();
        // Diamond of live nodes: 1+2+3+4+4+3+2+1.
        assert_eq!(g.node_count(), 20);
        assert_eq!(g.edge_count(), 40);
        assert_eq!(path_edge_formula(8), 40);
        assert_eq!(full_grid_edge_count(8), 70);
    }

    #[test]
    fn formula_matches_enumeration_for_deep_grids() {
        for layers in 7..=12 {
            let g = build_graph(&shape(layers)).unwrap();
            assert_eq!(
                g.edge_count() as isize,
                path_edge_formula(layers),
                "layers {layers}"
            );
        }
        // Below 7 layers the diamond never reaches full width, so the
        // linear formula over-counts the missing transitions.
        let g5 = build_graph(&shape(5)).unwrap();
        assert_eq!(g5.edge_count(), 14);
        assert_ne!(g5.edge_count() as isize, path_edge_formula(5));
        assert_eq!(full_grid_edge_count(5), 40);
    }

    #[test]
    fn interior_nodes_have_three_incoming_edges() {
        let g = build_graph(&shape(8)).unwrap();
        for (ni, node) in g.nodes.iter().enumerate() {
            if node.layer == 0 {
                assert!(g.incoming[ni].is_empty());
                continue;
            }
            assert!(!g.incoming[ni].is_empty());
            // Interior: all three source resolutions live in the previous
            // layer and not at a resolution boundary.
            let prev_live = g.live_resolutions(node.layer - 1);
            let all_three = node.res >= 1
                && node.res + 1 < g.shape.resolutions
                && prev_live.contains(&(node.res - 1))
                && prev_live.contains(&node.res)
                && prev_live.contains(&(node.res + 1));
            if all_three {
                assert_eq!(g.incoming[ni].len(), 3, "node {node:?}");
            }
        }
    }

    #[test]
    fn every_node_lies_on_a_source_sink_path() {
        let g = build_graph(&shape(6)).unwrap();
        for node in &g.nodes {
            assert!(node.res <= node.layer, "{node:?} unreachable from source");
            assert!(
                node.res <= g.shape.layers - 1 - node.layer,
                "{node:?} cannot reach sink"
            );
        }
    }

    #[test]
    fn u_stem_forces_encoder_decoder_ends() {
        let mut s = shape(8);
        s.u_shape_stem = 2;
        let g = build_graph(&s).unwrap();
        for e in &g.edges {
            if e.to.layer <= 2 {
                assert_eq!(e.kind, EdgeKind::Down, "head edge {e:?}");
            }
            if e.to.layer > 5 {
                assert_eq!(e.kind, EdgeKind::Up, "tail edge {e:?}");
            }
        }
        assert!(g.edge_count() < build_graph(&shape(8)).unwrap().edge_count());
    }

    #[test]
    fn u_stem_validation() {
        let mut s = shape(4);
        s.u_shape_stem = 1;
        assert!(build_graph(&s).is_err());
        let mut s = shape(8);
        s.u_shape_stem = 4;
        assert!(build_graph(&s).is_err());
    }

    #[test]
    fn channel_schedule_doubles_with_cap() {
        let s = TopologyShape {
            base_channels: 4,
            channel_cap: 4,
            ..Default::default()
        };
        assert_eq!(s.channels(0), 4);
        assert_eq!(s.channels(1), 8);
        assert_eq!(s.channels(2), 16);
        assert_eq!(s.channels(3), 16); // capped at 4x
    }

    #[test]
    fn edge_order_is_deterministic() {
        let a = build_graph(&shape(7)).unwrap();
        let b = build_graph(&shape(7)).unwrap();
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.nodes, b.nodes);
    }
}
