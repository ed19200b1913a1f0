//! Collapse the relaxed supernet into one discrete architecture: the
//! max-probability topology path via Dijkstra over -log(eta) edge costs,
//! the argmax operation per cell type, and a rebuildable, retrainable
//! discrete network.

use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ndtensor::{ConvSpec, Result, Scalar, Tape, Tensor, TensorError};
use crate::params::{Binding, ParamGroup, ParamStore, TrackGroups};
use crate::regmath::{symmetric_loss_parts, LossWeights, VelocityField};
use crate::rng::RngStream;
use crate::searchspace::{
    cell_op_forward, make_one_cell_op, CellOpWeights, EdgeKind, NodeRef, OpKind, Supernet,
    TopologyGraph, TopologyMode, TopologyShape, LEAKY_SLOPE,
};

pub const ARCH_FORMAT_VERSION: u32 = 1;

/// One traversed edge of the decoded path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    /// Target layer of this edge (1-based within the grid: 1..L-1).
    pub layer: usize,
    /// Target resolution index (0 = finest).
    pub resolution: usize,
    /// Block kind of the traversed edge.
    pub kind: EdgeKind,
}

/// Decoded operation per cell type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedOps {
    pub up: OpKind,
    pub same: OpKind,
    pub down: OpKind,
}

impl DecodedOps {
    pub fn for_kind(&self, kind: EdgeKind) -> OpKind {
        match kind {
            EdgeKind::Up => self.up,
            EdgeKind::Same => self.same,
            EdgeKind::Down => self.down,
        }
    }
}

/// A decoded architecture: shape echo, the single path from input stem to
/// output stem, one op per cell type, and a provenance hash of the
/// eta/alpha snapshot it was decoded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteArchitecture {
    pub version: u32,
    pub dims: usize,
    pub layers: usize,
    pub resolutions: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub path: Vec<PathStep>,
    pub ops: DecodedOps,
    pub provenance: String,
}

impl DiscreteArchitecture {
    pub fn shape(&self) -> TopologyShape {
        TopologyShape {
            layers: self.layers,
            resolutions: self.resolutions,
            base_channels: self.base_channels,
            dims: self.dims,
            channel_cap: self.channel_cap,
            u_shape_stem: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != ARCH_FORMAT_VERSION {
            return Err(TensorError::Invalid {
                op: "DiscreteArchitecture",
                msg: format!("unsupported format version {}", self.version),
            });
        }
        self.shape().validate()?;
        if self.path.len() != self.layers - 1 {
            return Err(TensorError::Invalid {
                op: "DiscreteArchitecture",
                msg: format!(
                    "path has {} steps, expected {} (one per layer transition)",
                    self.path.len(),
                    self.layers - 1
                ),
            });
        }
        let mut res = 0usize; // stem attaches at the finest node
        for (i, step) in self.path.iter().enumerate() {
            if step.layer != i + 1 {
                return Err(TensorError::Invalid {
                    op: "DiscreteArchitecture",
                    msg: format!("step {i} targets layer {}, expected {}", step.layer, i + 1),
                });
            }
            let expected = match step.kind {
                EdgeKind::Down => res + 1,
                EdgeKind::Same => res,
                EdgeKind::Up => {
                    if res == 0 {
                        return Err(TensorError::Invalid {
                            op: "DiscreteArchitecture",
                            msg: format!("step {i} goes up from the finest resolution"),
                        });
                    }
                    res - 1
                }
            };
            if step.resolution != expected || step.resolution >= self.resolutions {
                return Err(TensorError::Invalid {
                    op: "DiscreteArchitecture",
                    msg: format!(
                        "step {i}: resolution {} inconsistent with {:?} from resolution {res}",
                        step.resolution, step.kind
                    ),
                });
            }
            res = step.resolution;
        }
        if res != 0 {
            return Err(TensorError::Invalid {
                op: "DiscreteArchitecture",
                msg: format!("path ends at resolution {res}, expected the finest (0)"),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("architecture serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let arch: Self = serde_json::from_str(text).map_err(|e| TensorError::Invalid {
            op: "DiscreteArchitecture::from_json",
            msg: e.to_string(),
        })?;
        arch.validate()?;
        Ok(arch)
    }
}

/// Hash of the eta/alpha snapshot a decode was computed from.
pub fn provenance_hash(
    eta_rows: &[Option<(NodeRef, Vec<f64>)>],
    alpha_rows: &[Vec<f64>; 3],
) -> String {
    let mut hasher = Sha256::new();
    for entry in eta_rows.iter().flatten() {
        let (node, row) = entry;
        hasher.update((node.layer as u64).to_le_bytes());
        hasher.update((node.res as u64).to_le_bytes());
        for &p in row {
            hasher.update(p.to_le_bytes());
        }
    }
    for row in alpha_rows {
        for &p in row {
            hasher.update(p.to_le_bytes());
        }
    }
    hex::encode(&hasher.finalize()[..16])
}

#[derive(PartialEq)]
struct HeapEntry {
    cost: f64,
    node: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Min-heap on cost; ties broken on node index for determinism.
        other
            .cost
            .partial_cmp(&self.cost)
            .expect("finite costs")
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

fn kind_preference(kind: EdgeKind) -> u8 {
    match kind {
        EdgeKind::Same => 0,
        EdgeKind::Up => 1,
        EdgeKind::Down => 2,
    }
}

/// Dijkstra decode over edge costs -log(eta): the returned edge sequence
/// maximizes the product of normalized edge probabilities from the source
/// (layer 0, finest) to the sink (last layer, finest). Exact cost ties
/// prefer Same, then Up, then Down edges, then the lower source
/// resolution.
pub fn decode_topology_from(
    graph: &TopologyGraph,
    eta_rows: &[Option<Vec<f64>>],
) -> Result<Vec<usize>> {
    let n = graph.node_count();
    if eta_rows.len() != n {
        return Err(TensorError::Invalid {
            op: "decode_topology",
            msg: format!("{} eta rows for {} nodes", eta_rows.len(), n),
        });
    }
    let source = graph
        .node_index(graph.source())
        .expect("source in graph");
    let sink = graph.node_index(graph.sink()).expect("sink in graph");

    let mut dist = vec![f64::INFINITY; n];
    let mut pred: Vec<Option<usize>> = vec![None; n]; // incoming edge index
    let mut done = vec![false; n];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapEntry {
        cost: 0.0,
        node: source,
    });

    while let Some(HeapEntry { node, .. }) = heap.pop() {
        if done[node] {
            continue;
        }
        done[node] = true;
        // Relax edges out of `node`: scan nodes of the next layer.
        let layer = graph.nodes[node].layer;
        for (ti, tnode) in graph.nodes.iter().enumerate() {
            if tnode.layer != layer + 1 {
                continue;
            }
            let row = eta_rows[ti].as_ref().ok_or_else(|| TensorError::Invalid {
                op: "decode_topology",
                msg: format!("missing eta row for node {tnode:?}"),
            })?;
            for (pos, &edge_idx) in graph.incoming[ti].iter().enumerate() {
                let edge = graph.edges[edge_idx];
                if graph.node_index(edge.from) != Some(node) {
                    continue;
                }
                let p = row[pos];
                if !(p > 0.0) {
                    return Err(TensorError::Invalid {
                        op: "decode_topology",
                        msg: format!("eta weight {p} is not positive on edge {edge:?}"),
                    });
                }
                let cand = dist[node] + (-p.ln());
                let better = cand < dist[ti]
                    || (cand == dist[ti]
                        && pred[ti].is_some_and(|cur| {
                            let cur_edge = graph.edges[cur];
                            (kind_preference(edge.kind), edge.from.res)
                                < (kind_preference(cur_edge.kind), cur_edge.from.res)
                        }));
                if better {
                    dist[ti] = cand;
                    pred[ti] = Some(edge_idx);
                    heap.push(HeapEntry {
                        cost: cand,
                        node: ti,
                    });
                }
            }
        }
    }

    if dist[sink].is_infinite() {
        return Err(TensorError::Invalid {
            op: "decode_topology",
            msg: "sink unreachable".into(),
        });
    }
    let mut path = Vec::with_capacity(graph.shape.layers - 1);
    let mut cur = sink;
    while cur != source {
        let edge_idx = pred[cur].expect("finite distance implies predecessor");
        path.push(edge_idx);
        cur = graph
            .node_index(graph.edges[edge_idx].from)
            .expect("edge source in graph");
    }
    path.reverse();
    Ok(path)
}

/// Argmax op per cell-type row; exact ties take the earlier candidate in
/// canonical order.
pub fn decode_cells(alpha_rows: &[Vec<f64>; 3]) -> DecodedOps {
    let pick = |row: &Vec<f64>| {
        let mut best = 0usize;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        OpKind::ALL[best]
    };
    DecodedOps {
        up: pick(&alpha_rows[0]),
        same: pick(&alpha_rows[1]),
        down: pick(&alpha_rows[2]),
    }
}

/// Decode a supernet into a discrete architecture. In fixed-path mode the
/// forced path itself is decoded (eta is not consulted).
pub fn decode<F: Scalar>(net: &Supernet<F>) -> Result<DiscreteArchitecture> {
    let eta_snapshot = net.eta_snapshot();
    let alpha = net.alpha_snapshot();
    let edge_path: Vec<usize> = match &net.mode {
        TopologyMode::Relaxed => {
            let rows: Vec<Option<Vec<f64>>> = eta_snapshot
                .iter()
                .map(|e| e.as_ref().map(|(_, row)| row.clone()))
                .collect();
            decode_topology_from(&net.graph, &rows)?
        }
        TopologyMode::FixedPath(path) => path.clone(),
    };
    let path = edge_path
        .iter()
        .map(|&e| {
            let edge = net.graph.edges[e];
            PathStep {
                layer: edge.to.layer,
                resolution: edge.to.res,
                kind: edge.kind,
            }
        })
        .collect();
    let arch = DiscreteArchitecture {
        version: ARCH_FORMAT_VERSION,
        dims: net.shape.dims,
        layers: net.shape.layers,
        resolutions: net.shape.resolutions,
        base_channels: net.shape.base_channels,
        channel_cap: net.shape.channel_cap,
        path,
        ops: decode_cells(&alpha),
        provenance: provenance_hash(&eta_snapshot, &alpha),
    };
    arch.validate()?;
    Ok(arch)
}

/// One block of the decoded network: scaling + regular conv + the single
/// decoded cell op at full channels (no mixing, no channel masking).
#[derive(Debug, Clone)]
pub struct DiscreteBlock {
    pub kind: EdgeKind,
    pub from_res: usize,
    pub to_res: usize,
    pub reg_w: crate::params::ParamId,
    pub reg_b: crate::params::ParamId,
    pub op: CellOpWeights,
}

/// The decoded, retrainable network.
pub struct DiscreteNet<F: Scalar> {
    pub arch: DiscreteArchitecture,
    pub store: ParamStore<F>,
    pub seed: u64,
    stem_w: crate::params::ParamId,
    stem_b: crate::params::ParamId,
    out_w: crate::params::ParamId,
    out_b: crate::params::ParamId,
    pub blocks: Vec<DiscreteBlock>,
}

/// Build a trainable network from a decoded architecture with fresh
/// parameters (no weight inheritance from the supernet).
pub fn build_discrete_net<F: Scalar>(
    arch: &DiscreteArchitecture,
    seed: u64,
) -> Result<DiscreteNet<F>> {
    arch.validate()?;
    let shape = arch.shape();
    let mut store = ParamStore::new();
    let mut rng = RngStream::named(seed, "discrete_init");
    let d = shape.dims;
    let k3 = 3usize.pow(d as u32);

    let mut stem_shape = vec![shape.channels(0), 2];
    stem_shape.extend(std::iter::repeat_n(3, d));
    let stem_w = store.add_kaiming("stem.in.w", &stem_shape, 2 * k3, &mut rng)?;
    let stem_b = store.add_zeros("stem.in.b", &[shape.channels(0)], ParamGroup::Weights)?;

    let mut blocks = Vec::with_capacity(arch.path.len());
    let mut res = 0usize;
    for step in &arch.path {
        let c_from = shape.channels(res);
        let c_to = shape.channels(step.resolution);
        let prefix = format!(
            "block.l{}.s{}to{}.{}",
            step.layer,
            res,
            step.resolution,
            step.kind.name()
        );
        let mut reg_shape = vec![c_to, c_from];
        reg_shape.extend(std::iter::repeat_n(3, d));
        let reg_w =
            store.add_kaiming(format!("{prefix}.reg.w"), &reg_shape, c_from * k3, &mut rng)?;
        let reg_b = store.add_zeros(format!("{prefix}.reg.b"), &[c_to], ParamGroup::Weights)?;
        let op = make_one_cell_op(
            &mut store,
            &prefix,
            arch.ops.for_kind(step.kind),
            c_to,
            d,
            &mut rng,
        )?;
        blocks.push(DiscreteBlock {
            kind: step.kind,
            from_res: res,
            to_res: step.resolution,
            reg_w,
            reg_b,
            op,
        });
        res = step.resolution;
    }

    let mut out_shape = vec![d, shape.channels(0)];
    out_shape.extend(std::iter::repeat_n(1, d));
    let out_w = store.add_zeros("stem.out.w", &out_shape, ParamGroup::Weights)?;
    let out_b = store.add_zeros("stem.out.b", &[d], ParamGroup::Weights)?;

    Ok(DiscreteNet {
        arch: arch.clone(),
        store,
        seed,
        stem_w,
        stem_b,
        out_w,
        out_b,
        blocks,
    })
}

impl<F: Scalar> DiscreteNet<F> {
    pub fn param_count(&self) -> usize {
        self.store.total_numel()
    }

    /// Model size in (decimal) megabytes at 4 bytes per parameter.
    pub fn model_size_mb(&self) -> f64 {
        self.param_count() as f64 * 4.0 / 1e6
    }

    /// Same forward shape contract as the supernet: a pair of
    /// single-channel images in, a velocity field out.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        i0: &Tensor<F>,
        i1: &Tensor<F>,
        track: TrackGroups,
    ) -> Result<(VelocityField<F>, Binding<F>)> {
        crate::ndtensor::check_same_shape("discrete_forward", i0, i1)?;
        let shape = self.arch.shape();
        let d = shape.dims;
        if i0.rank() != d + 2 || i0.channels() != 1 {
            return Err(TensorError::Invalid {
                op: "discrete_forward",
                msg: format!("expected [B, 1, spatial x {d}], got {:?}", i0.shape()),
            });
        }
        let divisor = shape.extent_divisor();
        for (a, &e) in i0.spatial().iter().enumerate() {
            if e == 0 || e % divisor != 0 {
                return Err(TensorError::Invalid {
                    op: "discrete_forward",
                    msg: format!(
                        "spatial extent {e} on axis {a} must be a positive multiple of {divisor}"
                    ),
                });
            }
        }
        let full = i0.spatial().to_vec();
        let mut binding = Binding::new(&self.store, track);

        let pair = tape.concat(&[i0.clone(), i1.clone()], 1)?;
        let w = binding.bind(tape, &self.store, self.stem_w);
        let b = binding.bind(tape, &self.store, self.stem_b);
        let x = tape.conv_nd(&pair, &w, &ConvSpec::cube(3, d))?;
        let x = tape.add_bias(&x, &b)?;
        let mut x = tape.leaky_relu(&x, LEAKY_SLOPE)?;

        for block in &self.blocks {
            let target = shape.extents(&full, block.to_res);
            let scaled = match block.kind {
                EdgeKind::Same => x.clone(),
                _ => tape.resample_linear(&x, &target)?,
            };
            let w = binding.bind(tape, &self.store, block.reg_w);
            let b = binding.bind(tape, &self.store, block.reg_b);
            let h = tape.conv_nd(&scaled, &w, &ConvSpec::cube(3, d))?;
            let h = tape.add_bias(&h, &b)?;
            let h = tape.leaky_relu(&h, LEAKY_SLOPE)?;
            let channels = h.channels();
            let z = cell_op_forward(tape, &mut binding, &self.store, &h, &block.op, 0, channels)?;
            x = match block.kind {
                EdgeKind::Same => tape.add(&scaled, &z)?,
                _ => z,
            };
        }

        let w = binding.bind(tape, &self.store, self.out_w);
        let b = binding.bind(tape, &self.store, self.out_b);
        let v = tape.conv_nd(&x, &w, &ConvSpec::cube(1, d))?;
        let v = tape.add_bias(&v, &b)?;
        Ok((VelocityField::new(v)?, binding))
    }
}

/// Retraining configuration (single-level Adam on the symmetric loss).
#[derive(Debug, Clone)]
pub struct RetrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub loss: LossWeights,
    pub seed: u64,
    pub adam: crate::bilevel::AdamParams,
    pub grad_clip: f64,
    pub lr_schedule: crate::bilevel::LrSchedule,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0001,
            epochs: 2000,
            loss: LossWeights::default(),
            seed: 0,
            adam: Default::default(),
            grad_clip: 0.0,
            lr_schedule: crate::bilevel::LrSchedule::Constant,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RetrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Train a discrete net from scratch with Adam on the symmetric loss over
/// shuffled training pairs. Aborts on non-finite loss.
pub fn retrain<F: Scalar>(
    net: &mut DiscreteNet<F>,
    train: &[crate::bilevel::ImagePair<F>],
    cfg: &RetrainConfig,
    mut on_epoch: impl FnMut(&DiscreteNet<F>, usize, &RetrainRecord) -> crate::bilevel::SearchResult<()>,
) -> crate::bilevel::SearchResult<Vec<RetrainRecord>> {
    use crate::bilevel::{AdamOpt, SearchError};

    if train.is_empty() {
        return Err(SearchError::EmptySplit("train"));
    }
    let ids = net.store.ids().collect::<Vec<_>>();
    let mut opt = AdamOpt::new(&net.store, ids, cfg.adam);
    let mut order = RngStream::named(cfg.seed, "retrain_order");
    let mut indices: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut indices);
    let mut cursor = 0usize;

    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cursor >= indices.len() {
            order.shuffle(&mut indices);
            cursor = 0;
        }
        let pair = &train[indices[cursor]];
        cursor += 1;

        let started = std::time::Instant::now();
        let mut tape = Tape::new();
        let (v, binding) =
            net.forward(&mut tape, &pair.moving, &pair.fixed, TrackGroups::WeightsOnly)?;
        let loss =
            symmetric_loss_parts(&mut tape, &pair.moving, &pair.fixed, &v, &cfg.loss)?.total;
        let value = loss.item().map_err(SearchError::Tensor)?.as_f64();
        if !value.is_finite() {
            return Err(SearchError::NonFiniteLoss {
                epoch,
                phase: "retrain",
            });
        }
        tape.backward(&loss)?;
        let grads: Vec<Option<Tensor<F>>> = opt
            .params
            .iter()
            .map(|&id| binding.grad(&tape, id))
            .collect();
        let lr = cfg.lr_schedule.at(cfg.lr, epoch, cfg.epochs);
        opt.apply(&mut net.store, &grads, lr, cfg.grad_clip)?;
        let record = RetrainRecord {
            epoch,
            loss: value,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        on_epoch(net, epoch, &record)?;
        records.push(record);
    }
    Ok(records)
}
