//! Alternating two-level optimization: network weights (theta) descend the
//! symmetric registration loss on training pairs, architecture weights
//! (alpha, eta) descend the validation loss plus entropy binarization
//! penalties. First-order approximation: each phase freezes the other
//! group's parameters.

use thiserror::Error;

use crate::ndtensor::{Result as TResult, Scalar, Tape, Tensor, TensorError};
use crate::params::{ParamGroup, ParamId, ParamStore, TrackGroups};
use crate::regmath::{symmetric_loss_parts, LossWeights};
use crate::rng::RngStream;
use crate::searchspace::{Supernet, TopologyMode};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at epoch {epoch} during {phase} phase")]
    NonFiniteLoss { epoch: usize, phase: &'static str },
    #[error("batch_size must be 1 (got {0}); pairs are streamed singly")]
    UnsupportedBatch(usize),
    #[error("dataset split is empty: {0}")]
    EmptySplit(&'static str),
}

pub type SearchResult<T> = Result<T, SearchError>;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate schedule over the configured epoch budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    pub fn at(&self, lr0: f64, epoch: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr0,
            LrSchedule::Cosine => {
                let t = if total <= 1 {
                    0.0
                } else {
                    epoch as f64 / (total - 1) as f64
                };
                lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Search-phase configuration. Learning-rate and weighting defaults follow
/// the published setup (lr 0.001 for architecture, 0.0001 for weights,
/// lambda 0.5, gamma 0.2, beta 0.1, batch size 1, Adam).
#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub lr_arch: f64,
    pub lr_weights: f64,
    /// Weight of the alpha entropy penalty.
    pub gamma: f64,
    /// Weight of the eta entropy penalty.
    pub beta: f64,
    pub loss: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_phase: usize,
    pub seed: u64,
    pub adam: AdamParams,
    /// Global gradient-norm clip per group; 0 disables clipping.
    pub grad_clip: f64,
    pub lr_schedule: LrSchedule,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            lr_arch: 0.001,
            lr_weights: 0.0001,
            gamma: 0.2,
            beta: 0.1,
            loss: LossWeights::default(),
            epochs: 2000,
            batch_size: 1,
            steps_per_phase: 1,
            seed: 0,
            adam: AdamParams::default(),
            grad_clip: 0.0,
            lr_schedule: LrSchedule::Constant,
        }
    }
}

/// Bias-corrected Adam over a fixed, ordered set of parameters. Moments
/// mirror parameter shapes; the step counter advances on every call.
pub struct AdamOpt<F: Scalar> {
    pub params: Vec<ParamId>,
    pub step: u64,
    pub cfg: AdamParams,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamOpt<F> {
    pub fn new(store: &ParamStore<F>, params: Vec<ParamId>, cfg: AdamParams) -> Self {
        let m = params
            .iter()
            .map(|&id| vec![F::zero(); store.get(id).numel()])
            .collect();
        let v = params
            .iter()
            .map(|&id| vec![F::zero(); store.get(id).numel()])
            .collect();
        Self {
            params,
            step: 0,
            cfg,
            m,
            v,
        }
    }

    /// One update. `grads[i]` aligns with `params[i]`; `None` means zero
    /// gradient (the parameter stays put when its moments are zero).
    pub fn apply(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[Option<Tensor<F>>],
        lr: f64,
        clip: f64,
    ) -> TResult<()> {
        assert_eq!(grads.len(), self.params.len());
        self.step += 1;
        let scale = if clip > 0.0 {
            let mut sq = 0.0f64;
            for g in grads.iter().flatten() {
                sq += g.values().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            }
            let norm = sq.sqrt();
            if norm > clip {
                clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let b1 = F::cast(self.cfg.beta1);
        let b2 = F::cast(self.cfg.beta2);
        let one = F::one();
        let eps = F::cast(self.cfg.eps);
        let bc1 = F::cast(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = F::cast(1.0 - self.cfg.beta2.powi(self.step as i32));
        let lr_f = F::cast(lr);
        let gscale = F::cast(scale);

        for (i, &id) in self.params.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let values = store.values_mut(id);
            match &grads[i] {
                Some(g) => {
                    debug_assert_eq!(g.numel(), values.len());
                    for (j, &graw) in g.values().iter().enumerate() {
                        let gj = graw * gscale;
                        m[j] = b1 * m[j] + (one - b1) * gj;
                        v[j] = b2 * v[j] + (one - b2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        values[j] = values[j] - lr_f * mhat / (vhat.sqrt() + eps);
                    }
                }
                None => {
                    for j in 0..values.len() {
                        m[j] = b1 * m[j];
                        v[j] = b2 * v[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        values[j] = values[j] - lr_f * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers for checkpointing, in parameter order.
    pub fn state(&self) -> (u64, &[Vec<F>], &[Vec<F>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Vec<F>>, v: Vec<Vec<F>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.step = step;
        self.m = m;
        self.v = v;
    }
}

/// Shannon entropy summed over distribution rows: 0 exactly when every row
/// is one-hot, ln(m) per uniform row over m entries. Errors on rows that
/// are not distributions.
pub fn entropy_penalty<F: Scalar>(tape: &mut Tape<F>, rows: &[Tensor<F>]) -> TResult<Tensor<F>> {
    let mut acc: Option<Tensor<F>> = None;
    for row in rows {
        let mut sum = 0.0f64;
        for &p in row.values() {
            let pf = p.as_f64();
            if !(0.0..=1.0 + 1e-9).contains(&pf) {
                return Err(TensorError::Invalid {
                    op: "entropy_penalty",
                    msg: format!("row entry {pf} is not a probability"),
                });
            }
            sum += pf;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(TensorError::Invalid {
                op: "entropy_penalty",
                msg: format!("row sums to {sum}, not 1"),
            });
        }
        let plogp = tape.xlogx(row)?;
        let s = tape.sum(&plogp)?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &s)?,
            None => s,
        });
    }
    let total = acc.ok_or_else(|| TensorError::Invalid {
        op: "entropy_penalty",
        msg: "no rows".into(),
    })?;
    tape.neg(&total)
}

/// Plain-f64 entropy of one distribution row (for reporting).
pub fn entropy_f64(row: &[f64]) -> f64 {
    -row.iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum::<f64>()
}

/// One training or validation pair: the supernet registers `moving` (I0)
/// onto `fixed` (I1).
#[derive(Clone)]
pub struct ImagePair<F: Scalar> {
    pub moving: Tensor<F>,
    pub fixed: Tensor<F>,
}

/// Train/validation pools for the alternating search.
pub struct SplitPairs<F: Scalar> {
    pub train: Vec<ImagePair<F>>,
    pub val: Vec<ImagePair<F>>,
}

/// Losses observed during one alternating step.
#[derive(Debug, Clone, Copy)]
pub struct StepLosses {
    pub train_loss: f64,
    pub val_loss: f64,
    pub l_alpha: f64,
    pub l_eta: f64,
}

/// Per-epoch history record; serialized one row per epoch.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub l_alpha: f64,
    pub l_eta: f64,
    pub eta_entropy_mean: f64,
    pub eta_max_mean: f64,
    pub eta_max_min: f64,
    pub alpha_max_up: f64,
    pub alpha_max_same: f64,
    pub alpha_max_down: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Default, Clone)]
pub struct SearchHistory {
    pub records: Vec<EpochRecord>,
}

impl SearchHistory {
    pub const COLUMNS: &'static str = "epoch\ttrain_loss\tval_loss\tl_alpha\tl_eta\teta_entropy_mean\teta_max_mean\teta_max_min\talpha_max_up\talpha_max_same\talpha_max_down\twall_ms";

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::COLUMNS);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{}\n",
                r.epoch,
                r.train_loss,
                r.val_loss,
                r.l_alpha,
                r.l_eta,
                r.eta_entropy_mean,
                r.eta_max_mean,
                r.eta_max_min,
                r.alpha_max_up,
                r.alpha_max_same,
                r.alpha_max_down,
                r.wall_ms
            ));
        }
        out
    }
}

/// Cycling shuffled index stream over a pool.
struct OrderStream {
    rng: RngStream,
    order: Vec<usize>,
    cursor: usize,
    n: usize,
}

impl OrderStream {
    fn new(mut rng: RngStream, n: usize) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self {
            rng,
            order,
            cursor: 0,
            n,
        }
    }

    fn next(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor];
        self.cursor += 1;
        debug_assert!(idx < self.n);
        idx
    }

    fn state(&self) -> (u64, u128, Vec<usize>, usize) {
        let (seed, pos) = self.rng.state();
        (seed, pos, self.order.clone(), self.cursor)
    }

    fn restore(seed: u64, pos: u128, order: Vec<usize>, cursor: usize) -> Self {
        let n = order.len();
        Self {
            rng: RngStream::restore(seed, pos),
            order,
            cursor,
            n,
        }
    }
}

/// Mutable optimization state surviving across epochs (and checkpoints).
pub struct SearchState<F: Scalar> {
    pub theta_opt: AdamOpt<F>,
    pub arch_opt: AdamOpt<F>,
    train_order: OrderStream,
    val_order: OrderStream,
    pub epoch: usize,
}

impl<F: Scalar> SearchState<F> {
    pub fn new(net: &Supernet<F>, cfg: &SearchConfig, n_train: usize, n_val: usize) -> Self {
        let theta_ids = net.store.ids_in_group(ParamGroup::Weights);
        // In fixed-path (ablation) mode eta logits are excluded from the
        // architecture update so they stay bit-identical to initialization.
        let arch_ids: Vec<ParamId> = match net.mode {
            TopologyMode::Relaxed => net.store.ids_in_group(ParamGroup::Arch),
            TopologyMode::FixedPath(_) => net
                .store
                .ids_in_group(ParamGroup::Arch)
                .into_iter()
                .filter(|&id| net.store.get(id).name.starts_with("alpha."))
                .collect(),
        };
        Self {
            theta_opt: AdamOpt::new(&net.store, theta_ids, cfg.adam),
            arch_opt: AdamOpt::new(&net.store, arch_ids, cfg.adam),
            train_order: OrderStream::new(RngStream::named(cfg.seed, "train_order"), n_train),
            val_order: OrderStream::new(RngStream::named(cfg.seed, "val_order"), n_val),
            epoch: 0,
        }
    }

    pub fn order_states(&self) -> [(u64, u128, Vec<usize>, usize); 2] {
        let t = self.train_order.state();
        let v = self.val_order.state();
        [t, v]
    }

    pub fn restore_orders(&mut self, t: (u64, u128, Vec<usize>, usize), v: (u64, u128, Vec<usize>, usize)) {
        self.train_order = OrderStream::restore(t.0, t.1, t.2, t.3);
        self.val_order = OrderStream::restore(v.0, v.1, v.2, v.3);
    }
}

fn check_finite<F: Scalar>(loss: &Tensor<F>, epoch: usize, phase: &'static str) -> SearchResult<f64> {
    let value = loss.item().map_err(SearchError::Tensor)?.as_f64();
    if !value.is_finite() {
        return Err(SearchError::NonFiniteLoss { epoch, phase });
    }
    Ok(value)
}

/// One alternating step: `steps_per_phase` theta updates on training
/// pairs, then `steps_per_phase` (alpha, eta) updates on validation pairs
/// with the entropy penalties. Partial-channel masks are redrawn for every
/// forward pass.
pub fn search_step<F: Scalar>(
    net: &mut Supernet<F>,
    pairs: &SplitPairs<F>,
    cfg: &SearchConfig,
    state: &mut SearchState<F>,
) -> SearchResult<StepLosses> {
    if cfg.batch_size != 1 {
        return Err(SearchError::UnsupportedBatch(cfg.batch_size));
    }
    let epoch = state.epoch;
    let lr_w = cfg.lr_schedule.at(cfg.lr_weights, epoch, cfg.epochs);
    let lr_a = cfg.lr_schedule.at(cfg.lr_arch, epoch, cfg.epochs);

    // Phase A: theta on training pairs; alpha/eta enter as constants.
    let mut train_loss = f64::NAN;
    for _ in 0..cfg.steps_per_phase.max(1) {
        let pair = &pairs.train[state.train_order.next()];
        let mut tape = Tape::new();
        let (v, binding) =
            net.forward(&mut tape, &pair.moving, &pair.fixed, TrackGroups::WeightsOnly)?;
        let loss = symmetric_loss_parts(&mut tape, &pair.moving, &pair.fixed, &v, &cfg.loss)?
            .total;
        train_loss = check_finite(&loss, epoch, "weights")?;
        tape.backward(&loss)?;
        let grads: Vec<Option<Tensor<F>>> = state
            .theta_opt
            .params
            .iter()
            .map(|&id| binding.grad(&tape, id))
            .collect();
        state
            .theta_opt
            .apply(&mut net.store, &grads, lr_w, cfg.grad_clip)?;
    }

    // Phase B: alpha (and eta in relaxed mode) on validation pairs.
    let mut val_loss = f64::NAN;
    let mut l_alpha_v = f64::NAN;
    let mut l_eta_v = 0.0f64;
    for _ in 0..cfg.steps_per_phase.max(1) {
        let pair = &pairs.val[state.val_order.next()];
        let mut tape = Tape::new();
        let (v, mut binding) =
            net.forward(&mut tape, &pair.moving, &pair.fixed, TrackGroups::ArchOnly)?;
        let sym = symmetric_loss_parts(&mut tape, &pair.moving, &pair.fixed, &v, &cfg.loss)?
            .total;
        val_loss = check_finite(&sym, epoch, "architecture")?;

        let alpha_rows: Vec<Tensor<F>> = (0..3)
            .map(|i| {
                let logits = binding.bind(&mut tape, &net.store, net.alpha[i]);
                tape.softmax(&logits, 0)
            })
            .collect::<TResult<_>>()?;
        let l_alpha = entropy_penalty(&mut tape, &alpha_rows)?;
        l_alpha_v = l_alpha.item().map_err(SearchError::Tensor)?.as_f64();
        let weighted_alpha = tape.scale(&l_alpha, cfg.gamma)?;
        let mut total = tape.add(&sym, &weighted_alpha)?;

        if matches!(net.mode, TopologyMode::Relaxed) {
            let eta_ids: Vec<ParamId> = net.eta.iter().copied().flatten().collect();
            let eta_rows: Vec<Tensor<F>> = eta_ids
                .iter()
                .map(|&id| {
                    let logits = binding.bind(&mut tape, &net.store, id);
                    tape.softmax(&logits, 0)
                })
                .collect::<TResult<_>>()?;
            let l_eta = entropy_penalty(&mut tape, &eta_rows)?;
            l_eta_v = l_eta.item().map_err(SearchError::Tensor)?.as_f64();
            let weighted_eta = tape.scale(&l_eta, cfg.beta)?;
            total = tape.add(&total, &weighted_eta)?;
        }

        check_finite(&total, epoch, "architecture")?;
        tape.backward(&total)?;
        let grads: Vec<Option<Tensor<F>>> = state
            .arch_opt
            .params
            .iter()
            .map(|&id| binding.grad(&tape, id))
            .collect();
        state
            .arch_opt
            .apply(&mut net.store, &grads, lr_a, cfg.grad_clip)?;
    }

    Ok(StepLosses {
        train_loss,
        val_loss,
        l_alpha: l_alpha_v,
        l_eta: l_eta_v,
    })
}

/// Epoch-level architecture statistics from the current net.
pub fn arch_stats<F: Scalar>(net: &Supernet<F>) -> (f64, f64, f64, [f64; 3]) {
    let snapshot = net.eta_snapshot();
    let rows: Vec<&Vec<f64>> = snapshot
        .iter()
        .flatten()
        .map(|(_, row)| row)
        .collect();
    let mut entropy_sum = 0.0;
    let mut max_sum = 0.0;
    let mut max_min = f64::INFINITY;
    for row in &rows {
        entropy_sum += entropy_f64(row);
        let mx = row.iter().cloned().fold(0.0f64, f64::max);
        max_sum += mx;
        if mx < max_min {
            max_min = mx;
        }
    }
    let n = rows.len().max(1) as f64;
    let alpha = net.alpha_snapshot();
    let amax = |r: &Vec<f64>| r.iter().cloned().fold(0.0f64, f64::max);
    (
        entropy_sum / n,
        max_sum / n,
        if rows.is_empty() { 1.0 } else { max_min },
        [amax(&alpha[0]), amax(&alpha[1]), amax(&alpha[2])],
    )
}

/// Fraction of eta rows whose dominant weight reaches `threshold`.
pub fn eta_binarization_fraction<F: Scalar>(net: &Supernet<F>, threshold: f64) -> f64 {
    let snapshot = net.eta_snapshot();
    let rows: Vec<&Vec<f64>> = snapshot.iter().flatten().map(|(_, row)| row).collect();
    if rows.is_empty() {
        return 1.0;
    }
    let hit = rows
        .iter()
        .filter(|row| row.iter().cloned().fold(0.0f64, f64::max) >= threshold)
        .count();
    hit as f64 / rows.len() as f64
}

/// Run the alternating search for `cfg.epochs - state.epoch` further
/// epochs, invoking `on_epoch` after each one (checkpointing hook).
pub fn run_search<F: Scalar>(
    net: &mut Supernet<F>,
    pairs: &SplitPairs<F>,
    cfg: &SearchConfig,
    state: &mut SearchState<F>,
    mut on_epoch: impl FnMut(&Supernet<F>, &SearchState<F>, &EpochRecord) -> SearchResult<()>,
) -> SearchResult<SearchHistory> {
    if pairs.train.is_empty() {
        return Err(SearchError::EmptySplit("train"));
    }
    if pairs.val.is_empty() {
        return Err(SearchError::EmptySplit("val"));
    }
    let mut history = SearchHistory::default();
    while state.epoch < cfg.epochs {
        let started = std::time::Instant::now();
        let losses = search_step(net, pairs, cfg, state)?;
        let (eta_entropy_mean, eta_max_mean, eta_max_min, alpha_max) = arch_stats(net);
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss: losses.train_loss,
            val_loss: losses.val_loss,
            l_alpha: losses.l_alpha,
            l_eta: losses.l_eta,
            eta_entropy_mean,
            eta_max_mean,
            eta_max_min,
            alpha_max_up: alpha_max[0],
            alpha_max_same: alpha_max[1],
            alpha_max_down: alpha_max[2],
            wall_ms: started.elapsed().as_millis() as u64,
        };
        state.epoch += 1;
        on_epoch(net, state, &record)?;
        history.records.push(record);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::{build_supernet, PartialChannelConfig, TopologyShape};

    fn tiny_shape() -> TopologyShape {
        TopologyShape {
            layers: 5,
            base_channels: 4,
            dims: 2,
            ..Default::default()
        }
    }

    fn tiny_cfg() -> SearchConfig {
        SearchConfig {
            loss: LossWeights {
                ncc_window: 5,
                integration_steps: 4,
                ..Default::default()
            },
            epochs: 4,
            seed: 7,
            ..Default::default()
        }
    }

    fn tiny_pairs(seed: u64) -> SplitPairs<f64> {
        let mut rng = RngStream::new(seed);
        let mut mk = |_: usize| {
            let vals: Vec<f64> = (0..16 * 16).map(|_| rng.uniform(0.0, 1.0)).collect();
            Tensor::new(vec![1, 1, 16, 16], vals).unwrap()
        };
        SplitPairs {
            train: vec![
                ImagePair {
                    moving: mk(0),
                    fixed: mk(1),
                },
                ImagePair {
                    moving: mk(2),
                    fixed: mk(3),
                },
            ],
            val: vec![ImagePair {
                moving: mk(4),
                fixed: mk(5),
            }],
        }
    }

    #[test]
    fn entropy_penalty_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let one_hot = Tensor::new(vec![3], vec![1.0, 0.0, 0.0]).unwrap();
        let h = entropy_penalty(&mut tape, &[one_hot]).unwrap();
        assert_eq!(h.item().unwrap(), 0.0);

        let uniform3 = Tensor::full(&[3], 1.0 / 3.0);
        let h3 = entropy_penalty(&mut tape, &[uniform3]).unwrap().item().unwrap();
        assert!((h3 - 3.0f64.ln()).abs() < 1e-12);

        let uniform8 = Tensor::full(&[8], 0.125);
        let h8 = entropy_penalty(&mut tape, &[uniform8.clone()]).unwrap().item().unwrap();
        assert!((h8 - 8.0f64.ln()).abs() < 1e-12);

        // Two rows sum their entropies.
        let h2 = entropy_penalty(&mut tape, &[uniform8.clone(), uniform8])
            .unwrap()
            .item()
            .unwrap();
        assert!((h2 - 2.0 * 8.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_penalty_permutation_invariant_and_validated() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::new(vec![3], vec![0.6, 0.3, 0.1]).unwrap();
        let b = Tensor::new(vec![3], vec![0.1, 0.6, 0.3]).unwrap();
        let ha = entropy_penalty(&mut tape, &[a]).unwrap().item().unwrap();
        let hb = entropy_penalty(&mut tape, &[b]).unwrap().item().unwrap();
        assert!((ha - hb).abs() < 1e-12);

        let bad_sum = Tensor::new(vec![2], vec![0.7, 0.7]).unwrap();
        assert!(entropy_penalty(&mut tape, &[bad_sum]).is_err());
        let negative = Tensor::new(vec![2], vec![-0.2, 1.2]).unwrap();
        assert!(entropy_penalty(&mut tape, &[negative]).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", vec![3], vec![1.0, -2.0, 0.5], ParamGroup::Weights)
            .unwrap();
        let mut opt = AdamOpt::new(&store, vec![id], AdamParams::default());
        let before = store.tensor(id);
        opt.apply(&mut store, &[None], 0.1, 0.0).unwrap();
        assert_eq!(opt.step, 1);
        assert!(store.tensor(id).bit_eq(&before));
    }

    #[test]
    fn adam_constant_gradient_approaches_lr_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", vec![2], vec![0.0, 0.0], ParamGroup::Weights)
            .unwrap();
        let mut opt = AdamOpt::new(&store, vec![id], AdamParams::default());
        let g = Tensor::new(vec![2], vec![0.003, -7.0]).unwrap();
        let lr = 0.01;
        let mut last = store.tensor(id).values().to_vec();
        let mut step_sizes = [0.0f64; 2];
        for _ in 0..600 {
            opt.apply(&mut store, &[Some(g.clone())], lr, 0.0).unwrap();
            let now = store.tensor(id).values().to_vec();
            step_sizes = [now[0] - last[0], now[1] - last[1]];
            last = now;
        }
        // Update magnitude tends to lr * sign(g) regardless of |g|.
        assert!((step_sizes[0] + lr).abs() < 0.05 * lr, "{step_sizes:?}");
        assert!((step_sizes[1] - lr).abs() < 0.05 * lr, "{step_sizes:?}");
    }

    #[test]
    fn adam_runs_are_deterministic() {
        let run = || {
            let mut store = ParamStore::<f64>::new();
            let id = store
                .add("w", vec![2], vec![0.4, -0.3], ParamGroup::Weights)
                .unwrap();
            let mut opt = AdamOpt::new(&store, vec![id], AdamParams::default());
            for i in 0..50 {
                let g = Tensor::new(vec![2], vec![0.1 * (i as f64).sin(), -0.2]).unwrap();
                opt.apply(&mut store, &[Some(g)], 0.003, 0.0).unwrap();
            }
            store.tensor(id).values().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn gradient_clipping_bounds_update_norm() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add("w", vec![2], vec![0.0, 0.0], ParamGroup::Weights)
            .unwrap();
        let mut opt = AdamOpt::new(&store, vec![id], AdamParams::default());
        let g = Tensor::new(vec![2], vec![3000.0, -4000.0]).unwrap();
        opt.apply(&mut store, &[Some(g)], 0.1, 10.0).unwrap();
        // Clipped gradient has norm 10; direction preserved.
        let w = store.tensor(id);
        assert!(w.values()[0] < 0.0 && w.values()[1] > 0.0);
    }

    #[test]
    fn phase_separation_is_bitwise() {
        let mut net = build_supernet::<f64>(&tiny_shape(), &PartialChannelConfig { k: 2, ..Default::default() }, 3).unwrap();
        let pairs = tiny_pairs(1);
        let cfg = tiny_cfg();
        let mut state = SearchState::new(&net, &cfg, pairs.train.len(), pairs.val.len());

        let arch_before = net.store.snapshot_group(ParamGroup::Arch);
        let theta_before = net.store.snapshot_group(ParamGroup::Weights);
        search_step(&mut net, &pairs, &cfg, &mut state).unwrap();
        let arch_after = net.store.snapshot_group(ParamGroup::Arch);
        let theta_after = net.store.snapshot_group(ParamGroup::Weights);

        // Both groups moved overall (the step ran both phases)...
        assert_ne!(theta_before, theta_after);
        assert_ne!(arch_before, arch_after);

        // ...but with lr_arch = 0 architecture weights stay bit-identical,
        // and with lr_weights = 0 theta stays bit-identical.
        let mut net2 = build_supernet::<f64>(&tiny_shape(), &PartialChannelConfig { k: 2, ..Default::default() }, 3).unwrap();
        let cfg2 = SearchConfig {
            lr_arch: 0.0,
            ..tiny_cfg()
        };
        let mut state2 = SearchState::new(&net2, &cfg2, pairs.train.len(), pairs.val.len());
        let arch_b = net2.store.snapshot_group(ParamGroup::Arch);
        for _ in 0..3 {
            search_step(&mut net2, &pairs, &cfg2, &mut state2).unwrap();
        }
        assert_eq!(arch_b, net2.store.snapshot_group(ParamGroup::Arch));

        let mut net3 = build_supernet::<f64>(&tiny_shape(), &PartialChannelConfig { k: 2, ..Default::default() }, 3).unwrap();
        let cfg3 = SearchConfig {
            lr_weights: 0.0,
            ..tiny_cfg()
        };
        let mut state3 = SearchState::new(&net3, &cfg3, pairs.train.len(), pairs.val.len());
        let theta_b = net3.store.snapshot_group(ParamGroup::Weights);
        search_step(&mut net3, &pairs, &cfg3, &mut state3).unwrap();
        assert_eq!(theta_b, net3.store.snapshot_group(ParamGroup::Weights));
    }

    #[test]
    fn zero_penalty_weights_reduce_to_plain_objective() {
        // With gamma = beta = 0 and val = train, the phase-B objective
        // value equals the plain symmetric loss on that pair.
        let pc = PartialChannelConfig { k: 2, ..Default::default() };
        let mut net = build_supernet::<f64>(&tiny_shape(), &pc, 5).unwrap();
        let pairs = tiny_pairs(2);
        let pair = pairs.val[0].clone();
        let cfg = SearchConfig {
            gamma: 0.0,
            beta: 0.0,
            ..tiny_cfg()
        };

        net.reset_mask_stream();
        let mut tape = Tape::new();
        let (v, _b) = net
            .forward(&mut tape, &pair.moving, &pair.fixed, TrackGroups::ArchOnly)
            .unwrap();
        let sym = symmetric_loss_parts(&mut tape, &pair.moving, &pair.fixed, &v, &cfg.loss)
            .unwrap()
            .total
            .item()
            .unwrap();

        // Reconstruct what phase B would evaluate: sym + 0 * penalties.
        let mut tape2 = Tape::new();
        net.reset_mask_stream();
        let (v2, mut b2) = net
            .forward(&mut tape2, &pair.moving, &pair.fixed, TrackGroups::ArchOnly)
            .unwrap();
        let sym2 = symmetric_loss_parts(&mut tape2, &pair.moving, &pair.fixed, &v2, &cfg.loss)
            .unwrap()
            .total;
        let rows: Vec<Tensor<f64>> = (0..3)
            .map(|i| {
                let logits = b2.bind(&mut tape2, &net.store, net.alpha[i]);
                tape2.softmax(&logits, 0).unwrap()
            })
            .collect();
        let pen = entropy_penalty(&mut tape2, &rows).unwrap();
        let weighted = tape2.scale(&pen, 0.0).unwrap();
        let total = tape2.add(&sym2, &weighted).unwrap().item().unwrap();
        assert_eq!(total.to_bits(), sym.to_bits());
    }

    #[test]
    fn fifty_steps_reduce_train_loss_on_tiny_instance() {
        let pc = PartialChannelConfig { k: 2, ..Default::default() };
        let mut net = build_supernet::<f64>(&tiny_shape(), &pc, 11).unwrap();
        // A self-registration task: moving is a smoothly warped copy of
        // fixed, so there is real signal to descend.
        let mut rng = RngStream::new(40);
        let fixed_vals: Vec<f64> = {
            // smooth blobs: sum of gaussians
            let mut v = vec![0.0; 16 * 16];
            for _ in 0..4 {
                let cx = rng.uniform(3.0, 13.0);
                let cy = rng.uniform(3.0, 13.0);
                for x in 0..16 {
                    for y in 0..16 {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        v[x * 16 + y] += (-d2 / 8.0).exp();
                    }
                }
            }
            v.iter().map(|&x| x.min(1.0)).collect()
        };
        let fixed = Tensor::new(vec![1, 1, 16, 16], fixed_vals.clone()).unwrap();
        let moving = {
            let shifted: Vec<f64> = (0..16 * 16)
                .map(|i| {
                    let (x, y) = (i / 16, i % 16);
                    let sx = (x + 1).min(15);
                    fixed_vals[sx * 16 + y]
                })
                .collect();
            Tensor::new(vec![1, 1, 16, 16], shifted).unwrap()
        };
        let pair = ImagePair { moving, fixed };
        let pairs = SplitPairs {
            train: vec![pair.clone()],
            val: vec![pair],
        };
        let cfg = SearchConfig {
            lr_weights: 1e-3,
            epochs: 50,
            loss: LossWeights {
                ncc_window: 5,
                integration_steps: 4,
                lambda_smooth: 0.5,
            },
            seed: 21,
            ..Default::default()
        };
        let mut state = SearchState::new(&net, &cfg, 1, 1);
        let history = run_search(&mut net, &pairs, &cfg, &mut state, |_, _, _| Ok(())).unwrap();
        let first = history.records[0].train_loss;
        let last = history.records.last().unwrap().train_loss;
        assert!(
            last <= 0.8 * first,
            "expected >= 20% reduction: first {first}, last {last}"
        );
    }

    #[test]
    fn run_search_zero_epochs_is_a_no_op() {
        let pc = PartialChannelConfig { k: 2, ..Default::default() };
        let mut net = build_supernet::<f64>(&tiny_shape(), &pc, 13).unwrap();
        let pairs = tiny_pairs(3);
        let cfg = SearchConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let before: Vec<_> = net.store.snapshot_group(ParamGroup::Weights);
        let mut state = SearchState::new(&net, &cfg, pairs.train.len(), pairs.val.len());
        let history = run_search(&mut net, &pairs, &cfg, &mut state, |_, _, _| Ok(())).unwrap();
        assert!(history.records.is_empty());
        assert_eq!(before, net.store.snapshot_group(ParamGroup::Weights));
    }

    #[test]
    fn lr_schedules() {
        assert_eq!(LrSchedule::Constant.at(0.1, 5, 10), 0.1);
        let start = LrSchedule::Cosine.at(0.1, 0, 100);
        let end = LrSchedule::Cosine.at(0.1, 99, 100);
        assert!((start - 0.1).abs() < 1e-12);
        assert!(end.abs() < 1e-9);
    }
}
