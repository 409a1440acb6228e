//! Training: seeded initialization, the recorded forward pipeline, the
//! epoch loop, and the finite-difference gradient audit.
//!
//! One step processes one support image: graph refinement of its patches,
//! multi-aggregation, L2 normalization, cache-plus-zero-shot logits,
//! cross-entropy, reverse pass, AdamW update, key re-normalization. Runs
//! are bitwise deterministic given the seed.

use serde::{Deserialize, Serialize};

use crate::cache::{build_cache, CacheModel};
use crate::checkpoint::Checkpoint;
use crate::embank::{ClassifierWeights, EmbeddingBank};
use crate::error::{Error, Result};
use crate::graphattn::{Activation, AttentionMode, GraphParams, LayerParams};
use crate::mat::Mat;
use crate::optim::{cosine_lr, AdamHyper, AdamW, ParamSet};
use crate::pooling::{AggBranch, Aggregator, PoolingParams, DEFAULT_AGGREGATORS};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};

/// All knobs of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub shots: usize,
    pub alpha: f64,
    pub beta: f64,
    pub attention_mode: AttentionMode,
    pub aggregators: Vec<Aggregator>,
    pub graph_layers: usize,
    pub hidden_dim: Option<usize>,
    pub negative_slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            epochs: 100,
            weight_decay: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            shots: 1,
            alpha: 1.0,
            beta: 1.0,
            attention_mode: AttentionMode::Combined,
            aggregators: DEFAULT_AGGREGATORS.to_vec(),
            graph_layers: 1,
            hidden_dim: None,
            negative_slope: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 < 0.0 {
            return Err(Error::Config(format!("lr0 must be >= 0, got {}", self.lr0)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.graph_layers == 0 {
            return Err(Error::Config("graph_layers must be >= 1".into()));
        }
        if self.aggregators.is_empty() {
            return Err(Error::Config("need at least one aggregator".into()));
        }
        if self.beta <= 0.0 || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "need alpha >= 0 and beta > 0, got alpha={}, beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Seeded model initialization: Xavier-uniform transforms, Xavier-uniform
/// attention vectors, unit gammas, cache keys copied from the normalized
/// support globals.
pub fn init_checkpoint(
    support: &EmbeddingBank,
    wc: &ClassifierWeights,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    config.validate()?;
    let cache = build_cache(support, wc, config.alpha, config.beta)?;
    let d = support.dim();
    let hidden = config.hidden_dim.unwrap_or(d);

    // stream 0 of the run seed initializes parameters
    let mut root = SplitMix64::new(config.seed);
    let mut rng = root.split();

    let mut layers = Vec::with_capacity(config.graph_layers);
    for l in 0..config.graph_layers {
        let d_in = if l == 0 { d } else { hidden };
        let d_out = hidden;
        let w_scale = (6.0 / (d_in + d_out) as f64).sqrt();
        let a_scale = (6.0 / (2 * d_out + 1) as f64).sqrt();
        let last = l == config.graph_layers - 1;
        layers.push(LayerParams {
            w: Mat::uniform(d_out, d_in, w_scale, &mut rng),
            a: Mat::uniform(1, 2 * d_out, a_scale, &mut rng),
            negative_slope: config.negative_slope,
            activation: if last {
                Activation::Identity
            } else {
                Activation::Relu
            },
        });
    }
    let graph = GraphParams::new(layers)?;

    let mut branches = Vec::with_capacity(config.aggregators.len());
    let w_scale = (6.0 / (hidden + d) as f64).sqrt();
    for &kind in &config.aggregators {
        branches.push(AggBranch {
            kind,
            gamma: 1.0,
            w: Mat::uniform(d, hidden, w_scale, &mut rng),
        });
    }
    let pooling = PoolingParams::new(branches)?;

    Ok(Checkpoint {
        graph,
        pooling,
        cache,
        mode: config.attention_mode,
    })
}

/// Parameter order shared by `ParamSet`, the recorded tape leaves, and the
/// write-back: theta, then (W, a) per layer, then (gamma, W_m) per branch.
pub fn params_from(ckpt: &Checkpoint) -> ParamSet {
    let mut params = ParamSet::new();
    params.push("theta", ckpt.cache.theta.clone(), true);
    for (l, layer) in ckpt.graph.layers.iter().enumerate() {
        params.push(format!("layer{l}.w"), layer.w.clone(), false);
        params.push(format!("layer{l}.a"), layer.a.clone(), false);
    }
    for branch in &ckpt.pooling.branches {
        params.push(
            format!("agg.{}.gamma", branch.kind),
            Mat::from_vec(1, 1, vec![branch.gamma]),
            false,
        );
        params.push(format!("agg.{}.w", branch.kind), branch.w.clone(), false);
    }
    params
}

fn write_back(params: &ParamSet, ckpt: &mut Checkpoint) {
    let mut it = params.entries.iter();
    ckpt.cache.theta = it.next().expect("theta entry").value.clone();
    for layer in &mut ckpt.graph.layers {
        layer.w = it.next().expect("layer w").value.clone();
        layer.a = it.next().expect("layer a").value.clone();
    }
    for branch in &mut ckpt.pooling.branches {
        branch.gamma = it.next().expect("gamma").value[(0, 0)];
        branch.w = it.next().expect("branch w").value.clone();
    }
}

/// Static description of the pipeline, shared by all items of a run.
struct PipelineMeta {
    layers: Vec<(f64, Activation)>,
    branch_kinds: Vec<Aggregator>,
    mode: AttentionMode,
    alpha: f64,
    beta: f64,
    values: Mat,
    classifier: Mat,
}

impl PipelineMeta {
    fn of(ckpt: &Checkpoint) -> Self {
        Self {
            layers: ckpt
                .graph
                .layers
                .iter()
                .map(|l| (l.negative_slope, l.activation))
                .collect(),
            branch_kinds: ckpt.pooling.branches.iter().map(|b| b.kind).collect(),
            mode: ckpt.mode,
            alpha: ckpt.cache.alpha,
            beta: ckpt.cache.beta,
            values: ckpt.cache.values.clone(),
            classifier: ckpt.cache.classifier.clone(),
        }
    }
}

/// Node handles of one recorded item.
struct Recorded {
    loss: NodeId,
    logits: NodeId,
    f_hat: NodeId,
    /// Parameter leaves in `ParamSet` order.
    leaves: Vec<NodeId>,
}

/// Record one item's forward pass on a fresh tape.
fn record_loss(
    tape: &mut Tape,
    meta: &PipelineMeta,
    param_values: &[Mat],
    patches: &Mat,
    label: usize,
) -> Result<Recorded> {
    let mut leaves = Vec::with_capacity(param_values.len());
    for v in param_values {
        leaves.push(tape.param(v.clone()));
    }
    let theta = leaves[0];

    let mut h = tape.constant(patches.clone());
    let last = meta.layers.len() - 1;
    for (l, &(slope, activation)) in meta.layers.iter().enumerate() {
        let w = leaves[1 + 2 * l];
        let a_vec = leaves[2 + 2 * l];
        let g = tape.matmul_nt(h, w)?;
        let mixed = match meta.mode {
            AttentionMode::SelfOnly => {
                // one-hot attention rows: each patch keeps its own transform
                let _ = a_vec;
                g
            }
            mode => {
                let e = match mode {
                    AttentionMode::A1 => tape.pair_scores(g, a_vec)?,
                    AttentionMode::A2 => tape.matmul_nt(g, g)?,
                    AttentionMode::Combined => {
                        let a1 = tape.pair_scores(g, a_vec)?;
                        let dots = tape.matmul_nt(g, g)?;
                        let gate = tape.sigmoid(dots);
                        tape.mul_elem(a1, gate)?
                    }
                    AttentionMode::SelfOnly => unreachable!(),
                };
                let scores = tape.leaky_relu(e, slope);
                let coeffs = tape.softmax_rows(scores);
                tape.matmul(coeffs, g)?
            }
        };
        h = if l == last {
            mixed // identity on the last layer
        } else if activation == Activation::Relu {
            tape.relu(mixed)
        } else {
            mixed
        };
    }

    let branch_base = 1 + 2 * meta.layers.len();
    let mut pooled_sum: Option<NodeId> = None;
    for (b, &kind) in meta.branch_kinds.iter().enumerate() {
        let gamma = leaves[branch_base + 2 * b];
        let w_m = leaves[branch_base + 2 * b + 1];
        let stat = match kind {
            Aggregator::Mean => tape.col_mean(h)?,
            Aggregator::Max => tape.col_max(h)?,
            Aggregator::Min => tape.col_min(h)?,
            Aggregator::Std => tape.col_std(h)?,
        };
        let projected = tape.matmul_nt(stat, w_m)?;
        let scaled = tape.scale_by_scalar(projected, gamma)?;
        pooled_sum = Some(match pooled_sum {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    let f_hat = tape.l2_normalize(pooled_sum.expect("at least one branch"))?;

    let sims = tape.matmul_nt(f_hat, theta)?;
    let affinity = tape.exp_affine(sims, meta.beta, -meta.beta);
    let values = tape.constant(meta.values.clone());
    let cache_term = tape.matmul(affinity, values)?;
    let scaled_cache = tape.scale(cache_term, meta.alpha);
    let classifier = tape.constant(meta.classifier.clone());
    let zero_shot = tape.matmul_nt(f_hat, classifier)?;
    let logits = tape.add(scaled_cache, zero_shot)?;
    let loss = tape.cross_entropy(logits, label)?;
    Ok(Recorded {
        loss,
        logits,
        f_hat,
        leaves,
    })
}

/// Per-epoch training log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Result of a run: the trained checkpoint and the loss curve.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_log: Vec<LossRow>,
}

/// Train on a support bank (every class with equally many items).
pub fn train(
    support: &EmbeddingBank,
    wc: &ClassifierWeights,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut ckpt = init_checkpoint(support, wc, config)?;
    let meta = PipelineMeta::of(&ckpt);
    let mut params = params_from(&ckpt);
    let mut opt = AdamW::new(&params, config.adam_hyper());

    // stream 1 of the run seed drives the per-epoch shuffles
    let mut root = SplitMix64::new(config.seed);
    let _ = root.next_u64();
    let mut shuffle_rng = root.split();

    let items: Vec<(Mat, usize)> = (0..support.item_count())
        .map(|i| (support.patches_mat(i), support.label(i)))
        .collect();

    let mut loss_log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.lr0, config.epochs);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for &item in &order {
            params.zero_grads();
            let (patches, label) = &items[item];
            let mut tape = Tape::new();
            let values: Vec<Mat> = params.entries.iter().map(|e| e.value.clone()).collect();
            let rec = record_loss(&mut tape, &meta, &values, patches, *label)?;
            let loss_value = tape.value(rec.loss)[(0, 0)];
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: loss_value,
                    epoch,
                    item,
                });
            }
            epoch_loss += loss_value;
            tape.backward(rec.loss)?;
            for (entry, &leaf) in params.entries.iter_mut().zip(&rec.leaves) {
                entry.grad.add_assign(tape.grad(leaf));
            }
            opt.step(&mut params, lr)?;
        }
        loss_log.push(LossRow {
            epoch,
            loss: epoch_loss / items.len() as f64,
            lr,
        });
    }

    write_back(&params, &mut ckpt);
    Ok(TrainOutcome {
        checkpoint: ckpt,
        loss_log,
    })
}

/// Recorded forward outputs of one item through the full training pipeline:
/// (refined normalized embedding, logits, loss).
pub fn pipeline_outputs(
    ckpt: &Checkpoint,
    patches: &Mat,
    label: usize,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let meta = PipelineMeta::of(ckpt);
    let values: Vec<Mat> = params_from(ckpt).entries.into_iter().map(|e| e.value).collect();
    let mut tape = Tape::new();
    let rec = record_loss(&mut tape, &meta, &values, patches, label)?;
    Ok((
        tape.value(rec.f_hat).data().to_vec(),
        tape.value(rec.logits).data().to_vec(),
        tape.value(rec.loss)[(0, 0)],
    ))
}

/// Outcome of the finite-difference audit.
#[derive(Debug, Clone)]
pub struct AuditReport {
    pub instances: usize,
    pub max_rel_error: f64,
    pub worst_instance: String,
    pub tolerance: f64,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

const AUDIT_TOLERANCE: f64 = 1e-4;
const AUDIT_STEP: f64 = 1e-4;
const AUDIT_ABS_FLOOR: f64 = 1e-6;

fn analytic_grads(
    ckpt: &Checkpoint,
    items: &[(Mat, usize)],
) -> Result<Vec<Mat>> {
    let meta = PipelineMeta::of(ckpt);
    let mut params = params_from(ckpt);
    params.zero_grads();
    let values: Vec<Mat> = params.entries.iter().map(|e| e.value.clone()).collect();
    for (patches, label) in items {
        let mut tape = Tape::new();
        let rec = record_loss(&mut tape, &meta, &values, patches, *label)?;
        tape.backward(rec.loss)?;
        for (entry, &leaf) in params.entries.iter_mut().zip(&rec.leaves) {
            entry.grad.add_assign(tape.grad(leaf));
        }
    }
    Ok(params.entries.into_iter().map(|e| e.grad).collect())
}

fn total_loss(ckpt: &Checkpoint, values: &[Mat], items: &[(Mat, usize)]) -> Result<f64> {
    let meta = PipelineMeta::of(ckpt);
    let mut total = 0.0;
    for (patches, label) in items {
        let mut tape = Tape::new();
        let rec = record_loss(&mut tape, &meta, values, patches, *label)?;
        total += tape.value(rec.loss)[(0, 0)];
    }
    Ok(total)
}

/// Max relative error between reverse-mode and central-difference gradients
/// over every parameter scalar of one instance.
pub fn finite_diff_error(ckpt: &Checkpoint, items: &[(Mat, usize)]) -> Result<f64> {
    let analytic = analytic_grads(ckpt, items)?;
    let base: Vec<Mat> = params_from(ckpt).entries.into_iter().map(|e| e.value).collect();
    let mut worst = 0.0f64;
    for (t, tensor) in base.iter().enumerate() {
        for k in 0..tensor.len() {
            let mut plus = base.clone();
            plus[t].data_mut()[k] += AUDIT_STEP;
            let mut minus = base.clone();
            minus[t].data_mut()[k] -= AUDIT_STEP;
            let numeric =
                (total_loss(ckpt, &plus, items)? - total_loss(ckpt, &minus, items)?) / (2.0 * AUDIT_STEP);
            let exact = analytic[t].data()[k];
            let denom = exact.abs().max(numeric.abs());
            let err = if denom < AUDIT_ABS_FLOOR {
                if (exact - numeric).abs() <= AUDIT_ABS_FLOOR {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                (exact - numeric).abs() / denom
            };
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// All non-empty aggregator subsets, in a fixed order.
pub fn aggregator_subsets() -> Vec<Vec<Aggregator>> {
    let all = Aggregator::ALL;
    (1u32..16)
        .map(|bits| {
            all.iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, &a)| a)
                .collect()
        })
        .collect()
}

/// Finite-difference audit over random small instances spanning every
/// attention mode and every aggregator subset, plus a two-layer pass per
/// mode for the hidden ReLU path.
pub fn gradient_audit(seed: u64) -> Result<AuditReport> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    let mut worst_instance = String::new();
    let mut count = 0usize;

    let mut run = |mode: AttentionMode,
                   aggs: &[Aggregator],
                   layers: usize,
                   rng: &mut SplitMix64,
                   worst: &mut f64,
                   worst_instance: &mut String,
                   count: &mut usize|
     -> Result<()> {
        let classes = 2 + rng.next_below(2); // 2..=3
        let dim = 2 + rng.next_below(3); // 2..=4
        let patches = 2 + rng.next_below(3); // 2..=4
        let bank = crate::embank::random_bank(classes, 1, dim, patches, rng.next_u64());
        let wc = ClassifierWeights::from_mat(&Mat::uniform(classes, dim, 0.7, rng));
        let config = TrainConfig {
            seed: rng.next_u64(),
            alpha: 0.5 + rng.next_f64(),
            beta: 0.5 + 2.0 * rng.next_f64(),
            attention_mode: mode,
            aggregators: aggs.to_vec(),
            graph_layers: layers,
            ..TrainConfig::default()
        };
        let ckpt = init_checkpoint(&bank, &wc, &config)?;
        let items: Vec<(Mat, usize)> = (0..bank.item_count())
            .map(|i| (bank.patches_mat(i), bank.label(i)))
            .collect();
        let err = finite_diff_error(&ckpt, &items)?;
        *count += 1;
        if err > *worst {
            *worst = err;
            *worst_instance = format!(
                "mode={mode} aggs={:?} layers={layers} N={classes} d={dim} P={patches}",
                aggs.iter().map(|a| a.name()).collect::<Vec<_>>()
            );
        }
        Ok(())
    };

    for mode in AttentionMode::ALL {
        for subset in aggregator_subsets() {
            run(
                mode,
                &subset,
                1,
                &mut rng,
                &mut worst,
                &mut worst_instance,
                &mut count,
            )?;
        }
        // hidden ReLU path
        run(
            mode,
            &DEFAULT_AGGREGATORS,
            2,
            &mut rng,
            &mut worst,
            &mut worst_instance,
            &mut count,
        )?;
    }

    Ok(AuditReport {
        instances: count,
        max_rel_error: worst,
        worst_instance,
        tolerance: AUDIT_TOLERANCE,
    })
}
