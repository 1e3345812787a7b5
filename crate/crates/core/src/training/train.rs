use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Pair;
use super::loss::colbert_loss_graph;
use super::optim::AdamW;
use super::schedule::lr_at;
use crate::error::{Error, Result};
use crate::model::{Backbone, Dropout, ModelInput, ParamId, ParamRole};
use crate::modeswitch::{base_checksum, lm_head_digest, set_mode, AttentionPath, Mode};
use crate::retrieval::embed_graph;
use crate::tensorcore::{Graph, Var};
use crate::tokens::ASK;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    RetrievalOnly,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f32,
    pub lr: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub mode: TrainMode,
    /// Fraction of joint-mode steps that are generation batches.
    pub gen_frac: f64,
    /// Overrides the epoch-derived number of optimizer steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Trains the input embedding of a model whose LM head is tied to it.
    pub fault_tied_lm_head: bool,
    /// Leaves the LM head marked trainable.
    pub fault_unfrozen_lm_head: bool,
    /// Before each update, adds the bf16 round-off of every trainable tensor
    /// to its gradient, as a lossy cross-replica sync would.
    pub fault_spurious_grad_sync: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.02,
            lr: 5e-5,
            warmup_frac: 0.08,
            epochs: 1,
            batch_size: 16,
            grad_accum: 1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mode: TrainMode::RetrievalOnly,
            gen_frac: 0.2,
            max_steps: None,
            seed: 0,
            fault_tied_lm_head: false,
            fault_unfrozen_lm_head: false,
            fault_spurious_grad_sync: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac must lie in [0, 1), got {}", self.warmup_frac));
        }
        if !(self.gen_frac > 0.0 && self.gen_frac < 1.0) {
            return bad(format!("gen_frac must lie in (0, 1), got {}", self.gen_frac));
        }
        if self.batch_size == 0 || self.grad_accum == 0 {
            return bad("batch_size and grad_accum must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a non-negative number, got {}", self.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchKind {
    Retrieval,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kind: BatchKind,
    pub loss: f32,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    /// Largest element-wise change of any non-adapter tensor.
    pub base_max_abs_delta: f32,
    pub base_checksum_unchanged: bool,
    pub lm_head_digest_match: bool,
    pub trainable_params: usize,
    pub generation_steps: usize,
    /// Non-adapter tensors that received a nonzero gradient at some step.
    pub gradient_leaks: Vec<String>,
    pub elapsed_secs: f64,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f32> {
        self.steps.last().map(|s| s.loss)
    }
}

/// Whether optimizer step `step` of a joint run is a generation batch. With
/// `gen_frac = 0.2` these are the steps with `step % 5 == 4`.
pub fn is_generation_step(step: usize, gen_frac: f64) -> bool {
    let count = |s: usize| (s as f64 * gen_frac + 1e-9).floor() as usize;
    count(step + 1) > count(step)
}

/// Smallest joint run length containing exactly `retrieval_steps` retrieval
/// batches.
pub fn joint_total_steps(retrieval_steps: usize, gen_frac: f64) -> usize {
    let (mut total, mut seen) = (0, 0);
    while seen < retrieval_steps {
        if !is_generation_step(total, gen_frac) {
            seen += 1;
        }
        total += 1;
    }
    total
}

/// Round to nearest even in bfloat16.
pub fn bf16_round(x: f32) -> f32 {
    let bits = x.to_bits();
    let rounded = bits.wrapping_add(0x7fff + ((bits >> 16) & 1));
    f32::from_bits(rounded & 0xffff_0000)
}

/// Names of non-adapter tensors whose gradient buffer is present and nonzero.
pub fn gradient_audit(model: &Backbone) -> Vec<String> {
    model
        .params()
        .entries()
        .filter(|(_, e)| e.role != ParamRole::Adapter)
        .filter(|(_, e)| e.tensor.grad.as_ref().is_some_and(|g| g.iter().any(|v| *v != 0.0)))
        .map(|(_, e)| e.name.clone())
        .collect()
}

/// Cycles through a pair list in per-epoch shuffled batches.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(len: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        let mut b = Self {
            order: (0..len).collect(),
            cursor: len,
            batch,
            rng,
        };
        b.reshuffle_if_needed();
        b
    }

    fn reshuffle_if_needed(&mut self) {
        if self.cursor + self.batch > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
    }

    fn next(&mut self) -> &[usize] {
        self.reshuffle_if_needed();
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..self.cursor]
    }
}

type ParamGrads = Vec<(usize, Vec<f32>)>;

fn collect(g: &Graph<'_>, loss: Var) -> Result<(f32, ParamGrads)> {
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, grads.params().map(|(k, v)| (k, v.to_vec())).collect()))
}

/// Contrastive loss of one batch on the model's current flags, with gradients
/// of every trainable tensor.
pub fn retrieval_batch_loss(
    model: &Backbone,
    pairs: &[&Pair],
    tau: f32,
    dropout: Option<&mut Dropout>,
) -> Result<(f32, ParamGrads)> {
    let mut g = Graph::new();
    let mut dropout = dropout;
    let mut qs = Vec::with_capacity(pairs.len());
    let mut ds = Vec::with_capacity(pairs.len());
    for p in pairs {
        qs.push(embed_graph(model, &mut g, &p.query_input(), true, dropout.as_deref_mut())?);
        ds.push(embed_graph(model, &mut g, &p.document_input(), false, dropout.as_deref_mut())?);
    }
    let loss = colbert_loss_graph(&mut g, &qs, &ds, tau)?;
    collect(&g, loss)
}

/// Next-token cross-entropy on `patches, ASK, caption`, averaged over pairs.
fn generation_batch_loss(
    model: &Backbone,
    pairs: &[&Pair],
    mut dropout: Option<&mut Dropout>,
) -> Result<(f32, ParamGrads)> {
    let mut g = Graph::new();
    let mut losses = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mut tokens = vec![ASK];
        tokens.extend_from_slice(&p.caption);
        let input = ModelInput {
            patches: p.document.clone(),
            tokens,
        };
        let hidden = model.forward_hidden(&mut g, &input, None, dropout.as_deref_mut())?;
        let logits = model.logits(&mut g, hidden)?;
        let start = input.patches.len();
        let targets: Vec<Option<usize>> = (0..input.len())
            .map(|i| {
                (i >= start && i + 1 < input.len()).then(|| input.tokens[i - start + 1] as usize)
            })
            .collect();
        losses.push(g.cross_entropy(logits, &targets)?);
    }
    let mut total = losses[0];
    for l in &losses[1..] {
        total = g.add(total, *l)?;
    }
    let mean = g.scale(total, 1.0 / losses.len() as f32)?;
    collect(&g, mean)
}

fn accumulate(model: &mut Backbone, grads: ParamGrads, weight: f32) {
    for (key, grad) in grads {
        let t = model.params_mut().get_mut(ParamId(key));
        let buf = t.grad.get_or_insert_with(|| vec![0.0; grad.len()]);
        for (b, g) in buf.iter_mut().zip(&grad) {
            *b += weight * g;
        }
    }
}

/// Retrieval-only contrastive training of the adapters.
pub fn train(model: &mut Backbone, corpus: &[Pair], cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.mode != TrainMode::RetrievalOnly {
        return Err(Error::Config("train expects mode = retrieval_only; use train_joint".into()));
    }
    run(model, corpus, None, cfg)
}

/// Interleaves contrastive batches with LoRA-on causal next-token batches.
pub fn train_joint(
    model: &mut Backbone,
    corpus: &[Pair],
    gen_corpus: &[Pair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if cfg.mode != TrainMode::Joint {
        return Err(Error::Config("train_joint expects mode = joint".into()));
    }
    if gen_corpus.len() < cfg.batch_size {
        return Err(Error::Empty("generation corpus smaller than one batch"));
    }
    run(model, corpus, Some(gen_corpus), cfg)
}

fn run(model: &mut Backbone, corpus: &[Pair], gen_corpus: Option<&[Pair]>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if !model.has_adapters() {
        return Err(Error::Config("model has no adapters to train".into()));
    }
    let batches_per_epoch = corpus.len() / cfg.batch_size;
    if batches_per_epoch == 0 {
        return Err(Error::Empty("corpus smaller than one batch"));
    }
    let start = Instant::now();

    model.freeze_base();
    if cfg.fault_tied_lm_head {
        if !model.lm_head_is_tied() {
            return Err(Error::Config(
                "fault_tied_lm_head needs a model built with tie_lm_head_to_embedding = true".into(),
            ));
        }
        let id = model.embedding_id();
        model.params_mut().get_mut(id).requires_grad = true;
    }
    if cfg.fault_unfrozen_lm_head {
        let id = model.lm_head_id();
        model.params_mut().get_mut(id).requires_grad = true;
    }
    model.params_mut().clear_grads();
    let trainable = model.params().trainable_ids();
    let trainable_params = model.params().trainable_count();
    let reference_head = lm_head_digest(model);
    let reference_base = base_checksum(model);
    let snapshot: Vec<(ParamId, Vec<f32>)> = model
        .params()
        .entries()
        .filter(|(_, e)| e.role != ParamRole::Adapter)
        .map(|(id, e)| (id, e.tensor.data().to_vec()))
        .collect();

    let stream = |s: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
        r.set_stream(s);
        r
    };
    let mut retrieval_batches = Batches::new(corpus.len(), cfg.batch_size, stream(0));
    let mut gen_batches = gen_corpus.map(|c| Batches::new(c.len(), cfg.batch_size, stream(1)));
    let mut dropout = Dropout::new(stream(2));
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);

    let base_steps = cfg.max_steps.unwrap_or(cfg.epochs * batches_per_epoch / cfg.grad_accum);
    let total = match (gen_corpus, cfg.max_steps) {
        // Stretch the run so the retrieval batches match a retrieval-only run.
        (Some(_), None) => joint_total_steps(base_steps, cfg.gen_frac),
        _ => base_steps,
    };

    let mut steps = Vec::with_capacity(total);
    let mut leaks: Vec<String> = Vec::new();
    for step in 0..total {
        let kind = match gen_corpus {
            Some(_) if is_generation_step(step, cfg.gen_frac) => BatchKind::Generation,
            _ => BatchKind::Retrieval,
        };
        match kind {
            BatchKind::Retrieval => set_mode(model, Mode::Retrieval),
            BatchKind::Generation => {
                model.set_adapters_enabled(true);
                model.select_full_attention(AttentionPath::Causal);
            }
        }
        let mut loss_sum = 0.0;
        for _ in 0..cfg.grad_accum {
            let (loss, grads) = match kind {
                BatchKind::Retrieval => {
                    let batch: Vec<&Pair> = retrieval_batches.next().iter().map(|i| &corpus[*i]).collect();
                    retrieval_batch_loss(model, &batch, cfg.temperature, Some(&mut dropout))?
                }
                BatchKind::Generation => {
                    let pairs = gen_corpus.expect("joint run");
                    let b = gen_batches.as_mut().expect("joint run");
                    let batch: Vec<&Pair> = b.next().iter().map(|i| &pairs[*i]).collect();
                    generation_batch_loss(model, &batch, Some(&mut dropout))?
                }
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            loss_sum += loss;
            accumulate(model, grads, 1.0 / cfg.grad_accum as f32);
        }
        if cfg.fault_spurious_grad_sync {
            for id in &trainable {
                let t = model.params_mut().get_mut(*id);
                let drift: Vec<f32> = t.data().iter().map(|w| bf16_round(*w) - w).collect();
                let buf = t.grad.get_or_insert_with(|| vec![0.0; drift.len()]);
                for (b, d) in buf.iter_mut().zip(drift) {
                    *b += d;
                }
            }
        }
        for name in gradient_audit(model) {
            if !leaks.contains(&name) {
                leaks.push(name);
            }
        }
        let lr = lr_at(step, total, cfg);
        opt.step(model.params_mut(), &trainable, lr as f32);
        model.params_mut().clear_grads();
        steps.push(StepRecord {
            step,
            kind,
            loss: loss_sum / cfg.grad_accum as f32,
            lr,
        });
    }
    set_mode(model, Mode::Generation);

    let base_max_abs_delta = snapshot
        .iter()
        .flat_map(|(id, before)| {
            let now = model.params().get(*id).data();
            before.iter().zip(now).map(|(a, b)| (a - b).abs())
        })
        .fold(0.0f32, f32::max);
    Ok(TrainReport {
        generation_steps: steps.iter().filter(|s| s.kind == BatchKind::Generation).count(),
        steps,
        base_max_abs_delta,
        base_checksum_unchanged: base_checksum(model) == reference_base,
        lm_head_digest_match: lm_head_digest(model) == reference_head,
        trainable_params,
        gradient_leaks: leaks,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
