//! The dual-head transformer backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LayerKind, ModelConfig};
use super::featurizer::{Featurizer, Patch, PATCH_DIM};
use super::lora::{Dropout, LoraAdapter, LoraLinear};
use super::mask::{build_sliding_causal_mask, AttentionMask};
use super::params::{ParamId, ParamRole, ParamStore};
use crate::error::{Error, Result};
use crate::generation::KvCache;
use crate::modeswitch::{AttentionPath, LayerModeState};
use crate::tensorcore::{Graph, Tensor, Var};
use crate::tokens::PAD;

/// A model input: image patches followed by text tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelInput {
    pub patches: Vec<Patch>,
    pub tokens: Vec<u32>,
}

impl ModelInput {
    pub fn tokens(tokens: Vec<u32>) -> Self {
        Self {
            patches: Vec::new(),
            tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.patches.len() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patches are always valid; tokens are valid unless they are padding.
    pub fn validity(&self) -> Vec<bool> {
        self.patches
            .iter()
            .map(|_| true)
            .chain(self.tokens.iter().map(|t| *t != PAD))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub kind: LayerKind,
    pub attn_norm: ParamId,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    pub ffn_norm: ParamId,
    pub gate: LoraLinear,
    pub up: LoraLinear,
    pub down: LoraLinear,
    /// Present on full-attention layers only.
    pub mode_state: Option<LayerModeState>,
}

impl Layer {
    pub fn projections(&self) -> [&LoraLinear; 7] {
        [&self.q, &self.k, &self.v, &self.o, &self.gate, &self.up, &self.down]
    }

    fn projections_mut(&mut self) -> [&mut LoraLinear; 7] {
        [
            &mut self.q,
            &mut self.k,
            &mut self.v,
            &mut self.o,
            &mut self.gate,
            &mut self.up,
            &mut self.down,
        ]
    }
}

/// Deliberate defects used by regression fixtures. All off by default.
#[derive(Debug, Clone, Default)]
pub struct FaultInjection {
    /// Mode switches toggle adapters but leave full-attention layers bidirectional.
    pub skip_attention_restore: bool,
    /// Generation leaves its KV cache on the model, and the next uncached
    /// forward reads it as a prefix.
    pub leak_kv_cache: bool,
    pub(crate) leaked: Option<KvCache>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: ModelConfig,
    pub(crate) params: ParamStore,
    pub(crate) embed: ParamId,
    pub(crate) lm_head: ParamId,
    pub(crate) final_norm: ParamId,
    pub(crate) layers: Vec<Layer>,
    pub(crate) text_proj: LoraLinear,
    pub(crate) featurizer: Featurizer,
    pub faults: FaultInjection,
}

/// Init gain of the projections that write into the residual stream (`o_proj`
/// and `down_proj`), relative to the `1/sqrt(in)` used elsewhere.
pub const RESIDUAL_GAIN: f32 = 0.3;

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f32) -> Tensor {
    let dist = Normal::new(0.0f32, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

struct Init<'a> {
    params: &'a mut ParamStore,
    base_rng: ChaCha8Rng,
    adapter_rng: ChaCha8Rng,
    config: &'a ModelConfig,
    adapters: bool,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> LoraLinear {
        self.linear_scaled(name, in_dim, out_dim, 1.0)
    }

    fn linear_scaled(&mut self, name: &str, in_dim: usize, out_dim: usize, gain: f32) -> LoraLinear {
        let w = normal_tensor(&mut self.base_rng, vec![out_dim, in_dim], gain / (in_dim as f32).sqrt());
        let weight = self.params.push(format!("{name}.weight"), ParamRole::Base, w);
        // Adapter tensors come from their own stream so that attaching them
        // never perturbs the base initialization.
        let adapter = self.adapters.then(|| {
            let r = self.config.lora_rank;
            let a = normal_tensor(&mut self.adapter_rng, vec![r, in_dim], 0.02).with_requires_grad(true);
            let b = Tensor::zeros(vec![out_dim, r]).with_requires_grad(true);
            LoraAdapter {
                a: self.params.push(format!("{name}.lora_a"), ParamRole::Adapter, a),
                b: self.params.push(format!("{name}.lora_b"), ParamRole::Adapter, b),
                rank: r,
                scale: self.config.lora_scale(),
                enabled: false,
                dropout_p: self.config.lora_dropout,
            }
        });
        LoraLinear {
            name: name.to_string(),
            weight,
            adapter,
            in_dim,
            out_dim,
        }
    }

    fn ones(&mut self, name: &str, n: usize) -> ParamId {
        let t = Tensor::new(vec![n], vec![1.0; n]).expect("shape");
        self.params.push(name, ParamRole::Base, t)
    }
}

impl Backbone {
    /// Seeded model with adapters attached (disabled, `B = 0`).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    /// The same seeded base weights with no adapters at all.
    pub fn new_base_only(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, false)
    }

    fn build(config: ModelConfig, seed: u64, adapters: bool) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.hidden_dim, config.ffn_dim, config.vocab_size);
        let mut params = ParamStore::default();
        let stream = |s: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let mut featurizer_rng = stream(2);
        let mut init = Init {
            params: &mut params,
            base_rng: stream(0),
            adapter_rng: stream(1),
            config: &config,
            adapters,
        };

        let embed_t = normal_tensor(&mut init.base_rng, vec![v, d], 1.0);
        let embed = init.params.push("embed_tokens", ParamRole::Embedding, embed_t);
        let mut layers = Vec::with_capacity(config.num_layers);
        for (l, kind) in config.layer_schedule.iter().enumerate() {
            let p = format!("layers.{l}");
            layers.push(Layer {
                kind: *kind,
                attn_norm: init.ones(&format!("{p}.attn_norm"), d),
                q: init.linear(&format!("{p}.q_proj"), d, d),
                k: init.linear(&format!("{p}.k_proj"), d, d),
                v: init.linear(&format!("{p}.v_proj"), d, d),
                o: init.linear_scaled(&format!("{p}.o_proj"), d, d, RESIDUAL_GAIN),
                ffn_norm: init.ones(&format!("{p}.ffn_norm"), d),
                gate: init.linear(&format!("{p}.gate_proj"), d, f),
                up: init.linear(&format!("{p}.up_proj"), d, f),
                down: init.linear_scaled(&format!("{p}.down_proj"), f, d, RESIDUAL_GAIN),
                mode_state: (*kind == LayerKind::Full).then(LayerModeState::new),
            });
        }
        let final_norm = init.ones("final_norm", d);
        let text_proj = init.linear("custom_text_proj", d, config.proj_dim);
        let lm_head = if config.tie_lm_head_to_embedding {
            embed
        } else {
            let t = normal_tensor(&mut init.base_rng, vec![v, d], 1.0 / (d as f32).sqrt());
            init.params.push("lm_head", ParamRole::LmHead, t)
        };
        let fw = normal_tensor(&mut featurizer_rng, vec![d, PATCH_DIM], 1.0 / (PATCH_DIM as f32).sqrt());
        let featurizer = Featurizer::new(params.push("featurizer", ParamRole::Featurizer, fw));

        Ok(Self {
            config,
            params,
            embed,
            lm_head,
            final_norm,
            layers,
            text_proj,
            featurizer,
            faults: FaultInjection::default(),
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        adapters: bool,
    ) -> Result<Self> {
        // Rebuild the structure with a throwaway seed, then swap in the stored
        // tensors by name.
        let mut model = Self::build(config, 0, adapters)?;
        if model.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, entry) in params.entries() {
            let slot = model.params.entry(id);
            if slot.name != entry.name || slot.tensor.shape() != entry.tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor {} ({:?}) does not match expected {} ({:?})",
                    entry.name,
                    entry.tensor.shape(),
                    slot.name,
                    slot.tensor.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// A copy of this model's base weights with no adapters attached.
    pub fn pristine_copy(&self) -> Result<Self> {
        let mut store = ParamStore::default();
        for (_, e) in self.params.entries().filter(|(_, e)| e.role != ParamRole::Adapter) {
            let mut t = e.tensor.clone();
            t.grad = None;
            store.push(e.name.clone(), e.role, t);
        }
        Self::from_parts(self.config.clone(), store, false)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embed
    }

    pub fn lm_head_id(&self) -> ParamId {
        self.lm_head
    }

    pub fn lm_head(&self) -> &Tensor {
        self.params.get(self.lm_head)
    }

    pub fn lm_head_is_tied(&self) -> bool {
        self.lm_head == self.embed
    }

    pub fn has_adapters(&self) -> bool {
        self.text_proj.adapter.is_some()
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }

    /// Every projection target, layer by layer, then `custom_text_proj`.
    pub fn projections(&self) -> Vec<&LoraLinear> {
        self.layers
            .iter()
            .flat_map(|l| l.projections())
            .chain(std::iter::once(&self.text_proj))
            .collect()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.projections().into_iter().filter_map(|p| p.adapter.as_ref())
    }

    pub fn adapter_param_ids(&self) -> Vec<ParamId> {
        self.adapters().flat_map(|a| [a.a, a.b]).collect()
    }

    pub fn set_adapters_enabled(&mut self, enabled: bool) {
        for layer in &mut self.layers {
            for p in layer.projections_mut() {
                if let Some(a) = &mut p.adapter {
                    a.enabled = enabled;
                }
            }
        }
        if let Some(a) = &mut self.text_proj.adapter {
            a.enabled = enabled;
        }
    }

    /// Points every full-attention layer at one of its retained mask paths.
    /// Sliding-window layers have no selector and are left alone.
    pub fn select_full_attention(&mut self, path: AttentionPath) {
        for state in self.layers.iter_mut().filter_map(|l| l.mode_state.as_mut()) {
            state.select(path);
        }
    }

    pub fn adapters_enabled(&self) -> Vec<bool> {
        self.adapters().map(|a| a.enabled).collect()
    }

    pub fn full_attention_paths(&self) -> Vec<AttentionPath> {
        self.layers
            .iter()
            .filter_map(|l| l.mode_state.as_ref().map(|s| s.active()))
            .collect()
    }

    /// Marks exactly the adapter tensors as trainable and everything else frozen.
    pub fn freeze_base(&mut self) {
        let adapters = self.adapter_param_ids();
        let ids: Vec<ParamId> = self.params.entries().map(|(id, _)| id).collect();
        for id in ids {
            self.params.get_mut(id).requires_grad = adapters.contains(&id);
        }
    }

    /// Mask applied by layer `layer` to a sequence with this validity.
    pub fn layer_mask(&self, layer: usize, validity: &[bool]) -> AttentionMask {
        let l = &self.layers[layer];
        match (l.kind, &l.mode_state) {
            (LayerKind::Sliding(w), _) => build_sliding_causal_mask(validity, w),
            (LayerKind::Full, Some(state)) => state.build(validity),
            (LayerKind::Full, None) => unreachable!("full-attention layer without mode state"),
        }
    }

    fn param_var<'p>(&'p self, g: &mut Graph<'p>, id: ParamId) -> Var {
        g.param(id.index(), self.params.get(id))
    }

    pub(crate) fn linear<'p>(
        &'p self,
        g: &mut Graph<'p>,
        x: Var,
        lin: &'p LoraLinear,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let w = self.param_var(g, lin.weight);
        let base = g.matmul_bt(x, w)?;
        let Some(ad) = lin.adapter.as_ref().filter(|a| a.enabled) else {
            return Ok(base);
        };
        let input = match dropout {
            Some(d) if ad.dropout_p > 0.0 => {
                let keep = d.keep_mask(g.value(x).numel(), ad.dropout_p);
                g.dropout(x, keep)?
            }
            _ => x,
        };
        let a = self.param_var(g, ad.a);
        let b = self.param_var(g, ad.b);
        let xa = g.matmul_bt(input, a)?;
        let xab = g.matmul_bt(xa, b)?;
        let scaled = g.scale(xab, ad.scale)?;
        g.add(base, scaled)
    }

    /// Hidden states `[new positions × hidden]` after the final norm.
    ///
    /// With a cache, `input` holds only the positions after those already
    /// cached; their keys and values are appended to the cache. Adapter and
    /// attention-path state is read from the model.
    pub fn forward_hidden<'p>(
        &'p self,
        g: &mut Graph<'p>,
        input: &ModelInput,
        cache: Option<&mut KvCache>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        if input.is_empty() {
            return Err(Error::Empty("forward over an empty input"));
        }
        let mut leaked;
        let cache = match cache {
            Some(c) => Some(c),
            None => {
                leaked = self.faults.leaked.clone();
                leaked.as_mut()
            }
        };
        let cfg = &self.config;
        let d = cfg.hidden_dim;
        if let Some(c) = &cache {
            if c.num_layers() != self.layers.len() || c.width() != d {
                return Err(Error::Cache(format!(
                    "cache shaped for {} layers x {} does not fit {} x {d}",
                    c.num_layers(),
                    c.width(),
                    self.layers.len()
                )));
            }
        }
        let past = cache.as_ref().map_or(0, |c| c.len());
        let total = past + input.len();
        if total > cfg.max_seq_len {
            return Err(Error::Length { len: total, max: cfg.max_seq_len });
        }
        let new_validity = input.validity();
        let mut validity = cache.as_ref().map_or_else(Vec::new, |c| c.validity().to_vec());
        validity.extend_from_slice(&new_validity);
        let positions: Vec<usize> = (past..total).collect();

        let mut parts = Vec::with_capacity(2);
        if !input.patches.is_empty() {
            let feats = self.featurizer.encode(&self.params, &input.patches)?;
            parts.push(g.constant(feats));
        }
        if !input.tokens.is_empty() {
            let ids: Vec<usize> = input.tokens.iter().map(|t| *t as usize).collect();
            if let Some(bad) = ids.iter().find(|t| **t >= cfg.vocab_size) {
                return Err(Error::Dimension(format!("token {bad} outside vocabulary")));
            }
            let table = self.param_var(g, self.embed);
            parts.push(g.gather_rows(table, &ids)?);
        }
        let mut h = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts)? };

        let mut cache = cache;
        for (li, layer) in self.layers.iter().enumerate() {
            let mask = self.layer_mask(li, &validity).query_rows(past, total);
            let norm_w = self.param_var(g, layer.attn_norm);
            let x = g.rmsnorm(h, norm_w, cfg.norm_eps)?;
            let q = self.linear(g, x, &layer.q, &mut dropout)?;
            let k = self.linear(g, x, &layer.k, &mut dropout)?;
            let v = self.linear(g, x, &layer.v, &mut dropout)?;
            let q = g.rope(q, &positions, cfg.num_heads, cfg.rope_theta)?;
            let k = g.rope(k, &positions, cfg.num_heads, cfg.rope_theta)?;
            let (k_all, v_all) = match cache.as_deref_mut() {
                Some(c) => {
                    let (k_all, v_all) = if past > 0 {
                        let kp = g.constant(Tensor::matrix(past, d, c.keys(li).to_vec())?);
                        let vp = g.constant(Tensor::matrix(past, d, c.values(li).to_vec())?);
                        (g.concat_rows(&[kp, k])?, g.concat_rows(&[vp, v])?)
                    } else {
                        (k, v)
                    };
                    c.append_layer(li, g.value(k).data(), g.value(v).data())?;
                    (k_all, v_all)
                }
                None => (k, v),
            };
            let attn = g.attention(q, k_all, v_all, mask, cfg.num_heads)?;
            let o = self.linear(g, attn, &layer.o, &mut dropout)?;
            h = g.add(h, o)?;

            let norm_w = self.param_var(g, layer.ffn_norm);
            let x = g.rmsnorm(h, norm_w, cfg.norm_eps)?;
            let gate = self.linear(g, x, &layer.gate, &mut dropout)?;
            let up = self.linear(g, x, &layer.up, &mut dropout)?;
            let act = g.silu(gate)?;
            let act = g.mul(act, up)?;
            let down = self.linear(g, act, &layer.down, &mut dropout)?;
            h = g.add(h, down)?;
        }
        if let Some(c) = cache {
            c.commit(&new_validity)?;
        }
        let norm_w = self.param_var(g, self.final_norm);
        g.rmsnorm(h, norm_w, cfg.norm_eps)
    }

    /// Vocabulary logits for the given hidden rows.
    pub fn logits<'p>(&'p self, g: &mut Graph<'p>, hidden: Var) -> Result<Var> {
        let head = self.param_var(g, self.lm_head);
        g.matmul_bt(hidden, head)
    }

    /// `custom_text_proj` followed by row normalization, keeping only `rows`.
    pub fn project<'p>(
        &'p self,
        g: &mut Graph<'p>,
        hidden: Var,
        rows: &[usize],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let kept = g.gather_rows(hidden, rows)?;
        let proj = self.linear(g, kept, &self.text_proj, &mut dropout)?;
        g.l2_normalize_rows(proj)
    }

    /// Scalars in adapter tensors, by construction formula.
    pub fn count_trainable_params(config: &ModelConfig) -> usize {
        count_trainable_params(config)
    }
}

/// `Σ r·(in + out)` over the seven adapted projections of every layer plus
/// `custom_text_proj`.
pub fn count_trainable_params(config: &ModelConfig) -> usize {
    let (d, f, p, r) = (config.hidden_dim, config.ffn_dim, config.proj_dim, config.lora_rank);
    let per_layer = 4 * r * (d + d) + 2 * r * (d + f) + r * (f + d);
    config.num_layers * per_layer + r * (d + p)
}
