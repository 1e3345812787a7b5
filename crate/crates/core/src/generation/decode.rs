use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::KvCache;
use crate::error::{Error, Result};
use crate::model::{Backbone, ModelInput};
use crate::modeswitch::{set_mode, Mode};
use crate::tensorcore::Graph;
use crate::tokens::EOS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Sample { temperature: f32, top_p: f32, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    pub stop_token: u32,
}

impl DecodeParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            max_new_tokens,
            strategy: Strategy::Greedy,
            stop_token: EOS,
        }
    }

    pub fn sample(max_new_tokens: usize, temperature: f32, top_p: f32, seed: u64) -> Self {
        Self {
            max_new_tokens,
            strategy: Strategy::Sample { temperature, top_p, seed },
            stop_token: EOS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Strategy::Sample { temperature, top_p, .. } = self.strategy {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
            }
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(Error::Config(format!("top_p must lie in (0, 1], got {top_p}")));
            }
        }
        Ok(())
    }
}

fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, l) in logits.iter().enumerate() {
        if *l > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Nucleus sampling from `logits / temperature` with uniform draw `u ∈ [0, 1)`.
///
/// Tokens are sorted by descending probability (ties by ascending id), the
/// shortest prefix reaching `top_p` is kept and renormalized.
pub fn sample_top_p(logits: &[f32], temperature: f32, top_p: f32, u: f64) -> u32 {
    let scaled: Vec<f64> = logits.iter().map(|l| f64::from(*l) / f64::from(temperature)).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|a, b| weights[*b].total_cmp(&weights[*a]).then(a.cmp(b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += weights[i] / total;
        kept += 1;
        if mass >= f64::from(top_p) {
            break;
        }
    }
    let nucleus = &order[..kept];
    let nucleus_total: f64 = nucleus.iter().map(|i| weights[*i]).sum();
    let target = u * nucleus_total;
    let mut acc = 0.0;
    for &i in nucleus {
        acc += weights[i];
        if target < acc {
            return i as u32;
        }
    }
    *nucleus.last().expect("non-empty nucleus") as u32
}

struct Picker {
    strategy: Strategy,
    step: u64,
}

impl Picker {
    fn pick(&mut self, logits: &[f32]) -> u32 {
        let token = match self.strategy {
            Strategy::Greedy => argmax(logits),
            Strategy::Sample { temperature, top_p, seed } => {
                // A fresh stream per step makes each draw depend only on
                // (seed, step), never on how many draws came before.
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(self.step);
                sample_top_p(logits, temperature, top_p, rng.random::<f64>())
            }
        };
        self.step += 1;
        token
    }
}

fn check_prompt(model: &Backbone, prompt: &ModelInput, params: &DecodeParams) -> Result<()> {
    params.validate()?;
    if prompt.is_empty() {
        return Err(Error::Empty("generation prompt"));
    }
    let max = model.config().max_seq_len;
    if prompt.len() > max {
        return Err(Error::Length { len: prompt.len(), max });
    }
    Ok(())
}

fn last_row_logits(model: &Backbone, input: &ModelInput, cache: Option<&mut KvCache>) -> Result<Vec<f32>> {
    let mut g = Graph::new();
    let h = model.forward_hidden(&mut g, input, cache, None)?;
    let last = g.value(h).rows() - 1;
    let row = g.gather_rows(h, &[last])?;
    let logits = model.logits(&mut g, row)?;
    Ok(g.value(logits).data().to_vec())
}

/// Decodes with whatever adapter and attention state the model is in.
/// Patches are encoded once, during prefill.
pub fn decode_current_state(model: &Backbone, prompt: &ModelInput, params: &DecodeParams) -> Result<Vec<u32>> {
    Ok(decode_with_cache(model, prompt, params)?.0)
}

fn decode_with_cache(
    model: &Backbone,
    prompt: &ModelInput,
    params: &DecodeParams,
) -> Result<(Vec<u32>, KvCache)> {
    check_prompt(model, prompt, params)?;
    let cfg = model.config();
    let mut cache = KvCache::new(cfg.num_layers, cfg.hidden_dim);
    let mut picker = Picker {
        strategy: params.strategy,
        step: 0,
    };
    let mut out = Vec::new();
    if params.max_new_tokens == 0 {
        return Ok((out, cache));
    }
    let mut logits = last_row_logits(model, prompt, Some(&mut cache))?;
    loop {
        let token = picker.pick(&logits);
        out.push(token);
        if token == params.stop_token
            || out.len() >= params.max_new_tokens
            || prompt.len() + out.len() >= cfg.max_seq_len
        {
            break;
        }
        logits = last_row_logits(model, &ModelInput::tokens(vec![token]), Some(&mut cache))?;
    }
    Ok((out, cache))
}

/// Reference decoder that recomputes the whole sequence at every step.
pub fn decode_current_state_nocache(
    model: &Backbone,
    prompt: &ModelInput,
    params: &DecodeParams,
) -> Result<Vec<u32>> {
    check_prompt(model, prompt, params)?;
    let max = model.config().max_seq_len;
    let mut picker = Picker {
        strategy: params.strategy,
        step: 0,
    };
    let mut seq = prompt.clone();
    let mut out = Vec::new();
    while out.len() < params.max_new_tokens {
        let token = picker.pick(&last_row_logits(model, &seq, None)?);
        out.push(token);
        seq.tokens.push(token);
        if token == params.stop_token || seq.len() >= max {
            break;
        }
    }
    Ok(out)
}

/// Switches to generation mode and decodes with a fresh cache that is
/// discarded on return.
pub fn generate(model: &mut Backbone, prompt: &ModelInput, params: &DecodeParams) -> Result<Vec<u32>> {
    set_mode(model, Mode::Generation);
    let (tokens, cache) = decode_with_cache(model, prompt, params)?;
    if model.faults.leak_kv_cache {
        model.faults.leaked = Some(cache);
    }
    Ok(tokens)
}

/// [`generate`] without a cache: every step is a full forward pass.
pub fn generate_nocache(model: &mut Backbone, prompt: &ModelInput, params: &DecodeParams) -> Result<Vec<u32>> {
    set_mode(model, Mode::Generation);
    decode_current_state_nocache(model, prompt, params)
}
