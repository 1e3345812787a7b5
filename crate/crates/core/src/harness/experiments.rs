//! Experiment protocols over a live model.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use super::report::{Environment, ExperimentReport};
use super::stats::tost_equivalence;
use crate::error::{Error, Result};
use crate::generation::{anls, decode_current_state, generate, generate_nocache, DecodeParams};
use crate::model::{count_trainable_params, Backbone, ModelConfig, ModelInput, ParamRole};
use crate::modeswitch::{
    adapter_checksum, base_checksum, mode_roundtrip_check, set_mode, time_round_trips, AttentionPath, Mode,
    RoundTripInput,
};
use crate::retrieval::{embed, ndcg_at_k, Index};
use crate::tokens::{detokenize, FIRST_FREE};
use crate::training::{Corpus, EvalSet, Pair};

pub const ANLS_THRESHOLD: f64 = 0.5;
pub const TOST_EPSILON: f64 = 0.01;
pub const TOST_ALPHA: f64 = 0.05;
pub const DEFAULT_CONTAMINATION_INPUTS: usize = 50;
pub const SAMPLE_TEMPERATURE: f32 = 0.7;
pub const SAMPLE_TOP_P: f32 = 0.8;

/// Generation probes: pages from a seeded corpus.
pub fn probe_pairs(seed: u64, n: usize) -> Vec<Pair> {
    Corpus::synthetic(seed ^ 0x9e37_79b9_7f4a_7c15, n).pairs
}

/// Random token prompts of length `1..=max_len` for cache checks.
pub fn random_prompts(seed: u64, n: usize, max_len: usize, vocab: usize) -> Vec<ModelInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            ModelInput::tokens((0..len).map(|_| rng.random_range(FIRST_FREE..vocab as u32)).collect())
        })
        .collect()
}

fn caption_anls(tokens: &[u32], pair: &Pair) -> f64 {
    anls(&detokenize(tokens), &[detokenize(&pair.caption).as_str()], ANLS_THRESHOLD)
}

#[derive(Serialize)]
struct EquivalenceRecord {
    prompt: usize,
    strategy: &'static str,
    switches: usize,
    identical: bool,
    anls_toggled: f64,
    anls_pristine: f64,
}

/// Applies a random mix of mode switches, embeddings and generations.
fn scramble_history(model: &mut Backbone, rng: &mut ChaCha8Rng, pairs: &[Pair]) -> Result<usize> {
    let ops = rng.random_range(0..5);
    for _ in 0..ops {
        let other = &pairs[rng.random_range(0..pairs.len())];
        match rng.random_range(0..4) {
            0 => set_mode(model, Mode::Retrieval),
            1 => set_mode(model, Mode::Generation),
            2 => {
                embed(model, &other.document_input(), false)?;
            }
            _ => {
                generate(model, &other.prompt(), &DecodeParams::greedy(2))?;
            }
        }
    }
    Ok(ops)
}

/// Generation after arbitrary switch histories against a pristine
/// adapter-free copy, over `n` greedy and `n` sampled prompts.
pub fn equivalence_suite(model: &mut Backbone, n: usize, max_new_tokens: usize, seed: u64) -> Result<ExperimentReport> {
    if n == 0 {
        return Err(Error::Empty("equivalence suite needs prompts"));
    }
    let mut report = ExperimentReport::new("equivalence", Environment::new(seed, model.config()));
    let mut pristine = model.pristine_copy()?;
    let pairs = probe_pairs(seed, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let mut deltas = Vec::with_capacity(2 * n);
    for (strategy, label) in [(0, "greedy"), (1, "sample")] {
        let mut matches = 0;
        for (i, pair) in pairs.iter().enumerate() {
            let params = if strategy == 0 {
                DecodeParams::greedy(max_new_tokens)
            } else {
                DecodeParams::sample(max_new_tokens, SAMPLE_TEMPERATURE, SAMPLE_TOP_P, seed.wrapping_add(i as u64))
            };
            let switches = scramble_history(model, &mut rng, &pairs)?;
            let toggled = generate(model, &pair.prompt(), &params)?;
            let reference = generate(&mut pristine, &pair.prompt(), &params)?;
            let rec = EquivalenceRecord {
                prompt: i,
                strategy: label,
                switches,
                identical: toggled == reference,
                anls_toggled: caption_anls(&toggled, pair),
                anls_pristine: caption_anls(&reference, pair),
            };
            matches += usize::from(rec.identical);
            deltas.push(rec.anls_toggled - rec.anls_pristine);
            report.record(rec);
        }
        let frac = matches as f64 / n as f64;
        report.set(&format!("{label}_exact_match"), frac);
        report.check(&format!("{label} byte-identical"), frac == 1.0, format!("{matches}/{n} identical"));
    }
    report.time("total_secs", start.elapsed().as_secs_f64());
    let max_delta = deltas.iter().map(|d| d.abs()).fold(0.0, f64::max);
    report.set("max_abs_delta_anls", max_delta);
    let tost = tost_equivalence(&deltas, TOST_EPSILON, TOST_ALPHA)?;
    report.set("tost", tost);
    report.check(
        "ANLS equivalence (TOST)",
        tost.equivalent,
        format!("p = {:.3e}, 90% CI [{}, {}]", tost.p_value, tost.ci.0, tost.ci.1),
    );
    Ok(report)
}

/// Alternating embed/generate cycles on `n` inputs.
pub fn contamination(model: &mut Backbone, n: usize, max_new_tokens: usize, seed: u64) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("contamination", Environment::new(seed, model.config()));
    let inputs: Vec<RoundTripInput> = probe_pairs(seed, n)
        .iter()
        .map(|p| RoundTripInput {
            document: p.document_input(),
            prompt: p.prompt(),
        })
        .collect();
    let start = Instant::now();
    let rt = mode_roundtrip_check(model, &inputs, &DecodeParams::greedy(max_new_tokens))?;
    report.time("total_secs", start.elapsed().as_secs_f64());
    for r in &rt.records {
        report.record(r);
    }
    report.set("max_embedding_diff", rt.max_embedding_diff);
    report.set("identical_generation_fraction", rt.identical_generation_fraction);
    report.check("embeddings bitwise stable", rt.max_embedding_diff == 0.0, format!("max diff {}", rt.max_embedding_diff));
    report.check(
        "generations byte-identical",
        rt.identical_generation_fraction == 1.0,
        format!("{:.1}% identical", 100.0 * rt.identical_generation_fraction),
    );
    Ok(report)
}

fn divergence(model: &mut Backbone, pristine: &mut Backbone, pairs: &[Pair], params: &DecodeParams) -> Result<f64> {
    let mut diverged = 0;
    for p in pairs {
        set_mode(model, Mode::Retrieval);
        let out = generate(model, &p.prompt(), params)?;
        diverged += usize::from(out != generate(pristine, &p.prompt(), params)?);
    }
    Ok(diverged as f64 / pairs.len() as f64)
}

/// Greedy divergence from the pristine model after a retrieval call, with
/// the attention restore skipped and with it intact.
pub fn attention_restore_regression(model: &Backbone, n: usize, max_new_tokens: usize, seed: u64) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("attention_restore", Environment::new(seed, model.config()));
    let mut pristine = model.pristine_copy()?;
    let pairs = probe_pairs(seed, n);
    let params = DecodeParams::greedy(max_new_tokens);
    let mut faulty = model.clone();
    faulty.faults.skip_attention_restore = true;
    let faulty_rate = divergence(&mut faulty, &mut pristine, &pairs, &params)?;
    let mut correct = model.clone();
    let correct_rate = divergence(&mut correct, &mut pristine, &pairs, &params)?;
    report.set("divergence_restore_skipped", faulty_rate);
    report.set("divergence_restored", correct_rate);
    report.check("skipped restore diverges on >50%", faulty_rate > 0.5, format!("{:.1}%", 100.0 * faulty_rate));
    report.check("restored path never diverges", correct_rate == 0.0, format!("{:.1}%", 100.0 * correct_rate));
    Ok(report)
}

/// Per-query nDCG@k of a held-out set, with the model in retrieval mode.
pub fn retrieval_scores(model: &mut Backbone, eval: &EvalSet, k: usize) -> Result<Vec<f64>> {
    let mut index = Index::new(model.config().proj_dim);
    for (i, p) in eval.pairs.iter().enumerate() {
        let id = EvalSet::doc_id(i);
        index.add(id.clone(), embed(model, &p.document_input(), false)?.with_source(id))?;
    }
    eval.pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let q = embed(model, &p.query_input(), true)?;
            let ranked = index.search(&q, k)?;
            Ok(ndcg_at_k(&ranked, &[EvalSet::doc_id(i).as_str()], k))
        })
        .collect()
}

pub fn eval_retrieval(model: &mut Backbone, eval: &EvalSet, seed: u64) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("eval_retrieval", Environment::new(seed, model.config()));
    let start = Instant::now();
    let scores = retrieval_scores(model, eval, 5)?;
    report.time("total_secs", start.elapsed().as_secs_f64());
    for (i, s) in scores.iter().enumerate() {
        report.record(json!({"query": i, "ndcg_at_5": s}));
    }
    report.set("ndcg_at_5", scores.iter().sum::<f64>() / scores.len() as f64);
    report.set("queries", scores.len());
    Ok(report)
}

fn mean_secs(f: impl FnMut() -> Result<()>, reps: usize) -> Result<f64> {
    let mut f = f;
    let start = Instant::now();
    for _ in 0..reps {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() / reps as f64)
}

/// Parameter-byte footprint, switch latency and decode speedup.
pub fn efficiency_suite(config: &ModelConfig, seed: u64) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("efficiency", Environment::new(seed, config));
    let mut model = Backbone::new(config.clone(), seed)?;
    let bytes = |keep: &dyn Fn(ParamRole) -> bool| -> usize {
        model
            .params()
            .entries()
            .filter(|(_, e)| keep(e.role))
            .map(|(_, e)| e.tensor.numel() * 4)
            .sum()
    };
    let base_bytes = bytes(&|r| r != ParamRole::Adapter);
    let adapter_bytes = bytes(&|r| r == ParamRole::Adapter);
    let single = base_bytes + adapter_bytes;
    let two = 2 * base_bytes;
    report.set("memory_proxy", "parameter bytes (activations and runtime overhead not modeled)");
    report.set("single_model_bytes", single);
    report.set("two_model_bytes", two);
    report.set("single_to_two_ratio", single as f64 / two as f64);
    report.set("adapter_bytes", adapter_bytes);
    let formula_bytes = 4 * count_trainable_params(config);
    report.check("single model smaller", single < two, format!("{single} < {two} bytes"));
    report.check(
        "adapter overhead matches formula",
        adapter_bytes == formula_bytes,
        format!("{adapter_bytes} vs {formula_bytes} bytes"),
    );

    let switches = time_round_trips(&mut model, 50);
    let switch_mean = switches.iter().map(|d| d.as_secs_f64()).sum::<f64>() / switches.len() as f64;
    report.time("switch_round_trip_mean_secs", switch_mean);

    let prompt_len = 64.min(config.max_seq_len / 2);
    let new_tokens = 64.min(config.max_seq_len - prompt_len);
    let prompt = random_prompts(seed, 1, prompt_len, config.vocab_size)
        .pop()
        .expect("one prompt");
    let prompt = ModelInput::tokens({
        let mut t = prompt.tokens;
        t.resize(prompt_len, FIRST_FREE);
        t
    });
    // No stop token, so both paths decode the full budget.
    let params = DecodeParams {
        stop_token: u32::MAX,
        ..DecodeParams::greedy(new_tokens)
    };
    let cached = mean_secs(|| generate(&mut model, &prompt, &params).map(drop), 3)?;
    let uncached = mean_secs(|| generate_nocache(&mut model, &prompt, &params).map(drop), 1)?;
    report.time("generate_cached_secs", cached);
    report.time("generate_uncached_secs", uncached);
    report.time("switch_over_generation", switch_mean / cached);
    report.time("decode_speedup", uncached / cached);
    report.set("decode_prompt_tokens", prompt_len);
    report.set("decode_new_tokens", new_tokens);
    report.check(
        "switch latency under 10% of a generation call",
        switch_mean / cached < 0.10,
        format!("{:.3}%", 100.0 * switch_mean / cached),
    );
    report.check("cached decode at least 2x faster", uncached / cached >= 2.0, format!("{:.1}x", uncached / cached));
    Ok(report)
}

/// Two checkpoints trained from the same base, compared in the three
/// adapter/attention combinations.
pub fn ablate(
    retrieval_only: &Backbone,
    joint: &Backbone,
    eval: &EvalSet,
    n_gen: usize,
    max_new_tokens: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if base_checksum(retrieval_only) != base_checksum(joint) {
        return Err(Error::Integrity("checkpoints do not share base weights".into()));
    }
    let mut report = ExperimentReport::new("ablate", Environment::new(seed, retrieval_only.config()));
    let mut base = retrieval_only.pristine_copy()?;
    let pairs = probe_pairs(seed, n_gen);
    let params = DecodeParams::greedy(max_new_tokens);
    let baseline: Vec<Vec<u32>> = pairs
        .iter()
        .map(|p| generate(&mut base, &p.prompt(), &params))
        .collect::<Result<_>>()?;

    let mut ndcgs = BTreeMap::new();
    for (label, source) in [("retrieval_only", retrieval_only), ("joint", joint)] {
        let mut m = source.clone();
        let scores = retrieval_scores(&mut m, eval, 5)?;
        let ndcg = scores.iter().sum::<f64>() / scores.len() as f64;
        ndcgs.insert(label, ndcg);
        report.set(&format!("{label}.lora_on_bidirectional.ndcg_at_5"), ndcg);

        let mut off_identical = 0;
        for (p, b) in pairs.iter().zip(&baseline) {
            off_identical += usize::from(generate(&mut m, &p.prompt(), &params)? == *b);
        }
        let off_frac = off_identical as f64 / pairs.len() as f64;
        report.set(&format!("{label}.lora_off_causal.identical_to_base"), off_frac);
        report.check(
            &format!("{label}: LoRA-off generation identical to base"),
            off_frac == 1.0,
            format!("{off_identical}/{}", pairs.len()),
        );

        m.set_adapters_enabled(true);
        m.select_full_attention(AttentionPath::Causal);
        let mut disagree = 0;
        let mut anls_sum = 0.0;
        let mut first_tokens: BTreeMap<u32, usize> = BTreeMap::new();
        for (p, b) in pairs.iter().zip(&baseline) {
            let out = decode_current_state(&m, &p.prompt(), &params)?;
            disagree += usize::from(out != *b);
            anls_sum += caption_anls(&out, p);
            if let Some(t) = out.first() {
                *first_tokens.entry(*t).or_default() += 1;
            }
        }
        set_mode(&mut m, Mode::Generation);
        let (top_token, top_count) = first_tokens
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(t, c)| (*t, *c))
            .unwrap_or((0, 0));
        report.set(&format!("{label}.lora_on_causal.disagreement_with_base"), disagree as f64 / pairs.len() as f64);
        report.set(&format!("{label}.lora_on_causal.caption_anls"), anls_sum / pairs.len() as f64);
        report.set(&format!("{label}.lora_on_causal.top_first_token"), top_token);
        report.set(
            &format!("{label}.lora_on_causal.top_first_token_share"),
            top_count as f64 / pairs.len() as f64,
        );
    }
    let diff = (ndcgs["retrieval_only"] - ndcgs["joint"]).abs();
    report.set("ndcg_abs_difference", diff);
    report.check("retrieval nDCG@5 within 0.05", diff < 0.05, format!("|Δ| = {diff:.4}"));

    let adapter_max_diff = retrieval_only
        .params()
        .entries()
        .filter(|(_, e)| e.role == ParamRole::Adapter)
        .map(|(id, e)| e.tensor.max_abs_diff(joint.params().get(id)))
        .fold(0.0f32, f32::max);
    report.set("adapter_max_abs_diff", adapter_max_diff);
    report.set("retrieval_only.adapter_digest", adapter_checksum(retrieval_only).to_hex());
    report.set("joint.adapter_digest", adapter_checksum(joint).to_hex());
    Ok(report)
}
