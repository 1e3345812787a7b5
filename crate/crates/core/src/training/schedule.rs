use super::TrainConfig;

/// Steps of linear warmup for a run of `total` steps.
pub fn warmup_steps(total: usize, warmup_frac: f64) -> usize {
    (warmup_frac * total as f64).ceil() as usize
}

/// Linear warmup from 0 to `cfg.lr`, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let warmup = warmup_steps(total, cfg.warmup_frac);
    if step < warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return cfg.lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}
