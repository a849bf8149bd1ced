//! Cosine learning rate decay with warm restarts (SGDR-style).

/// Cosine value within one cycle:
/// `lr = lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t_cur / t_i))`.
pub fn cosine_lr(t_cur: f64, t_i: f64, lr_min: f64, lr_max: f64) -> f64 {
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos())
}

/// Learning rate at a global step. Cycle `i` lasts `round(t0 * mult^i)`
/// steps; at each restart boundary the rate snaps back to `lr_max`.
pub fn lr_at_step(step: u64, lr_min: f64, lr_max: f64, t0: u64, mult: f64) -> f64 {
    debug_assert!(t0 >= 1 && mult >= 1.0 && lr_min <= lr_max);
    let mut cycle_len = t0.max(1);
    let mut cycle_start = 0u64;
    while step >= cycle_start + cycle_len {
        cycle_start += cycle_len;
        cycle_len = ((cycle_len as f64) * mult).round().max(1.0) as u64;
    }
    let t_cur = (step - cycle_start) as f64;
    cosine_lr(t_cur, cycle_len as f64, lr_min, lr_max)
}
