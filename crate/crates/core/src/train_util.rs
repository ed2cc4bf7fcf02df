//! Small helpers shared by the LM and SLU trainers.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::nn::Params;

/// Global L2 norm of all gradients.
pub fn grad_norm(params: &dyn Params) -> f64 {
    let mut sq = 0.0;
    params.visit("", &mut |_, p| sq += p.grad.iter().map(|g| g * g).sum::<f64>());
    sq.sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut dyn Params, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        params.visit_mut("", &mut |_, p| p.grad *= scale);
    }
    norm
}

/// Hash of the exact bit patterns of every parameter whose name starts
/// with one of `groups` (all parameters when `groups` is empty).
pub fn fingerprint(params: &dyn Params, groups: &[&str]) -> u64 {
    let mut h = DefaultHasher::new();
    params.visit("", &mut |name, p| {
        let group = name.split('.').next().unwrap_or(name);
        if groups.is_empty() || groups.contains(&group) {
            h.write(name.as_bytes());
            for v in p.value.iter() {
                h.write_u64(v.to_bits());
            }
        }
    });
    h.finish()
}
