//! Adam and the exponential learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::project::group_rows;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

pub const GROUP_NAMES: [&str; 5] = ["position", "scale", "rotation", "opacity", "sh"];

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in {group} at index {index}")]
    NonFinite { group: String, index: usize },
    #[error("{group}: {params} parameters but {grads} gradients")]
    Length { group: String, params: usize, grads: usize },
}

/// First and second moment buffers of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// Drops columns of a `[rows, N]` buffer where `keep` is false.
    pub fn retain_columns(&mut self, rows: usize, keep: &[bool]) {
        let n = keep.len();
        let filter = |buf: &Vec<f64>| -> Vec<f64> {
            (0..rows)
                .flat_map(|r| (0..n).filter(|&i| keep[i]).map(move |i| buf[r * n + i]))
                .collect()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    group: &str,
    params: &mut [f32],
    grads: &[f32],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), OptimError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(OptimError::Length {
            group: group.to_string(),
            params: params.len(),
            grads: grads.len(),
        });
    }
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFinite {
            group: group.to_string(),
            index,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] as f64;
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] = (params[i] as f64 - lr * m_hat / (v_hat.sqrt() + EPSILON)) as f32;
    }
    Ok(())
}

/// Exponential decay from `lr_start` to `lr_end` over `total` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total: usize,
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr_start: lr,
            lr_end: lr,
            total: 1,
        }
    }
}

/// `lr₀·(lr₁/lr₀)^{t/T}`; `t` is clamped to `[0, T]`.
pub fn lr_at(s: &Schedule, t: usize) -> f64 {
    if s.total == 0 || t == 0 {
        return s.lr_start;
    }
    if t >= s.total {
        return s.lr_end;
    }
    s.lr_start * (s.lr_end / s.lr_start).powf(t as f64 / s.total as f64)
}

/// Adam over the five packed scene parameter groups, each `[rows, N]`.
#[derive(Debug, Clone)]
pub struct SceneOptimizer {
    pub states: [AdamState; 5],
    /// Multiplier applied to the scheduled rate per group.
    pub lr_scale: [f64; 5],
    pub active: [bool; 5],
    degree: usize,
    count: usize,
}

impl SceneOptimizer {
    pub fn new(count: usize, degree: usize, lr_scale: [f64; 5], active: [bool; 5]) -> Self {
        let rows = group_rows(degree);
        Self {
            states: std::array::from_fn(|g| AdamState::new(rows[g] * count)),
            lr_scale,
            active,
            degree,
            count,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Steps every active group of the packed parameter vector.
    pub fn step(&mut self, packed: &mut [f32], grads: &[f32], lr: f64) -> Result<(), OptimError> {
        let rows = group_rows(self.degree);
        let mut start = 0;
        for g in 0..5 {
            let len = rows[g] * self.count;
            if self.active[g] {
                adam_step(
                    GROUP_NAMES[g],
                    &mut packed[start..start + len],
                    &grads[start..start + len],
                    &mut self.states[g],
                    lr * self.lr_scale[g],
                )?;
            }
            start += len;
        }
        Ok(())
    }

    /// Keeps moment buffers aligned after Gaussians are removed.
    pub fn retain(&mut self, keep: &[bool]) {
        let rows = group_rows(self.degree);
        for g in 0..5 {
            self.states[g].retain_columns(rows[g], keep);
        }
        self.count = keep.iter().filter(|&&k| k).count();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut x = [1.0f32];
        let mut s = AdamState::new(1);
        adam_step("x", &mut x, &[2.0], &mut s, 0.1).unwrap();
        // m̂ = 2, v̂ = 4, so the step is lr·2/(2 + ε).
        let want = 1.0 - 0.1 * 2.0 / (2.0 + EPSILON);
        assert!((x[0] as f64 - want).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_keeps_params_and_decays_moments() {
        let mut fresh = [0.5f32, -0.25];
        adam_step("x", &mut fresh, &[0.0, 0.0], &mut AdamState::new(2), 0.01).unwrap();
        assert_eq!(fresh, [0.5, -0.25]);

        let mut x = [0.5f32, -0.25];
        let mut s = AdamState::new(2);
        adam_step("x", &mut x, &[1.0, -1.0], &mut s, 0.01).unwrap();
        let (m, v) = (s.m.clone(), s.v.clone());
        adam_step("x", &mut x, &[0.0, 0.0], &mut s, 0.01).unwrap();
        for i in 0..2 {
            assert!((s.m[i] - BETA1 * m[i]).abs() < 1e-15);
            assert!((s.v[i] - BETA2 * v[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_names_group() {
        let mut x = [0.0f32; 3];
        let mut s = AdamState::new(3);
        let err = adam_step("opacity", &mut x, &[0.0, f32::NAN, 0.0], &mut s, 0.1).unwrap_err();
        assert_eq!(
            err,
            OptimError::NonFinite {
                group: "opacity".into(),
                index: 1
            }
        );
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = Schedule {
            lr_start: 0.1,
            lr_end: 0.01,
            total: 800,
        };
        assert_eq!(lr_at(&s, 0), 0.1);
        assert_eq!(lr_at(&s, 800), 0.01);
        assert!((lr_at(&s, 400) - (0.1f64 * 0.01).sqrt()).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for t in 0..=800 {
            let lr = lr_at(&s, t);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn retain_drops_columns() {
        let mut s = AdamState::new(6);
        s.m = vec![0.0, 1.0, 2.0, 10.0, 11.0, 12.0];
        s.v = s.m.clone();
        s.retain_columns(2, &[true, false, true]);
        assert_eq!(s.m, vec![0.0, 2.0, 10.0, 12.0]);
    }
}
