//! Learning-rate schedule and decoupled-weight-decay Adam.
//!
//! The schedule is linear warmup into a cosine decay with exact values at
//! the three boundary steps. The optimizer applies weight decay as a plain
//! multiplicative shrink before the moment update, so decay never passes
//! through the adaptive denominators.

use std::path::Path;

use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("optimizer slot {index}: expected {expected}, found {found}")]
    SlotMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Linear 0 -> peak over `warmup_steps`, then cosine peak -> final at
/// `total_steps`, constant afterwards. The boundary steps hit 0, peak, and
/// final exactly, with no accumulated float error.
pub fn lr_schedule(
    step: u64,
    warmup_steps: u64,
    total_steps: u64,
    peak_lr: f64,
    final_lr: f64,
) -> f64 {
    debug_assert!(warmup_steps <= total_steps && total_steps > 0);
    if step >= total_steps {
        return final_lr;
    }
    if step == warmup_steps {
        return peak_lr;
    }
    if step < warmup_steps {
        return peak_lr * (step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    final_lr + (peak_lr - final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Slots are allocated once from the canonical parameter walk; every later
/// step must present the same tensors in the same order.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    t: u64,
    slots: Vec<Slot>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, named: &[(String, &Tensor)]) -> AdamW {
        let slots = named
            .iter()
            .map(|(name, t)| Slot {
                name: name.clone(),
                m: vec![0.0; t.numel()],
                v: vec![0.0; t.numel()],
            })
            .collect();
        AdamW { cfg, t: 0, slots }
    }

    /// Number of updates applied so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. Decay first (p *= 1 - lr*wd), then
    /// the bias-corrected moment step. A missing grad buffer acts as a zero
    /// gradient: the parameter still decays and the moments still shrink.
    pub fn step(
        &mut self,
        named: &mut [(String, &mut Tensor)],
        lr: f64,
    ) -> Result<(), OptimError> {
        self.t += 1;
        let t = self.t;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(t as i32);
        let bias2 = 1.0 - c.beta2.powi(t as i32);
        let shrink = 1.0 - lr * c.weight_decay;
        for (index, ((name, tensor), slot)) in named.iter_mut().zip(&mut self.slots).enumerate() {
            if name != &slot.name || tensor.numel() != slot.m.len() {
                return Err(OptimError::SlotMismatch {
                    index,
                    expected: format!("{} ({} values)", slot.name, slot.m.len()),
                    found: format!("{} ({} values)", name, tensor.numel()),
                });
            }
            let grad = tensor.grad().map(<[f64]>::to_vec);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                data[i] *= shrink;
                slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
                slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
                let mhat = slot.m[i] / bias1;
                let vhat = slot.v[i] / bias2;
                data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Moments and the step counter, as a checkpoint file.
    pub fn save(&self, path: &Path) -> Result<(), OptimError> {
        let t_data = [self.t as f64];
        let mut entries: Vec<(String, Vec<usize>, &[f64])> =
            vec![("step_count".into(), vec![1], &t_data)];
        for slot in &self.slots {
            entries.push((format!("{}.m", slot.name), vec![slot.m.len()], &slot.m));
            entries.push((format!("{}.v", slot.name), vec![slot.v.len()], &slot.v));
        }
        checkpoint::save_entries(
            path,
            entries.iter().map(|(n, s, d)| (n.as_str(), &s[..], *d)),
        )?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), OptimError> {
        self.restore(&checkpoint::load_entries(path)?)
    }

    /// Moment buffers by slot name, for embedding optimizer state in a
    /// larger checkpoint. Order matches what [`AdamW::restore`] expects.
    pub fn slot_moments(&self) -> impl Iterator<Item = (&str, &[f64], &[f64])> {
        self.slots
            .iter()
            .map(|s| (s.name.as_str(), &s.m[..], &s.v[..]))
    }

    /// Counterpart of [`AdamW::save`]'s layout on in-memory entries: a
    /// step_count scalar, then `{name}.m` and `{name}.v` per slot.
    pub fn restore(&mut self, entries: &[checkpoint::Entry]) -> Result<(), OptimError> {
        let expected = 1 + 2 * self.slots.len();
        if entries.len() != expected {
            return Err(OptimError::SlotMismatch {
                index: 0,
                expected: format!("{expected} entries"),
                found: format!("{} entries", entries.len()),
            });
        }
        self.t = entries[0].data[0] as u64;
        for (i, slot) in self.slots.iter_mut().enumerate() {
            let m = &entries[1 + 2 * i];
            let v = &entries[2 + 2 * i];
            for (got, want_name, want_len) in [
                (m, format!("{}.m", slot.name), slot.m.len()),
                (v, format!("{}.v", slot.name), slot.v.len()),
            ] {
                if got.name != want_name || got.data.len() != want_len {
                    return Err(OptimError::SlotMismatch {
                        index: i,
                        expected: format!("{want_name} ({want_len} values)"),
                        found: format!("{} ({} values)", got.name, got.data.len()),
                    });
                }
            }
            slot.m.copy_from_slice(&m.data);
            slot.v.copy_from_slice(&v.data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named_mut(pairs: &mut [(String, Tensor)]) -> Vec<(String, &mut Tensor)> {
        pairs
            .iter_mut()
            .map(|(n, t)| (n.clone(), t))
            .collect()
    }

    #[test]
    fn schedule_boundaries_are_exact() {
        let lr = |s| lr_schedule(s, 800, 50_000, 2e-5, 2e-6);
        assert_eq!(lr(0), 0.0);
        assert_eq!(lr(800), 2e-5);
        assert_eq!(lr(50_000), 2e-6);
        assert_eq!(lr(60_000), 2e-6);
        // Halfway through decay sits at the arithmetic mean of peak and final.
        let mid = lr(800 + (50_000 - 800) / 2);
        assert!((mid - (2e-5 + 2e-6) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_in_each_phase() {
        let lr = |s| lr_schedule(s, 100, 2_000, 3e-4, 3e-6);
        for s in 0..100 {
            assert!(lr(s) < lr(s + 1), "warmup must rise at {s}");
        }
        for s in 100..2_000 {
            assert!(lr(s) >= lr(s + 1), "decay must fall at {s}");
        }
    }

    #[test]
    fn zero_gradient_still_decays_parameters() {
        let mut pairs = vec![("w".to_string(), {
            let mut t = Tensor::from_vec(&[2], vec![1.0, -4.0]).unwrap().with_grad();
            t.zero_grad();
            t
        })];
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let named: Vec<(String, &Tensor)> = pairs.iter().map(|(n, t)| (n.clone(), &*t)).collect();
        let mut opt = AdamW::new(cfg, &named);
        drop(named);
        let mut muts = named_mut(&mut pairs);
        opt.step(&mut muts, 0.01).unwrap();
        // Shrink factor is exactly 1 - 0.01*0.1 = 0.999.
        assert_eq!(pairs[0].1.data(), &[0.999, -3.996]);
    }

    #[test]
    fn matches_frozen_reference_trajectory() {
        // Reference values computed independently from the update formulas:
        // p0=1, g=0.5 every step, lr=0.1, defaults betas/eps, wd=0.
        let mut pairs = vec![("w".to_string(), {
            let mut t = Tensor::from_vec(&[1], vec![1.0]).unwrap().with_grad();
            t.accumulate_grad(&[0.5]).unwrap();
            t
        })];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let named: Vec<(String, &Tensor)> = pairs.iter().map(|(n, t)| (n.clone(), &*t)).collect();
        let mut opt = AdamW::new(cfg, &named);
        drop(named);
        let mut muts = named_mut(&mut pairs);
        opt.step(&mut muts, 0.1).unwrap();
        let after_one = pairs[0].1.data()[0];
        assert!((after_one - 0.900000002).abs() < 1e-12, "{after_one}");
        let mut muts = named_mut(&mut pairs);
        opt.step(&mut muts, 0.1).unwrap();
        let mut muts = named_mut(&mut pairs);
        opt.step(&mut muts, 0.1).unwrap();
        let after_three = pairs[0].1.data()[0];
        assert!((after_three - 0.7000000060000007).abs() < 1e-12, "{after_three}");
    }

    #[test]
    fn slot_mismatch_is_detected() {
        let t = Tensor::zeros(&[2]).with_grad();
        let named = vec![("w".to_string(), &t)];
        let mut opt = AdamW::new(AdamWConfig::default(), &named);
        let mut other = Tensor::zeros(&[2]).with_grad();
        let mut muts = vec![("different".to_string(), &mut other)];
        assert!(matches!(
            opt.step(&mut muts, 0.01),
            Err(OptimError::SlotMismatch { .. })
        ));
    }

    #[test]
    fn moments_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.ckpt");
        let mut pairs = vec![("w".to_string(), {
            let mut t = Tensor::from_vec(&[3], vec![0.3, -0.7, 2.0]).unwrap().with_grad();
            t.accumulate_grad(&[0.1, 0.2, -0.3]).unwrap();
            t
        })];
        let named: Vec<(String, &Tensor)> = pairs.iter().map(|(n, t)| (n.clone(), &*t)).collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &named);
        let mut restored = AdamW::new(AdamWConfig::default(), &named);
        drop(named);
        let mut muts = named_mut(&mut pairs);
        opt.step(&mut muts, 0.01).unwrap();
        opt.save(&path).unwrap();

        restored.load(&path).unwrap();
        assert_eq!(restored.t(), 1);

        // The restored optimizer continues bitwise identically: step both
        // against identical parameter copies and compare.
        let snapshot = pairs[0].1.data().to_vec();
        let mut via_restored = pairs.clone();
        let mut muts = named_mut(&mut pairs);
        opt.step(&mut muts, 0.005).unwrap();
        let mut muts2 = named_mut(&mut via_restored);
        restored.step(&mut muts2, 0.005).unwrap();
        assert_ne!(pairs[0].1.data(), &snapshot[..]);
        assert_eq!(pairs[0].1.data(), via_restored[0].1.data());
    }
}
