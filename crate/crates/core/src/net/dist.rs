//! Masked distributions over the action space and per-cell goal beliefs.
//!
//! Action logits are laid out per cell with `B + 8` channels: no-op and the
//! six moves (whose probabilities are summed over every cell), break here,
//! and one place channel per block type. An action code therefore owns a
//! group of logit entries, and its probability is the softmax mass of the
//! group, renormalized over the valid codes only.

use crate::world::{ActionSpace, NUM_GLOBAL_ACTIONS};

/// Floor applied inside logs of fixed (non-network) distributions.
pub const LOG_FLOOR: f64 = 1e-9;

pub fn head_channels(num_block_types: usize) -> usize {
    num_block_types + NUM_GLOBAL_ACTIONS + 1
}

/// Calls `f` for every logit entry owned by `code`.
#[inline]
pub fn for_each_entry(space: &ActionSpace, code: usize, mut f: impl FnMut(usize)) {
    let k = head_channels(space.num_block_types);
    let n = space.dims.volume();
    if code < NUM_GLOBAL_ACTIONS {
        for c in 0..n {
            f(c * k + code);
        }
    } else if code < NUM_GLOBAL_ACTIONS + n {
        f((code - NUM_GLOBAL_ACTIONS) * k + NUM_GLOBAL_ACTIONS);
    } else {
        let r = code - NUM_GLOBAL_ACTIONS - n;
        let b = space.num_block_types;
        f((r / b) * k + NUM_GLOBAL_ACTIONS + 1 + r % b);
    }
}

/// Log-probabilities of the valid codes under the grouped softmax.
#[derive(Clone, Debug)]
pub struct GroupedSoftmax {
    pub codes: Vec<u32>,
    pub log_probs: Vec<f64>,
    max: f64,
    log_z: f64,
    log_group: Vec<f64>,
}

impl GroupedSoftmax {
    pub fn new(space: &ActionSpace, logits: &[f64], codes: &[u32]) -> Self {
        assert!(!codes.is_empty(), "no valid actions");
        let mut max = f64::NEG_INFINITY;
        for &a in codes {
            for_each_entry(space, a as usize, |j| max = max.max(logits[j]));
        }
        let mut log_group = Vec::with_capacity(codes.len());
        let mut z = 0.0;
        for &a in codes {
            let mut s = 0.0;
            for_each_entry(space, a as usize, |j| s += (logits[j] - max).exp());
            z += s;
            log_group.push(s.ln());
        }
        let log_z = z.ln();
        let log_probs = log_group.iter().map(|l| l - log_z).collect();
        GroupedSoftmax {
            codes: codes.to_vec(),
            log_probs,
            max,
            log_z,
            log_group,
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    /// Probabilities scattered into a vector over the whole action space.
    pub fn dense(&self, size: usize) -> Vec<f64> {
        let mut out = vec![0.0; size];
        for (&a, l) in self.codes.iter().zip(&self.log_probs) {
            out[a as usize] = l.exp();
        }
        out
    }

    pub fn entropy(&self) -> f64 {
        -self.log_probs.iter().map(|l| l.exp() * l).sum::<f64>()
    }

    pub fn log_prob_of(&self, code: u32) -> Option<f64> {
        self.codes
            .binary_search(&code)
            .ok()
            .map(|i| self.log_probs[i])
    }

    pub fn position(&self, code: u32) -> Option<usize> {
        self.codes.binary_search(&code).ok()
    }

    /// Accumulates into `dlogits` the gradient of a loss whose derivative
    /// with respect to each valid code's log-probability is `g`.
    pub fn backward(&self, space: &ActionSpace, logits: &[f64], g: &[f64], dlogits: &mut [f64]) {
        let total: f64 = g.iter().sum();
        for (i, &a) in self.codes.iter().enumerate() {
            let gi = g[i];
            let lg = self.log_group[i];
            for_each_entry(space, a as usize, |j| {
                let e = logits[j] - self.max;
                let within = (e - lg).exp();
                let overall = (e - self.log_z).exp();
                dlogits[j] += gi * within - overall * total;
            });
        }
    }
}

/// Softmax over each row of `logits` (`rows × k`).
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_exact_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// `KL(p ‖ q)` with the log floor on the `p` side only where `p` is fixed.
pub fn kl_fixed(p: &[f64], q_log: &[f64]) -> f64 {
    p.iter()
        .zip(q_log)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lq)| p * (p.max(LOG_FLOOR).ln() - lq))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Dims;
    use proptest::prelude::*;

    fn space() -> ActionSpace {
        ActionSpace::new(Dims::new(2, 2, 2), 3)
    }

    fn all_codes(space: &ActionSpace) -> Vec<u32> {
        (0..space.size())
            .filter(|&c| space.decode(c).is_some())
            .map(|c| c as u32)
            .collect()
    }

    #[test]
    fn every_entry_belongs_to_exactly_one_code() {
        let s = space();
        let k = head_channels(3);
        let mut owner = vec![usize::MAX; s.dims.volume() * k];
        for code in 0..s.size() {
            for_each_entry(&s, code, |j| {
                assert_eq!(owner[j], usize::MAX);
                owner[j] = code;
            });
        }
        assert!(owner.iter().all(|&o| o != usize::MAX));
    }

    #[test]
    fn single_valid_action_has_probability_one() {
        let s = space();
        let logits: Vec<f64> = (0..s.dims.volume() * head_channels(3))
            .map(|i| (i as f64 * 0.37).sin() * 3.0)
            .collect();
        let d = GroupedSoftmax::new(&s, &logits, &[12]);
        assert_eq!(d.probs(), vec![1.0]);
        let dense = d.dense(s.size());
        assert_eq!(dense.iter().filter(|&&p| p != 0.0).count(), 1);
    }

    #[test]
    fn global_actions_sum_over_cells() {
        let s = space();
        let logits = vec![0.0; s.dims.volume() * head_channels(3)];
        let d = GroupedSoftmax::new(&s, &logits, &[0, 7]);
        // no-op owns 8 entries, break at cell 0 owns one
        assert!((d.probs()[0] - 8.0 / 9.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn grouped_softmax_sums_to_one(seed in 0u64..1000, keep in 1usize..40) {
            let s = space();
            let codes: Vec<u32> = all_codes(&s).into_iter().filter(|c| (c * 7 + seed as u32) % 40 < keep as u32).collect();
            prop_assume!(!codes.is_empty());
            let logits: Vec<f64> = (0..s.dims.volume() * head_channels(3))
                .map(|i| ((i as f64 + seed as f64) * 1.3).sin() * 5.0)
                .collect();
            let d = GroupedSoftmax::new(&s, &logits, &codes);
            let dense = d.dense(s.size());
            prop_assert!((dense.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (c, p) in dense.iter().enumerate() {
                if codes.binary_search(&(c as u32)).is_err() {
                    prop_assert_eq!(*p, 0.0);
                }
            }
        }

        #[test]
        fn backward_matches_finite_differences(seed in 0u64..200) {
            let s = space();
            let codes: Vec<u32> = all_codes(&s).into_iter().filter(|c| (c + seed as u32) % 3 != 0).collect();
            let mut logits: Vec<f64> = (0..s.dims.volume() * head_channels(3))
                .map(|i| ((i as f64 * 0.7 + seed as f64) * 0.9).cos() * 2.0)
                .collect();
            let g: Vec<f64> = (0..codes.len()).map(|i| ((i + seed as usize) as f64).sin()).collect();
            let f = |z: &[f64]| -> f64 {
                let d = GroupedSoftmax::new(&s, z, &codes);
                d.log_probs.iter().zip(&g).map(|(l, g)| l * g).sum()
            };
            let d = GroupedSoftmax::new(&s, &logits, &codes);
            let mut grad = vec![0.0; logits.len()];
            d.backward(&s, &logits, &g, &mut grad);
            for j in 0..logits.len() {
                let h = 1e-6;
                let orig = logits[j];
                logits[j] = orig + h;
                let up = f(&logits);
                logits[j] = orig - h;
                let dn = f(&logits);
                logits[j] = orig;
                let fd = (up - dn) / (2.0 * h);
                prop_assert!((fd - grad[j]).abs() < 1e-7, "entry {}: {} vs {}", j, fd, grad[j]);
            }
        }
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let z = [1.0, -2.0, 0.5, 3.0, 3.0, 3.0];
        let p = softmax_rows(&z, 3);
        let l = log_softmax_rows(&z, 3);
        for (p, l) in p.iter().zip(&l) {
            assert!((p.ln() - l).abs() < 1e-12);
        }
        assert!((p[3] - 1.0 / 3.0).abs() < 1e-12);
    }
}
