use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

use super::tape::{BatchNormParams, BatchStats, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    /// Optimised at the base learning rate.
    Weight,
    /// Optimised at the reduced rotation-head learning rate.
    SlowWeight,
    /// Not optimised (batch-norm running statistics).
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub data: Vec<f64>,
}

/// Named parameter arrays in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub entries: Vec<ParamEntry>,
}

/// Stddev of the truncated-normal weight initialiser.
pub const INIT_STD: f64 = 0.01;

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, role: ParamRole, data: Vec<f64>) -> Result<usize> {
        if self.index_of(name).is_some() {
            return contract(format!("duplicate parameter name {name}"));
        }
        if shape.iter().product::<usize>() != data.len() {
            return contract(format!("parameter {name} data does not match {shape:?}"));
        }
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            role,
            data: data.into_iter().map(round_f32).collect(),
        });
        Ok(self.entries.len() - 1)
    }

    /// Weights drawn from a normal truncated at two standard deviations.
    pub fn add_weight<R: Rng>(&mut self, rng: &mut R, name: &str, shape: Vec<usize>, role: ParamRole) -> Result<usize> {
        let normal = Normal::new(0.0, INIT_STD).expect("positive stddev");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break v;
                }
            })
            .collect();
        self.add(name, shape, role, data)
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>, role: ParamRole) -> Result<usize> {
        let n = shape.iter().product();
        self.add(name, shape, role, vec![0.0; n])
    }

    pub fn add_batch_norm(&mut self, prefix: &str, channels: usize) -> Result<BatchNormParams> {
        Ok(BatchNormParams {
            gamma: self.add(&format!("{prefix}.gamma"), vec![channels], ParamRole::Weight, vec![1.0; channels])?,
            beta: self.add_zeros(&format!("{prefix}.beta"), vec![channels], ParamRole::Weight)?,
            running_mean: self.add_zeros(&format!("{prefix}.running_mean"), vec![channels], ParamRole::Buffer)?,
            running_var: self.add(
                &format!("{prefix}.running_var"),
                vec![channels],
                ParamRole::Buffer,
                vec![1.0; channels],
            )?,
        })
    }

    /// Folds observed batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for s in stats {
            for (param, batch) in [(s.mean_param, &s.mean), (s.var_param, &s.var)] {
                for (r, b) in self.entries[param].data.iter_mut().zip(batch) {
                    *r = round_f32(BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b);
                }
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role != ParamRole::Buffer)
            .map(|e| e.data.len())
            .sum()
    }
}

/// Values are kept representable in `f32` so that checkpoints round-trip exactly.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add_zeros("a", vec![2], ParamRole::Weight).unwrap();
        assert!(s.add_zeros("a", vec![3], ParamRole::Weight).is_err());
        assert!(s.add("b", vec![2, 2], ParamRole::Weight, vec![0.0; 3]).is_err());
    }

    #[test]
    fn init_is_truncated_and_reproducible() {
        let build = || {
            let mut s = ParamStore::new();
            s.add_weight(&mut ChaCha8Rng::seed_from_u64(1), "w", vec![50, 40], ParamRole::Weight)
                .unwrap();
            s
        };
        let s = build();
        assert!(s.entries[0].data.iter().all(|v| v.abs() <= 2.0 * INIT_STD + 1e-9));
        let mean: f64 = s.entries[0].data.iter().sum::<f64>() / 2000.0;
        assert!(mean.abs() < 1e-3);
        assert_eq!(s, build());
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut s = ParamStore::new();
        let bn = s.add_batch_norm("bn", 1).unwrap();
        s.update_running_stats(&[BatchStats {
            mean_param: bn.running_mean,
            var_param: bn.running_var,
            mean: vec![2.0],
            var: vec![3.0],
        }]);
        assert!((s.entries[bn.running_mean].data[0] - 0.2).abs() < 1e-7);
        assert!((s.entries[bn.running_var].data[0] - 1.2).abs() < 1e-7);
        assert_eq!(s.trainable_count(), 2);
    }
}
