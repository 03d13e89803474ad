use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::NetworkConfig;
use crate::{Error, Result};

/// A named weight or bias tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Network parameters keyed by layer name, e.g. `enc0.conv1.weight`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParameters {
    pub tensors: BTreeMap<String, Param>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Normal with variance `2 / fan_in`.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Every parameter the network needs, in a fixed order.
pub(crate) fn param_specs(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
        specs.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k, k],
            init: Init::Kaiming { fan_in: cin * k * k * k },
        });
        specs.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![cout],
            init: Init::Zeros,
        });
    };
    let mut blocks = Vec::new();
    for l in 0..cfg.levels {
        let cin = if l == 0 { cfg.input_channels } else { cfg.features(l - 1) };
        blocks.push((format!("enc{l}"), cin, cfg.features(l)));
    }
    for l in 0..cfg.levels.saturating_sub(1) {
        blocks.push((format!("dec{l}"), 2 * cfg.features(l), cfg.features(l)));
    }
    let mut norms = Vec::new();
    for (prefix, cin, cout) in &blocks {
        conv(format!("{prefix}.conv1"), *cin, *cout, 3);
        conv(format!("{prefix}.conv2"), *cout, *cout, 3);
        if cin != cout {
            conv(format!("{prefix}.skip"), *cin, *cout, 1);
        }
        norms.push((format!("{prefix}.gn1"), *cout));
        norms.push((format!("{prefix}.gn2"), *cout));
    }
    conv("head".into(), cfg.features(0), cfg.output_channels, 1);
    for (name, c) in norms {
        specs.push(ParamSpec {
            name: format!("{name}.gamma"),
            shape: vec![c],
            init: Init::Ones,
        });
        specs.push(ParamSpec {
            name: format!("{name}.beta"),
            shape: vec![c],
            init: Init::Zeros,
        });
    }
    for l in 1..cfg.levels {
        let f = cfg.downsample[l - 1];
        let (cin, cout) = (cfg.features(l), cfg.features(l - 1));
        specs.push(ParamSpec {
            name: format!("up{l}.weight"),
            shape: vec![f[0], f[1], f[2], cout, cin],
            init: Init::Kaiming { fan_in: cin },
        });
        specs.push(ParamSpec {
            name: format!("up{l}.bias"),
            shape: vec![cout],
            init: Init::Zeros,
        });
    }
    specs
}

/// Kaiming-normal weights, zero biases, unit group-norm scales.
///
/// Parameters are drawn in a fixed order from a seeded ChaCha stream, so the
/// same seed always yields bit-identical parameters.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<ModelParameters> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for spec in param_specs(cfg) {
        let len = spec.shape.iter().product();
        let values = match spec.init {
            Init::Zeros => vec![0.0; len],
            Init::Ones => vec![1.0; len],
            Init::Kaiming { fan_in } => {
                let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::Config(e.to_string()))?;
                (0..len).map(|_| normal.sample(&mut rng) as f32).collect()
            }
        };
        tensors.insert(spec.name, Param { shape: spec.shape, values });
    }
    Ok(ModelParameters { tensors })
}

impl ModelParameters {
    pub fn get(&self, name: &str) -> &[f32] {
        &self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .values
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f32] {
        &mut self
            .tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .values
    }

    /// Same names and shapes, all zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            shape: p.shape.clone(),
                            values: vec![0.0; p.values.len()],
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.values().map(|p| p.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Check names and shapes against what `cfg` requires.
    pub fn check_matches(&self, cfg: &NetworkConfig) -> Result<()> {
        let specs = param_specs(cfg);
        if specs.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for spec in specs {
            match self.tensors.get(&spec.name) {
                Some(p) if p.shape == spec.shape && p.values.len() == spec.shape.iter().product::<usize>() => {}
                Some(p) => {
                    return Err(Error::ShapeMismatch {
                        expected: spec.shape,
                        found: p.shape.clone(),
                    })
                }
                None => return Err(Error::Config(format!("missing parameter {}", spec.name))),
            }
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &ModelParameters, scale: f32) {
        for (name, p) in &mut self.tensors {
            let o = other.get(name);
            p.values.iter_mut().zip(o).for_each(|(a, b)| *a += scale * b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|p| p.values.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NetworkConfig {
        NetworkConfig {
            base_features: 4,
            levels: 2,
            downsample: vec![[2, 2, 2]],
            groupnorm_groups: 2,
            patch_dims: [8, 8, 8],
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn biases_are_zero_and_seed_is_deterministic() {
        let a = init_params(&small(), 7).unwrap();
        let b = init_params(&small(), 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&small(), 8).unwrap();
        assert_ne!(a, c);
        for (name, p) in &a.tensors {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(p.values.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        a.check_matches(&small()).unwrap();
        assert!(a.check_matches(&NetworkConfig::default()).is_err());
    }

    #[test]
    fn kaiming_variance_matches_fan_in() {
        // The default config's widest layer has well over 1e5 weights.
        let cfg = NetworkConfig::default();
        let params = init_params(&cfg, 3).unwrap();
        let w = params.get("enc2.conv2.weight");
        assert!(w.len() >= 100_000);
        let fan_in = (cfg.features(2) * 27) as f64;
        let n = w.len() as f64;
        let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let target = 2.0 / fan_in;
        assert!((var - target).abs() / target < 0.10, "var {var} vs {target}");
    }
}
