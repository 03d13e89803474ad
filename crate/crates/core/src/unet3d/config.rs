use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape and training-batch settings for the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub input_channels: usize,
    /// Two channels normalised per voxel; channel 1 is foreground.
    pub output_channels: usize,
    pub base_features: usize,
    /// Resolution levels; level `l` has `base_features << l` features.
    pub levels: usize,
    /// Pooling factor between level `l` and `l + 1` (`levels - 1` entries).
    pub downsample: Vec<[usize; 3]>,
    pub groupnorm_groups: usize,
    /// Patch size (width, height, depth) for training and tiled inference.
    pub patch_dims: [usize; 3],
    pub batch_size: usize,
    /// Network input is `hu / intensity_scale`.
    pub intensity_scale: f32,
    /// Hounsfield value used for patch voxels outside the volume (air).
    pub pad_value: f32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            output_channels: 2,
            base_features: 16,
            levels: 3,
            downsample: vec![[2, 2, 2], [2, 2, 2]],
            groupnorm_groups: 4,
            patch_dims: [64, 64, 32],
            batch_size: 4,
            intensity_scale: 1000.0,
            pad_value: -1024.0,
        }
    }
}

impl NetworkConfig {
    /// The full-size clinical patch of 228×228×52 voxels. Depth is pooled
    /// only once so 52 stays divisible.
    pub fn clinical() -> Self {
        Self {
            downsample: vec![[2, 2, 2], [2, 2, 1]],
            patch_dims: [228, 228, 52],
            ..Self::default()
        }
    }

    pub fn features(&self, level: usize) -> usize {
        self.base_features << level
    }

    /// Product of pooling factors per axis.
    pub fn cumulative_downsample(&self) -> [usize; 3] {
        self.downsample
            .iter()
            .fold([1, 1, 1], |acc, f| [acc[0] * f[0], acc[1] * f[1], acc[2] * f[2]])
    }

    pub fn accepts_dims(&self, dims: [usize; 3]) -> bool {
        let f = self.cumulative_downsample();
        (0..3).all(|a| dims[a] > 0 && dims[a].is_multiple_of(f[a]))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_channels != 1 {
            return fail(format!("input_channels must be 1, got {}", self.input_channels));
        }
        if self.output_channels != 2 {
            return fail(format!("output_channels must be 2, got {}", self.output_channels));
        }
        if self.levels == 0 || self.base_features == 0 || self.groupnorm_groups == 0 {
            return fail("levels, base_features and groupnorm_groups must be positive".into());
        }
        if self.downsample.len() + 1 != self.levels {
            return fail(format!(
                "{} levels need {} downsample factors, got {}",
                self.levels,
                self.levels - 1,
                self.downsample.len()
            ));
        }
        if self.downsample.iter().flatten().any(|&f| f == 0) {
            return fail("downsample factors must be positive".into());
        }
        for l in 0..self.levels {
            if !self.features(l).is_multiple_of(self.groupnorm_groups) {
                return fail(format!(
                    "{} groups do not divide {} features at level {l}",
                    self.groupnorm_groups,
                    self.features(l)
                ));
            }
        }
        if !self.accepts_dims(self.patch_dims) {
            return fail(format!(
                "patch {:?} not divisible by cumulative downsample {:?}",
                self.patch_dims,
                self.cumulative_downsample()
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.intensity_scale > 0.0) {
            return fail("intensity_scale must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_clinical_are_valid() {
        NetworkConfig::default().validate().unwrap();
        let c = NetworkConfig::clinical();
        c.validate().unwrap();
        assert_eq!(c.patch_dims, [228, 228, 52]);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.cumulative_downsample(), [4, 4, 2]);
    }

    #[test]
    fn isotropic_three_level_rejects_clinical_patch() {
        let c = NetworkConfig {
            patch_dims: [228, 228, 52],
            downsample: vec![[2, 2, 2], [2, 2, 2], [2, 2, 2]],
            levels: 4,
            ..NetworkConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn invalid_configs() {
        let bad_groups = NetworkConfig {
            base_features: 6,
            ..NetworkConfig::default()
        };
        assert!(bad_groups.validate().is_err());
        let bad_batch = NetworkConfig {
            batch_size: 0,
            ..NetworkConfig::default()
        };
        assert!(bad_batch.validate().is_err());
        let bad_levels = NetworkConfig {
            levels: 2,
            ..NetworkConfig::default()
        };
        assert!(bad_levels.validate().is_err());
    }
}
