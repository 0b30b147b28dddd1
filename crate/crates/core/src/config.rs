//! Pipeline configuration.
//!
//! Config files are flat TOML (`key = value`, `#` comments). Every key is
//! optional; missing keys take the defaults below. Command-line flags override
//! file values.
//!
//! ```toml
//! seed = 7
//! num_classes = 10
//! known_classes = 5
//! k = 3
//! clusters = 10
//! no_text = false
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Denominator;
use crate::rng::SplitMix64;
use crate::sskmeans::{ClusterConfig, EmptyClusterPolicy};
use crate::synth::{MixtureSpec, SplitSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,

    /// Generate inputs. When false, `images` and `corpus` must name bundle directories.
    pub synth: bool,
    pub images: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    /// JSON list of known class ids; defaults to the labels present in `images`.
    pub old_classes: Option<PathBuf>,

    pub num_classes: usize,
    pub known_classes: usize,
    pub samples_per_class: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub separation: f64,
    pub text_noise: f64,
    pub captions_per_class: usize,
    pub distractors_per_class: usize,
    pub distractor_noise: f64,
    pub labeled_fraction: f64,

    /// Captions retrieved per image.
    pub k: usize,
    pub no_text: bool,
    pub renormalize_joint: bool,

    /// Total cluster count; defaults to `num_classes`.
    pub clusters: Option<usize>,
    pub tol: f64,
    pub max_iters: usize,
    pub freeze_known_centers: bool,
    pub empty_cluster: EmptyClusterPolicy,

    pub tau: f64,
    pub lambda: f64,
    pub denominator: Denominator,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: true,
            images: None,
            corpus: None,
            old_classes: None,
            num_classes: 10,
            known_classes: 5,
            samples_per_class: 100,
            d_img: 32,
            d_txt: 32,
            separation: 4.0,
            text_noise: 0.1,
            captions_per_class: 10,
            distractors_per_class: 0,
            distractor_noise: 3.0,
            labeled_fraction: 0.5,
            k: 3,
            no_text: false,
            renormalize_joint: false,
            clusters: None,
            tol: 1e-6,
            max_iters: 300,
            freeze_known_centers: false,
            empty_cluster: EmptyClusterPolicy::Retain,
            tau: crate::losses::DEFAULT_TAU,
            lambda: crate::losses::DEFAULT_LAMBDA,
            denominator: Denominator::ExcludePositive,
        }
    }
}

const SYNTH_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;
const CLUSTER_STREAM: u64 = 3;

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, "config", e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be positive".into()));
        }
        if self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::Config("tol must be non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must be in [0, 1]".into()));
        }
        if self.synth {
            self.mixture_spec().validate()?;
            if self.known_classes == 0 || self.known_classes >= self.num_classes {
                return Err(Error::Config(
                    "known_classes must be between 1 and num_classes - 1".into(),
                ));
            }
        } else {
            if self.images.is_none() {
                return Err(Error::Config("synth = false requires `images`".into()));
            }
            if self.corpus.is_none() && !self.no_text {
                return Err(Error::Config("synth = false requires `corpus` unless no_text".into()));
            }
            if self.clusters.is_none() {
                return Err(Error::Config("synth = false requires `clusters`".into()));
            }
        }
        if let Some(0) = self.clusters {
            return Err(Error::Config("clusters must be positive".into()));
        }
        Ok(())
    }

    pub fn mixture_spec(&self) -> MixtureSpec {
        MixtureSpec {
            num_classes: self.num_classes,
            d_img: self.d_img,
            d_txt: self.d_txt,
            samples_per_class: self.samples_per_class,
            class_separation: self.separation,
            text_noise: self.text_noise,
            captions_per_class: self.captions_per_class,
            distractors_per_class: self.distractors_per_class,
            distractor_noise: self.distractor_noise,
            seed: SplitMix64::derive(self.seed, SYNTH_STREAM),
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec::first_classes(
            self.known_classes,
            self.labeled_fraction,
            SplitMix64::derive(self.seed, SPLIT_STREAM),
        )
    }

    pub fn cluster_config(&self) -> ClusterConfig {
        ClusterConfig {
            clusters: self.clusters.unwrap_or(self.num_classes),
            max_iters: self.max_iters,
            tol: self.tol,
            seed: SplitMix64::derive(self.seed, CLUSTER_STREAM),
            freeze_known_centers: self.freeze_known_centers,
            empty_cluster: self.empty_cluster,
            known_classes: None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        // JSON has no infinity.
        if self.tol.is_infinite() {
            v["tol"] = serde_json::Value::String("inf".into());
        }
        v
    }

    /// Standard desk-scale benchmark: 10 classes, 5 known, 32-dimensional views.
    pub fn standard_benchmark(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Benchmark with a few relevant captions per class and many noisy distractors.
    pub fn distractor_benchmark(seed: u64) -> Self {
        Self {
            seed,
            captions_per_class: 3,
            distractors_per_class: 50,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_toml_with_defaults() {
        let c = PipelineConfig::from_toml_str("seed = 7\nk = 5 # captions\nno_text = true\nempty_cluster = \"reseed-farthest\"\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.k, 5);
        assert!(c.no_text);
        assert_eq!(c.empty_cluster, EmptyClusterPolicy::ReseedFarthest);
        assert_eq!(c.num_classes, 10);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(PipelineConfig::from_toml_str("colour = 1").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = PipelineConfig::distractor_benchmark(3);
        assert_eq!(PipelineConfig::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let bad = PipelineConfig {
            known_classes: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig {
            synth: false,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
