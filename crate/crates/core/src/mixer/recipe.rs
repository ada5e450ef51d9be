//! Mix recipes: the randomized layout of a synthesized sample.
//!
//! Recipes are exchanged as JSON with field names matching the struct
//! fields. Distributions are tagged objects, e.g. `{"poisson": 6.0}` or
//! `{"fixed": 2}` for segment counts, `{"log_normal": {"median": 4.0,
//! "sigma": 0.5, "min": 1.0, "max": 20.0}}` or `{"fixed": 8.0}` for
//! durations.

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::StemKind;

/// One value per stem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerStem<T> {
    pub dx: T,
    pub fx: T,
    pub mx: T,
}

impl<T: Copy> PerStem<T> {
    pub fn uniform(v: T) -> Self {
        PerStem { dx: v, fx: v, mx: v }
    }

    pub fn get(&self, stem: StemKind) -> T {
        match stem {
            StemKind::Dx => self.dx,
            StemKind::Fx => self.fx,
            StemKind::Mx => self.mx,
        }
    }
}

/// Number of segments placed on one stem track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountDistribution {
    Poisson(f64),
    Fixed(u32),
}

impl CountDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<u32> {
        match *self {
            CountDistribution::Poisson(lambda) => {
                let d = Poisson::new(lambda).map_err(|e| {
                    Error::validation(format!("bad poisson lambda {lambda}: {e}"))
                })?;
                Ok(d.sample(rng) as u32)
            }
            CountDistribution::Fixed(n) => Ok(n),
        }
    }
}

/// Duration in seconds of one placed segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationDistribution {
    LogNormal {
        /// Median duration in seconds (the distribution is exp(N(ln median, sigma))).
        median: f64,
        sigma: f64,
        min: f64,
        max: f64,
    },
    Fixed(f64),
}

impl DurationDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> Result<f64> {
        match *self {
            DurationDistribution::LogNormal {
                median,
                sigma,
                min,
                max,
            } => {
                let d = LogNormal::new(median.ln(), sigma).map_err(|e| {
                    Error::validation(format!("bad log-normal ({median}, {sigma}): {e}"))
                })?;
                Ok(d.sample(rng).clamp(min, max))
            }
            DurationDistribution::Fixed(s) => Ok(s),
        }
    }

    /// Smallest duration this distribution can produce.
    pub fn minimum(&self) -> f64 {
        match *self {
            DurationDistribution::LogNormal { min, .. } => min,
            DurationDistribution::Fixed(s) => s,
        }
    }
}

fn default_duration() -> f64 {
    60.0
}

fn default_segment_counts() -> PerStem<CountDistribution> {
    PerStem {
        dx: CountDistribution::Poisson(6.0),
        fx: CountDistribution::Poisson(6.0),
        mx: CountDistribution::Poisson(3.0),
    }
}

fn default_segment_durations() -> PerStem<DurationDistribution> {
    PerStem::uniform(DurationDistribution::LogNormal {
        median: 4.0,
        sigma: 0.5,
        min: 1.0,
        max: 20.0,
    })
}

fn default_crossfade() -> f64 {
    0.5
}

fn default_target_loudness() -> f64 {
    -27.0
}

fn default_true_peak_ceiling() -> f64 {
    -2.0
}

/// Per-stem loudness offsets relative to the target, in LU.
fn default_stem_offsets() -> PerStem<f64> {
    PerStem {
        dx: 0.0,
        fx: -3.0,
        mx: -6.0,
    }
}

/// Everything needed to synthesize one sample, minus the clip pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixRecipe {
    /// Total sample duration in seconds.
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_segment_counts")]
    pub segment_counts: PerStem<CountDistribution>,
    #[serde(default = "default_segment_durations")]
    pub segment_durations: PerStem<DurationDistribution>,
    /// Equal-power crossfade length in seconds at overlapping junctions.
    #[serde(default = "default_crossfade")]
    pub crossfade: f64,
    /// Mixture mastering target in LKFS.
    #[serde(default = "default_target_loudness")]
    pub target_loudness: f64,
    /// Mixture true-peak ceiling in dBTP.
    #[serde(default = "default_true_peak_ceiling")]
    pub true_peak_ceiling: f64,
    /// Per-stem loudness offsets from the target, in LU.
    #[serde(default = "default_stem_offsets")]
    pub stem_offsets: PerStem<f64>,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for MixRecipe {
    fn default() -> Self {
        MixRecipe {
            duration: default_duration(),
            segment_counts: default_segment_counts(),
            segment_durations: default_segment_durations(),
            crossfade: default_crossfade(),
            target_loudness: default_target_loudness(),
            true_peak_ceiling: default_true_peak_ceiling(),
            stem_offsets: default_stem_offsets(),
            rng_seed: 0,
        }
    }
}

impl MixRecipe {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::validation(format!(
                "recipe duration must be > 0, got {}",
                self.duration
            )));
        }
        if self.crossfade < 0.0 {
            return Err(Error::validation(format!(
                "crossfade must be >= 0, got {}",
                self.crossfade
            )));
        }
        for stem in StemKind::ALL {
            let min_dur = self.segment_durations.get(stem).minimum();
            if self.crossfade >= min_dur && min_dur > 0.0 {
                return Err(Error::validation(format!(
                    "crossfade {} s must be shorter than the minimum {} segment duration {} s",
                    self.crossfade,
                    stem,
                    min_dur
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<std::path::Path>) -> Result<MixRecipe> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let recipe: MixRecipe = serde_json::from_str(&text)?;
        recipe.validate()?;
        Ok(recipe)
    }

    pub fn to_json_file(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
