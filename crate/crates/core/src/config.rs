//! Run configuration with defaults pinned to the published hyperparameters,
//! and a canonical text dump whose formatting is stable for regression
//! checks.

use serde::{Deserialize, Serialize};

use crate::gaussians::DensifyConfig;
use crate::mapping::MappingConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    /// Keyframe gate: mean flow threshold in pixels.
    pub tau: f64,
    /// Loop detection: mean flow must be below this.
    pub tau_loop: f64,
    /// Loop detection: frame gap must exceed this.
    pub tau_t: usize,
    /// Mono term weight on high-error disparities.
    pub alpha1: f64,
    /// Mono term weight on low-error anchors.
    pub alpha2: f64,
    /// Two-view consistency distance factor.
    pub eta: f64,
    /// Consistency count for a disparity to be valid.
    pub n_consistency: u32,
    /// Online global BA cadence in keyframes.
    pub global_ba_every: usize,
    /// Local optimization window (keyframes).
    pub local_window: usize,
    /// DBA/DSPO alternation rounds per local BA.
    pub ba_rounds: usize,
    /// Alternation rounds cap for global BA.
    pub global_ba_rounds: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            tau: 2.25,
            tau_loop: 25.0,
            tau_t: 20,
            alpha1: 0.01,
            alpha2: 0.1,
            eta: 0.01,
            n_consistency: 2,
            global_ba_every: 20,
            local_window: 5,
            ba_rounds: 6,
            global_ba_rounds: 10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MapInitConfig {
    /// Point-cloud downsampling factor for anchoring.
    pub theta: u32,
    /// Downsampling factor for the first mapped keyframe.
    pub theta_first: u32,
}

impl Default for MapInitConfig {
    fn default() -> Self {
        Self {
            theta: 32,
            theta_first: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingSection {
    pub lambda: f64,
    pub lambda_reg: f64,
    pub map_iters: usize,
    pub kf_cov: f64,
    pub kf_m: f64,
    pub kf_c: f64,
    pub window_size: usize,
    pub beta: usize,
}

impl Default for MappingSection {
    fn default() -> Self {
        let m = MappingConfig::default();
        Self {
            lambda: m.lambda,
            lambda_reg: m.lambda_reg,
            map_iters: m.iterations,
            kf_cov: m.kf_cov,
            kf_m: m.kf_m,
            kf_c: m.kf_c,
            window_size: m.window_capacity,
            beta: m.beta,
        }
    }
}

/// Ablation switches mirroring the CLI flags.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub no_loop_closure: bool,
    pub no_mono_depth: bool,
    pub no_deform: bool,
    pub no_multiview_filter: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub tracking: TrackingConfig,
    pub mapping: MappingSection,
    pub map_init: MapInitConfig,
    pub ablations: Ablations,
}

impl RunConfig {
    pub fn mapping_config(&self) -> MappingConfig {
        let m = MappingConfig {
            lambda: self.mapping.lambda,
            lambda_reg: self.mapping.lambda_reg,
            iterations: self.mapping.map_iters,
            kf_cov: self.mapping.kf_cov,
            kf_m: self.mapping.kf_m,
            kf_c: self.mapping.kf_c,
            window_capacity: self.mapping.window_size,
            beta: self.mapping.beta,
            ..MappingConfig::default()
        };
        m.validate();
        m
    }

    pub fn densify_config(&self) -> DensifyConfig {
        DensifyConfig::default()
    }

    /// Canonical key/value dump, sectioned per module. Floats keep one
    /// decimal when integral so defaults round-trip verbatim.
    pub fn dump(&self) -> String {
        let f = fmt_float;
        let t = &self.tracking;
        let m = &self.mapping;
        format!(
            "[tracking]\n\
             tau = {}\n\
             tau_loop = {}\n\
             tau_t = {}\n\
             alpha1 = {}\n\
             alpha2 = {}\n\
             eta = {}\n\
             n_consistency = {}\n\
             global_ba_every = {}\n\
             local_window = {}\n\
             ba_rounds = {}\n\
             global_ba_rounds = {}\n\
             \n\
             [mapping]\n\
             lambda = {}\n\
             lambda_reg = {}\n\
             map_iters = {}\n\
             kf_cov = {}\n\
             kf_m = {}\n\
             kf_c = {}\n\
             window_size = {}\n\
             beta = {}\n\
             \n\
             [map_init]\n\
             theta = {}\n\
             theta_first = {}\n\
             \n\
             [run]\n\
             seed = {}\n\
             no_loop_closure = {}\n\
             no_mono_depth = {}\n\
             no_deform = {}\n\
             no_multiview_filter = {}\n",
            f(t.tau),
            f(t.tau_loop),
            t.tau_t,
            f(t.alpha1),
            f(t.alpha2),
            f(t.eta),
            t.n_consistency,
            t.global_ba_every,
            t.local_window,
            t.ba_rounds,
            t.global_ba_rounds,
            f(m.lambda),
            f(m.lambda_reg),
            m.map_iters,
            f(m.kf_cov),
            f(m.kf_m),
            f(m.kf_c),
            m.window_size,
            m.beta,
            self.map_init.theta,
            self.map_init.theta_first,
            self.seed,
            self.ablations.no_loop_closure,
            self.ablations.no_mono_depth,
            self.ablations.no_deform,
            self.ablations.no_multiview_filter,
        )
    }
}

fn fmt_float(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{x:.1}")
    } else {
        format!("{x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_values() {
        let c = RunConfig::default();
        let dump = c.dump();
        for expected in [
            "eta = 0.01",
            "n_consistency = 2",
            "lambda = 0.8",
            "lambda_reg = 10.0",
            "map_iters = 60",
            "alpha1 = 0.01",
            "alpha2 = 0.1",
            "tau_loop = 25.0",
            "tau_t = 20",
            "global_ba_every = 20",
            "theta = 32",
            "theta_first = 16",
            "kf_cov = 0.95",
            "kf_m = 0.04",
            "kf_c = 0.3",
            "window_size = 10",
            "beta = 2000",
        ] {
            assert!(dump.contains(expected), "missing `{expected}` in:\n{dump}");
        }
    }

    #[test]
    fn float_formatting_stable() {
        assert_eq!(fmt_float(25.0), "25.0");
        assert_eq!(fmt_float(0.01), "0.01");
        assert_eq!(fmt_float(2.25), "2.25");
        assert_eq!(fmt_float(10.0), "10.0");
    }
}
