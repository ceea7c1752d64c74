//! Run configuration.
//!
//! A config file only needs `problem = "..."`. Everything else is filled from
//! the defaults, optionally overlaid with the desk-scale preset, and the user's
//! keys win over both. The fully resolved config is what gets written into a
//! run directory, so reloading it reproduces the run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::SolverConfig;
use crate::error::{Error, Result};
use crate::fd::{SliceSpec, DEFAULT_MEMORY_CAP};
use crate::network::{Activation, Envelope, NetworkSpec};
use crate::pde::{
    advection_problem, fit_only_problem, fokker_planck_problem, vlasov_problem, wave_maps_problem, wave_maps_problem_with,
    wave_problem, Metric, PdeProblem, Sampler, WaveMapsIc, WavePacket,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    Wave,
    Advection,
    Vlasov,
    FokkerPlanck,
    WaveMaps,
    FitOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemParams {
    /// Advection velocity; its length sets the dimension.
    pub velocity: Vec<f64>,
    pub fp_dim: usize,
    /// Initial packet for `wave_maps` and the target for `fit_only`.
    pub packet: WavePacket,
    /// Run `wave_maps` on flat space (comparable against the FD oracle).
    pub flat_metric: bool,
}

impl Default for ProblemParams {
    fn default() -> Self {
        ProblemParams { velocity: vec![1.0, 0.5, 0.0], fp_dim: 8, packet: WavePacket::default(), flat_metric: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub envelope: Envelope,
    pub embed_levels: usize,
    pub embed_alpha: f64,
    pub embed_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            hidden: vec![100, 100, 100],
            activation: Activation::Swish,
            envelope: Envelope::None,
            embed_levels: 5,
            embed_alpha: 1.0,
            embed_scale: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdConfig {
    pub grid_n: usize,
    pub ode_tol: f64,
    pub memory_cap_bytes: u64,
    pub slice: SliceSpec,
    /// Largest allowed gap between a checkpoint and the snapshot it is compared with.
    pub time_tol: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { grid_n: 100, ode_tol: 1e-4, memory_cap_bytes: DEFAULT_MEMORY_CAP, slice: SliceSpec::default(), time_tol: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Batch for the held-out residual, disjoint from the solve batch.
    pub residual_samples: usize,
    pub spectrum_stride: usize,
    pub spectrum_samples: usize,
    pub dense_cap: usize,
    pub symmetry_samples: usize,
    pub symmetry_probes: usize,
    /// Batch for relative errors against the analytic solution.
    pub error_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            residual_samples: 4096,
            spectrum_stride: 1,
            spectrum_samples: 512,
            dense_cap: crate::linops::DEFAULT_DENSE_CAP,
            symmetry_samples: 512,
            symmetry_probes: 100,
            error_samples: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemKind,
    pub desk_scale: bool,
    pub final_time: f64,
    /// Checkpoints at `jT/checkpoints`, `j = 0..=checkpoints`.
    pub checkpoints: usize,
    pub sampler: Sampler,
    pub params: ProblemParams,
    pub network: NetworkConfig,
    pub solver: SolverConfig,
    pub fd: FdConfig,
    pub diagnostics: DiagnosticsConfig,
}

fn default_final_time(kind: ProblemKind) -> f64 {
    match kind {
        ProblemKind::FitOnly => 0.1,
        _ => 0.5,
    }
}

impl RunConfig {
    /// Defaults for a problem, before any user overrides.
    pub fn defaults(problem: ProblemKind, desk_scale: bool) -> Self {
        let mut c = RunConfig {
            problem,
            desk_scale,
            final_time: default_final_time(problem),
            checkpoints: 10,
            sampler: Sampler::Uniform,
            params: ProblemParams::default(),
            network: NetworkConfig::default(),
            solver: SolverConfig::default(),
            fd: FdConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        };
        if problem == ProblemKind::WaveMaps {
            c.solver.integrator = crate::dynamics::Integrator::Rk23;
        }
        if desk_scale {
            c.network.hidden = vec![64, 64];
            c.solver.n_samples = 2048;
            c.solver.precond_rank = 100;
            c.solver.fit_iters = 3000;
            c.solver.fit_lr = 1e-2;
            c.solver.head_samples = 8192;
            c.solver.n_restarts = 4;
            c.fd.grid_n = 64;
            c.diagnostics.residual_samples = 2048;
            match problem {
                ProblemKind::Wave => {
                    c.final_time = 0.1;
                    c.network.envelope = Envelope::DirichletCube;
                    c.sampler = Sampler::Focused { weight: 0.5, sigma: 0.15 };
                }
                ProblemKind::FokkerPlanck => c.final_time = 0.05,
                _ => {}
            }
        }
        c
    }

    /// Parses a config, layering it over the defaults for its problem.
    /// `desk_scale` forces the desk preset on; `seed` replaces `solver.seed`.
    pub fn from_toml_str(text: &str, desk_scale: bool, seed: Option<u64>) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let kind: ProblemKind = user
            .get("problem")
            .ok_or_else(|| Error::Config("missing `problem`".into()))?
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("problem: {}", e.message())))?;
        let desk = desk_scale || user.get("desk_scale").and_then(|v| v.as_bool()).unwrap_or(false);
        let mut merged = toml::Table::try_from(Self::defaults(kind, desk)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        merged.insert("desk_scale".into(), toml::Value::Boolean(desk));
        let mut cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some(s) = seed {
            cfg.solver.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, desk_scale: bool, seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text, desk_scale, seed)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the resolved TOML.
    pub fn hash(&self) -> Result<String> {
        Ok(crate::io::sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.final_time > 0.0) || !self.final_time.is_finite() {
            return Err(Error::Config(format!("final_time must be positive (got {})", self.final_time)));
        }
        if self.checkpoints == 0 {
            return Err(Error::Config("checkpoints must be at least 1".into()));
        }
        self.sampler.validate()?;
        self.solver.validate()?;
        WavePacket::new(self.params.packet.f, self.params.packet.s1, self.params.packet.s2)?;
        self.spec_for(1, 1).validate()?;
        Ok(())
    }

    pub fn build_problem(&self) -> Result<PdeProblem> {
        let p = &self.params;
        let problem = match self.problem {
            ProblemKind::Wave => wave_problem(),
            ProblemKind::Advection => {
                if p.velocity.is_empty() {
                    return Err(Error::Config("advection velocity must be non-empty".into()));
                }
                advection_problem(&p.velocity)
            }
            ProblemKind::Vlasov => vlasov_problem(),
            ProblemKind::FokkerPlanck => fokker_planck_problem(p.fp_dim)?,
            ProblemKind::WaveMaps if p.flat_metric => wave_maps_problem_with(Metric::flat(), WaveMapsIc::WavePacket(p.packet)),
            ProblemKind::WaveMaps => wave_maps_problem(WaveMapsIc::WavePacket(p.packet)),
            ProblemKind::FitOnly => fit_only_problem(p.packet),
        };
        Ok(problem.with_final_time(self.final_time).with_sampler(self.sampler.clone()))
    }

    fn spec_for(&self, input_dim: usize, output_dim: usize) -> NetworkSpec {
        let n = &self.network;
        NetworkSpec::new(input_dim, output_dim, n.hidden.clone())
            .with_activation(n.activation)
            .with_envelope(n.envelope)
            .with_embedding(n.embed_levels, n.embed_alpha, n.embed_scale)
    }

    pub fn network_spec(&self, problem: &PdeProblem) -> NetworkSpec {
        self.spec_for(problem.dim(), problem.components())
    }

    pub fn checkpoint_times(&self) -> Vec<f64> {
        let m = self.checkpoints;
        let mut times: Vec<f64> = (0..=m).map(|j| j as f64 * self.final_time / m as f64).collect();
        times[m] = self.final_time;
        times
    }
}

/// Recursive overlay of `over` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !is_tagged(b) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

// Tagged enums (samplers, slices) are replaced whole, so switching variants
// does not leave stale fields behind.
fn is_tagged(t: &toml::Table) -> bool {
    t.contains_key("kind")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_problem_gets_defaults() {
        let c = RunConfig::from_toml_str("problem = \"wave\"", false, None).unwrap();
        assert_eq!(c.network.hidden, vec![100, 100, 100]);
        assert_eq!(c.solver.n_samples, 50_000);
        assert_eq!(c.final_time, 0.5);
        assert!(!c.desk_scale);
        let spec = c.network_spec(&c.build_problem().unwrap());
        assert_eq!((spec.input_dim, spec.output_dim), (3, 2));
    }

    #[test]
    fn desk_scale_and_user_overrides() {
        let text = "problem = \"wave\"\n[solver]\nn_samples = 100\n[network]\nhidden = [8]\n";
        let c = RunConfig::from_toml_str(text, true, Some(42)).unwrap();
        assert!(c.desk_scale);
        assert_eq!(c.solver.n_samples, 100);
        assert_eq!(c.solver.precond_rank, 100);
        assert_eq!(c.network.hidden, vec![8]);
        assert_eq!(c.network.envelope, Envelope::DirichletCube);
        assert_eq!(c.solver.seed, 42);
        assert_eq!(c.final_time, 0.1);
        let in_file = RunConfig::from_toml_str("problem = \"wave\"\ndesk_scale = true", false, None).unwrap();
        assert_eq!(in_file.solver.n_samples, 2048);
    }

    #[test]
    fn resolved_config_reloads_identically() {
        for kind in ["wave", "advection", "vlasov", "fokker_planck", "wave_maps", "fit_only"] {
            let c = RunConfig::from_toml_str(&format!("problem = \"{kind}\""), true, Some(3)).unwrap();
            let text = c.to_toml().unwrap();
            let back = RunConfig::from_toml_str(&text, false, None).unwrap();
            assert_eq!(back, c, "{kind}");
            assert_eq!(back.hash().unwrap(), c.hash().unwrap());
            c.build_problem().unwrap();
        }
    }

    #[test]
    fn sampler_variant_switch_replaces_the_table() {
        let c = RunConfig::from_toml_str("problem = \"wave\"\nsampler = { kind = \"uniform\" }", true, None).unwrap();
        assert_eq!(c.sampler, Sampler::Uniform);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in [
            "",
            "problem = \"heat\"",
            "problem = \"wave\"\nfinal_time = -1.0",
            "problem = \"wave\"\nbogus = 1",
            "problem = \"wave\"\n[solver]\nbogus = 1",
            "problem = \"wave\"\ncheckpoints = 0",
            "problem = \"fokker_planck\"\n[params]\nfp_dim = 0",
            "not toml [",
        ] {
            let r = RunConfig::from_toml_str(text, false, None).and_then(|c| c.build_problem().map(|_| ()));
            match r {
                Err(e) => assert!(!e.is_numerical(), "{text}: {e}"),
                Ok(_) => panic!("accepted {text:?}"),
            }
        }
    }

    #[test]
    fn checkpoints_end_at_final_time() {
        let mut c = RunConfig::defaults(ProblemKind::Wave, false);
        c.final_time = 0.3;
        c.checkpoints = 7;
        let t = c.checkpoint_times();
        assert_eq!(t.len(), 8);
        assert_eq!((t[0], t[7]), (0.0, 0.3));
        assert!(t.windows(2).all(|w| w[0] < w[1]));
    }
}
