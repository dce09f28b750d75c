use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::forge::{Method, PromptPlan};
use crate::gateway::{ModelConfig, ModelRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    /// In-process stand-ins (lexical fallback scorer, lexicon sentiment).
    #[default]
    Fallback,
    Sidecar,
}

fn d_n() -> usize {
    5
}
fn d_parallelism() -> usize {
    4
}
fn d_alpha() -> f64 {
    0.01
}
fn d_resamples() -> usize {
    1000
}
fn d_level() -> f64 {
    0.95
}
fn d_sidecar() -> String {
    "http://127.0.0.1:8787".into()
}
fn d_not_better() -> String {
    "Baseline".into()
}

/// Experiment configuration, read from a TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Instance file written by the `corpus` step.
    pub instances: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    /// History length; instances with longer histories keep the most recent `n`.
    #[serde(default = "d_n")]
    pub n: usize,
    /// Number of instances to sample (0 = all).
    #[serde(default)]
    pub sample: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_parallelism")]
    pub parallelism: usize,
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_resamples")]
    pub bootstrap_resamples: usize,
    #[serde(default = "d_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub kl_smoothing: f64,
    #[serde(default)]
    pub scorer: BackendChoice,
    #[serde(default)]
    pub sentiment: BackendChoice,
    #[serde(default = "d_sidecar")]
    pub sidecar_url: String,
    /// Reference for the `*` marker; defaults to the first SCP method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub better_than: Option<String>,
    /// Reference for the `⋄` marker.
    #[serde(default = "d_not_better")]
    pub not_better_than: String,
    /// Names resolved against `models_file` (or the bundled table).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub models: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub models_file: Option<PathBuf>,
    /// Inline model definitions.
    #[serde(default, rename = "model", skip_serializing_if = "Vec::is_empty")]
    pub inline_models: Vec<ModelConfig>,
    #[serde(rename = "method")]
    pub methods: Vec<PromptPlan>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    /// Reads a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text =
            fs::read_to_string(path).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.instances);
        fix(&mut self.output_dir);
        if let Some(p) = self.cache_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.templates_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.models_file.as_mut() {
            fix(p);
        }
    }

    /// Named models from the registry followed by inline ones.
    pub fn resolve_models(&self) -> Result<Vec<ModelConfig>, RunError> {
        let registry = match &self.models_file {
            Some(p) => ModelRegistry::load(p)?,
            None => ModelRegistry::builtin(),
        };
        let mut out = Vec::new();
        for name in &self.models {
            out.push(
                registry
                    .get(name)
                    .cloned()
                    .ok_or_else(|| RunError::Config(format!("unknown model `{name}`")))?,
            );
        }
        for m in &self.inline_models {
            m.validate()?;
            out.push(m.clone());
        }
        if out.is_empty() {
            return Err(RunError::Config("no models configured".into()));
        }
        let mut names: Vec<&str> = out.iter().map(|m| m.model_name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(RunError::Config("duplicate model names".into()));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), RunError> {
        if self.methods.is_empty() {
            return Err(RunError::Config("no methods configured".into()));
        }
        if self.n == 0 {
            return Err(RunError::Config("n must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(RunError::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        for plan in &self.methods {
            plan.validate(self.n)
                .map_err(|e| RunError::Config(format!("{}: {e}", plan.label())))?;
        }
        let mut labels: Vec<String> = self.methods.iter().map(PromptPlan::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(RunError::Config("duplicate method labels; set `name`".into()));
        }
        Ok(())
    }

    /// The `*` reference: configured, else the first SCP method.
    pub fn better_than_label(&self) -> Option<String> {
        self.better_than.clone().or_else(|| {
            self.methods
                .iter()
                .find(|p| p.method == Method::Scp && !p.self_refine)
                .map(PromptPlan::label)
        })
    }
}
