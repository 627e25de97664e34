//! `RunConfig`: the TOML file every command reads.
//!
//! ```toml
//! seed = 7
//! prompt = "Classify the sentiment of the review as positive or negative."
//!
//! [backend]
//! kind = "mock"
//! mock_script = "mock-robust.json"
//!
//! [task]
//! kind = "classification"
//! labels = ["positive", "negative"]
//!
//! [perturb]
//! epsilon_p1 = 0.9
//!
//! [guides]
//! C1 = "Introduce two typos."
//!
//! [pgo]
//! iterations = 5
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use pertforge::backend::{Backend, LiveBackend, LiveConfig, MockBackend};
use pertforge::perturb::{
    GuideBook, PerturbConfig, PerturbationCode, Sensitivity, SensitivityMatrix,
};
use pertforge::pgo::{PgoConfig, PgoTemplates};
use pertforge::tasks::{TaskKind, TaskSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Mock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default = "default_backend_kind")]
    pub kind: BackendKind,
    pub mock_script: Option<PathBuf>,
    #[serde(flatten)]
    pub live: LiveConfig,
}

fn default_backend_kind() -> BackendKind {
    BackendKind::Mock
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Mock,
            mock_script: None,
            live: LiveConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    #[serde(default)]
    pub labels: Vec<String>,
}

impl TaskSection {
    pub fn spec(&self) -> CliResult<TaskSpec> {
        let spec = match self.kind {
            TaskKind::Classification => TaskSpec::classification(self.labels.clone()),
            TaskKind::Simplification => TaskSpec::simplification(),
            TaskKind::Summarization => TaskSpec::summarization(),
        };
        if self.kind != TaskKind::Classification && !self.labels.is_empty() {
            return Err(CliError::validation(format!(
                "task.labels is only valid for classification, not {}",
                self.kind
            )));
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgoSection {
    pub iterations: u32,
    pub batch_p1: usize,
    pub batch_p2: usize,
    pub proposals: usize,
    pub paraphrases: usize,
    pub templates: PgoTemplates,
}

impl Default for PgoSection {
    fn default() -> Self {
        let d = PgoConfig::default();
        PgoSection {
            iterations: d.iterations,
            batch_p1: d.batch_p1,
            batch_p2: d.batch_p2,
            proposals: d.proposals,
            paraphrases: d.paraphrases,
            templates: d.templates,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Where `build` writes sub-datasets and where `optimize`/`evaluate`
    /// look for them.
    pub data_dir: Option<PathBuf>,
    /// Run directory for `optimize`.
    pub run_dir: Option<PathBuf>,
    /// Output directory for `evaluate`.
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Initial (or evaluated) prompt; `prompt_file` takes precedence.
    pub prompt: Option<String>,
    pub prompt_file: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendSection,
    pub task: TaskSection,
    #[serde(default)]
    pub perturb: PerturbConfig,
    /// Guide text overrides keyed by code.
    #[serde(default)]
    pub guides: BTreeMap<PerturbationCode, String>,
    /// Sensitivity overrides for the configured task kind.
    #[serde(default)]
    pub sensitivity: BTreeMap<PerturbationCode, Sensitivity>,
    #[serde(default)]
    pub pgo: PgoSection,
    #[serde(default)]
    pub paths: PathsSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut config: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    /// Applies command-line overrides, then checks the whole configuration.
    pub fn finish(&mut self, seed: Option<u64>, backend: Option<BackendKind>) -> CliResult<()> {
        if let Some(seed) = seed {
            self.seed = seed;
        }
        if let Some(kind) = backend {
            self.backend.kind = kind;
        }
        self.perturb.seed = self.seed;
        self.validate()
    }

    fn validate(&self) -> CliResult<()> {
        self.task.spec()?;
        self.perturb.validate()?;
        self.pgo_config()
            .validate()
            .map_err(|e| CliError::validation(e.to_string()))?;
        if self.backend.kind == BackendKind::Mock {
            match &self.backend.mock_script {
                None => {
                    return Err(CliError::validation(
                        "backend.mock_script is required for the mock backend",
                    ))
                }
                Some(p) if !self.resolve(p).is_file() => {
                    return Err(CliError::validation(format!(
                        "backend.mock_script {} does not exist",
                        self.resolve(p).display()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(p) = &self.prompt_file {
            if !self.resolve(p).is_file() {
                return Err(CliError::validation(format!(
                    "prompt_file {} does not exist",
                    self.resolve(p).display()
                )));
            }
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        self.task.spec().expect("validated")
    }

    pub fn guide_book(&self) -> GuideBook {
        GuideBook {
            overrides: self.guides.clone(),
        }
    }

    pub fn sensitivity(&self) -> SensitivityMatrix {
        let mut m = SensitivityMatrix::default();
        for (&code, &s) in &self.sensitivity {
            m.set(self.task.kind, code, s);
        }
        m
    }

    pub fn pgo_config(&self) -> PgoConfig {
        PgoConfig {
            iterations: self.pgo.iterations,
            batch_p1: self.pgo.batch_p1,
            batch_p2: self.pgo.batch_p2,
            proposals: self.pgo.proposals,
            paraphrases: self.pgo.paraphrases,
            seed: self.seed,
            perturb: self.perturb.clone(),
            templates: self.pgo.templates.clone(),
        }
    }

    /// The prompt from `--prompt`/`--prompt-file`, else from the config.
    pub fn prompt_text(&self, text: Option<&str>, file: Option<&Path>) -> CliResult<String> {
        let read = |p: &Path| {
            std::fs::read_to_string(p)
                .map(|s| s.trim().to_owned())
                .map_err(|e| {
                    CliError::validation(format!("cannot read prompt {}: {e}", p.display()))
                })
        };
        let prompt = match (text, file, &self.prompt_file, &self.prompt) {
            (Some(t), _, _, _) => t.to_owned(),
            (None, Some(f), _, _) => read(f)?,
            (None, None, Some(f), _) => read(&self.resolve(f))?,
            (None, None, None, Some(t)) => t.clone(),
            _ => {
                return Err(CliError::validation(
                    "no prompt given (use --prompt, --prompt-file or `prompt`)",
                ))
            }
        };
        if prompt.trim().is_empty() {
            return Err(CliError::validation("the prompt is empty"));
        }
        Ok(prompt)
    }

    pub fn backend(&self) -> CliResult<Box<dyn Backend>> {
        Ok(match self.backend.kind {
            BackendKind::Mock => {
                let path = self.resolve(self.backend.mock_script.as_deref().expect("validated"));
                Box::new(MockBackend::from_path(&path)?)
            }
            BackendKind::Live => Box::new(LiveBackend::new(self.backend.live.clone())?),
        })
    }

    /// An explicit command-line path, else the configured one, else `fallback`.
    pub fn dir(
        &self,
        explicit: Option<&Path>,
        configured: &Option<PathBuf>,
        fallback: &str,
    ) -> PathBuf {
        match (explicit, configured) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => self.resolve(p),
            (None, None) => PathBuf::from(fallback),
        }
    }
}

/// Parses a comma-separated code list, naming every valid code on error.
pub fn parse_codes(list: &str) -> CliResult<Vec<PerturbationCode>> {
    let mut codes = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let code = part.parse::<PerturbationCode>()?;
        if !codes.contains(&code) {
            codes.push(code);
        }
    }
    if codes.is_empty() {
        return Err(CliError::validation("empty code list"));
    }
    Ok(codes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let config: RunConfig = toml::from_str(
            r#"
            [task]
            kind = "summarization"
            "#,
        )
        .unwrap();
        assert_eq!(config.backend.kind, BackendKind::Mock);
        let pgo = config.pgo_config();
        assert_eq!(
            (
                pgo.iterations,
                pgo.batch_p1,
                pgo.batch_p2,
                pgo.proposals,
                pgo.paraphrases
            ),
            (5, 5, 3, 4, 2)
        );
        assert_eq!(config.perturb.epsilon_p1, 0.9);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let config: RunConfig = toml::from_str(
            r#"
            seed = 3
            [backend]
            kind = "live"
            model = "local-model"
            base_url = "http://localhost:8000/v1"
            [task]
            kind = "classification"
            labels = ["a", "b"]
            [guides]
            C1 = "custom"
            [sensitivity]
            C3 = "sensitive"
            "#,
        )
        .unwrap();
        assert_eq!(config.backend.live.model, "local-model");
        assert_eq!(
            config.guide_book().spec(PerturbationCode::C1).guide,
            "custom"
        );
        assert!(config
            .sensitivity()
            .is_sensitive(TaskKind::Classification, PerturbationCode::C3));
        assert!(
            toml::from_str::<RunConfig>("bogus = 1\n[task]\nkind = \"summarization\"").is_err()
        );
    }

    #[test]
    fn code_lists() {
        assert_eq!(
            parse_codes("c1, S2,C1").unwrap(),
            vec![PerturbationCode::C1, PerturbationCode::S2]
        );
        let err = parse_codes("C1,X9").unwrap_err();
        assert!(err.message.contains("C1 C2 C3 W1 W2 W3 S1 S2 S3"));
    }
}
