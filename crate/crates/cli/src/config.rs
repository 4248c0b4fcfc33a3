//! Project configuration: a TOML file plus command-line overrides.
//!
//! Relative paths in the file resolve against the file's directory.

use std::path::{Path, PathBuf};

use cfedit::backends::mock::MockConfig;
use cfedit::backends::remote::RemoteConfig;
use cfedit::backends::{GroundingParams, InpaintParams, RetryPolicy, ServiceContracts};
use cfedit::editplan::{parse_corpus, validate_corpus};
use cfedit::ordering::ImportanceTable;
use cfedit::pipeline::RunConfig;
use cfedit::{ConceptAnnotation, CostPolicy, DirectedEdit, OrderingStrategy, Taxonomy};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BackendConfig {
    Mock(MockConfig),
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    pub taxonomy: PathBuf,
    pub corpus: PathBuf,
    pub source_label: String,
    pub target_label: String,
    #[serde(default = "default_strategy")]
    pub strategy: OrderingStrategy,
    #[serde(default = "default_runs")]
    pub consistency_runs: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "default_attempts")]
    pub selector_attempts: u32,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// Shown in reports.
    #[serde(default = "default_tag")]
    pub classifier_tag: String,
    /// Only the first N target-class images, in corpus order, are searched
    /// for the closest target. All of them when absent.
    #[serde(default)]
    pub candidate_limit: Option<usize>,
    /// Precomputed importance table; computed from the corpus when absent.
    #[serde(default)]
    pub importance: Option<PathBuf>,
    /// Edits that may never be planned, as `delete sky` or `substitute a b`.
    #[serde(default)]
    pub nonactionable: Vec<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub grounding: GroundingParams,
    #[serde(default)]
    pub inpaint: InpaintParams,
    pub backend: BackendConfig,
}

fn default_strategy() -> OrderingStrategy {
    OrderingStrategy::LocalGlobal
}

fn default_runs() -> u32 {
    7
}

fn default_attempts() -> u32 {
    3
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_jobs() -> usize {
    1
}

fn default_tag() -> String {
    "classifier".into()
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub strategy: Option<OrderingStrategy>,
    pub seed: Option<u64>,
    pub consistency_runs: Option<u32>,
    pub max_steps: Option<usize>,
    pub jobs: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub importance: Option<PathBuf>,
    pub candidate_limit: Option<usize>,
}

/// A validated configuration with its inputs loaded.
#[derive(Debug, Clone)]
pub struct Project {
    pub config: ProjectConfig,
    pub base_dir: PathBuf,
    pub taxonomy: Taxonomy,
    pub corpus: Vec<ConceptAnnotation>,
    pub policy: CostPolicy,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", path.display())))
}

impl ProjectConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.strategy {
            self.strategy = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.consistency_runs {
            self.consistency_runs = v;
        }
        if let Some(v) = o.max_steps {
            self.max_steps = Some(v);
        }
        if let Some(v) = o.jobs {
            self.jobs = v;
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &o.importance {
            self.importance = Some(v.clone());
        }
        if let Some(v) = o.candidate_limit {
            self.candidate_limit = Some(v);
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            strategy: self.strategy,
            consistency_runs: self.consistency_runs,
            max_steps: self.max_steps,
            seed: self.seed,
            selector_attempts: self.selector_attempts,
            retry: self.retry,
            grounding: self.grounding.clone(),
            inpaint: self.inpaint.clone(),
        }
    }
}

impl Project {
    /// Loads and checks everything before any output is written. Paths from
    /// overrides are taken relative to the working directory.
    pub fn load(config_path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = read(config_path)?;
        let mut config: ProjectConfig =
            toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", config_path.display())))?;
        let base_dir = config_path.parent().map(Path::to_path_buf).unwrap_or_default();
        config.taxonomy = resolve(&base_dir, &config.taxonomy);
        config.corpus = resolve(&base_dir, &config.corpus);
        config.output_dir = resolve(&base_dir, &config.output_dir);
        config.importance = config.importance.as_deref().map(|p| resolve(&base_dir, p));
        config.apply(overrides);

        config.run_config().validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        if config.candidate_limit == Some(0) {
            return Err(CliError::Invalid("candidate_limit must be at least 1".into()));
        }
        if config.jobs == 0 {
            return Err(CliError::Invalid("jobs must be at least 1".into()));
        }
        if config.source_label == config.target_label {
            return Err(CliError::Invalid("source_label and target_label must differ".into()));
        }
        match &config.backend {
            BackendConfig::Mock(mock) => mock.validate().map_err(|e| CliError::Invalid(format!("mock backend: {e}")))?,
            BackendConfig::Remote(remote) => {
                if config.strategy == OrderingStrategy::Local && remote.selector.is_none() {
                    return Err(CliError::Invalid("the local strategy needs a selector endpoint".into()));
                }
            }
        }

        let taxonomy = Taxonomy::parse(&read(&config.taxonomy)?)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", config.taxonomy.display())))?;
        let corpus = parse_corpus(&read(&config.corpus)?)
            .map_err(|e| CliError::Invalid(format!("{}: {e}", config.corpus.display())))?;
        validate_corpus(&taxonomy, &corpus).map_err(|e| CliError::Invalid(format!("{}: {e}", config.corpus.display())))?;
        for label in [&config.source_label, &config.target_label] {
            if !corpus.iter().any(|a| &a.label == label) {
                return Err(CliError::Invalid(format!("no image in the corpus is labeled `{label}`")));
            }
        }
        let mut banned = Vec::new();
        for raw in &config.nonactionable {
            let edit: DirectedEdit = raw
                .parse()
                .map_err(|e| CliError::Invalid(format!("nonactionable entry `{raw}`: {e}")))?;
            banned.push(edit);
        }
        if let Some(path) = &config.importance {
            read(path)?;
        }
        Ok(Self {
            policy: CostPolicy::new(banned),
            config,
            base_dir,
            taxonomy,
            corpus,
        })
    }

    pub fn sources(&self) -> Vec<ConceptAnnotation> {
        self.labeled(&self.config.source_label)
    }

    pub fn candidates(&self) -> Vec<ConceptAnnotation> {
        let mut all = self.labeled(&self.config.target_label);
        if let Some(n) = self.config.candidate_limit {
            all.truncate(n);
        }
        all
    }

    fn labeled(&self, label: &str) -> Vec<ConceptAnnotation> {
        self.corpus.iter().filter(|a| a.label == label).cloned().collect()
    }

    /// The configured table, or one computed from the corpus.
    pub fn importance(&self) -> Result<ImportanceTable, CliError> {
        match &self.config.importance {
            Some(path) => {
                let table = ImportanceTable::from_tsv(&read(path)?)
                    .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
                if table.source_label != self.config.source_label || table.target_label != self.config.target_label {
                    return Err(CliError::Invalid(format!(
                        "{} was computed for {} -> {}, not {} -> {}",
                        path.display(),
                        table.source_label,
                        table.target_label,
                        self.config.source_label,
                        self.config.target_label
                    )));
                }
                Ok(table)
            }
            None => cfedit::compute_importance(&self.taxonomy, &self.policy, &self.sources(), &self.candidates())
                .map_err(|e| CliError::Runtime(e.to_string())),
        }
    }

    /// Builds the services for one run. Mock services are fresh per seed;
    /// remote clients are shared.
    pub fn service_factory(&self) -> Result<impl Fn(u64) -> Result<ServiceContracts, String> + Sync + '_, CliError> {
        let shared = match &self.config.backend {
            BackendConfig::Remote(remote) => {
                Some(remote.contracts(&self.base_dir).map_err(|e| CliError::Invalid(e.to_string()))?)
            }
            BackendConfig::Mock(_) => None,
        };
        Ok(move |seed| match (&self.config.backend, &shared) {
            (_, Some(contracts)) => Ok(contracts.clone()),
            (BackendConfig::Mock(mock), None) => mock.contracts(seed).map_err(|e| e.to_string()),
            (BackendConfig::Remote(_), None) => unreachable!("remote contracts built above"),
        })
    }
}
