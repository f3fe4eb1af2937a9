//! Pipeline configuration: one TOML file with a section per stage.
//!
//! Every module seed is derived from the global `seed` and a module name, so
//! sections never carry their own `seed` key. Validation collects every
//! problem it finds before reporting.

use std::path::{Path, PathBuf};

use claimgraph::baselines::TreeEnsembleConfig;
use claimgraph::cohort::ScenarioConfig;
use claimgraph::datagen::GeneratorConfig;
use claimgraph::explain::ExplainConfig;
use claimgraph::gnn::TrainConfig;
use claimgraph::matching::{MatchConfig, SplitConfig};
use claimgraph::seed::derive_seed;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

const SECTIONS: [&str; 8] = ["paths", "generator", "cohort", "split", "match", "train", "baseline", "explain"];
const TOP_LEVEL: [&str; 2] = ["seed", "scenarios"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub patients: Option<PathBuf>,
    pub claims: Option<PathBuf>,
    pub code_map: Option<PathBuf>,
    pub case_definition: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            patients: None,
            claims: None,
            code_map: None,
            case_definition: None,
            output_dir: PathBuf::from("claimgraph-output"),
        }
    }
}

/// Inclusion criteria shared by all scenarios; window lengths follow the
/// scenario id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortSection {
    pub feature_years: i32,
    pub min_age_at_index: i32,
    pub min_record_span_years: i32,
    pub min_qualifying_months: usize,
    pub min_codes_per_month: usize,
    pub require_all_months: bool,
}

impl Default for CohortSection {
    fn default() -> Self {
        let s = ScenarioConfig::new(1, 0);
        CohortSection {
            feature_years: s.feature_years,
            min_age_at_index: s.min_age_at_index,
            min_record_span_years: s.min_record_span_years,
            min_qualifying_months: s.min_qualifying_months,
            min_codes_per_month: s.min_codes_per_month,
            require_all_months: s.require_all_months,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub test_fraction: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            test_fraction: SplitConfig::default().test_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchSection {
    pub caliper: f64,
    /// Cases and controls drawn from the matched cohort for the subset
    /// regime; leave unset to skip that regime.
    pub subset_per_class: Option<usize>,
}

impl Default for MatchSection {
    fn default() -> Self {
        let m = MatchConfig::default();
        MatchSection {
            caliper: m.caliper,
            subset_per_class: m.subset_per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub forest: TreeEnsembleConfig,
    pub boosted: TreeEnsembleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub scenarios: Vec<u8>,
    pub paths: Paths,
    pub generator: Option<GeneratorConfig>,
    pub cohort: CohortSection,
    pub split: SplitSection,
    #[serde(rename = "match")]
    pub matching: MatchSection,
    pub train: TrainConfig,
    pub baseline: BaselineSection,
    pub explain: ExplainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            scenarios: vec![1, 2, 3],
            paths: Paths::default(),
            generator: None,
            cohort: CohortSection::default(),
            split: SplitSection::default(),
            matching: MatchSection::default(),
            train: TrainConfig::default(),
            baseline: BaselineSection::default(),
            explain: ExplainConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scenarios: Option<Vec<u8>>,
    pub output_dir: Option<PathBuf>,
}

fn section<T: DeserializeOwned + Default>(table: &toml::Table, name: &str, problems: &mut Vec<String>) -> T {
    let Some(value) = table.get(name) else {
        return T::default();
    };
    if let Some(t) = value.as_table() {
        for (key, v) in t {
            if key == "seed" || v.as_table().is_some_and(|inner| inner.contains_key("seed")) {
                problems.push(format!("[{name}]: seeds are derived from the global seed; remove the section seed"));
            }
        }
    }
    value.clone().try_into().unwrap_or_else(|e: toml::de::Error| {
        problems.push(format!("[{name}]: {}", e.message()));
        T::default()
    })
}

/// Fills absent generator keys from [`GeneratorConfig::default`].
fn generator_section(value: &toml::Value, problems: &mut Vec<String>) -> Option<GeneratorConfig> {
    let Some(user) = value.as_table() else {
        problems.push("[generator]: expected a table".into());
        return None;
    };
    if user.contains_key("seed") {
        problems.push("[generator]: seeds are derived from the global seed; remove the section seed".into());
    }
    let mut merged = toml::Table::try_from(GeneratorConfig::default()).expect("generator defaults serialize");
    for (k, v) in user {
        merged.insert(k.clone(), v.clone());
    }
    match toml::Value::Table(merged).try_into::<GeneratorConfig>() {
        Ok(g) => Some(g),
        Err(e) => {
            problems.push(format!("[generator]: {}", e.message()));
            None
        }
    }
}

fn split_problems(e: claimgraph::Error, section: &str, problems: &mut Vec<String>) {
    let text = match e {
        claimgraph::Error::Config(s) => s,
        other => other.to_string(),
    };
    problems.extend(text.split("; ").map(|p| format!("[{section}]: {p}")));
}

impl PipelineConfig {
    /// Parses TOML text. Relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(vec![format!("syntax: {}", e.message().trim())]))?;
        let mut problems = Vec::new();
        for key in table.keys() {
            if !SECTIONS.contains(&key.as_str()) && !TOP_LEVEL.contains(&key.as_str()) {
                problems.push(format!("unknown key or section '{key}'"));
            }
        }

        let mut cfg = PipelineConfig::default();
        match table.get("seed").map(|v| v.as_integer()) {
            None => {}
            Some(Some(s)) if s >= 0 => cfg.seed = s as u64,
            Some(_) => problems.push("seed: expected a non-negative integer".into()),
        }
        if let Some(v) = table.get("scenarios") {
            match v.clone().try_into::<Vec<u8>>() {
                Ok(s) => cfg.scenarios = s,
                Err(_) => problems.push("scenarios: expected a list of scenario ids".into()),
            }
        }
        cfg.paths = section(&table, "paths", &mut problems);
        cfg.generator = table.get("generator").and_then(|v| generator_section(v, &mut problems));
        cfg.cohort = section(&table, "cohort", &mut problems);
        cfg.split = section(&table, "split", &mut problems);
        cfg.matching = section(&table, "match", &mut problems);
        cfg.train = section(&table, "train", &mut problems);
        cfg.baseline = section(&table, "baseline", &mut problems);
        cfg.explain = section(&table, "explain", &mut problems);

        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(s) = &overrides.scenarios {
            cfg.scenarios = s.clone();
        }
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut cfg.paths.patients,
            &mut cfg.paths.claims,
            &mut cfg.paths.code_map,
            &mut cfg.paths.case_definition,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        resolve(&mut cfg.paths.output_dir);
        if let Some(out) = &overrides.output_dir {
            cfg.paths.output_dir = out.clone();
        }

        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(problems))
        }
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("cannot read config {}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base, overrides)
    }

    /// Every validation problem, in section order.
    pub fn problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.scenarios.is_empty() {
            problems.push("scenarios: at least one scenario is required".into());
        }
        for s in &self.scenarios {
            if !(1..=3).contains(s) {
                problems.push(format!("scenarios: id {s} is not one of 1, 2, 3"));
            }
        }
        let mut seen = self.scenarios.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.scenarios.len() {
            problems.push("scenarios: ids must be unique".into());
        }

        match &self.generator {
            Some(g) => {
                for (name, p) in [("patients", &self.paths.patients), ("claims", &self.paths.claims)] {
                    if p.is_some() {
                        problems.push(format!("[paths]: {name} cannot be set together with [generator]"));
                    }
                }
                if let Err(e) = g.validate() {
                    split_problems(e, "generator", &mut problems);
                }
            }
            None => {
                for (name, p) in [("patients", &self.paths.patients), ("claims", &self.paths.claims)] {
                    if p.is_none() {
                        problems.push(format!("[paths]: {name} is required when there is no [generator] section"));
                    }
                }
            }
        }
        for (name, p) in [
            ("patients", &self.paths.patients),
            ("claims", &self.paths.claims),
            ("code_map", &self.paths.code_map),
            ("case_definition", &self.paths.case_definition),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    problems.push(format!("[paths]: {name} file {} does not exist", p.display()));
                }
            }
        }

        if let Err(e) = self.scenario_config(1).validate() {
            split_problems(e, "cohort", &mut problems);
        }
        let t = self.split.test_fraction;
        if !(t > 0.0 && t < 1.0) {
            problems.push("[split]: test_fraction must lie in (0, 1)".into());
        }
        if !(self.matching.caliper >= 0.0) {
            problems.push("[match]: caliper must be non-negative".into());
        }
        if self.matching.subset_per_class == Some(0) {
            problems.push("[match]: subset_per_class must be positive".into());
        }
        if let Err(e) = self.train.validate() {
            split_problems(e, "train", &mut problems);
        }
        if let Err(e) = self.baseline.forest.validate() {
            split_problems(e, "baseline.forest", &mut problems);
        }
        if let Err(e) = self.baseline.boosted.validate() {
            split_problems(e, "baseline.boosted", &mut problems);
        }
        if self.explain.top_k == 0 {
            problems.push("[explain]: top_k must be positive".into());
        }
        problems
    }

    pub fn module_seed(&self, module: &str) -> u64 {
        derive_seed(self.seed, module)
    }

    pub fn scenario_seed(&self, module: &str, scenario: u8) -> u64 {
        derive_seed(self.module_seed(module), &format!("scenario/{scenario}"))
    }

    pub fn generator_config(&self) -> Option<GeneratorConfig> {
        self.generator.clone().map(|mut g| {
            g.seed = self.module_seed("generator");
            g
        })
    }

    pub fn scenario_config(&self, id: u8) -> ScenarioConfig {
        let c = &self.cohort;
        ScenarioConfig {
            feature_years: c.feature_years,
            min_age_at_index: c.min_age_at_index,
            min_record_span_years: c.min_record_span_years,
            min_qualifying_months: c.min_qualifying_months,
            min_codes_per_month: c.min_codes_per_month,
            require_all_months: c.require_all_months,
            ..ScenarioConfig::new(id, self.scenario_seed("cohort", id))
        }
    }

    pub fn split_config(&self, id: u8) -> SplitConfig {
        SplitConfig {
            test_fraction: self.split.test_fraction,
            seed: self.scenario_seed("split", id),
        }
    }

    pub fn match_config(&self, id: u8) -> MatchConfig {
        MatchConfig {
            caliper: self.matching.caliper,
            subset_per_class: self.matching.subset_per_class,
            seed: self.scenario_seed("match", id),
        }
    }

    pub fn train_config(&self, id: u8) -> TrainConfig {
        TrainConfig {
            seed: self.scenario_seed("train", id),
            ..self.train.clone()
        }
    }

    pub fn forest_config(&self, id: u8) -> TreeEnsembleConfig {
        TreeEnsembleConfig {
            seed: self.scenario_seed("baseline/forest", id),
            ..self.baseline.forest.clone()
        }
    }

    pub fn boosted_config(&self, id: u8) -> TreeEnsembleConfig {
        TreeEnsembleConfig {
            seed: self.scenario_seed("baseline/boosted", id),
            ..self.baseline.boosted.clone()
        }
    }

    /// Digest of the effective configuration. The output directory is left
    /// out so runs into different directories compare equal.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PipelineConfig, CliError> {
        PipelineConfig::from_toml(text, Path::new("."), &Overrides::default())
    }

    fn problems(text: &str) -> Vec<String> {
        match parse(text) {
            Err(CliError::Config(p)) => p,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn generator_only_config_fills_defaults() {
        let cfg = parse("seed = 3\n[generator]\nn_patients = 50\n").unwrap();
        let g = cfg.generator_config().unwrap();
        assert_eq!(g.n_patients, 50);
        assert_eq!(g.visits_per_year, GeneratorConfig::default().visits_per_year);
        assert_eq!(g.seed, derive_seed(3, "generator"));
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.scenarios, vec![1, 2, 3]);
    }

    #[test]
    fn problems_are_listed_together() {
        let p = problems(
            "scenarios = [1, 4]\nbogus = 1\n[train]\nseed = 5\nlearning_rate = -1.0\nbatch_size = 0\n[split]\ntest_fraction = 2.0\n",
        );
        let joined = p.join("\n");
        for needle in ["id 4", "bogus", "seeds are derived", "learning_rate", "batch_size", "test_fraction", "patients is required"] {
            assert!(joined.contains(needle), "missing '{needle}' in {joined}");
        }
        assert!(p.len() >= 7);
    }

    #[test]
    fn type_errors_name_the_section() {
        let p = problems("[generator]\nn_patients = \"many\"\n[explain]\ntop_k = 0\n");
        assert!(p.iter().any(|s| s.starts_with("[generator]")));
        assert!(p.iter().any(|s| s.contains("top_k")));
    }

    #[test]
    fn missing_input_files_are_reported() {
        let p = problems("[paths]\npatients = \"no/such/patients.csv\"\nclaims = \"no/such/claims.csv\"\n");
        assert_eq!(p.iter().filter(|s| s.contains("does not exist")).count(), 2);
    }

    #[test]
    fn generated_and_supplied_inputs_conflict() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("p.csv");
        std::fs::write(&f, "x").unwrap();
        let text = format!("[generator]\n[paths]\npatients = \"{}\"\n", f.display());
        assert!(problems(&text).iter().any(|s| s.contains("cannot be set together")));
    }

    #[test]
    fn overrides_win_and_seeds_follow_global() {
        let o = Overrides {
            seed: Some(11),
            scenarios: Some(vec![2]),
            output_dir: Some(PathBuf::from("elsewhere")),
        };
        let cfg = PipelineConfig::from_toml("seed = 1\n[generator]\n", Path::new("."), &o).unwrap();
        assert_eq!(cfg.scenarios, vec![2]);
        assert_eq!(cfg.paths.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.train_config(2).seed, derive_seed(derive_seed(11, "train"), "scenario/2"));
        assert_ne!(cfg.forest_config(2).seed, cfg.boosted_config(2).seed);
        let s = cfg.scenario_config(2);
        assert_eq!((s.selection_years, s.prediction_years), (2, 2));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = parse("[generator]\n[paths]\noutput_dir = \"a\"\n").unwrap();
        let b = parse("[generator]\n[paths]\noutput_dir = \"b\"\n").unwrap();
        let c = parse("seed = 9\n[generator]\n[paths]\noutput_dir = \"a\"\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn bundled_demo_config_is_valid() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml");
        let cfg = PipelineConfig::load(&path, &Overrides::default()).unwrap();
        assert!(cfg.generator.is_some());
        assert_eq!(cfg.scenarios, vec![1, 2, 3]);
    }
}
