//! Pipeline stages and the on-disk artifact layout.
//!
//! ```text
//! <output>/data/                  generate: patients, claims, ground truth, code map, case definition
//! <output>/ingest/                ingest: resolved code map, mapping report
//! <output>/scenario_<k>/cohort/   cohort: samples, grouped codes, exclusions, counts
//! <output>/scenario_<k>/match/    match: split ids, propensity model, matched pairs, subset ids, balance
//! <output>/scenario_<k>/models/<model>/  train: one model file per regime, timings
//! <output>/scenario_<k>/explain/  explain: relations_top.csv, W.csv, vocabulary sidecar
//! <output>/results.csv            evaluate: AUROC per scenario x model x regime
//! ```
//!
//! Every stage directory gets a `manifest.json`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use claimgraph::baselines::{BaselineModel, EnsembleKind};
use claimgraph::cohort::{self, CohortSample, ExclusionReason};
use claimgraph::datagen::{self, DATASET_FILES};
use claimgraph::domain::io::{read_case_definition, read_code_map, read_timelines, write_code_map};
use claimgraph::domain::{ingest, CaseDefinition, CodeMap};
use claimgraph::eval::{self, ResultRow};
use claimgraph::explain::{self, explain_cohort};
use claimgraph::gnn::{self, train::write_training_log, Vgnn, Vocabulary};
use claimgraph::matching::{self, MatchedCohort};

use crate::manifest::ManifestBuilder;
use crate::{CliError, PipelineConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelKind {
    Vgnn,
    Rf,
    Gbm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Vgnn, ModelKind::Rf, ModelKind::Gbm];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vgnn => "vgnn",
            ModelKind::Rf => "rf",
            ModelKind::Gbm => "gbm",
        }
    }
}

pub const REGIMES: [&str; 2] = ["matched", "subset"];

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn ingest(&self) -> PathBuf {
        self.root.join("ingest")
    }

    pub fn scenario(&self, s: u8) -> PathBuf {
        self.root.join(format!("scenario_{s}"))
    }

    pub fn cohort(&self, s: u8) -> PathBuf {
        self.scenario(s).join("cohort")
    }

    pub fn matching(&self, s: u8) -> PathBuf {
        self.scenario(s).join("match")
    }

    pub fn model(&self, s: u8, m: ModelKind) -> PathBuf {
        self.scenario(s).join("models").join(m.name())
    }

    pub fn model_file(&self, s: u8, m: ModelKind, regime: &str) -> PathBuf {
        self.model(s, m).join(format!("{}_{regime}.json", m.name()))
    }

    pub fn explain(&self, s: u8) -> PathBuf {
        self.scenario(s).join("explain")
    }
}

fn require(path: &Path, producer: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer: producer.into(),
        })
    }
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_file<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> claimgraph::Result<()>,
{
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn remove_stale(path: &Path) -> Result<(), CliError> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(CliError::io(path, e)),
        _ => Ok(()),
    }
}

/// Matched training samples, the optional subset, and the holdout.
pub struct TrainingSets {
    pub matched: Vec<CohortSample>,
    pub subset: Option<Vec<CohortSample>>,
    pub test: Vec<CohortSample>,
}

impl TrainingSets {
    pub fn regime(&self, name: &str) -> Option<&[CohortSample]> {
        match name {
            "matched" => Some(&self.matched),
            _ => self.subset.as_deref(),
        }
    }
}

pub struct Runner {
    pub cfg: PipelineConfig,
    pub layout: Layout,
    hash: String,
}

impl Runner {
    pub fn new(cfg: PipelineConfig) -> Self {
        let hash = cfg.hash();
        let layout = Layout {
            root: cfg.paths.output_dir.clone(),
        };
        Runner { cfg, layout, hash }
    }

    fn manifest(&self, stage: &str, scenario: Option<u8>) -> ManifestBuilder<'_> {
        ManifestBuilder::new(&self.layout.root, stage, scenario, &self.hash)
    }

    /// A configured input file, the generated one, or `None` for bundled data.
    fn input_path(&self, configured: &Option<PathBuf>, file: &str) -> Result<Option<PathBuf>, CliError> {
        match configured {
            Some(p) => {
                if !p.is_file() {
                    return Err(CliError::io(p, std::io::ErrorKind::NotFound.into()));
                }
                Ok(Some(p.clone()))
            }
            None if self.cfg.generator.is_some() => {
                let p = self.layout.data().join(file);
                require(&p, "generate")?;
                Ok(Some(p))
            }
            None => Ok(None),
        }
    }

    fn timeline_paths(&self) -> Result<(PathBuf, PathBuf), CliError> {
        let missing = || CliError::Config(vec!["[paths]: patients and claims are required".into()]);
        let patients = self.input_path(&self.cfg.paths.patients, DATASET_FILES[0])?.ok_or_else(missing)?;
        let claims = self.input_path(&self.cfg.paths.claims, DATASET_FILES[1])?.ok_or_else(missing)?;
        Ok((patients, claims))
    }

    fn resolved_map_path(&self) -> Result<PathBuf, CliError> {
        let p = self.layout.ingest().join("code_map.csv");
        require(&p, "ingest")?;
        Ok(p)
    }

    pub fn generate(&self) -> Result<(), CliError> {
        let gen = self
            .cfg
            .generator_config()
            .ok_or_else(|| CliError::Config(vec!["`generate` needs a [generator] section".into()]))?;
        let dir = self.layout.data();
        make_dir(&dir)?;
        let (timelines, truth) = datagen::generate(&gen)?;
        datagen::write_dataset(&dir, &gen, &timelines, &truth)?;

        let mut m = self.manifest("generate", None).seed("generator", gen.seed);
        for f in DATASET_FILES {
            m.output(&dir.join(f))?;
        }
        m.write(&dir)?;
        println!(
            "generate: {} patients, {} cases, vocabulary {}",
            timelines.len(),
            truth.onset_dates.len(),
            gen.vocabulary_size()
        );
        Ok(())
    }

    pub fn ingest(&self) -> Result<(), CliError> {
        let (patients, claims) = self.timeline_paths()?;
        let map_path = self.input_path(&self.cfg.paths.code_map, DATASET_FILES[3])?;
        let map = match &map_path {
            Some(p) => read_code_map(p)?,
            None => CodeMap::bundled_sample(),
        };
        let timelines = read_timelines(&patients, &claims)?;
        let (_, report) = ingest(timelines, &map);

        let dir = self.layout.ingest();
        make_dir(&dir)?;
        let map_out = dir.join("code_map.csv");
        let report_out = dir.join("ingest_report.json");
        write_file(&map_out, |w| write_code_map(w, &map))?;
        write_file(&report_out, |w| {
            serde_json::to_writer_pretty(&mut *w, &report)?;
            writeln!(w)?;
            Ok(())
        })?;

        let mut m = self.manifest("ingest", None);
        m.input(&patients)?;
        m.input(&claims)?;
        if let Some(p) = &map_path {
            m.input(p)?;
        }
        m.output(&map_out)?;
        m.output(&report_out)?;
        m.write(&dir)?;
        println!(
            "ingest: {} patients, {} records, {} of {} codes mapped",
            report.patients, report.records, report.mapped, report.codes
        );
        Ok(())
    }

    pub fn cohort(&self, s: u8) -> Result<(), CliError> {
        let (patients, claims) = self.timeline_paths()?;
        let map_path = self.resolved_map_path()?;
        let def_path = self.input_path(&self.cfg.paths.case_definition, DATASET_FILES[4])?;
        let map = read_code_map(&map_path)?;
        let def = match &def_path {
            Some(p) => read_case_definition(p)?,
            None => CaseDefinition::bundled_default(),
        };
        let (timelines, _) = ingest(read_timelines(&patients, &claims)?, &map);
        let scfg = self.cfg.scenario_config(s);
        let built = cohort::build_cohort(&timelines, &def, &scfg);

        let dir = self.layout.cohort(s);
        make_dir(&dir)?;
        let files = ["cohort.csv", "cohort_codes.csv", "exclusions.csv", "counts.csv"].map(|f| dir.join(f));
        write_file(&files[0], |w| cohort::write_cohort(w, &built.samples))?;
        write_file(&files[1], |w| cohort::write_cohort_codes(w, &built.samples))?;
        write_file(&files[2], |w| cohort::write_exclusions(w, &built.exclusion_report))?;
        let mut counts = vec![("patients".to_string(), timelines.len())];
        for r in ExclusionReason::ALL {
            counts.push((format!("excluded_{r}"), built.exclusion_report.get(&r).copied().unwrap_or(0)));
        }
        counts.push(("included".into(), built.samples.len()));
        counts.push(("cases".into(), built.cases()));
        counts.push(("controls".into(), built.controls()));
        write_file(&files[3], |w| {
            writeln!(w, "step,count")?;
            for (k, v) in &counts {
                writeln!(w, "{k},{v}")?;
            }
            Ok(())
        })?;

        let mut m = self.manifest("cohort", Some(s)).seed("cohort", scfg.seed);
        m.input(&patients)?;
        m.input(&claims)?;
        m.input(&map_path)?;
        if let Some(p) = &def_path {
            m.input(p)?;
        }
        for f in &files {
            m.output(f)?;
        }
        m.write(&dir)?;

        let excluded: Vec<String> = counts[1..=ExclusionReason::ALL.len()]
            .iter()
            .map(|(k, v)| format!("{} {v}", k.trim_start_matches("excluded_")))
            .collect();
        println!(
            "scenario {s} cohort: {} patients -> {} included ({} cases, {} controls); excluded: {}",
            timelines.len(),
            built.samples.len(),
            built.cases(),
            built.controls(),
            excluded.join(", ")
        );
        Ok(())
    }

    fn cohort_files(&self, s: u8) -> Result<[PathBuf; 2], CliError> {
        let dir = self.layout.cohort(s);
        let files = [dir.join("cohort.csv"), dir.join("cohort_codes.csv")];
        for f in &files {
            require(f, "cohort")?;
        }
        Ok(files)
    }

    pub fn load_cohort(&self, s: u8) -> Result<Vec<CohortSample>, CliError> {
        let [a, b] = self.cohort_files(s)?;
        Ok(cohort::read_cohort(open(&a)?, open(&b)?)?)
    }

    pub fn match_stage(&self, s: u8) -> Result<(), CliError> {
        let inputs = self.cohort_files(s)?;
        let samples = self.load_cohort(s)?;
        let split_cfg = self.cfg.split_config(s);
        let match_cfg = self.cfg.match_config(s);
        let (train, test) = matching::split(&samples, &split_cfg)?;
        let model = matching::fit_propensity(&train)?;
        let scores = matching::score_pool(&model, &train);
        let matched = matching::match_one_to_one(&train, &scores, &match_cfg)?;
        let matched_samples = matched.samples(&train);
        let subset = match match_cfg.subset_per_class {
            Some(n) => Some(matching::subset(&matched_samples, n, match_cfg.seed)?),
            None => None,
        };

        let dir = self.layout.matching(s);
        make_dir(&dir)?;
        let path = |f: &str| dir.join(f);
        let ids = |v: &[CohortSample]| v.iter().map(|x| x.patient_id.clone()).collect::<Vec<_>>();
        let mut outputs = vec![
            path("train_ids.txt"),
            path("test_ids.txt"),
            path("propensity.json"),
            path("matched.csv"),
            path("balance.csv"),
        ];
        write_file(&outputs[0], |w| matching::write_id_list(w, ids(&train)))?;
        write_file(&outputs[1], |w| matching::write_id_list(w, ids(&test)))?;
        write_file(&outputs[2], |w| {
            serde_json::to_writer_pretty(&mut *w, &model)?;
            writeln!(w)?;
            Ok(())
        })?;
        write_file(&outputs[3], |w| matching::write_matched(w, &matched))?;
        write_file(&outputs[4], |w| {
            writeln!(w, "cohort,cases,controls,smd_age,smd_gender")?;
            for (name, set) in [("pool", &train), ("matched", &matched_samples)] {
                let b = balance(set);
                writeln!(w, "{name},{},{},{:.6},{:.6}", b.0, b.1, b.2, b.3)?;
            }
            Ok(())
        })?;
        let subset_path = path("subset_ids.txt");
        match &subset {
            Some(sub) => {
                write_file(&subset_path, |w| matching::write_id_list(w, ids(sub)))?;
                outputs.push(subset_path);
            }
            None => remove_stale(&subset_path)?,
        }

        let mut m = self
            .manifest("match", Some(s))
            .seed("split", split_cfg.seed)
            .seed("match", match_cfg.seed);
        for f in &inputs {
            m.input(f)?;
        }
        for f in &outputs {
            m.output(f)?;
        }
        m.write(&dir)?;
        let b = balance(&matched_samples);
        println!(
            "scenario {s} match: {} train, {} test, {} matched pairs ({} cases unmatched), |SMD age| {:.3}",
            train.len(),
            test.len(),
            matched.pairs.len(),
            matched.unmatched_cases.len(),
            b.2.abs()
        );
        Ok(())
    }

    fn match_files(&self, s: u8) -> Result<Vec<PathBuf>, CliError> {
        let dir = self.layout.matching(s);
        let mut files = vec![dir.join("matched.csv"), dir.join("test_ids.txt")];
        if self.cfg.matching.subset_per_class.is_some() {
            files.push(dir.join("subset_ids.txt"));
        }
        for f in &files {
            require(f, "match")?;
        }
        Ok(files)
    }

    pub fn training_sets(&self, s: u8) -> Result<TrainingSets, CliError> {
        let files = self.match_files(s)?;
        let samples = self.load_cohort(s)?;
        let by_id: HashMap<&str, &CohortSample> = samples.iter().map(|x| (x.patient_id.as_str(), x)).collect();
        let lookup = |ids: Vec<String>| -> Result<Vec<CohortSample>, CliError> {
            ids.iter()
                .map(|id| {
                    by_id.get(id.as_str()).map(|x| (*x).clone()).ok_or_else(|| {
                        CliError::Core(claimgraph::Error::InvalidData(format!(
                            "patient '{id}' is not in the scenario {s} cohort; rerun `claimgraph match`"
                        )))
                    })
                })
                .collect()
        };
        let pairs = matching::read_matched(open(&files[0])?)?;
        let matched = MatchedCohort {
            pairs,
            unmatched_cases: Vec::new(),
            caliper_width: 0.0,
        };
        let matched_ids = matched
            .pairs
            .iter()
            .flat_map(|p| [p.case_patient_id.clone(), p.control_patient_id.clone()])
            .collect();
        let matched = lookup(matched_ids)?;
        let test = lookup(matching::read_id_list(open(&files[1])?)?)?;
        let subset = match files.get(2) {
            Some(f) => {
                let keep: HashSet<String> = matching::read_id_list(open(f)?)?.into_iter().collect();
                Some(matched.iter().filter(|x| keep.contains(&x.patient_id)).cloned().collect())
            }
            None => None,
        };
        Ok(TrainingSets { matched, subset, test })
    }

    fn code_labels(&self) -> Result<(PathBuf, BTreeMap<String, String>), CliError> {
        let p = self.resolved_map_path()?;
        let labels = read_code_map(&p)?.labels().clone();
        Ok((p, labels))
    }

    pub fn train(&self, s: u8, model: ModelKind) -> Result<(), CliError> {
        let sets = self.training_sets(s)?;
        let (map_path, labels) = self.code_labels()?;
        let vocab = Vocabulary::from_samples(&sets.matched, &labels);
        let dir = self.layout.model(s, model);
        make_dir(&dir)?;

        let (seed_name, seed) = match model {
            ModelKind::Vgnn => ("train", self.cfg.train_config(s).seed),
            ModelKind::Rf => ("baseline/forest", self.cfg.forest_config(s).seed),
            ModelKind::Gbm => ("baseline/boosted", self.cfg.boosted_config(s).seed),
        };
        let mut m = self.manifest(&format!("train {}", model.name()), Some(s)).seed(seed_name, seed);
        for f in self.cohort_files(s)?.iter().chain(&self.match_files(s)?) {
            m.input(f)?;
        }
        m.input(&map_path)?;

        let mut timings = Vec::new();
        for regime in REGIMES {
            let out = self.layout.model_file(s, model, regime);
            let Some(set) = sets.regime(regime) else {
                remove_stale(&out)?;
                continue;
            };
            let start = Instant::now();
            match model {
                ModelKind::Vgnn => {
                    let (fitted, history) = gnn::train(set, &vocab, &self.cfg.train_config(s))?;
                    fitted.save(&out)?;
                    let log = dir.join(format!("training_log_{regime}.csv"));
                    write_file(&log, |w| write_training_log(w, &history))?;
                    m.volatile_output(&log);
                }
                ModelKind::Rf => BaselineModel::fit(EnsembleKind::Forest, set, &vocab, &self.cfg.forest_config(s))?.save(&out)?,
                ModelKind::Gbm => BaselineModel::fit(EnsembleKind::Boosted, set, &vocab, &self.cfg.boosted_config(s))?.save(&out)?,
            }
            timings.push((regime, set.len(), start.elapsed().as_secs_f64()));
            m.output(&out)?;
        }
        if model == ModelKind::Vgnn {
            let sidecar = dir.join("vocab.csv");
            write_file(&sidecar, |w| explain::write_vocab_sidecar(w, &vocab))?;
            m.output(&sidecar)?;
        }
        let timing_path = dir.join("timings.csv");
        write_file(&timing_path, |w| {
            writeln!(w, "regime,n_train,seconds")?;
            for (r, n, t) in &timings {
                writeln!(w, "{r},{n},{t:.3}")?;
            }
            Ok(())
        })?;
        m.volatile_output(&timing_path);
        m.write(&dir)?;
        let summary: Vec<String> = timings.iter().map(|(r, n, t)| format!("{r} n={n} {t:.1}s")).collect();
        println!("scenario {s} train {}: {}", model.name(), summary.join(", "));
        Ok(())
    }

    pub fn evaluate(&self) -> Result<Vec<ResultRow>, CliError> {
        let mut rows = Vec::new();
        let mut timing_rows = Vec::new();
        let mut m = self.manifest("evaluate", None);
        for &s in &self.cfg.scenarios {
            let sets = self.training_sets(s)?;
            let labels: Vec<u8> = sets.test.iter().map(|x| x.label).collect();
            for f in self.cohort_files(s)?.iter().chain(&self.match_files(s)?) {
                m.input(f)?;
            }
            for model in ModelKind::ALL {
                for regime in REGIMES {
                    let mut row = ResultRow {
                        scenario: s,
                        model: model.name().into(),
                        regime: regime.into(),
                        auroc: None,
                        n_train: None,
                        n_test: Some(sets.test.len()),
                    };
                    if let Some(set) = sets.regime(regime) {
                        let path = self.layout.model_file(s, model, regime);
                        require(&path, &format!("train {}", model.name()))?;
                        let scores = match model {
                            ModelKind::Vgnn => Vgnn::load(&path)?.predict(&sets.test)?,
                            _ => BaselineModel::load(&path)?.predict(&sets.test),
                        };
                        row.auroc = Some(eval::auroc(&scores, &labels)?);
                        row.n_train = Some(set.len());
                        m.input(&path)?;
                    }
                    rows.push(row);
                }
                timing_rows.extend(read_timings(&self.layout.model(s, model).join("timings.csv"), s, model));
            }
        }

        let root = &self.layout.root;
        make_dir(root)?;
        let results = root.join("results.csv");
        write_file(&results, |w| eval::write_results(w, &rows))?;
        let timings = root.join("timings.csv");
        write_file(&timings, |w| {
            writeln!(w, "scenario,model,regime,n_train,seconds")?;
            for line in &timing_rows {
                writeln!(w, "{line}")?;
            }
            Ok(())
        })?;
        m.output(&results)?;
        m.volatile_output(&timings);
        m.write(root)?;
        print!("{}", eval::render_bars(&rows));
        Ok(rows)
    }

    pub fn explain(&self, s: u8) -> Result<(), CliError> {
        let model_path = self.layout.model_file(s, ModelKind::Vgnn, "matched");
        require(&model_path, "train vgnn")?;
        let model = Vgnn::load(&model_path)?;
        let sets = self.training_sets(s)?;
        let report = explain_cohort(&model.params, &sets.matched, &model.vocab, &self.cfg.explain)?;

        let dir = self.layout.explain(s);
        make_dir(&dir)?;
        let files = ["relations_top.csv", "W.csv", "vocab.csv"].map(|f| dir.join(f));
        write_file(&files[0], |w| explain::write_relations(w, report.rows()))?;
        write_file(&files[1], |w| explain::write_triplets(w, &report.weights))?;
        write_file(&files[2], |w| explain::write_vocab_sidecar(w, &model.vocab))?;

        let mut m = self.manifest("explain", Some(s));
        m.input(&model_path)?;
        for f in self.cohort_files(s)?.iter().chain(&self.match_files(s)?) {
            m.input(f)?;
        }
        for f in &files {
            m.output(f)?;
        }
        m.write(&dir)?;
        match report.top_positive.first() {
            Some(r) => println!(
                "scenario {s} explain: {} cases, {} controls; strongest positive relation {} / {} ({:+.6})",
                report.n_cases, report.n_controls, r.group_a_label, r.group_b_label, r.weight
            ),
            None => println!("scenario {s} explain: no positive relations"),
        }
        Ok(())
    }

    /// Every stage for every configured scenario, then evaluation.
    pub fn run_all(&self) -> Result<Vec<ResultRow>, CliError> {
        if self.cfg.generator.is_some() {
            self.generate()?;
        }
        self.ingest()?;
        for &s in &self.cfg.scenarios {
            self.cohort(s)?;
            self.match_stage(s)?;
            for model in ModelKind::ALL {
                self.train(s, model)?;
            }
            self.explain(s)?;
        }
        self.evaluate()
    }
}

/// `(cases, controls, SMD of age, SMD of the gender indicator)`.
fn balance(samples: &[CohortSample]) -> (usize, usize, f64, f64) {
    let pick = |label: u8, f: &dyn Fn(&CohortSample) -> f64| -> Vec<f64> {
        samples.iter().filter(|x| x.label == label).map(f).collect()
    };
    let age = |x: &CohortSample| x.age_at_index as f64;
    let gender = |x: &CohortSample| x.gender.indicator();
    let (ca, ka) = (pick(1, &age), pick(0, &age));
    let (cg, kg) = (pick(1, &gender), pick(0, &gender));
    let smd = |a: &[f64], b: &[f64]| {
        if a.is_empty() || b.is_empty() {
            f64::NAN
        } else {
            matching::standardized_mean_difference(a, b)
        }
    };
    (ca.len(), ka.len(), smd(&ca, &ka), smd(&cg, &kg))
}

fn read_timings(path: &Path, s: u8, model: ModelKind) -> Vec<String> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines().skip(1).map(|l| format!("{s},{},{l}", model.name())).collect()
}
