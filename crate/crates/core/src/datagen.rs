//! Seeded synthetic claims generator with a planted co-occurrence signal.
//!
//! Each patient draws from its own ChaCha8 stream: the generator seeds one
//! `ChaCha8Rng` from `config.seed` and selects stream `i` for patient index
//! `i`. Patient `i`'s output therefore never depends on how many patients
//! follow it, and parallel generation is byte-identical to sequential.
//!
//! Case status is assigned without randomness: patient `i` is a case when
//! `round((i + 1) * f) > round(i * f)`, which yields exactly
//! `round(n * f)` cases for any prefix length `n`.
//!
//! Planted pairs are patient-level traits. A carrier gets one record holding
//! both groups in every year of history before its anchor, so the pair is
//! visible in the feature window of every scenario. Background visits never
//! place both members of a planted pair in the same record, and a
//! non-carrier's background is barred from one of the two members.
//!
//! Anchor placement does not depend on the label: every patient has at least
//! `min_history_years` of enrollment before the anchor. Controls leave at the
//! anchor; cases have onset there and stay enrolled afterwards.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    self, shift_years, CaseDefinition, ClaimRecord, CodeMap, CodeMapEntry, CodeSystem, Gender,
    MedicalCode, PatientTimeline,
};
use crate::{exec, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPair {
    pub group_a: String,
    pub group_b: String,
    pub p_case: f64,
    pub p_control: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub case_fraction: f64,
    /// Background groups per system: diagnosis, procedure, medication.
    pub groups_per_system: [usize; 3],
    pub raw_codes_per_group: usize,
    pub planted_pairs: Vec<PlantedPair>,
    pub visits_per_year: f64,
    /// Inclusive range of background codes per visit.
    pub codes_per_visit: (usize, usize),
    pub span: (NaiveDate, NaiveDate),
    /// Inclusive range of ages at the patient's anchor date minus three years.
    pub age_range: (i32, i32),
    /// Probability that a background code is replaced with a code no map entry covers.
    #[serde(default)]
    pub unmapped_rate: f64,
    /// Years of enrollment guaranteed before the anchor date.
    #[serde(default = "default_min_history_years")]
    pub min_history_years: i32,
    /// Share of patients enrolled for under 2.5 years.
    #[serde(default)]
    pub short_history_rate: f64,
    /// Share of patients with very infrequent visits.
    #[serde(default)]
    pub sparse_rate: f64,
    pub seed: u64,
}

fn default_min_history_years() -> i32 {
    7
}

const SPARSE_VISITS_PER_YEAR: f64 = 0.2;

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 1000,
            case_fraction: 0.3,
            groups_per_system: [50, 30, 20],
            raw_codes_per_group: 5,
            planted_pairs: vec![PlantedPair {
                group_a: "DX007".into(),
                group_b: "PR004".into(),
                p_case: 0.8,
                p_control: 0.1,
            }],
            visits_per_year: 4.0,
            codes_per_visit: (3, 4),
            span: (
                NaiveDate::from_ymd_opt(2008, 1, 1).unwrap(),
                NaiveDate::from_ymd_opt(2020, 12, 31).unwrap(),
            ),
            age_range: (62, 92),
            unmapped_rate: 0.0,
            min_history_years: default_min_history_years(),
            short_history_rate: 0.05,
            sparse_rate: 0.03,
            seed: 42,
        }
    }
}

/// Minimums the generated data must be able to satisfy for a non-empty cohort.
const MIN_QUALIFYING_MONTHS: f64 = 2.0;
const MIN_CODES_PER_MONTH: usize = 3;
const FEATURE_YEARS: f64 = 3.0;

const SYSTEM_PREFIX: [&str; 3] = ["DX", "PR", "RX"];

impl GeneratorConfig {
    pub fn vocabulary_size(&self) -> usize {
        self.groups_per_system.iter().sum()
    }

    pub fn group_ids(&self) -> Vec<String> {
        let mut ids = Vec::new();
        for (s, &n) in self.groups_per_system.iter().enumerate() {
            for k in 1..=n {
                ids.push(group_id(s, k));
            }
        }
        ids
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_patients == 0 {
            problems.push("n_patients must be positive".to_string());
        }
        if !(self.case_fraction > 0.0 && self.case_fraction < 1.0) {
            problems.push("case_fraction must lie in (0, 1)".to_string());
        }
        if self.groups_per_system.contains(&0) {
            problems.push("every system needs at least one group".to_string());
        }
        if self.vocabulary_size() < 4 {
            problems.push("total vocabulary must be at least 4".to_string());
        }
        if self.raw_codes_per_group == 0 {
            problems.push("raw_codes_per_group must be positive".to_string());
        }
        if !(self.visits_per_year > 0.0 && self.visits_per_year <= 12.0) {
            problems.push("visits_per_year must lie in (0, 12]".to_string());
        }
        if self.codes_per_visit.0 == 0 || self.codes_per_visit.0 > self.codes_per_visit.1 {
            problems.push("codes_per_visit must be a non-empty positive range".to_string());
        }
        if self.span.0 >= self.span.1 {
            problems.push("span start must precede span end".to_string());
        } else {
            let latest_start = self.span.0 + Duration::days((self.span.1 - self.span.0).num_days() * 3 / 10);
            if shift_years(latest_start, self.min_history_years) + Duration::days(60) > self.span.1 {
                problems.push(format!(
                    "span is too short to give every patient {} years of history before the anchor",
                    self.min_history_years
                ));
            }
            if shift_years(self.span.0, 3) > self.span.1 {
                problems.push("span must cover at least three years".to_string());
            }
        }
        if self.min_history_years < 6 {
            problems.push("min_history_years must be at least 6 (longest selection window plus feature window)".to_string());
        }
        for (name, rate) in [("short_history_rate", self.short_history_rate), ("sparse_rate", self.sparse_rate)] {
            if !(0.0..1.0).contains(&rate) {
                problems.push(format!("{name} must lie in [0, 1)"));
            }
        }
        if self.age_range.0 > self.age_range.1 - 3 {
            problems.push("age_range must be at least three years wide".to_string());
        }
        if !(0.0..1.0).contains(&self.unmapped_rate) {
            problems.push("unmapped_rate must lie in [0, 1)".to_string());
        }
        let ids: HashSet<String> = self.group_ids().into_iter().collect();
        for p in &self.planted_pairs {
            for g in [&p.group_a, &p.group_b] {
                if !ids.contains(g) {
                    problems.push(format!("planted group '{g}' is not a generated group"));
                }
            }
            if p.group_a == p.group_b {
                problems.push(format!("planted pair '{}' pairs a group with itself", p.group_a));
            }
            if !(0.0..=1.0).contains(&p.p_case) || !(0.0..=1.0).contains(&p.p_control) {
                problems.push("planted pair probabilities must lie in [0, 1]".to_string());
            }
        }
        // Inclusion minimums: two qualifying months of three mapped codes each.
        if self.visits_per_year * FEATURE_YEARS < MIN_QUALIFYING_MONTHS {
            problems.push(format!(
                "expected visits in a feature window ({:.2}) is below the {} month-level records required",
                self.visits_per_year * FEATURE_YEARS,
                MIN_QUALIFYING_MONTHS
            ));
        }
        if self.codes_per_visit.1 < MIN_CODES_PER_MONTH {
            problems.push(format!(
                "at most {} codes per visit cannot reach the {MIN_CODES_PER_MONTH} codes a qualifying month needs",
                self.codes_per_visit.1
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Code map covering every generated raw code plus the dementia evidence codes.
    pub fn code_map(&self) -> CodeMap {
        let mut entries = Vec::new();
        for (s, &n) in self.groups_per_system.iter().enumerate() {
            for k in 1..=n {
                entries.push(CodeMapEntry {
                    system: CodeSystem::ALL[s],
                    pattern: format!("{}*", raw_prefix(s, k)),
                    group: group_id(s, k),
                    label: group_label(s, k),
                });
            }
        }
        for (pattern, system) in EVIDENCE_PATTERNS {
            entries.push(CodeMapEntry {
                system,
                pattern: pattern.to_string(),
                group: EVIDENCE_GROUP.0.to_string(),
                label: EVIDENCE_GROUP.1.to_string(),
            });
        }
        CodeMap::new(entries).expect("generated code map is valid")
    }
}

const EVIDENCE_GROUP: (&str, &str) = ("DEMENTIA", "Dementia And Related Cognitive Disorders");
const EVIDENCE_PATTERNS: [(&str, CodeSystem); 7] = [
    ("331.0*", CodeSystem::Diagnosis),
    ("G30.*", CodeSystem::Diagnosis),
    ("290.4*", CodeSystem::Diagnosis),
    ("F01.*", CodeSystem::Diagnosis),
    ("62856-245*", CodeSystem::Medication),
    ("0456-3200*", CodeSystem::Medication),
    ("0078-0323*", CodeSystem::Medication),
];
const EVIDENCE_DX: [&str; 5] = ["331.0", "G30.1", "G30.9", "290.40", "F01.50"];
const EVIDENCE_RX: [(&str, &str); 3] = [
    ("62856-245-30", "Donepezil Hydrochloride"),
    ("0456-3200-14", "Namenda"),
    ("0078-0323-44", "Exelon"),
];

fn group_id(system: usize, k: usize) -> String {
    format!("{}{k:03}", SYSTEM_PREFIX[system])
}

fn group_label(system: usize, k: usize) -> String {
    let kind = ["Diagnosis Category", "Procedure Category", "Drug Class"][system];
    format!("{kind} {k:03}")
}

fn raw_prefix(system: usize, k: usize) -> String {
    match system {
        0 => format!("D{k:03}."),
        1 => format!("P{k:03}"),
        _ => format!("M{k:03}-"),
    }
}

fn raw_code(system: usize, k: usize, j: usize) -> MedicalCode {
    let prefix = raw_prefix(system, k);
    match system {
        0 => MedicalCode::new(CodeSystem::Diagnosis, format!("{prefix}{j}")),
        1 => MedicalCode::new(CodeSystem::Procedure, format!("{prefix}{j:02}")),
        _ => MedicalCode::medication(format!("{prefix}{j:04}"), format!("Drug {k:03}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Case,
    Control,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Case => "case",
            Label::Control => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub labels: BTreeMap<String, Label>,
    /// Onset dates for cases only.
    pub onset_dates: BTreeMap<String, NaiveDate>,
    pub planted_pairs: Vec<PlantedPair>,
}

pub fn is_case_index(i: usize, case_fraction: f64) -> bool {
    let r = |x: usize| (x as f64 * case_fraction).round() as usize;
    r(i + 1) > r(i)
}

struct Layout {
    groups: Vec<(usize, usize)>,
    /// Indices into `groups` that must not share a background record.
    exclusive: Vec<(usize, usize)>,
    planted: Vec<((usize, usize), (usize, usize))>,
}

impl Layout {
    fn new(cfg: &GeneratorConfig) -> Self {
        let mut groups = Vec::new();
        for (s, &n) in cfg.groups_per_system.iter().enumerate() {
            for k in 1..=n {
                groups.push((s, k));
            }
        }
        let ids = cfg.group_ids();
        let pos = |g: &str| ids.iter().position(|x| x == g).expect("validated group");
        let exclusive = cfg
            .planted_pairs
            .iter()
            .map(|p| (pos(&p.group_a), pos(&p.group_b)))
            .collect::<Vec<_>>();
        let planted = exclusive.iter().map(|&(a, b)| (groups[a], groups[b])).collect();
        Layout {
            groups,
            exclusive,
            planted,
        }
    }
}

fn uniform_day<R: Rng>(rng: &mut R, from: NaiveDate, to: NaiveDate) -> NaiveDate {
    let span = (to - from).num_days().max(0);
    from + Duration::days(rng.random_range(0..=span))
}

fn month_start(date: NaiveDate) -> NaiveDate {
    NaiveDate::from_ymd_opt(date.year(), date.month(), 1).unwrap()
}

fn next_month(date: NaiveDate) -> NaiveDate {
    if date.month() == 12 {
        NaiveDate::from_ymd_opt(date.year() + 1, 1, 1).unwrap()
    } else {
        NaiveDate::from_ymd_opt(date.year(), date.month() + 1, 1).unwrap()
    }
}

fn draw_background<R: Rng>(rng: &mut R, cfg: &GeneratorConfig, layout: &Layout, banned: &[usize]) -> Vec<MedicalCode> {
    let n = rng.random_range(cfg.codes_per_visit.0..=cfg.codes_per_visit.1);
    let mut picked: Vec<usize> = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n);
    while codes.len() < n {
        let g = rng.random_range(0..layout.groups.len());
        if banned.contains(&g) {
            continue;
        }
        let clashes = layout.exclusive.iter().any(|&(a, b)| {
            (g == a && picked.contains(&b)) || (g == b && picked.contains(&a))
        });
        if clashes {
            continue;
        }
        picked.push(g);
        let (s, k) = layout.groups[g];
        let j = rng.random_range(1..=cfg.raw_codes_per_group);
        if cfg.unmapped_rate > 0.0 && rng.random_bool(cfg.unmapped_rate) {
            codes.push(MedicalCode::new(CodeSystem::Diagnosis, format!("999.{j}")));
        } else {
            codes.push(raw_code(s, k, j));
        }
    }
    codes
}

fn evidence_code<R: Rng>(rng: &mut R) -> MedicalCode {
    if rng.random_bool(0.5) {
        MedicalCode::new(CodeSystem::Diagnosis, EVIDENCE_DX[rng.random_range(0..EVIDENCE_DX.len())])
    } else {
        let (raw, name) = EVIDENCE_RX[rng.random_range(0..EVIDENCE_RX.len())];
        MedicalCode::medication(raw, name)
    }
}

struct Generated {
    timeline: PatientTimeline,
    label: Label,
    onset: Option<NaiveDate>,
}

fn generate_patient(cfg: &GeneratorConfig, layout: &Layout, index: usize) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let is_case = is_case_index(index, cfg.case_fraction);
    let (span_start, span_end) = cfg.span;
    let short = rng.random_bool(cfg.short_history_rate);
    let sparse = rng.random_bool(cfg.sparse_rate);

    // Anchor placement is identical for both classes: controls stop at the
    // anchor, cases have onset there and keep generating records afterwards.
    let (start, anchor) = if short {
        let len = rng.random_range(365..=900);
        let start = uniform_day(&mut rng, span_start, span_end - Duration::days(len + 60));
        (start, start + Duration::days(len))
    } else {
        let span_days = (span_end - span_start).num_days();
        let start = span_start + Duration::days(rng.random_range(0..=span_days * 3 / 10));
        let earliest = shift_years(start, cfg.min_history_years);
        (start, uniform_day(&mut rng, earliest, span_end - Duration::days(60)))
    };
    let (onset, end) = if is_case {
        (Some(anchor), uniform_day(&mut rng, anchor + Duration::days(30), span_end))
    } else {
        (None, anchor)
    };

    let age_at_anchor = rng.random_range(cfg.age_range.0 + 3..=cfg.age_range.1);
    let birth_year = anchor.year() - age_at_anchor;
    let gender = if rng.random_bool(0.5) { Gender::F } else { Gender::M };

    // Non-carriers may show one member of each planted pair in background
    // visits but never both, so the pair appears exactly in carriers.
    let mut carriers = Vec::with_capacity(cfg.planted_pairs.len());
    let mut banned = Vec::new();
    for (pair, &(a, b)) in cfg.planted_pairs.iter().zip(&layout.exclusive) {
        let carrier = rng.random_bool(if is_case { pair.p_case } else { pair.p_control });
        if !carrier {
            banned.push(if rng.random_bool(0.5) { a } else { b });
        }
        carriers.push(carrier);
    }

    let p_visit = if sparse { SPARSE_VISITS_PER_YEAR } else { cfg.visits_per_year } / 12.0;
    let mut records: Vec<ClaimRecord> = Vec::new();
    let mut month = month_start(start);
    while month <= end {
        let last = next_month(month) - Duration::days(1);
        if rng.random_bool(p_visit) {
            let day = uniform_day(&mut rng, month.max(start), last.min(end));
            let mut codes = draw_background(&mut rng, cfg, layout, &banned);
            if let Some(o) = onset {
                if day > o && rng.random_bool(0.5) {
                    codes.push(evidence_code(&mut rng));
                }
            }
            records.push(ClaimRecord { date: day, codes });
        }
        month = next_month(month);
    }
    // Anchoring records: first and last enrollment days always carry a visit.
    records.push(ClaimRecord {
        date: start,
        codes: draw_background(&mut rng, cfg, layout, &banned),
    });
    let mut last_codes = draw_background(&mut rng, cfg, layout, &banned);
    if onset.is_some() {
        last_codes.push(evidence_code(&mut rng));
    }
    records.push(ClaimRecord { date: end, codes: last_codes });
    if let Some(o) = onset {
        let mut codes = draw_background(&mut rng, cfg, layout, &banned);
        codes.push(evidence_code(&mut rng));
        records.push(ClaimRecord { date: o, codes });
    }

    for (&carrier, &((sa, ka), (sb, kb))) in carriers.iter().zip(&layout.planted) {
        if !carrier {
            continue;
        }
        // One co-occurrence per year of history, strictly before the anchor.
        let mut years = 0;
        loop {
            let hi = shift_years(anchor, -years) - Duration::days(1);
            let lo = shift_years(anchor, -(years + 1)).max(start);
            if hi < lo {
                break;
            }
            let day = uniform_day(&mut rng, lo, hi);
            let ja = rng.random_range(1..=cfg.raw_codes_per_group);
            let jb = rng.random_range(1..=cfg.raw_codes_per_group);
            records.push(ClaimRecord {
                date: day,
                codes: vec![raw_code(sa, ka, ja), raw_code(sb, kb, jb)],
            });
            years += 1;
        }
    }

    // Merge same-day records so the in-memory timeline equals its CSV round trip.
    records.sort_by_key(|r| r.date);
    let mut merged: Vec<ClaimRecord> = Vec::with_capacity(records.len());
    for r in records {
        match merged.last_mut() {
            Some(m) if m.date == r.date => m.codes.extend(r.codes),
            _ => merged.push(r),
        }
    }

    Generated {
        timeline: PatientTimeline {
            patient_id: format!("P{:06}", index + 1),
            birth_year,
            gender,
            records: merged,
        },
        label: if is_case { Label::Case } else { Label::Control },
        onset,
    }
}

pub fn generate(cfg: &GeneratorConfig) -> Result<(Vec<PatientTimeline>, GroundTruth)> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let generated = exec::map_range(cfg.n_patients, |i| generate_patient(cfg, &layout, i));
    let mut truth = GroundTruth {
        labels: BTreeMap::new(),
        onset_dates: BTreeMap::new(),
        planted_pairs: cfg.planted_pairs.clone(),
    };
    let mut timelines = Vec::with_capacity(generated.len());
    for g in generated {
        truth.labels.insert(g.timeline.patient_id.clone(), g.label);
        if let Some(o) = g.onset {
            truth.onset_dates.insert(g.timeline.patient_id.clone(), o);
        }
        timelines.push(g.timeline);
    }
    Ok((timelines, truth))
}

pub fn write_ground_truth<W: Write>(dst: W, timelines: &[PatientTimeline], truth: &GroundTruth) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(["patient_id", "label", "onset_date"])?;
    for t in timelines {
        let id = t.patient_id.as_str();
        let label = truth.labels.get(id).copied().unwrap_or(Label::Control);
        let onset = truth
            .onset_dates
            .get(id)
            .map(|d| d.format("%Y-%m-%d").to_string())
            .unwrap_or_default();
        w.write_record([id, label.as_str(), &onset])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<BTreeMap<String, (Label, Option<NaiveDate>)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let label = match &rec[1] {
            "case" => Label::Case,
            "control" => Label::Control,
            other => return Err(Error::InvalidData(format!("unknown label '{other}'"))),
        };
        let onset = if rec[2].is_empty() {
            None
        } else {
            Some(domain::io::parse_date(&rec[2]).map_err(Error::InvalidData)?)
        };
        out.insert(rec[0].to_string(), (label, onset));
    }
    Ok(out)
}

/// File names written by [`write_dataset`].
pub const DATASET_FILES: [&str; 5] = [
    "patients.csv",
    "claims.csv",
    "ground_truth.csv",
    "code_map.csv",
    "case_definition.csv",
];

/// Writes patients, claims, ground truth, the matching code map and the
/// bundled case definition into `dir`.
pub fn write_dataset(dir: &Path, cfg: &GeneratorConfig, timelines: &[PatientTimeline], truth: &GroundTruth) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let create = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
    domain::io::write_patients(create(DATASET_FILES[0])?, timelines)?;
    domain::io::write_claims(create(DATASET_FILES[1])?, timelines)?;
    write_ground_truth(create(DATASET_FILES[2])?, timelines, truth)?;
    domain::io::write_code_map(create(DATASET_FILES[3])?, &cfg.code_map())?;
    domain::io::write_case_definition(create(DATASET_FILES[4])?, &CaseDefinition::bundled_default())?;
    Ok(())
}
