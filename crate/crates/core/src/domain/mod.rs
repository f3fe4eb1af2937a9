//! Patients, claims, code grouping and the case definition.

pub mod io;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::{Months, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Calendar shift by whole years; Feb 29 clamps to Feb 28.
pub fn shift_years(date: NaiveDate, years: i32) -> NaiveDate {
    let months = Months::new(12 * years.unsigned_abs());
    let shifted = if years >= 0 {
        date.checked_add_months(months)
    } else {
        date.checked_sub_months(months)
    };
    shifted.expect("date shift within chrono range")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CodeSystem {
    Diagnosis,
    Procedure,
    Medication,
}

impl CodeSystem {
    pub const ALL: [CodeSystem; 3] = [
        CodeSystem::Diagnosis,
        CodeSystem::Procedure,
        CodeSystem::Medication,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CodeSystem::Diagnosis => "Diagnosis",
            CodeSystem::Procedure => "Procedure",
            CodeSystem::Medication => "Medication",
        }
    }
}

impl fmt::Display for CodeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodeSystem {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "diagnosis" | "dx" => Ok(CodeSystem::Diagnosis),
            "procedure" | "px" => Ok(CodeSystem::Procedure),
            "medication" | "rx" => Ok(CodeSystem::Medication),
            other => Err(format!("unknown code system '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl Gender {
    /// Single indicator used as a model covariate: 1 for male, 0 for female.
    pub fn indicator(self) -> f64 {
        match self {
            Gender::F => 0.0,
            Gender::M => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::F => "F",
            Gender::M => "M",
        }
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "F" | "f" => Ok(Gender::F),
            "M" | "m" => Ok(Gender::M),
            other => Err(format!("unknown gender '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MedicalCode {
    pub system: CodeSystem,
    pub raw: String,
    /// Drug name carried by pharmacy claims; `None` for other systems.
    pub drug_name: Option<String>,
    /// Group id assigned by [`CodeMap::map_code`]; `None` until mapped or when unmapped.
    pub group: Option<String>,
}

impl MedicalCode {
    pub fn new(system: CodeSystem, raw: impl Into<String>) -> Self {
        MedicalCode {
            system,
            raw: raw.into(),
            drug_name: None,
            group: None,
        }
    }

    pub fn medication(raw: impl Into<String>, drug_name: impl Into<String>) -> Self {
        MedicalCode {
            system: CodeSystem::Medication,
            raw: raw.into(),
            drug_name: Some(drug_name.into()),
            group: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimRecord {
    pub date: NaiveDate,
    pub codes: Vec<MedicalCode>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientTimeline {
    pub patient_id: String,
    pub birth_year: i32,
    pub gender: Gender,
    /// Sorted ascending by date; several records may share a date.
    pub records: Vec<ClaimRecord>,
}

impl PatientTimeline {
    pub fn first_date(&self) -> Option<NaiveDate> {
        self.records.first().map(|r| r.date)
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.records.last().map(|r| r.date)
    }

    pub fn is_sorted(&self) -> bool {
        self.records.windows(2).all(|w| w[0].date <= w[1].date)
    }
}

/// A code pattern: an exact code, or a prefix followed by a single trailing `*`
/// that matches any suffix including the empty one.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodePattern {
    prefix: String,
    wildcard: bool,
}

impl CodePattern {
    pub fn parse(pattern: &str) -> Result<Self> {
        let pattern = pattern.trim();
        let stars = pattern.matches('*').count();
        if stars > 1 || (stars == 1 && !pattern.ends_with('*')) {
            return Err(Error::InvalidData(format!(
                "pattern '{pattern}' may only contain a single trailing '*'"
            )));
        }
        if pattern.is_empty() {
            return Err(Error::InvalidData("empty code pattern".into()));
        }
        let wildcard = stars == 1;
        let prefix = pattern.trim_end_matches('*').to_string();
        Ok(CodePattern { prefix, wildcard })
    }

    pub fn matches(&self, raw: &str) -> bool {
        if self.wildcard {
            raw.starts_with(&self.prefix)
        } else {
            raw == self.prefix
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn is_wildcard(&self) -> bool {
        self.wildcard
    }
}

impl fmt::Display for CodePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.prefix, if self.wildcard { "*" } else { "" })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeMapEntry {
    pub system: CodeSystem,
    pub pattern: String,
    pub group: String,
    pub label: String,
}

#[derive(Debug, Default, Clone)]
struct SystemIndex {
    exact: HashMap<String, usize>,
    prefix: HashMap<String, usize>,
}

/// Prefix-pattern code grouper (CCS/AHFS style).
///
/// Lookup returns the group of the longest matching pattern for the code's
/// system. At equal length an exact pattern beats a wildcard one.
#[derive(Debug, Clone)]
pub struct CodeMap {
    entries: Vec<CodeMapEntry>,
    labels: BTreeMap<String, String>,
    index: HashMap<CodeSystem, SystemIndex>,
}

impl CodeMap {
    pub fn new(entries: Vec<CodeMapEntry>) -> Result<Self> {
        let mut labels: BTreeMap<String, String> = BTreeMap::new();
        let mut index: HashMap<CodeSystem, SystemIndex> = HashMap::new();
        let mut problems = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            let pattern = match CodePattern::parse(&e.pattern) {
                Ok(p) => p,
                Err(err) => {
                    problems.push(err.to_string());
                    continue;
                }
            };
            match labels.get(&e.group) {
                Some(l) if l != &e.label => problems.push(format!(
                    "group '{}' has two labels: '{}' and '{}'",
                    e.group, l, e.label
                )),
                Some(_) => {}
                None => {
                    labels.insert(e.group.clone(), e.label.clone());
                }
            }
            let sys = index.entry(e.system).or_default();
            let slot = if pattern.is_wildcard() {
                &mut sys.prefix
            } else {
                &mut sys.exact
            };
            if slot.insert(pattern.prefix().to_string(), i).is_some() {
                problems.push(format!(
                    "duplicate pattern '{}' for system {}",
                    e.pattern, e.system
                ));
            }
        }
        if !problems.is_empty() {
            return Err(Error::InvalidData(format!(
                "invalid code map: {}",
                problems.join("; ")
            )));
        }
        Ok(CodeMap {
            entries,
            labels,
            index,
        })
    }

    pub fn entries(&self) -> &[CodeMapEntry] {
        &self.entries
    }

    /// Group id to human-readable label.
    pub fn labels(&self) -> &BTreeMap<String, String> {
        &self.labels
    }

    pub fn label(&self, group: &str) -> Option<&str> {
        self.labels.get(group).map(String::as_str)
    }

    /// Group id for `(system, raw)`, or `None` when no pattern matches.
    pub fn lookup(&self, system: CodeSystem, raw: &str) -> Option<&str> {
        let sys = self.index.get(&system)?;
        if let Some(&i) = sys.exact.get(raw) {
            return Some(&self.entries[i].group);
        }
        // Walk prefixes from longest to shortest, including the empty prefix.
        let mut ends: Vec<usize> = raw.char_indices().map(|(i, _)| i).collect();
        ends.push(raw.len());
        for &end in ends.iter().rev() {
            if let Some(&i) = sys.prefix.get(&raw[..end]) {
                return Some(&self.entries[i].group);
            }
        }
        None
    }

    /// Returns a copy of `code` with its group populated, or `None` when unmapped.
    pub fn map_code(&self, code: &MedicalCode) -> Option<MedicalCode> {
        self.lookup(code.system, &code.raw).map(|g| MedicalCode {
            group: Some(g.to_string()),
            ..code.clone()
        })
    }

    /// The small bundled sample map (a handful of CCS/AHFS-like categories).
    pub fn bundled_sample() -> Self {
        io::read_code_map_from(
            "bundled sample_code_map.csv",
            include_str!("../../data/sample_code_map.csv").as_bytes(),
        )
        .expect("bundled code map is valid")
    }

    /// Merges two maps; fails if the union violates map invariants.
    pub fn merged(&self, other: &CodeMap) -> Result<CodeMap> {
        let mut entries = self.entries.clone();
        entries.extend(other.entries.iter().cloned());
        CodeMap::new(entries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseDefinition {
    diagnosis_patterns: Vec<CodePattern>,
    medication_names: Vec<String>,
}

impl CaseDefinition {
    pub fn new(diagnosis_patterns: &[&str], medication_names: &[&str]) -> Result<Self> {
        Self::from_strings(
            diagnosis_patterns.iter().map(|s| s.to_string()).collect(),
            medication_names.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn from_strings(diagnosis_patterns: Vec<String>, medication_names: Vec<String>) -> Result<Self> {
        if diagnosis_patterns.is_empty() || medication_names.is_empty() {
            return Err(Error::InvalidData(
                "case definition needs at least one diagnosis pattern and one medication name".into(),
            ));
        }
        let diagnosis_patterns = diagnosis_patterns
            .iter()
            .map(|p| CodePattern::parse(p))
            .collect::<Result<Vec<_>>>()?;
        let medication_names = medication_names
            .into_iter()
            .map(|m| m.trim().to_lowercase())
            .filter(|m| !m.is_empty())
            .collect::<Vec<_>>();
        if medication_names.is_empty() {
            return Err(Error::InvalidData("medication names are all blank".into()));
        }
        Ok(CaseDefinition {
            diagnosis_patterns,
            medication_names,
        })
    }

    /// Dementia diagnosis families and medications used as the default case definition.
    pub fn bundled_default() -> Self {
        io::read_case_definition_from(
            "bundled default_case_definition.csv",
            include_str!("../../data/default_case_definition.csv").as_bytes(),
        )
        .expect("bundled case definition is valid")
    }

    pub fn diagnosis_patterns(&self) -> &[CodePattern] {
        &self.diagnosis_patterns
    }

    pub fn medication_names(&self) -> &[String] {
        &self.medication_names
    }

    pub fn code_is_evidence(&self, code: &MedicalCode) -> bool {
        match code.system {
            CodeSystem::Diagnosis => self.diagnosis_patterns.iter().any(|p| p.matches(&code.raw)),
            CodeSystem::Medication => {
                let raw = code.raw.to_lowercase();
                let name = code.drug_name.as_deref().map(str::to_lowercase);
                self.medication_names.iter().any(|m| {
                    raw == *m || name.as_deref().is_some_and(|n| n.contains(m.as_str()))
                })
            }
            CodeSystem::Procedure => false,
        }
    }

    pub fn is_case_evidence(&self, record: &ClaimRecord) -> bool {
        record.codes.iter().any(|c| self.code_is_evidence(c))
    }

    /// Earliest date carrying case evidence. Assumes sorted records.
    pub fn first_case_date(&self, timeline: &PatientTimeline) -> Option<NaiveDate> {
        timeline
            .records
            .iter()
            .find(|r| self.is_case_evidence(r))
            .map(|r| r.date)
    }
}

/// Counts gathered while mapping raw codes to groups.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub patients: usize,
    pub records: usize,
    pub codes: usize,
    pub mapped: usize,
    pub unmapped: usize,
    pub unmapped_by_system: BTreeMap<String, usize>,
}

/// Maps every code of every timeline. Unmapped codes stay in the timeline with
/// `group = None` so case evidence can still be detected on raw codes, but
/// they never reach model input.
pub fn ingest(timelines: Vec<PatientTimeline>, map: &CodeMap) -> (Vec<PatientTimeline>, IngestReport) {
    let mut report = IngestReport {
        patients: timelines.len(),
        ..Default::default()
    };
    let mapped: Vec<PatientTimeline> = timelines
        .into_iter()
        .map(|mut t| {
            report.records += t.records.len();
            for rec in &mut t.records {
                for code in &mut rec.codes {
                    report.codes += 1;
                    code.group = map.lookup(code.system, &code.raw).map(str::to_string);
                    if code.group.is_some() {
                        report.mapped += 1;
                    } else {
                        report.unmapped += 1;
                        *report
                            .unmapped_by_system
                            .entry(code.system.to_string())
                            .or_default() += 1;
                    }
                }
            }
            t
        })
        .collect();
    (mapped, report)
}
