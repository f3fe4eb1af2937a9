//! Scenario windows, inclusion criteria and labeled sample construction.
//!
//! For each patient the anchor is the first case-evidence date (cases) or the
//! last record date (controls). The index date is drawn uniformly from the
//! `selection_years` before the anchor; the feature window is the closed
//! interval `[index - feature_years, index]` and the prediction window is
//! `(index, index + prediction_years]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{shift_years, CaseDefinition, Gender, PatientTimeline};
use crate::{exec, seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario_id: u8,
    pub selection_years: i32,
    pub prediction_years: i32,
    pub feature_years: i32,
    pub min_age_at_index: i32,
    pub min_record_span_years: i32,
    pub min_qualifying_months: usize,
    pub min_codes_per_month: usize,
    /// Stricter reading of the monthly criterion: every month with mapped
    /// codes in the feature window must reach `min_codes_per_month`.
    pub require_all_months: bool,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn new(scenario_id: u8, seed: u64) -> Self {
        let years = scenario_id as i32;
        ScenarioConfig {
            scenario_id,
            selection_years: years,
            prediction_years: years,
            feature_years: 3,
            min_age_at_index: 65,
            min_record_span_years: 3,
            min_qualifying_months: 2,
            min_codes_per_month: 3,
            require_all_months: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(1..=3).contains(&self.scenario_id) {
            problems.push(format!("scenario_id {} not in 1..=3", self.scenario_id));
        }
        if self.selection_years != self.scenario_id as i32 || self.prediction_years != self.scenario_id as i32 {
            problems.push("selection and prediction windows must equal the scenario id in years".into());
        }
        if self.feature_years <= 0
            || self.min_age_at_index <= 0
            || self.min_record_span_years <= 0
            || self.min_qualifying_months == 0
            || self.min_codes_per_month == 0
        {
            problems.push("window lengths and inclusion minima must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExclusionReason {
    NoRecords,
    UnderAge,
    ShortHistory,
    InsufficientMonths,
}

impl ExclusionReason {
    pub const ALL: [ExclusionReason; 4] = [
        ExclusionReason::NoRecords,
        ExclusionReason::UnderAge,
        ExclusionReason::ShortHistory,
        ExclusionReason::InsufficientMonths,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExclusionReason::NoRecords => "no_records",
            ExclusionReason::UnderAge => "under_age",
            ExclusionReason::ShortHistory => "short_history",
            ExclusionReason::InsufficientMonths => "insufficient_months",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExclusionReason {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ExclusionReason::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown exclusion reason '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSample {
    pub patient_id: String,
    pub index_date: NaiveDate,
    /// 1 for case, 0 for control.
    pub label: u8,
    pub age_at_index: i32,
    pub gender: Gender,
    /// Mapped group id to occurrence count over the feature window.
    pub grouped_codes: BTreeMap<String, u32>,
    pub qualifying_month_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub scenario: ScenarioConfig,
    pub samples: Vec<CohortSample>,
    pub exclusion_report: BTreeMap<ExclusionReason, usize>,
}

impl Cohort {
    pub fn cases(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    pub fn controls(&self) -> usize {
        self.samples.len() - self.cases()
    }

    pub fn excluded(&self) -> usize {
        self.exclusion_report.values().sum()
    }
}

/// `(first case date, 1)` when evidence exists, otherwise `(last record date, 0)`.
pub fn anchor_date(timeline: &PatientTimeline, def: &CaseDefinition) -> std::result::Result<(NaiveDate, u8), ExclusionReason> {
    let last = timeline.last_date().ok_or(ExclusionReason::NoRecords)?;
    Ok(match def.first_case_date(timeline) {
        Some(d) => (d, 1),
        None => (last, 0),
    })
}

/// Uniform day in the closed interval `[from, to]`.
pub fn draw_day<R: Rng>(from: NaiveDate, to: NaiveDate, rng: &mut R) -> NaiveDate {
    let days = (to - from).num_days();
    assert!(days >= 0, "empty day interval");
    from + Duration::days(rng.random_range(0..=days))
}

/// Uniform day in `[anchor - selection_years, anchor - 1 day]`.
pub fn draw_index_date<R: Rng>(anchor: NaiveDate, selection_years: i32, rng: &mut R) -> NaiveDate {
    assert!(selection_years >= 1);
    draw_day(shift_years(anchor, -selection_years), anchor - Duration::days(1), rng)
}

pub fn feature_window(index: NaiveDate, cfg: &ScenarioConfig) -> (NaiveDate, NaiveDate) {
    (shift_years(index, -cfg.feature_years), index)
}

/// Per-patient index-date stream, keyed by patient id so results do not
/// depend on iteration order.
pub fn patient_rng(cfg: &ScenarioConfig, patient_id: &str) -> rand_chacha::ChaCha8Rng {
    seed::rng_for(cfg.seed, &format!("index-date/{patient_id}"))
}

/// Applies the inclusion criteria in order: age, record span, monthly
/// activity; then labels the sample from the anchor.
pub fn build_sample<R: Rng>(
    timeline: &PatientTimeline,
    def: &CaseDefinition,
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> std::result::Result<CohortSample, ExclusionReason> {
    let (anchor, label) = anchor_date(timeline, def)?;
    let index = draw_index_date(anchor, cfg.selection_years, rng);

    let age = index.year() - timeline.birth_year;
    if age < cfg.min_age_at_index {
        return Err(ExclusionReason::UnderAge);
    }

    let (first, last) = (timeline.first_date().unwrap(), timeline.last_date().unwrap());
    if shift_years(first, cfg.min_record_span_years) > last {
        return Err(ExclusionReason::ShortHistory);
    }

    let (from, to) = feature_window(index, cfg);
    let mut per_month: BTreeMap<(i32, u32), usize> = BTreeMap::new();
    let mut grouped: BTreeMap<String, u32> = BTreeMap::new();
    for rec in timeline.records.iter().filter(|r| r.date >= from && r.date <= to) {
        for group in rec.codes.iter().filter_map(|c| c.group.as_ref()) {
            *per_month.entry((rec.date.year(), rec.date.month())).or_default() += 1;
            *grouped.entry(group.clone()).or_default() += 1;
        }
    }
    let qualifying = per_month.values().filter(|&&n| n >= cfg.min_codes_per_month).count();
    let all_ok = !cfg.require_all_months || qualifying == per_month.len();
    if qualifying < cfg.min_qualifying_months || !all_ok {
        return Err(ExclusionReason::InsufficientMonths);
    }

    Ok(CohortSample {
        patient_id: timeline.patient_id.clone(),
        index_date: index,
        label,
        age_at_index: age,
        gender: timeline.gender,
        grouped_codes: grouped,
        qualifying_month_count: qualifying,
    })
}

pub fn build_cohort(timelines: &[PatientTimeline], def: &CaseDefinition, cfg: &ScenarioConfig) -> Cohort {
    let results = exec::map(timelines, |t| {
        let mut rng = patient_rng(cfg, &t.patient_id);
        build_sample(t, def, cfg, &mut rng)
    });
    let mut samples = Vec::new();
    let mut exclusion_report = BTreeMap::new();
    for r in results {
        match r {
            Ok(s) => samples.push(s),
            Err(reason) => *exclusion_report.entry(reason).or_default() += 1,
        }
    }
    debug_assert_eq!(
        samples.iter().map(|s| &s.patient_id).collect::<BTreeSet<_>>().len(),
        samples.len()
    );
    Cohort {
        scenario: cfg.clone(),
        samples,
        exclusion_report,
    }
}

pub const COHORT_HEADER: [&str; 6] = ["patient_id", "index_date", "label", "age_at_index", "gender", "qualifying_months"];
pub const COHORT_CODES_HEADER: [&str; 3] = ["patient_id", "group", "count"];

pub fn write_cohort<W: Write>(dst: W, samples: &[CohortSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(COHORT_HEADER)?;
    for s in samples {
        w.write_record([
            s.patient_id.as_str(),
            &s.index_date.format("%Y-%m-%d").to_string(),
            &s.label.to_string(),
            &s.age_at_index.to_string(),
            s.gender.as_str(),
            &s.qualifying_month_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cohort_codes<W: Write>(dst: W, samples: &[CohortSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(COHORT_CODES_HEADER)?;
    for s in samples {
        for (g, c) in &s.grouped_codes {
            w.write_record([s.patient_id.as_str(), g, &c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_exclusions<W: Write>(dst: W, report: &BTreeMap<ExclusionReason, usize>) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(["reason", "count"])?;
    for (r, c) in report {
        w.write_record([r.as_str(), &c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_exclusions<R: Read>(src: R) -> Result<BTreeMap<ExclusionReason, usize>> {
    let mut rdr = csv::Reader::from_reader(src);
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let reason: ExclusionReason = rec[0].parse().map_err(Error::InvalidData)?;
        let count = rec[1].parse().map_err(|e| Error::InvalidData(format!("bad count: {e}")))?;
        out.insert(reason, count);
    }
    Ok(out)
}

/// Reads `cohort.csv` and `cohort_codes.csv` back into samples.
pub fn read_cohort<A: Read, B: Read>(cohort: A, codes: B) -> Result<Vec<CohortSample>> {
    let bad = |what: &str, e: &dyn fmt::Display| Error::InvalidData(format!("cohort file: bad {what}: {e}"));
    let mut rdr = csv::Reader::from_reader(cohort);
    let mut samples = Vec::new();
    let mut pos = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let sample = CohortSample {
            patient_id: rec[0].to_string(),
            index_date: crate::domain::io::parse_date(&rec[1]).map_err(|e| bad("index_date", &e))?,
            label: rec[2].parse().map_err(|e| bad("label", &e))?,
            age_at_index: rec[3].parse().map_err(|e| bad("age", &e))?,
            gender: rec[4].parse().map_err(|e: String| bad("gender", &e))?,
            grouped_codes: BTreeMap::new(),
            qualifying_month_count: rec[5].parse().map_err(|e| bad("qualifying_months", &e))?,
        };
        pos.insert(sample.patient_id.clone(), samples.len());
        samples.push(sample);
    }
    let mut rdr = csv::Reader::from_reader(codes);
    for rec in rdr.records() {
        let rec = rec?;
        let i = *pos
            .get(&rec[0])
            .ok_or_else(|| Error::InvalidData(format!("codes for unknown cohort patient '{}'", &rec[0])))?;
        let count: u32 = rec[2].parse().map_err(|e| bad("count", &e))?;
        samples[i].grouped_codes.insert(rec[1].to_string(), count);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClaimRecord, CodeSystem, MedicalCode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn mapped(group: &str) -> MedicalCode {
        MedicalCode {
            group: Some(group.into()),
            ..MedicalCode::new(CodeSystem::Procedure, "x")
        }
    }

    fn evidence() -> MedicalCode {
        MedicalCode {
            group: Some("DEMENTIA".into()),
            ..MedicalCode::new(CodeSystem::Diagnosis, "331.0")
        }
    }

    fn rec(date: &str, codes: Vec<MedicalCode>) -> ClaimRecord {
        ClaimRecord { date: d(date), codes }
    }

    fn three(g: &str) -> Vec<MedicalCode> {
        vec![mapped(g), mapped(g), mapped(g)]
    }

    fn timeline(birth_year: i32, records: Vec<ClaimRecord>) -> PatientTimeline {
        PatientTimeline {
            patient_id: "p1".into(),
            birth_year,
            gender: Gender::F,
            records,
        }
    }

    #[test]
    fn anchor_examples() {
        let def = CaseDefinition::bundled_default();
        let t = timeline(1940, vec![rec("2014-01-01", three("A")), rec("2015-06-01", vec![evidence()]), rec("2016-01-01", three("A"))]);
        assert_eq!(anchor_date(&t, &def), Ok((d("2015-06-01"), 1)));
        let c = timeline(1940, vec![rec("2014-01-01", three("A")), rec("2018-03-15", three("A"))]);
        assert_eq!(anchor_date(&c, &def), Ok((d("2018-03-15"), 0)));
        let last = timeline(1940, vec![rec("2014-01-01", three("A")), rec("2018-03-15", vec![evidence()])]);
        assert_eq!(anchor_date(&last, &def), Ok((d("2018-03-15"), 1)));
        assert_eq!(anchor_date(&timeline(1940, vec![]), &def), Err(ExclusionReason::NoRecords));
    }

    #[test]
    fn index_date_bounds_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let i = draw_index_date(d("2016-01-01"), 1, &mut rng);
            assert!(i >= d("2015-01-01") && i <= d("2015-12-31"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(draw_day(d("2015-03-03"), d("2015-03-03"), &mut rng), d("2015-03-03"));
        let cfg = ScenarioConfig::new(2, 9);
        let a = draw_index_date(d("2016-01-01"), 2, &mut patient_rng(&cfg, "p"));
        let b = draw_index_date(d("2016-01-01"), 2, &mut patient_rng(&cfg, "p"));
        assert_eq!(a, b);
    }

    #[test]
    fn under_age_is_excluded() {
        let def = CaseDefinition::bundled_default();
        let cfg = ScenarioConfig::new(1, 0);
        // control anchored 2018-06-01, index year 2017 or 2018; born 1957 gives age 60 or 61
        let t = timeline(1957, vec![rec("2010-01-01", three("A")), rec("2017-02-01", three("A")), rec("2017-05-01", three("A")), rec("2018-06-01", three("A"))]);
        let r = build_sample(&t, &def, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(r, Err(ExclusionReason::UnderAge));
    }

    #[test]
    fn short_history_is_excluded() {
        let def = CaseDefinition::bundled_default();
        let cfg = ScenarioConfig::new(1, 0);
        let t = timeline(1930, vec![rec("2016-01-01", three("A")), rec("2016-05-01", three("A")), rec("2018-06-01", three("A"))]);
        let r = build_sample(&t, &def, &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(r, Err(ExclusionReason::ShortHistory));
    }

    #[test]
    fn monthly_minimums() {
        let def = CaseDefinition::bundled_default();
        let cfg = ScenarioConfig::new(1, 0);
        // Index date falls in 2017-06-01..=2018-05-31; feature window covers 2015-06 onward.
        let one_month = timeline(1930, vec![rec("2010-01-01", three("A")), rec("2016-03-01", three("A")), rec("2018-06-01", vec![mapped("B")])]);
        assert_eq!(
            build_sample(&one_month, &def, &cfg, &mut ChaCha8Rng::seed_from_u64(3)),
            Err(ExclusionReason::InsufficientMonths)
        );

        let two_months = timeline(
            1930,
            vec![
                rec("2010-01-01", three("A")),
                rec("2016-03-01", vec![mapped("A"), mapped("B")]),
                rec("2016-03-20", vec![mapped("C")]),
                rec("2016-08-01", three("B")),
                rec("2016-09-01", vec![mapped("D")]),
                rec("2018-06-01", vec![mapped("B")]),
            ],
        );
        let s = build_sample(&two_months, &def, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(s.qualifying_month_count, 2);
        assert_eq!(s.label, 0);
        // non-qualifying month codes still feed the model
        assert_eq!(s.grouped_codes.get("D"), Some(&1));
        assert_eq!(s.grouped_codes.get("B"), Some(&4));

        let strict = ScenarioConfig {
            require_all_months: true,
            ..cfg.clone()
        };
        assert_eq!(
            build_sample(&two_months, &def, &strict, &mut ChaCha8Rng::seed_from_u64(3)),
            Err(ExclusionReason::InsufficientMonths)
        );
    }

    #[test]
    fn unmapped_codes_do_not_count() {
        let def = CaseDefinition::bundled_default();
        let cfg = ScenarioConfig::new(1, 0);
        let raw = || MedicalCode::new(CodeSystem::Diagnosis, "999.1");
        let t = timeline(
            1930,
            vec![
                rec("2010-01-01", three("A")),
                rec("2016-03-01", vec![mapped("A"), mapped("B"), raw()]),
                rec("2016-08-01", vec![mapped("A"), mapped("B"), raw()]),
                rec("2018-06-01", vec![mapped("B")]),
            ],
        );
        assert_eq!(
            build_sample(&t, &def, &cfg, &mut ChaCha8Rng::seed_from_u64(3)),
            Err(ExclusionReason::InsufficientMonths)
        );
    }

    #[test]
    fn case_sample_windows() {
        let def = CaseDefinition::bundled_default();
        for scenario in 1..=3u8 {
            let cfg = ScenarioConfig::new(scenario, 11);
            let mut records = vec![];
            for y in 2008..2016 {
                for m in [2, 7, 11] {
                    records.push(rec(&format!("{y}-{m:02}-10"), three("A")));
                }
            }
            records.push(rec("2016-04-04", vec![evidence()]));
            records.push(rec("2017-01-01", three("A")));
            let t = timeline(1930, records);
            for k in 0..20 {
                let s = build_sample(&t, &def, &cfg, &mut ChaCha8Rng::seed_from_u64(k)).unwrap();
                assert_eq!(s.label, 1);
                let onset = d("2016-04-04");
                assert!(s.index_date < onset);
                assert!(onset <= shift_years(s.index_date, cfg.prediction_years));
                assert!(!s.grouped_codes.contains_key("DEMENTIA"));
            }
        }
    }

    #[test]
    fn empty_and_all_excluded_cohorts() {
        let def = CaseDefinition::bundled_default();
        let cfg = ScenarioConfig::new(1, 0);
        let c = build_cohort(&[], &def, &cfg);
        assert!(c.samples.is_empty() && c.exclusion_report.is_empty());
        let young: Vec<_> = (0..5)
            .map(|i| PatientTimeline {
                patient_id: format!("y{i}"),
                ..timeline(2000, vec![rec("2010-01-01", three("A")), rec("2018-06-01", three("A"))])
            })
            .collect();
        let c = build_cohort(&young, &def, &cfg);
        assert_eq!(c.samples.len(), 0);
        assert_eq!(c.exclusion_report[&ExclusionReason::UnderAge], 5);
    }

    #[test]
    fn cohort_files_round_trip() {
        let s = CohortSample {
            patient_id: "p".into(),
            index_date: d("2015-01-02"),
            label: 1,
            age_at_index: 70,
            gender: Gender::M,
            grouped_codes: [("A".to_string(), 2u32), ("B".to_string(), 1)].into_iter().collect(),
            qualifying_month_count: 4,
        };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_cohort(&mut a, std::slice::from_ref(&s)).unwrap();
        write_cohort_codes(&mut b, std::slice::from_ref(&s)).unwrap();
        assert_eq!(read_cohort(&a[..], &b[..]).unwrap(), vec![s]);
        let mut e = Vec::new();
        let report: BTreeMap<_, _> = [(ExclusionReason::UnderAge, 3usize)].into_iter().collect();
        write_exclusions(&mut e, &report).unwrap();
        assert_eq!(read_exclusions(&e[..]).unwrap(), report);
    }
}
