//! CSV readers and writers for patients, claims, code maps and case definitions.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use super::{
    CaseDefinition, ClaimRecord, CodeMap, CodeMapEntry, CodeSystem, Gender, MedicalCode,
    PatientTimeline,
};
use crate::{Error, Result};

pub const PATIENTS_HEADER: [&str; 3] = ["patient_id", "birth_year", "gender"];
pub const CLAIMS_HEADER: [&str; 5] = ["patient_id", "date", "system", "raw_code", "drug_name"];
pub const CODE_MAP_HEADER: [&str; 4] = ["system", "pattern", "group", "label"];
pub const CASE_DEFINITION_HEADER: [&str; 2] = ["kind", "value"];

pub fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| format!("bad date '{s}': {e}"))
}

fn reader<R: Read>(src: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(src)
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, name: &str, expected: &[&str]) -> Result<()> {
    let header = rdr.headers()?;
    let found: Vec<&str> = header.iter().collect();
    if found != expected {
        return Err(Error::parse(
            name,
            1,
            format!("expected header {}, found {}", expected.join(","), found.join(",")),
        ));
    }
    Ok(())
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::InvalidData(format!("cannot open {}: {e}", path.display())))
}

pub fn read_code_map(path: &Path) -> Result<CodeMap> {
    read_code_map_from(&path.display().to_string(), open(path)?)
}

pub fn read_code_map_from<R: Read>(name: &str, src: R) -> Result<CodeMap> {
    let mut rdr = reader(src);
    check_header(&mut rdr, name, &CODE_MAP_HEADER)?;
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let system = rec[0].parse().map_err(|e: String| Error::parse(name, line, e))?;
        entries.push(CodeMapEntry {
            system,
            pattern: rec[1].to_string(),
            group: rec[2].to_string(),
            label: rec[3].to_string(),
        });
    }
    CodeMap::new(entries)
}

pub fn write_code_map<W: Write>(dst: W, map: &CodeMap) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(CODE_MAP_HEADER)?;
    for e in map.entries() {
        w.write_record([e.system.as_str(), &e.pattern, &e.group, &e.label])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_case_definition(path: &Path) -> Result<CaseDefinition> {
    read_case_definition_from(&path.display().to_string(), open(path)?)
}

pub fn read_case_definition_from<R: Read>(name: &str, src: R) -> Result<CaseDefinition> {
    let mut rdr = reader(src);
    check_header(&mut rdr, name, &CASE_DEFINITION_HEADER)?;
    let (mut dx, mut meds) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        match &rec[0] {
            "diagnosis_pattern" => dx.push(rec[1].to_string()),
            "medication_name" => meds.push(rec[1].to_string()),
            other => {
                return Err(Error::parse(name, line_of(&rec), format!("unknown kind '{other}'")))
            }
        }
    }
    CaseDefinition::from_strings(dx, meds)
}

pub fn write_case_definition<W: Write>(dst: W, def: &CaseDefinition) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(CASE_DEFINITION_HEADER)?;
    for p in def.diagnosis_patterns() {
        w.write_record(["diagnosis_pattern", &p.to_string()])?;
    }
    for m in def.medication_names() {
        w.write_record(["medication_name", m.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the patients and claims files and joins them into timelines, in
/// patients-file order. Claims on the same date form one record.
pub fn read_timelines(patients: &Path, claims: &Path) -> Result<Vec<PatientTimeline>> {
    read_timelines_from(
        &patients.display().to_string(),
        open(patients)?,
        &claims.display().to_string(),
        open(claims)?,
    )
}

pub fn read_timelines_from<P: Read, C: Read>(
    patients_name: &str,
    patients: P,
    claims_name: &str,
    claims: C,
) -> Result<Vec<PatientTimeline>> {
    let mut rdr = reader(patients);
    check_header(&mut rdr, patients_name, &PATIENTS_HEADER)?;
    let mut timelines = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::parse(patients_name, line, "empty patient_id"));
        }
        let birth_year: i32 = rec[1]
            .parse()
            .map_err(|e| Error::parse(patients_name, line, format!("bad birth_year: {e}")))?;
        let gender: Gender = rec[2].parse().map_err(|e: String| Error::parse(patients_name, line, e))?;
        if by_id.insert(id.clone(), timelines.len()).is_some() {
            return Err(Error::parse(patients_name, line, format!("duplicate patient_id '{id}'")));
        }
        timelines.push(PatientTimeline {
            patient_id: id,
            birth_year,
            gender,
            records: Vec::new(),
        });
    }

    let mut per_patient: Vec<BTreeMap<NaiveDate, Vec<MedicalCode>>> = vec![BTreeMap::new(); timelines.len()];
    let mut rdr = reader(claims);
    check_header(&mut rdr, claims_name, &CLAIMS_HEADER)?;
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let idx = *by_id
            .get(&rec[0])
            .ok_or_else(|| Error::parse(claims_name, line, format!("unknown patient_id '{}'", &rec[0])))?;
        let date = parse_date(&rec[1]).map_err(|e| Error::parse(claims_name, line, e))?;
        let system: CodeSystem = rec[2].parse().map_err(|e: String| Error::parse(claims_name, line, e))?;
        let raw = rec[3].to_string();
        if raw.is_empty() {
            return Err(Error::parse(claims_name, line, "empty raw_code"));
        }
        let drug = rec[4].to_string();
        let code = MedicalCode {
            system,
            raw,
            drug_name: (system == CodeSystem::Medication && !drug.is_empty()).then_some(drug),
            group: None,
        };
        per_patient[idx].entry(date).or_default().push(code);
    }
    for (t, dates) in timelines.iter_mut().zip(per_patient) {
        t.records = dates
            .into_iter()
            .map(|(date, codes)| ClaimRecord { date, codes })
            .collect();
    }
    Ok(timelines)
}

pub fn write_patients<W: Write>(dst: W, timelines: &[PatientTimeline]) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(PATIENTS_HEADER)?;
    for t in timelines {
        w.write_record([t.patient_id.as_str(), &t.birth_year.to_string(), t.gender.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_claims<W: Write>(dst: W, timelines: &[PatientTimeline]) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(CLAIMS_HEADER)?;
    for t in timelines {
        for r in &t.records {
            let date = r.date.format("%Y-%m-%d").to_string();
            for c in &r.codes {
                w.write_record([
                    t.patient_id.as_str(),
                    &date,
                    c.system.as_str(),
                    &c.raw,
                    c.drug_name.as_deref().unwrap_or(""),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
