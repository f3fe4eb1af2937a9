//! Holdout split, propensity scores on age and gender, and 1:1 matching.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Read, Write};

use ordered_float::OrderedFloat;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohort::CohortSample;
use crate::{exec, seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Caliper width in units of the pool's propensity-score standard deviation.
    pub caliper: f64,
    pub subset_per_class: Option<usize>,
    pub seed: u64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            caliper: 0.2,
            subset_per_class: Some(20_000),
            seed: 0,
        }
    }
}

/// Stratified, patient-level holdout split. Both halves keep input order.
pub fn split(samples: &[CohortSample], cfg: &SplitConfig) -> Result<(Vec<CohortSample>, Vec<CohortSample>)> {
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
    }
    if samples.len() < 10 {
        return Err(Error::InvalidData(format!(
            "need at least 10 samples to split, found {}",
            samples.len()
        )));
    }
    let mut in_test = vec![false; samples.len()];
    for label in [0u8, 1] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == label).collect();
        if idx.is_empty() {
            return Err(Error::DegenerateCohort(format!("no samples with label {label}")));
        }
        idx.shuffle(&mut seed::rng_for(cfg.seed, &format!("split/{label}")));
        let n_test = (idx.len() as f64 * cfg.test_fraction).round() as usize;
        for &i in &idx[..n_test] {
            in_test[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in samples.iter().zip(in_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, test))
}

/// Logistic model `P(case | age, gender)` with age standardized on the fit data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub intercept: f64,
    pub beta_age: f64,
    pub beta_gender: f64,
    pub age_mean: f64,
    pub age_sd: f64,
    pub iterations: usize,
}

impl PropensityModel {
    fn age_z(&self, age: f64) -> f64 {
        if self.age_sd > 0.0 {
            (age - self.age_mean) / self.age_sd
        } else {
            0.0
        }
    }

    pub fn linear(&self, age: f64, gender: f64) -> f64 {
        self.intercept + self.beta_age * self.age_z(age) + self.beta_gender * gender
    }

    pub fn score(&self, age: f64, gender: f64) -> f64 {
        sigmoid(self.linear(age, gender))
    }

    pub fn score_sample(&self, s: &CohortSample) -> f64 {
        self.score(s.age_at_index as f64, s.gender.indicator())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const MAX_NEWTON_ITERS: usize = 100;
const MAX_ABS_COEF: f64 = 30.0;

/// Maximum-likelihood fit by Newton-Raphson on `(age, gender)` rows.
pub fn fit_logistic(ages: &[f64], genders: &[f64], labels: &[u8]) -> Result<PropensityModel> {
    let n = ages.len() as f64;
    if labels.iter().all(|&y| y == 1) || labels.iter().all(|&y| y == 0) {
        return Err(Error::DegenerateCohort("propensity fit needs both classes".into()));
    }
    let age_mean = ages.iter().sum::<f64>() / n;
    let age_sd = (ages.iter().map(|a| (a - age_mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut model = PropensityModel {
        intercept: 0.0,
        beta_age: 0.0,
        beta_gender: 0.0,
        age_mean,
        age_sd,
        iterations: 0,
    };
    let rows: Vec<[f64; 3]> = ages
        .iter()
        .zip(genders)
        .map(|(&a, &g)| [1.0, model.age_z(a), g])
        .collect();
    let mut last_step = f64::INFINITY;
    for it in 1..=MAX_NEWTON_ITERS {
        let beta = [model.intercept, model.beta_age, model.beta_gender];
        let mut grad = [0.0; 3];
        let mut hess = [[0.0; 3]; 3];
        for (x, &y) in rows.iter().zip(labels) {
            let p = sigmoid(x[0] * beta[0] + x[1] * beta[1] + x[2] * beta[2]);
            let w = p * (1.0 - p);
            for a in 0..3 {
                grad[a] += (y as f64 - p) * x[a];
                for b in 0..3 {
                    hess[a][b] += w * x[a] * x[b];
                }
            }
        }
        for (a, row) in hess.iter_mut().enumerate() {
            // Damping only keeps constant covariates solvable; the fixed point is unchanged.
            row[a] += 1e-10;
        }
        let step = solve3(hess, grad);
        model.intercept += step[0];
        model.beta_age += step[1];
        model.beta_gender += step[2];
        model.iterations = it;
        last_step = step.iter().map(|s| s.abs()).fold(0.0, f64::max);
        let max_coef = [model.intercept, model.beta_age, model.beta_gender]
            .iter()
            .map(|c| c.abs())
            .fold(0.0, f64::max);
        if !max_coef.is_finite() || max_coef > MAX_ABS_COEF {
            return Err(Error::PropensityNonConvergence {
                iterations: it,
                max_coef,
                last_step,
            });
        }
        if last_step < 1e-10 {
            return Ok(model);
        }
    }
    Err(Error::PropensityNonConvergence {
        iterations: MAX_NEWTON_ITERS,
        max_coef: [model.intercept, model.beta_age, model.beta_gender]
            .iter()
            .map(|c| c.abs())
            .fold(0.0, f64::max),
        last_step,
    })
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let pivot = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

pub fn fit_propensity(pool: &[CohortSample]) -> Result<PropensityModel> {
    let ages: Vec<f64> = pool.iter().map(|s| s.age_at_index as f64).collect();
    let genders: Vec<f64> = pool.iter().map(|s| s.gender.indicator()).collect();
    let labels: Vec<u8> = pool.iter().map(|s| s.label).collect();
    fit_logistic(&ages, &genders, &labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub case_patient_id: String,
    pub control_patient_id: String,
    pub case_score: f64,
    pub control_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedCohort {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_cases: Vec<String>,
    /// Absolute caliper: `caliper * SD(scores)`.
    pub caliper_width: f64,
}

impl MatchedCohort {
    /// Matched samples from `pool`, cases and controls interleaved pair by pair.
    pub fn samples(&self, pool: &[CohortSample]) -> Vec<CohortSample> {
        let by_id: HashMap<&str, &CohortSample> = pool.iter().map(|s| (s.patient_id.as_str(), s)).collect();
        self.pairs
            .iter()
            .flat_map(|p| [&p.case_patient_id, &p.control_patient_id])
            .filter_map(|id| by_id.get(id.as_str()).map(|s| (*s).clone()))
            .collect()
    }
}

fn population_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Greedy nearest-neighbour matching without replacement. Cases are visited
/// in descending score order (ties by patient id); each takes the closest
/// unused control, ties going to the lower score and then the lower id.
pub fn match_one_to_one(pool: &[CohortSample], scores: &[f64], cfg: &MatchConfig) -> Result<MatchedCohort> {
    if cfg.caliper.is_nan() || cfg.caliper < 0.0 {
        return Err(Error::Config("caliper must be non-negative".into()));
    }
    assert_eq!(pool.len(), scores.len(), "one score per pool member");
    let width = cfg.caliper * population_sd(scores);

    let mut cases: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label == 1).collect();
    cases.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| pool[a].patient_id.cmp(&pool[b].patient_id))
    });
    let mut controls: BTreeSet<(OrderedFloat<f64>, &str, usize)> = (0..pool.len())
        .filter(|&i| pool[i].label == 0)
        .map(|i| (OrderedFloat(scores[i]), pool[i].patient_id.as_str(), i))
        .collect();

    let mut pairs = Vec::new();
    let mut unmatched_cases = Vec::new();
    for c in cases {
        let s = scores[c];
        let probe = (OrderedFloat(s), "", 0usize);
        let below = controls.range(..probe).next_back().copied();
        let above = controls.range(probe..).next().copied();
        let best = match (below, above) {
            (Some(b), Some(a)) => {
                if (a.0 .0 - s) < (s - b.0 .0) {
                    Some(a)
                } else {
                    Some(b)
                }
            }
            (b, a) => b.or(a),
        };
        match best {
            Some(ctrl) if (ctrl.0 .0 - s).abs() <= width => {
                controls.remove(&ctrl);
                pairs.push(MatchedPair {
                    case_patient_id: pool[c].patient_id.clone(),
                    control_patient_id: pool[ctrl.2].patient_id.clone(),
                    case_score: s,
                    control_score: ctrl.0 .0,
                });
            }
            _ => unmatched_cases.push(pool[c].patient_id.clone()),
        }
    }
    if pairs.is_empty() {
        return Err(Error::MatchingFailed { caliper_width: width });
    }
    Ok(MatchedCohort {
        pairs,
        unmatched_cases,
        caliper_width: width,
    })
}

/// Scores the pool with a fitted model; evaluation is data-parallel.
pub fn score_pool(model: &PropensityModel, pool: &[CohortSample]) -> Vec<f64> {
    exec::map(pool, |s| model.score_sample(s))
}

/// Uniform per-class subsample of `n_per_class` cases and controls, in input order.
pub fn subset(matched: &[CohortSample], n_per_class: usize, seed: u64) -> Result<Vec<CohortSample>> {
    let mut keep = vec![false; matched.len()];
    for label in [0u8, 1] {
        let idx: Vec<usize> = (0..matched.len()).filter(|&i| matched[i].label == label).collect();
        if n_per_class == 0 || n_per_class > idx.len() {
            return Err(Error::InvalidData(format!(
                "subset of {n_per_class} per class requested but label {label} has {}",
                idx.len()
            )));
        }
        let mut rng = seed::rng_for(seed, &format!("subset/{label}"));
        for i in rand::seq::index::sample(&mut rng, idx.len(), n_per_class) {
            keep[idx[i]] = true;
        }
    }
    Ok(matched.iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s.clone()).collect())
}

/// `(mean_case - mean_control) / sqrt((var_case + var_control) / 2)`.
pub fn standardized_mean_difference(cases: &[f64], controls: &[f64]) -> f64 {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0).max(1.0);
    let (mc, mk) = (mean(cases), mean(controls));
    let pooled = ((var(cases, mc) + var(controls, mk)) / 2.0).sqrt();
    if pooled == 0.0 {
        if mc == mk {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (mc - mk) / pooled
    }
}

pub const MATCHED_HEADER: [&str; 4] = ["case_patient_id", "control_patient_id", "case_score", "control_score"];

pub fn write_matched<W: Write>(dst: W, m: &MatchedCohort) -> Result<()> {
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(MATCHED_HEADER)?;
    for p in &m.pairs {
        w.write_record([
            p.case_patient_id.as_str(),
            &p.control_patient_id,
            &format!("{:.12}", p.case_score),
            &format!("{:.12}", p.control_score),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matched<R: Read>(src: R) -> Result<Vec<MatchedPair>> {
    let mut rdr = csv::Reader::from_reader(src);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_id_list<W: Write>(mut dst: W, ids: impl IntoIterator<Item = impl AsRef<str>>) -> Result<()> {
    for id in ids {
        writeln!(dst, "{}", id.as_ref())?;
    }
    Ok(())
}

pub fn read_id_list<R: BufRead>(src: R) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in src.lines() {
        let line = line?;
        let line = line.trim();
        if !line.is_empty() {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Gender;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn sample(id: usize, label: u8, age: i32, gender: Gender) -> CohortSample {
        CohortSample {
            patient_id: format!("s{id:05}"),
            index_date: NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
            label,
            age_at_index: age,
            gender,
            grouped_codes: Default::default(),
            qualifying_month_count: 2,
        }
    }

    fn pool(n_case: usize, n_ctrl: usize, case_shift: i32, seed: u64) -> Vec<CohortSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::new();
        for i in 0..n_case + n_ctrl {
            let label = (i < n_case) as u8;
            let age = rng.random_range(65..90) + if label == 1 { case_shift } else { 0 };
            let g = if rng.random_bool(0.5) { Gender::F } else { Gender::M };
            v.push(sample(i, label, age, g));
        }
        v
    }

    #[test]
    fn split_is_stratified_disjoint_and_deterministic() {
        let data = pool(50, 50, 0, 1);
        let cfg = SplitConfig { test_fraction: 0.2, seed: 5 };
        let (train, test) = split(&data, &cfg).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        let a: HashSet<_> = train.iter().map(|s| &s.patient_id).collect();
        assert!(test.iter().all(|s| !a.contains(&s.patient_id)));
        assert_eq!(split(&data, &cfg).unwrap().1, test);

        let skewed = pool(10, 90, 0, 2);
        let (_, test) = split(&skewed, &cfg).unwrap();
        assert_eq!(test.iter().filter(|s| s.label == 1).count(), 2);
        assert_eq!(test.iter().filter(|s| s.label == 0).count(), 18);

        // re-splitting the training pool never reaches test ids
        let (train, test) = split(&data, &cfg).unwrap();
        let (t2, v2) = split(&train, &SplitConfig { seed: 6, ..cfg.clone() }).unwrap();
        let test_ids: HashSet<_> = test.iter().map(|s| &s.patient_id).collect();
        assert!(t2.iter().chain(&v2).all(|s| !test_ids.contains(&s.patient_id)));
    }

    #[test]
    fn split_errors() {
        let one_class = pool(0, 30, 0, 1);
        assert!(matches!(split(&one_class, &SplitConfig::default()), Err(Error::DegenerateCohort(_))));
        assert!(split(&pool(2, 3, 0, 1), &SplitConfig::default()).is_err());
    }

    #[test]
    fn no_signal_scores_near_case_rate() {
        let data = pool(300, 700, 0, 3);
        let m = fit_propensity(&data).unwrap();
        for s in score_pool(&m, &data) {
            assert!((s - 0.3).abs() <= 0.02, "score {s}");
        }
    }

    #[test]
    fn separable_ages_are_flagged() {
        let mut data = Vec::new();
        for i in 0..20 {
            data.push(sample(i, 1, 80 + (i % 5) as i32, Gender::F));
            data.push(sample(100 + i, 0, 66 + (i % 5) as i32, Gender::M));
        }
        assert!(matches!(
            fit_propensity(&data),
            Err(Error::PropensityNonConvergence { .. })
        ));
    }

    fn log_likelihood(rows: &[(f64, f64, u8)], b: [f64; 3]) -> f64 {
        rows.iter()
            .map(|&(z, g, y)| {
                let p = sigmoid(b[0] + b[1] * z + b[2] * g);
                if y == 1 { p.ln() } else { (1.0 - p).ln() }
            })
            .sum()
    }

    #[test]
    fn six_point_fit_matches_grid_search() {
        let ages = [66.0, 70.0, 74.0, 78.0, 82.0, 86.0];
        let genders = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let labels = [0u8, 1, 0, 1, 0, 1];
        let m = fit_logistic(&ages, &genders, &labels).unwrap();

        let mean = ages.iter().sum::<f64>() / 6.0;
        let sd = (ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 6.0).sqrt();
        let rows: Vec<_> = (0..6).map(|i| ((ages[i] - mean) / sd, genders[i], labels[i])).collect();
        // Dense grid, then successively finer grids around the best point.
        let mut center = [0.0; 3];
        let mut half = 4.0;
        for _ in 0..12 {
            let steps = 20;
            let mut best = (f64::NEG_INFINITY, center);
            for i in 0..=steps {
                for j in 0..=steps {
                    for k in 0..=steps {
                        let b = [
                            center[0] - half + 2.0 * half * i as f64 / steps as f64,
                            center[1] - half + 2.0 * half * j as f64 / steps as f64,
                            center[2] - half + 2.0 * half * k as f64 / steps as f64,
                        ];
                        let ll = log_likelihood(&rows, b);
                        if ll > best.0 {
                            best = (ll, b);
                        }
                    }
                }
            }
            center = best.1;
            half *= 0.3;
        }
        assert!((m.intercept - center[0]).abs() < 1e-3, "{} vs {}", m.intercept, center[0]);
        assert!((m.beta_age - center[1]).abs() < 1e-3, "{} vs {}", m.beta_age, center[1]);
        assert!((m.beta_gender - center[2]).abs() < 1e-3, "{} vs {}", m.beta_gender, center[2]);
    }

    #[test]
    fn exact_twins_all_match() {
        let mut data = Vec::new();
        for i in 0..30 {
            let g = if i % 2 == 0 { Gender::F } else { Gender::M };
            data.push(sample(i, 1, 65 + i as i32, g));
            data.push(sample(100 + i, 0, 65 + i as i32, g));
        }
        // give the model something to fit: a few extra controls
        for i in 0..10 {
            data.push(sample(200 + i, 0, 66, Gender::F));
        }
        let m = fit_propensity(&data).unwrap();
        let scores = score_pool(&m, &data);
        let matched = match_one_to_one(&data, &scores, &MatchConfig { caliper: 0.2, ..Default::default() }).unwrap();
        assert_eq!(matched.pairs.len(), 30);
        assert!(matched.unmatched_cases.is_empty());
        for p in &matched.pairs {
            assert_eq!(p.case_score, p.control_score);
        }
    }

    #[test]
    fn zero_caliper_without_ties_fails() {
        let data: Vec<_> = (0..10).map(|i| sample(i, (i % 2) as u8, 70 + i as i32, Gender::F)).collect();
        let scores: Vec<f64> = (0..10).map(|i| 0.1 + i as f64 * 0.05).collect();
        let r = match_one_to_one(&data, &scores, &MatchConfig { caliper: 1e-12, ..Default::default() });
        assert!(matches!(r, Err(Error::MatchingFailed { .. })));
    }

    #[test]
    fn matching_balances_shifted_ages() {
        let data = pool(400, 1600, 5, 9);
        let ages = |label: u8, ids: &HashSet<&str>| -> Vec<f64> {
            data.iter()
                .filter(|s| s.label == label && (ids.is_empty() || ids.contains(s.patient_id.as_str())))
                .map(|s| s.age_at_index as f64)
                .collect()
        };
        let before = standardized_mean_difference(&ages(1, &HashSet::new()), &ages(0, &HashSet::new()));
        assert!(before > 0.3);
        let m = fit_propensity(&data).unwrap();
        let scores = score_pool(&m, &data);
        let matched = match_one_to_one(&data, &scores, &MatchConfig::default()).unwrap();
        let ids: HashSet<&str> = matched
            .pairs
            .iter()
            .flat_map(|p| [p.case_patient_id.as_str(), p.control_patient_id.as_str()])
            .collect();
        let controls: HashSet<_> = matched.pairs.iter().map(|p| &p.control_patient_id).collect();
        assert_eq!(controls.len(), matched.pairs.len(), "no control reused");
        let after = standardized_mean_difference(&ages(1, &ids), &ages(0, &ids));
        assert!(after.abs() < 0.1, "post-match SMD {after}");
        assert!(after.abs() <= before.abs());
        assert_eq!(matched.samples(&data).len(), 2 * matched.pairs.len());
    }

    #[test]
    fn subset_examples() {
        let data = pool(20, 20, 0, 4);
        assert_eq!(subset(&data, 20, 1).unwrap(), data);
        let one = subset(&data, 1, 1).unwrap();
        assert_eq!(one.len(), 2);
        assert_eq!(one.iter().filter(|s| s.label == 1).count(), 1);
        assert_eq!(subset(&data, 7, 3).unwrap(), subset(&data, 7, 3).unwrap());
        assert!(subset(&data, 21, 1).is_err());
    }

    #[test]
    fn matched_csv_round_trips() {
        let m = MatchedCohort {
            pairs: vec![MatchedPair {
                case_patient_id: "a".into(),
                control_patient_id: "b".into(),
                case_score: 0.25,
                control_score: 0.5,
            }],
            unmatched_cases: vec![],
            caliper_width: 0.1,
        };
        let mut buf = Vec::new();
        write_matched(&mut buf, &m).unwrap();
        assert_eq!(read_matched(&buf[..]).unwrap(), m.pairs);
        let mut ids = Vec::new();
        write_id_list(&mut ids, ["x", "y"]).unwrap();
        assert_eq!(read_id_list(&ids[..]).unwrap(), vec!["x", "y"]);
    }
}
