//! Threshold-free evaluation and scenario result tables.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Area under the ROC curve via the Mann-Whitney identity with average ranks
/// for ties: the probability that a random case outscores a random control,
/// ties counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidData(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuroc);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidData("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_block = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum_pos += avg_rank * pos_in_block as f64;
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: u8,
    pub model: String,
    pub regime: String,
    pub auroc: Option<f64>,
    pub n_train: Option<usize>,
    pub n_test: Option<usize>,
}

pub const RESULTS_HEADER: [&str; 6] = ["scenario", "model", "regime", "auroc", "n_train", "n_test"];

fn cell<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_else(|| "absent".into())
}

/// Writes `results.csv`; rows are sorted by (scenario, model, regime) and
/// AUROC is printed with six decimals so output bytes are stable.
pub fn write_results<W: Write>(dst: W, rows: &[ResultRow]) -> Result<()> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| (a.scenario, &a.model, &a.regime).cmp(&(b.scenario, &b.model, &b.regime)));
    let mut w = csv::Writer::from_writer(dst);
    w.write_record(RESULTS_HEADER)?;
    for r in &rows {
        w.write_record([
            r.scenario.to_string(),
            r.model.clone(),
            r.regime.clone(),
            r.auroc.map(|a| format!("{a:.6}")).unwrap_or_else(|| "absent".into()),
            cell(&r.n_train),
            cell(&r.n_test),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results<R: std::io::Read>(src: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(src);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let opt = |s: &str| (s != "absent").then(|| s.to_string());
        let bad = |e: &dyn std::fmt::Display| Error::InvalidData(format!("results.csv: {e}"));
        rows.push(ResultRow {
            scenario: rec[0].parse().map_err(|e| bad(&e))?,
            model: rec[1].to_string(),
            regime: rec[2].to_string(),
            auroc: opt(&rec[3]).map(|s| s.parse()).transpose().map_err(|e| bad(&e))?,
            n_train: opt(&rec[4]).map(|s| s.parse()).transpose().map_err(|e| bad(&e))?,
            n_test: opt(&rec[5]).map(|s| s.parse()).transpose().map_err(|e| bad(&e))?,
        });
    }
    Ok(rows)
}

/// Plain-text bar chart of AUROC per row.
pub fn render_bars(rows: &[ResultRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let label = format!("s{} {:<5} {:<8}", r.scenario, r.model, r.regime);
        match r.auroc {
            Some(a) => {
                let width = (a * 40.0).round() as usize;
                out.push_str(&format!("{label} {:<40} {a:.4}\n", "#".repeat(width)));
            }
            None => out.push_str(&format!("{label} absent\n")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if si > sj {
                        num += 1.0;
                    } else if si == sj {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.8, 0.7, 0.6, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuroc)));
    }

    proptest! {
        #[test]
        fn matches_pairwise_definition(
            data in proptest::collection::vec((0u8..6, any::<bool>()), 2..120)
        ) {
            let scores: Vec<f64> = data.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<u8> = data.iter().map(|(_, y)| *y as u8).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - brute(&scores, &labels)).abs() < 1e-12);
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            prop_assert!((auroc(&transformed, &labels).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn negation_complements_without_ties(
            raw in proptest::collection::btree_set(0u32..100_000, 2..80),
            flips in proptest::collection::vec(any::<bool>(), 80)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
            let labels: Vec<u8> = flips[..scores.len()].iter().map(|&b| b as u8).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((auroc(&scores, &labels).unwrap() + auroc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn result_table_shapes() {
        let mut rows = Vec::new();
        for s in 1..=3u8 {
            for m in ["vgnn", "rf", "gbm"] {
                for r in ["matched", "subset"] {
                    rows.push(ResultRow {
                        scenario: s,
                        model: m.into(),
                        regime: r.into(),
                        auroc: if m == "gbm" && s == 2 { None } else { Some(0.7) },
                        n_train: Some(10),
                        n_test: Some(5),
                    });
                }
            }
        }
        let mut buf = Vec::new();
        write_results(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 19);
        assert!(text.contains("absent"));
        assert_eq!(read_results(&buf[..]).unwrap().len(), 18);

        let mut empty = Vec::new();
        write_results(&mut empty, &[]).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "scenario,model,regime,auroc,n_train,n_test\n");
        assert!(render_bars(&rows).contains("absent"));
    }
}
