//! Level-wise binary tree growth over presorted feature columns.
//!
//! Each row carries additive statistics `(count, a, b)`. A split criterion
//! maps node statistics to a loss; the gain of a split is
//! `loss(parent) - loss(left) - loss(right)`. Rows go left when
//! `x[feature] <= threshold`.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Tree {
            nodes: vec![Node::Leaf { value }],
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match self.nodes[k] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    k = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, k: usize) -> usize {
            match t.nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    pub fn split_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Split { feature, .. } => Some(*feature),
            Node::Leaf { .. } => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Criterion {
    /// `a` = weight, `b` = weighted positives; leaf = `b / a`.
    Gini,
    /// `a` = hessian sum, `b` = gradient sum; leaf = `-b / (a + lambda)`.
    SecondOrder { lambda: f64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stats {
    pub count: f64,
    pub a: f64,
    pub b: f64,
}

impl Stats {
    fn add(&mut self, o: &Stats) {
        self.count += o.count;
        self.a += o.a;
        self.b += o.b;
    }

    fn minus(&self, o: &Stats) -> Stats {
        Stats {
            count: self.count - o.count,
            a: self.a - o.a,
            b: self.b - o.b,
        }
    }
}

impl Criterion {
    fn loss(self, s: &Stats) -> f64 {
        match self {
            // weighted Gini impurity W * 2p(1-p)
            Criterion::Gini => {
                if s.a <= 0.0 {
                    0.0
                } else {
                    2.0 * s.b * (s.a - s.b) / s.a
                }
            }
            Criterion::SecondOrder { lambda } => -s.b * s.b / (s.a + lambda),
        }
    }

    fn leaf(self, s: &Stats) -> f64 {
        match self {
            Criterion::Gini => {
                if s.a > 0.0 {
                    s.b / s.a
                } else {
                    0.0
                }
            }
            Criterion::SecondOrder { lambda } => -s.b / (s.a + lambda),
        }
    }
}

/// Column-major feature matrix with each column's row order presorted.
#[derive(Debug, Clone)]
pub struct Columns {
    pub n_rows: usize,
    pub values: Vec<Vec<f64>>,
    pub sorted: Vec<Vec<u32>>,
}

impl Columns {
    pub fn new(rows: &[Vec<f64>], n_features: usize) -> Self {
        let n_rows = rows.len();
        let values: Vec<Vec<f64>> = (0..n_features).map(|f| rows.iter().map(|r| r[f]).collect()).collect();
        let sorted = exec::map(&values, |col| {
            let mut idx: Vec<u32> = (0..n_rows as u32).collect();
            idx.sort_by(|&p, &q| col[p as usize].total_cmp(&col[q as usize]));
            idx
        });
        Columns { n_rows, values, sorted }
    }

    pub fn n_features(&self) -> usize {
        self.values.len()
    }
}

pub struct GrowParams {
    pub criterion: Criterion,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features drawn without replacement per node; `None` means all.
    pub features_per_split: Option<usize>,
    /// Search features in parallel (used when trees are grown one at a time).
    pub parallel_features: bool,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    left: Stats,
}

fn better(new: &Candidate, old: &Option<Candidate>) -> bool {
    match old {
        None => true,
        Some(o) => new.gain > o.gain,
    }
}

/// Best split of every frontier node along one feature.
fn scan_feature(
    cols: &Columns,
    f: usize,
    node_of: &[u32],
    totals: &[Stats],
    allowed: &[Option<Vec<bool>>],
    row_stats: &[Stats],
    p: &GrowParams,
) -> Vec<Option<Candidate>> {
    const NONE: u32 = u32::MAX;
    let k_nodes = totals.len();
    let mut running = vec![Stats::default(); k_nodes];
    let mut last = vec![f64::NAN; k_nodes];
    let mut best: Vec<Option<Candidate>> = vec![None; k_nodes];
    let active: Vec<bool> = allowed.iter().map(|a| a.as_ref().is_none_or(|m| m[f])).collect();
    if !active.iter().any(|&x| x) {
        return best;
    }
    let col = &cols.values[f];
    let min_leaf = p.min_samples_leaf.max(1) as f64;
    for &r in &cols.sorted[f] {
        let r = r as usize;
        let k = node_of[r];
        if k == NONE || !active[k as usize] {
            continue;
        }
        let k = k as usize;
        let x = col[r];
        if running[k].count > 0.0 && x > last[k] {
            let left = running[k];
            let right = totals[k].minus(&left);
            if left.count >= min_leaf && right.count >= min_leaf {
                let gain = p.criterion.loss(&totals[k]) - p.criterion.loss(&left) - p.criterion.loss(&right);
                let mut threshold = last[k] + (x - last[k]) / 2.0;
                if threshold >= x {
                    threshold = last[k];
                }
                let cand = Candidate {
                    gain,
                    feature: f,
                    threshold,
                    left,
                };
                if better(&cand, &best[k]) {
                    best[k] = Some(cand);
                }
            }
        }
        running[k].add(&row_stats[r]);
        last[k] = x;
    }
    best
}

/// Grows one tree. Rows with `count == 0` in `row_stats` are ignored.
pub fn grow<R: Rng>(cols: &Columns, row_stats: &[Stats], p: &GrowParams, rng: &mut R) -> Tree {
    const NONE: u32 = u32::MAX;
    let n_features = cols.n_features();
    let mut node_of: Vec<u32> = row_stats.iter().map(|s| if s.count > 0.0 { 0 } else { NONE }).collect();
    let mut root = Stats::default();
    for s in row_stats.iter().filter(|s| s.count > 0.0) {
        root.add(s);
    }
    let mut tree = Tree {
        nodes: vec![Node::Leaf {
            value: p.criterion.leaf(&root),
        }],
    };
    // frontier entry: (tree node id, stats)
    let mut frontier: Vec<(usize, Stats)> = vec![(0, root)];

    for _depth in 0..p.max_depth {
        if frontier.is_empty() {
            break;
        }
        let allowed: Vec<Option<Vec<bool>>> = frontier
            .iter()
            .map(|_| match p.features_per_split {
                Some(m) if m < n_features => {
                    let mut mask = vec![false; n_features];
                    for f in sample(rng, n_features, m.max(1)).iter() {
                        mask[f] = true;
                    }
                    Some(mask)
                }
                _ => None,
            })
            .collect();
        let totals: Vec<Stats> = frontier.iter().map(|f| f.1).collect();
        let scan = |f: usize| scan_feature(cols, f, &node_of, &totals, &allowed, row_stats, p);
        let per_feature: Vec<Vec<Option<Candidate>>> = if p.parallel_features {
            exec::map_range(n_features, scan)
        } else {
            (0..n_features).map(scan).collect()
        };

        let mut next = Vec::new();
        // frontier index -> (left slot, right slot) in `next`
        let mut route: Vec<Option<(usize, f64, u32, u32)>> = vec![None; frontier.len()];
        for (k, &(node_id, total)) in frontier.iter().enumerate() {
            let mut best: Option<Candidate> = None;
            for cands in &per_feature {
                if let Some(c) = cands[k] {
                    if better(&c, &best) {
                        best = Some(c);
                    }
                }
            }
            let Some(c) = best.filter(|c| c.gain > 1e-12) else {
                continue;
            };
            let right = total.minus(&c.left);
            let left_id = tree.nodes.len();
            tree.nodes.push(Node::Leaf {
                value: p.criterion.leaf(&c.left),
            });
            tree.nodes.push(Node::Leaf {
                value: p.criterion.leaf(&right),
            });
            tree.nodes[node_id] = Node::Split {
                feature: c.feature,
                threshold: c.threshold,
                left: left_id,
                right: left_id + 1,
            };
            let l_slot = next.len() as u32;
            next.push((left_id, c.left));
            next.push((left_id + 1, right));
            route[k] = Some((c.feature, c.threshold, l_slot, l_slot + 1));
        }
        for (r, k) in node_of.iter_mut().enumerate() {
            if *k == NONE {
                continue;
            }
            *k = match route[*k as usize] {
                Some((f, t, l, rr)) => {
                    if cols.values[f][r] <= t {
                        l
                    } else {
                        rr
                    }
                }
                None => NONE,
            };
        }
        frontier = next;
    }
    tree
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gini_stats(y: &[u8]) -> Vec<Stats> {
        y.iter()
            .map(|&v| Stats {
                count: 1.0,
                a: 1.0,
                b: v as f64,
            })
            .collect()
    }

    fn params(depth: usize) -> GrowParams {
        GrowParams {
            criterion: Criterion::Gini,
            max_depth: depth,
            min_samples_leaf: 1,
            features_per_split: None,
            parallel_features: false,
        }
    }

    #[test]
    fn separable_single_feature() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<u8> = (0..10).map(|i| (i >= 6) as u8).collect();
        let cols = Columns::new(&rows, 1);
        let t = grow(&cols, &gini_stats(&y), &params(3), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t.depth(), 1);
        assert_eq!(t.nodes[0], Node::Split { feature: 0, threshold: 5.5, left: 1, right: 2 });
        for (r, &v) in rows.iter().zip(&y) {
            assert_eq!(t.predict(r), v as f64);
        }
    }

    #[test]
    fn depth_zero_is_base_rate() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let y = [0, 1, 0, 0, 1, 0, 0, 0];
        let t = grow(&Columns::new(&rows, 1), &gini_stats(&y), &params(0), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t, Tree::leaf(0.25));
    }

    #[test]
    fn constant_feature_never_splits_and_min_leaf_respected() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![1.0, (i % 4) as f64]).collect();
        let y: Vec<u8> = (0..12).map(|i| (i % 4 == 3) as u8).collect();
        let cols = Columns::new(&rows, 2);
        let t = grow(&cols, &gini_stats(&y), &params(4), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(t.split_features().all(|f| f == 1));
        let p = GrowParams {
            min_samples_leaf: 4,
            ..params(4)
        };
        let t = grow(&cols, &gini_stats(&y), &p, &mut ChaCha8Rng::seed_from_u64(0));
        // the only separating threshold leaves 3 rows on the right
        assert!(t.nodes.iter().all(|n| match n {
            Node::Split { threshold, .. } => *threshold != 2.5,
            _ => true,
        }));
    }

    #[test]
    fn second_order_leaf_is_newton_step() {
        let rows = vec![vec![0.0], vec![1.0]];
        let stats = vec![
            Stats { count: 1.0, a: 0.25, b: 0.5 },
            Stats { count: 1.0, a: 0.25, b: -0.5 },
        ];
        let p = GrowParams {
            criterion: Criterion::SecondOrder { lambda: 1.0 },
            ..params(1)
        };
        let t = grow(&Columns::new(&rows, 1), &stats, &p, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(t.predict(&[0.0]), -0.5 / 1.25);
        assert_eq!(t.predict(&[1.0]), 0.5 / 1.25);
    }
}
