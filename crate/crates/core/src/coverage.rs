//! State coverage: hidden-state coverage (HS_C), cell-state coverage (CS_C)
//! and threshold neuron coverage (NC), accumulated over a test run.
//!
//! Counts follow the metric definitions over every valid state of every
//! processed trace. The position map folds the batch axis and records which
//! structural `(t, l, e)` slots have been covered; guidance targets come from
//! the slots that are still open.
//!
//! For CS_C a state is covered when `tanh(c)` lands in the upper boundary
//! section `[v_{Sec-1}, 1]`. Per-section counts are kept for every section.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rnn::StateTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CoverageMetric {
    #[serde(rename = "HS_C")]
    HsC,
    #[serde(rename = "CS_C")]
    CsC,
    #[serde(rename = "NC")]
    Nc,
}

impl CoverageMetric {
    pub const ALL: [CoverageMetric; 3] = [Self::HsC, Self::CsC, Self::Nc];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::HsC => "HS_C",
            Self::CsC => "CS_C",
            Self::Nc => "NC",
        }
    }
}

impl fmt::Display for CoverageMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CoverageMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "HS_C" | "HSC" => Ok(Self::HsC),
            "CS_C" | "CSC" => Ok(Self::CsC),
            "NC" => Ok(Self::Nc),
            _ => Err(Error::Config(format!("unknown coverage metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub metric: CoverageMetric,
    /// Ascending, from exactly -1 to exactly +1. Used by CS_C.
    pub section_edges: Vec<f64>,
    /// Used by NC.
    pub nc_threshold: f64,
}

pub const DEFAULT_SECTIONS: usize = 5;
pub const DEFAULT_NC_THRESHOLD: f64 = 0.5;

/// `n` equal-width sections over `[-1, 1]`.
pub fn equal_sections(n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| match i {
            0 => -1.0,
            i if i == n => 1.0,
            i => -1.0 + 2.0 * i as f64 / n as f64,
        })
        .collect()
}

impl CoverageConfig {
    pub fn new(metric: CoverageMetric) -> Self {
        Self {
            metric,
            section_edges: equal_sections(DEFAULT_SECTIONS),
            nc_threshold: DEFAULT_NC_THRESHOLD,
        }
    }

    pub fn with_sections(mut self, n: usize) -> Self {
        self.section_edges = equal_sections(n);
        self
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.nc_threshold = threshold;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.section_edges;
        if e.len() < 2 || e[0] != -1.0 || e[e.len() - 1] != 1.0 {
            return Err(Error::Config("section edges must run from -1 to +1".into()));
        }
        if e.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config("section edges must be strictly ascending".into()));
        }
        if !self.nc_threshold.is_finite() {
            return Err(Error::Config("nc_threshold must be finite".into()));
        }
        Ok(())
    }

    pub fn num_sections(&self) -> usize {
        self.section_edges.len() - 1
    }

    /// Section of an activation in `[-1, 1]`: `[v_{i-1}, v_i)`, last closed.
    pub fn section_of(&self, activation: f64) -> usize {
        let e = &self.section_edges;
        let last = e.len() - 2;
        // Edges are ascending, so the count of inner edges ≤ activation is the section.
        e[1..=last].partition_point(|&edge| edge <= activation)
    }

    /// Lower edge of the upper boundary section.
    pub fn upper_boundary(&self) -> f64 {
        self.section_edges[self.section_edges.len() - 2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Hidden,
    Cell,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateRef {
    pub t: usize,
    pub l: usize,
    pub b: usize,
    pub e: usize,
    pub which: StateKind,
}

impl StateRef {
    pub fn hidden(t: usize, l: usize, b: usize, e: usize) -> Self {
        Self { t, l, b, e, which: StateKind::Hidden }
    }

    pub fn cell(t: usize, l: usize, b: usize, e: usize) -> Self {
        Self { t, l, b, e, which: StateKind::Cell }
    }

    /// Value of the referenced state, if it exists and is valid.
    pub fn value(&self, trace: &StateTrace) -> Option<f64> {
        let (tt, ll, bb, ee) = trace.dims();
        if self.t >= tt || self.l >= ll || self.b >= bb || self.e >= ee {
            return None;
        }
        if !trace.is_valid(self.t, self.b) {
            return None;
        }
        match self.which {
            StateKind::Hidden => Some(trace.hidden_vec(self.t, self.l, self.b)[self.e]),
            StateKind::Cell => trace.cell_vec(self.t, self.l, self.b).map(|c| c[self.e]),
        }
    }
}

/// Structural position with the batch axis folded out.
pub type Position = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTracker {
    config: CoverageConfig,
    covered_count: u64,
    total_count: u64,
    section_counts: Vec<u64>,
    position_map: BTreeSet<Position>,
}

/// Serializable snapshot of a tracker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub metric: CoverageMetric,
    pub ratio: f64,
    pub covered: u64,
    pub total: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub section_ratios: Option<Vec<f64>>,
    pub positions: usize,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl CoverageTracker {
    pub fn new(config: CoverageConfig) -> Result<Self> {
        config.validate()?;
        let sections = config.num_sections();
        Ok(Self {
            config,
            covered_count: 0,
            total_count: 0,
            section_counts: vec![0; sections],
            position_map: BTreeSet::new(),
        })
    }

    pub fn config(&self) -> &CoverageConfig {
        &self.config
    }

    pub fn metric(&self) -> CoverageMetric {
        self.config.metric
    }

    pub fn covered_count(&self) -> u64 {
        self.covered_count
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    /// Per-section counts; all zero unless the metric is CS_C.
    pub fn section_counts(&self) -> &[u64] {
        &self.section_counts
    }

    pub fn position_map(&self) -> &BTreeSet<Position> {
        &self.position_map
    }

    pub fn is_covered(&self, t: usize, l: usize, e: usize) -> bool {
        self.position_map.contains(&(t, l, e))
    }

    pub fn ratio(&self) -> f64 {
        ratio(self.covered_count, self.total_count)
    }

    pub fn section_ratios(&self) -> Vec<f64> {
        self.section_counts
            .iter()
            .map(|&c| ratio(c, self.total_count))
            .collect()
    }

    pub fn summary(&self) -> CoverageSummary {
        CoverageSummary {
            metric: self.metric(),
            ratio: self.ratio(),
            covered: self.covered_count,
            total: self.total_count,
            section_ratios: (self.metric() == CoverageMetric::CsC).then(|| self.section_ratios()),
            positions: self.position_map.len(),
        }
    }

    /// Accumulate one trace under the tracker's metric.
    pub fn update(&mut self, trace: &StateTrace) -> Result<()> {
        match self.metric() {
            CoverageMetric::HsC => self.scan_hidden(trace, |h| {
                let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                move |v: f64| v == max
            }),
            CoverageMetric::Nc => {
                let thr = self.config.nc_threshold;
                self.scan_hidden(trace, |_| move |v: f64| v > thr)
            }
            CoverageMetric::CsC => self.scan_cells(trace)?,
        }
        Ok(())
    }

    fn scan_hidden<F, P>(&mut self, trace: &StateTrace, make_pred: F)
    where
        F: Fn(&[f64]) -> P,
        P: Fn(f64) -> bool,
    {
        let (tt, ll, bb, _) = trace.dims();
        for t in 0..tt {
            for l in 0..ll {
                for b in (0..bb).filter(|&b| trace.is_valid(t, b)) {
                    let h = trace.hidden_vec(t, l, b);
                    let covered = make_pred(h);
                    self.total_count += h.len() as u64;
                    for (e, &v) in h.iter().enumerate() {
                        if covered(v) {
                            self.covered_count += 1;
                            self.position_map.insert((t, l, e));
                        }
                    }
                }
            }
        }
    }

    fn scan_cells(&mut self, trace: &StateTrace) -> Result<()> {
        let cell = trace.cell.as_ref().ok_or_else(|| Error::MetricMismatch {
            metric: "CS_C",
            reason: "trace has no cell states (model is not an LSTM)".into(),
        })?;
        let (tt, ll, bb, _) = trace.dims();
        let top = self.config.num_sections() - 1;
        for t in 0..tt {
            for l in 0..ll {
                for b in (0..bb).filter(|&b| trace.is_valid(t, b)) {
                    let c = cell.slice(&[t, l, b]);
                    self.total_count += c.len() as u64;
                    for (e, &v) in c.iter().enumerate() {
                        let s = self.config.section_of(v.tanh());
                        self.section_counts[s] += 1;
                        if s == top {
                            self.covered_count += 1;
                            self.position_map.insert((t, l, e));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Fold another tracker of the same configuration into this one.
    pub fn merge(&mut self, other: &CoverageTracker) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Config("cannot merge trackers with different configurations".into()));
        }
        self.covered_count += other.covered_count;
        self.total_count += other.total_count;
        for (a, b) in self.section_counts.iter_mut().zip(&other.section_counts) {
            *a += b;
        }
        self.position_map.extend(other.position_map.iter().copied());
        Ok(())
    }
}

fn check_metric(tracker: &CoverageTracker, metric: CoverageMetric) -> Result<()> {
    if tracker.metric() != metric {
        return Err(Error::Config(format!(
            "tracker measures {}, not {metric}",
            tracker.metric()
        )));
    }
    Ok(())
}

pub fn hs_update(tracker: &mut CoverageTracker, trace: &StateTrace) -> Result<()> {
    check_metric(tracker, CoverageMetric::HsC)?;
    tracker.update(trace)
}

pub fn cs_update(tracker: &mut CoverageTracker, trace: &StateTrace) -> Result<()> {
    check_metric(tracker, CoverageMetric::CsC)?;
    tracker.update(trace)
}

pub fn nc_update(tracker: &mut CoverageTracker, trace: &StateTrace) -> Result<()> {
    check_metric(tracker, CoverageMetric::Nc)?;
    tracker.update(trace)
}

/// Up to `m` uncovered states closest to becoming covered, by ascending gap
/// then `(t, l, b, e)`. Only states with a strictly positive gap qualify.
///
/// * HS_C: gap = `max(h) - h_e`
/// * NC: gap = `threshold - h_e`
/// * CS_C: gap = `v_{Sec-1} - tanh(c_e)`
pub fn select_targets(
    trace: &StateTrace,
    tracker: &CoverageTracker,
    m: usize,
) -> Result<Vec<StateRef>> {
    if m == 0 {
        return Err(Error::Config("target count m must be at least 1".into()));
    }
    let metric = tracker.metric();
    let cell = match metric {
        CoverageMetric::CsC => Some(trace.cell.as_ref().ok_or_else(|| Error::MetricMismatch {
            metric: "CS_C",
            reason: "trace has no cell states (model is not an LSTM)".into(),
        })?),
        _ => None,
    };
    let (tt, ll, bb, _) = trace.dims();
    let mut candidates: Vec<(f64, StateRef)> = Vec::new();
    for t in 0..tt {
        for l in 0..ll {
            for b in (0..bb).filter(|&b| trace.is_valid(t, b)) {
                let h = trace.hidden_vec(t, l, b);
                let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for e in 0..h.len() {
                    if tracker.is_covered(t, l, e) {
                        continue;
                    }
                    let (gap, r) = match (metric, cell) {
                        (CoverageMetric::HsC, _) => (max - h[e], StateRef::hidden(t, l, b, e)),
                        (CoverageMetric::Nc, _) => (
                            tracker.config.nc_threshold - h[e],
                            StateRef::hidden(t, l, b, e),
                        ),
                        (CoverageMetric::CsC, Some(c)) => (
                            tracker.config.upper_boundary() - c.get(&[t, l, b, e]).tanh(),
                            StateRef::cell(t, l, b, e),
                        ),
                        (CoverageMetric::CsC, None) => unreachable!("checked above"),
                    };
                    if gap > 0.0 {
                        candidates.push((gap, r));
                    }
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.truncate(m);
    Ok(candidates.into_iter().map(|(_, r)| r).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_trace(dims: [usize; 4], seed: u64, spread: f64, with_cell: bool) -> StateTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = Tensor::uniform(&dims, -1.0, 1.0, &mut rng);
        let cell = with_cell.then(|| Tensor::uniform(&dims, -spread, spread, &mut rng));
        let lengths = (0..dims[2]).map(|_| rng.random_range(0..=dims[0])).collect();
        StateTrace::new(hidden, cell, lengths).unwrap()
    }

    fn single(h: &[f64], c: Option<&[f64]>) -> StateTrace {
        let e = h.len();
        StateTrace::new(
            Tensor::new(vec![1, 1, 1, e], h.to_vec()).unwrap(),
            c.map(|c| Tensor::new(vec![1, 1, 1, e], c.to_vec()).unwrap()),
            vec![1],
        )
        .unwrap()
    }

    fn tracker(metric: CoverageMetric) -> CoverageTracker {
        CoverageTracker::new(CoverageConfig::new(metric)).unwrap()
    }

    // Independent re-scan: (covered, total, positions, sections).
    fn brute(trace: &StateTrace, cfg: &CoverageConfig) -> (u64, u64, BTreeSet<Position>, Vec<u64>) {
        let (_, ll, bb, ee) = trace.dims();
        let n = cfg.num_sections();
        let (mut cov, mut tot, mut pos, mut sec) = (0, 0, BTreeSet::new(), vec![0u64; n]);
        for b in 0..bb {
            for t in 0..trace.step_lengths[b] {
                for l in 0..ll {
                    for e in 0..ee {
                        tot += 1;
                        let h = trace.hidden.get(&[t, l, b, e]);
                        let hit = match cfg.metric {
                            CoverageMetric::HsC => {
                                (0..ee).all(|k| trace.hidden.get(&[t, l, b, k]) <= h)
                            }
                            CoverageMetric::Nc => h > cfg.nc_threshold,
                            CoverageMetric::CsC => {
                                let a = trace.cell.as_ref().unwrap().get(&[t, l, b, e]).tanh();
                                let v = &cfg.section_edges;
                                let mut found = None;
                                for i in 0..n {
                                    let inside = if i + 1 == n {
                                        v[i] <= a && a <= v[i + 1]
                                    } else {
                                        v[i] <= a && a < v[i + 1]
                                    };
                                    if inside {
                                        assert!(found.is_none(), "overlapping sections");
                                        found = Some(i);
                                    }
                                }
                                let i = found.expect("gap between sections");
                                sec[i] += 1;
                                i + 1 == n
                            }
                        };
                        if hit {
                            cov += 1;
                            pos.insert((t, l, e));
                        }
                    }
                }
            }
        }
        (cov, tot, pos, sec)
    }

    fn assert_matches_brute(metric: CoverageMetric, seed: u64) {
        let trace = random_trace([3, 2, 2, 5], seed, 3.0, true);
        let mut tr = tracker(metric);
        tr.update(&trace).unwrap();
        let (cov, tot, pos, sec) = brute(&trace, tr.config());
        assert_eq!(tr.covered_count(), cov);
        assert_eq!(tr.total_count(), tot);
        assert_eq!(tr.position_map(), &pos);
        if metric == CoverageMetric::CsC {
            assert_eq!(tr.section_counts(), sec.as_slice());
        }
    }

    #[test]
    fn hs_single_argmax() {
        let mut tr = tracker(CoverageMetric::HsC);
        hs_update(&mut tr, &single(&[0.1, 0.9, 0.3], None)).unwrap();
        assert_eq!((tr.covered_count(), tr.total_count()), (1, 3));
        assert!((tr.ratio() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hs_ties_all_covered() {
        let mut tr = tracker(CoverageMetric::HsC);
        hs_update(&mut tr, &single(&[0.5, 0.5], None)).unwrap();
        assert_eq!((tr.covered_count(), tr.total_count()), (2, 2));
    }

    #[test]
    fn hs_matches_brute_force() {
        assert_matches_brute(CoverageMetric::HsC, 9);
    }

    #[test]
    fn cs_sections() {
        let cfg = CoverageConfig::new(CoverageMetric::CsC);
        assert_eq!(cfg.section_of(0.0_f64.tanh()), 2);
        assert_eq!(cfg.section_of(10.0_f64.tanh()), 4);
        assert_eq!(cfg.section_of(1.0), 4);
        assert_eq!(cfg.section_of(-1.0), 0);
        assert_eq!(cfg.section_of(-0.2), 1);
        assert_eq!(cfg.section_of(0.2), 3);
        let mut tr = tracker(CoverageMetric::CsC);
        cs_update(&mut tr, &single(&[0.0, 0.0], Some(&[0.0, 10.0]))).unwrap();
        assert_eq!(tr.section_counts(), &[0, 0, 1, 0, 1]);
        assert_eq!(tr.covered_count(), 1);
    }

    #[test]
    fn cs_matches_brute_force() {
        assert_matches_brute(CoverageMetric::CsC, 21);
    }

    #[test]
    fn cs_without_cells_is_mismatch() {
        let mut tr = tracker(CoverageMetric::CsC);
        let err = cs_update(&mut tr, &single(&[0.1], None)).unwrap_err();
        assert!(matches!(err, Error::MetricMismatch { .. }));
    }

    #[test]
    fn nc_threshold() {
        let mut tr = tracker(CoverageMetric::Nc);
        nc_update(&mut tr, &single(&[0.6, 0.4], None)).unwrap();
        assert_eq!((tr.covered_count(), tr.total_count()), (1, 2));
        let mut tr = tracker(CoverageMetric::Nc);
        nc_update(&mut tr, &single(&[0.0; 4], None)).unwrap();
        assert_eq!(tr.covered_count(), 0);
    }

    #[test]
    fn nc_matches_brute_force() {
        assert_matches_brute(CoverageMetric::Nc, 2);
    }

    #[test]
    fn wrong_update_function_is_rejected() {
        let mut tr = tracker(CoverageMetric::Nc);
        assert!(hs_update(&mut tr, &single(&[0.1], None)).is_err());
    }

    #[test]
    fn edges_are_validated() {
        let mut cfg = CoverageConfig::new(CoverageMetric::CsC);
        cfg.section_edges = vec![-1.0, 0.5, 0.2, 1.0];
        assert!(CoverageTracker::new(cfg.clone()).is_err());
        cfg.section_edges = vec![-0.9, 1.0];
        assert!(CoverageTracker::new(cfg).is_err());
        let e = equal_sections(5);
        let want = [-1.0, -0.6, -0.2, 0.2, 0.6, 1.0];
        assert!(e.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(e[0] == -1.0 && e[5] == 1.0);
    }

    #[test]
    fn select_smallest_gap() {
        let trace = single(&[0.9, 0.85, 0.1], None);
        let mut tr = tracker(CoverageMetric::HsC);
        tr.position_map.insert((0, 0, 0));
        let got = select_targets(&trace, &tr, 1).unwrap();
        assert_eq!(got, vec![StateRef::hidden(0, 0, 0, 1)]);
    }

    #[test]
    fn select_none_when_all_covered() {
        let trace = single(&[0.9, 0.85, 0.1], None);
        let mut tr = tracker(CoverageMetric::HsC);
        tr.update(&trace).unwrap();
        for e in 0..3 {
            tr.position_map.insert((0, 0, e));
        }
        assert!(select_targets(&trace, &tr, 5).unwrap().is_empty());
    }

    fn brute_select(trace: &StateTrace, tr: &CoverageTracker, m: usize) -> Vec<StateRef> {
        let (tt, ll, bb, ee) = trace.dims();
        let mut all = Vec::new();
        for t in 0..tt {
            for l in 0..ll {
                for b in 0..bb {
                    for e in 0..ee {
                        if t >= trace.step_lengths[b] || tr.position_map().contains(&(t, l, e)) {
                            continue;
                        }
                        let h = trace.hidden_vec(t, l, b);
                        let gap = match tr.metric() {
                            CoverageMetric::HsC => {
                                h.iter().cloned().fold(f64::MIN, f64::max) - h[e]
                            }
                            CoverageMetric::Nc => tr.config().nc_threshold - h[e],
                            CoverageMetric::CsC => {
                                0.6 - trace.cell.as_ref().unwrap().get(&[t, l, b, e]).tanh()
                            }
                        };
                        let which = if tr.metric() == CoverageMetric::CsC {
                            StateKind::Cell
                        } else {
                            StateKind::Hidden
                        };
                        if gap > 0.0 {
                            all.push((gap, (t, l, b, e), which));
                        }
                    }
                }
            }
        }
        all.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
        all.iter()
            .take(m)
            .map(|&(_, (t, l, b, e), which)| StateRef { t, l, b, e, which })
            .collect()
    }

    #[test]
    fn select_matches_full_sort() {
        for metric in CoverageMetric::ALL {
            let warm = random_trace([3, 2, 2, 5], 16, 2.0, true);
            let trace = random_trace([3, 2, 2, 5], 17, 2.0, true);
            let mut tr = tracker(metric);
            tr.update(&warm).unwrap();
            let got = select_targets(&trace, &tr, 4).unwrap();
            assert_eq!(got, brute_select(&trace, &tr, 4), "{metric}");
            assert!(got.len() <= 4);
        }
    }

    fn arb_trace() -> impl Strategy<Value = StateTrace> {
        (1usize..=5, 1usize..=3, 1usize..=4, 1usize..=8, any::<u64>())
            .prop_map(|(t, l, b, e, seed)| random_trace([t, l, b, e], seed, 50.0, true))
    }

    proptest! {
        #[test]
        fn ratios_bounded_and_partitioned(traces in prop::collection::vec(arb_trace(), 1..4)) {
            for metric in CoverageMetric::ALL {
                let mut tr = tracker(metric);
                for trace in &traces {
                    let before: Vec<u64> = tr.section_counts().to_vec();
                    let total_before = tr.total_count();
                    tr.update(trace).unwrap();
                    prop_assert!(tr.covered_count() <= tr.total_count());
                    prop_assert!((0.0..=1.0).contains(&tr.ratio()));
                    if metric == CoverageMetric::CsC {
                        let added: u64 = tr.section_counts().iter().zip(&before).map(|(a, b)| a - b).sum();
                        prop_assert_eq!(added, tr.total_count() - total_before);
                    }
                }
            }
        }

        #[test]
        fn merge_commutes(a in arb_trace(), b in arb_trace()) {
            for metric in CoverageMetric::ALL {
                let mut ta = tracker(metric);
                ta.update(&a).unwrap();
                let mut tb = tracker(metric);
                tb.update(&b).unwrap();
                let mut ab = ta.clone();
                ab.merge(&tb).unwrap();
                let mut ba = tb.clone();
                ba.merge(&ta).unwrap();
                prop_assert_eq!(&ab, &ba);
                let mut seq = tracker(metric);
                seq.update(&a).unwrap();
                seq.update(&b).unwrap();
                prop_assert_eq!(&ab, &seq);
            }
        }

        #[test]
        fn hs_floor_is_one_per_vector(trace in arb_trace()) {
            let mut tr = tracker(CoverageMetric::HsC);
            tr.update(&trace).unwrap();
            prop_assert!(tr.covered_count() >= trace.valid_vectors() as u64);
        }

        #[test]
        fn selection_is_deterministic(trace in arb_trace(), m in 1usize..6) {
            for metric in CoverageMetric::ALL {
                let tr = tracker(metric);
                let a = select_targets(&trace, &tr, m).unwrap();
                let b = select_targets(&trace, &tr, m).unwrap();
                prop_assert!(a.len() <= m);
                for r in &a {
                    prop_assert!(r.value(&trace).is_some());
                }
                prop_assert_eq!(a, b);
            }
        }
    }
}
