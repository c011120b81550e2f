//! Step rehash: inter-step similarity maps, key step search, and denoising
//! runs that skip non-key steps by reusing the cached output of the final
//! up block's temporal layer.

use serde::{Deserialize, Serialize};

use crate::error::RehashError;
use crate::tensor::{cosine_similarity, Scalar, Tensor};

/// K×K cosine similarities between per-step outputs of one probe node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub k: usize,
    pub values: Vec<Vec<f64>>,
    pub probe_label: String,
}

impl SimilarityMap {
    /// Validates shape, unit diagonal, symmetry (1e-6) and range.
    pub fn new(values: Vec<Vec<f64>>, probe_label: impl Into<String>) -> Result<Self, RehashError> {
        let k = values.len();
        if k == 0 {
            return Err(RehashError::BadMap("empty map".into()));
        }
        for (i, row) in values.iter().enumerate() {
            if row.len() != k {
                return Err(RehashError::BadMap(format!("row {i} has {} entries, expected {k}", row.len())));
            }
            if row[i] != 1.0 {
                return Err(RehashError::BadMap(format!("diagonal entry {i} is {}", row[i])));
            }
            for (j, &v) in row.iter().enumerate() {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(RehashError::BadMap(format!("entry ({i},{j}) = {v} outside [-1, 1]")));
                }
                if (v - values[j][i]).abs() > 1e-6 {
                    return Err(RehashError::BadMap(format!("entries ({i},{j}) and ({j},{i}) differ")));
                }
            }
        }
        Ok(SimilarityMap { k, values, probe_label: probe_label.into() })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Mean of `S[i][i−1]` over consecutive step pairs; `None` when K = 1.
    pub fn mean_adjacent(&self) -> Option<f64> {
        (self.k > 1).then(|| (1..self.k).map(|i| self.values[i][i - 1]).sum::<f64>() / (self.k - 1) as f64)
    }

    pub fn min_adjacent(&self) -> Option<f64> {
        (1..self.k).map(|i| self.values[i][i - 1]).reduce(f64::min)
    }

    /// CSV with a header row and a leading column of step indices. Values
    /// use the shortest representation that parses back to the same f64.
    pub fn export_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["step".to_string()];
        header.extend((0..self.k).map(|j| j.to_string()));
        w.write_record(&header).expect("in-memory write");
        for (i, row) in self.values.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    pub fn parse_csv(text: &str, probe_label: impl Into<String>) -> Result<Self, RehashError> {
        let bad = |m: String| RehashError::BadMap(m);
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let k = header.len().saturating_sub(1);
        for (j, h) in header.iter().skip(1).enumerate() {
            if h.trim() != j.to_string() {
                return Err(bad(format!("header column {} is {h:?}, expected {j}", j + 1)));
            }
        }
        let mut values = Vec::with_capacity(k);
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.get(0).map(str::trim) != Some(i.to_string().as_str()) {
                return Err(bad(format!("row {i} is labelled {:?}", rec.get(0))));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>().map_err(|e| bad(format!("row {i}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            values.push(row);
        }
        if values.len() != k {
            return Err(bad(format!("{} rows for {k} columns", values.len())));
        }
        SimilarityMap::new(values, probe_label)
    }
}

/// Pairwise cosine similarities of a per-step trace.
pub fn build_similarity_map<T: Scalar>(trace: &[Tensor<T>], probe_label: &str) -> Result<SimilarityMap, RehashError> {
    let k = trace.len();
    let mut values = vec![vec![1.0; k]; k];
    for i in 0..k {
        // the diagonal is defined as exactly 1 but a zero tensor still fails
        cosine_similarity(&trace[i], &trace[i])?;
        for j in 0..i {
            let s = cosine_similarity(&trace[i], &trace[j])?;
            values[i][j] = s;
            values[j][i] = s;
        }
    }
    SimilarityMap::new(values, probe_label)
}

/// Key steps `G` (computed in full) for a run of `k` steps, each other step
/// reusing the cache written at its donor, the latest key step before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    #[serde(rename = "K")]
    pub k: usize,
    pub gamma: Option<f64>,
    pub key_steps: Vec<usize>,
}

impl StepSchedule {
    pub fn new(k: usize, key_steps: Vec<usize>, gamma: Option<f64>) -> Result<Self, RehashError> {
        let s = StepSchedule { k, gamma, key_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn all_key(k: usize) -> Self {
        StepSchedule { k, gamma: None, key_steps: (0..k).collect() }
    }

    pub fn validate(&self) -> Result<(), RehashError> {
        let bad = |m: String| Err(RehashError::InvalidSchedule(m));
        if self.k == 0 {
            return bad("K must be ≥ 1".into());
        }
        if let Some(g) = self.gamma {
            check_gamma(g)?;
        }
        if self.key_steps.first() != Some(&0) || self.key_steps.last() != Some(&(self.k - 1)) {
            return bad(format!("key steps must start at 0 and end at {}", self.k - 1));
        }
        if self.key_steps.windows(2).any(|w| w[0] >= w[1]) {
            return bad("key steps must be strictly increasing".into());
        }
        Ok(())
    }

    pub fn is_key(&self, step: usize) -> bool {
        self.key_steps.binary_search(&step).is_ok()
    }

    /// Latest key step before `step`, or `None` when `step` is itself key.
    pub fn donor(&self, step: usize) -> Option<usize> {
        match self.key_steps.binary_search(&step) {
            Ok(_) => None,
            Err(pos) => pos.checked_sub(1).map(|p| self.key_steps[p]),
        }
    }

    pub fn donors(&self) -> Vec<Option<usize>> {
        (0..self.k).map(|s| self.donor(s)).collect()
    }
}

pub fn check_gamma(gamma: f64) -> Result<(), RehashError> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(RehashError::BadThreshold(gamma))
    }
}

/// Key step search: walk `i` forward while `S[i][j] ≥ γ` against the
/// current donor `j`; on failure make `i` a key step and the new donor.
/// `K − 1` is always added; the result is sorted without duplicates.
pub fn key_step_search(s: &SimilarityMap, gamma: f64, k: usize) -> Result<StepSchedule, RehashError> {
    check_gamma(gamma)?;
    if k != s.k {
        return Err(RehashError::ScheduleMismatch { schedule: s.k, run: k });
    }
    let (mut i, mut j) = (0, 0);
    let mut g = vec![0];
    while i < k {
        if s.get(i, j) >= gamma {
            i += 1;
        } else {
            g.push(i);
            j = i;
        }
    }
    g.push(k - 1);
    g.sort_unstable();
    g.dedup();
    StepSchedule::new(k, g, Some(gamma))
}

/// Largest γ whose schedule has exactly `target` key steps.
///
/// The schedule only changes where γ crosses a value present in `S`, and
/// within each band `(a, b]` the largest choice is `b` itself, so scanning
/// the map's distinct values in (0, 1] visits every reachable schedule.
pub fn gamma_for_target(s: &SimilarityMap, target: usize) -> Result<StepSchedule, RehashError> {
    let mut candidates: Vec<f64> = s.values.iter().flatten().copied().filter(|&v| v > 0.0 && v <= 1.0).collect();
    candidates.push(1.0);
    candidates.sort_by(|a, b| b.total_cmp(a));
    candidates.dedup();
    let mut reachable = Vec::new();
    for gamma in candidates {
        let sched = key_step_search(s, gamma, s.k)?;
        if sched.key_steps.len() == target {
            return Ok(sched);
        }
        reachable.push(sched.key_steps.len());
    }
    reachable.sort_unstable();
    reachable.dedup();
    Err(RehashError::UnreachableTarget { target, reachable })
}

/// Runs a denoising loop that computes the full network only on the
/// schedule's key steps. Non-key steps run the tail after the probe on the
/// nearest preceding key step's cached probe output.
pub fn rehash_execute<T: Scalar>(
    cfg: &crate::harness::DenoiseRunConfig,
    schedule: &StepSchedule,
) -> Result<crate::harness::DenoiseRun<T>, crate::error::RunError> {
    schedule.validate()?;
    if schedule.k != cfg.unet.steps {
        return Err(RehashError::ScheduleMismatch { schedule: schedule.k, run: cfg.unet.steps }.into());
    }
    let cfg = crate::harness::DenoiseRunConfig { schedule: Some(schedule.clone()), ..cfg.clone() };
    crate::harness::run_denoise(&cfg, &[])
}
