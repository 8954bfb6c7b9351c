//! Patient-level train/val/test split stratified by patient DR status.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, SynthError};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SplitName::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Patient ids per split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitAssignment {
    pub fn get(&self, name: SplitName) -> &BTreeSet<String> {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    fn get_mut(&mut self, name: SplitName) -> &mut BTreeSet<String> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn split_of(&self, patient_id: &str) -> Option<SplitName> {
        SplitName::ALL.into_iter().find(|&s| self.get(s).contains(patient_id))
    }

    /// Indices of dataset samples whose patient belongs to `name`.
    pub fn indices(&self, dataset: &Dataset, name: SplitName) -> Vec<usize> {
        let set = self.get(name);
        dataset
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| set.contains(&s.patient_id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Build from a per-sample split tag (e.g. the `split` column of `meta.csv`).
    pub fn from_tags(dataset: &Dataset, tags: &[SplitName]) -> Result<Self, SynthError> {
        let mut out = SplitAssignment::default();
        let mut seen: HashMap<&str, SplitName> = HashMap::new();
        for (s, &tag) in dataset.samples.iter().zip(tags) {
            if let Some(&prev) = seen.get(s.patient_id.as_str()) {
                if prev != tag {
                    return Err(SynthError::Split(format!(
                        "patient {} appears in both {prev} and {tag}",
                        s.patient_id
                    )));
                }
            }
            seen.insert(&s.patient_id, tag);
            out.get_mut(tag).insert(s.patient_id.clone());
        }
        Ok(out)
    }

    /// Check disjointness and coverage of `dataset`'s patients.
    pub fn validate(&self, dataset: &Dataset) -> Result<(), SynthError> {
        for (a, b) in [
            (SplitName::Train, SplitName::Val),
            (SplitName::Train, SplitName::Test),
            (SplitName::Val, SplitName::Test),
        ] {
            if let Some(p) = self.get(a).intersection(self.get(b)).next() {
                return Err(SynthError::Split(format!("patient {p} is in both {a} and {b}")));
            }
        }
        for p in dataset.patients() {
            if self.split_of(p).is_none() {
                return Err(SynthError::Split(format!("patient {p} is not assigned")));
            }
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `total` items across `fractions`.
fn allocate(total: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let raw = fractions.map(|f| f * total as f64);
    let mut out = raw.map(|r| r.floor() as usize);
    let mut rem = total - out.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rem == 0 {
            break;
        }
        out[i] += 1;
        rem -= 1;
    }
    out
}

/// Split patients into train/val/test.
///
/// Split sizes are fixed first by largest-remainder rounding of the
/// fractions over all patients; DR-positive patients (any positive image) are
/// then allocated across splits the same way, and the remaining places are
/// filled with negative patients. Each stratum is shuffled with a seeded RNG.
pub fn split_dataset(dataset: &Dataset, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment, SynthError> {
    let f = fractions.as_array();
    if f.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(SynthError::Split(format!(
            "fractions {f:?} must be non-negative and sum to 1"
        )));
    }
    if dataset.is_empty() {
        return Err(SynthError::Split("dataset is empty".into()));
    }
    let patients = dataset.patients();
    let mut positive: HashMap<&str, bool> = HashMap::new();
    for s in &dataset.samples {
        *positive.entry(s.patient_id.as_str()).or_default() |= s.dr_label == 1;
    }
    let mut pos: Vec<&str> = patients.iter().copied().filter(|p| positive[p]).collect();
    let mut neg: Vec<&str> = patients.iter().copied().filter(|p| !positive[p]).collect();

    let sizes = allocate(patients.len(), &f);
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(SynthError::Split(format!(
            "{} split would be empty with {} patients",
            SplitName::ALL[i],
            patients.len()
        )));
    }
    let pos_sizes = allocate(pos.len(), &f);
    if pos_sizes.iter().zip(&sizes).any(|(p, s)| p > s) {
        return Err(SynthError::Split("too few negative patients to stratify".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[seeds::tag::SPLIT]));
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let mut out = SplitAssignment::default();
    let (mut pi, mut ni) = (0, 0);
    for (k, name) in SplitName::ALL.into_iter().enumerate() {
        let set = out.get_mut(name);
        for p in &pos[pi..pi + pos_sizes[k]] {
            set.insert((*p).to_string());
        }
        pi += pos_sizes[k];
        let n_neg = sizes[k] - pos_sizes[k];
        for p in &neg[ni..ni + n_neg] {
            set.insert((*p).to_string());
        }
        ni += n_neg;
    }
    Ok(out)
}
