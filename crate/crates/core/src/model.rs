//! Shared data model: embeddings, trials, keys, scores, durations and
//! operating points, plus the alignment rule every downstream consumer uses.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::{DMatrix, DVectorView};

use crate::error::{invalid, Error, Result};

/// One fixed-dimension embedding tied to a segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub segment_id: String,
    pub vector: Vec<f64>,
}

impl Embedding {
    pub fn new(segment_id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            segment_id: segment_id.into(),
            vector,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn view(&self) -> DVectorView<'_, f64> {
        DVectorView::from_slice(&self.vector, self.vector.len())
    }
}

/// Ordered collection of embeddings of one dimension with optional
/// per-segment speaker labels, domain tags and durations (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    records: Vec<Embedding>,
    index: HashMap<String, usize>,
    labels: Option<HashMap<String, String>>,
    domains: Option<HashMap<String, String>>,
    durations: Option<HashMap<String, f64>>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, records: Vec<Embedding>) -> Result<Self> {
        if dim == 0 {
            return invalid("embedding dimension must be at least 1");
        }
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.segment_id.is_empty() {
                return invalid(format!("record {i} has an empty segment id"));
            }
            if r.vector.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: r.vector.len(),
                });
            }
            if let Some(j) = r.vector.iter().position(|v| !v.is_finite()) {
                return invalid(format!(
                    "segment '{}' has a non-finite component at index {j}",
                    r.segment_id
                ));
            }
            if index.insert(r.segment_id.clone(), i).is_some() {
                return invalid(format!("duplicate segment id '{}'", r.segment_id));
            }
        }
        Ok(Self {
            dim,
            records,
            index,
            labels: None,
            domains: None,
            durations: None,
        })
    }

    /// Builds a set from rows of a matrix, ids taken in order.
    pub fn from_rows(ids: Vec<String>, rows: &DMatrix<f64>) -> Result<Self> {
        if ids.len() != rows.nrows() {
            return invalid(format!(
                "{} ids for a matrix with {} rows",
                ids.len(),
                rows.nrows()
            ));
        }
        let records = ids
            .into_iter()
            .enumerate()
            .map(|(i, id)| Embedding::new(id, rows.row(i).iter().copied().collect()))
            .collect();
        Self::new(rows.ncols(), records)
    }

    /// Attaches speaker labels; every record must be labeled and no label may
    /// name an unknown segment.
    pub fn with_labels(mut self, labels: HashMap<String, String>) -> Result<Self> {
        self.check_map_keys(labels.keys(), "label")?;
        if let Some(r) = self.records.iter().find(|r| !labels.contains_key(&r.segment_id)) {
            return invalid(format!("segment '{}' has no speaker label", r.segment_id));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_domains(mut self, domains: HashMap<String, String>) -> Result<Self> {
        self.check_map_keys(domains.keys(), "domain")?;
        self.domains = Some(domains);
        Ok(self)
    }

    pub fn with_durations(mut self, durations: HashMap<String, f64>) -> Result<Self> {
        self.check_map_keys(durations.keys(), "duration")?;
        if let Some((id, d)) = durations.iter().find(|(_, d)| !(d.is_finite() && **d > 0.0)) {
            return invalid(format!("segment '{id}' has nonpositive duration {d}"));
        }
        self.durations = Some(durations);
        Ok(self)
    }

    fn check_map_keys<'a>(&self, keys: impl Iterator<Item = &'a String>, what: &str) -> Result<()> {
        for k in keys {
            if !self.index.contains_key(k) {
                return invalid(format!("{what} given for unknown segment '{k}'"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Embedding] {
        &self.records
    }

    pub fn position(&self, segment_id: &str) -> Option<usize> {
        self.index.get(segment_id).copied()
    }

    pub fn get(&self, segment_id: &str) -> Option<&Embedding> {
        self.position(segment_id).map(|i| &self.records[i])
    }

    pub fn labels(&self) -> Option<&HashMap<String, String>> {
        self.labels.as_ref()
    }

    pub fn domains(&self) -> Option<&HashMap<String, String>> {
        self.domains.as_ref()
    }

    pub fn durations(&self) -> Option<&HashMap<String, f64>> {
        self.durations.as_ref()
    }

    pub fn label(&self, segment_id: &str) -> Option<&str> {
        self.labels.as_ref()?.get(segment_id).map(String::as_str)
    }

    pub fn domain(&self, segment_id: &str) -> Option<&str> {
        self.domains.as_ref()?.get(segment_id).map(String::as_str)
    }

    pub fn duration(&self, segment_id: &str) -> Option<f64> {
        self.durations.as_ref()?.get(segment_id).copied()
    }

    /// Record indices grouped by speaker, speakers in sorted order.
    pub fn speakers(&self) -> Result<BTreeMap<String, Vec<usize>>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Invalid("embedding set has no speaker labels".into()))?;
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups.entry(labels[&r.segment_id].clone()).or_default().push(i);
        }
        Ok(groups)
    }

    /// Embeddings as rows of an `n × dim` matrix.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), self.dim, |i, j| self.records[i].vector[j])
    }

    /// Same metadata, new vectors (one per record, same order).
    pub(crate) fn replace_vectors(&self, dim: usize, vectors: Vec<Vec<f64>>) -> Result<Self> {
        debug_assert_eq!(vectors.len(), self.records.len());
        let records = self
            .records
            .iter()
            .zip(vectors)
            .map(|(r, v)| Embedding::new(r.segment_id.clone(), v))
            .collect();
        let mut out = Self::new(dim, records)?;
        out.labels = self.labels.clone();
        out.domains = self.domains.clone();
        out.durations = self.durations.clone();
        Ok(out)
    }

    /// Subset of records selected by predicate, metadata restricted accordingly.
    pub fn filter(&self, mut keep: impl FnMut(&Embedding) -> bool) -> Result<Self> {
        let records: Vec<Embedding> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        let mut out = Self::new(self.dim, records)?;
        let restrict = |m: &HashMap<String, String>| -> HashMap<String, String> {
            m.iter()
                .filter(|(k, _)| out.index.contains_key(*k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        let labels = self.labels.as_ref().map(restrict);
        let domains = self.domains.as_ref().map(restrict);
        let durations = self.durations.as_ref().map(|m| {
            m.iter()
                .filter(|(k, _)| out.index.contains_key(*k))
                .map(|(k, v)| (k.clone(), *v))
                .collect()
        });
        out.labels = labels;
        out.domains = domains;
        out.durations = durations;
        Ok(out)
    }
}

/// One (enrollment model, probe segment) comparison.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Trial {
    pub model_id: String,
    pub segment_id: String,
}

impl Trial {
    pub fn new(model_id: impl Into<String>, segment_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            segment_id: segment_id.into(),
        }
    }
}

impl fmt::Display for Trial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.model_id, self.segment_id)
    }
}

pub type TrialList = Vec<Trial>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialLabel {
    Target,
    Nontarget,
}

impl TrialLabel {
    pub fn is_target(self) -> bool {
        matches!(self, TrialLabel::Target)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::Nontarget => "nontarget",
        }
    }
}

/// Ground truth for a trial list, with optional per-trial partition labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialKey {
    trials: TrialList,
    labels: Vec<TrialLabel>,
    partitions: Option<Vec<String>>,
}

impl TrialKey {
    pub fn new(
        trials: TrialList,
        labels: Vec<TrialLabel>,
        partitions: Option<Vec<String>>,
    ) -> Result<Self> {
        if trials.len() != labels.len() {
            return invalid(format!(
                "{} labels for {} trials",
                labels.len(),
                trials.len()
            ));
        }
        if let Some(p) = &partitions {
            if p.len() != trials.len() {
                return invalid(format!(
                    "{} partition labels for {} trials",
                    p.len(),
                    trials.len()
                ));
            }
        }
        validate_trials(&trials)?;
        Ok(Self {
            trials,
            labels,
            partitions,
        })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn labels(&self) -> &[TrialLabel] {
        &self.labels
    }

    pub fn partitions(&self) -> Option<&[String]> {
        self.partitions.as_deref()
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.labels.iter().filter(|l| l.is_target()).count()
    }

    pub fn n_nontargets(&self) -> usize {
        self.len() - self.n_targets()
    }

    /// Key restricted to the given trial indices (in that order).
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            trials: indices.iter().map(|&i| self.trials[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            partitions: self
                .partitions
                .as_ref()
                .map(|p| indices.iter().map(|&i| p[i].clone()).collect()),
        }
    }
}

pub(crate) fn validate_trials(trials: &[Trial]) -> Result<()> {
    for (i, t) in trials.iter().enumerate() {
        if t.model_id.is_empty() || t.segment_id.is_empty() {
            return invalid(format!("trial {i} has an empty identifier"));
        }
    }
    Ok(())
}

/// One finite score per trial, aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    trials: TrialList,
    scores: Vec<f64>,
}

impl ScoreSet {
    pub fn new(trials: TrialList, scores: Vec<f64>) -> Result<Self> {
        if trials.len() != scores.len() {
            return invalid(format!(
                "{} scores for {} trials",
                scores.len(),
                trials.len()
            ));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return invalid(format!("non-finite score for trial {}", trials[i]));
        }
        validate_trials(&trials)?;
        Ok(Self { trials, scores })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn into_parts(self) -> (TrialList, Vec<f64>) {
        (self.trials, self.scores)
    }

    /// New score set on the same trials.
    pub fn map(&self, f: impl FnMut(f64) -> f64) -> Result<Self> {
        Self::new(self.trials.clone(), self.scores.iter().copied().map(f).collect())
    }
}

/// Subsystem scores aligned to a key: `rows[i][j]` is subsystem `i` on key trial `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(names: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != rows.len() {
            return invalid("subsystem name count differs from row count");
        }
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return invalid("score matrix rows differ in length");
            }
        }
        Ok(Self { names, rows })
    }

    pub fn n_systems(&self) -> usize {
        self.rows.len()
    }

    pub fn n_trials(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn select_columns(&self, indices: &[usize]) -> Self {
        Self {
            names: self.names.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| indices.iter().map(|&j| r[j]).collect())
                .collect(),
        }
    }

    pub fn without_system(&self, k: usize) -> Self {
        let keep = |i: &usize| *i != k;
        Self {
            names: (0..self.n_systems()).filter(keep).map(|i| self.names[i].clone()).collect(),
            rows: (0..self.n_systems()).filter(keep).map(|i| self.rows[i].clone()).collect(),
        }
    }
}

/// Re-orders each subsystem's scores to the key's trial order.
pub fn align<S: AsRef<str>>(systems: &[(S, &ScoreSet)], key: &TrialKey) -> Result<ScoreMatrix> {
    align_trials(systems, key.trials())
}

/// Re-orders each subsystem's scores to the given trial order.
pub fn align_trials<S: AsRef<str>>(systems: &[(S, &ScoreSet)], trials: &[Trial]) -> Result<ScoreMatrix> {
    let mut names = Vec::with_capacity(systems.len());
    let mut rows = Vec::with_capacity(systems.len());
    for (name, set) in systems {
        let lookup: HashMap<(&str, &str), f64> = set
            .trials()
            .iter()
            .zip(set.scores())
            .map(|(t, &s)| ((t.model_id.as_str(), t.segment_id.as_str()), s))
            .collect();
        let row = trials
            .iter()
            .map(|t| {
                lookup
                    .get(&(t.model_id.as_str(), t.segment_id.as_str()))
                    .copied()
                    .ok_or_else(|| Error::MissingTrial {
                        subsystem: name.as_ref().to_string(),
                        model_id: t.model_id.clone(),
                        segment_id: t.segment_id.clone(),
                    })
            })
            .collect::<Result<Vec<f64>>>()?;
        names.push(name.as_ref().to_string());
        rows.push(row);
    }
    ScoreMatrix::new(names, rows)
}

/// Reference (summed over enrollment segments) and probe durations in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DurationInfo {
    pub reference: f64,
    pub probe: f64,
}

impl DurationInfo {
    pub fn new(reference: f64, probe: f64) -> Result<Self> {
        if !(reference > 0.0 && reference.is_finite() && probe > 0.0 && probe.is_finite()) {
            return invalid(format!(
                "durations must be positive, got reference {reference}, probe {probe}"
            ));
        }
        Ok(Self { reference, probe })
    }
}

/// Frame count at a 10 ms shift, never below one frame.
pub fn frames(seconds: f64) -> f64 {
    (seconds * 100.0).round().max(1.0)
}

/// Detection operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

/// The two working points averaged into C_primary.
pub const PRIMARY_OPERATING_POINTS: [OperatingPoint; 2] = [
    OperatingPoint {
        p_target: 0.01,
        c_miss: 1.0,
        c_fa: 1.0,
    },
    OperatingPoint {
        p_target: 0.005,
        c_miss: 1.0,
        c_fa: 1.0,
    },
];

impl OperatingPoint {
    pub fn new(p_target: f64, c_miss: f64, c_fa: f64) -> Result<Self> {
        if !(p_target > 0.0 && p_target < 1.0) {
            return invalid(format!("p_target must lie in (0,1), got {p_target}"));
        }
        if !(c_miss > 0.0 && c_fa > 0.0) {
            return invalid("costs must be positive");
        }
        Ok(Self {
            p_target,
            c_miss,
            c_fa,
        })
    }

    pub fn unit_cost(p_target: f64) -> Result<Self> {
        Self::new(p_target, 1.0, 1.0)
    }

    /// Bayes decision threshold for calibrated LLRs.
    pub fn bayes_threshold(&self) -> f64 {
        ((1.0 - self.p_target) * self.c_fa / (self.p_target * self.c_miss)).ln()
    }

    /// Cost of the better trivial system (accept all or reject all).
    pub fn normalizer(&self) -> f64 {
        (self.p_target * self.c_miss).min((1.0 - self.p_target) * self.c_fa)
    }
}

/// Maps each enrollment model to its segments. Models absent from the
/// manifest are single-segment models named after their segment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnrollmentManifest {
    models: BTreeMap<String, Vec<String>>,
}

impl EnrollmentManifest {
    pub fn new(models: BTreeMap<String, Vec<String>>) -> Result<Self> {
        for (m, segs) in &models {
            if m.is_empty() || segs.is_empty() || segs.iter().any(String::is_empty) {
                return invalid(format!("model '{m}' has an empty segment list or id"));
            }
            let mut seen = std::collections::HashSet::new();
            if let Some(s) = segs.iter().find(|s| !seen.insert(s.as_str())) {
                return invalid(format!("segment '{s}' listed twice for model '{m}'"));
            }
        }
        Ok(Self { models })
    }

    pub fn models(&self) -> &BTreeMap<String, Vec<String>> {
        &self.models
    }

    pub fn segments<'a>(&'a self, model_id: &'a str) -> Vec<&'a str> {
        match self.models.get(model_id) {
            Some(segs) => segs.iter().map(String::as_str).collect(),
            None => vec![model_id],
        }
    }

    /// Reference duration: sum of the model's segment durations.
    pub fn reference_duration(&self, model_id: &str, durations: &HashMap<String, f64>) -> Result<f64> {
        let mut total = 0.0;
        for seg in self.segments(model_id) {
            total += durations.get(seg).copied().ok_or_else(|| {
                Error::Invalid(format!("no duration for segment '{seg}' of model '{model_id}'"))
            })?;
        }
        Ok(total)
    }
}

/// Per-trial durations derived from a duration table and enrollment manifest.
pub fn trial_durations(
    trials: &[Trial],
    durations: &HashMap<String, f64>,
    manifest: &EnrollmentManifest,
) -> Result<Vec<DurationInfo>> {
    let mut cache: HashMap<&str, f64> = HashMap::new();
    trials
        .iter()
        .map(|t| {
            let reference = match cache.get(t.model_id.as_str()) {
                Some(&d) => d,
                None => {
                    let d = manifest.reference_duration(&t.model_id, durations)?;
                    cache.insert(t.model_id.as_str(), d);
                    d
                }
            };
            let probe = durations.get(&t.segment_id).copied().ok_or_else(|| {
                Error::Invalid(format!("no duration for probe segment '{}'", t.segment_id))
            })?;
            DurationInfo::new(reference, probe)
        })
        .collect()
}
