//! Deterministic replay mixing and the difficulty/risk curriculum.
//!
//! Every batch carries exact per-source counts (largest-remainder
//! apportionment of the configured ratio, 6:4 by default), each source is a
//! seeded shuffle that cycles independently when exhausted, and a linear
//! curriculum gate admits records whose difficulty and risk sit under
//! thresholds that ramp from `tau0` to 1 as training progresses.
//!
//! Corpus files are JSON lines, one [`CorpusRecord`] per line, `id`
//! mandatory and unique.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds::rng_for;

#[derive(Debug, Error)]
pub enum MixError {
    #[error("data error: {0}")]
    Data(String),
    #[error("source {0} is required by the allocation but empty")]
    EmptySource(&'static str),
    #[error("no {source} record admissible at progress {progress}")]
    NoAdmissible { source: &'static str, progress: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Domain,
    General,
    Safety,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    pub source: Source,
    /// In [0, 1]; when absent at load time it is back-filled from the
    /// corpus length quantile.
    #[serde(default)]
    pub difficulty: Option<f64>,
    /// In [0, 1]; defaults to 0 for non-safety sources.
    #[serde(default)]
    pub risk: Option<f64>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl CorpusRecord {
    pub fn difficulty(&self) -> f64 {
        self.difficulty.unwrap_or(0.0)
    }

    pub fn risk(&self) -> f64 {
        self.risk.unwrap_or(0.0)
    }
}

/// An exact ratio numerator/denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub const fn new(num: u64, den: u64) -> Self {
        Self { num, den }
    }
}

/// Which side of the domain:general split safety records ride on. They are
/// domain pre-training data by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SafetySide {
    #[default]
    Domain,
    General,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    /// Initial difficulty threshold.
    pub tau0: f64,
    /// Initial risk threshold.
    pub risk_tau0: f64,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self { tau0: 0.3, risk_tau0: 0.3 }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<(), MixError> {
        for (name, v) in [("tau0", self.tau0), ("risk_tau0", self.risk_tau0)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(MixError::Data(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Linear ramp: tau(p) = tau0 + (1 - tau0)·p, reaching 1 at p = 1.
    pub fn difficulty_threshold(&self, progress: f64) -> f64 {
        self.tau0 + (1.0 - self.tau0) * progress
    }

    pub fn risk_threshold(&self, progress: f64) -> f64 {
        self.risk_tau0 + (1.0 - self.risk_tau0) * progress
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixPlan {
    pub domain_ratio: Ratio,
    pub general_ratio: Ratio,
    pub batch_size: usize,
    pub seed: u64,
    pub curriculum: CurriculumSchedule,
    #[serde(default)]
    pub safety_side: SafetySide,
}

impl MixPlan {
    /// The 6:4 default.
    pub fn standard(batch_size: usize, seed: u64) -> Self {
        Self {
            domain_ratio: Ratio::new(6, 10),
            general_ratio: Ratio::new(4, 10),
            batch_size,
            seed,
            curriculum: CurriculumSchedule::default(),
            safety_side: SafetySide::Domain,
        }
    }

    pub fn validate(&self) -> Result<(), MixError> {
        if self.batch_size == 0 {
            return Err(MixError::Data("batch_size must be >= 1".into()));
        }
        for r in [self.domain_ratio, self.general_ratio] {
            if r.den == 0 {
                return Err(MixError::Data("ratio denominator must be non-zero".into()));
            }
        }
        // num_d/den_d + num_g/den_g must equal exactly 1.
        let lhs = (self.domain_ratio.num as u128) * (self.general_ratio.den as u128)
            + (self.general_ratio.num as u128) * (self.domain_ratio.den as u128);
        let rhs = (self.domain_ratio.den as u128) * (self.general_ratio.den as u128);
        if lhs != rhs {
            return Err(MixError::Data("mix ratios must sum to 1".into()));
        }
        self.curriculum.validate()
    }
}

/// Largest-remainder apportionment of `batch_size` across the given
/// ratios, in caller order. Exact integer arithmetic; leftover units go to
/// the largest fractional remainders, ties broken toward earlier sources.
pub fn allocate_counts(batch_size: usize, ratios: &[Ratio]) -> Vec<usize> {
    let n = batch_size as u128;
    let mut counts: Vec<usize> = Vec::with_capacity(ratios.len());
    // Remainders kept as exact fractions rem/den for cross-multiplied
    // comparison.
    let mut остatki: Vec<(u128, u128, usize)> = Vec::new();
    let mut assigned = 0usize;
    for (idx, r) in ratios.iter().enumerate() {
        let num = r.num as u128;
        let den = r.den as u128;
        let quota_num = n * num;
        let base = (quota_num / den) as usize;
        let rem = quota_num % den;
        counts.push(base);
        assigned += base;
        остatki.push((rem, den, idx));
    }
    let mut leftover = batch_size - assigned;
    // Sort by fractional remainder descending (a/b > c/d  ⇔  a·d > c·b),
    // ties toward the earlier source.
    остatki.sort_by(|a, b| {
        let left = b.0 * a.1; // b_rem * a_den
        let right = a.0 * b.1; // a_rem * b_den
        left.cmp(&right).then(a.2.cmp(&b.2))
    });
    let mut i = 0;
    while leftover > 0 {
        counts[остatki[i].2] += 1;
        leftover -= 1;
        i += 1;
    }
    counts
}

/// Curriculum admission: a record passes at `progress` iff both its
/// difficulty and risk are at or under the ramped thresholds (inclusive).
pub fn curriculum_gate(record: &CorpusRecord, progress: f64, schedule: &CurriculumSchedule) -> bool {
    record.difficulty() <= schedule.difficulty_threshold(progress)
        && record.risk() <= schedule.risk_threshold(progress)
}

/// Per-batch source counts, also serialized as the mixing audit log.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BatchCounts {
    pub domain: usize,
    pub general: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub records: Vec<CorpusRecord>,
    pub counts: BatchCounts,
}

struct CyclingSource<'a> {
    name: &'static str,
    records: &'a [CorpusRecord],
    order: Vec<usize>,
    pos: usize,
    cycle: u64,
    seed: u64,
}

impl<'a> CyclingSource<'a> {
    fn new(name: &'static str, records: &'a [CorpusRecord], seed: u64) -> Self {
        let mut source = Self { name, records, order: Vec::new(), pos: 0, cycle: 0, seed };
        source.reshuffle();
        source
    }

    fn reshuffle(&mut self) {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        let mut rng = rng_for(self.seed, &format!("mix-{}-cycle-{}", self.name, self.cycle));
        order.shuffle(&mut rng);
        self.order = order;
        self.pos = 0;
    }

    /// Next record admitted by the curriculum gate at `progress`. Scans at
    /// most one full pass over the source before giving up.
    fn next_admitted(
        &mut self,
        progress: f64,
        schedule: &CurriculumSchedule,
    ) -> Result<&'a CorpusRecord, MixError> {
        let mut scanned = 0;
        loop {
            if self.pos == self.order.len() {
                self.cycle += 1;
                self.reshuffle();
            }
            let record = &self.records[self.order[self.pos]];
            self.pos += 1;
            if curriculum_gate(record, progress, schedule) {
                return Ok(record);
            }
            scanned += 1;
            if scanned >= self.records.len() {
                return Err(MixError::NoAdmissible { source: self.name, progress });
            }
        }
    }
}

/// Deterministic mixed-batch generator over a domain-side and a
/// general-side stream.
pub struct MixStream<'a> {
    domain: CyclingSource<'a>,
    general: CyclingSource<'a>,
    plan: MixPlan,
    counts: BatchCounts,
}

impl<'a> MixStream<'a> {
    pub fn new(
        domain: &'a [CorpusRecord],
        general: &'a [CorpusRecord],
        plan: &MixPlan,
    ) -> Result<Self, MixError> {
        plan.validate()?;
        let alloc = allocate_counts(plan.batch_size, &[plan.domain_ratio, plan.general_ratio]);
        let counts = BatchCounts { domain: alloc[0], general: alloc[1] };
        if counts.domain > 0 && domain.is_empty() {
            return Err(MixError::EmptySource("domain"));
        }
        if counts.general > 0 && general.is_empty() {
            return Err(MixError::EmptySource("general"));
        }
        Ok(Self {
            domain: CyclingSource::new("domain", domain, plan.seed),
            general: CyclingSource::new("general", general, plan.seed),
            plan: plan.clone(),
            counts,
        })
    }

    /// The fixed per-batch allocation.
    pub fn batch_counts(&self) -> BatchCounts {
        self.counts
    }

    pub fn next_batch(&mut self, progress: f64) -> Result<Batch, MixError> {
        if !(0.0..=1.0).contains(&progress) {
            return Err(MixError::Data(format!("progress {progress} outside [0, 1]")));
        }
        let mut records = Vec::with_capacity(self.plan.batch_size);
        for _ in 0..self.counts.domain {
            records.push(self.domain.next_admitted(progress, &self.plan.curriculum)?.clone());
        }
        for _ in 0..self.counts.general {
            records.push(self.general.next_admitted(progress, &self.plan.curriculum)?.clone());
        }
        Ok(Batch { records, counts: self.counts })
    }
}

/// `n_batches` mixed batches at a fixed progress point.
pub fn make_batches(
    domain: &[CorpusRecord],
    general: &[CorpusRecord],
    plan: &MixPlan,
    progress: f64,
    n_batches: usize,
) -> Result<Vec<Batch>, MixError> {
    let mut stream = MixStream::new(domain, general, plan)?;
    (0..n_batches).map(|_| stream.next_batch(progress)).collect()
}

/// Splits a corpus into the two mixing sides, routing Safety records per
/// the plan.
pub fn split_by_side(
    records: Vec<CorpusRecord>,
    safety_side: SafetySide,
) -> (Vec<CorpusRecord>, Vec<CorpusRecord>) {
    let mut domain = Vec::new();
    let mut general = Vec::new();
    for record in records {
        match (record.source, safety_side) {
            (Source::Domain, _) => domain.push(record),
            (Source::General, _) => general.push(record),
            (Source::Safety, SafetySide::Domain) => domain.push(record),
            (Source::Safety, SafetySide::General) => general.push(record),
        }
    }
    (domain, general)
}

/// Back-fills missing difficulty labels with the record's text-length
/// quantile over the corpus, and missing risk with 0.
pub fn assign_default_scores(records: &mut [CorpusRecord]) {
    let mut lengths: Vec<usize> = records.iter().map(|r| r.text.len()).collect();
    lengths.sort_unstable();
    let n = lengths.len();
    for record in records.iter_mut() {
        if record.difficulty.is_none() {
            let len = record.text.len();
            let rank = lengths.partition_point(|&l| l < len);
            let quantile = if n <= 1 { 0.0 } else { rank as f64 / (n - 1) as f64 };
            record.difficulty = Some(quantile.min(1.0));
        }
        if record.risk.is_none() {
            record.risk = Some(0.0);
        }
    }
}

/// Reads a JSONL corpus, enforcing unique ids and score bounds.
pub fn read_corpus_jsonl(reader: impl BufRead) -> Result<Vec<CorpusRecord>, MixError> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| MixError::Data(format!("line {}: {e}", lineno + 1)))?;
        if record.id.is_empty() {
            return Err(MixError::Data(format!("line {}: empty id", lineno + 1)));
        }
        if !seen.insert(record.id.clone()) {
            return Err(MixError::Data(format!("duplicate record id {}", record.id)));
        }
        for (name, v) in [("difficulty", record.difficulty), ("risk", record.risk)] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(MixError::Data(format!(
                        "record {}: {name} {v} outside [0, 1]",
                        record.id
                    )));
                }
            }
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_corpus(path: &Path) -> Result<Vec<CorpusRecord>, MixError> {
    let file = std::fs::File::open(path)
        .map_err(|e| MixError::Data(format!("{}: {e}", path.display())))?;
    read_corpus_jsonl(std::io::BufReader::new(file))
}

pub fn write_corpus_jsonl(
    records: &[CorpusRecord],
    mut writer: impl std::io::Write,
) -> Result<(), MixError> {
    for record in records {
        serde_json::to_writer(&mut writer, record)
            .map_err(|e| MixError::Data(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
