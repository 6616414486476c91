//! Multi-ranking preference dataset: scoring and ranking raw responses,
//! growing records with online samples, and JSONL persistence.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NeatError, Result};
use crate::reward::{score, Origin, RewardSpec, ScoredResponse};
use crate::tokens::TokenSeq;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One query with k >= 2 reward-scored responses, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub query: TokenSeq,
    pub family: String,
    pub responses: Vec<ScoredResponse>,
}

impl PreferenceRecord {
    pub fn best(&self) -> &ScoredResponse {
        &self.responses[0]
    }

    pub fn worst(&self) -> &ScoredResponse {
        self.responses.last().expect("record holds at least two responses")
    }

    pub fn contains(&self, response: &TokenSeq) -> bool {
        self.responses.iter().any(|r| &r.response == response)
    }

    pub fn is_sorted(&self) -> bool {
        self.responses.windows(2).all(|w| w[0].reward >= w[1].reward)
    }

    /// Inserts after every response with reward >= `new.reward`, which is
    /// what a stable descending sort of the appended list would give.
    fn insert_sorted(&mut self, new: ScoredResponse) {
        let at = self
            .responses
            .iter()
            .position(|r| r.reward < new.reward)
            .unwrap_or(self.responses.len());
        self.responses.insert(at, new);
    }

    /// At most `cap` responses: the `cap / 2` best and the rest from the
    /// bottom, in stored order.
    pub fn capped(&self, cap: usize) -> Vec<ScoredResponse> {
        let n = self.responses.len();
        if n <= cap {
            return self.responses.clone();
        }
        let top = cap / 2;
        let bottom = cap - top;
        self.responses[..top]
            .iter()
            .chain(&self.responses[n - bottom..])
            .cloned()
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    query: TokenSeq,
    family: String,
    responses: Vec<ScoredResponse>,
    v: u32,
}

/// 64-bit FNV-1a over the spec's canonical JSON; identifies which reward
/// spec scored a dataset.
pub fn spec_fingerprint(spec: &RewardSpec) -> u64 {
    let text = serde_json::to_string(spec).expect("reward spec serializes");
    text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    records: Vec<PreferenceRecord>,
    index: HashMap<TokenSeq, usize>,
    pub spec_ref: u64,
    pub split: Split,
    pub dedup: bool,
    /// Responses dropped by `expand` because the record already held them.
    pub dedup_drops: usize,
}

impl Dataset {
    pub fn empty(spec: &RewardSpec, split: Split) -> Self {
        Dataset {
            records: Vec::new(),
            index: HashMap::new(),
            spec_ref: spec_fingerprint(spec),
            split,
            dedup: true,
            dedup_drops: 0,
        }
    }

    /// Scores every raw response and stores each record's responses by
    /// descending reward; ties keep their original order. Exact duplicate
    /// responses within an entry are dropped first.
    pub fn prepare(raw: &[(TokenSeq, Vec<TokenSeq>)], spec: &RewardSpec, split: Split) -> Result<Self> {
        let mut ds = Dataset::empty(spec, split);
        for (query, responses) in raw {
            query.validate_query()?;
            let family = spec.family_of(query)?.id.clone();
            let mut scored: Vec<ScoredResponse> = Vec::with_capacity(responses.len());
            for r in responses {
                if scored.iter().any(|s| &s.response == r) {
                    continue;
                }
                scored.push(ScoredResponse {
                    response: r.clone(),
                    reward: score(spec, query, r)?,
                    origin: Origin::Dataset,
                });
            }
            if scored.len() < 2 {
                return Err(NeatError::Structure(format!(
                    "query {query} needs at least two distinct responses"
                )));
            }
            scored.sort_by(|a, b| b.reward.total_cmp(&a.reward));
            ds.push(PreferenceRecord {
                query: query.clone(),
                family,
                responses: scored,
            })?;
        }
        Ok(ds)
    }

    fn push(&mut self, record: PreferenceRecord) -> Result<()> {
        if self.index.contains_key(&record.query) {
            return Err(NeatError::Structure(format!(
                "duplicate query {} in split",
                record.query
            )));
        }
        self.index.insert(record.query.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn with_dedup(mut self, dedup: bool) -> Self {
        self.dedup = dedup;
        self
    }

    pub fn records(&self) -> &[PreferenceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, query: &TokenSeq) -> Result<&PreferenceRecord> {
        self.index
            .get(query)
            .map(|&i| &self.records[i])
            .ok_or_else(|| NeatError::Lookup(format!("query {query} is not in the dataset")))
    }

    pub fn total_responses(&self) -> usize {
        self.records.iter().map(|r| r.responses.len()).sum()
    }

    /// Adds a freshly scored response to the record of `query`. Returns
    /// false when deduplication dropped it.
    pub fn expand(&mut self, query: &TokenSeq, new: ScoredResponse) -> Result<bool> {
        let &i = self
            .index
            .get(query)
            .ok_or_else(|| NeatError::Lookup(format!("query {query} is not in the dataset")))?;
        let record = &mut self.records[i];
        if self.dedup && record.contains(&new.response) {
            self.dedup_drops += 1;
            return Ok(false);
        }
        record.insert_sorted(new);
        Ok(true)
    }

    /// Re-scores every stored response and reports the first mismatch.
    pub fn verify(&self, spec: &RewardSpec) -> Result<()> {
        for (i, rec) in self.records.iter().enumerate() {
            check_record(spec, rec, i + 1)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = RecordLine {
                query: r.query.clone(),
                family: r.family.clone(),
                responses: r.responses.clone(),
                v: DATASET_VERSION,
            };
            writeln!(out, "{}", serde_json::to_string(&line)?).expect("write to string");
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::lm::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    /// Parses JSONL and re-scores every response against `spec`.
    pub fn from_reader(reader: impl std::io::Read, spec: &RewardSpec, split: Split) -> Result<Self> {
        let mut ds = Dataset::empty(spec, split);
        for (n, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| NeatError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: RecordLine = serde_json::from_str(&line).map_err(|e| NeatError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if parsed.v != DATASET_VERSION {
                return Err(NeatError::Format(format!(
                    "line {line_no}: dataset version {} is not supported",
                    parsed.v
                )));
            }
            let record = PreferenceRecord {
                query: parsed.query,
                family: parsed.family,
                responses: parsed.responses,
            };
            if record.responses.len() < 2 {
                return Err(NeatError::Structure(format!(
                    "line {line_no}: record {} holds fewer than two responses",
                    record.query
                )));
            }
            if !record.is_sorted() {
                return Err(NeatError::Integrity(format!(
                    "line {line_no}: responses of {} are not sorted by reward",
                    record.query
                )));
            }
            check_record(spec, &record, line_no)?;
            ds.push(record)?;
        }
        Ok(ds)
    }

    pub fn load(path: &Path, spec: &RewardSpec, split: Split) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| NeatError::io(path, e))?;
        Self::from_reader(f, spec, split)
    }
}

fn check_record(spec: &RewardSpec, rec: &PreferenceRecord, line: usize) -> Result<()> {
    let family = spec.family_of(&rec.query)?;
    if family.id != rec.family {
        return Err(NeatError::Integrity(format!(
            "record {} (line {line}) names family {} but the spec assigns {}",
            rec.query, rec.family, family.id
        )));
    }
    for r in &rec.responses {
        let expected = score(spec, &rec.query, &r.response)?;
        if expected.to_bits() != r.reward.to_bits() {
            return Err(NeatError::Integrity(format!(
                "record {} (line {line}): response {} stores reward {} but scores {}",
                rec.query, r.response, r.reward, expected
            )));
        }
    }
    Ok(())
}
