//! Single-stratum minibatch manifests.
//!
//! Each epoch, every stratum is shuffled on its own stream keyed by
//! `(seed, epoch, stratum)` and cut into `batch_size` chunks; the batches of all
//! strata are then shuffled together on a stream keyed by `(seed, epoch)`.
//! Epochs are concatenated in order.
//!
//! Manifest file layout:
//!
//! ```text
//! # strata-manifest v1
//! # batch_size=4096
//! # epochs=3
//! # seed=0
//! # remainder_policy=drop_last
//! # plan_digest=sha256:...
//! # epoch_batches=12,12,12
//! # warning=stratum 4 has 1000 pairs, fewer than batch_size 4096; it contributes no batches
//! 0	3	17,5,940,...
//! ```

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{self, sha256_tagged, PairDataset};
use crate::error::{Error, Result};
use crate::seeding::{self, domain};
use crate::stratifier::StratificationPlan;

pub const DEFAULT_BATCH_SIZE: usize = 4096;
pub const DEFAULT_EPOCHS: usize = 3;

const MANIFEST_MAGIC: &str = "# strata-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemainderPolicy {
    /// Discard each stratum's final partial batch.
    #[default]
    DropLast,
    /// Emit the final partial batch as a short batch.
    KeepShort,
}

impl fmt::Display for RemainderPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RemainderPolicy::DropLast => "drop_last",
            RemainderPolicy::KeepShort => "keep_short",
        })
    }
}

impl FromStr for RemainderPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop_last" | "drop-last" => Ok(RemainderPolicy::DropLast),
            "keep_short" | "keep-short" => Ok(RemainderPolicy::KeepShort),
            other => Err(Error::Parameter(format!(
                "remainder policy must be drop_last or keep_short, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlanConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub remainder_policy: RemainderPolicy,
}

impl Default for BatchPlanConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            remainder_policy: RemainderPolicy::DropLast,
        }
    }
}

impl BatchPlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Parameter(format!(
                "batch_size must be at least 2 (one positive plus one in-batch negative), got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: usize,
    pub epoch: usize,
    pub stratum: usize,
    pub pair_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchManifest {
    pub batches: Vec<Batch>,
    pub config: BatchPlanConfig,
    pub plan_digest: String,
    pub warnings: Vec<String>,
}

impl BatchManifest {
    pub fn epoch_batches(&self) -> Vec<usize> {
        let mut counts = vec![0; self.config.epochs];
        for b in &self.batches {
            if b.epoch < counts.len() {
                counts[b.epoch] += 1;
            }
        }
        counts
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = &Batch> {
        self.batches.iter().filter(move |b| b.epoch == epoch)
    }

    pub fn to_text(&self) -> String {
        let counts: Vec<String> = self.epoch_batches().iter().map(usize::to_string).collect();
        let mut out = format!(
            "{MANIFEST_MAGIC}\n# batch_size={}\n# epochs={}\n# seed={}\n# remainder_policy={}\n# plan_digest={}\n# epoch_batches={}\n",
            self.config.batch_size,
            self.config.epochs,
            self.config.seed,
            self.config.remainder_policy,
            self.plan_digest,
            counts.join(",")
        );
        for w in &self.warnings {
            out.push_str("# warning=");
            out.push_str(w);
            out.push('\n');
        }
        for b in &self.batches {
            out.push_str(&b.batch_id.to_string());
            out.push('\t');
            out.push_str(&b.stratum.to_string());
            out.push('\t');
            let mut first = true;
            for i in &b.pair_indices {
                if !first {
                    out.push(',');
                }
                first = false;
                out.push_str(&i.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> String {
        sha256_tagged(self.to_text().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        corpus_io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == MANIFEST_MAGIC => {}
            _ => return Err(Error::format(path, "missing manifest header")),
        }
        let mut batch_size = None;
        let mut epochs = None;
        let mut seed = None;
        let mut policy = None;
        let mut plan_digest = None;
        let mut epoch_batches: Option<Vec<usize>> = None;
        let mut warnings = Vec::new();
        let mut batches = Vec::new();

        for (idx, line) in lines {
            let line_no = idx + 1;
            if let Some(header) = line.strip_prefix("# ") {
                let (key, value) = header
                    .split_once('=')
                    .ok_or_else(|| Error::parse(path, line_no, "header line must be key=value"))?;
                let bad = || Error::parse(path, line_no, format!("invalid {key} value {value:?}"));
                match key {
                    "batch_size" => batch_size = Some(value.parse::<usize>().map_err(|_| bad())?),
                    "epochs" => epochs = Some(value.parse::<usize>().map_err(|_| bad())?),
                    "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad())?),
                    "remainder_policy" => policy = Some(value.parse::<RemainderPolicy>().map_err(|_| bad())?),
                    "plan_digest" => plan_digest = Some(value.to_string()),
                    "epoch_batches" => {
                        epoch_batches = Some(if value.is_empty() {
                            Vec::new()
                        } else {
                            value
                                .split(',')
                                .map(|v| v.parse::<usize>().map_err(|_| bad()))
                                .collect::<Result<_>>()?
                        })
                    }
                    "warning" => warnings.push(value.to_string()),
                    _ => return Err(Error::parse(path, line_no, format!("unknown header key {key:?}"))),
                }
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(id), Some(stratum), Some(indices), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::parse(path, line_no, "expected batch_id<TAB>stratum<TAB>indices"));
            };
            let batch_id = id
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad batch_id {id:?}")))?;
            let stratum = stratum
                .parse()
                .map_err(|_| Error::parse(path, line_no, format!("bad stratum {stratum:?}")))?;
            let pair_indices = if indices.is_empty() {
                Vec::new()
            } else {
                indices
                    .split(',')
                    .map(|v| {
                        v.parse()
                            .map_err(|_| Error::parse(path, line_no, format!("bad pair index {v:?}")))
                    })
                    .collect::<Result<Vec<usize>>>()?
            };
            batches.push(Batch {
                batch_id,
                epoch: 0,
                stratum,
                pair_indices,
            });
        }

        let missing = |k: &str| Error::format(path, format!("missing header {k}"));
        let config = BatchPlanConfig {
            batch_size: batch_size.ok_or_else(|| missing("batch_size"))?,
            epochs: epochs.ok_or_else(|| missing("epochs"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            remainder_policy: policy.ok_or_else(|| missing("remainder_policy"))?,
        };
        let epoch_batches = epoch_batches.ok_or_else(|| missing("epoch_batches"))?;
        if epoch_batches.len() != config.epochs || epoch_batches.iter().sum::<usize>() != batches.len() {
            return Err(Error::format(
                path,
                format!(
                    "epoch_batches {:?} inconsistent with {} epochs and {} batch lines",
                    epoch_batches,
                    config.epochs,
                    batches.len()
                ),
            ));
        }
        let mut cursor = 0;
        for (epoch, &n) in epoch_batches.iter().enumerate() {
            for b in &mut batches[cursor..cursor + n] {
                b.epoch = epoch;
            }
            cursor += n;
        }
        Ok(Self {
            batches,
            config,
            plan_digest: plan_digest.ok_or_else(|| missing("plan_digest"))?,
            warnings,
        })
    }
}

fn stratum_batches(members: &[usize], stratum: usize, epoch: usize, cfg: &BatchPlanConfig) -> Vec<(usize, Vec<usize>)> {
    let mut order = members.to_vec();
    let mut rng = seeding::stream(cfg.seed, &[domain::STRATUM_SHUFFLE, epoch as u64, stratum as u64]);
    order.shuffle(&mut rng);
    order
        .chunks(cfg.batch_size)
        .filter(|c| c.len() == cfg.batch_size || cfg.remainder_policy == RemainderPolicy::KeepShort)
        .map(|c| (stratum, c.to_vec()))
        .collect()
}

/// Build a manifest whose batches each draw from exactly one stratum.
pub fn plan(s: &StratificationPlan, cfg: &BatchPlanConfig) -> Result<BatchManifest> {
    cfg.validate()?;
    if let Some(empty) = s.strata().iter().position(Vec::is_empty) {
        return Err(Error::Integrity(format!("stratum {empty} is empty")));
    }
    let mut warnings = Vec::new();
    if cfg.remainder_policy == RemainderPolicy::DropLast {
        for (c, members) in s.strata().iter().enumerate() {
            if members.len() < cfg.batch_size {
                warnings.push(format!(
                    "stratum {c} has {} pairs, fewer than batch_size {}; it contributes no batches",
                    members.len(),
                    cfg.batch_size
                ));
            }
        }
    }

    let mut batches = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut epoch_batches: Vec<(usize, Vec<usize>)> = s
            .strata()
            .par_iter()
            .enumerate()
            .map(|(c, members)| stratum_batches(members, c, epoch, cfg))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect();
        let mut rng = seeding::stream(cfg.seed, &[domain::EPOCH_SHUFFLE, epoch as u64]);
        epoch_batches.shuffle(&mut rng);
        for (stratum, pair_indices) in epoch_batches {
            batches.push(Batch {
                batch_id: batches.len(),
                epoch,
                stratum,
                pair_indices,
            });
        }
    }
    Ok(BatchManifest {
        batches,
        config: *cfg,
        plan_digest: s.digest(),
        warnings,
    })
}

/// The shuffled control: one stratum covering every pair.
pub fn plan_unstratified(d: &PairDataset, cfg: &BatchPlanConfig) -> Result<BatchManifest> {
    if d.is_empty() {
        return Err(Error::Parameter("cannot plan batches for an empty dataset".into()));
    }
    plan(&StratificationPlan::unstratified(d.count())?, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A batch contains a pair from a stratum other than the one it names.
    MixedStratum,
    /// A batch names a stratum the plan does not have.
    UnknownStratum,
    /// A pair index outside `0..N`.
    IndexOutOfRange,
    /// Wrong batch length for the remainder policy.
    BatchSize,
    /// A pair index appears twice within one epoch.
    DuplicateInEpoch,
    /// Per-epoch coverage differs from what the plan and policy require.
    Coverage,
    /// batch_id is not the batch's position, or epochs are out of order.
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub batch_id: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub batches_checked: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    fn push(&mut self, kind: ViolationKind, batch_id: Option<usize>, message: String) {
        self.violations.push(Violation { kind, batch_id, message });
    }
}

/// Re-check every manifest invariant against the plan it claims to come from.
///
/// Checks, per batch: stratum exists, indices in range and all from the named
/// stratum, length fits the policy. Per epoch: no index repeats, each stratum
/// contributes the expected number of batches and (under `keep_short`) every
/// index appears exactly once. Globally: batch ids are sequential and epochs
/// non-decreasing.
pub fn validate(m: &BatchManifest, s: &StratificationPlan) -> Result<ValidationReport> {
    let digest = s.digest();
    if m.plan_digest != digest {
        return Err(Error::Provenance(format!(
            "manifest was built from plan {}, but the given plan is {digest}",
            m.plan_digest
        )));
    }
    let cfg = &m.config;
    let n = s.len();
    let k = s.k();
    let stratum_of = s.stratum_of();
    let sizes = s.sizes();
    let mut report = ValidationReport {
        batches_checked: m.batches.len(),
        violations: Vec::new(),
    };

    let mut last_epoch = 0;
    for (pos, b) in m.batches.iter().enumerate() {
        let id = Some(b.batch_id);
        if b.batch_id != pos {
            report.push(ViolationKind::Sequence, id, format!("batch at position {pos} has id {}", b.batch_id));
        }
        if b.epoch < last_epoch || b.epoch >= cfg.epochs {
            report.push(ViolationKind::Sequence, id, format!("batch in epoch {} out of order", b.epoch));
        }
        last_epoch = last_epoch.max(b.epoch);

        if b.stratum >= k {
            report.push(ViolationKind::UnknownStratum, id, format!("stratum {} not in plan with k={k}", b.stratum));
        }
        let out_of_range: Vec<usize> = b.pair_indices.iter().copied().filter(|&i| i >= n).collect();
        if !out_of_range.is_empty() {
            report.push(
                ViolationKind::IndexOutOfRange,
                id,
                format!("indices {out_of_range:?} outside 0..{n}"),
            );
        }
        if b.stratum < k {
            let foreign: Vec<usize> = b
                .pair_indices
                .iter()
                .copied()
                .filter(|&i| i < n && stratum_of[i] != b.stratum)
                .collect();
            if !foreign.is_empty() {
                report.push(
                    ViolationKind::MixedStratum,
                    id,
                    format!("batch names stratum {} but holds pairs {foreign:?} from other strata", b.stratum),
                );
            }
        }
        let len = b.pair_indices.len();
        let size_ok = match cfg.remainder_policy {
            RemainderPolicy::DropLast => len == cfg.batch_size,
            RemainderPolicy::KeepShort => len >= 1 && len <= cfg.batch_size,
        };
        if !size_ok {
            report.push(
                ViolationKind::BatchSize,
                id,
                format!("{len} indices under {} with batch_size {}", cfg.remainder_policy, cfg.batch_size),
            );
        }
    }

    for epoch in 0..cfg.epochs {
        let mut seen = HashSet::new();
        let mut per_stratum = vec![0usize; k];
        let mut short_per_stratum = vec![0usize; k];
        for b in m.epoch(epoch) {
            if b.stratum < k {
                per_stratum[b.stratum] += 1;
                if b.pair_indices.len() < cfg.batch_size {
                    short_per_stratum[b.stratum] += 1;
                }
            }
            for &i in &b.pair_indices {
                if !seen.insert(i) {
                    report.push(
                        ViolationKind::DuplicateInEpoch,
                        Some(b.batch_id),
                        format!("pair {i} repeated in epoch {epoch}"),
                    );
                }
            }
        }
        for c in 0..k {
            let expected = match cfg.remainder_policy {
                RemainderPolicy::DropLast => sizes[c] / cfg.batch_size,
                RemainderPolicy::KeepShort => sizes[c].div_ceil(cfg.batch_size),
            };
            if per_stratum[c] != expected {
                report.push(
                    ViolationKind::Coverage,
                    None,
                    format!(
                        "epoch {epoch}: stratum {c} has {} batches, expected {expected}",
                        per_stratum[c]
                    ),
                );
            }
            if short_per_stratum[c] > 1 {
                report.push(
                    ViolationKind::Coverage,
                    None,
                    format!("epoch {epoch}: stratum {c} has {} short batches", short_per_stratum[c]),
                );
            }
        }
        if cfg.remainder_policy == RemainderPolicy::KeepShort {
            let missing = (0..n).filter(|i| !seen.contains(i)).count();
            if missing > 0 {
                report.push(
                    ViolationKind::Coverage,
                    None,
                    format!("epoch {epoch}: {missing} pairs never batched under keep_short"),
                );
            }
        }
    }
    Ok(report)
}
