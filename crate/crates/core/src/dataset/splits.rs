use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetSchema;
use crate::{Error, Result};

/// Number of performer-grouped folds for CBF cross-validation.
pub const CBF_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    /// Recognizes split directory names such as `train`, `valid`, `validation`, `test`.
    pub fn from_dir_name(name: &str) -> Option<Self> {
        match name.to_lowercase().as_str() {
            "train" | "training" => Some(SplitTag::Train),
            "val" | "valid" | "validation" | "dev" => Some(SplitTag::Val),
            "test" | "testing" | "eval" => Some(SplitTag::Test),
            _ => None,
        }
    }
}

/// What split generation needs to know about one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub id: String,
    pub performer: Option<String>,
    /// Split assignment from the dataset's published layout, when it has one.
    pub split: Option<SplitTag>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Fold {
    pub fn ids(&self, tag: SplitTag) -> &[String] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .all(|id| seen.insert(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Single split taken from the dataset's own train/validation/test layout.
    Published,
    /// Folds holding out disjoint performer groups.
    PerformerFolds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub schema: DatasetSchema,
    pub policy: SplitPolicy,
    pub folds: Vec<Fold>,
}

impl SplitPlan {
    pub fn fold(&self, k: usize) -> Result<&Fold> {
        self.folds.get(k).ok_or_else(|| {
            Error::Config(format!("fold {k} requested but the plan has {}", self.folds.len()))
        })
    }

    /// Manifest form: fold index -> `{train, val, test}`.
    pub fn to_manifest(&self) -> BTreeMap<String, Fold> {
        self.folds
            .iter()
            .enumerate()
            .map(|(k, f)| (k.to_string(), f.clone()))
            .collect()
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_manifest())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read_manifest(path: &Path, schema: DatasetSchema) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: BTreeMap<String, Fold> = serde_json::from_str(&text)?;
        let mut keyed = manifest
            .into_iter()
            .map(|(k, f)| {
                k.parse::<usize>()
                    .map(|k| (k, f))
                    .map_err(|_| Error::Config(format!("{}: fold key `{k}` is not an index", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        keyed.sort_by_key(|(k, _)| *k);
        let policy = if schema == DatasetSchema::Cbf {
            SplitPolicy::PerformerFolds
        } else {
            SplitPolicy::Published
        };
        Ok(SplitPlan {
            schema,
            policy,
            folds: keyed.into_iter().map(|(_, f)| f).collect(),
        })
    }
}

/// Builds the split plan for a dataset.
///
/// Guzheng_Tech99, EG-Solo and the toy corpus follow the published
/// assignment carried by each recording's `split` tag. CBF is split by
/// performer into [`CBF_FOLDS`] folds: performers are shuffled with `seed`
/// and dealt into groups, each group is the test set of one fold and the
/// remaining performers train it. CBF folds have no validation set.
pub fn make_splits(
    schema: DatasetSchema,
    recordings: &[RecordingMeta],
    seed: u64,
) -> Result<SplitPlan> {
    match schema {
        DatasetSchema::Cbf => performer_folds(schema, recordings, seed),
        _ => published_split(schema, recordings),
    }
}

fn published_split(schema: DatasetSchema, recordings: &[RecordingMeta]) -> Result<SplitPlan> {
    let mut fold = Fold::default();
    let mut untagged = Vec::new();
    for rec in recordings {
        match rec.split {
            Some(SplitTag::Train) => fold.train.push(rec.id.clone()),
            Some(SplitTag::Val) => fold.val.push(rec.id.clone()),
            Some(SplitTag::Test) => fold.test.push(rec.id.clone()),
            None => untagged.push(rec.id.as_str()),
        }
    }
    if !untagged.is_empty() {
        return Err(Error::Config(format!(
            "{schema}: recordings without a published split assignment: {}",
            untagged.join(", ")
        )));
    }
    for ids in [&mut fold.train, &mut fold.val, &mut fold.test] {
        ids.sort();
    }
    if !fold.is_disjoint() {
        return Err(Error::Config(format!("{schema}: duplicate recording ids across splits")));
    }
    Ok(SplitPlan {
        schema,
        policy: SplitPolicy::Published,
        folds: vec![fold],
    })
}

fn performer_folds(
    schema: DatasetSchema,
    recordings: &[RecordingMeta],
    seed: u64,
) -> Result<SplitPlan> {
    let mut by_performer: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut missing = Vec::new();
    for rec in recordings {
        match rec.performer.as_deref() {
            Some(p) => by_performer.entry(p).or_default().push(&rec.id),
            None => missing.push(rec.id.as_str()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "{schema}: performer metadata missing for: {}",
            missing.join(", ")
        )));
    }
    if by_performer.len() < CBF_FOLDS {
        return Err(Error::Config(format!(
            "{schema}: {} performers cannot form {CBF_FOLDS} performer-disjoint folds",
            by_performer.len()
        )));
    }

    let mut performers: Vec<&str> = by_performer.keys().copied().collect();
    performers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups: Vec<Vec<&str>> = vec![Vec::new(); CBF_FOLDS];
    for (i, p) in performers.iter().enumerate() {
        groups[i % CBF_FOLDS].push(p);
    }

    let ids_of = |ps: &[&str]| {
        let mut ids: Vec<String> = ps
            .iter()
            .flat_map(|p| by_performer[p].iter().map(|s| s.to_string()))
            .collect();
        ids.sort();
        ids
    };
    let folds = (0..CBF_FOLDS)
        .map(|k| {
            let train: Vec<&str> = groups
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .flat_map(|(_, g)| g.iter().copied())
                .collect();
            Fold {
                train: ids_of(&train),
                val: Vec::new(),
                test: ids_of(&groups[k]),
            }
        })
        .collect();
    Ok(SplitPlan {
        schema,
        policy: SplitPolicy::PerformerFolds,
        folds,
    })
}
