//! Preference datasets: JSONL storage, validation, statistics and splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::shuffle;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("validation size {val_size} must be smaller than the {total} prompts available")]
    ValSizeTooLarge { val_size: usize, total: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One prompt, its 2–4 candidate images and the index the user picked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceInstance {
    pub prompt_id: String,
    pub prompt: String,
    pub user_id: String,
    pub image_ids: Vec<String>,
    pub preferred_index: usize,
}

impl PreferenceInstance {
    pub fn n(&self) -> usize {
        self.image_ids.len()
    }

    pub fn preferred_image(&self) -> Option<&str> {
        self.image_ids.get(self.preferred_index).map(String::as_str)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub instances: Vec<PreferenceInstance>,
}

impl Dataset {
    pub fn new(instances: Vec<PreferenceInstance>) -> Self {
        Self { instances }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Reads one instance per non-blank line.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, DatasetError> {
        let mut instances = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let inst = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            instances.push(inst);
        }
        Ok(Self { instances })
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<(), DatasetError> {
        for inst in &self.instances {
            serde_json::to_writer(&mut writer, inst).map_err(std::io::Error::from)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn by_prompt_id(&self) -> HashMap<&str, &PreferenceInstance> {
        self.instances
            .iter()
            .map(|i| (i.prompt_id.as_str(), i))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    TooFewImages,
    TooManyImages,
    IndexOutOfRange,
    DuplicateImageId,
    DuplicatePromptId,
    EmptyId,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(dataset: &Dataset) -> ValidationReport {
    let mut violations = Vec::new();
    let mut prompt_ids = HashSet::new();
    for (index, inst) in dataset.instances.iter().enumerate() {
        let mut flag = |kind| violations.push(Violation { index, kind });
        let n = inst.n();
        if n < 2 {
            flag(ViolationKind::TooFewImages);
        }
        if n > 4 {
            flag(ViolationKind::TooManyImages);
        }
        if inst.preferred_index >= n {
            flag(ViolationKind::IndexOutOfRange);
        }
        let distinct: HashSet<&str> = inst.image_ids.iter().map(String::as_str).collect();
        if distinct.len() != n {
            flag(ViolationKind::DuplicateImageId);
        }
        if inst.prompt_id.is_empty() || inst.image_ids.iter().any(String::is_empty) {
            flag(ViolationKind::EmptyId);
        }
        if !prompt_ids.insert(inst.prompt_id.as_str()) {
            flag(ViolationKind::DuplicatePromptId);
        }
    }
    ValidationReport { violations }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_prompts: usize,
    pub total_images: usize,
    /// Always carries the keys 2, 3 and 4.
    pub counts_by_n: BTreeMap<usize, usize>,
    pub distinct_users: usize,
    pub max_choices_per_user: usize,
}

impl DatasetStats {
    /// Stats for a dataset with the given `n → prompt count` composition and no user information.
    pub fn from_composition(composition: &[(usize, usize)]) -> Self {
        let mut counts_by_n: BTreeMap<usize, usize> = [(2, 0), (3, 0), (4, 0)].into();
        for &(n, count) in composition {
            *counts_by_n.entry(n).or_default() += count;
        }
        Self {
            total_prompts: counts_by_n.values().sum(),
            total_images: counts_by_n.iter().map(|(n, c)| n * c).sum(),
            counts_by_n,
            distinct_users: 0,
            max_choices_per_user: 0,
        }
    }
}

pub fn stats(dataset: &Dataset) -> DatasetStats {
    let mut counts_by_n: BTreeMap<usize, usize> = [(2, 0), (3, 0), (4, 0)].into();
    let mut per_user: HashMap<&str, usize> = HashMap::new();
    for inst in &dataset.instances {
        *counts_by_n.entry(inst.n()).or_default() += 1;
        *per_user.entry(inst.user_id.as_str()).or_default() += 1;
    }
    DatasetStats {
        total_prompts: dataset.len(),
        total_images: dataset.instances.iter().map(PreferenceInstance::n).sum(),
        counts_by_n,
        distinct_users: per_user.len(),
        max_choices_per_user: per_user.values().copied().max().unwrap_or(0),
    }
}

/// Expected accuracy of picking one of the `n` images uniformly at random.
pub fn random_guess_accuracy(stats: &DatasetStats) -> Result<f64, DatasetError> {
    if stats.total_prompts == 0 {
        return Err(DatasetError::EmptyDataset);
    }
    let hits: f64 = stats
        .counts_by_n
        .iter()
        .filter(|(n, _)| **n > 0)
        .map(|(&n, &count)| count as f64 / n as f64)
        .sum();
    Ok(hits / stats.total_prompts as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    /// One shuffle over all prompts.
    #[default]
    Uniform,
    /// Shuffle within each image count `n`, allocating validation slots by
    /// largest remainder so the `n` mix is preserved.
    StratifiedByN,
}

/// Splits by prompt into `(train, val)`.
///
/// Prompt ids are sorted lexicographically and then shuffled with a seeded
/// Fisher–Yates pass; the first `val_size` become validation. Both halves keep
/// the input order.
pub fn split(
    dataset: &Dataset,
    seed: u64,
    val_size: usize,
    strategy: SplitStrategy,
) -> Result<(Dataset, Dataset), DatasetError> {
    if val_size > 0 && val_size >= dataset.len() {
        return Err(DatasetError::ValSizeTooLarge {
            val_size,
            total: dataset.len(),
        });
    }
    let mut ids: Vec<(&str, usize)> = dataset
        .instances
        .iter()
        .map(|i| (i.prompt_id.as_str(), i.n()))
        .collect();
    ids.sort_unstable();

    let mut rng = shuffle::seeded_rng(seed);
    let val_ids: HashSet<&str> = match strategy {
        SplitStrategy::Uniform => {
            shuffle::fisher_yates(&mut ids, &mut rng);
            ids.iter().take(val_size).map(|(id, _)| *id).collect()
        }
        SplitStrategy::StratifiedByN => {
            let mut strata: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
            for (id, n) in &ids {
                strata.entry(*n).or_default().push(id);
            }
            let total = ids.len();
            let quotas = largest_remainder(
                &strata.values().map(Vec::len).collect::<Vec<_>>(),
                total,
                val_size,
            );
            let mut chosen = HashSet::new();
            for (members, quota) in strata.values_mut().zip(quotas) {
                shuffle::fisher_yates(members, &mut rng);
                chosen.extend(members.iter().take(quota).copied());
            }
            chosen
        }
    };

    let (val, train): (Vec<_>, Vec<_>) = dataset
        .instances
        .iter()
        .cloned()
        .partition(|i| val_ids.contains(i.prompt_id.as_str()));
    Ok((Dataset::new(train), Dataset::new(val)))
}

fn largest_remainder(sizes: &[usize], total: usize, target: usize) -> Vec<usize> {
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|s| s * target / total).collect();
    let mut remainders: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .map(|(i, s)| (s * target % total, i))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut missing = target - quotas.iter().sum::<usize>();
    for (_, i) in remainders {
        if missing == 0 {
            break;
        }
        if quotas[i] < sizes[i] {
            quotas[i] += 1;
            missing -= 1;
        }
    }
    quotas
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn instance(id: &str, n: usize, preferred: usize) -> PreferenceInstance {
        PreferenceInstance {
            prompt_id: id.into(),
            prompt: format!("prompt {id}"),
            user_id: "u".into(),
            image_ids: (0..n).map(|k| format!("{id}_{k}")).collect(),
            preferred_index: preferred,
        }
    }

    #[test]
    fn well_formed_has_empty_report() {
        let ds = Dataset::new((0..10).map(|i| instance(&i.to_string(), 2 + i % 3, 0)).collect());
        assert!(validate(&ds).is_clean());
    }

    #[test]
    fn out_of_range_and_duplicate_prompt() {
        let ds = Dataset::new(vec![instance("a", 4, 4)]);
        assert_eq!(
            validate(&ds).violations,
            vec![Violation { index: 0, kind: ViolationKind::IndexOutOfRange }]
        );
        let ds = Dataset::new(vec![instance("a", 4, 0), instance("a", 3, 0)]);
        assert_eq!(
            validate(&ds).violations,
            vec![Violation { index: 1, kind: ViolationKind::DuplicatePromptId }]
        );
    }

    #[test]
    fn violation_kinds_serialize_snake_case() {
        let v = Violation { index: 3, kind: ViolationKind::IndexOutOfRange };
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"{"index":3,"kind":"index_out_of_range"}"#);
    }

    #[test]
    fn empty_stats_are_zero() {
        let s = stats(&Dataset::default());
        assert_eq!(s.total_prompts, 0);
        assert_eq!(s.total_images, 0);
        assert!(s.counts_by_n.values().all(|&c| c == 0));
        assert!(random_guess_accuracy(&s).is_err());
    }

    #[test]
    fn guess_accuracy_uniform_n() {
        let s4 = DatasetStats::from_composition(&[(4, 10)]);
        assert_eq!(random_guess_accuracy(&s4).unwrap(), 0.25);
        let s2 = DatasetStats::from_composition(&[(2, 7)]);
        assert_eq!(random_guess_accuracy(&s2).unwrap(), 0.5);
    }

    #[test]
    fn per_user_counts() {
        let mut a = instance("a", 2, 0);
        a.user_id = "x".into();
        let mut b = instance("b", 3, 0);
        b.user_id = "x".into();
        let c = instance("c", 4, 0);
        let s = stats(&Dataset::new(vec![a, b, c]));
        assert_eq!(s.distinct_users, 2);
        assert_eq!(s.max_choices_per_user, 2);
        assert_eq!(s.total_images, 9);
    }

    #[test]
    fn split_zero_and_too_large() {
        let ds = Dataset::new((0..5).map(|i| instance(&i.to_string(), 2, 0)).collect());
        let (train, val) = split(&ds, 1, 0, SplitStrategy::Uniform).unwrap();
        assert_eq!(train, ds);
        assert!(val.is_empty());
        assert!(matches!(
            split(&ds, 1, 5, SplitStrategy::Uniform),
            Err(DatasetError::ValSizeTooLarge { .. })
        ));
    }

    #[test]
    fn stratified_preserves_mix() {
        let ds = Dataset::new(
            (0..100)
                .map(|i| instance(&format!("{i:03}"), if i < 80 { 4 } else { 2 }, 0))
                .collect(),
        );
        let (_, val) = split(&ds, 3, 10, SplitStrategy::StratifiedByN).unwrap();
        let s = stats(&val);
        assert_eq!(s.counts_by_n[&4], 8);
        assert_eq!(s.counts_by_n[&2], 2);
    }

    #[test]
    fn jsonl_field_order() {
        let ds = Dataset::new(vec![instance("p", 2, 1)]);
        let mut buf = Vec::new();
        ds.write_jsonl(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "{\"prompt_id\":\"p\",\"prompt\":\"prompt p\",\"user_id\":\"u\",\"image_ids\":[\"p_0\",\"p_1\"],\"preferred_index\":1}\n"
        );
        assert_eq!(Dataset::read_jsonl(buf.as_slice()).unwrap(), ds);
    }
}
