//! Preference-labeled training manifests from HPS-scored image pools.
//!
//! Images are grouped by prompt. The top-HPS image of a group of `n` enters the
//! preferred set when its softmax probability over the group's HPS values
//! exceeds `α/n`; the non-preferred set uses the same test on negated HPS.
//! Non-preferred captions get an identifier prefix that can later serve as a
//! negative prompt.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::scoring::argmax;

pub const DEFAULT_ALPHA: f64 = 2.0;
pub const DEFAULT_IDENTIFIER: &str = "Weird image.";

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("alpha must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("identifier must not be empty")]
    EmptyIdentifier,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of scored-items input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub prompt: String,
    pub image_id: String,
    pub hps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurationGroup<T> {
    pub prompt: String,
    pub members: Vec<(String, T)>,
}

impl<T> CurationGroup<T> {
    pub fn n(&self) -> usize {
        self.members.len()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingDiagnostics {
    pub items: usize,
    pub duplicates: usize,
    pub non_finite: usize,
    pub groups: usize,
}

/// Groups by exact prompt string; groups are ordered by prompt, members keep
/// input order. Repeated `(prompt, image_id)` pairs keep their first score.
pub fn group_by_prompt<T: Scalar>(items: &[(String, String, T)]) -> (Vec<CurationGroup<T>>, GroupingDiagnostics) {
    let mut diag = GroupingDiagnostics { items: items.len(), ..Default::default() };
    let mut groups: BTreeMap<&str, Vec<(String, T)>> = BTreeMap::new();
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    for (prompt, image_id, hps) in items {
        if !hps.is_finite() {
            diag.non_finite += 1;
            continue;
        }
        if !seen.insert((prompt.as_str(), image_id.as_str())) {
            diag.duplicates += 1;
            continue;
        }
        groups
            .entry(prompt.as_str())
            .or_default()
            .push((image_id.clone(), *hps));
    }
    diag.groups = groups.len();
    let groups = groups
        .into_iter()
        .map(|(prompt, members)| CurationGroup { prompt: prompt.to_owned(), members })
        .collect();
    (groups, diag)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Preferred,
    NonPreferred,
}

/// Outcome of the selectivity test for one group and direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection<T> {
    pub candidate: usize,
    pub probability: T,
    pub threshold: T,
    pub accepted: bool,
    /// Several members shared the extreme score; the lowest index was taken.
    pub tie: bool,
}

/// Applies `p > α/n` to the group's top (or bottom) HPS image. `None` only for
/// an empty group.
pub fn softmax_select<T: Scalar>(group: &CurationGroup<T>, alpha: T, direction: Direction) -> Option<Selection<T>> {
    let scores: Vec<T> = group
        .members
        .iter()
        .map(|(_, s)| match direction {
            Direction::Preferred => *s,
            Direction::NonPreferred => -*s,
        })
        .collect();
    let best = argmax(&scores)?;
    let top = scores[best.index];
    // p = exp(top) / Σ exp(s) = 1 / Σ exp(s − top)
    let denom: T = scores.iter().map(|&s| (s - top).exp()).sum();
    let probability = T::one() / denom;
    let threshold = alpha / T::from_count(scores.len());
    Some(Selection {
        candidate: best.index,
        probability,
        threshold,
        accepted: probability > threshold,
        tie: best.tie,
    })
}

/// Image id accepted by [`softmax_select`], if any.
pub fn selected_image<T: Scalar>(group: &CurationGroup<T>, alpha: T, direction: Direction) -> Option<&str> {
    softmax_select(group, alpha, direction)
        .filter(|s| s.accepted)
        .map(|s| group.members[s.candidate].0.as_str())
}

/// Preferred captions are the prompt; non-preferred ones are `identifier + " " + prompt`.
pub fn tag_caption(prompt: &str, preferred: bool, identifier: &str) -> String {
    if preferred {
        prompt.to_owned()
    } else {
        format!("{identifier} {prompt}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurationConfig {
    pub alpha: f64,
    pub identifier: String,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, identifier: DEFAULT_IDENTIFIER.to_owned() }
    }
}

impl CurationConfig {
    pub fn check(&self) -> Result<(), CurationError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(CurationError::BadAlpha(self.alpha));
        }
        if self.identifier.is_empty() {
            return Err(CurationError::EmptyIdentifier);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Generated,
    Regularization,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub caption: String,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preferred: Option<bool>,
}

/// A regularization image with its caption, passed through unchanged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegularizationItem {
    pub image_id: String,
    pub caption: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub groups: usize,
    pub preferred: usize,
    pub non_preferred: usize,
    pub regularization: usize,
    pub ties: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub summary: ManifestSummary,
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("manifest entry serializes") + "\n")
            .collect()
    }
}

pub fn build_manifest<T: Scalar>(
    groups: &[CurationGroup<T>],
    config: &CurationConfig,
    regularization: &[RegularizationItem],
) -> Result<Manifest, CurationError> {
    config.check()?;
    let alpha = T::lit(config.alpha);
    let mut manifest = Manifest::default();
    let summary = &mut manifest.summary;
    summary.groups = groups.len();
    for group in groups {
        let mut picked = Vec::new();
        for direction in [Direction::Preferred, Direction::NonPreferred] {
            let Some(sel) = softmax_select(group, alpha, direction) else {
                continue;
            };
            if !sel.accepted {
                continue;
            }
            if sel.tie {
                summary.ties += 1;
            }
            let preferred = direction == Direction::Preferred;
            let image_id = group.members[sel.candidate].0.clone();
            if preferred {
                summary.preferred += 1;
            } else {
                summary.non_preferred += 1;
            }
            picked.push(image_id.clone());
            manifest.entries.push(ManifestEntry {
                caption: tag_caption(&group.prompt, preferred, &config.identifier),
                image_id,
                source: Source::Generated,
                preferred: Some(preferred),
            });
        }
        if let [a, b] = picked.as_slice() {
            if a == b {
                summary.warnings.push(format!(
                    "image {a:?} selected as both preferred and non-preferred for prompt {:?}",
                    group.prompt
                ));
            }
        }
    }
    for item in regularization {
        manifest.entries.push(ManifestEntry {
            image_id: item.image_id.clone(),
            caption: item.caption.clone(),
            source: Source::Regularization,
            preferred: None,
        });
    }
    summary.regularization = regularization.len();
    Ok(manifest)
}

fn read_jsonl<R: BufRead, V: for<'de> Deserialize<'de>>(reader: R) -> Result<Vec<V>, CurationError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CurationError::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

pub fn read_scored_items(reader: impl BufRead) -> Result<Vec<ScoredItem>, CurationError> {
    read_jsonl(reader)
}

pub fn read_regularization(reader: impl BufRead) -> Result<Vec<RegularizationItem>, CurationError> {
    read_jsonl(reader)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(scores: &[f64]) -> CurationGroup<f64> {
        CurationGroup {
            prompt: "a red fox".into(),
            members: scores.iter().enumerate().map(|(i, &s)| (format!("img{i}"), s)).collect(),
        }
    }

    fn items(list: &[(&str, &str, f64)]) -> Vec<(String, String, f64)> {
        list.iter().map(|(p, i, s)| (p.to_string(), i.to_string(), *s)).collect()
    }

    #[test]
    fn grouping() {
        let (groups, diag) = group_by_prompt(&items(&[("b", "1", 1.0), ("a", "2", 2.0), ("b", "3", 3.0)]));
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].prompt, "a");
        assert_eq!(groups[1].members, vec![("1".to_string(), 1.0), ("3".to_string(), 3.0)]);
        assert_eq!(diag.duplicates, 0);

        let (groups, diag) = group_by_prompt(&items(&[("a", "1", 1.0), ("a", "1", 5.0), ("A", "1", 1.0)]));
        assert_eq!(diag.duplicates, 1);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups.iter().map(|g| g.n()).sum::<usize>(), 2);
    }

    #[test]
    fn threshold_for_four() {
        let sel = softmax_select(&group(&[1.0, 2.0, 3.0, 4.0]), 2.0, Direction::Preferred).unwrap();
        assert_eq!(sel.threshold, 0.5);
    }

    #[test]
    fn all_equal_rejected_both_ways() {
        let g = group(&[21.0; 4]);
        for d in [Direction::Preferred, Direction::NonPreferred] {
            let sel = softmax_select(&g, 2.0, d).unwrap();
            assert_eq!(sel.probability, 0.25);
            assert!(!sel.accepted);
            assert!(sel.tie);
        }
    }

    #[test]
    fn clear_winner_accepted() {
        let g = group(&[20.0, 10.0, 10.0, 10.0]);
        let sel = softmax_select(&g, 2.0, Direction::Preferred).unwrap();
        let expected = 1.0 / (1.0 + 3.0 * (-10.0f64).exp());
        assert!((sel.probability - expected).abs() < 1e-15);
        assert!((sel.probability - 0.999_864).abs() < 1e-6);
        assert_eq!(selected_image(&g, 2.0, Direction::Preferred), Some("img0"));
        // the bottom three tie, so no single image is far enough below the rest
        assert_eq!(selected_image(&g, 2.0, Direction::NonPreferred), None);
    }

    #[test]
    fn captions() {
        assert_eq!(tag_caption("a red fox", true, DEFAULT_IDENTIFIER), "a red fox");
        assert_eq!(tag_caption("a red fox", false, DEFAULT_IDENTIFIER), "Weird image. a red fox");
        assert_eq!(tag_caption("", false, DEFAULT_IDENTIFIER), "Weird image. ");
    }

    #[test]
    fn equal_scores_give_empty_manifest() {
        let m = build_manifest(&[group(&[5.0; 4])], &CurationConfig::default(), &[]).unwrap();
        assert!(m.entries.is_empty());
        assert_eq!((m.summary.preferred, m.summary.non_preferred), (0, 0));
    }

    #[test]
    fn single_member_group_with_small_alpha_warns() {
        let config = CurationConfig { alpha: 0.5, ..Default::default() };
        let m = build_manifest(&[group(&[5.0])], &config, &[]).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.summary.warnings.len(), 1);
    }

    #[test]
    fn regularization_passes_through() {
        let reg = vec![RegularizationItem { image_id: "laion1".into(), caption: "a cat".into() }];
        let m = build_manifest(&[group(&[30.0, 10.0, 10.0])], &CurationConfig::default(), &reg).unwrap();
        assert_eq!(m.summary.regularization, 1);
        let last = m.entries.last().unwrap();
        assert_eq!(last.source, Source::Regularization);
        assert_eq!(last.preferred, None);
        assert_eq!(
            m.to_jsonl().lines().last().unwrap(),
            r#"{"image_id":"laion1","caption":"a cat","source":"regularization"}"#
        );
    }

    #[test]
    fn config_checked() {
        let bad = CurationConfig { alpha: 0.0, ..Default::default() };
        assert!(build_manifest::<f64>(&[], &bad, &[]).is_err());
        let empty = CurationConfig { identifier: String::new(), ..Default::default() };
        assert!(build_manifest::<f64>(&[], &empty, &[]).is_err());
    }
}
