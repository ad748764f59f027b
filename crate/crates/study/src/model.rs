//! Study, choice and result types.

use std::collections::{BTreeMap, BTreeSet};

use prefalign_core::scoring::{self, AgreementStats, ChoiceVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::StudyError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn index(self) -> usize {
        match self {
            Side::A => 0,
            Side::B => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pair {
    pub pair_id: String,
    pub prompt: String,
    pub image_a_id: String,
    pub image_b_id: String,
    pub model_a_label: String,
    pub model_b_label: String,
}

/// What `POST /studies` accepts.
///
/// `model` optionally attaches a model's predicted choices, keyed by pair id
/// with `0` for image A and `1` for image B.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyManifest {
    pub pairs: Vec<Pair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ChoiceVector>,
}

impl StudyManifest {
    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |m: String| Err(StudyError::InvalidManifest(m));
        if self.pairs.is_empty() {
            return bad("manifest has no pairs".into());
        }
        let mut ids = BTreeSet::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if p.pair_id.is_empty() {
                return bad(format!("pair {i} has an empty pair_id"));
            }
            if p.image_a_id.is_empty() || p.image_b_id.is_empty() {
                return bad(format!("pair {:?} has an empty image id", p.pair_id));
            }
            if !ids.insert(p.pair_id.as_str()) {
                return bad(format!("duplicate pair_id {:?}", p.pair_id));
            }
        }
        if let Some(model) = &self.model {
            for (key, &choice) in &model.choices {
                if !ids.contains(key.as_str()) {
                    return bad(format!("model choice for unknown pair {key:?}"));
                }
                if choice > 1 {
                    return bad(format!("model choice {choice} for pair {key:?} is not 0 or 1"));
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the manifest's JSON encoding; identical manifests share an id.
    pub fn content_id(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(&Sha256::digest(&canonical)[..16])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Study {
    pub study_id: String,
    pub manifest: StudyManifest,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub study_id: String,
    pub participant_id: String,
    pub pair_id: String,
    pub choice: Side,
    pub presented_left: Side,
    pub received_at: u64,
}

/// Which image goes on the left for this participant and pair. Stable across
/// re-fetches and independent of request order.
pub fn presented_left(study_id: &str, participant_id: &str, pair_id: &str) -> Side {
    let mut h = Sha256::new();
    for part in [study_id, participant_id, pair_id] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    if h.finalize()[0] & 1 == 0 {
        Side::A
    } else {
        Side::B
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairTask {
    pub pair_id: String,
    pub pair_index: usize,
    pub prompt: String,
    pub left_image_id: String,
    pub right_image_id: String,
    /// The side shown on the left; a click on the left image records this side.
    pub presented_left: Side,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextPair {
    Pair {
        #[serde(flatten)]
        task: PairTask,
        completed: usize,
        total: usize,
    },
    Done {
        completed: usize,
        total: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairVotes {
    pub pair_id: String,
    pub model_a_label: String,
    pub model_b_label: String,
    pub votes_a: usize,
    pub votes_b: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementBlock {
    /// Participants who answered every pair; only they enter the agreement figures.
    pub complete_participants: usize,
    pub model_vs_panel: Option<AgreementStats>,
    pub panel_vs_panel: Option<AgreementStats>,
    /// Agreement with the strict per-pair majority, over pairs that have one.
    pub model_vs_majority: Option<f64>,
    pub majority_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResults {
    pub study_id: String,
    pub pairs: usize,
    pub participants: usize,
    pub total_votes: usize,
    pub votes: Vec<PairVotes>,
    /// `histogram_a[k]` is the number of A images that received exactly `k` votes.
    pub histogram_a: Vec<usize>,
    pub histogram_b: Vec<usize>,
    /// Fraction of pairs whose A image got more than half of the participants' votes.
    pub fraction_a_over_half: f64,
    pub fraction_b_over_half: f64,
    pub completion: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement: Option<AgreementBlock>,
}

pub(crate) fn compute_results<'a>(study: &Study, records: impl Iterator<Item = &'a ChoiceRecord>) -> StudyResults {
    let pairs = &study.manifest.pairs;
    let index: BTreeMap<&str, usize> = pairs.iter().enumerate().map(|(i, p)| (p.pair_id.as_str(), i)).collect();
    let mut votes = vec![[0usize; 2]; pairs.len()];
    let mut by_participant: BTreeMap<String, ChoiceVector> = BTreeMap::new();
    let mut total_votes = 0;
    for r in records {
        let Some(&i) = index.get(r.pair_id.as_str()) else { continue };
        votes[i][r.choice.index()] += 1;
        total_votes += 1;
        by_participant
            .entry(r.participant_id.clone())
            .or_insert_with(|| ChoiceVector::new(r.participant_id.clone()))
            .choices
            .insert(r.pair_id.clone(), r.choice.index());
    }
    let participants = by_participant.len();
    let mut histogram_a = vec![0; participants + 1];
    let mut histogram_b = vec![0; participants + 1];
    for v in &votes {
        histogram_a[v[0]] += 1;
        histogram_b[v[1]] += 1;
    }
    let over_half = |side: usize| {
        let hits = votes.iter().filter(|v| 2 * v[side] > participants).count();
        if pairs.is_empty() || participants == 0 {
            0.0
        } else {
            hits as f64 / pairs.len() as f64
        }
    };

    let complete: Vec<ChoiceVector> = by_participant.values().filter(|v| v.choices.len() == pairs.len()).cloned().collect();
    let agreement = study.manifest.model.as_ref().map(|model| {
        let model_vs_panel = if model.choices.len() == pairs.len() {
            scoring::panel_agreement(model, &complete).ok()
        } else {
            None
        };
        let mut majority = ChoiceVector::new("majority");
        for (p, v) in pairs.iter().zip(&votes) {
            if v[0] != v[1] {
                majority.choices.insert(p.pair_id.clone(), if v[0] > v[1] { 0 } else { 1 });
            }
        }
        let mut model_on_majority = ChoiceVector::new(model.rater_id.clone());
        for key in majority.choices.keys() {
            if let Some(&c) = model.choices.get(key) {
                model_on_majority.choices.insert(key.clone(), c);
            }
        }
        AgreementBlock {
            complete_participants: complete.len(),
            model_vs_panel,
            panel_vs_panel: scoring::human_agreement(&complete).ok(),
            model_vs_majority: scoring::pairwise_agreement(&model_on_majority, &majority).ok(),
            majority_pairs: majority.choices.len(),
        }
    });

    StudyResults {
        study_id: study.study_id.clone(),
        pairs: pairs.len(),
        participants,
        total_votes,
        votes: pairs
            .iter()
            .zip(&votes)
            .map(|(p, v)| PairVotes {
                pair_id: p.pair_id.clone(),
                model_a_label: p.model_a_label.clone(),
                model_b_label: p.model_b_label.clone(),
                votes_a: v[0],
                votes_b: v[1],
            })
            .collect(),
        histogram_a,
        histogram_b,
        fraction_a_over_half: over_half(0),
        fraction_b_over_half: over_half(1),
        completion: by_participant.into_iter().map(|(k, v)| (k, v.choices.len())).collect(),
        agreement,
    }
}
