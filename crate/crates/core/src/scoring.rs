//! Image-prompt scores, per-prompt choices, preference accuracy and rater agreement.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::embedding::{cosine, VectorError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ScoringError {
    #[error(transparent)]
    Vector(#[from] VectorError),
    #[error("MLP layer {layer}: expected input of length {expected}, got {actual}")]
    LayerMismatch {
        layer: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid MLP weights: {0}")]
    InvalidWeights(String),
    #[error("missing predictions for {} prompt(s): {}", .0.len(), .0.join(", "))]
    MissingPrediction(Vec<String>),
    #[error("rater key sets differ")]
    KeyMismatch,
    #[error("nothing to compare")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `100 × cos(image, text)`.
pub fn hps<T: Scalar>(img_emb: &[T], txt_emb: &[T]) -> Result<T, VectorError> {
    Ok(T::lit(100.0) * cosine(img_emb, txt_emb)?)
}

pub fn clip_score<T: Scalar>(img_emb: &[T], txt_emb: &[T]) -> Result<T, VectorError> {
    cosine(img_emb, txt_emb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(T::zero()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpLayer<T> {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

/// Fully-connected head over an image embedding. The architecture lives in
/// the weights; the last layer must have one output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights<T> {
    pub layers: Vec<MlpLayer<T>>,
}

pub const MLP1_MAGIC: &[u8; 4] = b"MLP1";

impl<T: Scalar> MlpWeights<T> {
    pub fn new(layers: Vec<MlpLayer<T>>) -> Result<Self, ScoringError> {
        let w = Self { layers };
        w.check()?;
        Ok(w)
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    fn check(&self) -> Result<(), ScoringError> {
        let bad = |m: String| Err(ScoringError::InvalidWeights(m));
        if self.layers.is_empty() {
            return bad("no layers".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return bad(format!("layer {i} buffer sizes do not match {}x{}", l.rows, l.cols));
            }
            if i > 0 && self.layers[i - 1].rows != l.cols {
                return bad(format!("layer {i} expects {} inputs but the previous layer has {} outputs", l.cols, self.layers[i - 1].rows));
            }
        }
        if self.layers.last().map(|l| l.rows) != Some(1) {
            return bad("last layer must have exactly one output".into());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MLP1_MAGIC);
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.rows as u32).to_le_bytes());
            out.extend_from_slice(&(l.cols as u32).to_le_bytes());
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
            out.push(l.activation.code());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ScoringError> {
        let truncated = || ScoringError::InvalidWeights("truncated MLP1 file".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], ScoringError> {
            let s = bytes.get(pos..pos + n).ok_or_else(truncated)?;
            pos += n;
            Ok(s)
        };
        if take(4)? != MLP1_MAGIC {
            return Err(ScoringError::InvalidWeights("bad magic, expected \"MLP1\"".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let count = u32_at(take(4)?);
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rows = u32_at(take(4)?);
            let cols = u32_at(take(4)?);
            let floats = |b: &[u8]| -> Vec<T> {
                b.chunks_exact(4)
                    .map(|c| T::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])).unwrap_or_else(T::nan))
                    .collect()
            };
            let weights = floats(take(4 * rows * cols)?);
            let bias = floats(take(4 * rows)?);
            let code = take(1)?[0];
            let activation = Activation::from_code(code)
                .ok_or_else(|| ScoringError::InvalidWeights(format!("unknown activation code {code}")))?;
            layers.push(MlpLayer { rows, cols, weights, bias, activation });
        }
        if pos != bytes.len() {
            return Err(ScoringError::InvalidWeights("trailing bytes after last layer".into()));
        }
        Self::new(layers)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScoringError> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ScoringError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Forward pass `x ← act(Wx + b)` through every layer.
pub fn aesthetic_score<T: Scalar>(img_emb: &[T], weights: &MlpWeights<T>) -> Result<T, ScoringError> {
    let mut x = img_emb.to_vec();
    for (i, layer) in weights.layers.iter().enumerate() {
        if x.len() != layer.cols {
            return Err(ScoringError::LayerMismatch {
                layer: i,
                expected: layer.cols,
                actual: x.len(),
            });
        }
        x = layer
            .weights
            .chunks_exact(layer.cols)
            .zip(&layer.bias)
            .map(|(row, &b)| layer.activation.apply(crate::scalar::dot(row, &x) + b))
            .collect();
    }
    match x.as_slice() {
        [score] => Ok(*score),
        _ => Err(ScoringError::InvalidWeights("last layer must have exactly one output".into())),
    }
}

/// Scores of one prompt's images, in instance order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredGroup<T> {
    pub prompt_id: String,
    pub text_embedding_id: String,
    pub image_scores: Vec<(String, T)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub index: usize,
    /// More than one image shared the top score; the lowest index won.
    pub tie: bool,
}

/// Argmax with ties broken towards the lowest index. `None` for an empty slice.
pub fn argmax<T: PartialOrd + Copy>(scores: &[T]) -> Option<Choice> {
    let (first, rest) = scores.split_first()?;
    let mut best = (0, *first);
    let mut tie = false;
    for (i, &s) in rest.iter().enumerate() {
        if s > best.1 {
            best = (i + 1, s);
            tie = false;
        } else if s == best.1 {
            tie = true;
        }
    }
    Some(Choice { index: best.0, tie })
}

/// The model's pick for a group: the highest-scoring image.
pub fn choose<T: Scalar>(group: &ScoredGroup<T>) -> Choice {
    let scores: Vec<T> = group.image_scores.iter().map(|(_, s)| *s).collect();
    argmax(&scores).unwrap_or(Choice { index: 0, tie: false })
}

/// One rater's picks, keyed by prompt id or pair id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceVector {
    pub rater_id: String,
    pub choices: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct ChoiceLine {
    rater_id: String,
    key: String,
    choice: usize,
}

impl ChoiceVector {
    pub fn new(rater_id: impl Into<String>) -> Self {
        Self {
            rater_id: rater_id.into(),
            choices: BTreeMap::new(),
        }
    }

    /// Reads `{rater_id, key, choice}` lines, one vector per rater in first-seen order.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<ChoiceVector>, ScoringError> {
        let mut out: Vec<ChoiceVector> = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ChoiceLine = serde_json::from_str(&line).map_err(|e| ScoringError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            let pos = match out.iter().position(|v| v.rater_id == rec.rater_id) {
                Some(p) => p,
                None => {
                    out.push(ChoiceVector::new(rec.rater_id.clone()));
                    out.len() - 1
                }
            };
            out[pos].choices.insert(rec.key, rec.choice);
        }
        Ok(out)
    }

    pub fn to_jsonl(&self) -> String {
        self.choices
            .iter()
            .map(|(key, &choice)| {
                let line = ChoiceLine {
                    rater_id: self.rater_id.clone(),
                    key: key.clone(),
                    choice,
                };
                serde_json::to_string(&line).expect("choice line serializes") + "\n"
            })
            .collect()
    }
}

/// Fraction of prompts whose predicted index equals the human choice.
pub fn preference_accuracy(predicted: &ChoiceVector, truth: &Dataset) -> Result<f64, ScoringError> {
    if truth.is_empty() {
        return Err(ScoringError::Empty);
    }
    let missing: Vec<String> = truth
        .instances
        .iter()
        .filter(|i| !predicted.choices.contains_key(&i.prompt_id))
        .map(|i| i.prompt_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ScoringError::MissingPrediction(missing));
    }
    let hits = truth
        .instances
        .iter()
        .filter(|i| predicted.choices[&i.prompt_id] == i.preferred_index)
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Fraction of shared keys on which two raters made the same choice.
pub fn pairwise_agreement(a: &ChoiceVector, b: &ChoiceVector) -> Result<f64, ScoringError> {
    if !a.choices.keys().eq(b.choices.keys()) {
        return Err(ScoringError::KeyMismatch);
    }
    if a.choices.is_empty() {
        return Err(ScoringError::Empty);
    }
    let same = a
        .choices
        .values()
        .zip(b.choices.values())
        .filter(|(x, y)| x == y)
        .count();
    Ok(same as f64 / a.choices.len() as f64)
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub mean: f64,
    pub std: f64,
    pub comparisons: usize,
}

impl AgreementStats {
    fn from_values(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            comparisons: values.len(),
        }
    }
}

/// Agreement of a model with each rater of a panel.
pub fn panel_agreement(model: &ChoiceVector, panel: &[ChoiceVector]) -> Result<AgreementStats, ScoringError> {
    if panel.is_empty() {
        return Err(ScoringError::Empty);
    }
    let values = panel
        .iter()
        .map(|rater| pairwise_agreement(model, rater))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AgreementStats::from_values(&values))
}

/// Agreement over all unordered pairs of raters.
pub fn human_agreement(panel: &[ChoiceVector]) -> Result<AgreementStats, ScoringError> {
    let mut values = Vec::new();
    for (i, a) in panel.iter().enumerate() {
        for b in &panel[i + 1..] {
            values.push(pairwise_agreement(a, b)?);
        }
    }
    if values.is_empty() {
        return Err(ScoringError::Empty);
    }
    Ok(AgreementStats::from_values(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PreferenceInstance;

    fn cv(rater: &str, picks: &[usize]) -> ChoiceVector {
        ChoiceVector {
            rater_id: rater.into(),
            choices: picks
                .iter()
                .enumerate()
                .map(|(i, &c)| (format!("k{i:02}"), c))
                .collect(),
        }
    }

    #[test]
    fn hps_examples() {
        assert!((hps(&[0.6, 0.8], &[0.6, 0.8]).unwrap() - 100.0f64).abs() < 1e-12);
        assert_eq!(hps(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v: f64 = hps(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((v - 70.710_678_118_654_76).abs() < 1e-12);
        assert_eq!(clip_score(&[2.0, 1.0], &[2.0, 1.0]).unwrap(), 1.0);
    }

    fn layer(rows: usize, cols: usize, w: &[f64], b: &[f64], act: Activation) -> MlpLayer<f64> {
        MlpLayer { rows, cols, weights: w.to_vec(), bias: b.to_vec(), activation: act }
    }

    #[test]
    fn aesthetic_examples() {
        let id = MlpWeights::new(vec![layer(1, 1, &[1.0], &[0.0], Activation::Identity)]).unwrap();
        assert_eq!(aesthetic_score(&[5.0], &id).unwrap(), 5.0);

        let two = MlpWeights::new(vec![
            layer(2, 1, &[1.0, -1.0], &[0.0, 0.0], Activation::Relu),
            layer(1, 2, &[1.0, 1.0], &[0.0], Activation::Identity),
        ])
        .unwrap();
        assert_eq!(aesthetic_score(&[3.0], &two).unwrap(), 3.0);

        let bias = MlpWeights::new(vec![
            layer(2, 3, &[0.0; 6], &[0.0, 0.0], Activation::Relu),
            layer(1, 2, &[0.0, 0.0], &[7.0], Activation::Identity),
        ])
        .unwrap();
        assert_eq!(aesthetic_score(&[1.0, 2.0, 3.0], &bias).unwrap(), 7.0);
        assert!(matches!(
            aesthetic_score(&[1.0], &bias),
            Err(ScoringError::LayerMismatch { layer: 0, expected: 3, actual: 1 })
        ));
    }

    #[test]
    fn mlp_chain_checked() {
        let broken = MlpWeights::new(vec![
            layer(2, 1, &[1.0, 1.0], &[0.0, 0.0], Activation::Relu),
            layer(1, 3, &[1.0, 1.0, 1.0], &[0.0], Activation::Identity),
        ]);
        assert!(matches!(broken, Err(ScoringError::InvalidWeights(_))));
        let two_out = MlpWeights::new(vec![layer(2, 1, &[1.0, 1.0], &[0.0, 0.0], Activation::Relu)]);
        assert!(two_out.is_err());
    }

    #[test]
    fn mlp1_round_trip() {
        let w = MlpWeights::new(vec![
            layer(2, 3, &[0.5, -1.0, 2.0, 0.25, 0.0, 1.5], &[0.1, -0.2], Activation::Relu),
            layer(1, 2, &[1.0, -1.0], &[3.0], Activation::Identity),
        ])
        .unwrap();
        let bytes = w.to_bytes();
        assert_eq!(&bytes[..4], b"MLP1");
        let back = MlpWeights::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(back.layers.len(), 2);
        assert_eq!(back.layers[0].activation, Activation::Relu);
        assert!((back.layers[0].bias[0] - 0.1).abs() < 1e-7);
        assert!(MlpWeights::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    fn group(scores: &[f64]) -> ScoredGroup<f64> {
        ScoredGroup {
            prompt_id: "p".into(),
            text_embedding_id: "p".into(),
            image_scores: scores.iter().enumerate().map(|(i, &s)| (format!("i{i}"), s)).collect(),
        }
    }

    #[test]
    fn choose_examples() {
        assert_eq!(choose(&group(&[0.1, 0.9, 0.3])), Choice { index: 1, tie: false });
        assert_eq!(choose(&group(&[0.5; 4])), Choice { index: 0, tie: true });
        // tie below the maximum is not a tie
        assert_eq!(choose(&group(&[0.2, 0.2, 0.9])), Choice { index: 2, tie: false });
    }

    #[test]
    fn accuracy_examples() {
        let truth = Dataset::new(
            [0usize, 1, 2, 3]
                .iter()
                .map(|&p| PreferenceInstance {
                    prompt_id: format!("p{p}"),
                    prompt: String::new(),
                    user_id: "u".into(),
                    image_ids: (0..4).map(|k| format!("p{p}i{k}")).collect(),
                    preferred_index: p,
                })
                .collect(),
        );
        let mut exact = ChoiceVector::new("m");
        let mut zeros = ChoiceVector::new("z");
        for inst in &truth.instances {
            exact.choices.insert(inst.prompt_id.clone(), inst.preferred_index);
            zeros.choices.insert(inst.prompt_id.clone(), 0);
        }
        assert_eq!(preference_accuracy(&exact, &truth).unwrap(), 1.0);
        assert_eq!(preference_accuracy(&zeros, &truth).unwrap(), 0.25);
        zeros.choices.remove("p3");
        match preference_accuracy(&zeros, &truth) {
            Err(ScoringError::MissingPrediction(ids)) => assert_eq!(ids, vec!["p3".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn agreement_examples() {
        let a = cv("a", &[0, 1, 0, 1, 0, 1, 0, 1, 0, 1]);
        let mut flipped = a.clone();
        *flipped.choices.get_mut("k00").unwrap() = 1;
        *flipped.choices.get_mut("k01").unwrap() = 0;
        assert_eq!(pairwise_agreement(&a, &a).unwrap(), 1.0);
        assert_eq!(pairwise_agreement(&a, &flipped).unwrap(), 0.8);
        let short = cv("s", &[0, 1]);
        assert!(matches!(pairwise_agreement(&a, &short), Err(ScoringError::KeyMismatch)));
    }

    #[test]
    fn panel_of_one_identical() {
        let a = cv("a", &[0, 1, 1]);
        let s = panel_agreement(&a, &[a.clone()]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 0.0));
        assert!(human_agreement(&[a]).is_err());
    }

    #[test]
    fn choice_jsonl_round_trip() {
        let a = cv("alice", &[0, 1, 1]);
        let b = cv("bob", &[1, 1, 0]);
        let text = a.to_jsonl() + &b.to_jsonl();
        let back = ChoiceVector::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
