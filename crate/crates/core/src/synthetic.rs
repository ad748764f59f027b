//! Generators for fixtures with known ground truth: chat logs and embedding sets.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::chat_ingest::{Attachment, ChatLog, ChatMessage};
use crate::dataset::{Dataset, PreferenceInstance};
use crate::embedding::EmbeddingMatrix;
use crate::linalg::Matrix;
use crate::shuffle;

#[derive(Clone, Debug)]
pub struct ChatLogSpec {
    pub sessions: usize,
    pub noise_messages: usize,
    /// Extra sessions whose choice attaches a user-uploaded image.
    pub user_upload_sessions: usize,
    /// Extra sessions with one NSFW-flagged generated image.
    pub nsfw_sessions: usize,
    pub users: usize,
    pub seed: u64,
}

impl Default for ChatLogSpec {
    fn default() -> Self {
        Self {
            sessions: 100,
            noise_messages: 20,
            user_upload_sessions: 0,
            nsfw_sessions: 0,
            users: 7,
            seed: 0,
        }
    }
}

/// What a correct extractor must recover from a generated log.
#[derive(Clone, Debug, Default)]
pub struct ChatLogTruth {
    /// generation message id → (image count, chosen index)
    pub sessions: BTreeMap<String, (usize, usize)>,
    pub counts_by_n: BTreeMap<usize, usize>,
}

fn attachment(id: String) -> Attachment {
    Attachment { attachment_id: id, uploaded_by_user: false, nsfw_flag: false }
}

/// Builds a log of interleaved sessions and unrelated chatter. Every session
/// has a distinct prompt; image counts cycle through 4, 3, 4, 2.
pub fn chat_log(spec: &ChatLogSpec) -> (ChatLog, ChatLogTruth) {
    let mut rng = shuffle::seeded_rng(spec.seed);
    let mut truth = ChatLogTruth::default();
    let mut messages = Vec::new();
    let mut ts = 1_700_000_000_000i64;
    let mut next_ts = |rng: &mut rand_chacha::ChaCha8Rng| {
        ts += rng.random_range(1..5_000);
        ts
    };
    let total = spec.sessions + spec.user_upload_sessions + spec.nsfw_sessions;

    // Each session is a block of three messages; blocks are interleaved below.
    let mut blocks: Vec<Vec<ChatMessage>> = Vec::new();
    for s in 0..total {
        let n = [4, 3, 4, 2][s % 4];
        let user = format!("user{}", s % spec.users.max(1));
        let prompt = format!("prompt number {s}: a castle at dusk");
        let gen_id = format!("gen{s}");
        let chosen = rng.random_range(0..n);
        let mut gen_atts: Vec<Attachment> = (0..n).map(|k| attachment(format!("img{s}_{k}"))).collect();
        let mut choice_att = attachment(format!("img{s}_{chosen}"));
        if s < spec.sessions {
            truth.sessions.insert(gen_id.clone(), (n, chosen));
            *truth.counts_by_n.entry(n).or_default() += 1;
        } else if s < spec.sessions + spec.user_upload_sessions {
            choice_att = Attachment { attachment_id: format!("upload{s}"), uploaded_by_user: true, nsfw_flag: false };
        } else {
            gen_atts[(chosen + 1) % n].nsfw_flag = true;
        }
        blocks.push(vec![
            ChatMessage {
                message_id: format!("prompt{s}"),
                author_id: user.clone(),
                is_bot: false,
                content: prompt.clone(),
                attachments: vec![],
                reply_to: None,
                timestamp: 0,
            },
            ChatMessage {
                message_id: gen_id.clone(),
                author_id: "dreambot".into(),
                is_bot: true,
                content: prompt.clone(),
                attachments: gen_atts,
                reply_to: Some(format!("prompt{s}")),
                timestamp: 0,
            },
            ChatMessage {
                message_id: format!("choice{s}"),
                author_id: user,
                is_bot: false,
                content: prompt,
                attachments: vec![choice_att],
                reply_to: Some(gen_id),
                timestamp: 0,
            },
        ]);
    }
    for k in 0..spec.noise_messages {
        let msg = match k % 4 {
            0 => ChatMessage {
                message_id: format!("noise{k}"),
                author_id: format!("user{}", k % 3),
                is_bot: false,
                content: "anyone know how to get better hands?".into(),
                attachments: vec![],
                reply_to: None,
                timestamp: 0,
            },
            1 => ChatMessage {
                message_id: format!("noise{k}"),
                author_id: "dreambot".into(),
                is_bot: true,
                content: "queue is busy".into(),
                attachments: vec![],
                reply_to: None,
                timestamp: 0,
            },
            2 => ChatMessage {
                message_id: format!("noise{k}"),
                author_id: "dreambot".into(),
                is_bot: true,
                content: "upscaled".into(),
                attachments: vec![attachment(format!("noiseimg{k}"))],
                reply_to: None,
                timestamp: 0,
            },
            _ => ChatMessage {
                message_id: format!("noise{k}"),
                author_id: "user9".into(),
                is_bot: false,
                content: "look at my cat".into(),
                attachments: vec![Attachment { attachment_id: format!("cat{k}"), uploaded_by_user: true, nsfw_flag: false }],
                reply_to: None,
                timestamp: 0,
            },
        };
        blocks.push(vec![msg]);
    }
    blocks.shuffle(&mut rng);
    // Interleave: emit blocks round-robin in small windows so sessions overlap.
    let mut cursors: Vec<std::collections::VecDeque<ChatMessage>> = blocks.into_iter().map(Into::into).collect();
    while !cursors.is_empty() {
        let window = cursors.len().min(3);
        let pick = rng.random_range(0..window);
        let mut msg = cursors[pick].pop_front().expect("non-empty block");
        msg.timestamp = next_ts(&mut rng);
        messages.push(msg);
        if cursors[pick].is_empty() {
            cursors.remove(pick);
        }
    }
    (ChatLog { messages }, truth)
}

/// Embeddings for a preference task that a shared linear projection solves.
pub struct EmbeddingFixture {
    pub dataset: Dataset,
    pub images: EmbeddingMatrix,
    pub texts: EmbeddingMatrix,
}

#[derive(Clone, Debug)]
pub struct SeparableSpec {
    pub prompts: usize,
    pub images_per_prompt: usize,
    pub dim: usize,
    /// Dimension of the subspace where the preferred image matches the text.
    pub signal_dim: usize,
    /// Standard deviation of the independent nuisance components.
    pub nuisance_scale: f64,
    pub seed: u64,
}

impl Default for SeparableSpec {
    fn default() -> Self {
        Self { prompts: 500, images_per_prompt: 4, dim: 32, signal_dim: 24, nuisance_scale: 2.0, seed: 0 }
    }
}

/// Random orthogonal matrix from Gram–Schmidt on Gaussian columns.
pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Matrix<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Matrix::from_fn(dim, dim, |i, j| cols[j][i])
}

/// In a hidden rotated basis, the preferred image copies the text's first
/// `signal_dim / 2` coordinates and the negation of the rest of the signal
/// block (plus small noise); every other image draws them independently. The
/// mirrored half cancels the copied half in expectation, so raw cosine is at
/// chance, while projecting out the mirrored half and the independent
/// nuisance coordinates separates perfectly.
pub fn separable(spec: &SeparableSpec) -> EmbeddingFixture {
    let mut rng = shuffle::seeded_rng(spec.seed);
    let rotation = random_rotation(spec.dim, &mut rng);
    let mut images = EmbeddingMatrix::new(spec.dim).expect("positive dim");
    let mut texts = EmbeddingMatrix::new(spec.dim).expect("positive dim");
    let mut instances = Vec::with_capacity(spec.prompts);
    let gauss = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| -> f64 { scale * rng.sample::<f64, _>(StandardNormal) };

    for p in 0..spec.prompts {
        let prompt_id = format!("p{p:05}");
        let signal: Vec<f64> = (0..spec.signal_dim).map(|_| gauss(&mut rng, 1.0)).collect();
        let latent_text: Vec<f64> = (0..spec.dim)
            .map(|k| if k < spec.signal_dim { signal[k] } else { gauss(&mut rng, spec.nuisance_scale) })
            .collect();
        texts.insert_f64(&prompt_id, &rotation.matvec(&latent_text)).expect("fresh id");
        let preferred = rng.random_range(0..spec.images_per_prompt);
        let mut image_ids = Vec::with_capacity(spec.images_per_prompt);
        for k in 0..spec.images_per_prompt {
            let latent: Vec<f64> = (0..spec.dim)
                .map(|j| {
                    if j < spec.signal_dim {
                        if k == preferred {
                            mirror(spec, j) * signal[j] + gauss(&mut rng, 0.05)
                        } else {
                            gauss(&mut rng, 1.0)
                        }
                    } else {
                        gauss(&mut rng, spec.nuisance_scale)
                    }
                })
                .collect();
            let id = format!("{prompt_id}_i{k}");
            images.insert_f64(&id, &rotation.matvec(&latent)).expect("fresh id");
            image_ids.push(id);
        }
        instances.push(PreferenceInstance {
            prompt_id: prompt_id.clone(),
            prompt: format!("synthetic prompt {p}"),
            user_id: format!("u{}", p % 13),
            image_ids,
            preferred_index: preferred,
        });
    }
    EmbeddingFixture { dataset: Dataset::new(instances), images, texts }
}

/// Every embedding is an independent standard Gaussian: no image is
/// distinguishable from the others.
pub fn isotropic(prompts: usize, dim: usize, image_counts: &[usize], seed: u64) -> EmbeddingFixture {
    let mut rng = shuffle::seeded_rng(seed);
    let mut images = EmbeddingMatrix::new(dim).expect("positive dim");
    let mut texts = EmbeddingMatrix::new(dim).expect("positive dim");
    let mut instances = Vec::with_capacity(prompts);
    for p in 0..prompts {
        let prompt_id = format!("p{p:05}");
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        texts.insert_f64(&prompt_id, &v).expect("fresh id");
        let n = image_counts[p % image_counts.len()];
        let image_ids: Vec<String> = (0..n)
            .map(|k| {
                let id = format!("{prompt_id}_i{k}");
                let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                images.insert_f64(&id, &v).expect("fresh id");
                id
            })
            .collect();
        instances.push(PreferenceInstance {
            preferred_index: rng.random_range(0..n),
            prompt_id,
            prompt: format!("isotropic prompt {p}"),
            user_id: "u".into(),
            image_ids,
        });
    }
    EmbeddingFixture { dataset: Dataset::new(instances), images, texts }
}

fn mirror(spec: &SeparableSpec, j: usize) -> f64 {
    if j < spec.signal_dim / 2 { 1.0 } else { -1.0 }
}
