use std::collections::{BTreeMap, BTreeSet};

use prefalign_core::chat_ingest::{
    extract_sessions, parse_export, sessions_to_instances, AnonymizationKey, Attachment, ChatLog, ChatMessage,
};
use prefalign_core::dataset::{validate, Dataset};
use prefalign_core::synthetic::{chat_log, ChatLogSpec};
use proptest::prelude::*;
use rand::Rng;

fn key() -> AnonymizationKey {
    AnonymizationKey::new(b"fixture key".to_vec()).unwrap()
}

/// (generation id, chosen image id) for every extracted session.
fn session_set(log: &ChatLog) -> BTreeSet<(String, String)> {
    extract_sessions(log)
        .sessions
        .iter()
        .map(|s| (s.generation_message.message_id.clone(), s.choice_message.attachments[0].attachment_id.clone()))
        .collect()
}

#[test]
fn hundred_sessions_are_recovered_exactly() {
    let (log, truth) = chat_log(&ChatLogSpec { sessions: 100, noise_messages: 40, seed: 1, ..Default::default() });
    let raw = log.to_json();
    let parsed = parse_export(raw.as_bytes()).unwrap();
    let ex = extract_sessions(&parsed);
    let instances = sessions_to_instances(&ex.sessions, &key()).unwrap();
    assert_eq!(instances.len(), 100);
    let got: BTreeMap<String, (usize, usize)> =
        instances.iter().map(|i| (i.prompt_id.clone(), (i.n(), i.preferred_index))).collect();
    assert_eq!(got, truth.sessions);
    assert_eq!(ex.diagnostics.sessions, 100);
    assert_eq!(ex.diagnostics.dropped_user_upload + ex.diagnostics.dropped_nsfw, 0);
    assert!(validate(&Dataset::new(instances)).is_clean());
}

#[test]
fn uploads_and_nsfw_sessions_are_dropped_and_counted() {
    let spec = ChatLogSpec { sessions: 100, user_upload_sessions: 7, nsfw_sessions: 5, seed: 2, ..Default::default() };
    let (log, truth) = chat_log(&spec);
    let ex = extract_sessions(&log);
    assert_eq!(ex.sessions.len(), 100);
    assert_eq!(ex.diagnostics.dropped_user_upload, 7);
    assert_eq!(ex.diagnostics.dropped_nsfw, 5);
    assert_eq!(ex.diagnostics.generation_messages, 112);
    let ids: BTreeSet<String> = ex.sessions.iter().map(|s| s.generation_message.message_id.clone()).collect();
    assert_eq!(ids, truth.sessions.keys().cloned().collect());
}

#[test]
fn user_ids_are_anonymized_consistently() {
    let (log, _) = chat_log(&ChatLogSpec { sessions: 40, users: 3, seed: 3, ..Default::default() });
    let instances = sessions_to_instances(&extract_sessions(&log).sessions, &key()).unwrap();
    let users: BTreeSet<&str> = instances.iter().map(|i| i.user_id.as_str()).collect();
    assert_eq!(users.len(), 3);
    assert!(users.iter().all(|u| u.starts_with("u_") && u.len() == 18 && !u.contains("user")));
    let other = sessions_to_instances(&extract_sessions(&log).sessions, &AnonymizationKey::new(b"other".to_vec()).unwrap()).unwrap();
    assert!(other.iter().zip(&instances).all(|(a, b)| a.user_id != b.user_id));
}

fn noise(k: usize, ts: i64, rng: &mut impl Rng) -> ChatMessage {
    let attachments = match k % 3 {
        0 => vec![],
        1 => vec![Attachment { attachment_id: format!("n{k}"), uploaded_by_user: true, nsfw_flag: false }],
        _ => (0..rng.random_range(0..2)).map(|j| Attachment { attachment_id: format!("n{k}_{j}"), uploaded_by_user: false, nsfw_flag: false }).collect(),
    };
    ChatMessage {
        message_id: format!("extra{k}"),
        author_id: format!("lurker{}", k % 4),
        is_bot: k % 2 == 0,
        content: format!("off topic remark {k}"),
        attachments,
        reply_to: None,
        timestamp: ts,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noise_never_changes_the_session_set(seed in any::<u64>(), extra in 0usize..60, sessions in 0usize..30) {
        let (log, _) = chat_log(&ChatLogSpec { sessions, seed, ..Default::default() });
        let before = session_set(&log);
        let mut rng = prefalign_core::shuffle::seeded_rng(seed ^ 0x5eed);
        let mut noisy = log.clone();
        for k in 0..extra {
            let pos = rng.random_range(0..=noisy.messages.len());
            let ts = if noisy.messages.is_empty() { 0 } else { noisy.messages[pos.min(noisy.messages.len() - 1)].timestamp };
            let msg = noise(k, ts, &mut rng);
            noisy.messages.insert(pos, msg);
        }
        prop_assert_eq!(session_set(&noisy), before);
    }

    #[test]
    fn reserializing_is_idempotent(seed in any::<u64>(), sessions in 0usize..30, uploads in 0usize..4, nsfw in 0usize..4) {
        let (log, _) = chat_log(&ChatLogSpec { sessions, user_upload_sessions: uploads, nsfw_sessions: nsfw, seed, ..Default::default() });
        let once = parse_export(log.to_json().as_bytes()).unwrap();
        let twice = parse_export(once.to_json().as_bytes()).unwrap();
        prop_assert_eq!(&once, &twice);
        prop_assert_eq!(session_set(&once), session_set(&twice));
        prop_assert_eq!(extract_sessions(&once).diagnostics, extract_sessions(&twice).diagnostics);
    }

    #[test]
    fn every_instance_is_valid(seed in any::<u64>(), sessions in 0usize..40, noise_messages in 0usize..40, users in 1usize..9) {
        let (log, truth) = chat_log(&ChatLogSpec { sessions, noise_messages, users, seed, ..Default::default() });
        let instances = sessions_to_instances(&extract_sessions(&log).sessions, &key()).unwrap();
        prop_assert_eq!(instances.len(), truth.sessions.len());
        for inst in &instances {
            prop_assert!((2..=4).contains(&inst.n()));
            prop_assert!(inst.preferred_index < inst.n());
        }
        prop_assert!(validate(&Dataset::new(instances)).is_clean());
    }

    #[test]
    fn garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
        let _ = parse_export(&bytes);
    }
}

#[test]
fn bare_arrays_and_wrapped_exports_agree() {
    let (log, _) = chat_log(&ChatLogSpec { sessions: 5, seed: 4, ..Default::default() });
    let wrapped = parse_export(log.to_json().as_bytes()).unwrap();
    let bare = serde_json::to_string(&log.messages).unwrap();
    assert_eq!(parse_export(bare.as_bytes()).unwrap(), wrapped);
}
