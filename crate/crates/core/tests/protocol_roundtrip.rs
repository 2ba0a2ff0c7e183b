mod common;

use humantool_core::protocol::{decode, decode_frame, decode_text, encode, encode_text, FrameErrorKind, WireMessage};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn frames_round_trip(seed in any::<u64>()) {
        let msg = common::random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = encode(&msg).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn socket_text_round_trips(seed in any::<u64>()) {
        let msg = common::random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        let text = encode_text(&msg).unwrap();
        prop_assert_eq!(decode_text(&text).unwrap(), msg);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = decode(&bytes);
    }

    #[test]
    fn any_cut_of_a_frame_is_a_clean_error(seed in any::<u64>(), cut in 0usize..10_000) {
        let msg = common::random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = encode(&msg).unwrap();
        let cut = cut % bytes.len();
        let err = decode(&bytes[..cut]).unwrap_err();
        prop_assert!(err.offset <= cut);
    }
}

#[test]
fn golden_frames_are_byte_exact() {
    for (name, msg) in common::golden_messages() {
        let bytes = encode(&msg).unwrap();
        common::check_golden(&format!("frames/{name}.frame"), &bytes);
        assert_eq!(decode(&bytes).unwrap(), msg, "{name}");
    }
}

#[test]
fn truncated_golden_frame_reports_the_cut() {
    let path = common::golden_dir().join("frames/tools_call_request.frame");
    let bytes = std::fs::read(path).unwrap();
    let err = decode(&bytes[..100]).unwrap_err();
    assert_eq!(err.offset, 100);
    assert!(matches!(err.kind, FrameErrorKind::Truncated { available: 87, .. }));
}

#[test]
fn malformed_corpus_is_rejected() {
    let corpus = common::malformed_frames();
    assert!(corpus.len() >= 20);
    for (name, bytes) in corpus {
        assert!(decode(&bytes).is_err(), "{name} was accepted");
    }
}

#[test]
fn extra_fields_survive_and_do_not_matter() {
    let text = r#"{"protocol_version":"humantool/1","id":1,"kind":"request","method":"tools/list","trace":"abc"}"#;
    let msg = decode_text(text).unwrap();
    assert_eq!(msg.method.as_deref(), Some("tools/list"));
    assert_eq!(msg.extra["trace"], "abc");
    let canonical = r#"{"id":1,"kind":"request","method":"tools/list","protocol_version":"humantool/1","trace":"abc"}"#;
    assert_eq!(encode_text(&msg).unwrap(), canonical);
}

#[test]
fn frames_decode_one_at_a_time_from_a_stream() {
    let a = encode(&WireMessage::request(1, "tools/list", serde_json::json!({}))).unwrap();
    let b = encode(&WireMessage::notification("session/events", serde_json::json!({"since": 0}))).unwrap();
    let stream = [a.clone(), b].concat();
    let (first, used) = decode_frame(&stream).unwrap();
    assert_eq!(used, a.len());
    assert_eq!(first.method.as_deref(), Some("tools/list"));
    let mut reader = std::io::BufReader::new(&stream[..]);
    let mut n = 0;
    while let Some(msg) = humantool_core::protocol::read_frame(&mut reader).unwrap() {
        msg.unwrap();
        n += 1;
    }
    assert_eq!(n, 2);
}
