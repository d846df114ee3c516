use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use proptest::prelude::*;
use valdec_core::engine::{DecodeConfig, EngineError};
use valdec_core::evaluator::EvalError;
use valdec_core::protocol::{
    decode_line, encode_line, handle_line, EvalRequest, EvalResponse, MockServer, ProtocolError, RemoteEvaluator,
    WireAction, PROTOCOL_VERSION,
};
use valdec_core::{
    decode_sequence, CachedEvaluator, Evaluator, HashedLogits, Policy, RewardSpec, TabularEvaluator, Token, ToyEnv,
};

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// The evaluator behind the golden transcript: vocab 4, length 3, EOS 3.
fn golden_evaluator() -> TabularEvaluator {
    let env = ToyEnv::new(4, 3, RewardSpec::SuffixMatch { suffix: vec![1, 2] }).with_eos(3);
    let p: Arc<dyn Policy> = Arc::new(HashedLogits::new(4, 7, 1.0));
    let r: Arc<dyn Policy> = Arc::new(HashedLogits::new(4, 8, 1.0));
    TabularEvaluator::new(env, p, Some(r), Arc::new(|s: &[Token]| 0.25 * s.len() as f64)).unwrap()
}

#[test]
fn mock_server_matches_golden_transcript() {
    let ev = golden_evaluator();
    let requests = std::fs::read_to_string(golden_dir().join("requests.jsonl")).unwrap();
    let expected = std::fs::read_to_string(golden_dir().join("responses.jsonl")).unwrap();
    let mut got = String::new();
    for line in requests.lines() {
        got += &encode_line(&handle_line(&ev, line)).unwrap();
    }
    if std::env::var_os("VALDEC_BLESS").is_some() {
        std::fs::write(golden_dir().join("responses.jsonl"), &got).unwrap();
        return;
    }
    assert_eq!(got, expected);
}

#[test]
fn golden_responses_obey_the_wire_rules() {
    let ev = golden_evaluator();
    let p = HashedLogits::new(4, 7, 1.0);
    let requests = std::fs::read_to_string(golden_dir().join("requests.jsonl")).unwrap();
    let responses = std::fs::read_to_string(golden_dir().join("responses.jsonl")).unwrap();
    for (q, a) in requests.lines().zip(responses.lines()) {
        let resp: EvalResponse = decode_line(a).unwrap();
        assert_eq!(resp.v, PROTOCOL_VERSION);
        let Ok(req) = decode_line::<EvalRequest>(q) else {
            assert!(resp.error.is_some());
            continue;
        };
        assert_eq!(resp.request_id, req.request_id);
        if resp.error.is_some() {
            continue;
        }
        assert!(resp.actions.len() <= req.top_k.min(4));
        assert!(resp.actions.windows(2).all(|w| w[0].logp >= w[1].logp));
        let lp = p.log_probs(&req.state_tokens);
        for a in &resp.actions {
            assert_eq!(a.logp, lp[a.token as usize]);
            assert_eq!(a.ref_logp.is_some(), req.want_reference);
        }
        assert_eq!(resp.reward.is_some(), resp.is_terminal);
        assert_eq!(resp.is_terminal, ev.env().is_terminal(&req.state_tokens));
    }
}

#[test]
fn top_k_beyond_the_vocabulary_returns_everything() {
    let ev = golden_evaluator();
    let line = r#"{"v":1,"request_id":"x","state_tokens":[0],"top_k":100,"want_reference":true}"#;
    let resp = handle_line(&ev, line);
    assert!(resp.error.is_none());
    let mut tokens: Vec<Token> = resp.actions.iter().map(|a| a.token).collect();
    tokens.sort();
    assert_eq!(tokens, vec![0, 1, 2, 3]);
}

#[test]
fn reference_request_without_reference_is_an_error() {
    let env = ToyEnv::new(3, 2, RewardSpec::SentimentProxy);
    let p: Arc<dyn Policy> = Arc::new(HashedLogits::new(3, 1, 1.0));
    let ev = TabularEvaluator::new(env, p, None, Arc::new(|_: &[Token]| 0.0)).unwrap();
    let line = r#"{"v":1,"request_id":"q","state_tokens":[],"top_k":3,"want_reference":true}"#;
    let resp = handle_line(&ev, line);
    assert_eq!(resp.request_id, "q");
    assert!(resp.error.unwrap().contains("reference"));
}

fn arb_f64() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |x| x.is_finite()),
        -50.0f64..1.0,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(5e-324),
    ]
}

fn arb_request() -> impl Strategy<Value = EvalRequest> {
    (any::<u32>(), "[ -~]{0,12}", prop::collection::vec(any::<u32>(), 0..20), any::<usize>(), any::<bool>()).prop_map(
        |(v, request_id, state_tokens, top_k, want_reference)| EvalRequest {
            v,
            request_id,
            state_tokens,
            top_k,
            want_reference,
        },
    )
}

fn arb_response() -> impl Strategy<Value = EvalResponse> {
    let action = (any::<u32>(), arb_f64(), prop::option::of(arb_f64())).prop_map(|(token, logp, ref_logp)| WireAction {
        token,
        logp,
        ref_logp,
    });
    (
        any::<u32>(),
        "\\PC{0,12}",
        prop::collection::vec(action, 0..10),
        arb_f64(),
        any::<bool>(),
        prop::option::of(arb_f64()),
        prop::option::of("\\PC{0,20}"),
    )
        .prop_map(|(v, request_id, actions, value, is_terminal, reward, error)| EvalResponse {
            v,
            request_id,
            actions,
            value,
            is_terminal,
            reward,
            error,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn requests_round_trip(req in arb_request()) {
        let line = encode_line(&req).unwrap();
        prop_assert!(line.ends_with('\n') && !line[..line.len() - 1].contains('\n'));
        prop_assert_eq!(decode_line::<EvalRequest>(&line).unwrap(), req);
    }

    #[test]
    fn responses_round_trip_bit_for_bit(resp in arb_response()) {
        let line = encode_line(&resp).unwrap();
        prop_assert!(!line[..line.len() - 1].contains('\n'));
        let back: EvalResponse = decode_line(&line).unwrap();
        prop_assert_eq!(back.value.to_bits(), resp.value.to_bits());
        for (a, b) in back.actions.iter().zip(&resp.actions) {
            prop_assert_eq!(a.logp.to_bits(), b.logp.to_bits());
            prop_assert_eq!(a.ref_logp.map(f64::to_bits), b.ref_logp.map(f64::to_bits));
        }
        prop_assert_eq!(back, resp);
    }
}

/// A one-connection server that answers every request line with `reply(request)`.
fn scripted_server(reply: impl Fn(&EvalRequest) -> Option<String> + Send + 'static) -> std::net::SocketAddr {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut writer = stream.try_clone().unwrap();
        for line in BufReader::new(stream).lines() {
            let Ok(line) = line else { return };
            let req: EvalRequest = decode_line(&line).unwrap();
            match reply(&req) {
                Some(out) => {
                    if writer.write_all(out.as_bytes()).is_err() {
                        return;
                    }
                }
                None => return,
            }
        }
    });
    addr
}

fn caps() -> valdec_core::EvaluatorCaps {
    golden_evaluator().caps()
}

fn small_config() -> DecodeConfig {
    DecodeConfig {
        num_simulations: 5,
        branching: 4,
        max_new_tokens: 3,
        ..DecodeConfig::default()
    }
}

fn decode_against(reply: impl Fn(&EvalRequest) -> Option<String> + Send + 'static) -> EngineError {
    let addr = scripted_server(reply);
    let remote = RemoteEvaluator::connect_with_timeout(addr, caps(), Duration::from_secs(5)).unwrap();
    decode_sequence(&[0], &small_config(), &remote).unwrap_err()
}

fn protocol_error(e: EngineError) -> ProtocolError {
    match e {
        EngineError::Eval(EvalError::Protocol(p)) => p,
        other => panic!("expected a protocol error, got {other:?}"),
    }
}

fn good(req: &EvalRequest) -> EvalResponse {
    valdec_core::protocol::handle_request(&golden_evaluator(), req)
}

#[test]
fn garbage_response_aborts_cleanly() {
    let e = protocol_error(decode_against(|_| Some("not json\n".into())));
    assert!(matches!(e, ProtocolError::Malformed(_)));
}

#[test]
fn unknown_fields_are_malformed() {
    let e = protocol_error(decode_against(|req| {
        let mut v = serde_json::to_value(good(req)).unwrap();
        v["extra"] = serde_json::json!(1);
        Some(format!("{v}\n"))
    }));
    assert!(matches!(e, ProtocolError::Malformed(_)));
}

#[test]
fn wrong_request_id_aborts_cleanly() {
    let e = protocol_error(decode_against(|req| {
        let mut r = good(req);
        r.request_id = "other".into();
        Some(encode_line(&r).unwrap())
    }));
    assert!(matches!(e, ProtocolError::IdMismatch { .. }));
}

#[test]
fn wrong_version_aborts_cleanly() {
    let e = protocol_error(decode_against(|req| {
        let mut r = good(req);
        r.v = 2;
        Some(encode_line(&r).unwrap())
    }));
    assert!(matches!(e, ProtocolError::Version(2)));
}

#[test]
fn too_many_actions_abort_cleanly() {
    let e = protocol_error(decode_against(|req| {
        let mut r = good(req);
        let extra = r.actions[0].clone();
        r.actions.extend(std::iter::repeat(extra).take(req.top_k + 1));
        Some(encode_line(&r).unwrap())
    }));
    assert!(matches!(e, ProtocolError::Invalid(_)));
}

#[test]
fn missing_reference_log_probs_abort_cleanly() {
    let e = protocol_error(decode_against(|req| {
        let mut r = good(req);
        for a in &mut r.actions {
            a.ref_logp = None;
        }
        Some(encode_line(&r).unwrap())
    }));
    assert!(matches!(e, ProtocolError::Invalid(_)));
}

#[test]
fn server_error_is_reported() {
    let e = protocol_error(decode_against(|req| Some(encode_line(&EvalResponse::error(&req.request_id, "boom")).unwrap())));
    assert!(matches!(e, ProtocolError::Server(m) if m == "boom"));
}

#[test]
fn out_of_vocabulary_token_aborts_cleanly() {
    let e = decode_against(|req| {
        let mut r = good(req);
        r.actions[0].token = 99;
        Some(encode_line(&r).unwrap())
    });
    assert!(matches!(e, EngineError::VocabularyMismatch { token: 99, .. }));
}

#[test]
fn closed_connection_aborts_cleanly() {
    let e = protocol_error(decode_against(|_| None));
    assert!(matches!(e, ProtocolError::Closed | ProtocolError::Io(_)));
}

#[test]
fn silent_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hold = thread::spawn(move || {
        let (s, _) = listener.accept().unwrap();
        thread::sleep(Duration::from_millis(800));
        drop(s);
    });
    let remote = RemoteEvaluator::connect_with_timeout(addr, caps(), Duration::from_millis(200)).unwrap();
    let err = remote.evaluate_state(&[0], 4).unwrap_err();
    assert!(matches!(err, EvalError::Protocol(ProtocolError::Timeout(_))), "{err:?}");
    hold.join().unwrap();
}

#[test]
fn remote_decode_matches_local_and_cache_saves_calls() {
    let ev = Arc::new(golden_evaluator());
    let server = MockServer::spawn(ev.clone(), "127.0.0.1:0").unwrap();
    let config = DecodeConfig {
        num_simulations: 30,
        ..small_config()
    };
    let local = decode_sequence(&[0], &config, &*ev).unwrap();
    let remote = RemoteEvaluator::connect(server.local_addr(), ev.caps()).unwrap();
    assert_eq!(decode_sequence(&[0], &config, &remote).unwrap(), local);
    let cached = CachedEvaluator::new(RemoteEvaluator::connect(server.local_addr(), ev.caps()).unwrap());
    let first = decode_sequence(&[0], &config, &cached).unwrap();
    let calls = cached.inner_calls();
    assert!(calls > 0);
    // a repeat decode is served entirely from the cache
    assert_eq!(decode_sequence(&[0], &config, &cached).unwrap(), first);
    assert_eq!(cached.inner_calls(), calls);
    assert_eq!(first.tokens, local.tokens);
    drop(server);
}

#[test]
fn terminal_reward_falls_back_to_a_request() {
    let ev = Arc::new(golden_evaluator());
    let server = MockServer::spawn(ev.clone(), "127.0.0.1:0").unwrap();
    let remote = RemoteEvaluator::connect(server.local_addr(), ev.caps()).unwrap();
    assert_eq!(remote.terminal_reward(&[0, 1, 2]).unwrap(), 1.0);
    assert_eq!(remote.terminal_reward(&[3]).unwrap(), 0.0);
    assert!(remote.terminal_reward(&[0]).is_err());
}
