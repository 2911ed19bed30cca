mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{bundled_config, bundled_context, check_turn_order, hello, persona, Client};
use facetalk_core::protocol::{ErrorCode, PersonaSource};
use facetalk_core::providers::mock::{Delayed, MockLlm};
use facetalk_core::providers::{chunk_samples, STT_SAMPLE_RATE};
use facetalk_core::session::SimClock;
use facetalk_core::{serve, AppContext, ClientMessage, CloseReason, EmotionLabel, ServerMessage};
use tokio_tungstenite::tungstenite::Message;

async fn start(ctx: AppContext) -> facetalk_core::ServerHandle {
    serve(ctx, "127.0.0.1:0").await.unwrap()
}

async fn wait_for(cond: impl Fn() -> bool) {
    for _ in 0..500 {
        if cond() {
            return;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("condition not reached");
}

#[tokio::test]
async fn hello_then_turn() {
    let server = start(bundled_context()).await;
    let mut c = Client::connect(server.local_addr()).await;
    c.send(&hello()).await;
    match c.recv().await.unwrap() {
        ServerMessage::SessionReady { channels, fps, .. } => {
            assert_eq!(channels.len(), 52);
            assert_eq!(fps, 30);
        }
        other => panic!("{other:?}"),
    }
    let msgs = c.turn("hello").await;
    let (emotion, duration, audio_ms, frames) = check_turn_order(&msgs).unwrap();
    assert_eq!(emotion, EmotionLabel::Happy);
    assert!((audio_ms - duration as f64).abs() <= 1.0);
    assert_eq!(frames as u64, (duration * 30).div_ceil(1000));
    c.close().await;
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn preset_persona_and_unknown_preset() {
    let server = start(bundled_context()).await;
    let mut c = Client::connect(server.local_addr()).await;
    c.send(&ClientMessage::Hello { persona: PersonaSource::PersonaId("nobody".into()), goal: String::new() }).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::Error { code: ErrorCode::UnknownPersona, .. })));
    c.send(&ClientMessage::Hello { persona: PersonaSource::PersonaId("tutor-es".into()), goal: String::new() }).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::SessionReady { .. })));
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn invalid_persona_lists_every_problem() {
    let server = start(bundled_context()).await;
    let mut c = Client::connect(server.local_addr()).await;
    let mut p = persona();
    p.agent_name = String::new();
    p.language = "xx-INVALID".into();
    c.send(&ClientMessage::Hello { persona: PersonaSource::Persona(p), goal: String::new() }).await;
    match c.recv().await {
        Some(ServerMessage::Error { code: ErrorCode::InvalidPersona, message }) => {
            assert!(message.contains("agent_name"), "{message}");
            assert!(message.contains("xx-INVALID"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn protocol_violations() {
    let server = start(bundled_context()).await;
    let mut c = Client::connect(server.local_addr()).await;
    c.send(&ClientMessage::UtteranceText { text: "hi".into() }).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::Error { code: ErrorCode::ProtocolViolation, .. })));
    c.send_raw(Message::Text("{\"type\":\"nope\"}".into())).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::Error { code: ErrorCode::DecodeError, .. })));
    c.send_raw(Message::Binary(vec![1, 0].into())).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::Error { code: ErrorCode::DecodeError, .. })));
    c.hello().await;
    c.send(&hello()).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::Error { code: ErrorCode::ProtocolViolation, .. })));
    c.send(&ClientMessage::RequestFeedback).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::Error { code: ErrorCode::SessionNotClosed, .. })));
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn audio_utterance_path() {
    let server = start(bundled_context()).await;
    let mut c = Client::connect(server.local_addr()).await;
    c.hello().await;
    for chunk in chunk_samples(&vec![0i16; 8000], STT_SAMPLE_RATE, 1600) {
        c.send(&ClientMessage::UtteranceAudioChunk(chunk)).await;
    }
    c.send(&ClientMessage::UtteranceEnd { sidecar_text: Some("There is a spider on my desk right now.".into()) }).await;
    let msgs = c.recv_until(|m| matches!(m, ServerMessage::AgentReplyEnd | ServerMessage::Error { .. })).await;
    assert_eq!(msgs[0], ServerMessage::UserTranscript { text: "There is a spider on my desk right now.".into() });
    assert_eq!(check_turn_order(&msgs).unwrap().0, EmotionLabel::Afraid);
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn corrupt_audio_stream_aborts_turn_only() {
    let server = start(bundled_context()).await;
    let mut c = Client::connect(server.local_addr()).await;
    c.hello().await;
    let mut chunks = chunk_samples(&vec![0i16; 4800], STT_SAMPLE_RATE, 1600);
    chunks.remove(1);
    for chunk in chunks {
        c.send(&ClientMessage::UtteranceAudioChunk(chunk)).await;
    }
    c.send(&ClientMessage::UtteranceEnd { sidecar_text: Some("hello".into()) }).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::Error { code: ErrorCode::StreamCorrupt, .. })));
    check_turn_order(&c.turn("hello").await).unwrap();
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn end_call_then_feedback_once() {
    let server = start(bundled_context()).await;
    let mut c = Client::connect(server.local_addr()).await;
    c.hello().await;
    c.turn("hello").await;
    c.turn("Tell me about the team.").await;
    c.send(&ClientMessage::EndCall).await;
    assert_eq!(c.recv().await, Some(ServerMessage::SessionClosed { reason: CloseReason::UserEnded }));
    c.send(&ClientMessage::UtteranceText { text: "hi".into() }).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::Error { code: ErrorCode::SessionClosed, .. })));
    c.send(&ClientMessage::RequestFeedback).await;
    match c.recv().await {
        Some(ServerMessage::FeedbackReport { report }) => {
            assert_eq!(report.goal, "Be friendly.");
            assert_eq!(report.strengths[0].quote, "hello");
            assert_eq!(report.weaknesses[0].turn_index, 2);
        }
        other => panic!("{other:?}"),
    }
    c.send(&ClientMessage::RequestFeedback).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::Error { code: ErrorCode::FeedbackUnavailable, .. })));
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn feedback_on_empty_call() {
    let server = start(bundled_context()).await;
    let mut c = Client::connect(server.local_addr()).await;
    c.hello().await;
    c.send(&ClientMessage::EndCall).await;
    c.recv().await;
    c.send(&ClientMessage::RequestFeedback).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::Error { code: ErrorCode::EmptyTranscript, .. })));
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn abuse_limit_over_the_wire() {
    let server = start(bundled_context()).await;
    let mut c = Client::connect(server.local_addr()).await;
    c.hello().await;
    check_turn_order(&c.turn("you idiot").await).unwrap();
    check_turn_order(&c.turn("shut up").await).unwrap();
    let last = c.turn("stupid").await;
    assert_eq!(
        last,
        vec![
            ServerMessage::UserTranscript { text: "stupid".into() },
            ServerMessage::SessionClosed { reason: CloseReason::AbuseLimit }
        ]
    );
    c.send(&ClientMessage::RequestFeedback).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::FeedbackReport { .. })));
    assert_eq!(server.stats().closed_with(CloseReason::AbuseLimit), 1);
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn turn_in_flight_rejected() {
    let cfg = bundled_config();
    let mut ctx = AppContext::from_config(&cfg).unwrap();
    let mut providers = ctx.orchestrator.providers().clone();
    providers.llm = Arc::new(Delayed::fixed(MockLlm::default(), Duration::from_millis(300)));
    ctx = AppContext::with_providers(&cfg, providers).unwrap();
    let server = start(ctx).await;
    let mut c = Client::connect(server.local_addr()).await;
    c.hello().await;
    c.send(&ClientMessage::UtteranceText { text: "one".into() }).await;
    c.send(&ClientMessage::UtteranceText { text: "two".into() }).await;
    let msgs = c.recv_until(|m| matches!(m, ServerMessage::AgentReplyEnd)).await;
    assert!(msgs.iter().any(|m| matches!(m, ServerMessage::Error { code: ErrorCode::TurnInFlight, .. })));
    let turn: Vec<_> = msgs.into_iter().filter(|m| !matches!(m, ServerMessage::Error { .. })).collect();
    assert_eq!(turn[0], ServerMessage::UserTranscript { text: "one".into() });
    check_turn_order(&turn).unwrap();
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn disconnect_mid_turn_closes_transport_lost() {
    let cfg = bundled_config();
    let base = AppContext::from_config(&cfg).unwrap();
    let mut providers = base.orchestrator.providers().clone();
    providers.tts = Arc::new(Delayed::fixed(facetalk_core::providers::mock::MockTts::default(), Duration::from_millis(500)));
    let server = start(AppContext::with_providers(&cfg, providers).unwrap()).await;
    let stats = server.stats();
    let mut c = Client::connect(server.local_addr()).await;
    c.hello().await;
    c.send(&ClientMessage::UtteranceText { text: "hello".into() }).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::UserTranscript { .. })));
    c.close().await;
    wait_for(|| stats.closed_with(CloseReason::TransportLost) == 1 && stats.active_connections() == 0).await;
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn shutdown_closes_every_open_session() {
    let server = start(bundled_context()).await;
    let mut clients = Vec::new();
    for _ in 0..5 {
        let mut c = Client::connect(server.local_addr()).await;
        c.hello().await;
        clients.push(c);
    }
    let stats = server.stats();
    let addr = server.local_addr();
    server.shutdown().await.unwrap();
    for c in &mut clients {
        assert_eq!(c.recv().await, Some(ServerMessage::SessionClosed { reason: CloseReason::ServerShutdown }));
        assert_eq!(c.recv().await, None);
    }
    assert_eq!(stats.closed_with(CloseReason::ServerShutdown), 5);
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.is_err());
}

#[tokio::test]
async fn timers_fire_through_the_gateway() {
    let mut ctx = bundled_context();
    let clock = SimClock::new();
    ctx.clock = Arc::new(clock.clone());
    ctx.tick = Duration::from_millis(5);
    let server = start(ctx).await;
    let mut c = Client::connect(server.local_addr()).await;
    c.hello().await;
    clock.set(Duration::from_secs(479));
    check_turn_order(&c.turn("hello").await).unwrap();
    clock.set(Duration::from_secs(480));
    assert_eq!(c.recv().await, Some(ServerMessage::TimeWarning { remaining_ms: 120_000 }));
    clock.set(Duration::from_secs(600));
    assert_eq!(c.recv().await, Some(ServerMessage::SessionClosed { reason: CloseReason::TimeLimit }));
    // closed by timeout, feedback still available
    c.send(&ClientMessage::RequestFeedback).await;
    assert!(matches!(c.recv().await, Some(ServerMessage::FeedbackReport { .. })));
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn healthz() {
    let server = start(bundled_context()).await;
    let body = reqwest::get(format!("http://{}/healthz", server.local_addr())).await.unwrap().text().await.unwrap();
    assert_eq!(body, "ok");
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn bind_error_is_reported() {
    let server = start(bundled_context()).await;
    let err = serve(bundled_context(), &server.local_addr().to_string()).await.unwrap_err();
    assert!(err.to_string().contains(&server.local_addr().to_string()));
    server.shutdown().await.unwrap();
}
