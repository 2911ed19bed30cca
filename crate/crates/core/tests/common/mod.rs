#![allow(dead_code)]

pub mod gen;
pub mod oracle;

use std::path::{Path, PathBuf};
use std::time::Duration;

use facetalk_core::protocol::{decode_message, encode_message, PersonaSource, WireFrame};
use facetalk_core::{AppContext, ClientMessage, PersonaSpec, ServerConfig, ServerMessage};
use futures::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

pub const RECV_TIMEOUT: Duration = Duration::from_secs(10);

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn bundled_config() -> ServerConfig {
    ServerConfig::load_with_env(&workspace_root().join("config/facetalk.toml"), |_| None).unwrap()
}

pub fn bundled_context() -> AppContext {
    AppContext::from_config(&bundled_config()).unwrap()
}

pub fn persona() -> PersonaSpec {
    PersonaSpec {
        agent_name: "Ava".into(),
        personality_traits: vec!["friendly".into()],
        background: "Barista.".into(),
        premise: "Small talk at a cafe.".into(),
        user_info: Default::default(),
        language: "en-US".into(),
        avatar_id: "ava".into(),
        voice_id: "v1".into(),
    }
}

pub fn hello() -> ClientMessage {
    ClientMessage::Hello { persona: PersonaSource::Persona(persona()), goal: "Be friendly.".into() }
}

pub struct Client {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

impl Client {
    pub async fn connect(addr: std::net::SocketAddr) -> Self {
        let (ws, _) = tokio_tungstenite::connect_async_with_config(format!("ws://{addr}/ws"), None, true).await.unwrap();
        Self { ws }
    }

    pub async fn send(&mut self, msg: &ClientMessage) {
        let frame = match encode_message(msg) {
            WireFrame::Text(t) => Message::Text(t.into()),
            WireFrame::Binary(b) => Message::Binary(b.into()),
        };
        self.ws.send(frame).await.unwrap();
    }

    pub async fn send_raw(&mut self, msg: Message) {
        self.ws.send(msg).await.unwrap();
    }

    /// Next server message, or `None` once the server closes the socket.
    pub async fn recv(&mut self) -> Option<ServerMessage> {
        loop {
            let next = tokio::time::timeout(RECV_TIMEOUT, self.ws.next()).await.expect("server went quiet");
            let frame = match next? {
                Ok(Message::Text(t)) => WireFrame::Text(t.to_string()),
                Ok(Message::Binary(b)) => WireFrame::Binary(b.to_vec()),
                Ok(Message::Close(_)) | Err(_) => return None,
                Ok(_) => continue,
            };
            return Some(decode_message::<ServerMessage>(&frame).expect("server sent undecodable frame"));
        }
    }

    /// Collects messages up to and including the first that matches `stop`.
    pub async fn recv_until(&mut self, stop: impl Fn(&ServerMessage) -> bool) -> Vec<ServerMessage> {
        let mut out = Vec::new();
        while let Some(m) = self.recv().await {
            let done = stop(&m);
            out.push(m);
            if done {
                return out;
            }
        }
        panic!("connection closed before expected message; got {out:?}");
    }

    pub async fn hello(&mut self) -> String {
        self.send(&hello()).await;
        match self.recv().await {
            Some(ServerMessage::SessionReady { session_id, .. }) => session_id,
            other => panic!("expected session_ready, got {other:?}"),
        }
    }

    pub async fn turn(&mut self, text: &str) -> Vec<ServerMessage> {
        self.send(&ClientMessage::UtteranceText { text: text.into() }).await;
        self.recv_until(|m| {
            matches!(m, ServerMessage::AgentReplyEnd | ServerMessage::SessionClosed { .. } | ServerMessage::Error { .. })
        })
        .await
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

/// Checks the per-turn ordering invariant over one turn's messages and
/// returns (emotion, duration_ms, audio_ms, frame_count).
pub fn check_turn_order(msgs: &[ServerMessage]) -> Result<(facetalk_core::EmotionLabel, u64, f64, usize), String> {
    let mut it = msgs.iter().filter(|m| !matches!(m, ServerMessage::TimeWarning { .. }));
    match it.next() {
        Some(ServerMessage::UserTranscript { .. }) => {}
        other => return Err(format!("expected user_transcript first, got {other:?}")),
    }
    let (emotion, duration) = match it.next() {
        Some(ServerMessage::AgentReplyStart { emotion, duration_ms }) => (*emotion, *duration_ms),
        other => return Err(format!("expected agent_reply_start, got {other:?}")),
    };
    let (mut next_seq, mut next_frame, mut audio_ms, mut ended) = (0u32, 0usize, 0.0f64, false);
    let mut final_seen = false;
    for m in it {
        if ended {
            return Err(format!("message after agent_reply_end: {m:?}"));
        }
        match m {
            ServerMessage::AgentAudioChunk(c) => {
                if c.seq != next_seq || final_seen {
                    return Err(format!("audio seq {} out of order (expected {next_seq})", c.seq));
                }
                final_seen = c.is_final;
                next_seq += 1;
                audio_ms += c.duration_ms();
            }
            ServerMessage::AgentAnimationChunk { first_frame_index, frames } => {
                if *first_frame_index != next_frame {
                    return Err(format!("animation chunk at {first_frame_index}, expected {next_frame}"));
                }
                next_frame += frames.len();
            }
            ServerMessage::AgentReplyEnd => ended = true,
            other => return Err(format!("unexpected message inside a reply: {other:?}")),
        }
    }
    if !ended {
        return Err("missing agent_reply_end".into());
    }
    if !final_seen {
        return Err("no final audio chunk".into());
    }
    Ok((emotion, duration, audio_ms, next_frame))
}
