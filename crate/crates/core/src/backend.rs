//! Wire contract for swapping the rule-based user (or the agent) for an
//! external chat endpoint.
//!
//! A request names the role being played, a system directive and the token
//! history so far; the reply is one token from the closed vocabulary plus an
//! optional free-text rendering. Transport is one JSON object per line over
//! TCP. A reply that cannot be parsed, or whose token is outside the
//! vocabulary, is rejected and the dialogue closes as a timeout; transport
//! failures propagate so the caller can skip the iteration.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agent::{ActionSample, Agent, AgentView, DialogueMemory, StateEstimate};
use crate::behavior::UserProfile;
use crate::error::{Error, Result};
use crate::rng::{RootSeed, SimRng, StreamId};
use crate::user_model::{AgentAction, DialogueOutcome, UserToken, ACTION_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Agent,
    User,
}

/// One exchanged utterance: the agent's action and the user's reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub action: AgentAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<UserToken>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub role: Role,
    pub directive: String,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub token: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// A reply that must not be acted on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum Rejection {
    Malformed(String),
    OutOfVocabulary(String),
}

pub trait ChatBackend: Send + Sync {
    /// Raw reply line for a request. `Err` is a transport failure.
    fn exchange(&self, request: &ChatRequest) -> Result<String>;
}

/// Parses a raw reply and checks its token against a vocabulary.
pub fn parse_reply<T: FromStr>(raw: &str) -> std::result::Result<(T, ChatResponse), Rejection> {
    let response: ChatResponse =
        serde_json::from_str(raw.trim()).map_err(|e| Rejection::Malformed(e.to_string()))?;
    let token = response
        .token
        .parse()
        .map_err(|_| Rejection::OutOfVocabulary(response.token.clone()))?;
    Ok((token, response))
}

/// Replies with the same token to every request.
#[derive(Debug, Clone)]
pub struct EchoBackend {
    pub token: String,
}

impl EchoBackend {
    pub fn new(token: impl Into<String>) -> Self {
        Self { token: token.into() }
    }
}

impl ChatBackend for EchoBackend {
    fn exchange(&self, _: &ChatRequest) -> Result<String> {
        Ok(serde_json::to_string(&ChatResponse {
            token: self.token.clone(),
            text: None,
        })?)
    }
}

/// Line-delimited JSON over TCP, one connection per request.
#[derive(Debug, Clone)]
pub struct TcpBackend {
    pub addr: SocketAddr,
    pub timeout: Duration,
}

impl TcpBackend {
    pub fn new(addr: SocketAddr, timeout: Duration) -> Self {
        Self { addr, timeout }
    }
}

impl ChatBackend for TcpBackend {
    fn exchange(&self, request: &ChatRequest) -> Result<String> {
        let net = |e: std::io::Error| Error::Backend(format!("{}: {e}", self.addr));
        let mut stream = TcpStream::connect_timeout(&self.addr, self.timeout).map_err(net)?;
        stream.set_read_timeout(Some(self.timeout)).map_err(net)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(net)?;
        stream.set_nodelay(true).map_err(net)?;
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        stream.write_all(line.as_bytes()).map_err(net)?;
        let mut reply = String::new();
        BufReader::new(stream).read_line(&mut reply).map_err(net)?;
        if reply.is_empty() {
            return Err(Error::Backend(format!("{}: connection closed without a reply", self.addr)));
        }
        Ok(reply)
    }
}

/// A local TCP endpoint answering each request line with `respond`.
pub struct LoopbackServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl LoopbackServer {
    pub fn spawn<F>(respond: F) -> Result<Self>
    where
        F: Fn(&str) -> String + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::Relaxed) {
                    break;
                }
                let Ok(mut conn) = conn else { continue };
                let mut line = String::new();
                let Ok(clone) = conn.try_clone() else { continue };
                if BufReader::new(clone).read_line(&mut line).is_err() {
                    continue;
                }
                let mut reply = respond(&line);
                reply.push('\n');
                let _ = conn.write_all(reply.as_bytes());
            }
        });
        Ok(Self {
            addr,
            stop,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        // Wake the accept loop so it sees the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Directive text describing a profile to an external user.
pub fn profile_directive(profile: &UserProfile) -> String {
    let traits: Vec<&str> = profile.traits.iter().map(|t| t.name()).collect();
    format!(
        "Play a customer with cooperation {}/4, emotion {}/3, trust {}/5 and traits [{}]. \
         Answer each agent move with one token.",
        profile.initial.cooperation(),
        profile.initial.emotion(),
        profile.initial.trust(),
        traits.join(", ")
    )
}

pub const AGENT_DIRECTIVE: &str = "Greet, learn the customer's needs, present the offer, resolve \
     objections and close the deal. Answer with one action token.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDialogue {
    pub profile: UserProfile,
    pub history: Vec<HistoryEntry>,
    pub outcome: DialogueOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<Rejection>,
}

/// Plays a dialogue whose user side is an external endpoint. The agent sees
/// the profile's levels as a fixed estimate, since the endpoint reports no
/// state. `Agree` closes successfully only as an answer to `CloseDeal`.
pub fn run_backend_dialogue(
    agent: &dyn Agent,
    profile: UserProfile,
    backend: &dyn ChatBackend,
    t_max: u32,
    root: RootSeed,
    stream: StreamId,
) -> Result<BackendDialogue> {
    let mut rng = root.stream(stream);
    let estimate = StateEstimate::from_observation(profile.initial);
    let mut memory = DialogueMemory::default();
    let directive = profile_directive(&profile);
    let mut history: Vec<HistoryEntry> = Vec::new();
    let mut transcript = Vec::new();
    let finish = |history, outcome, rejection| BackendDialogue {
        profile,
        history,
        outcome,
        rejection,
    };
    for _ in 0..t_max {
        let view = AgentView {
            estimate: &estimate,
            flags: memory.flags(),
            memory: &memory,
            transcript: &transcript,
            session: None,
        };
        let action = agent.act(&view, &mut rng)?.action;
        history.push(HistoryEntry { action, token: None });
        let request = ChatRequest {
            role: Role::User,
            directive: directive.clone(),
            history: history.clone(),
        };
        let raw = backend.exchange(&request)?;
        let token = match parse_reply::<UserToken>(&raw) {
            Ok((token, _)) => token,
            Err(rejection) => {
                log::warn!("user backend reply rejected ({rejection:?}); closing as timeout");
                return Ok(finish(history, DialogueOutcome::Timeout, Some(rejection)));
            }
        };
        history.last_mut().expect("pushed above").token = Some(token);
        match token {
            UserToken::Agree if action == AgentAction::CloseDeal => {
                return Ok(finish(history, DialogueOutcome::Success, None));
            }
            UserToken::Agree => {
                let rejection = Rejection::OutOfVocabulary("agree outside a closing attempt".into());
                log::warn!("user backend reply rejected ({rejection:?}); closing as timeout");
                return Ok(finish(history, DialogueOutcome::Timeout, Some(rejection)));
            }
            UserToken::Refuse => return Ok(finish(history, DialogueOutcome::Refusal, None)),
            _ => {
                memory.observe(action, token);
                transcript.push((action, token));
            }
        }
    }
    Ok(finish(history, DialogueOutcome::Timeout, None))
}

/// An agent whose moves come from an external endpoint. A rejected reply
/// is an error, which ends the dialogue.
pub struct BackendAgent<B> {
    pub backend: B,
}

impl<B: ChatBackend> Agent for BackendAgent<B> {
    fn act(&self, view: &AgentView<'_, '_>, _: &mut SimRng) -> Result<ActionSample> {
        let request = ChatRequest {
            role: Role::Agent,
            directive: AGENT_DIRECTIVE.to_string(),
            history: view
                .transcript
                .iter()
                .map(|&(action, token)| HistoryEntry { action, token: Some(token) })
                .collect(),
        };
        let raw = self.backend.exchange(&request)?;
        let (action, _) = parse_reply::<AgentAction>(&raw)
            .map_err(|r| Error::Backend(format!("agent reply rejected: {r:?}")))?;
        let mut probs = [0.0; ACTION_COUNT];
        probs[action.index()] = 1.0;
        Ok(ActionSample {
            action,
            log_prob: 0.0,
            probs,
        })
    }
}
