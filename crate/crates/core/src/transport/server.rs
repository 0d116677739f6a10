use std::net::TcpListener;
use std::sync::{Arc, Mutex};

use rand_chacha::ChaCha20Rng;
use serde_json::json;

use super::config::{load_policy, load_roots, load_vendor, HandlerKind, ServerConfig};
use super::{
    event, plain_response, rng_and_clock, spawn_accept_loop, tls_server_config, HttpConn,
    ServerHandle, StartError, TranscriptWriter,
};
use crate::clock::Clock;
use crate::handshake::{Failure, HandshakeConfig, ServerHandshake, SessionCache};
use crate::keyschedule::Role;
use crate::quote::SimulatedTee;
use crate::record::{serve_record, Handler, RouteError, Router, SessionScope, RECORD_CONTENT_TYPE};
use crate::verify::{Policy, QuoteVerifier, Verifier};
use crate::wire::headers::{ATTEST_SESSION_ID, CONTENT_TYPE};
use crate::wire::{classify, HttpMessage, MessageKind, SessionId, WireError};

/// One attested service: its own TEE, handler and session cache.
struct Service {
    name: String,
    tee: Arc<SimulatedTee>,
    handler: Arc<dyn Handler>,
    sessions: SessionCache,
}

impl SessionScope for Service {
    fn has_session(&self, id: &SessionId) -> bool {
        self.sessions.has_session(id)
    }
}

fn handler_for(kind: HandlerKind) -> Arc<dyn Handler> {
    match kind {
        HandlerKind::Echo => Arc::new(|req: &[u8]| req.to_vec()),
        HandlerKind::Uppercase => Arc::new(|req: &[u8]| req.to_ascii_uppercase()),
        HandlerKind::Reverse => Arc::new(|req: &[u8]| req.iter().rev().copied().collect::<Vec<u8>>()),
    }
}

struct ServerState {
    router: Router<Service>,
    hs_cfg: Arc<HandshakeConfig>,
    client_verifier: Option<Arc<dyn QuoteVerifier>>,
    rng: Mutex<ChaCha20Rng>,
    clock: Arc<dyn Clock>,
    capture: Option<TranscriptWriter>,
}

struct Pending {
    machine: ServerHandshake,
    service: Arc<Service>,
}

impl ServerState {
    fn capture(&self, sender: Role, msg: &HttpMessage) {
        if let Some(w) = &self.capture {
            if let Err(e) = w.record(sender, msg) {
                log::warn!("transcript write failed: {e}");
            }
        }
    }

    fn handshake_step(&self, pending: &mut Option<Pending>, msg: &HttpMessage, kind: MessageKind) -> (HttpMessage, bool) {
        if kind == MessageKind::PreflightRequest {
            let target = msg.target().unwrap_or("/");
            let Some(service) = self.router.resolve(target, msg.headers()) else {
                return (plain_response(404, "no attested service at this path"), false);
            };
            let machine = ServerHandshake::new(
                Arc::clone(&self.hs_cfg),
                Arc::clone(&service.tee),
                self.client_verifier.clone(),
            )
            .expect("configuration validated at startup");
            *pending = Some(Pending { machine, service });
        }
        let Some(p) = pending.as_mut() else {
            return (plain_response(400, "handshake not started"), true);
        };
        self.capture(Role::Client, msg);
        let result = p.machine.on_message(msg, &mut *self.rng.lock().unwrap());
        match result {
            Ok(step) => {
                self.capture(Role::Server, &step.reply);
                let service = &p.service.name;
                if let Some(session) = step.session {
                    let id = session.channel.session_id();
                    event(json!({
                        "event": "established",
                        "service": service,
                        "session_id": id.to_string(),
                        "suite": session.channel.suite().token(),
                        "mode": self.hs_cfg.mode,
                        "client_identities": session.client_identities,
                    }));
                    p.service.sessions.insert(
                        session.channel,
                        session.client_identities,
                        session.created_at,
                        session.max_age,
                    );
                    *pending = None;
                } else {
                    event(json!({
                        "event": "handshake",
                        "service": service,
                        "received": format!("{kind:?}"),
                        "phase": format!("{:?}", p.machine.phase()),
                    }));
                }
                (step.reply, false)
            }
            Err(e) => {
                event(json!({
                    "event": "abort",
                    "service": p.service.name,
                    "received": format!("{kind:?}"),
                    "reason": e.to_string(),
                }));
                *pending = None;
                let status = match e.failure() {
                    Some(Failure::ClientQuoteRejected(_) | Failure::StaleDate) => 403,
                    _ => 400,
                };
                (plain_response(status, "handshake aborted"), true)
            }
        }
    }

    fn record_step(&self, msg: &HttpMessage) -> (HttpMessage, bool) {
        if msg.method() != Some("POST") {
            return (plain_response(405, "protected requests use POST"), false);
        }
        if msg.header(CONTENT_TYPE) != Some(RECORD_CONTENT_TYPE) {
            return (plain_response(400, "expected a record body"), false);
        }
        let target = msg.target().unwrap_or("/").to_owned();
        let (sid, service) = match self.router.route(&target, msg.headers()) {
            Ok(found) => found,
            Err(RouteError::NoRoute) => return (plain_response(404, "no route"), false),
            Err(RouteError::UnknownSession) => {
                return (plain_response(428, "full handshake required"), false)
            }
        };
        let Ok(channel) = service.sessions.lookup(&sid, self.clock.now()) else {
            return (plain_response(428, "full handshake required"), false);
        };
        match serve_record(&channel, &*service.handler, &msg.body, target.as_bytes()) {
            Ok(frame) => (
                HttpMessage::response(200)
                    .with_header(ATTEST_SESSION_ID, sid.to_header_value())
                    .with_header(CONTENT_TYPE, RECORD_CONTENT_TYPE)
                    .with_body(frame),
                false,
            ),
            Err(e) => {
                service.sessions.remove(&sid);
                event(json!({
                    "event": "record_rejected",
                    "service": service.name,
                    "session_id": sid.to_string(),
                    "reason": e.to_string(),
                }));
                (plain_response(400, "record rejected; session closed"), true)
            }
        }
    }

    fn serve(&self, mut conn: HttpConn) {
        let mut pending = None;
        loop {
            let msg = match conn.recv() {
                Ok(Some(m)) => m,
                Ok(None) => return,
                Err(e) => {
                    log::debug!("read failed: {e}");
                    let _ = conn.send(&plain_response(400, "malformed request"));
                    return;
                }
            };
            let (reply, close) = match classify(&msg) {
                Ok(kind) => self.handshake_step(&mut pending, &msg, kind),
                Err(WireError::NotHttpa) => self.record_step(&msg),
                Err(e) => {
                    event(json!({"event": "malformed", "reason": e.to_string()}));
                    (plain_response(400, "malformed attestation message"), true)
                }
            };
            if conn.send(&reply).is_err() || close {
                return;
            }
        }
    }
}

fn build_state(cfg: &ServerConfig) -> Result<ServerState, StartError> {
    cfg.validate()?;
    let (mut rng, clock) = rng_and_clock(cfg.seed, 1);
    let vendor = load_vendor(&cfg.vendor)?;
    let vendor_roots = load_roots(&cfg.vendor_roots)?;
    let mut services = Vec::new();
    for route in &cfg.routes {
        let name = route
            .code_identity
            .clone()
            .unwrap_or_else(|| route.handler.name().to_owned());
        let tee = SimulatedTee::create(name.as_bytes(), &vendor, &vendor_roots, &mut rng)
            .map_err(|e| StartError::Config(super::ConfigError::Invalid(e.to_string())))?;
        let service = Service {
            name,
            tee: Arc::new(tee),
            handler: handler_for(route.handler),
            sessions: SessionCache::new(cfg.session_capacity),
        };
        services.push((route.route.clone(), Arc::new(service)));
    }
    let client_verifier: Option<Arc<dyn QuoteVerifier>> = match &cfg.client_roots {
        Some(path) => Some(Arc::new(Verifier::in_process(
            load_roots(path)?,
            Arc::clone(&clock),
            &mut rng,
        ))),
        None => None,
    };
    let policy = match &cfg.client_policy {
        Some(p) => load_policy(p)?,
        None => Policy::open(),
    };
    let hs_cfg = HandshakeConfig::new(cfg.mode, Arc::clone(&clock))
        .with_suites(cfg.suites.clone())
        .with_policy(policy)
        .with_max_age(cfg.max_age);
    let capture = match &cfg.transcript {
        Some(p) => Some(TranscriptWriter::create(p).map_err(StartError::Bind)?),
        None => None,
    };
    Ok(ServerState {
        router: Router::new(services),
        hs_cfg: Arc::new(hs_cfg),
        client_verifier,
        rng: Mutex::new(rng),
        clock,
        capture,
    })
}

/// Binds and serves in the background.
pub fn start_server(cfg: &ServerConfig) -> Result<ServerHandle, StartError> {
    let state = Arc::new(build_state(cfg)?);
    let tls = cfg.tls.as_ref().map(tls_server_config).transpose()?;
    let listener = TcpListener::bind(&cfg.listen).map_err(StartError::Bind)?;
    let handle = spawn_accept_loop(listener, tls, move |conn| state.serve(conn)).map_err(StartError::Bind)?;
    event(json!({
        "event": "listening",
        "addr": handle.local_addr().to_string(),
        "mode": cfg.mode,
        "tls": cfg.tls.is_some(),
        "routes": cfg.routes.len(),
    }));
    Ok(handle)
}

/// Serves until interrupted (Ctrl-C or SIGTERM), then drops all sessions.
pub fn run_server(cfg: &ServerConfig) -> Result<(), StartError> {
    let handle = start_server(cfg)?;
    super::stop_on_signal(&handle)?;
    handle.wait();
    event(json!({"event": "shutdown"}));
    Ok(())
}
