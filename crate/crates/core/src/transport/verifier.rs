use std::net::TcpListener;
use std::sync::Arc;

use serde_json::json;

use super::config::{load_roots, load_verifier, VerifierConfig};
use super::{
    event, plain_response, spawn_accept_loop, tls_server_config, HttpConn, ServerHandle, StartError,
    VERIFY_PATH,
};
use crate::clock::SystemClock;
use crate::verify::Verifier;
use crate::wire::headers::CONTENT_TYPE;
use crate::wire::HttpMessage;

fn respond(verifier: &Verifier, msg: &HttpMessage) -> HttpMessage {
    let path = msg.target().unwrap_or("").split('?').next().unwrap_or("");
    if path != VERIFY_PATH {
        return plain_response(404, "not found");
    }
    if msg.method() != Some("POST") {
        return plain_response(405, "use POST");
    }
    match verifier.handle_service_request(&msg.body) {
        Ok(report) => {
            event(json!({"event": "verified", "bytes": msg.body.len()}));
            HttpMessage::response(200)
                .with_header(CONTENT_TYPE, "application/octet-stream")
                .with_body(report)
        }
        Err(e) => {
            event(json!({"event": "verify_rejected", "reason": e.to_string()}));
            plain_response(400, "malformed verification request")
        }
    }
}

fn serve(verifier: &Verifier, mut conn: HttpConn) {
    loop {
        let msg = match conn.recv() {
            Ok(Some(m)) => m,
            Ok(None) => return,
            Err(_) => {
                let _ = conn.send(&plain_response(400, "malformed request"));
                return;
            }
        };
        if conn.send(&respond(verifier, &msg)).is_err() {
            return;
        }
    }
}

/// Serves `POST /verify` in the background with an explicit verifier.
pub fn start_verifier(
    listen: &str,
    verifier: Verifier,
    tls: Option<Arc<rustls::ServerConfig>>,
) -> Result<ServerHandle, StartError> {
    let verifier = Arc::new(verifier);
    let listener = TcpListener::bind(listen).map_err(StartError::Bind)?;
    let handle = spawn_accept_loop(listener, tls, move |conn| serve(&verifier, conn))
        .map_err(StartError::Bind)?;
    event(json!({"event": "listening", "addr": handle.local_addr().to_string(), "service": "verifier"}));
    Ok(handle)
}

/// Runs the attestation service until interrupted.
pub fn run_verifier(cfg: &VerifierConfig) -> Result<(), StartError> {
    let verifier = Verifier::new(
        load_roots(&cfg.roots)?,
        load_verifier(&cfg.credentials)?,
        Arc::new(SystemClock),
    );
    let tls = cfg.tls.as_ref().map(tls_server_config).transpose()?;
    let handle = start_verifier(&cfg.listen, verifier, tls)?;
    super::stop_on_signal(&handle)?;
    handle.wait();
    Ok(())
}
