//! Server and client over real sockets in one process: the server hosts
//! two attested routes, the client attests, sends a protected request, and
//! resumes on the second call.
//!
//! ```text
//! cargo run --example loopback
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use httpa::pki::DemoPki;
use httpa::transport::{run_client, save_pki, start_server, ClientConfig, ClientRequest, ServerConfig};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let pki = DemoPki::generate(&mut ChaCha20Rng::seed_from_u64(6));
    save_pki(dir.path(), &pki).unwrap();

    let server_cfg: ServerConfig = serde_json::from_value(json!({
        "listen": "127.0.0.1:0",
        "vendor": dir.path().join("vendor.json"),
        "vendor_roots": dir.path().join("roots.json"),
        "routes": [
            {"route": {"path_prefix": "/echo"}, "handler": "echo"},
            {"route": {"header": {"name": "X-Service", "value": "reverse"}}, "handler": "reverse"}
        ]
    }))
    .unwrap();
    let server = start_server(&server_cfg).unwrap();
    let addr = server.local_addr();
    println!("server on {addr}");

    let mut cfg = ClientConfig::new(format!("http://{addr}/echo"), dir.path().join("roots.json"));
    cfg.session_cache = Some(dir.path().join("tickets.json"));
    for body in ["first call", "second call"] {
        let request = ClientRequest { path: None, body: body.into() };
        let outcome = run_client(&cfg, &request).unwrap();
        println!(
            "{:?} -> {} {:?} (resumed: {}, handshake messages: {})",
            body,
            outcome.status,
            String::from_utf8_lossy(&outcome.body),
            outcome.resumed,
            outcome.handshake_messages
        );
    }
    println!("{}", serde_json::to_string_pretty(&run_client(&cfg, &ClientRequest::default()).unwrap().identities).unwrap());
    server.shutdown();
}
