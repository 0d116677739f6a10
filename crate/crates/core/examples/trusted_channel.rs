//! The record layer and request routing after a handshake: sealing,
//! replay rejection, and dispatch by header or path prefix.
//!
//! ```text
//! cargo run --example trusted_channel
//! ```

use std::sync::{Arc, Mutex};

use httpa::keyschedule::{KeyBlock, KeyBlockLayout, Role};
use httpa::record::{echo_handler, serve_record, Handler, RecordFrame, RouteKey, Router, TrustedChannel};
use httpa::wire::{CipherSuiteId, SessionId};

fn main() {
    let suite = CipherSuiteId::Chacha20Poly1305Sha256;
    let raw: Vec<u8> = (0..KeyBlockLayout::for_suite(&suite).unwrap().total() as u8).collect();
    let kb = KeyBlock::partition(&raw, &suite).unwrap();
    let sid = SessionId([1; 16]);
    let mut client = TrustedChannel::new(sid, suite.clone(), &kb, Role::Client).unwrap();
    let server = Mutex::new(TrustedChannel::new(sid, suite, &kb, Role::Server).unwrap());

    let shout: Arc<dyn Handler> = Arc::new(|req: &[u8]| req.to_ascii_uppercase());
    let router: Router<dyn Handler> = Router::new(vec![
        (RouteKey::PathPrefix("/api".into()), echo_handler()),
        (RouteKey::PathPrefix("/api/shout".into()), shout.clone()),
        (RouteKey::Header { name: "X-Service".into(), value: "shout".into() }, shout),
    ]);

    for (path, headers) in [("/api/echo", vec![]), ("/api/shout/now", vec![]), ("/api/echo", vec![("x-service", "shout")])] {
        let handler = router.resolve(path, headers.iter().copied()).unwrap();
        let frame = client.seal(b"quiet please", path.as_bytes()).unwrap();
        let reply = serve_record(&server, &*handler, &frame.encode(), path.as_bytes()).unwrap();
        let reply = client.open(&RecordFrame::decode(&reply).unwrap(), path.as_bytes()).unwrap();
        println!("{path:<16} {headers:?} -> {:?}", String::from_utf8_lossy(&reply));
    }

    // Frames are bound to their path and sequence number.
    let frame = client.seal(b"pay 10", b"/api/echo").unwrap();
    let wire = frame.encode();
    serve_record(&server, &*echo_handler(), &wire, b"/api/echo").unwrap();
    let replay = serve_record(&server, &*echo_handler(), &wire, b"/api/echo");
    println!("replayed frame: {:?}", replay.unwrap_err());
    println!("server channel closed: {}", server.lock().unwrap().is_closed());
}
