//! Session resumption: the client keeps a ticket, the server keeps the
//! session in a bounded cache, and both expire after max-age.
//!
//! ```text
//! cargo run --example resumption
//! ```

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use httpa::clock::{Clock, ManualClock, FIXED_EPOCH};
use httpa::handshake::{
    client_begin, run_in_memory, ClientHandshake, ClientStart, HandshakeConfig, ServerHandshake, SessionCache,
};
use httpa::keyschedule::Mode;
use httpa::pki::DemoPki;
use httpa::quote::SimulatedTee;
use httpa::verify::Verifier;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let clock = Arc::new(ManualClock::new(FIXED_EPOCH));
    let pki = DemoPki::generate(&mut rng);
    let tee = Arc::new(SimulatedTee::create(b"inventory", &pki.vendor, &pki.anchors(), &mut rng).unwrap());
    let verifier = Verifier::in_process(pki.anchors(), clock.clone(), &mut rng);
    let cfg = HandshakeConfig::new(Mode::OneWay, clock.clone()).with_max_age(120);
    let cache = SessionCache::new(16);

    let mut client = ClientHandshake::new(cfg.clone(), "/inventory", None).unwrap();
    let mut server = ServerHandshake::new(Arc::new(cfg.clone()), tee, None).unwrap();
    let run = run_in_memory(&mut client, &mut server, &verifier, &mut rng);
    println!("full handshake: {} messages", run.trace.len());
    let (mut session, s) = run.result.unwrap();
    let server_channel = cache.insert(s.channel, None, s.created_at, s.max_age);

    let frame = session.channel.seal(b"count apples", b"/inventory").unwrap();
    server_channel.lock().unwrap().open(&frame, b"/inventory").unwrap();
    let mut ticket = session.ticket.take().unwrap();
    ticket.update_from(&session.channel);
    println!("ticket expires at {}", ticket.expires_at());

    clock.advance(60);
    match client_begin(cfg.clone(), "/inventory", None, Some(&ticket)).unwrap() {
        ClientStart::Resumed(mut channel) => {
            // Sequence numbers carry on from the ticket, so no nonce repeats.
            let frame = channel.seal(b"count pears", b"/inventory").unwrap();
            let live = cache.lookup(&channel.session_id(), clock.now()).unwrap();
            live.lock().unwrap().open(&frame, b"/inventory").unwrap();
            println!("resumed at +60s with 0 handshake messages, record seq {}", frame.seq);
        }
        ClientStart::Full(..) => unreachable!("ticket is still valid"),
    }

    clock.advance(60);
    match client_begin(cfg, "/inventory", None, Some(&ticket)).unwrap() {
        ClientStart::Resumed(_) => unreachable!("ticket has expired"),
        ClientStart::Full(_, preflight) => println!("at +120s a full handshake starts with {:?}", preflight.method()),
    }
    println!("server cache: {:?}", cache.lookup(&ticket.session_id, clock.now()).map(|_| ()));
}
