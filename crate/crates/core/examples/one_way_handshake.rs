//! Drives the one-way handshake by hand, one message at a time, with no
//! sockets involved. Only the client verifies the server's TEE.
//!
//! ```text
//! cargo run --example one_way_handshake
//! ```

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use httpa::clock::{Clock, SystemClock};
use httpa::handshake::{ClientHandshake, HandshakeConfig, ServerHandshake};
use httpa::keyschedule::Mode;
use httpa::pki::DemoPki;
use httpa::quote::SimulatedTee;
use httpa::verify::Verifier;
use httpa::wire::{classify, HttpMessage};

fn log(dir: &str, msg: &HttpMessage) {
    println!("{dir} {:?} ({} transcript bytes)", classify(msg).unwrap(), msg.transcript_bytes().len());
}

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let pki = DemoPki::generate(&mut rng);
    let tee = Arc::new(SimulatedTee::create(b"echo service", &pki.vendor, &pki.anchors(), &mut rng).unwrap());
    let verifier = Verifier::in_process(pki.anchors(), clock.clone(), &mut rng);

    let mut client = ClientHandshake::new(HandshakeConfig::new(Mode::OneWay, clock.clone()), "/echo", None).unwrap();
    let mut server =
        ServerHandshake::new(Arc::new(HandshakeConfig::new(Mode::OneWay, clock)), tee, None).unwrap();

    let m1 = client.begin().unwrap();
    log("C->S", &m1);
    let m2 = server.on_message(&m1, &mut rng).unwrap().reply;
    log("S->C", &m2);
    let m3 = client.on_preflight_response(&m2, &mut rng).unwrap();
    log("C->S", &m3);
    let m4 = server.on_message(&m3, &mut rng).unwrap().reply;
    log("S->C", &m4);
    let m5 = client.on_attest_response(&m4, &verifier, &mut rng).unwrap();
    log("C->S", &m5);
    let step = server.on_message(&m5, &mut rng).unwrap();
    log("S->C", &step.reply);
    let mut session = client.on_session_response(&step.reply).unwrap();
    let mut server_session = step.session.unwrap();

    println!("server TCB {}", hex::encode(session.identities.tcb));
    println!("suite {}", session.channel.suite().token());
    assert_eq!(client.transcript_hash(), server.transcript_hash());

    let frame = session.channel.seal(b"hello enclave", b"/echo").unwrap();
    let plain = server_session.channel.open(&frame, b"/echo").unwrap();
    println!("server read {:?}", String::from_utf8_lossy(&plain));
}
