//! Mutual attestation: both sides prove their TEE. Also shows the server
//! aborting before its own quote leaves when the client's evidence fails.
//!
//! ```text
//! cargo run --example mutual_handshake
//! ```

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use httpa::clock::{Clock, SystemClock};
use httpa::handshake::{run_in_memory, ClientHandshake, HandshakeConfig, ServerHandshake};
use httpa::keyschedule::Mode;
use httpa::pki::DemoPki;
use httpa::quote::SimulatedTee;
use httpa::verify::{QuoteVerifier, Verifier};
use httpa::wire::classify;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let pki = DemoPki::generate(&mut rng);
    let anchors = pki.anchors();
    let server_tee = Arc::new(SimulatedTee::create(b"ledger", &pki.vendor, &anchors, &mut rng).unwrap());
    let client_tee = Arc::new(SimulatedTee::create(b"wallet", &pki.vendor, &anchors, &mut rng).unwrap());
    let verifier: Arc<dyn QuoteVerifier> = Arc::new(Verifier::in_process(anchors, clock.clone(), &mut rng));
    let cfg = HandshakeConfig::new(Mode::Mutual, clock.clone());

    let mut client = ClientHandshake::new(cfg.clone(), "/ledger", Some(client_tee.clone())).unwrap();
    let mut server = ServerHandshake::new(Arc::new(cfg.clone()), server_tee.clone(), Some(verifier.clone())).unwrap();
    let run = run_in_memory(&mut client, &mut server, &*verifier, &mut rng);
    for entry in &run.trace {
        println!("{:?} sent {:?}", entry.sender, classify(&entry.message).unwrap());
    }
    let (session, server_session) = run.result.unwrap();
    println!("client saw server TCB {}", hex::encode(session.identities.tcb));
    println!(
        "server saw client TCB {}",
        hex::encode(server_session.client_identities.unwrap().tcb)
    );

    // A client whose TEE comes from an unknown vendor.
    let rogue = DemoPki::generate_named(&mut rng, "CN=Rogue Root", "CN=Rogue CA");
    let rogue_tee = Arc::new(SimulatedTee::create(b"wallet", &rogue.vendor, &rogue.anchors(), &mut rng).unwrap());
    let mut client = ClientHandshake::new(cfg.clone(), "/ledger", Some(rogue_tee)).unwrap();
    let mut server = ServerHandshake::new(Arc::new(cfg), server_tee, Some(verifier.clone())).unwrap();
    let run = run_in_memory(&mut client, &mut server, &*verifier, &mut rng);
    println!("rogue client: {}", run.result.unwrap_err());
    println!("messages exchanged before the abort: {}", run.trace.len());
}
