//! Delegating quote verification to a remote attestation service. The
//! service signs each report; the client checks that signature against the
//! verifier certificate it was configured with.
//!
//! ```text
//! cargo run --example attestation_service
//! ```

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use httpa::clock::SystemClock;
use httpa::pki::DemoPki;
use httpa::quote::SimulatedTee;
use httpa::transport::{start_verifier, RemoteVerifier};
use httpa::verify::{QuoteVerifier, Verifier};

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let pki = DemoPki::generate(&mut rng);
    let service = Verifier::new(pki.anchors(), pki.verifier.clone(), Arc::new(SystemClock));
    let handle = start_verifier("127.0.0.1:0", service, None).unwrap();
    let url = format!("http://{}/verify", handle.local_addr());
    println!("attestation service at {url}");

    let tee = SimulatedTee::create(b"analytics", &pki.vendor, &pki.anchors(), &mut rng).unwrap();
    let remote = RemoteVerifier::new(&url, pki.verifier.cert.clone(), pki.anchors(), None).unwrap();
    let report = remote.verify(&tee.generate_quote().encode(), &tee.public_key()).unwrap();
    println!("verdict {:?}, judged by {:?}", report.verdict, report.bundle.verifier);

    let report = remote.verify(&tee.generate_quote().encode(), &[0; 32]).unwrap();
    println!("with the wrong key: {:?}", report.verdict);

    // A client expecting a different verifier refuses the signed report.
    let other = DemoPki::generate(&mut rng);
    let picky = RemoteVerifier::new(&url, other.verifier.cert.clone(), other.anchors(), None).unwrap();
    match picky.verify(&tee.generate_quote().encode(), &tee.public_key()) {
        Ok(r) => println!("unexpected report {:?}", r.verdict),
        Err(e) => println!("report from an unexpected verifier: {e}"),
    }
    handle.shutdown();
}
