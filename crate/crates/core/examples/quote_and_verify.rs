//! Creates a demo vendor hierarchy, runs a simulated TEE and checks its
//! quote with an in-process verifier.
//!
//! ```text
//! cargo run --example quote_and_verify
//! ```

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use httpa::clock::SystemClock;
use httpa::pki::DemoPki;
use httpa::quote::{Quote, SimulatedTee};
use httpa::verify::Verifier;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let pki = DemoPki::generate(&mut rng);
    let anchors = pki.anchors();

    let tee = SimulatedTee::create(b"payments service v1", &pki.vendor, &anchors, &mut rng).unwrap();
    let quote = tee.generate_quote();
    println!("measurement {}", hex::encode(quote.measurement));
    println!("quote is {} bytes with {} certificates", quote.encode().len(), quote.cert_chain.len());

    let verifier = Verifier::new(anchors, pki.verifier.clone(), Arc::new(SystemClock));
    let report = verifier.verify_quote(&quote, &tee.public_key());
    println!("genuine quote: {:?}", report.verdict);
    println!("  vendor   {:?}", report.bundle.vendor);
    println!("  verifier {:?}", report.bundle.verifier);
    assert!(report.verify_signature(&pki.verifier.cert));

    // The quote binds the TEE's key: presenting it with another key fails.
    let report = verifier.verify_quote(&quote, &[9; 32]);
    println!("quote with a substituted key: {:?}", report.verdict);

    let mut bytes = quote.encode();
    bytes[10] ^= 1;
    let forged = Quote::decode(&bytes).unwrap();
    println!("quote with a flipped measurement bit: {:?}", verifier.verify_quote(&forged, &tee.public_key()).verdict);

    // A TEE certified by a vendor outside the trust anchors is rejected.
    let rogue = DemoPki::generate_named(&mut rng, "CN=Rogue Root", "CN=Rogue Signing CA");
    let outsider = SimulatedTee::create(b"payments service v1", &rogue.vendor, &rogue.anchors(), &mut rng).unwrap();
    let report = verifier.verify_quote(&outsider.generate_quote(), &outsider.public_key());
    println!("quote from an untrusted vendor: {:?}", report.verdict);
}
