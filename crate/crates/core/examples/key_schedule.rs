//! The key schedule on its own: wrapping a pre-session secret to a TEE,
//! expanding it into a key block and computing the confirmation tag.
//!
//! ```text
//! cargo run --example key_schedule
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use httpa::keyschedule::{
    confirmation_mac, derive_key_block, prf, unwrap_secret, verify_confirmation, wrap_secret, KeyBlockLayout,
    Mode, PreSessionSecret, Role,
};
use httpa::pki::DemoPki;
use httpa::quote::SimulatedTee;
use httpa::wire::{CipherSuiteId, Random32};

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    println!("P_SHA256 sample: {}", hex::encode(prf(b"secret", "test label", b"seed", 16).unwrap()));

    for suite in CipherSuiteId::REGISTERED {
        let layout = KeyBlockLayout::for_suite(&suite).unwrap();
        println!("{:<30} {:>3} bytes {:?}", suite.token(), layout.total(), layout.offsets());
    }

    let pki = DemoPki::generate(&mut rng);
    let server = SimulatedTee::create(b"server", &pki.vendor, &pki.anchors(), &mut rng).unwrap();
    let transcript_hash = [0x42; 32];

    // Client side: wrap a fresh secret to the key found in the quote.
    let secret = PreSessionSecret::generate(&mut rng);
    let wrapped = wrap_secret(&server.public_key(), &secret, &transcript_hash, &mut rng).unwrap();
    println!("wrapped secret: {} bytes", wrapped.to_bytes().len());

    // Server side: only the TEE holding the private key recovers it, and
    // only under the same transcript.
    let recovered = unwrap_secret(&server, &wrapped, &transcript_hash).unwrap();
    assert_eq!(recovered.as_bytes(), secret.as_bytes());
    assert!(unwrap_secret(&server, &wrapped, &[0; 32]).is_err());

    let client_random = Random32::generate(&mut rng);
    let server_random = Random32::generate(&mut rng);
    let suite = CipherSuiteId::Aes128GcmSha256;
    let kb = derive_key_block(Mode::OneWay, &[secret], &client_random, &server_random, &suite).unwrap();
    let peer = derive_key_block(Mode::OneWay, &[recovered], &client_random, &server_random, &suite).unwrap();
    assert_eq!(*kb.to_bytes(), *peer.to_bytes());
    println!("client write key {}", hex::encode(kb.client_write_key()));
    println!("server write iv  {}", hex::encode(kb.server_write_iv()));

    let tag = confirmation_mac(&peer, &transcript_hash, Role::Server);
    println!("confirmation verifies: {}", verify_confirmation(&kb, &transcript_hash, Role::Server, &tag));
}
