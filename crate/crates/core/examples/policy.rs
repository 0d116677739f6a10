//! Allow/deny decisions over the identities collected during a handshake.
//!
//! ```text
//! cargo run --example policy
//! ```

use httpa::verify::{evaluate_policy, IdentityBundle, Policy};

fn main() {
    let peer = IdentityBundle {
        domain: Some("pay.example".into()),
        tcb: [0x5a; 32],
        vendor: Some("CN=Demo TEE Vendor Signing CA,O=Demo Vendor".into()),
        verifier: Some("CN=Demo Attestation Service,O=Demo Verifier".into()),
    };

    let policies = [
        ("open", r#"{}"#.to_owned()),
        (
            "allow the demo vendor",
            r#"{"allowed": [{"kind": "vendor", "value": "CN=Demo TEE Vendor Signing CA,O=Demo Vendor"}]}"#.to_owned(),
        ),
        (
            "pin another TCB",
            format!(r#"{{"allowed": [{{"kind": "tcb", "value": "{}"}}]}}"#, hex::encode([1u8; 32])),
        ),
        (
            "deny wins over allow",
            format!(
                r#"{{"allowed": [{{"kind": "domain", "value": "pay.example"}}],
                    "denied": [{{"kind": "tcb", "value": "{}"}}]}}"#,
                hex::encode(peer.tcb)
            ),
        ),
    ];
    for (name, json) in policies {
        let policy = Policy::from_json(&json).unwrap();
        println!("{name:>22}: {:?}", evaluate_policy(&peer, &policy));
    }

    // Allowing and denying the same identity is a configuration error.
    let clash = r#"{"allowed": [{"kind": "domain", "value": "a"}], "denied": [{"kind": "domain", "value": "a"}]}"#;
    println!("{:>22}: {:?}", "conflicting rules", Policy::from_json(clash).unwrap_err());
}
