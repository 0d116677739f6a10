//! Builds the preflight exchange and the first ATTEST request, and shows
//! how messages look on the wire.
//!
//! ```text
//! cargo run --example preflight
//! ```

use httpa::wire::{
    classify, decode_message, encode_message, AttestMessage, AttestRequest, CipherSuiteId, HttpMessage,
    Random32,
};

fn show(title: &str, msg: &HttpMessage) {
    println!("--- {title} ({:?})", classify(msg).unwrap());
    println!("{}", String::from_utf8_lossy(&msg.to_wire(Some("svc.example"))));
}

fn main() {
    let mut probe = encode_message(&AttestMessage::PreflightRequest).unwrap();
    probe.set_target("/echo");
    show("client probes for ATTEST support", &probe);

    let answer = encode_message(&AttestMessage::PreflightResponse).unwrap();
    show("server allows ATTEST", &answer);

    let request = AttestRequest {
        date: Some(httpa::clock::FIXED_EPOCH),
        session_id: None,
        random: Random32([7; 32]),
        cipher_suites: CipherSuiteId::REGISTERED.to_vec(),
        client_evidence: None,
    };
    let mut msg = encode_message(&AttestMessage::AttestRequest(request.clone())).unwrap();
    msg.set_target("/echo");
    show("attest request", &msg);

    // Parsing the wire bytes gives back the same structured message.
    let parsed = HttpMessage::parse(&msg.to_wire(None)).unwrap();
    assert_eq!(decode_message(&parsed).unwrap(), AttestMessage::AttestRequest(request));

    // A plain server that answers anything but `Allow: ATTEST` is simply
    // not attestable.
    let plain = HttpMessage::response(204);
    println!("204 classifies as {:?}", classify(&plain));
}
