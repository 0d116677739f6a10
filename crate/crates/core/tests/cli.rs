mod common;

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};

use httpa::pki::{DEMO_VENDOR_SIGNING, DEMO_VERIFIER};
use httpa::transport::exit_code;

use common::*;

#[test]
fn routes_dispatch_to_their_handlers() {
    let dir = tempfile::tempdir().unwrap();
    let server = spawn_server(dir.path(), &server_config("one-way"), &[]);
    let echo = outcome(&client(&server.addr, "/echo", &["--data", "Hello"]));
    assert_eq!(echo["status"], 200);
    assert_eq!(echo["body"], "Hello");
    assert_eq!(echo["identities"]["domain"], "unverified");
    assert_eq!(echo["identities"]["vendor"], DEMO_VENDOR_SIGNING);
    assert_eq!(echo["verdict"], "Pass");
    let upper = outcome(&client(&server.addr, "/upper/x", &["--data", "Hello"]));
    assert_eq!(upper["body"], "HELLO");
    assert_ne!(upper["identities"]["tcb"], echo["identities"]["tcb"]);
}

#[test]
fn plain_http_server_is_not_attestable() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let mut s = stream.unwrap();
            let mut buf = [0u8; 4096];
            let _ = s.read(&mut buf);
            let _ = s.write_all(b"HTTP/1.1 204 No Content\r\nContent-Length: 0\r\n\r\n");
        }
    });
    let out = client(&addr, "/", &[]);
    assert_eq!(out.status.code(), Some(exit_code::NOT_ATTESTABLE));
}

#[test]
fn denied_vendor_exits_with_policy_code() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("policy.json");
    let rules = serde_json::json!({"denied": [{"kind": "vendor", "value": DEMO_VENDOR_SIGNING}]});
    std::fs::write(&policy, rules.to_string()).unwrap();
    let server = spawn_server(dir.path(), &server_config("one-way"), &[]);
    let out = client(&server.addr, "/echo", &["--policy", policy.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(exit_code::POLICY_REJECTED));
}

#[test]
fn mutual_server_needs_client_roots() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = server_config("mutual");
    cfg.as_object_mut().unwrap().remove("client_roots");
    let path = dir.path().join("server.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let out = httpa().args(["server", "--config"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(exit_code::CONFIG));
}

#[test]
fn mode_mismatch_is_a_protocol_error() {
    let dir = tempfile::tempdir().unwrap();
    let server = spawn_server(dir.path(), &server_config("mutual"), &[]);
    let out = client(&server.addr, "/echo", &[]);
    assert_eq!(out.status.code(), Some(exit_code::PROTOCOL));
    let vendor = fixture("vendor.json");
    let mutual = outcome(&client(&server.addr, "/echo", &["--mode", "mutual", "--vendor", &vendor, "--data", "m"]));
    assert_eq!(mutual["body"], "m");
}

#[test]
fn unreachable_target_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = client(&format!("127.0.0.1:{port}"), "/echo", &[]);
    assert_eq!(out.status.code(), Some(exit_code::TRANSPORT));
}

#[test]
fn bad_arguments_are_usage_errors() {
    let out = httpa().args(["client", "--target", "http://127.0.0.1:1/"]).output().unwrap();
    assert_eq!(out.status.code(), Some(exit_code::USAGE));
    let out = httpa().args(["server", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(exit_code::USAGE));
}

#[test]
fn remote_attestation_service() {
    let mut cmd = httpa();
    cmd.args(["verifier", "--listen", "127.0.0.1:0", "--roots"])
        .arg(fixture("roots.json"))
        .arg("--credentials")
        .arg(fixture("verifier.json"));
    let verifier = spawn(cmd);

    let dir = tempfile::tempdir().unwrap();
    let server = spawn_server(dir.path(), &server_config("one-way"), &[]);
    let url = format!("http://{}/verify", verifier.addr);
    let cert = fixture("verifier_cert.json");
    let o = outcome(&client(&server.addr, "/echo", &["--verifier-url", &url, "--verifier-cert", &cert, "--data", "v"]));
    assert_eq!(o["identities"]["verifier"], DEMO_VERIFIER);

    let mut s = TcpStream::connect(&verifier.addr).unwrap();
    let body = b"not a quote";
    write!(s, "POST /verify HTTP/1.1\r\nHost: x\r\nContent-Length: {}\r\n\r\n", body.len()).unwrap();
    s.write_all(body).unwrap();
    let mut reply = [0u8; 12];
    s.read_exact(&mut reply).unwrap();
    assert_eq!(&reply, b"HTTP/1.1 400");

    // Reports signed by anyone else are refused.
    let other = tempfile::tempdir().unwrap();
    let gen = httpa().args(["gen-creds", "--out"]).arg(other.path()).output().unwrap();
    assert!(gen.status.success());
    let wrong = other.path().join("verifier_cert.json");
    let out = client(&server.addr, "/echo", &["--verifier-url", &url, "--verifier-cert", wrong.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(exit_code::QUOTE_REJECTED));
}

#[test]
fn tls_binds_the_domain_identity() {
    let dir = tempfile::tempdir().unwrap();
    let gen = httpa()
        .args(["gen-creds", "--out"])
        .arg(dir.path())
        .args(["--tls-names", "localhost"])
        .output()
        .unwrap();
    assert!(gen.status.success());
    let cert = dir.path().join("tls_cert.pem");
    let key = dir.path().join("tls_key.pem");
    let tls = [
        "--tls-cert",
        cert.to_str().unwrap(),
        "--tls-key",
        key.to_str().unwrap(),
    ];
    let server = spawn_server(dir.path(), &server_config("one-way"), &tls);
    let port = server.addr.rsplit(':').next().unwrap();
    let out = httpa()
        .args(["client", "--target", &format!("https://localhost:{port}/echo"), "--roots"])
        .arg(fixture("roots.json"))
        .arg("--tls-ca")
        .arg(&cert)
        .args(["--data", "tls"])
        .output()
        .unwrap();
    let o = outcome(&out);
    assert_eq!(o["identities"]["domain"], "localhost");
    assert_eq!(o["body"], "tls");

    // Deterministic mode is refused with TLS outside test mode.
    let cfg = dir.path().join("seeded.json");
    std::fs::write(&cfg, server_config("one-way").to_string()).unwrap();
    let out = httpa()
        .args(["server", "--config"])
        .arg(&cfg)
        .args(tls)
        .args(["--seed", "1"])
        .env_remove("HTTPA_TEST_MODE")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(exit_code::CONFIG));
}
