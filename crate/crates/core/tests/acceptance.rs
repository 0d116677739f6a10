//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line, then exits non-zero if
//! any failed.
//!
//! `UPDATE_GOLDEN=1` rewrites the golden transcripts instead of comparing.

mod common;

use std::io::BufReader;
use std::net::TcpStream;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use httpa::handshake::run_in_memory;
use httpa::keyschedule::{derive_key_block, prf, KeyBlock, KeyBlockLayout, Mode, PreSessionSecret, Role};
use httpa::quote::SimulatedTee;
use httpa::record::{RecordError, RecordFrame, TrustedChannel};
use httpa::transport::{load_roots, load_vendor, start_server, ServerConfig};
use httpa::verify::{
    evaluate_policy, FailReason, IdentityBundle, IdentityKind, Policy, PolicyDecision, Rejection,
    Selector, Verdict,
};
use httpa::wire::{decode_message, encode_message, AttestMessage, CipherSuiteId, HttpMessage, MessageKind, Random32, SessionId};

use common::*;

const FUZZ_SEED: u64 = 0x4854_5450;

type Criterion = (&'static str, fn() -> String);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 handshake agreement", handshake_agreement),
        ("2 one-way flow conformance", one_way_flow),
        ("3 mutual abort conformance", mutual_abort),
        ("4 PRF oracle equivalence", prf_vectors),
        ("5 key-block layout", key_block_layout),
        ("6 binding checks", binding_checks),
        ("7 record integrity", record_integrity),
        ("8 resumption", resumption),
        ("9 policy semantics", policy_semantics),
        ("10 golden transcripts", golden_transcripts),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check));
        let secs = started.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {name}: {detail} ({secs:.2}s)"),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL criterion {name}: {msg} ({secs:.2}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

fn random_suites(rng: &mut ChaCha20Rng) -> Vec<CipherSuiteId> {
    let mut all = CipherSuiteId::REGISTERED.to_vec();
    all.shuffle(rng);
    all.truncate(rng.gen_range(1..=all.len()));
    all
}

fn handshake_agreement() -> String {
    let mut rng = ChaCha20Rng::seed_from_u64(FUZZ_SEED);
    let lab = Lab::new(&mut rng);
    let started = Instant::now();
    let (mut one_way, mut mutual) = (0, 0);
    for i in 0..1000 {
        let mode = if rng.gen_bool(0.5) { Mode::Mutual } else { Mode::OneWay };
        let client_suites = random_suites(&mut rng);
        let mut server_suites = random_suites(&mut rng);
        if !server_suites.iter().any(|s| client_suites.contains(s)) {
            server_suites.push(client_suites[rng.gen_range(0..client_suites.len())].clone());
        }
        let mut client = lab.client(lab.config(mode).with_suites(client_suites.clone()));
        let mut server = lab.server(lab.config(mode).with_suites(server_suites));
        let run = run_in_memory(&mut client, &mut server, &*lab.verifier, &mut rng);
        let (mut c, mut s) = run
            .result
            .unwrap_or_else(|e| panic!("handshake {i} ({mode:?}) failed: {e:?}"));
        assert_eq!(
            *c.key_block.to_bytes(),
            *s.key_block.to_bytes(),
            "handshake {i}: key blocks differ"
        );
        assert!(client_suites.contains(c.channel.suite()));
        let frame = c.channel.seal(b"ping", b"/app").unwrap();
        assert_eq!(s.channel.open(&frame, b"/app").unwrap(), b"ping");
        match mode {
            Mode::OneWay => one_way += 1,
            Mode::Mutual => mutual += 1,
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    format!("1000/1000 established with identical key blocks ({one_way} one-way, {mutual} mutual) in {:.2}s", elapsed.as_secs_f64())
}

fn one_way_flow() -> String {
    let dir = tempfile::tempdir().unwrap();
    let server_cap = dir.path().join("server.cap");
    let client_cap = dir.path().join("client.cap");
    let server = spawn_server(
        dir.path(),
        &server_config("one-way"),
        &["--transcript", server_cap.to_str().unwrap()],
    );
    let out = client(&server.addr, "/echo", &["--data", "hi", "--transcript", client_cap.to_str().unwrap()]);
    let outcome = outcome(&out);
    assert_eq!(outcome["body"], "hi");
    drop(server);
    for cap in [&client_cap, &server_cap] {
        let seen = captured_kinds(cap);
        let kinds: Vec<MessageKind> = seen.iter().map(|(_, k)| *k).collect();
        assert_eq!(kinds, ONE_WAY_FLOW, "sequence in {}", cap.display());
        for (i, (role, _)) in seen.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::Client } else { Role::Server };
            assert_eq!(*role, expected, "sender of message {i}");
        }
    }
    "client and server captures both show Preflight, AttestReq, AttestResp, SessionReq, SessionResp".into()
}

fn exchange(reader: &mut BufReader<TcpStream>, msg: &HttpMessage, host: &str) -> Option<HttpMessage> {
    use std::io::Write;
    reader.get_mut().write_all(&msg.to_wire(Some(host))).unwrap();
    HttpMessage::read_from(reader).ok().flatten()
}

fn mutual_abort() -> String {
    let dir = tempfile::tempdir().unwrap();
    let cap = dir.path().join("server.cap");
    let mut cfg = server_config("mutual");
    cfg["transcript"] = cap.display().to_string().into();
    let cfg: ServerConfig = serde_json::from_value(cfg).unwrap();
    let handle = start_server(&cfg).expect("server starts");
    let addr = handle.local_addr().to_string();

    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let roots = load_roots(&fixtures().join("roots.json")).unwrap();
    let vendor = load_vendor(&fixtures().join("vendor.json")).unwrap();
    let tee = Arc::new(SimulatedTee::create(b"client app", &vendor, &roots, &mut rng).unwrap());
    let lab = Lab::new(&mut rng);

    type Tamper = fn(&mut Vec<u8>, &mut Vec<u8>, &mut ChaCha20Rng);
    let tampers: [(&str, Tamper); 4] = [
        ("measurement byte", |q, _, _| q[2] ^= 0x01),
        ("signature byte", |q, _, _| q[120] ^= 0x80),
        ("last chain byte", |q, _, _| *q.last_mut().unwrap() ^= 0x01),
        ("substituted pubkey", |_, pk, rng| rng.fill_bytes(pk)),
    ];
    let mut before = 0;
    for (what, tamper) in tampers {
        let mut hs = httpa::handshake::ClientHandshake::new(lab.config(Mode::Mutual), "/echo", Some(tee.clone())).unwrap();
        let stream = TcpStream::connect(&addr).unwrap();
        stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        let mut reader = BufReader::new(stream);
        let preflight = hs.begin().unwrap();
        let resp = exchange(&mut reader, &preflight, &addr).expect("preflight answered");
        let req = hs.on_preflight_response(&resp, &mut rng).unwrap();
        let Ok(AttestMessage::AttestRequest(mut ar)) = decode_message(&req) else {
            panic!("client emitted something other than an AttestRequest");
        };
        let ev = ar.client_evidence.as_mut().expect("mutual request carries evidence");
        tamper(&mut ev.quote, &mut ev.pubkey, &mut rng);
        let mut req = encode_message(&AttestMessage::AttestRequest(ar)).unwrap();
        req.set_target("/echo");
        let reply = exchange(&mut reader, &req, &addr).expect("server answers the abort");
        assert_eq!(reply.status(), Some(403), "{what}: abort status");
        assert!(
            httpa::wire::classify(&reply).ok() != Some(MessageKind::AttestResponse),
            "{what}: AttestResponse emitted"
        );
        let after = HttpMessage::read_from(&mut reader);
        assert!(matches!(after, Ok(None) | Err(_)), "{what}: connection still open");

        let kinds: Vec<MessageKind> = captured_kinds(&cap).into_iter().map(|(_, k)| k).collect();
        assert_eq!(
            &kinds[before..],
            &[MessageKind::PreflightRequest, MessageKind::PreflightResponse, MessageKind::AttestRequest],
            "{what}: server trace"
        );
        before = kinds.len();
    }
    handle.shutdown();
    format!("{} tamperings: reply {}, no AttestResponse in the server trace, connection closed", tampers.len(), 403)
}

fn vector_field(s: &str) -> &str {
    if s == "-" {
        ""
    } else {
        s
    }
}

fn prf_vectors() -> String {
    let text = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/vectors/prf_sha256.txt")).unwrap();
    let mut count = 0;
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(f.len(), 5, "bad vector line {line:?}");
        let secret = hex::decode(vector_field(f[0])).unwrap();
        let label = vector_field(f[1]).replace('_', " ");
        let seed = hex::decode(vector_field(f[2])).unwrap();
        let len: usize = f[3].parse().unwrap();
        let expected = hex::decode(f[4]).unwrap();
        assert_eq!(prf(&secret, &label, &seed, len).unwrap(), expected, "vector {count}");
        count += 1;
    }
    assert!(count >= 5, "only {count} vectors");
    format!("{count}/{count} frozen vectors match")
}

fn key_block_layout() -> String {
    let expect = [
        (CipherSuiteId::Aes128GcmSha256, [0..32, 32..64, 64..80, 80..96, 96..108, 108..120], 120),
        (CipherSuiteId::Aes256GcmSha384, [0..32, 32..64, 64..96, 96..128, 128..140, 140..152], 152),
        (CipherSuiteId::Chacha20Poly1305Sha256, [0..32, 32..64, 64..96, 96..128, 128..140, 140..152], 152),
    ];
    for (suite, ranges, total) in expect {
        let layout = KeyBlockLayout::for_suite(&suite).unwrap();
        assert_eq!(layout.total(), total, "{suite:?} total");
        assert_eq!(layout.offsets(), ranges, "{suite:?} offsets");
        let raw: Vec<u8> = (0..total as u8).collect();
        let kb = KeyBlock::partition(&raw, &suite).unwrap();
        let fields = [
            kb.client_write_mac_secret(),
            kb.server_write_mac_secret(),
            kb.client_write_key(),
            kb.server_write_key(),
            kb.client_write_iv(),
            kb.server_write_iv(),
        ];
        for (field, range) in fields.iter().zip(ranges) {
            assert_eq!(*field, &raw[range]);
        }
        assert_eq!(*kb.to_bytes(), raw);
    }

    // Derivation against the frozen oracle output: one-way AES-128 with all
    // zero inputs, and mutual ChaCha20 with server secret 0x11.., client
    // secret 0x22.., client random 0x33.., server random 0x44...
    let one_way = derive_key_block(
        Mode::OneWay,
        &[PreSessionSecret::from_bytes([0; 32])],
        &Random32([0; 32]),
        &Random32([0; 32]),
        &CipherSuiteId::Aes128GcmSha256,
    )
    .unwrap();
    assert_eq!(hex::encode(&*one_way.to_bytes()), "0f026c50a4e0fb0b8d8f19cb69535f7988fe27106a14143d4bb58749ac086fd0337710b3cd057fbe11e5449a57856e5f324ec6168f59e730b6822741422600414e64a5ad8d83258e9ad7762a734145097fe1c8ff51b2f4c166132e7a42a5e6a444c3db69b13e4d72ffae224baa15fb36a9abeb1309a4b4b3");
    let mutual = derive_key_block(
        Mode::Mutual,
        &[PreSessionSecret::from_bytes([0x11; 32]), PreSessionSecret::from_bytes([0x22; 32])],
        &Random32([0x33; 32]),
        &Random32([0x44; 32]),
        &CipherSuiteId::Chacha20Poly1305Sha256,
    )
    .unwrap();
    assert_eq!(hex::encode(&*mutual.to_bytes()), "4fb2db9ff4d823c64de24320d45611d5d93b4feaf6d5f308aa3441bc787eb48dfb701eba2afaf4ae7208655dcaa4b80c922db878a44c2c32b2417422847f3c2b6b1e1d38da73ecac3d7ace86bbefec8e38425fa5b131b6c6d6d9ce8ce33c8700a8b7c68e2ebe02e1b87e8dec382a7d9b2bbe8bc8f7f2f93f2102052c5747dc6be41644392d658685d6241e50c1a82fb172625766debc1bba");
    "AES-128 120 bytes, AES-256 and ChaCha20 152 bytes; offsets and derived blocks exact".into()
}

fn binding_checks() -> String {
    let mut rng = ChaCha20Rng::seed_from_u64(FUZZ_SEED + 6);
    let lab = Lab::new(&mut rng);
    let quote = lab.server_tee.generate_quote().encode();
    let pubkey = lab.server_tee.public_key();
    assert_eq!(lab.verifier.verify_quote_bytes(&quote, &pubkey).verdict, Verdict::Pass);

    let other = SimulatedTee::create(b"server app", &lab.pki.vendor, &lab.pki.anchors(), &mut rng).unwrap();
    let mut mismatches = 0;
    for trial in 0..100 {
        // Alternate between random keys and a genuine key of another TEE
        // running the same code.
        let (q, pk) = if trial % 2 == 0 {
            let mut pk = [0u8; 32];
            rng.fill_bytes(&mut pk);
            (quote.clone(), pk)
        } else {
            (other.generate_quote().encode(), pubkey)
        };
        let genuine = if trial % 2 == 0 { pubkey } else { other.public_key() };
        assert_ne!(pk, genuine);
        let verdict = lab.verifier.verify_quote_bytes(&q, &pk).verdict;
        assert_eq!(verdict, Verdict::Fail(FailReason::FingerprintMismatch), "trial {trial}");
        mismatches += 1;
    }

    let mut rejected = 0;
    for i in 0..quote.len() {
        let mut q = quote.clone();
        q[i] ^= rng.gen_range(1..=255u8);
        let verdict = lab.verifier.verify_quote_bytes(&q, &pubkey).verdict;
        assert!(!verdict.is_pass(), "mutation at byte {i} still passes");
        rejected += 1;
    }
    format!("{mismatches}/100 fingerprint mismatches detected; {rejected}/{} single-byte mutations rejected", quote.len())
}

fn channel_pair(rng: &mut ChaCha20Rng) -> (TrustedChannel, TrustedChannel) {
    let suite = CipherSuiteId::REGISTERED[rng.gen_range(0..3)].clone();
    let total = KeyBlockLayout::for_suite(&suite).unwrap().total();
    let mut raw = vec![0u8; total];
    rng.fill_bytes(&mut raw);
    let kb = KeyBlock::partition(&raw, &suite).unwrap();
    let sid = SessionId::generate(rng);
    let client = TrustedChannel::new(sid, suite.clone(), &kb, Role::Client).unwrap();
    let server = TrustedChannel::new(sid, suite, &kb, Role::Server).unwrap();
    if rng.gen_bool(0.5) {
        (client, server)
    } else {
        (server, client)
    }
}

/// Re-encodes a frame so faults act on the wire form.
fn wire(frame: &RecordFrame) -> Vec<u8> {
    frame.encode()
}

fn record_integrity() -> String {
    let mut rng = ChaCha20Rng::seed_from_u64(FUZZ_SEED + 7);
    let ctx = b"/echo";
    let mut sealed = 0u64;
    let mut faults = [0u32; 4];
    for trial in 0..10_000 {
        let (mut tx, mut rx) = channel_pair(&mut rng);
        let mut delivered = Vec::new();
        for _ in 0..rng.gen_range(1..=3) {
            let mut msg = vec![0u8; rng.gen_range(0..64)];
            rng.fill_bytes(&mut msg);
            let f = wire(&tx.seal(&msg, ctx).unwrap());
            sealed += 1;
            assert_eq!(rx.open(&RecordFrame::decode(&f).unwrap(), ctx).unwrap(), msg);
            delivered.push(f);
        }
        let a = wire(&tx.seal(b"next", ctx).unwrap());
        let b = wire(&tx.seal(b"after", ctx).unwrap());
        sealed += 2;
        let kind = rng.gen_range(0..4);
        faults[kind] += 1;
        let bad = match kind {
            0 => {
                let mut t = a.clone();
                let bit = rng.gen_range(0..t.len() * 8);
                t[bit / 8] ^= 1 << (bit % 8);
                t
            }
            1 => delivered[rng.gen_range(0..delivered.len())].clone(),
            // Reorder and drop both put `b` in front of `a`; they differ in
            // whether `a` is attempted afterwards.
            _ => b.clone(),
        };
        let res = rx.open(&RecordFrame::decode(&bad).unwrap(), ctx);
        assert!(res.is_err(), "trial {trial}: fault {kind} accepted");
        assert!(rx.is_closed(), "trial {trial}: channel left open");
        let follow = if kind == 2 { &a } else { &b };
        assert_eq!(
            rx.open(&RecordFrame::decode(follow).unwrap(), ctx),
            Err(RecordError::ChannelClosed),
            "trial {trial}: closed channel yielded data"
        );
    }
    format!(
        "{sealed} records sealed; 10000 faults (tamper {}, replay {}, reorder {}, drop {}), 0 false accepts",
        faults[0], faults[1], faults[2], faults[3]
    )
}

fn resumption() -> String {
    let dir = tempfile::tempdir().unwrap();
    let server_cap = dir.path().join("server.cap");
    let cache = dir.path().join("tickets.json");
    let max_age = 3;
    let server = spawn_server(
        dir.path(),
        &server_config("one-way"),
        &["--max-age", &max_age.to_string(), "--transcript", server_cap.to_str().unwrap()],
    );
    let run = |n: u32| {
        let cap = dir.path().join(format!("client{n}.cap"));
        let out = client(
            &server.addr,
            "/echo",
            &["--data", &format!("call {n}"), "--session-cache", cache.to_str().unwrap(), "--transcript", cap.to_str().unwrap()],
        );
        let o = outcome(&out);
        assert_eq!(o["body"], format!("call {n}"));
        (o, captured_kinds(&cap).len(), captured_kinds(&server_cap).len())
    };
    let (first, c1, s1) = run(1);
    assert_eq!((first["resumed"].as_bool(), c1, s1), (Some(false), 6, 6), "first call");
    let (second, c2, s2) = run(2);
    assert_eq!(second["resumed"].as_bool(), Some(true), "second call resumed");
    assert_eq!(second["handshake_messages"], 0);
    assert_eq!((c2, s2), (0, 6), "no handshake traffic on resumption");
    assert_eq!(second["session_id"], first["session_id"]);
    std::thread::sleep(Duration::from_secs(max_age + 1));
    let (third, c3, s3) = run(3);
    assert_eq!(third["resumed"].as_bool(), Some(false), "third call after expiry");
    assert_eq!((c3, s3), (6, 12), "full handshake after expiry");
    assert_ne!(third["session_id"], first["session_id"]);
    format!("resumed with 0 ATTEST messages inside max-age {max_age}s; full 6-message handshake after expiry")
}

fn policy_semantics() -> String {
    #[derive(Clone, Copy, PartialEq, Debug)]
    enum Rule {
        Allow,
        Deny,
        Absent,
    }
    let peer = IdentityBundle {
        domain: Some("svc.example".into()),
        tcb: [0xab; 32],
        vendor: Some("CN=Vendor A".into()),
        verifier: Some("CN=Verifier A".into()),
    };
    let stranger = IdentityBundle {
        domain: Some("other.example".into()),
        tcb: [0xcd; 32],
        vendor: Some("CN=Vendor B".into()),
        verifier: Some("CN=Verifier B".into()),
    };
    let rules = [Rule::Allow, Rule::Deny, Rule::Absent];
    let mut cases = 0;
    for n in 0..81 {
        let combo: Vec<Rule> = (0..4).map(|i| rules[(n / 3usize.pow(i)) % 3]).collect();
        let mut allowed = Vec::new();
        let mut denied = Vec::new();
        for (kind, rule) in IdentityKind::ALL.iter().zip(&combo) {
            let sel = Selector::new(*kind, peer.value(*kind).unwrap());
            match rule {
                Rule::Allow => allowed.push(sel),
                Rule::Deny => denied.push(sel),
                Rule::Absent => {}
            }
        }
        let policy = Policy::new(allowed, denied).unwrap();

        let first_deny = IdentityKind::ALL.iter().zip(&combo).find(|(_, r)| **r == Rule::Deny);
        let expected = match first_deny {
            Some((kind, _)) => PolicyDecision::Reject(Rejection::Denied(Selector::new(*kind, peer.value(*kind).unwrap()))),
            None => PolicyDecision::Accept,
        };
        assert_eq!(evaluate_policy(&peer, &policy), expected, "peer, case {combo:?}");

        let first_allow = IdentityKind::ALL.iter().zip(&combo).find(|(_, r)| **r == Rule::Allow);
        let expected = match first_allow {
            Some((kind, _)) => PolicyDecision::Reject(Rejection::NotAllowed(*kind)),
            None => PolicyDecision::Accept,
        };
        assert_eq!(evaluate_policy(&stranger, &policy), expected, "stranger, case {combo:?}");
        cases += 1;
    }
    format!("{cases}/81 combinations: any matching deny rejects, allows restrict only their own kind")
}

fn golden_transcripts() -> String {
    let update = std::env::var("UPDATE_GOLDEN").as_deref() == Ok("1");
    let mut sizes = Vec::new();
    for (mode, file) in [("one-way", "one_way.bin"), ("mutual", "mutual.bin")] {
        let dir = tempfile::tempdir().unwrap();
        let server_cap = dir.path().join("server.cap");
        let client_cap = dir.path().join("client.cap");
        let server = spawn_server(
            dir.path(),
            &server_config(mode),
            &["--seed", "42", "--transcript", server_cap.to_str().unwrap()],
        );
        let vendor = fixture("vendor.json");
        let mut args = vec!["--seed", "42", "--mode", mode, "--data", "golden", "--transcript", client_cap.to_str().unwrap()];
        if mode == "mutual" {
            args.extend(["--vendor", &vendor]);
        }
        outcome(&client(&server.addr, "/echo", &args));
        drop(server);
        let client_bytes = std::fs::read(&client_cap).unwrap();
        let server_bytes = std::fs::read(&server_cap).unwrap();
        assert_eq!(client_bytes, server_bytes, "{mode}: client and server captures differ");
        let golden = golden_dir().join(file);
        if update {
            std::fs::create_dir_all(golden_dir()).unwrap();
            std::fs::write(&golden, &client_bytes).unwrap();
        } else {
            let expected = std::fs::read(&golden)
                .unwrap_or_else(|_| panic!("{} missing; run with UPDATE_GOLDEN=1", golden.display()));
            assert!(client_bytes == expected, "{mode}: transcript differs from {}", golden.display());
        }
        sizes.push(format!("{file} {} bytes", client_bytes.len()));
    }
    if update {
        format!("golden files rewritten: {}", sizes.join(", "))
    } else {
        format!("bit-exact: {}", sizes.join(", "))
    }
}
