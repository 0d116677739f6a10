//! Attested HTTP sessions.
//!
//! A client probes a server with an `OPTIONS` preflight, then runs an
//! `ATTEST` handshake in which the server presents a quote from its TEE.
//! After verifying the quote and checking the collected identities against
//! a policy, the client wraps a pre-session secret to the key bound into
//! the quote. Both sides expand it into a key block, and requests then
//! travel as sealed records over a trusted channel. In mutual mode the
//! client attests too, and the server checks it before revealing anything.
//!
//! The pieces, bottom up:
//!
//! - [`wire`]: HTTP message codec and the `Attest-*` header mapping
//! - [`pki`], [`quote`]: demo certificates and a simulated TEE
//! - [`verify`]: quote verification, signed reports, allow/deny policy
//! - [`keyschedule`]: PRF, key block, secret wrapping, confirmation tag
//! - [`handshake`]: client and server state machines, tickets, session cache
//! - [`record`]: AEAD records, sequence checks, request routing
//! - [`transport`]: loopback/TLS server, client, attestation service
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod clock;
mod codec;
pub mod handshake;
pub mod keyschedule;
pub mod pki;
pub mod quote;
pub mod record;
pub mod transport;
pub mod verify;
pub mod wire;
