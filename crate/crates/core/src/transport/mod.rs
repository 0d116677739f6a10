//! HTTP/1.1 transport over TCP, with optional TLS, for the server, client
//! and attestation-service binaries.
//!
//! Connections are served one thread each. Handshake messages can be
//! captured to a file as a sequence of
//! `direction(1) ‖ length(4, big-endian) ‖ transcript bytes` entries, where
//! direction 0 is client-sent and 1 is server-sent.

mod client;
mod config;
mod server;
mod verifier;

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, ServerName};
use thiserror::Error;

use crate::clock::{Clock, ManualClock, SystemClock, FIXED_EPOCH};
use crate::keyschedule::Role;
use crate::wire::{HttpMessage, HttpParseError};

pub use client::{
    exit_code, run_client, ClientError, ClientOutcome, ClientRequest, IdentityReport, RemoteVerifier,
};
pub use config::{
    load_policy, load_roots, load_vendor, load_verifier, load_verifier_cert, read_transcript,
    save_pki, ClientConfig, ConfigError, HandlerKind, RouteConfig, ServerConfig, TlsFiles,
    VerifierChoice, VerifierConfig,
};
pub use server::{run_server, start_server};
pub use verifier::{run_verifier, start_verifier};

pub const VERIFY_PATH: &str = "/verify";
const READ_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("http: {0}")]
    Http(#[from] HttpParseError),
    #[error("tls: {0}")]
    Tls(String),
    #[error("connection closed by peer")]
    Closed,
}

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("bind: {0}")]
    Bind(io::Error),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Sets the handle's stop flag on Ctrl-C or SIGTERM.
pub(crate) fn stop_on_signal(handle: &ServerHandle) -> Result<(), StartError> {
    let flag = handle.stop_flag();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
        .map_err(|e| StartError::Bind(io::Error::other(e)))
}

/// Deterministic test mode is refused together with TLS unless this
/// variable is set to `1`.
pub const TEST_MODE_ENV: &str = "HTTPA_TEST_MODE";

/// Randomness and time for one endpoint. With a seed, both become
/// deterministic: the generator is seeded and the clock is pinned.
pub(crate) fn rng_and_clock(seed: Option<u64>, stream: u64) -> (ChaCha20Rng, Arc<dyn Clock>) {
    match seed {
        Some(seed) => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            (rng, Arc::new(ManualClock::new(FIXED_EPOCH)))
        }
        None => (ChaCha20Rng::from_entropy(), Arc::new(SystemClock)),
    }
}

pub(crate) fn check_seed_allowed(seed: Option<u64>, tls: bool) -> Result<(), ConfigError> {
    if seed.is_some() && tls && std::env::var(TEST_MODE_ENV).as_deref() != Ok("1") {
        return Err(ConfigError::Invalid(
            "--seed cannot be combined with TLS outside test mode".into(),
        ));
    }
    Ok(())
}

/// Emits one structured event as a JSON object on the `httpa::event` target.
pub(crate) fn event(value: serde_json::Value) {
    log::info!(target: "httpa::event", "{value}");
}

/// Appends handshake messages to a capture file.
#[derive(Debug)]
pub struct TranscriptWriter(Mutex<File>);

impl TranscriptWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(TranscriptWriter(Mutex::new(file)))
    }

    pub fn record(&self, sender: Role, msg: &HttpMessage) -> io::Result<()> {
        let bytes = msg.transcript_bytes();
        let mut entry = Vec::with_capacity(5 + bytes.len());
        entry.push(match sender {
            Role::Client => 0,
            Role::Server => 1,
        });
        entry.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
        entry.extend_from_slice(&bytes);
        let mut f = self.0.lock().unwrap();
        f.write_all(&entry)?;
        f.flush()
    }
}

pub(crate) enum Conn {
    Plain(TcpStream),
    TlsServer(Box<rustls::StreamOwned<rustls::ServerConnection, TcpStream>>),
    TlsClient(Box<rustls::StreamOwned<rustls::ClientConnection, TcpStream>>),
}

impl Read for Conn {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Conn::Plain(s) => s.read(buf),
            Conn::TlsServer(s) => s.read(buf),
            Conn::TlsClient(s) => s.read(buf),
        }
    }
}

impl Write for Conn {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Conn::Plain(s) => s.write(buf),
            Conn::TlsServer(s) => s.write(buf),
            Conn::TlsClient(s) => s.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Conn::Plain(s) => s.flush(),
            Conn::TlsServer(s) => s.flush(),
            Conn::TlsClient(s) => s.flush(),
        }
    }
}

/// A buffered connection that reads and writes whole HTTP messages.
pub(crate) struct HttpConn {
    inner: BufReader<Conn>,
    host: Option<String>,
}

impl HttpConn {
    pub(crate) fn new(conn: Conn, host: Option<String>) -> Self {
        HttpConn {
            inner: BufReader::new(conn),
            host,
        }
    }

    pub(crate) fn send(&mut self, msg: &HttpMessage) -> Result<(), TransportError> {
        let bytes = msg.to_wire(self.host.as_deref());
        let conn = self.inner.get_mut();
        conn.write_all(&bytes)?;
        conn.flush()?;
        Ok(())
    }

    pub(crate) fn recv(&mut self) -> Result<Option<HttpMessage>, TransportError> {
        Ok(HttpMessage::read_from(&mut self.inner)?)
    }

    pub(crate) fn recv_required(&mut self) -> Result<HttpMessage, TransportError> {
        self.recv()?.ok_or(TransportError::Closed)
    }

    pub(crate) fn exchange(&mut self, msg: &HttpMessage) -> Result<HttpMessage, TransportError> {
        self.send(msg)?;
        self.recv_required()
    }
}

fn crypto_provider() -> Arc<rustls::crypto::CryptoProvider> {
    Arc::new(rustls::crypto::ring::default_provider())
}

fn tls_err(e: impl std::fmt::Display) -> TransportError {
    TransportError::Tls(e.to_string())
}

pub fn tls_server_config(files: &TlsFiles) -> Result<Arc<rustls::ServerConfig>, TransportError> {
    let mut certs_pem = BufReader::new(File::open(&files.cert)?);
    let certs: Vec<CertificateDer<'static>> =
        rustls_pemfile::certs(&mut certs_pem).collect::<Result<_, _>>()?;
    let mut key_pem = BufReader::new(File::open(&files.key)?);
    let key: PrivateKeyDer<'static> = rustls_pemfile::private_key(&mut key_pem)?
        .ok_or_else(|| TransportError::Tls("no private key in key file".into()))?;
    let config = rustls::ServerConfig::builder_with_provider(crypto_provider())
        .with_safe_default_protocol_versions()
        .map_err(tls_err)?
        .with_no_client_auth()
        .with_single_cert(certs, key)
        .map_err(tls_err)?;
    Ok(Arc::new(config))
}

pub(crate) fn tls_client_config(ca: &Path) -> Result<Arc<rustls::ClientConfig>, TransportError> {
    let mut pem = BufReader::new(File::open(ca)?);
    let mut roots = rustls::RootCertStore::empty();
    for cert in rustls_pemfile::certs(&mut pem) {
        roots.add(cert?).map_err(tls_err)?;
    }
    let config = rustls::ClientConfig::builder_with_provider(crypto_provider())
        .with_safe_default_protocol_versions()
        .map_err(tls_err)?
        .with_root_certificates(roots)
        .with_no_client_auth();
    Ok(Arc::new(config))
}

/// Connects to `host:port`, optionally over TLS verified against `tls`.
pub(crate) fn connect(
    host: &str,
    port: u16,
    tls: Option<&Arc<rustls::ClientConfig>>,
) -> Result<HttpConn, TransportError> {
    let stream = TcpStream::connect((host, port))?;
    stream.set_read_timeout(Some(READ_TIMEOUT))?;
    stream.set_nodelay(true)?;
    let authority = format!("{host}:{port}");
    let conn = match tls {
        None => Conn::Plain(stream),
        Some(config) => {
            let name = ServerName::try_from(host.to_owned()).map_err(tls_err)?;
            let session = rustls::ClientConnection::new(Arc::clone(config), name).map_err(tls_err)?;
            Conn::TlsClient(Box::new(rustls::StreamOwned::new(session, stream)))
        }
    };
    Ok(HttpConn::new(conn, Some(authority)))
}

/// Handle to a background accept loop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// A flag that stops the accept loop when set; handy for signal handlers.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.stop)
    }

    /// Stops accepting, waits for the accept loop and drops its state.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the stop flag is set.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// Accepts connections until stopped, handing each to `serve` on its own
/// thread.
pub(crate) fn spawn_accept_loop<F>(
    listener: TcpListener,
    tls: Option<Arc<rustls::ServerConfig>>,
    serve: F,
) -> io::Result<ServerHandle>
where
    F: Fn(HttpConn) + Send + Sync + 'static,
{
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let serve = Arc::new(serve);
    let thread = thread::spawn(move || {
        while !flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    let serve = Arc::clone(&serve);
                    let tls = tls.clone();
                    thread::spawn(move || {
                        if stream.set_nonblocking(false).is_err()
                            || stream.set_read_timeout(Some(READ_TIMEOUT)).is_err()
                        {
                            return;
                        }
                        let _ = stream.set_nodelay(true);
                        let conn = match tls {
                            None => Conn::Plain(stream),
                            Some(cfg) => match rustls::ServerConnection::new(cfg) {
                                Ok(session) => {
                                    Conn::TlsServer(Box::new(rustls::StreamOwned::new(session, stream)))
                                }
                                Err(e) => {
                                    log::warn!("tls setup for {peer} failed: {e}");
                                    return;
                                }
                            },
                        };
                        serve(HttpConn::new(conn, None));
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(50));
                }
            }
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

/// A minimal text response.
pub(crate) fn plain_response(status: u16, text: &str) -> HttpMessage {
    HttpMessage::response(status)
        .with_header("Content-Type", "text/plain")
        .with_body(text.as_bytes().to_vec())
}
