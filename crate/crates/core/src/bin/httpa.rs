use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::Ordering;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use httpa::keyschedule::Mode;
use httpa::pki::DemoPki;
use httpa::transport::{
    exit_code, load_roots, load_verifier, run_client, save_pki, start_server, start_verifier,
    ClientConfig, ClientRequest, ServerConfig, TlsFiles, VerifierChoice,
};
use httpa::verify::Verifier;
use httpa::wire::CipherSuiteId;

#[derive(Parser)]
#[command(name = "httpa", version, about = "Attested HTTP sessions over simulated TEEs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Serve attested handlers.
    Server(ServerArgs),
    /// Run a handshake and send one protected request.
    Client(ClientArgs),
    /// Serve the attestation service (`POST /verify`).
    Verifier(VerifierArgs),
    /// Generate demo vendor and verifier credentials.
    GenCreds(GenCredsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    OneWay,
    Mutual,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::OneWay => Mode::OneWay,
            ModeArg::Mutual => Mode::Mutual,
        }
    }
}

#[derive(Args)]
struct ServerArgs {
    /// Server configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    listen: Option<String>,
    /// Enable TLS; cert and key come from the flags below or the config.
    #[arg(long)]
    tls: bool,
    #[arg(long, requires = "tls_key")]
    tls_cert: Option<PathBuf>,
    #[arg(long, requires = "tls_cert")]
    tls_key: Option<PathBuf>,
    #[arg(long)]
    max_age: Option<u32>,
    /// Deterministic randomness and a pinned clock, for golden transcripts.
    #[arg(long)]
    seed: Option<u64>,
    /// Append handshake messages to this capture file.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct ClientArgs {
    /// Client configuration file (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target URL, e.g. http://127.0.0.1:8080/echo
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    roots: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Comma-separated cipher suite tokens in preference order.
    #[arg(long, value_delimiter = ',')]
    suites: Option<Vec<String>>,
    /// Use a remote attestation service instead of in-process verification.
    #[arg(long, requires = "verifier_cert")]
    verifier_url: Option<String>,
    #[arg(long, requires = "verifier_url")]
    verifier_cert: Option<PathBuf>,
    #[arg(long)]
    session_cache: Option<PathBuf>,
    #[arg(long)]
    tls_ca: Option<PathBuf>,
    /// Mutual mode: vendor credentials for the client TEE.
    #[arg(long)]
    vendor: Option<PathBuf>,
    #[arg(long)]
    code_identity: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Path for the protected request; defaults to the target URL path.
    #[arg(long)]
    path: Option<String>,
    #[arg(long, conflicts_with = "data_file")]
    data: Option<String>,
    #[arg(long)]
    data_file: Option<PathBuf>,
}

#[derive(Args)]
struct VerifierArgs {
    #[arg(long)]
    listen: String,
    #[arg(long)]
    roots: PathBuf,
    /// Verifier certificate and key file.
    #[arg(long)]
    credentials: PathBuf,
    #[arg(long, requires = "tls_key")]
    tls_cert: Option<PathBuf>,
    #[arg(long, requires = "tls_cert")]
    tls_key: Option<PathBuf>,
}

#[derive(Args)]
struct GenCredsArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write a self-signed TLS certificate for these names.
    #[arg(long, value_delimiter = ',')]
    tls_names: Option<Vec<String>>,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HTTPA_LOG", "warn"))
        .format(|buf, record| writeln!(buf, "{}", record.args()))
        .init();
}

fn fail(code: i32, err: impl std::fmt::Display) -> ExitCode {
    eprintln!("httpa: {err}");
    ExitCode::from(code as u8)
}

fn announce(addr: std::net::SocketAddr) {
    println!("listening on {addr}");
    let _ = std::io::stdout().flush();
}

fn wait_for_signal(handle: httpa::transport::ServerHandle) -> ExitCode {
    let flag = handle.stop_flag();
    if let Err(e) = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)) {
        return fail(exit_code::CONFIG, e);
    }
    handle.wait();
    ExitCode::SUCCESS
}

fn server(args: ServerArgs) -> ExitCode {
    let mut cfg = match ServerConfig::from_file(&args.config) {
        Ok(c) => c,
        Err(e) => return fail(exit_code::CONFIG, e),
    };
    if let Some(listen) = args.listen {
        cfg.listen = listen;
    }
    if let (Some(cert), Some(key)) = (args.tls_cert, args.tls_key) {
        cfg.tls = Some(TlsFiles { cert, key });
    }
    if args.tls && cfg.tls.is_none() {
        return fail(exit_code::CONFIG, "--tls needs --tls-cert/--tls-key or a tls section");
    }
    if let Some(max_age) = args.max_age {
        cfg.max_age = max_age;
    }
    cfg.seed = args.seed.or(cfg.seed);
    cfg.transcript = args.transcript.or(cfg.transcript);
    match start_server(&cfg) {
        Ok(handle) => {
            announce(handle.local_addr());
            wait_for_signal(handle)
        }
        Err(e) => fail(exit_code::CONFIG, e),
    }
}

fn client(args: ClientArgs) -> ExitCode {
    let mut cfg = match (&args.config, &args.target, &args.roots) {
        (Some(path), _, _) => match ClientConfig::from_file(path) {
            Ok(c) => c,
            Err(e) => return fail(exit_code::CONFIG, e),
        },
        (None, Some(target), Some(roots)) => ClientConfig::new(target.clone(), roots.clone()),
        _ => return fail(exit_code::USAGE, "either --config or both --target and --roots are required"),
    };
    if let Some(t) = args.target {
        cfg.target = t;
    }
    if let Some(r) = args.roots {
        cfg.roots = r;
    }
    if let Some(m) = args.mode {
        cfg.mode = m.into();
    }
    if let Some(s) = args.suites {
        cfg.suites = s.iter().map(|t| CipherSuiteId::from_token(t.trim())).collect();
    }
    if let (Some(url), Some(cert)) = (args.verifier_url, args.verifier_cert) {
        cfg.verifier = VerifierChoice::Remote { url, cert };
    }
    cfg.policy = args.policy.or(cfg.policy);
    cfg.session_cache = args.session_cache.or(cfg.session_cache);
    cfg.tls_ca = args.tls_ca.or(cfg.tls_ca);
    cfg.vendor = args.vendor.or(cfg.vendor);
    cfg.code_identity = args.code_identity.or(cfg.code_identity);
    cfg.seed = args.seed.or(cfg.seed);
    cfg.transcript = args.transcript.or(cfg.transcript);
    let body = match (args.data, args.data_file) {
        (Some(d), _) => d.into_bytes(),
        (None, Some(p)) => match std::fs::read(&p) {
            Ok(b) => b,
            Err(e) => return fail(exit_code::CONFIG, format!("{}: {e}", p.display())),
        },
        (None, None) => Vec::new(),
    };
    let request = ClientRequest { path: args.path, body };
    match run_client(&cfg, &request) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.exit_code(), e),
    }
}

fn verifier(args: VerifierArgs) -> ExitCode {
    let roots = match load_roots(&args.roots) {
        Ok(r) => r,
        Err(e) => return fail(exit_code::CONFIG, e),
    };
    let creds = match load_verifier(&args.credentials) {
        Ok(c) => c,
        Err(e) => return fail(exit_code::CONFIG, e),
    };
    let tls = match (args.tls_cert, args.tls_key) {
        (Some(cert), Some(key)) => match httpa::transport::tls_server_config(&TlsFiles { cert, key }) {
            Ok(t) => Some(t),
            Err(e) => return fail(exit_code::CONFIG, e),
        },
        _ => None,
    };
    let v = Verifier::new(roots, creds, std::sync::Arc::new(httpa::clock::SystemClock));
    match start_verifier(&args.listen, v, tls) {
        Ok(handle) => {
            announce(handle.local_addr());
            wait_for_signal(handle)
        }
        Err(e) => fail(exit_code::CONFIG, e),
    }
}

fn gen_creds(args: GenCredsArgs) -> ExitCode {
    let mut rng = match args.seed {
        Some(s) => ChaCha20Rng::seed_from_u64(s),
        None => ChaCha20Rng::from_entropy(),
    };
    let pki = DemoPki::generate(&mut rng);
    if let Err(e) = save_pki(&args.out, &pki) {
        return fail(exit_code::CONFIG, e);
    }
    if let Some(names) = args.tls_names {
        let cert = match rcgen::generate_simple_self_signed(names) {
            Ok(c) => c,
            Err(e) => return fail(exit_code::CONFIG, e),
        };
        let written = std::fs::write(args.out.join("tls_cert.pem"), cert.cert.pem())
            .and_then(|_| std::fs::write(args.out.join("tls_key.pem"), cert.key_pair.serialize_pem()));
        if let Err(e) = written {
            return fail(exit_code::CONFIG, e);
        }
    }
    println!("credentials written to {}", args.out.display());
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit_code::USAGE as u8 } else { 0 });
        }
    };
    match cli.command {
        Command::Server(a) => server(a),
        Command::Client(a) => client(a),
        Command::Verifier(a) => verifier(a),
        Command::GenCreds(a) => gen_creds(a),
    }
}
