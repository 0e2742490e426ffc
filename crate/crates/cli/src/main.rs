use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vpass_cli::commands::{self, IssuerSource};
use vpass_cli::demo::{run_demo, DemoOptions};
use vpass_cli::CliError;
use vpass_service::config::{load_issuer, load_verifier};

#[derive(Parser)]
#[command(name = "vpass", version, about = "Verifiable Passkey issuer, verifier and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an issuer signing key and its DID document.
    Keygen {
        /// Directory for issuer-key.pem and did.json.
        #[arg(long)]
        out: PathBuf,
        /// did:web identifier of the issuer.
        #[arg(long)]
        did: String,
        /// Replace an existing key file.
        #[arg(long)]
        force: bool,
    },
    /// Check a credential file's structure, types and proof.
    VerifyVc {
        /// Credential or presentation file.
        vc: PathBuf,
        /// Issuer DID document file, or a did:web identifier to resolve.
        issuer: String,
        /// Resolve loopback DIDs over plain http.
        #[arg(long)]
        allow_loopback_http: bool,
    },
    /// Add an issuer DID document to a verifier DID cache file.
    Pin {
        did: String,
        /// DID document file; fetched over the network when omitted.
        #[arg(long)]
        doc: Option<PathBuf>,
        /// DID cache file (the verifier's did_cache_path).
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        allow_loopback_http: bool,
    },
    /// Run enrollment and authentication in-process with a software authenticator.
    Demo {
        /// Alter the credential before uploading it.
        #[arg(long)]
        tamper_vc: bool,
        /// Submit the authentication result twice.
        #[arg(long)]
        replay: bool,
        /// Save the issued credential.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the issuer.
    ServeIssuer {
        #[command(flatten)]
        common: ServeArgs,
        /// Issuer DID.
        #[arg(long)]
        did: Option<String>,
        #[arg(long)]
        pagex_url: Option<String>,
        #[arg(long)]
        rp_id: Option<String>,
        /// Signing key file.
        #[arg(long)]
        key: Option<PathBuf>,
    },
    /// Serve the verifier.
    ServeVerifier {
        #[command(flatten)]
        common: ServeArgs,
        /// Trusted issuer DID; repeat for several.
        #[arg(long)]
        did: Vec<String>,
        /// Pin a DID document before serving.
        #[arg(long, num_args = 2, value_names = ["DID", "DOC"])]
        pin: Vec<String>,
    },
}

#[derive(Args)]
struct ServeArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Listen address, such as 127.0.0.1:8080.
    #[arg(long)]
    listen: Option<String>,
    /// Challenge lifetime in seconds.
    #[arg(long)]
    ttl: Option<u64>,
}

impl ServeArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut pairs = Vec::new();
        if let Some(listen) = &self.listen {
            pairs.push(("VPASS_LISTEN_ADDRESS".into(), listen.clone()));
        }
        if let Some(ttl) = self.ttl {
            pairs.push(("VPASS_CHALLENGE_TTL_SECONDS".into(), ttl.to_string()));
        }
        pairs
    }
}

fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

async fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Keygen { out, did, force } => {
            let generated = commands::keygen(&out, &did, force)?;
            println!("private key:  {}", generated.key_path.display());
            println!("DID document: {}", generated.did_document_path.display());
            println!("publish the DID document at {}", generated.hosting_url);
            Ok(())
        }
        Command::VerifyVc {
            vc,
            issuer,
            allow_loopback_http,
        } => {
            let report = commands::verify_vc(&vc, &IssuerSource::parse(&issuer), allow_loopback_http).await?;
            print!("{}", report.render());
            if report.passed() {
                Ok(())
            } else {
                Err(CliError::Verification(format!("{} failed", vc.display())))
            }
        }
        Command::Pin {
            did,
            doc,
            store,
            allow_loopback_http,
        } => {
            let document = commands::pin(&store, &did, doc.as_deref(), allow_loopback_http).await?;
            println!("pinned {} in {}", document.id, store.display());
            Ok(())
        }
        Command::Demo { tamper_vc, replay, out } => {
            let options = DemoOptions {
                tamper_vc,
                replay,
                credential_out: out,
            };
            run_demo(&options, &mut std::io::stdout()).await.map(|_| ())
        }
        Command::ServeIssuer {
            common,
            did,
            pagex_url,
            rp_id,
            key,
        } => {
            let mut overrides = common.overrides();
            let flags = [
                ("VPASS_ISSUER_DID", did),
                ("VPASS_PAGEX_URL", pagex_url),
                ("VPASS_RP_ID", rp_id),
                ("VPASS_SIGNING_KEY_PATH", key.map(|p| p.display().to_string())),
            ];
            overrides.extend(flags.into_iter().filter_map(|(k, v)| Some((k.to_string(), v?))));
            let config = load_issuer(common.config.as_deref(), std::env::vars().chain(overrides))?;
            init_logging();
            commands::serve_issuer(config, commands::shutdown_signal()).await
        }
        Command::ServeVerifier { common, did, pin } => {
            let mut overrides = common.overrides();
            if !did.is_empty() {
                overrides.push(("VPASS_TRUSTED_ISSUER_DIDS".into(), did.join(",")));
            }
            let config = load_verifier(common.config.as_deref(), std::env::vars().chain(overrides))?;
            let pins: Vec<(String, PathBuf)> = pin
                .chunks(2)
                .map(|pair| (pair[0].clone(), PathBuf::from(&pair[1])))
                .collect();
            init_logging();
            commands::serve_verifier(config, &pins, commands::shutdown_signal()).await
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
