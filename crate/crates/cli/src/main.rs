use std::fs;
use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcv_cli::service::{self, ServiceConfig};
use pcv_cli::{exit_code, EXIT_MALFORMED, EXIT_OTHER};
use pcv_core::analysis::{
    detune_experiment, estimate_lyapunov, loopback_profile, lyapunov_from_state, prepare_isk, recovery_fidelity,
    sweep_order_parameter,
};
use pcv_core::attack::{attack_time_estimate, brute_force_sim, TemplateOracle};
use pcv_core::glyphs::{generate_sk, render_ascii, Charset, Deformation, GrayImage};
use pcv_core::lattice::{thermalize, Dynamics, SimParams};
use pcv_core::vault::{
    decrypt_phase1, decrypt_phase2, encrypt_flow, encrypt_with_key, EncryptConfig, VaultContainer, DEFAULT_KDF_WORK,
    SELF_CHECK_ATTEMPTS,
};
use rand::rngs::OsRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use zeroize::Zeroizing;

/// Password vault whose second factor is read off a chaotic lattice by a human.
#[derive(Parser)]
#[command(name = "pcv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encrypt a file. Prompts for the password twice.
    Encrypt {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        secrets: SecretInput,
        #[command(flatten)]
        sim: SimArgs,
        /// PBKDF2 iterations.
        #[arg(long, default_value_t = DEFAULT_KDF_WORK)]
        kdf_work: u32,
        /// Thermalizations tried before giving up on a legible image.
        #[arg(long, default_value_t = SELF_CHECK_ATTEMPTS)]
        attempts: u32,
    },
    /// Decrypt a file: shows the restored image, then asks for the key in it.
    Decrypt {
        input: PathBuf,
        output: PathBuf,
        #[command(flatten)]
        secrets: SecretInput,
        /// Where to write the image (default: a temporary file).
        #[arg(long)]
        image: Option<PathBuf>,
        /// Pixels per site in the image file.
        #[arg(long, default_value_t = 8)]
        scale: usize,
        /// Do not print the ASCII rendering.
        #[arg(long)]
        no_ascii: bool,
    },
    /// Order parameter against temperature, as CSV.
    Sweep {
        #[command(flatten)]
        sim: SimArgs,
        /// Comma-separated increasing temperatures.
        #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 2.0])]
        temps: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        replicas: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Loopback recovery against protection time, as CSV.
    Loopback {
        #[command(flatten)]
        sim: SimArgs,
        /// Comma-separated increasing protection times (time units).
        #[arg(long, value_delimiter = ',', default_values_t = [250.0, 300.0, 350.0, 400.0, 450.0, 500.0, 550.0, 600.0])]
        taus: Vec<f64>,
        #[arg(long, default_value = "K7XM2")]
        text: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Largest Lyapunov exponent of a thermalized state.
    Lyapunov {
        #[command(flatten)]
        sim: SimArgs,
        /// Averaging horizon in time units.
        #[arg(long, default_value_t = 200.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-9)]
        delta0: f64,
        /// Also run the uncoupled harmonic control, which must give about 0.
        #[arg(long)]
        harmonic: bool,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Perturb one site of the final state and report what survives.
    Detune {
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [20, 20])]
        site: Vec<usize>,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        #[arg(long, default_value = "K7XM2")]
        text: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Simulated password brute force against a throwaway container, as JSON lines.
    AttackSim {
        #[command(flatten)]
        sim: SimArgs,
        /// Number of candidate passwords, one of which is right.
        #[arg(long, default_value_t = 100)]
        candidates: usize,
        #[arg(long, default_value_t = 1_000)]
        kdf_work: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Exhaustive-search time for a human-read key.
    Estimate {
        #[arg(long, default_value_t = 5)]
        length: u32,
        #[arg(long, default_value_t = 80)]
        alphabet: u32,
        /// Images a human can read per second.
        #[arg(long, default_value_t = 1000.0)]
        rate: f64,
    },
    /// Render a thermalized (optionally imprinted) lattice.
    Render {
        #[command(flatten)]
        sim: SimArgs,
        /// Text to imprint before rendering.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Ascii)]
        format: Format,
        #[arg(long, default_value_t = 1)]
        scale: usize,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run the local HTTP service used by the web front end.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8787")]
        bind: SocketAddr,
        /// Permit a non-loopback bind address.
        #[arg(long)]
        allow_remote: bool,
        /// Session lifetime in seconds.
        #[arg(long, default_value_t = 600)]
        ttl: u64,
        #[arg(long, default_value_t = 16)]
        max_sessions: usize,
        #[arg(long, default_value_t = DEFAULT_KDF_WORK)]
        kdf_work: u32,
        #[command(flatten)]
        sim: SimArgs,
    },
}

#[derive(Args, Clone, Copy)]
struct SimArgs {
    /// Lattice side.
    #[arg(long, default_value_t = 69)]
    n: usize,
    #[arg(long, default_value_t = 0.9)]
    temperature: f64,
    /// Thermalization steps.
    #[arg(long, default_value_t = 20_000)]
    burn_in_steps: u64,
    /// Protection time in steps.
    #[arg(long, default_value_t = 35_000)]
    tau_steps: u64,
}

impl SimArgs {
    fn params(&self) -> pcv_core::Result<SimParams> {
        let params = SimParams::default()
            .with_n(self.n)
            .with_temperature(self.temperature)
            .with_burn_in_steps(self.burn_in_steps)
            .with_tau_steps(self.tau_steps);
        params.validate()?;
        Ok(params)
    }
}

#[derive(Args)]
struct SecretInput {
    /// Read secrets from stdin, one per line, instead of prompting.
    #[arg(long)]
    password_stdin: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Ascii,
    Pgm,
}

/// Secrets come from hidden prompts, or from stdin lines when scripted.
struct Secrets {
    stdin: bool,
}

impl Secrets {
    fn read(&self, prompt: &str) -> Result<Zeroizing<String>, Failure> {
        if self.stdin {
            let mut line = Zeroizing::new(String::new());
            io::stdin().lock().read_line(&mut line).map_err(Failure::io)?;
            let trimmed = Zeroizing::new(line.trim_end_matches(['\r', '\n']).to_owned());
            Ok(trimmed)
        } else {
            rpassword::prompt_password(prompt).map(Zeroizing::new).map_err(Failure::io)
        }
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn io(e: io::Error) -> Self {
        Self::new(EXIT_OTHER, e.to_string())
    }
}

impl From<pcv_core::Error> for Failure {
    fn from(e: pcv_core::Error) -> Self {
        Self::new(exit_code(&e), e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Encrypt {
            input,
            output,
            secrets,
            sim,
            kdf_work,
            attempts,
        } => encrypt(&input, &output, Secrets { stdin: secrets.password_stdin }, sim, kdf_work, attempts),
        Command::Decrypt {
            input,
            output,
            secrets,
            image,
            scale,
            no_ascii,
        } => decrypt(
            &input,
            &output,
            Secrets { stdin: secrets.password_stdin },
            image,
            scale,
            no_ascii,
        ),
        Command::Sweep {
            sim,
            temps,
            replicas,
            seed,
        } => {
            let result = sweep_order_parameter(sim.params()?, &temps, replicas, seed)?;
            print!("{}", result.to_csv());
            Ok(())
        }
        Command::Loopback { sim, taus, text, seed } => {
            let (isk, mask) = prepare_isk(sim.params()?, seed, &text, Deformation::None)?;
            let profile = loopback_profile(&isk, &mask, &taus)?;
            print!("{}", profile.to_csv());
            eprintln!("tau* = {}", profile.tau_star);
            Ok(())
        }
        Command::Lyapunov {
            sim,
            horizon,
            delta0,
            harmonic,
            seed,
        } => {
            let params = sim.params()?;
            let lambda = estimate_lyapunov(params, seed, horizon, delta0)?;
            println!("lambda = {lambda:.6}");
            if lambda > 0.0 {
                println!("ln(1e16)/lambda = {:.1} time units", 1e16f64.ln() / lambda);
            }
            if harmonic {
                let start = thermalize(params, seed)?;
                let control = lyapunov_from_state(&start, Dynamics::UncoupledHarmonic, horizon, delta0)?;
                println!("harmonic control lambda = {control:.6}");
            }
            Ok(())
        }
        Command::Detune {
            sim,
            site,
            delta,
            text,
            seed,
        } => {
            let [i, j] = site[..] else {
                return Err(Failure::new(EXIT_MALFORMED, "--site takes two indices, e.g. 20,20"));
            };
            let params = sim.params()?;
            let (isk, mask) = prepare_isk(params, seed, &text, Deformation::None)?;
            let mut fs = isk.clone();
            fs.integrate(params.tau_steps)?;
            let restored = detune_experiment(&fs, (i, j), delta)?;
            let origin = isk.sign_field();
            println!(
                "mask fidelity {:.4}, full-lattice fidelity {:.4} after u({i},{j}) += {delta:e}",
                recovery_fidelity(&restored, &origin, Some(&mask))?,
                recovery_fidelity(&restored, &origin, None)?
            );
            Ok(())
        }
        Command::AttackSim {
            sim,
            candidates,
            kdf_work,
            seed,
        } => attack_sim(sim, candidates, kdf_work, seed),
        Command::Estimate { length, alphabet, rate } => {
            let estimate = attack_time_estimate(length, alphabet, rate)?;
            println!("{}", estimate.human());
            eprintln!("{} candidates, {:.4e} s", estimate.candidates, estimate.seconds);
            Ok(())
        }
        Command::Render {
            sim,
            text,
            format,
            scale,
            out,
            seed,
        } => {
            let params = sim.params()?;
            let field = match text {
                Some(text) => prepare_isk(params, seed, &text, Deformation::None)?.0.sign_field(),
                None => thermalize(params, seed)?.sign_field(),
            };
            let bytes = match format {
                Format::Ascii => render_ascii(&field, scale).into_bytes(),
                Format::Pgm => GrayImage::from_sign_field(&field, scale).to_pgm(),
            };
            match out {
                Some(path) => write_atomic(&path, &bytes),
                None => io::stdout().write_all(&bytes).map_err(Failure::io),
            }
        }
        Command::Serve {
            bind,
            allow_remote,
            ttl,
            max_sessions,
            kdf_work,
            sim,
        } => {
            tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env()
                        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
                )
                .with_writer(io::stderr)
                .init();
            let config = ServiceConfig {
                bind,
                allow_remote,
                session_ttl: Duration::from_secs(ttl),
                max_sessions,
                encrypt: EncryptConfig {
                    params: sim.params()?,
                    kdf_work,
                    ..EncryptConfig::default()
                },
                ..ServiceConfig::default()
            };
            config.validate().map_err(|e| Failure::new(EXIT_OTHER, e))?;
            let runtime = tokio::runtime::Runtime::new().map_err(Failure::io)?;
            runtime.block_on(service::serve(config)).map_err(Failure::io)
        }
    }
}

fn encrypt(
    input: &Path,
    output: &Path,
    secrets: Secrets,
    sim: SimArgs,
    kdf_work: u32,
    attempts: u32,
) -> Result<(), Failure> {
    let data = fs::read(input).map_err(Failure::io)?;
    let sp = secrets.read("Password: ")?;
    let confirm = secrets.read("Repeat password: ")?;
    if *sp != *confirm {
        return Err(Failure::new(EXIT_MALFORMED, "passwords do not match"));
    }
    let config = EncryptConfig {
        params: sim.params()?,
        kdf_work,
        attempts,
        ..EncryptConfig::default()
    };
    eprintln!("thermalizing and checking the key image; this takes a while");
    let (container, report) = encrypt_flow(&data, &sp, &config, &mut OsRng)?;
    write_atomic(output, &container.to_bytes())?;
    eprintln!(
        "sealed {} bytes after {} attempt(s); self-check mask fidelity {:.4}",
        data.len(),
        report.attempts,
        report.mask_fidelity
    );
    Ok(())
}

fn decrypt(
    input: &Path,
    output: &Path,
    secrets: Secrets,
    image: Option<PathBuf>,
    scale: usize,
    no_ascii: bool,
) -> Result<(), Failure> {
    let bytes = fs::read(input).map_err(Failure::io)?;
    let container = VaultContainer::from_bytes(&bytes)?;
    let sp = secrets.read("Password: ")?;
    eprintln!("restoring the key image");
    let session = decrypt_phase1(container, &sp)?;
    drop(sp);
    let pgm = session.image(scale).to_pgm();
    let image_path = match image {
        Some(path) => {
            fs::write(&path, &pgm).map_err(Failure::io)?;
            path
        }
        None => {
            let file = tempfile::Builder::new()
                .prefix("pcv-key-")
                .suffix(".pgm")
                .tempfile()
                .map_err(Failure::io)?;
            fs::write(file.path(), &pgm).map_err(Failure::io)?;
            let (_, path) = file.keep().map_err(|e| Failure::io(e.error))?;
            path
        }
    };
    if !no_ascii {
        eprint!("{}", render_ascii(&session.field, 1));
    }
    eprintln!("image written to {}", image_path.display());
    eprintln!(
        "type the {} characters shown; if the image is unreadable the password was wrong",
        session.sk_len()
    );
    let sk = secrets.read("Key: ")?;
    let sk = Zeroizing::new(sk.trim().to_uppercase());
    let payload = Zeroizing::new(decrypt_phase2(session, &sk)?);
    write_atomic(output, &payload)
}

/// Writes via a sibling temporary file so `path` appears only when complete.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut file = tempfile::NamedTempFile::new_in(dir).map_err(Failure::io)?;
    file.write_all(bytes).map_err(Failure::io)?;
    file.as_file().sync_all().map_err(Failure::io)?;
    file.persist(path).map_err(|e| Failure::io(e.error))?;
    Ok(())
}

fn attack_sim(sim: SimArgs, candidates: usize, kdf_work: u32, seed: u64) -> Result<(), Failure> {
    if candidates < 2 {
        return Err(Failure::new(EXIT_MALFORMED, "need at least two candidates"));
    }
    let params = sim.params()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let config = EncryptConfig {
        params,
        kdf_work,
        ..EncryptConfig::default()
    };
    let sk = generate_sk(&config.charset, config.key_len, &mut rng)?;
    let mut passwords: Vec<String> = (0..candidates)
        .map(|_| (0..10).map(|_| rng.sample(rand::distributions::Alphanumeric) as char).collect())
        .collect();
    let true_index = rng.gen_range(0..candidates);
    let true_sp = passwords[true_index].clone();
    eprintln!("sealing a throwaway container");
    let (container, _) = encrypt_with_key(b"attack simulation payload", &true_sp, &sk, &config, &mut rng)?;
    let oracle = TemplateOracle::new(Charset::default_v1(), params.n, sk.len())?;
    let report = brute_force_sim(&container, &passwords, &oracle, &true_sp)?;
    passwords.clear();
    print!("{}", report.to_json_lines());
    Ok(())
}
