//! Command-line front end for the sealing pipeline: provision simulated
//! devices, derive keys, seal and unseal images, serve and fetch packages,
//! and run the measurement harness.
//!
//! Exit codes are stable for scripting:
//!
//! | code | meaning                          |
//! |------|----------------------------------|
//! | 0    | success                          |
//! | 1    | usage or policy error            |
//! | 2    | parse/format error in an input   |
//! | 3    | integrity rejection on unseal    |
//! | 4    | file I/O error                   |
//! | 5    | network error                    |
//!
//! Results go to stdout; every diagnostic is a single line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use eric_core::analysis::{
    entropy, measure_throughput, overhead_report, tamper_sweep, AnalysisError,
};
use eric_core::hde::{unseal, ValidationOutcome};
use eric_core::keys::PufBasedKey;
use eric_core::net::{fetch, serve, NetError, PackageStore};
use eric_core::package::{extract_code, CodeSource, Isa, SealedPackage};
use eric_core::puf::{ChallengeSet, DeviceModel};
use eric_core::seal::{seal, EncryptionPolicy, SealError};

const EXIT_USAGE: u8 = 1;
const EXIT_FORMAT: u8 = 2;
const EXIT_REJECTED: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_NET: u8 = 5;

#[derive(Parser)]
#[command(name = "eric", version, about = "Seal RISC-V code images to PUF-keyed devices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Provision and inspect simulated devices.
    #[command(subcommand)]
    Device(DeviceCommand),
    /// Seal a code image for a target device.
    Seal(SealArgs),
    /// Decrypt and validate a sealed package on a device.
    Unseal(UnsealArgs),
    /// Serve a directory of sealed packages.
    Serve(ServeArgs),
    /// Fetch a sealed package from a server.
    Fetch(FetchArgs),
    /// Measurement harness.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Subcommand)]
enum DeviceCommand {
    /// Synthesize a device model file from a seed.
    New {
        #[arg(long, value_parser = parse_u64)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the device's derived 256-bit key as 64 hex characters.
    ///
    /// This is the provisioning handoff: the sealing side receives only
    /// this derived key, never the raw PUF bits.
    Key {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        challenges: PathBuf,
        #[arg(long, default_value = "")]
        context: String,
    },
}

#[derive(Args)]
struct SealArgs {
    /// Input code image (flat binary, or an ELF object with --elf).
    #[arg(long = "in")]
    input: PathBuf,
    /// Treat the input as an ELF object and seal its .text section.
    #[arg(long)]
    elf: bool,
    /// ISA tag for flat inputs (`rv32` or `rv64`); ELF inputs carry their own.
    #[arg(long, default_value = "rv64")]
    isa: String,
    /// Target device key, 64 hex characters from `device key`.
    #[arg(long)]
    key: String,
    /// Encryption policy file.
    #[arg(long)]
    policy: PathBuf,
    /// Routing hint stored in the package header.
    #[arg(long, value_parser = parse_u64)]
    device_id: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UnsealArgs {
    /// Sealed package file.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    challenges: PathBuf,
    #[arg(long, default_value = "")]
    context: String,
    /// Where to write the validated image.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address, host:port.
    #[arg(long)]
    addr: String,
    /// Directory of .eric files.
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args)]
struct FetchArgs {
    /// Server address, host:port.
    #[arg(long)]
    addr: String,
    #[arg(long, value_parser = parse_u64)]
    device_id: u64,
    #[arg(long)]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Shannon entropy of a file, bits per byte.
    Entropy {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Package size overhead against the original code image.
    Overhead {
        #[arg(long)]
        code: PathBuf,
        #[arg(long)]
        pkg: PathBuf,
    },
    /// Single-bit-flip sweep: flip random package bits, count rejections.
    Tamper {
        #[arg(long)]
        pkg: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        challenges: PathBuf,
        #[arg(long, default_value = "")]
        context: String,
        #[arg(long, default_value_t = 10_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Seal/unseal throughput for a code image on a benchmark device.
    Throughput {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        iterations: u32,
    },
}

/// Accepts decimal or 0x-prefixed hex.
fn parse_u64(text: &str) -> Result<u64, String> {
    let parsed = match text.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => text.parse(),
    };
    parsed.map_err(|_| format!("`{text}` is not a 64-bit unsigned integer"))
}

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
}

impl From<eric_core::puf::PufError> for Failure {
    fn from(e: eric_core::puf::PufError) -> Self {
        Failure::new(EXIT_FORMAT, e.to_string())
    }
}

impl From<eric_core::keys::KeyError> for Failure {
    fn from(e: eric_core::keys::KeyError) -> Self {
        Failure::new(EXIT_FORMAT, e.to_string())
    }
}

impl From<eric_core::package::PackageError> for Failure {
    fn from(e: eric_core::package::PackageError) -> Self {
        Failure::new(EXIT_FORMAT, e.to_string())
    }
}

impl From<SealError> for Failure {
    fn from(e: SealError) -> Self {
        let code = match &e {
            SealError::PolicyViolation(_) | SealError::IndexOutOfRange { .. } => EXIT_USAGE,
            SealError::Decode(_) | SealError::Package(_) | SealError::ImageTooLarge(_) => {
                EXIT_FORMAT
            }
        };
        Failure::new(code, e.to_string())
    }
}

impl From<eric_core::seal::PolicyError> for Failure {
    fn from(e: eric_core::seal::PolicyError) -> Self {
        Failure::new(EXIT_USAGE, e.to_string())
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        Failure::new(EXIT_NET, e.to_string())
    }
}

impl From<AnalysisError> for Failure {
    fn from(e: AnalysisError) -> Self {
        let code = match e {
            AnalysisError::BaselineRejected => EXIT_REJECTED,
            AnalysisError::EmptyInput => EXIT_FORMAT,
        };
        Failure::new(code, e.to_string())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes)
        .map_err(|e| Failure::new(EXIT_IO, format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<DeviceModel, Failure> {
    Ok(DeviceModel::from_bytes(&read_file(path)?)?)
}

fn load_challenges(path: &Path) -> Result<ChallengeSet, Failure> {
    Ok(ChallengeSet::from_text(&read_text(path)?)?)
}

fn parse_isa(text: &str) -> Result<Isa, Failure> {
    match text {
        "rv32" => Ok(Isa::Rv32),
        "rv64" => Ok(Isa::Rv64),
        other => Err(Failure::new(
            EXIT_USAGE,
            format!("unknown ISA `{other}` (expected rv32 or rv64)"),
        )),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Device(DeviceCommand::New { seed, out }) => {
            let model = DeviceModel::synthesize(seed);
            write_file(&out, &model.to_bytes())
        }
        Command::Device(DeviceCommand::Key {
            model,
            challenges,
            context,
        }) => {
            let model = load_model(&model)?;
            let challenges = load_challenges(&challenges)?;
            let key = PufBasedKey::derive(&model.generate_key(&challenges), context.as_bytes());
            println!("{}", key.to_hex());
            Ok(())
        }
        Command::Seal(args) => {
            let input = read_file(&args.input)?;
            let source = if args.elf {
                CodeSource::Elf
            } else {
                CodeSource::Flat(parse_isa(&args.isa)?)
            };
            let (code, isa) = extract_code(&input, source)?;
            let key = PufBasedKey::from_hex(&args.key)?;
            let policy = EncryptionPolicy::from_policy_text(&read_text(&args.policy)?)?;
            let pkg = seal(&code, &key, &policy, isa, args.device_id)?;
            write_file(&args.out, &pkg.serialize()?)
        }
        Command::Unseal(args) => {
            let pkg = read_file(&args.input)?;
            let model = load_model(&args.model)?;
            let challenges = load_challenges(&args.challenges)?;
            match unseal(&pkg, &model, &challenges, args.context.as_bytes()) {
                ValidationOutcome::Accepted(image) => write_file(&args.out, image.code()),
                ValidationOutcome::Rejected(reason) => {
                    Err(Failure::new(EXIT_REJECTED, format!("rejected: {reason}")))
                }
            }
        }
        Command::Serve(args) => {
            let server = serve(&args.addr, PackageStore::new(&args.store))?;
            eprintln!("listening on {}", server.local_addr());
            // Serve until the process is killed.
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        Command::Fetch(args) => {
            let bytes = fetch(&args.addr, args.device_id, &args.name)?;
            write_file(&args.out, &bytes)
        }
        Command::Analyze(AnalyzeCommand::Entropy { input }) => {
            let bytes = read_file(&input)?;
            let h = entropy(&bytes)?;
            print!("bytes={}\nentropy={h:.6}\n", bytes.len());
            Ok(())
        }
        Command::Analyze(AnalyzeCommand::Overhead { code, pkg }) => {
            let code_len = read_file(&code)?.len();
            let pkg = SealedPackage::parse(&read_file(&pkg)?)?;
            print!("{}", overhead_report(code_len, &pkg)?.render());
            Ok(())
        }
        Command::Analyze(AnalyzeCommand::Tamper {
            pkg,
            model,
            challenges,
            context,
            trials,
            seed,
        }) => {
            let pkg = read_file(&pkg)?;
            let model = load_model(&model)?;
            let challenges = load_challenges(&challenges)?;
            let report = tamper_sweep(&pkg, trials, seed, &model, &challenges, context.as_bytes())?;
            print!("{}", report.render());
            Ok(())
        }
        Command::Analyze(AnalyzeCommand::Throughput { input, iterations }) => {
            let code = read_file(&input)?;
            let report = measure_throughput(&code, &EncryptionPolicy::full(), iterations)?;
            print!("{}", report.render());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("eric: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
