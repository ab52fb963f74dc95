//! `mudlab`: command-line front end for the detection library.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;
use sha2::{Digest, Sha256};

use mud_core::channel::{real_part, sample_active_set, synthesize_received};
use mud_core::cmud::{cmud_detect, estimate_user_count, CoherenceThresholds, DetectionResult};
use mud_core::codebook::{
    generate_code_matrix, read_real_matrix, save_code_matrix, structured_code_matrix, write_real_matrix, CodeMatrix,
};
use mud_core::decoder::{
    coherence, design_decoder_mmse_for, design_decoder_optimal, scaled_code_decoder, MmseDesigner,
};
use mud_core::harness::{
    audit_error_bound, design_inputs, emit_figure_data, run_sweep, sweep_moments, with_threads, write_figure_csv,
    write_records_csv, write_timings_csv, Algorithm, ExperimentConfig, FigureId, M0Policy,
};
use mud_core::lambda_stats::moments_with_draws;
use mud_core::seed::{child_seed, label, rng_from_seed};
use mud_core::sparse_tls::{lasso_detect_real, lp_tls_detect_real, LassoOutcome, TlsOutcome};
use mud_core::MudError;

#[derive(Parser)]
#[command(name = "mudlab", version, about = "Multiuser code detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a code bank.
    Codes(CodesArgs),
    /// λ statistics for a channel.
    LambdaStats(LambdaArgs),
    /// Design a CMUD decoder matrix.
    DesignDecoder(DesignArgs),
    /// Run one detector on a received vector.
    Detect(DetectArgs),
    /// Monte Carlo sweep over the configured user counts.
    Sweep(RunArgs),
    /// Data for one of the predefined figure panels.
    Figure(FigureArgs),
    /// Empirical check of the CMUD error bound.
    Audit(RunArgs),
}

#[derive(Args)]
struct CodesArgs {
    #[arg(short = 'L', long = "length")]
    l: usize,
    #[arg(short = 'K', long = "codes")]
    k: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Hadamard columns plus quadratic-modulated copies instead of random codes.
    #[arg(long)]
    structured: bool,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct LambdaArgs {
    #[arg(long, default_value_t = 1.0)]
    sigma_h: f64,
    #[arg(long)]
    sigma_e: f64,
    #[arg(long)]
    sigma_eta: f64,
    #[arg(long, default_value_t = 5.0)]
    theta_deg: f64,
    #[arg(long, default_value_t = 0.95)]
    varrho: f64,
    #[arg(long, default_value_t = 1_000_000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Experiment config plus command-line overrides.
#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `trials`.
    #[arg(long)]
    trials: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, MudError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        if let Some(trials) = self.trials {
            cfg.trials = trials;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DecoderChoice {
    Scaled,
    D1,
    D2,
}

#[derive(Args)]
struct DesignArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum)]
    kind: DecoderChoice,
    /// Design user count; defaults to the first entry of `M_list`.
    #[arg(long = "m0")]
    m0: Option<usize>,
    /// Output decoder matrix.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    algorithm: Algorithm,
    /// Received vector as an `L x 2` matrix of real and imaginary parts.
    #[arg(long, conflicts_with = "simulate")]
    received: Option<PathBuf>,
    /// Simulate a received vector with this many users instead.
    #[arg(long)]
    simulate: Option<usize>,
    /// Decoder matrix for CMUD; designed from the config when absent.
    #[arg(long)]
    decoder: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct FigureArgs {
    #[command(flatten)]
    run: RunArgs,
    /// One of 1, 2a, 2b, 3a, 3b, 4a, 4b.
    #[arg(long)]
    figure: FigureId,
    /// Comma-separated user counts replacing the figure's default axis.
    #[arg(long, value_delimiter = ',')]
    m_list: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_sha256: String,
    master_seed: u64,
    threads: Option<usize>,
    outputs: Vec<OutputFile>,
}

#[derive(Serialize)]
struct OutputFile {
    name: String,
    sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `files` plus `config.toml` and `manifest.json` into `dir`.
fn write_outputs(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    threads: Option<usize>,
    files: Vec<(&str, Vec<u8>)>,
) -> Result<(), MudError> {
    fs::create_dir_all(dir)?;
    let config_text = cfg.to_toml();
    let mut outputs = Vec::new();
    for (name, bytes) in files
        .into_iter()
        .chain([("config.toml", config_text.clone().into_bytes())])
    {
        fs::write(dir.join(name), &bytes)?;
        outputs.push(OutputFile {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        tool: "mudlab",
        version: env!("CARGO_PKG_VERSION"),
        command,
        config_sha256: sha256_hex(config_text.as_bytes()),
        master_seed: cfg.master_seed,
        threads,
        outputs,
    };
    fs::write(dir.join("manifest.json"), to_json(&manifest))?;
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize to JSON");
    s.push('\n');
    s
}

fn run_pooled<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, MudError> {
    match threads {
        Some(n) => with_threads(n, f),
        None => Ok(f()),
    }
}

fn codes_cmd(args: &CodesArgs) -> Result<(), MudError> {
    let codes = if args.structured {
        structured_code_matrix(args.l, args.k)?
    } else {
        generate_code_matrix(args.l, args.k, args.seed)?
    };
    save_code_matrix(&codes, &args.out)
}

fn lambda_cmd(args: &LambdaArgs) -> Result<(), MudError> {
    let params =
        mud_core::channel::ChannelParams::from_std(args.sigma_h, args.sigma_e, args.sigma_eta, args.theta_deg, 0.0);
    let m = moments_with_draws(&params, args.varrho, args.draws, &mut rng_from_seed(args.seed))?;
    print!("{}", to_json(&m));
    Ok(())
}

#[derive(Serialize)]
struct DesignReport {
    kind: &'static str,
    m0: usize,
    design_iterations: Option<usize>,
    design_converged: bool,
    thresholds: CoherenceThresholds,
}

fn design_decoder(
    cfg: &ExperimentConfig,
    codes: &CodeMatrix,
    kind: DecoderChoice,
    m0: usize,
) -> Result<(DMatrix<f64>, DesignReport), MudError> {
    let moments = sweep_moments(cfg)?;
    let sigma_noise_sq = cfg.channel.params().sigma_noise_sq;
    let inputs = design_inputs(cfg, &moments, m0);
    let (matrix, name, iterations, converged) = match kind {
        DecoderChoice::Scaled => (scaled_code_decoder(codes).matrix, "scaled", None, true),
        DecoderChoice::D2 => (
            design_decoder_mmse_for(&MmseDesigner::new(codes), inputs)?.matrix,
            "d2",
            None,
            true,
        ),
        DecoderChoice::D1 => match design_decoder_optimal(codes, inputs, &cfg.cmud.solver) {
            Ok((d, rep)) => (d.matrix, "d1", Some(rep.iterations), true),
            Err(MudError::NotConverged {
                iterations,
                last_iterate,
                ..
            }) => (*last_iterate, "d1", Some(iterations), false),
            Err(e) => return Err(e),
        },
    };
    let thresholds = CoherenceThresholds::from_coherence(
        coherence(&matrix, codes)?,
        moments.mu_r,
        moments.sigma_r_sq,
        sigma_noise_sq,
        m0,
        cfg.cmud.nu,
        cfg.k,
    )?;
    Ok((
        matrix,
        DesignReport {
            kind: name,
            m0,
            design_iterations: iterations,
            design_converged: converged,
            thresholds,
        },
    ))
}

fn design_cmd(args: &DesignArgs) -> Result<(), MudError> {
    let cfg = args.config.load()?;
    let codes = cfg.codes.build(cfg.l, cfg.k)?;
    let m0 = args.m0.unwrap_or(cfg.m_list[0]).max(1);
    let (matrix, report) = design_decoder(&cfg, &codes, args.kind, m0)?;
    write_real_matrix(&matrix, &args.out)?;
    print!("{}", to_json(&report));
    Ok(())
}

#[derive(Serialize)]
#[serde(untagged)]
enum DetectOutcome {
    Cmud(DetectionResult),
    Lasso(LassoOutcome),
    Tls(TlsOutcome),
}

#[derive(Serialize)]
struct DetectReport {
    algorithm: Algorithm,
    support: Vec<usize>,
    /// Known only for simulated input.
    truth: Option<Vec<usize>>,
    outcome: DetectOutcome,
}

fn read_received(path: &Path, l: usize) -> Result<Vec<Complex64>, MudError> {
    let m = read_real_matrix(path)?;
    if m.shape() != (l, 2) {
        return Err(MudError::Dimension(format!(
            "{} is {}x{}, expected {l}x2 (real and imaginary parts)",
            path.display(),
            m.nrows(),
            m.ncols()
        )));
    }
    Ok((0..l).map(|i| Complex64::new(m[(i, 0)], m[(i, 1)])).collect())
}

fn detect_cmd(args: &DetectArgs) -> Result<(), MudError> {
    let cfg = args.config.load()?;
    let codes = cfg.codes.build(cfg.l, cfg.k)?;
    let params = cfg.channel.params();
    let (y, truth) = match (&args.received, args.simulate) {
        (Some(path), _) => (read_received(path, cfg.l)?, None),
        (None, Some(m)) => {
            let mut rng = rng_from_seed(child_seed(cfg.master_seed, &[label("detect"), m as u64]));
            let active = sample_active_set(cfg.k, m, &mut rng)?;
            let (y, _, _) = synthesize_received(&codes, &active, &params, &mut rng)?;
            (y, Some(active.indices().to_vec()))
        }
        (None, None) => {
            return Err(MudError::Format("give either --received or --simulate".into()));
        }
    };
    let moments = sweep_moments(&cfg)?;
    let nominal_m = cfg.m_list[0];
    let y_r = real_part(&y);
    let (support, outcome) = match args.algorithm {
        Algorithm::Lasso => {
            let xi = cfg
                .lasso
                .xi
                .resolve(cfg.k, nominal_m, moments.sigma_r_sq, params.sigma_noise_sq);
            let out = lasso_detect_real(codes.matrix(), &y_r, xi, &cfg.lasso.options())?;
            (out.support.clone(), DetectOutcome::Lasso(out))
        }
        Algorithm::Tls => {
            let xi = cfg
                .tls
                .xi
                .resolve(cfg.k, nominal_m, moments.sigma_r_sq, params.sigma_noise_sq);
            let out = lp_tls_detect_real(&codes, &y_r, &cfg.tls.solver_config(xi))?;
            (out.support.clone(), DetectOutcome::Tls(out))
        }
        cmud => {
            let m0 = match cfg.cmud.m0_policy {
                M0Policy::Fixed => cfg.cmud.m0.unwrap_or(1),
                M0Policy::True if truth.is_some() => truth.as_ref().map_or(1, Vec::len).max(1),
                _ => estimate_user_count(&y, &moments, params.sigma_noise_sq, cfg.k)?.max(1),
            };
            let decoder = match &args.decoder {
                Some(path) => read_real_matrix(path)?,
                None => {
                    let kind = match cmud {
                        Algorithm::CmudScaled => DecoderChoice::Scaled,
                        Algorithm::CmudD1 => DecoderChoice::D1,
                        _ => DecoderChoice::D2,
                    };
                    design_decoder(&cfg, &codes, kind, nominal_m.max(1))?.0
                }
            };
            let th = CoherenceThresholds::from_coherence(
                coherence(&decoder, &codes)?,
                moments.mu_r,
                moments.sigma_r_sq,
                params.sigma_noise_sq,
                m0,
                cfg.cmud.nu,
                cfg.k,
            )?;
            let out = cmud_detect(&codes, &decoder, &y, &th, cfg.cmud.kappa_policy)?;
            (out.detected.clone(), DetectOutcome::Cmud(out))
        }
    };
    print!(
        "{}",
        to_json(&DetectReport {
            algorithm: args.algorithm,
            support,
            truth,
            outcome,
        })
    );
    Ok(())
}

fn sweep_cmd(args: &RunArgs) -> Result<(), MudError> {
    let cfg = args.config.load()?;
    let out = run_pooled(args.threads, || run_sweep(&cfg))??;
    let mut records = Vec::new();
    write_records_csv(&out.records, &mut records)?;
    let mut timings = Vec::new();
    write_timings_csv(&out.records, &mut timings)?;
    write_outputs(
        &args.out,
        "sweep",
        &cfg,
        args.threads,
        vec![
            ("records.csv", records),
            ("timings.csv", timings),
            ("summary.json", to_json(&out.summary).into_bytes()),
        ],
    )?;
    for p in &out.summary.points {
        println!(
            "{:<12} M={:<3} P_e={:.4} [{:.4}, {:.4}]",
            p.algorithm, p.m, p.p_e, p.ci_low, p.ci_high
        );
    }
    Ok(())
}

fn figure_cmd(args: &FigureArgs) -> Result<(), MudError> {
    let cfg = args.run.config.load()?;
    let rows = run_pooled(args.run.threads, || {
        emit_figure_data(&cfg, args.figure, args.m_list.as_deref())
    })??;
    let mut csv = Vec::new();
    write_figure_csv(&rows, &mut csv)?;
    let name = format!("figure_{}.csv", args.figure);
    write_outputs(
        &args.run.out,
        "figure",
        &cfg,
        args.run.threads,
        vec![(name.as_str(), csv)],
    )
}

fn audit_cmd(args: &RunArgs) -> Result<(), MudError> {
    let cfg = args.config.load()?;
    let report = run_pooled(args.threads, || audit_error_bound(&cfg))??;
    write_outputs(
        &args.out,
        "audit",
        &cfg,
        args.threads,
        vec![("audit.json", to_json(&report).into_bytes())],
    )?;
    for e in &report.entries {
        println!(
            "{:<12} M={:<3} {:?} P_e={:.4} bound={:.3e} sigma={:.3} violations={}",
            e.algorithm, e.m, e.status, e.p_e, e.bound, e.sigma_frequency, e.bound_violations
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Codes(a) => codes_cmd(a),
        Command::LambdaStats(a) => lambda_cmd(a),
        Command::DesignDecoder(a) => design_cmd(a),
        Command::Detect(a) => detect_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Figure(a) => figure_cmd(a),
        Command::Audit(a) => audit_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
