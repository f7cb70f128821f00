//! `qemb`: seeded experiment runner for dithered quantized embeddings.
//!
//! Exit codes: 0 success, 1 validation error, 2 failed self-test.

mod config;
mod output;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use qemb::embeddings::{deserialize, embed, embed_bidither, estimate_distance, serialize};
use qemb::modelsets::Proposition;
use qemb::quantizer::sample_dither;
use qemb::rng::stream;
use qemb::verify::{self, QripConfig, QripFit};
use qemb::{BuildOptions, DistanceMode, Family, Layout, LinOp, ModelSet, QuantConfig, RipProfile};

#[derive(Parser)]
#[command(name = "qemb", version, about = "Dithered quantized embeddings: encode, compare, and measure distortion")]
#[command(after_help = "Any subcommand accepts --config FILE with key=value lines; command-line flags win.")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode each vector of a text file into a code file.
    Embed(EmbedArgs),
    /// Estimate the distance between two code files.
    Distance(DistanceArgs),
    /// Empirical RIP constant of an operator over a model set.
    Riptest(RipArgs),
    /// Quantized distortion sweep over a distance grid.
    Qrip(QripArgs),
    /// Decay of the additive distortion across several m.
    Decay(DecayArgs),
    /// Monte Carlo Gaussian mean width of a model set.
    Meanwidth(MeanWidthArgs),
    /// Covering entropy bound of a model set.
    Entropy(EntropyArgs),
    /// Embedding dimension needed for a distortion level.
    Reqm(ReqmArgs),
    /// Run every identity check at reduced size.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct OpArgs {
    /// gaussian, bernoulli, subsampled_hadamard, random_convolution, expander or rop.
    #[arg(long, default_value = "gaussian")]
    family: Family,
    /// Operator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Left degree of expander operators.
    #[arg(long, default_value_t = 8)]
    degree: usize,
    /// RIP profile as `p,q`; defaults to the family's natural one.
    #[arg(long, value_parser = parse_profile)]
    profile: Option<RipProfile>,
    /// Matrix shape `n1xn2` for rop operators.
    #[arg(long, value_parser = parse_shape)]
    rop_shape: Option<(usize, usize)>,
}

#[derive(Args)]
struct ModelArgs {
    /// sparse:s:n, group_sparse:s:l:n, low_rank:r:n1:n2, lrjs:r:s:n1:n2 or ball:n.
    #[arg(long)]
    model: ModelSet,
    /// Radius of the model set.
    #[arg(long)]
    radius: Option<f64>,
    /// Norm exponent measuring model distances.
    #[arg(long)]
    q: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Single,
    Bidither,
}

#[derive(Args)]
struct EmbedArgs {
    /// Text file, one whitespace-separated vector per line.
    #[arg(long)]
    input: PathBuf,
    /// Code file; with several input vectors, `name.k.ext` per vector.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    delta: f64,
    #[arg(long, value_enum, default_value = "single")]
    layout: LayoutArg,
    /// Dither seed; defaults to the operator seed.
    #[arg(long)]
    dither_seed: Option<u64>,
    #[command(flatten)]
    op: OpArgs,
}

#[derive(Args)]
struct DistanceArgs {
    a: PathBuf,
    b: PathBuf,
    /// l1, l2sq or circ; defaults to l1 for single codes and circ for bi-dithered ones.
    #[arg(long)]
    mode: Option<DistanceMode>,
}

#[derive(Args)]
struct RipArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pairs: usize,
    /// CSV of per-pair normalized values.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    op: OpArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    delta: f64,
    #[arg(long, default_value = "l1")]
    mode: DistanceMode,
    /// Comma-separated distances between pair members.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.2,1,5,10")]
    grid: Vec<f64>,
    /// Read grid values as multiples of delta.
    #[arg(long)]
    grid_in_delta: bool,
    #[arg(long, default_value_t = 20)]
    pairs: usize,
    #[arg(long, default_value_t = 10)]
    dithers: usize,
    /// Seed for pairs and dithers; defaults to the operator seed.
    #[arg(long)]
    trial_seed: Option<u64>,
    /// Per-record CSV.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-distance summary CSV; printed to stdout when absent.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct QripArgs {
    #[arg(long)]
    m: usize,
    #[command(flatten)]
    sweep: SweepArgs,
    #[command(flatten)]
    op: OpArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct DecayArgs {
    /// Comma-separated embedding dimensions, at least four.
    #[arg(long, value_delimiter = ',', required = true)]
    m_list: Vec<usize>,
    #[command(flatten)]
    sweep: SweepArgs,
    #[command(flatten)]
    op: OpArgs,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct MeanWidthArgs {
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EntropyArgs {
    /// Covering radius.
    #[arg(long)]
    eta: f64,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct ReqmArgs {
    /// p1 (l1 estimator), p2 (l2sq) or p3 (bi-dithered).
    #[arg(long)]
    prop: Proposition,
    #[arg(long)]
    model: ModelSet,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    eps: f64,
    #[arg(long)]
    delta: f64,
    /// Multiplier in front of the entropy term.
    #[arg(long = "C", visible_alias = "c", default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 2.0)]
    q: f64,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report to this file.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_profile(s: &str) -> Result<RipProfile, String> {
    let (p, q) = s.split_once(',').ok_or_else(|| format!("expected `p,q`, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok(RipProfile { p: num(p)?, q: num(q)? })
}

fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or_else(|| format!("expected `n1xn2`, got `{s}`"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((num(a)?, num(b)?))
}

struct Failure {
    code: u8,
    message: String,
}

type Outcome = Result<(), Failure>;

/// Wraps an error with the flag or input it came from.
fn at<E: Display>(key: &str) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure { code: 1, message: format!("{key}: {e}") }
}

fn fail(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    ExitCode::from(run(args))
}

fn run(mut args: Vec<String>) -> u8 {
    match prepare(&mut args).and_then(|()| dispatch(args)) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn prepare(args: &mut Vec<String>) -> Outcome {
    if let Ok(v) = std::env::var("QEMB_THREADS") {
        let threads: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&t| t >= 1)
            .ok_or_else(|| fail(format!("QEMB_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().map_err(at("QEMB_THREADS"))?;
    }
    if let Some(path) = config::take_config_flag(args).map_err(fail)? {
        let text = std::fs::read_to_string(&path).map_err(at(&format!("--config {path}")))?;
        let entries = config::parse(&text, Path::new(&path)).map_err(fail)?;
        config::merge(args, &entries, &Cli::command()).map_err(fail)?;
    }
    Ok(())
}

fn dispatch(args: Vec<String>) -> Result<u8, Failure> {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(0);
        }
        Err(e) => {
            // clap's message already names the offending flag
            eprint!("{e}");
            return Ok(1);
        }
    };
    match cli.command {
        Cmd::Embed(a) => cmd_embed(a).map(|()| 0),
        Cmd::Distance(a) => cmd_distance(a).map(|()| 0),
        Cmd::Riptest(a) => cmd_riptest(a).map(|()| 0),
        Cmd::Qrip(a) => cmd_qrip(a).map(|()| 0),
        Cmd::Decay(a) => cmd_decay(a).map(|()| 0),
        Cmd::Meanwidth(a) => cmd_meanwidth(a).map(|()| 0),
        Cmd::Entropy(a) => cmd_entropy(a).map(|()| 0),
        Cmd::Reqm(a) => cmd_reqm(a).map(|()| 0),
        Cmd::Selftest(a) => cmd_selftest(a),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    output::write_atomic(path, bytes).map_err(|e| fail(format!("cannot write {}: {e}", path.display())))
}

fn resolve_model(m: &ModelArgs) -> Result<ModelSet, Failure> {
    let mut set = m.model.clone();
    if let Some(r) = m.radius {
        set = set.with_radius(r).map_err(at("--radius"))?;
    }
    if let Some(q) = m.q {
        set = set.with_q(q).map_err(at("--q"))?;
    }
    Ok(set)
}

/// Gaussian operators can be normalized for either `p`; pick the one the
/// estimator needs unless `--profile` says otherwise.
fn build_options(op: &OpArgs, want_p: Option<f64>, q: f64, shape: Option<(usize, usize)>) -> BuildOptions {
    let mut opts = BuildOptions::default().with_degree(op.degree);
    opts.profile = op.profile.or(match (op.family, want_p) {
        (Family::Gaussian, Some(p)) => Some(RipProfile { p, q }),
        _ => None,
    });
    opts.rop_shape = op.rop_shape.or(shape);
    opts
}

fn build_op(op: &OpArgs, m: usize, n: usize, opts: &BuildOptions) -> Result<LinOp, Failure> {
    LinOp::build(op.family, m, n, op.seed, opts).map_err(at("operator"))
}

fn profile_text(p: RipProfile) -> String {
    format!("{},{}", p.p, p.q)
}

fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>, Failure> {
    let text = std::fs::read_to_string(path).map_err(at(&format!("--input {}", path.display())))?;
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(fail(format!("--input {}:{}: `{tok}` is not a finite number", path.display(), no + 1))),
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(fail(format!(
                    "--input {}:{}: vector has {} entries, earlier ones have {first}",
                    path.display(),
                    no + 1,
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(fail(format!("--input {}: no vectors found", path.display())));
    }
    Ok(rows)
}

fn cmd_embed(a: EmbedArgs) -> Outcome {
    let vectors = read_vectors(&a.input)?;
    let cfg = QuantConfig::new(a.delta).map_err(at("--delta"))?;
    let n = vectors[0].len();
    let op = build_op(&a.op, a.m, n, &build_options(&a.op, None, 2.0, None))?;
    let dither_seed = a.dither_seed.unwrap_or(a.op.seed);
    let mut rng = stream(dither_seed, "dither", &[]);
    let paths: Vec<PathBuf> = if vectors.len() == 1 {
        vec![a.output.clone()]
    } else {
        (0..vectors.len()).map(|k| output::indexed_path(&a.output, k)).collect()
    };
    let blocks = match a.layout {
        LayoutArg::Single => {
            let xi = sample_dither(a.m, &cfg, &mut rng).map_err(at("--m"))?;
            vectors.iter().map(|x| embed(&op, x, &xi, &cfg)).collect::<qemb::Result<Vec<_>>>()
        }
        LayoutArg::Bidither => {
            let flat = sample_dither(2 * a.m, &cfg, &mut rng).map_err(at("--m"))?;
            let xi: Vec<[f64; 2]> = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
            vectors.iter().map(|x| embed_bidither(&op, x, &xi, &cfg)).collect()
        }
    }
    .map_err(at("embed"))?;
    for (block, path) in blocks.into_iter().zip(&paths) {
        let bytes = serialize(&block.with_seeds(a.op.seed, dither_seed)).map_err(at("embed"))?;
        write_file(path, &bytes)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn read_codes(path: &Path) -> Result<qemb::CodeBlock, Failure> {
    let bytes = std::fs::read(path).map_err(at(&path.display().to_string()))?;
    deserialize(&bytes).map_err(at(&path.display().to_string()))
}

fn cmd_distance(a: DistanceArgs) -> Outcome {
    let (x, y) = (read_codes(&a.a)?, read_codes(&a.b)?);
    if (x.op_seed(), x.dither_seed()) != (y.op_seed(), y.dither_seed()) {
        return Err(fail(format!(
            "codes come from different draws: operator/dither seeds {}/{} vs {}/{}",
            x.op_seed(),
            x.dither_seed(),
            y.op_seed(),
            y.dither_seed()
        )));
    }
    let mode = a.mode.unwrap_or(match x.layout() {
        Layout::Single => DistanceMode::L1,
        Layout::Bidither => DistanceMode::Circ,
    });
    let d = estimate_distance(&x, &y, mode).map_err(at("--mode"))?;
    println!("{d}");
    Ok(())
}

fn cmd_riptest(a: RipArgs) -> Outcome {
    let set = resolve_model(&a.model)?;
    let opts = build_options(&a.op, a.p, set.q(), set.matrix_shape());
    let op = build_op(&a.op, a.m, set.dim(), &opts)?;
    let p = a.p.unwrap_or(op.profile().p);
    let est = verify::estimate_rip(&op, &set, p, set.q(), a.pairs, a.op.seed).map_err(at("riptest"))?;
    if let Some(path) = &a.output {
        let mut text = output::header(
            "riptest",
            &[
                ("family", op.family().to_string()),
                ("m", a.m.to_string()),
                ("n", set.dim().to_string()),
                ("model", set.to_string()),
                ("radius", output::num(set.radius())),
                ("q", set.q().to_string()),
                ("profile", profile_text(op.profile())),
                ("pairs", a.pairs.to_string()),
                ("seed", a.op.seed.to_string()),
                ("eps_hat", output::num(est.eps_hat)),
            ],
        );
        text.push_str("pair_id,value\n");
        for (j, v) in est.values.iter().enumerate() {
            text.push_str(&format!("{j},{}\n", output::num(*v)));
        }
        write_file(path, text.as_bytes())?;
    }
    println!("eps_hat={}", est.eps_hat);
    Ok(())
}

struct Sweep {
    set: ModelSet,
    cfg: QuantConfig,
    qc: QripConfig,
    opts: BuildOptions,
}

fn prepare_sweep(s: &SweepArgs, op: &OpArgs, model: &ModelArgs) -> Result<Sweep, Failure> {
    let set = resolve_model(model)?;
    let cfg = QuantConfig::new(s.delta).map_err(at("--delta"))?;
    let scale = if s.grid_in_delta { s.delta } else { 1.0 };
    let grid: Vec<f64> = s.grid.iter().map(|g| g * scale).collect();
    if let Some(bad) = grid.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
        return Err(fail(format!("--grid: distances must be positive, got {bad}")));
    }
    if s.pairs == 0 || s.dithers == 0 {
        return Err(fail("--pairs and --dithers must be at least 1"));
    }
    let qc = QripConfig {
        mode: s.mode,
        grid,
        pairs_per_distance: s.pairs,
        dithers_per_pair: s.dithers,
        seed: s.trial_seed.unwrap_or(op.seed),
    };
    let opts = build_options(op, Some(verify::mode_power(s.mode)), set.q(), set.matrix_shape());
    Ok(Sweep { set, cfg, qc, opts })
}

fn sweep_config(op: &OpArgs, sw: &Sweep, profile: RipProfile, ms: &str) -> Vec<(&'static str, String)> {
    let grid: Vec<String> = sw.qc.grid.iter().map(|&g| output::num(g)).collect();
    vec![
        ("family", op.family.to_string()),
        ("m", ms.to_string()),
        ("n", sw.set.dim().to_string()),
        ("model", sw.set.to_string()),
        ("radius", output::num(sw.set.radius())),
        ("q", sw.set.q().to_string()),
        ("profile", profile_text(profile)),
        ("degree", op.degree.to_string()),
        ("delta", output::num(sw.cfg.delta())),
        ("mode", sw.qc.mode.to_string()),
        ("grid", grid.join(",")),
        ("pairs", sw.qc.pairs_per_distance.to_string()),
        ("dithers", sw.qc.dithers_per_pair.to_string()),
        ("seed", op.seed.to_string()),
        ("trial_seed", sw.qc.seed.to_string()),
    ]
}

fn emit_sweep(
    s: &SweepArgs,
    preamble: &str,
    records: &[verify::DistortionRecord],
    fits: &[QripFit],
) -> Outcome {
    if let Some(path) = &s.output {
        write_file(path, output::records_csv(preamble, records).as_bytes())?;
    }
    let summary = output::summary_csv(preamble, fits);
    match &s.summary {
        Some(path) => write_file(path, summary.as_bytes()),
        None => {
            print!("{summary}");
            Ok(())
        }
    }
}

fn cmd_qrip(a: QripArgs) -> Outcome {
    let sw = prepare_sweep(&a.sweep, &a.op, &a.model)?;
    let op = build_op(&a.op, a.m, sw.set.dim(), &sw.opts)?;
    let (records, fit) = verify::measure_qrip(&op, &sw.set, &sw.cfg, &sw.qc).map_err(at("qrip"))?;
    let preamble = output::header("qrip", &sweep_config(&a.op, &sw, op.profile(), &a.m.to_string()));
    emit_sweep(&a.sweep, &preamble, &records, &[fit])
}

fn cmd_decay(a: DecayArgs) -> Outcome {
    let mut ms = a.m_list.clone();
    ms.sort_unstable();
    ms.dedup();
    if ms.len() < 4 {
        return Err(fail(format!("--m-list: need at least 4 distinct values, got {}", ms.len())));
    }
    let sw = prepare_sweep(&a.sweep, &a.op, &a.model)?;
    let mut records = Vec::new();
    let mut fits = Vec::new();
    let mut profile = None;
    for &m in &ms {
        let op = build_op(&a.op, m, sw.set.dim(), &sw.opts)?;
        profile = Some(op.profile());
        let (r, f) = verify::measure_qrip(&op, &sw.set, &sw.cfg, &sw.qc).map_err(at("decay"))?;
        records.extend(r);
        fits.push(f);
    }
    let slope = verify::fit_decay_runs(&mut fits).map_err(at("decay"))?;
    records.sort_by_key(|r| (r.m, r.pair_id, r.trial_id));
    let m_text: Vec<String> = ms.iter().map(usize::to_string).collect();
    let mut config = sweep_config(&a.op, &sw, profile.expect("m-list is non-empty"), &m_text.join(","));
    config.push(("decay_slope", output::num(slope)));
    let preamble = output::header("decay", &config);
    if let Some(path) = &a.sweep.output {
        write_file(path, output::records_csv(&preamble, &records).as_bytes())?;
    }
    if let Some(path) = &a.sweep.summary {
        write_file(path, output::summary_csv(&preamble, &fits).as_bytes())?;
    }
    println!("decay_slope={slope}");
    Ok(())
}

fn cmd_meanwidth(a: MeanWidthArgs) -> Outcome {
    let set = resolve_model(&a.model)?;
    let (mean, stderr) = set.mean_width_mc(a.trials, a.seed).map_err(at("meanwidth"))?;
    println!("mean_width={mean} stderr={stderr}");
    Ok(())
}

fn cmd_entropy(a: EntropyArgs) -> Outcome {
    let set = resolve_model(&a.model)?;
    let h = set.entropy_bound(a.eta, set.q()).map_err(at("--eta"))?;
    println!("{h}");
    Ok(())
}

fn cmd_reqm(a: ReqmArgs) -> Outcome {
    let mut set = a.model.clone();
    if let Some(r) = a.radius {
        set = set.with_radius(r).map_err(at("--radius"))?;
    }
    let cfg = QuantConfig::new(a.delta).map_err(at("--delta"))?;
    let m = set.required_m(a.prop, a.eps, &cfg, a.c, a.q).map_err(at("reqm"))?;
    println!("{m}");
    Ok(())
}

fn cmd_selftest(a: SelftestArgs) -> Result<u8, Failure> {
    let lines = verify::selftest(a.seed).map_err(at("selftest"))?;
    let mut report = String::new();
    for l in &lines {
        report.push_str(&format!("{} {} {}\n", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail));
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    report.push_str(&format!("{} of {} checks passed\n", lines.len() - failed, lines.len()));
    if let Some(path) = &a.output {
        write_file(path, report.as_bytes())?;
    }
    print!("{report}");
    Ok(if failed == 0 { 0 } else { 2 })
}
