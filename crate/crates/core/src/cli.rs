//! Command-line interface. `main.rs` only parses arguments and maps the outcome of
//! [`run`] to an exit code: 0 on success, 1 on computation failure, 2 on usage error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{emit_report, Report};
use crate::operators::{MergeKind, MergeOperator};
use crate::pivot::{decompose_all, merge_task_vectors, pivot_merge, PivotConfig};
use crate::scores::{read_feature_scores, read_scores, write_scores, ScoreTable, DEFAULT_BETA};
use crate::synth::{expert_id, generate, SynthSpec};
use crate::tensorstore::{load_checkpoint, save_checkpoint, write_container, ProjectorCheckpoint};
use crate::Error;

const BASELINE_TRIM: f64 = 0.2;
const PIVOT_TRIM: f64 = 1.0;

#[derive(Debug, Parser)]
#[command(
    name = "pivotmerge",
    version,
    about = "Training-free merging of projector checkpoints"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Merge expert checkpoints into one.
    Merge(MergeArgs),
    /// Write similarity, principal-angle or layer-weight reports.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic base, experts and planted cores.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Average,
    TaskArithmetic,
    Ties,
    DareTies,
    Pivot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Inner {
    Average,
    TaskArithmetic,
    Ties,
    DareTies,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    ResidualSim,
    PrincipalAngles,
    LayerWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Subspace {
    Raw,
    Filtered,
    Both,
}

fn positive_int(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        Ok(_) => Err("must be at least 1".into()),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_real(s: &str) -> Result<f64, String> {
    let v: f64 = s
        .parse()
        .map_err(|e: std::num::ParseFloatError| e.to_string())?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err("must be finite".into())
    }
}

fn positive_real(s: &str) -> Result<f64, String> {
    let v = parse_real(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err("must be positive".into())
    }
}

fn non_negative_real(s: &str) -> Result<f64, String> {
    let v = parse_real(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err("must be non-negative".into())
    }
}

fn unit_closed(s: &str) -> Result<f64, String> {
    let v = parse_real(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err("must lie in [0, 1]".into())
    }
}

fn unit_left_open(s: &str) -> Result<f64, String> {
    let v = parse_real(s)?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err("must lie in (0, 1]".into())
    }
}

fn unit_right_open(s: &str) -> Result<f64, String> {
    let v = parse_real(s)?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err("must lie in [0, 1)".into())
    }
}

/// Layer shapes as `(d_out, d_in)` pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dims(pub Vec<(usize, usize)>);

fn parse_dims(s: &str) -> Result<Dims, String> {
    s.split(',')
        .map(|pair| {
            let (o, i) = pair
                .trim()
                .split_once('x')
                .ok_or_else(|| format!("expected OUTxIN, got `{pair}`"))?;
            let o = positive_int(o.trim())?;
            let i = positive_int(i.trim())?;
            Ok((o, i))
        })
        .collect::<Result<_, String>>()
        .map(Dims)
}

/// Inputs and pipeline parameters shared by `merge` and `analyze`.
#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Shared initialization checkpoint.
    #[arg(long)]
    pub base: PathBuf,
    /// Expert checkpoint; repeat for each expert. The id is the file stem.
    #[arg(long = "expert", required = true)]
    pub experts: Vec<PathBuf>,
    /// Alignment scores JSON.
    #[arg(long, conflicts_with = "features")]
    pub scores: Option<PathBuf>,
    /// Container of projected features and text embeddings to score from.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Core rank.
    #[arg(long, default_value_t = 64, value_parser = positive_int)]
    pub rank: usize,
    /// Mask sharpness.
    #[arg(long, default_value_t = 20.0, value_parser = positive_real)]
    pub gamma: f64,
    /// Retention ratio.
    #[arg(long, default_value_t = 0.5, value_parser = unit_closed)]
    pub rho: f64,
    /// Softmax temperature [default: the score file's, else 0.05].
    #[arg(long, value_parser = positive_real)]
    pub beta: Option<f64>,
    /// TIES keep fraction [default: 0.2 for baselines, 1.0 inside pivot].
    #[arg(long, value_parser = unit_left_open)]
    pub trim: Option<f64>,
    /// Task arithmetic scale.
    #[arg(long, default_value_t = 1.0, value_parser = non_negative_real)]
    pub lambda: f64,
    /// DARE drop rate.
    #[arg(long, default_value_t = 0.1, value_parser = unit_right_open)]
    pub drop: f64,
    /// DARE seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Operator applied inside pivot.
    #[arg(long, value_enum, default_value_t = Inner::Ties)]
    pub inner: Inner,
}

#[derive(Debug, Clone, Args)]
pub struct MergeArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[command(flatten)]
    pub input: InputArgs,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Write per-layer diagnostics JSON (pivot only).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[command(flatten)]
    pub input: InputArgs,
    /// Which subspaces to compare in principal-angles mode.
    #[arg(long, value_enum, default_value_t = Subspace::Both)]
    pub subspace: Subspace,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Layer shapes as OUTxIN, comma separated.
    #[arg(long, default_value = "32x16,24x32", value_parser = parse_dims)]
    pub dims: Dims,
    #[arg(long, default_value_t = 5, value_parser = positive_int)]
    pub experts: usize,
    #[arg(long, default_value_t = 4, value_parser = positive_int)]
    pub core_rank: usize,
    #[arg(long, default_value_t = 0.5, value_parser = non_negative_real)]
    pub residual_scale: f64,
    #[arg(long, default_value_t = 0.0, value_parser = unit_closed)]
    pub shared_fraction: f64,
    #[arg(long, default_value_t = 0.01, value_parser = non_negative_real)]
    pub noise_scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Omit bias vectors.
    #[arg(long)]
    pub no_bias: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Compute(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Compute(Error::InvalidArgument(_)) => 2,
            CliError::Compute(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Merge(args) => cmd_merge(&args),
        Command::Analyze(args) => cmd_analyze(&args),
        Command::Synth(args) => cmd_synth(&args),
    }
}

/// Loads every checkpoint and orders the experts by id.
pub fn load_inputs(
    input: &InputArgs,
) -> CliResult<(ProjectorCheckpoint, Vec<ProjectorCheckpoint>)> {
    let base = load_checkpoint(&input.base)?;
    let mut experts = input
        .experts
        .iter()
        .map(load_checkpoint)
        .collect::<crate::Result<Vec<_>>>()?;
    experts.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(pair) = experts.windows(2).find(|p| p[0].id == p[1].id) {
        return Err(CliError::Usage(format!(
            "--expert: two files share the id `{}`",
            pair[0].id
        )));
    }
    Ok((base, experts))
}

/// Reads `--scores` or `--features`, if given.
pub fn load_score_table(input: &InputArgs) -> CliResult<Option<ScoreTable>> {
    let beta = input.beta.unwrap_or(DEFAULT_BETA);
    match (&input.scores, &input.features) {
        (Some(p), _) => {
            let mut table = read_scores(p)?;
            if let Some(b) = input.beta {
                table.beta = b;
            }
            Ok(Some(table))
        }
        (None, Some(p)) => Ok(Some(read_feature_scores(p, beta)?)),
        (None, None) => Ok(None),
    }
}

fn operator(inner: Inner, input: &InputArgs, default_trim: f64) -> MergeOperator {
    let trim_fraction = input.trim.unwrap_or(default_trim);
    MergeOperator::new(match inner {
        Inner::Average => MergeKind::WeightAverage,
        Inner::TaskArithmetic => MergeKind::TaskArithmetic {
            lambda: input.lambda,
        },
        Inner::Ties => MergeKind::Ties { trim_fraction },
        Inner::DareTies => MergeKind::DareTies {
            trim_fraction,
            drop_rate: input.drop,
            seed: input.seed,
        },
    })
}

/// Pivot configuration from the flags; `beta` falls back to the score table's.
pub fn pivot_config(input: &InputArgs, scores: Option<&ScoreTable>) -> PivotConfig {
    PivotConfig {
        rank: input.rank,
        gamma: input.gamma,
        rho: input.rho,
        beta: input
            .beta
            .or(scores.map(|s| s.beta))
            .unwrap_or(DEFAULT_BETA),
        inner: operator(input.inner, input, PIVOT_TRIM),
        magnitude_space: None,
    }
}

fn require_scores(table: Option<ScoreTable>, what: &str) -> CliResult<ScoreTable> {
    table.ok_or_else(|| CliError::Usage(format!("--scores (or --features) is required for {what}")))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

pub fn cmd_merge(args: &MergeArgs) -> CliResult<()> {
    let input = &args.input;
    let (base, experts) = load_inputs(input)?;
    let merged = if args.method == Method::Pivot {
        let scores = require_scores(load_score_table(input)?, "--method pivot")?;
        let config = pivot_config(input, Some(&scores));
        let (merged, diagnostics) = pivot_merge(&experts, &base, &scores, &config)?;
        if let Some(path) = &args.diagnostics {
            write_text(path, &diagnostics.to_json()?)?;
        }
        merged
    } else {
        if args.diagnostics.is_some() {
            log::warn!("--diagnostics is only produced by --method pivot");
        }
        let inner = match args.method {
            Method::Average => Inner::Average,
            Method::TaskArithmetic => Inner::TaskArithmetic,
            Method::Ties => Inner::Ties,
            Method::DareTies | Method::Pivot => Inner::DareTies,
        };
        merge_task_vectors(&experts, &base, &operator(inner, input, BASELINE_TRIM))?
    };
    save_checkpoint(&args.out, &merged)?;
    log::info!("wrote {}", args.out.display());
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<()> {
    let input = &args.input;
    let (base, experts) = load_inputs(input)?;
    let scores = load_score_table(input)?;
    let ids: Vec<String> = experts.iter().map(|e| e.id.clone()).collect();
    let mut report = Report::new(ids.clone());
    match args.mode {
        Mode::LayerWeights => {
            let table = require_scores(scores, "--mode layer-weights")?;
            let table = ScoreTable {
                beta: input.beta.unwrap_or(table.beta),
                ..table
            };
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            report.add_layer_weights(&table.layer_weights_for(&refs)?);
        }
        Mode::ResidualSim | Mode::PrincipalAngles => {
            if experts.len() < 2 {
                return Err(CliError::Usage(
                    "--expert: analysis needs at least two experts".into(),
                ));
            }
            let config = pivot_config(input, scores.as_ref());
            let states = decompose_all(&experts, &base, &config)?;
            report.add_filter_stats(&states);
            if args.mode == Mode::ResidualSim {
                report.add_residual_similarity(&states)?;
            } else {
                let raw = args.subspace != Subspace::Filtered;
                let filtered = args.subspace != Subspace::Raw;
                report.add_principal_angles(&states, raw, filtered)?;
            }
        }
    }
    emit_report(&report, &args.out)?;
    Ok(())
}

impl From<&SynthArgs> for SynthSpec {
    fn from(a: &SynthArgs) -> Self {
        SynthSpec {
            dims: a.dims.0.clone(),
            experts: a.experts,
            core_rank: a.core_rank,
            residual_scale: a.residual_scale,
            shared_residual_fraction: a.shared_fraction,
            noise_scale: a.noise_scale,
            bias: !a.no_bias,
            seed: a.seed,
        }
    }
}

/// Writes `base.ckpt`, `expert_XX.ckpt`, `ground_truth.ckpt`, `spec.json` and a
/// uniform `scores.json` into `out`.
pub fn write_synth(spec: &SynthSpec, out: &Path) -> crate::Result<()> {
    let data = generate(spec)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_checkpoint(out.join("base.ckpt"), &data.base)?;
    for e in &data.experts {
        save_checkpoint(out.join(format!("{}.ckpt", e.id)), e)?;
    }
    write_container(out.join("ground_truth.ckpt"), &data.truth.to_tensors())?;
    let spec_path = out.join("spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)?)
        .map_err(|e| Error::io(&spec_path, e))?;
    let ids = (0..spec.experts).map(expert_id).collect();
    write_scores(
        out.join("scores.json"),
        &ScoreTable::uniform(ids, spec.dims.len(), DEFAULT_BETA)?,
    )
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let spec = SynthSpec::from(args);
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    write_synth(&spec, &args.out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("pivotmerge").chain(args.iter().copied()))
    }

    #[test]
    fn rho_out_of_range_names_the_flag() {
        let err = parse(&[
            "merge", "--method", "pivot", "--base", "b", "--expert", "e", "--out", "o", "--rho",
            "1.5",
        ])
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("--rho"), "{err}");
    }

    #[test]
    fn pivot_defaults() {
        let cli = parse(&[
            "merge", "--method", "pivot", "--base", "b", "--expert", "e", "--out", "o",
        ])
        .unwrap();
        let Command::Merge(m) = cli.command else {
            panic!()
        };
        let c = pivot_config(&m.input, None);
        assert_eq!((c.rank, c.gamma, c.rho, c.beta), (64, 20.0, 0.5, 0.05));
        assert_eq!(c.inner.kind, MergeKind::Ties { trim_fraction: 1.0 });
        assert!(c.uses_magnitude_space());
    }

    #[test]
    fn beta_falls_back_to_score_file() {
        let cli = parse(&[
            "analyze",
            "--mode",
            "layer-weights",
            "--base",
            "b",
            "--expert",
            "e",
            "--out",
            "o",
        ])
        .unwrap();
        let Command::Analyze(a) = cli.command else {
            panic!()
        };
        let table = ScoreTable::uniform(vec!["e".into()], 1, 0.3).unwrap();
        assert_eq!(pivot_config(&a.input, Some(&table)).beta, 0.3);
    }

    #[test]
    fn baseline_trim_default() {
        let cli = parse(&[
            "merge", "--method", "ties", "--base", "b", "--expert", "e", "--out", "o",
        ])
        .unwrap();
        let Command::Merge(m) = cli.command else {
            panic!()
        };
        let op = operator(Inner::Ties, &m.input, BASELINE_TRIM);
        assert_eq!(op.kind, MergeKind::Ties { trim_fraction: 0.2 });
    }

    #[test]
    fn command_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn synth_flags_map_to_spec() {
        let cli = parse(&[
            "synth",
            "--out",
            "d",
            "--dims",
            "8x4",
            "--experts",
            "1",
            "--no-bias",
            "--seed",
            "7",
        ])
        .unwrap();
        let Command::Synth(a) = cli.command else {
            panic!()
        };
        let spec = SynthSpec::from(&a);
        assert_eq!(spec.dims, vec![(8, 4)]);
        assert_eq!((spec.experts, spec.bias, spec.seed), (1, false, 7));
        let cli = parse(&["synth", "--out", "d"]).unwrap();
        let Command::Synth(a) = cli.command else {
            panic!()
        };
        assert_eq!(SynthSpec::from(&a).dims, SynthSpec::default().dims);
    }

    #[test]
    fn dims_parse() {
        assert_eq!(
            parse_dims("32x16, 24x32").unwrap(),
            Dims(vec![(32, 16), (24, 32)])
        );
        assert!(parse_dims("32").is_err());
        assert!(parse_dims("0x3").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for (flag, value) in [
            ("--gamma", "0"),
            ("--trim", "0"),
            ("--drop", "1"),
            ("--rank", "0"),
            ("--beta", "-1"),
        ] {
            let arg = format!("{flag}={value}");
            let err = parse(&[
                "merge", "--method", "ties", "--base", "b", "--expert", "e", "--out", "o", &arg,
            ])
            .unwrap_err();
            assert!(err.to_string().contains(flag), "{flag}: {err}");
        }
    }

    #[test]
    fn missing_expert_is_usage_error() {
        let err = parse(&["merge", "--method", "ties", "--base", "b", "--out", "o"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
