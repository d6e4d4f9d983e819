//! Command line: `generate`, `train`, `eval` and `inspect`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use multicolumn_core::data::{
    assemble_templates, generate_synthetic, template_set, Corpus, Split, SplitSide,
    SyntheticConfig, Template, QUALITY_ABERRANT,
};
use multicolumn_core::evaluation::{
    build_pairs, far_label, roc, score_pairs, EvalReport, PairProtocol, RocCurve, FAR_TARGETS,
};
use multicolumn_core::numerics::{mean, spearman};
use multicolumn_core::training::{train, Checkpoint, TrainConfig};
use multicolumn_core::{aggregate, Executor, FaceSet, GateParams, Mode};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::checkpoint_file::{read_checkpoint, write_checkpoint};
use crate::corpus_file::{manifest_path, read_corpus, read_manifest, write_corpus, write_manifest};
use crate::error::{Error, Result};
use crate::parallel::Pool;
use crate::report::{emit_report, ReportJson};

#[derive(Debug, Parser)]
#[command(
    name = "multicolumn",
    version,
    about = "Quality-gated set aggregation for face templates"
)]
pub struct Cli {
    /// Worker threads [default: all cores]. Results do not depend on it.
    #[arg(long, global = true, env = "MN_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus and its identity split manifest
    Generate(GenerateArgs),
    /// Train gates and classifier on the training identities
    Train(TrainArgs),
    /// Verification TAR@FAR on the test identities
    Eval(EvalArgs),
    /// Per-member gate values of one template
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output corpus file; the manifest goes next to it with a .json extension
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub identities: u32,
    #[arg(long, default_value_t = 20)]
    pub sets_per_identity: u32,
    #[arg(long, default_value_t = 2)]
    pub set_size_min: u32,
    #[arg(long, default_value_t = 8)]
    pub set_size_max: u32,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Norm of every identity prototype
    #[arg(long, default_value_t = 1.0)]
    pub prototype_norm: f64,
    /// Weight of the direction shared by all prototypes
    #[arg(long, default_value_t = 1.0)]
    pub shared_component: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise_clean: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_aberrant: f64,
    /// Probability that a member is aberrant
    #[arg(long, default_value_t = 0.3)]
    pub aberrant_fraction: f64,
    /// Rank of the shared pose subspace
    #[arg(long, default_value_t = 4)]
    pub subspace_rank: usize,
    /// Probability that a clean member carries a pose offset
    #[arg(long, default_value_t = 0.2)]
    pub pose_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub pose_strength: f64,
    /// Share of identities assigned to training
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Print the summary as JSON
    #[arg(long)]
    pub json: bool,
}

impl GenerateArgs {
    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            num_identities: self.identities,
            sets_per_identity: self.sets_per_identity,
            set_size_min: self.set_size_min,
            set_size_max: self.set_size_max,
            dim: self.dim,
            prototype_norm: self.prototype_norm,
            shared_component: self.shared_component,
            noise_sigma_clean: self.noise_clean,
            noise_sigma_aberrant: self.noise_aberrant,
            aberrant_fraction: self.aberrant_fraction,
            content_subspace_rank: self.subspace_rank,
            pose_fraction: self.pose_fraction,
            pose_strength: self.pose_strength,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMode {
    #[value(name = "mn-v")]
    MnV,
    #[value(name = "mn-vc")]
    MnVc,
}

impl From<TrainMode> for Mode {
    fn from(m: TrainMode) -> Mode {
        match m {
            TrainMode::MnV => Mode::MnV,
            TrainMode::MnVc => Mode::MnVc,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(short, long)]
    pub corpus: PathBuf,
    /// Split manifest [default: corpus path with a .json extension]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = TrainMode::MnVc)]
    pub mode: TrainMode,
    #[arg(long, default_value_t = 60)]
    pub epochs: u32,
    #[arg(long, default_value_t = 3)]
    pub set_size: usize,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Divisor applied to the learning rate on a plateau
    #[arg(long, default_value_t = 10.0)]
    pub lr_decay: f64,
    /// Epochs without improvement before a decay
    #[arg(long, default_value_t = 3)]
    pub patience: u32,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train gates without bias terms
    #[arg(long)]
    pub no_gate_bias: bool,
}

impl TrainArgs {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: self.mode.into(),
            set_size: self.set_size,
            batch_size: self.batch_size,
            lr_initial: self.lr,
            lr_decay_factor: self.lr_decay,
            plateau_patience: self.patience,
            max_epochs: self.epochs,
            weight_decay: self.weight_decay,
            seed: self.seed,
            gate_bias: !self.no_gate_bias,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairsArg {
    All,
    Sampled,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(short, long)]
    pub corpus: PathBuf,
    /// Split manifest [default: corpus path with a .json extension]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Trained checkpoint; repeat to supply one per learned mode
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "avg,mn-v,mn-vc", value_parser = parse_mode)]
    pub modes: Vec<Mode>,
    /// Write PREFIX.<mode>.json and PREFIX.<mode>.csv
    #[arg(long, value_name = "PREFIX")]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PairsArg::All)]
    pub pairs: PairsArg,
    /// Impostor pairs drawn per genuine pair with --pairs sampled
    #[arg(long, default_value_t = 10)]
    pub impostors_per_genuine: usize,
    #[arg(long, default_value_t = 0)]
    pub pair_seed: u64,
    /// Print the table as JSON
    #[arg(long)]
    pub json: bool,
}

impl EvalArgs {
    pub fn protocol(&self) -> PairProtocol {
        match self.pairs {
            PairsArg::All => PairProtocol::AllPairs,
            PairsArg::Sampled => PairProtocol::Sampled {
                impostors_per_genuine: self.impostors_per_genuine,
                seed: self.pair_seed,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(short, long)]
    pub corpus: PathBuf,
    /// Trained checkpoint; not needed for --mode avg
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// [default: the checkpoint's mode, or avg without one]
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long, conflicts_with = "media", required_unless_present_any = ["media", "correlation"])]
    pub template: Option<u32>,
    /// Comma-separated media ids forming an ad hoc set
    #[arg(long, value_delimiter = ',')]
    pub media: Vec<u32>,
    /// Mean Spearman correlation of alpha with quality over the test split
    #[arg(long)]
    pub correlation: bool,
    /// Split manifest for --correlation [default: corpus path with a .json extension]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse()
        .map_err(|e: multicolumn_core::Error| e.to_string())
}

/// Parse `args` (program name first), run, and return the exit code.
/// Diagnostics go to `err`, results to `out`.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{}", text.ansi());
            }
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let threads = match cli.threads {
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = Pool::new(threads)?;
    match cli.command {
        Command::Generate(a) => cmd_generate(&a, out),
        Command::Train(a) => cmd_train(&a, &pool, out),
        Command::Eval(a) => cmd_eval(&a, &pool, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    }
}

fn stdout_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn print_json(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("console values serialize");
    writeln!(out, "{text}").map_err(stdout_err)
}

/// Any invalid generator setting is a usage error.
fn usage_on_config(e: multicolumn_core::Error) -> Error {
    match e {
        multicolumn_core::Error::Config(msg) => Error::Usage(msg),
        other => other.into(),
    }
}

#[derive(Debug, Serialize)]
struct GenerateSummary {
    identities: usize,
    templates: usize,
    records: usize,
    aberrant_fraction: f64,
    train_identities: usize,
    test_identities: usize,
}

pub fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let config = a.synthetic_config();
    config.validate().map_err(usage_on_config)?;
    let corpus = generate_synthetic(&config)?;
    let ids: Vec<u32> = corpus.identities().collect();
    let split = Split::random(&ids, a.train_fraction, a.seed).map_err(usage_on_config)?;
    write_corpus(&corpus, &a.output)?;
    write_manifest(&split, &manifest_path(&a.output))?;

    let aberrant = corpus
        .records()
        .iter()
        .filter(|r| r.quality_truth == Some(QUALITY_ABERRANT))
        .count();
    let summary = GenerateSummary {
        identities: corpus.num_identities(),
        templates: corpus.num_templates(),
        records: corpus.len(),
        aberrant_fraction: aberrant as f64 / corpus.len() as f64,
        train_identities: split.train_identities.len(),
        test_identities: split.test_identities.len(),
    };
    if a.json {
        return print_json(out, &summary);
    }
    writeln!(
        out,
        "identities {}\ntemplates {}\nrecords {}\naberrant fraction {:.4}\nsplit {} train / {} test",
        summary.identities,
        summary.templates,
        summary.records,
        summary.aberrant_fraction,
        summary.train_identities,
        summary.test_identities
    )
    .map_err(stdout_err)
}

fn load_split(corpus_path: &Path, manifest: Option<&Path>) -> Result<Split> {
    let path = manifest.map_or_else(|| manifest_path(corpus_path), Path::to_path_buf);
    read_manifest(&path)
}

pub fn cmd_train(a: &TrainArgs, exec: &impl Executor, out: &mut dyn Write) -> Result<()> {
    let config = a.train_config();
    let corpus = read_corpus(&a.corpus)?;
    let split = load_split(&a.corpus, a.manifest.as_deref())?;
    split.check_disjoint()?;
    let mut io_result = Ok(());
    let trained = train(&corpus, &split.train_identities, &config, exec, |s| {
        if io_result.is_ok() {
            io_result = writeln!(out, "{},{},{}", s.epoch, s.loss, s.lr);
        }
    });
    io_result.map_err(stdout_err)?;
    let checkpoint = trained?;
    write_checkpoint(&checkpoint, &a.output)
}

/// Hash identifying one evaluation: mode, the checkpoint it used and the
/// pair protocol.
pub fn eval_config_hash(
    mode: Mode,
    checkpoint_hash: Option<&[u8; 32]>,
    protocol: PairProtocol,
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"mn-eval-config/1");
    h.update([mode.code()]);
    h.update(checkpoint_hash.unwrap_or(&[0; 32]));
    match protocol {
        PairProtocol::AllPairs => h.update([0u8]),
        PairProtocol::Sampled {
            impostors_per_genuine,
            seed,
        } => {
            h.update([1u8]);
            h.update((impostors_per_genuine as u64).to_le_bytes());
            h.update(seed.to_le_bytes());
        }
    }
    h.finalize().into()
}

/// Score the test split under one mode and build its report.
pub fn evaluate_mode(
    templates: &[Template],
    mode: Mode,
    checkpoint: Option<&Checkpoint>,
    protocol: PairProtocol,
    exec: &impl Executor,
) -> Result<(EvalReport, RocCurve)> {
    let params = match (mode, checkpoint) {
        (Mode::Avg, _) => GateParams::zeros(templates.first().map_or(1, |t| t.set.dim()), 0, false),
        (_, Some(ck)) => ck.params.clone(),
        (_, None) => return Err(Error::Usage(format!("mode {mode} needs a checkpoint"))),
    };
    let pairs = build_pairs(templates, protocol)?;
    let scores = score_pairs(&pairs, templates, &params, mode, exec)?;
    let curve = roc(&scores.genuine, &scores.impostor)?;
    let hash = eval_config_hash(mode, checkpoint.map(|c| &c.config_hash), protocol);
    Ok((
        EvalReport::from_curve(mode, &curve, scores.excluded, hash),
        curve,
    ))
}

/// Load checkpoints and pick the one trained for each requested mode.
fn checkpoints_for(modes: &[Mode], paths: &[PathBuf]) -> Result<Vec<Option<Checkpoint>>> {
    let loaded: Vec<Checkpoint> = paths
        .iter()
        .map(|p| read_checkpoint(p))
        .collect::<Result<_>>()?;
    modes
        .iter()
        .map(|&mode| {
            if mode == Mode::Avg {
                return Ok(None);
            }
            loaded
                .iter()
                .find(|c| c.mode == mode)
                .cloned()
                .map(Some)
                .ok_or_else(|| Error::Usage(format!("no --checkpoint trained for mode {mode}")))
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs, exec: &impl Executor, out: &mut dyn Write) -> Result<()> {
    let mut modes = a.modes.clone();
    modes.sort_by_key(|m| m.code());
    modes.dedup();
    let checkpoints = checkpoints_for(&modes, &a.checkpoint)?;
    let corpus = read_corpus(&a.corpus)?;
    let split = load_split(&a.corpus, a.manifest.as_deref())?;
    split.check_disjoint()?;
    let templates = assemble_templates(&corpus, &split, SplitSide::Test)?;

    let results = modes
        .iter()
        .zip(&checkpoints)
        .map(|(&mode, ck)| evaluate_mode(&templates, mode, ck.as_ref(), a.protocol(), exec))
        .collect::<Result<Vec<_>>>()?;
    if let Some(prefix) = &a.report {
        emit_report(&results, prefix)?;
    }

    if a.json {
        let rows: Vec<ReportJson> = results.iter().map(|(r, _)| ReportJson::from(r)).collect();
        return print_json(out, &rows);
    }
    write_table(out, &results).map_err(stdout_err)
}

fn write_table(out: &mut dyn Write, results: &[(EvalReport, RocCurve)]) -> std::io::Result<()> {
    write!(out, "{:<7}", "mode")?;
    for far in FAR_TARGETS {
        write!(out, " {:>20}", format!("TAR@{}", far_label(far)))?;
    }
    writeln!(out)?;
    for (r, _) in results {
        write!(out, "{:<7}", r.mode.as_str())?;
        for (_, l) in &r.tar_at_far {
            let cell = format!("{}{}", l.tar, if l.flagged { "*" } else { "" });
            write!(out, " {cell:>20}")?;
        }
        writeln!(out)?;
    }
    let (first, _) = &results[0];
    writeln!(
        out,
        "pairs: {} genuine, {} impostor, {} excluded",
        first.n_genuine, first.n_impostor, first.excluded_pairs
    )?;
    if results
        .iter()
        .any(|(r, _)| r.tar_at_far.iter().any(|(_, l)| l.flagged))
    {
        writeln!(out, "* fewer impostor pairs than 1/FAR")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct MemberRow {
    media_id: u32,
    alpha: f64,
    beta: f64,
    gamma: f64,
    quality_truth: Option<f32>,
}

#[derive(Debug, Serialize)]
struct Inspection {
    mode: String,
    template_id: Option<u32>,
    identity: u32,
    members: Vec<MemberRow>,
}

fn find_template(corpus: &Corpus, template_id: u32) -> Option<(u32, &[usize])> {
    corpus.identities().find_map(|id| {
        corpus
            .templates_of(id)
            .and_then(|t| t.get(&template_id))
            .map(|r| (id, r.as_slice()))
    })
}

fn records_for_media(corpus: &Corpus, media: &[u32]) -> Result<Vec<usize>> {
    media
        .iter()
        .map(|&m| {
            corpus
                .records()
                .iter()
                .position(|r| r.media_id == m)
                .ok_or_else(|| Error::Usage(format!("unknown media id {m}")))
        })
        .collect()
}

/// Mean Spearman correlation between alpha and ground-truth quality over
/// every test template where both vary. `None` if no template qualifies.
pub fn quality_correlation(
    templates: &[Template],
    corpus: &Corpus,
    params: &GateParams,
    mode: Mode,
) -> Result<Option<f64>> {
    let mut rhos = Vec::new();
    for t in templates {
        let quality: Option<Vec<f64>> = t
            .records
            .iter()
            .map(|&i| corpus.records()[i].quality_truth.map(f64::from))
            .collect();
        let Some(quality) = quality else { continue };
        let alpha = aggregate(&t.set, params, mode)?.alpha;
        if let Some(rho) = spearman(&alpha, &quality) {
            rhos.push(rho);
        }
    }
    Ok((!rhos.is_empty()).then(|| mean(&rhos)))
}

pub fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    let checkpoint = a.checkpoint.as_deref().map(read_checkpoint).transpose()?;
    let mode = a
        .mode
        .or(checkpoint.as_ref().map(|c| c.mode))
        .unwrap_or(Mode::Avg);
    let corpus = read_corpus(&a.corpus)?;
    let params = match (&checkpoint, mode) {
        (_, Mode::Avg) => GateParams::zeros(corpus.dim(), 0, false),
        (Some(c), _) => c.params.clone(),
        (None, _) => return Err(Error::Usage(format!("mode {mode} needs a checkpoint"))),
    };

    if a.correlation {
        let split = load_split(&a.corpus, a.manifest.as_deref())?;
        let templates = assemble_templates(&corpus, &split, SplitSide::Test)?;
        let rho = quality_correlation(&templates, &corpus, &params, mode)?;
        if a.json {
            return print_json(
                out,
                &serde_json::json!({ "mode": mode.as_str(), "mean_spearman": rho }),
            );
        }
        return match rho {
            Some(r) => writeln!(out, "mean spearman(alpha, quality) {r}"),
            None => writeln!(out, "mean spearman(alpha, quality) undefined"),
        }
        .map_err(stdout_err);
    }

    let (identity, records) = match a.template {
        Some(tid) => {
            let (id, r) = find_template(&corpus, tid)
                .ok_or_else(|| Error::Usage(format!("unknown template {tid}")))?;
            (id, r.to_vec())
        }
        None => {
            let r = records_for_media(&corpus, &a.media)?;
            (corpus.records()[r[0]].identity_id, r)
        }
    };
    let set: FaceSet = template_set(&corpus, identity, &records)?;
    let agg = aggregate(&set, &params, mode)?;
    let mut rows: Vec<MemberRow> = records
        .iter()
        .enumerate()
        .map(|(k, &i)| MemberRow {
            media_id: corpus.records()[i].media_id,
            alpha: agg.alpha[k],
            beta: agg.beta[k],
            gamma: agg.gamma[k],
            quality_truth: corpus.records()[i].quality_truth,
        })
        .collect();
    rows.sort_by(|x, y| y.gamma.total_cmp(&x.gamma));

    if a.json {
        return print_json(
            out,
            &Inspection {
                mode: mode.as_str().into(),
                template_id: a.template,
                identity,
                members: rows,
            },
        );
    }
    let mut w = || -> std::io::Result<()> {
        writeln!(out, "media_id\talpha\tbeta\tgamma\tquality_truth")?;
        for r in &rows {
            let q = r
                .quality_truth
                .map_or_else(|| "-".to_string(), |q| q.to_string());
            writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{q}",
                r.media_id, r.alpha, r.beta, r.gamma
            )?;
        }
        Ok(())
    };
    w().map_err(stdout_err)
}
