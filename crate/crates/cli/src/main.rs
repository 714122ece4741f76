//! `markmatch` command-line front end.
//!
//! Exit status: 0 success, 2 argument errors, 3 data/parse errors,
//! 4 no mark found at the prompt.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use markmatch_core::retrieval::Pool;
use markmatch_core::rng::{derive_seed, Rng};
use markmatch_core::segmentation::{segment, SegmentOptions};
use markmatch_core::synth::{generate_dataset_sized, read_dataset, render_ballot, sample_writer, write_dataset, Annotation};
use markmatch_core::trainer::{evaluate_writers, holdout_split, train, Objective, TrainConfig};
use markmatch_core::{EncoderParams, Error, GrayImage, LossConfig, MarkImage, SegmentPrompt};
use markmatch_service::{cors_layer, router, serve_blocking, AppState, ServiceConfig, DEFAULT_ALLOW_ORIGIN};

#[derive(Parser)]
#[command(name = "markmatch", version, about = "Same-hand ballot mark retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic per-writer mark dataset.
    Synth(SynthArgs),
    /// Train an encoder on a dataset directory.
    Train(TrainArgs),
    /// Print the embedding of one mark image.
    Embed(EmbedArgs),
    /// Add a mark to a pool and print its alias.
    Enroll(EnrollArgs),
    /// Rank pool marks against a query mark.
    Query(QueryArgs),
    /// Write the pool-by-query softmax matrix as CSV.
    Heatmap(HeatmapArgs),
    /// Pair-F1 and top-1/top-5 retrieval accuracy on a dataset.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    writers: usize,
    #[arg(long)]
    marks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Mark image side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Also render this many full ballot pages (ballot_NNN.pgm plus ballots.txt).
    #[arg(long, default_value_t = 0)]
    ballots: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train the pairwise-BCE baseline instead of the contrastive objective.
    #[arg(long)]
    baseline: bool,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Leave the last N writers out of training.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
}

#[derive(Args)]
struct ModelArg {
    #[arg(long, env = "MARKMATCH_MODEL")]
    model: PathBuf,
}

#[derive(Args)]
struct PoolArg {
    #[arg(long, env = "MARKMATCH_POOL")]
    pool: PathBuf,
}

#[derive(Args)]
struct MarkArgs {
    /// PGM image: an encoder-sized mark crop, or a page together with --prompt.
    #[arg(long)]
    image: PathBuf,
    /// `point:x,y` or `box:x0,y0,x1,y1`.
    #[arg(long)]
    prompt: Option<String>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    mark: MarkArgs,
}

#[derive(Args)]
struct EnrollArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    pool: PoolArg,
    #[arg(long)]
    ballot: String,
    #[command(flatten)]
    mark: MarkArgs,
    /// Mark index within the ballot; defaults to the number already enrolled.
    #[arg(long = "mark")]
    mark_index: Option<usize>,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    pool: PoolArg,
    #[command(flatten)]
    mark: MarkArgs,
    #[arg(short, default_value_t = 5)]
    k: usize,
    /// Print CSV (full precision) instead of an aligned table.
    #[arg(long)]
    csv: bool,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    pool: PoolArg,
    /// Directory of query PGM crops; each file stem labels a column.
    #[arg(long)]
    queries: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate only the last N writers (0 = all).
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    /// Seed for drawing evaluation pairs.
    #[arg(long, default_value_t = 9)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    pool: PoolArg,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Allowed CORS origin; repeatable, `*` for any.
    #[arg(long = "allow-origin", default_value = DEFAULT_ALLOW_ORIGIN)]
    allow_origin: Vec<String>,
}

enum CliError {
    Usage(String),
    Data(String),
    NoMark,
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::NoMark => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
            CliError::NoMark => f.write_str("no-mark-found: no ink at the prompt"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => CliError::Usage(m),
            Error::NoMarkFound => CliError::NoMark,
            other => CliError::Data(other.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn with_path<T>(path: &Path, r: markmatch_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn load_model(arg: &ModelArg) -> CliResult<EncoderParams> {
    with_path(&arg.model, EncoderParams::load(&arg.model))
}

fn load_pool(path: &Path, dim: usize) -> CliResult<Pool> {
    let pool = if path.exists() {
        with_path(path, Pool::load(path))?
    } else {
        Pool::new(dim)
    };
    if pool.dim() != dim {
        return Err(CliError::Data(format!(
            "{}: pool dim {} does not match model dim {dim}",
            path.display(),
            pool.dim()
        )));
    }
    Ok(pool)
}

/// Reads a mark: segmented with `prompt` when given, used as-is when it is
/// already encoder-sized, otherwise all ink on the page is cropped.
fn load_mark(args: &MarkArgs, size: usize, ballot: &str) -> CliResult<MarkImage> {
    let image = with_path(&args.image, GrayImage::read_pgm(&args.image))?;
    let stem = args
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let prompt = match &args.prompt {
        Some(p) => SegmentPrompt::parse(p)?,
        None if image.width() == size && image.height() == size => return Ok(MarkImage::new(image, stem, ballot)),
        None => SegmentPrompt::Box {
            x0: 0,
            y0: 0,
            x1: image.width(),
            y1: image.height(),
        },
    };
    let opts = SegmentOptions {
        crop_size: size,
        ..Default::default()
    };
    let mut crop = segment(&image, prompt, ballot, &opts)?.crop;
    crop.mark_id = stem;
    Ok(crop)
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Embed(a) => {
            let params = load_model(&a.model)?;
            let mark = load_mark(&a.mark, params.config().input_size, "query")?;
            let e = params.embed(&mark)?;
            let line: Vec<String> = e.values().iter().map(|v| format!("{v:.16e}")).collect();
            println!("{}", line.join(" "));
            Ok(())
        }
        Command::Enroll(a) => {
            let params = load_model(&a.model)?;
            let mut pool = load_pool(&a.pool.pool, params.embedding_dim())?;
            let mark = load_mark(&a.mark, params.config().input_size, &a.ballot)?;
            let index = a.mark_index.unwrap_or_else(|| pool.marks_for_ballot(&a.ballot));
            let alias = pool.enroll(params.embed(&mark)?, &a.ballot, index)?;
            with_path(&a.pool.pool, pool.save(&a.pool.pool))?;
            println!("{alias}");
            Ok(())
        }
        Command::Query(a) => {
            let params = load_model(&a.model)?;
            let pool = load_pool(&a.pool.pool, params.embedding_dim())?;
            if pool.is_empty() {
                return Err(CliError::Data(format!("{}: pool is empty", a.pool.pool.display())));
            }
            let mark = load_mark(&a.mark, params.config().input_size, "query")?;
            let matches = pool.query(&params.embed(&mark)?, a.k, &LossConfig::default())?;
            if a.csv {
                println!("rank,alias,softmax_score,raw_logit");
                for m in &matches {
                    println!("{},{},{:.16e},{:.16e}", m.rank, m.alias, m.softmax_score, m.raw_logit);
                }
            } else {
                let w = matches.iter().map(|m| m.alias.len()).max().unwrap_or(0).max(5);
                println!("{:>4}  {:<w$}  {:>10}  {:>10}", "rank", "alias", "softmax", "logit");
                for m in &matches {
                    println!("{:>4}  {:<w$}  {:>10.6}  {:>10.4}", m.rank, m.alias, m.softmax_score, m.raw_logit);
                }
            }
            Ok(())
        }
        Command::Heatmap(a) => heatmap(a),
        Command::Eval(a) => {
            let params = load_model(&a.model)?;
            let groups = with_path(&a.data, read_dataset(&a.data))?;
            let groups = if a.holdout == 0 { &groups[..] } else { holdout_split(&groups, a.holdout)?.1 };
            let s = evaluate_writers(&params, groups, &LossConfig::default(), a.seed)?;
            println!("pair_f1 {:.4} threshold {} pairs {}", s.pair_f1.f1, s.pair_f1.threshold, s.pairs);
            println!("top1 {:.4} queries {}", s.top1, s.queries);
            println!("top5 {:.4} queries {}", s.top5, s.queries);
            Ok(())
        }
        Command::Serve(a) => {
            let params = load_model(&a.model)?;
            let pool = load_pool(&a.pool.pool, params.embedding_dim())?;
            let config = ServiceConfig {
                pool_path: Some(a.pool.pool.clone()),
                ..Default::default()
            };
            let state = Arc::new(AppState::new(params, pool, config)?);
            let cors = cors_layer(&a.allow_origin).map_err(|e| CliError::Usage(e.to_string()))?;
            let app = router(state).layer(cors);
            serve_blocking(&a.addr, app, |addr| println!("listening on http://{addr}"))
                .map_err(|e| CliError::Data(format!("serve {}: {e}", a.addr)))
        }
    }
}

fn synth(a: SynthArgs) -> CliResult {
    let groups = generate_dataset_sized(a.writers, a.marks, a.seed, a.size)?;
    with_path(&a.out, write_dataset(&a.out, &groups))?;
    println!("wrote {} marks from {} writers to {}", a.writers * a.marks, a.writers, a.out.display());
    if a.ballots > 0 {
        let mut lines = String::new();
        for b in 0..a.ballots {
            let mut rng = Rng::new(derive_seed(a.seed, b as u64));
            let count = (3 + rng.below(4)).min(a.writers);
            let writers = rng.sample_indices(a.writers, count);
            let styles: Vec<_> = writers.iter().map(|&w| sample_writer(w as u64, a.seed)).collect();
            let ballot = render_ballot(&styles, 3, 4, rng.next_u64())?;
            let name = format!("ballot_{b:03}");
            let path = a.out.join(format!("{name}.pgm"));
            with_path(&path, ballot.image.write_pgm(&path))?;
            for (i, bub) in ballot.bubbles.iter().enumerate() {
                let ann = Annotation {
                    mark_id: format!("{name}_m{i}"),
                    ballot_id: name.clone(),
                    bbox: bub.bbox,
                    writer_id: bub.writer_id,
                };
                lines.push_str(&ann.to_line());
                lines.push('\n');
            }
        }
        let path = a.out.join("ballots.txt");
        fs::write(&path, lines).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        println!("wrote {} ballot pages", a.ballots);
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let groups = with_path(&a.data, read_dataset(&a.data))?;
    let groups = if a.holdout == 0 { &groups[..] } else { holdout_split(&groups, a.holdout)?.0 };
    let size = groups
        .first()
        .and_then(|g| g.marks.first())
        .map(|m| m.width())
        .ok_or_else(|| CliError::Data(format!("{}: dataset is empty", a.data.display())))?;
    let mut cfg = TrainConfig {
        batch_size: a.batch,
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    cfg.encoder.input_size = size;
    let objective = if a.baseline { Objective::PairwiseBaseline } else { Objective::Contrastive };
    let report = train(groups, &cfg, objective, &mut |epoch, loss| println!("epoch {epoch} loss {loss:.6}"))?;
    with_path(&a.out, report.params.save(&a.out))?;
    println!(
        "saved {} ({} parameters, {} steps, {:.1} s)",
        a.out.display(),
        report.params.num_params(),
        report.steps,
        report.seconds
    );
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> CliResult {
    let params = load_model(&a.model)?;
    let pool = load_pool(&a.pool.pool, params.embedding_dim())?;
    let mut files: Vec<PathBuf> = fs::read_dir(&a.queries)
        .map_err(|e| CliError::Data(format!("{}: {e}", a.queries.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no .pgm query images", a.queries.display())));
    }
    let mut queries = Vec::with_capacity(files.len());
    for f in &files {
        let mark = load_mark(
            &MarkArgs {
                image: f.clone(),
                prompt: None,
            },
            params.config().input_size,
            "query",
        )?;
        queries.push((mark.mark_id.clone(), params.embed(&mark)?));
    }
    let refs: Vec<(&str, &markmatch_core::EmbeddingVector)> = queries.iter().map(|(a, e)| (a.as_str(), e)).collect();
    let csv = pool.heatmap(&refs, &LossConfig::default())?.to_csv();
    match &a.out {
        Some(path) => fs::write(path, csv).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("markmatch: {e}");
            ExitCode::from(e.code())
        }
    }
}
