use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pma_core::corpus::{read_corpus, write_corpus, Corpus, CorpusConfig, Split};
use pma_core::harness::gradcheck::{self, GradcheckOptions};
use pma_core::harness::{
    checkpoint, evaluate, inspect_attention, retrieve, train, write_report, Ablation, EpochLog, EvalOptions,
    TrainConfig, TrainOptions,
};
use pma_core::Error;

#[derive(Parser)]
#[command(name = "pma", version, about = "Pose-guided multi-granularity attention for text-to-person retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic doll corpus.
    GenData(GenData),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Top-k retrieval accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Rank gallery images against a free-text caption.
    Retrieve(RetrieveArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Dump CA and FA attention for one image and caption.
    InspectAttention(InspectArgs),
}

#[derive(Args)]
struct GenData {
    /// Training identities.
    #[arg(long, default_value_t = 200)]
    identities: usize,
    /// Test identities (defaults to a quarter of the training identities).
    #[arg(long)]
    test_identities: Option<usize>,
    #[arg(long, default_value_t = 0)]
    val_identities: usize,
    #[arg(long, default_value_t = 4)]
    images_per_identity: usize,
    #[arg(long, default_value_t = 2)]
    captions_per_image: usize,
    /// Probability that a caption mentions each clothing item.
    #[arg(long, default_value_t = 0.6)]
    mention_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationArg {
    Baseline,
    ConPose,
    ConPoseCa,
    Full,
}

impl From<AblationArg> for Ablation {
    fn from(a: AblationArg) -> Self {
        match a {
            AblationArg::Baseline => Ablation::Baseline,
            AblationArg::ConPose => Ablation::ConPose,
            AblationArg::ConPoseCa => Ablation::ConPoseCa,
            AblationArg::Full => Ablation::Full,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Flat JSON config; omitted keys take desk defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint and log.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Sets the con_pose / ca / fa switches to one ablation row.
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long)]
    max_steps: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Branch {
    Fa,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Drop a branch from the test-time score.
    #[arg(long, value_enum)]
    ablate: Option<Branch>,
    /// Weight of S^fa in the fused score (defaults to the trained lambda3).
    #[arg(long)]
    lambda3: Option<f64>,
    /// Write the full retrieval result as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus directory whose images form the gallery.
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 10)]
    top: usize,
    /// Restrict the gallery to one split.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long, value_enum)]
    ablate: Option<Branch>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check every registered op and composite.
    #[arg(long, conflicts_with = "op")]
    all: bool,
    /// Check one named op (repeatable).
    #[arg(long)]
    op: Vec<String>,
    /// List the registered names and exit.
    #[arg(long)]
    list: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Corpus image index.
    #[arg(long)]
    image: usize,
    /// Caption text (defaults to the image's first caption).
    #[arg(long)]
    caption: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn load_corpus(dir: &Path) -> Result<Corpus, Failure> {
    require(dir, "corpus directory")?;
    Ok(read_corpus(dir)?)
}

fn load_model(path: &Path) -> Result<pma_core::harness::Model, Failure> {
    require(path, "checkpoint")?;
    Ok(checkpoint::load(path)?.0)
}

fn gen_data(a: GenData) -> Outcome {
    let config = CorpusConfig {
        seed: a.seed,
        train_identities: a.identities,
        val_identities: a.val_identities,
        test_identities: a.test_identities.unwrap_or(a.identities / 4),
        images_per_identity: a.images_per_identity,
        captions_per_image: a.captions_per_image,
        mention_prob: a.mention_prob,
        ..Default::default()
    };
    let corpus = Corpus::generate(&config)?;
    write_corpus(&corpus, &a.out)?;
    println!(
        "wrote {} images of {} identities ({} words) to {}",
        corpus.images.len(),
        corpus.persons.len(),
        corpus.vocab.len(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Outcome {
    let corpus = load_corpus(&a.corpus)?;
    let mut config = match &a.config {
        Some(p) => {
            require(p, "config file")?;
            TrainConfig::load(p)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(ab) = a.ablation {
        config = Ablation::from(ab).apply(&config);
    }
    let mut report = |e: &EpochLog| {
        println!("epoch {:>3} {:<7} mean loss {:.5}", e.epoch, format!("{:?}", e.stage).to_lowercase(), e.mean_loss)
    };
    let opts = TrainOptions { out_dir: Some(a.out.clone()), max_steps: a.max_steps, on_epoch: Some(&mut report) };
    let (_, rep) = train(config, &corpus, opts)?;
    println!(
        "{} steps, {} epochs{}; checkpoint in {}",
        rep.steps.len(),
        rep.epochs.len(),
        if rep.stopped_early { ", stopped early" } else { "" },
        a.out.display()
    );
    Ok(())
}

fn eval_options(model: &pma_core::harness::Model, lambda3: Option<f64>, ablate: Option<Branch>) -> EvalOptions {
    let mut opts = EvalOptions::for_model(model);
    if let Some(l) = lambda3 {
        opts.lambda3 = l;
    }
    opts.ablate_fa = ablate == Some(Branch::Fa);
    opts
}

fn run_eval(a: EvalArgs) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let r = evaluate(&model, &corpus, a.split.into(), eval_options(&model, a.lambda3, a.ablate))?;
    println!("queries {}  gallery {}", r.queries.len(), r.gallery.len());
    println!("top-1 {:.4}  top-5 {:.4}  top-10 {:.4}", r.top1, r.top5, r.top10);
    if let Some(s) = &r.selection {
        println!("selected regions: positive {:.3}  negative {:.3}", s.positive_mean, s.negative_mean);
    }
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_vec_pretty(&r).map_err(Error::from)?).map_err(Error::from)?;
    }
    Ok(())
}

fn run_retrieve(a: RetrieveArgs) -> Outcome {
    if a.top == 0 {
        return Err(Failure::Usage("--top must be positive".into()));
    }
    let model = load_model(&a.checkpoint)?;
    let corpus = load_corpus(&a.gallery)?;
    let rows = retrieve(&model, &corpus, a.split.map(Split::from), &a.text, a.top, eval_options(&model, None, a.ablate))?;
    eprintln!("rank  image  identity  S  S_ca  S_fa");
    for (i, r) in rows.iter().enumerate() {
        let fa = r.fa.map_or("-".to_string(), |v| format!("{v:.6}"));
        println!("{:>4} {:>6} {:>9} {:.6} {:.6} {}", i + 1, r.image, r.identity, r.score, r.ca, fa);
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Outcome {
    if a.list {
        for n in gradcheck::names() {
            println!("{n}");
        }
        return Ok(());
    }
    let names: Vec<String> = if a.all {
        gradcheck::names().into_iter().map(String::from).collect()
    } else if a.op.is_empty() {
        return Err(Failure::Usage("pass --all or at least one --op".into()));
    } else {
        a.op
    };
    let opts = GradcheckOptions { seed: a.seed, tolerance: a.tolerance, ..Default::default() };
    let mut failed = 0;
    for n in &names {
        let r = gradcheck::run(n, &opts)?;
        println!("{} {:<20} max rel err {:.3e}", if r.passed { "PASS" } else { "FAIL" }, r.op, r.worst());
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} gradient checks failed", names.len())));
    }
    println!("all {} gradient checks passed", names.len());
    Ok(())
}

fn run_inspect(a: InspectArgs) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    let corpus = load_corpus(&a.corpus)?;
    let record = corpus
        .images
        .get(a.image)
        .ok_or_else(|| Failure::Usage(format!("image {} out of range (corpus has {})", a.image, corpus.images.len())))?;
    let caption = a.caption.unwrap_or_else(|| record.captions[0].text.clone());
    let report = inspect_attention(&model, &record.image, &caption)?;
    for p in write_report(&report, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Retrieve(a) => run_retrieve(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::InspectAttention(a) => run_inspect(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
