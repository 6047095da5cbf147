use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tbarrier::langid::{self, corpus_from_lexicon, train_profiles, ProfileSet, DEFAULT_MAX_RANKS};
use tbarrier::lexicon::{load_lexicon, LanguageCode, Lexicon};
use tbarrier::metrics::AttributionMode;
use tbarrier::pipeline::{
    self, cmd_analyze, cmd_report, cmd_run, parse_pair, training_examples, training_texts,
    AnalyzeOptions, PipelineError, PromptTemplate, RunConfig,
};
use tbarrier::refmodel::{self, save_weights, ModelBundle, ModelConfig, NormKind, TrainOptions};
use tbarrier::trace;

const EXIT_VALIDATION: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "tbarrier",
    version,
    about = "Layerwise logit-lens translation analysis"
)]
struct Cli {
    /// TOML run configuration supplying defaults for `run` and `analyze`.
    #[arg(long, global = true, env = "TBARRIER_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trace file on the reference model.
    Run(RunArgs),
    /// Label a trace file and write a JSON report.
    Analyze(AnalyzeArgs),
    /// Export CSV tables from a report.
    Report {
        report: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Check a trace file and list every violation.
    Validate { trace: PathBuf },
    /// Train or evaluate language identification profiles
    #[command(subcommand)]
    Lid(LidCommand),
    /// Initialize or train the reference model
    #[command(subcommand)]
    Model(ModelCommand),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Weight file written by `model init` or `model train`.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    model_name: Option<String>,
    /// Comma-separated SOURCE:TARGET pairs.
    #[arg(long, value_delimiter = ',')]
    pairs: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    sources: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
    #[arg(long)]
    template: Option<String>,
    /// `last:N`, `all`, or a comma list of layer indices.
    #[arg(long)]
    tracked: Option<String>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    concept_limit: Option<usize>,
    /// Trace output path; `.gz` compresses.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    trace: PathBuf,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    /// Profile store from `lid train`.
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Report output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the trace's external tags instead of the in-repo classifier.
    #[arg(long)]
    use_external_lid: bool,
    #[arg(long, value_enum)]
    attribution: Option<Attribution>,
    #[arg(long)]
    cutoff_offset: Option<usize>,
    /// Languages a tag may take; defaults to every lexicon language.
    #[arg(long, value_delimiter = ',')]
    candidates: Vec<String>,
    /// Attribution order among multiple matches.
    #[arg(long, value_delimiter = ',')]
    precedence: Vec<String>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum LidCommand {
    /// Build n-gram profiles from lexicon forms.
    Train {
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Concept ids whose forms are left out of training.
        #[arg(long, value_delimiter = ',')]
        hold_out: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_MAX_RANKS)]
        max_ranks: usize,
    },
    /// Score profiles on lexicon forms.
    Eval {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        /// Restrict to these concept ids.
        #[arg(long, value_delimiter = ',')]
        concepts: Vec<String>,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Write a seeded, untrained model.
    Init {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a toy model on lexicon translation and copy prompts.
    Train {
        #[command(flatten)]
        shape: ShapeArgs,
        #[arg(long)]
        lexicon: PathBuf,
        /// Comma-separated SOURCE:TARGET tasks; equal languages make copy tasks.
        #[arg(long, value_delimiter = ',', required = true)]
        tasks: Vec<String>,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 3e-3)]
        learning_rate: f64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ShapeArgs {
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 512)]
    vocab: usize,
    #[arg(long, default_value_t = 128)]
    context: usize,
    #[arg(long, value_enum, default_value_t = Norm::Rms)]
    norm: Norm,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ShapeArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.layers,
            d_model: self.d_model,
            n_heads: self.heads,
            vocab_size: self.vocab,
            max_context: self.context,
            norm_kind: match self.norm {
                Norm::Rms => NormKind::Rms,
                Norm::Layer => NormKind::Layer,
            },
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    Rms,
    Layer,
}

#[derive(Clone, Copy, ValueEnum)]
enum Attribution {
    Precedence,
    Fractional,
}

impl From<Attribution> for AttributionMode {
    fn from(a: Attribution) -> Self {
        match a {
            Attribution::Precedence => AttributionMode::Precedence,
            Attribution::Fractional => AttributionMode::Fractional,
        }
    }
}

enum Failure {
    Usage(String),
    Validation(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Validation(e.to_string()),
        }
    }
}

macro_rules! from_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::from(PipelineError::from(e))
            }
        }
    )*};
}
from_error!(
    tbarrier::lexicon::LexiconError,
    refmodel::ModelError,
    langid::LidError,
    tbarrier::report::ReportError
);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<Option<RunConfig>, Failure> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = RunConfig::from_toml(&text)?;
    // relative paths in the file resolve against its directory
    if let Some(dir) = path.parent() {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut config.lexicon);
        fix(&mut config.traces);
        config.model.as_mut().map(fix);
        config.report.as_mut().map(fix);
        config.lid_profiles.as_mut().map(fix);
    }
    Ok(Some(config))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Run(args) => run(config, args),
        Command::Analyze(args) => analyze(config, args),
        Command::Report { report, out_dir } => {
            for path in cmd_report(&report, &out_dir)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Validate { trace } => {
            let v = trace::validate(&trace);
            for f in &v.findings {
                match f.record {
                    Some(r) => println!("line {} (record {r}): {}", f.line, f.message),
                    None => println!("line {}: {}", f.line, f.message),
                }
            }
            if v.is_valid() {
                println!("{}: {} records ok", trace.display(), v.records);
                Ok(())
            } else {
                Err(Failure::Validation(format!(
                    "{} findings",
                    v.findings.len()
                )))
            }
        }
        Command::Lid(cmd) => lid(cmd),
        Command::Model(cmd) => model(cmd),
    }
}

fn run(config: Option<RunConfig>, a: RunArgs) -> Result<(), Failure> {
    let mut c = match config {
        Some(c) => c,
        None => {
            let (Some(lexicon), Some(out)) = (a.lexicon.clone(), a.out.clone()) else {
                return Err(Failure::Usage(
                    "run needs --lexicon and --out, or --config".into(),
                ));
            };
            RunConfig::new(lexicon, out)
        }
    };
    if let Some(v) = a.lexicon {
        c.lexicon = v;
    }
    if let Some(v) = a.out {
        c.traces = v;
    }
    if let Some(v) = a.model {
        c.model = Some(v);
    }
    if let Some(v) = a.model_name {
        c.model_name = v;
    }
    if !a.pairs.is_empty() {
        c.pairs = a.pairs;
    }
    if !a.sources.is_empty() || !a.targets.is_empty() {
        c.pairs.clear();
        c.sources = a.sources;
        c.targets = a.targets;
    }
    if let Some(v) = a.template {
        c.template = PromptTemplate::from_id(&v)?;
    }
    if let Some(v) = a.tracked {
        c.tracked = v;
    }
    if let Some(v) = a.max_steps {
        c.max_steps = v;
    }
    if a.concept_limit.is_some() {
        c.concept_limit = a.concept_limit;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.workers {
        c.workers = v;
    }
    let n = cmd_run(&c)?;
    println!("{}: {n} records", c.traces.display());
    Ok(())
}

fn parse_langs(v: &[String]) -> Result<Vec<LanguageCode>, Failure> {
    v.iter()
        .map(|s| LanguageCode::new(s).map_err(|e| Failure::Usage(e.to_string())))
        .collect()
}

fn analyze(config: Option<RunConfig>, a: AnalyzeArgs) -> Result<(), Failure> {
    let config = config.as_ref();
    let lexicon_path = a
        .lexicon
        .or_else(|| config.map(|c| c.lexicon.clone()))
        .ok_or_else(|| Failure::Usage("analyze needs --lexicon or --config".into()))?;
    let out = a
        .out
        .or_else(|| config.and_then(|c| c.report.clone()))
        .ok_or_else(|| Failure::Usage("analyze needs --out or a config `report` path".into()))?;
    let lexicon = load_lexicon(&lexicon_path)?;
    let profiles = match a
        .profiles
        .or_else(|| config.and_then(|c| c.lid_profiles.clone()))
    {
        Some(p) => Some(ProfileSet::load(&p)?),
        None => None,
    };

    let mut options = AnalyzeOptions::for_lexicon(&lexicon);
    if !a.candidates.is_empty() {
        options.label.candidate_set = parse_langs(&a.candidates)?.into_iter().collect();
    }
    if !a.precedence.is_empty() {
        options.label.precedence = parse_langs(&a.precedence)?;
    }
    options.label.use_external_lid = a.use_external_lid;
    if let Some(v) = a.attribution {
        options.report.attribution_mode = v.into();
    } else if let Some(c) = config {
        options.report.attribution_mode = c.attribution;
    }
    if let Some(v) = a.cutoff_offset {
        options.report.cutoff_offset = v;
    }
    options.workers = a.workers.or(config.map(|c| c.workers)).unwrap_or(1);

    let report = cmd_analyze(&a.trace, &lexicon, profiles.as_ref(), &options, &out)?;
    println!(
        "{}: {} pairs, {} instances",
        out.display(),
        report.pairs.len(),
        report.overall.instances
    );
    if !report.invariant_violations.is_empty() {
        for v in &report.invariant_violations {
            eprintln!("invariant: {v}");
        }
        return Err(Failure::Validation("report invariants violated".into()));
    }
    Ok(())
}

fn lid(cmd: LidCommand) -> Result<(), Failure> {
    match cmd {
        LidCommand::Train {
            lexicon,
            out,
            hold_out,
            max_ranks,
        } => {
            let lexicon = load_lexicon(&lexicon)?;
            let held: BTreeSet<String> = hold_out.into_iter().collect();
            let set = train_profiles(&corpus_from_lexicon(&lexicon, &held), max_ranks)?;
            set.save(&out)?;
            println!("{}: {} profiles", out.display(), set.profiles().len());
            Ok(())
        }
        LidCommand::Eval {
            profiles,
            lexicon,
            concepts,
        } => {
            let set = ProfileSet::load(&profiles)?;
            let lexicon = load_lexicon(&lexicon)?;
            let samples = lexicon_samples(&lexicon, &concepts);
            let eval = langid::evaluate(&set, &samples);
            println!("lang\ttotal\tcorrect\twrong\tabstained\taccuracy");
            let row = |name: &str, c: &langid::LidCounts| {
                let acc = c.accuracy().map(|a| format!("{a:.4}")).unwrap_or_default();
                println!(
                    "{name}\t{}\t{}\t{}\t{}\t{acc}",
                    c.total, c.correct, c.wrong, c.abstained
                );
            };
            for (lang, c) in &eval.per_language {
                row(lang.as_str(), c);
            }
            row("all", &eval.overall);
            Ok(())
        }
    }
}

fn lexicon_samples(lexicon: &Lexicon, concepts: &[String]) -> Vec<(LanguageCode, String)> {
    let keep = |id: &str| concepts.is_empty() || concepts.iter().any(|c| c == id);
    let mut out = Vec::new();
    for c in lexicon.concepts().iter().filter(|c| keep(&c.id)) {
        for lang in lexicon.languages() {
            for form in c.forms_for(lang).into_iter().flatten() {
                out.push((lang.clone(), form.clone()));
            }
        }
    }
    out
}

fn model(cmd: ModelCommand) -> Result<(), Failure> {
    match cmd {
        ModelCommand::Init { shape, out } => {
            let bundle = ModelBundle::init_seeded(shape.config())?;
            save_weights(&bundle, &out)?;
            println!("{}: checksum {}", out.display(), bundle.checksum());
            Ok(())
        }
        ModelCommand::Train {
            shape,
            lexicon,
            tasks,
            epochs,
            learning_rate,
            batch_size,
            out,
        } => {
            let lexicon = load_lexicon(&lexicon)?;
            let tasks = tasks
                .iter()
                .map(|t| parse_pair(t))
                .collect::<Result<Vec<_>, _>>()?;
            let config = shape.config();
            let texts = training_texts(&lexicon, &tasks, PromptTemplate::TranslateWord);
            if texts.is_empty() {
                return Err(Failure::Usage(
                    "no training prompts for the given tasks".into(),
                ));
            }
            let tokenizer = pipeline::train_tokenizer(&texts, config.vocab_size)?;
            let bundle = ModelBundle::init_with_tokenizer(config, tokenizer)?;
            let examples = training_examples(bundle.tokenizer(), &texts);
            let options = TrainOptions {
                epochs,
                learning_rate,
                batch_size,
                seed: shape.seed,
                ..TrainOptions::default()
            };
            let (bundle, report) = refmodel::train(&bundle, &examples, &options)?;
            for (i, loss) in report.epoch_losses.iter().enumerate() {
                println!("epoch {}\tloss {loss:.4}", i + 1);
            }
            save_weights(&bundle, &out)?;
            println!("{}: checksum {}", out.display(), bundle.checksum());
            Ok(())
        }
    }
}
