mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apfa_core::conditional::{
    conditional_merge_test, conditional_select, covariate_global_test, fit_grouped, fit_logistic_edges,
    logistic_merge_test, ConditionalModel,
};
use apfa_core::dataset::{read_dataset, write_dataset, ColumnRef, CovariateKind, ReadOptions};
use apfa_core::equivalence::{
    apfa_to_dag, dag_to_apfa, extract_statements, level_reports, property_q, ug_to_apfa, Dag, UndirectedGraph,
};
use apfa_core::estimation::{fit_mle, Penalty};
use apfa_core::inference::{merge_test, nested_test, TestResult};
use apfa_core::io::{export_dot, ApfaDocument, DotStyle, Provenance};
use apfa_core::merging::merge_with_report;
use apfa_core::selection::{select, SelectionConfig};
use apfa_core::{Apfa, CountedApfa, Dataset, ErrorKind, StateId};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "apfa-lab", version, about = "Learn acyclic probabilistic finite automata from discrete longitudinal data")]
struct Cli {
    /// Worker threads; defaults to APFA_LAB_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CSV file, one row per observation, categories coded 1, 2, ...
    #[arg(long = "data", short = 'd')]
    data: PathBuf,
    /// The first row holds column names.
    #[arg(long)]
    header: bool,
    /// Covariate column, by name (with --header) or 0-based index.
    #[arg(long)]
    covariate: Option<ColumnRef>,
    /// Treat the covariate as continuous instead of categorical.
    #[arg(long, requires = "covariate")]
    continuous: bool,
    /// Column with a frequency for each row.
    #[arg(long)]
    weight: Option<ColumnRef>,
}

#[derive(Args, Clone)]
struct OutArgs {
    /// Write the result here instead of standard output.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the sample APFA of a dataset.
    Tree {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Fit a model to a dataset by maximum likelihood.
    Fit {
        #[arg(long, short = 'm')]
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Merge same-level states and everything the merge forces.
    Merge {
        #[arg(long, short = 'm')]
        model: PathBuf,
        /// Comma-separated state ids.
        #[arg(long, value_delimiter = ',', required = true)]
        states: Vec<u32>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Likelihood-ratio test of a merge or of two nested models.
    Test {
        #[arg(long, short = 'm')]
        model: PathBuf,
        /// Dataset; required unless the model carries counts.
        #[arg(long, short = 'd')]
        data: Option<PathBuf>,
        #[arg(long)]
        header: bool,
        #[arg(long)]
        covariate: Option<ColumnRef>,
        #[arg(long, requires = "covariate")]
        continuous: bool,
        #[arg(long)]
        weight: Option<ColumnRef>,
        /// States to merge.
        #[arg(long, value_delimiter = ',', conflicts_with_all = ["nested", "global"])]
        states: Vec<u32>,
        /// A submodel of --model to test against it.
        #[arg(long)]
        nested: Option<PathBuf>,
        /// Test whether the covariate groups share one distribution.
        #[arg(long, requires = "covariate")]
        global: bool,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Select a model by greedy state merging.
    Select {
        #[command(flatten)]
        data: DataArgs,
        /// Penalty weight: aic, bic or a number.
        #[arg(long, conflicts_with = "mu", value_parser = parse_penalty)]
        alpha: Option<Penalty>,
        /// Merge pairs whose transition probabilities differ by less than this.
        #[arg(long)]
        mu: Option<f64>,
        /// Write the merge trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Leave provenance out of the trace file.
        #[arg(long)]
        seedless_trace: bool,
        /// Rescore every pair after each merge.
        #[arg(long)]
        full_rescore: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Draw a dataset from a model.
    Simulate {
        #[arg(long, short = 'm')]
        model: PathBuf,
        #[arg(long, short = 'n')]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        header: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Graphical-model structure of a model, or the model of a graph.
    Equiv {
        #[arg(long, short = 'm', required_unless_present = "graph")]
        model: Option<PathBuf>,
        /// A dag or ug JSON document to turn into a model.
        #[arg(long, conflicts_with = "model", requires = "alphabets")]
        graph: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        alphabets: Vec<u32>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Graphviz rendering of a model.
    ExportDot {
        #[arg(long, short = 'm')]
        model: PathBuf,
        /// Add edge counts to the labels.
        #[arg(long)]
        counts: bool,
        /// Show edges added by completion.
        #[arg(long)]
        synthetic: bool,
        /// Complete the model first.
        #[arg(long)]
        complete: bool,
        #[command(flatten)]
        out: OutArgs,
    },
}

fn parse_penalty(s: &str) -> Result<Penalty, String> {
    let p: Penalty = s.parse().map_err(|e: apfa_core::Error| e.to_string())?;
    match p {
        Penalty::Weight(w) if w < 0.0 => Err(format!("penalty must be non-negative, got {w}")),
        p => Ok(p),
    }
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<apfa_core::Error> for Failure {
    fn from(e: apfa_core::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Data => 2,
            ErrorKind::Model => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn data_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("apfa-lab: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn threads(flag: Option<usize>) -> CliResult<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("APFA_LAB_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("APFA_LAB_THREADS must be a number, got `{v}`"))),
        _ => Ok(None),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = threads(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match cli.command {
        Command::Tree { data, out } => cmd_tree(&data, &out),
        Command::Fit { model, data, out } => cmd_fit(&model, &data, &out),
        Command::Merge { model, states, out } => cmd_merge(&model, &states, &out),
        Command::Test {
            model,
            data,
            header,
            covariate,
            continuous,
            weight,
            states,
            nested,
            global,
            json,
            out,
        } => {
            let data = data.map(|path| DataArgs {
                data: path,
                header,
                covariate,
                continuous,
                weight,
            });
            cmd_test(&model, data.as_ref(), &states, nested.as_deref(), global, json, &out)
        }
        Command::Select {
            data,
            alpha,
            mu,
            trace,
            seedless_trace,
            full_rescore,
            out,
        } => {
            let mut config = match (alpha, mu) {
                (Some(p), None) => SelectionConfig::penalized(p),
                (None, Some(mu)) => SelectionConfig::max_difference(mu),
                (None, None) => return Err(usage("select needs --alpha or --mu")),
                (Some(_), Some(_)) => unreachable!("clap rejects both"),
            };
            config.full_rescore = full_rescore;
            config.validate()?;
            cmd_select(&data, &config, trace.as_deref(), seedless_trace, &out)
        }
        Command::Simulate {
            model,
            n,
            seed,
            header,
            out,
        } => cmd_simulate(&model, n, seed, header, &out),
        Command::Equiv {
            model,
            graph,
            alphabets,
            out,
        } => match (model, graph) {
            (Some(m), _) => cmd_equiv(&m, &out),
            (None, Some(g)) => cmd_graph(&g, &alphabets, &out),
            (None, None) => Err(usage("equiv needs --model or --graph")),
        },
        Command::ExportDot {
            model,
            counts,
            synthetic,
            complete,
            out,
        } => cmd_dot(&model, DotStyle { show_counts: counts, show_synthetic: synthetic }, complete, &out),
    }
}

// ---------------------------------------------------------------------------
// input and output

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| data_failure(path, e))
}

fn load_data(args: &DataArgs) -> CliResult<(Dataset, String)> {
    let bytes = read_bytes(&args.data)?;
    let digest = format!("{:x}", Sha256::digest(&bytes));
    let options = ReadOptions {
        header: args.header,
        covariate: args.covariate.clone().map(|c| {
            let kind = if args.continuous {
                CovariateKind::Continuous
            } else {
                CovariateKind::Categorical
            };
            (c, kind)
        }),
        weight: args.weight.clone(),
    };
    let data = read_dataset(bytes.as_slice(), &options)
        .map_err(|e| Failure::from(e).prefixed(&args.data))?;
    Ok((data, digest))
}

impl Failure {
    fn prefixed(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn load_model(path: &Path) -> CliResult<Apfa> {
    let bytes = read_bytes(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Failure {
        code: 3,
        message: format!("{}: not UTF-8 text", path.display()),
    })?;
    let doc = ApfaDocument::from_json(&text).map_err(|e| Failure::from(e).prefixed(path))?;
    doc.to_apfa().map_err(|e| Failure::from(e).prefixed(path))
}

/// Counts for `model`: routed from the dataset if one is given, else the
/// counts stored in the model.
fn counted(model: &Apfa, data: Option<&Dataset>) -> CliResult<CountedApfa> {
    match data {
        Some(d) => Ok(CountedApfa::from_dataset(model, d)?),
        None if model.has_counts() => Ok(CountedApfa::new(model.clone())?),
        None => Err(usage("the model has no counts; pass --data")),
    }
}

fn emit(out: &OutArgs, text: &str) -> CliResult<()> {
    match &out.output {
        Some(path) => fs::write(path, text).map_err(|e| data_failure(path, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| usage(format!("cannot write output: {e}")))
        }
    }
}

fn pretty(value: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("values serialize");
    s.push('\n');
    s
}

fn ids(states: &[u32]) -> Vec<StateId> {
    states.iter().map(|&s| StateId(s)).collect()
}

fn data_config(args: &DataArgs) -> serde_json::Value {
    json!({
        "header": args.header,
        "covariate": args.covariate.as_ref().map(column_name),
        "continuous": args.continuous,
        "weight": args.weight.as_ref().map(column_name),
    })
}

fn column_name(c: &ColumnRef) -> String {
    match c {
        ColumnRef::Name(n) => n.clone(),
        ColumnRef::Index(i) => i.to_string(),
    }
}

// ---------------------------------------------------------------------------
// commands

fn cmd_tree(args: &DataArgs, out: &OutArgs) -> CliResult<()> {
    let (data, digest) = load_data(args)?;
    let sample = apfa_core::sample_apfa(&data)?;
    let mut doc = ApfaDocument::from_apfa(sample.apfa()).with_provenance(Provenance {
        command: "tree".into(),
        config: data_config(args),
        sha256: Some(digest),
    });
    if let Some(names) = data.names() {
        doc = doc.with_names(names);
    }
    emit(out, &doc.to_json())
}

fn cmd_fit(model: &Path, args: &DataArgs, out: &OutArgs) -> CliResult<()> {
    let a = load_model(model)?;
    let (data, digest) = load_data(args)?;
    let fitted = fit_mle(&CountedApfa::from_dataset(&a, &data)?);
    let mut doc = ApfaDocument::from_fitted(&fitted).with_provenance(Provenance {
        command: "fit".into(),
        config: data_config(args),
        sha256: Some(digest),
    });
    if let Some(names) = data.names() {
        doc = doc.with_names(names);
    }
    emit(out, &doc.to_json())
}

fn cmd_merge(model: &Path, states: &[u32], out: &OutArgs) -> CliResult<()> {
    let a = load_model(model)?;
    let (merged, list) = if a.has_counts() {
        let r = merge_with_report(&CountedApfa::new(a)?, &ids(states))?;
        let fitted = fit_mle(&r.model);
        (ApfaDocument::from_fitted(&fitted), r.list)
    } else {
        let r = apfa_core::merging::merge_apfa(&a.topology(), &ids(states))?;
        (ApfaDocument::from_apfa(&r.model), r.list)
    };
    emit(
        out,
        &pretty(&json!({
            "merge_list": list,
            "model": merged,
        })),
    )
}

fn cmd_test(
    model: &Path,
    data: Option<&DataArgs>,
    states: &[u32],
    nested: Option<&Path>,
    global: bool,
    as_json: bool,
    out: &OutArgs,
) -> CliResult<()> {
    let a = load_model(model)?;
    let loaded = data.map(load_data).transpose()?;
    let dataset = loaded.as_ref().map(|(d, _)| d);
    let covariate = dataset.and_then(|d| d.covariate()).is_some();

    let result: TestResult = if global {
        let d = dataset.ok_or_else(|| usage("--global needs --data"))?;
        covariate_global_test(d)?.result
    } else if let Some(sub) = nested {
        if covariate {
            return Err(usage("nested tests do not take a covariate"));
        }
        let a0 = load_model(sub)?;
        nested_test(&counted(&a, dataset)?, &counted(&a0, dataset)?)?
    } else {
        if states.len() < 2 {
            return Err(usage("give at least two --states, --nested or --global"));
        }
        let c = counted(&a, dataset)?;
        let s = ids(states);
        match (dataset, data) {
            (Some(d), Some(args)) if covariate && args.continuous => {
                logistic_merge_test(&fit_logistic_edges(&c, d)?, &s)?
            }
            (Some(d), _) if covariate => conditional_merge_test(&fit_grouped(&c, d)?, &s)?,
            _ => merge_test(&c, &s)?,
        }
    };
    if as_json || out.output.is_some() {
        emit(out, &pretty(&result))
    } else {
        emit(out, &report::test_table(&result))
    }
}

fn cmd_select(
    args: &DataArgs,
    config: &SelectionConfig,
    trace_path: Option<&Path>,
    seedless: bool,
    out: &OutArgs,
) -> CliResult<()> {
    let (data, digest) = load_data(args)?;
    let mut cfg_json = data_config(args);
    cfg_json["selection"] = serde_json::to_value(config).expect("config serializes");
    let provenance = Provenance {
        command: "select".into(),
        config: cfg_json,
        sha256: Some(digest),
    };

    let (mut doc, trace, conditional) = if data.covariate().is_some() {
        let sel = conditional_select(&data, config)?;
        let details = match &sel.model {
            ConditionalModel::Grouped(g) => json!({
                "kind": "grouped",
                "log_likelihood": g.log_likelihood(),
                "dimension": g.dimension(),
                "groups": (0..g.num_groups()).map(|z| json!({
                    "label": g.labels()[z],
                    "log_likelihood": g.group_log_likelihood(z),
                    "probabilities": g.probabilities(z),
                })).collect::<Vec<_>>(),
            }),
            ConditionalModel::Logistic(m) => json!({
                "kind": "logistic",
                "log_likelihood": m.log_likelihood(),
                "dimension": m.dimension(),
                "fits": m.fits().map(|(s, f)| json!({"state": s, "fit": f})).collect::<Vec<_>>(),
            }),
        };
        (ApfaDocument::from_apfa(sel.model.apfa()), sel.trace, Some(details))
    } else {
        let sel = select(&data, config)?;
        (ApfaDocument::from_fitted(&sel.model), sel.trace, None)
    };
    if let Some(names) = data.names() {
        doc = doc.with_names(names);
    }
    doc = doc.with_provenance(provenance.clone());

    if let Some(path) = trace_path {
        let mut t = json!({ "trace": trace });
        if let Some(c) = conditional {
            t["conditional"] = c;
        }
        if !seedless {
            t["provenance"] = serde_json::to_value(&provenance).expect("provenance serializes");
        }
        fs::write(path, pretty(&t)).map_err(|e| data_failure(path, e))?;
    }
    emit(out, &doc.to_json())
}

fn cmd_simulate(model: &Path, n: usize, seed: u64, header: bool, out: &OutArgs) -> CliResult<()> {
    let a = load_model(model)?;
    let a = if a.has_probabilities() {
        a
    } else if a.has_counts() {
        fit_mle(&CountedApfa::new(a)?).into_apfa()
    } else {
        return Err(Failure {
            code: 3,
            message: "the model has neither probabilities nor counts".into(),
        });
    };
    let data = a.simulate(n, seed)?;
    let mut buf = Vec::new();
    write_dataset(&data, &mut buf, header)?;
    emit(out, &String::from_utf8(buf).expect("csv is text"))
}

fn cmd_equiv(model: &Path, out: &OutArgs) -> CliResult<()> {
    let a = load_model(model)?;
    let q = property_q(&a);
    let dag = apfa_to_dag(&a).ok();
    let statements: Vec<serde_json::Value> = extract_statements(&a)
        .into_iter()
        .map(|s| json!({"text": s.to_string(), "statement": s}))
        .collect();
    let report = json!({
        "property_q": q.is_some(),
        "levels": level_reports(&a),
        "sets": q.map(|q| q.sets),
        "dag": dag,
        "ug": dag.as_ref().map(Dag::skeleton),
        "statements": statements,
    });
    emit(out, &pretty(&report))
}

fn cmd_graph(path: &Path, alphabets: &[u32], out: &OutArgs) -> CliResult<()> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| usage("graph file is not UTF-8"))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Failure::from(apfa_core::Error::from(e)).prefixed(path))?;
    let a = match raw.get("kind").and_then(|k| k.as_str()) {
        Some("dag") => {
            let g: Dag = serde_json::from_value(raw).map_err(|e| Failure::from(apfa_core::Error::from(e)).prefixed(path))?;
            dag_to_apfa(&g, alphabets)?
        }
        Some("ug") => {
            let g: UndirectedGraph = serde_json::from_value(raw).map_err(|e| Failure::from(apfa_core::Error::from(e)).prefixed(path))?;
            ug_to_apfa(&g, alphabets)?
        }
        _ => {
            return Err(Failure {
                code: 3,
                message: format!("{}: kind must be \"dag\" or \"ug\"", path.display()),
            })
        }
    };
    emit(out, &ApfaDocument::from_apfa(&a).to_json())
}

fn cmd_dot(model: &Path, style: DotStyle, complete: bool, out: &OutArgs) -> CliResult<()> {
    let mut a = load_model(model)?;
    if complete {
        a = a.complete(apfa_core::equivalence::DEFAULT_MAX_STATES)?;
    }
    emit(out, &export_dot(&a, style))
}
