//! Command-line front end: certify, hessian, dcp, check, and batch
//! subcommands over the shared pipeline.
//!
//! Exit codes are total: 0 convex/affine, 1 concave, 2 unknown, 3 a
//! non-convexity witness was found, 4 input error. An unknown verdict is
//! reported as "not certified" with the blocking node highlighted — never as
//! "non-convex", since failure to prove is not disproof.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;

use clap::{Args, Parser, Subcommand};

use crate::ast::{Assumption, Ast};
use crate::certificate::{Certificate, Verdict, WitnessReport};
use crate::dag::{dump_json, lower, render_node, DagStore, Role, SymbolTable};
use crate::dcp::dcp_certify;
use crate::oracle::{self, Binding, SampleConfig, Value};
use crate::parser::{parse, parse_assumptions};
use crate::positivity::{certify, CertifyOutcome};
use crate::shape::{Dim, Shape};

pub const EXIT_INPUT_ERROR: i32 = 4;

/// Like `println!` but ignores broken pipes (e.g. `convexcert ... | head`).
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "convexcert",
    about = "Certify convexity of differentiable expressions via symbolic Hessians",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certify convexity of an expression.
    Certify(CertifyArgs),
    /// Print the symbolic gradient and Hessian.
    Hessian(CommonArgs),
    /// Label curvature with the rule-engine baseline.
    Dcp(DcpArgs),
    /// Sample feasible points and print Hessian eigenvalue statistics.
    Check(CheckArgs),
    /// Run a corpus file of "expr ; assume ; dims ; wrt ; expected" lines.
    Batch(BatchArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Expression in the surface syntax, e.g. "(X*w-y)'*(X*w-y)".
    #[arg(allow_hyphen_values = true)]
    expression: String,
    /// Domain assumptions, e.g. "x>0, p>=1".
    #[arg(long, default_value = "")]
    assume: String,
    /// Shape declarations, e.g. "X:m*n,w:n,y:m". Entries may end in ":psd"
    /// for positive-semidefinite matrix parameters. Undeclared symbols are
    /// scalar parameters.
    #[arg(long, default_value = "")]
    dims: String,
    /// Differentiation variable. Defaults to `x`, or to the only symbol in
    /// the expression; anything else must be named explicitly.
    #[arg(long)]
    wrt: Option<String>,
    /// Emit the certificate as JSON instead of text.
    #[arg(long)]
    json: bool,
    /// Dump the expression DAG as JSON to stderr.
    #[arg(long)]
    dump_dag: bool,
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Certification method.
    #[arg(long, value_parser = ["hessian", "dcp", "both"], default_value = "hessian")]
    method: String,
    /// Dump the simplified Hessian DAG as JSON to stderr.
    #[arg(long)]
    dump_hessian: bool,
    /// On an unknown verdict, search for a non-convexity witness by sampling.
    #[arg(long)]
    falsify: bool,
    /// RNG seed for sampling (CONVEXCERT_SEED is the fallback).
    #[arg(long)]
    seed: Option<u64>,
    /// Number of sampling trials.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Enable CVX-style composite atoms in the DCP baseline.
    #[arg(long)]
    dcp_extended_atoms: bool,
}

#[derive(Args)]
struct DcpArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Enable CVX-style composite atoms.
    #[arg(long)]
    dcp_extended_atoms: bool,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

#[derive(Args)]
struct BatchArgs {
    /// Corpus file: one "expression ; assumptions ; dims ; wrt ; expected"
    /// per line; blank lines and lines starting with `#` are skipped.
    file: std::path::PathBuf,
    /// Also run the DCP baseline on every line and print side-by-side counts.
    #[arg(long)]
    compare_dcp: bool,
    /// Enable CVX-style composite atoms in the DCP baseline.
    #[arg(long)]
    dcp_extended_atoms: bool,
}

/// Everything shared by the subcommands after input validation.
pub struct Problem {
    pub store: DagStore,
    pub root: crate::dag::NodeId,
    pub symbols: SymbolTable,
    pub assumptions: Vec<Assumption>,
    pub wrt: String,
    pub wrt_shape: Shape,
}

/// Programmatic equivalent of the CLI's input assembly: parses the
/// expression, assumption clauses, and dimension declarations, and resolves
/// the differentiation variable the same way the subcommands do.
pub fn assemble_problem(
    expression: &str,
    assume: &str,
    dims: &str,
    wrt: Option<&str>,
) -> Result<Problem, String> {
    build_problem(&CommonArgs {
        expression: expression.to_string(),
        assume: assume.to_string(),
        dims: dims.to_string(),
        wrt: wrt.map(str::to_string),
        json: false,
        dump_dag: false,
    })
}

/// Runs the Hessian pipeline on an assembled problem.
pub fn hessian_certify(p: &mut Problem) -> Result<CertifyOutcome, String> {
    hessian_outcome(p)
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            EXIT_INPUT_ERROR
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32, String> {
    match cli.command {
        Command::Certify(args) => run_certify(args),
        Command::Hessian(args) => run_hessian(args),
        Command::Dcp(args) => run_dcp(args),
        Command::Check(args) => run_check(args),
        Command::Batch(args) => run_batch(args),
    }
}

// ----- input assembly -----------------------------------------------------

fn collect_symbols(ast: &Ast, out: &mut Vec<String>) {
    match ast {
        Ast::Number(_) => {}
        Ast::Variable(name) => {
            if !out.iter().any(|n| n == name) {
                out.push(name.clone());
            }
        }
        Ast::Call(_, a) | Ast::Unary(_, a) => collect_symbols(a, out),
        Ast::Binary(_, a, b) => {
            collect_symbols(a, out);
            collect_symbols(b, out);
        }
    }
}

fn parse_dim_token(tok: &str) -> Result<Dim, String> {
    let tok = tok.trim();
    if tok.is_empty() {
        return Err("empty dimension".into());
    }
    if let Ok(n) = tok.parse::<usize>() {
        Ok(Dim::Fixed(n))
    } else if tok.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        Ok(Dim::Sym(tok.to_string()))
    } else {
        Err(format!("bad dimension token `{tok}`"))
    }
}

/// Parses "X:m*n,w:n,y:m,A:n*n:psd" into per-symbol shapes.
fn parse_dims(spec: &str) -> Result<Vec<(String, Shape, bool)>, String> {
    let mut out = Vec::new();
    for item in spec.split(',') {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        let mut parts: Vec<&str> = item.split(':').map(str::trim).collect();
        let psd = parts.last() == Some(&"psd");
        if psd {
            parts.pop();
        }
        let (name, shape) = match parts.as_slice() {
            [name] => (*name, Shape::Scalar),
            [name, dims] => {
                let shape = match dims.split_once('*') {
                    Some((r, c)) => Shape::Matrix(parse_dim_token(r)?, parse_dim_token(c)?),
                    None => Shape::Vector(parse_dim_token(dims)?),
                };
                (*name, shape)
            }
            _ => return Err(format!("bad dims entry `{item}`")),
        };
        if psd && !shape.is_matrix() {
            return Err(format!("psd declaration on non-matrix symbol `{name}`"));
        }
        out.push((name.to_string(), shape, psd));
    }
    Ok(out)
}

fn build_problem(common: &CommonArgs) -> Result<Problem, String> {
    let ast = parse(&common.expression).map_err(|e| e.to_string())?;
    let assumptions = parse_assumptions(&common.assume).map_err(|e| e.to_string())?;
    let declared = parse_dims(&common.dims)?;
    let mut names = Vec::new();
    collect_symbols(&ast, &mut names);
    let wrt = match &common.wrt {
        Some(w) => w.clone(),
        None if names.iter().any(|n| n == "x") => "x".to_string(),
        None if names.len() == 1 => names[0].clone(),
        None => {
            return Err(format!(
                "--wrt is required: no symbol `x` and candidates are {}",
                names.join(", ")
            ))
        }
    };
    if !names.iter().any(|n| n == &wrt) {
        return Err(format!("--wrt symbol `{wrt}` does not appear in the expression"));
    }
    let mut symbols = SymbolTable::new();
    for (name, shape, psd) in &declared {
        let role = if name == &wrt { Role::Variable } else { Role::Parameter };
        symbols.declare(name, shape.clone(), role);
        if *psd {
            symbols.declare_psd(name);
        }
    }
    // Undeclared symbols default to scalar parameters; the wrt symbol is the
    // only variable.
    for name in &names {
        if !symbols.contains(name) {
            let role = if name == &wrt { Role::Variable } else { Role::Parameter };
            symbols.declare(name, Shape::Scalar, role);
        }
    }
    let wrt_shape = symbols.get(&wrt).unwrap().shape.clone();
    if wrt_shape.is_matrix() {
        return Err("matrix-valued differentiation variables are not supported".into());
    }
    let mut store = DagStore::new();
    let root = lower(&mut store, &ast, &symbols).map_err(|e| e.to_string())?;
    if common.dump_dag {
        eprintln!("{}", serde_json::to_string_pretty(&dump_json(&store, root)).unwrap());
    }
    Ok(Problem {
        store,
        root,
        symbols,
        assumptions,
        wrt,
        wrt_shape,
    })
}

fn seed_from(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("CONVEXCERT_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(0)
}

// ----- output -------------------------------------------------------------

fn value_to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::Scalar(s) => serde_json::json!(s),
        Value::Vector(x) => serde_json::json!(x.iter().collect::<Vec<_>>()),
        Value::Matrix(m) => serde_json::json!(m
            .row_iter()
            .map(|r| r.iter().copied().collect::<Vec<f64>>())
            .collect::<Vec<_>>()),
    }
}

fn witness_report(binding: &Binding, eigenvalue: f64) -> WitnessReport {
    let point: BTreeMap<String, serde_json::Value> = binding
        .values
        .iter()
        .map(|(k, v)| (k.clone(), value_to_json(v)))
        .collect();
    WitnessReport { point, eigenvalue }
}

fn print_certificate(cert: &Certificate, json: bool, blocking: Option<&str>) {
    if json {
        out!("{}", cert.to_json());
        return;
    }
    match cert.verdict {
        Verdict::Unknown => out!("verdict: unknown (not certified)"),
        v => out!("verdict: {}", v.label()),
    }
    out!(
        "method: {}",
        match cert.method {
            crate::certificate::Method::Hessian => "hessian",
            crate::certificate::Method::Dcp => "dcp",
        }
    );
    if let Some(h) = &cert.hessian_text {
        out!("hessian: {h}");
    }
    if let Some(b) = blocking {
        out!("blocked-at: {b}");
    }
    if let Some(w) = &cert.witness {
        out!(
            "witness: eigenvalue {} at {}",
            w.eigenvalue,
            serde_json::to_string(&w.point).unwrap()
        );
    }
    out!("trace:");
    for e in &cert.trace {
        let bindings = if e.bindings.is_empty() {
            String::new()
        } else {
            let rendered: Vec<String> =
                e.bindings.iter().map(|(k, v)| format!("{k}={v}")).collect();
            format!(" with {}", rendered.join(", "))
        };
        out!("  [{}] {} : {} ({}{})", e.node, e.expr, e.info, e.rule, bindings);
    }
}

// ----- subcommands --------------------------------------------------------

fn hessian_outcome(p: &mut Problem) -> Result<CertifyOutcome, String> {
    certify(
        &mut p.store,
        p.root,
        &p.wrt,
        &p.wrt_shape.clone(),
        &p.symbols,
        &p.assumptions,
    )
    .map_err(|e| e.to_string())
}

fn run_certify(args: CertifyArgs) -> Result<i32, String> {
    let mut p = build_problem(&args.common)?;
    let config = SampleConfig {
        trials: args.trials,
        seed: seed_from(args.seed),
        ..SampleConfig::default()
    };
    let mut exit = 0;
    if args.method == "hessian" || args.method == "both" {
        let mut outcome = hessian_outcome(&mut p)?;
        if args.dump_hessian {
            eprintln!(
                "{}",
                serde_json::to_string_pretty(&dump_json(&p.store, outcome.hessian)).unwrap()
            );
        }
        if args.falsify && outcome.certificate.verdict == Verdict::Unknown {
            let constraints =
                oracle::lower_constraints(&mut p.store, &p.symbols, &p.assumptions);
            let found = oracle::falsify(
                &p.store,
                outcome.hessian,
                &p.symbols,
                &p.assumptions,
                &constraints,
                &config,
            )
            .map_err(|e| e.to_string())?;
            if let Some(w) = found {
                outcome.certificate.verdict = Verdict::NonConvexWitness;
                outcome.certificate.witness = Some(witness_report(&w.binding, w.eigenvalue));
            }
        }
        let blocking = outcome
            .blocking
            .as_ref()
            .map(|e| format!("[{}] {} : {}", e.node, e.expr, e.info));
        print_certificate(&outcome.certificate, args.common.json, blocking.as_deref());
        exit = outcome.certificate.verdict.exit_code();
    }
    if args.method == "dcp" || args.method == "both" {
        let (cert, _) = dcp_certify(
            &mut p.store,
            p.root,
            &p.symbols,
            &p.assumptions,
            args.dcp_extended_atoms,
        )
        .map_err(|e| e.to_string())?;
        print_certificate(&cert, args.common.json, None);
        if args.method == "dcp" {
            exit = cert.verdict.exit_code();
        }
    }
    Ok(exit)
}

fn run_hessian(common: CommonArgs) -> Result<i32, String> {
    let mut p = build_problem(&common)?;
    let outcome = hessian_outcome(&mut p)?;
    let gradient = render_node(&p.store, outcome.gradient);
    let hessian = render_node(&p.store, outcome.hessian);
    if common.json {
        out!(
            "{}",
            serde_json::json!({ "gradient": gradient, "hessian": hessian })
        );
    } else {
        out!("gradient: {gradient}");
        out!("hessian: {hessian}");
    }
    Ok(0)
}

fn run_dcp(args: DcpArgs) -> Result<i32, String> {
    let mut p = build_problem(&args.common)?;
    let (cert, _) = dcp_certify(
        &mut p.store,
        p.root,
        &p.symbols,
        &p.assumptions,
        args.dcp_extended_atoms,
    )
    .map_err(|e| e.to_string())?;
    print_certificate(&cert, args.common.json, None);
    Ok(cert.verdict.exit_code())
}

fn run_check(args: CheckArgs) -> Result<i32, String> {
    let mut p = build_problem(&args.common)?;
    let outcome = hessian_outcome(&mut p)?;
    let config = SampleConfig {
        trials: args.trials,
        seed: seed_from(args.seed),
        ..SampleConfig::default()
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut min_seen = f64::INFINITY;
    let constraints = oracle::lower_constraints(&mut p.store, &p.symbols, &p.assumptions);
    for trial in 0..config.trials {
        let binding = oracle::sample_feasible(&p.symbols, &p.assumptions, &config, trial)
            .map_err(|e| e.to_string())?;
        if !oracle::constraints_hold(&p.store, &constraints, &binding) {
            continue;
        }
        let line = match oracle::min_quadratic_form(&p.store, outcome.hessian, &binding) {
            Ok(min) => {
                min_seen = min_seen.min(min);
                serde_json::json!({ "trial": trial, "min_eigenvalue": min })
            }
            Err(e) => serde_json::json!({ "trial": trial, "error": e.to_string() }),
        };
        writeln!(out, "{line}").map_err(|e| e.to_string())?;
    }
    writeln!(
        out,
        "{}",
        serde_json::json!({ "summary": { "trials": config.trials, "min_eigenvalue": min_seen } })
    )
    .map_err(|e| e.to_string())?;
    Ok(0)
}

// ----- batch --------------------------------------------------------------

#[derive(Clone)]
struct BatchLine {
    number: usize,
    expression: String,
    assume: String,
    dims: String,
    wrt: Option<String>,
    expected: String,
}

struct BatchResult {
    number: usize,
    expression: String,
    expected: String,
    hessian: Result<Verdict, String>,
    dcp: Option<Result<Verdict, String>>,
}

fn parse_batch_line(number: usize, line: &str) -> Result<BatchLine, String> {
    let fields: Vec<&str> = line.split(';').map(str::trim).collect();
    if fields.len() != 5 {
        return Err(format!(
            "line {number}: expected 5 `;`-separated fields, found {}",
            fields.len()
        ));
    }
    Ok(BatchLine {
        number,
        expression: fields[0].to_string(),
        assume: fields[1].to_string(),
        dims: fields[2].to_string(),
        wrt: if fields[3].is_empty() {
            None
        } else {
            Some(fields[3].to_string())
        },
        expected: fields[4].to_string(),
    })
}

fn run_line(line: &BatchLine, compare_dcp: bool, extended: bool) -> BatchResult {
    let common = CommonArgs {
        expression: line.expression.clone(),
        assume: line.assume.clone(),
        dims: line.dims.clone(),
        wrt: line.wrt.clone(),
        json: false,
        dump_dag: false,
    };
    let hessian = build_problem(&common)
        .and_then(|mut p| hessian_outcome(&mut p).map(|o| o.certificate.verdict));
    let dcp = compare_dcp.then(|| {
        build_problem(&common).and_then(|mut p| {
            dcp_certify(&mut p.store, p.root, &p.symbols, &p.assumptions, extended)
                .map(|(c, _)| c.verdict)
                .map_err(|e| e.to_string())
        })
    });
    BatchResult {
        number: line.number,
        expression: line.expression.clone(),
        expected: line.expected.clone(),
        hessian,
        dcp,
    }
}

fn run_batch_lines(
    lines: Vec<BatchLine>,
    compare_dcp: bool,
    extended: bool,
) -> Vec<BatchResult> {
    // Process lines in parallel, then restore input order for deterministic
    // output.
    let mut results: Vec<BatchResult> = Vec::with_capacity(lines.len());
    std::thread::scope(|scope| {
        let workers = std::thread::available_parallelism().map_or(4, |n| n.get());
        let chunk = lines.len().div_ceil(workers.max(1)).max(1);
        let handles: Vec<_> = lines
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|l| run_line(l, compare_dcp, extended)).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            results.extend(h.join().expect("batch worker panicked"));
        }
    });
    results.sort_by_key(|r| r.number);
    results
}

fn run_batch(args: BatchArgs) -> Result<i32, String> {
    let text = std::fs::read_to_string(&args.file)
        .map_err(|e| format!("{}: {e}", args.file.display()))?;
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        lines.push(parse_batch_line(i + 1, trimmed)?);
    }
    let results = run_batch_lines(lines, args.compare_dcp, args.dcp_extended_atoms);
    let mut mismatches = 0usize;
    let mut hessian_counts: HashMap<&'static str, usize> = HashMap::new();
    let mut dcp_counts: HashMap<&'static str, usize> = HashMap::new();
    for r in &results {
        let (got, detail) = match &r.hessian {
            Ok(v) => (v.label(), String::new()),
            Err(e) => ("error", format!(" ({e})")),
        };
        *hessian_counts.entry(got).or_default() += 1;
        let ok = got == r.expected;
        if !ok {
            mismatches += 1;
        }
        let mark = if ok { "ok" } else { "MISMATCH" };
        let mut row = format!(
            "line {:>3}  {:<10} expected {:<10} {}{}  {}",
            r.number, got, r.expected, mark, detail, r.expression
        );
        if let Some(d) = &r.dcp {
            let dl = match d {
                Ok(v) => v.label(),
                Err(_) => "error",
            };
            *dcp_counts.entry(dl).or_default() += 1;
            row.push_str(&format!("  [dcp: {dl}]"));
        }
        out!("{row}");
    }
    let render_counts = |counts: &HashMap<&'static str, usize>| {
        let mut items: Vec<_> = counts.iter().collect();
        items.sort();
        items
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    out!(
        "summary: {} lines, {} mismatches; hessian: {}",
        results.len(),
        mismatches,
        render_counts(&hessian_counts)
    );
    if args.compare_dcp {
        out!("summary: dcp: {}", render_counts(&dcp_counts));
    }
    Ok(if mismatches == 0 { 0 } else { EXIT_INPUT_ERROR })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_spec_parses_shapes_and_psd() {
        let parsed = parse_dims("X:m*n, w:n, A:n*n:psd, t").unwrap();
        assert_eq!(parsed.len(), 4);
        assert_eq!(parsed[0].1, Shape::Matrix(Dim::Sym("m".into()), Dim::Sym("n".into())));
        assert_eq!(parsed[1].1, Shape::Vector(Dim::Sym("n".into())));
        assert!(parsed[2].2);
        assert_eq!(parsed[3].1, Shape::Scalar);
    }

    #[test]
    fn psd_on_vector_is_rejected() {
        assert!(parse_dims("v:n:psd").is_err());
    }

    #[test]
    fn default_wrt_prefers_x() {
        let common = CommonArgs {
            expression: "x*p".into(),
            assume: String::new(),
            dims: String::new(),
            wrt: None,
            json: false,
            dump_dag: false,
        };
        let p = build_problem(&common).unwrap();
        assert_eq!(p.wrt, "x");
        assert_eq!(p.symbols.get("p").unwrap().role, Role::Parameter);
    }

    #[test]
    fn missing_wrt_without_x_is_ambiguous() {
        let common = CommonArgs {
            expression: "a*b".into(),
            assume: String::new(),
            dims: String::new(),
            wrt: None,
            json: false,
            dump_dag: false,
        };
        assert!(build_problem(&common).is_err());
    }

    #[test]
    fn single_symbol_is_unambiguous() {
        let common = CommonArgs {
            expression: "t^2".into(),
            assume: String::new(),
            dims: String::new(),
            wrt: None,
            json: false,
            dump_dag: false,
        };
        let p = build_problem(&common).unwrap();
        assert_eq!(p.wrt, "t");
    }

    #[test]
    fn batch_line_needs_five_fields() {
        assert!(parse_batch_line(1, "x^2 ; ; ; x").is_err());
        let l = parse_batch_line(1, "x^2 ; ; ; x ; convex").unwrap();
        assert_eq!(l.expression, "x^2");
        assert_eq!(l.expected, "convex");
        assert!(l.wrt.as_deref() == Some("x"));
    }
}
