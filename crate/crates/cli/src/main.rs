use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rasp_forge::compiler::{compile, outputs_agree, CompileOptions, NUMERICAL_TOLERANCE};
use rasp_forge::compression::{
    self, diagnostics, diagnostics_csv, eval_inputs, metrics_csv, pca_baseline, round_trip_heatmap, train,
    CompressionConfig, DiagnosticsReport, LayerTarget,
};
use rasp_forge::frontend::{list_builtins, load_builtin, parse};
use rasp_forge::rasp::{Interpreter, Program};
use rasp_forge::runtime::{export_trace, load_weights, save_weights, CompiledModel, TraceFormat};
use rasp_forge::Value;

const DEFAULT_PRECISION: usize = 4;

/// `println!` that ignores write errors, so a closed pipe (`| head`) ends
/// the output quietly instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(name = "rasp-forge", version, about = "Compile RASP programs into transformer weights, run, trace and compress them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compile a program and write the model weights as JSON.
    Compile {
        #[command(flatten)]
        program: ProgramArgs,
        #[command(flatten)]
        options: CompileArgs,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Run a compiled model and print its decoded outputs.
    Run {
        model: PathBuf,
        #[arg(long)]
        input: String,
        /// Compare against the interpreter on the same program.
        #[arg(long, requires = "program_source")]
        check_oracle: bool,
        #[command(flatten)]
        program: ProgramArgs,
    },
    /// Write the residual stream of one forward pass.
    Trace {
        model: PathBuf,
        #[arg(long)]
        input: String,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Train a projection of the residual stream and write W, metrics and
    /// diagnostics into a directory.
    Compress {
        model: PathBuf,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Use the long 3e5-step schedule.
        #[arg(long, conflicts_with = "steps")]
        full_schedule: bool,
        #[arg(long)]
        layer_loss_weight: Option<f64>,
        /// Compare the residual stream after each sublayer, instead of the
        /// sublayer's update, in the layer loss.
        #[arg(long)]
        layer_loss_on_residual: bool,
        /// Heatmap format for the round-trip operator.
        #[arg(long, default_value = "svg")]
        format: String,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    /// Recompute diagnostics for a saved projection, or for a PCA baseline.
    Diagnose {
        model: PathBuf,
        #[arg(long, required_unless_present = "pca", conflicts_with = "pca")]
        w: Option<PathBuf>,
        /// Use the top-`d` principal components instead of a trained W.
        #[arg(long, requires = "d")]
        pca: bool,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long, default_value_t = 256)]
        eval_size: usize,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(short = 'o', long = "output")]
        output: Option<PathBuf>,
    },
    /// List the builtin programs and their parameters.
    ListBuiltins,
}

#[derive(Args)]
#[group(id = "program_source", multiple = false)]
struct SourceArgs {
    #[arg(long)]
    builtin: Option<String>,
    #[arg(long)]
    source: Option<PathBuf>,
}

#[derive(Args)]
struct ProgramArgs {
    #[command(flatten)]
    from: SourceArgs,
    /// Builtin parameter as `name=value`; may be repeated.
    #[arg(long = "param", value_name = "NAME=VALUE")]
    params: Vec<String>,
}

#[derive(Args)]
struct CompileArgs {
    /// Comma-separated tokens; entries that read as numbers are numeric.
    #[arg(long)]
    vocab: String,
    #[arg(long)]
    max_seq_len: usize,
    #[arg(long)]
    causal: bool,
    #[arg(long)]
    inv_temperature: Option<f64>,
}

/// Failure classes, each with its own exit code.
enum Failure {
    Usage(String),
    Compile(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Compile(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Compile(m) | Failure::Runtime(m) => m,
        }
    }
}

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}
fn compile_err(e: impl Display) -> Failure {
    Failure::Compile(e.to_string())
}
fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Compile {
            program,
            options,
            output,
        } => {
            let opts = compile_options(&options)?;
            let prog = load_program(&program, Some(opts.max_seq_len))?;
            let compiled = compile(&prog, &opts).map_err(compile_err)?;
            save_weights(&compiled.model, &output).map_err(runtime)?;
            let c = &compiled.model.config;
            out!(
                "wrote {}: {} blocks, residual width {}, heads {:?}, mlp widths {:?}",
                output.display(),
                c.num_blocks,
                c.d_model,
                c.heads_per_layer,
                c.mlp_hidden_sizes
            );
            Ok(())
        }
        Command::Run {
            model,
            input,
            check_oracle,
            program,
        } => {
            let model = read_model(&model)?;
            let tokens = parse_input(&input);
            let outputs = model.run(&tokens).map_err(runtime)?;
            out!("{}", format_outputs(&outputs, precision()));
            if check_oracle {
                let prog = load_program(&program, Some(model.config.max_seq_len - 1))?;
                let expected = Interpreter::new(&prog)
                    .causal(model.config.causal)
                    .run(&tokens)
                    .map_err(runtime)?;
                let kind = model.weights.unembed.kind;
                let bad: Vec<String> = expected
                    .iter()
                    .zip(&outputs)
                    .enumerate()
                    .filter(|(_, (e, a))| !outputs_agree(kind, e, a, NUMERICAL_TOLERANCE))
                    .map(|(i, (e, a))| format!("position {i}: interpreter {} vs model {}", show(e, 17), show(a, 17)))
                    .collect();
                if !bad.is_empty() {
                    return Err(runtime(format!("oracle mismatch; {}", bad.join("; "))));
                }
                eprintln!("oracle check passed");
            }
            Ok(())
        }
        Command::Trace {
            model,
            input,
            format,
            output,
        } => {
            let format: TraceFormat = format.parse().map_err(usage)?;
            let model = read_model(&model)?;
            let (_, trace) = model.forward(&parse_input(&input), true).map_err(runtime)?;
            let trace = trace.expect("trace requested");
            std::fs::write(&output, export_trace(&trace, format)).map_err(runtime)?;
            out!("wrote {} ({} panels)", output.display(), trace.snapshots.len());
            Ok(())
        }
        Command::Compress {
            model,
            d,
            steps,
            seed,
            batch_size,
            full_schedule,
            layer_loss_weight,
            layer_loss_on_residual,
            format,
            output,
        } => {
            let format: TraceFormat = format.parse().map_err(usage)?;
            let model = read_model(&model)?;
            let mut config = CompressionConfig::new(d);
            if full_schedule {
                config = config.full_schedule();
            }
            config.steps = steps.unwrap_or(config.steps);
            config.batch_size = batch_size.unwrap_or(config.batch_size);
            config.layer_loss_weight = layer_loss_weight.unwrap_or(config.layer_loss_weight);
            config.seed = seed;
            if layer_loss_on_residual {
                config.layer_target = LayerTarget::Residual;
            }
            config.check(model.config.d_model).map_err(usage)?;
            let state = train(&model, &config).map_err(runtime)?;
            std::fs::create_dir_all(&output).map_err(runtime)?;
            compression::save_w(&state.w, output.join("w.json")).map_err(runtime)?;
            write(&output.join("metrics.csv"), metrics_csv(&state.history).as_bytes())?;
            let report =
                diagnostics(&model, &state.w, &eval_inputs(&model, config.eval_size)).map_err(runtime)?;
            write_report(&report, &output, format)?;
            let last = state.history.last().expect("step 0 is always recorded");
            let p = precision();
            out!(
                "d={d} steps={} l_out={} l_layer={} accuracy={}",
                last.step,
                fmt_num(last.l_out, p),
                fmt_num(last.l_layer, p),
                fmt_num(last.accuracy, p)
            );
            print_report(&report);
            Ok(())
        }
        Command::Diagnose {
            model,
            w,
            pca,
            d,
            eval_size,
            format,
            output,
        } => {
            let format: TraceFormat = format.parse().map_err(usage)?;
            let model = read_model(&model)?;
            let inputs = eval_inputs(&model, eval_size);
            let w = if pca {
                pca_baseline(&model, &inputs, d.expect("clap requires --d")).map_err(usage)?
            } else {
                compression::load_w(w.expect("clap requires --w")).map_err(runtime)?
            };
            let report = diagnostics(&model, &w, &inputs).map_err(runtime)?;
            if let Some(path) = output {
                write(&path, &round_trip_heatmap(&report, format))?;
            }
            print_report(&report);
            Ok(())
        }
        Command::ListBuiltins => {
            for b in list_builtins() {
                out!("{}: {}", b.name, b.summary);
                for p in b.params {
                    match p.default {
                        Some(d) => out!("    {} (default {d}): {}", p.name, p.help),
                        None => out!("    {} (required): {}", p.name, p.help),
                    }
                }
            }
            Ok(())
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_report(report: &DiagnosticsReport, dir: &Path, format: TraceFormat) -> Result<(), Failure> {
    write(&dir.join("diagnostics.csv"), diagnostics_csv(report).as_bytes())?;
    let ext = match format {
        TraceFormat::Csv => return Ok(()),
        TraceFormat::Svg => "svg",
        TraceFormat::Pgm => "pgm",
    };
    write(&dir.join(format!("round_trip.{ext}")), &round_trip_heatmap(report, format))
}

fn print_report(report: &DiagnosticsReport) {
    let p = precision();
    let cos: Vec<String> = report.per_layer_cosine.iter().map(|c| fmt_num(*c, p)).collect();
    out!("accuracy {}", fmt_num(report.accuracy, p));
    out!("per-layer cosine [{}]", cos.join(", "));
}

fn read_model(path: &Path) -> Result<CompiledModel, Failure> {
    load_weights(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn compile_options(args: &CompileArgs) -> Result<CompileOptions, Failure> {
    let vocab: Vec<Value> = args
        .vocab
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(Value::parse_token)
        .collect();
    if vocab.is_empty() {
        return Err(usage("--vocab needs at least one token"));
    }
    let mut opts = CompileOptions::new(vocab, args.max_seq_len).causal(args.causal);
    if let Some(t) = args.inv_temperature {
        opts = opts.inv_temperature(t);
    }
    Ok(opts)
}

/// Loads `--builtin` (with its parameters) or parses `--source`. A `sort`
/// without an explicit context length gets the model's maximum length.
fn load_program(args: &ProgramArgs, max_seq_len: Option<usize>) -> Result<Program, Failure> {
    match (&args.from.builtin, &args.from.source) {
        (Some(name), None) => {
            let mut params = BTreeMap::new();
            for p in &args.params {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| usage(format!("--param expects NAME=VALUE, got `{p}`")))?;
                params.insert(k.trim().to_string(), v.trim().to_string());
            }
            if name == "sort" && !params.contains_key("context_length") {
                if let Some(n) = max_seq_len {
                    params.insert("context_length".into(), n.to_string());
                }
            }
            load_builtin(name, &params).map_err(|e| match e {
                rasp_forge::frontend::FrontendError::UnknownBuiltin(_)
                | rasp_forge::frontend::FrontendError::MissingParam { .. }
                | rasp_forge::frontend::FrontendError::BadParam { .. } => usage(e),
                _ => compile_err(e),
            })
        }
        (None, Some(path)) => {
            if !args.params.is_empty() {
                return Err(usage("--param only applies to --builtin"));
            }
            let src = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            parse(&src).map_err(compile_err)
        }
        _ => Err(usage("pass exactly one of --builtin or --source")),
    }
}

/// An input containing a comma is a list of tokens; otherwise every
/// character is one token.
fn parse_input(input: &str) -> Vec<Value> {
    if input.contains(',') {
        input.split(',').map(|t| Value::parse_token(t.trim())).collect()
    } else {
        input.chars().map(|c| Value::parse_token(&c.to_string())).collect()
    }
}

fn precision() -> usize {
    std::env::var("RASP_FORGE_PRECISION")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&p| p >= 1)
        .unwrap_or(DEFAULT_PRECISION)
}

/// Rounds to `digits` significant digits, then prints the shortest decimal
/// that reads back as the rounded value.
fn fmt_num(x: f64, digits: usize) -> String {
    if !x.is_finite() || x == 0.0 {
        return format!("{}", if x == 0.0 { 0.0 } else { x });
    }
    let rounded: f64 = format!("{:.*e}", digits - 1, x).parse().expect("formatted float parses");
    format!("{rounded}")
}

fn show(v: &Option<Value>, digits: usize) -> String {
    match v {
        None => "None".into(),
        Some(Value::Num(x)) => fmt_num(*x, digits),
        Some(v) => v.to_string(),
    }
}

fn format_outputs(outputs: &[Option<Value>], digits: usize) -> String {
    let items: Vec<String> = outputs.iter().map(|v| show(v, digits)).collect();
    format!("[{}]", items.join(", "))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(fmt_num(1.0, 4), "1");
        assert_eq!(fmt_num(1.0 / 3.0, 4), "0.3333");
        assert_eq!(fmt_num(2.0 / 3.0, 4), "0.6667");
        assert_eq!(fmt_num(-0.0, 4), "0");
        assert_eq!(fmt_num(123456.0, 4), "123500");
        assert_eq!(fmt_num(1.0 / 3.0, 2), "0.33");
    }

    #[test]
    fn input_splitting() {
        assert_eq!(parse_input("ab"), vec![Value::str("a"), Value::str("b")]);
        assert_eq!(parse_input("10,2"), vec![Value::num(10.0), Value::num(2.0)]);
        assert_eq!(parse_input(""), Vec::<Value>::new());
    }

    #[test]
    fn output_list() {
        let out = vec![Some(Value::num(1.0)), None, Some(Value::str("a")), Some(Value::Bool(true))];
        assert_eq!(format_outputs(&out, 4), "[1, None, a, true]");
    }
}
