// SPDX-License-Identifier: MIT OR Apache-2.0

//! `rscope`: runs the counting-failure diagnostics over trace directories.
//!
//! Exit status is 0 on success, 2 when input traces fail validation and 3
//! for configuration or usage errors.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rscope_core::attn::HeadAggregation;
use rscope_core::bundle::write_fixture_bundle;
use rscope_core::container::{list_trace_files, read_trace, write_trace};
use rscope_core::decomp::AblationSpec;
use rscope_core::fixture::{apply_ablation, generate_condition, FixtureConfig, WriterSpec};
use rscope_core::probes::ProbeCondition;
use rscope_core::prompts::{
    gen_condition_grid, gen_probe_suite, gen_sweeps_with, write_jsonl, ParaphraseTemplates,
};
use rscope_core::report::{
    self, behavior_section, run, run_config, to_json, AblationInputs, AnomalyInputs,
    AttentionInputs, BehaviorInput, DecompInputs, DiagnosisReport, LensInputs, ProbeInputs,
    RunConfig, Section, Settings, SettingsOverride,
};
use rscope_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "rscope",
    version,
    about = "Residual-stream diagnostics for counting failures"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// Trace file or directory the analysis reads.
    #[arg(long, global = true, value_name = "PATH")]
    traces: Option<PathBuf>,
    /// Output directory; results go to stdout when absent.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Ridge penalty for the probes.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Probe R² needed at the lock-in layer for a routing verdict.
    #[arg(long, global = true)]
    r2_threshold: Option<f64>,
    /// Intruder attention ratio above which a layer counts as over-attending.
    #[arg(long, global = true)]
    ratio_threshold: Option<f64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Md,
    Csv,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Md => "md",
            Format::Csv => "csv",
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check trace containers and their structural invariants.
    Validate {
        /// Files or directories; defaults to --traces.
        paths: Vec<PathBuf>,
    },
    /// Write synthetic traces with a known answer.
    GenFixture(GenFixture),
    /// Write prompt specs as JSON lines.
    Prompts {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// JSON map from paraphrase name to template.
        #[arg(long)]
        templates: Option<PathBuf>,
    },
    /// Leave-one-out ridge probes per layer. --traces holds `repeated/` and
    /// `unique/`, or is itself one condition.
    Probe,
    /// Logit-lens trajectory of one trace.
    Lens { trace: Option<PathBuf> },
    /// Sublayer decomposition around the writer.
    Decomp(DecompArgs),
    /// Attention entropy and intruder ratios.
    Attn(AttnArgs),
    /// Behavioral analytics over recorded outputs.
    Behave {
        /// Behavior JSON; defaults to --traces.
        input: Option<PathBuf>,
    },
    /// Run a full config and write report.json and report.md.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Suite {
    Probe,
    Grid,
    Sweeps,
    All,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Cond {
    Repeated,
    Unique,
}

#[derive(Args, Debug)]
struct GenFixture {
    /// Fixture config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    /// Planted MLP writer as LAYER:DIGIT:MARGIN.
    #[arg(long, value_name = "L:D:M")]
    writer: Option<String>,
    /// List length.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, value_enum, default_value_t = Cond::Repeated)]
    condition: Cond,
    /// Zero a sublayer, as LAYER:mlp|attn:zero.
    #[arg(long)]
    ablate: Option<String>,
    /// Write a complete bundle with a run config instead of one trace.
    #[arg(long)]
    bundle: bool,
}

#[derive(Args, Debug)]
struct DecompArgs {
    /// Baseline trace; defaults to --traces.
    trace: Option<PathBuf>,
    /// Attractor digit; defaults to the trace's recorded output.
    #[arg(long)]
    attractor: Option<u32>,
    /// Inclusive layer range as A:B.
    #[arg(long, value_name = "A:B")]
    layers: Option<String>,
    /// Writer layer for the per-n check; defaults to the detected writer.
    #[arg(long)]
    writer_layer: Option<usize>,
    /// Directory of traces at several list lengths.
    #[arg(long)]
    per_n: Option<PathBuf>,
    /// Unablated traces paired with --ablated by list length.
    #[arg(long, requires = "ablated")]
    normal: Option<PathBuf>,
    #[arg(long, requires = "normal")]
    ablated: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttnArgs {
    /// Intruder-condition trace.
    #[arg(long, requires = "p1")]
    p2: Option<PathBuf>,
    /// Matched baseline trace.
    #[arg(long, requires = "p2")]
    p1: Option<PathBuf>,
    #[arg(long)]
    intruder_pos: Option<usize>,
    /// Layers that get per-head ratios.
    #[arg(long, value_delimiter = ',')]
    head_layers: Vec<usize>,
    /// Average per-head distributions instead of renormalizing the head mean.
    #[arg(long)]
    per_head: bool,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

fn io_err(path: &Path, e: io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl Global {
    fn settings(&self) -> Settings {
        self.overrides().apply(Settings::default())
    }

    fn overrides(&self) -> SettingsOverride {
        SettingsOverride {
            lambda: self.lambda,
            r2_threshold: self.r2_threshold,
            ratio_threshold: self.ratio_threshold,
        }
    }

    fn traces_or(&self, explicit: Option<PathBuf>, what: &str) -> Result<PathBuf> {
        explicit
            .or_else(|| self.traces.clone())
            .ok_or_else(|| usage(format!("{what}: give a path or --traces")))
    }

    /// Writes `body` to `{out}/{name}.{ext}`, or stdout.
    fn emit(&self, name: &str, body: &str) -> Result<()> {
        match &self.out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                let path = dir.join(format!("{name}.{}", self.format.ext()));
                fs::write(&path, body).map_err(|e| io_err(&path, e))?;
                println!("{}", path.display());
                Ok(())
            }
            None => {
                let mut out = io::stdout().lock();
                let _ = out.write_all(body.as_bytes());
                if !body.ends_with('\n') {
                    let _ = out.write_all(b"\n");
                }
                Ok(())
            }
        }
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// The section, or a data error naming the inputs that were missing for it.
fn section<'a, T>(s: &'a Section<T>, name: &str, skipped: &[String]) -> Result<&'a T> {
    match s {
        Section::Ok(v) => Ok(v),
        Section::Skipped { reason } => {
            let own: Vec<&str> = skipped
                .iter()
                .filter(|s| s.starts_with(name))
                .map(String::as_str)
                .collect();
            let detail = if own.is_empty() {
                reason.clone()
            } else {
                own.join("; ")
            };
            Err(Error::Data {
                field: "traces".into(),
                reason: detail,
            })
        }
    }
}

fn analyze(config: &RunConfig, g: &Global) -> Result<DiagnosisReport> {
    run_config(config, Path::new("."), g.settings())
}

fn cmd_validate(g: &Global, paths: Vec<PathBuf>) -> Result<()> {
    let paths = if paths.is_empty() {
        vec![g.traces_or(None, "validate")?]
    } else {
        paths
    };
    let mut files = Vec::new();
    for p in &paths {
        if p.is_dir() {
            files.extend(list_trace_files(p)?);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(usage("no trace files found"));
    }
    let mut rows = Vec::new();
    let mut failed = 0;
    for f in &files {
        let row = match read_trace(f) {
            Ok(t) => {
                let tok = t.verify_tokenization(t.tokens.list_span.len());
                serde_json::json!({
                    "path": f.display().to_string(),
                    "ok": true,
                    "prompt_label": t.prompt_label,
                    "n_layers": t.n_layers(),
                    "d_model": t.d_model(),
                    "span_length": tok.span_length,
                })
            }
            Err(e) => {
                failed += 1;
                serde_json::json!({
                    "path": f.display().to_string(),
                    "ok": false,
                    "error": e.to_string(),
                })
            }
        };
        rows.push(row);
    }
    let body = match g.format {
        Format::Json => serde_json::to_string_pretty(&rows).expect("json values serialize"),
        Format::Md | Format::Csv => rows
            .iter()
            .map(|r| {
                let status = if r["ok"] == true { "ok" } else { "FAIL" };
                let detail = r.get("error").or(r.get("prompt_label")).cloned();
                format!(
                    "{status} {} {}",
                    r["path"].as_str().unwrap_or_default(),
                    detail
                        .and_then(|d| d.as_str().map(str::to_string))
                        .unwrap_or_default()
                )
            })
            .collect::<Vec<_>>()
            .join("\n"),
    };
    g.emit("validate", &body)?;
    if failed > 0 {
        return Err(Error::Validation {
            field: "traces".into(),
            reason: format!("{failed} of {} traces failed validation", files.len()),
        });
    }
    Ok(())
}

fn parse_writer(s: &str) -> Result<WriterSpec> {
    let bad = || usage(format!("writer {s:?} is not LAYER:DIGIT:MARGIN"));
    let parts: Vec<&str> = s.split(':').collect();
    let [l, d, m] = parts.as_slice() else {
        return Err(bad());
    };
    Ok(WriterSpec {
        layer: l.parse().map_err(|_| bad())?,
        wrong_digit: d.parse().map_err(|_| bad())?,
        margin: m.parse().map_err(|_| bad())?,
        fires_from_n: None,
        input_digit: None,
    })
}

fn cmd_gen_fixture(g: &Global, a: GenFixture) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => FixtureConfig::default(),
    };
    if let Some(l) = a.layers {
        cfg.n_layers = l;
    }
    if let Some(d) = a.d_model {
        cfg.d_model = d;
    }
    if let Some(w) = &a.writer {
        cfg.writer = Some(parse_writer(w)?);
    }
    cfg.validate()?;
    let out = g
        .out
        .clone()
        .ok_or_else(|| usage("gen-fixture needs --out"))?;
    if a.bundle {
        let config = write_fixture_bundle(&cfg, &out)?;
        println!("{}", config.display());
        return Ok(());
    }
    let condition = match a.condition {
        Cond::Repeated => ProbeCondition::Repeated,
        Cond::Unique => ProbeCondition::Unique,
    };
    let trace = match &a.ablate {
        Some(spec) => {
            if !matches!(condition, ProbeCondition::Repeated) {
                return Err(usage("--ablate applies to the repeated condition only"));
            }
            apply_ablation(&cfg, &AblationSpec::parse(spec)?, a.n)?
        }
        None => generate_condition(&cfg, a.n, condition)?,
    };
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let path = out.join(format!("{}.rscope", trace.prompt_label));
    write_trace(&trace, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_prompts(g: &Global, suite: Suite, templates: Option<PathBuf>) -> Result<()> {
    let templates = match &templates {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ParaphraseTemplates::default(),
    };
    let specs = match suite {
        Suite::Probe => gen_probe_suite(),
        Suite::Grid => gen_condition_grid(),
        Suite::Sweeps => gen_sweeps_with(&templates)?,
        Suite::All => {
            let mut v = gen_condition_grid();
            v.extend(gen_probe_suite());
            v.extend(gen_sweeps_with(&templates)?);
            v
        }
    };
    match &g.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            let path = dir.join("prompts.jsonl");
            let f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
            write_jsonl(io::BufWriter::new(f), &specs)?;
            println!("{}", path.display());
        }
        None => write_jsonl(io::stdout().lock(), &specs)?,
    }
    Ok(())
}

fn cmd_probe(g: &Global) -> Result<()> {
    let dir = absolute(&g.traces_or(None, "probe")?);
    let (rep, uni) = (dir.join("repeated"), dir.join("unique"));
    let inputs = if rep.is_dir() || uni.is_dir() {
        ProbeInputs {
            repeated: rep.is_dir().then_some(rep),
            unique: uni.is_dir().then_some(uni),
        }
    } else {
        ProbeInputs {
            repeated: Some(dir),
            unique: None,
        }
    };
    let r = analyze(
        &RunConfig {
            probe: Some(inputs),
            ..RunConfig::default()
        },
        g,
    )?;
    let p = section(&r.probe_section, "probe", &r.skipped)?;
    let body = match g.format {
        Format::Json => to_json(p)?,
        Format::Md => report::probe_markdown(&p.table),
        Format::Csv => report::probe_csv(&p.table),
    };
    g.emit("probe", &body)
}

fn cmd_lens(g: &Global, trace: Option<PathBuf>) -> Result<()> {
    let trace = absolute(&g.traces_or(trace, "lens")?);
    let r = analyze(
        &RunConfig {
            lens: Some(LensInputs { trace }),
            ..RunConfig::default()
        },
        g,
    )?;
    let l = section(&r.lens_section, "lens", &r.skipped)?;
    let body = match g.format {
        Format::Json => to_json(l)?,
        Format::Md => report::lens_markdown(l),
        Format::Csv => report::lens_csv(&l.trajectory),
    };
    g.emit("lens", &body)
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || usage(format!("layer range {s:?} is not A:B"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
}

fn cmd_decomp(g: &Global, a: DecompArgs) -> Result<()> {
    let trace = absolute(&g.traces_or(a.trace, "decomp")?);
    let layers = a.layers.as_deref().map(parse_range).transpose()?;
    let ablation = match (a.normal, a.ablated) {
        (Some(n), Some(ab)) => Some(AblationInputs {
            normal: absolute(&n),
            ablated: absolute(&ab),
        }),
        _ => None,
    };
    let r = analyze(
        &RunConfig {
            lens: Some(LensInputs {
                trace: trace.clone(),
            }),
            decomp: Some(DecompInputs {
                trace: Some(trace),
                layers,
                attractor: a.attractor,
                writer_layer: a.writer_layer,
                per_n: a.per_n.as_deref().map(absolute),
                ablation,
                paraphrase: None,
            }),
            ..RunConfig::default()
        },
        g,
    )?;
    let d = section(&r.decomp_section, "decomp", &r.skipped)?;
    let body = match g.format {
        Format::Json => to_json(d)?,
        Format::Md => report::decomp_markdown(d),
        Format::Csv => report::decomp_csv(&d.records),
    };
    g.emit("decomp", &body)
}

fn cmd_attn(g: &Global, a: AttnArgs) -> Result<()> {
    let anomaly = match (a.p2, a.p1) {
        (Some(p2), Some(p1)) => Some(AnomalyInputs {
            p2: absolute(&p2),
            p1: absolute(&p1),
            intruder_pos: a.intruder_pos,
            layers: a.head_layers,
        }),
        _ => None,
    };
    if anomaly.is_none() && g.traces.is_none() {
        return Err(usage("attn: give --traces or --p2/--p1"));
    }
    let r = analyze(
        &RunConfig {
            attention: Some(AttentionInputs {
                traces: g.traces.as_deref().map(absolute),
                anomaly,
                aggregation: if a.per_head {
                    HeadAggregation::PerHead
                } else {
                    HeadAggregation::MeanThenNormalize
                },
            }),
            ..RunConfig::default()
        },
        g,
    )?;
    let s = section(&r.attention_section, "attention", &r.skipped)?;
    let body = match g.format {
        Format::Json => to_json(s)?,
        Format::Md => report::attention_markdown(s),
        Format::Csv => match &s.anomaly {
            Some(an) if s.traces.is_empty() => report::anomaly_csv(an),
            _ => report::attention_csv(s),
        },
    };
    g.emit("attn", &body)
}

fn cmd_behave(g: &Global, input: Option<PathBuf>) -> Result<()> {
    let path = g.traces_or(input, "behave")?;
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let input: BehaviorInput = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let b = behavior_section(&input)?;
    let body = match g.format {
        Format::Json => to_json(&b)?,
        Format::Md => report::behavior_markdown(&b),
        Format::Csv => report::behavior_csv(&b),
    };
    g.emit("behave", &body)
}

fn cmd_report(g: &Global, config: PathBuf) -> Result<()> {
    if g.format == Format::Csv {
        return Err(usage("report writes json and md; csv is per analysis"));
    }
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let r = run(&config, &out, &g.overrides())?;
    println!("verdict: {}", r.verdict.as_str());
    for e in &r.evidence {
        println!("  {} ({})", e.claim, e.source);
    }
    for s in &r.skipped {
        println!("  skipped {s}");
    }
    println!("{}", out.join("report.json").display());
    println!("{}", out.join("report.md").display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let g = cli.global;
    match cli.command {
        Command::Validate { paths } => cmd_validate(&g, paths),
        Command::GenFixture(a) => cmd_gen_fixture(&g, a),
        Command::Prompts { suite, templates } => cmd_prompts(&g, suite, templates),
        Command::Probe => cmd_probe(&g),
        Command::Lens { trace } => cmd_lens(&g, trace),
        Command::Decomp(a) => cmd_decomp(&g, a),
        Command::Attn(a) => cmd_attn(&g, a),
        Command::Behave { input } => cmd_behave(&g, input),
        Command::Report { config } => cmd_report(&g, config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rscope: {e}");
            ExitCode::from(if e.is_validation_failure() { 2 } else { 3 })
        }
    }
}
