//! `valdec`: train tabular PPO models on toy token MDPs, decode from them
//! with value-guided search or the usual baselines, and compare methods.

mod failure;
mod run;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use valdec_core::config;
use valdec_core::metrics::{compute_metrics, MetricsReport, PromptSamples};
use valdec_core::protocol::MockServer;
use valdec_core::{enumerate_returns, train, HashedLogits, Policy, PpoConfig, PpoState, Token};

use failure::{fail, Class, Classify, Outcome};
use run::{Backend, ManifestBuilder, Method, RunConfig, SampleRecord};

#[derive(Parser)]
#[command(name = "valdec", version, about = "Value-guided decoding experiments on toy token MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a tabular policy/value pair with PPO and save it as an artifact.
    TrainPpo {
        /// Built-in env (sentiment, bandit, suffix, count) or a TOML/JSON env file.
        #[arg(long)]
        env: String,
        /// PPO settings (TOML or JSON); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode responses for a set of prompts with one method.
    Decode {
        #[arg(long, value_enum)]
        method: Method,
        #[command(flatten)]
        common: Common,
        /// JSON-lines file with one token array per line; random prompts when omitted.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Per-sample JSON-lines output.
        #[arg(long)]
        out: PathBuf,
        /// Address of a protocol server to evaluate states remotely.
        #[arg(long)]
        remote: Option<String>,
    },
    /// Run several methods on the same prompts and tabulate their metrics.
    Compare {
        /// Must match the model's env when given.
        #[arg(long)]
        env: Option<String>,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "mcts,top-p,best-of-n,stepwise-value")]
        methods: Vec<Method>,
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// CSV summary, one row per method.
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines report, one object per method; defaults to the CSV path with a `.jsonl` extension.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Exact optimum of the KL-penalized return by exhaustive backward induction.
    Oracle {
        #[arg(long)]
        env: String,
        /// Take policy, reference and β from this artifact; otherwise the
        /// policy equals a uniform reference and only the reward counts.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Prompt as a JSON token array; all zeros when omitted.
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Write the result here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one search hyperparameter and report MCTS metrics per value.
    Ablate {
        #[arg(long, value_enum)]
        sweep: Sweep,
        /// Comma-separated values; a standard grid when omitted.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a model over the newline-delimited JSON protocol until killed.
    ServeMock {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Hide the reference policy, as a server without one would.
        #[arg(long)]
        no_reference: bool,
        /// Hide the terminal reward.
        #[arg(long)]
        no_terminal_reward: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Trained artifact from `train-ppo`.
    #[arg(long)]
    model: PathBuf,
    /// Run settings (TOML or JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads (0 for one per core); output order does not depend on it.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum Sweep {
    #[value(name = "tau_d")]
    TauD,
    #[value(name = "tau_e")]
    TauE,
    #[value(name = "S")]
    S,
    #[value(name = "k")]
    K,
    #[value(name = "c_puct")]
    CPuct,
    #[value(name = "q_init")]
    QInit,
}

impl Sweep {
    fn name(self) -> &'static str {
        match self {
            Sweep::TauD => "tau_d",
            Sweep::TauE => "tau_e",
            Sweep::S => "S",
            Sweep::K => "k",
            Sweep::CPuct => "c_puct",
            Sweep::QInit => "q_init",
        }
    }

    fn default_values(self) -> &'static [&'static str] {
        match self {
            Sweep::TauD => &["0", "0.5", "1", "2", "4"],
            Sweep::TauE => &["0.5", "1", "2", "4"],
            Sweep::S => &["1", "2", "5", "10", "20", "50"],
            Sweep::K => &["1", "2", "5", "10", "20", "50"],
            Sweep::CPuct => &["0.5", "1", "2", "4", "8", "16"],
            Sweep::QInit => &["false", "true"],
        }
    }

    fn apply(self, c: &mut valdec_core::DecodeConfig, value: &str) -> Outcome<()> {
        let bad = |e: String| fail(Class::Config, anyhow::anyhow!("--values: {value:?} for {}: {e}", self.name()));
        let real = || value.parse::<f64>().map_err(|e| bad(e.to_string()));
        let count = || value.parse::<usize>().map_err(|e| bad(e.to_string()));
        match self {
            Sweep::TauD => c.tau_d = real()?,
            Sweep::TauE => c.tau_e = real()?,
            Sweep::S => c.num_simulations = count()?,
            Sweep::K => c.branching = count()?,
            Sweep::CPuct => c.c_puct = real()?,
            Sweep::QInit => c.q_init_from_v = value.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?,
        }
        c.validate()?;
        Ok(())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.class.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Outcome<()> {
    match command {
        Command::TrainPpo { env, config, seed, out } => train_ppo(&env, config.as_deref(), seed, &out),
        Command::Decode {
            method,
            common,
            prompts,
            out,
            remote,
        } => decode(method, &common, prompts.as_deref(), &out, remote),
        Command::Compare {
            env,
            common,
            methods,
            prompts,
            out,
            json,
        } => compare(env.as_deref(), &common, &methods, prompts.as_deref(), &out, json),
        Command::Oracle {
            env,
            model,
            prompt,
            beta,
            gamma,
            out,
        } => oracle(&env, model.as_deref(), prompt.as_deref(), beta, gamma, out.as_deref()),
        Command::Ablate {
            sweep,
            values,
            common,
            prompts,
            out,
        } => ablate(sweep, &values, &common, prompts.as_deref(), &out),
        Command::ServeMock {
            model,
            port,
            host,
            no_reference,
            no_terminal_reward,
        } => serve_mock(&model, &host, port, no_reference, no_terminal_reward),
    }
}

#[derive(Serialize)]
struct TrainRun<'a> {
    env: &'a valdec_core::ToyEnv,
    ppo: &'a PpoConfig,
}

fn train_ppo(env_spec: &str, config_path: Option<&Path>, seed: u64, out: &Path) -> Outcome<()> {
    let env = run::load_env(env_spec)?;
    let (mut config, has_reference): (PpoConfig, bool) = match config_path {
        Some(p) => {
            let raw: serde_json::Value = config::load(p)?;
            (config::load(p)?, raw.get("reference").is_some())
        }
        None => (PpoConfig::default(), false),
    };
    // an unspecified reference follows the env's vocabulary
    if !has_reference {
        config.reference = HashedLogits::new(env.vocab_size, 0, 1.0);
    }
    config.validate()?;
    let (seed, _) = run::resolve_seed(seed)?;
    let state = train(&env, &config, seed)?;
    if let Some(last) = state.history.last() {
        log::info!(
            "step {}: mean reward {:.4}, KL {:.4}, beta {:.4}",
            last.step,
            last.mean_reward,
            last.mean_kl,
            last.beta
        );
    }
    let text = state.to_json()?;
    std::fs::write(out, text).class_with(Class::Io, || format!("writing {}", out.display()))?;
    ManifestBuilder::new("train-ppo", seed, &TrainRun { env: &env, ppo: &config })?
        .input(config_path)
        .output(out)
        .write()?;
    Ok(())
}

fn decode(
    method: Method,
    common: &Common,
    prompts_path: Option<&Path>,
    out: &Path,
    remote: Option<String>,
) -> Outcome<()> {
    let model = run::load_model(&common.model)?;
    let run = run::load_run_config(common.config.as_deref())?;
    let prompts = run::load_prompts(prompts_path, &model.env, run.num_prompts, run.seed)?;
    let mcts = run.mcts_for(&model);
    let local = model.evaluator()?;
    let backend = match remote {
        Some(addr) => Backend::Remote(addr),
        None => Backend::Local(&local),
    };
    let pool = run::thread_pool(common.jobs)?;
    let records = run::decode_all(method, &model, &backend, &prompts, &run, &mcts, &pool)?;
    run::write_jsonl(out, &records)?;
    ManifestBuilder::new("decode", run.seed, &DecodeRun { method, run: &run, mcts: &mcts })?
        .input(Some(&common.model))
        .input(common.config.as_deref())
        .input(prompts_path)
        .output(out)
        .write()?;
    Ok(())
}

#[derive(Serialize)]
struct DecodeRun<'a> {
    method: Method,
    run: &'a RunConfig,
    mcts: &'a valdec_core::DecodeConfig,
}

/// Groups records by prompt, keeping prompt order.
fn by_prompt(records: &[SampleRecord]) -> Vec<PromptSamples> {
    let mut out: Vec<PromptSamples> = Vec::new();
    for r in records {
        if out.len() == r.prompt_index + 1 {
            out[r.prompt_index].samples.push(r.tokens.clone());
        } else {
            out.push(PromptSamples {
                prompt: r.prompt.clone(),
                samples: vec![r.tokens.clone()],
            });
        }
    }
    out
}

#[derive(Serialize)]
struct MethodRow {
    method: String,
    #[serde(flatten)]
    report: MetricsReport,
    evaluator_calls_per_sample: f64,
}

fn method_row(name: String, records: &[SampleRecord], model: &PpoState, run: &RunConfig) -> Outcome<MethodRow> {
    let report = compute_metrics(&by_prompt(records), &model.env, model.reference(), run.goal_threshold)?;
    let calls = records.iter().map(|r| r.evaluator_calls).sum::<usize>() as f64 / records.len().max(1) as f64;
    Ok(MethodRow {
        method: name,
        report,
        evaluator_calls_per_sample: calls,
    })
}

const METRIC_COLUMNS: [&str; 8] = [
    "mean_reward",
    "max_reward_over_n",
    "goal_rate",
    "distinct_2",
    "distinct_3",
    "ref_perplexity",
    "samples_per_prompt",
    "evaluator_calls_per_sample",
];

fn metric_cells(report: &MetricsReport, calls: f64) -> Vec<String> {
    vec![
        report.mean_reward.to_string(),
        report.max_reward_over_n.to_string(),
        report.goal_rate.to_string(),
        report.distinct_2.to_string(),
        report.distinct_3.to_string(),
        report.ref_perplexity.to_string(),
        report.samples_per_prompt.to_string(),
        calls.to_string(),
    ]
}

/// Writes a CSV whose leading `keys` columns label each row of metrics.
fn write_csv(path: &Path, keys: &[&str], rows: &[(Vec<String>, &MetricsReport, f64)]) -> Outcome<()> {
    let io = || format!("writing {}", path.display());
    let mut w = csv::Writer::from_path(path).class_with(Class::Io, io)?;
    w.write_record(keys.iter().chain(&METRIC_COLUMNS)).class_with(Class::Io, io)?;
    for (labels, report, calls) in rows {
        let mut cells = labels.clone();
        cells.extend(metric_cells(report, *calls));
        w.write_record(&cells).class_with(Class::Io, io)?;
    }
    w.flush().class_with(Class::Io, io)
}

fn compare(
    env_spec: Option<&str>,
    common: &Common,
    methods: &[Method],
    prompts_path: Option<&Path>,
    out: &Path,
    json: Option<PathBuf>,
) -> Outcome<()> {
    let model = run::load_model(&common.model)?;
    if let Some(spec) = env_spec {
        let env = run::load_env(spec)?;
        if env != model.env {
            return Err(fail(
                Class::Config,
                anyhow::anyhow!("--env {spec} does not match the env the model was trained on"),
            ));
        }
    }
    let run = run::load_run_config(common.config.as_deref())?;
    let prompts = run::load_prompts(prompts_path, &model.env, run.num_prompts, run.seed)?;
    let mcts = run.mcts_for(&model);
    let local = model.evaluator()?;
    let pool = run::thread_pool(common.jobs)?;
    let mut rows = Vec::new();
    for &m in methods {
        let records = run::decode_all(m, &model, &Backend::Local(&local), &prompts, &run, &mcts, &pool)?;
        rows.push(method_row(m.name().to_string(), &records, &model, &run)?);
    }
    let table: Vec<_> = rows
        .iter()
        .map(|r| (vec![r.method.clone()], &r.report, r.evaluator_calls_per_sample))
        .collect();
    write_csv(out, &["method"], &table)?;
    let json = json.unwrap_or_else(|| out.with_extension("jsonl"));
    run::write_jsonl(&json, &rows)?;
    ManifestBuilder::new(
        "compare",
        run.seed,
        &CompareRun {
            methods,
            run: &run,
            mcts: &mcts,
        },
    )?
    .input(Some(&common.model))
    .input(common.config.as_deref())
    .input(prompts_path)
    .output(out)
    .output(&json)
    .write()?;
    Ok(())
}

#[derive(Serialize)]
struct CompareRun<'a> {
    methods: &'a [Method],
    run: &'a RunConfig,
    mcts: &'a valdec_core::DecodeConfig,
}

#[derive(Serialize)]
struct OracleReport {
    prompt: Vec<Token>,
    beta: f64,
    gamma: f64,
    best_root_action: Token,
    #[serde(flatten)]
    result: valdec_core::OracleResult,
}

fn oracle(
    env_spec: &str,
    model_path: Option<&Path>,
    prompt: Option<&str>,
    beta: Option<f64>,
    gamma: f64,
    out: Option<&Path>,
) -> Outcome<()> {
    let (env, policy, reference, model_beta): (_, Arc<dyn Policy>, Arc<dyn Policy>, f64) = match model_path {
        Some(p) => {
            let m = run::load_model(p)?;
            let env = run::load_env(env_spec)?;
            if env != m.env {
                return Err(fail(Class::Config, anyhow::anyhow!("--env does not match the model's env")));
            }
            let r = m.reference().clone();
            (env, Arc::new(m.policy), Arc::new(r), m.beta)
        }
        None => {
            let env = run::load_env(env_spec)?;
            let u = HashedLogits::uniform(env.vocab_size);
            (env, Arc::new(u.clone()), Arc::new(u), 0.0)
        }
    };
    let beta = beta.unwrap_or(model_beta);
    if !(beta >= 0.0 && beta.is_finite()) || !(gamma > 0.0 && gamma <= 1.0) {
        return Err(fail(Class::Config, anyhow::anyhow!("need beta >= 0 and gamma in (0, 1]")));
    }
    let prompt: Vec<Token> = match prompt {
        Some(text) => serde_json::from_str(text).class_with(Class::Config, || "--prompt: expected a token array".into())?,
        None => vec![0; env.prompt_len],
    };
    let result = enumerate_returns(&env, &prompt, policy.as_ref(), reference.as_ref(), beta, gamma)?;
    let report = OracleReport {
        prompt,
        beta,
        gamma,
        best_root_action: result.best_root_action(),
        result,
    };
    match out {
        Some(path) => {
            run::write_json(path, &report)?;
            ManifestBuilder::new("oracle", 0, &serde_json::json!({"env": env, "beta": beta, "gamma": gamma}))?
                .input(model_path)
                .output(path)
                .write()?;
        }
        None => {
            let text = serde_json::to_string_pretty(&report).class(Class::Io)?;
            let mut stdout = std::io::stdout().lock();
            if let Err(e) = writeln!(stdout, "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(fail(Class::Io, e));
                }
            }
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    parameter: &'static str,
    value: String,
    #[serde(flatten)]
    report: MetricsReport,
    evaluator_calls_per_sample: f64,
}

fn ablate(sweep: Sweep, values: &[String], common: &Common, prompts_path: Option<&Path>, out: &Path) -> Outcome<()> {
    let model = run::load_model(&common.model)?;
    let run = run::load_run_config(common.config.as_deref())?;
    let prompts = run::load_prompts(prompts_path, &model.env, run.num_prompts, run.seed)?;
    let values: Vec<String> = if values.is_empty() {
        sweep.default_values().iter().map(|s| s.to_string()).collect()
    } else {
        values.to_vec()
    };
    let local = model.evaluator()?;
    let pool = run::thread_pool(common.jobs)?;
    let mut rows = Vec::new();
    for v in &values {
        let mut mcts = run.mcts_for(&model);
        sweep.apply(&mut mcts, v)?;
        let records = run::decode_all(Method::Mcts, &model, &Backend::Local(&local), &prompts, &run, &mcts, &pool)?;
        let row = method_row(String::new(), &records, &model, &run)?;
        rows.push(AblationRow {
            parameter: sweep.name(),
            value: v.clone(),
            report: row.report,
            evaluator_calls_per_sample: row.evaluator_calls_per_sample,
        });
    }
    let table: Vec<_> = rows
        .iter()
        .map(|r| (vec![r.parameter.to_string(), r.value.clone()], &r.report, r.evaluator_calls_per_sample))
        .collect();
    write_csv(out, &["parameter", "value"], &table)?;
    let goal: Vec<f64> = rows.iter().map(|r| r.report.goal_rate).collect();
    let rising = goal.windows(2).all(|w| w[1] >= w[0]);
    let mut stderr = std::io::stderr().lock();
    for r in &rows {
        let _ = writeln!(
            stderr,
            "{}={:<6} goal_rate {:.3}  mean_reward {:.4}  distinct_2 {:.3}  ref_ppl {:.3}",
            r.parameter, r.value, r.report.goal_rate, r.report.mean_reward, r.report.distinct_2, r.report.ref_perplexity
        );
    }
    let _ = writeln!(stderr, "goal rate non-decreasing over the sweep: {rising}");
    ManifestBuilder::new(
        "ablate",
        run.seed,
        &serde_json::json!({"sweep": sweep, "values": values, "run": run}),
    )?
    .input(Some(&common.model))
    .input(common.config.as_deref())
    .input(prompts_path)
    .output(out)
    .write()?;
    Ok(())
}

fn serve_mock(model_path: &Path, host: &str, port: u16, no_reference: bool, no_terminal_reward: bool) -> Outcome<()> {
    let model = run::load_model(model_path)?;
    let mut ev = model.evaluator()?;
    if no_reference {
        ev = ev.without_reference();
    }
    if no_terminal_reward {
        ev = ev.without_terminal_reward();
    }
    let server = MockServer::spawn(Arc::new(ev), (host, port))
        .class_with(Class::Io, || format!("binding {host}:{port}"))?;
    println!("listening on {}", server.local_addr());
    std::io::stdout().flush().class(Class::Io)?;
    server.join();
    Ok(())
}
