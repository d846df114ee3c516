//! Shared pieces of the subcommands: env specs, run configs, prompt sets,
//! per-sample generation and manifests.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use valdec_core::baselines::{best_of_n, greedy, sample_top_p, stepwise_value};
use valdec_core::config::{self, ConfigError};
use valdec_core::evaluator::CachedEvaluator;
use valdec_core::math::mix64;
use valdec_core::protocol::RemoteEvaluator;
use valdec_core::{decode_sequence, DecodeConfig, Evaluator, PpoState, RewardSpec, Token, ToyEnv};

use crate::failure::{fail, Class, Classify, Outcome};

pub const SEED_VAR: &str = "VALDEC_SEED";

/// Decoding methods, as named on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mcts,
    TopP,
    Greedy,
    BestOfN,
    StepwiseValue,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mcts => "mcts",
            Method::TopP => "top-p",
            Method::Greedy => "greedy",
            Method::BestOfN => "best-of-n",
            Method::StepwiseValue => "stepwise-value",
        }
    }
}

/// Settings for decoding and evaluation runs. Loaded from `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Random prompts drawn when no prompt file is given.
    pub num_prompts: usize,
    pub samples_per_prompt: usize,
    pub goal_threshold: f64,
    pub top_p: f64,
    pub temperature: f64,
    pub best_of_n: usize,
    pub stepwise_k: usize,
    pub stepwise_tau: f64,
    /// Use the KL coefficient the artifact finished training with instead of `mcts.beta`.
    pub beta_from_model: bool,
    pub mcts: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_prompts: 100,
            samples_per_prompt: 1,
            goal_threshold: 0.5,
            top_p: 0.9,
            temperature: 1.0,
            best_of_n: 50,
            stepwise_k: 10,
            stepwise_tau: 1.0,
            beta_from_model: true,
            mcts: DecodeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.samples_per_prompt == 0 {
            return Err(ConfigError::field("samples_per_prompt", "must be at least 1"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ConfigError::field("top_p", "must be in (0, 1]"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ConfigError::field("temperature", "must be finite and non-negative"));
        }
        if self.best_of_n == 0 {
            return Err(ConfigError::field("best_of_n", "must be at least 1"));
        }
        if self.stepwise_k == 0 {
            return Err(ConfigError::field("stepwise_k", "must be at least 1"));
        }
        if !(self.stepwise_tau >= 0.0 && self.stepwise_tau.is_finite()) {
            return Err(ConfigError::field("stepwise_tau", "must be finite and non-negative"));
        }
        if !(0.0..=1e9).contains(&self.goal_threshold) {
            return Err(ConfigError::field("goal_threshold", "must be non-negative"));
        }
        self.mcts.validate()
    }

    /// Search config for one model: its β and, when its values are on an
    /// unknown scale, the Q-by-V approximation.
    pub fn mcts_for(&self, model: &PpoState) -> DecodeConfig {
        let mut c = self.mcts.clone();
        if self.beta_from_model {
            c.beta = model.beta;
        }
        if model.requires_approx_q() && !c.approx_q_with_v {
            log::warn!("model was trained with reward whitening or KL clamping; approximating Q with V");
            c.approx_q_with_v = true;
        }
        c
    }
}

/// Where the seed came from: the config, or the `VALDEC_SEED` override.
pub fn resolve_seed(configured: u64) -> Outcome<(u64, bool)> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(|s| (s, true))
            .map_err(|e| fail(Class::Config, anyhow::anyhow!("{SEED_VAR}={v:?} is not an unsigned integer: {e}"))),
        Err(_) => Ok((configured, false)),
    }
}

pub fn load_run_config(path: Option<&Path>) -> Outcome<RunConfig> {
    let mut c: RunConfig = match path {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    c.seed = resolve_seed(c.seed)?.0;
    c.validate()?;
    Ok(c)
}

/// A built-in env name or a path to a TOML/JSON env file.
pub fn load_env(spec: &str) -> Outcome<ToyEnv> {
    let env = match spec {
        "sentiment" => ToyEnv::new(8, 5, RewardSpec::SentimentProxy).with_prompt_len(2),
        "bandit" => ToyEnv::new(4, 1, RewardSpec::WeightedBag {
            weights: vec![0.1, 0.9, 0.3, 0.5],
        }),
        "suffix" => ToyEnv::new(4, 4, RewardSpec::SuffixMatch { suffix: vec![1, 2] }),
        "count" => ToyEnv::new(5, 4, RewardSpec::TargetTokenCount { token: 0, target: 2 }),
        path => config::load(path)?,
    };
    env.validate()?;
    Ok(env)
}

pub fn load_model(path: &Path) -> Outcome<PpoState> {
    let text = fs::read_to_string(path).class_with(Class::Io, || format!("reading {}", path.display()))?;
    let model = PpoState::from_json(&text)
        .map_err(|e| fail(Class::Config, anyhow::Error::new(e).context(format!("loading {}", path.display()))))?;
    model.env.validate()?;
    Ok(model)
}

/// Prompts from a JSON-lines file of token arrays, or drawn from the env.
pub fn load_prompts(path: Option<&Path>, env: &ToyEnv, count: usize, seed: u64) -> Outcome<Vec<Vec<Token>>> {
    let prompts = match path {
        Some(p) => {
            let file = File::open(p).class_with(Class::Io, || format!("opening {}", p.display()))?;
            let mut out = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line.class_with(Class::Io, || format!("reading {}", p.display()))?;
                if line.trim().is_empty() {
                    continue;
                }
                let prompt: Vec<Token> = serde_json::from_str(&line)
                    .class_with(Class::Config, || format!("{} line {}: expected a token array", p.display(), i + 1))?;
                out.push(prompt);
            }
            out
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0x5052_4f4d_5054));
            (0..count).map(|_| env.random_prompt(&mut rng)).collect()
        }
    };
    for (i, p) in prompts.iter().enumerate() {
        env.check_prompt(p)
            .class_with(Class::Config, || format!("prompt {i}"))?;
    }
    Ok(prompts)
}

/// Seed for one sample, independent of scheduling.
pub fn sample_seed(base: u64, prompt: usize, sample: usize) -> u64 {
    mix64(base ^ mix64((prompt as u64) << 20 ^ sample as u64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub method: String,
    pub prompt_index: usize,
    pub sample_index: usize,
    pub prompt: Vec<Token>,
    pub tokens: Vec<Token>,
    pub reward: f64,
    pub evaluator_calls: usize,
    pub seed: u64,
}

/// Produces one response with `method`.
pub fn generate<E: Evaluator + ?Sized>(
    method: Method,
    ev: &E,
    prompt: &[Token],
    run: &RunConfig,
    mcts: &DecodeConfig,
    seed: u64,
) -> Outcome<(Vec<Token>, usize)> {
    let t = mcts.max_new_tokens;
    let g = match method {
        Method::Mcts => {
            let c = DecodeConfig { seed, ..mcts.clone() };
            let out = decode_sequence(prompt, &c, ev)?;
            return Ok((out.tokens, out.evaluator_call_count));
        }
        Method::TopP => sample_top_p(ev, prompt, run.top_p, run.temperature, t, seed)?,
        Method::Greedy => greedy(ev, prompt, t)?,
        Method::BestOfN => best_of_n(ev, prompt, run.best_of_n, run.top_p, t, seed)?,
        Method::StepwiseValue => stepwise_value(ev, prompt, run.stepwise_k, run.stepwise_tau, t, seed)?,
    };
    Ok((g.tokens, g.evaluator_calls))
}

/// Evaluator used for one prompt: the shared local one, or a fresh
/// connection with a per-prompt cache.
pub enum Backend<'a> {
    Local(&'a valdec_core::TabularEvaluator),
    Remote(String),
}

impl Backend<'_> {
    pub fn run<T>(
        &self,
        caps: valdec_core::EvaluatorCaps,
        f: impl FnOnce(&dyn Evaluator) -> Outcome<T>,
    ) -> Outcome<T> {
        match self {
            Backend::Local(ev) => f(*ev),
            Backend::Remote(addr) => {
                let remote = RemoteEvaluator::connect(addr.as_str(), caps)
                    .class_with(Class::Remote, || format!("connecting to {addr}"))?;
                f(&CachedEvaluator::new(remote))
            }
        }
    }
}

/// Decodes `samples_per_prompt` responses for every prompt on `jobs`
/// threads. Records come back in prompt order, then sample order.
#[allow(clippy::too_many_arguments)]
pub fn decode_all(
    method: Method,
    model: &PpoState,
    backend: &Backend<'_>,
    prompts: &[Vec<Token>],
    run: &RunConfig,
    mcts: &DecodeConfig,
    pool: &rayon::ThreadPool,
) -> Outcome<Vec<SampleRecord>> {
    use rayon::prelude::*;
    let caps = model.evaluator()?.caps();
    let per_prompt: Vec<Outcome<Vec<SampleRecord>>> = pool.install(|| {
        prompts
            .par_iter()
            .enumerate()
            .map(|(pi, prompt)| {
                backend.run(caps, |ev| {
                    (0..run.samples_per_prompt)
                        .map(|si| {
                            let seed = sample_seed(run.seed, pi, si);
                            let (tokens, calls) = generate(method, ev, prompt, run, mcts, seed)?;
                            Ok(SampleRecord {
                                method: method.name().to_string(),
                                prompt_index: pi,
                                sample_index: si,
                                prompt: prompt.clone(),
                                reward: model.env.reward(&tokens),
                                tokens,
                                evaluator_calls: calls,
                                seed,
                            })
                        })
                        .collect()
                })
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in per_prompt {
        out.extend(r?);
    }
    Ok(out)
}

pub fn thread_pool(jobs: usize) -> Outcome<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .class(Class::Config)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Outcome<()> {
    let io = || format!("writing {}", path.display());
    let mut w = BufWriter::new(File::create(path).class_with(Class::Io, io)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).class_with(Class::Io, io)?;
        w.write_all(b"\n").class_with(Class::Io, io)?;
    }
    w.flush().class_with(Class::Io, io)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value).class(Class::Io)?;
    text.push('\n');
    fs::write(path, text).class_with(Class::Io, || format!("writing {}", path.display()))
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

fn digest_file(path: &Path) -> Outcome<FileDigest> {
    let bytes = fs::read(path).class_with(Class::Io, || format!("hashing {}", path.display()))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

#[derive(Debug, Serialize)]
struct Versions {
    valdec: &'static str,
    protocol: u32,
    artifact_format: u32,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    args: Vec<String>,
    versions: Versions,
    seed: u64,
    seed_from_env: bool,
    config: serde_json::Value,
    config_sha256: String,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
}

/// Everything needed to reproduce a run, written next to its first output.
pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Outcome<Self> {
        Ok(Self {
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config).class(Class::Config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(mut self, path: Option<&Path>) -> Self {
        self.inputs.extend(path.map(Path::to_path_buf));
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    pub fn write(self) -> Outcome<PathBuf> {
        let first = self.outputs.first().expect("manifest needs an output");
        let mut name = first.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        let path = first.with_file_name(name);
        let canonical = serde_json::to_string(&self.config).class(Class::Config)?;
        let manifest = Manifest {
            command: self.command,
            args: std::env::args().skip(1).collect(),
            versions: Versions {
                valdec: env!("CARGO_PKG_VERSION"),
                protocol: valdec_core::protocol::PROTOCOL_VERSION,
                artifact_format: valdec_core::ppo::FORMAT_VERSION,
            },
            seed: self.seed,
            seed_from_env: std::env::var_os(SEED_VAR).is_some(),
            config: self.config,
            config_sha256: hex::encode(Sha256::digest(canonical.as_bytes())),
            inputs: self.inputs.iter().map(|p| digest_file(p)).collect::<Outcome<_>>()?,
            outputs: self.outputs.iter().map(|p| digest_file(p)).collect::<Outcome<_>>()?,
        };
        write_json(&path, &manifest)?;
        Ok(path)
    }
}
