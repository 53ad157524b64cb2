mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use exforge::attack::AttackConfig;
use exforge::data::{Family, Split};
use exforge::disagreement::{LogitMode, LossKind};
use exforge::nn::Activation;
use exforge::surrogate::LrSchedule;

#[derive(Parser, Debug)]
#[command(name = "exforge", version, about = "Data-free model extraction laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a victim classifier on a synthetic task.
    TrainVictim(TrainVictimArgs),
    /// Serve a victim over TCP behind a query budget.
    Serve(ServeArgs),
    /// Run the data-free extraction attack.
    Attack(AttackArgs),
    /// Distill the victim on surrogate data, or benchmark the standard surrogates.
    Distill(DistillArgs),
    /// Distill on interpolations between the victim's data and a surrogate.
    Sweep(SweepArgs),
    /// Numerical checks.
    Verify(VerifyArgs),
    /// Aggregate attack runs into summary tables.
    Report(ReportArgs),
}

/// Flags shared by everything that builds a `SyntheticSpec`.
#[derive(Args, Debug, Clone, Default)]
pub struct SpecArgs {
    #[arg(long, value_parser = parse_family)]
    pub family: Option<Family>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// JSON `SyntheticSpec`; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_split, default_value = "train")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainVictimArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// JSON `{"spec": SyntheticSpec, "train": TrainConfig}`; both parts optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub victim: PathBuf,
    #[arg(long)]
    pub budget: u64,
    #[arg(long, default_value_t = 9009)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Victim file for an in-process oracle, or `host:port` of a server.
    #[arg(long)]
    pub oracle: String,
    /// JSON `AttackConfig`; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub ng: Option<usize>,
    #[arg(long)]
    pub ns: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, value_parser = parse_loss)]
    pub loss: Option<LossKind>,
    /// recovered | logprob | true
    #[arg(long, value_parser = parse_logits)]
    pub logits: Option<LogitMode>,
    #[arg(long)]
    pub flip_prob: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub student_hidden: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_activation)]
    pub student_activation: Option<Activation>,
    #[arg(long)]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset file for accuracy curves; defaults to the victim's test split.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Record true input-gradient norms (needs a non-strict local oracle).
    #[arg(long)]
    pub diagnostics: bool,
    /// Refuse every white-box access.
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training flags shared by `distill` and `sweep`.
#[derive(Args, Debug, Clone)]
pub struct DistillFlags {
    /// Victim file, or `host:port` of a server.
    #[arg(long)]
    pub oracle: String,
    /// JSON `SurrogateConfig`; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Budget of an in-process oracle (unlimited by default).
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub tau: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_schedule)]
    pub schedule: Option<Vec<LrSchedule>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub cap: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    #[command(flatten)]
    pub flags: DistillFlags,
    /// Surrogate dataset file.
    #[arg(long, required_unless_present = "benchmark")]
    pub surrogate: Option<PathBuf>,
    /// Benchmark the standard surrogate rows for the victim's task.
    #[arg(long)]
    pub benchmark: bool,
    /// Rows per generated benchmark surrogate (defaults to the cap).
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub flags: DistillFlags,
    /// Target-domain inputs; defaults to the victim's training split.
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub surrogate: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(subcommand)]
    pub check: VerifyCommand,
}

#[derive(Args, Debug, Clone)]
pub struct LemmaArgs {
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 2)]
    pub k_min: usize,
    #[arg(long, default_value_t = 16)]
    pub k_max: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum VerifyCommand {
    /// Softmax-Jacobian spectrum in [0, 1] and its trace.
    Lemma1(LemmaArgs),
    /// ‖J·Z‖ ≤ ‖Z‖.
    Lemma2(LemmaArgs),
    /// Jacobian distance shrinks as a student converges to the victim.
    Lemma3 {
        #[arg(long)]
        victim: PathBuf,
        /// Starting student; a fresh network shaped like the victim when absent.
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        probes: usize,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// KL versus ℓ1 input-gradient ratio over a run or a list of checkpoints.
    Hypothesis1 {
        /// Attack output directory recorded with `--diagnostics`.
        #[arg(long, conflicts_with = "checkpoints")]
        run: Option<PathBuf>,
        #[arg(long, requires = "checkpoints")]
        victim: Option<PathBuf>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        checkpoints: Option<Vec<PathBuf>>,
        #[arg(long, default_value_t = 256)]
        probes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Logit reconstruction error per victim.
    Logits {
        #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
        victim: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        probes: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Accuracy threshold for the queries-to-target table.
    #[arg(long, default_value_t = 0.85)]
    pub target: f64,
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: exforge::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split '{s}' (expected train or test)")),
    }
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: exforge::Error| e.to_string())
}

fn parse_logits(s: &str) -> Result<LogitMode, String> {
    s.parse().map_err(|e: exforge::Error| e.to_string())
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown activation '{s}'"))
}

fn parse_schedule(s: &str) -> Result<LrSchedule, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown schedule '{s}'"))
}

/// Seed precedence below explicit flags and config files.
pub fn env_seed() -> Result<Option<u64>, exforge::Error> {
    match std::env::var("EXFORGE_SEED") {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| exforge::Error::Config(format!("EXFORGE_SEED must be an unsigned integer, got '{v}'")))
        }
        Err(_) => Ok(None),
    }
}

impl AttackArgs {
    /// Applies explicit flags on top of `cfg`.
    pub fn apply(&self, cfg: &mut AttackConfig) {
        if let Some(v) = self.budget {
            cfg.budget = v;
        }
        if let Some(v) = self.ng {
            cfg.n_g = v;
        }
        if let Some(v) = self.ns {
            cfg.n_s = v;
        }
        if let Some(v) = self.m {
            cfg.fwd.m = v;
        }
        if let Some(v) = self.eps {
            cfg.fwd.eps = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.loss {
            cfg.loss = v;
        }
        if let Some(v) = self.logits {
            cfg.logit_mode = v;
        }
        if let Some(v) = self.flip_prob {
            cfg.fwd.flip_probability = v;
        }
        if let Some(v) = &self.student_hidden {
            cfg.student_hidden = v.clone();
        }
        if let Some(v) = self.student_activation {
            cfg.student_activation = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if self.diagnostics {
            cfg.diagnostics = true;
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_budget() { 2 } else { 1 })
        }
        Err(commands::Failure::CheckFailed(what)) => {
            eprintln!("check failed: {what}");
            ExitCode::from(1)
        }
    }
}
