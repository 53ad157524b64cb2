use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use exforge::analysis::{
    hypothesis1_from_metrics, hypothesis1_probe, logit_error_study, verify_lemma1, verify_lemma2, verify_lemma3, Lemma3Config, Report,
    Status,
};
use exforge::attack::{run_attack, AttackConfig};
use exforge::data::{generate, generate_split, Dataset, Family, SyntheticSpec};
use exforge::disagreement::LogitMode;
use exforge::nn::{Activation, Network};
use exforge::oracle::{LocalOracle, Oracle, OracleServer, RemoteOracle, TrainConfig, VictimModel};
use exforge::report::{collect_runs, load_run, table1_csv, table3_csv};
use exforge::surrogate::{benchmark_csv, benchmark_surrogates, distill, standard_surrogates, sweep_csv, sweep_lambda, SurrogateConfig};
use exforge::{Error, SeededRng};

use crate::manifest::Manifest;
use crate::{
    env_seed, AttackArgs, Command, DistillArgs, DistillFlags, GenDataArgs, LemmaArgs, ReportArgs, ServeArgs, SpecArgs, SweepArgs,
    TrainVictimArgs, VerifyCommand,
};

pub enum Failure {
    Lib(Error),
    /// A verification ran to completion and reported a violation.
    CheckFailed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainVictim(a) => train_victim(a),
        Command::Serve(a) => serve(a),
        Command::Attack(a) => attack(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Verify(a) => verify(a.check),
        Command::Report(a) => report(a),
    }
}

/// Recursively overlays `top` onto `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_value(path: &Path) -> Result<Value, Error> {
    serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// `base` overlaid with the JSON document at `config`.
fn layered<T: Serialize + DeserializeOwned>(base: T, config: Option<&Value>) -> Result<T, Error> {
    let Some(config) = config else { return Ok(base) };
    let mut v = serde_json::to_value(base)?;
    merge(&mut v, config.clone());
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn base_seed() -> Result<u64, Error> {
    Ok(env_seed()?.unwrap_or(0))
}

fn default_spec(family: Family, seed: u64) -> SyntheticSpec {
    match family {
        Family::Spirals => SyntheticSpec::spirals(3000, seed),
        Family::GridDigits => SyntheticSpec::grid_digits(3000, seed),
        Family::Blobs => SyntheticSpec::new(family, 3000, 2, 3, 0.15, seed),
        Family::UniformNoise | Family::StandardNormalNoise => SyntheticSpec::new(family, 3000, 2, 3, 1.0, seed),
    }
}

/// Family defaults < config document < flags.
fn resolve_spec(flags: &SpecArgs, config: Option<&Value>, seed: Option<u64>) -> Result<SyntheticSpec, Error> {
    let from_config = config.and_then(|c| c.get("family")).and_then(Value::as_str).map(str::parse).transpose()?;
    let family = flags.family.or(from_config).ok_or_else(|| Error::Config("a dataset family is required (--family or config)".into()))?;
    let mut spec = layered(default_spec(family, base_seed()?), config)?;
    spec.family = family;
    if let Some(v) = flags.n {
        spec.n = v;
    }
    if let Some(v) = flags.d {
        spec.d = v;
    }
    if let Some(v) = flags.k {
        spec.k = v;
    }
    if let Some(v) = flags.noise {
        spec.noise_sigma = v;
    }
    if let Some(v) = seed {
        spec.seed = v;
    }
    spec.validate()?;
    Ok(spec)
}

fn write_file(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Outcome {
    let config = a.config.as_deref().map(read_value).transpose()?;
    let spec = resolve_spec(&a.spec, config.as_ref(), a.seed)?;
    let ds = generate_split(&spec, a.split)?;
    write_file(&a.out, &ds.to_json()?)?;
    let mut m = Manifest::new("gen-data", Some(spec.seed), json!({ "spec": spec, "split": a.split }));
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    m.output(&a.out)?;
    m.write_beside(&a.out)?;
    println!("wrote {} rows of {} to {}", ds.len(), spec.name(), a.out.display());
    Ok(())
}

#[derive(Serialize, Deserialize, Default)]
struct VictimRecipe {
    #[serde(default)]
    spec: Option<Value>,
    #[serde(default)]
    train: Option<Value>,
}

fn train_victim(a: TrainVictimArgs) -> Outcome {
    let recipe: VictimRecipe = match &a.config {
        Some(p) => serde_json::from_value(read_value(p)?).map_err(|e| Error::Config(e.to_string()))?,
        None => VictimRecipe::default(),
    };
    let spec = resolve_spec(&a.spec, recipe.spec.as_ref(), a.seed)?;
    let mut train = layered(TrainConfig { seed: base_seed()?, ..TrainConfig::default() }, recipe.train.as_ref())?;
    if let Some(v) = a.seed {
        train.seed = v;
    }
    if let Some(v) = a.epochs {
        train.epochs = v;
    }
    if let Some(v) = &a.hidden {
        train.hidden = v.clone();
    }
    if let Some(v) = a.lr {
        train.optimizer.learning_rate = v;
    }
    if let Some(v) = a.weight_decay {
        train.optimizer.weight_decay = v;
    }
    let victim = exforge::oracle::train_victim(&spec, &train)?;
    write_file(&a.out, &victim.to_json()?)?;
    let mut m = Manifest::new("train-victim", Some(train.seed), json!({ "spec": spec, "train": train }));
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    m.output(&a.out)?;
    m.write_beside(&a.out)?;
    println!("victim {} test accuracy {:.4} -> {}", spec.name(), victim.test_accuracy, a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Outcome {
    let victim = VictimModel::load(&a.victim)?;
    let oracle = Arc::new(LocalOracle::new(victim.network, a.budget, true));
    let server = OracleServer::bind(&format!("{}:{}", a.host, a.port), oracle)?;
    println!("listening on {} (budget {})", server.local_addr(), a.budget);
    std::io::stdout().flush()?;
    server.wait();
    Ok(())
}

/// An in-process oracle when `target` names a file, a TCP client otherwise.
enum Handle {
    Local { oracle: LocalOracle, victim: VictimModel, path: PathBuf },
    Remote(RemoteOracle),
}

impl Handle {
    fn open(target: &str, budget: u64, strict: bool) -> Result<Self, Error> {
        let path = PathBuf::from(target);
        if path.is_file() {
            let victim = VictimModel::load(&path)?;
            let oracle = LocalOracle::new(victim.network.clone(), budget, strict);
            Ok(Handle::Local { oracle, victim, path })
        } else if target.contains(':') {
            Ok(Handle::Remote(RemoteOracle::connect(target)?))
        } else {
            Err(Error::Config(format!("'{target}' is neither a victim file nor host:port")))
        }
    }

    fn oracle(&self) -> &dyn Oracle {
        match self {
            Handle::Local { oracle, .. } => oracle,
            Handle::Remote(r) => r,
        }
    }

    fn victim(&self) -> Option<&VictimModel> {
        match self {
            Handle::Local { victim, .. } => Some(victim),
            Handle::Remote(_) => None,
        }
    }

    fn record(&self, m: &mut Manifest) -> Result<(), Error> {
        if let Handle::Local { path, .. } = self {
            m.input(path)?;
        }
        Ok(())
    }

    /// `--eval-data` if given, else the local victim's held-out split.
    fn eval_set(&self, eval_data: Option<&Path>, m: &mut Manifest) -> Result<Dataset, Error> {
        match (eval_data, self.victim()) {
            (Some(p), _) => {
                m.input(p)?;
                Dataset::load(p)
            }
            (None, Some(v)) => v.test_set(),
            (None, None) => Err(Error::Config("--eval-data is required with a remote oracle".into())),
        }
    }
}

fn attack(a: AttackArgs) -> Outcome {
    let config = a.config.as_deref().map(read_value).transpose()?;
    let mut cfg = layered(AttackConfig { seed: base_seed()?, ..AttackConfig::default() }, config.as_ref())?;
    a.apply(&mut cfg);
    cfg.validate()?;
    let needs_white_box = cfg.diagnostics || cfg.logit_mode == LogitMode::TrueDiagnostic;
    let strict = a.strict || !needs_white_box;
    let handle = Handle::open(&a.oracle, cfg.budget, strict)?;
    let mut m = Manifest::new("attack", Some(cfg.seed), json!({ "attack": cfg, "oracle": a.oracle, "strict": strict }));
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    handle.record(&mut m)?;
    let test = handle.eval_set(a.eval_data.as_deref(), &mut m)?;
    let outcome = run_attack(handle.oracle(), &test, &cfg)?;
    outcome.write(&a.out)?;
    for f in ["metrics.csv", "summary.json", "student.json", "generator.json"] {
        m.output(&a.out.join(f))?;
    }
    m.write_dir(&a.out)?;
    let s = &outcome.summary;
    println!(
        "queries {} accuracy {:.4} fidelity {:.4} normalized {:.4} -> {}",
        s.queries_used,
        s.accuracy,
        s.fidelity,
        s.normalized_accuracy,
        a.out.display()
    );
    Ok(())
}

fn surrogate_config(f: &DistillFlags) -> Result<(SurrogateConfig, Option<Value>), Error> {
    let config = f.config.as_deref().map(read_value).transpose()?;
    let mut cfg = layered(SurrogateConfig { seed: base_seed()?, ..SurrogateConfig::default() }, config.as_ref())?;
    if let Some(v) = &f.tau {
        cfg.taus = v.clone();
    }
    if let Some(v) = &f.schedule {
        cfg.schedules = v.clone();
    }
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.cap {
        cfg.distinct_sample_cap = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    Ok((cfg, config))
}

fn distill_cmd(a: DistillArgs) -> Outcome {
    let f = &a.flags;
    let (cfg, _) = surrogate_config(f)?;
    let handle = Handle::open(&f.oracle, f.budget.unwrap_or(u64::MAX), true)?;
    let mut m = Manifest::new(
        if a.benchmark { "distill --benchmark" } else { "distill" },
        Some(cfg.seed),
        json!({ "surrogate": cfg, "oracle": f.oracle, "budget": f.budget, "n": a.n }),
    );
    if let Some(c) = &f.config {
        m.input(c)?;
    }
    handle.record(&mut m)?;
    let test = handle.eval_set(f.eval_data.as_deref(), &mut m)?;
    std::fs::create_dir_all(&f.out)?;
    let extra = a.surrogate.as_deref().map(|p| m.input(p).and_then(|_| Dataset::load(p))).transpose()?;

    if a.benchmark {
        let victim =
            handle.victim().ok_or_else(|| Error::Config("--benchmark needs a victim file to derive the standard surrogates".into()))?;
        let mut sets = standard_surrogates(&victim.train_spec, a.n.unwrap_or(cfg.distinct_sample_cap), cfg.seed)?;
        sets.extend(extra);
        let rows = benchmark_surrogates(handle.oracle(), &sets, &test, &cfg)?;
        let path = f.out.join("benchmark.csv");
        std::fs::write(&path, benchmark_csv(&rows))?;
        m.output(&path)?;
        for r in &rows {
            println!("{:<40} accuracy {:.4} normalized {:.4}", r.surrogate, r.accuracy, r.normalized_accuracy);
        }
    } else {
        let ds = extra.expect("clap requires --surrogate without --benchmark");
        let r = distill(handle.oracle(), &ds, &test, &cfg)?;
        let student = f.out.join("student.json");
        r.student.save(&student)?;
        let result = f.out.join("result.json");
        let body = json!({
            "surrogate": ds.name,
            "accuracy": r.agreement.accuracy,
            "fidelity": r.agreement.fidelity,
            "victim_accuracy": r.agreement.victim_accuracy,
            "normalized_accuracy": r.agreement.normalized_accuracy(),
            "tau": r.tau,
            "schedule": r.schedule,
            "queried": r.queried,
        });
        std::fs::write(&result, serde_json::to_string_pretty(&body)?)?;
        m.output(&student)?;
        m.output(&result)?;
        println!("accuracy {:.4} (tau {}, {}) from {} queries", r.agreement.accuracy, r.tau, r.schedule.name(), r.queried);
    }
    m.write_dir(&f.out)?;
    Ok(())
}

fn sweep(a: SweepArgs) -> Outcome {
    let f = &a.flags;
    let (mut cfg, _) = surrogate_config(f)?;
    if let Some(l) = &a.lambdas {
        cfg.lambda_grid = l.clone();
    }
    cfg.validate()?;
    let handle = Handle::open(&f.oracle, f.budget.unwrap_or(u64::MAX), true)?;
    let mut m = Manifest::new("sweep", Some(cfg.seed), json!({ "surrogate": cfg, "oracle": f.oracle, "budget": f.budget }));
    if let Some(c) = &f.config {
        m.input(c)?;
    }
    handle.record(&mut m)?;
    let test = handle.eval_set(f.eval_data.as_deref(), &mut m)?;
    let target = match (&a.target, handle.victim()) {
        (Some(p), _) => {
            m.input(p)?;
            Dataset::load(p)?
        }
        (None, Some(v)) => generate(&v.train_spec)?,
        (None, None) => return Err(Error::Config("--target is required with a remote oracle".into()).into()),
    };
    m.input(&a.surrogate)?;
    let surrogate = Dataset::load(&a.surrogate)?;
    let curve = sweep_lambda(handle.oracle(), &target, &surrogate, &test, &cfg)?;
    std::fs::create_dir_all(&f.out)?;
    let path = f.out.join("sweep.csv");
    std::fs::write(&path, sweep_csv(&curve))?;
    m.output(&path)?;
    m.write_dir(&f.out)?;
    for (l, acc) in curve {
        println!("lambda {l:.3} accuracy {acc:.4}");
    }
    Ok(())
}

fn emit_report(rep: &Report, out: Option<&Path>, m: Manifest) -> Outcome {
    emit(&rep.to_json()?, out, m)?;
    eprintln!("{}: {:?}", rep.check, rep.status);
    if rep.status == Status::Fail {
        let why = match (rep.violations, rep.failures.first()) {
            (0, Some(f)) => f.clone(),
            (0, None) => format!("{:?}", rep.witness),
            (n, _) => format!("{n} violation(s)"),
        };
        return Err(Failure::CheckFailed(format!("{}: {why}", rep.check)));
    }
    Ok(())
}

fn emit(text: &str, out: Option<&Path>, mut m: Manifest) -> Outcome {
    match out {
        Some(p) => {
            write_file(p, text)?;
            m.output(p)?;
            m.write_beside(p)?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn diagnostic_oracle(path: &Path) -> Result<(VictimModel, LocalOracle), Error> {
    let v = VictimModel::load(path)?;
    let o = LocalOracle::new(v.network.clone(), 0, false);
    Ok((v, o))
}

fn fresh_like(victim: &Network, seed: u64) -> Result<Network, Error> {
    let mut dims = vec![victim.input_dim()];
    dims.extend(victim.layers().iter().map(|l| l.out_dim()));
    Network::mlp(&dims, Activation::Relu, Activation::Identity, &mut SeededRng::derived(seed, 30))
}

fn lemma(name: &str, a: &LemmaArgs, f: fn(usize, usize, usize, u64) -> exforge::Result<Report>) -> Outcome {
    let seed = match a.seed {
        Some(s) => s,
        None => base_seed()?,
    };
    let rep = f(a.trials, a.k_min, a.k_max, seed)?;
    let m = Manifest::new(name, Some(seed), json!({ "trials": a.trials, "k_min": a.k_min, "k_max": a.k_max }));
    emit_report(&rep, a.out.as_deref(), m)
}

fn verify(check: VerifyCommand) -> Outcome {
    match check {
        VerifyCommand::Lemma1(a) => lemma("verify lemma1", &a, verify_lemma1),
        VerifyCommand::Lemma2(a) => lemma("verify lemma2", &a, verify_lemma2),
        VerifyCommand::Lemma3 { victim, student, probes, steps, lr, seed, out } => {
            let seed = match seed {
                Some(s) => s,
                None => base_seed()?,
            };
            let (v, oracle) = diagnostic_oracle(&victim)?;
            let mut m = Manifest::new("verify lemma3", Some(seed), json!({ "probes": probes, "steps": steps, "lr": lr }));
            m.input(&victim)?;
            let start = match &student {
                Some(p) => {
                    m.input(p)?;
                    Network::load(p)?
                }
                None => fresh_like(&v.network, seed)?,
            };
            let x = v.test_set()?.take(probes).inputs;
            let cfg = Lemma3Config { steps, learning_rate: lr, ..Lemma3Config::default() };
            emit_report(&verify_lemma3(&oracle, start, &x, &cfg)?, out.as_deref(), m)
        }
        VerifyCommand::Hypothesis1 { run, victim, checkpoints, probes, out } => {
            let mut m = Manifest::new("verify hypothesis1", None, json!({ "probes": probes }));
            let rep = match (run, victim, checkpoints) {
                (Some(dir), _, _) => {
                    m.input(&dir.join("metrics.csv"))?;
                    hypothesis1_from_metrics(&load_run(&dir)?.metrics)
                }
                (None, Some(victim), Some(paths)) => {
                    let (v, oracle) = diagnostic_oracle(&victim)?;
                    m.input(&victim)?;
                    let nets = paths
                        .iter()
                        .map(|p| {
                            m.input(p)?;
                            Network::load(p)
                        })
                        .collect::<Result<Vec<_>, Error>>()?;
                    hypothesis1_probe(&oracle, &nets, &v.test_set()?.take(probes).inputs)?
                }
                _ => return Err(Error::Config("give --run, or --victim with --checkpoints".into()).into()),
            };
            emit_report(&rep, out.as_deref(), m)
        }
        VerifyCommand::Logits { victim, probes, out } => {
            let mut m = Manifest::new("verify logits", None, json!({ "probes": probes }));
            let loaded = victim
                .iter()
                .map(|p| {
                    m.input(p)?;
                    let (v, o) = diagnostic_oracle(p)?;
                    let x = v.test_set()?.take(probes).inputs;
                    Ok((p.display().to_string(), o, x))
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let refs: Vec<(String, &dyn Oracle, &exforge::Tensor)> =
                loaded.iter().map(|(n, o, x)| (n.clone(), o as &dyn Oracle, x)).collect();
            let rows = logit_error_study(&refs)?;
            let body: Vec<Value> = rows
                .iter()
                .map(|r| {
                    let mut v = serde_json::to_value(r).expect("plain struct");
                    v["holds"] = json!(r.holds());
                    v
                })
                .collect();
            emit(&serde_json::to_string_pretty(&body)?, out.as_deref(), m)?;
            if let Some(bad) = rows.iter().find(|r| !r.holds()) {
                return Err(Failure::CheckFailed(format!("logit recovery ordering fails for {}", bad.victim)));
            }
            Ok(())
        }
    }
}

fn report(a: ReportArgs) -> Outcome {
    let runs = collect_runs(&a.input)?;
    if runs.is_empty() {
        return Err(Error::Validation(format!("no runs under {}", a.input.display())).into());
    }
    std::fs::create_dir_all(&a.out)?;
    let mut m = Manifest::new("report", None, json!({ "in": a.input, "target": a.target }));
    for r in &runs {
        m.input(&r.dir.join("summary.json"))?;
        m.input(&r.dir.join("metrics.csv"))?;
    }
    let t1 = a.out.join("table1.csv");
    let t3 = a.out.join("table3.csv");
    std::fs::write(&t1, table1_csv(&runs, &a.input))?;
    std::fs::write(&t3, table3_csv(&runs, a.target))?;
    m.output(&t1)?;
    m.output(&t3)?;
    m.write_dir(&a.out)?;
    println!("{} runs -> {} and {}", runs.len(), t1.display(), t3.display());
    Ok(())
}
