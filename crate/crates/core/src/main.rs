use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use inrd::agent::{self, TrainConfig, VisitedState};
use inrd::attacks::{self, AttackConfig, AttackResult, Method};
use inrd::aware::{self, AwareConfig, AwareGrid, AwareKind, GridReport};
use inrd::detector::{self, CalibrationProfile, Statistic};
use inrd::env::GridSpec;
use inrd::eval::{self, EvalReport, Label, ScoredState};
use inrd::{seed, PolicyNet};

#[derive(Parser, Debug)]
#[command(name = "inrd", version, about = "Detect adversarial observations from local curvature of the policy cost")]
struct Cli {
    /// Master seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a double-Q network on the gridworld.
    Train(TrainArgs),
    /// Record greedy, unperturbed observations.
    Rollout(RolloutArgs),
    /// Fit a detector profile on base observations.
    Calibrate(CalibrateArgs),
    /// Attack every observation in a file.
    Attack(AttackArgs),
    /// Score observations against a profile.
    Detect(DetectArgs),
    /// Grid-search a detection-aware attack.
    Aware(AwareArgs),
    /// Calibrate, attack in the loop and write the full report.
    Eval(EvalArgs),
    /// ROC curve and TPR at a fixed FPR from a results CSV.
    Roc(RocArgs),
}

#[derive(Args, Debug)]
struct EnvArg {
    /// Environment spec (JSON); the default 8×8 layout when omitted.
    #[arg(long)]
    env: Option<PathBuf>,
}

impl EnvArg {
    fn load(&self) -> Result<GridSpec> {
        match &self.env {
            Some(p) => Ok(GridSpec::load(p)?),
            None => Ok(GridSpec::default()),
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    env: EnvArg,
    /// Training config (JSON); omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional training report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    env: EnvArg,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Output JSONL, one `{episode, step, obs}` per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum StatArg {
    So,
    Fo,
}

impl From<StatArg> for Statistic {
    fn from(s: StatArg) -> Self {
        match s {
            StatArg::So => Statistic::So,
            StatArg::Fo => Statistic::Fo,
        }
    }
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Base observations (JSONL from `rollout`).
    #[arg(long)]
    obs: PathBuf,
    #[arg(long, value_enum)]
    stat: StatArg,
    /// Probe size.
    #[arg(long, default_value_t = detector::DEFAULT_PROBE_EPSILON)]
    epsilon: f64,
    /// Target false-positive rate used to set the threshold.
    #[arg(long, default_value_t = 0.01)]
    fpr: f64,
    /// Flag only statistics above the base mean.
    #[arg(long)]
    one_sided: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Observations (JSONL with `obs`).
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    method: Method,
    /// Attack config (JSON); omitted fields take the method's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Targeted mode: drive the greedy action to this index.
    #[arg(long)]
    target: Option<usize>,
    /// Output JSONL, one result per observation.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    /// Observations: JSONL lines with `obs` or `s_adv`.
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AwareArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    kind: AwareKind,
    /// States to attack (JSONL with `obs`).
    #[arg(long)]
    obs: PathBuf,
    /// Feature-matching target pool (JSONL); defaults to `--obs`.
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Full aware config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid lists (JSON with lr, iters, kappa, lambda); overrides the config's grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    /// Largest tolerated relative drop in success rate.
    #[arg(long)]
    cap: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    env: EnvArg,
    /// Episodes for the calibration run.
    #[arg(long, default_value_t = 40)]
    calib_episodes: usize,
    /// Episodes per evaluation arm.
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Statistics to evaluate.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [StatArg::So, StatArg::Fo])]
    stat: Vec<StatArg>,
    #[arg(long, default_value_t = detector::DEFAULT_PROBE_EPSILON)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.01)]
    fpr: f64,
    /// Attacks to run in the loop.
    #[arg(long, value_delimiter = ',', default_values_t = Method::ALL.to_vec())]
    attacks: Vec<Method>,
    /// Directory of `<method>.json` attack configs; missing files use defaults.
    #[arg(long)]
    attack_configs: Option<PathBuf>,
    /// Also measure return degradation per attack.
    #[arg(long)]
    degradation: bool,
}

#[derive(Args, Debug)]
struct RocArgs {
    /// Results CSV written by `eval`.
    #[arg(long)]
    results: PathBuf,
    /// Restrict to one attack.
    #[arg(long)]
    attack: Option<Method>,
    #[arg(long, value_enum)]
    stat: Option<StatArg>,
    #[arg(long, default_value_t = 0.01)]
    fpr: f64,
    /// Interpolate between ROC points instead of the conservative step.
    #[arg(long)]
    interpolate: bool,
    #[arg(long)]
    out: PathBuf,
}

struct Ctx {
    seed: u64,
    out_dir: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, p: &Path) -> Result<PathBuf> {
        let path = match &self.out_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        };
        if let Some(parent) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(path)
    }
}

/// One observation line; `rollout` writes `obs`, `attack` writes `s_adv`.
#[derive(Deserialize)]
struct ObsLine {
    #[serde(default)]
    episode: usize,
    #[serde(default)]
    step: usize,
    obs: Option<Vec<f64>>,
    s_adv: Option<Vec<f64>>,
}

fn read_obs(path: &Path) -> Result<Vec<VisitedState>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ObsLine =
            serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let Some(obs) = rec.obs.or(rec.s_adv) else {
            bail!("{}:{}: line has neither obs nor s_adv", path.display(), i + 1);
        };
        out.push(VisitedState {
            episode: rec.episode,
            step: rec.step,
            obs,
        });
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_net(path: &Path) -> Result<PolicyNet> {
    PolicyNet::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = Ctx {
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Train(a) => train(&ctx, a),
        Command::Rollout(a) => rollout(&ctx, a),
        Command::Calibrate(a) => calibrate(&ctx, a),
        Command::Attack(a) => attack(&ctx, a),
        Command::Detect(a) => detect(&ctx, a),
        Command::Aware(a) => run_aware(&ctx, a),
        Command::Eval(a) => run_eval(&ctx, a),
        Command::Roc(a) => roc(&ctx, a),
    }
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let spec = a.env.load()?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = ctx.seed;
    let (net, report) = agent::train(&spec, &cfg)?;
    log::info!("final greedy return {:.3} ({})", report.final_eval, report.selected);
    net.save(&ctx.out(&a.out)?)?;
    if let Some(p) = &a.report {
        write_json(&ctx.out(p)?, &report)?;
    }
    Ok(())
}

fn rollout(ctx: &Ctx, a: RolloutArgs) -> Result<()> {
    let net = load_net(&a.ckpt)?;
    let spec = a.env.load()?;
    let visited = agent::base_rollout(&net, &spec, a.episodes, ctx.seed)?;
    log::info!("{} states over {} episodes", visited.len(), a.episodes);
    write_jsonl(&ctx.out(&a.out)?, &visited)
}

fn calibrate(ctx: &Ctx, a: CalibrateArgs) -> Result<()> {
    let net = load_net(&a.ckpt)?;
    let obs: Vec<Vec<f64>> = read_obs(&a.obs)?.into_iter().map(|v| v.obs).collect();
    let mut cal = detector::calibrate(&net, &obs, a.epsilon, a.stat.into(), ctx.seed)?;
    cal.profile.one_sided = a.one_sided;
    let t = detector::set_threshold(&mut cal, a.fpr)?;
    log::info!(
        "mean {:.6e} std {:.6e} over {} states, t = {t:.4}",
        cal.profile.mean,
        cal.profile.std,
        cal.profile.n
    );
    cal.profile.save(&ctx.out(&a.out)?)?;
    Ok(())
}

#[derive(Serialize)]
struct AttackLine<'a> {
    episode: usize,
    step: usize,
    #[serde(flatten)]
    result: &'a AttackResult,
}

fn attack(ctx: &Ctx, a: AttackArgs) -> Result<()> {
    let net = load_net(&a.ckpt)?;
    let mut cfg = match &a.config {
        Some(p) => AttackConfig::load(p, Some(a.method))?,
        None => AttackConfig::for_method(a.method),
    };
    if a.target.is_some() {
        cfg.target = a.target;
    }
    let obs = read_obs(&a.obs)?;
    let results: Vec<AttackResult> = obs
        .par_iter()
        .map(|v| attacks::run(&net, &v.obs, &cfg))
        .collect::<inrd::Result<_>>()?;
    let ok = results.iter().filter(|r| r.success).count();
    log::info!("{}: {ok}/{} succeeded", a.method, results.len());
    let lines: Vec<AttackLine> = obs
        .iter()
        .zip(&results)
        .map(|(v, r)| AttackLine {
            episode: v.episode,
            step: v.step,
            result: r,
        })
        .collect();
    write_jsonl(&ctx.out(&a.out)?, &lines)
}

#[derive(Serialize)]
struct DetectLine {
    episode: usize,
    step: usize,
    stat_value: Option<f64>,
    z_abs: f64,
    flagged: bool,
}

fn detect(ctx: &Ctx, a: DetectArgs) -> Result<()> {
    let net = load_net(&a.ckpt)?;
    let profile = CalibrationProfile::load(&a.profile)?;
    let obs = read_obs(&a.obs)?;
    let lines: Vec<DetectLine> = obs
        .par_iter()
        .map(|v| {
            detector::detect(&net, &v.obs, &profile).map(|d| DetectLine {
                episode: v.episode,
                step: v.step,
                stat_value: d.stat_value,
                z_abs: d.z_abs,
                flagged: d.flagged,
            })
        })
        .collect::<inrd::Result<_>>()?;
    let flagged = lines.iter().filter(|d| d.flagged).count();
    log::info!("flagged {flagged}/{}", lines.len());
    write_jsonl(&ctx.out(&a.out)?, &lines)
}

#[derive(Serialize)]
struct AwareOutput {
    report: GridReport,
    selected_config: AwareConfig,
}

fn run_aware(ctx: &Ctx, a: AwareArgs) -> Result<()> {
    let net = load_net(&a.ckpt)?;
    let profile = CalibrationProfile::load(&a.profile)?;
    let mut cfg = match &a.config {
        Some(p) => AwareConfig::load(p)?,
        None => AwareConfig::default(),
    };
    if let Some(p) = &a.grid {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.grid = serde_json::from_str::<AwareGrid>(&text).with_context(|| format!("parsing {}", p.display()))?;
    }
    if let Some(cap) = a.cap {
        cfg.success_drop_cap = cap;
    }
    cfg.seed = ctx.seed;
    let states: Vec<Vec<f64>> = read_obs(&a.obs)?.into_iter().map(|v| v.obs).collect();
    let targets: Vec<Vec<f64>> = match &a.targets {
        Some(p) => read_obs(p)?.into_iter().map(|v| v.obs).collect(),
        None => states.clone(),
    };
    let (selected_config, report) = aware::grid_search(a.kind, &net, &states, &targets, &profile, &cfg)?;
    match report.selected {
        Some(i) => log::info!(
            "selected lambda={} (tpr {:.3}, success {:.3}; baseline tpr {:.3}, success {:.3})",
            report.points[i].lambda,
            report.points[i].tpr,
            report.points[i].success_rate,
            report.baseline.tpr,
            report.baseline.success_rate
        ),
        None => log::warn!("no feasible grid point"),
    }
    write_json(&ctx.out(&a.out)?, &AwareOutput { report, selected_config })
}

#[derive(Serialize)]
struct EvalExtras {
    profiles: Vec<CalibrationProfile>,
    degradation: Vec<(Method, eval::Degradation)>,
}

fn run_eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let net = load_net(&a.ckpt)?;
    let spec = a.env.load()?;
    // Calibration and evaluation episodes come from disjoint seed streams.
    let calib_seed = seed::derive(ctx.seed, 1);
    let eval_seed = seed::derive(ctx.seed, 2);
    let base: Vec<Vec<f64>> = agent::base_rollout(&net, &spec, a.calib_episodes, calib_seed)?
        .into_iter()
        .map(|v| v.obs)
        .collect();
    let cfgs: Vec<AttackConfig> = a
        .attacks
        .iter()
        .map(|&m| -> Result<AttackConfig> {
            let path = a.attack_configs.as_ref().map(|d| d.join(format!("{m}.json")));
            Ok(match path {
                Some(p) if p.exists() => AttackConfig::load(&p, Some(m))?,
                _ => AttackConfig::for_method(m),
            })
        })
        .collect::<Result<_>>()?;

    let mut records: Vec<ScoredState> = Vec::new();
    let mut profiles = Vec::new();
    for &stat in &a.stat {
        let mut cal = detector::calibrate(&net, &base, a.epsilon, stat.into(), ctx.seed)?;
        detector::set_threshold(&mut cal, a.fpr)?;
        log::info!("{} profile: t = {:.4} over {} states", cal.profile.statistic, cal.profile.t.unwrap(), cal.profile.n);
        records.extend(eval::build_eval_set(&net, &spec, &cal.profile, &cfgs, a.episodes, eval_seed)?);
        profiles.push(cal.profile);
    }
    let report = EvalReport::new(records, a.fpr)?;
    for s in &report.summary {
        log::info!(
            "{} {:>8}: success {:.3} tpr {:.3} fpr {:.3} auc {:.3}",
            s.stat,
            s.attack.name(),
            s.success_rate,
            s.tpr,
            s.fpr,
            s.auc
        );
    }
    let dir = ctx.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    eval::emit_report(&dir, &report)?;

    let mut degradation = Vec::new();
    if a.degradation {
        for cfg in &cfgs {
            degradation.push((cfg.method, eval::return_degradation(&net, &spec, cfg, a.episodes, eval_seed)?));
        }
    }
    write_json(&ctx.out(Path::new("eval_extras.json"))?, &EvalExtras { profiles, degradation })
}

#[derive(Serialize)]
struct RocOutput {
    fpr_target: f64,
    tpr: f64,
    interpolated: bool,
    base: usize,
    adversarial: usize,
    curve: eval::RocCurve,
}

fn roc(ctx: &Ctx, a: RocArgs) -> Result<()> {
    let text = fs::read_to_string(&a.results).with_context(|| format!("reading {}", a.results.display()))?;
    let want_stat = a.stat.map(Statistic::from);
    let (mut base, mut adv) = (Vec::new(), Vec::new());
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            bail!("{}:{}: expected 8 columns", a.results.display(), i + 1);
        }
        let stat: Statistic = f[4].parse()?;
        if want_stat.is_some_and(|s| s != stat) {
            continue;
        }
        let z: f64 = f[5].parse().with_context(|| format!("{}:{}: z_abs", a.results.display(), i + 1))?;
        if z.is_nan() {
            continue;
        }
        match f[2] {
            l if l == Label::Base.name() => base.push(z),
            l if l == Label::Adversarial.name() => {
                let m: Method = f[3].parse()?;
                if a.attack.is_none_or(|w| w == m) {
                    adv.push(z);
                }
            }
            other => bail!("{}:{}: unknown label {other}", a.results.display(), i + 1),
        }
    }
    let curve = eval::roc_from_scores(&base, &adv)?;
    let tpr = eval::tpr_at_fpr(&curve, a.fpr, a.interpolate);
    log::info!("AUC {:.4}, TPR@{} = {tpr:.4}", curve.auc, a.fpr);
    write_json(
        &ctx.out(&a.out)?,
        &RocOutput {
            fpr_target: a.fpr,
            tpr,
            interpolated: a.interpolate,
            base: base.len(),
            adversarial: adv.len(),
            curve,
        },
    )
}
