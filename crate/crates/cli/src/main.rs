use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use qosmon::harness::{
    self, emit_reports, invert_windows, render_reports, run_experiment, window_records, EmConfig,
    ExperimentConfig, HarnessError, InitStrategy,
};
use qosmon::monitor::{calibrate_baseline, Baseline, CusumState, Direction, EwmaState};
use qosmon::netsim::{
    self, calibrate_flow_rate, fmt_g12, write_records_csv, CalibrationSpec, GenerativeConfig,
    QueueingScenario,
};
use qosmon::streamq::{DataBuffer, GkSummary, QuantileSet, DEFAULT_PROBS};
use qosmon::tomography::{BinningSpec, DelayPmf};
use qosmon::{Execution, LogicalTree};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_ALARM: u8 = 3;

#[derive(Parser)]
#[command(name = "qosmon", version, about = "Delay QoS monitoring with active network tomography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate probe records (CSV) from a scenario or from known link pmfs.
    Simulate(SimulateArgs),
    /// Estimate per-window link delay pmfs from probe records.
    Invert(InvertArgs),
    /// Run a control chart over a per-window summary CSV.
    Monitor(MonitorArgs),
    /// Run a full experiment from a config file.
    Experiment(ExperimentArgs),
    /// Incremental quantiles of numbers read from stdin.
    Quantiles(QuantilesArgs),
}

#[derive(Args)]
struct TopologyArg {
    /// Topology JSON; defaults to the built-in 9-link tree.
    #[arg(long)]
    topology: Option<PathBuf>,
}

impl TopologyArg {
    fn load(&self) -> Result<LogicalTree, Failure> {
        let tree = match &self.topology {
            Some(p) => LogicalTree::from_file(p).map_err(Failure::config)?,
            None => LogicalTree::default_tree(),
        };
        tree.check_probing().map_err(Failure::config)?;
        Ok(tree)
    }
}

#[derive(Args)]
struct BinningArgs {
    #[arg(long, default_value_t = 0.005)]
    bin_width: f64,
    #[arg(long, default_value_t = 9)]
    top_bin: usize,
}

impl BinningArgs {
    fn spec(&self) -> Result<BinningSpec, Failure> {
        BinningSpec::new(self.bin_width, self.top_bin).map_err(Failure::config)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    topology: TopologyArg,
    /// Queueing scenario JSON. Without it, probes are sampled from link pmfs.
    #[arg(long, conflicts_with_all = ["truth", "probes"])]
    scenario: Option<PathBuf>,
    /// Tune each traffic profile's flow arrival rate before simulating.
    #[arg(long, requires = "scenario")]
    calibrate: bool,
    /// JSON array of per-link pmfs for sampling mode.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Number of probes in sampling mode.
    #[arg(long, default_value_t = 36_000)]
    probes: u64,
    /// Overrides the scenario's seed; sampling mode defaults to 1.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    binning: BinningArgs,
    /// Output CSV; stdout when omitted.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InvertArgs {
    #[command(flatten)]
    topology: TopologyArg,
    /// Probe CSV as written by `simulate`.
    records: PathBuf,
    #[arg(long, default_value_t = 600.0)]
    window: f64,
    #[command(flatten)]
    binning: BinningArgs,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Start every window from uniform pmfs instead of the previous estimate.
    #[arg(long)]
    cold_start: bool,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
    /// Directory for alpha.csv and summary.csv.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ChartKind {
    Ewma,
    Cusum,
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    TwoSided,
    Lower,
    Upper,
}

impl From<Side> for Direction {
    fn from(s: Side) -> Self {
        match s {
            Side::TwoSided => Direction::TwoSided,
            Side::Lower => Direction::Lower,
            Side::Upper => Direction::Upper,
        }
    }
}

#[derive(Args)]
struct MonitorArgs {
    /// summary.csv from `invert` or `experiment`.
    summary: PathBuf,
    #[arg(long, value_enum, default_value_t = ChartKind::Ewma)]
    chart: ChartKind,
    #[arg(long, default_value_t = 2)]
    baseline: usize,
    #[arg(long, default_value_t = 0.2)]
    lambda: f64,
    #[arg(long, default_value_t = 3.0)]
    limit: f64,
    #[arg(long, value_enum, default_value_t = Side::Lower)]
    direction: Side,
    /// Lower bound on the baseline standard deviation.
    #[arg(long, default_value_t = 0.01)]
    min_sigma: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config JSON; defaults apply to omitted fields.
    config: Option<PathBuf>,
    /// Use the built-in one-hour scenario with load changes on links 4 and 7.
    #[arg(long, conflicts_with = "config")]
    surge: bool,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct QuantilesArgs {
    /// Comma-separated probabilities to track.
    #[arg(long, value_delimiter = ',')]
    probs: Option<Vec<f64>>,
    /// Values per buffer before folding into the estimates.
    #[arg(long, default_value_t = 1000)]
    buffer: usize,
    /// Also maintain an epsilon-approximate summary.
    #[arg(long)]
    gk_eps: Option<f64>,
}

/// Error paired with its exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl Failure {
    fn config(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_CONFIG, err: e.into() }
    }

    fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self { code: EXIT_RUNTIME, err: e.into() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_config_error() {
            Failure::config(e)
        } else {
            Failure::runtime(e)
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::runtime(e)
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| p.display().to_string()).map_err(Failure::runtime)?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn simulate(a: SimulateArgs) -> Result<bool, Failure> {
    let tree = a.topology.load()?;
    let records = if let Some(path) = &a.scenario {
        let text = std::fs::read_to_string(path)
            .with_context(|| path.display().to_string())
            .map_err(Failure::config)?;
        let mut sc: QueueingScenario = serde_json::from_str(&text).map_err(Failure::config)?;
        if let Some(seed) = a.seed {
            sc.seed = seed;
        }
        if a.calibrate {
            let spec = CalibrationSpec::default();
            let n = if sc.traffic.len() == 1 && sc.links.len() == 1 { 1 } else { tree.link_count() };
            sc.traffic = (0..n)
                .map(|i| {
                    let k = qosmon::LinkId::from_index(i);
                    let p = calibrate_flow_rate(
                        sc.link_config(k),
                        sc.traffic_for(k),
                        sc.probe_rate,
                        sc.probe_bytes,
                        &spec,
                    );
                    info!("link {k}: flow arrival rate {:.4}/s", p.flow_arrival_rate);
                    p
                })
                .collect();
        }
        netsim::run_queueing(&tree, &sc).map_err(HarnessError::from)?.records
    } else {
        let binning = a.binning.spec()?;
        let truth: Vec<DelayPmf> = match &a.truth {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| p.display().to_string())
                    .map_err(Failure::config)?;
                serde_json::from_str(&text).map_err(Failure::config)?
            }
            None => vec![harness::default_truth(binning.top_bin); tree.link_count()],
        };
        let cfg =
            GenerativeConfig { n_probes: a.probes, binning, probe_interval: 0.1, seed: a.seed.unwrap_or(1) };
        netsim::run_generative(&tree, &truth, &cfg).map_err(Failure::config)?
    };
    let mut out = output(a.out.as_deref())?;
    write_records_csv(&tree, &records, &mut out).map_err(Failure::runtime)?;
    out.flush()?;
    Ok(false)
}

fn invert(a: InvertArgs) -> Result<bool, Failure> {
    let tree = a.topology.load()?;
    let binning = a.binning.spec()?;
    if a.window.is_nan() || a.window <= 0.0 {
        return Err(Failure::config(anyhow::anyhow!("--window must be positive")));
    }
    let file = File::open(&a.records)
        .with_context(|| a.records.display().to_string())
        .map_err(Failure::config)?;
    let records = netsim::read_records_csv(&tree, io::BufReader::new(file)).map_err(Failure::config)?;
    let windows = window_records(&records, a.window, &binning).map_err(Failure::config)?;
    let sets: Vec<_> = windows.iter().map(|w| w.observation_set()).collect();
    let em = EmConfig {
        tol: a.tol,
        max_iter: a.max_iter,
        init: if a.cold_start { InitStrategy::Uniform } else { InitStrategy::PreviousWindow },
        execution: if a.sequential { Execution::Sequential } else { Execution::Parallel },
        ..EmConfig::default()
    };
    let results = invert_windows(&tree, &sets, &binning, &em)?;
    std::fs::create_dir_all(&a.out)?;
    let mut alpha = String::from("window_index,link_id,bin_j,alpha_hat\n");
    let mut summary = String::from("window_index,link_id,p_le_1,loglik,iterations,status\n");
    for (w, inv) in results.iter().enumerate() {
        for k in tree.links() {
            let pmf = inv.result.pmf(k);
            for (j, x) in pmf.probs().iter().enumerate() {
                alpha.push_str(&format!("{w},{k},{j},{}\n", fmt_g12(*x)));
            }
            summary.push_str(&format!(
                "{w},{k},{},{},{},{}\n",
                fmt_g12(pmf.cdf()[1.min(binning.top_bin)]),
                fmt_g12(inv.result.loglik),
                inv.result.iterations,
                inv.status[k.index()].as_str()
            ));
        }
    }
    std::fs::write(a.out.join("alpha.csv"), alpha)?;
    std::fs::write(a.out.join("summary.csv"), summary)?;
    Ok(false)
}

fn monitor(a: MonitorArgs) -> Result<bool, Failure> {
    let mut rdr = csv::Reader::from_path(&a.summary)
        .with_context(|| a.summary.display().to_string())
        .map_err(Failure::config)?;
    // link -> per-window values, windows in file order.
    let mut series: std::collections::BTreeMap<usize, Vec<(usize, f64)>> = Default::default();
    for row in rdr.records() {
        let row = row.map_err(Failure::config)?;
        let field = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let w: usize = field(0).parse().map_err(|_| Failure::config(anyhow::anyhow!("bad row {row:?}")))?;
        let k: usize = field(1).parse().map_err(|_| Failure::config(anyhow::anyhow!("bad row {row:?}")))?;
        let p: f64 = field(2).parse().map_err(|_| Failure::config(anyhow::anyhow!("bad row {row:?}")))?;
        series.entry(k).or_default().push((w, p));
    }
    if a.baseline < 2 {
        return Err(Failure::config(anyhow::anyhow!("--baseline needs at least 2 windows")));
    }
    let dir: Direction = a.direction.into();
    let mut out = io::stdout().lock();
    writeln!(out, "window_index,link_id,statistic,z_value,limit,alarm")?;
    let mut any = false;
    for (k, mut s) in series {
        s.sort_by_key(|x| x.0);
        if s.len() <= a.baseline {
            continue;
        }
        let vals: Vec<f64> = s[..a.baseline].iter().map(|x| x.1).collect();
        let b = calibrate_baseline(&vals).map_err(Failure::config)?;
        let b = Baseline { sd: b.sd.max(a.min_sigma), ..b };
        match a.chart {
            ChartKind::Ewma => {
                let mut st =
                    EwmaState::calibrated(a.lambda, a.limit, dir, b).map_err(Failure::config)?;
                for &(w, x) in &s[a.baseline..] {
                    let c = st.step(x).map_err(Failure::runtime)?;
                    let limit = if dir == Direction::Upper { c.upper } else { c.lower };
                    any |= c.alarm;
                    writeln!(
                        out,
                        "{w},{k},ewma,{},{},{}",
                        fmt_g12(c.value),
                        fmt_g12(limit),
                        u8::from(c.alarm)
                    )?;
                }
            }
            ChartKind::Cusum => {
                let mut st = CusumState::from_baseline(b, dir).map_err(Failure::config)?;
                for &(w, x) in &s[a.baseline..] {
                    let c = st.step(x).map_err(Failure::runtime)?;
                    let (hi, lo) = st.sums();
                    any |= c.alarm;
                    writeln!(
                        out,
                        "{w},{k},cusum,{},{},{}",
                        fmt_g12(hi.max(lo)),
                        fmt_g12(st.threshold()),
                        u8::from(c.alarm)
                    )?;
                }
            }
        }
    }
    Ok(any)
}

fn experiment(a: ExperimentArgs) -> Result<bool, Failure> {
    let mut cfg = match (&a.config, a.surge) {
        (Some(p), _) => ExperimentConfig::from_file(p)?,
        (None, true) => ExperimentConfig::surge_scenario(),
        (None, false) => ExperimentConfig::default(),
    };
    cfg.apply_env_overrides()?;
    if let Some(d) = a.output_dir {
        cfg.output_dir = d;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let outcome = run_experiment(&cfg)?;
    // Render first so a failure leaves no partial output.
    render_reports(&outcome)?;
    let written = emit_reports(&outcome, &outcome.config.output_dir)?;
    let mut out = io::stdout().lock();
    writeln!(out, "window  probes   lost  iters  alarms")?;
    for r in &outcome.reports {
        let alarms: Vec<String> = r.alarms().map(|k| k.to_string()).collect();
        writeln!(
            out,
            "{:>6} {:>7} {:>6} {:>6}  {}",
            r.index + 1,
            r.probes,
            r.lost,
            r.iterations,
            if alarms.is_empty() { "-".to_string() } else { alarms.join(",") }
        )?;
    }
    writeln!(out, "wrote {} files to {}", written.len(), outcome.config.output_dir.display())?;
    Ok(outcome.any_alarm())
}

fn quantiles(a: QuantilesArgs) -> Result<bool, Failure> {
    let probs = a.probs.unwrap_or_else(|| DEFAULT_PROBS.to_vec());
    let mut set = QuantileSet::new(&probs).map_err(Failure::config)?;
    if a.buffer == 0 {
        return Err(Failure::config(anyhow::anyhow!("--buffer must be at least 1")));
    }
    let mut buf = DataBuffer::new(a.buffer);
    let mut gk = match a.gk_eps {
        Some(e) => Some(GkSummary::new(e).map_err(Failure::config)?),
        None => None,
    };
    let mut text = String::new();
    io::stdin().lock().read_to_string(&mut text)?;
    let mut seen = 0u64;
    for tok in text.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
        let x: f64 = tok
            .parse()
            .map_err(|_| Failure::config(anyhow::anyhow!("not a number: {tok:?}")))?;
        if buf.is_full() {
            set.iqe_update(&mut buf).map_err(Failure::runtime)?;
        }
        buf.push(x).map_err(Failure::config)?;
        if let Some(g) = gk.as_mut() {
            g.insert(x).map_err(Failure::config)?;
        }
        seen += 1;
    }
    if seen == 0 {
        return Err(Failure::runtime(anyhow::anyhow!("no values on stdin")));
    }
    if !buf.is_empty() {
        set.iqe_update(&mut buf).map_err(Failure::runtime)?;
    }
    let mut out = io::stdout().lock();
    writeln!(out, "p,iqe{}", if gk.is_some() { ",gk" } else { "" })?;
    for (p, q, _) in set.rows() {
        let g = match &gk {
            Some(g) => format!(",{}", fmt_g12(g.query(p).map_err(Failure::runtime)?)),
            None => String::new(),
        };
        writeln!(out, "{},{}{g}", fmt_g12(p), fmt_g12(q))?;
    }
    Ok(false)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    let res = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Invert(a) => invert(a),
        Command::Monitor(a) => monitor(a),
        Command::Experiment(a) => experiment(a),
        Command::Quantiles(a) => quantiles(a),
    };
    match res {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(EXIT_ALARM),
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
