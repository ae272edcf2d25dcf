//! `impostor`: ingestion, offline model building, impostor synthesis and
//! efficacy evaluation from the command line.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use impostor_core::adversary::{restrict_to_days, split_days, write_curve, write_reports, Harness, Method};
use impostor_core::city::{generate_synthetic_city, write_labels, ClassLayout, SyntheticCitySpec};
use impostor_core::config::RunConfig;
use impostor_core::ingest::{load_any, write_traces_file, DatasetDescriptor, DatasetFormat};
use impostor_core::offline::{OfflineModel, StationSource};
use impostor_core::synth::{blend_query_set, derive_seed, FakeRecordStore, QueryContext, Synthesizer};
use impostor_core::{Error, Record, Trace};

const TRACES_FILE: &str = "traces.csv";
const LABELS_FILE: &str = "labels.csv";
const MODEL_DIR: &str = "model";
const STORE_FILE: &str = "store.log";

#[derive(Parser)]
#[command(name = "impostor", version, about = "Plausible impostor traces for location privacy")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `rng_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Standardize a raw fix file into region traces.
    Ingest(IngestArgs),
    /// Generate the synthetic city and its region labels.
    GenCity,
    /// Build and persist the offline models.
    BuildOffline(TracesArg),
    /// Synthesize impostors for a query file.
    Synthesize(SynthArgs),
    /// Attack impostors and baselines and report efficacy.
    Evaluate(EvalArgs),
    /// Summarize traces and a built model.
    Stats(StatsArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Raw fixes; defaults to `dataset_path` from the config.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct TracesArg {
    /// Trace or raw fix file; defaults to `<out-dir>/traces.csv`, then
    /// `dataset_path`.
    #[arg(long)]
    traces: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Lines of `user_id,second_of_day,lat,lon[,day]`.
    #[arg(long)]
    queries: PathBuf,
    #[command(flatten)]
    traces: TracesArg,
    /// Impostors per query.
    #[arg(short, long, default_value_t = 10)]
    n: usize,
    /// Model directory; defaults to `<out-dir>/model`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    traces: TracesArg,
    #[arg(long, value_delimiter = ',', default_value = "impostor,random_walk")]
    methods: Vec<String>,
    #[arg(long = "n", value_delimiter = ',', default_value = "1,4,7,10")]
    n_list: Vec<usize>,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    traces: TracesArg,
    #[arg(long)]
    model: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.downcast_ref::<Error>().is_some_and(Error::is_config)
                || e.downcast_ref::<ConfigError>().is_some();
            ExitCode::from(if config { 2 } else { 3 })
        }
    }
}

/// Marks failures caused by the invocation rather than the data.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.params.rng_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    fs::create_dir_all(&cli.out_dir).with_context(|| format!("creating {}", cli.out_dir.display()))?;
    match &cli.command {
        Command::Ingest(a) => ingest(&cfg, &cli.out_dir, a),
        Command::GenCity => gen_city(&cfg, &cli.out_dir),
        Command::BuildOffline(a) => build_offline(&cfg, &cli.out_dir, a),
        Command::Synthesize(a) => synthesize(&cfg, &cli.out_dir, a),
        Command::Evaluate(a) => evaluate(&cfg, &cli.out_dir, a),
        Command::Stats(a) => stats(&cfg, &cli.out_dir, a),
    }
}

fn descriptor(cfg: &RunConfig, path: PathBuf) -> DatasetDescriptor {
    DatasetDescriptor {
        format: cfg.dataset_format,
        path,
        map: cfg.map.clone(),
        utc_offset_s: cfg.utc_offset_s,
    }
}

fn station_source(cfg: &RunConfig) -> StationSource {
    match cfg.dataset_format {
        DatasetFormat::TaxiOccupancy => StationSource::Occupancy,
        DatasetFormat::PrivateCar => StationSource::Parking,
    }
}

fn load_traces(cfg: &RunConfig, out_dir: &Path, arg: &TracesArg) -> Result<Vec<Trace>> {
    let path = arg
        .traces
        .clone()
        .or_else(|| Some(out_dir.join(TRACES_FILE)).filter(|p| p.exists()))
        .or_else(|| cfg.dataset_path.clone())
        .ok_or_else(|| config_error("no traces given: pass --traces or set dataset_path"))?;
    let clock = Instant::now();
    let ingested = load_any(&descriptor(cfg, path.clone())).with_context(|| format!("loading {}", path.display()))?;
    info!(
        "loaded {} traces, {} records from {} in {:?}",
        ingested.traces.len(),
        ingested.n_records(),
        path.display(),
        clock.elapsed()
    );
    Ok(ingested.traces)
}

fn ingest(cfg: &RunConfig, out_dir: &Path, a: &IngestArgs) -> Result<()> {
    let path = a
        .input
        .clone()
        .or_else(|| cfg.dataset_path.clone())
        .ok_or_else(|| config_error("no input given: pass --input or set dataset_path"))?;
    let clock = Instant::now();
    let ingested = load_any(&descriptor(cfg, path))?;
    let out = out_dir.join(TRACES_FILE);
    write_traces_file(&out, &ingested.traces)?;
    println!(
        "ingested rows={} records={} traces={} dropped={} duplicates={}",
        ingested.rows,
        ingested.n_records(),
        ingested.traces.len(),
        ingested.dropped,
        ingested.duplicates
    );
    info!("ingest took {:?}", clock.elapsed());
    Ok(())
}

fn gen_city(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let c = &cfg.city;
    let seed = cfg.params.rng_seed;
    let spec = SyntheticCitySpec {
        map: cfg.map.clone(),
        layout: ClassLayout::scattered(&cfg.map, seed),
        n_agents: c.agents,
        n_days: c.days,
        schedule_noise_min: c.noise_min,
        leisure_prob: c.leisure_prob,
        sample_period_s: c.sample_s,
        rng_seed: seed,
    };
    let clock = Instant::now();
    let city = generate_synthetic_city(&spec)?;
    write_traces_file(&out_dir.join(TRACES_FILE), &city.traces)?;
    write_labels(File::create(out_dir.join(LABELS_FILE))?, &city.labels)?;
    println!(
        "city agents={} days={} records={} trips={}",
        c.agents,
        c.days,
        city.n_records(),
        city.trips.len()
    );
    info!("generation took {:?}", clock.elapsed());
    Ok(())
}

fn dir_bytes(dir: &Path) -> Result<u64> {
    let mut total = 0;
    for e in fs::read_dir(dir)? {
        let e = e?;
        if e.file_type()?.is_file() {
            total += e.metadata()?.len();
        }
    }
    Ok(total)
}

/// Peak resident set size, when the platform reports it.
fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn build_offline(cfg: &RunConfig, out_dir: &Path, a: &TracesArg) -> Result<()> {
    let traces = load_traces(cfg, out_dir, a)?;
    let clock = Instant::now();
    let (model, stats) = OfflineModel::build(&traces, &cfg.map, &cfg.scheme, &cfg.params, station_source(cfg))?;
    let build = clock.elapsed();
    let dir = out_dir.join(MODEL_DIR);
    model.save(&dir)?;
    let t = &stats.timings;
    println!(
        "model regions={} scored={} clusters={} edges={} tensor={} stations={} sections={}",
        cfg.map.n_regions(),
        model.semantics.graph.len(),
        model.semantics.clustering.n_clusters(),
        model.mobility.n_edges(),
        model.mobility.n_tensor_entries(),
        stats.n_stations,
        stats.n_sections
    );
    eprintln!(
        "timing records={} total={:.3}s speeds={:.3}s stations={:.3}s semantics={:.3}s mobility={:.3}s ranks={:.3}s",
        stats.n_records,
        build.as_secs_f64(),
        t.speeds.as_secs_f64(),
        t.stations.as_secs_f64(),
        t.semantics.as_secs_f64(),
        t.mobility.as_secs_f64(),
        t.ranks.as_secs_f64()
    );
    eprintln!(
        "memory artifacts={}B peak_rss={}",
        dir_bytes(&dir)?,
        peak_rss_kb().map_or("n/a".to_string(), |kb| format!("{kb}kB"))
    );
    Ok(())
}

struct Query {
    user_id: String,
    second_of_day: u32,
    lat: f64,
    lon: f64,
    day: Option<i64>,
}

fn read_queries(path: &Path) -> Result<Vec<Query>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if i == 0 && rec.get(1).is_some_and(|f| f.parse::<u32>().is_err()) {
            continue; // header
        }
        let bad = |what: &str| anyhow!(Error::MalformedRow { row: i + 1, reason: format!("bad {what}") });
        let get = |j: usize, what: &str| rec.get(j).filter(|s| !s.is_empty()).ok_or_else(|| bad(what));
        out.push(Query {
            user_id: get(0, "user_id")?.to_string(),
            second_of_day: get(1, "second_of_day")?.parse().map_err(|_| bad("second_of_day"))?,
            lat: get(2, "lat")?.parse().map_err(|_| bad("lat"))?,
            lon: get(3, "lon")?.parse().map_err(|_| bad("lon"))?,
            day: match rec.get(4).filter(|s| !s.is_empty()) {
                Some(d) => Some(d.parse().map_err(|_| bad("day"))?),
                None => None,
            },
        });
        if out.last().unwrap().second_of_day >= 86_400 {
            return Err(bad("second_of_day"));
        }
    }
    Ok(out)
}

fn percentile(sorted: &[Duration], q: f64) -> Duration {
    if sorted.is_empty() {
        return Duration::ZERO;
    }
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn synthesize(cfg: &RunConfig, out_dir: &Path, a: &SynthArgs) -> Result<()> {
    let model_dir = a.model.clone().unwrap_or_else(|| out_dir.join(MODEL_DIR));
    let model = OfflineModel::load(&model_dir).with_context(|| format!("loading model from {}", model_dir.display()))?;
    let traces = load_traces(cfg, out_dir, &a.traces)?;
    let queries = read_queries(&a.queries)?;
    let store_path = cfg.store_path.clone().unwrap_or_else(|| out_dir.join(STORE_FILE));
    let mut store = FakeRecordStore::open(&store_path, model.scheme.n_user)?;
    let synth = Synthesizer::with_seed(&model, cfg.params.rng_seed);
    let imp_dir = out_dir.join("impostors");
    fs::create_dir_all(&imp_dir)?;
    let mut blended = BufWriter::new(File::create(out_dir.join("blended.csv"))?);
    writeln!(blended, "query_id,region,interval")?;
    let mut latencies = Vec::with_capacity(queries.len());
    let n_user = model.scheme.n_user;
    for (qid, q) in queries.iter().enumerate() {
        let region = model.map.fix_to_region(q.lat, q.lon)?;
        let trace = traces.iter().find(|t| t.vehicle_id == q.user_id);
        let day = q
            .day
            .or_else(|| trace.and_then(|t| t.records.last()).map(Record::day))
            .unwrap_or(0);
        let target = Record::at(region, day, q.second_of_day);
        let ctx = match trace {
            Some(t) => QueryContext::around(t, target, cfg.params.window_seconds(), a.n),
            None => QueryContext {
                user_id: q.user_id.clone(),
                target,
                trajectory: vec![target],
                n: a.n,
            },
        };
        let clock = Instant::now();
        let out = synth.synthesize(&ctx, &mut store)?;
        let took = clock.elapsed();
        latencies.push(took);
        info!(
            "query {qid} user={} stations={} impostors={} took {:?}",
            q.user_id,
            out.template.stations.len(),
            out.impostors.len(),
            took
        );
        for (i, imp) in out.impostors.iter().enumerate() {
            let mut w = BufWriter::new(File::create(imp_dir.join(format!("q{qid:04}_{i:02}.csv")))?);
            writeln!(w, "region,cloak_interval,ET_s")?;
            for r in &imp.records {
                writeln!(w, "{},{},{:.3}", r.region, r.cloak, r.et)?;
            }
            w.flush()?;
        }
        let seed = derive_seed(cfg.params.rng_seed, &[qid as u64, target.time as u64]);
        let (set, _) = blend_query_set(target, &out.fakes, seed);
        for r in set {
            writeln!(blended, "{qid},{},{}", r.region, r.interval(n_user))?;
        }
    }
    blended.flush()?;
    latencies.sort();
    println!(
        "synthesized queries={} n={} store_entries={}",
        queries.len(),
        a.n,
        store.len()
    );
    eprintln!(
        "latency median={:?} p99={:?} max={:?}",
        percentile(&latencies, 0.5),
        percentile(&latencies, 0.99),
        latencies.last().copied().unwrap_or_default()
    );
    Ok(())
}

fn evaluate(cfg: &RunConfig, out_dir: &Path, a: &EvalArgs) -> Result<()> {
    let methods: Vec<Method> = a
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<std::result::Result<_, _>>()?;
    let traces = load_traces(cfg, out_dir, &a.traces)?;
    let (train, test) = split_days(&traces, cfg.eval.train_fraction);
    if test.is_empty() || train.is_empty() {
        return Err(anyhow!(Error::config("need at least one training and one test day")));
    }
    let clock = Instant::now();
    let (model, _) = OfflineModel::build(
        &restrict_to_days(&traces, &train),
        &cfg.map,
        &cfg.scheme,
        &cfg.params,
        station_source(cfg),
    )?;
    info!("training model built in {:?}", clock.elapsed());
    let harness = Harness::new(&model, cfg.eval.clone(), cfg.params.rng_seed);
    let mut reports = Vec::new();
    for &m in &methods {
        for &n in &a.n_list {
            let clock = Instant::now();
            let r = harness.evaluate(&traces, m, n)?;
            info!("{} n={} took {:?}", m.as_str(), n, clock.elapsed());
            println!(
                "efficacy method={} n={} sets={} errors={} efficacy={:.4}",
                m.as_str(),
                n,
                r.n_sets,
                r.errors,
                r.efficacy
            );
            reports.push(r);
        }
    }
    write_reports(File::create(out_dir.join("efficacy.csv"))?, &reports)?;
    write_curve(File::create(out_dir.join("efficacy_curve.csv"))?, &reports)?;
    Ok(())
}

fn stats(cfg: &RunConfig, out_dir: &Path, a: &StatsArgs) -> Result<()> {
    let have_traces = a.traces.traces.is_some() || out_dir.join(TRACES_FILE).exists() || cfg.dataset_path.is_some();
    if have_traces {
        let traces = load_traces(cfg, out_dir, &a.traces)?;
        let records: usize = traces.iter().map(Trace::len).sum();
        let gaps: usize = traces.iter().map(|t| t.gaps(&cfg.map).len()).sum();
        let days = split_days(&traces, 1.0).0.len();
        println!("traces vehicles={} records={records} days={days} gaps={gaps}", traces.len());
    }
    let model_dir = a.model.clone().unwrap_or_else(|| out_dir.join(MODEL_DIR));
    if model_dir.exists() {
        let model = OfflineModel::load(&model_dir)?;
        println!(
            "model regions={} scored={} clusters={} skipped={} edges={} tensor={} bytes={}",
            model.map.n_regions(),
            model.semantics.graph.len(),
            model.semantics.clustering.n_clusters(),
            model.semantics.skipped.len(),
            model.mobility.n_edges(),
            model.mobility.n_tensor_entries(),
            dir_bytes(&model_dir)?
        );
        let ranks: Vec<String> = model.mobility.ranks.probs.iter().map(|p| format!("{p:.3}")).collect();
        println!("ranks {}", ranks.join(" "));
    } else if !have_traces {
        return Err(config_error("nothing to summarize: no traces and no model"));
    }
    Ok(())
}

