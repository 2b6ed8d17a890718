use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use tracelens::aggregate::{
    replay_alarms, EventConfig, EventMode, EventReport, MagnitudeSample, ReplayConfig,
    SeverityKind, DEFAULT_EVENT_THRESHOLD, DEFAULT_TOPK, DEFAULT_WINDOW,
};
use tracelens::delaydetect::{
    min_bin_hours, min_detectable_event, DEFAULT_ALPHA, DEFAULT_MIN_DIFF_MS, DEFAULT_Z, MIN_SAMPLES,
};
use tracelens::diffrtt::{DiversityConfig, DEFAULT_ENTROPY_THRESHOLD, DEFAULT_MIN_AS};
use tracelens::fwdetect::{DEFAULT_FW_ALPHA, DEFAULT_TAU};
use tracelens::ingest::{parse_records, Asn, BinConfig, PrefixTable, DEFAULT_BIN_WIDTH};
use tracelens::output::{read_alarm_stream, write_bin, write_events, write_series};
use tracelens::pipeline::{group_by_bin, Pipeline, PipelineConfig};
use tracelens::state;
use tracelens::synth::{
    default_topology_text, generate, AnomalyScript, SynthConfig, Topology, DEFAULT_START,
};

#[derive(Parser)]
#[command(
    name = "tracelens",
    version,
    about = "Delay-change and forwarding-anomaly detection from traceroutes"
)]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only report warnings and errors on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the detection pipeline over a traceroute file.
    Run(RunArgs),
    /// Generate a synthetic traceroute corpus.
    Synth(SynthArgs),
    /// Per-AS severity series and magnitudes from an alarm stream.
    Magnitude(MagnitudeArgs),
    /// Detect and characterize per-AS events from an alarm stream.
    Characterize(CharacterizeArgs),
    /// Smallest detectable event for a probing setup.
    Mindetect(MindetectArgs),
}

#[derive(Args)]
struct TableArgs {
    /// Prefix-to-AS table (prefix, length and ASN separated by tabs).
    #[arg(long)]
    pfx2as: Option<PathBuf>,
    /// Bin width in seconds.
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    bin_width: i64,
}

#[derive(Args)]
struct EventArgs {
    /// Sliding window of the magnitude, in bins.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Prefixes reported per event.
    #[arg(long, default_value_t = DEFAULT_TOPK)]
    topk: usize,
    /// |magnitude| above which a bin belongs to an event.
    #[arg(long, default_value_t = DEFAULT_EVENT_THRESHOLD)]
    event_threshold: f64,
    /// Characterize events over the peak bin only instead of every bin above
    /// the threshold.
    #[arg(long)]
    peak_only: bool,
}

impl EventArgs {
    fn config(&self) -> EventConfig {
        EventConfig {
            window: self.window,
            threshold: self.event_threshold,
            topk: self.topk,
            mode: if self.peak_only {
                EventMode::Peak
            } else {
                EventMode::Contiguous
            },
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Traceroute records, one JSON object per line ("-" for stdin).
    #[arg(long, default_value = "-")]
    input: String,
    #[command(flatten)]
    table: TableArgs,
    /// Alarm and event output ("-" for stdout).
    #[arg(long, default_value = "-")]
    output: String,
    /// Write per-AS magnitudes for every bin to this file.
    #[arg(long)]
    series: Option<PathBuf>,
    /// Checkpoint to resume from (if present) and to write at the end.
    #[arg(long)]
    state: Option<PathBuf>,
    /// Minimum number of distinct probe ASes per link.
    #[arg(long, default_value_t = DEFAULT_MIN_AS)]
    min_as: usize,
    /// Minimum normalized entropy of probes across ASes.
    #[arg(long, default_value_t = DEFAULT_ENTROPY_THRESHOLD)]
    entropy_threshold: f64,
    /// Seed of the probe-balancing draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smoothing factor of delay references.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Smallest median change reported, in ms.
    #[arg(long, default_value_t = DEFAULT_MIN_DIFF_MS)]
    min_diff_ms: f64,
    /// Confidence coefficient of the median interval.
    #[arg(long, default_value_t = DEFAULT_Z)]
    z: f64,
    /// Fewest samples for a link to raise a delay alarm.
    #[arg(long, default_value_t = MIN_SAMPLES)]
    min_samples: usize,
    /// Correlation below which a forwarding pattern is anomalous.
    #[arg(long, default_value_t = DEFAULT_TAU, allow_hyphen_values = true)]
    tau: f64,
    /// Smoothing factor of forwarding references.
    #[arg(long, default_value_t = DEFAULT_FW_ALPHA)]
    fw_alpha: f64,
    /// Declared traceroutes per probe per hour; rejects bins too short for it.
    #[arg(long)]
    probing_rate: Option<f64>,
    /// Report events still open after the last bin.
    #[arg(long)]
    flush_events: bool,
    #[command(flatten)]
    events: EventArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Topology file; the built-in topology is used when absent.
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Anomaly script.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long, default_value_t = 48)]
    bins: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_BIN_WIDTH)]
    bin_width: i64,
    /// Timestamp of the first bin.
    #[arg(long, default_value_t = DEFAULT_START)]
    start: i64,
    /// Records output ("-" for stdout).
    #[arg(long, default_value = "-")]
    output: String,
    /// Also write the topology's prefix-to-AS table here.
    #[arg(long)]
    pfx2as_out: Option<PathBuf>,
    /// Print the built-in topology and exit.
    #[arg(long)]
    print_topology: bool,
}

#[derive(Args)]
struct StreamArgs {
    /// Alarm stream written by `run` ("-" for stdin).
    #[arg(long, default_value = "-")]
    input: String,
    #[command(flatten)]
    table: TableArgs,
    /// First bin start (defaults to the earliest alarm).
    #[arg(long)]
    from: Option<i64>,
    /// Last bin start (defaults to the latest alarm).
    #[arg(long)]
    to: Option<i64>,
    #[arg(long, default_value = "-")]
    output: String,
}

#[derive(Args)]
struct MagnitudeArgs {
    #[command(flatten)]
    stream: StreamArgs,
    /// Sliding window of the magnitude, in bins.
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Only report this AS.
    #[arg(long)]
    asn: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Delay,
    Forwarding,
}

#[derive(Args)]
struct CharacterizeArgs {
    #[command(flatten)]
    stream: StreamArgs,
    #[command(flatten)]
    events: EventArgs,
    /// Only report this AS.
    #[arg(long)]
    asn: Option<u32>,
    /// Only report events of this kind.
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// Report events still open after the last bin.
    #[arg(long)]
    flush_events: bool,
}

#[derive(Args)]
struct MindetectArgs {
    /// Traceroutes per probe per hour.
    #[arg(long)]
    rate: f64,
    /// Probes monitoring the link.
    #[arg(long, default_value_t = DEFAULT_MIN_AS as u32)]
    probes: u32,
    /// Bin width in hours.
    #[arg(long, default_value_t = 1.0)]
    bin_hours: f64,
}

fn open_input(path: &str) -> Result<Box<dyn BufRead>> {
    if path == "-" {
        return Ok(Box::new(BufReader::new(io::stdin().lock())));
    }
    let file = File::open(path).with_context(|| format!("cannot open {path}"))?;
    Ok(Box::new(BufReader::with_capacity(1 << 20, file)))
}

fn open_output(path: &str) -> Result<Box<dyn Write>> {
    if path == "-" {
        return Ok(Box::new(BufWriter::new(io::stdout().lock())));
    }
    let file = File::create(path).with_context(|| format!("cannot create {path}"))?;
    Ok(Box::new(BufWriter::new(file)))
}

fn load_table(path: Option<&Path>) -> Result<PrefixTable> {
    let Some(path) = path else {
        return Ok(PrefixTable::new());
    };
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let table = PrefixTable::from_pfx2as(BufReader::new(file))
        .with_context(|| format!("in {}", path.display()))?;
    info!("loaded {} prefixes from {}", table.len(), path.display());
    Ok(table)
}

fn bin_config(width: i64) -> Result<BinConfig> {
    BinConfig::new(width).map_err(|e| anyhow::anyhow!("{e}"))
}

fn run(args: RunArgs) -> Result<()> {
    let bins = bin_config(args.table.bin_width)?;
    let config = PipelineConfig {
        bins,
        diversity: DiversityConfig {
            min_as: args.min_as,
            entropy_threshold: args.entropy_threshold,
        },
        seed: args.seed,
        z: args.z,
        alpha: args.alpha,
        min_diff_ms: args.min_diff_ms,
        min_samples: args.min_samples,
        tau: args.tau,
        fw_alpha: args.fw_alpha,
        events: args.events.config(),
        probing_rate: args.probing_rate,
    };
    config.validate()?;
    let table = load_table(args.table.pfx2as.as_deref())?;
    if table.is_empty() {
        warn!("no prefix table: probe ASNs come from the records and every address maps to AS0");
    }

    let parsed =
        parse_records(open_input(&args.input)?, Some(&table)).context("reading traceroutes")?;
    if parsed.skipped > 0 {
        warn!("skipped {} malformed input lines", parsed.skipped);
    }
    let n_records = parsed.records.len();
    info!("read {n_records} traceroutes");
    let grouped = group_by_bin(parsed.records, &bins);

    let mut pipeline = match args.state.as_deref().filter(|p| p.exists()) {
        Some(path) => {
            let checkpoint =
                state::load(path).with_context(|| format!("loading {}", path.display()))?;
            info!(
                "resuming after bin {:?} from {}",
                checkpoint.state.last_bin,
                path.display()
            );
            Pipeline::resume(config, table, checkpoint)?
        }
        None => Pipeline::new(config, table)?,
    };

    let mut out = open_output(&args.output)?;
    let mut series = match &args.series {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => None,
    };
    let (mut delay, mut forwarding, mut events) = (0usize, 0usize, 0usize);
    let processed = pipeline.run(&grouped, |bin| -> Result<()> {
        delay += bin.delay_alarms.len();
        forwarding += bin.forwarding_alarms.len();
        events += bin.events.len();
        write_bin(&mut out, &bin)?;
        if let Some(s) = series.as_mut() {
            write_series(s, &bin.magnitudes)?;
        }
        Ok(())
    })?;

    if let Some(path) = &args.state {
        state::save(&pipeline.checkpoint(), path)
            .with_context(|| format!("saving {}", path.display()))?;
        info!("checkpoint written to {}", path.display());
    }
    if args.flush_events {
        let open = pipeline.flush_events();
        events += open.len();
        write_events(&mut out, &open)?;
    }
    out.flush()?;
    if let Some(s) = series.as_mut() {
        s.flush()?;
    }
    info!(
        "{processed} bins processed: {delay} delay alarms, {forwarding} forwarding alarms, {events} events"
    );
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    if args.print_topology {
        print!("{}", default_topology_text());
        return Ok(());
    }
    let text = match &args.topology {
        Some(p) => fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?,
        None => default_topology_text(),
    };
    let topo = Topology::parse(&text).context("in topology")?;
    let script = match &args.script {
        Some(p) => {
            let s =
                fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            AnomalyScript::parse(&s, &topo).context("in script")?
        }
        None => AnomalyScript::empty(),
    };
    if args.bin_width <= 0 {
        bail!("bin width must be positive");
    }
    let cfg = SynthConfig {
        bins: args.bins,
        seed: args.seed,
        bin_width: args.bin_width,
        start: args.start,
    };
    let records = generate(&topo, &script, &cfg);
    let mut out = open_output(&args.output)?;
    for r in &records {
        out.write_all(r.to_json_line().as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    if let Some(p) = &args.pfx2as_out {
        let file = File::create(p).with_context(|| format!("cannot create {}", p.display()))?;
        let mut w = BufWriter::new(file);
        topo.prefix_table().write_pfx2as(&mut w)?;
        w.flush()?;
    }
    info!(
        "generated {} traceroutes over {} bins",
        records.len(),
        args.bins
    );
    Ok(())
}

fn replay(
    stream: &StreamArgs,
    events: EventConfig,
    flush: bool,
) -> Result<(Vec<MagnitudeSample>, Vec<EventReport>)> {
    let bins = bin_config(stream.table.bin_width)?;
    if events.window < 2 {
        bail!("window must hold at least 2 bins");
    }
    let table = load_table(stream.table.pfx2as.as_deref())?;
    let alarms = read_alarm_stream(open_input(&stream.input)?).context("reading alarm stream")?;
    if alarms.skipped > 0 {
        warn!("skipped {} malformed lines", alarms.skipped);
    }
    info!(
        "read {} delay and {} forwarding alarms",
        alarms.delay.len(),
        alarms.forwarding.len()
    );
    Ok(replay_alarms(
        &alarms.delay,
        &alarms.forwarding,
        &table,
        &ReplayConfig {
            bins,
            from: stream.from,
            to: stream.to,
            events,
            flush,
        },
    ))
}

fn magnitude(args: MagnitudeArgs) -> Result<()> {
    let events = EventConfig {
        window: args.window,
        ..Default::default()
    };
    let (mut samples, _) = replay(&args.stream, events, false)?;
    if let Some(asn) = args.asn {
        samples.retain(|s| s.asn == Asn(asn));
    }
    let mut out = open_output(&args.stream.output)?;
    write_series(&mut out, &samples)?;
    out.flush()?;
    Ok(())
}

fn characterize(args: CharacterizeArgs) -> Result<()> {
    let (_, mut events) = replay(&args.stream, args.events.config(), args.flush_events)?;
    if let Some(asn) = args.asn {
        events.retain(|e| e.asn == Asn(asn));
    }
    if let Some(kind) = args.kind {
        let kind = match kind {
            KindArg::Delay => SeverityKind::Delay,
            KindArg::Forwarding => SeverityKind::Forwarding,
        };
        events.retain(|e| e.kind == kind);
    }
    let mut out = open_output(&args.stream.output)?;
    write_events(&mut out, &events)?;
    out.flush()?;
    info!("{} events", events.len());
    Ok(())
}

fn mindetect(args: MindetectArgs) -> Result<()> {
    let hours = min_detectable_event(args.rate, args.probes, args.bin_hours)?;
    println!("min_detectable_event_hours\t{hours:.4}");
    println!("min_detectable_event_minutes\t{:.4}", hours * 60.0);
    println!(
        "min_bin_hours\t{:.4}",
        min_bin_hours(args.rate, args.probes)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match cli.command {
        Command::Run(a) => run(a),
        Command::Synth(a) => synth(a),
        Command::Magnitude(a) => magnitude(a),
        Command::Characterize(a) => characterize(a),
        Command::Mindetect(a) => mindetect(a),
    }
}
