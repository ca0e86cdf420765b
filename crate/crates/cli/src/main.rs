//! Command-line interface: run a node, load data, run queries, generate
//! datasets, inspect status, and drive the simulated experiment campaigns.

use std::fs;
use std::path::PathBuf;
use std::thread;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use trigrid_core::dictionary::hash_term;
use trigrid_core::experiment;
use trigrid_core::keyspace::TRIPLE_KEY_BITS;
use trigrid_core::network::message::Message;
use trigrid_core::network::sim::SimConfig;
use trigrid_core::network::socket::{SocketClient, SocketNode};
use trigrid_core::ntriples;
use trigrid_core::overlay::simnet::SimNetwork;
use trigrid_core::overlay::{Peer, PeerConfig, PeerId, PeerInfo};
use trigrid_core::query::{self, OverlayClient};
use trigrid_core::storage::PeerStorage;
use trigrid_core::{KeyInterval, Layout, TripleId};

#[derive(Parser)]
#[command(name = "trigrid", version, about = "Distributed RDF triple store")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one peer as a network node.
    Node(NodeArgs),
    /// Load an N-Triples file through a running node.
    Load(LoadArgs),
    /// Run a query against a running node.
    Query(QueryArgs),
    /// Print a node's phase, path and storage counters.
    Status(StatusArgs),
    /// Generate a synthetic observation dataset as N-Triples.
    Generate(GenerateArgs),
    /// Build a simulated network and print the construction report.
    Sim(SimArgs),
    /// Run the simulated evaluation campaigns, writing CSV rows.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct NodeArgs {
    /// Key=value file supplying defaults for the other options.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Numeric peer id, unique per network.
    #[arg(long)]
    id: Option<u64>,
    /// Listen address, host:port.
    #[arg(long)]
    listen: Option<String>,
    /// Known peer, as id=host:port. Repeatable.
    #[arg(long = "peer", value_name = "ID=ADDR")]
    peers: Vec<String>,
    /// Directory for the persistent storage log.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// N-Triples file to hold locally before construction starts.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Block threshold above which an exchange splits the paths.
    #[arg(long)]
    split_blocks: Option<usize>,
    /// Copies kept per block, the origin included.
    #[arg(long)]
    replication: Option<u32>,
    /// Fraction of a block served per fetch (0 < r <= 1).
    #[arg(long)]
    retrieval_rate: Option<f64>,
}

#[derive(Args)]
struct LoadArgs {
    /// Address of any running node.
    #[arg(long)]
    to: String,
    /// N-Triples file.
    file: PathBuf,
    /// Triples per insert request.
    #[arg(long, default_value_t = 1000)]
    batch: usize,
}

#[derive(Args)]
struct QueryArgs {
    /// Address of any running node.
    #[arg(long)]
    to: String,
    /// Query text; use --file to read it from disk instead.
    query: Option<String>,
    #[arg(long, conflicts_with = "query")]
    file: Option<PathBuf>,
    /// Print raw term identifiers instead of resolving them to strings.
    #[arg(long)]
    encoded: bool,
}

#[derive(Args)]
struct StatusArgs {
    /// Address of the node to inspect.
    #[arg(long)]
    to: String,
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of stations the observations are spread over.
    #[arg(long, default_value_t = 20)]
    stations: usize,
    /// Observation records to generate (87 triples each).
    #[arg(long)]
    observations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    /// Number of peers.
    #[arg(long, default_value_t = 4)]
    peers: usize,
    /// Observation records preloaded at peer 0.
    #[arg(long, default_value_t = 50)]
    records: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Which campaign: 1 (atomic patterns) or 2 (star join).
    #[arg(long)]
    exp: u8,
    /// Scales: dataset triples for campaign 1, tuples per peer for 2.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<u64>,
    /// Network sizes; must be powers of two.
    #[arg(long, value_delimiter = ',', default_values_t = [4u32, 8, 16])]
    peers: Vec<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Campaign 2 only: fraction of a block served per fetch.
    #[arg(long)]
    retrieval_rate: Option<f64>,
    /// CSV output file; stdout when omitted.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Node(args) => cmd_node(args),
        Command::Load(args) => cmd_load(args),
        Command::Query(args) => cmd_query(args),
        Command::Status(args) => cmd_status(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Sim(args) => cmd_sim(args),
        Command::Experiment(args) => cmd_experiment(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

/// Parse a key=value config file; later lines win.
fn read_config(path: &PathBuf) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), i + 1))?;
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

fn config_get(cfg: &[(String, String)], key: &str) -> Option<String> {
    cfg.iter()
        .rev()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.clone())
}

fn parse_peer_spec(spec: &str) -> Result<PeerInfo> {
    let (id, addr) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("peer spec '{spec}' is not id=addr"))?;
    Ok(PeerInfo {
        id: PeerId(id.parse().with_context(|| format!("peer id in '{spec}'"))?),
        addr: addr.to_owned(),
    })
}

fn cmd_node(args: NodeArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(p) => read_config(p)?,
        None => Vec::new(),
    };
    let get = |cli: Option<String>, key: &str| cli.or_else(|| config_get(&cfg, key));

    let id: u64 = get(args.id.map(|v| v.to_string()), "id")
        .ok_or_else(|| anyhow!("--id or config 'id' is required"))?
        .parse()
        .context("peer id")?;
    let listen = get(args.listen, "listen")
        .ok_or_else(|| anyhow!("--listen or config 'listen' is required"))?;
    let mut seeds: Vec<PeerInfo> = args
        .peers
        .iter()
        .map(|s| parse_peer_spec(s))
        .collect::<Result<_>>()?;
    if let Some(v) = config_get(&cfg, "peers") {
        for spec in v.split(',').filter(|s| !s.trim().is_empty()) {
            seeds.push(parse_peer_spec(spec.trim())?);
        }
    }

    let mut peer_cfg = PeerConfig::default();
    if let Some(v) = get(args.split_blocks.map(|v| v.to_string()), "split-blocks") {
        peer_cfg.split_blocks = v.parse().context("split-blocks")?;
    }
    if let Some(v) = get(args.replication.map(|v| v.to_string()), "replication") {
        peer_cfg.replication_target = v.parse().context("replication")?;
    }
    if let Some(v) = get(args.retrieval_rate.map(|v| v.to_string()), "retrieval-rate") {
        let r: f64 = v.parse().context("retrieval-rate")?;
        if !(0.0..=1.0).contains(&r) || r == 0.0 {
            bail!("retrieval-rate must be in (0, 1]");
        }
        peer_cfg.retrieval_rate = Some(r);
    }

    let mut peer = Peer::new(PeerId(id), listen.clone(), peer_cfg, id);
    if let Some(dir) = get(args.data_dir.map(|p| p.display().to_string()), "data-dir") {
        let dir = PathBuf::from(dir);
        fs::create_dir_all(&dir)?;
        let storage = PeerStorage::open(PeerId(id), &dir)?;
        peer.attach_storage(storage);
    }
    if let Some(file) = &args.data {
        let text = fs::read_to_string(file)
            .with_context(|| format!("reading {}", file.display()))?;
        let triples = ntriples::parse(&text).map_err(|e| anyhow!("{e}"))?;
        let mut count = 0usize;
        for (s, p, o) in &triples {
            for term in [s, p, o] {
                peer.dict
                    .encode(term)
                    .map_err(|e| anyhow!("dictionary: {e}"))?;
            }
            let t = TripleId {
                s: hash_term(s),
                p: hash_term(p),
                o: hash_term(o),
            };
            if peer.storage.insert_triple(&t) {
                count += 1;
            }
        }
        println!("loaded {count} triples from {}", file.display());
    }

    let node = SocketNode::start(peer, seeds)?;
    println!("listening on {}", node.listen_addr());
    loop {
        thread::sleep(Duration::from_secs(5));
        log::info!("phase: {}", node.phase());
    }
}

fn cmd_load(args: LoadArgs) -> Result<()> {
    let text = fs::read_to_string(&args.file)
        .with_context(|| format!("reading {}", args.file.display()))?;
    let triples = ntriples::parse(&text).map_err(|e| anyhow!("{e}"))?;
    let total = triples.len();
    let mut client = SocketClient::connect(args.to)?;
    let mut sent = 0u64;
    for chunk in triples.chunks(args.batch.max(1)) {
        sent += client.insert(chunk.to_vec())? as u64;
    }
    println!("inserted {sent} of {total} triples");
    Ok(())
}

fn cmd_query(args: QueryArgs) -> Result<()> {
    let text = match (&args.query, &args.file) {
        (Some(q), _) => q.clone(),
        (None, Some(f)) => fs::read_to_string(f)?,
        (None, None) => bail!("provide a query string or --file"),
    };
    let q = query::parse(&text).map_err(|e| anyhow!("parse: {e}"))?;
    let mut client = SocketClient::connect(args.to)?;
    let result = query::execute(&mut client, &q)?;
    println!("{}", result.vars.join("\t"));
    if args.encoded {
        for row in &result.rows {
            let cells: Vec<String> = row.iter().map(|id| format!("{:08x}", id.0)).collect();
            println!("{}", cells.join("\t"));
        }
    } else {
        for row in query::decode_rows(&mut client, &result)? {
            println!("{}", row.join("\t"));
        }
    }
    if result.partial {
        eprintln!("warning: result may be incomplete");
    }
    Ok(())
}

fn cmd_status(args: StatusArgs) -> Result<()> {
    let mut client = SocketClient::connect(args.to)?;
    match client.status()?.msg {
        Message::StatusResponse {
            phase,
            path,
            block_counts,
            replica_entries,
            replica_deficit,
            routing_levels,
            known,
        } => {
            println!("phase: {phase}");
            println!("path: {path}");
            println!(
                "blocks: spo={} pos={} osp={}",
                block_counts[0], block_counts[1], block_counts[2]
            );
            println!("replica entries: {replica_entries} (deficit {replica_deficit})");
            let levels: Vec<String> = routing_levels.iter().map(|n| n.to_string()).collect();
            println!("routing refs per level: [{}]", levels.join(", "));
            println!("known peers: {}", known.len());
        }
        other => bail!("unexpected response tag {}", other.tag()),
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let triples = ntriples::generate(args.stations, args.observations, args.seed);
    let text = ntriples::format(&triples);
    match args.out {
        Some(path) => fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_sim(args: SimArgs) -> Result<()> {
    let mut net = SimNetwork::new(
        args.peers,
        PeerConfig::default(),
        SimConfig {
            seed: args.seed,
            ..SimConfig::default()
        },
    );
    let data = ntriples::generate(20, args.records, args.seed);
    for (s, p, o) in &data {
        let t = TripleId {
            s: hash_term(s),
            p: hash_term(p),
            o: hash_term(o),
        };
        net.peer_mut(0).storage.insert_triple(&t);
        for term in [s, p, o] {
            let _ = net.peer(0).dict.encode(term);
        }
    }
    let report = net
        .run_until_quiescent()
        .map_err(|e| anyhow!("construction failed: {e}"))?;
    println!(
        "converged in {} exchange rounds, {} replication rounds",
        report.exchange_rounds, report.replication_rounds
    );
    println!(
        "virtual time: {:.1} ms, {} messages, {} bytes",
        report.elapsed_us as f64 / 1000.0,
        report.messages,
        report.bytes
    );
    println!("key space partitioned: {}", net.intervals_partition());
    for i in 0..net.len() {
        let st = net.peer(i).status();
        println!(
            "peer{i}: path={} blocks=[{},{},{}] replicas={}",
            st.path, st.block_counts[0], st.block_counts[1], st.block_counts[2],
            st.replica_entries
        );
    }
    // sanity: a full scan through the overlay sees every triple
    let mut client = query::SimClient {
        net: &mut net,
        entry: 0,
    };
    let full = KeyInterval::full(TRIPLE_KEY_BITS);
    let (entries, _, _) = client.lookup(Layout::Spo, full)?;
    println!("spo blocks visible from peer0: {}", entries.len());
    Ok(())
}

fn cmd_experiment(args: ExperimentArgs) -> Result<()> {
    let rows = match args.exp {
        1 => {
            let sizes = if args.sizes.is_empty() {
                experiment::EXP1_SIZES.to_vec()
            } else {
                args.sizes.clone()
            };
            experiment::run_exp1(&sizes, &args.peers, args.seed)
                .map_err(|e| anyhow!("campaign failed: {e}"))?
        }
        2 => {
            let sizes = if args.sizes.is_empty() {
                experiment::EXP2_TUPLES.to_vec()
            } else {
                args.sizes.clone()
            };
            experiment::run_exp2(&sizes, &args.peers, args.seed, args.retrieval_rate)
                .map_err(|e| anyhow!("campaign failed: {e}"))?
        }
        n => bail!("unknown campaign {n}; use 1 or 2"),
    };
    let mut text = String::from(experiment::CSV_HEADER);
    text.push('\n');
    for row in &rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    match args.out {
        Some(path) => fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}
