use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use posh::encoder::encode;
use posh::featurize::{read_graphs, write_graphs};
use posh::hash_index::{read_codes, write_codes};
use posh::neural::{read_checkpoint, write_checkpoint};
use posh::protein_io::{parse_pdb, read_chains, write_chains};
use posh::synth::write_dataset;
use posh::tmscore::tm_score_identity;
use posh::{
    binarize, build_graph, ensure_cbeta, encode_all, evaluate, generate, CodeDatabase, EncoderParams, FamilySpec, HashCode, LengthScaling, Mode,
    ProteinChain, ProteinGraph, RunConfig, SimilarityMatrix, StepMetrics, SubstructurePlan, TrainingSet,
};
use rayon::prelude::*;

use crate::{Cli, Command, ConfigArgs};

pub enum CliError {
    /// Bad invocation that the argument parser cannot catch; exits with 2.
    Usage(String),
    Failed(Box<dyn std::error::Error>),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage: {m}"),
            CliError::Failed(e) => write!(f, "{e}"),
        }
    }
}

impl<E: std::error::Error + 'static> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Failed(Box::new(e))
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn fail(msg: String) -> CliError {
    CliError::Failed(msg.into())
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("POSH_THREADS") {
            Ok(v) => Some(v.trim().parse().map_err(|_| CliError::Usage(format!("POSH_THREADS must be a positive integer, got `{v}`")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| fail(e.to_string()))?;
    }
    info!("threads = {}", rayon::current_num_threads());
    Ok(())
}

/// Defaults, then the config file, then `--set` overrides.
fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    info!("effective config:");
    for line in cfg.to_text().lines() {
        info!("  {line}");
    }
    Ok(cfg)
}

fn load_graphs(path: &Path) -> Result<Vec<ProteinGraph>> {
    let graphs = read_graphs(open(path)?)?;
    if graphs.is_empty() {
        return Err(fail(format!("{}: no graphs", path.display())));
    }
    Ok(graphs)
}

fn load_codes(path: &Path) -> Result<Vec<HashCode>> {
    Ok(read_codes(open(path)?)?)
}

fn load_encoder(path: &Path) -> Result<(RunConfig, EncoderParams<f32>)> {
    let ck = read_checkpoint(open(path)?)?;
    let cfg = RunConfig::from_text(&ck.config_text)?;
    Ok((cfg, EncoderParams::from_checkpoint(&ck)?))
}

fn is_structure_file(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pdb" | "ent"))
}

fn read_structure(path: &Path, chain: Option<&str>) -> Result<ProteinChain> {
    let bytes = fs::read(path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let mut c = parse_pdb(&bytes, chain).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    c.id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(ensure_cbeta(&c))
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let started = Instant::now();
    match cli.command {
        Command::Ingest { dir, output, chain } => ingest(&dir, &output, chain.as_deref(), &mut out)?,
        Command::Featurize { chains, output, config } => featurize(&chains, &output, &config, &mut out)?,
        Command::Tmscore { chains, pairs, fragments: _, alpha, output } => {
            let chains = read_chains(open(&chains)?)?;
            match output {
                Some(p) => tmscore(&chains, pairs, alpha, create(&p)?)?,
                None => tmscore(&chains, pairs, alpha, &mut out)?,
            }
        }
        Command::Train { graphs, sim, output, chains, config } => train(&graphs, &sim, &output, chains.as_deref(), &config, &mut out)?,
        Command::Encode { checkpoint, graphs, output } => {
            let (_, enc) = load_encoder(&checkpoint)?;
            let graphs = load_graphs(&graphs)?;
            let codes = encode_all(&graphs, &enc)?;
            let mut w = create(&output)?;
            write_codes(&codes, &mut w)?;
            w.flush()?;
            writeln!(out, "id\tn_residues\tpopcount")?;
            for c in &codes {
                writeln!(out, "{}\t{}\t{}", c.id, c.n_residues, c.popcount())?;
            }
            info!("encoded {} structures into {}-bit codes", codes.len(), enc.config.code_length);
        }
        Command::Index { codes, output } => {
            let codes = load_codes(&codes)?;
            let d = codes.first().map(|c| c.d).ok_or_else(|| fail("codes file is empty".into()))?;
            let db = CodeDatabase::build(d, codes)?;
            let bytes = db.to_bytes();
            let mut w = create(&output)?;
            w.write_all(&bytes)?;
            w.flush()?;
            writeln!(out, "entries\tcode_length\tfile_bytes")?;
            writeln!(out, "{}\t{}\t{}", db.len(), d, bytes.len())?;
        }
        Command::Search { index, query, k, checkpoint, length_scaling } => search(&index, &query, k, checkpoint.as_deref(), length_scaling, &mut out)?,
        Command::Eval { index, queries, sim, length_scaling } => {
            let mut db = CodeDatabase::load(open(&index)?)?;
            db.scaling = length_scaling;
            let queries = load_codes(&queries)?;
            let m = SimilarityMatrix::read_tsv(open(&sim)?)?;
            let report = evaluate(&db, &queries, &m)?;
            report.write_tsv(&mut out)?;
            let s = report.summary();
            info!(
                "{} queries ({} skipped): AUROC {:.4} AUPRC {:.4} top1 {:.4} top5 {:.4} top10 {:.4}",
                s.n_queries, report.skipped.len(), s.auroc, s.auprc, s.top[0], s.top[1], s.top[2]
            );
        }
        Command::Synth { spec, output, seed } => {
            let mut family = match spec {
                Some(p) => FamilySpec::from_text(&fs::read_to_string(&p).map_err(|e| fail(format!("{}: {e}", p.display())))?)?,
                None => FamilySpec::default(),
            };
            if let Some(s) = seed {
                family.seed = s;
            }
            family.validate()?;
            info!("synth seed = {}", family.seed);
            let data = generate(&family)?;
            write_dataset(&data, &output)?;
            writeln!(out, "id\tfamily\tn_residues")?;
            for (c, f) in data.chains.iter().zip(&data.families) {
                writeln!(out, "{}\t{}\t{}", c.id, f, c.len())?;
            }
            info!("wrote {} chains to {}", data.chains.len(), output.display());
        }
    }
    out.flush()?;
    info!("done in {:.2?}", started.elapsed());
    Ok(())
}

fn ingest(dir: &Path, output: &Path, chain: Option<&str>, out: &mut impl Write) -> Result<()> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| fail(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| is_structure_file(p))
        .collect();
    files.sort();
    let mut chains = Vec::with_capacity(files.len());
    for f in &files {
        match read_structure(f, chain) {
            Ok(c) => chains.push(c),
            Err(e) => warn!("skipping {e}"),
        }
    }
    if chains.is_empty() {
        return Err(fail(format!("no usable structures in {}", dir.display())));
    }
    let mut w = create(output)?;
    write_chains(&chains, &mut w)?;
    w.flush()?;
    writeln!(out, "id\tn_residues")?;
    for c in &chains {
        writeln!(out, "{}\t{}", c.id, c.len())?;
    }
    info!("ingested {} of {} files", chains.len(), files.len());
    Ok(())
}

fn featurize(chains: &Path, output: &Path, args: &ConfigArgs, out: &mut impl Write) -> Result<()> {
    let cfg = load_config(args)?;
    let fc = cfg.featurize_config()?;
    let chains = read_chains(open(chains)?)?;
    let graphs = chains.par_iter().map(|c| build_graph(c, &fc)).collect::<std::result::Result<Vec<_>, _>>()?;
    let mut w = create(output)?;
    write_graphs(&graphs, &mut w)?;
    w.flush()?;
    writeln!(out, "id\tn_residues\tn_edges")?;
    for g in &graphs {
        writeln!(out, "{}\t{}\t{}", g.id, g.n_residues, g.n_edges())?;
    }
    Ok(())
}

fn tmscore(chains: &[ProteinChain], pairs: bool, alpha: f64, mut w: impl Write) -> Result<()> {
    if pairs {
        let ids = chains.iter().map(|c| c.id.clone()).collect();
        let mut m = SimilarityMatrix::new(ids)?;
        // Row a is normalized by |a|; residue i corresponds to residue i.
        let rows: Vec<Vec<f32>> = (0..chains.len())
            .into_par_iter()
            .map(|a| {
                (0..chains.len())
                    .map(|b| {
                        if a == b {
                            return 1.0;
                        }
                        let n = chains[a].len().min(chains[b].len());
                        let corr: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
                        tm_score_identity(&chains[b], &chains[a], &corr).map(|r| r.score as f32).unwrap_or(0.0)
                    })
                    .collect()
            })
            .collect();
        for (a, row) in rows.iter().enumerate() {
            for (b, &s) in row.iter().enumerate() {
                m.set(a, b, s.clamp(0.0, 1.0))?;
            }
        }
        m.write_tsv(&mut w)?;
    } else {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(CliError::Usage(format!("--alpha must be in (0, 1], got {alpha}")));
        }
        SubstructurePlan::build(chains, alpha)?.write(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn train(graphs: &Path, sim: &Path, output: &Path, chains: Option<&Path>, args: &ConfigArgs, out: &mut impl Write) -> Result<()> {
    let cfg = load_config(args)?;
    info!("training seed = {}", cfg.seed);
    let graphs = load_graphs(graphs)?;
    if let Some(g) = graphs.iter().find(|g| g.rbf.len() != cfg.n_rbf) {
        return Err(fail(format!("graph {} has {} RBF centers but the config says n_rbf = {}", g.id, g.rbf.len(), cfg.n_rbf)));
    }
    let matrix = SimilarityMatrix::read_tsv(open(sim)?)?;
    let chains = match chains {
        Some(p) => {
            let mut all = read_chains(open(p)?)?;
            let mut ordered = Vec::with_capacity(graphs.len());
            for g in &graphs {
                let i = all.iter().position(|c| c.id == g.id).ok_or_else(|| fail(format!("no chain for graph {}", g.id)))?;
                ordered.push(all.swap_remove(i));
            }
            Some(ordered)
        }
        None => None,
    };
    let set = TrainingSet::new(graphs, chains, &matrix)?;
    writeln!(out, "{}", StepMetrics::HEADER)?;
    let mut io_err = None;
    let outcome = posh::train(&cfg, &set, |m| {
        if let Err(e) = m.write_row(&mut *out) {
            io_err.get_or_insert(e);
        }
        if m.step % 10 == 0 {
            info!("step {} loss {:.4} (sim {:.4}, hash {:.4})", m.step, m.total, m.sim, m.hash);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if outcome.skipped_queries > 0 {
        info!("{} structures were never queries", outcome.skipped_queries);
    }
    let ck = outcome.params.to_checkpoint(cfg.to_text(), Some(outcome.adam));
    let mut w = create(output)?;
    write_checkpoint(&ck, &mut w)?;
    w.flush()?;
    info!("checkpoint written to {}", output.display());
    Ok(())
}

fn search(index: &Path, query: &Path, k: usize, checkpoint: Option<&Path>, scaling: LengthScaling, out: &mut impl Write) -> Result<()> {
    if is_structure_file(query) && checkpoint.is_none() {
        return Err(CliError::Usage("a structure query needs --checkpoint".into()));
    }
    let mut db = CodeDatabase::load(open(index)?)?;
    db.scaling = scaling;
    let queries = if let (true, Some(ck)) = (is_structure_file(query), checkpoint) {
        let (cfg, enc) = load_encoder(ck)?;
        let chain = read_structure(query, None)?;
        let g = build_graph(&chain, &cfg.featurize_config()?)?;
        vec![binarize(&encode(&g, &enc, Mode::Infer)?)]
    } else {
        load_codes(query)?
    };
    writeln!(out, "query\trank\tid\thamming\tscaled\tn_residues")?;
    for q in &queries {
        for (r, h) in db.search_parallel(q, k)?.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}\t{:.6}\t{}", q.id, r + 1, h.id, h.hamming, h.scaled, h.n_residues)?;
        }
    }
    Ok(())
}
