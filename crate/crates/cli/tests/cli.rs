use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn posh(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posh")).args(args).current_dir(cwd).env_remove("POSH_THREADS").output().expect("spawn posh")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let o = posh(args, cwd);
    assert!(o.status.success(), "posh {args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn data_rows(stdout: &str) -> Vec<&str> {
    stdout.lines().skip(1).filter(|l| !l.is_empty()).collect()
}

const SPEC: &str = "n_families = 4\nmembers = 3\nmin_len = 20\nmax_len = 26\nsigma = 0.3\nseed = 5\n";
const CONFIG: &str = "# tiny model\nhidden = 8\nn_layers = 2\ncode_length = 24\nnegatives = 4\naccumulation = 2\nsteps = 4\nk_nn = 6\nlr = 0.01\n";

/// synth -> ingest -> featurize -> tmscore -> train -> encode, in `dir`.
fn build_pipeline(dir: &Path) {
    fs::write(dir.join("spec.txt"), SPEC).unwrap();
    fs::write(dir.join("run.cfg"), CONFIG).unwrap();
    let synth = ok(&["synth", "spec.txt", "-o", "data"], dir);
    assert_eq!(data_rows(&synth).len(), 12);
    let ingest = ok(&["ingest", "data/pdb", "-o", "chains.bin"], dir);
    assert_eq!(data_rows(&ingest).len(), 12);
    ok(&["featurize", "chains.bin", "-o", "graphs.bin", "-c", "run.cfg"], dir);
    ok(&["tmscore", "--pairs", "chains.bin", "-o", "pairs.tsv"], dir);
    let train = ok(&["train", "graphs.bin", "data/sim.tsv", "-c", "run.cfg", "--chains", "chains.bin", "-o", "model.ckpt"], dir);
    assert_eq!(train.lines().next(), Some("step\tL_sim\tL_hash\tL"));
    assert_eq!(data_rows(&train).len(), 4);
    ok(&["encode", "model.ckpt", "graphs.bin", "-o", "codes.txt"], dir);
}

#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_pipeline(dir);
    let index = ok(&["index", "codes.txt", "-o", "db.poshidx"], dir);
    assert!(index.lines().nth(1).unwrap().starts_with("12\t24\t"));

    let first = fs::read_to_string(dir.join("codes.txt")).unwrap().lines().next().unwrap().to_string();
    fs::write(dir.join("q.code"), format!("{first}\n")).unwrap();
    let hits = ok(&["search", "db.poshidx", "--query", "q.code", "-k", "5"], dir);
    let rows = data_rows(&hits);
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.split('\t').count() == 6));
    // The query is itself indexed, so it ranks first at distance zero.
    let top: Vec<&str> = rows[0].split('\t').collect();
    assert_eq!((top[2], top[3]), (first.split('\t').next().unwrap(), "0"));

    let by_structure = ok(&["search", "db.poshidx", "--query", "data/pdb/fam000_m00.pdb", "--checkpoint", "model.ckpt", "-k", "5"], dir);
    assert_eq!(by_structure.lines().nth(1), hits.lines().nth(1));

    let eval = ok(&["eval", "db.poshidx", "codes.txt", "data/sim.tsv"], dir);
    assert!(eval.starts_with("query\tn_similar\tauroc\tauprc\ttop1\ttop5\ttop10\n"));
    assert!(eval.lines().any(|l| l.starts_with("mean\t")));
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    build_pipeline(a.path());
    build_pipeline(b.path());
    for f in ["chains.bin", "graphs.bin", "pairs.tsv", "model.ckpt", "codes.txt", "data/sim.tsv"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn search_results_do_not_depend_on_thread_count() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    build_pipeline(dir);
    ok(&["index", "codes.txt", "-o", "db.poshidx"], dir);
    let one = ok(&["--threads", "1", "search", "db.poshidx", "--query", "codes.txt", "-k", "7"], dir);
    let two = ok(&["search", "db.poshidx", "--query", "codes.txt", "-k", "7", "--threads", "3"], dir);
    assert_eq!(one, two);
    assert_eq!(data_rows(&one).len(), 12 * 7);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = posh(&["index", "codes.txt", "--bogus"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert!(o.stdout.is_empty());
}

#[test]
fn structure_query_without_checkpoint_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = posh(&["search", "db.poshidx", "--query", "x.pdb"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_thread_env_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_posh")).args(["synth", "-o", "d"]).env("POSH_THREADS", "many").current_dir(tmp.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_exits_one_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = posh(&["index", "nope.txt", "-o", "db"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    let last: Vec<&str> = err.lines().filter(|l| l.starts_with("posh:")).collect();
    assert_eq!(last.len(), 1, "{err}");
    assert!(last[0].contains("nope.txt"));
}

#[test]
fn config_overrides_and_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("spec.txt"), SPEC).unwrap();
    fs::write(dir.join("run.cfg"), "k_nn = 6\nn_rbf = 8\n").unwrap();
    ok(&["synth", "spec.txt", "-o", "data"], dir);
    let o = posh(&["featurize", "data/chains.bin", "-o", "g.bin", "-c", "run.cfg", "--set", "k_nn=4"], dir);
    assert!(o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("k_nn = 4") && err.contains("n_rbf = 8"), "{err}");
    let rows = String::from_utf8(o.stdout).unwrap();
    let first: Vec<&str> = data_rows(&rows)[0].split('\t').collect();
    let n: usize = first[1].parse().unwrap();
    assert_eq!(first[2].parse::<usize>().unwrap(), 4 * n);

    let bad = posh(&["featurize", "data/chains.bin", "-o", "g.bin", "--set", "k_nn"], dir);
    assert_eq!(bad.status.code(), Some(2));
    let unknown = posh(&["featurize", "data/chains.bin", "-o", "g.bin", "--set", "knn=3"], dir);
    assert_eq!(unknown.status.code(), Some(1));
}

#[test]
fn synth_logs_its_seed_and_fragments_plan_parses() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("spec.txt"), SPEC).unwrap();
    let o = posh(&["synth", "spec.txt", "-o", "data", "--seed", "9"], dir);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed = 9"));
    let plan = ok(&["tmscore", "--fragments", "data/chains.bin", "--alpha", "0.8"], dir);
    let lines: Vec<&str> = plan.lines().collect();
    assert_eq!(lines.len(), 12);
    for l in lines {
        let (_, len) = l.split_once('\t').unwrap();
        let len: usize = len.parse().unwrap();
        assert!((10..=26).contains(&len));
    }
}
