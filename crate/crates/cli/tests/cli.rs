use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_GEN: [&str; 6] = ["--set", "gen.n_samples=6", "--set", "gen.height=16", "--set", "gen.width=16"];
const SMALL_TRAIN: [&str; 6] = [
    "--set",
    "train.epochs_stage1=2",
    "--set",
    "train.epochs_stage2=1",
    "--set",
    "model.base_width=4",
];

fn evseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evseg")).args(args).output().expect("spawn evseg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["gen", "--out-dir", p(dir)];
    args.extend(SMALL_GEN);
    args.extend(extra);
    evseg(&args)
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--quiet", "--data", p(data), "--out", p(out)];
    args.extend(SMALL_GEN);
    args.extend(SMALL_TRAIN);
    args.extend(extra);
    evseg(&args)
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        if e.file_type().unwrap().is_dir() {
            for (k, v) in files(&e.path()) {
                out.insert(format!("{name}/{k}"), v);
            }
        } else {
            out.insert(name, fs::read(e.path()).unwrap());
        }
    }
    out
}

#[test]
fn gen_refuses_non_empty_dir_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    assert_eq!(code(&gen(&dir, &[])), 0);
    let again = gen(&dir, &[]);
    assert_eq!(code(&again), 1);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    assert_eq!(code(&gen(&dir, &["--force"])), 0);
}

#[test]
fn gen_is_deterministic_in_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert_eq!(code(&gen(&a, &["--seed", "7"])), 0);
    assert_eq!(code(&gen(&b, &["--seed", "7"])), 0);
    assert_eq!(code(&gen(&c, &["--seed", "8"])), 0);
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&gen(&data, &[])), 0);
    let (r1, r2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    let o = train(&data, &r1, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&train(&data, &r2, &[])), 0);

    let log = fs::read_to_string(r1.join("run.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(fs::read_to_string(r1.join("run.meta")).unwrap().contains("config_hash="));
    let umaps = fs::read_dir(r1.join("uncertainty")).unwrap().count();
    assert!(umaps >= 2 && umaps % 2 == 0, "{umaps} files");

    assert_eq!(fs::read(r1.join("weights.bin")).unwrap(), fs::read(r2.join("weights.bin")).unwrap());
    assert_eq!(log, fs::read_to_string(r2.join("run.log")).unwrap());

    let s1 = tmp.path().join("s1");
    assert_eq!(code(&train(&data, &s1, &["--stage", "1"])), 0);
    assert_eq!(fs::read_to_string(s1.join("run.log")).unwrap().lines().count(), 2);

    let s2 = tmp.path().join("s2");
    let init = s1.join("weights.bin");
    assert_eq!(code(&train(&data, &s2, &["--stage", "2", "--init", p(&init)])), 0);
    assert_eq!(fs::read(s2.join("weights.bin")).unwrap(), fs::read(r1.join("weights.bin")).unwrap());
    assert_eq!(code(&train(&data, &s2, &["--stage", "2"])), 1);
}

#[test]
fn eval_tables_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    assert_eq!(code(&gen(&data, &[])), 0);
    assert_eq!(code(&train(&data, &run, &[])), 0);
    let weights = run.join("weights.bin");
    let table = tmp.path().join("table.txt");
    let panels = tmp.path().join("panels");

    let o = evseg(&[
        "eval", "--weights", p(&weights), "--data", p(&data), "--budgets", "1,3,5", "--iters", "1",
        "--out", p(&table), "--emit-panels", p(&panels),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{text}");
    for (row, budget) in rows.iter().zip(["1", "3", "5"]) {
        let cols: Vec<&str> = row.split_whitespace().collect();
        assert_eq!((cols[0], cols[1], cols[2]), ("topk", budget, "1"));
        assert_eq!(cols[4], "0.0000", "one seed has no spread");
    }
    assert_eq!(fs::read_to_string(&table).unwrap(), text);
    assert!(fs::read_dir(&panels).unwrap().count() >= 1);

    let o = evseg(&[
        "eval", "--weights", p(&weights), "--data", p(&data), "--all", "--sampler", "random", "--budgets", "3",
        "--seeds", "5",
    ]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let cols: Vec<&str> = text.lines().nth(1).unwrap().split_whitespace().collect();
    let std: f64 = cols[4].parse().unwrap();
    assert!(std > 0.0, "{text}");

    let missing = tmp.path().join("nope.bin");
    assert_eq!(code(&evseg(&["eval", "--weights", p(&missing), "--data", p(&data)])), 2);
    assert_eq!(code(&evseg(&["eval", "--weights", p(&weights), "--data", p(&data), "--sampler", "best"])), 1);
}

#[test]
fn selftest_passes_deterministically_and_catches_faults() {
    let a = evseg(&["selftest"]);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    let b = evseg(&["selftest"]);
    assert_eq!(a.stdout, b.stdout);

    let bad = evseg(&["selftest", "--inject-fault", "digamma"]);
    assert_ne!(code(&bad), 0);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("digamma"));
}

#[test]
fn config_dump_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = evseg(&["config", "--set", "train.seed=3", "--set", "loss.lambda1=0.25"]);
    assert_eq!(code(&o), 0);
    let dump = stdout(&o);
    assert!(dump.contains("train.seed=3\n") && dump.contains("loss.lambda1=0.25\n"));
    let path = tmp.path().join("c.cfg");
    fs::write(&path, &dump).unwrap();
    assert_eq!(stdout(&evseg(&["config", "--config", p(&path)])), dump);

    assert_eq!(code(&evseg(&["config", "--set", "train.sed=3"])), 1);
    assert_eq!(code(&evseg(&["config", "--set", "noequals"])), 1);
    assert_eq!(code(&evseg(&[])), 1);
}
