use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use markmatch_core::retrieval::Pool;
use markmatch_core::{EncoderParams, GrayImage, LossConfig, MarkImage};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_markmatch"));
    c.env_remove("MARKMATCH_MODEL").env_remove("MARKMATCH_POOL");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus a briefly trained model.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    model: PathBuf,
    pool: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let model = root.join("model.txt");
    ok(&["synth", "--writers", "4", "--marks", "4", "--seed", "3", "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--out", s(&model), "--epochs", "2", "--batch", "4"]);
    Fixture {
        pool: root.join("pool.txt"),
        _dir: dir,
        root,
        data,
        model,
    }
}

impl Fixture {
    fn mark(&self, w: usize, m: usize) -> PathBuf {
        self.data.join(format!("w{w:04}_m{m:03}.pgm"))
    }

    fn enroll(&self, ballot: &str, image: &Path) -> String {
        ok(&["enroll", "--model", s(&self.model), "--pool", s(&self.pool), "--ballot", ballot, "--image", s(image)])
            .trim()
            .to_string()
    }
}

#[test]
fn synth_writes_one_pgm_per_mark_and_a_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["synth", "--writers", "2", "--marks", "2", "--seed", "0", "--out", s(&out)]);
    let pgms: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    assert_eq!(pgms.len(), 4);
    let sidecar = fs::read_to_string(out.join("annotations.txt")).unwrap();
    assert_eq!(sidecar.lines().count(), 4);
    for p in &pgms {
        let img = GrayImage::read_pgm(p).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64));
    }

    // same seed, same bytes
    let again = dir.path().join("e");
    ok(&["synth", "--writers", "2", "--marks", "2", "--seed", "0", "--out", s(&again)]);
    for p in &pgms {
        assert_eq!(fs::read(p).unwrap(), fs::read(again.join(p.file_name().unwrap())).unwrap());
    }
}

#[test]
fn synth_ballot_pages_carry_annotations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["synth", "--writers", "6", "--marks", "2", "--out", s(&out), "--ballots", "3"]);
    let lines = fs::read_to_string(out.join("ballots.txt")).unwrap();
    let anns = markmatch_core::synth::parse_annotations(&lines).unwrap();
    assert!(anns.len() >= 9);
    for a in &anns {
        assert!(out.join(format!("{}.pgm", a.ballot_id)).exists());
    }
}

#[test]
fn query_matches_library_ranking_and_csv_round_trips() {
    let f = fixture();
    assert_eq!(f.enroll("b1", &f.mark(0, 0)), "alias0_0");
    assert_eq!(f.enroll("b2", &f.mark(1, 0)), "alias1_0");
    assert_eq!(f.enroll("b1", &f.mark(2, 0)), "alias0_1");

    let q = f.mark(0, 1);
    let csv = ok(&["query", "--model", s(&f.model), "--pool", s(&f.pool), "--image", s(&q), "-k", "5", "--csv"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("rank,alias,softmax_score,raw_logit"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // k larger than the pool returns every record
    assert_eq!(rows.len(), 3);

    let params = EncoderParams::load(&f.model).unwrap();
    let pool = Pool::load(&f.pool).unwrap();
    let mark = MarkImage::new(GrayImage::read_pgm(&q).unwrap(), "q", "query");
    let expect = pool.query(&params.embed(&mark).unwrap(), 5, &LossConfig::default()).unwrap();
    for (row, m) in rows.iter().zip(&expect) {
        assert_eq!(row[0].parse::<usize>().unwrap(), m.rank);
        assert_eq!(row[1], m.alias);
        assert_eq!(row[2].parse::<f64>().unwrap().to_bits(), m.softmax_score.to_bits());
        assert_eq!(row[3].parse::<f64>().unwrap().to_bits(), m.raw_logit.to_bits());
    }

    let table = ok(&["query", "--model", s(&f.model), "--pool", s(&f.pool), "--image", s(&q)]);
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn embed_prints_a_unit_vector() {
    let f = fixture();
    let out = ok(&["embed", "--model", s(&f.model), "--image", s(&f.mark(1, 2))]);
    let v: Vec<f64> = out.split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(v.len(), 32);
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
}

#[test]
fn heatmap_columns_are_distributions() {
    let f = fixture();
    for w in 0..4 {
        f.enroll(&format!("b{w}"), &f.mark(w, 0));
    }
    let qdir = f.root.join("queries");
    fs::create_dir(&qdir).unwrap();
    fs::copy(f.mark(0, 1), qdir.join("qa.pgm")).unwrap();
    fs::copy(f.mark(3, 1), qdir.join("qb.pgm")).unwrap();
    let out = f.root.join("heat.csv");
    ok(&["heatmap", "--model", s(&f.model), "--pool", s(&f.pool), "--queries", s(&qdir), "--out", s(&out)]);
    let csv = fs::read_to_string(out).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("pool_alias,qa,qb"));
    let mut sums = [0.0; 2];
    let mut rows = 0;
    for l in lines {
        let cells: Vec<&str> = l.split(',').collect();
        for (c, sum) in sums.iter_mut().enumerate() {
            *sum += cells[c + 1].parse::<f64>().unwrap();
        }
        rows += 1;
    }
    assert_eq!(rows, 4);
    for sum in sums {
        assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn environment_supplies_model_and_pool() {
    let f = fixture();
    let out = bin()
        .env("MARKMATCH_MODEL", &f.model)
        .env("MARKMATCH_POOL", &f.pool)
        .args(["enroll", "--ballot", "b9", "--image", s(&f.mark(1, 1))])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "alias0_0");
    let out = bin()
        .env("MARKMATCH_MODEL", &f.model)
        .env("MARKMATCH_POOL", &f.pool)
        .args(["query", "--image", s(&f.mark(1, 2)), "--csv"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}

#[test]
fn exit_codes() {
    let f = fixture();
    let m = s(&f.model);
    let p = s(&f.pool);
    let img = f.mark(0, 0);
    let img = s(&img);

    // argument errors
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["query", "--pool", p, "--image", img]).status.code(), Some(2));
    assert_eq!(run(&["synth", "--writers", "1", "--marks", "4", "--out", s(&f.root.join("x"))]).status.code(), Some(2));
    assert_eq!(run(&["embed", "--model", m, "--image", img, "--prompt", "circle:1"]).status.code(), Some(2));
    f.enroll("b1", &f.mark(0, 0));
    assert_eq!(run(&["query", "--model", m, "--pool", p, "--image", img, "-k", "0"]).status.code(), Some(2));

    // data errors
    let missing = f.root.join("nope.txt");
    let out = run(&["embed", "--model", s(&missing), "--image", img]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("nope.txt"));
    let empty = f.root.join("empty-pool.txt");
    assert_eq!(run(&["query", "--model", m, "--pool", s(&empty), "--image", img]).status.code(), Some(3));
    let garbage = f.root.join("garbage.txt");
    fs::write(&garbage, "not a model\n").unwrap();
    assert_eq!(run(&["embed", "--model", s(&garbage), "--image", img]).status.code(), Some(3));
    // the same mark id cannot be enrolled twice
    let out = run(&["enroll", "--model", m, "--pool", p, "--ballot", "b1", "--image", img, "--mark", "0"]);
    assert_eq!(out.status.code(), Some(3));

    // blank region
    let blank = f.root.join("blank.pgm");
    GrayImage::new(100, 100, 1.0).write_pgm(&blank).unwrap();
    assert_eq!(run(&["embed", "--model", m, "--image", s(&blank)]).status.code(), Some(4));
    assert_eq!(
        run(&["embed", "--model", m, "--image", s(&blank), "--prompt", "point:50,50"]).status.code(),
        Some(4)
    );
}

#[test]
fn train_and_eval_report_progress() {
    let f = fixture();
    let base = f.root.join("base.txt");
    let out = ok(&[
        "train", "--data", s(&f.data), "--out", s(&base), "--baseline", "--epochs", "3", "--batch", "2", "--holdout", "2",
    ]);
    let epochs: Vec<&str> = out.lines().filter(|l| l.starts_with("epoch ")).collect();
    assert_eq!(epochs.len(), 3);
    assert!(EncoderParams::load(&base).unwrap().version().starts_with("pairwise"));

    let out = ok(&["eval", "--model", s(&f.model), "--data", s(&f.data), "--holdout", "2"]);
    let keys: Vec<&str> = out.lines().map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(keys, ["pair_f1", "top1", "top5"]);
    for l in out.lines() {
        let v: f64 = l.split(' ').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}
