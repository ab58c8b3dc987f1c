use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use analysparse::cli::REPORT_FILES;
use analysparse::datagen;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_analysparse"));
    c.env("ANALYSPARSE_THREADS", "2");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = "data.p=8
data.L=48
data.n_jumps=2
data.sigma=0.5
data.seed=4
val.L=6
train.batch_sz=16
train.max_itr2=3
train.eta2=0.1
train.lambda_grid=0.5,1
train.validation_every=2
";

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_loadable_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gen.cfg", "data.p=8\ndata.L=4\ndata.sigma=0\n");
    let a = dir.path().join("a.adsl");
    let b = dir.path().join("b.adsl");
    assert_eq!(code(&run(&["gen", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["gen", "--config", s(&cfg), "--out", s(&b)])), 0);
    let ds = datagen::load(&a).unwrap();
    assert_eq!(ds.len(), 4);
    for (w, y) in &ds.pairs {
        assert_eq!(w, y);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(datagen::sidecar_path(&a).exists());
}

#[test]
fn gen_missing_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "gen.cfg", "data.p=8\ndata.sigma=0\n");
    let o = run(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("x.adsl"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.L"));
}

#[test]
fn bad_usage_exits_2() {
    assert_eq!(code(&run(&["frobnicate"])), 2);
    assert_eq!(code(&run(&["train", "--config", "/nonexistent/cfg", "--out", "/tmp/x"])), 2);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn train_writes_report_and_reruns_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.cfg", &format!("{SMALL}train.threads=1\n"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&b)])), 0);
    for f in REPORT_FILES {
        assert!(a.join(f).exists(), "{f} missing");
        let text = std::fs::read_to_string(a.join(f)).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.chars().next().unwrap().is_alphabetic(), "{f}: {header}");
    }
    let loss = std::fs::read(a.join("train_loss.csv")).unwrap();
    assert_eq!(loss, std::fs::read(b.join("train_loss.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("D_hat.csv")).unwrap(),
        std::fs::read(b.join("D_hat.csv")).unwrap()
    );

    // the manifest alone reproduces the run
    let c = dir.path().join("c");
    let manifest = a.join("manifest.txt");
    assert_eq!(code(&run(&["train", "--config", s(&manifest), "--out", s(&c)])), 0);
    assert_eq!(loss, std::fs::read(c.join("train_loss.csv")).unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.cfg", SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = bin()
        .env("ANALYSPARSE_THREADS", "1")
        .args(["train", "--config", s(&cfg), "--out", s(&a)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let o = bin()
        .env("ANALYSPARSE_THREADS", "4")
        .args(["train", "--config", s(&cfg), "--out", s(&b)])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read(a.join("train_loss.csv")).unwrap(),
        std::fs::read(b.join("train_loss.csv")).unwrap()
    );
}

#[test]
fn zero_step_keeps_projected_initialisation() {
    use analysparse::learner::center_columns;
    use analysparse::linalg::{gaussian, Rng, Stream};

    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.cfg", &format!("{SMALL}train.eta2=0\ntrain.seed=11\n"));
    let out = dir.path().join("r");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
    let d = analysparse::cli::read_matrix_csv(&out.join("D_hat.csv")).unwrap();
    let d0 = center_columns(&gaussian(8, 8, 0.0, 1e-2, &mut Rng::new(11, Stream::Init)));
    for (a, b) in d.data().iter().zip(d0.data()) {
        assert!((a - b).abs() <= 4.0 * f64::EPSILON * d0.max_abs());
    }
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "train.cfg", &format!("{SMALL}train.eta2=1e308\ntrain.references=false\n"));
    let o = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("iteration"));
}

#[test]
fn denoise_with_zero_and_tv_dictionaries() {
    use analysparse::cli::matrix_csv;
    use analysparse::datagen::{gen_dataset, make_dtv, DataConfig};
    use analysparse::linalg::Tensor;

    let dir = tempfile::tempdir().unwrap();
    let ds = gen_dataset(&DataConfig::new(16, 1, 1.0, 3)).unwrap();
    let y = &ds.pairs[0].1;
    let ypath = write(dir.path(), "y.csv", &matrix_csv(y));
    let zero = write(dir.path(), "zero.csv", &matrix_csv(&Tensor::zeros(16, 16)));
    let out = dir.path().join("zero_out");
    assert_eq!(code(&run(&["denoise", "--dict", s(&zero), "--signal", s(&ypath), "--out", s(&out)])), 0);
    let w = analysparse::cli::read_matrix_csv(&out.join("w_hat.csv")).unwrap();
    assert_eq!(&w, y);

    let tv = write(dir.path(), "tv.csv", &matrix_csv(&make_dtv(16).scale(2.0)));
    let out = dir.path().join("tv_out");
    let o = run(&["denoise", "--dict", s(&tv), "--signal", s(&ypath), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    let diag = analysparse::config::KvConfig::load(&out.join("diagnostics.txt")).unwrap();
    assert!(diag.require::<bool>("converged").unwrap());

    // the gap shrinks with the stopping tolerance
    let cfg = write(dir.path(), "tight.cfg", "eval.tol=1e-10
eval.max_itr1=100000
");
    let out = dir.path().join("tight_out");
    let o = run(&[
        "denoise",
        "--config",
        s(&cfg),
        "--dict",
        s(&tv),
        "--signal",
        s(&ypath),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let diag = analysparse::config::KvConfig::load(&out.join("diagnostics.txt")).unwrap();
    assert!(diag.require::<bool>("converged").unwrap());
    assert!(diag.require::<f64>("relative_gap").unwrap() <= 1e-6);
}

#[test]
fn gradcheck_passes_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--seeds", "3", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = std::fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().skip(1).all(|l| l.ends_with("pass")));
}

#[test]
fn gradcheck_over_tolerance_exits_1() {
    let o = run(&["gradcheck", "--seeds", "1", "--tol", "1e-300"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn noise_sweep_writes_conditions_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.cfg",
        &format!("{SMALL}experiment.kind=noise-sweep\nexperiment.sigmas=0.05,1,4\n"),
    );
    let out = dir.path().join("sweep");
    let o = run(&["experiment", "--config", s(&cfg), "--out", s(&out), "--parallel"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for sub in ["sigma_0.05", "sigma_1", "sigma_4"] {
        for f in REPORT_FILES {
            assert!(out.join(sub).join(f).exists(), "{sub}/{f}");
        }
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.lines().skip(1).all(|l| l.split(',').nth(1) == Some("ok")));
}

#[test]
fn parallel_flag_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.cfg", &format!("{SMALL}experiment.sigmas=0.5,2\n"));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let kind = ["--kind", "noise-sweep"];
    assert_eq!(code(&run(&[&["experiment", "--config", s(&cfg), "--out", s(&a)][..], &kind].concat())), 0);
    assert_eq!(
        code(&run(&[&["experiment", "--config", s(&cfg), "--out", s(&b), "--parallel"][..], &kind].concat())),
        0
    );
    for sub in ["sigma_0.5", "sigma_2"] {
        assert_eq!(
            std::fs::read(a.join(sub).join("train_loss.csv")).unwrap(),
            std::fs::read(b.join(sub).join("train_loss.csv")).unwrap()
        );
    }
}

#[test]
fn ablation_arms_share_dataset_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "exp.cfg", &format!("{SMALL}experiment.kind=ablation\n"));
    let out = dir.path().join("abl");
    assert_eq!(code(&run(&["experiment", "--config", s(&cfg), "--out", s(&out)])), 0);
    let m1 = analysparse::config::KvConfig::load(&out.join("projected/manifest.txt")).unwrap();
    let m2 = analysparse::config::KvConfig::load(&out.join("unprojected/manifest.txt")).unwrap();
    assert_eq!(m1.raw("data.file"), m2.raw("data.file"));
    assert_eq!(m1.raw("val.file"), m2.raw("val.file"));
    assert_eq!(m1.raw("train.seed"), m2.raw("train.seed"));
    assert_eq!(m1.raw("train.projection"), Some("center-columns"));
    assert_eq!(m2.raw("train.projection"), Some("none"));
    assert!(out.join("data/train.adsl").exists());
}

#[test]
fn baseline_compare_emits_aligned_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "exp.cfg",
        &format!("{SMALL}experiment.kind=baseline-compare\nbaseline.inner_max_iter=200\n"),
    );
    let out = dir.path().join("cmp");
    let o = run(&["experiment", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let overlay = std::fs::read_to_string(out.join("train_loss_overlay.csv")).unwrap();
    let mut lines = overlay.lines();
    assert_eq!(lines.next(), Some("iteration,projected,smoothed"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<&str> = r.split(',').collect();
        assert_eq!(cells[0], (i + 1).to_string());
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().unwrap().is_finite()));
    }
    assert!(out.join("val_loss_overlay.csv").exists());
}

#[test]
fn baseline_train_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "b.cfg", &format!("{SMALL}baseline.inner_max_iter=100\n"));
    let out = dir.path().join("b");
    assert_eq!(code(&run(&["baseline-train", "--config", s(&cfg), "--out", s(&out)])), 0);
    let m = analysparse::config::KvConfig::load(&out.join("manifest.txt")).unwrap();
    assert_eq!(m.raw("result.projection"), Some("none"));
}

#[test]
fn failed_condition_is_recorded_and_others_kept() {
    let dir = tempfile::tempdir().unwrap();
    // sigma=-1 is invalid; the other condition still completes
    let cfg = write(
        dir.path(),
        "exp.cfg",
        &format!("{SMALL}experiment.kind=noise-sweep\nexperiment.sigmas=0.5,-1\n"),
    );
    let out = dir.path().join("x");
    let o = run(&["experiment", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.contains("sigma_0.5,ok"));
    assert!(summary.contains("sigma_-1,failed"));
    assert!(out.join("sigma_0.5/D_hat.csv").exists());
}
