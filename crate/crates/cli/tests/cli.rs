use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use ebmflow::autodiff::Tensor;
use ebmflow::io::write_tensor;
use ebmflow::rng::{self, Rng};

fn ebmflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebmflow")).args(args).output().expect("binary runs")
}

fn text(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small, fast configuration written to `dir/run.toml`.
fn write_config(dir: &Path, base: &str, dataset: &str, extra: &str) -> PathBuf {
    let out = dir.join("out");
    let cfg = format!(
        "[architecture]\nbase = \"{base}\"\nhidden = 8\ncouplings = 2\ncomponents = 2\n\n\
         [training]\nepochs = 1\npcd_k = 5\npcd_chains = 16\nseed = 3\n{extra}\n\
         [data]\ndataset = \"{dataset}\"\ntrain_size = 200\ntest_size = 200\n\n\
         [output]\ndir = \"{}\"\n",
        out.display()
    );
    let p = dir.join("run.toml");
    std::fs::write(&p, cfg).unwrap();
    p
}

fn train(dir: &Path, base: &str, dataset: &str, extra: &str) -> PathBuf {
    let cfg = write_config(dir, base, dataset, extra);
    let o = ebmflow(&["train", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("out").join("last.ebmc")
}

#[test]
fn missing_dataset_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "[architecture]\nbase = \"rbm\"\n").unwrap();
    let o = ebmflow(&["train", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dataset"), "{}", stderr(&o));

    std::fs::write(&p, "[architecture]\nbase = \"rbm\"\nwidth = 3\n[data]\ndataset = \"moons\"\n").unwrap();
    let o = ebmflow(&["train", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("width"), "{}", stderr(&o));
}

#[test]
fn one_epoch_run_is_quick_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "rbm", "moons", "");
    let start = Instant::now();
    let o = ebmflow(&["train", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs_f64() < 60.0);
    assert!(stdout(&o).contains("test nll"));
    let out = dir.path().join("out");
    let ckpts = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ebmc")).count();
    assert!(ckpts >= 1);
    let first = text(&out.join("metrics.csv"));
    assert_eq!(first.lines().next().unwrap(), "epoch,nll_nats,bpd,logz,logz_stderr,pd_failures,seconds");
    assert_eq!(first.lines().count(), 2);

    let o = ebmflow(&["train", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(text(&out.join("metrics.csv")), first);
}

#[test]
fn zero_epochs_saves_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "dflow", "gauss8", "");
    let o = ebmflow(&["train", cfg.to_str().unwrap(), "--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    let mut names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, vec!["ckpt_epoch0000.ebmc", "last.ebmc", "metrics.csv"]);
    assert_eq!(text(&out.join("metrics.csv")).lines().count(), 1);
}

#[test]
fn base_override_and_resume_match_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gaussian", "moons", "checkpoint_every = 1");
    let c = cfg.to_str().unwrap();
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let o = ebmflow(&["train", c, "--base", "rbm", "--epochs", "4", "--out", full.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("rbm base"));
    let o = ebmflow(&["train", c, "--base", "rbm", "--epochs", "2", "--out", part.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resume = part.join("ckpt_epoch0002.ebmc");
    let o = ebmflow(&["train", c, "--base", "rbm", "--epochs", "4", "--out", part.to_str().unwrap(), "--resume", resume.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(text(&full.join("metrics.csv")), text(&part.join("metrics.csv")));
    let a = ebmflow::checkpoint::load_checkpoint(&full.join("last.ebmc")).unwrap();
    let b = ebmflow::checkpoint::load_checkpoint(&part.join("last.ebmc")).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.pcd, b.pcd);

    // a checkpoint from another architecture is refused
    let o = ebmflow(&["train", c, "--epochs", "4", "--out", part.to_str().unwrap(), "--resume", resume.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sampling_is_deterministic_and_handles_zero_count() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "rbm", "gauss8", "");
    let ck = ckpt.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for p in [&a, &b] {
        let o = ebmflow(&["sample", ck, "--count", "50", "--seed", "9", "--out", p.to_str().unwrap(), "--sweeps", "20"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for ext in ["ebmf", "csv", "spins.csv"] {
        let fa = std::fs::read(format!("{}.{ext}", a.display())).unwrap();
        assert_eq!(fa, std::fs::read(format!("{}.{ext}", b.display())).unwrap(), "{ext}");
    }
    assert_eq!(text(Path::new(&format!("{}.csv", a.display()))).lines().count(), 50);

    let z = dir.path().join("z");
    let o = ebmflow(&["sample", ck, "--count", "0", "--out", z.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(format!("{}.csv", z.display())).unwrap().len(), 0);
    let t = ebmflow::io::read_tensor(Path::new(&format!("{}.ebmf", z.display()))).unwrap();
    assert_eq!(t.shape(), &[0, 2]);
}

#[test]
fn grid_by_spin_has_one_column_per_distinct_spin_vector() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "dflow", "gauss8", "");
    let out = dir.path().join("s");
    let o = ebmflow(&["sample", ckpt.to_str().unwrap(), "--count", "40", "--out", out.to_str().unwrap(), "--grid-by-spin", "--per-column", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let spins: BTreeSet<String> = text(Path::new(&format!("{}.spins.csv", out.display()))).lines().map(str::to_string).collect();
    let svg = text(Path::new(&format!("{}.grid.svg", out.display())));
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches(r#"class="column""#).count(), spins.len());
    assert!(!spins.is_empty() && spins.len() <= 4);

    let g = dir.path().join("g.svg");
    let o = ebmflow(&["grid", ckpt.to_str().unwrap(), "--spins", "1,1;-1,1;-1,-1", "--per-column", "4", "--out", g.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(text(&g).matches(r#"class="column""#).count(), 3);
    let o = ebmflow(&["grid", ckpt.to_str().unwrap(), "--spins", "1,0", "--out", g.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_reports_log_z_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "gaussian", "moons", "");
    let ck = ckpt.to_str().unwrap();
    let csv = dir.path().join("eval.csv");
    let o = ebmflow(&["eval", ck, "--logz", "ais", "--csv", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("± 0.000000"), "{}", stdout(&o));
    assert_eq!(text(&csv).lines().count(), 2);

    let o = ebmflow(&["eval", dir.path().join("nope.ebmc").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let bad = dir.path().join("bad.ebmc");
    std::fs::write(&bad, bytes).unwrap();
    let o = ebmflow(&["sample", bad.to_str().unwrap(), "--count", "3", "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("CRC"));
}

fn write_images(path: &Path, n: usize) {
    let mut r = rng::stream(4, 0);
    let data = (0..n * 16).map(|_| r.random_range(0..256) as f64).collect();
    write_tensor(path, &Tensor::new(vec![n, 4, 4], data).unwrap()).unwrap();
}

#[test]
fn sixteen_spin_image_model_ais_agrees_with_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = dir.path().join("imgs.ebmf");
    write_images(&imgs, 60);
    let cfg = write_config(dir.path(), "rbm", "binimg", "");
    let mut t = text(&cfg);
    t = t.replace("[architecture]\n", "[architecture]\ninit_coupling_std = 0.3\n");
    t = t.replace("dataset = \"binimg\"", &format!("dataset = \"binimg\"\npath = \"{}\"", imgs.display()));
    t = t.replace("train_size = 200\ntest_size = 200", "train_size = 40\ntest_size = 20");
    std::fs::write(&cfg, t).unwrap();
    let o = ebmflow(&["train", cfg.to_str().unwrap(), "--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = dir.path().join("out/last.ebmc");
    let parse = |o: &Output| -> (f64, f64) {
        let s = stdout(o);
        let after = s.split("log Z ").nth(1).unwrap();
        let mut it = after.split_whitespace();
        let v: f64 = it.next().unwrap().parse().unwrap();
        it.next();
        (v, it.next().unwrap().parse().unwrap())
    };
    let e = ebmflow(&["eval", ck.to_str().unwrap(), "--logz", "exact"]);
    assert!(e.status.success(), "{}", stderr(&e));
    let a = ebmflow(&["eval", ck.to_str().unwrap(), "--logz", "ais", "--ais-temps", "500", "--ais-chains", "128"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let (ev, _) = parse(&e);
    let (av, se) = parse(&a);
    assert!(se > 0.0);
    assert!((ev - av).abs() < 3.0 * se, "exact {ev} ais {av} ± {se}");

    let o = ebmflow(&["sample", ck.to_str().unwrap(), "--count", "4", "--out", dir.path().join("im").to_str().unwrap(), "--grid-by-spin", "--per-column", "2", "--sweeps", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ppm = std::fs::read(dir.path().join("im.grid.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n"));
    let o = ebmflow(&["plot", dir.path().join("im.ebmf").to_str().unwrap(), "--kind", "grid", "--shape", "4x4", "--out", dir.path().join("im.ppm").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn plots_are_deterministic_and_reject_empty_input() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train(dir.path(), "gaussian", "gauss8", "");
    let s = dir.path().join("s");
    let o = ebmflow(&["sample", ckpt.to_str().unwrap(), "--count", "10000", "--out", s.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let input = format!("{}.csv", s.display());
    let p1 = dir.path().join("p1.svg");
    let p2 = dir.path().join("p2.svg");
    for p in [&p1, &p2] {
        let o = ebmflow(&["plot", &input, "--kind", "scatter", "--out", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let svg = text(&p1);
    assert_eq!(svg, text(&p2));
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<circle").count(), 10000);

    let metrics = dir.path().join("out/metrics.csv");
    let c = dir.path().join("curve.svg");
    let o = ebmflow(&["plot", metrics.to_str().unwrap(), "--kind", "curve", "--column", "bpd", "--out", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(text(&c).contains("<polyline"));

    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    let o = ebmflow(&["plot", empty.to_str().unwrap(), "--kind", "curve", "--out", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(&empty, "epoch,nll\n1,oops\n").unwrap();
    let o = ebmflow(&["plot", empty.to_str().unwrap(), "--kind", "scatter", "--out", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
