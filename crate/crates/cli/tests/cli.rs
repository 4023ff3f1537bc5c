use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparsebif::formats::{read_csv, read_snap};
use sparsebif::rom::{load_model, save_model};

const TINY: &str = r#"
# small pitchfork run used by the CLI tests
system.kind = "pitchfork"
system.mu_star = 1.0
system.transverse_dims = 1
system.transverse_rate = 5
system.n_h = 30
system.lift_gain = 0.3
system.lift_seed = 1

grid.dt = 0.05
grid.t_end = 3
grid.mu = [0.4, 0.6, 0.8, 0.9]
grid.seed = 2

pod.local_energy_tol = 1e-6
pod.global_energy_tol = 1e-6

ae.hidden = [6]
ae.latent_dim = 2
ae.epochs = EPOCHS
ae.learning_rate = 1e-3
ae.batch_size = 16
ae.seed = 3
ae.lambda1 = 1e-3
ae.lambda2 = 1e-6
ae.lambda3 = 1e-4
ae.time_window = [1, 3]
ae.resample_dt = 0.05

sindy.state_degree = 1
sindy.param_degree = 1
sindy.threshold = 1e-3
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparsebif"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY.replace("EPOCHS", &epochs.to_string())).unwrap();
    path
}

/// Config, generated data directory and trained model in a fresh temp dir.
fn trained(epochs: usize) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), epochs);
    let data = tmp.path().join("data");
    let model = tmp.path().join("model.json");
    let g = run(&["generate", "--config", p(&cfg), "--out", p(&data)]);
    assert_eq!(code(&g), 0, "{}", stderr(&g));
    let t = run(&["train", "--config", p(&cfg), "--data", p(&data), "--model", p(&model)]);
    assert_eq!(code(&t), 0, "{}", stderr(&t));
    (tmp, data, model)
}

#[test]
fn help_for_every_subcommand() {
    for sub in ["generate", "train", "predict", "diagram", "spectrum", "equations"] {
        let o = run(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(!o.stdout.is_empty());
    }
    let d = String::from_utf8(run(&["diagram", "--help"]).stdout).unwrap();
    assert!(d.contains("mu,value,diverged"));
}

#[test]
fn generate_writes_files_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 1);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = run(&["generate", "--config", p(&cfg), "--out", p(dir)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for m in 0..4 {
        let name = format!("mu_{m:03}.sbif");
        let x = std::fs::read(a.join(&name)).unwrap();
        assert_eq!(x, std::fs::read(b.join(&name)).unwrap());
        assert_eq!(read_snap(&a.join(&name)).unwrap().shape(), (61, 30));
    }
    let strip = |dir: &Path| {
        let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap();
        assert!(v["created"].as_str().unwrap().contains('T'));
        v.as_object_mut().unwrap().remove("created");
        v
    };
    let (ma, mb) = (strip(&a), strip(&b));
    assert_eq!(ma, mb);
    assert_eq!(ma["params"].as_array().unwrap().len(), 4);
    assert_eq!(ma["stop_indices"].as_array().unwrap().len(), 4);
    assert_eq!(ma["seed"], 2);
}

#[test]
fn generate_refuses_non_empty_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 1);
    let out = tmp.path().join("out");
    std::fs::create_dir(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "x").unwrap();
    let o = run(&["generate", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("--force"));
    let o = run(&["generate", "--config", p(&cfg), "--out", p(&out), "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_with_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "system.kind = \"pitchfork\"\nsystem.colour = 3\n").unwrap();
    let o = run(&["generate", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), 1);
    let o = bin()
        .args(["generate", "--config", p(&cfg), "--out", p(&tmp.path().join("o"))])
        .env("SPARSEBIF_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn train_smoke_run_prints_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 1);
    let data = tmp.path().join("data");
    assert_eq!(code(&run(&["generate", "--config", p(&cfg), "--out", p(&data)])), 0);
    let model = tmp.path().join("m.json");
    let o = bin()
        .args(["train", "--config", p(&cfg), "--data", p(&data), "--model", p(&model)])
        .env("SPARSEBIF_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let line = out.lines().next().unwrap();
    let (epoch, loss) = line.split_once(',').unwrap();
    assert_eq!(epoch, "1");
    assert!(loss.parse::<f64>().unwrap().is_finite());
    assert!(load_model(&model).is_ok());

    let ext = tmp.path().join("ext.json");
    let o = run(&["train", "--config", p(&cfg), "--data", p(&data), "--model", p(&ext), "--basis-file", "ext.basis.sbif"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(tmp.path().join("ext.basis.sbif").exists());
    assert_eq!(load_model(&ext).unwrap(), load_model(&model).unwrap());
}

#[test]
fn corrupted_snapshot_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 1);
    let data = tmp.path().join("data");
    assert_eq!(code(&run(&["generate", "--config", p(&cfg), "--out", p(&data)])), 0);
    let f = data.join("mu_002.sbif");
    let mut bytes = std::fs::read(&f).unwrap();
    bytes[100] ^= 0x40;
    std::fs::write(&f, bytes).unwrap();
    let o = run(&["train", "--config", p(&cfg), "--data", p(&data), "--model", p(&tmp.path().join("m.json"))]);
    assert_eq!(code(&o), 3);
    let e = stderr(&o);
    assert!(e.contains("mu_002.sbif") && e.contains("at byte"), "{e}");
}

#[test]
fn predict_writes_trajectory_and_latent_csv() {
    let (tmp, data, model) = trained(200);
    let out = tmp.path().join("pred");
    // runs past the end of the training window
    let o = run(&[
        "predict", "--model", p(&model), "--mu", "0.6", "--t0", "1", "--t-end", "4", "--dt", "0.05", "--x0", "from-data",
        "--data", p(&data), "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let full = read_snap(&tmp.path().join("pred.sbif")).unwrap();
    assert_eq!(full.shape(), (61, 30));
    let (header, rows) = read_csv(std::io::BufReader::new(std::fs::File::open(tmp.path().join("pred.latent.csv")).unwrap())).unwrap();
    assert_eq!(header, ["t", "z0", "z1"]);
    assert_eq!(rows.len(), 61);
    assert_eq!(rows[60][0], 4.0);
    assert!(stderr(&o).is_empty(), "{}", stderr(&o));

    let o = run(&[
        "predict", "--model", p(&model), "--mu", "1.5", "--t0", "1", "--t-end", "1.5", "--dt", "0.05", "--x0", "from-data",
        "--data", p(&data), "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("outside the training range"));
}

#[test]
fn predict_reproduces_held_in_trajectory() {
    let (tmp, data, model) = trained(1500);
    let m = load_model(&model).unwrap();
    let out = tmp.path().join("held");
    let (t0, t1) = m.train_window;
    let o = run(&[
        "predict", "--model", p(&model), "--mu", "0.8", "--t0", &t0.to_string(), "--t-end", &t1.to_string(), "--dt",
        &m.resample_dt.to_string(), "--x0", "from-data", "--data", p(&data), "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pred = read_snap(&tmp.path().join("held.sbif")).unwrap();
    let truth = read_snap(&data.join("mu_002.sbif")).unwrap();
    let first = (t0 / 0.05).round() as usize;
    let truth = truth.row_range(first, first + pred.rows());
    let rel = pred.sub(&truth).unwrap().frobenius_norm() / truth.frobenius_norm();
    assert!(rel < 0.05, "held-in error {rel}");
}

#[test]
fn predict_divergence_keeps_partial_outputs() {
    let (tmp, _data, model) = trained(1);
    let mut m = load_model(&model).unwrap();
    let xi = &mut m.latent_model.xi;
    for v in xi.as_mut_slice() {
        *v = 0.0;
    }
    // z0' = 50 z0: overflows well within the horizon
    let row = m.latent_model.spec.term_names().iter().position(|n| n == "z0").unwrap();
    xi[(row, 0)] = 50.0;
    let bad = tmp.path().join("bad.json");
    save_model(&m, &bad).unwrap();
    let x0 = tmp.path().join("x0.txt");
    std::fs::write(&x0, vec!["0.3"; 30].join(" ")).unwrap();
    let out = tmp.path().join("div");
    let o = run(&[
        "predict", "--model", p(&bad), "--mu", "0.6", "--t0", "0", "--t-end", "100", "--dt", "0.1", "--x0", p(&x0), "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(tmp.path().join("div.sbif.partial").exists());
    assert!(tmp.path().join("div.latent.csv.partial").exists());
    assert!(!tmp.path().join("div.sbif").exists());
}

#[test]
fn diagrams_from_data_and_model_share_schema() {
    let (tmp, data, model) = trained(50);
    let a = tmp.path().join("data.csv");
    let b = tmp.path().join("model.csv");
    let o = run(&["diagram", "--data", p(&data), "--qoi", "field_l2norm:u2", "--out", p(&a)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["diagram", "--data", p(&data), "--model", p(&model), "--qoi", "field_l2norm:u2", "--out", p(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let read = |f: &Path| read_csv(std::io::BufReader::new(std::fs::File::open(f).unwrap())).unwrap();
    let (ha, ra) = read(&a);
    let (hb, rb) = read(&b);
    assert_eq!(ha, ["mu", "value", "diverged"]);
    assert_eq!(ha, hb);
    let mus = |r: &[Vec<f64>]| r.iter().map(|row| row[0]).collect::<Vec<_>>();
    assert_eq!(mus(&ra), mus(&rb));
    assert_eq!(mus(&ra), [0.4, 0.6, 0.8, 0.9]);
    assert!(ra.iter().all(|r| r[1] > 0.0 && r[2] == 0.0));

    let o = run(&["diagram", "--data", p(&data), "--qoi", "bogus", "--out", p(&a)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn diagram_reads_defaults_from_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = tmp.path().join("tiny.cfg");
    let text = TINY.replace("EPOCHS", "1")
        + &format!("analysis.qoi = \"field_l2norm:u2\"\nio.data_dir = \"{}\"\n", data.display());
    std::fs::write(&cfg, text).unwrap();
    assert_eq!(code(&run(&["generate", "--config", p(&cfg)])), 0);
    let from_cfg = tmp.path().join("a.csv");
    let explicit = tmp.path().join("b.csv");
    let o = run(&["diagram", "--config", p(&cfg), "--out", p(&from_cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["diagram", "--data", p(&data), "--qoi", "field_l2norm:u2", "--out", p(&explicit)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(&from_cfg).unwrap(), std::fs::read(&explicit).unwrap());

    // without a QoI anywhere the command is a usage error
    let o = run(&["diagram", "--data", p(&data), "--out", p(&from_cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--qoi"));
}

#[test]
fn spectrum_of_hopf_energy_peaks_at_the_cycle_frequency() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("hopf.cfg");
    std::fs::write(
        &cfg,
        "system.kind = \"hopf\"\nsystem.mu_star = 0\nsystem.omega = 2\nsystem.n_h = 40\nsystem.lift_gain = 0.4\n\
         grid.dt = 0.05\ngrid.t_end = 120\ngrid.mu = [0.3]\n",
    )
    .unwrap();
    let data = tmp.path().join("d");
    assert_eq!(code(&run(&["generate", "--config", p(&cfg), "--out", p(&data)])), 0);
    let out = tmp.path().join("psd.csv");
    let o = run(&["spectrum", "--data", p(&data), "--signal", "kinetic_energy", "--from", "40", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (header, rows) = read_csv(std::io::BufReader::new(std::fs::File::open(&out).unwrap())).unwrap();
    assert_eq!(header, ["frequency", "power"]);
    let peak = rows.iter().skip(1).max_by(|a, b| a[1].total_cmp(&b[1])).unwrap();
    // the quadratic lift puts energy at the cycle frequency omega / 2pi
    let df = rows[1][0];
    let f0 = 2.0 / (2.0 * std::f64::consts::PI);
    assert!((peak[0] - f0).abs() <= df || (peak[0] - 2.0 * f0).abs() <= df, "peak {} vs {f0}", peak[0]);
}

#[test]
fn equations_of_planar_fixture() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/planar.json");
    let o = run(&["equations", "--model", p(&fixture)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("z0' = -0.111 z0 - 0.992 z1"));
    assert_eq!(lines.next(), Some("z1' = 0.992 z0 + 0.111 z1"));

    let o = run(&["equations", "--model", p(&fixture), "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["equations"][0]["terms"]["z1"], -0.992);
}

#[test]
fn equations_of_trained_model_and_bad_files() {
    let (tmp, _data, model) = trained(1);
    let o = run(&["equations", "--model", p(&model)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("z0' ="));

    let missing = run(&["equations", "--model", p(&tmp.path().join("nope.json"))]);
    assert_eq!(code(&missing), 3);
    let junk = tmp.path().join("junk.json");
    std::fs::write(&junk, "{\"format\": \"sparsebif-rom-v9\"}").unwrap();
    let o = run(&["equations", "--model", p(&junk)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("unsupported version"));
}

#[test]
fn thread_count_does_not_change_the_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 20);
    let data = tmp.path().join("data");
    assert_eq!(code(&run(&["generate", "--config", p(&cfg), "--out", p(&data)])), 0);
    let train = |threads: &str| {
        let model = tmp.path().join(format!("m{threads}.json"));
        let o = bin()
            .args(["train", "--config", p(&cfg), "--data", p(&data), "--model", p(&model)])
            .env("SPARSEBIF_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(model).unwrap()
    };
    assert_eq!(train("1"), train("4"));
}
