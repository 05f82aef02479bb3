use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
k = 2
seeds = [0]
episodes_per_seed = 1
n_way = 3
k_shot = 4
query_per_class = 4
compare_epoch = 2
snapshots = 2

[data]
base_count = 9
open_count = 3
novel_count = 6
sample_caps = [2, 4]

[data.source]
kind = "synthetic"
num_classes = 18
samples_per_class = 30
image_size = 16

[data.stream]
classes_per_task = 3
num_tasks = 4
train_per_class = 8
val_per_class = 4

[collective]
head_hidden = [16]
epochs_per_task = 1
replay_per_class = 2

[[collective.layers]]
out_channels = 6
kernel = 3
relu = true
pool = true

[[collective.layers]]
out_channels = 6
kernel = 3
relu = true
pool = true

[[collective.layers]]
out_channels = 6
kernel = 3
relu = true
pool = false

[[collective.layers]]
out_channels = 6
kernel = 3
relu = true
pool = false

[criterion]
early_window = 2
late_window = 2

[individual]
front_widths = [6, 6]
head_hidden = [16]

[adapt]
epochs = 3
batch_size = 8

[adapt.fisher]
samples = 8

[open]
samples_per_class = 4
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_learngene"));
    c.env("RUST_LOG", "warn");
    c
}

fn workdir(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("lg-cli-{name}-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn tiny(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn find(dir: &Path, prefix: &str) -> PathBuf {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .unwrap_or_else(|| panic!("no {prefix}* in {}", dir.display()))
}

#[test]
fn config_prints_effective_toml_with_overrides() {
    let o = run(&["config", "--set", "adapt.lr=0.02", "--set", "k=2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("lr = 0.02"), "{text}");
    assert!(text.starts_with("k = 2"), "{text}");
}

#[test]
fn config_errors_exit_with_two() {
    let d = workdir("cfgerr");
    assert_eq!(code(&run(&["config", "--set", "k=0"])), 2);
    assert_eq!(code(&run(&["config", "--set", "nosuch.field=1"])), 2);
    let missing = d.join("missing.toml");
    assert_eq!(
        code(&run(&["--config", missing.to_str().unwrap(), "config"])),
        2
    );
    let o = run(&["experiment", "no-such-kind", "--out", d.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no-such-kind"));
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn report_on_an_empty_table_says_no_data() {
    let d = workdir("empty");
    let csv = d.join("empty.csv");
    std::fs::write(&csv, "kind,seed,condition,x,metric,value\n").unwrap();
    let o = run(&[
        "report",
        csv.to_str().unwrap(),
        "--out",
        d.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("no data"));
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn unreadable_inputs_exit_with_three() {
    let d = workdir("data");
    let junk = d.join("junk.json");
    std::fs::write(&junk, "{not json").unwrap();
    let o = run(&[
        "select-learngene",
        "--checkpoint",
        junk.to_str().unwrap(),
        "--out",
        d.join("lg.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = run(&[
        "reconstruct",
        "--learngene",
        junk.to_str().unwrap(),
        "--out",
        d.join("m.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    std::fs::remove_dir_all(&d).ok();
}

#[test]
fn full_pipeline_through_the_cli() {
    let d = workdir("pipeline");
    let cfg = tiny(&d);
    let c = cfg.to_str().unwrap();
    let out = d.to_str().unwrap();

    let o = run(&["--config", c, "train-collective", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = find(&d, "collective-");
    assert!(find(&d, "rho-").exists());

    let lg = d.join("learngene.json");
    let o = run(&[
        "--config",
        c,
        "select-learngene",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        lg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    // a tampered package is rejected
    let text = std::fs::read_to_string(&lg).unwrap();
    let bad = d.join("tampered.json");
    std::fs::write(
        &bad,
        text.replacen("\"k\": 2", "\"k\": 1", 1)
            .replacen("\"k\":2", "\"k\":1", 1),
    )
    .unwrap();
    let o = run(&[
        "--config",
        c,
        "reconstruct",
        "--learngene",
        bad.to_str().unwrap(),
        "--out",
        d.join("x.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    let model = d.join("model.json");
    let o = run(&[
        "--config",
        c,
        "reconstruct",
        "--learngene",
        lg.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = run(&[
        "--config",
        c,
        "adapt",
        "--model",
        model.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let adapt_csv = find(&d, "adapt-e0-");
    let rows = std::fs::read_to_string(&adapt_csv).unwrap();
    assert_eq!(
        rows.lines().filter(|l| l.starts_with("adapt,")).count(),
        3 * 4
    );

    // a diverging learning rate is a numeric failure
    let o = run(&[
        "--config",
        c,
        "--set",
        "adapt.lr=1e30",
        "adapt",
        "--model",
        model.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let o = run(&[
        "--config",
        c,
        "eval-open",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("flag_rate"));

    let o = run(&[
        "--config",
        c,
        "experiment",
        "scratch-compare",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = find(&d, "metrics-scratch-compare-");
    let o = run(&[
        "report",
        metrics.to_str().unwrap(),
        "--out",
        d.join("report").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("scratch_compare"));
    assert!(stdout(&o).contains(".svg"));

    // a checkpoint made under another collective config is refused
    let o = run(&[
        "--config",
        c,
        "--set",
        "k=1",
        "experiment",
        "open-world",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    std::fs::remove_dir_all(&d).ok();
}
