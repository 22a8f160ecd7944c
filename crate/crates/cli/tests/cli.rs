use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
n_train = 120
n_val = 40
n_test = 40
t = 6
m_max = 4
epochs_phase1 = 4
epochs_phase2 = 2
budgets = 1,3
ste_temperatures = 0.1,1
";

fn toe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toe"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = toe(dir, args);
    assert!(
        out.status.success(),
        "toe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.conf"), SMALL).unwrap();
    dir
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let runs = [setup(), setup()];
    for dir in &runs {
        let d = dir.path();
        ok(d, &["generate", "--config", "small.conf"]);
        ok(d, &["train", "--config", "small.conf"]);
        ok(d, &["evaluate", "--config", "small.conf", "--traces", "traces"]);
    }
    for f in [
        "cohort.jsonl",
        "cohort.jsonl.gt.json",
        "model.json",
        "model.json.log.csv",
        "suite.csv",
        "traces/toe_k3_seed0.jsonl",
    ] {
        let a = fs::read(runs[0].path().join(f)).unwrap();
        let b = fs::read(runs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
}

#[test]
fn suite_csv_has_fixed_columns() {
    let dir = setup();
    let d = dir.path();
    let common = ["--config", "small.conf"];
    ok(d, &[&["generate"][..], &common].concat());
    ok(d, &[&["train"][..], &common].concat());
    ok(d, &[&["evaluate", "--frontier", "frontier.csv"][..], &common].concat());
    let text = fs::read_to_string(d.join("suite.csv")).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(
        header,
        "method,k,auroc,auprc,fidelity_mae,ece,comprehensiveness,mean_evidence,exhaustion_rate,n,seed"
    );
    let rows = text.lines().filter(|l| !l.starts_with('#')).count() - 1;
    assert_eq!(rows, 4 * 2);
    assert!(fs::read_to_string(d.join("frontier.csv")).unwrap().contains("method,k,metric,value"));

    ok(d, &[&["ablate"][..], &common].concat());
    let abl = fs::read_to_string(d.join("ablation.csv")).unwrap();
    let abl_header = abl.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(
        abl_header,
        "config,seed,k,auroc,fidelity_mae,comprehensiveness,mean_evidence,exhaustion_rate,same_masks_as_full,n"
    );
    assert!(abl.contains("ste_tau=0.1"));

    ok(d, &[&["audit"][..], &common].concat());
    let audit: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("audit.json")).unwrap()).unwrap();
    assert!(audit.get("exhaustion").is_some());

    ok(d, &["report", "suite.csv", "--out", "report.csv"]);
    assert!(fs::read_to_string(d.join("report.csv")).unwrap().contains("mean"));
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["generate", "--config", "small.conf"]);
    let again = toe(d, &["generate", "--config", "small.conf"]);
    assert_eq!(again.status.code(), Some(2));
    ok(d, &["generate", "--config", "small.conf", "--force"]);
}

#[test]
fn exit_codes() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(toe(d, &["generate", "--set", "no_such_key=1"]).status.code(), Some(1));
    assert_eq!(toe(d, &["generate", "--set", "beam_width=x"]).status.code(), Some(1));
    assert_eq!(toe(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(toe(d, &["--help"]).status.code(), Some(0));
    assert_eq!(toe(d, &["train", "--cohort", "missing.jsonl"]).status.code(), Some(2));
    fs::write(d.join("bad.jsonl"), "not json\n").unwrap();
    assert_eq!(toe(d, &["train", "--cohort", "bad.jsonl"]).status.code(), Some(2));
    assert_eq!(
        toe(d, &["generate", "--config", "small.conf", "--seeds", "0,1"]).status.code(),
        Some(1),
        "several seeds need a {{seed}} path"
    );
}

#[test]
fn seed_templates_expand() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["generate", "--config", "small.conf", "--seeds", "0,1", "--cohort", "c{seed}.jsonl"]);
    let a = fs::read(d.join("c0.jsonl")).unwrap();
    let b = fs::read(d.join("c1.jsonl")).unwrap();
    assert_ne!(a, b);
}
