use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fiberlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fiberlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("FIBERLAB_OUT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = "[method]\nsteps = 6\nprompts_per_step = 2\nrollouts_per_prompt = 4\nvalidation_every = 2\n";

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn missing_config_prints_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fiberlab(tmp.path(), &["run"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn unreadable_config_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fiberlab(tmp.path(), &["run", "--config", "absent.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("absent.toml"));
}

#[test]
fn zero_steps_writes_header_only_csv() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let out = fiberlab(tmp.path(), &["run", "-c", "run.toml", "--steps", "0", "--out", "o"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(tmp.path().join("o/telemetry.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(tmp.path().join("o/policy.ckpt").exists());
    assert!(tmp.path().join("o/config.resolved.toml").exists());
}

#[test]
fn same_seed_gives_identical_trees() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    for dir in ["a", "b"] {
        let out = fiberlab(tmp.path(), &["run", "-c", "run.toml", "--seed", "1", "--env.kind=blend", "--out", dir]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));
    let out = fiberlab(tmp.path(), &["run", "-c", "run.toml", "--seed", "1", "--env.kind=blend", "--workers", "1", "--out", "c"]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        std::fs::read(tmp.path().join("a/telemetry.csv")).unwrap(),
        std::fs::read(tmp.path().join("c/telemetry.csv")).unwrap()
    );
}

#[test]
fn bad_keys_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let out = fiberlab(tmp.path(), &["run", "-c", "run.toml", "--gating.epsilonn=0.1"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("epsilonn"), "{}", stderr(&out));
    let out = fiberlab(tmp.path(), &["run", "-c", "run.toml", "--method.epochs=0"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("method.epochs"), "{}", stderr(&out));
}

#[test]
fn resolved_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let out = fiberlab(tmp.path(), &["run", "-c", "run.toml", "--steps", "0", "--gating.epsilon=0.02", "--out", "o"]);
    assert_eq!(code(&out), 0);
    let resolved = std::fs::read_to_string(tmp.path().join("o/config.resolved.toml")).unwrap();
    assert!(resolved.contains("epsilon = 0.02"), "{resolved}");
    let out = fiberlab(tmp.path(), &["run", "-c", "o/config.resolved.toml", "--out", "p"]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        std::fs::read(tmp.path().join("o/config.resolved.toml")).unwrap(),
        std::fs::read(tmp.path().join("p/config.resolved.toml")).unwrap()
    );
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_fiberlab"))
        .args(["run", "-c", "run.toml", "--steps", "0"])
        .current_dir(tmp.path())
        .env("FIBERLAB_OUT", "from-env")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(tmp.path().join("from-env/telemetry.csv").exists());
}

#[test]
fn compare_writes_runs_and_join() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let out = fiberlab(tmp.path(), &["compare", "-c", "run.toml", "--methods", "fiberpo,grpo", "--out", "cmp"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut csvs: Vec<String> = std::fs::read_dir(tmp.path().join("cmp"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    csvs.sort();
    assert_eq!(csvs, ["comparison.csv", "fiberpo.csv", "grpo.csv"]);
    let join = std::fs::read_to_string(tmp.path().join("cmp/comparison.csv")).unwrap();
    assert_eq!(join.lines().count(), 2 + 6);
}

#[test]
fn compare_rejects_single_method_and_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), SMALL);
    let out = fiberlab(tmp.path(), &["compare", "-c", "run.toml", "--methods", "fiberpo"]);
    assert_eq!(code(&out), 1);
    std::fs::write(tmp.path().join("b.toml"), format!("{SMALL}name = \"grpo\"\n[env]\nkind = \"blend\"\n")).unwrap();
    let out = fiberlab(tmp.path(), &["compare", "-c", "run.toml", "-c", "b.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("env"), "{}", stderr(&out));
}

#[test]
fn check_default_passes_and_fd_floor_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fiberlab(tmp.path(), &["check"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let out = fiberlab(tmp.path(), &["check", "--tol", "fd=1e-15", "--only", "jacobian_identity", "--only", "gradient_vs_fd"]);
    assert_ne!(code(&out), 0);
    let err = stderr(&out);
    assert!(err.contains("jacobian_identity") && err.contains("gradient_vs_fd"), "{err}");
}

#[test]
fn check_list_does_not_run() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fiberlab(tmp.path(), &["check", "--list"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("gradient_vs_fd") && text.contains("curriculum_sampling"));
    assert!(!text.contains("pass"));
}

#[test]
fn gate_prints_decomposition() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fiberlab(tmp.path(), &["gate", "--log-ratios", "0.5,0.5,0.5,0.5", "--gating.c_plus=0.05", "--gating.c_minus=0.01"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("G-II,"), "{}", stdout(&out));
}

#[test]
fn exhausted_pool_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let suite = tmp.path().join("suite.toml");
    std::fs::write(
        &suite,
        "[[task]]\ntask_id = 0\ndomain_id = 0\nprompt = \"coin\"\nvocab_size = 2\nmax_length = 1\naccepted = [{ tokens = [1] }]\n",
    )
    .unwrap();
    write_config(
        tmp.path(),
        &format!("{SMALL}[curriculum]\nprofiling_rollouts = 1\n[env]\nkind = \"suite\"\nsuite = {:?}\n", suite),
    );
    let codes: Vec<i32> = (0..16)
        .map(|s| code(&fiberlab(tmp.path(), &["run", "-c", "run.toml", "--seed", &s.to_string(), "--out", "o"])))
        .collect();
    assert!(codes.contains(&3), "{codes:?}");
    assert!(codes.iter().all(|&c| c == 0 || c == 3), "{codes:?}");
}

#[test]
fn profile_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), &format!("{SMALL}[env]\nkind = \"blend\"\n"));
    let out = fiberlab(tmp.path(), &["profile", "-c", "run.toml", "--out", "p"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(tmp.path().join("p/profiles.csv")).unwrap();
    assert!(csv.starts_with("task_id,domain,p,valid"));
    assert_eq!(csv.lines().count(), 1 + 12);
}
