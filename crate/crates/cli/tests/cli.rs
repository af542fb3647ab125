use std::path::Path;
use std::process::Command;

use hyperpeft::checkpoint::load_params;
use hyperpeft::data::{load_tasks_jsonl, synth_tasks};
use hyperpeft::eval::eval_shots;
use hyperpeft::peft::{load_peft, PeftKind};
use hyperpeft::train::Models;
use hyperpeft_cli::config::parse_override;
use hyperpeft_cli::{run, CliError, Run, RunConfig};
use serde_json::json;

fn cli(cmd: &str, dir: &Path, extra: &[&str]) -> Result<Run, CliError> {
    let mut argv = vec!["hyperpeft".to_string(), cmd.to_string(), format!("--io.out_dir={}", dir.display())];
    argv.extend(extra.iter().map(|s| s.to_string()));
    run(argv).map(|r| r.expect("command produces a run"))
}

fn config_path(err: CliError) -> String {
    match err {
        CliError::Core(hyperpeft::Error::Config { path, .. }) => path,
        e => panic!("expected a config error, got {e}"),
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hyperpeft"))
}

#[test]
fn overrides_parse_as_json_or_string() {
    assert_eq!(parse_override("--train.steps=5").unwrap(), ("train.steps".into(), json!(5)));
    assert_eq!(parse_override("--train.mode=shared_peft").unwrap().1, json!("shared_peft"));
    assert_eq!(parse_override("--eval.seeds=[1,2]").unwrap().1, json!([1, 2]));
    assert!(parse_override("train.steps=5").is_err());
    assert!(parse_override("--train.steps").is_err());

    let cfg = RunConfig::load(None, &["--train.steps=7".into(), "--io.checkpoint_marks.0=10".into()]).unwrap();
    assert_eq!(cfg.train.steps, 7);
    assert_eq!(cfg.io.checkpoint_marks[0], 10);
    assert_eq!(RunConfig::load(None, &[]).unwrap(), RunConfig::default());
}

#[test]
fn config_errors_name_the_field() {
    let load = |args: &[&str]| {
        let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        RunConfig::load(None, &args).map_err(|e| config_path(CliError::Core(e)))
    };
    assert_eq!(load(&["--train.nope=1"]).unwrap_err(), "train.nope");
    assert_eq!(load(&["--train.steps=\"many\""]).unwrap_err(), "train.steps");
    assert_eq!(load(&["--train.lr=0"]).unwrap_err(), "train.lr");
    assert_eq!(load(&["--peft.prefix_len=4"]).unwrap_err(), "hyper.target");
    assert_eq!(load(&["--model.d_model=64"]).unwrap_err(), "hyper.downstream");
    assert_eq!(load(&["--train.max_len_down=500"]).unwrap_err(), "train.max_len_down");
    assert_eq!(load(&["--peft.prefix_len=4", "--hyper.target.prefix_len=4"]).map(|c| c.peft.prefix_len), Ok(4));

    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.json");
    std::fs::write(&file, r#"{"train": {"steps": 3, "typo": 1}}"#).unwrap();
    let err = RunConfig::load(Some(&file), &[]).unwrap_err();
    assert_eq!(config_path(CliError::Core(err)), "train.typo");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["mtf", "--train.bogus=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.bogus"));

    let out = bin()
        .args(["mtf", &format!("--io.out_dir={}", dir.path().display())])
        .args(["--train.mode=shared_peft", "--train.steps=5", "--train.batch_size=2", "--train.lr=1e300", "--train.precision=f32"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at step"));

    let out = bin()
        .args(["gradcheck", &format!("--io.out_dir={}", dir.path().display())])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let err: f64 = stdout
        .split("max rel err ")
        .nth(1)
        .and_then(|s| s.split_whitespace().next())
        .and_then(|s| s.parse().ok())
        .expect("gradcheck prints its error");
    assert!(err < 1e-4);

    let out = bin().arg("default-config").output().unwrap();
    let cfg: RunConfig = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn generated_adapter_is_evaluated_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let task = &synth_tasks(0).held_out[0];
    let shots = eval_shots(task, 16, 0);
    let shots_file = dir.path().join("shots.jsonl");
    let lines: Vec<String> = shots.examples.iter().map(|e| serde_json::to_string(e).unwrap()).collect();
    std::fs::write(&shots_file, lines.join("\n")).unwrap();

    let gen = cli("gen-adapter", dir.path(), &[&format!("--io.shots_file={}", shots_file.display())]).unwrap();
    let adapter = gen.outcome.artifacts["adapter"].clone();
    let params = load_peft(&adapter).unwrap();
    assert_eq!(params.kind(), PeftKind::PrefixFlat);
    assert_eq!(gen.outcome.summary["shots"], 16);

    let eval = |sub: &str| {
        let out = dir.path().join(sub);
        let r = cli(
            "eval",
            &out,
            &["--eval.adapter=finetuned", "--eval.seeds=[0]", &format!("--io.adapter={}", adapter.display())],
        )
        .unwrap();
        std::fs::read(&r.outcome.artifacts["report"]).unwrap()
    };
    let a = eval("a");
    assert_eq!(a, eval("b"));
    let csv = String::from_utf8(a).unwrap();
    assert_eq!(csv.lines().next(), Some("task,metric,value,n,adapter,seed"));
    assert!(csv.lines().last().unwrap().starts_with("AVG,accuracy,"));

    let err = cli("eval", dir.path(), &["--eval.adapter=finetuned"]).unwrap_err();
    assert_eq!(config_path(err), "io.adapter");
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--train.mode=shared_peft", "--train.steps=4", "--train.batch_size=2", "--train.seed=3"];
    let first = cli("mtf", &dir.path().join("a"), &args).unwrap();
    assert_eq!(first.manifest["seeds"]["train"], 3);
    assert!(first.manifest["versions"]["checkpoint_format"].is_u64());
    assert!(first.outcome.artifacts.contains_key("shared_peft"));

    let again = run([
        "hyperpeft".to_string(),
        "mtf".into(),
        "--config".into(),
        first.manifest_path.display().to_string(),
        format!("--io.out_dir={}", dir.path().join("b").display()),
    ])
    .unwrap()
    .unwrap();
    assert_eq!(again.outcome.summary["param_hash"], first.outcome.summary["param_hash"]);
}

#[test]
fn hyperpretraining_checkpoints_keep_the_downstream_model() {
    let dir = tempfile::tempdir().unwrap();
    let r = cli(
        "hyperpretrain",
        dir.path(),
        &["--train.steps=8", "--train.batch_size=2", "--io.checkpoint_marks=[0,50,100]", "--data.corpus_tokens=20000"],
    )
    .unwrap();
    let marks: Vec<_> = r.outcome.artifacts.keys().filter(|k| k.starts_with("checkpoint_step")).cloned().collect();
    assert_eq!(marks, ["checkpoint_step0", "checkpoint_step4", "checkpoint_step8"]);
    let cfg = RunConfig::default();
    let mut hashes = Vec::new();
    for key in &marks {
        let mut m = Models::new(cfg.model.clone(), 99).unwrap();
        assert!(load_params(&r.outcome.artifacts[key], &mut m.store, "down.").unwrap() > 0);
        hashes.push(m.store.hash());
    }
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn synth_data_round_trips_through_a_task_file() {
    let dir = tempfile::tempdir().unwrap();
    let r = cli("synth-data", dir.path(), &["--data.synth_seed=2", "--data.corpus_tokens=5000"]).unwrap();
    let held_out = load_tasks_jsonl(&r.outcome.artifacts["held_out"]).unwrap();
    assert_eq!(held_out, synth_tasks(2).held_out);
    assert!(std::fs::read_to_string(&r.outcome.artifacts["corpus"]).unwrap().lines().count() > 1);

    let names: Vec<String> = held_out.iter().map(|t| t.name.clone()).collect();
    let mut all = load_tasks_jsonl(&r.outcome.artifacts["held_in"]).unwrap();
    all.extend(held_out);
    let file = dir.path().join("all.jsonl");
    hyperpeft::data::write_tasks_jsonl(&all, &file).unwrap();
    let cfg = RunConfig::load(
        None,
        &[
            format!("--data.task_file={}", file.display()),
            format!("--data.held_out_tasks={}", serde_json::to_string(&names).unwrap()),
        ],
    )
    .unwrap();
    let (held_in, held_out) = hyperpeft_cli::commands::task_split(&cfg).unwrap();
    assert_eq!(held_in, synth_tasks(2).held_in);
    assert_eq!(held_out.len(), 4);

    let bad = RunConfig {
        data: hyperpeft_cli::config::DataConfig {
            held_out_tasks: vec!["missing".into()],
            ..cfg.data.clone()
        },
        ..cfg
    };
    let err = hyperpeft_cli::commands::task_split(&bad).unwrap_err();
    assert_eq!(config_path(CliError::Core(err)), "data.held_out_tasks");
}
