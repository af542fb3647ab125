use std::collections::HashMap;

use hyperpeft::data::vocab::tokenize;
use hyperpeft::data::{synth_tasks, Metric, Task, TaskExample};
use hyperpeft::eval::{
    eval_task, eval_with_adapter, generate_greedy, macro_f1, option_scores, rank_classify, rouge_l, write_report, Adapter,
    AdapterSource, EvalReport, EvalRow,
};
use hyperpeft::hyper::HyperModelConfig;
use hyperpeft::model::ModelConfig;
use hyperpeft::peft::{PeftConfig, PeftKind};
use hyperpeft::train::{Models, TrainConfig};
use hyperpeft::Tensor;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lcs_memo(a: &[&str], b: &[&str], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs_memo(a, b, i + 1, j + 1, memo)
    } else {
        lcs_memo(a, b, i + 1, j, memo).max(lcs_memo(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

fn rouge_oracle(pred: &str, reference: &str) -> f64 {
    let p: Vec<&str> = pred.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if p.is_empty() && r.is_empty() {
        return 1.0;
    }
    if p.is_empty() || r.is_empty() {
        return 0.0;
    }
    let lcs = lcs_memo(&p, &r, 0, 0, &mut HashMap::new()) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (lcs / p.len() as f64, lcs / r.len() as f64);
    2.0 * prec * rec / (prec + rec)
}

fn macro_oracle(preds: &[u8], refs: &[u8]) -> f64 {
    let mut classes: Vec<u8> = preds.iter().chain(refs).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    // confusion[r][p]
    let mut confusion = [[0usize; 256]; 256];
    for (&p, &r) in preds.iter().zip(refs) {
        confusion[r as usize][p as usize] += 1;
    }
    let mut total = 0.0;
    for &c in &classes {
        let c = c as usize;
        let tp = confusion[c][c];
        let predicted: usize = (0..256).map(|r| confusion[r][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        if tp == 0 {
            continue;
        }
        let (p, r) = (tp as f64 / predicted as f64, tp as f64 / actual as f64);
        total += 2.0 * p * r / (p + r);
    }
    total / classes.len() as f64
}

#[test]
fn rouge_l_worked_examples() {
    assert!((rouge_l("the cat sat on mat", "the cat on mat") - 0.8888888888888888).abs() < 1e-6);
    assert_eq!(rouge_l("a b c", "a b c"), 1.0);
    assert_eq!(rouge_l("a b", "c d"), 0.0);
    assert_eq!(rouge_l("", ""), 1.0);
    assert_eq!(rouge_l("", "a"), 0.0);
    assert_eq!(rouge_l("a", "  "), 0.0);
}

#[test]
fn rouge_l_matches_oracle_on_fuzz_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let words = ["a", "b", "c", "d", "e", "ab"];
    for _ in 0..500 {
        let text = |rng: &mut ChaCha8Rng| {
            let n = rng.random_range(0..12);
            (0..n).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
        };
        let (p, r) = (text(&mut rng), text(&mut rng));
        let got = rouge_l(&p, &r);
        assert_eq!(got.to_bits(), rouge_oracle(&p, &r).to_bits(), "{p:?} vs {r:?}");
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn macro_f1_worked_examples() {
    let v = macro_f1(&["A", "A", "B"], &["A", "B", "B"]).unwrap();
    assert!((v - 2.0 / 3.0).abs() < 1e-6);
    assert_eq!(macro_f1(&["x", "y", "z"], &["x", "y", "z"]).unwrap(), 1.0);
    // all predictions "A", refs balanced over A and B: F1(A) = 2/3, F1(B) = 0
    let v = macro_f1(&["A", "A", "A", "A"], &["A", "A", "B", "B"]).unwrap();
    assert!((v - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    assert!(macro_f1::<&str>(&[], &[]).is_err());
    assert!(macro_f1(&["a"], &["a", "b"]).is_err());
}

#[test]
fn macro_f1_matches_oracle_on_fuzz_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..500 {
        let n = rng.random_range(1..20);
        let k = rng.random_range(1..5u8);
        let preds: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let refs: Vec<u8> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let got = macro_f1(&preds, &refs).unwrap();
        assert_eq!(got.to_bits(), macro_oracle(&preds, &refs).to_bits(), "{preds:?} vs {refs:?}");
        assert!((0.0..=1.0).contains(&got));
    }
}

fn models(seed: u64, hyper: bool) -> Models {
    let mut m = Models::new(ModelConfig::desk(), seed).unwrap();
    if hyper {
        let cfg = HyperModelConfig::desk(&ModelConfig::desk(), PeftConfig::prefix(PeftKind::PrefixFlat, 4));
        m.add_hyper(cfg, seed).unwrap();
        // non-zero heads so the generated prefix depends on the shots
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = m
            .store
            .iter()
            .filter(|(_, p)| p.name.starts_with("hyper.head.") && p.name.ends_with(".w2"))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let shape = m.store.value(id).shape().to_vec();
            m.store.set(id, Tensor::randn(&shape, 0.3, &mut rng)).unwrap();
        }
    }
    m
}

#[test]
fn rank_classify_rules() {
    let m = models(0, false);
    let input = tokenize("some input");
    let opts = vec![tokenize("alpha"), tokenize("be"), tokenize("gamma ray")];
    assert_eq!(rank_classify(&m.store, &m.down, &input, &opts[..1], Adapter::None).unwrap(), 0);
    assert!(rank_classify(&m.store, &m.down, &input, &[], Adapter::None).is_err());

    let dup = vec![opts[1].clone(), opts[0].clone(), opts[0].clone(), opts[1].clone()];
    let (best, scores) = option_scores(&m.store, &m.down, &input, &dup, Adapter::None).unwrap();
    assert_eq!(scores[1], scores[2]);
    assert_eq!(scores[0], scores[3]);
    assert!(best == 0 || best == 1);

    let (best, scores) = option_scores(&m.store, &m.down, &input, &opts, Adapter::None).unwrap();
    for perm in [[2, 0, 1], [1, 2, 0], [2, 1, 0]] {
        let permuted: Vec<_> = perm.iter().map(|&i| opts[i].clone()).collect();
        let (b, s) = option_scores(&m.store, &m.down, &input, &permuted, Adapter::None).unwrap();
        assert_eq!(perm[b], best);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(s[k].to_bits(), scores[i].to_bits());
        }
    }
}

#[test]
fn greedy_generation_is_bounded_and_deterministic() {
    let m = models(1, false);
    let input = tokenize("hello");
    for max_len in [0, 1, 5, 20, 100] {
        let a = generate_greedy(&m.store, &m.down, &input, Adapter::None, max_len).unwrap();
        let b = generate_greedy(&m.store, &m.down, &input, Adapter::None, max_len).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= max_len.min(m.down.config.max_tgt_len - 1));
    }
}

#[test]
fn cached_adapter_matches_per_example_regeneration() {
    let suite = synth_tasks(3);
    let m = models(2, true);
    let cfg = TrainConfig::desk();
    let ctx = m.eval_context(&cfg);
    let hyper = m.hyper.as_ref().unwrap();
    let picked: Vec<&Task> = suite.all().filter(|t| ["copy", "parity", "label_0", "novel_label_1"].contains(&t.name.as_str())).collect();
    assert_eq!(picked.len(), 4);
    for task in picked {
        let row = eval_task(&ctx, task, AdapterSource::HyperGenerated, 16, 5).unwrap();
        assert_eq!(row.n, 20);
        assert!((0.0..=1.0).contains(&row.value));
        let shots = hyperpeft::eval::eval_shots(task, 16, 5);
        let tokens = hyper.format(&shots).unwrap();
        let (value, preds) =
            eval_with_adapter(&ctx, task, Adapter::Generate { hyper, tokens: &tokens }, Some(&shots)).unwrap();
        assert_eq!(preds, row.predictions, "{}", task.name);
        assert_eq!(value.to_bits(), row.value.to_bits());
    }
}

#[test]
fn eval_dispatches_on_metric() {
    let m = models(4, false);
    let cfg = TrainConfig::desk();
    let ctx = m.eval_context(&cfg);
    let mk = |opts: bool| {
        let ex = |i: usize| {
            let e = TaskExample::new(format!("in{i}"), "yes");
            if opts {
                e.with_options(vec!["yes".into(), "no".into()])
            } else {
                e
            }
        };
        Task {
            name: "t".into(),
            train: (0..4).map(ex).collect(),
            test: (4..8).map(ex).collect(),
            metric: if opts { Metric::Accuracy } else { Metric::RougeL },
        }
    };
    let row = eval_task(&ctx, &mk(true), AdapterSource::None, 2, 0).unwrap();
    assert!(row.predictions.iter().all(|p| p == "yes" || p == "no"));
    let row = eval_task(&ctx, &mk(false), AdapterSource::None, 2, 0).unwrap();
    assert_eq!(row.predictions.len(), 4);
    assert!(eval_task(&ctx, &mk(true), AdapterSource::SharedPeft, 2, 0).is_err());
}

fn row(task: &str, value: f64) -> EvalRow {
    EvalRow {
        task: task.into(),
        metric: Metric::Accuracy,
        value,
        n: 20,
        adapter: AdapterSource::HyperGenerated,
        seed: 3,
        predictions: vec![],
    }
}

#[test]
fn report_layout_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let report = EvalReport {
        rows: vec![row("a", 0.5), row("b", 0.25), row("c", 1.0)],
        config: serde_json::json!({"k": 1}),
        seeds: vec![3],
    };
    let path = dir.path().join("r.csv");
    write_report(&report, &path).unwrap();
    let csv = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "task,metric,value,n,adapter,seed");
    assert_eq!(lines[1], "a,accuracy,0.500000,20,hyper_generated,3");
    assert_eq!(lines[4], "AVG,accuracy,0.583333,60,hyper_generated,3");
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(sidecar["config"]["k"], 1);
    assert_eq!(sidecar["seeds"][0], 3);

    let path2 = dir.path().join("r2.csv");
    write_report(&report, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}
