use std::collections::HashSet;

use hyperpeft::data::vocab::{S0, S1, X, Y};
use hyperpeft::data::{
    caclm_split, format_fewshot, load_tasks_jsonl, sample_mtf_batch, stream_rng, synth_corpus, synth_tasks,
    write_tasks_jsonl, FewShotSet, Metric, SegmentLens, TaskExample,
};
use hyperpeft::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ex(i: &str, t: &str) -> TaskExample {
    TaskExample::new(i, t)
}

#[test]
fn fewshot_two_examples() {
    let set = FewShotSet::new(vec![ex("a", "b"), ex("c", "d")], None);
    assert_eq!(format_fewshot(&set, 100).unwrap(), vec![X, 97, Y, 98, X, 99, Y, 100]);
}

#[test]
fn fewshot_with_definition() {
    let set = FewShotSet::new(vec![ex("a", "b")], Some("t".into()));
    assert_eq!(format_fewshot(&set, 100).unwrap(), vec![X, 116, X, 97, Y, 98]);
}

#[test]
fn fewshot_empty_without_definition_is_error() {
    assert!(format_fewshot(&FewShotSet::default(), 10).is_err());
    let def_only = FewShotSet::new(vec![], Some("d".into()));
    assert_eq!(format_fewshot(&def_only, 10).unwrap(), vec![X, 100]);
}

#[test]
fn fewshot_truncation_drops_whole_examples_first() {
    let set = FewShotSet::new(vec![ex("aa", "bb"), ex("cc", "dd"), ex("ee", "ff")], None);
    // each example is 6 tokens
    assert_eq!(format_fewshot(&set, 13).unwrap().len(), 12);
    assert_eq!(format_fewshot(&set, 11).unwrap(), vec![X, 97, 97, Y, 98, 98]);
    // a lone example that does not fit is cut on the right
    assert_eq!(format_fewshot(&set, 4).unwrap(), vec![X, 97, 97, Y]);
    let with_def = FewShotSet::new(vec![ex("aa", "bb")], Some("zz".into()));
    assert_eq!(format_fewshot(&with_def, 5).unwrap(), vec![X, 122, 122, X, 97]);
    assert_eq!(format_fewshot(&with_def, 2).unwrap(), vec![X, 122]);
}

#[test]
fn caclm_paper_and_desk_boundaries() {
    let p = SegmentLens::paper();
    assert_eq!((p.a, p.a + p.b, p.a + p.b + p.c, p.total()), (176, 208, 336, 512));
    let d = SegmentLens::desk();
    assert_eq!((d.a, d.b, d.c, d.d, d.total()), (44, 8, 32, 44, 128));
    let window: Vec<usize> = (0..512).map(|i| i % 256).collect();
    let e = caclm_split(&window, p).unwrap();
    assert_eq!(e.downstream_input, window[176..208]);
    assert_eq!(e.target, window[208..336]);
    assert_eq!(e.hyper_input.len(), 176 + 176 + 2);
    assert!(caclm_split(&window[..511], p).is_err());
}

proptest! {
    #[test]
    fn caclm_partition(a in 0usize..40, b in 0usize..40, c in 0usize..40, d in 0usize..40, seed in any::<u64>()) {
        let lens = SegmentLens { a, b, c, d };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let window: Vec<usize> = (0..lens.total()).map(|_| rng.random_range(0..256)).collect();
        let e = caclm_split(&window, lens).unwrap();
        let a_seg = &e.hyper_input[1..1 + a];
        let d_seg = &e.hyper_input[2 + a..];
        prop_assert_eq!(e.hyper_input[0], S0);
        prop_assert_eq!(e.hyper_input[1 + a], S1);
        let mut joined = a_seg.to_vec();
        joined.extend(&e.downstream_input);
        joined.extend(&e.target);
        joined.extend(d_seg);
        prop_assert_eq!(joined, window);
    }

    #[test]
    fn fewshot_injective(a in proptest::collection::vec(("[a-z]{0,3}", "[a-z]{1,3}"), 1..4),
                         b in proptest::collection::vec(("[a-z]{0,3}", "[a-z]{1,3}"), 1..4),
                         def_a in proptest::option::of("[a-z]{1,3}"),
                         def_b in proptest::option::of("[a-z]{1,3}")) {
        let mk = |v: &Vec<(String, String)>, d: &Option<String>| {
            FewShotSet::new(v.iter().map(|(i, t)| ex(i, t)).collect(), d.clone())
        };
        let (sa, sb) = (mk(&a, &def_a), mk(&b, &def_b));
        let (ta, tb) = (format_fewshot(&sa, 1000).unwrap(), format_fewshot(&sb, 1000).unwrap());
        prop_assert_eq!(ta == tb, sa == sb);
    }
}

#[test]
fn mtf_target_never_in_shots() {
    let suite = synth_tasks(3);
    let tasks = suite.held_in;
    for step in 0..10_000u64 {
        let mut rng = stream_rng(11, step);
        let s = sample_mtf_batch(&tasks, 16, &mut rng).unwrap();
        assert!(s.shots.len() <= 16);
        assert!(!s.shots.examples.contains(&s.target));
        let distinct: HashSet<&str> = s.shots.examples.iter().map(|e| e.input.as_str()).collect();
        assert_eq!(distinct.len(), s.shots.len());
    }
}

#[test]
fn mtf_single_example_tasks() {
    let mut single = synth_tasks(0).held_in[0].clone();
    single.train.truncate(1);
    let mut rng = stream_rng(0, 0);
    assert!(sample_mtf_batch(std::slice::from_ref(&single), 16, &mut rng).is_err());
    single.train[0].definition = Some("copy the input".into());
    let s = sample_mtf_batch(std::slice::from_ref(&single), 16, &mut rng).unwrap();
    assert_eq!(s.shots.len(), 0);
    assert_eq!(s.shots.definition.as_deref(), Some("copy the input"));
}

#[test]
fn stream_rng_is_keyed() {
    let a: u64 = stream_rng(1, 5).random();
    assert_eq!(a, stream_rng(1, 5).random::<u64>());
    assert_ne!(a, stream_rng(1, 6).random::<u64>());
}

#[test]
fn jsonl_missing_target_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    std::fs::write(
        &path,
        "{\"task\":\"a\",\"split\":\"train\",\"input\":\"x\",\"target\":\"y\"}\n{\"task\":\"a\",\"split\":\"test\",\"input\":\"z\"}\n",
    )
    .unwrap();
    match load_tasks_jsonl(&path) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("target"), "{msg}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn jsonl_options_force_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    std::fs::write(
        &path,
        "{\"task\":\"a\",\"split\":\"train\",\"input\":\"x\",\"target\":\"y\",\"options\":[\"y\",\"n\"],\"extra\":1}\n\
         {\"task\":\"a\",\"split\":\"test\",\"input\":\"w\",\"target\":\"n\",\"options\":[\"y\",\"n\"]}\n",
    )
    .unwrap();
    let tasks = load_tasks_jsonl(&path).unwrap();
    assert_eq!(tasks[0].metric, Metric::Accuracy);

    std::fs::write(
        &path,
        "{\"task\":\"a\",\"split\":\"train\",\"input\":\"x\",\"target\":\"y\",\"options\":[\"y\",\"n\"],\"metric\":\"rouge_l\"}\n",
    )
    .unwrap();
    assert!(load_tasks_jsonl(&path).is_err());

    std::fs::write(&path, "{\"task\":\"a\",\"split\":\"train\",\"input\":\"x\",\"target\":\"q\",\"options\":[\"y\"]}\n").unwrap();
    assert!(matches!(load_tasks_jsonl(&path), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("suite.jsonl");
    let tasks: Vec<_> = synth_tasks(9).all().cloned().collect();
    write_tasks_jsonl(&tasks, &path).unwrap();
    assert_eq!(load_tasks_jsonl(&path).unwrap(), tasks);
}

#[test]
fn synth_corpus_properties() {
    let c = synth_corpus(4, 20_000);
    assert_eq!(c, synth_corpus(4, 20_000));
    assert_ne!(c.tokens, synth_corpus(5, 20_000).tokens);
    assert!(c.tokens.len() >= 20_000);
    assert!(c.tokens.iter().all(|&t| t < 256));
    let lens = SegmentLens::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..500 {
        let w = c.sample_window(lens.total(), &mut rng).unwrap();
        let start = w.as_ptr() as usize - c.tokens.as_ptr() as usize;
        let start = start / std::mem::size_of::<usize>();
        let doc = c.docs.iter().position(|&(s, e)| s <= start && start < e).unwrap();
        let key: Vec<usize> = c.keys[doc].bytes().map(usize::from).collect();
        let e = caclm_split(w, lens).unwrap();
        let has = |seg: &[usize]| seg.windows(key.len()).any(|s| s == key.as_slice());
        assert!(has(&e.hyper_input[1..1 + lens.a]), "key missing from A");
        assert!(has(&e.target), "key missing from C");
    }
}

#[test]
fn synth_tasks_properties() {
    let s = synth_tasks(1);
    assert_eq!(s, synth_tasks(1));
    assert_eq!((s.held_in.len(), s.held_out.len()), (12, 4));
    let names_in: HashSet<_> = s.held_in.iter().map(|t| &t.name).collect();
    assert!(s.held_out.iter().all(|t| !names_in.contains(&t.name)));
    for t in s.all() {
        t.validate().unwrap();
        assert_eq!(t.test.len(), 20);
        assert!(t.train.len() >= 16);
        if t.metric == Metric::Accuracy {
            assert!(t.train.iter().chain(&t.test).all(|e| e.options.as_ref().unwrap().contains(&e.target)));
        }
    }
    for t in &s.held_out {
        assert_eq!(t.metric, Metric::Accuracy);
        let label = &t.test[0].target;
        assert!(s.held_in.iter().flat_map(|h| h.train.iter()).all(|e| &e.target != label));
    }
}
