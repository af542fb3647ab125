use hyperpeft::data::{FewShotSet, TaskExample};
use hyperpeft::hyper::{HyperModel, HyperModelConfig};
use hyperpeft::model::{EncoderDecoder, ModelConfig, PeftVars};
use hyperpeft::peft::{init_peft, InitScheme, PeftConfig, PeftKind, PREFIX_HEADS};
use hyperpeft::tensor::grad_check_store;
use hyperpeft::{Grads, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(target: PeftConfig, seed: u64) -> (ParamStore, EncoderDecoder, HyperModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let down_cfg = ModelConfig::desk();
    let down = EncoderDecoder::new_lm(down_cfg.clone(), &mut store, "down.", &mut rng).unwrap();
    down.freeze(&mut store, true);
    let hyper = HyperModel::new(HyperModelConfig::desk(&down_cfg, target), &mut store, &mut rng).unwrap();
    (store, down, hyper)
}

fn shots() -> FewShotSet {
    FewShotSet::new(
        vec![TaskExample::new("abc", "cba"), TaskExample::new("hello", "olleh"), TaskExample::new("xy", "yx")],
        None,
    )
}

/// Gives every final head layer random values so generated parameters are
/// generic rather than the zero-initialized starting point.
fn randomize_heads(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.name.starts_with("hyper.head.") && (p.name.ends_with(".w2") || p.name.ends_with(".b2")))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set(id, Tensor::randn(&shape, 0.3, &mut rng)).unwrap();
    }
}

#[test]
fn encode_shapes() {
    let (store, _, hyper) = setup(PeftConfig::prefix(PeftKind::PrefixFlat, 8), 0);
    let tokens = hyper.format(&shots()).unwrap();
    let mut g = Graph::new(&store);
    let h = hyper.hyper_encode(&mut g, &tokens).unwrap();
    assert_eq!(g.shape(h), &[16, 32]);
    assert!(hyper.hyper_encode(&mut g, &[]).is_err());

    let (store, _, hyper) = setup(PeftConfig::lora(4), 0);
    let mut g = Graph::new(&store);
    let h = hyper.hyper_encode(&mut g, &tokens).unwrap();
    assert_eq!(g.shape(h), &[6, 32]);
}

#[test]
fn generation_is_deterministic_and_shaped() {
    let (mut store, _, hyper) = setup(PeftConfig::prefix(PeftKind::PrefixFlat, 8), 1);
    let zero = hyper.generate_params(&store, &shots(), PeftKind::PrefixFlat).unwrap();
    assert_eq!(zero.get("prefix").unwrap().shape(), &[2, 2, 2, 8, 32]);
    assert!(zero.get("prefix").unwrap().data().iter().all(|&v| v == 0.0));
    randomize_heads(&mut store, 2);
    let a = hyper.generate_params(&store, &shots(), PeftKind::PrefixFlat).unwrap();
    let b = hyper.generate_params(&store, &shots(), PeftKind::PrefixFlat).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(a.get("prefix").unwrap().data().iter().any(|&v| v != 0.0));

    let mut reordered = shots();
    reordered.examples.reverse();
    let c = hyper.generate_params(&store, &reordered, PeftKind::PrefixFlat).unwrap();
    assert!(!c.bitwise_eq(&a), "order of shots is expected to matter");

    let mlp = hyper.generate_params(&store, &shots(), PeftKind::PrefixMlp).unwrap();
    let flat = hyperpeft::peft::flatten_reparam(&mlp).unwrap();
    assert!(flat.get("prefix").unwrap().max_abs_diff(a.get("prefix").unwrap()) < 1e-12);
    assert!(hyper.generate_params(&store, &shots(), PeftKind::Lora).is_err());
}

#[test]
fn lora_generation_layout() {
    let (mut store, _, hyper) = setup(PeftConfig::lora(4), 3);
    let p = hyper.generate_params(&store, &shots(), PeftKind::Lora).unwrap();
    let (mut pairs, mut gates) = (0, 0);
    for (name, t) in p.tensors() {
        if name.ends_with(".up") {
            pairs += 1;
            assert_eq!(t.shape(), &[4, 32]);
            assert!(t.data().iter().all(|&v| v == 0.0), "up starts at zero");
        } else if name.ends_with(".raw_gate") {
            gates += 1;
            assert_eq!(t.shape(), &[2]);
        }
    }
    assert_eq!((pairs, gates), (6 * 2, 6));

    // zero raw gates make any generated adapter a no-op
    randomize_heads(&mut store, 4);
    let gate_ids: Vec<_> = store.iter().filter(|(_, q)| q.name.ends_with("raw_gate")).map(|(id, _)| id).collect();
    for id in gate_ids {
        store.set(id, Tensor::zeros(&[2])).unwrap();
    }
    let p = hyper.generate_params(&store, &shots(), PeftKind::Lora).unwrap();
    let down = EncoderDecoder::new_lm(ModelConfig::desk(), &mut ParamStore::new(), "down.", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let run = |with: bool| {
        let mut g = Graph::new(&store);
        let vars = if with { p.inject(&mut g).unwrap() } else { PeftVars::none(2) };
        let enc = down.encode(&mut g, &[5, 6, 7], &vars).unwrap();
        let out = down.decode(&mut g, &[1, 2], enc, &vars, true).unwrap();
        g.value(out).clone()
    };
    assert!(run(true).bitwise_eq(&run(false)));
}

#[test]
fn generated_params_ignore_the_target_example() {
    let (mut store, down, hyper) = setup(PeftConfig::prefix(PeftKind::PrefixFlat, 4), 5);
    randomize_heads(&mut store, 6);
    let tokens = hyper.format(&shots()).unwrap();
    let cached = hyper.generate_params_from_tokens(&store, &tokens, PeftKind::PrefixFlat).unwrap();
    for (src, tgt) in [(&[10usize, 11][..], &[12usize][..]), (&[13, 14, 15][..], &[16, 17][..])] {
        let mut g = Graph::new(&store);
        let vars = cached.inject(&mut g).unwrap();
        let a = down.seq_loss(&mut g, src, tgt, &vars).unwrap();
        let fresh = hyper.generate(&mut g, &tokens).unwrap();
        let b = down.seq_loss(&mut g, src, tgt, &fresh).unwrap();
        assert_eq!(g.value(a).item().unwrap().to_bits(), g.value(b).item().unwrap().to_bits());
    }
}

#[test]
fn gradients_reach_every_hyper_parameter() {
    for target in [PeftConfig::prefix(PeftKind::PrefixFlat, 4), PeftConfig::lora(2)] {
        let (mut store, down, hyper) = setup(target, 7);
        randomize_heads(&mut store, 12);
        let mut nonzero = std::collections::HashSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let tokens: Vec<usize> = (0..30).map(|_| rng.random_range(0..256)).collect();
            let src: Vec<usize> = (0..8).map(|_| rng.random_range(0..256)).collect();
            let tgt: Vec<usize> = (0..6).map(|_| rng.random_range(0..256)).collect();
            let mut g = Graph::new(&store).without_frozen_grads();
            let vars = hyper.generate(&mut g, &tokens).unwrap();
            let loss = down.seq_loss(&mut g, &src, &tgt, &vars).unwrap();
            let mut grads = Grads::new(&store);
            g.backward(loss, &mut grads).unwrap();
            for (id, t) in grads.iter() {
                if t.data().iter().any(|&v| v != 0.0) {
                    nonzero.insert(id);
                }
            }
        }
        for (id, p) in store.iter().filter(|(_, p)| p.name.starts_with("hyper.")) {
            assert!(nonzero.contains(&id), "no gradient for {}", p.name);
        }
    }
}

#[test]
fn zero_heads_still_receive_gradient() {
    let (store, down, hyper) = setup(PeftConfig::prefix(PeftKind::PrefixFlat, 4), 13);
    let tokens = hyper.format(&shots()).unwrap();
    let mut g = Graph::new(&store).without_frozen_grads();
    let vars = hyper.generate(&mut g, &tokens).unwrap();
    let loss = down.seq_loss(&mut g, &[1, 2, 3], &[4, 5], &vars).unwrap();
    let mut grads = Grads::new(&store);
    g.backward(loss, &mut grads).unwrap();
    for head in PREFIX_HEADS {
        let id = store.id(&format!("hyper.head.{head}.w2")).unwrap();
        assert!(grads.get(id).unwrap().data().iter().any(|&v| v != 0.0), "{head}");
    }
}

#[test]
fn full_pipeline_gradcheck() {
    for (i, target) in [PeftConfig::prefix(PeftKind::PrefixFlat, 4), PeftConfig::lora(2)].into_iter().enumerate() {
        let (mut store, down, hyper) = setup(target, 9 + i as u64);
        randomize_heads(&mut store, 10);
        let tokens = hyper.format(&shots()).unwrap();
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with("hyper.")).map(|(id, _)| id).collect();
        let f = |g: &mut Graph| {
            let vars = hyper.generate(g, &tokens)?;
            down.seq_loss(g, &[40, 41, 42, 43], &[50, 51, 52], &vars)
        };
        let r = grad_check_store(&store, &ids, f, 1e-5, 100, 3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}

#[test]
fn hyper_init_matches_config() {
    let (store, _, hyper) = setup(PeftConfig::prefix(PeftKind::PrefixFlat, 8), 11);
    let set = FewShotSet::new((0..16).map(|i| TaskExample::new(format!("in{i}"), format!("out{i}"))).collect(), None);
    for kind in [PeftKind::PrefixFlat, PeftKind::PrefixMlp] {
        let c = PeftConfig::prefix(kind, 8);
        let p = init_peft(&c, &ModelConfig::desk(), InitScheme::Hyper { model: &hyper, store: &store, shots: &set }, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.kind(), kind);
    }
    let mlp = hyper.generate_params(&store, &set, PeftKind::PrefixMlp).unwrap();
    assert_eq!(mlp.get("prefix_mlp.emb").unwrap().shape(), &[16, 32]);
    for head in PREFIX_HEADS {
        assert_eq!(mlp.get(&format!("prefix_mlp.{head}.w2")).unwrap().shape(), &[32, 64]);
    }
    let err = init_peft(&PeftConfig::lora(4), &ModelConfig::desk(), InitScheme::Hyper { model: &hyper, store: &store, shots: &set }, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(err, Err(hyperpeft::Error::Config { .. })));
}
