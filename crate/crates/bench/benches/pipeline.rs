use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hyperpeft::data::{synth_tasks, vocab::tokenize};
use hyperpeft::eval::eval_shots;
use hyperpeft::hyper::HyperModelConfig;
use hyperpeft::model::{ModelConfig, PeftVars};
use hyperpeft::peft::{PeftConfig, PeftKind};
use hyperpeft::train::Models;
use hyperpeft::{Grads, Graph};

fn models(target: PeftConfig) -> Models {
    let mut m = Models::new(ModelConfig::desk(), 0).unwrap();
    let mut hyper = HyperModelConfig::desk(&ModelConfig::desk(), target);
    hyper.backbone.max_src_len = 128;
    m.add_hyper(hyper, 0).unwrap();
    m
}

fn downstream(c: &mut Criterion) {
    let m = models(PeftConfig::prefix(PeftKind::PrefixFlat, 8));
    let src = tokenize("the quick brown fox jumps over the lazy dog");
    let tgt = tokenize("lazy dog");
    let n_layers = m.down.config.n_layers;
    c.bench_function("downstream forward", |b| {
        b.iter(|| {
            let mut g = Graph::new(&m.store).without_frozen_grads();
            let loss = m.down.seq_loss(&mut g, black_box(&src), &tgt, &PeftVars::none(n_layers)).unwrap();
            g.value(loss).item().unwrap()
        })
    });
    c.bench_function("downstream forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new(&m.store);
            let loss = m.down.seq_loss(&mut g, black_box(&src), &tgt, &PeftVars::none(n_layers)).unwrap();
            let mut grads = Grads::new(&m.store);
            g.backward(loss, &mut grads).unwrap();
            grads
        })
    });
}

fn hypermodel(c: &mut Criterion) {
    let suite = synth_tasks(0);
    let shots = eval_shots(&suite.held_out[0], 16, 0);
    for (label, target, kind) in [
        ("prefix", PeftConfig::prefix(PeftKind::PrefixFlat, 8), PeftKind::PrefixFlat),
        ("lora", PeftConfig::lora(4), PeftKind::Lora),
    ] {
        let m = models(target);
        let hyper = m.hyper.as_ref().unwrap();
        c.bench_function(&format!("generate {label} from 16 shots"), |b| {
            b.iter(|| hyper.generate_params(&m.store, black_box(&shots), kind).unwrap())
        });
        let tokens = hyper.format(&shots).unwrap();
        let (src, tgt) = (tokenize("some input"), tokenize("out"));
        c.bench_function(&format!("{label} pipeline forward+backward"), |b| {
            b.iter(|| {
                let mut g = Graph::new(&m.store);
                let vars = hyper.generate(&mut g, black_box(&tokens)).unwrap();
                let loss = m.down.seq_loss(&mut g, &src, &tgt, &vars).unwrap();
                let mut grads = Grads::new(&m.store);
                g.backward(loss, &mut grads).unwrap();
                grads
            })
        });
    }
}

criterion_group!(benches, downstream, hypermodel);
criterion_main!(benches);
