//! Deterministic stand-ins for a web-text corpus and a multi-task suite.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::task::{Metric, Task, TaskExample};
use super::vocab::tokenize;

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvwz";
const VOWELS: &[u8] = b"aeiou";

fn pseudo_word<R: Rng>(rng: &mut R, syllables: usize) -> String {
    let mut w = String::with_capacity(syllables * 2);
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap() as char);
        w.push(*VOWELS.choose(rng).unwrap() as char);
    }
    w
}

/// `n` distinct pseudo-words, none of which is in `taken`.
fn word_pool<R: Rng>(rng: &mut R, n: usize, syllables: (usize, usize), taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let n = rng.random_range(syllables.0..=syllables.1);
        let w = pseudo_word(rng, n);
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// A token stream made of documents, with each document's byte span.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub docs: Vec<(usize, usize)>,
    /// Key string of each document.
    pub keys: Vec<String>,
}

impl Corpus {
    /// A window of `len` tokens lying inside a single document.
    pub fn sample_window<R: Rng>(&self, len: usize, rng: &mut R) -> Option<&[usize]> {
        let fits: Vec<usize> = (0..self.docs.len()).filter(|&i| self.docs[i].1 - self.docs[i].0 >= len).collect();
        let &doc = fits.choose(rng)?;
        let (start, end) = self.docs[doc];
        let off = rng.random_range(start..=end - len);
        Some(&self.tokens[off..off + len])
    }
}

/// Documents of space-separated words where every third word is the
/// document's key and the rest come from a small per-document topic set, so
/// any stretch of about 20 bytes contains the key in full.
pub fn synth_corpus(seed: u64, n_tokens: usize) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken = HashSet::new();
    let lexicon = word_pool(&mut rng, 64, (1, 3), &mut taken);
    let mut tokens = Vec::with_capacity(n_tokens + 1200);
    let mut docs = Vec::new();
    let mut keys = Vec::new();
    while tokens.len() < n_tokens {
        let key = pseudo_word(&mut rng, 3);
        let topic: Vec<&String> = lexicon.choose_multiple(&mut rng, 4).collect();
        let target_len = rng.random_range(600..1200);
        let mut text = String::new();
        let mut i = 0usize;
        while text.len() < target_len {
            if i % 3 == 2 {
                text.push_str(&key);
            } else {
                text.push_str(topic.choose(&mut rng).unwrap());
            }
            text.push(if rng.random_bool(0.1) { '.' } else { ' ' });
            i += 1;
        }
        text.push('\n');
        let start = tokens.len();
        tokens.extend(tokenize(&text));
        docs.push((start, tokens.len()));
        keys.push(key);
    }
    Corpus { tokens, docs, keys }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub held_in: Vec<Task>,
    pub held_out: Vec<Task>,
}

impl TaskSuite {
    pub fn all(&self) -> impl Iterator<Item = &Task> {
        self.held_in.iter().chain(&self.held_out)
    }
}

const TRAIN_PER_TASK: usize = 64;
const TEST_PER_TASK: usize = 20;

struct Builder<'a> {
    rng: ChaCha8Rng,
    fillers: &'a [String],
}

impl Builder<'_> {
    fn phrase(&mut self, words: (usize, usize)) -> String {
        let n = self.rng.random_range(words.0..=words.1);
        let picked: Vec<&str> = (0..n).map(|_| self.fillers.choose(&mut self.rng).unwrap().as_str()).collect();
        picked.join(" ")
    }

    /// Draws examples with distinct inputs and splits them into train/test.
    fn task(&mut self, name: &str, metric: Metric, mut make: impl FnMut(&mut Self) -> TaskExample) -> Task {
        let mut seen = HashSet::new();
        let mut examples = Vec::new();
        let mut attempts = 0;
        while examples.len() < TRAIN_PER_TASK + TEST_PER_TASK && attempts < 100_000 {
            attempts += 1;
            let ex = make(self);
            if seen.insert(ex.input.clone()) {
                examples.push(ex);
            }
        }
        let test = examples.split_off(examples.len().saturating_sub(TEST_PER_TASK));
        Task {
            name: name.to_string(),
            train: examples,
            test,
            metric,
        }
    }

    /// Every target is the task's label word and the distractors are the
    /// labels of sibling tasks, so each option word is right exactly as often
    /// as it is wrong across the group and only the shots identify the answer.
    fn keyword_task(&mut self, name: &str, label: &str, group: &[String], n_options: usize) -> Task {
        let label = label.to_string();
        let others: Vec<String> = group.iter().filter(|w| **w != label).cloned().collect();
        self.task(name, Metric::Accuracy, |b| {
            let mut options: Vec<String> = others.choose_multiple(&mut b.rng, n_options - 1).cloned().collect();
            options.push(label.clone());
            options.shuffle(&mut b.rng);
            TaskExample::new(b.phrase((1, 3)), label.clone()).with_options(options)
        })
    }
}

/// Twelve held-in tasks (string transforms, a parity label, and label-word
/// tasks) and four held-out label-word tasks whose label words never occur in
/// the held-in suite.
pub fn synth_tasks(seed: u64) -> TaskSuite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken: HashSet<String> = ["even", "odd"].iter().map(|s| s.to_string()).collect();
    let fillers = word_pool(&mut rng, 48, (1, 2), &mut taken);
    let held_in_labels = word_pool(&mut rng, 6, (2, 3), &mut taken);
    let held_out_labels = word_pool(&mut rng, 4, (2, 3), &mut taken);
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7a5c),
        fillers: &fillers,
    };

    let mut held_in = vec![
        b.task("copy", Metric::RougeL, |b| {
            let p = b.phrase((1, 2));
            TaskExample::new(p.clone(), p)
        }),
        b.task("reverse", Metric::RougeL, |b| {
            let p = b.phrase((1, 1));
            TaskExample::new(p.clone(), p.chars().rev().collect::<String>())
        }),
        b.task("upper", Metric::RougeL, |b| {
            let p = b.phrase((1, 2));
            TaskExample::new(p.clone(), p.to_uppercase())
        }),
        b.task("last_char", Metric::MacroF1, |b| {
            let p = b.phrase((1, 2));
            let last = p.chars().last().unwrap().to_string();
            TaskExample::new(p, last)
        }),
        b.task("parity", Metric::Accuracy, |b| {
            let p = b.phrase((1, 2));
            let label = if p.len() % 2 == 0 { "even" } else { "odd" };
            TaskExample::new(p, label).with_options(vec!["even".into(), "odd".into()])
        }),
        b.task("shift", Metric::RougeL, |b| {
            let p = b.phrase((1, 1));
            let shifted = p.bytes().map(|c| (b'a' + (c - b'a' + 1) % 26) as char).collect::<String>();
            TaskExample::new(p, shifted)
        }),
    ];
    for (i, label) in held_in_labels.iter().enumerate() {
        held_in.push(b.keyword_task(&format!("label_{i}"), label, &held_in_labels, 2 + i % 2));
    }
    let held_out = held_out_labels
        .iter()
        .enumerate()
        .map(|(i, label)| b.keyword_task(&format!("novel_label_{i}"), label, &held_out_labels, 2 + i % 2))
        .collect();
    TaskSuite { held_in, held_out }
}
