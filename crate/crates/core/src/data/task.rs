use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskExample {
    pub input: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition: Option<String>,
}

impl TaskExample {
    pub fn new(input: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            target: target.into(),
            options: None,
            definition: None,
        }
    }

    pub fn with_options(mut self, options: Vec<String>) -> Self {
        self.options = Some(options);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.target.is_empty() {
            return Err(Error::Data(format!("empty target for input {:?}", self.input)));
        }
        if let Some(opts) = &self.options {
            if !opts.contains(&self.target) {
                return Err(Error::Data(format!("target {:?} not among options {opts:?}", self.target)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    RougeL,
    MacroF1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::RougeL => "rouge_l",
            Metric::MacroF1 => "macro_f1",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub name: String,
    pub train: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
    pub metric: Metric,
}

impl Task {
    /// Instruction text shared by the task, taken from the first example that
    /// carries one.
    pub fn definition(&self) -> Option<&str> {
        self.train.iter().chain(&self.test).find_map(|e| e.definition.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |e: Error| Error::Data(format!("task {}: {e}", self.name));
        let all: Vec<&TaskExample> = self.train.iter().chain(&self.test).collect();
        for ex in &all {
            ex.validate().map_err(ctx)?;
        }
        let with_options = all.iter().filter(|e| e.options.is_some()).count();
        match self.metric {
            Metric::Accuracy if with_options != all.len() => {
                return Err(ctx(Error::Data("accuracy tasks need options on every example".into())));
            }
            Metric::RougeL | Metric::MacroF1 if with_options > 0 => {
                return Err(ctx(Error::Data(format!("examples with options require accuracy, not {}", self.metric.name()))));
            }
            _ => {}
        }
        let train: HashSet<(&str, &str)> = self.train.iter().map(|e| (e.input.as_str(), e.target.as_str())).collect();
        if let Some(e) = self.test.iter().find(|e| train.contains(&(e.input.as_str(), e.target.as_str()))) {
            return Err(ctx(Error::Data(format!("example {:?} in both train and test", e.input))));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Test,
}

#[derive(Deserialize)]
struct Record {
    task: String,
    split: Split,
    input: String,
    target: String,
    #[serde(default)]
    options: Option<Vec<String>>,
    #[serde(default)]
    definition: Option<String>,
    #[serde(default)]
    metric: Option<Metric>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    task: &'a str,
    split: &'a str,
    #[serde(flatten)]
    example: &'a TaskExample,
    metric: Metric,
}

/// Reads tasks from JSONL, one example per line. Tasks appear in order of
/// first mention. Examples with options make the task an accuracy task; an
/// optional `metric` field chooses between `rouge_l` (default) and `macro_f1`
/// otherwise.
pub fn load_tasks_jsonl(path: &Path) -> Result<Vec<Task>> {
    let text = fs::read_to_string(path)?;
    let mut tasks: Vec<Task> = Vec::new();
    let mut declared: Vec<Option<Metric>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let idx = match tasks.iter().position(|t| t.name == rec.task) {
            Some(idx) => idx,
            None => {
                tasks.push(Task {
                    name: rec.task.clone(),
                    train: Vec::new(),
                    test: Vec::new(),
                    metric: Metric::RougeL,
                });
                declared.push(None);
                tasks.len() - 1
            }
        };
        if let Some(m) = rec.metric {
            match declared[idx] {
                Some(prev) if prev != m => return Err(parse_err(format!("conflicting metric for task {}", rec.task))),
                _ => declared[idx] = Some(m),
            }
        }
        let ex = TaskExample {
            input: rec.input,
            target: rec.target,
            options: rec.options,
            definition: rec.definition,
        };
        ex.validate().map_err(|e| parse_err(e.to_string()))?;
        match rec.split {
            Split::Train => tasks[idx].train.push(ex),
            Split::Test => tasks[idx].test.push(ex),
        }
    }
    for (task, declared) in tasks.iter_mut().zip(declared) {
        let has_options = task.train.iter().chain(&task.test).any(|e| e.options.is_some());
        task.metric = match (has_options, declared) {
            (true, None | Some(Metric::Accuracy)) => Metric::Accuracy,
            (true, Some(m)) => {
                return Err(Error::Data(format!("task {}: options present but metric {}", task.name, m.name())));
            }
            (false, Some(m)) => m,
            (false, None) => Metric::RougeL,
        };
        task.validate()?;
    }
    Ok(tasks)
}

pub fn write_tasks_jsonl(tasks: &[Task], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for task in tasks {
        for (split, examples) in [("train", &task.train), ("test", &task.test)] {
            for example in examples {
                let rec = RecordOut {
                    task: &task.name,
                    split,
                    example,
                    metric: task.metric,
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.push(b'\n');
            }
        }
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}
