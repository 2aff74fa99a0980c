//! JSONL dataset files: one instance per line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{ReasoningInstance, RetrievalInstance};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Instance {
    Retrieval(RetrievalInstance),
    Reasoning(ReasoningInstance),
}

impl Instance {
    pub fn id(&self) -> u64 {
        match self {
            Instance::Retrieval(x) => x.id,
            Instance::Reasoning(x) => x.id,
        }
    }
}

pub fn to_jsonl(instances: &[Instance]) -> Result<String> {
    let mut out = String::new();
    for x in instances {
        out.push_str(&serde_json::to_string(x)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, instances: &[Instance]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(instances)?.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Instance>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn retrieval_only(instances: Vec<Instance>) -> Result<Vec<RetrievalInstance>> {
    instances
        .into_iter()
        .map(|x| match x {
            Instance::Retrieval(r) => Ok(r),
            Instance::Reasoning(r) => Err(Error::Config(format!(
                "instance {} is a reasoning instance, expected retrieval",
                r.id
            ))),
        })
        .collect()
}

pub fn reasoning_only(instances: Vec<Instance>) -> Result<Vec<ReasoningInstance>> {
    instances
        .into_iter()
        .map(|x| match x {
            Instance::Reasoning(r) => Ok(r),
            Instance::Retrieval(r) => Err(Error::Config(format!(
                "instance {} is a retrieval instance, expected reasoning",
                r.id
            ))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_reasoning_instance, make_retrieval_instance, TaskVocab};

    #[test]
    fn line_format_carries_kind_and_gold_fields() {
        let v = TaskVocab::new(64).unwrap();
        let r = Instance::Retrieval(make_retrieval_instance(0, 3, 1, &v).unwrap());
        let line = serde_json::to_value(&r).unwrap();
        assert_eq!(line["kind"], "retrieval");
        for key in ["id", "docs", "question", "answer", "gold_index", "seed"] {
            assert!(line.get(key).is_some(), "{key}");
        }
        let q = Instance::Reasoning(make_reasoning_instance(1, 3, 1, &v).unwrap());
        let line = serde_json::to_value(&q).unwrap();
        assert_eq!(line["kind"], "reasoning");
        assert!(line.get("pre_index").is_some() && line.get("post_index").is_some());
    }
}
