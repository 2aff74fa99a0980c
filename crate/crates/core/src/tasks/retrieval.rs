use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::layout::{GoldPositions, PromptLayout};
use crate::tasks::vocab::{derive_seed, tokens, TaskVocab};

/// A key–value lookup over `n` documents `[DOC, key, value]`; the question
/// `[QUERY, key]` names exactly one of them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalInstance {
    pub id: u64,
    pub docs: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    /// 1-based index of the gold document in `docs`.
    pub gold_index: usize,
    pub seed: u64,
}

/// Draws `n_docs` distinct keys and distinct values uniformly at random.
pub fn make_retrieval_instance(id: u64, n_docs: usize, seed: u64, vocab: &TaskVocab) -> Result<RetrievalInstance> {
    if n_docs < 2 {
        return Err(Error::Capacity(format!("need at least 2 documents, got {n_docs}")));
    }
    let (keys, values) = (vocab.keys(), vocab.values());
    if n_docs > keys.len() || n_docs > values.len() {
        return Err(Error::Capacity(format!(
            "{n_docs} documents but only {} keys / {} values",
            keys.len(),
            values.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ks = rand::seq::index::sample(&mut rng, keys.len(), n_docs);
    let vs = rand::seq::index::sample(&mut rng, values.len(), n_docs);
    let docs: Vec<Vec<usize>> = ks
        .iter()
        .zip(vs.iter())
        .map(|(k, v)| vec![tokens::DOC, keys.start + k, values.start + v])
        .collect();
    let gold = rng.gen_range(0..n_docs);
    Ok(RetrievalInstance {
        id,
        question: vec![tokens::QUERY, docs[gold][1]],
        answer: vec![docs[gold][2]],
        gold_index: gold + 1,
        docs,
        seed,
    })
}

impl RetrievalInstance {
    pub fn n_docs(&self) -> usize {
        self.docs.len()
    }

    /// Reference response `[ANS, key, value, EOS]`.
    pub fn gold_response(&self) -> Vec<usize> {
        let mut r = vec![tokens::ANS, self.question[1]];
        r.extend_from_slice(&self.answer);
        r.push(tokens::EOS);
        r
    }

    /// Realizes the prompt with the gold document at 1-based
    /// `gold_position`. Distractors follow a permutation seeded by
    /// `(instance seed, id, gold_position)`.
    pub fn arrange(&self, gold_position: usize) -> Result<PromptLayout> {
        let n = self.n_docs();
        if !(1..=n).contains(&gold_position) {
            return Err(Error::Position(format!("gold position {gold_position} outside 1..={n}")));
        }
        let gold = &self.docs[self.gold_index - 1];
        let mut distractors: Vec<&Vec<usize>> = self
            .docs
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.gold_index - 1)
            .map(|(_, d)| d)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, self.id, gold_position as u64]));
        distractors.shuffle(&mut rng);
        distractors.insert(gold_position - 1, gold);
        Ok(PromptLayout::assemble(
            &[tokens::BOS, tokens::RETRIEVE],
            &distractors,
            &self.question,
            GoldPositions::Single(gold_position),
        ))
    }
}

/// Free-function form of [`RetrievalInstance::arrange`].
pub fn arrange(instance: &RetrievalInstance, gold_position: usize) -> Result<PromptLayout> {
    instance.arrange(gold_position)
}
