use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::layout::{GoldPositions, PromptLayout};
use crate::tasks::vocab::{derive_seed, tokens, TaskVocab};

/// Two-hop chain `a → b → c` split across a first-hop document
/// `[DOC, a, b]` and a second-hop document `[DOC, b, c]`, hidden among
/// distractor facts over unrelated entities.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningInstance {
    pub id: u64,
    pub docs: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    pub hop1_fact: Vec<usize>,
    pub hop2_fact: Vec<usize>,
    pub answer: Vec<usize>,
    /// 1-based indices of the hop documents in `docs`.
    pub pre_index: usize,
    pub post_index: usize,
    pub seed: u64,
}

pub fn make_reasoning_instance(id: u64, n_docs: usize, seed: u64, vocab: &TaskVocab) -> Result<ReasoningInstance> {
    if n_docs < 2 {
        return Err(Error::Capacity(format!("need at least 2 documents, got {n_docs}")));
    }
    let ents = vocab.entities();
    let needed = 2 * n_docs - 1;
    if needed > ents.len() {
        return Err(Error::Capacity(format!(
            "{n_docs} documents need {needed} entities, vocabulary has {}",
            ents.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<usize> = rand::seq::index::sample(&mut rng, ents.len(), needed)
        .iter()
        .map(|i| ents.start + i)
        .collect();
    let (a, b, c) = (picked[0], picked[1], picked[2]);
    let hop1 = vec![tokens::DOC, a, b];
    let hop2 = vec![tokens::DOC, b, c];
    let mut distractors: Vec<Vec<usize>> = picked[3..]
        .chunks(2)
        .map(|p| vec![tokens::DOC, p[0], p[1]])
        .collect();
    let pre = rng.gen_range(0..n_docs);
    let post = loop {
        let j = rng.gen_range(0..n_docs);
        if j != pre {
            break j;
        }
    };
    let mut docs = Vec::with_capacity(n_docs);
    for slot in 0..n_docs {
        if slot == pre {
            docs.push(hop1.clone());
        } else if slot == post {
            docs.push(hop2.clone());
        } else {
            docs.push(distractors.pop().expect("enough distractors"));
        }
    }
    Ok(ReasoningInstance {
        id,
        docs,
        question: vec![tokens::QUERY, a],
        hop1_fact: hop1,
        hop2_fact: hop2,
        answer: vec![c],
        pre_index: pre + 1,
        post_index: post + 1,
        seed,
    })
}

impl ReasoningInstance {
    pub fn n_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn bridge(&self) -> usize {
        self.hop1_fact[2]
    }

    /// Chain-style reference trajectory
    /// `[HOP1, a, b, HOP2, b, c, ANS, c, EOS]`.
    pub fn gold_trajectory(&self) -> Vec<usize> {
        let (a, b, c) = (self.hop1_fact[1], self.hop1_fact[2], self.hop2_fact[2]);
        vec![tokens::HOP1, a, b, tokens::HOP2, b, c, tokens::ANS, c, tokens::EOS]
    }

    /// Prompt with the first-hop document at `i` and the second-hop document
    /// at `j` (both 1-based, distinct).
    pub fn arrange_two_hop(&self, i: usize, j: usize) -> Result<PromptLayout> {
        let n = self.n_docs();
        if i == j {
            return Err(Error::Position(format!("hop positions must differ, got ({i}, {j})")));
        }
        if !(1..=n).contains(&i) || !(1..=n).contains(&j) {
            return Err(Error::Position(format!("hop positions ({i}, {j}) outside 1..={n}")));
        }
        let mut rest: Vec<&Vec<usize>> = self
            .docs
            .iter()
            .enumerate()
            .filter(|(k, _)| *k + 1 != self.pre_index && *k + 1 != self.post_index)
            .map(|(_, d)| d)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, self.id, i as u64, j as u64]));
        rest.shuffle(&mut rng);
        let mut rest = rest.into_iter();
        let docs: Vec<&Vec<usize>> = (1..=n)
            .map(|slot| {
                if slot == i {
                    &self.hop1_fact
                } else if slot == j {
                    &self.hop2_fact
                } else {
                    rest.next().expect("n-2 distractors")
                }
            })
            .collect();
        Ok(PromptLayout::assemble(
            &[tokens::BOS, tokens::REASON],
            &docs,
            &self.question,
            GoldPositions::Pair(i, j),
        ))
    }

    /// The recency-advantaged layout with hops at `(n−1, n)`.
    pub fn advantaged_layout(&self) -> Result<PromptLayout> {
        let n = self.n_docs();
        self.arrange_two_hop(n - 1, n)
    }
}

pub fn arrange_two_hop(instance: &ReasoningInstance, i: usize, j: usize) -> Result<PromptLayout> {
    instance.arrange_two_hop(i, j)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> TaskVocab {
        TaskVocab::new(64).unwrap()
    }

    #[test]
    fn chain_is_well_formed() {
        let x = make_reasoning_instance(1, 20, 5, &vocab()).unwrap();
        assert_eq!(x, make_reasoning_instance(1, 20, 5, &vocab()).unwrap());
        let b = x.bridge();
        assert_eq!(x.docs.iter().filter(|d| d.contains(&b)).count(), 2);
        let a = x.question[1];
        assert_eq!(x.docs.iter().filter(|d| d.contains(&a)).count(), 1);
        assert_eq!(x.docs.iter().filter(|d| d.contains(&x.answer[0])).count(), 1);
        assert_eq!(x.docs[x.pre_index - 1], x.hop1_fact);
        assert_eq!(x.docs[x.post_index - 1], x.hop2_fact);
        assert!(make_reasoning_instance(1, 28, 5, &vocab()).is_err());
    }

    #[test]
    fn arrange_places_hops() {
        let x = make_reasoning_instance(2, 20, 8, &vocab()).unwrap();
        let adv = x.advantaged_layout().unwrap();
        assert_eq!(adv.gold_positions, GoldPositions::Pair(19, 20));
        assert_eq!(adv.doc(19).unwrap(), x.hop1_fact.as_slice());
        assert_eq!(adv.doc(20).unwrap(), x.hop2_fact.as_slice());
        let rev = x.arrange_two_hop(14, 6).unwrap();
        assert_eq!(rev.doc(14).unwrap(), x.hop1_fact.as_slice());
        assert_eq!(rev.doc(6).unwrap(), x.hop2_fact.as_slice());
        let mut a = adv.tokens.clone();
        let mut b = rev.tokens.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
        assert!(x.arrange_two_hop(3, 3).is_err());
        assert!(x.arrange_two_hop(0, 3).is_err());
    }

    #[test]
    fn hop_facts_found_once_each() {
        let x = make_reasoning_instance(4, 20, 17, &vocab()).unwrap();
        let l = x.arrange_two_hop(5, 13).unwrap();
        let count = |f: &[usize]| (1..=20).filter(|&p| l.doc(p).unwrap() == f).count();
        assert_eq!(count(&x.hop1_fact), 1);
        assert_eq!(count(&x.hop2_fact), 1);
    }
}
