use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{BoundParams, ModelParams};
use crate::prob::argmax;
use crate::tasks::PromptLayout;
use crate::tensor::Tensor;

/// Output of [`forward_graph`]: logits for the requested rows plus the
/// attention nodes of every layer (for tracing).
pub struct ForwardOut {
    pub logits: Var,
    pub attention: Vec<Var>,
}

fn check_tokens(params: &ModelParams, tokens: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Index {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Records the decoder on `graph`. When `rows` is given, only those
/// positions are projected to logits.
pub fn forward_graph(
    graph: &mut Graph<'_>,
    params: &ModelParams,
    bound: &BoundParams,
    tokens: &[usize],
    rows: Option<&[usize]>,
) -> Result<ForwardOut> {
    check_tokens(params, tokens)?;
    let cfg = &params.config;
    let mut x = graph.embedding(bound.embed, tokens)?;
    let mut attention = Vec::with_capacity(bound.layers.len());
    for layer in &bound.layers {
        let h = graph.rms_norm(x, layer.attn_norm)?;
        let q = graph.matmul(h, layer.wq)?;
        let k = graph.matmul(h, layer.wk)?;
        let v = graph.matmul(h, layer.wv)?;
        let q = graph.rope(q, cfg.n_heads, cfg.rope_base)?;
        let k = graph.rope(k, cfg.n_heads, cfg.rope_base)?;
        let a = graph.causal_attention(q, k, v, cfg.n_heads)?;
        attention.push(a);
        let o = graph.matmul(a, layer.wo)?;
        x = graph.add(x, o)?;
        let h = graph.rms_norm(x, layer.mlp_norm)?;
        let u = graph.matmul(h, layer.w_in)?;
        let u = graph.gelu(u);
        let m = graph.matmul(u, layer.w_out)?;
        x = graph.add(x, m)?;
    }
    if let Some(rows) = rows {
        x = graph.select_rows(x, rows)?;
    }
    let x = graph.rms_norm(x, bound.final_norm)?;
    let logits = graph.matmul(x, bound.unembed)?;
    Ok(ForwardOut { logits, attention })
}

/// `T×V` logits for every position of `tokens`.
pub fn forward(params: &ModelParams, tokens: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let out = forward_graph(&mut g, params, &bound, tokens, None)?;
    Ok(g.value(out.logits).clone())
}

/// Input tokens and logit rows for scoring `response` after `prompt`.
/// The final response token is never fed back in.
pub fn teacher_forcing_plan(prompt: &[usize], response: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if prompt.is_empty() || response.is_empty() {
        return Err(Error::InvalidInput("teacher forcing needs a prompt and a response".into()));
    }
    let mut tokens = Vec::with_capacity(prompt.len() + response.len() - 1);
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(&response[..response.len() - 1]);
    let rows = (0..response.len()).map(|r| prompt.len() - 1 + r).collect();
    Ok((tokens, rows))
}

fn check_fits(params: &ModelParams, prompt: &[usize], response: &[usize]) -> Result<()> {
    let len = prompt.len() + response.len();
    if len > params.config.max_seq_len {
        return Err(Error::Length {
            len,
            max: params.config.max_seq_len,
        });
    }
    Ok(())
}

/// Graph version of [`teacher_force_logits`]; returns the `R×V` logits node.
pub fn teacher_forced_graph(
    graph: &mut Graph<'_>,
    params: &ModelParams,
    bound: &BoundParams,
    prompt: &[usize],
    response: &[usize],
) -> Result<Var> {
    check_fits(params, prompt, response)?;
    let (tokens, rows) = teacher_forcing_plan(prompt, response)?;
    Ok(forward_graph(graph, params, bound, &tokens, Some(&rows))?.logits)
}

/// Row `r` is the next-token distribution (as logits) for `response[r]`
/// given `prompt ‖ response[..r]`.
pub fn teacher_force_logits(params: &ModelParams, prompt: &[usize], response: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let logits = teacher_forced_graph(&mut g, params, &bound, prompt, response)?;
    Ok(g.value(logits).clone())
}

/// Result of greedy decoding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    /// Generated tokens, including the stop token when one was produced.
    pub tokens: Vec<usize>,
    /// True when decoding ended without producing the stop token.
    pub truncated: bool,
}

/// Argmax decoding until `stop_id` or `max_new` tokens (or the context
/// window) are exhausted.
pub fn greedy_decode(params: &ModelParams, prompt: &[usize], max_new: usize, stop_id: usize) -> Result<Decoded> {
    if max_new == 0 {
        return Err(Error::InvalidInput("max_new must be at least 1".into()));
    }
    check_tokens(params, prompt)?;
    if prompt.len() >= params.config.max_seq_len {
        return Err(Error::Length {
            len: prompt.len() + 1,
            max: params.config.max_seq_len,
        });
    }
    let budget = max_new.min(params.config.max_seq_len - prompt.len());
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(budget);
    for _ in 0..budget {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let last = [seq.len() - 1];
        let f = forward_graph(&mut g, params, &bound, &seq, Some(&last))?;
        let next = argmax(g.value(f.logits).row(0));
        out.push(next);
        seq.push(next);
        if next == stop_id {
            return Ok(Decoded {
                tokens: out,
                truncated: false,
            });
        }
    }
    Ok(Decoded {
        tokens: out,
        truncated: true,
    })
}

/// Attention mass from the final prompt position onto each document span,
/// averaged over heads and layers. Entries are non-negative and sum to at
/// most one; the remainder sits on non-document tokens.
pub fn attention_trace(params: &ModelParams, layout: &PromptLayout) -> Result<Vec<f64>> {
    let t = layout.tokens.len();
    for &(start, end) in &layout.doc_spans {
        if start >= end || end > t {
            return Err(Error::Layout(format!("span {start}..{end} outside prompt of {t}")));
        }
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let last = [t - 1];
    let f = forward_graph(&mut g, params, &bound, &layout.tokens, Some(&last))?;
    let row = final_row_attention(&g, &f.attention, t);
    Ok(layout
        .doc_spans
        .iter()
        .map(|&(s, e)| row[s..e].iter().sum())
        .collect())
}

/// Attention distribution of the last query position averaged over heads
/// and layers.
fn final_row_attention(g: &Graph<'_>, attention: &[Var], t: usize) -> Vec<f64> {
    let mut row = vec![0.0; t];
    let mut count = 0usize;
    for &a in attention {
        let (probs, heads) = g.attention_probs(a).expect("attention node");
        for h in 0..heads {
            let base = h * t * t + (t - 1) * t;
            for (acc, p) in row.iter_mut().zip(&probs[base..base + t]) {
                *acc += p;
            }
            count += 1;
        }
    }
    row.iter_mut().for_each(|v| *v /= count as f64);
    row
}
