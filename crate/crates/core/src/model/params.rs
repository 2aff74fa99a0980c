use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_in: Tensor,
    pub w_out: Tensor,
}

/// All weights of the toy decoder. Cloning yields an independent snapshot,
/// which is how frozen teachers are made.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub unembed: Tensor,
}

/// Graph handles mirroring [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub mlp_norm: Var,
    pub w_in: Var,
    pub w_out: Var,
}

#[derive(Clone, Debug)]
pub struct BoundParams {
    pub embed: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub unembed: Var,
}

impl BoundParams {
    fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.mlp_norm, l.w_in, l.w_out]);
        }
        out.push(self.final_norm);
        out.push(self.unembed);
        out
    }

    /// Parameter gradients in [`ModelParams::tensors`] order; parameters the
    /// loss does not reach get zeros.
    pub fn gradients(&self, grads: &mut Gradients, graph: &Graph<'_>) -> Vec<Vec<f64>> {
        self.vars()
            .into_iter()
            .map(|v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| vec![0.0; graph.value(v).numel()])
            })
            .collect()
    }
}

impl ModelParams {
    /// Seeded initialization: unit-variance embeddings, `1/sqrt(fan_in)`
    /// projections, residual outputs shrunk by `sqrt(2·n_layers)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let proj = 1.0 / (d as f64).sqrt();
        let depth = (2.0 * config.n_layers as f64).sqrt();
        let embed = Tensor::randn(&[v, d], 1.0, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: ones(d),
                wq: Tensor::randn(&[d, d], proj, &mut rng),
                wk: Tensor::randn(&[d, d], proj, &mut rng),
                wv: Tensor::randn(&[d, d], proj, &mut rng),
                wo: Tensor::randn(&[d, d], proj / depth, &mut rng),
                mlp_norm: ones(d),
                w_in: Tensor::randn(&[d, f], proj, &mut rng),
                w_out: Tensor::randn(&[f, d], 1.0 / (f as f64).sqrt() / depth, &mut rng),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed,
            layers,
            final_norm: ones(d),
            unembed: Tensor::randn(&[d, v], proj, &mut rng),
        })
    }

    /// Tensors with stable names, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in [
                ("attn_norm", &l.attn_norm),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("mlp_norm", &l.mlp_norm),
                ("w_in", &l.w_in),
                ("w_out", &l.w_out),
            ] {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend([
                &mut l.attn_norm,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.mlp_norm,
                &mut l.w_in,
                &mut l.w_out,
            ]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.unembed);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// All values concatenated in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Copy of `self` with values replaced from a flat vector.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// Places every parameter on `graph`, borrowing the values.
    pub fn bind<'a>(&'a self, graph: &mut Graph<'a>, trainable: bool) -> BoundParams {
        let embed = graph.leaf_ref(&self.embed, trainable);
        let layers = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                attn_norm: graph.leaf_ref(&l.attn_norm, trainable),
                wq: graph.leaf_ref(&l.wq, trainable),
                wk: graph.leaf_ref(&l.wk, trainable),
                wv: graph.leaf_ref(&l.wv, trainable),
                wo: graph.leaf_ref(&l.wo, trainable),
                mlp_norm: graph.leaf_ref(&l.mlp_norm, trainable),
                w_in: graph.leaf_ref(&l.w_in, trainable),
                w_out: graph.leaf_ref(&l.w_out, trainable),
            })
            .collect();
        BoundParams {
            embed,
            layers,
            final_norm: graph.leaf_ref(&self.final_norm, trainable),
            unembed: graph.leaf_ref(&self.unembed, trainable),
        }
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).expect("1-d shape")
}
