//! Compares the analytic cross-entropy gradient of a tiny decoder with
//! central finite differences at random coordinates. Embedding rows of
//! tokens absent from the prompt have exactly zero gradient.
//!
//! cargo run --release --example gradient_check

use posbias::gradcheck::{finite_difference_grad_at, max_relative_error};
use posbias::model::{ModelConfig, ModelParams};
use posbias::tasks::{make_retrieval_instance, TaskVocab};
use posbias::trainer::cross_entropy_gradients;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> posbias::Result<()> {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        max_seq_len: 64,
        ..Default::default()
    };
    let model = ModelParams::init(&cfg, 3)?;
    let vocab = TaskVocab::new(64)?;
    let x = make_retrieval_instance(0, 6, 11, &vocab)?;
    let prompt = x.arrange(4)?.tokens;
    let response = x.gold_response();

    let (loss, grads) = cross_entropy_gradients(&model, &[(&prompt, &response)])?;
    let analytic: Vec<f64> = grads.into_iter().flatten().collect();
    let flat = model.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let probes: Vec<usize> = (0..40).map(|_| rng.gen_range(0..flat.len())).collect();
    let numeric = finite_difference_grad_at(
        |theta| {
            let m = model.with_flat(theta).expect("same shape");
            cross_entropy_gradients(&m, &[(&prompt, &response)]).expect("finite loss").0
        },
        &flat,
        &probes,
        1e-5,
    )?;
    let picked: Vec<f64> = probes.iter().map(|&i| analytic[i]).collect();
    println!("loss {loss:.5}, {} parameters, {} probes", flat.len(), probes.len());
    for (i, (a, n)) in probes.iter().zip(picked.iter().zip(&numeric)).filter(|(_, (a, _))| **a != 0.0).take(5) {
        println!("  theta[{i}]: analytic {a:+.6e} numeric {n:+.6e}");
    }
    println!("max relative error {:.2e}", max_relative_error(&picked, &numeric, 1e-6));
    Ok(())
}
