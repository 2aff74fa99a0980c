//! Reverse-mode gradients of every differentiable op against central finite
//! differences, over 100 random seeds per op.

use posbias::autograd::{Graph, Var};
use posbias::gradcheck::{finite_difference_grad, max_relative_error};
use posbias::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;
// gradients below this magnitude are compared absolutely
const FLOOR: f64 = 1e-4;

type Build = dyn Fn(&mut Graph<'_>, &[Var]) -> Var;

/// Reduces an op's output to a scalar by a fixed random projection so that
/// every output element carries a distinct upstream gradient.
fn project(g: &mut Graph<'_>, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let w = g.leaf(w, false);
    let prod = g.mul(out, w).unwrap();
    g.sum(prod)
}

fn check(name: &str, inputs: &[Tensor], build: &Build, seed: u64) {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let split = |flat: &[f64]| -> Vec<Tensor> {
        let mut off = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), flat[off..off + n].to_vec()).unwrap();
                off += n;
                t
            })
            .collect()
    };
    let eval = |ts: &[Tensor], want_grad: bool| -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), want_grad)).collect();
        let out = build(&mut g, &vars);
        let loss = if g.value(out).numel() == 1 { out } else { project(&mut g, out, seed) };
        let value = g.value(loss).item();
        if !want_grad {
            return (value, Vec::new());
        }
        let mut grads = g.backward(loss).unwrap();
        let flat = vars
            .iter()
            .flat_map(|&v| grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
            .collect();
        (value, flat)
    };
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let (_, analytic) = eval(inputs, true);
    let numeric = finite_difference_grad(|p| eval(&split(p), false).0, &flat, EPS).unwrap();
    let err = max_relative_error(&analytic, &numeric, FLOOR);
    assert!(err <= TOL, "{name} seed {seed}: relative error {err:e}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn for_seeds(f: impl Fn(u64, &mut ChaCha8Rng)) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        f(seed, &mut rng);
    }
}

#[test]
fn matmul() {
    for_seeds(|s, r| {
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let ins = [rand_tensor(r, &[m, k], 1.0), rand_tensor(r, &[k, n], 1.0)];
        check("matmul", &ins, &|g, v| g.matmul(v[0], v[1]).unwrap(), s);
    });
}

#[test]
fn add_mul_scale_sum() {
    for_seeds(|s, r| {
        let shape = [r.gen_range(1..5), r.gen_range(1..5)];
        let ins = [rand_tensor(r, &shape, 1.0), rand_tensor(r, &shape, 1.0)];
        check("add", &ins, &|g, v| g.add(v[0], v[1]).unwrap(), s);
        check("mul", &ins, &|g, v| g.mul(v[0], v[1]).unwrap(), s);
        check("scale", &ins[..1], &|g, v| g.scale(v[0], -1.7), s);
        check("sum", &ins[..1], &|g, v| g.sum(v[0]), s);
    });
}

#[test]
fn embedding_and_select_rows() {
    for_seeds(|s, r| {
        let (vocab, d) = (r.gen_range(2..6), r.gen_range(1..5));
        let ids: Vec<usize> = (0..r.gen_range(1..6)).map(|_| r.gen_range(0..vocab)).collect();
        let table = [rand_tensor(r, &[vocab, d], 1.0)];
        let ids2 = ids.clone();
        check("embedding", &table, &move |g, v| g.embedding(v[0], &ids2).unwrap(), s);
        let rows: Vec<usize> = (0..3).map(|_| r.gen_range(0..vocab)).collect();
        check("select_rows", &table, &move |g, v| g.select_rows(v[0], &rows).unwrap(), s);
    });
}

#[test]
fn rms_norm() {
    for_seeds(|s, r| {
        let (t, d) = (r.gen_range(1..5), r.gen_range(2..8));
        let ins = [rand_tensor(r, &[t, d], 2.0), rand_tensor(r, &[d], 1.5)];
        check("rms_norm", &ins, &|g, v| g.rms_norm(v[0], v[1]).unwrap(), s);
    });
}

#[test]
fn gelu() {
    for_seeds(|s, r| {
        let rows = r.gen_range(1..9);
        let ins = [rand_tensor(r, &[rows, 4], 3.0)];
        check("gelu", &ins, &|g, v| g.gelu(v[0]), s);
    });
}

#[test]
fn rope() {
    for_seeds(|s, r| {
        let heads = r.gen_range(1..3);
        let hd = 2 * r.gen_range(1..4);
        let t = r.gen_range(1..6);
        let ins = [rand_tensor(r, &[t, heads * hd], 1.0)];
        check("rope", &ins, &move |g, v| g.rope(v[0], heads, 50.0).unwrap(), s);
    });
}

#[test]
fn causal_attention() {
    for_seeds(|s, r| {
        let heads = r.gen_range(1..3);
        let d = heads * r.gen_range(1..4);
        let t = r.gen_range(1..6);
        let ins = [
            rand_tensor(r, &[t, d], 1.5),
            rand_tensor(r, &[t, d], 1.5),
            rand_tensor(r, &[t, d], 1.5),
        ];
        check(
            "causal_attention",
            &ins,
            &move |g, v| g.causal_attention(v[0], v[1], v[2], heads).unwrap(),
            s,
        );
    });
}

#[test]
fn softmax_and_log_softmax() {
    for_seeds(|s, r| {
        let shape = [r.gen_range(1..4), r.gen_range(2..9)];
        let ins = [rand_tensor(r, &shape, 3.0)];
        check("softmax", &ins, &|g, v| g.softmax(v[0]), s);
        check("log_softmax", &ins, &|g, v| g.log_softmax(v[0]), s);
    });
}

#[test]
fn sequence_kl_and_cross_entropy() {
    for_seeds(|s, r| {
        let (t, c) = (r.gen_range(1..5), r.gen_range(2..9));
        let teacher = rand_tensor(r, &[t, c], 3.0);
        let mut mask: Vec<bool> = (0..t).map(|_| r.gen_bool(0.7)).collect();
        mask[0] = true;
        let targets: Vec<usize> = (0..t).map(|_| r.gen_range(0..c)).collect();
        let ins = [rand_tensor(r, &[t, c], 3.0)];
        let m2 = mask.clone();
        check(
            "sequence_kl",
            &ins,
            &move |g, v| g.sequence_kl(v[0], &teacher, &m2).unwrap(),
            s,
        );
        check(
            "cross_entropy",
            &ins,
            &move |g, v| g.cross_entropy(v[0], &targets, &mask).unwrap(),
            s,
        );
    });
}

#[test]
fn weighted_sum() {
    for_seeds(|s, r| {
        let ins = [rand_tensor(r, &[1], 2.0), rand_tensor(r, &[1], 2.0)];
        let (a, b) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        check(
            "weighted_sum",
            &ins,
            &move |g, v| g.weighted_sum(&[(v[0], a), (v[1], b)]).unwrap(),
            s,
        );
    });
}

#[test]
fn sequence_kl_zero_at_identity_with_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let logits = rand_tensor(&mut rng, &[3, 6], 4.0);
        let mut g = Graph::new();
        let x = g.leaf(logits.clone(), true);
        let kl = g.sequence_kl(x, &logits, &[true, true, true]).unwrap();
        assert!(g.value(kl).item().abs() <= 1e-12);
        let mut grads = g.backward(kl).unwrap();
        let gx = grads.take(x).unwrap();
        assert!(gx.iter().all(|v| v.abs() <= 1e-12), "{gx:?}");
    }
}

#[test]
fn graph_losses_match_plain_evaluations() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = rand_tensor(&mut rng, &[4, 5], 2.0);
    let s = rand_tensor(&mut rng, &[4, 5], 2.0);
    let mask = [true, false, true, true];
    let mut g = Graph::new();
    let x = g.leaf(s.clone(), true);
    let kl = g.sequence_kl(x, &t, &mask).unwrap();
    let ce = g.cross_entropy(x, &[0, 1, 4, 2], &mask).unwrap();
    let plain_kl = posbias::prob::sequence_kl(&t, &s, &mask).unwrap();
    let plain_ce = posbias::prob::cross_entropy(&s, &[0, 1, 4, 2], &mask).unwrap();
    assert!((g.value(kl).item() - plain_kl).abs() < 1e-12);
    assert!((g.value(ce).item() - plain_ce).abs() < 1e-12);
}
