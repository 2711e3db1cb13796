//! Central finite-difference gradient checks in f64, shared by the
//! gradient tests and the acceptance run.

use std::collections::BTreeMap;

use drafter_core::model::{forward_on_tape, Transformer, TransformerConfig};
use drafter_core::tensor::{GradTape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build<'a> = dyn Fn(&mut GradTape<f64>, &BTreeMap<String, Var>) -> Var + 'a;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, tiny)` between analytic and
/// central-difference gradients of `build` over all `inputs`.
pub fn check(inputs: &BTreeMap<String, Tensor<f64>>, build: &Build<'_>) -> f64 {
    let eval = |vals: &BTreeMap<String, Tensor<f64>>| {
        let mut tape = GradTape::new();
        let vars = vals
            .iter()
            .map(|(k, t)| (k.clone(), tape.param(k, t.clone()).unwrap()))
            .collect();
        let out = build(&mut tape, &vars);
        (tape, out)
    };
    let (tape, out) = eval(inputs);
    let analytic = tape.backward(out).unwrap();

    let h = 1e-6;
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for (name, t) in inputs {
        for i in 0..t.numel() {
            let mut plus = inputs.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let f = |v: &BTreeMap<String, Tensor<f64>>| {
                let (tape, out) = eval(v);
                tape.value(out).unwrap().item().unwrap()
            };
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic[name].data()[i];
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
    }
    diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12)
}

/// Reduces any tensor to a scalar with fixed random weights so every output
/// element gets a distinct upstream gradient.
fn weighted_sum(tape: &mut GradTape<f64>, x: Var, seed: u64) -> Var {
    let shape = tape.value(x).unwrap().shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(&shape, &mut rng));
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

fn inputs(specs: &[(&str, &[usize])], seed: u64) -> BTreeMap<String, Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|(n, s)| (n.to_string(), random(s, &mut rng)))
        .collect()
}

/// `(name, relative error)` for every tape primitive and for the loss of a
/// small transformer.
pub fn gradient_checks() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let x = inputs(&[("a", &[3, 4]), ("b", &[4, 5]), ("w", &[5, 4]), ("c", &[3, 4]), ("r", &[4])], 1);
    out.push(("matmul", check(&x, &|t, v| {
        let y = t.matmul(v["a"], v["b"]).unwrap();
        weighted_sum(t, y, 9)
    })));
    out.push(("linear", check(&x, &|t, v| {
        let y = t.linear(v["a"], v["w"]).unwrap();
        weighted_sum(t, y, 9)
    })));
    out.push(("add/mul/scale/add_row", check(&x, &|t, v| {
        let y = t.add(v["a"], v["c"]).unwrap();
        let y = t.mul(y, v["a"]).unwrap();
        let y = t.scale(y, 0.7).unwrap();
        let y = t.add_row(y, v["r"]).unwrap();
        weighted_sum(t, y, 9)
    })));

    let x = inputs(&[("a", &[3, 6]), ("g", &[6])], 2);
    out.push(("softmax", check(&x, &|t, v| {
        let y = t.row_softmax(v["a"]).unwrap();
        weighted_sum(t, y, 3)
    })));
    out.push(("rms_norm", check(&x, &|t, v| {
        let y = t.rms_norm(v["a"], v["g"], 1e-5).unwrap();
        weighted_sum(t, y, 3)
    })));
    out.push(("silu", check(&x, &|t, v| {
        let y = t.silu(v["a"]).unwrap();
        weighted_sum(t, y, 3)
    })));

    let x = inputs(&[("a", &[4, 8]), ("b", &[4, 3]), ("e", &[10, 8])], 3);
    out.push(("transpose/reshape", check(&x, &|t, v| {
        let y = t.transpose(v["a"]).unwrap();
        let y = t.reshape(y, &[4, 8]).unwrap();
        weighted_sum(t, y, 4)
    })));
    out.push(("slice/concat", check(&x, &|t, v| {
        let s = t.slice_cols(v["a"], 2, 4).unwrap();
        let y = t.concat_cols(&[s, v["b"], s]).unwrap();
        weighted_sum(t, y, 4)
    })));
    out.push(("embedding", check(&x, &|t, v| {
        let y = t.embedding(v["e"], &[3, 0, 3, 9]).unwrap();
        weighted_sum(t, y, 4)
    })));
    out.push(("rope", check(&x, &|t, v| {
        let y = t.rope(v["a"], 4, 3, 10_000.0).unwrap();
        weighted_sum(t, y, 4)
    })));

    let x = inputs(&[("q", &[4, 4]), ("k", &[4, 4]), ("logits", &[3, 7])], 4);
    out.push(("causal softmax", check(&x, &|t, v| {
        let s = t.linear(v["q"], v["k"]).unwrap();
        let s = t.causal_mask(s, 0).unwrap();
        let p = t.row_softmax(s).unwrap();
        weighted_sum(t, p, 5)
    })));
    out.push(("nll", check(&x, &|t, v| {
        t.nll(v["logits"], &[(0, 2, 0.5), (2, 6, 0.25), (2, 1, 1.0)]).unwrap()
    })));

    let (c, weights) = small_transformer();
    let tokens = [1, 7, 3, 3, 11, 0];
    out.push(("transformer loss", check(&weights, &|t, v| {
        let logits = forward_on_tape(&c, t, v, &tokens[..5]).unwrap();
        let targets: Vec<(usize, usize, f64)> = (0..5).map(|i| (i, tokens[i + 1], 0.2)).collect();
        t.nll(logits, &targets).unwrap()
    })));
    out
}

/// Two blocks, grouped-query attention, weights scaled up from the init so
/// every path carries signal.
pub fn small_transformer() -> (TransformerConfig, BTreeMap<String, Tensor<f64>>) {
    let mut c = TransformerConfig::micro();
    c.n_layers = 2;
    c.d_model = 16;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.d_head = 4;
    c.d_ff = 24;
    c.vocab_size = 12;
    let m = Transformer::<f64>::random(c.clone(), 5).unwrap();
    let weights = m
        .weights
        .iter()
        .map(|(k, t)| (k.clone(), t.map(|x| if k.ends_with("norm") { x } else { x * 10.0 })))
        .collect();
    (c, weights)
}
