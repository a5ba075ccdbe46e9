//! Finite-difference checks for every differentiable block of the model.
//!
//! Shared by the `gradcheck` CLI command and the acceptance suite. All
//! blocks run on toy shapes with fixed seeds, so results are reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, Gradients};

#[derive(Debug, Clone)]
pub struct BlockResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;

const BLOCKS: [&str; 8] = [
    "primitives",
    "gru_cell",
    "bigru",
    "encoder",
    "bidaf",
    "self_attention",
    "arg_heads",
    "q_end_to_end",
];

pub fn block_names() -> &'static [&'static str] {
    &BLOCKS
}

/// Run the suite (optionally restricted to one block name).
pub fn run_suite(h: f64, filter: Option<&str>, tol: f64) -> Vec<BlockResult> {
    BLOCKS
        .iter()
        .filter(|b| filter.map_or(true, |f| **b == f))
        .map(|&name| {
            let err = check_block(name, h);
            BlockResult {
                name,
                max_rel_err: err,
                pass: err < tol,
            }
        })
        .collect()
}

fn grads_for(grads: &Gradients, inputs: &[Tensor]) -> Vec<Tensor> {
    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            grads
                .get(ParamId(i))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect()
}

fn check_block(name: &str, h: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    match name {
        "primitives" => {
            // one composite net touching every primitive op
            let inputs = vec![
                Tensor::uniform(4, 5, 1.0, &mut rng),  // x
                Tensor::uniform(5, 3, 1.0, &mut rng),  // w
                Tensor::uniform(1, 3, 1.0, &mut rng),  // row bias
                Tensor::uniform(4, 1, 1.0, &mut rng),  // col bias
                Tensor::uniform(1, 3, 1.0, &mut rng),  // gain
                Tensor::uniform(1, 3, 1.0, &mut rng),  // bias
            ];
            grad_check(
                &|xs: &[Tensor]| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = xs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| tape.param(ParamId(i), t))
                        .collect();
                    let mm = tape.matmul(vars[0], vars[1]);
                    let ar = tape.add_row(mm, vars[2]);
                    let ac = tape.add_col(ar, vars[3]);
                    let ln = tape.layer_norm(ac, vars[4], vars[5]);
                    let sm = tape.softmax_rows(ln);
                    let sc = tape.softmax_cols(ln);
                    let mixed = tape.mul(sm, sc);
                    let lr = tape.leaky_relu(mixed, LEAKY_SLOPE);
                    let th = tape.tanh(lr);
                    let sg = tape.sigmoid(th);
                    let mr = tape.mul_row(sg, vars[2]);
                    let cat = tape.concat_cols(&[mr, sg]);
                    let rows = tape.gather_rows(cat, &[0, 2, 3]);
                    let pooled = tape.mean_rows(rows, &[0, 2]);
                    let mx = tape.row_max(cat);
                    let mxs = tape.sum_all(mx);
                    let ps = tape.sum_all(pooled);
                    let both = tape.add(mxs, ps);
                    let sq = tape.mul(both, both);
                    let loss = tape.scale(sq, 0.5);
                    let grads = tape.backward(loss);
                    (tape.value(loss).item(), grads_for(&grads, xs))
                },
                &inputs,
                h,
            )
        }
        "gru_cell" => {
            let inputs = vec![
                Tensor::uniform(1, 4, 1.0, &mut rng),
                Tensor::uniform(4, 9, 0.7, &mut rng),
                Tensor::uniform(3, 9, 0.7, &mut rng),
                Tensor::uniform(1, 9, 0.5, &mut rng),
            ];
            grad_check(&gru_loss(false), &inputs, h)
        }
        "bigru" => {
            let inputs = vec![
                Tensor::uniform(5, 4, 1.0, &mut rng),
                Tensor::uniform(4, 9, 0.7, &mut rng),
                Tensor::uniform(3, 9, 0.7, &mut rng),
                Tensor::uniform(1, 9, 0.5, &mut rng),
                Tensor::uniform(4, 9, 0.7, &mut rng),
                Tensor::uniform(3, 9, 0.7, &mut rng),
                Tensor::uniform(1, 9, 0.5, &mut rng),
            ];
            grad_check(
                &|xs: &[Tensor]| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = xs
                        .iter()
                        .enumerate()
                        .map(|(i, t)| tape.param(ParamId(i), t))
                        .collect();
                    let g = BiGruVars {
                        fwd: GruVars {
                            w: vars[1],
                            u: vars[2],
                            b: vars[3],
                        },
                        bwd: GruVars {
                            w: vars[4],
                            u: vars[5],
                            b: vars[6],
                        },
                    };
                    let out = bigru(&mut tape, &g, vars[0]);
                    let sq = tape.mul(out, out);
                    let loss = tape.sum_all(sq);
                    let grads = tape.backward(loss);
                    (tape.value(loss).item(), grads_for(&grads, xs))
                },
                &inputs,
                h,
            )
        }
        "encoder" => model_block_check(h, 6, 8, |tape, vars, _cfg, doc_emb, _verb| {
            encoder_block(tape, &vars.enc_shared, doc_emb)
        }),
        "bidaf" => model_block_check(h, 6, 8, |tape, vars, _cfg, doc_enc_emb, verb_emb| {
            // encode both inputs with the shared block, then attend
            let o = encoder_block(tape, &vars.enc_shared, doc_enc_emb);
            let t = encoder_block(tape, &vars.enc_shared, verb_emb);
            bidaf_block(tape, &vars.bidaf, o, t)
        }),
        "self_attention" => model_block_check(h, 5, 8, |tape, vars, cfg, doc_emb, _verb| {
            let o = encoder_block(tape, &vars.enc_shared, doc_emb);
            self_attention(tape, vars, cfg, o)
        }),
        "arg_heads" => model_block_check(h, 5, 8, |tape, vars, cfg, doc_emb, _verb| {
            let o = encoder_block(tape, &vars.enc_shared, doc_emb);
            let pairs = vec![(vec![0usize, 3], vec![2usize]), (vec![1], vec![4])];
            q_pairs(tape, vars, cfg, o, &pairs)
        }),
        "q_end_to_end" => model_block_check(h, 6, 8, |tape, vars, cfg, doc_emb, verb_emb| {
            let denc = encoder_block(tape, &vars.enc_shared, doc_emb);
            let ctx = contextualize(tape, vars, cfg, denc, verb_emb);
            let pairs = vec![(vec![1usize, 4], vec![2usize])];
            q_pairs(tape, vars, cfg, ctx, &pairs)
        }),
        other => panic!("unknown gradcheck block {other:?}"),
    }
}

fn gru_loss(reversed: bool) -> impl Fn(&[Tensor]) -> (f64, Vec<Tensor>) {
    move |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(ParamId(i), t))
            .collect();
        let out = tape.gru_seq(vars[0], vars[1], vars[2], vars[3], reversed);
        let sq = tape.mul(out, out);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        (tape.value(loss).item(), grads_for(&grads, xs))
    }
}

/// Check a model-level block: inputs are all 48 parameters plus the doc and
/// verb embedding matrices; the loss is the squared sum of the block output.
fn model_block_check(
    h: f64,
    doc_len: usize,
    repr: usize,
    block: impl Fn(&mut Tape, &ModelVars, &ModelConfig, Var, Var) -> Var,
) -> f64 {
    let config = ModelConfig::toy(6, repr);
    let params = RcModelParams::init(config, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(0xb10c);
    let mut inputs: Vec<Tensor> = params.entries().into_iter().map(|(_, t)| t).collect();
    let n_params = inputs.len();
    inputs.push(Tensor::uniform(doc_len, config.embed_dim, 1.0, &mut rng));
    inputs.push(Tensor::uniform(3, config.embed_dim, 1.0, &mut rng));

    grad_check(
        &move |xs: &[Tensor]| {
            let p = RcModelParams::from_tensor_list(config, &xs[..n_params]);
            let mut tape = Tape::new();
            let vars = p.bind(&mut tape);
            let doc_emb = tape.param(ParamId(n_params), &xs[n_params]);
            let verb_emb = tape.param(ParamId(n_params + 1), &xs[n_params + 1]);
            let out = block(&mut tape, &vars, &config, doc_emb, verb_emb);
            let sq = tape.mul(out, out);
            let loss = tape.sum_all(sq);
            let grads = tape.backward(loss);
            (tape.value(loss).item(), grads_for(&grads, xs))
        },
        &inputs,
        h,
    )
}
