//! Tape gradients of composite functions against central differences.

mod common;

use std::sync::Arc;

use ctvqa::decoder::{
    assemble_prompt, cross_entropy_loss, project_prompt, PromptMode, PromptOrder, PromptProjection,
};
use ctvqa::graph::{agcn_layer, build_adjacency, gat_layer, AttentionNorm, GraphLayer};
use ctvqa::numerics::{finite_diff_check_with, GradCheckOptions, Tape, Tensor2, Var};
use ctvqa::params::{ParamBuilder, ParamStore, ParamVars};
use ctvqa::transformer::{causal_mask, full_mask, TransformerBlock};
use ctvqa::GraphVariant;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{random_slices, tiny_model};

const TRIALS: u64 = 20;

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    }
}

/// Weighted sum of every output entry, so that no gradient is trivially uniform.
fn project_to_scalar(tape: &mut Tape, out: Var, seed: u64) -> ctvqa::Result<Var> {
    let (r, c) = tape.value(out).shape();
    let w = Tensor2::random_normal(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
    let w = tape.leaf(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

#[test]
fn transformer_block_gradients() {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let rows = rng.random_range(1..5);
        let mut store = ParamStore::new();
        let block = TransformerBlock::build(&mut ParamBuilder::new(&mut store, &mut rng), 4, 2, 6);
        let x = Tensor2::random_normal(rows, 4, 1.0, &mut rng);
        let causal = trial % 2 == 0;
        let mut params = store.tensors().to_vec();
        params.push(x);
        let report = finite_diff_check_with(
            |tape, vars| {
                let (p, x) = vars.split_at(vars.len() - 1);
                let p = ParamVars::from_vars(p.to_vec());
                let mask = if causal { causal_mask(rows) } else { full_mask(rows) };
                let out = block.forward(tape, &p, x[0], &mask)?;
                project_to_scalar(tape, out, trial)
            },
            &params,
            &opts(trial),
        )
        .unwrap();
        assert!(report.passed, "trial {trial}: {:?}", report.worst());
    }
}

#[test]
fn agcn_and_gat_layer_gradients() {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let (n, m, d) = (rng.random_range(1..4), rng.random_range(1..4), 3);
        let adj = Arc::new(build_adjacency(n, m));
        let h = Tensor2::random_normal(n + m, d, 1.0, &mut rng);
        let w = Tensor2::random_normal(d, d, 0.7, &mut rng);
        let b = Tensor2::random_normal(1, d, 0.3, &mut rng);
        let wa = Tensor2::random_normal(d, d, 0.7, &mut rng);
        let src = Tensor2::random_normal(d, 1, 0.7, &mut rng);
        let dst = Tensor2::random_normal(d, 1, 0.7, &mut rng);
        let norm = if trial % 2 == 0 { AttentionNorm::Masked } else { AttentionNorm::PaperLiteral };

        let mut store = ParamStore::new();
        let agcn = GraphLayer {
            weight: store.add("weight", w.clone()),
            bias: Some(store.add("bias", b)),
            attention: Some(store.add("attention", wa)),
            gat_source: None,
            gat_target: None,
        };
        let mut params = store.tensors().to_vec();
        params.push(h.clone());
        let report = finite_diff_check_with(
            |tape, vars| {
                let p = ParamVars::from_vars(vars[..3].to_vec());
                let (out, _) = agcn_layer(tape, &p, &agcn, vars[3], &adj, norm, true)?;
                project_to_scalar(tape, out, trial)
            },
            &params,
            &opts(trial),
        )
        .unwrap();
        assert!(report.passed, "agcn trial {trial}: {:?}", report.worst());

        let mut store = ParamStore::new();
        let gat = GraphLayer {
            weight: store.add("weight", w),
            bias: None,
            attention: None,
            gat_source: Some(store.add("source", src)),
            gat_target: Some(store.add("target", dst)),
        };
        let mut params = store.tensors().to_vec();
        params.push(h);
        let report = finite_diff_check_with(
            |tape, vars| {
                let p = ParamVars::from_vars(vars[..3].to_vec());
                let (out, _) = gat_layer(tape, &p, &gat, vars[3], &adj, 0.2)?;
                project_to_scalar(tape, out, trial)
            },
            &params,
            &opts(trial),
        )
        .unwrap();
        assert!(report.passed, "gat trial {trial}: {:?}", report.worst());
    }
}

#[test]
fn projection_and_prompt_gradients() {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let (n, m) = (rng.random_range(1..4), rng.random_range(1..4));
        let h = Tensor2::random_normal(n + m, 3, 1.0, &mut rng);
        let w = Tensor2::random_normal(3, 2, 1.0, &mut rng);
        let b = Tensor2::random_normal(1, 2, 1.0, &mut rng);
        let e = Tensor2::random_normal(m, 2, 1.0, &mut rng);
        let mode = PromptMode::ALL[trial as usize % 3];
        let mut store = ParamStore::new();
        let proj = PromptProjection {
            weight: store.add("weight", w),
            bias: store.add("bias", b),
        };
        let mut params = store.tensors().to_vec();
        params.extend([h, e]);
        let report = finite_diff_check_with(
            |tape, vars| {
                let p = ParamVars::from_vars(vars[..2].to_vec());
                let o = project_prompt(tape, &p, &proj, vars[2])?;
                let prefix = assemble_prompt(tape, o, n, vars[3], mode, PromptOrder::GraphFirst)?;
                project_to_scalar(tape, prefix, trial)
            },
            &params,
            &opts(trial),
        )
        .unwrap();
        assert!(report.passed, "trial {trial}: {:?}", report.worst());
    }
}

#[test]
fn decoder_step_gradients() {
    for trial in 0..TRIALS {
        let model = tiny_model(GraphVariant::Agcn, trial);
        let mut rng = ChaCha8Rng::seed_from_u64(300 + trial);
        let prefix = Tensor2::random_normal(rng.random_range(1..5), 8, 1.0, &mut rng);
        let answer: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(4..12)).collect();
        let mut params = model.params.tensors().to_vec();
        params.push(prefix);
        let report = finite_diff_check_with(
            |tape, vars| {
                let (p, x) = vars.split_at(vars.len() - 1);
                let p = ParamVars::from_vars(p.to_vec());
                let logits = model.decoder.forward(tape, &p, x[0], &answer)?;
                let mut gold = answer.clone();
                gold.push(3);
                cross_entropy_loss(tape, logits, &gold)
            },
            &params,
            &GradCheckOptions {
                coords_per_tensor: Some(8),
                ..opts(trial)
            },
        )
        .unwrap();
        assert!(report.passed, "trial {trial}: {:?}", report.worst());
    }
}

#[test]
fn encoder_gradients() {
    for trial in 0..TRIALS {
        let model = tiny_model(GraphVariant::Agcn, 400 + trial);
        let slices = random_slices(2, trial);
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let question: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(4..12)).collect();
        let report = finite_diff_check_with(
            |tape, vars| {
                let p = ParamVars::from_vars(vars.to_vec());
                let s = model.encode_slices(tape, &p, &slices)?;
                let t = model.text.encode_question(tape, &p, &question)?;
                let s = tape.concat_rows(&s)?;
                let a = project_to_scalar(tape, s, trial)?;
                let b = project_to_scalar(tape, t, trial + 1)?;
                tape.add(a, b)
            },
            model.params.tensors(),
            &GradCheckOptions {
                coords_per_tensor: Some(8),
                ..opts(trial)
            },
        )
        .unwrap();
        assert!(report.passed, "trial {trial}: {:?}", report.worst());
    }
}
