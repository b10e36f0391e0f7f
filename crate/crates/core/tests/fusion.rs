mod common;

use common::*;
use vcr_core::attention::multi_head;
use vcr_core::fusion::{fuse_example, fuse_sequence, text_object_fusion, textual_branch, visual_branch, FusionParams};
use vcr_core::numerics::{grad_check, Mode, ParamBuilder, ParamSet, RngState, Tape};

const D: usize = 8;
const HEADS: usize = 2;
const EPS: f64 = 1e-5;

fn setup(seed: u64) -> (ParamSet<f64>, FusionParams<f64>) {
    let mut params = ParamSet::new();
    let mut rng = RngState::new(seed);
    let mut b = ParamBuilder::new(&mut params, &mut rng);
    let p = b.scope("fusion", |s| FusionParams::new(s, D, HEADS, 6, EPS)).unwrap();
    // Perturb the zero-initialized biases and norm parameters so they matter.
    let ids: Vec<_> = params.ids().filter(|&id| params.name(id).ends_with("bias") || params.name(id).contains("norm")).collect();
    for id in ids {
        for (i, v) in params.get_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i + 3) as f64).sin();
        }
    }
    (params, p)
}

#[test]
fn textual_branch_examples() {
    let (params, p) = setup(1);
    let mut rng = RngState::new(2);
    let t = random_m(&mut rng, 1, D);
    let mut tape = Tape::new(&params, Mode::Eval);
    let tv = tape.input(&to_tensor(&t));
    let x1 = textual_branch(&mut tape, tv, &p, "t").unwrap();
    let w = MhaW::load(&params, "fusion.textual", HEADS);
    let want = linear(&linear(&t, &w.wv, Some(&w.bv)), &w.wo, Some(&w.bo));
    assert!(max_scaled_err(tape.value(x1), &flat(&want)) < 1e-13);

    let row = random_m(&mut rng, 1, D);
    let twice = vec![row[0].clone(), row[0].clone()];
    let tv = tape.input(&to_tensor(&twice));
    let x1 = textual_branch(&mut tape, tv, &p, "t").unwrap();
    let out = tape.value(x1);
    assert_eq!(out[..D], out[D..]);

    let t = random_m(&mut rng, 4, D);
    let tv = tape.input(&to_tensor(&t));
    let x1 = textual_branch(&mut tape, tv, &p, "t").unwrap();
    let direct = multi_head(&mut tape, tv, tv, tv, &p.textual, "u").unwrap();
    assert_eq!(tape.value(x1), tape.value(direct));

}

#[test]
fn visual_branch_examples() {
    let (params, p) = setup(3);
    let mut rng = RngState::new(4);
    let mut tape = Tape::new(&params, Mode::Eval);

    let o = tape.input(&to_tensor(&random_m(&mut rng, 1, D)));
    let x1 = tape.input(&to_tensor(&random_m(&mut rng, 1, D)));
    let (_, inter) = visual_branch(&mut tape, o, x1, &p, "v").unwrap();
    assert_eq!(tape.value(inter.x2), &[1.0]);
    assert_eq!(tape.value(inter.x3), tape.value(x1));

    let (objects, tokens) = (random_m(&mut rng, 2, D), random_m(&mut rng, 3, D));
    let ov = tape.input(&to_tensor(&objects));
    let x1v = tape.input(&to_tensor(&tokens));
    let (fused, inter) = visual_branch(&mut tape, ov, x1v, &p, "v").unwrap();
    assert_eq!(tape.dims(inter.x2), (2, 3));
    assert_eq!(tape.dims(inter.x3), (2, D));
    for row in tape.value(inter.x2).chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    // Step-by-step oracle: norm + position, object-to-text weights, attended
    // text, feature concatenation, self-attention over the joint rows.
    let normed = layer_norm(&objects, &param(&params, "fusion.object_norm.gamma"), &param(&params, "fusion.object_norm.beta"), EPS);
    let q_ve = add(&normed, &positional(2, D));
    let logits: M = q_ve.iter().map(|q| tokens.iter().map(|t| q.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / (D as f64).sqrt()).collect()).collect();
    let x2 = softmax_rows(&logits);
    let x3 = mm(&x2, &tokens);
    let joint = concat_cols(&[&q_ve, &x3]);
    let want = mha(&joint, &joint, &joint, &MhaW::load(&params, "fusion.visual", HEADS));
    assert!(max_scaled_err(tape.value(inter.q_ve), &flat(&q_ve)) < 1e-12);
    assert!(max_scaled_err(tape.value(inter.x2), &flat(&x2)) < 1e-12);
    assert!(max_scaled_err(tape.value(inter.x3), &flat(&x3)) < 1e-12);
    assert!(max_scaled_err(tape.value(fused), &flat(&want)) < 1e-12);
}

#[test]
fn text_object_fusion_examples() {
    let (params, p) = setup(5);
    let mut rng = RngState::new(6);
    let mut tape = Tape::new(&params, Mode::Eval);
    let x1 = tape.input(&to_tensor(&random_m(&mut rng, 4, D)));
    let single = random_m(&mut rng, 1, D);
    let sv = tape.input(&to_tensor(&single));
    let out = text_object_fusion(&mut tape, x1, sv, &p, "f").unwrap();
    let w = MhaW::load(&params, "fusion.text_object", HEADS);
    let want = linear(&linear(&single, &w.wv, Some(&w.bv)), &w.wo, Some(&w.bo));
    for row in tape.value(out).chunks(D) {
        assert!(max_scaled_err(row, &want[0]) < 1e-13);
    }
    for n_obj in 1..5 {
        let v = tape.input(&to_tensor(&random_m(&mut rng, n_obj, D)));
        let out = text_object_fusion(&mut tape, x1, v, &p, "f").unwrap();
        assert_eq!(tape.dims(out), (4, D));
        let direct = multi_head(&mut tape, x1, v, v, &p.text_object, "g").unwrap();
        assert_eq!(tape.value(out), tape.value(direct));
    }
}

#[test]
fn fuse_example_examples() {
    let (params, p) = setup(7);
    let mut rng = RngState::new(8);
    let (query, objects) = (random_m(&mut rng, 3, D), random_m(&mut rng, 2, D));
    let responses: Vec<M> = (0..4).map(|i| if i == 2 { query.clone() } else { random_m(&mut rng, 2 + i, D) }).collect();
    let mut tape = Tape::new(&params, Mode::Eval);
    let qv = tape.input(&to_tensor(&query));
    let rv: Vec<_> = responses.iter().map(|r| tape.input(&to_tensor(r))).collect();
    let ov = tape.input(&to_tensor(&objects));
    let out = fuse_example(&mut tape, qv, &rv, ov, &p).unwrap();
    assert_eq!(tape.dims(out.q_o), (3, D));
    for (i, &r) in out.r_o.iter().enumerate() {
        assert_eq!(tape.dims(r), (responses[i].len(), D));
    }
    assert_eq!(tape.value(out.q_o), tape.value(out.r_o[2]), "identical inputs fuse identically");

    let want_q = fuse_sequence_oracle(&params, &query, &objects, true);
    assert!(max_scaled_err(tape.value(out.q_o), &flat(&want_q)) < 1e-12);
    for (i, r) in responses.iter().enumerate() {
        let want = fuse_sequence_oracle(&params, r, &objects, true);
        assert!(max_scaled_err(tape.value(out.r_o[i]), &flat(&want)) < 1e-12);
    }
}

fn fuse_sequence_oracle(params: &ParamSet<f64>, tokens: &M, objects: &M, positions: bool) -> M {
    common::fuse_sequence(params, HEADS, tokens, objects, EPS, positions)
}

#[test]
fn object_order_is_irrelevant_without_positions() {
    let (params, mut p) = setup(9);
    let mut rng = RngState::new(10);
    let (tokens, objects) = (random_m(&mut rng, 4, D), random_m(&mut rng, 3, D));
    let permuted: M = [2, 0, 1].iter().map(|&i| objects[i].clone()).collect();
    let run = |p: &FusionParams<f64>, objects: &M| {
        let mut tape = Tape::new(&params, Mode::Eval);
        let tv = tape.input(&to_tensor(&tokens));
        let ov = tape.input(&to_tensor(objects));
        let (out, _) = fuse_sequence(&mut tape, tv, ov, p, "s").unwrap();
        tape.value(out).to_vec()
    };
    let with_pe = (run(&p, &objects), run(&p, &permuted));
    assert!(max_scaled_err(&with_pe.0, &with_pe.1) > 1e-6, "positions should distinguish orderings");
    p.use_positions = false;
    let (a, b) = (run(&p, &objects), run(&p, &permuted));
    // Only the summation order over objects differs.
    assert!(max_scaled_err(&a, &b) < 1e-13);
    let want = fuse_sequence_oracle(&params, &tokens, &objects, false);
    assert!(max_scaled_err(&a, &flat(&want)) < 1e-12);
}

#[test]
fn fusion_layer_passes_grad_check() {
    let (mut params, p) = setup(11);
    let mut rng = RngState::new(12);
    let query = to_tensor::<f64>(&random_m(&mut rng, 3, D));
    let response = to_tensor::<f64>(&random_m(&mut rng, 2, D));
    let objects = to_tensor::<f64>(&random_m(&mut rng, 2, D));
    let mix = to_tensor::<f64>(&scale(&random_m(&mut rng, D, 4), 0.3));
    let report = grad_check(&mut params, 1e-5, None, |ps| {
        let mut tape = Tape::new(ps, Mode::Eval);
        let (q, r, o) = (tape.input(&query), tape.input(&response), tape.input(&objects));
        let out = fuse_example(&mut tape, q, &[r], o, &p)?;
        let both = tape.concat_rows(&[out.q_o, out.r_o[0]])?;
        let pooled = tape.mean_rows(both);
        let m = tape.input(&mix);
        let logits = tape.matmul(pooled, m)?;
        let loss = tape.cross_entropy(logits, 1)?;
        Ok((tape.scalar(loss), tape.backward(loss)?))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn near_identity_init_passes_rows_through() {
    let mut params = ParamSet::new();
    let mut rng = RngState::new(8);
    let mut b = ParamBuilder::new(&mut params, &mut rng);
    let p: FusionParams<f64> = b.scope("fusion", |s| FusionParams::new(s, D, HEADS, 6, EPS)).unwrap();
    p.init_near_identity(&mut params, &mut RngState::new(9), 0.0);

    // One key means every attention weight is 1, so identity maps return the row.
    let mut rng = RngState::new(10);
    let t = random_m(&mut rng, 1, D);
    let mut tape = Tape::new(&params, Mode::Eval);
    let tv = tape.input(&to_tensor(&t));
    let x1 = textual_branch(&mut tape, tv, &p, "t").unwrap();
    assert!(max_scaled_err(tape.value(x1), &flat(&t)) < 1e-15);

    let tokens = random_m(&mut rng, 3, D);
    let obj = random_m(&mut rng, 1, D);
    let (tv, ov) = (tape.input(&to_tensor(&tokens)), tape.input(&to_tensor(&obj)));
    let out = text_object_fusion(&mut tape, tv, ov, &p, "t").unwrap();
    let want: Vec<f64> = (0..3).flat_map(|_| obj[0].clone()).collect();
    assert!(max_scaled_err(tape.value(out), &want) < 1e-15);

    // The visual value map sums the object and attended-token halves.
    let wv = params.get(p.visual.v.0).data();
    for i in 0..2 * D {
        for j in 0..D {
            assert_eq!(wv[i * D + j], if i % D == j { 1.0 } else { 0.0 });
        }
    }
    let wq = params.get(p.visual.q.0).data();
    assert!((0..D).all(|j| wq[(D + j) * D + j] == 0.0 && wq[j * D + j] == 1.0));
}

#[test]
fn near_identity_noise_scales_with_fan_in() {
    let build = |seed: u64, noise: f64| {
        let mut params = ParamSet::new();
        let mut rng = RngState::new(1);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let p: FusionParams<f64> = b.scope("fusion", |s| FusionParams::new(s, 32, 4, 6, EPS)).unwrap();
        p.init_near_identity(&mut params, &mut RngState::new(seed), noise);
        (params, p)
    };
    let (a, p) = build(3, 0.1);
    let (b, _) = build(3, 0.1);
    let (base, _) = build(3, 0.0);
    for (id, fan_in) in [(p.textual.k.0, 32.0), (p.visual.q.0, 64.0), (p.text_object.out.0, 32.0)] {
        assert_eq!(a.get(id).data(), b.get(id).data());
        let dev: Vec<f64> = a.get(id).data().iter().zip(base.get(id).data()).map(|(x, y)| x - y).collect();
        let var = dev.iter().map(|d| d * d).sum::<f64>() / dev.len() as f64;
        let want = 0.01 / fan_in;
        assert!((var / want - 1.0).abs() < 0.15, "variance {var} vs {want}");
    }
}
