mod common;

use common::*;
use proptest::prelude::*;
use std::collections::VecDeque;
use vcr_core::encoder::{
    co_attention_stack, guided_attention_unit, inject_memory, self_attention_unit, EncoderParams, MemoryCell,
};
use vcr_core::numerics::{grad_check, Mode, ParamBuilder, ParamSet, RngState, Tape, Tensor};
use vcr_core::Error;

const D: usize = 8;
const HEADS: usize = 2;
const EPS: f64 = 1e-5;

fn setup(blocks: usize, seed: u64) -> (ParamSet<f64>, EncoderParams) {
    let mut params = ParamSet::new();
    let mut rng = RngState::new(seed);
    let mut b = ParamBuilder::new(&mut params, &mut rng);
    let p = b.scope("encoder", |s| EncoderParams::new(s, blocks, D, HEADS, 16, 0.1, EPS)).unwrap();
    let ids: Vec<_> = params.ids().filter(|&id| !params.name(id).ends_with("weight")).collect();
    for id in ids {
        for (i, v) in params.get_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.05 * ((i + 1) as f64).cos();
        }
    }
    (params, p)
}

#[test]
fn self_attention_unit_examples() {
    let (params, p) = setup(1, 1);
    let unit = &p.blocks[0].self_query;
    let mut rng = RngState::new(2);
    let mut tape = Tape::new(&params, Mode::Eval);
    for n in 1..5 {
        let x = random_m(&mut rng, n, D);
        let xv = tape.input(&to_tensor(&x));
        let out = self_attention_unit(&mut tape, xv, unit, &p, "s").unwrap();
        assert_eq!(tape.dims(out), (n, D));
        let want = attention_unit(&params, "encoder.block0.self_query", HEADS, &x, &x, EPS);
        assert!(max_scaled_err(tape.value(out), &flat(&want)) < 1e-12);
    }
    let row = random_m(&mut rng, 1, D);
    let xv = tape.input(&to_tensor(&vec![row[0].clone(), row[0].clone()]));
    let out = self_attention_unit(&mut tape, xv, unit, &p, "s").unwrap();
    let v = tape.value(out);
    assert_eq!(v[..D], v[D..]);
}

#[test]
fn guided_attention_unit_examples() {
    let (params, p) = setup(1, 3);
    let unit = &p.blocks[0].guided_query;
    let mut rng = RngState::new(4);
    let mut tape = Tape::new(&params, Mode::Eval);
    let x = random_m(&mut rng, 3, D);
    let xv = tape.input(&to_tensor(&x));
    for m in 1..5 {
        let y = random_m(&mut rng, m, D);
        let yv = tape.input(&to_tensor(&y));
        let out = guided_attention_unit(&mut tape, xv, yv, unit, &p, "g").unwrap();
        assert_eq!(tape.dims(out), (3, D));
        let want = attention_unit(&params, "encoder.block0.guided_query", HEADS, &x, &y, EPS);
        assert!(max_scaled_err(tape.value(out), &flat(&want)) < 1e-12);
    }
    // One guide row: the attended value is the same for every query position.
    let y = random_m(&mut rng, 1, D);
    let w = MhaW::load(&params, "encoder.block0.guided_query.attention", HEADS);
    let attended = linear(&linear(&y, &w.wv, Some(&w.bv)), &w.wo, Some(&w.bo));
    let want = attention_unit(&params, "encoder.block0.guided_query", HEADS, &x, &y, EPS);
    assert!(max_scaled_err(&flat(&mha(&x, &y, &y, &w)), &flat(&vec![attended[0].clone(); 3])) < 1e-13);
    let yv = tape.input(&to_tensor(&y));
    let out = guided_attention_unit(&mut tape, xv, yv, unit, &p, "g").unwrap();
    assert!(max_scaled_err(tape.value(out), &flat(&want)) < 1e-12);

    let wide = tape.input(&Tensor::zeros(&[2, D + 2]).unwrap());
    assert!(matches!(guided_attention_unit(&mut tape, xv, wide, unit, &p, "g"), Err(Error::Shape { .. })));
}

#[test]
fn co_attention_stack_matches_composition() {
    for blocks in [1, 2] {
        let (params, p) = setup(blocks, 5 + blocks as u64);
        let mut rng = RngState::new(6);
        let (q, r) = (random_m(&mut rng, 4, D), random_m(&mut rng, 3, D));
        let mut tape = Tape::new(&params, Mode::Eval);
        let (qv, rv) = (tape.input(&to_tensor(&q)), tape.input(&to_tensor(&r)));
        let (zq, zr) = co_attention_stack(&mut tape, qv, rv, &p).unwrap();
        assert_eq!(tape.dims(zq), (4, D));
        assert_eq!(tape.dims(zr), (3, D));
        let (wq, wr) = co_attention(&params, blocks, HEADS, &q, &r, EPS);
        assert!(max_scaled_err(tape.value(zq), &flat(&wq)) < 1e-12);
        assert!(max_scaled_err(tape.value(zr), &flat(&wr)) < 1e-12);

        let mut again = Tape::new(&params, Mode::Eval);
        let (qv, rv) = (again.input(&to_tensor(&q)), again.input(&to_tensor(&r)));
        let (zq2, zr2) = co_attention_stack(&mut again, qv, rv, &p).unwrap();
        assert_eq!(tape.value(zq), again.value(zq2));
        assert_eq!(tape.value(zr), again.value(zr2));
    }
}

#[test]
fn zeroed_branches_leave_the_norm_cascade() {
    let (params, mut p) = setup(2, 7);
    p.zero_branches = true;
    let mut rng = RngState::new(8);
    let (q, r) = (random_m(&mut rng, 3, D), random_m(&mut rng, 2, D));
    let mut tape = Tape::new(&params, Mode::Eval);
    let (qv, rv) = (tape.input(&to_tensor(&q)), tape.input(&to_tensor(&r)));
    let (zq, zr) = co_attention_stack(&mut tape, qv, rv, &p).unwrap();
    let cascade = |x: &M, units: &[&str]| {
        let mut x = x.clone();
        for b in 0..2 {
            for u in units {
                for n in ["norm1", "norm2"] {
                    let g = param(&params, &format!("encoder.block{b}.{u}.{n}.gamma"));
                    let be = param(&params, &format!("encoder.block{b}.{u}.{n}.beta"));
                    x = layer_norm(&x, &g, &be, EPS);
                }
            }
        }
        x
    };
    let wq = cascade(&q, &["self_query", "guided_query"]);
    let wr = cascade(&r, &["self_response", "guided_response"]);
    assert!(max_scaled_err(tape.value(zq), &flat(&wq)) < 1e-12);
    assert!(max_scaled_err(tape.value(zr), &flat(&wr)) < 1e-12);
}

#[test]
fn memory_read_and_write_examples() {
    let mut cell = MemoryCell::<f64>::new(3, 2).unwrap();
    assert!(cell.read().is_none());
    cell.write(&[1.0, 2.0]).unwrap();
    assert_eq!(cell.len(), 1);
    cell.write(&[3.0, 4.0]).unwrap();
    assert_eq!(cell.read().unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    cell.write(&[5.0, 6.0]).unwrap();
    assert_eq!(cell.len(), 3);
    // Fourth write into capacity 3: the first entry goes, order is kept.
    cell.write(&[7.0, 8.0]).unwrap();
    assert_eq!(cell.len(), 3);
    assert_eq!(cell.read().unwrap().data(), &[3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    assert_eq!(cell.step(), 4);

    let v = [0.1f64 + 0.2, -1e-300];
    cell.write(&v).unwrap();
    assert_eq!(cell.entries().last().unwrap(), &v);

    assert!(matches!(cell.write(&[f64::NAN, 0.0]), Err(Error::Numeric(_))));
    assert!(matches!(cell.write(&[1.0]), Err(Error::Shape { .. })));
    assert!(matches!(MemoryCell::<f64>::new(0, 2), Err(Error::Config(_))));
    cell.reset();
    assert!(cell.is_empty());
    assert_eq!(cell.step(), 0);
}

#[test]
fn inject_memory_examples() {
    let (params, p) = setup(1, 9);
    let w = param(&params, "encoder.memory_projection.weight");
    let b = param(&params, "encoder.memory_projection.bias");
    let mut rng = RngState::new(10);
    let z = random_m(&mut rng, 2, D);
    let mut cell = MemoryCell::<f64>::new(4, D).unwrap();
    let run = |cell: &MemoryCell<f64>| {
        let mut tape = Tape::new(&params, Mode::Eval);
        let zv = tape.input(&to_tensor(&z));
        let out = inject_memory(&mut tape, zv, cell, &p).unwrap();
        assert_eq!(tape.dims(out), (3, D));
        assert_eq!(tape.value(out)[..2 * D], flat(&z)[..]);
        tape.value(out)[2 * D..].to_vec()
    };
    assert_eq!(run(&cell), b[0]);

    let v1: Vec<f64> = random_m(&mut rng, 1, D).remove(0);
    cell.write(&v1).unwrap();
    let want = linear(&vec![v1.clone()], &w, Some(&b));
    assert!(max_scaled_err(&run(&cell), &want[0]) < 1e-13);

    let v2: Vec<f64> = random_m(&mut rng, 1, D).remove(0);
    cell.write(&v2).unwrap();
    let mean: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| (a + b) / 2.0).collect();
    let want: Vec<f64> = (0..D).map(|j| b[0][j] + (0..D).map(|i| mean[i] * w[i][j]).sum::<f64>()).collect();
    assert!(max_scaled_err(&run(&cell), &want) < 1e-13);
}

#[test]
fn encoder_with_memory_passes_grad_check() {
    let (mut params, p) = setup(2, 11);
    let mut rng = RngState::new(12);
    let q = to_tensor::<f64>(&random_m(&mut rng, 3, D));
    let r = to_tensor::<f64>(&random_m(&mut rng, 2, D));
    let mut cell = MemoryCell::<f64>::new(4, D).unwrap();
    for _ in 0..2 {
        cell.write(&random_m(&mut rng, 1, D).remove(0)).unwrap();
    }
    let mix = to_tensor::<f64>(&scale(&random_m(&mut rng, D, 3), 0.3));
    let report = grad_check(&mut params, 1e-5, None, |ps| {
        let mut tape = Tape::new(ps, Mode::Eval);
        let (qv, rv) = (tape.input(&q), tape.input(&r));
        let (zq, zr) = co_attention_stack(&mut tape, qv, rv, &p)?;
        let zq = inject_memory(&mut tape, zq, &cell, &p)?;
        let zr = inject_memory(&mut tape, zr, &cell, &p)?;
        let both = tape.concat_rows(&[zq, zr])?;
        let pooled = tape.mean_rows(both);
        let m = tape.input(&mix);
        let logits = tape.matmul(pooled, m)?;
        let loss = tape.cross_entropy(logits, 2)?;
        Ok((tape.scalar(loss), tape.backward(loss)?))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[derive(Clone, Debug)]
enum MemOp {
    Write(Vec<f64>),
    Reset,
    Snapshot,
}

fn mem_op(width: usize) -> impl Strategy<Value = MemOp> {
    prop_oneof![
        8 => proptest::collection::vec(-1e3f64..1e3, width).prop_map(MemOp::Write),
        1 => Just(MemOp::Reset),
        1 => Just(MemOp::Snapshot),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn memory_cell_tracks_a_reference_fifo(capacity in 1usize..6, ops in proptest::collection::vec(mem_op(3), 0..40)) {
        let mut cell = MemoryCell::<f64>::new(capacity, 3).unwrap();
        let mut reference: VecDeque<Vec<f64>> = VecDeque::new();
        for op in ops {
            match op {
                MemOp::Write(v) => {
                    cell.write(&v).unwrap();
                    reference.push_back(v.clone());
                    if reference.len() > capacity {
                        reference.pop_front();
                    }
                    let read = cell.read().unwrap();
                    prop_assert_eq!(read.row(read.rows() - 1), v.as_slice());
                }
                MemOp::Reset => {
                    cell.reset();
                    reference.clear();
                }
                MemOp::Snapshot => {
                    let restored = MemoryCell::<f64>::from_snapshot(&cell.snapshot()).unwrap();
                    prop_assert_eq!(&restored, &cell);
                }
            }
            prop_assert!(cell.len() <= capacity);
            let stored: Vec<Vec<f64>> = cell.entries().map(<[f64]>::to_vec).collect();
            prop_assert_eq!(stored, reference.iter().cloned().collect::<Vec<_>>());
        }
    }
}
