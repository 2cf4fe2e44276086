mod common;

use std::sync::Arc;

use alphaprog::evaluator::{evaluate, fingerprint, EvalContext};
use alphaprog::expr::parse_expr;
use alphaprog::program::{AlphaProgram, ExprTree, InstructionSet};
use common::{close_enough, random_dataset, rng, CellEvaluator};

fn assert_panels_match(tree: &Arc<ExprTree>, ds: &alphaprog::data::Dataset, tol: f64) {
    let fast = evaluate(tree, ds).unwrap();
    let slow = CellEvaluator::new(ds).panel(tree);
    for ((d, s), &a) in fast.indexed_iter() {
        let b = slow[[d, s]];
        assert!(close_enough(a, b, tol), "{tree} at ({d},{s}): {a} vs {b}");
    }
}

#[test]
fn range_ratio_program_equals_direct_formula() {
    let ds = random_dataset(3, 30, 9);
    let iset = InstructionSet::with_defaults();
    let program = iset
        .parse_program("Start,Null,Null,Null\nSub,close,open,Null\nSub,high,low,Null\nDiv,Reg0,Reg1,Null\nEnd,Null,Null,Null")
        .unwrap();
    let z = evaluate(&iset.compile(&program).unwrap(), &ds).unwrap();
    let f = |n: &str| ds.feature(n).unwrap();
    for ((d, s), &v) in z.indexed_iter() {
        let direct = (f("close")[[d, s]] - f("open")[[d, s]]) / (f("high")[[d, s]] - f("low")[[d, s]]);
        assert!((v - direct).abs() <= 1e-12, "({d},{s})");
    }
}

#[test]
fn random_programs_match_cell_oracle() {
    let ds = random_dataset(11, 40, 8);
    let iset = InstructionSet::with_defaults();
    let mut r = rng(12);
    let mut checked = 0;
    while checked < 150 {
        let state = iset.sample_program(&mut r, 16, checked % 2 == 0);
        let Some(slot) = state.result() else { continue };
        assert_panels_match(&slot.tree, &ds, 1e-9);
        checked += 1;
    }
}

#[test]
fn handpicked_expressions_match_cell_oracle() {
    let ds = random_dataset(5, 70, 7);
    for text in [
        "CS-Rank(volume)",
        "TS-Rank(close,5)",
        "TS-Corr(close,volume,10)",
        "TS-Cov(high,low,3)",
        "TS-Std(TS-Delta(close,1),20)",
        "Sign(Sub(close,open))",
        "Ln(Div(high,low))",
        "TS-Max(CS-Rank(Div(volume,vwap)),60)",
        "TS-Min(Abs(Sub(close,vwap)),15)",
    ] {
        assert_panels_match(&parse_expr(text).unwrap(), &ds, 1e-9);
    }
}

#[test]
fn cache_gives_identical_results() {
    let ds = random_dataset(8, 30, 6);
    let ctx = EvalContext::new(&ds);
    let t = parse_expr("TS-Mean(Div(Sub(close,open),Sub(high,low)),5)").unwrap();
    let a = ctx.evaluate(&t).unwrap();
    let b = ctx.evaluate(&parse_expr("TS-Mean(Div(Sub(close,open),Sub(high,low)),5)").unwrap()).unwrap();
    assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(fingerprint(&t), fingerprint(&parse_expr("TS-Mean((close-open)/(high-low),5)").unwrap()));
}

#[test]
fn serialized_programs_reparse() {
    let iset = InstructionSet::with_defaults();
    let mut r = rng(77);
    for _ in 0..300 {
        let state = iset.sample_program(&mut r, 16, true);
        let text = state.program.serialize();
        let back = AlphaProgram::parse(&text).unwrap();
        assert_eq!(back, state.program);
        assert_eq!(iset.run(&back).unwrap(), state);
    }
}
