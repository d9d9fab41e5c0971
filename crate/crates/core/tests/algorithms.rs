mod common;

use common::criteria::*;
use common::*;
use mergeforge::algorithms::{
    consensus_ta, dare_merge, fisher_merge, ls_dataless, ls_trained, merge_group, model_soup, task_arithmetic,
    task_vectors, ties_merge, GroupStats, FISHER_EPSILON,
};
use mergeforge::tensor::{keep_count, topk_magnitude_mask};
use mergeforge::{BinaryMask, MergeRecipe, ParamGroup, ParamKey, Tensor};
use proptest::prelude::*;

fn ok(outcome: Outcome) {
    match outcome {
        Ok(summary) => println!("{summary}"),
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn equivalence_identities() {
    ok(equivalence_suite(100, 1));
}

#[test]
fn ties_consensus_and_topk_match_oracles() {
    ok(brute_force_oracles(1000, 2));
}

#[test]
fn dare_is_unbiased() {
    ok(dare_unbiased(1000, &[0.1, 0.5, 0.9], 3));
}

#[test]
fn regmean_closed_form_is_optimal() {
    ok(regmean_optimality(50, 100, 4));
}

#[test]
fn default_grids() {
    ok(grid_fidelity());
}

#[test]
fn ls_trained_with_topk_masks_equals_dataless() {
    let mut r = rng(5);
    for _ in 0..50 {
        let numel = 20;
        let pre = Tensor::from_f32(vec![numel], random_values(&mut r, numel, true)).unwrap();
        let deltas: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_f32(vec![numel], random_values(&mut r, numel, true)).unwrap())
            .collect();
        let masks: Vec<BinaryMask> = deltas.iter().map(|d| topk_magnitude_mask(d, 0.3).unwrap()).collect();
        assert_eq!(
            ls_trained(&pre, &deltas, &masks).unwrap(),
            ls_dataless(&pre, &deltas, 0.3).unwrap()
        );
        let bools: Vec<Vec<bool>> = masks.iter().map(BinaryMask::to_bools).collect();
        let taus: Vec<Vec<f32>> = deltas.iter().map(|d| d.values().to_vec()).collect();
        assert_eq!(
            ls_trained(&pre, &deltas, &masks).unwrap().values(),
            oracle_stitch(pre.values(), &taus, &bools).as_slice()
        );
    }
}

#[test]
fn half_precision_outputs_keep_the_input_dtype() {
    use mergeforge::DType;
    let pre = Tensor::new(vec![4], DType::BF16, vec![0.5, 1.0, -1.0, 2.0]).unwrap();
    let ft = vec![
        Tensor::new(vec![4], DType::BF16, vec![1.0, 1.5, -0.5, 2.5]).unwrap(),
        Tensor::new(vec![4], DType::BF16, vec![0.0, 0.5, -1.5, 1.0]).unwrap(),
    ];
    let deltas = task_vectors(&pre, &ft).unwrap();
    let out = task_arithmetic(&pre, &deltas, 0.3).unwrap();
    assert_eq!(out.dtype(), DType::BF16);
    for v in out.values() {
        assert_eq!(DType::BF16.round(*v), *v);
    }
}

fn recipes(n: usize) -> Vec<MergeRecipe> {
    vec![
        MergeRecipe::model_soup(),
        MergeRecipe::task_arithmetic(0.6),
        MergeRecipe::ties(0.3, 0.8),
        MergeRecipe::dare(0.4, 0.9, 17),
        MergeRecipe::consensus_ta(0.5, vec![0.4; n]),
        MergeRecipe::ls_dataless(0.5),
    ]
}

fn arb_problem() -> impl Strategy<Value = (Vec<f32>, Vec<Vec<f32>>)> {
    (1usize..40, 2usize..5).prop_flat_map(|(numel, n)| {
        let vals = prop::collection::vec(prop_oneof![Just(0.0f32), -2.0f32..2.0], numel);
        (vals.clone(), prop::collection::vec(vals, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topk_popcount_is_ceil(numel in 1usize..=1000, thousandths in 1u32..=1000) {
        let values: Vec<f32> = (0..numel).map(|i| ((i * 7919) % 113) as f32 - 56.0).collect();
        let t = Tensor::from_f32(vec![numel], values).unwrap();
        let frac = thousandths as f64 / 1000.0;
        let mask = topk_magnitude_mask(&t, frac).unwrap();
        let expected = (thousandths as usize * numel).div_ceil(1000);
        prop_assert_eq!(mask.count_ones(), expected);
        prop_assert_eq!(keep_count(numel, frac).unwrap(), expected);
    }

    #[test]
    fn masks_are_idempotent(values in prop::collection::vec(-5.0f32..5.0, 1..64), tenths in 1u32..=10) {
        let t = Tensor::from_f32(vec![values.len()], values).unwrap();
        let m = topk_magnitude_mask(&t, tenths as f64 / 10.0).unwrap();
        let once = m.apply(&t).unwrap();
        prop_assert_eq!(m.apply(&once).unwrap(), once);
    }

    /// Positions where every task vector is zero keep the pretrained value.
    #[test]
    fn merges_are_local((pre, mut taus) in arb_problem(), zero_at in 0usize..40) {
        let numel = pre.len();
        let j = zero_at % numel;
        for t in &mut taus {
            t[j] = 0.0;
        }
        let n = taus.len();
        let pre_t = Tensor::vector(&pre);
        let ft: Vec<Tensor> = taus
            .iter()
            .map(|t| Tensor::vector(&t.iter().zip(&pre).map(|(d, p)| d + p).collect::<Vec<_>>()))
            .collect();
        for recipe in recipes(n) {
            let group = ParamGroup { key: ParamKey::from("k"), pretrained: pre_t.clone(), finetuned: ft.clone() };
            let out = merge_group(&recipe, group, GroupStats::None).unwrap();
            prop_assert_eq!(out.values()[j], pre[j], "{}", recipe.method);
        }
        let fisher = vec![Tensor::vector(&vec![1.0; numel]); n];
        let out = fisher_merge(&ft, &fisher, FISHER_EPSILON).unwrap();
        prop_assert_eq!(out.values()[j], pre[j]);
    }

    /// Reordering the finetuned models does not change the result beyond
    /// summation-order rounding.
    #[test]
    fn merges_are_permutation_symmetric((pre, taus) in arb_problem(), rot in 1usize..4) {
        let n = taus.len();
        let pre_t = Tensor::vector(&pre);
        let deltas: Vec<Tensor> = taus.iter().map(|t| Tensor::vector(t)).collect();
        let mut rotated = deltas.clone();
        rotated.rotate_left(rot % n);
        let close = |a: &Tensor, b: &Tensor| max_abs_diff(a.values(), b.values()) <= 1e-6;
        prop_assert!(close(&model_soup(&deltas).unwrap(), &model_soup(&rotated).unwrap()));
        prop_assert!(close(&task_arithmetic(&pre_t, &deltas, 0.4).unwrap(), &task_arithmetic(&pre_t, &rotated, 0.4).unwrap()));
        prop_assert!(close(&ties_merge(&pre_t, &deltas, 0.5, 0.7).unwrap(), &ties_merge(&pre_t, &rotated, 0.5, 0.7).unwrap()));
        prop_assert!(close(&ls_dataless(&pre_t, &deltas, 0.4).unwrap(), &ls_dataless(&pre_t, &rotated, 0.4).unwrap()));
        let lt = vec![0.3; n];
        prop_assert!(close(&consensus_ta(&pre_t, &deltas, 0.6, &lt).unwrap(), &consensus_ta(&pre_t, &rotated, 0.6, &lt).unwrap()));
    }

    /// DARE output only depends on (seed, task, key, index), not on how the
    /// work is split.
    #[test]
    fn dare_depends_only_on_its_key((pre, taus) in arb_problem(), seed in any::<u64>()) {
        let pre_t = Tensor::vector(&pre);
        let deltas: Vec<Tensor> = taus.iter().map(|t| Tensor::vector(t)).collect();
        let a = dare_merge("x", &pre_t, &deltas, 0.5, 1.0, seed).unwrap();
        let b = dare_merge("x", &pre_t, &deltas, 0.5, 1.0, seed).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
