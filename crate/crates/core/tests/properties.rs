//! Randomized invariants of the numeric core, the objective and the splitter.

use fmvp_core::autodiff::{Tape, Tensor};
use fmvp_core::data::plan_splits;
use fmvp_core::encoders::{ClassEmbedding, TextEmbeddingStore};
use fmvp_core::fed::elementwise_mean;
use fmvp_core::objective::{class_probs, ScoringMode, SlotBank};
use fmvp_core::rng;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Tensor<f64> {
    Tensor::randn(&[rows, cols], scale, &mut rng::rng(seed))
}

fn random_store(k: usize, max_j: usize, d: usize, seed: u64) -> TextEmbeddingStore<f64> {
    let mut r = rng::rng(seed);
    let classes = (0..k)
        .map(|i| {
            let j = 1 + (seed as usize + 3 * i) % max_j;
            ClassEmbedding {
                name: format!("c{i}"),
                texts: Tensor::randn(&[j, d], 1.0, &mut r),
                attributes: Tensor::randn(&[j, d], 1.0, &mut r),
            }
        })
        .collect();
    TextEmbeddingStore::new(d, classes).unwrap()
}

fn unit(d: usize, seed: u64) -> Tensor<f64> {
    let v = Tensor::randn(&[1, d], 1.0, &mut rng::rng(seed));
    let n = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(rows in 1usize..5, cols in 1usize..8, scale in 0.1f64..50.0, shift in -30.0f64..30.0, seed: u64) {
        let x = matrix(rows, cols, scale, seed);
        let mut t = Tape::new();
        let a = t.constant(x.clone()).unwrap();
        let p = t.row_softmax(a).unwrap();
        let b = t.constant(x.map(|v| v + shift)).unwrap();
        let q = t.row_softmax(b).unwrap();
        for r in 0..rows {
            let row = t.value(p).row_slice(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            for (u, w) in row.iter().zip(t.value(q).row_slice(r)) {
                prop_assert!((u - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(rows in 1usize..5, cols in 2usize..12, scale in 0.01f64..100.0, seed: u64) {
        let x = matrix(rows, cols, scale, seed);
        let mut t = Tape::new();
        let a = t.constant(x).unwrap();
        let g = t.constant(Tensor::full(&[1, cols], 1.0)).unwrap();
        let b = t.constant(Tensor::zeros(&[1, cols])).unwrap();
        let y = t.layer_norm(a, g, b).unwrap();
        for r in 0..rows {
            let row = t.value(y).row_slice(r);
            let n = cols as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-4, "var {}", var);
        }
    }

    #[test]
    fn split_plans_are_disjoint_and_cover_base(num_classes in 2usize..60, per in 1usize..8, frac in 0.2f64..0.9, seed: u64) {
        let base = ((frac * num_classes as f64).round() as usize).clamp(0, num_classes);
        match plan_splits(num_classes, per, frac, seed) {
            Ok(plan) => {
                prop_assert!(plan.validate().is_ok());
                let mut all: Vec<usize> = plan.clients.iter().flatten().copied().collect();
                all.sort_unstable();
                prop_assert_eq!(&all, &plan.base);
                prop_assert!(plan.clients.iter().all(|c| !c.is_empty() && c.len() <= per));
                let mut every: Vec<usize> = plan.base.iter().chain(&plan.new).copied().collect();
                every.sort_unstable();
                prop_assert_eq!(every, (0..num_classes).collect::<Vec<_>>());
            }
            Err(_) => prop_assert!(base == 0 || base == num_classes || per > base),
        }
    }

    #[test]
    fn elementwise_mean_is_bounded_and_exact(n in 1usize..12, seed: u64) {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| matrix(1, 5, 3.0, seed.wrapping_add(i as u64)).into_data()).collect();
        let slices: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let m = elementwise_mean(&slices);
        for (c, &v) in m.iter().enumerate() {
            let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            let exact = rows.iter().map(|r| r[c]).sum::<f64>() / n as f64;
            prop_assert!((v - exact).abs() <= 1e-12 * (1.0 + exact.abs()));
        }
        let same: Vec<&[f64]> = vec![rows[0].as_slice(); n];
        prop_assert_eq!(elementwise_mean(&same), rows[0].clone());
    }

    #[test]
    fn scoring_is_a_distribution(k in 1usize..6, j in 1usize..5, d in 2usize..10, tau in 0.005f64..2.0, seed: u64, desc: bool) {
        let store = random_store(k, j, d, seed);
        let classes: Vec<usize> = (0..k).collect();
        let mode = if desc { ScoringMode::Desc } else { ScoringMode::Plain };
        let bank = SlotBank::new(&store, &classes, mode).unwrap();
        let p = class_probs(&unit(d, seed ^ 1), &bank, tau).unwrap();
        prop_assert_eq!(p.len(), k);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn synthesized_rows_are_unit(k in 1usize..6, j in 1usize..4, d in 2usize..32, seed: u64) {
        let names: Vec<String> = (0..k).map(|i| format!("class{i}")).collect();
        let attrs: Vec<Vec<String>> = (0..k).map(|i| (0..j).map(|a| format!("attr{}", (i + a) % 5)).collect()).collect();
        let s = TextEmbeddingStore::<f64>::synthesize(&names, &attrs, d, seed).unwrap();
        for c in s.classes() {
            for r in 0..c.texts.rows() {
                let n = c.texts.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }
        let back = TextEmbeddingStore::<f64>::from_bytes(&s.cast::<f32>().to_bytes()).unwrap();
        for c in back.classes() {
            for r in 0..c.texts.rows() {
                let n = c.texts.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }
}
