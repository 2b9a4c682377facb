//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL` line.

use std::path::Path;
use std::time::Instant;

use fmvp_core::autodiff::Tensor;
use fmvp_core::config::{RunConfig, RunMode};
use fmvp_core::encoders::{ClassEmbedding, TextEmbeddingStore};
use fmvp_core::eval::harmonic_mean;
use fmvp_core::experiment::{self, gradcheck, run_training, split_plan, sub_seed, World, GRADCHECK_TOLERANCE};
use fmvp_core::fed::{aggregate, client_local_train, ledger_report, ClientPayload, CommLedger, REFERENCE_RATIO};
use fmvp_core::model::ModelState;
use fmvp_core::objective::{class_probs, ScoringMode, SlotBank};
use fmvp_core::promptformer::{generate_prompts, LoraBank, PayloadKind, PromptFormerConfig, PromptFormerParams};
use fmvp_core::rng;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;

fn verdict(n: usize, ok: bool, detail: impl AsRef<str>) {
    println!("criterion {n}: {} ({})", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(ok, "criterion {n} failed: {}", detail.as_ref());
}

fn config(name: &str, sets: &[&str]) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let overrides: Vec<_> = sets.iter().map(|s| RunConfig::parse_override(s).unwrap()).collect();
    RunConfig::load(path, &overrides).unwrap()
}

#[test]
fn criterion_01_gradient_fidelity() {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for seed in 0..5 {
        let seed_set = format!("seed={seed}");
        let cfg = config("gradcheck.cfg", &[&seed_set]);
        assert_eq!((cfg.d_v, cfg.d_t, cfg.patch_grid * cfg.patch_grid, cfg.m), (16, 8, 4, 2));
        let world = World::<f64>::build(&cfg, cfg.mode).unwrap();
        let client = &world.clients[0];
        assert_eq!(client.shard.classes().len(), 3);
        assert!(client.shard.classes().iter().all(|&k| world.bundle.text.class(k).num_attributes() == 2));
        let g = gradcheck(&cfg, false).unwrap();
        worst = worst.max(g.max_rel_error);
        coords += g.coordinates;
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        1,
        worst < GRADCHECK_TOLERANCE && secs < 30.0,
        format!("max rel error {worst:.2e} over {coords} coordinates, 5 seeds, {secs:.1} s"),
    );
}

fn round_exact(q: &BigRational) -> f64 {
    let guess = q.to_f64().unwrap();
    let mut best = guess;
    let mut best_err = (q - BigRational::from_float(best).unwrap()).abs();
    for c in [guess.next_down(), guess.next_up()] {
        let err = (q - BigRational::from_float(c).unwrap()).abs();
        if err < best_err || (err == best_err && c.to_bits() & 1 == 0) {
            best = c;
            best_err = err;
        }
    }
    best
}

fn brute_mean(values: &[f64]) -> f64 {
    let sum = values
        .iter()
        .map(|&v| BigRational::from_float(v).unwrap())
        .fold(BigRational::zero(), |a, b| a + b);
    let q = sum / BigRational::from_integer(BigInt::from(values.len()));
    if q.is_zero() {
        return if values.iter().all(|v| v.to_bits() == (-0.0f64).to_bits()) { -0.0 } else { 0.0 };
    }
    round_exact(&q)
}

fn small_config() -> PromptFormerConfig {
    PromptFormerConfig::new(1, 4, 3, 2)
}

fn random_payload(id: usize, kind: PayloadKind, seed: u64) -> ClientPayload<f64> {
    let mut r = rng::rng(seed);
    let params = PromptFormerParams::<f64>::init(small_config(), seed).unwrap();
    let names: Vec<(String, Vec<usize>)> = match kind {
        PayloadKind::FullParams => params.named().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect(),
        PayloadKind::LoraOnly => LoraBank::inject(&params, 2, seed)
            .unwrap()
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect(),
    };
    let scale = [1e-3, 1.0, 1e3][seed as usize % 3];
    let tensors = names
        .into_iter()
        .map(|(n, shape)| (n, Tensor::randn(&shape, scale, &mut r)))
        .collect::<Vec<_>>();
    ClientPayload {
        client_id: id,
        kind,
        param_count: tensors.iter().map(|(_, t)| t.numel()).sum(),
        tensors,
        train_loss: 0.0,
        initial_loss: 0.0,
    }
}

#[test]
fn criterion_02_aggregation_oracle() {
    let mut runner = TestRunner::new(PropConfig {
        cases: 500,
        ..PropConfig::default()
    });
    let strategy = (0usize..=8, 0usize..=8, any::<u64>(), any::<bool>()).prop_filter("not empty", |(f, l, _, _)| f + l > 0);
    let result = runner.run(&strategy, |(n_full, n_lora, seed, with_bank)| {
        let mut state = ModelState {
            params: PromptFormerParams::<f64>::init(small_config(), seed).unwrap(),
            lora: None,
        };
        if with_bank {
            state.lora = Some(LoraBank::inject(&state.params, 2, seed ^ 7).unwrap());
        }
        let mut payloads = Vec::new();
        for i in 0..n_full + n_lora {
            let kind = if i < n_full { PayloadKind::FullParams } else { PayloadKind::LoraOnly };
            payloads.push(random_payload(i, kind, seed.wrapping_add(31 * i as u64 + 1)));
        }
        let got = aggregate(&state, &payloads).unwrap();
        for (kind, tensors) in [
            (PayloadKind::FullParams, got.params.tensors()),
            (
                PayloadKind::LoraOnly,
                got.lora.as_ref().map(|b| b.tensors()).unwrap_or_default(),
            ),
        ] {
            let bucket: Vec<&ClientPayload<f64>> = payloads.iter().filter(|p| p.kind == kind).collect();
            if bucket.is_empty() {
                continue;
            }
            for (t, out) in tensors.iter().enumerate() {
                for (c, &v) in out.data().iter().enumerate() {
                    let column: Vec<f64> = bucket.iter().map(|p| p.tensors[t].1.data()[c]).collect();
                    let expect = brute_mean(&column);
                    prop_assert_eq!(v.to_bits(), expect.to_bits(), "{:?} tensor {} coord {}", kind, t, c);
                }
            }
        }
        if n_full == 0 {
            prop_assert_eq!(&got.params, &state.params);
        }
        if n_lora == 0 {
            prop_assert_eq!(&got.lora, &state.lora);
        }
        Ok(())
    });
    let detail = match &result {
        Ok(()) => "500 random payload mixes, every coordinate within 0 ulp".to_string(),
        Err(e) => e.to_string(),
    };
    verdict(2, result.is_ok(), detail);
}

#[test]
fn criterion_03_fedavg_identity_and_order() {
    let state = ModelState {
        params: PromptFormerParams::<f64>::init(small_config(), 1).unwrap(),
        lora: None,
    };
    let mut ok = true;
    let mut r = rng::rng(3);
    for n in 1..=9 {
        let one = random_payload(0, PayloadKind::FullParams, 100 + n as u64);
        let same: Vec<_> = (0..n)
            .map(|i| ClientPayload {
                client_id: i,
                ..one.clone()
            })
            .collect();
        let got = aggregate(&state, &same).unwrap();
        let identical = got
            .params
            .named()
            .iter()
            .zip(&one.tensors)
            .all(|((_, a), (_, b))| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        ok &= identical;

        let mut mixed: Vec<_> = (0..n)
            .map(|i| {
                let kind = if i % 3 == 2 { PayloadKind::LoraOnly } else { PayloadKind::FullParams };
                random_payload(i, kind, 200 + 17 * i as u64 + n as u64)
            })
            .collect();
        let reference = aggregate(&state, &mixed).unwrap();
        for _ in 0..5 {
            mixed.shuffle(&mut r);
            ok &= aggregate(&state, &mixed).unwrap() == reference;
        }
    }
    verdict(3, ok, "identical payloads reproduce bitwise; 5 shuffles per mix give the same aggregate");
}

fn random_unit_store(k: usize, max_j: usize, d: usize, r: &mut rng::Rng) -> TextEmbeddingStore<f64> {
    use rand::Rng;
    let classes = (0..k)
        .map(|i| {
            let j = r.random_range(1..=max_j);
            ClassEmbedding {
                name: format!("c{i}"),
                texts: Tensor::randn(&[j, d], 1.0, r),
                attributes: Tensor::randn(&[j, d], 1.0, r),
            }
        })
        .collect();
    TextEmbeddingStore::new(d, classes).unwrap()
}

/// Per attribute position: softmax over classes of cos/tau; averaged over positions.
fn desc_double_loop(v: &[f64], store: &TextEmbeddingStore<f64>, classes: &[usize], tau: f64) -> Vec<f64> {
    let width = classes.iter().map(|&k| store.class(k).texts.rows()).max().unwrap();
    let mut out = vec![0.0; classes.len()];
    for j in 0..width {
        let mut logits = Vec::new();
        for &k in classes {
            let t = &store.class(k).texts;
            let row = t.row_slice(j % t.rows());
            let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            let na: f64 = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            logits.push(dot / (na * nb) / tau);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (o, l) in out.iter_mut().zip(&logits) {
            *o += (l - max).exp() / z / width as f64;
        }
    }
    out
}

#[test]
fn criterion_04_desc_scoring_oracle() {
    use rand::Rng;
    let mut r = rng::rng(4);
    let mut worst: f64 = 0.0;
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let k = r.random_range(1..=5);
        let d = r.random_range(2..=16);
        let store = random_unit_store(k, 4, d, &mut r);
        let tau = 10f64.powf(r.random_range(-2.0..0.0));
        let raw = Tensor::randn(&[1, d], 1.0, &mut r);
        let n = raw.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let v = raw.map(|x| x / n);
        let classes: Vec<usize> = (0..k).collect();
        let bank = SlotBank::new(&store, &classes, ScoringMode::Desc).unwrap();
        let got = class_probs(&v, &bank, tau).unwrap();
        let expect = desc_double_loop(v.data(), &store, &classes, tau);
        for (a, b) in got.iter().zip(&expect) {
            worst = worst.max((a - b).abs());
        }
        worst_sum = worst_sum.max((got.iter().sum::<f64>() - 1.0).abs());
    }
    verdict(
        4,
        worst < 1e-6 && worst_sum < 1e-6,
        format!("1000 cases, max abs diff {worst:.1e}, max |sum - 1| {worst_sum:.1e}"),
    );
}

#[test]
fn criterion_05_partition_invariants() {
    let mut ok = true;
    for seed in 0..200 {
        let seed_set = format!("seed={seed}");
        let cfg = config("toy.cfg", &[&seed_set]);
        let (plan, _) = split_plan(&cfg, RunMode::Base2New).unwrap();
        for i in 0..plan.clients.len() {
            for j in i + 1..plan.clients.len() {
                ok &= plan.clients[i].iter().all(|k| !plan.clients[j].contains(k));
            }
        }
        let mut union: Vec<usize> = plan.clients.concat();
        union.sort_unstable();
        ok &= union == plan.base;
        ok &= plan.base.iter().all(|k| !plan.new.contains(k));
        ok &= plan.base.len() == 12 && plan.new.len() == 4;
    }
    verdict(5, ok, "200 seeds: disjoint clients, union = base, base and new disjoint");
}

#[test]
fn criterion_06_lora_contract() {
    let cfg = config("gradcheck.cfg", &["precision=f32", "federation.lora_threshold=0.5", "optim.lr=0.05", "optim.clip_norm=1"]);
    let world = World::<f32>::build(&cfg, cfg.mode).unwrap();

    // Fresh bank is output neutral.
    let state = world.initial_model().unwrap();
    let bank = LoraBank::inject(&state.params, cfg.lora_rank, 9).unwrap();
    let mut r = rng::rng(6);
    let attrs = Tensor::<f32>::randn(&[6, cfg.d_t], 1.0, &mut r);
    let patches = Tensor::<f32>::randn(&[4, cfg.d_v], 1.0, &mut r);
    let plain = generate_prompts(&state.params, None, &attrs, &patches).unwrap();
    let adapted = generate_prompts(&state.params, Some(&bank), &attrs, &patches).unwrap();
    let neutral = plain.data().iter().zip(adapted.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    // Train one client round after round until its round-start loss drops under the threshold.
    let client = &world.clients[0];
    let seed = sub_seed(&cfg, "federation");
    let mut model = state.clone();
    let mut kinds_match = true;
    let mut saw = (false, false);
    let mut count_ok = true;
    let mut base_kept = true;
    for round in 0..40 {
        let p = client_local_train(&world.bundle, &model, client, &world.settings, round, seed).unwrap();
        kinds_match &= (p.kind == PayloadKind::LoraOnly) == (p.initial_loss < 0.5);
        let before = model.params.checksum();
        model = aggregate(&model, std::slice::from_ref(&p)).unwrap();
        match p.kind {
            PayloadKind::FullParams => saw.0 = true,
            PayloadKind::LoraOnly => {
                saw.1 = true;
                count_ok &= p.param_count == 12 * cfg.d_v * cfg.lora_rank;
                count_ok &= p.tensors.iter().all(|(n, _)| n.starts_with("lora."));
                base_kept &= model.params.checksum() == before;
            }
        }
        if saw.1 {
            break;
        }
    }
    verdict(
        6,
        neutral && kinds_match && saw.0 && saw.1 && count_ok && base_kept,
        format!(
            "neutral {neutral}, kind follows loss {kinds_match}, saw full/lora {saw:?}, count 12*{}*{} {count_ok}, base unchanged {base_kept}",
            cfg.d_v, cfg.lora_rank
        ),
    );
}

#[test]
fn criterion_07_frozen_contract() {
    let cfg = config("toy.cfg", &["federation.rounds=20"]);
    let a = run_training(&cfg).unwrap();
    verdict(
        7,
        a.frozen_before == a.frozen_after && a.history.len() == 20,
        format!("vision/text checksums {:016x}/{:016x} across 20 rounds", a.frozen_before.0, a.frozen_before.1),
    );
}

#[test]
fn criterion_08_toy_end_to_end_learning() {
    let t = Instant::now();
    let mut lines = Vec::new();
    let mut passed = 0;
    for seed in 0..3 {
        let seed_set = format!("seed={seed}");
        let cfg = config("toy.cfg", &[&seed_set]);
        assert!(cfg.rounds <= 30 && cfg.d_v == 32 && cfg.shots == 8 && cfg.classes_per_client == 2);
        let a = run_training(&cfg).unwrap();
        let last = a.history.last().unwrap();
        let ok = last.base_acc >= 0.90 && last.new_acc >= 1.5 * 0.25;
        passed += ok as usize;
        lines.push(format!("seed {seed}: base {:.3} new {:.3}", last.base_acc, last.new_acc));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(8, passed == 3 && secs < 120.0, format!("{}; {passed}/3 seeds, {secs:.1} s", lines.join(", ")));
}

#[test]
fn criterion_09_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let out_set = format!("output_dir={}", out.display());
        let cfg = config("toy.cfg", &["federation.rounds=4", &out_set]);
        run_training(&cfg).unwrap().write(&cfg.output_dir).unwrap();
        outputs.push(out);
    }
    let same = |f: &str| std::fs::read(outputs[0].join(f)).unwrap() == std::fs::read(outputs[1].join(f)).unwrap();
    verdict(
        9,
        same(experiment::METRICS_FILE) && same(experiment::CHECKPOINT_FILE),
        "two runs give byte-identical metrics.csv and final.fmvp",
    );
}

#[test]
fn criterion_10_harmonic_mean() {
    use rand::Rng;
    let mut ok = true;
    for x in [0.0, 0.25, 1.0 / 3.0, 0.9, 1.0] {
        ok &= harmonic_mean(x, x) == x;
        ok &= harmonic_mean(x, 0.0) == 0.0 && harmonic_mean(0.0, x) == 0.0;
    }
    let mut r = rng::rng(10);
    for _ in 0..10 {
        let (a, b): (f64, f64) = (r.random_range(0.01..1.0), r.random_range(0.01..1.0));
        let exact = BigRational::from_float(a).unwrap() * BigRational::from_float(b).unwrap() * BigRational::from_integer(2.into())
            / (BigRational::from_float(a).unwrap() + BigRational::from_float(b).unwrap());
        let expect = exact.to_f64().unwrap();
        ok &= (harmonic_mean(a, b) - expect).abs() <= 4.0 * f64::EPSILON * expect;
    }
    let mut ledger = CommLedger::new();
    ledger.record_round(1, vec![0], [(0, PayloadKind::FullParams, 100)]);
    let text = ledger_report(&ledger, 100, 8).to_string();
    ok &= text.contains(&format!("x{REFERENCE_RATIO}"));
    verdict(10, ok, "identities, 10 random cases, reference upload ratio reported");
}
