//! Acceptance suite: one test per criterion, each printing a PASS line
//! (run with `--nocapture` to see them). Every tolerance is pinned in the
//! assertions themselves.

use std::time::Instant;

use ndarray::Array3;
use rand::Rng;

use uapforge::adapter::{EncoderBundle, ToyDualEncoder};
use uapforge::augment::{cross_mix, scmix_single, self_mix, CropResizeParams, ScMixParams};
use uapforge::dataset::{
    expand_by_captions, synth_toy_dataset, write_manifest, Caption, ExpandedPair, Geometry,
    PairedDataset,
};
use uapforge::evaluation::{evaluate_attack, resize_uap, retrieval_recall};
use uapforge::gradcheck::{central_difference, relative_error};
use uapforge::objective::{
    batch_refs, grad_global_with_refs, grad_total, loss_total, CropPlan, DivergenceConfig,
};
use uapforge::optimizer::{
    lookahead_future_grad, run_image_attack, sign0, AttackConfig, FutureMode, GpCadence,
    MomentumState,
};
use uapforge::persist::{
    load_report, load_triggers, load_uap, save_report, save_triggers, save_uap, uap_from_bytes,
    uap_to_bytes, TriggerArtifact,
};
use uapforge::rng::stream;
use uapforge::text_attack::{
    apply_trigger, mine_triggers, substitution_score, word_importance, ImportanceContext,
    TextMiningConfig, TextTrigger, TriggerPolicy,
};
use uapforge::uap::ImageUAP;
use uapforge::UapError;

const EPS: f32 = 12.0 / 255.0;

fn default_attack(seed: u64, iterations: usize) -> AttackConfig {
    AttackConfig {
        epsilon_i: EPS,
        step_size: f64::from(EPS) / iterations as f64 * 1.25,
        iterations,
        batch_size: 16,
        seed,
        gamma1: 0.9,
        gamma2: 0.1,
        lookahead: 2,
        future_sign: -1.0,
        future_mode: FutureMode::Mean,
        gp_cadence: GpCadence::PerEpoch,
        augment_enabled: true,
        use_local: true,
        scmix: ScMixParams::default(),
        crop: CropResizeParams::default(),
        crop_per_sample: false,
        divergence: DivergenceConfig::default(),
    }
}

#[test]
fn criterion_01_projection_invariant_across_full_run() {
    let start = Instant::now();
    let geometry = Geometry::new(16, 16, 3);
    let enc = ToyDualEncoder::new(11, geometry, 32);
    let ds = synth_toy_dataset(42, 64, geometry, 24, 4).unwrap();
    let cfg = default_attack(7, 20);
    let (uap, trace) = run_image_attack(&ds, &enc, &cfg).unwrap();

    assert_eq!(
        trace.len(),
        20 * 8,
        "64 pairs x 2 captions in batches of 16"
    );
    for row in &trace {
        assert!(
            row.linf <= EPS,
            "step {}: linf {} exceeds epsilon {}",
            row.step,
            row.linf,
            EPS
        );
    }
    uap.validate_budget().unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "ran {elapsed:?}, budget 2 min");
    println!(
        "ACCEPTANCE 01 PASS: max|delta| <= {EPS} after each of {} steps ({elapsed:?})",
        trace.len()
    );
}

#[test]
fn criterion_02_gradient_matches_central_differences() {
    let start = Instant::now();
    let geometry = Geometry::new(8, 8, 3);
    let enc = ToyDualEncoder::new(5, geometry, 16);
    let ds = synth_toy_dataset(9, 8, geometry, 12, 4).unwrap();
    let pairs = expand_by_captions(&ds);
    let div = DivergenceConfig::default();
    let params = ScMixParams::default();

    let mut checked = 0usize;
    for draw in 0..5u64 {
        let batch: Vec<ExpandedPair> = (0..4)
            .map(|i| pairs[((draw as usize) * 3 + i) % pairs.len()].clone())
            .collect();
        let mut arng = stream(100 + draw, "aug", &[]);
        let augmented: Vec<_> = batch
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let partner = &batch[(i + 1) % batch.len()].image;
                scmix_single(&p.image, &p.caption, partner, &params, &enc, &mut arng).unwrap()
            })
            .collect();
        let refs = batch_refs(&batch, &enc).unwrap();
        let plan = CropPlan::draw(
            &CropResizeParams::default(),
            geometry,
            false,
            batch.len(),
            &mut stream(200 + draw, "crop", &[]),
        )
        .unwrap();
        let mut delta = Array3::<f64>::zeros(geometry.shape());
        let mut drng = stream(300 + draw, "delta", &[]);
        for v in delta.iter_mut() {
            *v = drng.random_range(-f64::from(EPS)..=f64::from(EPS));
        }

        let (_, grad) = grad_total(&batch, &augmented, &refs, &delta, &plan, &enc, &div).unwrap();
        let f = |d: &Array3<f64>| {
            loss_total(&batch, &augmented, &refs, d, &plan, &enc, &div)
                .unwrap()
                .total()
        };
        let mut crng = stream(400 + draw, "coords", &[]);
        for _ in 0..5 {
            let coord = crng.random_range(0..geometry.len());
            let fd = central_difference(&f, &delta, coord, 1e-5);
            let analytic = grad.as_slice().unwrap()[coord];
            let rel = relative_error(analytic, fd);
            assert!(
                rel < 1e-4,
                "draw {draw} coord {coord}: analytic {analytic}, fd {fd}, rel {rel}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 20);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "ran {elapsed:?}, budget 30 s");
    println!(
        "ACCEPTANCE 02 PASS: d(L1+L2)/d(delta) within 1e-4 of central differences on {checked} coordinates ({elapsed:?})"
    );
}

#[test]
fn criterion_03_vanilla_reduction_is_bitwise_pgd() {
    let geometry = Geometry::new(8, 8, 3);
    let enc = ToyDualEncoder::new(13, geometry, 16);
    let ds = synth_toy_dataset(21, 8, geometry, 12, 4).unwrap();
    let seed = 33u64;
    let steps = 10usize;
    let mut cfg = default_attack(seed, steps);
    cfg.batch_size = 16; // one batch per epoch: 10 epochs = 10 steps
    cfg.gamma1 = 0.0;
    cfg.gamma2 = 0.0;
    cfg.lookahead = 0;
    cfg.augment_enabled = false;
    cfg.use_local = false;
    cfg.crop = CropResizeParams::identity();

    // Independent minimal PGD: own init, own shuffle, own update rule.
    let div = DivergenceConfig::default();
    let expanded = expand_by_captions(&ds);
    let n_t = expanded.len();
    let eps64 = f64::from(EPS);
    let mut delta = {
        let mut rng = stream(seed, "uap-init", &[]);
        let mut d = Array3::<f32>::zeros(geometry.shape());
        for v in d.iter_mut() {
            *v = rng.random_range(-eps64..=eps64) as f32;
        }
        d
    };
    let mut reference_steps: Vec<Array3<f32>> = Vec::with_capacity(steps);
    for epoch in 1..=steps as u64 {
        let mut rng = stream(seed, "shuffle", &[epoch]);
        let mut order: Vec<usize> = (0..n_t).collect();
        for i in (1..n_t).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ExpandedPair> = chunk.iter().map(|&i| expanded[i].clone()).collect();
            let refs = batch_refs(&batch, &enc).unwrap();
            let delta64 = delta.mapv(f64::from);
            let (_, g) = grad_global_with_refs(&batch, &refs, &delta64, &enc, &div).unwrap();
            let g = g / batch.len() as f64;
            for (v, &gv) in delta.iter_mut().zip(g.iter()) {
                let stepped = (f64::from(*v) + cfg.step_size * sign0(gv)).clamp(-eps64, eps64);
                *v = stepped as f32;
            }
        }
        reference_steps.push(delta.clone());
    }

    // Prefix trajectories: an M-epoch run must land exactly on the
    // reference after M steps.
    for m in 1..=steps {
        let mut prefix_cfg = cfg.clone();
        prefix_cfg.iterations = m;
        let (uap, _) = run_image_attack(&ds, &enc, &prefix_cfg).unwrap();
        assert_eq!(
            uap.delta(),
            &reference_steps[m - 1],
            "trajectory diverges from minimal PGD at step {m}"
        );
    }
    // And the single 10-step run's per-step norms match as well.
    let (_, trace) = run_image_attack(&ds, &enc, &cfg).unwrap();
    for (row, ref_delta) in trace.iter().zip(reference_steps.iter()) {
        let ref_linf = ref_delta.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert_eq!(row.linf, ref_linf, "linf differs at step {}", row.step);
    }
    println!("ACCEPTANCE 03 PASS: vanilla config reproduces minimal PGD bitwise for {steps} steps");
}

#[test]
fn criterion_04_lookahead_matches_external_rollout_and_is_pure() {
    let geometry = Geometry::new(8, 8, 3);
    let enc = ToyDualEncoder::new(17, geometry, 16);
    let ds = synth_toy_dataset(23, 8, geometry, 12, 4).unwrap();
    let pairs = expand_by_captions(&ds);
    let batch = pairs[..6].to_vec();
    let refs = batch_refs(&batch, &enc).unwrap();
    let div = DivergenceConfig::default();
    let uap = ImageUAP::random_init(geometry, EPS, &mut stream(3, "uap-init", &[])).unwrap();
    let state = MomentumState::new(geometry, 0.9, 0.1, 3, -1.0).unwrap();
    let step = f64::from(EPS) / 20.0 * 1.25;

    for d in 1..=3usize {
        let delta_before = uap.delta().clone();
        let state_before = state.clone();
        let g_f = lookahead_future_grad(&uap, &batch, &refs, d, step, &enc, &div, FutureMode::Mean)
            .unwrap();
        assert_eq!(uap.delta(), &delta_before, "delta mutated by look-ahead");
        assert_eq!(state, state_before, "momentum state mutated by look-ahead");

        // Out-of-module re-execution of the virtual roll-out.
        let eps64 = f64::from(EPS);
        let len = batch.len() as f64;
        let mut virt = uap.delta_f64();
        let (_, g0) = grad_global_with_refs(&batch, &refs, &virt, &enc, &div).unwrap();
        let mut advance = g0 / len;
        let mut acc = Array3::<f64>::zeros(geometry.shape());
        for _ in 1..=d {
            for (v, &g) in virt.iter_mut().zip(advance.iter()) {
                *v = (*v + step * sign0(g)).clamp(-eps64, eps64);
            }
            let (_, gi) = grad_global_with_refs(&batch, &refs, &virt, &enc, &div).unwrap();
            let gi = gi / len;
            acc += &gi;
            advance = gi;
        }
        let expected = acc / d as f64;
        for (&a, &b) in g_f.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-10, "d={d}: {a} vs {b}");
        }
    }
    println!("ACCEPTANCE 04 PASS: look-ahead gradient equals external roll-out (d in 1..=3) within 1e-10 and leaves state untouched");
}

#[test]
fn criterion_05_scmix_property_suite() {
    let geometry = Geometry::new(12, 12, 3);
    let enc = ToyDualEncoder::new(29, geometry, 16);
    let ds = synth_toy_dataset(31, 8, geometry, 10, 4).unwrap();
    let params = ScMixParams::default();

    // Paper-value cross-mix on constant images is exactly 0.8.
    let ones = Array3::<f64>::ones(geometry.shape());
    let zeros = Array3::<f64>::zeros(geometry.shape());
    let mixed = cross_mix(&ones, &zeros, 0.8, 0.2).unwrap();
    assert!(mixed.iter().all(|&v| v == 0.8));

    let mut rng = stream(37, "scmix-props", &[]);
    for trial in 0..1000usize {
        let item = &ds.items[trial % ds.n()];
        let partner = &ds.items[(trial + 1) % ds.n()].image;
        let replay = rng.clone();
        let pair = scmix_single(
            &item.image,
            &item.captions[0],
            partner,
            &params,
            &enc,
            &mut rng,
        )
        .unwrap();
        assert!(
            (0.5..=1.0).contains(&pair.eta),
            "eta {} out of range",
            pair.eta
        );
        for &v in pair.mixed.iter().chain(pair.self_mixed.iter()) {
            assert!((0.0..=1.0).contains(&v), "pixel {v} escaped [0,1]");
        }
        // Recompute the soft target from the replayed crops.
        let mut replay = replay;
        let sm = self_mix(&item.image, &params, &mut replay).unwrap();
        assert_eq!(sm.eta, pair.eta);
        let e1 = enc.encode_image(std::slice::from_ref(&sm.crop1)).unwrap();
        let e2 = enc.encode_image(std::slice::from_ref(&sm.crop2)).unwrap();
        for ((&p, &a), &b) in pair
            .soft_target
            .iter()
            .zip(e1.row(0).iter())
            .zip(e2.row(0).iter())
        {
            let expect = sm.eta * a + (1.0 - sm.eta) * b;
            assert!((p - expect).abs() < 1e-12);
        }
    }
    println!("ACCEPTANCE 05 PASS: 1000 ScMix draws keep eta in [0.5,1], pixels in [0,1], constants at 0.8, soft targets within 1e-12");
}

/// Expected sampled score: mean over eligible sentences of the mean over
/// positions, with the same intra fallback the miner uses.
fn exhaustive_top1(ds: &PairedDataset, enc: &dyn EncoderBundle, div: &DivergenceConfig) -> String {
    let corpus = expand_by_captions(ds);
    let mut ranked: Vec<(String, f64)> = Vec::new();
    for token in &ds.vocabulary {
        let eligible: Vec<&ExpandedPair> = corpus
            .iter()
            .filter(|p| !p.caption.iter().any(|t| t == token))
            .collect();
        let score = if eligible.is_empty() {
            let mut best = 0.0f64;
            for p in &corpus {
                let scores = word_importance(&p.image, &p.caption, enc, div).unwrap();
                for (pos, s) in scores.iter().enumerate() {
                    if &p.caption[pos] == token && *s > best {
                        best = *s;
                    }
                }
            }
            best
        } else {
            let mut sentence_means = 0.0;
            for p in &eligible {
                let mut per_pos = 0.0;
                for pos in 0..p.caption.len() {
                    per_pos +=
                        substitution_score(&p.image, &p.caption, pos, token, enc, div).unwrap();
                }
                sentence_means += per_pos / p.caption.len() as f64;
            }
            sentence_means / eligible.len() as f64
        };
        ranked.push((token.clone(), score));
    }
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    ranked[0].0.clone()
}

#[test]
fn criterion_06_trigger_mining_matches_exhaustive_oracle() {
    let start = Instant::now();
    let geometry = Geometry::new(8, 8, 3);
    let mut agreements = 0;
    for corpus_seed in 0..5u64 {
        let enc = ToyDualEncoder::new(50 + corpus_seed, geometry, 16);
        // 5 images x 2 captions = 10 sentences of 5 tokens from a 12-word
        // vocabulary.
        let ds = synth_toy_dataset(60 + corpus_seed, 5, geometry, 12, 5).unwrap();
        let cfg = TextMiningConfig {
            top_k: 5, // keep every token so coverage matches the oracle
            sample_count: 48,
            passes: 6,
            seed: 70 + corpus_seed,
            divergence: DivergenceConfig::default(),
        };
        let (lexicon, _) = mine_triggers(&ds, &enc, &cfg).unwrap();
        let mined = &lexicon.top().unwrap().token;
        let oracle = exhaustive_top1(&ds, &enc, &cfg.divergence);
        assert_eq!(
            mined, &oracle,
            "corpus {corpus_seed}: mined '{mined}' but oracle says '{oracle}'"
        );
        agreements += 1;
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 60, "ran {elapsed:?}, budget 1 min");
    println!(
        "ACCEPTANCE 06 PASS: mined top-1 equals exhaustive oracle on {agreements}/5 corpora ({elapsed:?})"
    );
}

#[test]
fn criterion_07_toy_end_to_end_efficacy() {
    let start = Instant::now();
    let geometry = Geometry::new(16, 16, 3);
    let ks = [1usize];
    let div = DivergenceConfig::default();

    let mut learned_i2t = Vec::new();
    let mut learned_t2i = Vec::new();
    let mut random_i2t = Vec::new();
    let mut random_t2i = Vec::new();
    let mut combined_not_worse = 0usize;
    for s in 0..5u64 {
        let enc = ToyDualEncoder::new(100 + s, geometry, 32);
        let ds = enc.aligned_dataset(200 + s, 64, 96, 5).unwrap();

        let clean = retrieval_recall(&enc, &ds, &ks, None, None, &div, 0).unwrap();
        assert!(
            clean["1"].i2t >= 90.0 && clean["1"].t2i >= 90.0,
            "seed {s}: clean R@1 i2t={} t2i={} below the 90% gate",
            clean["1"].i2t,
            clean["1"].t2i
        );

        let cfg = default_attack(300 + s, 50);
        let (uap, _) = run_image_attack(&ds, &enc, &cfg).unwrap();
        let random_uap =
            ImageUAP::random_init(geometry, EPS, &mut stream(400 + s, "random-uap", &[])).unwrap();

        let report_learned =
            evaluate_attack(&enc, &ds, Some(&uap), None, &ks, &div, 0, String::new()).unwrap();
        let report_random = evaluate_attack(
            &enc,
            &ds,
            Some(&random_uap),
            None,
            &ks,
            &div,
            0,
            String::new(),
        )
        .unwrap();
        let mean = |r: &uapforge::evaluation::AttackReport| {
            let v = &r.asr["1"];
            (v.i2t.unwrap() + v.t2i.unwrap()) / 2.0
        };
        learned_i2t.push(report_learned.asr["1"].i2t.unwrap());
        learned_t2i.push(report_learned.asr["1"].t2i.unwrap());
        random_i2t.push(report_random.asr["1"].i2t.unwrap());
        random_t2i.push(report_random.asr["1"].t2i.unwrap());

        // Mine the trigger and stack it on top of the image attack.
        let mining = TextMiningConfig {
            top_k: 3,
            sample_count: 16,
            passes: 4,
            seed: 500 + s,
            divergence: div,
        };
        let (lexicon, _) = mine_triggers(&ds, &enc, &mining).unwrap();
        let trigger = TextTrigger {
            token: lexicon.top().unwrap().token.clone(),
            budget: 1,
            policy: TriggerPolicy::Importance,
        };
        let report_combined = evaluate_attack(
            &enc,
            &ds,
            Some(&uap),
            Some(&trigger),
            &ks,
            &div,
            0,
            String::new(),
        )
        .unwrap();
        if mean(&report_combined) >= mean(&report_learned) {
            combined_not_worse += 1;
        }
    }

    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (li, lt) = (avg(&learned_i2t), avg(&learned_t2i));
    let (ri, rt) = (avg(&random_i2t), avg(&random_t2i));
    // The 3x factor alone would hold vacuously when random noise scores 0,
    // so a 5% materiality floor (from pilot runs) keeps the check honest.
    for (name, learned, random) in [("I2T", li, ri), ("T2I", lt, rt)] {
        assert!(
            learned >= 3.0 * random && learned >= 5.0,
            "{name}: learned ASR {learned:.2} vs random {random:.2} \
             (need >= 3x random and >= 5%)"
        );
    }
    assert!(
        combined_not_worse >= 4,
        "trigger helped on only {combined_not_worse}/5 seeds"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "ran {elapsed:?}, budget 5 min");
    println!(
        "ACCEPTANCE 07 PASS: learned ASR@1 i2t {li:.1}%/t2i {lt:.1}% vs random {ri:.1}%/{rt:.1}% (>=3x, >=5%); trigger non-degrading on {combined_not_worse}/5 seeds ({elapsed:?})"
    );
}

#[test]
fn criterion_08_hamming_budget() {
    let geometry = Geometry::new(8, 8, 3);
    let enc = ToyDualEncoder::new(71, geometry, 16);
    let img = synth_toy_dataset(72, 1, geometry, 10, 4)
        .unwrap()
        .items
        .remove(0)
        .image;
    let div = DivergenceConfig::default();
    let vocab: Vec<String> = (0..8).map(|i| format!("v{i}")).collect();
    let mut rng = stream(73, "hamming", &[]);
    for trial in 0..1000usize {
        let len = rng.random_range(4..=8usize);
        let caption: Caption = (0..len)
            .map(|_| vocab[rng.random_range(0..vocab.len())].clone())
            .collect();
        let budget = rng.random_range(1..=3usize);
        let policy = if trial % 5 == 0 {
            TriggerPolicy::Importance
        } else {
            TriggerPolicy::Random
        };
        let trigger = TextTrigger {
            token: "zzz".into(),
            budget,
            policy,
        };
        let ctx = ImportanceContext {
            image: &img,
            bundle: &enc,
            divergence: &div,
        };
        let out = apply_trigger(&caption, &trigger, Some(&ctx), &mut rng).unwrap();
        let diff = out
            .iter()
            .zip(caption.iter())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(
            diff, budget,
            "trial {trial}: {diff} changes for budget {budget}"
        );
    }
    println!(
        "ACCEPTANCE 08 PASS: 1000 apply_trigger calls each changed exactly the budgeted positions"
    );
}

#[test]
fn criterion_09_serialization_round_trips_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let geometry = Geometry::new(8, 8, 3);

    // UAP container: bitwise round trip.
    let uap = ImageUAP::random_init(geometry, EPS, &mut stream(81, "uap-init", &[])).unwrap();
    let uap_path = dir.path().join("uap.bin");
    save_uap(&uap, &uap_path).unwrap();
    let loaded = load_uap(&uap_path).unwrap();
    assert_eq!(loaded.delta(), uap.delta());
    assert_eq!(std::fs::read(&uap_path).unwrap(), uap_to_bytes(&loaded));

    // Corruption and truncation are rejected.
    let mut bytes = uap_to_bytes(&uap);
    bytes[50] ^= 0x10;
    assert!(matches!(uap_from_bytes(&bytes), Err(UapError::Corrupt(_))));
    let bytes = uap_to_bytes(&uap);
    assert!(matches!(
        uap_from_bytes(&bytes[..bytes.len() - 3]),
        Err(UapError::Corrupt(_))
    ));

    // A payload that violates its own header budget is rejected.
    let big = ImageUAP::new(
        Array3::from_elem(geometry.shape(), 13.0f32 / 255.0),
        13.0 / 255.0,
    )
    .unwrap();
    let mut bytes = uap_to_bytes(&big);
    bytes[24..28].copy_from_slice(&EPS.to_le_bytes());
    let crc_at = bytes.len() - 4;
    // Recompute the checksum so only the budget check can fire.
    let crc = {
        let mut crc = 0xFFFF_FFFFu32;
        for &b in &bytes[..crc_at] {
            crc ^= u32::from(b);
            for _ in 0..8 {
                let mask = (crc & 1).wrapping_neg();
                crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
            }
        }
        !crc
    };
    bytes[crc_at..].copy_from_slice(&crc.to_le_bytes());
    assert!(matches!(uap_from_bytes(&bytes), Err(UapError::Budget(_))));

    // Trigger artifact: bitwise round trip.
    let artifact = TriggerArtifact {
        trigger: TextTrigger {
            token: "w0001".into(),
            budget: 1,
            policy: TriggerPolicy::Importance,
        },
        ranked: vec![
            uapforge::text_attack::LexiconEntry {
                token: "w0001".into(),
                score: 0.75,
            },
            uapforge::text_attack::LexiconEntry {
                token: "w0002".into(),
                score: 0.25,
            },
        ],
    };
    let trig_path = dir.path().join("triggers.json");
    save_triggers(&artifact, &trig_path).unwrap();
    let loaded = load_triggers(&trig_path).unwrap();
    assert_eq!(loaded, artifact);
    let first = std::fs::read(&trig_path).unwrap();
    save_triggers(&loaded, &trig_path).unwrap();
    assert_eq!(first, std::fs::read(&trig_path).unwrap());

    // Report: bitwise round trip through a real evaluation.
    let enc = ToyDualEncoder::new(83, geometry, 16);
    let ds = enc.aligned_dataset(84, 4, 24, 4).unwrap();
    let report = evaluate_attack(
        &enc,
        &ds,
        Some(&uap),
        Some(&artifact.trigger),
        &[1, 2],
        &DivergenceConfig::default(),
        0,
        "sha256:test".into(),
    )
    .unwrap();
    let report_path = dir.path().join("report.json");
    save_report(&report, &report_path).unwrap();
    let loaded = load_report(&report_path).unwrap();
    assert_eq!(loaded, report);
    let first = std::fs::read(&report_path).unwrap();
    save_report(&loaded, &report_path).unwrap();
    assert_eq!(first, std::fs::read(&report_path).unwrap());

    // Resolved config snapshot: text-identical round trip.
    let resolved = uapforge::config::RunConfig::default()
        .resolve(
            Some(std::path::PathBuf::from("m.jsonl")),
            Some("toy:3".into()),
            Some(5),
            None,
        )
        .unwrap();
    let snapshot = resolved.snapshot_toml().unwrap();
    let reparsed = uapforge::config::parse_run_config(&snapshot).unwrap();
    assert_eq!(reparsed, resolved.run);
    let resnapshot = uapforge::config::ResolvedConfig {
        run: reparsed,
        manifest: resolved.manifest.clone(),
        adapter: resolved.adapter.clone(),
    }
    .snapshot_toml()
    .unwrap();
    assert_eq!(snapshot, resnapshot);

    println!("ACCEPTANCE 09 PASS: UAP/trigger/report/config round-trip bitwise; corrupt and over-budget files rejected");
}

#[test]
fn criterion_10_resize_norm_bound() {
    let small = Geometry::new(32, 32, 3);
    let large = Geometry::new(48, 48, 3);
    let bound = f64::from(EPS) + 1e-7;
    let mut rng = stream(91, "resize", &[]);
    for trial in 0..100usize {
        // Random delta with linf exactly at the budget.
        let mut delta = Array3::<f32>::zeros(small.shape());
        for v in delta.iter_mut() {
            *v = rng.random_range(-f64::from(EPS)..=f64::from(EPS)) as f32;
        }
        let flat = delta.as_slice_mut().unwrap();
        let idx = rng.random_range(0..flat.len());
        flat[idx] = if trial % 2 == 0 { EPS } else { -EPS };
        let uap = ImageUAP::new(delta, EPS).unwrap();
        assert_eq!(uap.linf(), EPS);

        let up = resize_uap(&uap, large).unwrap();
        assert!(f64::from(up.linf()) <= bound, "upsized linf {}", up.linf());
        let down = resize_uap(&up, small).unwrap();
        assert!(
            f64::from(down.linf()) <= bound,
            "downsized linf {}",
            down.linf()
        );
    }
    println!(
        "ACCEPTANCE 10 PASS: 100 random 32->48 and 48->32 resizes stayed within 12/255 + 1e-7"
    );
}

#[test]
fn criterion_11_cli_end_to_end_determinism() {
    use std::process::Command;

    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    std::fs::create_dir_all(&data_dir).unwrap();
    let geometry = Geometry::new(12, 12, 3);
    let enc_seed = 3u64;
    let enc = ToyDualEncoder::new(enc_seed, geometry, 32);
    let ds = enc.aligned_dataset(55, 16, 48, 5).unwrap();
    let manifest = write_manifest(&ds, &data_dir).unwrap();

    let config_path = dir.path().join("attack.toml");
    std::fs::write(
        &config_path,
        "seed = 5\niterations = 4\ntext_iterations = 2\nbatch_size = 16\n\
         [text]\nsample_count = 8\n[eval]\nks = [1, 5]\n",
    )
    .unwrap();

    let bin = env!("CARGO_BIN_EXE_uapforge");
    let run_all = |workdir: &std::path::Path| {
        std::fs::create_dir_all(workdir).unwrap();
        let common = |cmd: &mut Command| {
            cmd.env_remove("UAPFORGE_SEED")
                .arg("--manifest")
                .arg(&manifest)
                .arg("--adapter")
                .arg(format!("toy:{enc_seed}"))
                .arg("--config")
                .arg(&config_path)
                .arg("--workdir")
                .arg(workdir);
        };
        let mut cmd = Command::new(bin);
        cmd.arg("attack-image").arg("--out").arg("uap.bin");
        common(&mut cmd);
        let out = cmd.output().unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );

        let mut cmd = Command::new(bin);
        cmd.arg("attack-text").arg("--out").arg("triggers.json");
        common(&mut cmd);
        let out = cmd.output().unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );

        let mut cmd = Command::new(bin);
        cmd.arg("evaluate")
            .arg("--uap")
            .arg("uap.bin")
            .arg("--triggers")
            .arg("triggers.json")
            .arg("--report")
            .arg("report.json");
        common(&mut cmd);
        let out = cmd.output().unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    };

    let w1 = dir.path().join("run1");
    let w2 = dir.path().join("run2");
    run_all(&w1);
    run_all(&w2);

    for artifact in ["uap.bin", "triggers.json", "report.json"] {
        let a = std::fs::read(w1.join(artifact)).unwrap();
        let b = std::fs::read(w2.join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between identical runs");
        assert!(!a.is_empty());
    }
    println!("ACCEPTANCE 11 PASS: two identical CLI runs produced byte-identical uap.bin, triggers.json, report.json");
}
