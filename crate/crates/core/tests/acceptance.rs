//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured evidence. Criteria 7-9 share a lazily built fixture
//! (synthetic dataset + per-fold meta-trained checkpoints).
//!
//! Run serially with full output:
//! `cargo test -p tap-core --test acceptance -- --nocapture --test-threads=1`

use std::time::Instant;

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use tap_core::config::RunConfig;
use tap_core::driver::{cmd_eval, cmd_gen_data, cmd_meta_train, cmd_oneshot_study, cmd_sweep};
use tap_core::engine::{predict_query, run_method, AdaptConfig, Method, SelectStrategy};
use tap_core::episodes::{sample_episode, ClassTable, Episode, GenConfig};
use tap_core::error::Result;
use tap_core::lora::{adapted_forward, merge, AdapterSet, LoraAdapter, LoraTargetHost, TargetSpec};
use tap_core::loss::{class_weights, focal_loss, FocalConfig, WeightMode};
use tap_core::metrics::miou;
use tap_core::refnet::{
    forward_episode_loss, ModelConfig, ModelState, PassState, Scope, Variant,
};
use tap_core::tensor::{matmul_value, Tensor};

// ---------------------------------------------------------------------
// Shared fixture for criteria 7-9.
// ---------------------------------------------------------------------

struct Fixture {
    _dir: TempDir,
    /// 2-way 5-shot benchmark: 50 episodes x 3 runs x 4 folds.
    trend_cfg: RunConfig,
    /// 1-way 1/2-shot cells for the 1-shot study.
    oneshot_cfg: RunConfig,
    meta_seconds: f64,
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let dir = TempDir::new().expect("tempdir");
    let trend_text = format!(
        "dataset.dir = {}\n\
         dataset.cells = 2x5\n\
         dataset.episodes_per_fold = 50\n\
         dataset.runs = 3\n\
         meta.steps = 1200\n\
         meta.n_way = 2\n\
         meta.k_shot = 2\n\
         eval.folds = 0,1,2,3\n\
         eval.n_way = 2\n\
         eval.k_shot = 5\n\
         eval.iterations = 8\n\
         eval.rank = 16\n\
         eval.lr = 0.001\n\
         eval.episodes = 50\n\
         eval.runs = 3\n\
         sweep.ranks = 2,4,8,16,32,64\n\
         sweep.iterations = 8\n\
         sweep.episodes = 6\n\
         sweep.fold = 0\n\
         out.dir = {}\n",
        dir.path().join("data").display(),
        dir.path().join("out").display()
    );
    let trend_cfg = RunConfig::parse_str(&trend_text).expect("trend config");

    let oneshot_text = format!(
        "dataset.dir = {}\n\
         dataset.seed = 21\n\
         dataset.cells = 1x1,1x2\n\
         dataset.episodes_per_fold = 10\n\
         dataset.runs = 1\n\
         eval.folds = 0\n\
         eval.n_way = 1\n\
         eval.k_shot = 1\n\
         eval.rank = 16\n\
         eval.episodes = 10\n\
         eval.runs = 1\n\
         oneshot.iterations = 8\n\
         oneshot.episodes = 10\n\
         oneshot.fold = 0\n\
         oneshot.n_way = 1\n\
         out.dir = {}\n",
        dir.path().join("data_oneshot").display(),
        dir.path().join("out").display()
    );
    let oneshot_cfg = RunConfig::parse_str(&oneshot_text).expect("oneshot config");

    cmd_gen_data(&trend_cfg, false).expect("gen trend dataset");
    cmd_gen_data(&oneshot_cfg, false).expect("gen oneshot dataset");
    let t = Instant::now();
    cmd_meta_train(&trend_cfg).expect("meta-train folds");
    let meta_seconds = t.elapsed().as_secs_f64();

    Fixture { _dir: dir, trend_cfg, oneshot_cfg, meta_seconds }
});

fn default_episode(n: usize, k: usize, seed: u64, image_size: usize) -> Episode {
    let table = ClassTable::standard();
    let split = table.fold_split(0).unwrap();
    let gen = GenConfig { image_size, ..GenConfig::default() };
    sample_episode(&split, n, k, seed, &table, &gen).unwrap()
}

// ---------------------------------------------------------------------
// Criterion 1: gradient oracle.
// ---------------------------------------------------------------------

#[test]
fn criterion_1_gradient_oracle() {
    let started = Instant::now();
    let model = ModelState::init(ModelConfig::default()).unwrap();
    let adapters = AdapterSet::attach(
        &model,
        model.cfg.variant.default_policy(),
        4,
        1.0,
        90,
    )
    .unwrap();
    let episode = default_episode(2, 1, 901, 32);
    let loss_cfg = FocalConfig::default();

    let loss_of = |set: &AdapterSet| -> f64 {
        let support: Vec<&(Tensor, Tensor)> = episode.support.iter().collect();
        let mut ps = PassState::new(&model, Some(set), Scope::AdaptersOnly);
        let loss = forward_episode_loss(
            &mut ps,
            &support[1..],
            &support[0].0,
            &support[0].1,
            episode.n_way(),
            &loss_cfg,
            true,
        )
        .unwrap();
        ps.tape.value(loss).data()[0]
    };

    // Analytic gradients of the full pipeline w.r.t. every adapter value.
    let analytic: Vec<(usize, Vec<f64>, Vec<f64>)> = {
        let support: Vec<&(Tensor, Tensor)> = episode.support.iter().collect();
        let mut ps = PassState::new(&model, Some(&adapters), Scope::AdaptersOnly);
        let loss = forward_episode_loss(
            &mut ps,
            &support[1..],
            &support[0].0,
            &support[0].1,
            episode.n_way(),
            &loss_cfg,
            true,
        )
        .unwrap();
        let (tape, _, binds) = ps.finish();
        let grads = tape.backward(loss).unwrap();
        binds
            .iter()
            .enumerate()
            .map(|(i, (_, va, vb))| {
                (
                    i,
                    grads.get(*va).unwrap().to_vec(),
                    grads.get(*vb).unwrap().to_vec(),
                )
            })
            .collect()
    };

    // 100 randomly sampled adapter parameters, central differences 1e-5.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let adapter_ids: Vec<String> = adapters.iter().map(|a| a.target_id.clone()).collect();
    let step = 1e-5;
    let mut max_rel: f64 = 0.0;
    for _ in 0..100 {
        let ai = rng.random_range(0..adapter_ids.len());
        let pick_a = rng.random_range(0..2) == 0;
        let (buf_len, grad) = {
            let ad = adapters.get(&adapter_ids[ai]).unwrap();
            if pick_a {
                (ad.a.numel(), &analytic[ai].1)
            } else {
                (ad.b.numel(), &analytic[ai].2)
            }
        };
        let ei = rng.random_range(0..buf_len);
        let mut plus = adapters.clone();
        let mut minus = adapters.clone();
        {
            let t = plus.get_mut(&adapter_ids[ai]).unwrap();
            let buf = if pick_a { t.a.data_mut() } else { t.b.data_mut() };
            buf[ei] += step;
        }
        {
            let t = minus.get_mut(&adapter_ids[ai]).unwrap();
            let buf = if pick_a { t.a.data_mut() } else { t.b.data_mut() };
            buf[ei] -= step;
        }
        let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
        let a = grad[ei];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
        assert!(
            rel < 1e-4,
            "adapter {} ({}) elem {}: analytic {} vs fd {} (rel {})",
            adapter_ids[ai],
            if pick_a { "A" } else { "B" },
            ei,
            a,
            fd,
            rel
        );
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient oracle took {:.1}s (budget 60s)", secs);
    println!(
        "criterion 1: PASS - max relative error {:.2e} over 100 sampled adapter params in {:.1}s",
        max_rel, secs
    );
}

// ---------------------------------------------------------------------
// Criterion 2: zero-init identity.
// ---------------------------------------------------------------------

#[test]
fn criterion_2_zero_init_identity() {
    for variant in [Variant::Conv, Variant::Attention] {
        let model = ModelState::init(ModelConfig { variant, ..Default::default() }).unwrap();
        let episode = default_episode(2, 2, 902, 32);
        let vanilla = run_method(
            &model,
            &episode,
            &AdaptConfig { method: Method::Vanilla, ..Default::default() },
        )
        .unwrap()
        .0;
        let (vmask, vlogits) = predict_query(&vanilla, &episode).unwrap();
        for rank in [2usize, 8, 32] {
            let adapters = AdapterSet::attach(
                &model,
                variant.default_policy(),
                rank,
                1.0,
                1000 + rank as u64,
            )
            .unwrap();
            let adapted =
                tap_core::engine::AdaptedModel { model: model.clone(), adapters: Some(adapters) };
            let (amask, alogits) = predict_query(&adapted, &episode).unwrap();
            assert!(
                alogits.value_eq(&vlogits),
                "{} rank {}: logits differ from vanilla",
                variant.as_str(),
                rank
            );
            assert!(
                amask.value_eq(&vmask),
                "{} rank {}: mask differs from vanilla",
                variant.as_str(),
                rank
            );
        }
    }
    println!(
        "criterion 2: PASS - fresh adapters leave predictions exactly vanilla (conv + attention, ranks 2/8/32)"
    );
}

// ---------------------------------------------------------------------
// Criterion 3: merge equivalence.
// ---------------------------------------------------------------------

#[test]
fn criterion_3_merge_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(903);
    let mut worst: f64 = 0.0;
    for draw in 0..100 {
        let m = rng.random_range(3..24);
        let n = rng.random_range(3..24);
        let r = rng.random_range(1..=m.min(n));
        let alpha = rng.random_range(-2.0..2.0);
        let w = Tensor::rand_uniform(&mut rng, vec![m, n], -1.0, 1.0);
        let spec = TargetSpec { target_id: format!("draw{}", draw), m, n };
        let mut adapter = LoraAdapter::new(&spec, r, alpha, draw as u64).unwrap();
        adapter.b = Tensor::rand_uniform(&mut rng, vec![r, n], -1.0, 1.0);
        let x = Tensor::rand_uniform(&mut rng, vec![4, m], -1.0, 1.0);

        let factored = adapted_forward(&x, &w, &adapter).unwrap();
        let merged = merge(&w, &adapter).unwrap();
        let through = matmul_value(&x, &merged).unwrap();
        worst = worst.max(factored.max_abs_diff(&through));
    }
    assert!(worst < 1e-10, "max |adapted - merged| = {:e}", worst);
    println!("criterion 3: PASS - max |adapted_forward - merged_forward| = {:.2e} over 100 draws", worst);
}

// ---------------------------------------------------------------------
// Criterion 4: parameter-count law.
// ---------------------------------------------------------------------

#[test]
fn criterion_4_parameter_count_law() {
    for variant in [Variant::Conv, Variant::Attention] {
        let model = ModelState::init(ModelConfig { variant, ..Default::default() }).unwrap();
        let targets = model.lora_targets(variant.default_policy()).unwrap();
        let mut previous: Option<usize> = None;
        for r in [2usize, 4, 8, 16, 32] {
            let set = AdapterSet::attach(&model, variant.default_policy(), r, 1.0, 7).unwrap();
            let count = set.count_trainable();
            let closed_form: usize = targets.iter().map(|t| r * (t.m + t.n)).sum();
            assert_eq!(count, closed_form, "{} rank {}", variant.as_str(), r);
            if let Some(prev) = previous {
                assert_eq!(count, 2 * prev, "{}: doubling broken at rank {}", variant.as_str(), r);
            }
            previous = Some(count);
        }
    }
    println!("criterion 4: PASS - count_trainable equals sum r*(m+n) and doubles exactly for r in 2..32 (both variants)");
}

// ---------------------------------------------------------------------
// Criterion 5: focal-loss oracles.
// ---------------------------------------------------------------------

#[test]
fn criterion_5_focal_loss_oracles() {
    // gamma = 0 + uniform weights == cross-entropy within 1e-9 on 1000 pixels.
    let mut rng = ChaCha8Rng::seed_from_u64(905);
    let (c, h, w) = (5usize, 25usize, 40usize); // 1000 pixels
    let logits = Tensor::rand_uniform(&mut rng, vec![c, h, w], -4.0, 4.0);
    let labels: Vec<f64> = (0..h * w).map(|_| rng.random_range(0..c) as f64).collect();
    let mask = Tensor::new(vec![h, w], labels.clone()).unwrap();
    let cfg = FocalConfig { gamma: 0.0, weight_mode: WeightMode::Uniform };
    let focal = focal_loss(&logits, &mask, &cfg).unwrap().data()[0];
    let mut ce = 0.0;
    for p in 0..h * w {
        let col: Vec<f64> = (0..c).map(|ch| logits.data()[ch * h * w + p]).collect();
        let maxv = col.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        let denom: f64 = col.iter().map(|v| (v - maxv).exp()).sum();
        ce -= ((col[labels[p] as usize] - maxv).exp() / denom).ln();
    }
    ce /= (h * w) as f64;
    assert!((focal - ce).abs() < 1e-9, "focal {} vs cross-entropy {}", focal, ce);

    // Hand-computed weight values.
    let full = class_weights(&Tensor::zeros(vec![4, 4]), 2).unwrap();
    assert!((full[0] - 1.0 / 2.1f64.ln()).abs() < 1e-6); // covered class
    assert!((full[1] - 1.0 / 1.1f64.ln()).abs() < 1e-6); // absent class
    assert!((full[0] - 1.3478).abs() < 1e-3 && (full[1] - 10.4921).abs() < 1e-3);

    // Single pixel, w = 1, gamma = 2, p_t = 0.9.
    let one = Tensor::new(vec![2, 1, 1], vec![9.0f64.ln(), 0.0]).unwrap();
    let m1 = Tensor::zeros(vec![1, 1]);
    let cfg2 = FocalConfig { gamma: 2.0, weight_mode: WeightMode::Uniform };
    let v = focal_loss(&one, &m1, &cfg2).unwrap().data()[0];
    assert!((v - 0.01 * -(0.9f64.ln())).abs() < 1e-6);
    assert!((v - 1.0536e-3).abs() < 1e-6);

    println!(
        "criterion 5: PASS - gamma-0 CE equality ({:.1e} gap on 1000 pixels) and hand values 1/ln2.1, 1/ln1.1, 1.0536e-3 reproduced",
        (focal - ce).abs()
    );
}

// ---------------------------------------------------------------------
// Criterion 6: protocol laws.
// ---------------------------------------------------------------------

#[test]
fn criterion_6_protocol_laws() {
    let small = ModelConfig {
        channels: 12,
        feature_dim: 12,
        blocks: 2,
        image_size: 24,
        ..Default::default()
    };
    let model = ModelState::init(small).unwrap();

    // Pass-count law: T * N * K passes with identity Select (2-way 5-shot, T = 8).
    let episode = default_episode(2, 5, 906, 24);
    let cfg = AdaptConfig {
        method: Method::Tap,
        iterations: 8,
        rank: 4,
        select: SelectStrategy::Identity,
        ..Default::default()
    };
    let dec_before = model.decoder_checksum();
    let store_before = model.store.checksum();
    let (adapted, trace) = run_method(&model, &episode, &cfg).unwrap();
    assert_eq!(trace.passes.len(), 8 * 2 * 5, "pass count violates T*N*K");

    // Frozen-set checksums: tap leaves the decoder and base weights intact.
    assert_eq!(adapted.model.decoder_checksum(), dec_before);
    assert_eq!(adapted.model.store.checksum(), store_before);

    // ... and decoder_ft leaves the encoder intact.
    let enc_before = model.encoder_checksum();
    let (dft, _) = run_method(
        &model,
        &episode,
        &AdaptConfig { method: Method::DecoderFt, iterations: 2, ..cfg.clone() },
    )
    .unwrap();
    assert_eq!(dft.model.encoder_checksum(), enc_before);

    // Per-episode reset: evaluating 50 episodes in a shuffled order
    // reproduces every per-episode result bit for bit.
    let episodes: Vec<Episode> = (0..50).map(|i| default_episode(2, 2, 2000 + i, 24)).collect();
    let quick = AdaptConfig { method: Method::Tap, iterations: 1, rank: 4, ..Default::default() };
    let eval_order = |order: &[usize]| -> Result<Vec<(String, f64)>> {
        let mut out = Vec::new();
        for &i in order {
            let ep = &episodes[i];
            let (adapted, _) = run_method(&model, ep, &quick)?;
            let (mask, _) = predict_query(&adapted, ep)?;
            out.push((ep.id.clone(), miou(&mask, &ep.query.1, &ep.local_classes())?));
        }
        Ok(out)
    };
    let forward_order: Vec<usize> = (0..50).collect();
    let mut shuffled: Vec<usize> = (0..50).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    use rand::seq::SliceRandom;
    shuffled.shuffle(&mut rng);
    let mut a = eval_order(&forward_order).unwrap();
    let mut b = eval_order(&shuffled).unwrap();
    a.sort_by(|x, y| x.0.cmp(&y.0));
    b.sort_by(|x, y| x.0.cmp(&y.0));
    for ((ida, va), (idb, vb)) in a.iter().zip(&b) {
        assert_eq!(ida, idb);
        assert_eq!(va.to_bits(), vb.to_bits(), "episode {} result depends on order", ida);
    }

    println!(
        "criterion 6: PASS - 80 passes for T=8 N=2 K=5; frozen sets bit-intact; 50-episode shuffle order-independent"
    );
}

// ---------------------------------------------------------------------
// Criterion 7: trend reproduction.
// ---------------------------------------------------------------------

#[test]
fn criterion_7_trend_reproduction() {
    let fixture = &*FIXTURE;
    let started = Instant::now();
    let out = cmd_eval(&fixture.trend_cfg).unwrap();
    let eval_secs = started.elapsed().as_secs_f64();

    let mut tap_deltas = Vec::new();
    let mut dft_deltas = Vec::new();
    let mut positive_folds = 0;
    for fold in 0..4 {
        let v = out.report.row(Method::Vanilla, fold).unwrap().miou_mean;
        let t = out.report.row(Method::Tap, fold).unwrap().delta_vs_vanilla.unwrap();
        let d = out.report.row(Method::DecoderFt, fold).unwrap().delta_vs_vanilla.unwrap();
        println!(
            "  fold {}: vanilla {:.4}, tap {:+.4}, decoder_ft {:+.4}",
            fold, v, t, d
        );
        if t > 0.0 {
            positive_folds += 1;
        }
        tap_deltas.push(t);
        dft_deltas.push(d);
    }
    let tap_mean = tap_deltas.iter().sum::<f64>() / 4.0;
    let dft_mean = dft_deltas.iter().sum::<f64>() / 4.0;

    assert!(
        positive_folds >= 3,
        "TaP improved on only {}/4 folds (deltas {:?})",
        positive_folds,
        tap_deltas
    );
    assert!(
        tap_mean >= dft_mean,
        "mean TaP delta {:.4} below mean Decoder-FT delta {:.4}",
        tap_mean,
        dft_mean
    );
    println!(
        "criterion 7: PASS - TaP positive on {}/4 folds; mean TaP delta {:+.4} >= decoder-ft {:+.4} \
         (meta-train {:.0}s + eval {:.0}s on this machine)",
        positive_folds, tap_mean, dft_mean, fixture.meta_seconds, eval_secs
    );
}

// ---------------------------------------------------------------------
// Criterion 8: sweep sanity.
// ---------------------------------------------------------------------

#[test]
fn criterion_8_sweep_sanity() {
    let fixture = &*FIXTURE;
    let out = cmd_sweep(&fixture.trend_cfg).unwrap();

    // Grid shape: |ranks| x (T + 1) rows, schema as pinned.
    assert_eq!(out.rows.len(), 6 * 9, "sweep grid row count");
    let csv = std::fs::read_to_string(&out.csv_path).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "rank,iteration,mean_miou,status");

    // Rank 64 exceeds min(m, n) = 32: warning rows, never silent.
    let skipped: Vec<_> = out.rows.iter().filter(|r| r.status != "ok").collect();
    assert!(skipped.iter().all(|r| r.rank == 64 && r.mean_miou.is_none()));
    assert_eq!(skipped.len(), 9);

    // t = 0 column is constant across evaluated ranks (zero-init identity).
    let t0: Vec<f64> = out
        .rows
        .iter()
        .filter(|r| r.iteration == 0 && r.status == "ok")
        .map(|r| r.mean_miou.unwrap())
        .collect();
    assert_eq!(t0.len(), 5);
    for v in &t0 {
        assert_eq!(v.to_bits(), t0[0].to_bits(), "t=0 column varies across ranks");
    }

    // Parameter table doubles down consecutive rank rows.
    let params = std::fs::read_to_string(&out.params_path).unwrap();
    assert_eq!(params.lines().next().unwrap(), "rank,trainable_params,pct_of_total,legal");
    let counts: Vec<usize> = params
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    for pair in counts.windows(2) {
        assert_eq!(pair[1], 2 * pair[0], "parameter column does not double");
    }
    assert!(out.svg_path.exists());

    println!(
        "criterion 8: PASS - 54-row grid over ranks 2..64 x t 0..8; t=0 constant ({:.4}); rank-64 rows carry the skip warning; params double",
        t0[0]
    );
}

// ---------------------------------------------------------------------
// Criterion 9: 1-shot study.
// ---------------------------------------------------------------------

#[test]
fn criterion_9_oneshot_study() {
    let fixture = &*FIXTURE;
    let out = cmd_oneshot_study(&fixture.oneshot_cfg).unwrap();

    // Both K = 1 and K = 2 series over iterations 0..T.
    for k in [1usize, 2] {
        for t in 0..=8 {
            assert!(
                out.rows.iter().any(|r| r.k_shot == k && r.iteration == t),
                "missing row k={} t={}",
                k,
                t
            );
        }
    }
    // The K = 1 path went through replicate_support.
    assert!(out.rows.iter().filter(|r| r.k_shot == 1).all(|r| r.replicated));
    assert!(out.rows.iter().filter(|r| r.k_shot == 2).all(|r| !r.replicated));

    // K = 1 iteration-0 equals vanilla exactly: predict the original
    // (un-replicated) episodes with the unadapted checkpoint.
    let ds = tap_core::episodes::Dataset::open(&fixture.oneshot_cfg.dataset.dir).unwrap();
    let model = ModelState::load_checkpoint(&tap_core::driver::checkpoint_dir(
        &fixture.oneshot_cfg.out_dir,
        0,
    ))
    .unwrap();
    let episodes = ds.load_episodes(0, 1, 1).unwrap();
    let vanilla_mean = episodes
        .iter()
        .take(fixture.oneshot_cfg.oneshot.episodes)
        .map(|ep| {
            let (adapted, _) = run_method(
                &model,
                ep,
                &AdaptConfig { method: Method::Vanilla, ..Default::default() },
            )
            .unwrap();
            let (mask, _) = predict_query(&adapted, ep).unwrap();
            miou(&mask, &ep.query.1, &ep.local_classes()).unwrap()
        })
        .sum::<f64>()
        / fixture.oneshot_cfg.oneshot.episodes as f64;
    let k1_t0 = out
        .rows
        .iter()
        .find(|r| r.k_shot == 1 && r.iteration == 0)
        .unwrap()
        .mean_miou;
    assert_eq!(
        k1_t0.to_bits(),
        vanilla_mean.to_bits(),
        "K=1 iteration-0 value {} differs from vanilla {}",
        k1_t0,
        vanilla_mean
    );

    println!(
        "criterion 9: PASS - K=1 (replicated) and K=2 curves over t 0..8 emitted; K=1 t0 == vanilla exactly ({:.4})",
        k1_t0
    );
}
