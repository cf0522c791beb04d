//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a subset,
//! e.g. `cargo test --test acceptance -- 3 5`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use rand::Rng;
use rfm_core::data::Region;
use rfm_core::detector::{Architecture, CnnConfig, Detector, Instrumented, Label, Want};
use rfm_core::erasing::{self, EraseConfig, Guidance};
use rfm_core::harness::{self, AblationVariant, Augmentation, ExperimentConfig, RunManifest};
use rfm_core::imaging::Image;
use rfm_core::metrics::{self, ScoredSample};
use rfm_core::saliency::{self, ForgeryAttentionMap};
use rfm_core::streams::stream;

// Pinned tolerances and protocol sizes.
const FAM_DUAL_TOL: f64 = 1e-6;
const FAM_GAP_FLOOR: f64 = 1e-8;
const FAM_IMAGES: u64 = 100;
const FAM_LIMIT: Duration = Duration::from_secs(60);

const FD_IMAGE: usize = 16;
const FD_TRIALS: u64 = 20;
const FD_STEP: f64 = 1e-5;
/// Relative error is `|analytic - numeric| / max(|analytic|, |numeric|, FD_REL_FLOOR)`.
const FD_REL_FLOOR: f64 = 1e-6;
const FD_MAX_REL: f64 = 1e-3;
const FD_LIMIT: Duration = Duration::from_secs(120);

const SFE_RUNS: u64 = 1000;
const SFE_LIMIT: Duration = Duration::from_secs(60);

const PSFE_SINGLE_TRIALS: u64 = 200;
const PSFE_MULTI_TRIALS: u64 = 50;
const PSFE_ROUNDS: usize = 3;

const METRIC_SETS: u64 = 200;
const METRIC_MAX_N: usize = 200;
const METRIC_LEVELS: [f64; 3] = [0.1, 0.01, 0.001];
const METRIC_LIMIT: Duration = Duration::from_secs(60);

const TREND_CONFIG: &str = include_str!("../../../configs/desk-trend.toml");
const TREND_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TREND_FDR: f64 = 0.1;
const TREND_MIN_WINS: usize = 4;
const TREND_LIMIT: Duration = Duration::from_secs(15 * 60);
const VARIANT_MAX_STRICT_LOSSES: usize = 2;

const SMOKE_CONFIG: &str = include_str!("../../../configs/smoke.toml");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random_image<R: Rng>(c: usize, h: usize, w: usize, rng: &mut R) -> Image {
    Image::from_fn(c, h, w, |_| rng.gen()).unwrap()
}

// ---------------------------------------------------------------- 1

fn gradient_of(det: &dyn Detector, x: &Array3<f64>, weights: [f64; 2]) -> Array3<f64> {
    let g = det
        .backward(std::slice::from_ref(x), &mut |l| vec![weights; l.len()], Want::INPUTS)
        .unwrap();
    g.inputs.unwrap().remove(0)
}

fn fam_dual_form() -> Verdict {
    let start = Instant::now();
    let arch = Architecture::ReferenceCnn(CnnConfig::default());
    let det = arch.build(&mut stream(1, "acceptance-fam", 0)).unwrap();
    let mut rng = stream(1, "acceptance-fam", 1);
    let (mut compared, mut excluded, mut worst) = (0, 0, 0.0f64);
    for _ in 0..FAM_IMAGES {
        let img = random_image(3, 32, 32, &mut rng);
        let x = img.to_tensor();
        let logits = det.forward(std::slice::from_ref(&x)).unwrap()[0];
        if (logits.fake - logits.real).abs() < FAM_GAP_FLOOR {
            excluded += 1;
            continue;
        }
        // Oracle: separate logit gradients, subtracted, channel max of the absolute value.
        let gf = gradient_of(det.as_ref(), &x, [0.0, 1.0]);
        let gr = gradient_of(det.as_ref(), &x, [1.0, 0.0]);
        let diff = (&gf - &gr).mapv(f64::abs);
        let oracle = Array2::from_shape_fn((32, 32), |(r, q)| (0..3).map(|c| diff[[c, r, q]]).fold(0.0, f64::max));
        let primary = saliency::compute_fam(det.as_ref(), &img).unwrap();
        let dual = saliency::compute_fam_via_abs_logit_gap(det.as_ref(), &img).unwrap();
        for ((a, b), o) in primary.values().iter().zip(dual.values()).zip(&oracle) {
            worst = worst.max((a - b).abs()).max((a - o).abs());
        }
        compared += 1;
    }
    let t = start.elapsed();
    verdict(
        worst <= FAM_DUAL_TOL && t < FAM_LIMIT && compared > 0,
        format!("{compared} images compared, {excluded} excluded, max |diff| {worst:.2e}, {:.1}s", t.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 2

fn shipped_architectures() -> Vec<Architecture> {
    let all = vec![
        Architecture::ReferenceCnn(CnnConfig::default()),
        Architecture::Linear {
            channels: 3,
            height: FD_IMAGE,
            width: FD_IMAGE,
        },
    ];
    // Adding an architecture must extend the list above.
    for a in &all {
        match a {
            Architecture::ReferenceCnn(_) | Architecture::Linear { .. } => {}
        }
    }
    all
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut per_arch = Vec::new();
    for arch in shipped_architectures() {
        let mut arch_worst = 0.0f64;
        for trial in 0..FD_TRIALS {
            let det = arch.build(&mut stream(trial, "acceptance-fd", 0)).unwrap();
            let mut rng = stream(trial, "acceptance-fd", 1);
            let x = Array3::from_shape_fn((3, FD_IMAGE, FD_IMAGE), |_| rng.gen::<f64>());
            let analytic = gradient_of(det.as_ref(), &x, [-1.0, 1.0]);
            let gap = |x: &Array3<f64>| {
                let l = det.forward(std::slice::from_ref(x)).unwrap()[0];
                l.fake - l.real
            };
            let mut xp = x.clone();
            for (idx, &g) in analytic.indexed_iter() {
                let orig = x[idx];
                xp[idx] = orig + FD_STEP;
                let up = gap(&xp);
                xp[idx] = orig - FD_STEP;
                let down = gap(&xp);
                xp[idx] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(FD_REL_FLOOR);
                arch_worst = arch_worst.max(rel);
            }
        }
        per_arch.push(format!("{} {arch_worst:.2e}", arch.id()));
        worst = worst.max(arch_worst);
    }
    let t = start.elapsed();
    verdict(
        worst <= FD_MAX_REL && t < FD_LIMIT,
        format!("max relative error {} over {FD_TRIALS} trials, {:.1}s", per_arch.join(", "), t.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 3

struct Replay {
    pixels: Array3<u8>,
    placed: Vec<(usize, usize)>,
    skipped: Vec<(usize, usize)>,
}

/// Line-by-line replay: gate, rank every coordinate by attention (ties in
/// row-major order), then walk the ranking placing a block on each anchor
/// not yet occluded until N blocks exist.
fn erase_oracle<R: Rng>(
    pixels: &Array3<u8>,
    fam: &Array2<f64>,
    blocks: usize,
    p: f64,
    h_max: usize,
    w_max: usize,
    rng: &mut R,
) -> Replay {
    let mut out = pixels.clone();
    let (c, h, w) = pixels.dim();
    let mut replay = Replay {
        pixels: out.clone(),
        placed: vec![],
        skipped: vec![],
    };
    if !(rng.gen::<f64>() < p) {
        return replay;
    }
    let mut ranking: Vec<(usize, usize)> = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect();
    ranking.sort_by(|&(a, b), &(c, d)| {
        fam[[c, d]]
            .partial_cmp(&fam[[a, b]])
            .unwrap()
            .then(a.cmp(&c))
            .then(b.cmp(&d))
    });
    let mut occluded = vec![vec![false; w]; h];
    for (i, j) in ranking {
        if replay.placed.len() == blocks {
            break;
        }
        if occluded[i][j] {
            replay.skipped.push((i, j));
            continue;
        }
        let h_t = rng.gen_range(1..=h_max) as i64;
        let w_l = rng.gen_range(1..=w_max) as i64;
        let h_b = h_max as i64 - h_t;
        let w_r = w_max as i64 - w_l;
        let (i, j) = (i as i64, j as i64);
        for r in (i + 1 - h_t)..(i + 1 + h_b) {
            for q in (j + 1 - w_l)..(j + 1 + w_r) {
                if r < 0 || q < 0 || r >= h as i64 || q >= w as i64 {
                    continue;
                }
                for ch in 0..c {
                    out[[ch, r as usize, q as usize]] = rng.gen();
                }
                occluded[r as usize][q as usize] = true;
            }
        }
        replay.placed.push((i as usize, j as usize));
    }
    replay.pixels = out;
    replay
}

struct SfeCase {
    image: Image,
    fam: ForgeryAttentionMap,
    config: EraseConfig,
}

fn sfe_case(seed: u64, probability: Option<f64>, fit: bool) -> SfeCase {
    let mut rng = stream(seed, "acceptance-sfe-case", 0);
    let h = rng.gen_range(8..=64);
    let w = rng.gen_range(8..=64);
    let c = if rng.gen_bool(0.8) { 3 } else { 1 };
    let image = random_image(c, h, w, &mut rng);
    // Coarse levels plant many ties; a smooth bump adds structure.
    let levels = rng.gen_range(2..12) as f64;
    let (ci, cj) = (rng.gen_range(0..h) as f64, rng.gen_range(0..w) as f64);
    let values = Array2::from_shape_fn((h, w), |(i, j)| {
        let bump = (-((i as f64 - ci).powi(2) + (j as f64 - cj).powi(2)) / 50.0).exp();
        ((bump + rng.gen::<f64>() * 0.5) * levels).floor() / levels
    });
    let fam = ForgeryAttentionMap::new(values, "hand-built").unwrap();
    let blocks = rng.gen_range(1..=4);
    let (mut h_max, mut w_max) = (rng.gen_range(1..=h.min(12)), rng.gen_range(1..=w.min(12)));
    if fit {
        while blocks * h_max * w_max >= h * w {
            h_max = (h_max - 1).max(1);
            w_max = (w_max - 1).max(1);
        }
    }
    let probability = probability.unwrap_or_else(|| match rng.gen_range(0..3) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.gen(),
    });
    SfeCase {
        image,
        fam,
        config: EraseConfig {
            blocks,
            probability,
            max_height: h_max,
            max_width: w_max,
            guidance: Guidance::FamGuided,
            anchor_budget: None,
        },
    }
}

fn sfe_oracle() -> Verdict {
    let start = Instant::now();
    let mut matched = 0;
    for seed in 0..SFE_RUNS {
        let case = sfe_case(seed, None, false);
        let cfg = &case.config;
        let (out, trace) = erasing::sfe(&case.image, Some(&case.fam), cfg, &mut stream(seed, "acceptance-sfe", 0)).unwrap();
        let replay = erase_oracle(
            case.image.pixels(),
            case.fam.values(),
            cfg.blocks,
            cfg.probability,
            cfg.max_height,
            cfg.max_width,
            &mut stream(seed, "acceptance-sfe", 0),
        );
        if trace.placed == replay.placed && trace.skipped == replay.skipped && *out.pixels() == replay.pixels {
            matched += 1;
        }
    }
    let mut exact_n = 0;
    for seed in 0..SFE_RUNS {
        let case = sfe_case(seed + SFE_RUNS, Some(1.0), true);
        let (_, trace) = erasing::sfe(&case.image, Some(&case.fam), &case.config, &mut stream(seed, "acceptance-sfe", 1)).unwrap();
        if trace.placed.len() == case.config.blocks {
            exact_n += 1;
        }
    }
    let mut untouched = 0;
    for seed in 0..SFE_RUNS {
        let case = sfe_case(seed + 2 * SFE_RUNS, Some(0.0), false);
        let (out, _) = erasing::sfe(&case.image, Some(&case.fam), &case.config, &mut stream(seed, "acceptance-sfe", 2)).unwrap();
        if out == case.image {
            untouched += 1;
        }
    }
    let t = start.elapsed();
    let n = SFE_RUNS as usize;
    verdict(
        matched == n && exact_n == n && untouched == n && t < SFE_LIMIT,
        format!(
            "replay match {matched}/{n}, exactly N placed {exact_n}/{n}, p=0 untouched {untouched}/{n}, {:.1}s",
            t.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn psfe_consistency() -> Verdict {
    let det = Architecture::ReferenceCnn(CnnConfig::default())
        .build(&mut stream(4, "acceptance-psfe", 0))
        .unwrap();
    let mut single = 0;
    for trial in 0..PSFE_SINGLE_TRIALS {
        let mut rng = stream(trial, "acceptance-psfe-image", 0);
        let image = random_image(3, 16, 16, &mut rng);
        let cfg = EraseConfig {
            blocks: 1,
            probability: 1.0,
            max_height: rng.gen_range(1..=6),
            max_width: rng.gen_range(1..=6),
            guidance: Guidance::FamGuided,
            anchor_budget: None,
        };
        let fam = saliency::compute_fam(det.as_ref(), &image).unwrap();
        let (_, a) = erasing::psfe(det.as_ref(), &image, &cfg, &mut stream(trial, "acceptance-psfe", 1)).unwrap();
        let (_, b) = erasing::sfe(&image, Some(&fam), &cfg, &mut stream(trial, "acceptance-psfe", 1)).unwrap();
        if a.placed.len() == 1 && a.placed == b.placed {
            single += 1;
        }
    }
    let mut multi = 0;
    for trial in 0..PSFE_MULTI_TRIALS {
        let mut rng = stream(trial, "acceptance-psfe-image", 1);
        let image = random_image(3, 16, 16, &mut rng);
        let (h_max, w_max) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let cfg = EraseConfig {
            blocks: PSFE_ROUNDS,
            probability: 1.0,
            max_height: h_max,
            max_width: w_max,
            guidance: Guidance::FamGuided,
            anchor_budget: None,
        };
        let (out, trace) = erasing::psfe(det.as_ref(), &image, &cfg, &mut stream(trial, "acceptance-psfe", 2)).unwrap();
        // Per-round oracle: recompute the map on the current image, take the
        // first maximum over unoccluded pixels, then replay the block.
        let mut replay_rng = stream(trial, "acceptance-psfe", 2);
        let _gate: f64 = replay_rng.gen();
        let mut current = image.pixels().clone();
        let mut occluded = Array2::from_elem((16, 16), false);
        let mut ok = trace.placed.len() == PSFE_ROUNDS;
        for round in 0..PSFE_ROUNDS {
            let fam = saliency::compute_fam(det.as_ref(), &Image::new(current.clone()).unwrap()).unwrap();
            let mut best: Option<((usize, usize), f64)> = None;
            for ((i, j), &v) in fam.values().indexed_iter() {
                if !occluded[[i, j]] && best.map_or(true, |(_, b)| v > b) {
                    best = Some(((i, j), v));
                }
            }
            let (anchor, _) = best.unwrap();
            ok &= trace.placed.get(round) == Some(&anchor);
            let h_t = replay_rng.gen_range(1..=h_max);
            let w_l = replay_rng.gen_range(1..=w_max);
            let rows = (anchor.0 + 1).saturating_sub(h_t)..(anchor.0 + 1 + h_max - h_t).min(16);
            let cols = (anchor.1 + 1).saturating_sub(w_l)..(anchor.1 + 1 + w_max - w_l).min(16);
            for r in rows {
                for q in cols.clone() {
                    for ch in 0..3 {
                        current[[ch, r, q]] = replay_rng.gen();
                    }
                    occluded[[r, q]] = true;
                }
            }
        }
        if ok && *out.pixels() == current {
            multi += 1;
        }
    }
    verdict(
        single == PSFE_SINGLE_TRIALS as usize && multi == PSFE_MULTI_TRIALS as usize,
        format!("N=1 matches SFE Top-1 {single}/{PSFE_SINGLE_TRIALS}, N={PSFE_ROUNDS} per-round oracle {multi}/{PSFE_MULTI_TRIALS}"),
    )
}

// ---------------------------------------------------------------- 5

fn pairwise_auc(reals: &[f64], fakes: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &f in fakes {
        for &r in reals {
            twice += if f > r { 2 } else if f == r { 1 } else { 0 };
        }
    }
    twice as f64 / (2 * reals.len() * fakes.len()) as f64
}

/// Best TDR over every candidate threshold (each score and minus infinity)
/// whose false-alarm fraction stays within `level`.
fn scan_tdr(reals: &[f64], fakes: &[f64], level: f64) -> f64 {
    let candidates = reals.iter().chain(fakes).copied().chain(std::iter::once(f64::NEG_INFINITY));
    let mut best = 0.0f64;
    for t in candidates {
        let fa = reals.iter().filter(|&&r| r > t).count();
        if fa as f64 / reals.len() as f64 <= level {
            best = best.max(fakes.iter().filter(|&&f| f > t).count() as f64 / fakes.len() as f64);
        }
    }
    best
}

fn metric_oracles() -> Verdict {
    let start = Instant::now();
    let (mut auc_ok, mut tdr_ok) = (0, 0);
    for set in 0..METRIC_SETS {
        let mut rng = stream(set, "acceptance-metrics", 0);
        let n = rng.gen_range(2..=METRIC_MAX_N);
        let n_real = rng.gen_range(1..n);
        let levels = [4.0, 16.0, 1000.0][rng.gen_range(0..3)];
        let reals: Vec<f64> = (0..n_real).map(|_| (rng.gen::<f64>() * levels).floor() / levels).collect();
        let fakes: Vec<f64> = (0..n - n_real).map(|_| (rng.gen::<f64>() * levels + 0.3).floor() / levels).collect();
        let samples: Vec<ScoredSample> = reals
            .iter()
            .map(|&s| ScoredSample::new(s, Label::Real))
            .chain(fakes.iter().map(|&s| ScoredSample::new(s, Label::Fake)))
            .collect();
        if metrics::roc_auc(&samples).unwrap() == pairwise_auc(&reals, &fakes) {
            auc_ok += 1;
        }
        if METRIC_LEVELS
            .iter()
            .all(|&l| metrics::tdr_at_fdr(&samples, l).unwrap() == scan_tdr(&reals, &fakes, l))
        {
            tdr_ok += 1;
        }
    }
    let t = start.elapsed();
    let n = METRIC_SETS as usize;
    verdict(
        auc_ok == n && tdr_ok == n && t < METRIC_LIMIT,
        format!("AUC exact {auc_ok}/{n}, TDR exact at {METRIC_LEVELS:?} {tdr_ok}/{n}, {:.1}s", t.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 6, 7

#[derive(Clone, Copy)]
struct CellResult {
    coverage: f64,
    tdr: f64,
    seconds: f64,
}

const VARIANTS: [(&str, Option<AblationVariant>); 5] = [
    ("NONE", None),
    ("FAM&MEB", Some(AblationVariant::FamMeb)),
    ("MEB", Some(AblationVariant::Meb)),
    ("FAM", Some(AblationVariant::Fam)),
    ("unguided", Some(AblationVariant::Neither)),
];

fn run_trend_cells(variants: &[usize]) -> (BTreeMap<(usize, u64), CellResult>, f64) {
    let base = ExperimentConfig::from_toml(TREND_CONFIG).unwrap();
    let Augmentation::Rfm(erase) = &base.augmentation else {
        panic!("trend profile must use rfm")
    };
    let less = harness::less_forgery_set_name(Region::Eyes);
    let mut out = BTreeMap::new();
    let mut data_seconds = 0.0;
    for &seed in &TREND_SEEDS {
        let mut config = base.clone();
        config.seed = Some(seed);
        config.eval.fdr_levels = vec![TREND_FDR];
        config.eval.less_forgery = vec![Region::Eyes];
        let t = Instant::now();
        let sets = harness::load_datasets(&config).unwrap();
        data_seconds += t.elapsed().as_secs_f64();
        for &v in variants {
            let mut c = config.clone();
            c.augmentation = match VARIANTS[v].1 {
                None => Augmentation::None,
                Some(var) => Augmentation::Rfm(var.apply(erase)),
            };
            let t = Instant::now();
            let (_, _, reports) = harness::run_cell(&c, &sets).unwrap();
            let standard = reports.iter().find(|r| r.test_set == harness::STANDARD_SET).unwrap();
            let neutral = reports.iter().find(|r| r.test_set == less).unwrap();
            out.insert(
                (v, seed),
                CellResult {
                    coverage: standard.attention_coverage.unwrap(),
                    tdr: neutral.tdr_at(TREND_FDR).unwrap(),
                    seconds: t.elapsed().as_secs_f64(),
                },
            );
        }
    }
    (out, data_seconds)
}

fn trend_reproduction(cells: &BTreeMap<(usize, u64), CellResult>, data_seconds: f64) -> Verdict {
    let (mut cov_wins, mut tdr_wins, mut seconds) = (0, 0, data_seconds);
    let mut rows = Vec::new();
    for &seed in &TREND_SEEDS {
        let none = cells[&(0, seed)];
        let rfm = cells[&(1, seed)];
        seconds += none.seconds + rfm.seconds;
        cov_wins += usize::from(rfm.coverage > none.coverage);
        tdr_wins += usize::from(rfm.tdr >= none.tdr);
        rows.push(format!(
            "seed {seed}: coverage {:.3}/{:.3} tdr {:.3}/{:.3}",
            rfm.coverage, none.coverage, rfm.tdr, none.tdr
        ));
    }
    for r in &rows {
        println!("    {r} (RFM/NONE)");
    }
    verdict(
        cov_wins >= TREND_MIN_WINS && tdr_wins >= TREND_MIN_WINS && seconds < TREND_LIMIT.as_secs_f64(),
        format!(
            "coverage higher {cov_wins}/5, neutralized TDR@{TREND_FDR} not lower {tdr_wins}/5 (need {TREND_MIN_WINS}), {seconds:.0}s"
        ),
    )
}

fn variant_ordering(cells: &BTreeMap<(usize, u64), CellResult>) -> Verdict {
    let mean = |v: usize| TREND_SEEDS.iter().map(|s| cells[&(v, *s)].tdr).sum::<f64>() / TREND_SEEDS.len() as f64;
    let lead = mean(1);
    let mut pass = true;
    let mut parts = vec![format!("FAM&MEB mean {lead:.3}")];
    for v in 2..VARIANTS.len() {
        let losses = TREND_SEEDS.iter().filter(|s| cells[&(1, **s)].tdr < cells[&(v, **s)].tdr).count();
        let m = mean(v);
        pass &= lead >= m && losses <= VARIANT_MAX_STRICT_LOSSES;
        parts.push(format!("{} mean {m:.3} (FAM&MEB strictly lower in {losses}/5)", VARIANTS[v].0));
    }
    verdict(pass, parts.join(", "))
}

// ---------------------------------------------------------------- 8

fn loop_accounting() -> Verdict {
    let mut config = ExperimentConfig::from_toml(SMOKE_CONFIG).unwrap();
    let sets = harness::load_datasets(&config).unwrap();
    let mut counts = Vec::new();
    for (aug, iterations) in [(config.augmentation.clone(), 1), (config.augmentation.clone(), 3), (Augmentation::None, 1)] {
        config.augmentation = aug;
        config.train.iterations = iterations;
        let mut det = Instrumented::new(harness::init_detector(&config).unwrap());
        let counters = det.counters();
        let mut losses = vec![];
        harness::train_detector(&config, &sets.train, &mut det, &mut losses, |_, _| Ok(())).unwrap();
        counts.push(counters.snapshot());
    }
    verdict(
        counts == [(2, 2, 1), (6, 6, 3), (1, 1, 1)],
        format!(
            "RFM 1 iteration {:?}, 3 iterations {:?}, baseline 1 iteration {:?} (forward, backward, updates)",
            counts[0], counts[1], counts[2]
        ),
    )
}

// ---------------------------------------------------------------- 9

fn run_pipeline(config: &Path, out: &Path) -> Result<RunManifest, String> {
    for cmd in ["gen-data", "train", "eval", "visualize"] {
        let status = Command::new(env!("CARGO_BIN_EXE_rfm"))
            .args([cmd, "--config"])
            .arg(config)
            .arg("--out")
            .arg(out)
            .arg("--seed")
            .arg("11")
            .env("RUST_LOG", "error")
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&status.stderr).trim()));
        }
    }
    RunManifest::load(out).map_err(|e| e.to_string())
}

fn cli_round_trip() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("smoke.toml");
    std::fs::write(&config, SMOKE_CONFIG).unwrap();
    let (a, b) = (dir.path().join("run-a"), dir.path().join("run-b"));
    let (ma, mb) = match (run_pipeline(&config, &a), run_pipeline(&config, &b)) {
        (Ok(ma), Ok(mb)) => (ma, mb),
        (Err(e), _) | (_, Err(e)) => return verdict(false, e),
    };
    let bad = ma.verify(&a);
    let numeric = |k: &String| [".npy", ".csv", ".json", ".ckpt", ".png"].iter().any(|x| k.ends_with(x));
    let keys: Vec<&String> = ma.files.keys().filter(|k| numeric(k)).collect();
    let differing: Vec<&&String> = keys.iter().filter(|k| ma.files.get(**k) != mb.files.get(**k)).collect();
    let complete = ma.status == "complete" && ma.commands == ["gen-data", "train", "eval", "visualize"];
    verdict(
        bad.is_empty() && differing.is_empty() && complete && !keys.is_empty(),
        format!(
            "{} files listed, {} missing or mismatched, {} numeric artifacts, {} differ on rerun",
            ma.files.len(),
            bad.len(),
            keys.len(),
            differing.len()
        ),
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let on = |n: u32| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Verdict| {
        println!("{} {n}. {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };
    if on(1) {
        report(1, "FAM dual-form equivalence", fam_dual_form());
    }
    if on(2) {
        report(2, "input gradient vs central differences", gradient_check());
    }
    if on(3) {
        report(3, "SFE replay oracle", sfe_oracle());
    }
    if on(4) {
        report(4, "PSFE consistency", psfe_consistency());
    }
    if on(5) {
        report(5, "metric oracles", metric_oracles());
    }
    if on(6) || on(7) {
        let variants: Vec<usize> = if on(7) { (0..VARIANTS.len()).collect() } else { vec![0, 1] };
        let (cells, data_seconds) = run_trend_cells(&variants);
        if on(6) {
            report(6, "desk-scale trend reproduction", trend_reproduction(&cells, data_seconds));
        }
        if on(7) {
            report(7, "variant ordering", variant_ordering(&cells));
        }
    }
    if on(8) {
        report(8, "mining loop accounting", loop_accounting());
    }
    if on(9) {
        report(9, "CLI round trip", cli_round_trip());
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
