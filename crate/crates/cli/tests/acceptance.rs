//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. The training experiment dominates the
//! runtime (two full 2,000-image runs plus a 200-image run).

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use axum::body::{Body, Bytes};
use axum::http::{Request, StatusCode};
use axum::Router;
use boxseg::annotate::{assist_segment, marker_from_mask, segment_slice};
use boxseg::imgproc::{normalize_volume, Modality, Volume};
use boxseg::iohub::{
    decode_checkpoint, decode_volume, encode_checkpoint, encode_checkpoint_with, encode_volume, rle_decode,
    rle_encode, checkpoint_manifest, RleMask, VolumeContainer, CHECKPOINT_MAGIC, VOLUME_MAGIC,
};
use boxseg::mask::BinaryMask;
use boxseg::metrics::{
    boundary, dsc, evaluate_run, nsd, wilcoxon_signed_rank, wilcoxon_signed_rank_with, EvalOptions, Method,
};
use boxseg::model::{init_params, ModelConfig, ParameterSet};
use boxseg::synth::{generate_dataset, generate_tumor_volume, Sample, SynthSpec};
use boxseg::train::{dice_loss, grad_check, split_dataset, train_split, TrainConfig};
use boxseg_service::{router, AppState, CreateResponse, SegmentResponse};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tower::ServiceExt;

type Outcome = Result<String, String>;

struct Suite {
    failed: usize,
}

impl Suite {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL {name}: {detail} ({secs:.1} s)");
            }
        }
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = grad_check(&ModelConfig::micro()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = report.worst().map(|g| g.group.clone()).unwrap_or_default();
    let max = report.max_error();
    verdict(
        max < 1e-4 && secs < 300.0,
        format!("{} groups, max rel error {max:.2e} ({worst}), limit 1e-4 in < 300 s", report.groups.len()),
    )
}

fn random_mask(rng: &mut ChaCha8Rng, dims: &[usize]) -> BinaryMask {
    let n: usize = dims.iter().product();
    let p = rng.random_range(0.05..0.7);
    BinaryMask::from_bools(dims.to_vec(), (0..n).map(|_| rng.random_bool(p))).unwrap()
}

/// Blobby masks (union of random boxes) so boundaries are not all noise.
fn blob_mask(rng: &mut ChaCha8Rng, dims: &[usize]) -> BinaryMask {
    let mut m = BinaryMask::zeros(dims.to_vec());
    let n = m.len();
    let mut data = m.data().to_vec();
    for _ in 0..rng.random_range(0..4) {
        let lo: Vec<usize> = dims.iter().map(|&d| rng.random_range(0..d)).collect();
        let hi: Vec<usize> = dims.iter().zip(&lo).map(|(&d, &l)| rng.random_range(l + 1..=d)).collect();
        for (i, v) in data.iter_mut().enumerate().take(n) {
            let mut r = i;
            let mut inside = true;
            for a in (0..dims.len()).rev() {
                let c = r % dims[a];
                r /= dims[a];
                inside &= lo[a] <= c && c < hi[a];
            }
            if inside {
                *v = 1;
            }
        }
    }
    m = BinaryMask::new(dims.to_vec(), data).unwrap();
    m
}

fn coords(dims: &[usize], mut i: usize) -> Vec<i64> {
    let mut c = vec![0; dims.len()];
    for a in (0..dims.len()).rev() {
        c[a] = (i % dims[a]) as i64;
        i /= dims[a];
    }
    c
}

/// Boundary by direct neighbor inspection; outside the grid is background.
fn boundary_oracle(m: &BinaryMask) -> Vec<Vec<i64>> {
    let dims = m.dims();
    let at = |c: &[i64]| -> bool {
        let mut idx = 0usize;
        for (a, &v) in c.iter().enumerate() {
            if v < 0 || v >= dims[a] as i64 {
                return false;
            }
            idx = idx * dims[a] + v as usize;
        }
        m.data()[idx] == 1
    };
    (0..m.len())
        .map(|i| coords(dims, i))
        .filter(|c| at(c))
        .filter(|c| {
            (0..c.len()).any(|a| {
                [-1, 1].iter().any(|&d| {
                    let mut n = c.clone();
                    n[a] += d;
                    !at(&n)
                })
            })
        })
        .collect()
}

fn dsc_oracle(g: &BinaryMask, s: &BinaryMask) -> f64 {
    let inter = g.data().iter().zip(s.data()).filter(|(a, b)| **a == 1 && **b == 1).count();
    let total = g.data().iter().filter(|&&v| v == 1).count() + s.data().iter().filter(|&&v| v == 1).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn nsd_oracle(bg: &[Vec<i64>], bs: &[Vec<i64>], tau: f64) -> f64 {
    if bg.is_empty() && bs.is_empty() {
        return 1.0;
    }
    let near = |p: &Vec<i64>, set: &[Vec<i64>]| {
        set.iter().any(|q| {
            let d2: i64 = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 as f64 <= tau * tau
        })
    };
    let hits = bg.iter().filter(|p| near(p, bs)).count() + bs.iter().filter(|p| near(p, bg)).count();
    hits as f64 / (bg.len() + bs.len()) as f64
}

const TAUS: [f64; 7] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 5.0];

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut pairs = Vec::new();
    for i in 0..200 {
        let dims = vec![rng.random_range(1..=32), rng.random_range(1..=32)];
        let mk = if i % 2 == 0 { random_mask } else { blob_mask };
        pairs.push((mk(&mut rng, &dims), mk(&mut rng, &dims)));
    }
    for i in 0..50 {
        let dims = vec![rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=16)];
        let mk = if i % 2 == 0 { random_mask } else { blob_mask };
        pairs.push((mk(&mut rng, &dims), mk(&mut rng, &dims)));
    }
    let (mut worst, mut non_monotone) = (0.0f64, 0usize);
    for (g, s) in &pairs {
        let (bg, bs) = (boundary_oracle(g), boundary_oracle(s));
        let bd = boundary(g);
        let got_bg: Vec<Vec<i64>> = (0..g.len()).filter(|&i| bd.data()[i] == 1).map(|i| coords(g.dims(), i)).collect();
        if got_bg != bg {
            return Err(format!("boundary differs on a {:?} mask", g.dims()));
        }
        worst = worst.max((dsc(g, s).unwrap().value - dsc_oracle(g, s)).abs());
        let mut last = 0.0;
        for tau in TAUS {
            let v = nsd(g, s, tau).unwrap().value;
            worst = worst.max((v - nsd_oracle(&bg, &bs, tau)).abs());
            if v < last {
                non_monotone += 1;
            }
            last = v;
        }
    }
    verdict(
        worst <= 1e-12 && non_monotone == 0,
        format!(
            "200 2-D + 50 3-D pairs, max |metric - oracle| {worst:.1e} (limit 1e-12), {non_monotone} NSD decreases over tau {TAUS:?}"
        ),
    )
}

fn duality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < 100 {
        let dims = [rng.random_range(1..=32), rng.random_range(1..=32)];
        let (g, s) = (random_mask(&mut rng, &dims), random_mask(&mut rng, &dims));
        if g.count() + s.count() == 0 {
            continue;
        }
        let probs: Vec<f64> = s.data().iter().map(|&v| v as f64).collect();
        let l = dice_loss(&probs, &g, 0.0).unwrap();
        worst = worst.max((l - (1.0 - dsc(&g, &s).unwrap().value)).abs());
        done += 1;
    }
    verdict(worst == 0.0, format!("100 binary pairs, max |dice_loss - (1 - dsc)| = {worst:e}"))
}

struct Trained {
    dataset: boxseg::synth::Dataset,
    split: boxseg::train::Split,
    model: ModelConfig,
    config: TrainConfig,
    params: ParameterSet,
}

impl Trained {
    fn val(&self) -> Vec<&Sample> {
        self.split.val.iter().map(|&i| &self.dataset.samples[i]).collect()
    }
}

fn median_dsc(samples: &[&Sample], params: &ParameterSet, cfg: &ModelConfig, perturb: u32) -> (f64, f64) {
    let opts = EvalOptions {
        perturb_max: perturb,
        ..EvalOptions::default()
    };
    let r = evaluate_run(samples, params, cfg, &opts).unwrap();
    (r.overall().dsc.median, r.overall().nsd.median)
}

fn training_experiment(slot: &mut Option<Trained>) -> Outcome {
    let start = Instant::now();
    let dataset = generate_dataset(&SynthSpec::default(), 2000).map_err(|e| e.to_string())?;
    let model = ModelConfig::default();
    let config = TrainConfig::default();
    let split = split_dataset(&dataset.group_ids(), config.fractions, config.seed).map_err(|e| e.to_string())?;
    let val: Vec<&Sample> = split.val.iter().map(|&i| &dataset.samples[i]).collect();
    let (untrained, _) = median_dsc(&val, &init_params(&model).unwrap(), &model, 0);
    let run = || train_split(&dataset, &split.train, &split.tune, &model, &config, |_| {}).map_err(|e| e.to_string());
    let first = run()?;
    let (val_dsc, val_nsd) = median_dsc(&val, &first.params, &model, 0);
    let secs = start.elapsed().as_secs_f64();
    let loss_drop = first.log.first().map(|l| l.mean_loss) > first.log.last().map(|l| l.mean_loss);
    let second = run()?;
    let (h1, h2) = (first.params.content_hash(), second.params.content_hash());
    let detail = format!(
        "{} train / {} tune / {} val images; untrained median DSC {untrained:.3} (<= 0.30), trained median DSC {val_dsc:.3} (>= 0.85), NSD {val_nsd:.3} (>= 0.80), run {secs:.0} s (<= 1800), loss {:.3} -> {:.3}, rerun hash {}",
        split.train.len(),
        split.tune.len(),
        split.val.len(),
        first.log.first().map(|l| l.mean_loss).unwrap_or(f64::NAN),
        first.log.last().map(|l| l.mean_loss).unwrap_or(f64::NAN),
        if h1 == h2 { "identical" } else { "DIFFERS" },
    );
    let ok = untrained <= 0.30 && val_dsc >= 0.85 && val_nsd >= 0.80 && secs <= 1800.0 && loss_drop && h1 == h2;
    *slot = Some(Trained {
        dataset,
        split,
        model,
        config,
        params: first.params,
    });
    verdict(ok, detail)
}

fn scaling(t: &Trained) -> Outcome {
    // The 200-image arm keeps whole groups: the first 160 training images of
    // the large split (32 groups) plus the 20 first tuning images.
    let small_train: Vec<usize> = t.split.train[..160].to_vec();
    let small_tune: Vec<usize> = t.split.tune[..20].to_vec();
    let groups = |idx: &[usize]| {
        let mut g: Vec<u32> = idx.iter().map(|&i| t.dataset.samples[i].group_id).collect();
        g.dedup();
        g
    };
    if groups(&small_train).len() != 32 {
        return Err("small arm does not consist of whole groups".into());
    }
    let small = train_split(&t.dataset, &small_train, &small_tune, &t.model, &t.config, |_| {}).map_err(|e| e.to_string())?;
    let val = t.val();
    let (big, _) = median_dsc(&val, &t.params, &t.model, 0);
    let (little, _) = median_dsc(&val, &small.params, &t.model, 0);
    verdict(
        big - little >= 0.03,
        format!("held-out median DSC {big:.3} (2,000 images) vs {little:.3} (200 images), gain {:.3} (>= 0.03)", big - little),
    )
}

fn box_robustness(t: &Trained) -> Outcome {
    let val = t.val();
    let (tight, _) = median_dsc(&val, &t.params, &t.model, 0);
    let (loose, _) = median_dsc(&val, &t.params, &t.model, 3);
    verdict(
        tight - loose <= 0.05,
        format!("median DSC tight {tight:.3}, perturbed <= 3 px {loose:.3}, degradation {:.3} (<= 0.05)", tight - loose),
    )
}

fn assist_experiment(t: &Trained) -> Outcome {
    let (mut assisted, mut tight, mut marked, mut slices) = (Vec::new(), Vec::new(), 0, 0);
    for seed in 0..10 {
        let spec = SynthSpec {
            seed,
            ..SynthSpec::default()
        };
        let (raw, truth) = generate_tumor_volume(&spec, 24).map_err(|e| e.to_string())?;
        let volume = normalize_volume(&raw).map_err(|e| e.to_string())?.output;
        let tumor: Vec<usize> = (0..truth.depth()).filter(|&k| truth.slice(k).unwrap().count() > 0).collect();
        let (first, last) = (tumor[0], *tumor.last().unwrap());
        let mut at: Vec<usize> = (first..=last).step_by(5).collect();
        if *at.last().unwrap() != last {
            at.push(last);
        }
        let markers: Vec<_> = at.iter().map(|&k| marker_from_mask(&truth.slice(k).unwrap(), k).unwrap()).collect();
        marked += markers.len();
        let out = assist_segment(&volume, &markers, &t.params, &t.model).map_err(|e| e.to_string())?;
        for k in first..=last {
            let gt = truth.slice(k).unwrap();
            let a = &out.masks.get(&k).ok_or(format!("slice {k} not segmented"))?.mask;
            assisted.push(dsc(&gt, a).unwrap().value);
            let b = gt.bounding_box().ok_or(format!("tumor gap at slice {k}"))?;
            let s = segment_slice(&volume, k, &b, &t.params, &t.model).map_err(|e| e.to_string())?;
            tight.push(dsc(&gt, &s.mask).unwrap().value);
            slices += 1;
        }
    }
    let med = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    };
    let (a, b) = (med(&mut assisted), med(&mut tight));
    verdict(
        (a - b).abs() <= 0.05,
        format!("10 volumes, {slices} tumor slices from {marked} markers: median DSC assisted {a:.3} vs every-slice tight box {b:.3} (|diff| <= 0.05)"),
    )
}

fn wilcoxon_validation() -> Outcome {
    let a = [0.9, 0.8, 0.7, 0.95, 0.85, 0.75];
    let b = [0.89, 0.78, 0.67, 0.91, 0.80, 0.69];
    let r = wilcoxon_signed_rank(&a, &b).map_err(|e| e.to_string())?;
    let hand = (r.p_value - 0.03125).abs() < 1e-12 && r.statistic == 0.0 && r.method == Method::Exact;

    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.3..0.4)).collect();
        let e = wilcoxon_signed_rank_with(&x, &y, Some(Method::Exact)).unwrap().p_value;
        let n = wilcoxon_signed_rank_with(&x, &y, Some(Method::NormalApprox)).unwrap().p_value;
        worst = worst.max((e - n).abs());
    }
    let same = wilcoxon_signed_rank(&a, &a).map_err(|e| e.to_string())?;
    verdict(
        hand && worst <= 0.01 && same.p_value == 1.0 && same.degenerate,
        format!(
            "n=6 all positive: W={} p={:.5} (0.03125); n=25 exact vs normal max |dp| {worst:.4} over 20 draws (<= 0.01); identical samples p={} degenerate={}",
            r.statistic, r.p_value, same.p_value, same.degenerate
        ),
    )
}

fn frame(magic: &[u8], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut b = magic.to_vec();
    b.extend_from_slice(&(header.len() as u32).to_le_bytes());
    b.extend_from_slice(header);
    b.extend_from_slice(payload);
    b
}

/// A malformed variant of `good`, chosen by `kind`; every variant is
/// invalid by construction.
fn corrupt(rng: &mut ChaCha8Rng, good: &[u8], magic: &[u8], kind: usize) -> Vec<u8> {
    let hlen = u32::from_le_bytes(good[4..8].try_into().unwrap()) as usize;
    let (header, payload) = (&good[8..8 + hlen], &good[8 + hlen..]);
    match kind {
        0 => good[..rng.random_range(0..good.len())].to_vec(),
        1 => {
            let mut b = good.to_vec();
            b.extend((0..rng.random_range(1..16)).map(|_| rng.random::<u8>()));
            b
        }
        2 => {
            let mut b = good.to_vec();
            b[rng.random_range(0..4)] ^= rng.random_range(1..=255);
            b
        }
        3 => {
            let mut b = good.to_vec();
            let bad = loop {
                let v: u32 = if rng.random_bool(0.5) { rng.random() } else { rng.random_range(0..hlen as u32 * 2) };
                if v as usize != hlen {
                    break v;
                }
            };
            b[4..8].copy_from_slice(&bad.to_le_bytes());
            b
        }
        4 => {
            let junk: Vec<u8> = (0..rng.random_range(0..40)).map(|_| rng.random_range(0x20..0x7f)).collect();
            frame(magic, &[b"{".as_slice(), &junk].concat(), payload)
        }
        5 => {
            let mut v: serde_json::Value = serde_json::from_slice(header).unwrap();
            mutate_header(rng, &mut v);
            frame(magic, &serde_json::to_vec(&v).unwrap(), payload)
        }
        _ => (0..rng.random_range(0..64)).map(|_| rng.random::<u8>()).collect(),
    }
}

fn mutate_header(rng: &mut ChaCha8Rng, v: &mut serde_json::Value) {
    if let Some(dims) = v.get_mut("dims") {
        let arr = dims.as_array_mut().unwrap();
        match rng.random_range(0..4) {
            0 => arr.clear(),
            1 => arr.push(json!(rng.random_range(2..9))),
            2 => arr[0] = json!(0),
            _ => {
                let k = rng.random_range(0..arr.len());
                arr[k] = json!(arr[k].as_u64().unwrap() + rng.random_range(1..5));
            }
        }
    } else {
        match rng.random_range(0..4) {
            0 => v["format_version"] = json!(rng.random_range(2..100)),
            1 => v["content_hash"] = json!(format!("{:064x}", rng.random::<u128>())),
            2 => {
                let p = v["parameters"].as_array_mut().unwrap();
                let k = rng.random_range(0..p.len());
                p.remove(k);
            }
            _ => {
                let p = v["parameters"].as_array_mut().unwrap();
                let k = rng.random_range(0..p.len());
                p[k]["length"] = json!(p[k]["length"].as_u64().unwrap() + 1);
            }
        }
    }
}

fn corrupt_rle(rng: &mut ChaCha8Rng, good: &RleMask) -> RleMask {
    let mut r = good.clone();
    match rng.random_range(0..5) {
        0 => r.counts.clear(),
        1 => {
            let k = rng.random_range(0..r.counts.len());
            r.counts[k] += rng.random_range(1..10);
        }
        2 => {
            r.counts.push(0);
        }
        3 => r.dims = vec![],
        _ => r.dims = vec![1 << 16, 1 << 16, 4],
    }
    r
}

fn format_fuzzing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (mut malformed, mut accepted, mut panics, mut flips) = (0usize, 0usize, 0usize, 0usize);
    let mut try_decode = |f: &mut dyn FnMut() -> bool| match catch_unwind(AssertUnwindSafe(f)) {
        Ok(true) => accepted += 1,
        Ok(false) => {}
        Err(_) => panics += 1,
    };

    let cfg = ModelConfig::micro();
    let params = init_params(&cfg).unwrap();
    let ckpt = encode_checkpoint(&params, &cfg);
    let volumes: Vec<Vec<u8>> = (0..20)
        .map(|i| {
            let dims = (rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..9));
            let data = (0..dims.0 * dims.1 * dims.2).map(|_| rng.random::<f32>()).collect();
            let v = Volume::new(dims.0, dims.1, dims.2, data, Modality::Mr).unwrap();
            if i % 2 == 0 {
                encode_volume(&VolumeContainer::from_volume(&v))
            } else {
                encode_volume(&VolumeContainer::from_mask(&random_mask(&mut rng, &[dims.0, dims.1, dims.2])))
            }
        })
        .collect();

    for i in 0..3334 {
        let good = &volumes[i % volumes.len()];
        let bad = corrupt(&mut rng, good, VOLUME_MAGIC, i % 7);
        try_decode(&mut || decode_volume(&bad).is_ok());
        malformed += 1;
    }
    for i in 0..3333 {
        let bad = if i % 8 == 7 {
            // one flipped bit in the parameter blob
            let mut b = ckpt.clone();
            let hlen = u32::from_le_bytes(b[4..8].try_into().unwrap()) as usize;
            let k = rng.random_range(8 + hlen..b.len());
            b[k] ^= 1 << rng.random_range(0..8);
            b
        } else {
            corrupt(&mut rng, &ckpt, CHECKPOINT_MAGIC, i % 8)
        };
        try_decode(&mut || decode_checkpoint(&bad).is_ok());
        malformed += 1;
    }
    for _ in 0..3333 {
        let dims = [rng.random_range(1..20), rng.random_range(1..20)];
        let good = rle_encode(&random_mask(&mut rng, &dims));
        let bad = corrupt_rle(&mut rng, &good);
        try_decode(&mut || rle_decode(&bad).is_ok());
        malformed += 1;
    }
    let rejected_all = accepted == 0;

    // Random bit flips anywhere: may or may not stay valid, must not panic.
    for i in 0..2000 {
        let mut b = if i % 2 == 0 { volumes[i % volumes.len()].clone() } else { ckpt.clone() };
        for _ in 0..rng.random_range(1..4) {
            let k = rng.random_range(0..b.len());
            b[k] ^= 1 << rng.random_range(0..8);
        }
        if catch_unwind(|| {
            let _ = decode_volume(&b);
            let _ = decode_checkpoint(&b);
        })
        .is_err()
        {
            panics += 1;
        }
        flips += 1;
    }

    let mut roundtrip_failures = 0;
    for _ in 0..1000 {
        let dims: Vec<usize> = if rng.random_bool(0.5) {
            vec![rng.random_range(1..40), rng.random_range(1..40)]
        } else {
            vec![rng.random_range(1..8), rng.random_range(1..12), rng.random_range(1..12)]
        };
        let m = random_mask(&mut rng, &dims);
        roundtrip_failures += (rle_decode(&rle_encode(&m)).ok() != Some(m)) as usize;
    }
    for good in &volumes {
        roundtrip_failures += (encode_volume(&decode_volume(good).unwrap()) != *good) as usize;
    }
    let (c2, p2) = decode_checkpoint(&ckpt).unwrap();
    roundtrip_failures += (encode_checkpoint(&p2, &c2) != ckpt) as usize;
    roundtrip_failures += (encode_checkpoint_with(&checkpoint_manifest(&params, &cfg), &params.to_le_bytes()) != ckpt) as usize;

    verdict(
        rejected_all && panics == 0 && roundtrip_failures == 0,
        format!(
            "{malformed} malformed inputs, {accepted} accepted, {panics} panics; {flips} random bit-flip inputs; 1,000 RLE + 20 volume + checkpoint roundtrips, {roundtrip_failures} not bit-exact"
        ),
    )
}

async fn call(app: &Router, method: &str, uri: &str, body: serde_json::Value) -> (StatusCode, Bytes) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(serde_json::to_vec(&body).unwrap()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes())
}

async fn service_contract(params: ParameterSet, cfg: ModelConfig) -> Outcome {
    let fresh = || router(Arc::new(AppState::new(params.clone(), cfg.clone(), 64)));
    let app = fresh();
    let (st, body) = call(&app, "POST", "/api/sessions", json!({ "synth": { "depth": 20 } })).await;
    if st != StatusCode::CREATED {
        return Err(format!("session creation returned {st}"));
    }
    let created: CreateResponse = serde_json::from_slice(&body).unwrap();
    let uri = format!("/api/sessions/{}/segment", created.id);
    let boxes = [
        json!({ "x_min": 18, "y_min": 20, "x_max": 46, "y_max": 44 }),
        json!({ "x_min": 10, "y_min": 12, "x_max": 40, "y_max": 50 }),
    ];
    let (mut cold, mut cached, mut mismatches, mut flags) = (Vec::new(), Vec::new(), 0, 0);
    let mut first_masks = BTreeMap::new();
    for _round in 0..3 {
        for k in 2..18 {
            for (j, b) in boxes.iter().enumerate() {
                let (st, body) = call(&app, "POST", &uri, json!({ "slice": k, "box": b })).await;
                if st != StatusCode::OK {
                    return Err(format!("segment returned {st}: {}", String::from_utf8_lossy(&body)));
                }
                let r: SegmentResponse = serde_json::from_slice(&body).unwrap();
                let expect_hit = first_masks.keys().any(|&(kk, _)| kk == k);
                flags += (r.cache_hit != expect_hit) as usize;
                if r.cache_hit {
                    cached.push(r.inference_ms);
                } else {
                    cold.push(r.inference_ms);
                }
                match first_masks.get(&(k, j)) {
                    Some(m) => mismatches += (*m != r.mask) as usize,
                    None => {
                        first_masks.insert((k, j), r.mask);
                    }
                }
            }
        }
    }
    // A second process-equivalent state must agree with the cached answers.
    let other = fresh();
    let (_, body) = call(&other, "POST", "/api/sessions", json!({ "synth": { "depth": 20 } })).await;
    let id2 = serde_json::from_slice::<CreateResponse>(&body).unwrap().id;
    for k in [2, 9, 17] {
        let (_, body) = call(&other, "POST", &format!("/api/sessions/{id2}/segment"), json!({ "slice": k, "box": boxes[1] })).await;
        let r: SegmentResponse = serde_json::from_slice(&body).unwrap();
        mismatches += (first_masks[&(k, 1)] != r.mask) as usize;
    }
    let med = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (c, h) = (med(&mut cold), med(&mut cached));
    verdict(
        mismatches == 0 && flags == 0 && h < 0.5 * c,
        format!(
            "{} cold / {} cached calls, {mismatches} mask mismatches, {flags} wrong cache flags; median latency cold {c:.2} ms, cached {h:.2} ms, ratio {:.2} (< 0.5)",
            cold.len(),
            cached.len(),
            h / c
        ),
    )
}

fn main() {
    let mut suite = Suite { failed: 0 };
    let start = Instant::now();
    suite.check("gradient suite", gradient_suite);
    suite.check("metric oracle equivalence", metric_oracle);
    suite.check("loss/metric duality", duality);
    let mut trained = None;
    suite.check("training experiment", || training_experiment(&mut trained));
    let missing = || Err::<String, _>("no trained model".to_string());
    suite.check("scaling smoke", || trained.as_ref().map_or_else(missing, scaling));
    suite.check("box robustness", || trained.as_ref().map_or_else(missing, box_robustness));
    suite.check("annotation assist", || trained.as_ref().map_or_else(missing, assist_experiment));
    suite.check("wilcoxon validation", wilcoxon_validation);
    suite.check("format fuzzing", format_fuzzing);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let (params, cfg) = match &trained {
        Some(t) => (t.params.clone(), t.model.clone()),
        None => {
            let cfg = ModelConfig::default();
            (init_params(&cfg).unwrap(), cfg)
        }
    };
    suite.check("service contract", || rt.block_on(service_contract(params, cfg)));
    suite.check("suite without the web UI", || {
        Ok("every check above drives the library or the HTTP router directly; no browser client is built or started".into())
    });
    println!(
        "{} criteria failed, total {:.0} s",
        suite.failed,
        start.elapsed().as_secs_f64()
    );
    if suite.failed > 0 {
        std::process::exit(1);
    }
}
