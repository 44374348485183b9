//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.
//!
//! The desk-scale training criteria (4 to 8) use h = 64, D = 512, 256 true
//! atoms, s = 8, noise 0.05, 10^5 rows, K = 32, 4000 steps of batch 256 and
//! seeds 0, 1, 2. Set `HIERTOPK_ACCEPTANCE_SCALE=full` for h = 128, D = 2048,
//! 1024 atoms and 2 * 10^5 rows (much slower).

use std::alloc::{GlobalAlloc, Layout, System};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use hiertopk::codes::{make_schedule, topk_rows, IndexSchedule};
use hiertopk::dataio::{
    generate_synthetic, read_activations, write_activations, ActivationReader, SyntheticSpec,
};
use hiertopk::evalkit::{compare_inference_modes, sweep, EvalOptions, InferenceMode, SweepEntry};
use hiertopk::hloss::{
    loss_fused, loss_fused_into, loss_fused_with_grads, loss_naive, loss_topk_with_grads, Grads,
};
use hiertopk::model::{load, save, CheckpointMeta};
use hiertopk::{ActivationKind, Error, FormatError, Matrix, Rng, SaeParams, TrainConfig, Trainer};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = System.alloc(layout);
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout);
        CURRENT.fetch_sub(layout.size(), Ordering::SeqCst);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = System.realloc(ptr, layout, new_size);
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::SeqCst) + new_size
                    - layout.size();
                PEAK.fetch_max(now, Ordering::SeqCst);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::SeqCst);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Peak bytes allocated by `f` above what was live when it started.
fn peak_during<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let base = CURRENT.load(Ordering::SeqCst);
    PEAK.store(base, Ordering::SeqCst);
    let r = f();
    (r, PEAK.load(Ordering::SeqCst) - base)
}

type Verdict = (bool, String);

fn rel(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < 1e-12 {
        (a - b).abs()
    } else {
        (a - b).abs() / m
    }
}

fn random_instance(seed: u64, b: usize, d: usize, h: usize) -> (SaeParams<f64>, Matrix<f64>) {
    let mut rng = Rng::new(seed);
    let mut p = SaeParams::<f64>::init(d, h, &mut rng);
    p.w_enc = rng.normal_matrix(d, h);
    p.b_enc = (0..d).map(|_| 0.2 * rng.normal()).collect();
    p.b_dec = (0..h).map(|_| 0.2 * rng.normal()).collect();
    (p, rng.normal_matrix(b, h))
}

fn criterion_1() -> Verdict {
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for i in 0..120 {
        let d = 1 + rng.below(32);
        let h = 1 + rng.below(16);
        let b = 1 + rng.below(8);
        let k = 1 + rng.below(8.min(d));
        let (p64, x64) = random_instance(1000 + i, b, d, h);
        let (p, x) = (p64.cast::<f32>(), x64.cast::<f32>());
        let levels: Vec<usize> = (1..=k).filter(|j| *j == k || rng.below(2) == 0).collect();
        let schedule = IndexSchedule::from_levels(levels).unwrap();
        let codes = topk_rows(&p.encode_batch(&x).unwrap(), k).unwrap();
        let fused = loss_fused(&p, &codes, &x, &schedule).unwrap();
        let naive = loss_naive(&p, &codes, &x, &schedule).unwrap();
        worst = worst.max(rel(fused.total, naive.total));
        for ((_, a), (_, b)) in fused.per_level.iter().zip(&naive.per_level) {
            worst = worst.max(rel(*a, *b));
        }
    }
    (
        worst < 1e-5,
        format!("120 instances, worst relative error {worst:.2e} (< 1e-5)"),
    )
}

fn objective(p: &SaeParams<f64>, x: &Matrix<f64>, k: usize, s: &IndexSchedule) -> f64 {
    let codes = topk_rows(&p.encode_batch(x).unwrap(), k).unwrap();
    loss_naive(p, &codes, x, s).unwrap().total
}

fn criterion_2() -> Verdict {
    let (d, h, b, k) = (8, 4, 3, 4);
    let (p, x) = random_instance(2, b, d, h);
    let schedules = [
        IndexSchedule::singleton(k),
        make_schedule(1, k).unwrap(),
        make_schedule(2, k).unwrap(),
    ];
    type Accessor = fn(&mut SaeParams<f64>) -> &mut [f64];
    let accessors: [Accessor; 4] = [
        |p| p.w_enc.as_mut_slice(),
        |p| p.b_enc.as_mut_slice(),
        |p| p.w_dec.as_mut_slice(),
        |p| p.b_dec.as_mut_slice(),
    ];
    let step = 1e-4;
    let mut worst = 0.0f64;
    for s in &schedules {
        let codes = topk_rows(&p.encode_batch(&x).unwrap(), k).unwrap();
        let (_, g) = loss_fused_with_grads(&p, &codes, &x, s).unwrap();
        for (acc, analytic) in accessors.iter().zip(g.tensors()) {
            let mut q = p.clone();
            for (i, &a) in analytic.iter().enumerate() {
                let orig = acc(&mut q)[i];
                acc(&mut q)[i] = orig + step;
                let up = objective(&q, &x, k, s);
                acc(&mut q)[i] = orig - step;
                let down = objective(&q, &x, k, s);
                acc(&mut q)[i] = orig;
                let n = (up - down) / (2.0 * step);
                let m = a.abs().max(n.abs());
                worst = worst.max(if m < 1e-9 {
                    (a - n).abs()
                } else {
                    (a - n).abs() / m
                });
            }
        }
    }
    (
        worst < 1e-3,
        format!("schedules {{K}}, {{1..K}}, J2; worst relative error {worst:.2e} (< 1e-3)"),
    )
}

fn criterion_3() -> Verdict {
    let mut rng = Rng::new(303);
    let mut identical = 0;
    for i in 0..20 {
        let d = 4 + rng.below(29);
        let h = 2 + rng.below(15);
        let b = 1 + rng.below(8);
        let k = 1 + rng.below(8.min(d));
        let (p64, x64) = random_instance(3000 + i, b, d, h);
        let (p, x) = (p64.cast::<f32>(), x64.cast::<f32>());
        let codes = topk_rows(&p.encode_batch(&x).unwrap(), k).unwrap();
        let (hl, hg) = loss_fused_with_grads(&p, &codes, &x, &IndexSchedule::singleton(k)).unwrap();
        let (tl, tg) = loss_topk_with_grads(&p, &codes, &x, k).unwrap();
        let same_grads = hg.tensors().iter().zip(tg.tensors()).all(|(a, b)| {
            a.iter()
                .zip(b.iter())
                .all(|(u, v)| u.to_bits() == v.to_bits())
        });
        if hl.total.to_bits() == tl.total.to_bits() && same_grads {
            identical += 1;
        }
    }
    (
        identical == 20,
        format!("{identical}/20 instances bit-identical in loss and gradients"),
    )
}

struct Scale {
    name: &'static str,
    hidden: usize,
    dict: usize,
    atoms: usize,
    rows: usize,
    steps: u64,
}

fn scale() -> Scale {
    match std::env::var("HIERTOPK_ACCEPTANCE_SCALE").as_deref() {
        Ok("full") => Scale {
            name: "full",
            hidden: 128,
            dict: 2048,
            atoms: 1024,
            rows: 200_000,
            steps: 6000,
        },
        _ => Scale {
            name: "desk",
            hidden: 64,
            dict: 512,
            atoms: 256,
            rows: 100_000,
            steps: 4000,
        },
    }
}

const K: usize = 32;
const HELD_OUT: usize = 10_000;

/// FVU and dead counts of one trained arm on the held-out rows.
struct Arm {
    topk: Vec<SweepEntry>,
    jumprelu_gap: Option<f64>,
}

impl Arm {
    fn fvu(&self, k: usize) -> f64 {
        self.topk.iter().find(|e| e.k == k).unwrap().fvu
    }

    fn dead(&self, k: usize) -> usize {
        self.topk.iter().find(|e| e.k == k).unwrap().almost_dead
    }
}

struct SeedRun {
    topk8: Arm,
    topk16: Arm,
    topk32: Arm,
    hier1: Arm,
    hier8: Arm,
}

fn train_arm(
    data: &Matrix<f32>,
    sc: &Scale,
    kind: ActivationKind,
    k: usize,
    stride: usize,
    seed: u64,
) -> Arm {
    let cfg = TrainConfig {
        activation: kind,
        k,
        stride,
        dict_size: sc.dict,
        lr: 0.004,
        batch_size: 256,
        steps: sc.steps,
        init_seed: seed,
        data_seed: seed,
        holdout_rows: HELD_OUT,
        log_every: 0,
        ..Default::default()
    };
    let out = Trainer::<f32>::new(cfg, data.cols())
        .unwrap()
        .fit(data, |_| Ok(()))
        .unwrap();
    let held = data.slice_rows(0, HELD_OUT);
    let opts = EvalOptions {
        dead_threshold: 1e-4,
        dead_window: 10_000,
        ..Default::default()
    };
    let grid: Vec<usize> = if kind == ActivationKind::Hierarchical || k == K {
        (1..=K).collect()
    } else {
        vec![k]
    };
    let topk = sweep(&out.params, &held, &grid, InferenceMode::TopK, &opts).unwrap();
    let jumprelu_gap = (kind == ActivationKind::Hierarchical && stride == 1).then(|| {
        compare_inference_modes(&out.params, &held, K / 2, &opts)
            .unwrap()
            .fvu_difference
    });
    Arm { topk, jumprelu_gap }
}

fn train_seed(sc: &Scale, seed: u64) -> SeedRun {
    let data: Matrix<f32> = generate_synthetic(
        &SyntheticSpec::new(sc.atoms, sc.hidden, 8, 0.05, seed),
        sc.rows,
    )
    .unwrap();
    let t0 = Instant::now();
    let run = SeedRun {
        topk8: train_arm(&data, sc, ActivationKind::TopK, 8, 1, seed),
        topk16: train_arm(&data, sc, ActivationKind::TopK, 16, 1, seed),
        topk32: train_arm(&data, sc, ActivationKind::TopK, K, 1, seed),
        hier1: train_arm(&data, sc, ActivationKind::Hierarchical, K, 1, seed),
        hier8: train_arm(&data, sc, ActivationKind::Hierarchical, K, 8, seed),
    };
    println!(
        "  seed {seed}: five arms trained in {:.0}s",
        t0.elapsed().as_secs_f64()
    );
    run
}

fn majority(per_seed: &[bool]) -> bool {
    per_seed.iter().filter(|&&b| b).count() >= 2
}

fn criterion_4(runs: &[SeedRun]) -> Verdict {
    let mut per_seed = Vec::new();
    let mut detail = Vec::new();
    for r in runs {
        let wins = [(8, &r.topk8), (16, &r.topk16), (32, &r.topk32)]
            .iter()
            .filter(|(k, t)| r.hier1.fvu(*k) <= 1.10 * t.fvu(*k))
            .count();
        per_seed.push(wins >= 2);
        detail.push(format!(
            "[{:.4}/{:.4} {:.4}/{:.4} {:.4}/{:.4}]",
            r.hier1.fvu(8),
            r.topk8.fvu(8),
            r.hier1.fvu(16),
            r.topk16.fvu(16),
            r.hier1.fvu(32),
            r.topk32.fvu(32)
        ));
    }
    (
        majority(&per_seed),
        format!("hier/topk FVU at k=8,16,32 per seed {}", detail.join(" ")),
    )
}

fn criterion_5(runs: &[SeedRun]) -> Verdict {
    let mut per_seed = Vec::new();
    let mut detail = Vec::new();
    for r in runs {
        let mut best = f64::INFINITY;
        let mut worst_rise = f64::NEG_INFINITY;
        for e in &r.hier1.topk {
            worst_rise = worst_rise.max(e.fvu - best);
            best = best.min(e.fvu);
        }
        let monotone = worst_rise <= 1e-3;
        let beats = r.hier1.fvu(8) <= 0.90 * r.topk32.fvu(8);
        per_seed.push(monotone && beats);
        detail.push(format!(
            "[rise {:.1e}, k=8 {:.4} vs {:.4}]",
            worst_rise.max(0.0),
            r.hier1.fvu(8),
            r.topk32.fvu(8)
        ));
    }
    (
        majority(&per_seed),
        format!(
            "monotone within 1e-3 and >=10% better than truncated TopK32 {}",
            detail.join(" ")
        ),
    )
}

fn criterion_6(runs: &[SeedRun]) -> Verdict {
    let mut per_seed = Vec::new();
    let mut detail = Vec::new();
    for r in runs {
        let max_rel = (8..=K)
            .map(|k| (r.hier8.fvu(k) - r.hier1.fvu(k)).abs() / r.hier1.fvu(k))
            .fold(0.0, f64::max);
        let singleton_worse = r.topk32.fvu(8) > 1.10 * r.hier1.fvu(8);
        per_seed.push(max_rel < 0.05 && singleton_worse);
        detail.push(format!(
            "[J8 vs J1 max {:.2}%, {{K}} at k=8 {:.4} vs {:.4}]",
            100.0 * max_rel,
            r.topk32.fvu(8),
            r.hier1.fvu(8)
        ));
    }
    (majority(&per_seed), detail.join(" "))
}

fn criterion_7(runs: &[SeedRun]) -> Verdict {
    let per_seed: Vec<bool> = runs
        .iter()
        .map(|r| r.topk32.dead(K / 4) > r.hier1.dead(K / 4))
        .collect();
    let detail: Vec<String> = runs
        .iter()
        .map(|r| format!("{} vs {}", r.topk32.dead(K / 4), r.hier1.dead(K / 4)))
        .collect();
    (
        majority(&per_seed),
        format!(
            "almost-dead at k=8, TopK32 vs hierarchical: {}",
            detail.join(", ")
        ),
    )
}

fn criterion_8(runs: &[SeedRun]) -> Verdict {
    let gaps: Vec<f64> = runs.iter().map(|r| r.hier1.jumprelu_gap.unwrap()).collect();
    let per_seed: Vec<bool> = gaps.iter().map(|g| g.abs() < 0.01).collect();
    let shown: Vec<String> = gaps.iter().map(|g| format!("{g:+.4}")).collect();
    (
        majority(&per_seed),
        format!(
            "FVU(jumprelu) - FVU(topk) at k={} per seed: {} (|.| < 0.01)",
            K / 2,
            shown.join(", ")
        ),
    )
}

fn criterion_9() -> Verdict {
    let (b, h, d, k) = (64, 512, 16_384, 128);
    let mut rng = Rng::new(9);
    let params = SaeParams::<f32>::init(d, h, &mut rng);
    let x: Matrix<f32> = rng.normal_matrix(b, h);
    let codes = topk_rows(&params.encode_batch(&x).unwrap(), k).unwrap();
    let schedule = make_schedule(1, k).unwrap();

    let mut grads = Grads::for_params(&params);
    let (_, fused_peak) =
        peak_during(|| loss_fused_into(&params, &codes, &x, &schedule, Some(&mut grads)).unwrap());
    let (_, naive_peak) = peak_during(|| loss_naive(&params, &codes, &x, &schedule).unwrap());
    let materialized = b * k * h * std::mem::size_of::<f32>();
    let memory_ok = fused_peak * 50 < materialized && naive_peak >= materialized;

    let cfg = |kind| TrainConfig {
        activation: kind,
        k,
        stride: 1,
        dict_size: d,
        batch_size: b,
        ..Default::default()
    };
    // alternate the two arms so load drift hits both equally
    let mut hier_t = Trainer::<f32>::new(cfg(ActivationKind::Hierarchical), h).unwrap();
    let mut topk_t = Trainer::<f32>::new(cfg(ActivationKind::TopK), h).unwrap();
    hier_t.step(&x).unwrap();
    topk_t.step(&x).unwrap();
    let mut timed = |t: &mut Trainer<f32>| {
        let t0 = Instant::now();
        t.step(&x).unwrap();
        t0.elapsed().as_secs_f64()
    };
    let (mut hs, mut ts) = (Vec::new(), Vec::new());
    for _ in 0..11 {
        hs.push(timed(&mut hier_t));
        ts.push(timed(&mut topk_t));
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let hier = median(hs);
    let topk = median(ts);
    let time_ok = hier <= 1.25 * topk;
    (
        memory_ok && time_ok,
        format!(
            "fused aux peak {fused_peak} B vs B*K*h {materialized} B (naive peak {naive_peak} B); step time {:.1} ms vs TopK {:.1} ms (ratio {:.2} <= 1.25)",
            hier * 1e3,
            topk * 1e3,
            hier / topk
        ),
    )
}

fn cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_hiertopk"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    cli(&[
        "gen-data",
        "--out",
        &p("d.bin"),
        "--rows",
        "4000",
        "--dim",
        "32",
        "--atoms",
        "96",
        "--active",
        "4",
        "--seed",
        "10",
    ]);
    let mut same = Vec::new();
    let files = |tag: &str| {
        cli(&[
            "--threads",
            "1",
            "train",
            "--data",
            &p("d.bin"),
            "--dict-size",
            "128",
            "--k",
            "16",
            "--batch",
            "64",
            "--steps",
            "60",
            "--lr",
            "0.004",
            "--holdout",
            "512",
            "--log-every",
            "20",
            "--out",
            &p(&format!("m{tag}.ckpt")),
            "--log",
            &p(&format!("m{tag}.log")),
        ]);
        cli(&[
            "--threads",
            "1",
            "sweep",
            "--model",
            &p("ma.ckpt"),
            "--data",
            &p("d.bin"),
            "--rows",
            "512",
            "--k-grid",
            "1:16:1",
            "--mode",
            "jumprelu",
            "--out",
            &p(&format!("s{tag}.json")),
        ]);
        cli(&[
            "--threads",
            "1",
            "diagnose",
            "--model",
            &p("ma.ckpt"),
            "--data",
            &p("d.bin"),
            "--rows",
            "512",
            "--out",
            &p(&format!("g{tag}.json")),
        ]);
    };
    files("a");
    files("b");
    for (a, b) in [
        ("ma.ckpt", "mb.ckpt"),
        ("ma.log", "mb.log"),
        ("sa.json", "sb.json"),
        ("sa.csv", "sb.csv"),
        ("ga.json", "gb.json"),
    ] {
        same.push(std::fs::read(p(a)).unwrap() == std::fs::read(p(b)).unwrap());
    }
    let n = same.iter().filter(|&&s| s).count();
    (n == same.len(), format!("{n}/{} artifacts bit-identical across reruns (checkpoint, log, sweep json/csv, diagnose)", same.len()))
}

fn is_format(r: Result<impl Sized, Error>, want: fn(&FormatError) -> bool) -> bool {
    matches!(r, Err(Error::Format(ref f)) if want(f))
}

fn criterion_11() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut checks: Vec<(&str, bool)> = Vec::new();

    let mut rng = Rng::new(11);
    let mut m: Matrix<f32> = rng.normal_matrix(37, 13);
    for (i, v) in [-0.0f32, f32::MIN_POSITIVE / 4.0, f32::MAX, f32::MIN, 1e-38]
        .into_iter()
        .enumerate()
    {
        m.as_mut_slice()[i * 7] = v;
    }
    let act = dir.path().join("a.bin");
    write_activations(&m, &act).unwrap();
    let back: Matrix<f32> = read_activations(&act).unwrap();
    let bits = |s: &[f32]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    checks.push((
        "activation round trip",
        bits(back.as_slice()) == bits(m.as_slice()) && back.rows() == 37,
    ));

    let good = std::fs::read(&act).unwrap();
    let corrupt = |name: &str, bytes: &[u8]| {
        let path = dir.path().join(name);
        std::fs::write(&path, bytes).unwrap();
        path
    };
    let mut bad = good.clone();
    bad[0] = b'X';
    checks.push((
        "activation bad magic",
        is_format(ActivationReader::open(&corrupt("m.bin", &bad)), |f| {
            matches!(f, FormatError::BadMagic { .. })
        }),
    ));
    checks.push((
        "activation truncation",
        is_format(
            ActivationReader::open(&corrupt("t.bin", &good[..good.len() - 3])),
            |f| matches!(f, FormatError::Truncated { .. }),
        ),
    ));
    let mut bad = good.clone();
    bad[12..20].copy_from_slice(&36u64.to_le_bytes());
    checks.push((
        "activation shape mismatch",
        is_format(ActivationReader::open(&corrupt("s.bin", &bad)), |f| {
            matches!(f, FormatError::ShapeMismatch(_))
        }),
    ));

    let mut params = SaeParams::<f32>::init(24, 13, &mut rng);
    params.b_enc = (0..24).map(|_| rng.normal() as f32).collect();
    params.b_dec = (0..13).map(|_| rng.normal() as f32).collect();
    params.w_enc.as_mut_slice()[0] = -0.0;
    let meta = CheckpointMeta {
        dict_size: 24,
        hidden: 13,
        k: 4,
        activation: "hierarchical".into(),
        schedule: "{1,2,3,4}".into(),
        config_digest: "0123abcd".into(),
        step: 17,
        seed: 5,
    };
    let ck = dir.path().join("c.ckpt");
    save(&params, &meta, &ck).unwrap();
    let loaded = load::<f32>(&ck).unwrap();
    let same = params
        .tensors()
        .iter()
        .zip(loaded.params.tensors())
        .all(|(a, b)| bits(a) == bits(b));
    checks.push(("checkpoint round trip", same && loaded.meta == meta));

    let good = std::fs::read(&ck).unwrap();
    let mut bad = good.clone();
    bad[7] = b'0';
    checks.push((
        "checkpoint bad magic",
        is_format(load::<f32>(&corrupt("m.ckpt", &bad)), |f| {
            matches!(f, FormatError::BadMagic { .. })
        }),
    ));
    checks.push((
        "checkpoint truncation",
        is_format(
            load::<f32>(&corrupt("t.ckpt", &good[..good.len() - 5])),
            |f| matches!(f, FormatError::Truncated { .. }),
        ),
    ));
    let text = String::from_utf8_lossy(&good).replacen("dict_size=24", "dict_size=25", 1);
    let mut bad = good.clone();
    let at = text.find("dict_size=25").unwrap();
    bad[at..at + 12].copy_from_slice(b"dict_size=25");
    checks.push((
        "checkpoint shape mismatch",
        is_format(load::<f32>(&corrupt("s.ckpt", &bad)), |f| {
            matches!(f, FormatError::ShapeMismatch(_))
        }),
    ));

    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| *n)
        .collect();
    if failed.is_empty() {
        (
            true,
            format!("{} round-trip and corruption checks", checks.len()),
        )
    } else {
        (false, format!("failed: {}", failed.join(", ")))
    }
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    // `cargo test -- --list` and filters pass flags; this suite has one entry
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results = Vec::new();
    let mut record = |id: u8, name: &str, v: Verdict| {
        println!(
            "criterion {id:>2} {} {name}: {}",
            if v.0 { "PASS" } else { "FAIL" },
            v.1
        );
        results.push(v.0);
    };
    record(1, "oracle equivalence", guarded(criterion_1));
    record(2, "gradient correctness", guarded(criterion_2));
    record(3, "schedule collapse", guarded(criterion_3));

    let sc = scale();
    println!(
        "  training desk arms at {} scale (h={}, D={}, {} atoms)",
        sc.name, sc.hidden, sc.dict, sc.atoms
    );
    let runs = catch_unwind(AssertUnwindSafe(|| {
        (0..3).map(|s| train_seed(&sc, s)).collect::<Vec<_>>()
    }));
    match &runs {
        Ok(runs) => {
            record(4, "pareto replication", guarded(|| criterion_4(runs)));
            record(
                5,
                "inference-time l0 interpolation",
                guarded(|| criterion_5(runs)),
            );
            record(6, "pointwise subsampling", guarded(|| criterion_6(runs)));
            record(7, "almost-dead features", guarded(|| criterion_7(runs)));
            record(
                8,
                "jumprelu vs topk inference",
                guarded(|| criterion_8(runs)),
            );
        }
        Err(_) => {
            for (id, name) in [
                (4, "pareto replication"),
                (5, "inference-time l0 interpolation"),
                (6, "pointwise subsampling"),
                (7, "almost-dead features"),
                (8, "jumprelu vs topk inference"),
            ] {
                record(id, name, (false, "training failed".into()));
            }
        }
    }
    record(9, "memory contract", guarded(criterion_9));
    record(10, "determinism", guarded(criterion_10));
    record(11, "format round-trips", guarded(criterion_11));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
