//! Acceptance suite: one check per criterion, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the lines are always printed. Pass
//! criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p warpsynth-cli --test acceptance -- 8 10`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use warpsynth::grid::{smooth_volume, LabelMap, VectorField, Volume};
use warpsynth::metrics::{hard_dice, psnr, ssim, SsimOptions};
use warpsynth::objective::{
    evaluate, mse, Channel, LabelChannel, LossConfig, LossKind, LossState, LossTarget, LossTerm,
};
use warpsynth::phantom::{self, DeformationSpec, PhantomSpec, PhantomSubject};
use warpsynth::registration::Supervision;
use warpsynth::sampler::{warp, warp_labels, warp_one_hot, warp_with_gradient};
use warpsynth::synthesis::{estimate_ir_params, ir_signal, IrSignalParams};
use warpsynth::transform::{
    compose, exponentiate, jacobian_determinant, min_interior, DEFAULT_EXP_STEPS,
};
use warpsynth::{
    io, register, DisplacementField, Error, Geometry, RegistrationConfig, RegistrationResult, Scan,
    VelocityField,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// shared phantom registrations for criteria 1 to 4

const PAIR_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn pair_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        seed,
        partial_volume: 4,
        // at 0.02 two independent noise draws already cap masked SSIM near 0.96
        noise_sigma: 0.01,
        deformation: DeformationSpec {
            smoothness: 8.0,
            magnitude: 5.0,
        },
        ..PhantomSpec::default()
    }
}

struct PairRun {
    seed: u64,
    fixed: PhantomSubject,
    moving: PhantomSubject,
    truth: DisplacementField,
    result: RegistrationResult,
    seconds: f64,
}

/// Fixed: the undeformed anatomy. Moving: a deformed copy with independent
/// noise. Truth: the displacement mapping moving onto fixed.
fn run_pair(seed: u64) -> PairRun {
    let spec = pair_spec(seed);
    let fixed = phantom::generate(&spec).unwrap();
    let moving = phantom::generate_cohort(&spec, 1).unwrap().remove(0);
    let truth = moving.inverse_truth().unwrap().unwrap();
    let primary = phantom::primary_contrast();
    let config = RegistrationConfig::default();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let start = Instant::now();
    let result = pool
        .install(|| {
            register(
                &Scan::new(fixed.contrast(&primary).unwrap(), Some(&fixed.tissue_map)),
                &Scan::new(moving.contrast(&primary).unwrap(), Some(&moving.tissue_map)),
                None,
                &config,
            )
        })
        .unwrap();
    let seconds = start.elapsed().as_secs_f64();
    PairRun {
        seed,
        fixed,
        moving,
        truth,
        result,
        seconds,
    }
}

fn endpoint_error(run: &PairRun) -> f64 {
    warpsynth::metrics::endpoint_error(&run.result.displacement, &run.truth, &run.fixed.mask)
        .unwrap()
}

fn criterion_1(runs: &[PairRun]) -> Outcome {
    let r = &runs[0];
    let epe = endpoint_error(r);
    let max_truth = r.truth.max_norm();
    let pass = epe < 0.5 && r.seconds < 120.0 && max_truth <= 5.0 + 1e-9;
    outcome(
        pass,
        format!(
            "64^3 seed {}: mean foreground endpoint error {epe:.3} voxel (< 0.5), {:.1} s on one core (< 120), true max displacement {max_truth:.2}",
            r.seed, r.seconds
        ),
    )
}

fn criterion_2(runs: &[PairRun]) -> Outcome {
    let primary = phantom::primary_contrast();
    let options = SsimOptions::default();
    let mut pre = Vec::new();
    let mut post = Vec::new();
    for r in runs {
        let f = r.fixed.contrast(&primary).unwrap();
        let m = r.moving.contrast(&primary).unwrap().clone().without_mask();
        let w = warp(&m, &r.result.displacement).unwrap();
        pre.push(ssim(f, &m, &r.fixed.mask, &options).unwrap());
        post.push(ssim(f, &w, &r.fixed.mask, &options).unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&pre), mean(&post));
    outcome(
        b >= 0.95 && b >= a + 0.05,
        format!(
            "mean masked SSIM over {} pairs {b:.4} (>= 0.95), before registration {a:.4} (gain {:.4} >= 0.05); per pair {:?}",
            runs.len(),
            b - a,
            post.iter().map(|s| format!("{s:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn criterion_3(runs: &[PairRun]) -> Outcome {
    let mins: Vec<f64> = runs
        .iter()
        .map(|r| min_interior(&jacobian_determinant(&r.result.displacement).unwrap()))
        .collect();
    outcome(
        mins.iter().all(|&m| m > 0.0),
        format!(
            "min interior Jacobian determinant per pair {:?} (all > 0)",
            fmt3(&mins)
        ),
    )
}

fn criterion_4(runs: &[PairRun]) -> Outcome {
    let secondary = phantom::secondary_contrast();
    let mut worst = f64::INFINITY;
    let mut lines = Vec::new();
    for r in runs {
        // the transferred contrast and labels share the one estimated warp
        let moved = r
            .moving
            .contrast(&secondary)
            .unwrap()
            .clone()
            .without_mask();
        let transferred = warp(&moved, &r.result.displacement).unwrap();
        assert_eq!(transferred.dims(), r.fixed.tissue_map.dims());
        let labels = warp_labels(&r.moving.tissue_map, &r.result.displacement).unwrap();
        let dice = hard_dice(&labels, &r.fixed.tissue_map).unwrap();
        let fg: Vec<f64> = dice
            .iter()
            .filter(|(&l, _)| l != 0)
            .map(|(_, &d)| d)
            .collect();
        let min = fg.iter().copied().fold(f64::INFINITY, f64::min);
        worst = worst.min(min);
        lines.push(format!("seed {}: {}", r.seed, fmt3(&fg).join("/")));
    }
    outcome(
        worst >= 0.85,
        format!(
            "hard Dice per label (CSF/gray/white/thalamus) >= 0.85, worst {worst:.3}; {}",
            lines.join("; ")
        ),
    )
}

fn fmt3(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.3}")).collect()
}

// ---------------------------------------------------------------------------
// CLI helpers

fn warpsynth(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_warpsynth"))
        .args(args)
        .env_remove("WARPSYNTH_WORKERS")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "warpsynth {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap()
}

/// Settings for the fusion sweep: 32^3 phantoms keep 5 seeds of 9
/// registrations within a few minutes on one core.
const SWEEP_SETTINGS: &[&str] = &[
    "--set",
    "phantom.dims=[32, 32, 32]",
    "--set",
    "phantom.partial_volume=4",
    "--set",
    "phantom.deformation.smoothness=5.0",
    "--set",
    "phantom.deformation.magnitude=2.5",
    "--set",
    "registration.gradient_sigma=4.0",
    "--set",
    "sweep.max_atlases=9",
    "--set",
    "sweep.seeds=[0, 1, 2, 3, 4]",
];

fn run_sweep(dir: &Path) -> Value {
    let out = dir.join("sweep");
    let mut args = vec!["sweep", "--out", p(&out)];
    args.extend_from_slice(SWEEP_SETTINGS);
    warpsynth(&args);
    read_json(out.join("summary.json"))
}

fn trend(summary: &Value, method: &str) -> Value {
    summary["trends"]
        .as_array()
        .unwrap()
        .iter()
        .find(|t| t["method"] == method)
        .cloned()
        .unwrap()
}

fn criterion_5(summary: &Value) -> Outcome {
    let t = trend(summary, "mean");
    let f = |k: &str| t[k].as_f64().unwrap_or(f64::NAN);
    let rho = t["spearman_psnr"].as_f64().unwrap_or(f64::NAN);
    let pass = f("psnr_last") > f("psnr_first") && f("ssim_last") > f("ssim_first") && rho > 0.0;
    outcome(
        pass,
        format!(
            "mean fusion over 5 seeds: PSNR k=1 {:.2} -> k=9 {:.2} dB, SSIM {:.4} -> {:.4}, Spearman(PSNR, k) {rho:.3}",
            f("psnr_first"),
            f("psnr_last"),
            f("ssim_first"),
            f("ssim_last")
        ),
    )
}

fn criterion_6(summary: &Value) -> Outcome {
    let m = &summary["mean_vs_median"];
    let wins = m["mean_at_least_median"].as_u64().unwrap();
    let per: Vec<String> = m["per_seed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| {
            format!(
                "seed {} mean {:.2} / median {:.2}",
                s["seed"],
                s["mean_psnr"].as_f64().unwrap(),
                s["median_psnr"].as_f64().unwrap()
            )
        })
        .collect();
    outcome(
        wins >= 4,
        format!(
            "k=9 mean-fusion PSNR >= median in {wins} of 5 seeds (need 4); {}",
            per.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let spec = PhantomSpec {
        dims: [32; 3],
        partial_volume: 4,
        deformation: DeformationSpec {
            smoothness: 5.0,
            magnitude: 2.5,
        },
        ..PhantomSpec::default()
    };
    let fixed = phantom::generate(&spec).unwrap();
    let moving = phantom::generate_cohort(&spec, 1).unwrap().remove(0);
    let (pn, sn) = (phantom::primary_contrast(), phantom::secondary_contrast());
    let fs = Scan::new(fixed.contrast(&pn).unwrap(), Some(&fixed.tissue_map));
    let ms = Scan::new(moving.contrast(&pn).unwrap(), Some(&moving.tissue_map));
    let sup = Supervision {
        fixed: fixed.contrast(&sn).unwrap(),
        moving: moving.contrast(&sn).unwrap(),
    };
    let with_sigma = |c: RegistrationConfig| RegistrationConfig {
        gradient_sigma: 4.0,
        ..c
    };

    let unsup_cfg = with_sigma(RegistrationConfig::default());
    let unsup = register(&fs, &ms, None, &unsup_cfg).unwrap();
    let zero = register(
        &fs,
        &ms,
        Some(&sup),
        &with_sigma(RegistrationConfig::supervised(0.0)),
    )
    .unwrap();
    let identical = zero.same_solution(&unsup);

    let sup_cfg = with_sigma(RegistrationConfig::supervised(1.0));
    let positive = register(&fs, &ms, Some(&sup), &sup_cfg).unwrap();
    // the secondary MSE term as the optimizer sees it at the finest level
    let term = |u: &DisplacementField| {
        let f = smooth_volume(sup.fixed, sup_cfg.image_sigma);
        let m = smooth_volume(sup.moving, sup_cfg.image_sigma);
        mse(&warp(&m, u).unwrap(), &f, None).unwrap()
    };
    let under_sup = term(&positive.displacement);
    let under_unsup = term(&unsup.displacement);
    let reported = positive
        .final_report
        .iter()
        .find(|t| t.kind == LossKind::Mse && t.target == LossTarget::SecondaryContrast)
        .map(|t| t.value)
        .unwrap();
    let consistent = (reported - under_sup).abs() <= 1e-12 * under_sup.max(1e-300);
    outcome(
        identical && under_sup <= under_unsup && consistent,
        format!(
            "weight 0 reproduces unsupervised bit-for-bit: {identical}; weight 1 secondary MSE {under_sup:.4e} <= {under_unsup:.4e} under the unsupervised transform (reported term {reported:.4e})"
        ),
    )
}

// ---------------------------------------------------------------------------

fn random_volume(rng: &mut ChaCha8Rng, g: Geometry) -> Volume {
    Volume::new(
        g,
        (0..g.len()).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, g: Geometry) -> LabelMap {
    LabelMap::new(g, (0..g.len()).map(|_| rng.random_range(0..3)).collect()).unwrap()
}

/// Largest relative error between the analytic gradient and central
/// differences of one term, over up to `per_trial` voxels away from the
/// trilinear knots.
fn gradient_error(term: LossTerm, seed: u64, per_trial: usize) -> f64 {
    // a loss needs a dissimilarity term, so Dice and the regularizer are
    // measured as the difference against an MSE-only loss
    let anchor = LossTerm::new(LossKind::Mse, 1.0, LossTarget::PrimaryContrast);
    let alone = matches!(term.kind, LossKind::Mse | LossKind::Ncc);
    let config = LossConfig {
        terms: if alone {
            vec![term]
        } else {
            vec![anchor, term]
        },
        dice_smooth: 1e-5,
    };
    let baseline = (!alone).then(|| LossConfig {
        terms: vec![anchor],
        dice_smooth: 1e-5,
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Geometry::unit([8, 8, 8]);
    let (fixed, moving) = (random_volume(&mut rng, g), random_volume(&mut rng, g));
    let (fixed2, moving2) = (random_volume(&mut rng, g), random_volume(&mut rng, g));
    let (fl, ml) = (random_labels(&mut rng, g), random_labels(&mut rng, g));
    let u0: Vec<[f64; 3]> = (0..g.len())
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.5..1.5)))
        .collect();
    let total = |u: &[[f64; 3]]| {
        let field = VectorField::new(g, u.to_vec()).unwrap();
        let disp = DisplacementField::direct(field.clone());
        let vel = VelocityField::new(field);
        let (wp, gp) = warp_with_gradient(&moving, &disp).unwrap();
        let (ws, gs) = warp_with_gradient(&moving2, &disp).unwrap();
        let soft = warp_one_hot(&ml, &[1, 2], &disp).unwrap();
        let state = LossState {
            velocity: Some(&vel),
            primary: Some(Channel {
                warped: &wp,
                gradient: &gp,
                fixed: &fixed,
            }),
            secondary: Some(Channel {
                warped: &ws,
                gradient: &gs,
                fixed: &fixed2,
            }),
            labels: Some(LabelChannel {
                warped: &soft,
                fixed: &fl,
            }),
        };
        let full = evaluate(&config, &state).unwrap();
        match &baseline {
            None => (full.total, full.gradient),
            Some(b) => {
                let base = evaluate(b, &state).unwrap();
                let grad = full
                    .gradient
                    .iter()
                    .zip(&base.gradient)
                    .map(|(f, g)| std::array::from_fn(|a| f[a] - g[a]))
                    .collect();
                (full.total - base.total, grad)
            }
        }
    };
    let analytic: Vec<[f64; 3]> = total(&u0).1;
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let order: Vec<usize> = {
        let mut o: Vec<usize> = (0..g.len()).collect();
        for i in (1..o.len()).rev() {
            o.swap(i, rng.random_range(0..=i));
        }
        o
    };
    for i in order {
        if checked == per_trial {
            break;
        }
        let c = g.coords(i);
        let safe = (0..3).all(|a| {
            let q = c[a] as f64 + u0[i][a];
            let frac = q - q.floor();
            q > 0.0 && q < 7.0 && frac > 1e-2 && frac < 1.0 - 1e-2
        });
        if !safe {
            continue;
        }
        for a in 0..3 {
            let mut up = u0.clone();
            let mut dn = u0.clone();
            up[i][a] += h;
            dn[i][a] -= h;
            let fd = (total(&up).0 - total(&dn).0) / (2.0 * h);
            let an = analytic[i][a];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-7);
            worst = worst.max(rel);
        }
        checked += 1;
    }
    assert!(checked >= 10, "too few smooth voxels in trial {seed}");
    worst
}

fn criterion_8() -> Outcome {
    let terms = [
        (
            "mse",
            LossTerm::new(LossKind::Mse, 1.0, LossTarget::PrimaryContrast),
        ),
        (
            "ncc",
            LossTerm::new(LossKind::Ncc, 1.0, LossTarget::PrimaryContrast),
        ),
        (
            "dice",
            LossTerm::new(LossKind::Dice, 1.0, LossTarget::Labels),
        ),
        (
            "regularizer",
            LossTerm::new(LossKind::Regularizer, 1.0, LossTarget::Velocity),
        ),
        (
            "secondary mse",
            LossTerm::new(LossKind::Mse, 1.0, LossTarget::SecondaryContrast),
        ),
        (
            "secondary ncc",
            LossTerm::new(LossKind::Ncc, 1.0, LossTarget::SecondaryContrast),
        ),
    ];
    let mut worst_all: f64 = 0.0;
    let mut parts = Vec::new();
    for (k, (name, term)) in terms.iter().enumerate() {
        let worst = (0..20)
            .map(|trial| gradient_error(*term, 1000 * k as u64 + trial, 12))
            .fold(0.0, f64::max);
        worst_all = worst_all.max(worst);
        parts.push(format!("{name} {worst:.1e}"));
    }
    outcome(
        worst_all < 1e-3,
        format!("max relative error vs central differences (h=1e-4), 20 trials x 12 voxels x 3 axes: {}", parts.join(", ")),
    )
}

// ---------------------------------------------------------------------------

/// Trilinear sample of a vector field with edge clamping.
fn sample(v: &VectorField, p: [f64; 3]) -> [f64; 3] {
    let d = v.geometry().dims;
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        let q = p[a].clamp(0.0, (d[a] - 1) as f64);
        let f = q.floor().min((d[a].max(2) - 2) as f64);
        base[a] = f as usize;
        frac[a] = q - f;
    }
    let mut out = [0.0; 3];
    for corner in 0..8 {
        let mut w = 1.0;
        let mut c = [0usize; 3];
        for a in 0..3 {
            let hi = corner >> a & 1 == 1;
            c[a] = (base[a] + hi as usize).min(d[a] - 1);
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
        }
        let x = v.vectors()[v.geometry().index(c[0], c[1], c[2])];
        for a in 0..3 {
            out[a] += w * x[a];
        }
    }
    out
}

/// Forward Euler integration of dx/dt = v(x) over unit time.
fn euler(v: &VectorField, start: [f64; 3], steps: usize) -> [f64; 3] {
    let dt = 1.0 / steps as f64;
    let mut x = start;
    for _ in 0..steps {
        let s = sample(v, x);
        for a in 0..3 {
            x[a] += dt * s[a];
        }
    }
    x
}

/// Seeded sum of low-frequency modes under a Gaussian envelope, scaled to
/// `max_norm` voxels.
fn smooth_velocity(g: Geometry, max_norm: f64, seed: u64) -> VelocityField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = g.dims[0] as f64;
    let modes: Vec<([f64; 3], [f64; 3], f64)> = (0..6)
        .map(|_| {
            let k =
                std::array::from_fn(|_| rng.random_range(-1.0..1.0) * std::f64::consts::TAU / n);
            let amp = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            (k, amp, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let field = VectorField::from_fn(g, |c| {
        let x = c.map(|k| k as f64 - (n - 1.0) / 2.0);
        let r2 = x.iter().map(|a| a * a).sum::<f64>();
        let env = (-r2 / (2.0 * (n / 5.0).powi(2))).exp();
        let mut v = [0.0; 3];
        for (k, amp, phase) in &modes {
            let s = (k[0] * x[0] + k[1] * x[1] + k[2] * x[2] + phase).cos();
            for a in 0..3 {
                v[a] += env * amp[a] * s;
            }
        }
        v
    })
    .unwrap();
    let peak = field.max_norm();
    VelocityField::new(field.scaled(max_norm / peak))
}

fn criterion_9() -> Outcome {
    // constant field
    let g = Geometry::unit([8, 8, 8]);
    let c = [0.7, -0.4, 0.25];
    let v = VectorField::new(g, vec![c; g.len()]).unwrap();
    let u = exponentiate(&VelocityField::new(v.clone()), DEFAULT_EXP_STEPS).unwrap();
    let mut const_err: f64 = 0.0;
    for i in 0..g.len() {
        let k = g.coords(i);
        let start = [k[0] as f64, k[1] as f64, k[2] as f64];
        // stay clear of the clamped border so the flow is a pure translation
        if (0..3).any(|a| start[a] + c[a] < 0.0 || start[a] + c[a] > 7.0) {
            continue;
        }
        let end = euler(&v, start, 1000);
        for a in 0..3 {
            const_err = const_err.max((u.vectors()[i][a] - (end[a] - start[a])).abs());
        }
    }

    // linear field v = a x along one axis: exp gives x (e^a - 1)
    let a = 0.1;
    let g = Geometry::unit([32, 4, 4]);
    let v = VectorField::from_fn(g, |[x, _, _]| [a * x as f64, 0.0, 0.0]).unwrap();
    let u = exponentiate(&VelocityField::new(v), 12).unwrap();
    let mut lin_err: f64 = 0.0;
    for i in 0..g.len() {
        let x = g.coords(i)[0] as f64;
        if x * a.exp() > 30.0 {
            continue;
        }
        lin_err = lin_err.max((u.vectors()[i][0] - x * (a.exp() - 1.0)).abs());
    }

    // inverse composition on a smooth 5-voxel field
    let g = Geometry::unit([64, 64, 64]);
    let vel = smooth_velocity(g, 5.0, 9);
    let fwd = exponentiate(&vel, DEFAULT_EXP_STEPS).unwrap();
    let bwd = exponentiate(&vel.negated(), DEFAULT_EXP_STEPS).unwrap();
    let residual = compose(&fwd, &bwd).unwrap().max_norm();

    outcome(
        const_err < 1e-6 && lin_err < 1e-3 && residual < 0.1,
        format!(
            "constant field vs 1000-step Euler {const_err:.1e} (< 1e-6); linear field vs analytic {lin_err:.1e} (< 1e-3); inverse composition residual {residual:.3} voxel (< 0.1, max |v| {:.2}, max |u| {:.2})",
            vel.field().max_norm(),
            fwd.max_norm()
        ),
    )
}

// ---------------------------------------------------------------------------

fn gauss_weights() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, x) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *x = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

/// Direct evaluation: mean over masked centres whose 11^3 window fits of the
/// Gaussian-windowed SSIM, stabilizers from the masked reference range.
fn brute_ssim(x: &Volume, y: &Volume, mask: &[bool]) -> f64 {
    let g = x.geometry();
    let d = g.dims;
    let w1 = gauss_weights();
    let (lo, hi) = x
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), (&v, _)| {
            (l.min(v), h.max(v))
        });
    let l = hi - lo;
    let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
    let (mut sum, mut n) = (0.0, 0);
    for cz in 5..d[2] - 5 {
        for cy in 5..d[1] - 5 {
            for cx in 5..d[0] - 5 {
                if !mask[g.index(cx, cy, cz)] {
                    continue;
                }
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for k in 0..11 {
                    for j in 0..11 {
                        for i in 0..11 {
                            let w = w1[i] * w1[j] * w1[k];
                            let idx = g.index(cx + i - 5, cy + j - 5, cz + k - 5);
                            mx += w * x.data()[idx];
                            my += w * y.data()[idx];
                        }
                    }
                }
                for k in 0..11 {
                    for j in 0..11 {
                        for i in 0..11 {
                            let w = w1[i] * w1[j] * w1[k];
                            let idx = g.index(cx + i - 5, cy + j - 5, cz + k - 5);
                            let (a, b) = (x.data()[idx] - mx, y.data()[idx] - my);
                            sxx += w * a * a;
                            syy += w * b * b;
                            sxy += w * a * b;
                        }
                    }
                }
                sum += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                    / ((mx * mx + my * my + c1) * (sxx + syy + c2));
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn brute_psnr(x: &Volume, y: &Volume, mask: &[bool]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let (mut se, mut n) = (0.0, 0.0);
    for i in 0..mask.len() {
        if mask[i] {
            peak = peak.max(x.data()[i]);
            se += (x.data()[i] - y.data()[i]).powi(2);
            n += 1.0;
        }
    }
    20.0 * peak.log10() - 10.0 * (se / n).log10()
}

fn criterion_10() -> Outcome {
    let g = Geometry::unit([16, 16, 16]);
    let options = SsimOptions::default();
    let (mut worst_ssim, mut worst_psnr): (f64, f64) = (0.0, 0.0);
    let mut identities = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_volume(&mut rng, g);
        let noise = random_volume(&mut rng, g);
        let b = Volume::new(
            g,
            a.data()
                .iter()
                .zip(noise.data())
                .map(|(x, e)| x + 0.3 * e - 0.15)
                .collect(),
        )
        .unwrap();
        // a ball-shaped mask, off-centre so some centres are excluded
        let r = rng.random_range(4.0..7.0);
        let mask: Vec<bool> = (0..g.len())
            .map(|i| {
                let c = g.coords(i);
                let d2 = (c[0] as f64 - 8.5).powi(2)
                    + (c[1] as f64 - 7.0).powi(2)
                    + (c[2] as f64 - 7.5).powi(2);
                d2 <= r * r
            })
            .collect();
        worst_ssim = worst_ssim
            .max((ssim(&a, &b, &mask, &options).unwrap() - brute_ssim(&a, &b, &mask)).abs());
        worst_psnr =
            worst_psnr.max((psnr(&a, &b, &mask).unwrap() - brute_psnr(&a, &b, &mask)).abs());
        identities &= ssim(&a, &a, &mask, &options).unwrap() == 1.0;
        identities &= psnr(&a, &a, &mask).unwrap() == f64::INFINITY;
    }
    outcome(
        worst_ssim < 1e-9 && worst_psnr < 1e-9 && identities,
        format!(
            "20 seeded 16^3 pairs: max |SSIM - brute force| {worst_ssim:.1e}, max |PSNR - brute force| {worst_psnr:.1e} (< 1e-9); ssim(a,a)=1 and psnr(a,a)=inf: {identities}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut null_err: f64 = 0.0;
    let mut fit_err: f64 = 0.0;
    for _ in 0..100 {
        let m0 = rng.random_range(0.1..3.0);
        // magnitudes at 400/1400 ms only identify T1 when the samples
        // straddle the null, i.e. 400/ln2 < t1 < 1400/ln2
        let t1 = rng.random_range(600.0..2000.0);
        let at_null = IrSignalParams::new(m0, t1, t1 * std::f64::consts::LN_2).unwrap();
        null_err = null_err.max(ir_signal(&at_null).unwrap().abs());
        let s = |ti| ir_signal(&IrSignalParams::new(m0, t1, ti).unwrap()).unwrap();
        let fit = estimate_ir_params(s(400.0), 400.0, s(1400.0), 1400.0).unwrap();
        fit_err = fit_err
            .max(((fit.m0 - m0) / m0).abs())
            .max(((fit.t1 - t1) / t1).abs());
    }
    outcome(
        null_err <= 1e-12 && fit_err <= 1e-6,
        format!(
            "100 seeded tissues (t1 600..2000 ms): |signal at null point| {null_err:.1e} (<= 1e-12); roundtrip relative error {fit_err:.1e} (<= 1e-6)"
        ),
    )
}

// ---------------------------------------------------------------------------

/// The phantom of criteria 1 to 4, with a third inversion time.
const SYNTH_SETTINGS: &[&str] = &[
    "--set",
    "phantom.partial_volume=4",
    "--set",
    "phantom.noise_sigma=0.01",
    "--set",
    "phantom.inversion_times=[400.0, 800.0, 1400.0]",
    "--set",
    "phantom.deformation.smoothness=8.0",
    "--set",
    "phantom.deformation.magnitude=5.0",
];

fn criterion_12(dir: &Path) -> Outcome {
    let ph = dir.join("cohort");
    let mut args = vec!["phantom", "--n", "3", "--out", p(&ph)];
    args.extend_from_slice(SYNTH_SETTINGS);
    warpsynth(&args);
    let out = dir.join("synth");
    let (fixed, manifest) = (ph.join("base/ti1400.nii"), ph.join("atlases.json"));
    let fixed_labels = ph.join("base/labels.nii");
    let mut args = vec![
        "synth",
        "--fixed",
        p(&fixed),
        "--fixed-labels",
        p(&fixed_labels),
        "--atlases",
        p(&manifest),
        "--contrast",
        "ti400",
        "--contrast",
        "ti800",
        "--out",
        p(&out),
    ];
    args.extend_from_slice(SYNTH_SETTINGS);
    warpsynth(&args);

    let fusion = read_json(out.join("fusion.json"));
    let regs = fusion["registrations"].as_array().unwrap();
    let reg_ids: Vec<&str> = regs.iter().map(|r| r["id"].as_str().unwrap()).collect();
    let atlas_ids: Vec<&str> = regs
        .iter()
        .map(|r| r["atlas_id"].as_str().unwrap())
        .collect();
    let mut unique = atlas_ids.clone();
    unique.sort_unstable();
    unique.dedup();
    let mut reuse = regs.len() == 3 && unique.len() == 3;
    for c in ["ti400", "ti800"] {
        let ids: Vec<&str> = fusion["contrasts"][c]["registration_ids"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        reuse &= sorted == reg_ids;
    }

    // criterion 4's check on every transform behind each synthetic contrast
    let fixed_labels = io::read_labels(&fixed_labels).unwrap();
    let file_of: BTreeMap<&str, &str> = regs
        .iter()
        .map(|r| {
            (
                r["id"].as_str().unwrap(),
                r["displacement"].as_str().unwrap(),
            )
        })
        .collect();
    let mut worst = f64::INFINITY;
    let mut parts = Vec::new();
    for c in ["ti400", "ti800"] {
        assert!(out.join(format!("synthetic_{c}.nii")).exists());
        let record = &fusion["contrasts"][c];
        let pairs = record["atlas_ids"]
            .as_array()
            .unwrap()
            .iter()
            .zip(record["registration_ids"].as_array().unwrap());
        let mut per = Vec::new();
        for (atlas, reg) in pairs {
            let moving =
                io::read_labels(ph.join(atlas.as_str().unwrap()).join("labels.nii")).unwrap();
            let u = io::read_displacement(out.join(file_of[reg.as_str().unwrap()])).unwrap();
            let dice = hard_dice(&warp_labels(&moving, &u).unwrap(), &fixed_labels).unwrap();
            let min = dice
                .iter()
                .filter(|(&l, _)| l != 0)
                .map(|(_, &d)| d)
                .fold(f64::INFINITY, f64::min);
            per.push(min);
            worst = worst.min(min);
        }
        parts.push(format!("{c} {}", fmt3(&per).join("/")));
    }
    outcome(
        reuse && worst >= 0.85,
        format!(
            "{} registrations for 3 atlases, both contrasts reference the same ids: {reuse}; worst per-atlas hard Dice of transferred labels (>= 0.85): {}",
            regs.len(),
            parts.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------

fn criterion_13(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = Geometry::new([7, 5, 6], [1.0, 2.0, 0.5], [3.0, -1.5, 0.25]).unwrap();
    let f32s = |rng: &mut ChaCha8Rng| rng.random_range(-1e3f32..1e3) as f64;
    let v = Volume::new(g, (0..g.len()).map(|_| f32s(&mut rng)).collect()).unwrap();
    let l = LabelMap::new(
        g,
        (0..g.len()).map(|_| rng.random_range(0..32000)).collect(),
    )
    .unwrap();
    let u = DisplacementField::direct(
        VectorField::new(
            g,
            (0..g.len())
                .map(|_| [f32s(&mut rng), f32s(&mut rng), f32s(&mut rng)])
                .collect(),
        )
        .unwrap(),
    );
    let (pv, pl, pu) = (dir.join("v.nii"), dir.join("l.nii"), dir.join("u.nii"));
    io::write_scalar(&v, &pv).unwrap();
    io::write_labels(&l, &pl).unwrap();
    io::write_displacement(&u, &pu).unwrap();
    let scalar_ok = io::read_scalar(&pv).unwrap() == v;
    let labels_ok = io::read_labels(&pl).unwrap() == l
        && io::read_header(&pl).unwrap().datatype == io::DataType::Int16;
    let disp_ok = io::read_displacement(&pu).unwrap() == u;

    let mut bytes = std::fs::read(&pv).unwrap();
    bytes[344..348].copy_from_slice(b"nope");
    let bad = dir.join("bad.nii");
    std::fs::write(&bad, &bytes).unwrap();
    let rejected = matches!(io::read_volume(&bad), Err(Error::Format(_)));
    outcome(
        scalar_ok && labels_ok && disp_ok && rejected,
        format!(
            "bit-exact roundtrip: float32 volume {scalar_ok}, int16 labels {labels_ok}, 3-component displacement {disp_ok}; bad magic gives a format error: {rejected}"
        ),
    )
}

// ---------------------------------------------------------------------------

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

const SMALL: &[&str] = &[
    "--set",
    "phantom.dims=[32, 32, 32]",
    "--set",
    "phantom.deformation.smoothness=5.0",
    "--set",
    "phantom.deformation.magnitude=2.5",
    "--set",
    "registration.gradient_sigma=4.0",
    "--set",
    "registration.iterations_per_level=[40, 40, 20]",
    "--set",
    "sweep.max_atlases=2",
    "--set",
    "sweep.seeds=[0, 1]",
];

/// Runs every command into `root`.
fn run_all_commands(root: &Path) {
    let ph = root.join("phantom");
    let with = |base: Vec<&str>| {
        let mut a = base;
        a.extend_from_slice(SMALL);
        warpsynth(&a);
    };
    with(vec!["phantom", "--n", "2", "--out", p(&ph)]);
    with(vec![
        "register",
        "--fixed",
        p(&ph.join("base/ti1400.nii")),
        "--moving",
        p(&ph.join("subject_000/ti1400.nii")),
        "--fixed-labels",
        p(&ph.join("base/labels.nii")),
        "--moving-labels",
        p(&ph.join("subject_000/labels.nii")),
        "--truth",
        p(&ph.join("subject_000/truth_inverse.nii")),
        "--out",
        p(&root.join("register")),
    ]);
    with(vec![
        "synth",
        "--fixed",
        p(&ph.join("base/ti1400.nii")),
        "--fixed-labels",
        p(&ph.join("base/labels.nii")),
        "--atlases",
        p(&ph.join("atlases.json")),
        "--method",
        "weighted_mean",
        "--out",
        p(&root.join("synth")),
    ]);
    with(vec![
        "eval",
        "--reference",
        p(&ph.join("base/ti400.nii")),
        "--test",
        p(&root.join("synth/synthetic_ti400.nii")),
        "--labels",
        p(&ph.join("base/labels.nii")),
        "--test-labels",
        p(&ph.join("subject_000/labels.nii")),
        "--out",
        p(&root.join("eval")),
    ]);
    with(vec!["sweep", "--out", p(&root.join("sweep"))]);
}

fn criterion_14(dir: &Path) -> Outcome {
    let (a, b) = (dir.join("first"), dir.join("second"));
    run_all_commands(&a);
    run_all_commands(&b);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    let differing: Vec<String> = sa
        .iter()
        .filter(|(k, v)| sb.get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_set = sa.keys().eq(sb.keys());
    outcome(
        same_set && differing.is_empty() && sa.len() > 20,
        format!(
            "phantom, register, synth, eval and sweep rerun: {} output files, byte-identical: {}{}",
            sa.len(),
            same_set && differing.is_empty(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(" (differ: {differing:?})")
            }
        ),
    )
}

// ---------------------------------------------------------------------------

const NAMES: [&str; 14] = [
    "known-deformation recovery",
    "warp fidelity (SSIM)",
    "invertibility",
    "transfer correctness",
    "fusion trend",
    "mean vs median fusion",
    "supervised/unsupervised consistency",
    "gradient checks",
    "exponential map",
    "metric oracles",
    "IR model",
    "multi-contrast reuse",
    "NIfTI I/O",
    "determinism",
];

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let dir = tempfile::tempdir().unwrap();
    let mut failures = 0;
    let mut report = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(&mut *f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failures += 1;
        }
        println!(
            "[{}] criterion {n:>2} {}: {} [{:.0} s]",
            if o.pass { "PASS" } else { "FAIL" },
            NAMES[n - 1],
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };

    if (1..=4).any(wanted) {
        let runs: Vec<PairRun> = PAIR_SEEDS.iter().map(|&s| run_pair(s)).collect();
        let checks: [(usize, fn(&[PairRun]) -> Outcome); 4] = [
            (1, criterion_1),
            (2, criterion_2),
            (3, criterion_3),
            (4, criterion_4),
        ];
        for (n, f) in checks {
            if wanted(n) {
                report(n, &mut || f(&runs));
            }
        }
    }
    if wanted(5) || wanted(6) {
        let summary = run_sweep(dir.path());
        if wanted(5) {
            report(5, &mut || criterion_5(&summary));
        }
        if wanted(6) {
            report(6, &mut || criterion_6(&summary));
        }
    }
    if wanted(7) {
        report(7, &mut criterion_7);
    }
    if wanted(8) {
        report(8, &mut criterion_8);
    }
    if wanted(9) {
        report(9, &mut criterion_9);
    }
    if wanted(10) {
        report(10, &mut criterion_10);
    }
    if wanted(11) {
        report(11, &mut criterion_11);
    }
    if wanted(12) {
        report(12, &mut || criterion_12(&dir.path().join("c12")));
    }
    if wanted(13) {
        let d = dir.path().join("c13");
        std::fs::create_dir_all(&d).unwrap();
        report(13, &mut || criterion_13(&d));
    }
    if wanted(14) {
        report(14, &mut || criterion_14(&dir.path().join("c14")));
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
