//! One line per acceptance criterion, then a single verdict.
//! Run with `cargo test -p squeezeseg-cli --test acceptance -- --nocapture`.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::Command;
use std::time::Instant;

use common::*;

struct Line {
    id: usize,
    pass: bool,
    detail: String,
}

fn line(id: usize, pass: bool, detail: String) -> Line {
    Line { id, pass, detail }
}

fn counts() -> Line {
    let t0 = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for c in [16, 64, 128] {
        let (c, fire, fd, conv, deconv) = parameter_counts(c);
        let c2 = (c * c) as u64;
        pass &= fire * 2 == 3 * c2 && fd * 4 == 7 * c2 && conv == 9 * c2 && deconv == 4 * c2;
        parts.push(format!("C={c}: fire {fire} fireDeconv {fd} conv {conv} deconv {deconv}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    line(1, pass && secs < 1.0, format!("{} ({secs:.3}s)", parts.join("; ")))
}

fn gradients() -> Line {
    let t0 = Instant::now();
    let suite = gradient_suite(11);
    let secs = t0.elapsed().as_secs_f64();
    let worst = suite.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let names: Vec<String> = suite.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    line(2, worst <= 1e-4 && secs < 120.0, format!("worst {worst:.2e} [{}] ({secs:.1}s)", names.join(", ")))
}

fn oracles() -> Line {
    let tensor = tensor_oracle_error(200, 1);
    let crf = crf_oracle_error(50, 2);
    let dbscan = dbscan_mismatches(100, 4);
    let metrics = metrics_mismatches(100, 5);
    line(
        3,
        tensor <= 1e-6 && crf <= 1e-6 && dbscan == 0 && metrics == 0,
        format!("tensor {tensor:.1e}, crf {crf:.1e} (50), dbscan mismatches {dbscan}/100, metric mismatches {metrics}/100"),
    )
}

fn identity() -> Line {
    let (ident, norm) = crf_identity_and_normalization(50, 3);
    line(4, ident <= 1e-7 && norm <= 1e-6, format!("identity {ident:.1e}, normalization {norm:.1e}"))
}

fn overfit() -> Line {
    let frames = overfit_frames(20, 64, 128);
    let a = toy_overfit(&frames, 0, 500, 0.9);
    let b = toy_overfit(&frames, 0, 500, 0.9);
    let same = a.epochs == b.epochs
        && a.params.len() == b.params.len()
        && a.params.iter().zip(&b.params).all(|(x, y)| {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        });
    line(
        5,
        a.car_iou >= 0.9 && a.seconds < 600.0 && same,
        format!(
            "car IoU {:.4} after {} epochs ({:.1}s); rerun bit-identical: {same}",
            a.car_iou, a.epochs, a.seconds
        ),
    )
}

fn direction() -> Line {
    let mut worst_gain = f64::INFINITY;
    let mut all = true;
    let (mut sb, mut sa) = (0.0, 0.0);
    for seed in 0..20 {
        let (before, after) = crf_direction(seed);
        all &= after > before;
        worst_gain = worst_gain.min(after - before);
        sb += before;
        sa += after;
    }
    line(
        6,
        all,
        format!("mean accuracy {:.4} -> {:.4}, smallest gain {worst_gain:.4} over 20 seeds", sb / 20.0, sa / 20.0),
    )
}

fn noise() -> Line {
    let (est, re) = noise_transfer(10_000, 6);
    line(7, est <= 0.015 && re <= 0.015, format!("estimate {est:.4}, re-estimate {re:.4} (bound 0.015)"))
}

fn geometry() -> Line {
    let g = simulator_geometry(1_000, 7);
    line(
        8,
        g.worst_surface <= 1e-6 && g.not_nearest == 0 && g.label_mismatches == 0 && g.hits > 0,
        format!(
            "{} rays, {} hits, surface {:.1e} m, not nearest {}, label mismatches {}",
            g.rays, g.hits, g.worst_surface, g.not_nearest, g.label_mismatches
        ),
    )
}

fn bench(workers: &str) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_squeezeseg"))
        .args(["bench", "--frames", "100", "--seed", "9", "--workers", workers])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn runtime() -> Line {
    let runs = [bench("1"), bench("4"), bench("1")];
    let digest = |t: &str| t.lines().find_map(|l| l.strip_prefix("digest ")).map(str::to_owned);
    let row = |t: &str, stage: &str| -> Option<(f64, f64)> {
        let l = t.lines().find(|l| l.split_whitespace().next() == Some(stage))?;
        let v: Vec<f64> = l.split_whitespace().skip(1).filter_map(|x| x.parse().ok()).collect();
        (v.len() == 2).then(|| (v[0], v[1]))
    };
    let d: Vec<Option<String>> = runs.iter().map(|t| digest(t)).collect();
    let same = d[0].is_some() && d.iter().all(|x| *x == d[0]);
    let rows = runs.iter().all(|t| t.contains("mean_ms") && t.contains("std_ms"))
        && runs.iter().all(|t| row(t, "forward").is_some() && row(t, "forward+crf").is_some());
    let (f, c) = (row(&runs[0], "forward"), row(&runs[0], "forward+crf"));
    let fmt = |r: Option<(f64, f64)>| r.map_or("missing".into(), |(m, s)| format!("{m:.2} +/- {s:.2} ms"));
    line(
        9,
        same && rows,
        format!(
            "100 frames: forward {}, forward+crf {}; digests equal across workers 1/4/1: {same}",
            fmt(f),
            fmt(c)
        ),
    )
}

#[test]
fn acceptance() {
    let checks: [fn() -> Line; 9] =
        [counts, gradients, oracles, identity, overfit, direction, noise, geometry, runtime];
    let mut failed = Vec::new();
    for check in checks {
        let l = check();
        println!("criterion {}: {} - {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.detail);
        if !l.pass {
            failed.push(l.id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
