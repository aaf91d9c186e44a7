//! End-to-end acceptance criteria. Each test prints one `[criterion N]` line
//! with its verdict and measured values. Tests take a shared lock so that the
//! timed ones are not slowed down by each other.

use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use svreg::diffeo::{jacobian_determinants, DiffScheme, Integrator};
use svreg::gradcheck::{run_suite, LOSS_TOLERANCE, OP_TOLERANCE};
use svreg::grid::{FieldKind, GridShape, LabelMap, VectorField};
use svreg::io::{decode_nifti, decode_vraw, encode_nifti_f32, encode_vraw, read_sweep_csv, Dtype, VrawHeader};
use svreg::losses::{diffusion_energy, laplacian_quadratic_form, log_loss, weighted_diffusion_energy, WeightVolume};
use svreg::metrics::{dice, hd95, pct_ndv, pct_nonpos_jacobian, sdlogj};
use svreg::optim::{register_instance, train_amortized, EtaSampling, RegistrationConfig, TrainingPair};
use svreg::synth::Preset;
use svreg::Error;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: u32, ok: bool, detail: impl AsRef<str>) {
    println!("[criterion {n:>2}] {} {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    assert!(ok, "criterion {n} failed: {}", detail.as_ref());
}

/// Settings shared by the end-to-end runs on 32³ phantoms.
fn desk_config(eta: f64, iters: usize) -> RegistrationConfig {
    RegistrationConfig {
        eta,
        iters,
        lr: 0.1,
        ..Default::default()
    }
}

fn random_field(shape: GridShape, amp: f64, rng: &mut impl Rng) -> VectorField {
    let data = (0..3 * shape.len()).map(|_| rng.random_range(-amp..amp)).collect();
    VectorField::new(shape, FieldKind::Displacement, data).unwrap()
}

fn masked_mean(values: &[f64], mask: &[bool]) -> f64 {
    let (s, n) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    s / n as f64
}

#[test]
fn criterion_01_gradient_suite() {
    let _g = serial();
    let t = Instant::now();
    let mut rows = run_suite(8, 0).unwrap();
    rows.extend(run_suite(5, 1).unwrap());
    let elapsed = t.elapsed();
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{}={:e}", r.name, r.rel_err))
        .collect();
    let worst = rows.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let tolerances_ok = rows.iter().all(|r| {
        let loss = matches!(r.name.as_str(), "dice_loss" | "diffusion" | "weighted_diffusion" | "log_loss");
        r.tolerance <= if loss { LOSS_TOLERANCE } else { OP_TOLERANCE }
    });
    verdict(
        1,
        failed.is_empty() && tolerances_ok && elapsed < Duration::from_secs(60),
        format!("{} checks, worst rel err {worst:.2e}, failures {failed:?}, {elapsed:.1?}", rows.len()),
    );
}

#[test]
fn criterion_02_laplacian_equivalence() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(5..=8));
        let shape = GridShape::new(dims[0], dims[1], dims[2]).unwrap();
        let u = random_field(shape, 2.0, &mut rng);
        let quad = laplacian_quadratic_form(&u);
        let (energy, _) = diffusion_energy(&u);
        worst = worst.max((quad - energy).abs() / energy.abs());
    }
    verdict(2, worst < 1e-10, format!("20 fields, worst rel diff {worst:.2e}"));
}

#[test]
fn criterion_03_weighted_reduces_to_classical() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    for n in [5, 8] {
        let shape = GridShape::cube(n).unwrap();
        let u = random_field(shape, 1.5, &mut rng);
        let (e, gu) = diffusion_energy(&u);
        let (e1, gu1, _) = weighted_diffusion_energy(&u, &WeightVolume::filled(shape, 1.0).unwrap()).unwrap();
        ok &= e1 == e && gu1.data() == gu.data();
        // Powers of two scale every summand exactly.
        for c in [0.5, 0.25, 0.125] {
            let (ec, guc, _) = weighted_diffusion_energy(&u, &WeightVolume::filled(shape, c).unwrap()).unwrap();
            ok &= ec == c * e;
            ok &= guc.data().iter().zip(gu.data()).all(|(a, b)| *a == c * b);
        }
    }
    verdict(3, ok, "omega = 1 exact, omega = c exact linear scaling");
}

#[test]
fn criterion_04_log_loss_endpoints() {
    let _g = serial();
    let shape = GridShape::cube(4).unwrap();
    let at = |w: f64, eps: f64| log_loss(&WeightVolume::filled(shape, w).unwrap(), eps).unwrap().0;
    let eps = 1e-4;
    let (l1, le, lm) = (at(1.0, eps), at(eps, eps), at(0.01, eps));
    let ulp = |x: f64, want: f64| (x - want).abs() <= 4.0 * f64::EPSILON * want.abs().max(f64::MIN_POSITIVE);
    verdict(
        4,
        l1 == 0.0 && ulp(le, 1.0) && ulp(lm, 0.5),
        format!("log_loss(1) = {l1}, log_loss(eps) = {le}, log_loss(0.01) = {lm}"),
    );
}

#[test]
fn criterion_05_diffeomorphic_registration() {
    let _g = serial();
    let t = Instant::now();
    let base = desk_config(0.0, 100);
    let cfg = RegistrationConfig {
        eta: base.eta_max,
        ..base
    };
    assert_eq!(cfg.integrator, Integrator::ScalingSquaring { steps: 7 });
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let p = Preset::TwoStructure.generate(32, seed).unwrap();
        let r = register_instance(&p.moving.image, &p.fixed.image, None, &cfg).unwrap();
        worst.0 = worst.0.max(r.metrics.pct_ndv);
        worst.1 = worst.1.max(r.metrics.pct_nonpos_jac);
    }
    let elapsed = t.elapsed();
    verdict(
        5,
        worst == (0.0, 0.0) && elapsed < Duration::from_secs(600),
        format!("10 pairs, max %NDV {}, max %|J|<=0 {}, {elapsed:.1?}", worst.0, worst.1),
    );
}

#[test]
fn criterion_06_eta_monotonicity() {
    let _g = serial();
    let p = Preset::SphereEllipsoid.generate(32, 0).unwrap();
    let base = desk_config(0.0, 100);
    let mut rows = Vec::new();
    for eta in [0.0, 0.5 * base.eta_max, base.eta_max] {
        let cfg = RegistrationConfig { eta, ..base.clone() };
        let r = register_instance(&p.moving.image, &p.fixed.image, None, &cfg).unwrap();
        rows.push((eta, r.omega.mean(), r.metrics.sdlogj));
    }
    let ok = rows.windows(2).all(|w| w[1].1 > w[0].1 && w[1].2 <= w[0].2 + 0.005);
    let text: Vec<String> = rows
        .iter()
        .map(|(e, w, s)| format!("eta {e}: mean omega {w:.3}, sdlogj {s:.4}"))
        .collect();
    verdict(6, ok, text.join("; "));
}

#[test]
fn criterion_07_spatial_adaptivity() {
    let _g = serial();
    let p = Preset::Ventricle.generate(32, 0).unwrap();
    let cfg = RegistrationConfig {
        use_dice: true,
        ..desk_config(1.0, 100)
    };
    let r = register_instance(
        &p.moving.image,
        &p.fixed.image,
        Some((&p.moving.labels, &p.fixed.labels)),
        &cfg,
    )
    .unwrap();
    let w = r.omega.data();
    let inside = masked_mean(w, &p.fixed.labels.mask(2));
    let background = masked_mean(w, &p.fixed.labels.mask(0));
    verdict(
        7,
        background - inside >= 0.05,
        format!("mean omega in dilating structure {inside:.3}, background {background:.3}"),
    );
}

#[test]
fn criterion_08_registration_quality() {
    let _g = serial();
    let t = Instant::now();
    let p = Preset::SphereEllipsoid.generate(32, 0).unwrap();
    let initial = dice(&p.moving.labels, &p.fixed.labels, &[1]).unwrap()[0].score;
    let cfg = desk_config(0.5, 300);
    let r = register_instance(
        &p.moving.image,
        &p.fixed.image,
        Some((&p.moving.labels, &p.fixed.labels)),
        &cfg,
    )
    .unwrap();
    let elapsed = t.elapsed();
    let final_dice = r.metrics.dice_mean.unwrap();
    let epe = p.endpoint_error(&r.displacement, &p.fixed.labels.mask(1)).unwrap();
    verdict(
        8,
        initial < 0.75 && final_dice > 0.90 && epe < 1.0 && elapsed < Duration::from_secs(120),
        format!("dice {initial:.3} -> {final_dice:.3}, foreground EPE {epe:.3} vox, {elapsed:.1?}"),
    );
}

fn svreg(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_svreg")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn criterion_09_sweep_protocol() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("pair");
    let out = svreg(&["synth", "--preset", "ventricle", "--size", "16", "--seed", "3", "--out-dir", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep_dir = dir.path().join("sweep");
    let out = svreg(&[
        "sweep",
        "--moving",
        path(&data.join("moving.vraw")),
        "--fixed",
        path(&data.join("fixed.vraw")),
        "--moving-labels",
        path(&data.join("moving_labels.vraw")),
        "--fixed-labels",
        path(&data.join("fixed_labels.vraw")),
        "--eta-min",
        "0",
        "--eta-max",
        "2",
        "--eta-step",
        "0.05",
        "--iters",
        "25",
        "--lr",
        "0.1",
        "--ncc-window",
        "5",
        "--parallel",
        "4",
        "--out-dir",
        path(&sweep_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let text = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let header = text.lines().next().unwrap().to_string();
    let rows = read_sweep_csv(sweep_dir.join("sweep.csv")).unwrap();

    // Oracle: first row (smallest η) among those with the maximal Dice.
    let max = rows.iter().map(|r| r.dice).fold(f64::NEG_INFINITY, f64::max);
    let want = rows
        .iter()
        .filter(|r| r.dice == max)
        .map(|r| r.eta)
        .fold(f64::INFINITY, f64::min);
    let reported: f64 = stdout
        .split_whitespace()
        .skip_while(|w| *w != "eta")
        .nth(1)
        .and_then(|w| w.parse().ok())
        .unwrap();
    let grid_ok = rows
        .iter()
        .enumerate()
        .all(|(i, r)| (r.eta - 0.05 * i as f64).abs() < 1e-9);
    verdict(
        9,
        rows.len() == 41
            && grid_ok
            && header == "eta,dice,hd95,sdlogj,pct_nonpos,pct_ndv,mean_omega"
            && reported == want,
        format!("{} rows, best eta {reported} (oracle {want}, dice {max:.4})", rows.len()),
    );
}

#[test]
fn criterion_10_determinism_and_io() {
    let _g = serial();
    let mut ok = true;
    let mut notes = Vec::new();

    // Library reruns.
    let p = Preset::TwoStructure.generate(16, 5).unwrap();
    let cfg = RegistrationConfig {
        ncc_window: 5,
        seed: 5,
        ..desk_config(0.7, 20)
    };
    let run = || register_instance(&p.moving.image, &p.fixed.image, None, &cfg).unwrap();
    let (a, b) = (run(), run());
    let same = a.trace == b.trace && a.displacement == b.displacement && a.omega == b.omega;
    ok &= same;
    notes.push(format!("instance reruns identical: {same}"));

    let pair = TrainingPair {
        moving: p.moving.image.clone(),
        fixed: p.fixed.image.clone(),
        labels: None,
    };
    let tcfg = RegistrationConfig {
        iters: 3,
        lr: 1e-3,
        ..cfg.clone()
    };
    let ta = train_amortized(std::slice::from_ref(&pair), &tcfg, EtaSampling::Uniform).unwrap();
    let tb = train_amortized(std::slice::from_ref(&pair), &tcfg, EtaSampling::Uniform).unwrap();
    let same = ta.trace == tb.trace && ta.net.params() == tb.net.params();
    ok &= same;
    notes.push(format!("training reruns identical: {same}"));

    // CLI reruns with one thread.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("pair");
    assert!(svreg(&["synth", "--preset", "two-structure", "--size", "16", "--seed", "9", "--out-dir", path(&data)])
        .status
        .success());
    let outs: Vec<_> = (0..2)
        .map(|k| {
            let od = dir.path().join(format!("run{k}"));
            let o = svreg(&[
                "--threads",
                "1",
                "register",
                "--moving",
                path(&data.join("moving.vraw")),
                "--fixed",
                path(&data.join("fixed.vraw")),
                "--iters",
                "15",
                "--lr",
                "0.1",
                "--eta",
                "0.5",
                "--ncc-window",
                "5",
                "--seed",
                "9",
                "--out-dir",
                path(&od),
            ]);
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            od
        })
        .collect();
    for f in ["warped.vraw", "disp.vraw", "omega.vraw", "metrics.json", "trace.csv"] {
        let same = std::fs::read(outs[0].join(f)).unwrap() == std::fs::read(outs[1].join(f)).unwrap();
        ok &= same;
        if !same {
            notes.push(format!("{f} differs"));
        }
    }
    notes.push("cli outputs compared".into());

    // vraw round trips for every dtype.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let shape = GridShape::cube(8).unwrap();
    for dtype in [Dtype::F32, Dtype::I32, Dtype::U8] {
        let values: Vec<f64> = (0..shape.len())
            .map(|_| match dtype {
                Dtype::F32 => rng.random_range(-1e3f32..1e3) as f64,
                Dtype::I32 => rng.random::<i32>() as f64,
                Dtype::U8 => rng.random::<u8>() as f64,
            })
            .collect();
        let header = VrawHeader::new(&shape, 1, dtype);
        let bytes = encode_vraw(&header, &values).unwrap();
        let back = decode_vraw(&bytes).unwrap();
        let same = back.header == header
            && back.values.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits())
            && encode_vraw(&back.header, &back.values).unwrap() == bytes;
        ok &= same;
        notes.push(format!("{dtype:?} round trip: {same}"));
    }

    // Malformed NIfTI headers.
    let good = encode_nifti_f32([4, 4, 4], &[0.5; 64], true);
    let mut dt64 = good.clone();
    dt64[70..72].copy_from_slice(&64i16.to_le_bytes());
    let mut magic = good.clone();
    magic[344..348].copy_from_slice(b"nope");
    let classes = [
        matches!(decode_nifti(&dt64), Err(Error::UnsupportedDtype(_))),
        matches!(decode_nifti(&magic), Err(Error::BadMagic { .. })),
        matches!(decode_nifti(&good[..good.len() - 2]), Err(Error::PayloadLengthMismatch { .. })),
        decode_nifti(&good).is_ok(),
    ];
    ok &= classes.iter().all(|&c| c);
    notes.push(format!("nifti error classes {classes:?}"));
    verdict(10, ok, notes.join("; "));
}

/// Voxels of `mask` with a 6-neighbour outside it; the grid exterior counts
/// as outside.
fn oracle_surface(dims: [usize; 3], mask: &[bool]) -> Vec<[i64; 3]> {
    let [nx, ny, nz] = dims;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !mask[idx(x, y, z)] {
                    continue;
                }
                let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                let open = border
                    || !mask[idx(x - 1, y, z)]
                    || !mask[idx(x + 1, y, z)]
                    || !mask[idx(x, y - 1, z)]
                    || !mask[idx(x, y + 1, z)]
                    || !mask[idx(x, y, z - 1)]
                    || !mask[idx(x, y, z + 1)];
                if open {
                    out.push([x as i64, y as i64, z as i64]);
                }
            }
        }
    }
    out
}

/// Brute-force symmetric surface distances, 95th percentile with linear
/// interpolation between order statistics.
fn oracle_hd95(dims: [usize; 3], a: &[bool], b: &[bool]) -> f64 {
    let sa = oracle_surface(dims, a);
    let sb = oracle_surface(dims, b);
    let nearest = |p: &[i64; 3], set: &[[i64; 3]]| {
        set.iter()
            .map(|q| (0..3).map(|k| (p[k] - q[k]).pow(2)).sum::<i64>())
            .min()
            .unwrap()
    };
    let mut d: Vec<f64> = sa
        .iter()
        .map(|p| (nearest(p, &sb) as f64).sqrt())
        .chain(sb.iter().map(|p| (nearest(p, &sa) as f64).sqrt()))
        .collect();
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    d[lo] + (pos - lo as f64) * (d[hi] - d[lo])
}

/// Central differences inside, one-sided at the border.
fn oracle_nonpos_count(u: &VectorField) -> usize {
    let [nx, ny, nz] = u.shape().dims_xyz();
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut count = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x, y, z];
                let n = [nx, ny, nz];
                let mut j = [[0.0f64; 3]; 3];
                for c in 0..3 {
                    let comp = u.component(c);
                    for a in 0..3 {
                        let mut lo = p;
                        let mut hi = p;
                        let mut h = 2.0;
                        if p[a] == 0 {
                            hi[a] += 1;
                            h = 1.0;
                        } else if p[a] + 1 == n[a] {
                            lo[a] -= 1;
                            h = 1.0;
                        } else {
                            lo[a] -= 1;
                            hi[a] += 1;
                        }
                        j[c][a] = (comp[idx(hi[0], hi[1], hi[2])] - comp[idx(lo[0], lo[1], lo[2])]) / h;
                    }
                    j[c][c] += 1.0;
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                count += usize::from(det <= 0.0);
            }
        }
    }
    count
}

#[test]
fn criterion_11_metric_oracles() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ok = true;
    let mut notes = Vec::new();

    let mut hd_matches = 0;
    for _ in 0..10 {
        let dims: [usize; 3] = std::array::from_fn(|_| rng.random_range(6..=16));
        let shape = GridShape::new(dims[1], dims[0], dims[2]).unwrap();
        let blob = |rng: &mut ChaCha8Rng| {
            let c: [f64; 3] = std::array::from_fn(|k| rng.random_range(1.0..dims[k] as f64 - 1.0));
            let r = rng.random_range(1.5..4.0);
            let noise: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(-0.8..0.8)).collect();
            (0..shape.len())
                .map(|i| {
                    let p = shape.coords(i);
                    let d2: f64 = (0..3).map(|k| (p[k] as f64 - c[k]).powi(2)).sum();
                    d2.sqrt() + noise[i] < r
                })
                .collect::<Vec<bool>>()
        };
        let (mut a, mut b) = (blob(&mut rng), blob(&mut rng));
        a[0] = true;
        b[shape.len() - 1] = true;
        let got = hd95(&shape, &a, &b).unwrap();
        let want = oracle_hd95(dims, &a, &b);
        hd_matches += usize::from(got == want);
    }
    ok &= hd_matches == 10;
    notes.push(format!("hd95 exact on {hd_matches}/10"));

    let mut jac_matches = 0;
    for k in 0..10 {
        let shape = GridShape::new(7 + k % 3, 6 + k % 4, 8).unwrap();
        let u = random_field(shape, 0.2 + 0.1 * k as f64, &mut rng);
        let expected = 100.0 * oracle_nonpos_count(&u) as f64 / shape.len() as f64;
        jac_matches += usize::from(pct_nonpos_jacobian(&u) == expected);
    }
    ok &= jac_matches == 10;
    notes.push(format!("%|J|<=0 exact on {jac_matches}/10"));

    let shape = GridShape::cube(9).unwrap();
    let id = VectorField::zeros(shape, FieldKind::Displacement);
    let identity_ok = sdlogj(&id) == 0.0 && pct_nonpos_jacobian(&id) == 0.0 && pct_ndv(&id) == 0.0;
    // u = (s - 1)(p - c) with s = 1.5 has det J = s³ at every voxel.
    let dil = VectorField::from_fn(shape, FieldKind::Displacement, |x, y, z| {
        [x, y, z].map(|v| 0.5 * (v as f64 - 4.0))
    });
    let dil_ok = jacobian_determinants(&dil, DiffScheme::Central).data().iter().all(|&d| d == 3.375)
        && sdlogj(&dil) == 0.0
        && pct_nonpos_jacobian(&dil) == 0.0
        && pct_ndv(&dil) == 0.0;
    // Mirroring x gives det J = -1 everywhere and inverts every cell.
    let fold = VectorField::from_fn(shape, FieldKind::Displacement, |x, _, _| [-2.0 * x as f64 + 8.0, 0.0, 0.0]);
    let fold_ok = jacobian_determinants(&fold, DiffScheme::Central).data().iter().all(|&d| d == -1.0)
        && pct_nonpos_jacobian(&fold) == 100.0
        && (pct_ndv(&fold) - 100.0).abs() < 1e-9;
    ok &= identity_ok && dil_ok && fold_ok;
    notes.push(format!("identity {identity_ok}, dilation {dil_ok}, fold {fold_ok} (NDV {})", pct_ndv(&fold)));

    let la = LabelMap::from_fn(shape, |x, _, _| u32::from(x > 3));
    let self_dice = dice(&la, &la, &[1]).unwrap()[0].score;
    ok &= self_dice == 1.0;
    verdict(11, ok, notes.join("; "));
}
