//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use mindx::denoisers::{denoise, DenoiserSpec};
use mindx::experiments::{center_crop, load_source, run_experiment, ExperimentConfig};
use mindx::filters::{amf, AmfParams};
use mindx::image::{psnr, Image, PixelMask};
use mindx::noise::{corrupt, rescale_to_peak, ImpulseType, NoiseSpec};
use mindx::operators::{
    div, grad, prox_conjugate, prox_data, prox_tv_dual_shrink, DualSpace, GradField, Prox,
    RegularizerConfig, TvPrior,
};
use mindx::solver::{
    cp_x_step, mindx_denoise_with, z_step, InnerOptions, SolverParams,
};
use mindx::vst::{build_exact_unbiased_lut, gat_value};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal, Poisson};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn draw(rng: &mut ChaCha20Rng, x: f64, sigma: f64) -> f64 {
    let k = if x > 0.0 {
        Poisson::new(x).unwrap().sample(rng)
    } else {
        0.0
    };
    let g = if sigma > 0.0 {
        Normal::new(0.0, sigma).unwrap().sample(rng)
    } else {
        0.0
    };
    k + g
}

fn natural_crop(name: &str, size: usize, peak: f64) -> Image {
    let (_, img) = load_source(&format!("builtin:{name}")).unwrap();
    rescale_to_peak(&center_crop(&img, size), peak).unwrap()
}

fn spec(impulse_type: ImpulseType, seed: u64) -> NoiseSpec {
    NoiseSpec {
        peak: 20.0,
        sigma: 2.0,
        impulse_ratio: 0.5,
        impulse_type,
        seed,
        exact_count: false,
    }
}

fn gat_variance() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for &x in &[4.0, 10.0, 20.0, 120.0] {
        let sigma = 0.1 * x;
        let n = 100_000;
        let v: Vec<f64> = (0..n).map(|_| gat_value(draw(&mut rng, x, sigma), sigma)).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        worst = worst.max((var - 1.0).abs());
        parts.push(format!("x={x}: {var:.3}"));
    }
    check(worst <= 0.15, parts.join(", "))
}

fn inverse_bias() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for &sigma in &[0.0, 1.0] {
        let lut = build_exact_unbiased_lut(sigma, 30.0).unwrap();
        for (i, &x) in [1.0, 5.0, 20.0].iter().enumerate() {
            let mut rng = ChaCha20Rng::seed_from_u64(10 + i as u64);
            let n = 1_000_000;
            let e = (0..n).map(|_| gat_value(draw(&mut rng, x, sigma), sigma)).sum::<f64>() / n as f64;
            let err = (lut.invert(e) - x).abs() / x.max(1.0);
            worst = worst.max(err);
            parts.push(format!("x={x},σ={sigma}: {:.3}%", 100.0 * err));
        }
    }
    check(worst <= 0.02, parts.join(", "))
}

fn z_step_enumeration() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    for case in 0..200 {
        let n = rng.random_range(1..=12usize);
        let mu = rng.random_range(0..=4usize).min(n);
        // Half the cases use small integers so ties occur and sums are exact.
        let q: Vec<f64> = (0..n)
            .map(|_| {
                if case % 2 == 0 {
                    rng.random_range(-3..=3) as f64
                } else {
                    rng.random_range(-5.0..5.0)
                }
            })
            .collect();
        let y = Image::new(n, 1, q.clone(), 1.0).unwrap();
        let x = Image::filled(n, 1, 0.0, 1.0).unwrap();
        let z = z_step(&y, &x, mu).unwrap();
        let support = z.data().iter().filter(|&&v| v != 0.0).count();
        let got: f64 = q.iter().zip(z.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let mut best = f64::INFINITY;
        for s in 0u32..(1 << n) {
            if s.count_ones() as usize > mu {
                continue;
            }
            let v: f64 = (0..n).filter(|i| s & (1 << i) == 0).map(|i| q[i] * q[i]).sum();
            best = best.min(v);
        }
        let exact = if case % 2 == 0 { got == best } else { got <= best * (1.0 + 1e-15) };
        if support > mu || !exact {
            return Err(format!("case {case}: q={q:?} mu={mu} got {got} best {best}"));
        }
    }
    Ok("200 vectors match the enumerated optimum".into())
}

fn adjoint_identity() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let sizes = [(2, 2), (3, 5), (17, 9), (64, 64)];
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (w, h) = sizes[i % sizes.len()];
        let x = Image::from_fn(w, h, 1.0, |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let gx = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gy = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = GradField::new(w, h, gx, gy).unwrap();
        let gxu = grad(&x).dot(&u);
        let dvu = div(&u);
        let xdu: f64 = x.data().iter().zip(dvu.data()).map(|(a, b)| a * b).sum();
        let scale = grad(&x).norm() * u.norm() + 1e-300;
        worst = worst.max((gxu + xdu).abs() / scale);
    }
    check(worst <= 1e-12, format!("worst relative defect {worst:.2e}"))
}

/// Forward differences with a zero last difference, written independently
/// of the library operators.
fn my_grad(x: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                gx[i] = x[i + 1] - x[i];
            }
            if r + 1 < h {
                gy[i] = x[i + w] - x[i];
            }
        }
    }
    (gx, gy)
}

fn my_grad_t(px: &[f64], py: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if c + 1 < w {
                out[i + 1] += px[i];
                out[i] -= px[i];
            }
            if r + 1 < h {
                out[i + w] += py[i];
                out[i] -= py[i];
            }
        }
    }
    out
}

fn masked_tv_objective(x: &[f64], y: &[f64], mask: &[bool], lambda: f64, w: usize, h: usize) -> f64 {
    let (gx, gy) = my_grad(x, w, h);
    let tv: f64 = gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).sum();
    let data: f64 = (0..x.len()).filter(|&i| mask[i]).map(|i| (x[i] - y[i]).powi(2)).sum();
    data + lambda * tv
}

/// FISTA on the Huber-smoothed problem with a tiny smoothing width.
fn fista_oracle(y: &[f64], mask: &[bool], lambda: f64, w: usize, h: usize) -> Vec<f64> {
    let eps = 1e-5;
    let lip = 2.0 + lambda * 8.0 / eps;
    let n = w * h;
    let mut x = vec![0.0; n];
    let mut v = x.clone();
    let mut t = 1.0f64;
    for _ in 0..400_000 {
        let (gx, gy) = my_grad(&v, w, h);
        let (px, py): (Vec<f64>, Vec<f64>) = gx
            .iter()
            .zip(&gy)
            .map(|(a, b)| {
                let m = a.hypot(*b).max(eps);
                (a / m, b / m)
            })
            .unzip();
        let tv_grad = my_grad_t(&px, &py, w, h);
        let next: Vec<f64> = (0..n)
            .map(|i| {
                let data = if mask[i] { 2.0 * (v[i] - y[i]) } else { 0.0 };
                v[i] - (data + lambda * tv_grad[i]) / lip
            })
            .collect();
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        for i in 0..n {
            v[i] = next[i] + (t - 1.0) / t_next * (next[i] - x[i]);
        }
        x = next;
        t = t_next;
    }
    x
}

fn cp_correctness() -> Outcome {
    let (w, h) = (16, 16);
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let y: Vec<f64> = (0..w * h)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let base = if r < 8 && c < 10 { 7.0 } else if (r as f64 - 11.0).hypot(c as f64 - 11.0) < 4.0 { 3.0 } else { 5.0 };
            base + Normal::new(0.0, 1.0).unwrap().sample(&mut rng)
        })
        .collect();
    let mask: Vec<bool> = (0..w * h).map(|_| rng.random::<f64>() > 0.3).collect();
    let lambda = 0.1;
    let y_img = Image::new(w, h, y.clone(), 10.0).unwrap();
    let omega = PixelMask::new(w, h, mask.clone()).unwrap();
    let reg = RegularizerConfig::tv(lambda, mindx::solver::DEFAULT_RHO).unwrap();
    let zero = y_img.map(|_| 0.0);
    let out = cp_x_step(&y_img, &omega, &zero, &reg, &InnerOptions::default()).unwrap();
    let cp = masked_tv_objective(out.w.data(), &y, &mask, lambda, w, h);
    let oracle_x = fista_oracle(&y, &mask, lambda, w, h);
    let oracle = masked_tv_objective(&oracle_x, &y, &mask, lambda, w, h);
    let rel = (cp - oracle).abs() / oracle;
    check(rel <= 0.005, format!("cp {cp:.6} vs oracle {oracle:.6} ({:.4}%)", 100.0 * rel))
}

fn outer_convergence() -> Outcome {
    let clean = natural_crop("moon", 64, 20.0);
    let (noisy, _) = corrupt(&clean, &spec(ImpulseType::RandomValued, 6)).unwrap();
    let lut = build_exact_unbiased_lut(2.0, 30.0).unwrap();
    let params = SolverParams::for_impulse(ImpulseType::RandomValued);
    if params.outer_iters != 10 {
        return Err(format!("expected T = 10, got {}", params.outer_iters));
    }
    let out = mindx_denoise_with(&noisy, 2.0, &params, ImpulseType::RandomValued, &lut, Some(&clean)).unwrap();
    let p = &out.aop.psnr_trace;
    let o = &out.aop.objective_trace;
    let late_change = p[5..].windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let monotone = o.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-3));
    let trace: Vec<String> = p.iter().map(|v| format!("{v:.2}")).collect();
    check(
        late_change < 0.1 && monotone,
        format!("PSNR trace [{}], max change after 6: {late_change:.3} dB, objective monotone: {monotone}", trace.join(" ")),
    )
}

fn end_to_end_gain() -> Outcome {
    let clean = natural_crop("camera", 128, 20.0);
    let (noisy, _) = corrupt(&clean, &spec(ImpulseType::SaltPepper, 7)).unwrap();
    let lut = build_exact_unbiased_lut(2.0, 30.0).unwrap();
    let params = SolverParams::for_impulse(ImpulseType::SaltPepper);
    let out = mindx_denoise_with(&noisy, 2.0, &params, ImpulseType::SaltPepper, &lut, None).unwrap();
    let p_noisy = psnr(&clean, &noisy, 20.0).unwrap();
    let p_amf = psnr(&clean, &amf(&noisy, &AmfParams::default()).unwrap(), 20.0).unwrap();
    let p_out = psnr(&clean, &out.image, 20.0).unwrap();
    check(
        p_out - p_noisy >= 12.0 && p_out >= p_amf + 2.0,
        format!("noisy {p_noisy:.2} dB, AMF {p_amf:.2} dB, MindX-TV {p_out:.2} dB"),
    )
}

fn noisy_band() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, name) in ["camera", "moon"].iter().enumerate() {
        let clean = natural_crop(name, 128, 20.0);
        let (noisy, _) = corrupt(&clean, &spec(ImpulseType::SaltPepper, 20 + i as u64)).unwrap();
        let p = psnr(&clean, &noisy, 20.0).unwrap();
        ok &= (6.0..=10.0).contains(&p);
        parts.push(format!("{name}: {p:.2} dB"));
    }
    check(ok, parts.join(", "))
}

fn determinism() -> Outcome {
    let config = ExperimentConfig::from_toml(
        r#"
schema_version = 1
images = ["builtin:shapes", "builtin:camera"]
experiment = "peak-sweep"
grid = [5.0, 20.0]
methods = ["noisy", "amf", "acwmf", "gat-denoise", "mindx-tv", "mindx-tv-plug"]
seed = 2024
crop = 48
"#,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let base = dir.path().join(format!("run{run}"));
        let table = run_experiment(&config).unwrap();
        table.write(&base, 0, 0).unwrap();
        bytes.push(std::fs::read(base.with_extension("csv")).unwrap());
    }
    let text = String::from_utf8_lossy(&bytes[0]);
    let fails = text.matches("FAIL").count();
    check(
        bytes[0] == bytes[1] && fails == 0,
        format!("{} CSV lines, identical: {}, failed cells: {fails}", text.lines().count(), bytes[0] == bytes[1]),
    )
}

fn prox_suite() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(10);
    let field = |rng: &mut ChaCha20Rng, w: usize, h: usize, s: f64| {
        let gx = (0..w * h).map(|_| rng.random_range(-s..s)).collect();
        let gy = (0..w * h).map(|_| rng.random_range(-s..s)).collect();
        GradField::new(w, h, gx, gy).unwrap()
    };

    let mut moreau: f64 = 0.0;
    for _ in 0..50 {
        let t = field(&mut rng, 7, 5, 4.0);
        let g = TvPrior { lambda1: rng.random_range(0.01..3.0) };
        let rho = rng.random_range(0.05..20.0);
        let conj = prox_conjugate(&g, &t, rho).unwrap();
        let direct = g.prox(&t.scaled(1.0 / rho), 1.0 / rho).unwrap();
        let rebuilt = conj.add_scaled(rho, &direct);
        for i in 0..t.gx.len() {
            moreau = moreau
                .max((rebuilt.gx[i] - t.gx[i]).abs())
                .max((rebuilt.gy[i] - t.gy[i]).abs());
        }
    }

    let mut firm_ok = true;
    for _ in 0..1000 {
        let a = field(&mut rng, 3, 3, 3.0);
        let b = field(&mut rng, 3, 3, 3.0);
        let (lam, rho) = (rng.random_range(0.01..2.0), rng.random_range(0.1..5.0));
        let pa = prox_tv_dual_shrink(&a, lam, rho);
        let pb = prox_tv_dual_shrink(&b, lam, rho);
        let d = pa.add_scaled(-1.0, &pb);
        let lhs = d.dot(&d);
        let rhs = d.dot(&a.add_scaled(-1.0, &b));
        firm_ok &= lhs <= rhs + 1e-12 * (1.0 + rhs.abs());
    }

    let mut foc: f64 = 0.0;
    for _ in 0..50 {
        let t = Image::from_fn(6, 6, 10.0, |_, _| rng.random_range(-5.0..15.0)).unwrap();
        let y = Image::from_fn(6, 6, 10.0, |_, _| rng.random_range(0.0..10.0)).unwrap();
        let mask = PixelMask::new(6, 6, (0..36).map(|_| rng.random_bool(0.6)).collect()).unwrap();
        let tau = rng.random_range(0.01..10.0);
        let w = prox_data(&t, &y, &mask, tau).unwrap();
        for i in 0..36 {
            let (wi, ti, yi) = (w.data()[i], t.data()[i], y.data()[i]);
            let r = if mask.bits()[i] { 2.0 * tau * (wi - yi) + (wi - ti) } else { wi - ti };
            foc = foc.max(r.abs());
        }
    }

    let mut constant: f64 = 0.0;
    let img = Image::filled(20, 17, 6.25, 10.0).unwrap();
    for d in [
        DenoiserSpec::identity(),
        DenoiserSpec::gaussian_blur(1.5),
        DenoiserSpec::patch_transform(1.0),
        DenoiserSpec::patch_transform(3.0),
    ] {
        let out = denoise(&img, &d).unwrap();
        constant = constant.max(out.data().iter().map(|v| (v - 6.25).abs()).fold(0.0, f64::max));
    }

    check(
        moreau <= 1e-12 && firm_ok && foc <= 1e-10 && constant <= 1e-9,
        format!("Moreau {moreau:.1e}, firm nonexpansive {firm_ok}, data FOC {foc:.1e}, constants {constant:.1e}"),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 GAT variance stabilization", gat_variance),
        ("2 exact unbiased inverse", inverse_bias),
        ("3 z-step enumeration", z_step_enumeration),
        ("4 adjoint identity", adjoint_identity),
        ("5 primal-dual correctness", cp_correctness),
        ("6 outer-loop convergence", outer_convergence),
        ("7 end-to-end gain", end_to_end_gain),
        ("8 noisy-input band", noisy_band),
        ("9 determinism", determinism),
        ("10 prox properties", prox_suite),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS criterion {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {d}");
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
