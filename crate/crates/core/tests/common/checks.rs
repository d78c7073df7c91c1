//! Property and oracle checks shared by the focused integration tests and
//! the acceptance target. Each returns a one-line summary on success and the
//! first violation on failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skipgs::gating::{
    calibrate_rho_min, cumulative_ratio, deviation_score, skip_test, update_ema, Gate, GatingConfig,
    GatingState, ViewLossTable,
};
use skipgs::losses::{combined_loss, l1_loss, ssim, LossConfig};
use skipgs::renderer::{logit, render, render_backward, Camera, Gaussian3D, SceneModel};
use skipgs::Image;

use super::*;

pub type Check = Result<String, String>;

/// Random non-negative loss stream over `views` views: per-view base levels
/// spanning two decades, a slow drift, multiplicative noise and occasional
/// spikes. Loosely mimics per-view training losses without a renderer.
pub fn loss_stream(rng: &mut ChaCha8Rng, views: u32, steps: usize, lo: f64) -> Vec<(u32, f64)> {
    let base: Vec<f64> = (0..views).map(|_| lo * 10f64.powf(rng.gen_range(0.0..2.0))).collect();
    let drift: f64 = rng.gen_range(-1.5..0.5);
    let noise: f64 = rng.gen_range(0.0..0.3);
    (0..steps)
        .map(|i| {
            let v = rng.gen_range(0..views);
            let trend = (drift * i as f64 / steps as f64).exp();
            let jitter = (noise * rng.gen_range(-1.0..1.0)).exp();
            let spike = if rng.gen_bool(0.02) { rng.gen_range(1.0..4.0) } else { 1.0 };
            (v, (base[v as usize] * trend * jitter * spike).max(lo))
        })
        .collect()
}

/// Gate invariants over random loss streams: warmup totality, the budget
/// trajectory bound `b/t ≥ ρ_min·(1 − 1/t)`, the pre-decision floor on every
/// skip, and the unconditional EMA recurrence.
pub fn gating_law_streams(streams: usize, views: u32, steps: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut skips, mut forced) = (0u64, 0u64);
    for s in 0..streams {
        let cfg = GatingConfig {
            warmup_len: rng.gen_range(1..=400),
            ema_decay: rng.gen_range(0.5..0.99),
            eps: 1e-8,
            budget_floor: rng.gen_range(0.0..=1.0),
            budget_enabled: true,
        };
        let stream = loss_stream(&mut rng, views, steps, 1e-4);
        let mut gate = Gate::new(cfg).map_err(|e| e.to_string())?;
        let mut shadow: std::collections::HashMap<u32, f64> = Default::default();
        for (i, &(view, loss)) in stream.iter().enumerate() {
            let t = i as u64 + 1;
            let d = gate.step(t, view, loss).map_err(|e| format!("stream {s} t {t}: {e}"))?;
            if t <= cfg.warmup_len && !(d.execute_backward && d.forced_warmup) {
                return Err(format!("stream {s} t {t}: warmup iteration did not execute"));
            }
            if d.execute_backward != (d.proposed || d.forced_warmup || d.forced_budget) {
                return Err(format!("stream {s} t {t}: inconsistent decision {d:?}"));
            }
            if !d.execute_backward {
                skips += 1;
                let rho_min = d.rho_min.ok_or(format!("stream {s} t {t}: skip before calibration"))?;
                if d.rho_cum_before < rho_min {
                    return Err(format!(
                        "stream {s} t {t}: skipped with rho_cum {} < rho_min {rho_min}",
                        d.rho_cum_before
                    ));
                }
            }
            forced += d.forced_budget as u64;
            let expect = update_ema(shadow.get(&view).copied(), loss, cfg.ema_decay).unwrap();
            shadow.insert(view, expect);
            if gate.state.table.get(view) != Some(expect) {
                return Err(format!("stream {s} t {t}: EMA not updated by the recurrence"));
            }
            let rho_min = gate.state.rho_min.unwrap_or(1.0);
            let ratio = gate.state.b as f64 / t as f64;
            if ratio < rho_min * (1.0 - 1.0 / t as f64) - 1e-12 {
                return Err(format!("stream {s} t {t}: b/t {ratio} below rho_min {rho_min} (1 - 1/t)"));
            }
        }
    }
    Ok(format!(
        "{streams} streams x {steps} steps over {views} views, {skips} skips, {forced} budget overrides"
    ))
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-15
}

fn gate_at(rho_min: f64, b: u64, t: u64) -> Gate {
    let mut table = ViewLossTable::default();
    table.set(0, 1.0);
    let mut gate = Gate::new(GatingConfig { warmup_len: 2, ..Default::default() }).unwrap();
    gate.state = GatingState {
        table,
        t,
        b,
        rho_min: Some(rho_min),
        warmup_eligible: 1,
        warmup_would_backward: 0,
        calibrated: true,
    };
    gate
}

/// Worked examples for the EMA, score, skip test, cumulative ratio, budget
/// calibration and the combined decision.
pub fn gating_examples() -> Check {
    let mut failed = Vec::new();
    let mut n = 0;
    let mut expect = |name: &str, ok: bool| {
        n += 1;
        if !ok {
            failed.push(name.to_string());
        }
    };
    expect("ema 0.4 -> 0.41", close(update_ema(Some(0.4), 0.6, 0.95).unwrap(), 0.41));
    expect("ema fixed point", [0.0, 0.5, 0.9, 0.999].iter().all(|&d| update_ema(Some(0.3), 0.3, d).unwrap() == 0.3));
    expect("ema init", update_ema(None, 0.7, 0.95).unwrap() == 0.7);
    expect("score 1.2", (deviation_score(0.6, Some(0.5), 1e-8).unwrap() - 1.2).abs() < 1e-7);
    expect("score first sight", deviation_score(0.5, None, 1e-8).unwrap() == f64::INFINITY);
    expect("score 0/eps", deviation_score(0.0, Some(0.0), 1e-8).unwrap() == 0.0);
    expect("skip test 1.2", skip_test(1.2));
    expect("skip test strict at 1", !skip_test(1.0));
    expect("skip test inf", skip_test(f64::INFINITY));
    expect("ratio 0/1", cumulative_ratio(0, 1) == 0.0);
    expect("ratio 7 of 10", close(cumulative_ratio(7, 11), 0.7));
    expect("ratio 4 of 4", cumulative_ratio(4, 5) == 1.0);
    expect("calibrate 0.4", close(calibrate_rho_min(0.4, 0.5).unwrap(), 0.7));
    expect("calibrate 0", calibrate_rho_min(0.0, 0.5).unwrap() == 0.5);
    expect("calibrate 1", calibrate_rho_min(1.0, 0.5).unwrap() == 1.0);

    let mut warm = Gate::new(GatingConfig { warmup_len: 5, ..Default::default() }).unwrap();
    warm.step(1, 0, 0.5).unwrap();
    warm.step(2, 0, 0.5).unwrap();
    let d = warm.step(3, 0, 0.1).unwrap();
    expect("warmup forces", d.execute_backward && d.forced_warmup && !d.proposed);

    let d = gate_at(0.7, 16, 21).step(21, 0, 0.9).unwrap();
    expect("skip allowed", close(d.rho_cum_before, 0.8) && !d.execute_backward && !d.forced_budget);
    let d = gate_at(0.7, 13, 21).step(21, 0, 0.9).unwrap();
    expect("budget forces", close(d.rho_cum_before, 0.65) && d.execute_backward && d.forced_budget);

    if failed.is_empty() {
        Ok(format!("{n} worked examples exact"))
    } else {
        Err(format!("failed examples: {}", failed.join(", ")))
    }
}

fn decisions(cfg: GatingConfig, stream: &[(u32, f64)], scale: f64) -> (Vec<bool>, f64) {
    let mut gate = Gate::new(cfg).unwrap();
    let mut margin = f64::INFINITY;
    let g = stream
        .iter()
        .enumerate()
        .map(|(i, &(v, l))| {
            let d = gate.step(i as u64 + 1, v, l * scale).unwrap();
            if d.score.is_finite() {
                margin = margin.min((d.score - 1.0).abs());
            }
            d.execute_backward
        })
        .collect();
    (g, margin)
}

/// Decision sequences are unchanged when every loss is multiplied by `c`.
/// With `eps > 0` the claim is conditional on every score staying `1e-4`
/// away from the threshold; streams violating that are counted and skipped.
pub fn scale_invariance(eps: f64, streams: usize, steps: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut compared, mut near_ties) = (0, 0);
    for s in 0..streams {
        let cfg = GatingConfig {
            warmup_len: rng.gen_range(1..=200),
            ema_decay: rng.gen_range(0.5..0.99),
            eps,
            budget_floor: rng.gen_range(0.0..=1.0),
            budget_enabled: rng.gen_bool(0.5),
        };
        let stream = loss_stream(&mut rng, 50, steps, 1.0);
        let (reference, margin) = decisions(cfg, &stream, 1.0);
        if eps > 0.0 && margin <= 1e-4 {
            near_ties += 1;
            continue;
        }
        for c in [1e-3, 1e3] {
            if decisions(cfg, &stream, c).0 != reference {
                return Err(format!("stream {s}: decisions changed under scale {c} (eps {eps})"));
            }
        }
        compared += 1;
    }
    if compared * 4 < streams {
        return Err(format!("only {compared} of {streams} streams cleared the margin"));
    }
    Ok(format!(
        "eps {eps:e}: {compared} streams identical under c in {{1e-3, 1, 1e3}}, {near_ties} near-tie streams set aside"
    ))
}

/// Worst relative error of the analytic render gradient against central
/// differences, over `scenes` random smooth scenes of 5 Gaussians at 8x8.
pub fn renderer_gradcheck(scenes: u64, h: f64, tol: f64) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..scenes {
        let (scene, cam) = smooth_random_scene(seed, 5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        let weights = random_image(&mut rng, 8, 8, -1.0, 1.0);
        let out = render(&scene, &cam).map_err(|e| e.to_string())?;
        let grads = render_backward(&scene, &cam, &out, &weights).map_err(|e| e.to_string())?;
        let analytic: Vec<f64> = grads.params.iter().flatten().copied().collect();
        let bg = scene.background;
        let numeric = central_difference(
            |x| weighted_sum(&render(&unflatten_scene(x, bg), &cam).unwrap().image, &weights),
            &flatten_scene(&scene),
            h,
        );
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let (err, at) = max_relative_error(&analytic, &numeric, 1e-6 * scale);
        if err > tol {
            return Err(format!(
                "scene {seed} entry {at}: analytic {} numeric {} rel err {err:e}",
                analytic[at], numeric[at]
            ));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn as_image(x: &[f64], n: usize) -> Image {
    Image::from_data(n, n, x.to_vec())
}

/// Worst relative error of SSIM, L1 and combined-loss gradients on random
/// 16x16 images.
pub fn loss_gradcheck(h: f64, tol: f64) -> Result<f64, String> {
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    let mut check = |name: &str, analytic: Vec<f64>, numeric: Vec<f64>| -> Result<(), String> {
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let (err, at) = max_relative_error(&analytic, &numeric, 1e-6 * scale);
        if err > tol {
            return Err(format!("{name} entry {at}: rel err {err:e}"));
        }
        worst = worst.max(err);
        Ok(())
    };
    for seed in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = random_image(&mut rng, 16, 16, 0.0, 1.0);
        let target = random_image(&mut rng, 16, 16, 0.0, 1.0);
        let analytic = ssim(&pred, &target, &cfg).unwrap().grad.data;
        let numeric = central_difference(|x| ssim(&as_image(x, 16), &target, &cfg).unwrap().value, &pred.data, h);
        check(&format!("ssim seed {seed}"), analytic, numeric)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let pred = random_image(&mut rng, 16, 16, 0.0, 1.0);
    // |pred - target| stays away from the kink of |.| at 0.
    let mut target = pred.clone();
    for v in target.data.iter_mut() {
        *v += if rng.gen_bool(0.5) { 0.05 } else { -0.05 };
    }
    let analytic = l1_loss(&pred, &target).unwrap().grad.data;
    let numeric = central_difference(|x| l1_loss(&as_image(x, 16), &target).unwrap().value, &pred.data, h);
    check("l1", analytic, numeric)?;
    let analytic = combined_loss(&pred, &target, &cfg).unwrap().grad.data;
    let numeric = central_difference(
        |x| combined_loss(&as_image(x, 16), &target, &cfg).unwrap().value,
        &pred.data,
        h,
    );
    check("combined", analytic, numeric)?;
    Ok(worst)
}

/// Random scene of up to 60 Gaussians in front of a random camera, with a
/// wide spread of opacities so some pixels terminate early.
pub fn random_render_scene(seed: u64) -> (SceneModel, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=60);
    let az: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let eye = [3.0 * az.cos(), 3.0 * az.sin(), rng.gen_range(-1.0..1.0)];
    let size = [rng.gen_range(8..=40), rng.gen_range(8..=40)];
    let f = rng.gen_range(10.0..60.0);
    let cam = Camera::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0], [f, f], size, 0);
    let gaussians = (0..n)
        .map(|_| Gaussian3D {
            mu: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
            rot: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
            log_scale: std::array::from_fn(|_| rng.gen_range(0.02f64..0.6).ln()),
            opacity_logit: logit(rng.gen_range(0.01..0.999)),
            color: std::array::from_fn(|_| rng.gen_range(0.0..1.0)),
        })
        .collect();
    (SceneModel::new(gaussians, std::array::from_fn(|_| rng.gen_range(0.0..1.0))), cam)
}

/// `Σ α'T + T_final = 1` at every pixel of `renders` random renders.
pub fn compositing_conservation(renders: u64, tol: f64) -> Check {
    let mut worst = 0.0f64;
    let mut terminated = 0usize;
    for seed in 0..renders {
        let (scene, cam) = random_render_scene(seed);
        let out = render(&scene, &cam).map_err(|e| format!("render {seed}: {e}"))?;
        for (p, (w, t)) in out.weight_sum.iter().zip(&out.final_transmittance).enumerate() {
            let err = (w + t - 1.0).abs();
            if err > tol {
                return Err(format!("render {seed} pixel {p}: sum {w} + T {t} off by {err:e}"));
            }
            worst = worst.max(err);
            terminated += (*t < skipgs::renderer::TRANSMITTANCE_MIN) as usize;
        }
    }
    Ok(format!(
        "{renders} renders, worst |sum - 1| = {worst:e}, {terminated} early-terminated pixels"
    ))
}
