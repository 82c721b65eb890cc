//! Acceptance suite: one line per criterion, then a single verdict.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use uavrel_core::allocation::plan_sample;
use uavrel_core::chi2::{chi2_cdf, chi2_isf, chi2_sf, nc_chi2_cdf};
use uavrel_core::dem::DemGrid;
use uavrel_core::events::{enumerate_failure_events, enumerate_observation_events, fill_priors};
use uavrel_core::geometry::{build_geometry, error_stats, Axis, DofConvention};
use uavrel_core::hazard::{analyze, identify, segment};
use uavrel_core::mde::{evaluate_samples, predict_map, slope_of, worst_slope, PointStatus, ReliabilityMap};
use uavrel_core::monte_carlo::{ks_distance, run_trials, ConditionSampling, McConfig, Truth, WorstCaseFault};
use uavrel_core::propagation::{build_table, sample_row, ConditionProbs, PairProbs, PropagationTable};
use uavrel_core::scenario::{synth_dem, Scenario, SynthDemSpec, TerrainKind};
use uavrel_core::twr::clock_noise_sigma;
use uavrel_core::Point3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn flat_dem(s: &Scenario) -> DemGrid {
    synth_dem(&SynthDemSpec::for_scenario(TerrainKind::Flat { height: 0.0 }, s, 10.0)).unwrap()
}

fn hills_dem(s: &Scenario, max_height: f64) -> DemGrid {
    let kind = TerrainKind::GaussianHills { count: 12, max_height, min_sigma: 30.0, max_sigma: 90.0 };
    let mut spec = SynthDemSpec::for_scenario(kind, s, 10.0);
    spec.seed = 17;
    synth_dem(&spec).unwrap()
}

fn valley_dem(s: &Scenario) -> DemGrid {
    let kind = TerrainKind::Valley { floor_width: 300.0, ridge_height: 60.0, ridge_width: 200.0, axis_deg: 90.0 };
    synth_dem(&SynthDemSpec::for_scenario(kind, s, 10.0)).unwrap()
}

fn random_probs(rng: &mut ChaCha8Rng, k: usize) -> Vec<PairProbs> {
    (0..k)
        .map(|_| {
            let w: [f64; 3] = [rng.random_range(0.0..1.0), rng.random_range(0.0..0.3), rng.random_range(0.0..0.3)];
            let total: f64 = w.iter().sum();
            let cond = ConditionProbs { p_los: w[0] / total, p_nlos: w[1] / total, p_block: w[2] / total };
            PairProbs::from_conditions(cond, 10f64.powf(rng.random_range(-6.0..-3.0)), 0.0, 400.0)
        })
        .collect()
}

fn c1_sigma_c() -> Verdict {
    let s = Scenario::default();
    let sigma = clock_noise_sigma(&s.twr, s.channel.c);
    verdict((sigma - 2.498).abs() <= 1e-3, format!("sigma_C = {sigma:.6} m"))
}

fn c2_propagation() -> Verdict {
    let mut s = Scenario::default();
    let dem = hills_dem(&s, 40.0);
    let mut prev: Option<PropagationTable> = None;
    let mut worst_sum = 0.0f64;
    let mut violations = 0usize;
    let mut pairs = 0usize;
    for h in (50..=300).step_by(10) {
        s.h_b = h as f64;
        let table = build_table(&dem, &s).unwrap();
        for m in 0..table.num_samples() {
            for k in 0..table.num_sps() {
                let p = table.get(k, m);
                worst_sum = worst_sum.max((p.p_los + p.p_nlos + p.p_block - 1.0).abs());
                if let Some(prev) = &prev {
                    pairs += 1;
                    if p.p_los < prev.get(k, m).p_los {
                        violations += 1;
                    }
                }
            }
        }
        prev = Some(table);
    }
    verdict(
        worst_sum <= 1e-12 && violations == 0,
        format!("max |sum - 1| = {worst_sum:.1e}; p_los decreases in {violations} of {pairs} altitude steps"),
    )
}

fn c3_chi2() -> Verdict {
    let mut worst = 0.0f64;
    for dof in 1..=12 {
        for i in 0..=40 {
            let alpha = 10f64.powf(-6.0 + i as f64 * (6.0 + 0.5f64.log10()) / 40.0);
            let x = chi2_isf(alpha, dof).unwrap();
            worst = worst.max((chi2_sf(x, dof) - alpha).abs() / alpha);
        }
    }
    let (x, lambda, n) = (7.8147, 10.0f64, 1_000_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let shift = lambda.sqrt();
    let hits = (0..n)
        .filter(|_| {
            let z: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            (z[0] + shift).powi(2) + z[1] * z[1] + z[2] * z[2] <= x
        })
        .count();
    let mc = hits as f64 / n as f64;
    let exact = nc_chi2_cdf(x, 3, lambda);
    let band = 3.0 * (mc * (1.0 - mc) / n as f64).sqrt();
    verdict(
        worst <= 1e-9 && (exact - mc).abs() <= band,
        format!("worst relative isf/sf round trip {worst:.1e}; ncx2 cdf {exact:.5} vs MC {mc:.5} (band {band:.5})"),
    )
}

fn c4_null_distribution() -> Verdict {
    let mut s = Scenario::default();
    s.sp_angles_deg = vec![0.0, 50.0, 130.0, 170.0, 250.0, 300.0];
    let dem = flat_dem(&s);
    let probs = sample_row(&dem, &s, &s.sp_positions(), s.center).unwrap();
    let plan = plan_sample(0, &probs, s.requirements.p_fa, s.requirements.p_md, s.dof_convention).unwrap();
    let cfg = McConfig {
        trials: 20_000,
        seed: 4,
        truth: Truth::Point { x: s.center.x, y: s.center.y },
        conditions: ConditionSampling::Forced { visible_mask: 0b11_1111, nlos_mask: 0 },
        internal_faults: false,
        record_trials: true,
        ..Default::default()
    };
    let report = run_trials(&s, &dem, &plan, &cfg).unwrap();
    let records = report.trial_records.unwrap();
    let t: Vec<f64> = records.iter().map(|r| r.t_ls).collect();
    let ks3 = ks_distance(&t, |x| chi2_cdf(x, 3));
    let ks4 = ks_distance(&t, |x| chi2_cdf(x, 4));
    let ex: Vec<f64> = records.iter().map(|r| r.err_x).collect();
    let mean = ex.iter().sum::<f64>() / ex.len() as f64;
    let var = ex.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (ex.len() - 1) as f64;
    let user = s.center.with_z(s.device_height);
    let (vx, _) = error_stats(&build_geometry(&s.sp_positions(), user, s.sigma_c()).unwrap());
    let ratio = var / vx;
    verdict(
        ks3 < 0.015 && (ratio - 1.0).abs() <= 0.05,
        format!(
            "KS vs chi2(3) = {ks3:.4} (needs < 0.015); audit KS vs chi2(4) = {ks4:.4}; var(eps_x)/s_x's_x = {ratio:.4}"
        ),
    )
}

fn c5_slope_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_attain = 0.0f64;
    let mut geometries = 0;
    while geometries < 100 {
        let k = rng.random_range(5..=8);
        let sps: Vec<Point3> = (0..k)
            .map(|_| {
                let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Point3::new(400.0 * a.cos(), 400.0 * a.sin(), 100.0)
            })
            .collect();
        let user = Point3::new(rng.random_range(-150.0..150.0), rng.random_range(-150.0..150.0), 1.5);
        let Ok(geom) = build_geometry(&sps, user, 2.5) else { continue };
        let nf = rng.random_range(1..=k - 3);
        let mut faults: Vec<usize> = (0..k).collect();
        for i in 0..nf {
            let j = rng.random_range(i..k);
            faults.swap(i, j);
        }
        faults.truncate(nf);
        let axis = if rng.random_bool(0.5) { Axis::X } else { Axis::Y };
        let best = worst_slope(&geom, &faults, axis).unwrap();
        if best.unbounded {
            continue;
        }
        geometries += 1;
        // fault-restricted projector and extraction as plain arrays
        let s = match axis {
            Axis::X => &geom.s_x,
            Axis::Y => &geom.s_y,
        };
        let m: Vec<Vec<f64>> = faults.iter().map(|&i| faults.iter().map(|&j| geom.p_r[(i, j)]).collect()).collect();
        let v: Vec<f64> = faults.iter().map(|&i| s[i]).collect();
        for _ in 0..100_000 {
            let z: Vec<f64> = (0..nf).map(|_| StandardNormal.sample(&mut rng)).collect();
            let num: f64 = v.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>().powi(2);
            let mut den = 0.0;
            for i in 0..nf {
                for j in 0..nf {
                    den += z[i] * m[i][j] * z[j];
                }
            }
            worst_excess = worst_excess.max(num / den / best.slope - 1.0);
        }
        let attained = slope_of(&geom, &best.direction, axis).unwrap();
        worst_attain = worst_attain.max((attained / best.slope - 1.0).abs());
    }
    verdict(
        worst_excess <= 1e-9 && worst_attain <= 1e-9,
        format!("max random/optimal - 1 = {worst_excess:.2e}; |slope(b*)/s* - 1| = {worst_attain:.1e}"),
    )
}

fn detection_run(convention: DofConvention, fault: bool) -> (f64, f64, usize) {
    let mut s = Scenario::default();
    s.dof_convention = convention;
    let dem = flat_dem(&s);
    let probs = sample_row(&dem, &s, &s.sp_positions(), s.center).unwrap();
    let plan = plan_sample(0, &probs, s.requirements.p_fa, s.requirements.p_md, s.dof_convention).unwrap();
    let cfg = McConfig {
        trials: 20_000,
        seed: if fault { 61 } else { 62 },
        truth: Truth::Point { x: 30.0, y: -20.0 },
        conditions: ConditionSampling::Forced { visible_mask: 0xff, nlos_mask: 0 },
        internal_faults: false,
        conditional_fa: Some(1e-2),
        worst_case: fault.then(|| WorstCaseFault { fault_sps: vec![2], axis: Axis::X, md_budget: 0.05 }),
        ..Default::default()
    };
    let r = run_trials(&s, &dem, &plan, &cfg).unwrap();
    let rate = if fault { r.missed_detection.rate } else { r.false_alarm.rate };
    let bias = r.injected.map_or(0.0, |b| b[2]);
    (rate, bias, r.trials)
}

fn c6_detection() -> Verdict {
    let (miss, bias, n) = detection_run(DofConvention::ResidualRank, true);
    let (alarm, _, _) = detection_run(DofConvention::ResidualRank, false);
    let (a3_alarm, _, _) = detection_run(DofConvention::ExtraUnknown, false);
    let band = |p: f64| 3.0 * (p * (1.0 - p) / n as f64).sqrt();
    verdict(
        (miss - 0.05).abs() <= band(0.05) && (alarm - 0.01).abs() <= band(0.01),
        format!(
            "miss {miss:.4} (0.05 +- {:.4}, injected {bias:.2} m); null alarm {alarm:.4} (0.01 +- {:.4}); \
             with dof A-3 the null alarm is {a3_alarm:.4}",
            band(0.05),
            band(0.01)
        ),
    )
}

fn c7_conservation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_fa = 0.0f64;
    let mut worst_md = 0.0f64;
    let mut checked = 0;
    while checked < 1000 {
        let k = rng.random_range(4..=8);
        let probs = random_probs(&mut rng, k);
        let p_fa = 10f64.powf(rng.random_range(-5.0..-1.0));
        let p_md = 10f64.powf(rng.random_range(-7.0..-2.0));
        let plan = plan_sample(0, &probs, p_fa, p_md, DofConvention::ResidualRank).unwrap();
        if plan.infeasible || plan.events.is_empty() {
            continue;
        }
        checked += 1;
        worst_fa = worst_fa.max((plan.fa_total() - p_fa).abs());
        let budgets: f64 = plan.events.iter().map(|e| e.md.event_budget).sum();
        let mass: f64 = plan.events.iter().map(|e| e.md.failure_mass).sum();
        if mass > 0.0 {
            worst_md = worst_md.max((budgets - p_md).abs());
        }
        for e in &plan.events {
            let kept: f64 = e.md.considered.iter().map(|f| f.conditional_md * f.event.prior).sum();
            let err = if e.md.considered.is_empty() {
                // whole failure mass excluded, within the event's budget
                (e.md.excluded_mass - e.md.failure_mass).abs() + (e.md.excluded_mass - e.md.event_budget).max(0.0)
            } else {
                (kept + e.md.excluded_mass - e.md.event_budget).abs()
            };
            worst_md = worst_md.max(err);
        }
    }
    verdict(worst_fa <= 1e-12 && worst_md <= 1e-12, format!("FA residual {worst_fa:.1e}; MD residual {worst_md:.1e}"))
}

fn c8_partition() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_total = 0.0f64;
    let mut worst_split = 0.0f64;
    for _ in 0..50 {
        let probs = random_probs(&mut rng, 8);
        let mut events = enumerate_observation_events(8).unwrap();
        fill_priors(&mut events, &probs);
        worst_total = worst_total.max((events.iter().map(|e| e.prior).sum::<f64>() - 1.0).abs());
        let table = PropagationTable::from_entries(8, 1, probs).unwrap();
        for e in &events {
            let fs = enumerate_failure_events(e, &table, 0);
            let split = e.normal_prior + fs.iter().map(|f| f.prior).sum::<f64>();
            worst_split = worst_split.max((split - e.prior).abs());
        }
    }
    verdict(
        worst_total <= 1e-12 && worst_split <= 1e-12,
        format!("|sum of priors - 1| = {worst_total:.1e}; |normal + failures - prior| = {worst_split:.1e}"),
    )
}

fn c9_pipeline(valley_map: &mut Option<ReliabilityMap>) -> Verdict {
    let s = Scenario::default();
    let dem = valley_dem(&s);
    let start = Instant::now();
    let map = predict_map(&s, &dem).unwrap();
    let full = start.elapsed();
    let complete = map.points.len() == 1257 && map.num_sps == 8;
    let mut etas = Vec::new();
    for step in 0..=8 {
        let deg = 5.0 * step as f64;
        etas.push((deg, predict_map(&s.with_rotation(deg), &dem).unwrap().eta_star));
    }
    let finite = etas.iter().all(|(_, e)| e.is_finite());
    let best = etas.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
    let worst = etas.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
    let spread = (worst - best) / best;
    let listing: Vec<String> = etas.iter().map(|(d, e)| format!("{d:.0}:{e:.2}")).collect();
    *valley_map = Some(map);
    verdict(
        complete && finite && spread >= 0.10,
        format!(
            "M = 1257 map in {:.2} s; eta* by rotation [{}]; spread {:.1}%",
            full.as_secs_f64(),
            listing.join(" "),
            100.0 * spread
        ),
    )
}

fn flood_fill_components(grid: &[Vec<bool>]) -> Vec<Vec<(i64, i64)>> {
    let (h, w) = (grid.len() as i64, grid[0].len() as i64);
    let mut seen = vec![vec![false; w as usize]; h as usize];
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !grid[r as usize][c as usize] || seen[r as usize][c as usize] {
                continue;
            }
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([(c, r)]);
            seen[r as usize][c as usize] = true;
            while let Some((x, y)) = queue.pop_front() {
                comp.push((x, y));
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx >= 0 && ny >= 0 && nx < w && ny < h {
                            let (ux, uy) = (nx as usize, ny as usize);
                            if grid[uy][ux] && !seen[uy][ux] {
                                seen[uy][ux] = true;
                                queue.push_back((nx, ny));
                            }
                        }
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
    }
    out.sort();
    out
}

fn c10_segmentation(valley_map: Option<&ReliabilityMap>) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut mismatches = 0;
    for _ in 0..100 {
        let density = rng.random_range(0.05..0.75);
        let grid: Vec<Vec<bool>> = (0..50).map(|_| (0..50).map(|_| rng.random_bool(density)).collect()).collect();
        let cells: Vec<(i64, i64)> = (0..50i64)
            .flat_map(|r| (0..50i64).map(move |c| (c, r)))
            .filter(|&(c, r)| grid[r as usize][c as usize])
            .collect();
        let mut ours: Vec<Vec<(i64, i64)>> = segment(&cells)
            .into_iter()
            .map(|g| {
                let mut v: Vec<(i64, i64)> = g.into_iter().map(|i| cells[i]).collect();
                v.sort();
                v
            })
            .collect();
        ours.sort();
        mismatches += (ours != flood_fill_components(&grid)) as usize;
    }
    let mut monotone = true;
    if let Some(map) = valley_map {
        let mut prev = vec![true; map.points.len()];
        for i in 0..=80 {
            let flags = identify(&map.points, 0.5 * i as f64);
            // a point never re-enters the hazardous set as the threshold rises
            monotone &= flags.iter().zip(&prev).all(|(now, before)| !now || *before);
            prev = flags;
        }
    } else {
        monotone = false;
    }
    verdict(
        mismatches == 0 && monotone,
        format!("{mismatches} of 100 grids differ from flood fill; thresholding monotone: {monotone}"),
    )
}

fn c11_wall_vote() -> Verdict {
    let mut s = Scenario::default();
    // reflections too weak to detect: the occluded SP is blocked rather than NLoS
    s.channel.snr_min = 80.0;
    s.requirements.eta_t = 1.0;
    s.requirements.eta_req = 2.0;
    let occluded = 2;
    let kind = TerrainKind::Wall { height: 150.0, thickness: 40.0, length: 700.0, distance: 330.0, angle_deg: 90.0 };
    let dem = synth_dem(&SynthDemSpec::for_scenario(kind, &s, 10.0)).unwrap();
    let outcomes = evaluate_samples(&s, &dem, None).unwrap();
    let min_block = outcomes.iter().map(|o| o.probs[occluded].p_block).fold(1.0, f64::min);
    let map = ReliabilityMap::from_points(&s, outcomes.into_iter().map(|o| o.point).collect());
    let report = analyze(&s, &dem, &map).unwrap();
    let mut ok = !report.areas.is_empty() && min_block > 0.999;
    let mut worst_sum = 0.0f64;
    for a in &report.areas {
        for (w, u) in [(a.weight_sum_x, &a.binary.u_x), (a.weight_sum_y, &a.binary.u_y)] {
            if w > 0.0 {
                worst_sum = worst_sum.max((w - 1.0).abs());
                ok &= u[occluded] == 1.0;
            }
        }
    }
    ok &= worst_sum <= 1e-12;
    verdict(
        ok,
        format!(
            "{} areas over {} hazardous points; min p_block(SP{}) = {min_block:.6}; |weight sum - 1| = {worst_sum:.1e}",
            report.areas.len(),
            report.hazardous_points,
            occluded + 1
        ),
    )
}

fn c12_linear_scaling() -> Verdict {
    let s = Scenario::default();
    let dem = hills_dem(&s, 60.0);
    let base = predict_map(&s, &dem).unwrap();
    let mut doubled = s.clone();
    doubled.twr.tau_d *= 2.0;
    let twice = predict_map(&doubled, &dem).unwrap();
    let sigma_ratio = doubled.sigma_c() / s.sigma_c();
    let mut worst = 0.0f64;
    let mut compared = 0;
    let mut status_changes = 0;
    for (a, b) in base.points.iter().zip(&twice.points) {
        status_changes += (a.status != b.status) as usize;
        for (x, y) in [(a.eta_x, b.eta_x), (a.eta_y, b.eta_y)] {
            if x.is_finite() && x > 0.0 {
                compared += 1;
                worst = worst.max((y / x - 2.0).abs() / 2.0);
            }
        }
    }
    let ok = sigma_ratio == 2.0 && worst <= 1e-9 && status_changes == 0 && compared > 0;
    let failure_free = base.count(PointStatus::FailureFree);
    verdict(
        ok,
        format!(
            "{compared} finite MDEs, worst relative deviation from 2x {worst:.1e}; {status_changes} status changes; \
             {failure_free} failure-free points"
        ),
    )
}

#[test]
fn acceptance() {
    let mut valley_map = None;
    let runs: Vec<(u32, &str, Duration, Box<dyn FnOnce() -> Verdict + '_>)> = vec![
        (1, "clock noise sigma", Duration::from_secs(1), Box::new(c1_sigma_c)),
        (2, "propagation sums and altitude monotonicity", Duration::from_secs(5), Box::new(c2_propagation)),
        (3, "chi-square round trips and noncentral MC", Duration::from_secs(60), Box::new(c3_chi2)),
        (4, "null distribution of the test statistic", Duration::from_secs(60), Box::new(c4_null_distribution)),
        (5, "worst-case slope oracle", Duration::from_secs(120), Box::new(c5_slope_oracle)),
        (6, "MDE detection oracle", Duration::from_secs(300), Box::new(c6_detection)),
        (7, "allocation conservation", Duration::from_secs(10), Box::new(c7_conservation)),
        (8, "event-space partition", Duration::from_secs(10), Box::new(c8_partition)),
        (9, "valley pipeline and rotation sweep", Duration::from_secs(300), Box::new(|| c9_pipeline(&mut valley_map))),
    ];
    let mut lines = Vec::new();
    let mut all = true;
    let mut record = |id: u32, name: &str, limit: Duration, run: Box<dyn FnOnce() -> Verdict + '_>| {
        let start = Instant::now();
        let v = run();
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= limit;
        all &= pass;
        let line = format!(
            "criterion {id:>2} {} [{:.2} s / {} s] {name}: {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            v.detail
        );
        println!("{line}");
        lines.push(line);
    };
    for (id, name, limit, run) in runs {
        record(id, name, limit, run);
    }
    let map = valley_map.take();
    record(10, "segmentation and thresholding", Duration::from_secs(10), Box::new(|| c10_segmentation(map.as_ref())));
    record(11, "wall voting fixture", Duration::from_secs(30), Box::new(c11_wall_vote));
    record(12, "linear scaling with sigma_C", Duration::from_secs(60), Box::new(c12_linear_scaling));
    assert!(all, "failed criteria:\n{}", lines.iter().filter(|l| l.contains("FAIL")).cloned().collect::<Vec<_>>().join("\n"));
}
