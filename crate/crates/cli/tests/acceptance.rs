//! End-to-end acceptance checks, run without the libtest harness so the
//! report is always printed: one PASS/FAIL line per criterion, and a
//! non-zero exit status if any criterion fails.

#[path = "../../core/tests/support/grid.rs"]
mod grid;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use coopnav::dlea::{
    self, final_estimate, solve_tentative, DistanceMeasurement, FixMap, PivotWeight, SolveStats,
    Subset,
};
use coopnav::geo::make_constellation;
use coopnav::netsim::{build_neighbor_graph, run_protocol, Observations, Protocol, RangingInput, RangingMode};
use coopnav::ranging::{
    build_system, double_difference, quantize, single_difference, synthesize_pseudorange,
    wls_baseline,
};
use coopnav::scenario::{apply_distance_error, apply_gps_error, generate_trial_inputs, ScenarioConfig, TrafficSnapshot};
use coopnav::{
    DistanceTable, NoiseModel, PseudorangeObservation, PseudorangeSet, RoadSpace, SolverOptions,
    TentativeEstimateSet, Vec2, VehicleId, WorldPoint,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn v(i: u32) -> VehicleId {
    VehicleId(i)
}

fn norm3(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn zero_noise_recovery() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let center = WorldPoint::on_road(250.0, 4.5);
        let k = make_constellation(6, seed, (15f64.to_radians(), 85f64.to_radians()), &center).unwrap();
        let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let pa = WorldPoint::on_road(rng.random_range(0.0..400.0), rng.random_range(0.0..9.0));
        let pb = WorldPoint::on_road(pa.x + 100.0 * heading.cos(), pa.y + 100.0 * heading.sin());
        let set = |id: u32, p: &WorldPoint| {
            let obs = k
                .satellites()
                .iter()
                .map(|s| {
                    let pr = synthesize_pseudorange(quantize(p.distance(&s.position)), 0.0, 0.0, 0.0).unwrap();
                    PseudorangeObservation::new(s.id, pr, 45.0).unwrap()
                })
                .collect();
            PseudorangeSet::new(v(id), 0.0, obs).unwrap()
        };
        let system = build_system(&set(1, &pa), &set(2, &pb), &pa, &pb, &k).unwrap();
        let est = wls_baseline(&system).unwrap().vector;
        let truth = pb.sub(&pa);
        worst = worst.max(norm3([est[0] - truth[0], est[1] - truth[1], est[2] - truth[2]]));
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(
        worst < 0.01 && elapsed < 1.0,
        format!("max error {:.3} mm over 100 geometries, {elapsed:.3} s", worst * 1e3),
    )
}

fn cancellation_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut draw = |lo: f64, hi: f64| quantize(rng.random_range(lo..hi));
        let ranges = [draw(2e7, 2.6e7), draw(2e7, 2.6e7), draw(2e7, 2.6e7), draw(2e7, 2.6e7)];
        let (t_a, t_b) = (draw(-1e3, 1e3), draw(-1e3, 1e3));
        let (x_i, x_j) = (draw(-50.0, 50.0), draw(-50.0, 50.0));
        let eps = [draw(-5.0, 5.0), draw(-5.0, 5.0), draw(-5.0, 5.0), draw(-5.0, 5.0)];
        let pr = |r: f64, t: f64, x: f64, e: f64| synthesize_pseudorange(r, t, x, e).unwrap();
        let sd = |r_a: f64, r_b: f64, ta: f64, tb: f64, x: f64, ea: f64, eb: f64| {
            single_difference(pr(r_a, ta, x, ea), pr(r_b, tb, x, eb))
        };
        let sd_i = sd(ranges[0], ranges[1], t_a, t_b, x_i, eps[0], eps[1]);
        let sd_j = sd(ranges[2], ranges[3], t_a, t_b, x_j, eps[2], eps[3]);
        if sd_i.to_bits() != sd(ranges[0], ranges[1], t_a, t_b, 0.0, eps[0], eps[1]).to_bits() {
            mismatches += 1;
        }
        let dd = double_difference(sd_i, sd_j);
        let dd_free = double_difference(
            sd(ranges[0], ranges[1], 0.0, 0.0, x_i, eps[0], eps[1]),
            sd(ranges[2], ranges[3], 0.0, 0.0, x_j, eps[2], eps[3]),
        );
        if dd.to_bits() != dd_free.to_bits() {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, format!("{mismatches} bit mismatches in 1000 draws"))
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let noise = NoiseModel::new(
            Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
            Vec2::new(rng.random_range(0.5..20.0), rng.random_range(0.5..20.0)),
        )
        .unwrap();
        let mut fixes = FixMap::new();
        let mut est = FixMap::new();
        for i in 1..=5 {
            let f = Vec2::new(rng.random_range(0.0..500.0), rng.random_range(-20.0..30.0));
            let off = Vec2::new(
                noise.stddev.x * rng.random_range(-5.0..5.0),
                noise.stddev.y * rng.random_range(-5.0..5.0),
            );
            fixes.insert(v(i), f);
            est.insert(v(i), f + noise.mean + off);
        }
        let g = dlea::objective_gradient(&est, &fixes, &noise).unwrap();
        for (id, p) in &est {
            for axis in 0..2 {
                let coord = if axis == 0 { p.x } else { p.y };
                let h = 1e-6 * coord.abs().max(1.0);
                let eval = |delta: f64| {
                    let mut e = est.clone();
                    let q = e.get_mut(id).unwrap();
                    if axis == 0 {
                        q.x += delta;
                    } else {
                        q.y += delta;
                    }
                    dlea::objective(&e, &fixes, &noise).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = if axis == 0 { g[id].x } else { g[id].y };
                worst = worst.max((fd - an).abs() / an.abs().max(1e-9));
            }
        }
    }
    ensure(worst <= 1e-6, format!("max relative error {worst:.2e} over 100 subsets"))
}

struct PivotInstance {
    fixes: Vec<(f64, f64)>,
    sigma: (f64, f64),
    links: Vec<(usize, f64)>,
}

fn solve_instance(inst: &PivotInstance, space: &RoadSpace) -> TentativeEstimateSet {
    let id = |i: usize| v(i as u32 + 1);
    let fixes: FixMap<f64> = inst
        .fixes
        .iter()
        .enumerate()
        .map(|(i, (x, y))| (id(i), Vec2::new(*x, *y)))
        .collect();
    let table: DistanceTable = inst
        .links
        .iter()
        .map(|(j, d)| DistanceMeasurement::new(id(0), id(*j), *d).unwrap())
        .collect();
    let subset = Subset::new(id(0), inst.links.iter().map(|(j, _)| id(*j))).unwrap();
    let noise = NoiseModel::new(Vec2::new(0.0, 0.0), Vec2::new(inst.sigma.0, inst.sigma.1)).unwrap();
    solve_tentative(&subset, &fixes, &table, &noise, space, &SolverOptions::default()).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let (xb, yb) = ((0.0, 50.0), (0.0, 9.0));
    let space = RoadSpace::new(xb, yb).unwrap();
    let instances = [
        PivotInstance {
            fixes: vec![(20.0, 4.0), (31.0, 5.5)],
            sigma: (1.0, 1.0),
            links: vec![(1, 12.3)],
        },
        PivotInstance {
            fixes: vec![(25.0, 8.5), (12.0, 10.5), (38.0, 1.0)],
            sigma: (1.0, 1.5),
            links: vec![(1, 13.5), (2, 14.5)],
        },
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for inst in &instances {
        let t = solve_instance(inst, &space);
        let pivot = t.estimates[&v(1)];
        let violation = inst
            .links
            .iter()
            .map(|(j, d)| (t.estimates[&v(*j as u32 + 1)].distance(&pivot) - d).abs())
            .fold(0.0, f64::max);
        let g = grid::GridInstance {
            centers: inst.fixes.clone(),
            sigma: inst.sigma,
            pivot: 0,
            links: inst.links.clone(),
            x_bounds: xb,
            y_bounds: yb,
        };
        let bound = g.upper_bound(0.5);
        let best = g.minimum(0.01, bound * 1.001 + 1e-9);
        let gap = (t.objective_value - best).abs();
        ok &= gap <= 1e-3 && violation <= 1e-4;
        detail.push(format!(
            "{} vehicles: solver {:.6} grid {best:.6} violation {violation:.1e}",
            inst.fixes.len(),
            t.objective_value
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(ok && elapsed < 30.0, format!("{}; {elapsed:.2} s", detail.join("; ")))
}

fn closed_form() -> Outcome {
    let wide = RoadSpace::new((-100.0, 100.0), (-100.0, 100.0)).unwrap();
    let t = solve_instance(
        &PivotInstance {
            fixes: vec![(0.0, 0.0), (10.0, 0.0)],
            sigma: (1.0, 1.0),
            links: vec![(1, 12.0)],
        },
        &wide,
    );
    let (a, b) = (t.estimates[&v(1)], t.estimates[&v(2)]);
    let err = [(a.x + 1.0).abs(), a.y.abs(), (b.x - 11.0).abs(), b.y.abs()]
        .into_iter()
        .fold(0.0, f64::max);
    ensure(
        err <= 1e-6,
        format!("estimates ({:.9}, {:.9}), max deviation {err:.1e}", a.x, b.x),
    )
}

fn fusion_arithmetic() -> Outcome {
    let points = [Vec2::new(10.0, 1.5), Vec2::new(12.0, 4.5), Vec2::new(11.0, 7.5)];
    let tentatives: BTreeMap<_, _> = [4, 5, 6]
        .into_iter()
        .zip(points)
        .map(|(k, p)| {
            (
                v(k),
                TentativeEstimateSet {
                    pivot: v(k),
                    estimates: BTreeMap::from([(v(6), p)]),
                    objective_value: 0.0,
                    stats: SolveStats::default(),
                },
            )
        })
        .collect();
    let weights: BTreeMap<_, _> = [(4, 4), (5, 4), (6, 2)]
        .into_iter()
        .map(|(k, w)| (v(k), PivotWeight { pivot: v(k), weight: w }))
        .collect();
    let subset = Subset::new(v(6), [v(4), v(5)]).unwrap();
    let f = final_estimate(v(6), &subset, &tentatives, &weights).unwrap();
    // independent weighted average
    let ex = (4.0 * 10.0 + 4.0 * 12.0 + 2.0 * 11.0) / 10.0;
    let ey = (4.0 * 1.5 + 4.0 * 4.5 + 2.0 * 7.5) / 10.0;
    let err = (f.position.x - ex).abs().max((f.position.y - ey).abs());
    let sum: f64 = f.contributing_pivots.iter().map(|(_, w)| w).sum();
    ensure(
        err <= 1e-12 && (sum - 1.0).abs() <= 1e-12,
        format!("v6 at ({}, {}), error {err:.1e}, weights sum {sum}", f.position.x, f.position.y),
    )
}

fn table_bands() -> Outcome {
    let start = Instant::now();
    let mut rows = Vec::new();
    for dev in [5.0, 10.0, 15.0] {
        let mut cfg = ScenarioConfig::default();
        cfg.gps_error.stddev = Vec2::new(dev, dev);
        cfg.trials = 20;
        assert_eq!(cfg.ranging_mode, RangingMode::Abstract);
        let outcomes = coopnav_cli::execute(&cfg, 1).unwrap();
        rows.push(coopnav_cli::output::summarize(&cfg, &outcomes));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let at10 = &rows[1];
    let a = (11.5..=15.5).contains(&at10.avg_gps);
    let b = (2.0..=8.0).contains(&at10.avg_dlea);
    let c = rows.iter().all(|r| r.avg_dlea / r.avg_gps <= 0.6);
    let d = rows[0].avg_dlea < rows[1].avg_dlea && rows[1].avg_dlea < rows[2].avg_dlea;
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "dev {}: GPS {:.2} DLEA {:.2} ratio {:.2} ({} failures)",
                r.deviation,
                r.avg_gps,
                r.avg_dlea,
                r.avg_dlea / r.avg_gps,
                r.convergence_failures
            )
        })
        .collect();
    ensure(
        a && b && c && d && elapsed < 300.0,
        format!("{}; bands a={a} b={b} c={c} d={d}; {elapsed:.1} s", table.join(", ")),
    )
}

fn protocol_fixpoint() -> Outcome {
    let layout = [(0.0, 0.0), (-80.0, 50.0), (-80.0, -55.0), (70.0, 40.0), (70.0, -40.0), (140.0, 0.0)];
    let snapshot = TrafficSnapshot::new(
        layout
            .iter()
            .enumerate()
            .map(|(i, (x, y))| (v(i as u32 + 1), Vec2::new(*x, *y)))
            .collect(),
    )
    .unwrap();
    let graph = build_neighbor_graph(&snapshot, 100.0).unwrap();
    let obs = Observations {
        fixes: apply_gps_error(&snapshot, &NoiseModel::isotropic(0.0).unwrap(), 0),
        ranging: RangingInput::Abstract {
            distances: apply_distance_error(&snapshot, &graph, 0.0, 0).unwrap(),
        },
    };
    let config = coopnav::netsim::ProtocolConfig {
        noise: NoiseModel::isotropic(10.0).unwrap(),
        space: RoadSpace::new((-500.0, 500.0), (-500.0, 500.0)).unwrap(),
        weight_mode: Default::default(),
        solver: SolverOptions::default(),
    };
    let out = run_protocol(&snapshot, &graph, &obs, &config).unwrap();
    let worst = snapshot
        .vehicles()
        .iter()
        .map(|(id, p)| out.finals[id].position.distance(p))
        .fold(0.0, f64::max);
    ensure(
        worst <= 1e-3 && graph.edge_count() == 7,
        format!("{} edges, max final error {worst:.2e} m", graph.edge_count()),
    )
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::TempDir::new().unwrap();
    let run = |dir: &Path| {
        let status = Command::new(env!("CARGO_BIN_EXE_coopnav"))
            .args(["run", "--seed", "7", "--out", dir.to_str().unwrap()])
            .output()
            .unwrap()
            .status;
        assert!(status.success());
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);
    let same = ["per_vehicle.csv", "summary.csv"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let bytes = std::fs::metadata(a.join("per_vehicle.csv")).unwrap().len();
    ensure(same, format!("per_vehicle.csv ({bytes} bytes) and summary.csv identical: {same}"))
}

fn estimator_purity() -> Outcome {
    let mut checked = 0;
    for mode in [RangingMode::Abstract, RangingMode::Full] {
        let cfg = ScenarioConfig {
            ranging_mode: mode,
            ..ScenarioConfig::default()
        };
        for trial in 0..3 {
            let inputs = generate_trial_inputs(&cfg, trial).unwrap();
            let pc = cfg.protocol_config().unwrap();
            let build = || Protocol::new(&inputs.snapshot, &inputs.graph, &inputs.observations, &pc).unwrap();
            let honest = build().run().unwrap();
            let mut blind = build();
            for agent in blind.agents_mut() {
                agent.true_position = Vec2::new(f64::NAN, f64::NAN);
            }
            let blind = blind.run().unwrap();
            if honest.finals != blind.finals || honest.tentatives != blind.tentatives {
                return Err(format!("{} trial {trial}: estimates changed", mode.as_str()));
            }
            checked += honest.finals.len();
        }
    }
    Ok(format!("{checked} final estimates unchanged with NaN ground truth"))
}

fn main() {
    type Check = (&'static str, fn() -> Outcome);
    let criteria: [Check; 10] = [
        ("zero-noise WLS-DD recovery", zero_noise_recovery),
        ("cancellation exactness", cancellation_exactness),
        ("gradient correctness", gradient_correctness),
        ("oracle equivalence", oracle_equivalence),
        ("closed-form two-vehicle line", closed_form),
        ("fusion arithmetic", fusion_arithmetic),
        ("average error bands", table_bands),
        ("zero-noise protocol fixpoint", protocol_fixpoint),
        ("run determinism", cli_determinism),
        ("estimator purity", estimator_purity),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {n:>2} {name}: {detail}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
