//! End-to-end acceptance gates for the cascaded observer. Each test checks
//! one guarantee on the reference scenario (or on dedicated error-system
//! experiments) at its stated tolerance and prints a single PASS/FAIL line;
//! the reference run is shared across tests through a one-time fixture.

use mononav::analysis::{
    fit_exponential, gamma_matrices, gamma_norm_bounds, iss_experiment, IssCase,
};
use mononav::dynamics::RigidBodyState;
use mononav::geometry::{attitude_distance, exp_so3, half_turn, proj, psi, skew};
use mononav::harness::{
    check_observability, run_pose_only, run_riccati_only, run_scenario, ScenarioArtifacts,
    ScenarioConfig,
};
use mononav::ltv_observer::{build_system, ExtendedState};
use mononav::pose_observer::{
    attitude_innovation_from_errors, innovations, pose_error, reconstruct_landmarks, AnchorSet,
    PoseEstimate,
};
use mononav::sensors::{bearing_from_pixel, body_landmark, observe, pixel_from_point};
use nalgebra::{DVector, Matrix3, Unit, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use std::f64::consts::PI;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

/// Reference scenario artifacts plus the wall-clock time of the run.
fn scenario() -> &'static (ScenarioArtifacts, Duration) {
    static CELL: OnceLock<(ScenarioArtifacts, Duration)> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = ScenarioConfig::default();
        let start = Instant::now();
        let art = run_scenario(&config).expect("reference scenario runs");
        (art, start.elapsed())
    })
}

/// Prints one PASS/FAIL line for the named gate and asserts every check.
fn report(name: &str, checks: &[(String, bool)]) {
    let ok = checks.iter().all(|(_, pass)| *pass);
    println!("acceptance {name}: {}", if ok { "PASS" } else { "FAIL" });
    for (desc, pass) in checks {
        if !pass {
            println!("  failed: {desc}");
        }
    }
    assert!(
        ok,
        "{name}: {} checks failed",
        checks.iter().filter(|(_, p)| !p).count()
    );
}

fn check(desc: impl Into<String>, pass: bool) -> (String, bool) {
    (desc.into(), pass)
}

fn random_axis(rng: &mut StdRng) -> Vector3<f64> {
    let a: [f64; 3] = UnitSphere.sample(rng);
    Vector3::new(a[0], a[1], a[2])
}

fn random_rotation(rng: &mut StdRng, max_angle: f64) -> Matrix3<f64> {
    let angle = rng.gen_range(0.0..max_angle);
    exp_so3(&(angle * random_axis(rng)))
}

fn random_vector(rng: &mut StdRng, scale: f64) -> Vector3<f64> {
    Vector3::new(
        scale * rng.sample::<f64, _>(StandardNormal),
        scale * rng.sample::<f64, _>(StandardNormal),
        scale * rng.sample::<f64, _>(StandardNormal),
    )
}

#[test]
fn reference_scenario_meets_error_gates() {
    let (art, elapsed) = scenario();
    let last = art.terminal().expect("run produced rows");
    let checks = vec![
        check(
            format!("velocity error {:.3e} < 1e-2", last.vtilde_norm),
            last.vtilde_norm < 1e-2,
        ),
        check(
            format!("max landmark error {:.3e} < 1e-2", last.max_landmark_error),
            last.max_landmark_error < 1e-2,
        ),
        check(
            format!("gravity consistency {:.3e} < 1e-2", last.gravity_error),
            last.gravity_error < 1e-2,
        ),
        check(
            format!("attitude distance {:.3e} < 1e-3", last.attitude_distance),
            last.attitude_distance < 1e-3,
        ),
        check(
            format!("position error {:.3e} < 1e-2", last.position_error),
            last.position_error < 1e-2,
        ),
        check(
            format!("wall time {:.1?} < 60 s", elapsed),
            *elapsed < Duration::from_secs(60),
        ),
    ];
    report("reference scenario error gates", &checks);
}

#[test]
fn estimation_error_decays_exponentially() {
    let (art, _) = scenario();
    let fit = fit_exponential(&art.xtilde_trace(), (1.0, 15.0)).expect("fit succeeds");
    let lyap_violations = art
        .rows
        .windows(2)
        .filter(|w| w[1].lyapunov > w[0].lyapunov * (1.0 + 1e-6))
        .count();
    let checks = vec![
        check(format!("decay rate {:.3} > 0", fit.rate), fit.rate > 0.0),
        check(
            format!(
                "envelope {:.3e} * exp(-{:.3} t) dominates",
                fit.prefactor, fit.rate
            ),
            fit.dominates && fit.prefactor.is_finite(),
        ),
        check(
            format!("quadratic-form values non-increasing ({lyap_violations} violations)"),
            lyap_violations == 0,
        ),
    ];
    report("exponential decay of the estimation error", &checks);
}

#[test]
fn riccati_solution_stays_healthy_and_step_converges() {
    let (art, _) = scenario();
    let max_asym = art.rows.iter().map(|r| r.p_asymmetry).fold(0.0, f64::max);
    let min_eig = art
        .rows
        .iter()
        .map(|r| r.p_min_eig)
        .fold(f64::INFINITY, f64::min);
    let (p_coarse, _) = run_riccati_only(&art.config, 1.0, 1e-3).expect("coarse run");
    let (p_fine, _) = run_riccati_only(&art.config, 1.0, 1e-5).expect("fine run");
    let rel = (&p_coarse - &p_fine).norm() / p_fine.norm();
    let checks = vec![
        check(
            format!("max asymmetry {max_asym:.3e} < 1e-9"),
            max_asym < 1e-9,
        ),
        check(format!("min eigenvalue {min_eig:.3e} > 0"), min_eig > 0.0),
        check(
            format!("step-size self-convergence rel diff {rel:.3e} < 1e-5"),
            rel < 1e-5,
        ),
    ];
    report("Riccati solution health and step-size convergence", &checks);
}

#[test]
fn trajectory_is_persistently_exciting_and_observable() {
    let (art, _) = scenario();
    let reports = check_observability(&art.config).expect("observability checks run");
    let n_windows = reports.gramian.len();
    let first = reports.gramian.first().map_or(f64::NAN, |g| g.start);
    let last = reports.gramian.last().map_or(f64::NAN, |g| g.start);
    let min_gram = reports
        .gramian
        .iter()
        .map(|g| g.min_eig)
        .fold(f64::INFINITY, f64::min);
    let max_rel = reports
        .gramian
        .iter()
        .map(|g| g.rel_diff)
        .fold(0.0_f64, f64::max);

    // A trajectory headed straight at a landmark keeps that sight line
    // fixed, so the windowed projector integral loses rank: the excitation
    // check must flag exactly that landmark. The start point puts the
    // camera (body position plus lever arm) directly above the first
    // landmark, descending toward it.
    let mut line = art.config.clone();
    line.run.horizon = 4.0;
    line.trajectory.kind = "straight-line".into();
    line.trajectory.start = [-1.02, -1.06, 5.99];
    line.trajectory.velocity = [0.0, 0.0, -0.25];
    let line_reports = check_observability(&line).expect("straight-line checks run");

    let checks = vec![
        check(
            format!(
                "excitation holds for all landmarks (worst margin {:.3e})",
                reports.pe.worst_margin()
            ),
            reports.pe.all_pass(),
        ),
        check(
            format!("{n_windows} Gramian windows cover starts [{first:.1}, {last:.1}]"),
            n_windows == 181 && first == 0.0 && (last - 18.0).abs() < 1e-9,
        ),
        check(
            format!("min Gramian eigenvalue {min_gram:.3e} > 0"),
            min_gram > 0.0,
        ),
        check(
            format!("direct vs factored Gramians agree to {max_rel:.3e} (< 1e-6)"),
            max_rel < 1e-6,
        ),
        check(
            "straight-line-at-landmark run fails excitation for landmark 0".to_string(),
            !line_reports.pe.all_pass() && !line_reports.pe.landmark_pass[0],
        ),
    ];
    report("persistent excitation and observability", &checks);
}

#[test]
fn pose_basin_covers_large_initial_errors() {
    let (art, _) = scenario();
    let mut rng = StdRng::seed_from_u64(41);
    let mut checks = Vec::new();

    // Random initial attitude estimates with error angles up to 0.95 pi.
    // The cap keeps every draw away from the antipodal half-turns, which
    // are the (unstable) exceptional starts.
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let angle = rng.gen_range(0.0..0.95) * PI;
        let initial = PoseEstimate {
            rotation: exp_so3(&(angle * random_axis(&mut rng))),
            position: Vector3::zeros(),
        };
        let rows = run_pose_only(art, &initial).expect("replay runs");
        worst = worst.max(rows.last().unwrap().attitude_distance);
    }
    checks.push(check(
        format!(
            "20 random large-error starts converge (worst terminal distance {worst:.3e} < 1e-3)"
        ),
        worst < 1e-3,
    ));

    // Replaying the recorded initial estimate must reproduce the recorded
    // terminal error; the pose stage depends on the stored traces alone.
    let replay = run_pose_only(
        art,
        &PoseEstimate {
            rotation: art.pose[0].rotation,
            position: art.pose[0].position,
        },
    )
    .expect("replay runs");
    let replay_last = replay.last().unwrap().attitude_distance;
    let recorded_last = art.terminal().unwrap().attitude_distance;
    checks.push(check(
        format!("replay reproduces the recorded run ({replay_last:.6e} vs {recorded_last:.6e})"),
        (replay_last - recorded_last).abs() <= 1e-12 * recorded_last.max(1e-12),
    ));

    // Half-turns about the anchor moment's eigenvectors are equilibria of
    // the zero-input error system. An anchor set whose moment eigenvectors
    // are exactly the coordinate axes makes them exactly representable, so
    // starting on one must stay on it; a small perturbation must escape and
    // converge to the identity.
    let anchors = AnchorSet::build(
        &[
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(-2.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
        ],
        None,
    )
    .expect("anchor set builds");
    let moment_gap = (anchors.moment() - Matrix3::from_diagonal(&Vector3::new(2.0, 0.5, 0.0)))
        .abs()
        .max();
    checks.push(check(
        format!("equilibrium anchor moment is exactly diag(2, 0.5, 0) (gap {moment_gap:.1e})"),
        moment_gap == 0.0,
    ));

    let gains = art.config.pose_gains().expect("gains valid");
    let dim = 3 * art.map.len() + 6;
    let zero_driver = move |_t: f64| DVector::<f64>::zeros(dim);
    let axes = [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()];
    let stationary_cases: Vec<IssCase> = axes
        .iter()
        .map(|axis| IssCase {
            rotation: half_turn(axis),
            position: Vector3::zeros(),
        })
        .collect();
    let stationary = iss_experiment(
        &anchors,
        &gains,
        &zero_driver,
        &stationary_cases,
        art.map.len(),
        20.0,
        1e-3,
    );
    let max_psi = stationary
        .iter()
        .map(|o| o.max_psi_norm)
        .fold(0.0_f64, f64::max);
    let still_there = stationary
        .iter()
        .all(|o| o.terminal_attitude_distance > 1.0 - 1e-12);
    checks.push(check(
        format!(
            "exact half-turn starts stay stationary (max innovation norm {max_psi:.1e} < 1e-10)"
        ),
        max_psi < 1e-10 && still_there,
    ));

    let perturbed_cases: Vec<IssCase> = axes
        .iter()
        .enumerate()
        .map(|(k, axis)| IssCase {
            rotation: exp_so3(&(1e-3 * axes[(k + 1) % 3].into_inner())) * half_turn(axis),
            position: Vector3::zeros(),
        })
        .collect();
    let perturbed = iss_experiment(
        &anchors,
        &gains,
        &zero_driver,
        &perturbed_cases,
        art.map.len(),
        20.0,
        1e-3,
    );
    let worst_escape = perturbed
        .iter()
        .map(|o| o.terminal_attitude_distance)
        .fold(0.0_f64, f64::max);
    checks.push(check(
        format!("1e-3 perturbations escape and converge (worst terminal distance {worst_escape:.3e} < 1e-3)"),
        worst_escape < 1e-3,
    ));

    report("pose attraction basin and unstable equilibria", &checks);
}

#[test]
fn pose_stage_is_iss_against_decaying_estimation_error() {
    let (art, _) = scenario();
    let gains = art.config.pose_gains().expect("gains valid");
    let n = art.map.len();
    let dim = 3 * n + 6;
    let mut rng = StdRng::seed_from_u64(42);

    let mut direction = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    direction *= 10.0 / direction.norm();
    let x0 = direction;
    let driver = move |t: f64| &x0 * (-t).exp();

    let cases: Vec<IssCase> = (0..10)
        .map(|_| IssCase {
            rotation: random_rotation(&mut rng, 0.95 * PI),
            position: random_vector(&mut rng, 0.7),
        })
        .collect();
    let outcomes = iss_experiment(&art.anchors, &gains, &driver, &cases, n, 20.0, 1e-3);
    let worst_energy = outcomes
        .iter()
        .map(|o| o.terminal_energy)
        .fold(0.0_f64, f64::max);

    // The coupling matrices' Frobenius norms have closed forms that hold
    // for every attitude pair, because rotations enter blockwise.
    let mut worst_rel = 0.0_f64;
    let (k1, k2) = gamma_norm_bounds(&art.anchors, &gains);
    for _ in 0..100 {
        let rhat = random_rotation(&mut rng, PI);
        let r = random_rotation(&mut rng, PI);
        let (g1, g2) = gamma_matrices(&art.anchors, &gains, &rhat, &r, n);
        worst_rel = worst_rel.max((g1.norm() - k1).abs() / k1);
        worst_rel = worst_rel.max((g2.norm() - k2).abs() / k2);
    }

    let checks = vec![
        check(
            format!("10 disturbed error runs reach terminal energy {worst_energy:.3e} < 1e-6"),
            worst_energy < 1e-6,
        ),
        check(
            format!("coupling norms match closed forms (worst rel diff {worst_rel:.3e} < 1e-12)"),
            worst_rel < 1e-12,
        ),
    ];
    report("pose stage input-to-state stability", &checks);
}

#[test]
fn unknown_landmarks_reconstructed_in_inertial_frame() {
    let (art, _) = scenario();
    let last = art.terminal().unwrap();
    let m = art.map.known_count();
    let xhat = art.xhat.last().unwrap();
    let pose = art.pose.last().unwrap();
    let bp_unknown: Vec<Vector3<f64>> = (m..art.map.len()).map(|i| xhat.landmark(i)).collect();
    let rebuilt = reconstruct_landmarks(pose, &bp_unknown);
    let direct_max = rebuilt
        .iter()
        .zip(&art.map.positions()[m..])
        .map(|(est, truth)| (est - truth).norm())
        .fold(0.0_f64, f64::max);
    let checks = vec![
        check(
            format!(
                "recorded terminal reconstruction error {:.3e} < 2e-2",
                last.max_unknown_reconstruction_error
            ),
            last.max_unknown_reconstruction_error < 2e-2,
        ),
        check(
            format!("direct recomputation agrees ({direct_max:.3e} < 2e-2)"),
            direct_max < 2e-2,
        ),
    ];
    report("unknown landmark reconstruction", &checks);
}

#[test]
fn randomized_structure_identities_hold() {
    let mut rng = StdRng::seed_from_u64(4242);
    let config = ScenarioConfig::default();
    let rig = config.rig().expect("rig builds");
    let map = config.landmark_map().expect("map builds");
    let cases = 1000;
    let mut checks = Vec::new();

    // Vector-algebra identities: the skew map and its half-trace inverse,
    // projector structure, and the rotation exponential.
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let v = random_vector(&mut rng, 5.0);
        let s = skew(&v);
        worst = worst.max((s + s.transpose()).amax());
        worst = worst.max((psi(&s) - v).amax());
        let a = Matrix3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
        worst = worst.max((psi(&a) - psi(&(0.5 * (a - a.transpose())))).amax());
        let u = Unit::new_normalize(random_vector(&mut rng, 1.0));
        let p = proj(&u);
        worst = worst.max((p - p.transpose()).amax());
        worst = worst.max((p * p - p).amax());
        worst = worst.max((p * u.into_inner()).amax());
        worst = worst.max((p.trace() - 2.0).abs());
        let w = random_vector(&mut rng, PI);
        let r = exp_so3(&w);
        worst = worst.max((r * r.transpose() - Matrix3::identity()).amax());
        worst = worst.max((r * exp_so3(&-w) - Matrix3::identity()).amax());
        worst = worst.max((attitude_distance(&half_turn(&u)) - 1.0).abs());
    }
    checks.push(check(
        format!("vector-algebra identities over {cases} cases (worst {worst:.2e} < 1e-12)"),
        worst < 1e-12,
    ));

    // Pixel projection and back-projection invert each other up to depth.
    let mut worst = 0.0_f64;
    for _ in 0..cases {
        let cp = Vector3::new(
            rng.gen_range(-2.0..2.0),
            rng.gen_range(-2.0..2.0),
            rng.gen_range(0.2..10.0),
        );
        let (u, v) = pixel_from_point(&rig, &cp).expect("point is in front");
        let z = bearing_from_pixel(&rig, u, v).expect("pixel lifts");
        worst = worst.max((z.into_inner() - cp.normalize()).amax());
    }
    checks.push(check(
        format!("pixel/bearing round trip over {cases} cases (worst {worst:.2e} < 1e-12)"),
        worst < 1e-12,
    ));

    // The block-structured system application agrees with the assembled
    // dense matrices, and the true extended state reproduces the measured
    // modified outputs exactly.
    let mut worst = 0.0_f64;
    let dim = 3 * map.len() + 6;
    for _ in 0..cases {
        let state = RigidBodyState {
            rotation: random_rotation(&mut rng, PI),
            position: Vector3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(2.0..8.0),
            ),
            velocity: random_vector(&mut rng, 2.0),
            t: 0.0,
        };
        let sample = observe(&rig, &map, &state, None).expect("all landmarks visible");
        let omega = random_vector(&mut rng, 2.0);
        let m = build_system(&omega, &sample);
        let x = DVector::from_fn(dim, |_, _| rng.gen_range(-5.0..5.0));
        let acc = random_vector(&mut rng, 10.0);
        worst = worst.max((m.a() * &x - m.apply_a(&x)).amax());
        worst = worst.max((m.c() * &x - m.apply_c(&x)).amax());
        worst = worst.max((m.b() * acc - m.apply_b(&acc)).amax());
        let x_true = ExtendedState::from_truth(&state, &map, &Vector3::new(0.0, 0.0, -9.81));
        worst = worst.max((sample.stacked_modified() - m.apply_c(x_true.vector())).amax());
    }
    checks.push(check(
        format!("stacked vs blockwise system forms over {cases} cases (worst {worst:.2e} < 1e-12)"),
        worst < 1e-12,
    ));

    // Innovation decomposition and the per-anchor residual identity,
    // written in terms of the pose and body-frame estimation errors.
    let anchors = AnchorSet::build(
        &[
            Vector3::new(2.0, 0.0, 0.0),
            Vector3::new(-2.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
        ],
        None,
    )
    .expect("anchor set builds");
    let mut worst_sigma = 0.0_f64;
    let mut worst_xi = 0.0_f64;
    for _ in 0..cases {
        let truth = RigidBodyState {
            rotation: random_rotation(&mut rng, PI),
            position: random_vector(&mut rng, 3.0),
            velocity: Vector3::zeros(),
            t: 0.0,
        };
        let pose = PoseEstimate {
            rotation: random_rotation(&mut rng, PI),
            position: random_vector(&mut rng, 3.0),
        };
        let bp_hat: Vec<Vector3<f64>> = (0..anchors.len())
            .map(|_| random_vector(&mut rng, 3.0))
            .collect();
        let bp_true: Vec<Vector3<f64>> = anchors
            .anchors()
            .iter()
            .map(|p_i| body_landmark(&truth.rotation, &truth.position, p_i))
            .collect();
        let bp_tilde: Vec<Vector3<f64>> = bp_true.iter().zip(&bp_hat).map(|(t, h)| t - h).collect();
        let err = pose_error(&truth, &pose, &anchors);
        let (sigma_r, _) = innovations(&anchors, &pose, &bp_hat).expect("lengths match");
        let predicted = attitude_innovation_from_errors(&anchors, &err, &pose.rotation, &bp_tilde);
        worst_sigma = worst_sigma.max((sigma_r - predicted).norm());

        let rt = err.rotation.transpose();
        for (i, (p_i, nu)) in anchors.anchors().iter().zip(anchors.offsets()).enumerate() {
            let xi = p_i - pose.position - pose.rotation * bp_hat[i];
            let pred =
                rt * err.position + (Matrix3::identity() - rt) * nu + pose.rotation * bp_tilde[i];
            worst_xi = worst_xi.max((xi - pred).amax());
        }
    }
    checks.push(check(
        format!("attitude innovation decomposition over {cases} cases (worst {worst_sigma:.2e} < 1e-10)"),
        worst_sigma < 1e-10,
    ));
    checks.push(check(
        format!("per-anchor residual identity over {cases} cases (worst {worst_xi:.2e} < 1e-10)"),
        worst_xi < 1e-10,
    ));

    report("randomized structure identities", &checks);
}
