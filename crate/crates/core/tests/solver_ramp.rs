use hts_surrogate::emsolver::{
    assemble_inductance_matrix, dissipation_power, magnetization_loss, solve_ramp,
    CurrentDensityHistory, NewtonOptions, PowerLawParams, RampOptions, SolverState, TapeCircuit,
};
use hts_surrogate::geometry::{build_solenoid, discretize, ElementMesh, SolenoidConfig};

fn mesh(n: usize, np: usize, resolution: f64) -> ElementMesh {
    discretize(&build_solenoid(&SolenoidConfig::with_windings(n, np)).unwrap(), resolution).unwrap()
}

fn uniform_times(count: usize, duration: f64) -> Vec<f64> {
    (0..count).map(|k| duration * k as f64 / (count - 1) as f64).collect()
}

fn ramp(mesh: &ElementMesh, snapshots: usize) -> CurrentDensityHistory {
    let times = uniform_times(snapshots, mesh.config.ramp_duration());
    solve_ramp(mesh, &PowerLawParams::default(), &times, &RampOptions::default()).unwrap()
}

#[test]
fn zero_target_keeps_zero_state() {
    let mesh = mesh(2, 1, 4e-4);
    let l = assemble_inductance_matrix(&mesh).unwrap();
    let circuit = TapeCircuit::new(&mesh, &l, PowerLawParams::default()).unwrap();
    let (next, stats) = circuit
        .step(&SolverState::zeros(&mesh), 1e-3, 0.0, &NewtonOptions::default())
        .unwrap();
    assert!(next.currents.iter().all(|&i| i == 0.0));
    assert_eq!(stats.iterations, 0);
}

#[test]
fn invalid_snapshots_rejected() {
    let mesh = mesh(1, 1, 1e-3);
    let params = PowerLawParams::default();
    let opts = RampOptions::default();
    assert!(solve_ramp(&mesh, &params, &[], &opts).is_err());
    assert!(solve_ramp(&mesh, &params, &[0.0, 0.5, 0.5], &opts).is_err());
    assert!(solve_ramp(&mesh, &params, &[0.0, 2.0], &opts).is_err());
}

#[test]
fn ramp_conserves_transport_current() {
    let mesh = mesh(4, 2, 2e-4);
    let history = ramp(&mesh, 11);
    assert!(!history.steps.is_empty());
    for step in &history.steps {
        assert!(step.constraint_error <= 1e-8, "step at t = {}: {:e}", step.time, step.constraint_error);
    }
    assert!(history.current_density[0].iter().all(|&j| j == 0.0));
    let config = &mesh.config;
    for (index, &t) in history.times.iter().enumerate() {
        let currents = history.element_currents(index);
        let expected = config.n_turns as f64 * config.transport_current(t);
        for pancake in 1..=config.n_pancakes_half {
            let total: f64 = currents
                .iter()
                .zip(&mesh.elements)
                .filter(|(_, e)| e.pancake == pancake)
                .map(|(i, _)| i)
                .sum();
            assert!((total - expected).abs() <= 1e-8 * expected.max(1.0), "t = {t}: {total} vs {expected}");
        }
    }
}

#[test]
fn quarter_model_matches_unfolded_stack() {
    let config = SolenoidConfig::with_windings(1, 1);
    let geometry = build_solenoid(&config).unwrap();
    let quarter = discretize(&geometry, 2e-4).unwrap();
    let full = discretize(&geometry.unfold(), 2e-4).unwrap();
    assert_eq!(full.n_tapes(), 2);

    let a = ramp(&quarter, 11);
    let b = ramp(&full, 11);
    let p = quarter.points_per_tape;
    for (snap, (ja, jb)) in a.current_density.iter().zip(&b.current_density).enumerate() {
        let scale = ja.iter().fold(0.0f64, |m, j| m.max(j.abs())).max(1e-300);
        for i in 0..p {
            let upper = jb[i];
            let lower = jb[p + (p - 1 - i)];
            assert!((ja[i] - upper).abs() <= 1e-6 * scale, "snapshot {snap}, loop {i}");
            assert!((ja[i] - lower).abs() <= 1e-6 * scale, "snapshot {snap}, mirror of loop {i}");
        }
    }
    let loss_a = magnetization_loss(&a, &PowerLawParams::default()).unwrap();
    let loss_b = magnetization_loss(&b, &PowerLawParams::default()).unwrap();
    assert!((loss_a - loss_b).abs() <= 1e-6 * loss_b);
}

/// Critical-state current distribution of a thin strip of half width `half`
/// carrying a fraction `ratio` of its critical current.
fn bean_strip(x: f64, half: f64, ratio: f64, jc: f64) -> f64 {
    let a = half * (1.0 - ratio * ratio).sqrt();
    if x.abs() >= a {
        jc
    } else {
        2.0 * jc / std::f64::consts::PI * ((half * half - a * a) / (a * a - x * x)).sqrt().atan()
    }
}

// The power law reproduces the critical state where E is of order Ec; a
// 10 ms ramp drives the penetrated edges there.
#[test]
fn isolated_strip_matches_critical_state() {
    let params = PowerLawParams::default();
    let mut config = SolenoidConfig::with_windings(1, 1);
    config.inner_radius = 50.0 * config.tape_width - 0.5 * config.tape_thickness;
    config.ramp_rate = 5000.0;
    let geometry = build_solenoid(&config).unwrap().isolated();
    let mesh = discretize(&geometry, 1e-5).unwrap();
    assert!((mesh.elements[0].r / config.tape_width - 50.0).abs() < 1e-12);

    let history = ramp(&mesh, 11);
    let last = history.current_density.last().unwrap();
    let half = 0.5 * config.tape_width;
    let center = 0.5 * (mesh.elements[0].z + mesh.elements[mesh.len() - 1].z);
    let ratio = config.op_current / config.critical_current(params.j_c);
    assert!((ratio - 0.25).abs() < 1e-12);
    let front = half * (1.0 - ratio * ratio).sqrt();

    let mut sq_dev = 0.0;
    let mut sq_ref = 0.0;
    let mut count = 0;
    for (e, &j) in mesh.elements.iter().zip(last) {
        let x = e.z - center;
        let reference = bean_strip(x, half, ratio, params.j_c);
        if x.abs() >= front {
            sq_dev += (j.abs() - reference).powi(2);
            sq_ref += reference.powi(2);
            count += 1;
        } else {
            // Screened interior carries less than Jc everywhere.
            assert!(j.abs() < params.j_c);
        }
    }
    assert!(count >= 10);
    let deviation = (sq_dev / sq_ref).sqrt();
    assert!(deviation <= 0.05, "rms deviation over the penetrated zone {deviation}");
    // Both edges penetrate symmetrically.
    assert!((last[0] - last[mesh.len() - 1]).abs() <= 1e-6 * last[0].abs());
}

#[test]
fn penetration_only_grows_and_current_stays_bounded() {
    let params = PowerLawParams::default();
    let mesh = mesh(6, 3, 2e-4);
    let history = ramp(&mesh, 11);
    let threshold = 0.5 * params.j_c;
    for pair in history.current_density.windows(2) {
        for (before, after) in pair[0].iter().zip(&pair[1]) {
            if before.abs() > threshold {
                assert!(after.abs() > threshold);
            }
        }
    }
    let peak = history.current_density.iter().flatten().fold(0.0f64, |m, j| m.max(j.abs()));
    assert!(peak / params.j_c <= 1.2, "peak |J|/Jc = {}", peak / params.j_c);

    let last = history.n_snapshots() - 1;
    let central = history.penetration_fraction(last, 1, 0.5, params.j_c);
    let end = history.penetration_fraction(last, 3, 0.5, params.j_c);
    assert!(end > central, "end {end} vs central {central}");
}

#[test]
fn dissipation_is_non_negative() {
    let params = PowerLawParams::default();
    let mesh = mesh(3, 2, 4e-4);
    let history = ramp(&mesh, 6);
    assert!(dissipation_power(&history, &params).iter().all(|&p| p >= 0.0));
    assert!(magnetization_loss(&history, &params).unwrap() > 0.0);

    let mut zero = history.clone();
    zero.current_density.iter_mut().flatten().for_each(|j| *j = 0.0);
    assert_eq!(magnetization_loss(&zero, &params).unwrap(), 0.0);

    let mut single = history.clone();
    single.times.truncate(1);
    single.current_density.truncate(1);
    assert!(magnetization_loss(&single, &params).is_err());
}

#[test]
fn snapshot_csv_dump() {
    let mesh = mesh(2, 1, 1e-3);
    let history = ramp(&mesh, 3);
    let dir = tempfile::tempdir().unwrap();
    let files = history.write_snapshot_csvs(dir.path(), "coil").unwrap();
    assert_eq!(files.len(), 3);
    let text = std::fs::read_to_string(&files[2]).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("turn,pancake,r,z,Jphi"));
    assert_eq!(lines.count(), mesh.len());
}
