//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use nalgebra::{DMatrix, DVector};

use fixflow::analysis::{fb_diagnostics, little_o_check, lyapunov_report, rate_bound_check, slope_fit};
use fixflow::discrete::{euler_equals_km, km_iterate};
use fixflow::flow::{integrate, linspace, FlowConfig, Method, Trajectory};
use fixflow::operators::{certify_cocoercive, certify_fb_inequality, certify_nonexpansive, MonotoneSpec};
use fixflow::problems::{make_bolte, make_lasso, make_quadratic, make_rotation, ProblemSpec};
use fixflow::rescale::rescaled_equivalence;
use fixflow::{Error, OperatorHandle, Schedule, Vector};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn v(c: &[f64]) -> Vector {
    Vector::from_slice(c).unwrap()
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rk45() -> Method {
    Method::Rk45 { abs_tol: 1e-9, rel_tol: 1e-9 }
}

fn grid(t_end: f64, n: usize) -> FlowConfig {
    FlowConfig::new(t_end, linspace(t_end, n), rk45()).unwrap()
}

fn rotation_run() -> (Trajectory, Schedule) {
    let s = Schedule::constant(0.5).unwrap();
    let p = make_rotation(FRAC_PI_2).unwrap();
    let traj = integrate(&p.operator, &s, &v(&[1.0, 0.0]), &grid(200.0, 4001)).unwrap();
    (traj, s)
}

fn closed_form_flow() -> Outcome {
    let minus_id = make_rotation(PI).unwrap();
    let traj = integrate(&minus_id.operator, &Schedule::constant(1.0).unwrap(), &v(&[1.0, 0.0]), &grid(1.0, 11)).unwrap();
    let err = traj.final_state().dist(&v(&[(-2.0f64).exp(), 0.0]));
    ensure(err <= 1e-7, format!("|x(1) - (e^-2, 0)| = {err:e}"))?;
    Ok(format!("|x(1) - (e^-2, 0)| = {err:.2e}"))
}

fn continuous_discrete_contrast() -> Outcome {
    let minus_id = OperatorHandle::scaled_identity(1, -1.0);
    let one = Schedule::constant(1.0).unwrap();
    let log = km_iterate(&minus_id, &one, &v(&[1.0]), 20).unwrap();
    for (n, x) in log.iterates.iter().enumerate() {
        let expect = if n % 2 == 0 { 1.0 } else { -1.0 };
        ensure(x[0] == expect, format!("iterate {n} = {}", x[0]))?;
    }
    let traj = integrate(&minus_id, &one, &v(&[1.0]), &grid(10.0, 101)).unwrap();
    let r = *traj.residuals.last().unwrap();
    ensure(r <= 1e-6, format!("continuous residual at t=10 is {r:e}"))?;
    Ok(format!("KM alternates +-1 for 20 steps, flow residual(10) = {r:.2e}"))
}

fn rate_bound() -> Outcome {
    let (traj, s) = rotation_run();
    let mut worst = f64::NEG_INFINITY;
    for (&t, &r) in traj.times.iter().zip(&traj.residuals) {
        if t >= 0.1 {
            let scaled = r * (0.25 * t).sqrt();
            worst = worst.max(scaled);
            ensure(scaled <= 1.0 + 1e-9, format!("residual*sqrt(0.25 t) = {scaled} at t = {t}"))?;
            // Closed form: |T x - x| = sqrt(2) e^{-t/2}.
            let exact = 2f64.sqrt() * (-t / 2.0).exp();
            ensure((r - exact).abs() <= 1e-7, format!("residual {r} differs from closed form {exact} at t = {t}"))?;
        }
    }
    for (sp, r) in traj.speeds.iter().zip(&traj.residuals) {
        ensure(sp <= r, format!("speed {sp} exceeds residual {r}"))?;
    }
    let rep = rate_bound_check(&traj, &s, 1.0).map_err(|e| e.to_string())?;
    ensure(rep.tau_lower == 0.25 && rep.pass, format!("rate_bound_check: {rep:?}"))?;
    Ok(format!("max residual*sqrt(t/4) = {worst:.6}, margin = {:.3e}", rep.bound_margin))
}

fn little_o() -> Outcome {
    let (traj, s) = rotation_run();
    let rep = little_o_check(&traj, &s).map_err(|e| e.to_string())?;
    ensure(rep.inequality_pass, format!("inequality fails: {:?}", rep.checkpoints))?;
    let at = |t: f64| {
        rep.checkpoints
            .iter()
            .find(|c| c.t == t)
            .map(|c| c.sqrt_t_residual)
            .ok_or(format!("no checkpoint at t = {t}"))
    };
    let (late, early) = (at(200.0)?, at(12.5)?);
    ensure(late <= 0.2 * early, format!("sqrt(t) r: {late:e} at 200 vs {early:e} at 12.5"))?;
    Ok(format!(
        "{} checkpoints hold, sqrt(t) r: {early:.3e} (t=12.5) -> {late:.3e} (t=200)",
        rep.checkpoints.len()
    ))
}

fn shipped_problems() -> Vec<ProblemSpec> {
    let unit_box = MonotoneSpec::normal_cone_box(v(&[0.0, 0.0]), v(&[1.0, 1.0])).unwrap();
    let ball = MonotoneSpec::normal_cone_ball(v(&[0.0, 0.0]), 1.0).unwrap();
    let q = DMatrix::from_row_slice(2, 2, &[2.5, 1.5, 1.5, 2.5]);
    vec![
        make_rotation(FRAC_PI_2).unwrap(),
        make_rotation(PI).unwrap(),
        make_rotation(2.5).unwrap(),
        make_bolte(&unit_box, DMatrix::identity(2, 2), v(&[2.0, 0.5]), 1.0).unwrap(),
        make_bolte(&ball, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]), v(&[3.0, 3.0]), 0.5).unwrap(),
        make_lasso(DMatrix::identity(2, 2), v(&[3.0, 0.2]), 1.0, 1.0).unwrap(),
        make_lasso(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]), v(&[3.0, 3.0]), 1.0, 0.2).unwrap(),
        make_quadratic(q, 0.4).unwrap(),
    ]
}

fn shipped_schedules() -> Vec<Schedule> {
    vec![
        Schedule::constant(0.5).unwrap(),
        Schedule::constant(1.0).unwrap(),
        Schedule::hyperbolic(1.0).unwrap(),
        Schedule::piecewise(vec![2.0, 5.0], vec![1.0, 0.3, 0.8]).unwrap(),
        Schedule::table(vec![0.0, 4.0, 10.0], vec![0.2, 0.9, 0.5]).unwrap(),
    ]
}

fn lyapunov_suite() -> Outcome {
    let starts = [v(&[-2.0, 3.0]), v(&[4.0, -1.0])];
    let mut runs = 0;
    for p in shipped_problems() {
        for s in shipped_schedules() {
            for x0 in &starts {
                let traj = integrate(&p.operator, &s, x0, &grid(20.0, 401)).unwrap();
                for y in &p.known_fixed_points {
                    let rep = lyapunov_report(&traj, y).map_err(|e| e.to_string())?;
                    let label = format!("{} / {s} / x0 = {:?} / y = {:?}", p.name, x0.as_slice(), y.as_slice());
                    ensure(rep.pass && rep.fejer_pass, format!("distance increases ({label}) at {:?}", rep.first_violation))?;
                    ensure(rep.residual_pass, format!("residual increases by {:e} ({label})", rep.residual_max_increase))?;
                    runs += 1;
                }
            }
        }
    }
    Ok(format!("{runs} problem/schedule/start/reference combinations"))
}

fn forward_backward_lasso() -> Outcome {
    let b = [3.0, 0.2];
    let p = make_lasso(DMatrix::identity(2, 2), v(&b), 1.0, 1.0).unwrap();
    let soft: Vec<f64> = b.iter().map(|bi: &f64| bi.signum() * (bi.abs() - 1.0).max(0.0)).collect();
    let traj = integrate(&p.operator, &Schedule::constant(1.0).unwrap(), &v(&[-1.0, 4.0]), &grid(50.0, 501)).unwrap();
    let err = traj.final_state().dist(&v(&soft));
    ensure(err <= 1e-6, format!("x(50) is {err:e} from the soft-threshold minimizer"))?;
    let ls = p.smooth.as_ref().unwrap();
    let cert = certify_fb_inequality(&p.operator, ls, 1.0, 1000, 2024, 10.0);
    ensure(cert.trials == 1000 && cert.pass && cert.worst <= 1e-9, format!("fb inequality: {cert:?}"))?;
    let delta = p.constants.delta.unwrap();
    ensure(ls.beta() == 1.0 && delta == 1.5, format!("beta = {}, delta = {delta}", ls.beta()))?;
    Ok(format!("|x(50) - (2,0)| = {err:.2e}, worst violation over 1000 pairs = {:.2e}, delta = {delta}", cert.worst))
}

fn b_constancy() -> Outcome {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let p = make_lasso(a, v(&[3.0, 3.0]), 1.0, 0.2).unwrap();
    let ls = p.smooth.as_ref().unwrap();
    ensure(p.known_fixed_points.len() >= 2, "fewer than two reference minimizers")?;
    let (z0, z1) = (&p.known_fixed_points[0], &p.known_fixed_points[1]);
    ensure(z0.dist(z1) > 1e-3, "reference minimizers are not distinct")?;
    // Hand-derived solution set: x >= 0, x1 + x2 = 5/2, where B = (-1, -1).
    let hand = [v(&[2.5, 0.0]), v(&[0.0, 2.5]), v(&[1.25, 1.25])];
    let b_ref = v(&[-1.0, -1.0]);
    for z in p.known_fixed_points.iter().chain(&hand) {
        let gap = ls.gradient(z).unwrap().dist(&b_ref);
        ensure(gap <= 1e-9, format!("B({:?}) differs from (-1,-1) by {gap:e}", z.as_slice()))?;
    }
    let traj = integrate(&p.operator, &Schedule::constant(0.8).unwrap(), &v(&[4.0, -1.0]), &grid(60.0, 301)).unwrap();
    let rep = fb_diagnostics(&traj, ls, &p.known_fixed_points).map_err(|e| e.to_string())?;
    ensure(rep.zeros_agree && rep.final_gap <= 1e-6, format!("fb diagnostics: gap {:e}, disagreement {:e}", rep.final_gap, rep.zero_disagreement))?;
    Ok(format!(
        "{} minimizers, B disagreement {:.1e}, |B(x(t_end)) - B(x*)| = {:.2e}",
        p.known_fixed_points.len(),
        rep.zero_disagreement,
        rep.final_gap
    ))
}

fn strong_convergence() -> Outcome {
    let q = DMatrix::from_row_slice(2, 2, &[2.5, 1.5, 1.5, 2.5]);
    let eig = q.clone().symmetric_eigen();
    let (lo, hi): (f64, f64) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    ensure((lo - 1.0).abs() < 1e-12 && (hi - 4.0).abs() < 1e-12, "eigenvalues not {1, 4}")?;
    let gamma = 0.4;
    let p = make_quadratic(q, gamma).unwrap();
    let x0 = v(&[1.0, 0.0]);
    let traj = integrate(&p.operator, &Schedule::constant(1.0).unwrap(), &x0, &grid(10.0, 201)).unwrap();
    let c = gamma * lo;
    for (t, x) in traj.times.iter().zip(&traj.states) {
        // x(t) = V exp(-gamma D t) V^T x0.
        let d = DVector::from_iterator(2, eig.eigenvalues.iter().map(|l| (-gamma * l * t).exp()));
        let exact = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose() * DVector::from_column_slice(x0.as_slice());
        ensure(x.dist(&v(exact.as_slice())) <= 1e-8, format!("state differs from matrix exponential at t = {t}"))?;
        ensure(x.norm() <= (-c * t).exp() * x0.norm() + 1e-9, format!("|x({t})| above exp(-ct)|x0|"))?;
    }
    let slope = slope_fit(&traj, (1.0, 10.0)).map_err(|e| e.to_string())?;
    ensure(slope < -1.0, format!("slope {slope}"))?;
    Ok(format!("log-log slope on [1, 10] = {slope:.3}"))
}

fn rescaling() -> Outcome {
    let s = Schedule::hyperbolic(1.0).unwrap();
    let cfg = grid(10.0, 101);
    let x0 = v(&[1.0, -0.5]);
    let rot = rescaled_equivalence(&make_rotation(FRAC_PI_2).unwrap().operator, &s, &x0, &cfg).map_err(|e| e.to_string())?;
    ensure(rot <= 1e-6, format!("rotation discrepancy {rot:e}"))?;
    let minus_id = make_rotation(PI).unwrap().operator;
    let neg = rescaled_equivalence(&minus_id, &s, &x0, &cfg).map_err(|e| e.to_string())?;
    ensure(neg <= 1e-6, format!("-Id discrepancy {neg:e}"))?;
    let traj = integrate(&minus_id, &s, &x0, &cfg).unwrap();
    let mut closed = 0.0f64;
    for (t, x) in traj.times.iter().zip(&traj.states) {
        closed = closed.max(x.dist(&((1.0 + t).powi(-2) * &x0)));
    }
    ensure(closed <= 1e-6, format!("closed form (1+t)^-2 off by {closed:e}"))?;
    Ok(format!("rotation {rot:.2e}, -Id {neg:.2e}, closed form {closed:.2e}"))
}

fn euler_km() -> Outcome {
    let unit_box = MonotoneSpec::normal_cone_box(v(&[0.0, 0.0]), v(&[1.0, 1.0])).unwrap();
    let bolte = make_bolte(&unit_box, DMatrix::identity(2, 2), v(&[2.0, 0.5]), 1.0).unwrap();
    let cases = [
        ("-Id, constant(0.5)", OperatorHandle::scaled_identity(2, -1.0), Schedule::constant(0.5).unwrap()),
        ("rotation(pi/4), hyperbolic(1)", OperatorHandle::rotation(FRAC_PI_4), Schedule::hyperbolic(1.0).unwrap()),
        ("projected gradient, piecewise", bolte.operator, Schedule::piecewise(vec![3.0], vec![1.0, 0.4]).unwrap()),
    ];
    let mut worst = 0.0f64;
    for (label, t, s) in &cases {
        let d = euler_equals_km(t, s, &v(&[1.0, -2.0]), 40).map_err(|e| e.to_string())?;
        ensure(d <= 1e-12, format!("{label}: discrepancy {d:e}"))?;
        worst = worst.max(d);
    }
    Ok(format!("max discrepancy over 3 combinations = {worst:e}"))
}

fn negative_controls() -> Outcome {
    let doubled = OperatorHandle::scaled_identity(2, 2.0);
    let ne = certify_nonexpansive(&doubled, 200, 1, 10.0);
    ensure(!ne.pass, "2 Id certified nonexpansive")?;
    let co = certify_cocoercive(&OperatorHandle::identity(2), 2.0, 200, 1, 10.0);
    ensure(!co.pass, "Id certified 2-cocoercive")?;
    let one = Schedule::constant(1.0).unwrap();
    let traj = integrate(&OperatorHandle::rotation(FRAC_PI_2), &one, &v(&[1.0, 0.0]), &grid(5.0, 11)).unwrap();
    match rate_bound_check(&traj, &one, 1.0) {
        Err(Error::Precondition(_)) => {}
        other => return Err(format!("lambda = 1 accepted by rate_bound_check: {other:?}")),
    }
    Ok(format!("2Id excess {:.2}, Id cocoercivity deficit {:.2}, lambda=1 rejected", ne.worst, -co.worst))
}

fn determinism() -> Outcome {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut compared = 0;
    let mut names: Vec<_> = fs::read_dir(&configs).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    for cfg in &names {
        let stem = cfg.file_stem().unwrap().to_string_lossy().to_string();
        let (a, b) = (tmp.path().join(format!("{stem}-a")), tmp.path().join(format!("{stem}-b")));
        for out in [&a, &b] {
            let status = std::process::Command::new(env!("CARGO_BIN_EXE_fixflow"))
                .arg("--quiet")
                .arg("run")
                .arg(cfg)
                .arg("--output-dir")
                .arg(out)
                .status()
                .map_err(|e| e.to_string())?;
            ensure(status.code() == Some(0), format!("{stem}: exit {status}"))?;
        }
        for entry in fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            if !name.to_string_lossy().ends_with(".csv") {
                continue;
            }
            let (x, y) = (fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
            ensure(x == y, format!("{stem}/{} differs between runs", name.to_string_lossy()))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} CSV files byte-identical across {} configs", names.len()))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("closed-form flow oracle, T = -Id", closed_form_flow),
        ("continuous vs discrete contrast", continuous_discrete_contrast),
        ("O(1/sqrt t) residual bound", rate_bound),
        ("o(1/sqrt t) tail inequality", little_o),
        ("Lyapunov suite over shipped problems", lyapunov_suite),
        ("forward-backward lasso", forward_backward_lasso),
        ("B constant on the solution set", b_constancy),
        ("strong convergence under strong monotonicity", strong_convergence),
        ("time rescaling equivalence", rescaling),
        ("explicit Euler equals KM", euler_km),
        ("certification negative controls", negative_controls),
        ("deterministic CSV output", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
