//! Backward integration of `X'(t) = D(X(t), t; Z̄_t)`, `X(τ) = Y`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::paths::SamplePath;
use crate::shift_models::{gronwall_constant, OutcomeKind, RegularityBudget, ShiftModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub atol: f64,
    pub rtol: f64,
    pub max_steps: usize,
    /// Times (besides 0, τ and the jump times) at which `X` must be reported.
    pub extra_mesh: Vec<f64>,
    /// Keep every accepted Runge–Kutta step in the output mesh.
    pub record_steps: bool,
    /// Allowed dip of a survival trajectory below the diagonal.
    pub survival_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            atol: 1e-10,
            rtol: 1e-8,
            max_steps: 100_000,
            extra_mesh: Vec::new(),
            record_steps: true,
            survival_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub segments: usize,
    pub max_error_estimate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub mesh: Vec<f64>,
    pub values: Vec<f64>,
    pub final_value: f64,
    pub report: SolverReport,
}

impl Trajectory {
    /// Wraps externally computed samples (hand-built or from the discrete engine).
    pub fn from_samples(mesh: Vec<f64>, values: Vec<f64>, final_value: f64) -> Result<Self> {
        if mesh.len() != values.len() || mesh.is_empty() {
            return Err(domain("mesh and values must be nonempty and of equal length"));
        }
        if mesh.windows(2).any(|w| w[0] >= w[1]) {
            return Err(domain("mesh must be strictly increasing"));
        }
        Ok(Self {
            mesh,
            values,
            final_value,
            report: SolverReport::default(),
        })
    }

    /// Exact at mesh points, linear in between.
    pub fn value_at(&self, t: f64) -> Result<f64> {
        let (lo, hi) = (self.mesh[0], *self.mesh.last().unwrap());
        if !(lo..=hi).contains(&t) {
            return Err(domain(format!("t = {t} outside trajectory mesh [{lo}, {hi}]")));
        }
        let i = self.mesh.partition_point(|&s| s < t);
        if self.mesh[i] == t {
            return Ok(self.values[i]);
        }
        let (t0, t1) = (self.mesh[i - 1], self.mesh[i]);
        let w = (t - t0) / (t1 - t0);
        Ok(self.values[i - 1] * (1.0 - w) + self.values[i] * w)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "x"])?;
        for (t, x) in self.mesh.iter().zip(&self.values) {
            w.write_record([t.to_string(), x.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One Dormand–Prince step of length `step` backward in time; returns the
/// fifth-order value and the embedded error estimate.
fn dopri_step(f: &impl Fn(f64, f64) -> f64, t: f64, x: f64, step: f64) -> (f64, f64) {
    let dt = -step;
    let mut k = [0.0f64; 7];
    for i in 0..7 {
        let xi = x + dt * (0..i).map(|j| A[i][j] * k[j]).sum::<f64>();
        k[i] = f(xi, t + C[i] * dt);
    }
    let x_new = x + dt * (0..7).map(|i| B5[i] * k[i]).sum::<f64>();
    let err = (dt * (0..7).map(|i| (B5[i] - B4[i]) * k[i]).sum::<f64>()).abs();
    (x_new, err)
}

/// Integrates `x' = f(x, t)` from `t_from` down to `t_to < t_from`, pushing
/// accepted `(t, x)` pairs (excluding the start) onto `out`.
fn integrate_segment(
    f: impl Fn(f64, f64) -> f64,
    event: Option<&dyn Fn(f64, f64) -> f64>,
    guard: &dyn Fn(f64, f64) -> Result<()>,
    t_from: f64,
    t_to: f64,
    x0: f64,
    opts: &SolverOptions,
    report: &mut SolverReport,
    out: &mut Vec<(f64, f64)>,
) -> Result<f64> {
    let span = t_from - t_to;
    let mut t = t_from;
    let mut x = x0;
    let mut h = span;
    let mut steps = 0usize;
    // Side of the switching surface the trajectory is on. Every step uses the
    // field of that side: stage points that stray across are projected back
    // (the surface is `x − t = w`, so `∂g/∂x = 1`). Crossing flips the side.
    let side_of = |g: &dyn Fn(f64, f64) -> f64, x: f64, t: f64| {
        let g0 = g(x, t);
        let g0 = if g0.abs() > 1e-12 * (1.0 + x.abs()) {
            g0
        } else {
            g(x, t - 1e-9 * t.abs().max(1.0))
        };
        if g0 >= 0.0 {
            1.0
        } else {
            -1.0
        }
    };
    let mut side = event.map_or(1.0, |g| side_of(g, x, t));
    while t > t_to {
        if steps >= opts.max_steps {
            return Err(Error::Solver {
                steps,
                t_lo: t_to,
                t_hi: t_from,
                reason: format!("step budget exhausted at t = {t}"),
            });
        }
        steps += 1;
        let mut last = h >= t - t_to;
        let mut landed = false;
        let mut step = if last { t - t_to } else { h };
        let field = |xv: f64, tv: f64| match event {
            Some(g) => {
                let gv = g(xv, tv);
                if gv * side <= 0.0 {
                    f(xv - gv + side * 4.0 * f64::EPSILON * (1.0 + xv.abs()), tv)
                } else {
                    f(xv, tv)
                }
            }
            None => f(xv, tv),
        };
        let (mut x_new, mut err) = dopri_step(&field, t, x, step);
        if let Some(g) = event {
            if side * g(x_new, t - step) < 0.0 {
                // Land on the switching surface so no step straddles it.
                let (mut lo, mut hi) = (0.0, step);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    let (xm, _) = dopri_step(&field, t, x, mid);
                    if side * g(xm, t - mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                if hi < step {
                    step = hi;
                    last = false;
                    (x_new, err) = dopri_step(&field, t, x, step);
                }
                landed = true;
            }
        }
        let scale = opts.atol + opts.rtol * x.abs().max(x_new.abs());
        let ratio = err / scale;
        if !x_new.is_finite() {
            return Err(Error::Solver {
                steps,
                t_lo: t_to,
                t_hi: t_from,
                reason: format!("non-finite state at t = {t}"),
            });
        }
        if ratio <= 1.0 {
            report.accepted_steps += 1;
            report.max_error_estimate = report.max_error_estimate.max(err);
            t = if last { t_to } else { t - step };
            x = x_new;
            if landed {
                side = -side;
            }
            guard(x, t)?;
            if t > t_to {
                out.push((t, x));
            }
        } else {
            report.rejected_steps += 1;
        }
        let factor = if ratio == 0.0 {
            5.0
        } else {
            (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0)
        };
        h = (step * factor).max(f64::EPSILON * t_from.abs().max(1.0) * 16.0);
        if h < 1e-14 * span.max(1.0) && ratio > 1.0 {
            return Err(Error::Solver {
                steps,
                t_lo: t_to,
                t_hi: t_from,
                reason: format!("step size underflow at t = {t}"),
            });
        }
    }
    Ok(x)
}

/// Solves the mimicking equation backward from `X(τ) = y`.
pub fn solve_backward(model: &ShiftModel, path: &SamplePath, y: f64, opts: &SolverOptions) -> Result<Trajectory> {
    model.check_compatible(path.dim())?;
    let tau = path.horizon();
    match model.outcome_kind {
        OutcomeKind::Continuous => {
            if let Some(b) = model.budget {
                let y1 = b.y1.unwrap_or(f64::NEG_INFINITY);
                if !(y1..=b.y2).contains(&y) {
                    return Err(domain(format!("outcome {y} outside support [{y1}, {}]", b.y2)));
                }
            }
        }
        OutcomeKind::Survival => {
            if !(y > 0.0) {
                return Err(domain(format!("survival outcome must be positive, got {y}")));
            }
        }
    }
    if !y.is_finite() {
        return Err(domain("outcome must be finite"));
    }
    let stop = match model.outcome_kind {
        OutcomeKind::Survival => y.min(tau),
        OutcomeKind::Continuous => tau,
    };

    let mut knots: Vec<f64> = vec![0.0, tau, stop];
    knots.extend(path.jump_times());
    knots.extend(model.family.time_breaks().into_iter().filter(|t| (0.0..=tau).contains(t)));
    knots.extend(opts.extra_mesh.iter().copied().filter(|t| (0.0..=tau).contains(t)));
    knots.sort_by(f64::total_cmp);
    knots.dedup();

    let mut points: Vec<(f64, f64)> = knots.iter().filter(|&&t| t >= stop).map(|&t| (t, y)).collect();
    let lower: Vec<f64> = knots.iter().copied().filter(|&t| t <= stop).collect();
    let mut report = SolverReport::default();
    let mut x = y;
    let mut below = Vec::new();
    for w in lower.windows(2).rev() {
        let (a, b) = (w[0], w[1]);
        let state = path.value_at(a)?;
        below.clear();
        let surface = model.switch_offset().map(|w| move |xv: f64, t: f64| xv - t - w);
        let guard = |xv: f64, t: f64| -> Result<()> {
            if model.outcome_kind != OutcomeKind::Survival || xv - t > opts.survival_tol {
                return Ok(());
            }
            let lim = model.diagonal_limit_with_state(t, state);
            if xv - t < -opts.survival_tol || lim.exceeds_one {
                return Err(Error::ModelValidity(format!(
                    "X({t}) = {xv} reached the diagonal where lim D = {}; the survival bound D <= 1 fails",
                    lim.value
                )));
            }
            Ok(())
        };
        x = integrate_segment(
            |xv, t| model.shift_with_state(xv, t, state),
            surface.as_ref().map(|g| g as &dyn Fn(f64, f64) -> f64),
            &guard,
            b,
            a,
            x,
            opts,
            &mut report,
            &mut below,
        )?;
        report.segments += 1;
        if opts.record_steps {
            points.extend(below.iter().copied());
        }
        points.push((a, x));
    }
    points.sort_by(|p, q| p.0.total_cmp(&q.0));
    points.dedup_by(|p, q| p.0 == q.0);
    let (mesh, values): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();

    if model.outcome_kind == OutcomeKind::Survival {
        if let Some((t, v)) = mesh
            .iter()
            .zip(&values)
            .find(|(&t, &v)| t < y && v < t - opts.survival_tol)
        {
            return Err(Error::ModelValidity(format!(
                "X({t}) = {v} fell below the diagonal; the shift function violates the survival bound"
            )));
        }
    }
    Ok(Trajectory {
        mesh,
        values,
        final_value: y,
        report,
    })
}

/// `X(t)` at each of `times`. Shift families that ignore `y` use the exact
/// backward integral of the piecewise-constant `D`; others run
/// [`solve_backward`] with `times` added to the mesh.
pub fn mimic_at_times(
    model: &ShiftModel,
    path: &SamplePath,
    y: f64,
    times: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<f64>> {
    if !model.family.is_y_independent() {
        let mut o = opts.clone();
        o.extra_mesh.extend_from_slice(times);
        o.record_steps = false;
        let traj = solve_backward(model, path, y, &o)?;
        return times.iter().map(|&t| traj.value_at(t)).collect();
    }
    model.check_compatible(path.dim())?;
    let tau = path.horizon();
    if !y.is_finite() || (model.outcome_kind == OutcomeKind::Survival && !(y > 0.0)) {
        return Err(domain(format!("invalid outcome {y}")));
    }
    if let Some(&bad) = times.iter().find(|t| !(0.0..=tau).contains(*t)) {
        return Err(domain(format!("t = {bad} outside [0, {tau}]")));
    }
    let stop = match model.outcome_kind {
        OutcomeKind::Survival => y.min(tau),
        OutcomeKind::Continuous => tau,
    };
    let mut knots: Vec<f64> = times.iter().copied().filter(|&t| t < stop).collect();
    knots.extend(path.jump_times().iter().copied().filter(|&t| t < stop));
    knots.push(stop);
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    // X at each knot, accumulated from the right
    let mut xs = vec![y; knots.len()];
    for i in (0..knots.len() - 1).rev() {
        let d = model.shift_with_state(y, knots[i], path.value_at(knots[i])?);
        xs[i] = xs[i + 1] - d * (knots[i + 1] - knots[i]);
    }
    Ok(times
        .iter()
        .map(|&t| {
            if t >= stop {
                y
            } else {
                xs[knots.partition_point(|&k| k < t)]
            }
        })
        .collect())
}

/// `sup |a − b|` over a shared mesh.
pub fn measured_sup_gap(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.mesh != b.mesh {
        return Err(domain("trajectories do not share a mesh"));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// `∫₀^τ e^{C s} |gap(X(s), s)| ds` by trapezoid quadrature on the trajectory
/// mesh, bisecting intervals adaptively until the total moves by less than 0.1%.
pub fn gronwall_gap_bound(
    traj: &Trajectory,
    shift_gap: impl Fn(f64, f64) -> f64,
    budget: &RegularityBudget,
) -> Result<f64> {
    gronwall_gap_bound_with_constant(traj, shift_gap, gronwall_constant(budget))
}

pub fn gronwall_gap_bound_with_constant(traj: &Trajectory, shift_gap: impl Fn(f64, f64) -> f64, c: f64) -> Result<f64> {
    if !(c >= 0.0) {
        return Err(domain(format!("Lipschitz constant must be >= 0, got {c}")));
    }
    let integrand = |s: f64, x: f64| {
        let g = shift_gap(x, s).abs();
        if g == 0.0 {
            0.0
        } else {
            (c * s).exp() * g
        }
    };
    let vals: Vec<f64> = traj.mesh.iter().zip(&traj.values).map(|(&s, &x)| integrand(s, x)).collect();
    let coarse: f64 = traj
        .mesh
        .windows(2)
        .zip(vals.windows(2))
        .map(|(tw, vw)| 0.5 * (tw[1] - tw[0]) * (vw[0] + vw[1]))
        .sum();
    if !coarse.is_finite() {
        // e^{Cs} overflowed (or the gap is undefined): nothing finite to report.
        return Ok(if coarse.is_nan() { f64::NAN } else { f64::INFINITY });
    }
    // Local tolerance per interval, scaled so the summed error stays near 0.1%.
    let budget_per_width = 1e-3 * coarse.abs().max(f64::MIN_POSITIVE) / (traj.mesh[traj.mesh.len() - 1] - traj.mesh[0]).max(f64::MIN_POSITIVE);
    let mut total = 0.0;
    let mut stack: Vec<(f64, f64, f64, f64, u32)> = traj
        .mesh
        .windows(2)
        .zip(vals.windows(2))
        .map(|(tw, vw)| (tw[0], tw[1], vw[0], vw[1], 0))
        .collect();
    while let Some((a, b, fa, fb, depth)) = stack.pop() {
        let whole = 0.5 * (b - a) * (fa + fb);
        let mid = 0.5 * (a + b);
        let fm = integrand(mid, traj.value_at(mid)?);
        let halves = 0.25 * (b - a) * (fa + 2.0 * fm + fb);
        if depth >= 24 || (halves - whole).abs() <= budget_per_width * (b - a) || !halves.is_finite() {
            total += halves;
        } else {
            stack.push((a, mid, fa, fm, depth + 1));
            stack.push((mid, b, fm, fb, depth + 1));
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurvivalReport {
    pub pass: bool,
    /// Largest `t − X(t)` over mesh points with `t < Y` (negative when never below).
    pub worst_below_diagonal: f64,
    pub worst_below_at: Option<f64>,
    /// Largest `|X(t) − Y|` over mesh points with `t ≥ Y`.
    pub worst_after_death: f64,
    pub worst_after_at: Option<f64>,
}

pub fn check_survival_constraints(traj: &Trajectory, y: f64, tol: f64) -> SurvivalReport {
    let mut r = SurvivalReport {
        pass: true,
        worst_below_diagonal: f64::NEG_INFINITY,
        worst_below_at: None,
        worst_after_death: 0.0,
        worst_after_at: None,
    };
    for (&t, &x) in traj.mesh.iter().zip(&traj.values) {
        if t < y {
            if t - x > r.worst_below_diagonal {
                r.worst_below_diagonal = t - x;
                r.worst_below_at = Some(t);
            }
        } else if (x - y).abs() > r.worst_after_death || r.worst_after_at.is_none() {
            r.worst_after_death = (x - y).abs();
            r.worst_after_at = Some(t);
        }
    }
    r.pass = r.worst_below_diagonal <= tol && r.worst_after_death <= tol;
    r
}
