//! Adaptive Dormand-Prince 5(4) integration of hybrid dynamics with guard
//! detection, fixed-step trace extraction and simulation-equivalent
//! reachability labels.

use std::io::Write;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{HybridModel, State};

/// Which solver states are tested against the unsafe set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UnsafeCheck {
    /// Grid points of the fixed-step trace only.
    GridOnly,
    /// Grid points, every accepted solver step and both ends of every jump.
    #[default]
    AllSteps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    /// Width of the bisection bracket when locating a jump. `None` means
    /// `1e-9 * T` for a simulation of horizon `T`.
    pub guard_tol: Option<f64>,
    pub max_internal_steps: usize,
    pub unsafe_check: UnsafeCheck,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-6,
            abs_tol: 1e-9,
            max_step: 0.5,
            guard_tol: None,
            max_internal_steps: 10_000_000,
            unsafe_check: UnsafeCheck::AllSteps,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.rel_tol, self.abs_tol, self.max_step]
            .into_iter()
            .chain(self.guard_tol)
            .all(|v| v > 0.0 && v.is_finite());
        if !positive || self.max_internal_steps == 0 {
            return Err(Error::InvalidArgument(
                "integrator tolerances, max_step and step budget must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn guard_tol_for(&self, horizon: f64) -> f64 {
        self.guard_tol.unwrap_or(1e-9 * horizon.max(1e-300))
    }
}

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// error coefficients: 5th-order minus embedded 4th-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// continuous extension
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

/// One continuous flow segment in a fixed mode, advanced one accepted step
/// at a time. After every step the fourth-order dense interpolant of that
/// step is available through [`Dopri5::dense`].
struct Dopri5<'a, M: HybridModel + ?Sized> {
    model: &'a M,
    cfg: &'a IntegratorConfig,
    mode: usize,
    t: f64,
    y: Vec<f64>,
    h: f64,
    k: [Vec<f64>; 7],
    y_new: Vec<f64>,
    y_stage: Vec<f64>,
    t_old: f64,
    h_old: f64,
    cont: [Vec<f64>; 5],
    steps: usize,
}

impl<'a, M: HybridModel + ?Sized> Dopri5<'a, M> {
    fn new(model: &'a M, cfg: &'a IntegratorConfig, mode: usize, t0: f64, y0: &[f64]) -> Result<Self> {
        let n = y0.len();
        let mut k: [Vec<f64>; 7] = Default::default();
        for stage in k.iter_mut() {
            stage.resize(n, 0.0);
        }
        model
            .derivative(mode, y0, &mut k[0])
            .map_err(|e| blow_up(t0, e))?;
        let mut solver = Dopri5 {
            model,
            cfg,
            mode,
            t: t0,
            y: y0.to_vec(),
            h: 0.0,
            k,
            y_new: vec![0.0; n],
            y_stage: vec![0.0; n],
            t_old: t0,
            h_old: 0.0,
            cont: Default::default(),
            steps: 0,
        };
        solver.h = solver.initial_step()?;
        Ok(solver)
    }

    fn scale(&self, a: f64, b: f64) -> f64 {
        self.cfg.abs_tol + self.cfg.rel_tol * a.abs().max(b.abs())
    }

    /// Starting step size heuristic (Hairer, Norsett & Wanner, II.4).
    fn initial_step(&mut self) -> Result<f64> {
        let n = self.y.len();
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for i in 0..n {
            let sc = self.scale(self.y[i], self.y[i]);
            d0 += (self.y[i] / sc).powi(2);
            d1 += (self.k[0][i] / sc).powi(2);
        }
        d0 = (d0 / n as f64).sqrt();
        d1 = (d1 / n as f64).sqrt();
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(self.cfg.max_step);
        for i in 0..n {
            self.y_stage[i] = self.y[i] + h0 * self.k[0][i];
        }
        let mut f1 = vec![0.0; n];
        let d2 = match self.model.derivative(self.mode, &self.y_stage, &mut f1) {
            Ok(()) => {
                let mut acc = 0.0;
                for i in 0..n {
                    let sc = self.scale(self.y[i], self.y[i]);
                    acc += ((f1[i] - self.k[0][i]) / sc).powi(2);
                }
                (acc / n as f64).sqrt() / h0
            }
            Err(_) => return Ok(h0 * 1e-3),
        };
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(1.0 / 5.0)
        };
        Ok((100.0 * h0).min(h1).min(self.cfg.max_step))
    }

    /// Evaluates the seven stages for step `h`. Returns `false` if some stage
    /// produced a non-finite value (the step must shrink).
    fn stages(&mut self, h: f64) -> bool {
        let n = self.y.len();
        macro_rules! stage {
            ($dst:expr, $($a:expr => $src:expr),+) => {{
                for i in 0..n {
                    self.y_stage[i] = self.y[i] + h * (0.0 $(+ $a * self.k[$src][i])+);
                }
                if self.model.derivative(self.mode, &self.y_stage, &mut self.k[$dst]).is_err() {
                    return false;
                }
            }};
        }
        stage!(1, A21 => 0);
        stage!(2, A31 => 0, A32 => 1);
        stage!(3, A41 => 0, A42 => 1, A43 => 2);
        stage!(4, A51 => 0, A52 => 1, A53 => 2, A54 => 3);
        stage!(5, A61 => 0, A62 => 1, A63 => 2, A64 => 3, A65 => 4);
        for i in 0..n {
            self.y_new[i] = self.y[i]
                + h * (A71 * self.k[0][i]
                    + A73 * self.k[2][i]
                    + A74 * self.k[3][i]
                    + A75 * self.k[4][i]
                    + A76 * self.k[5][i]);
        }
        if self.model.derivative(self.mode, &self.y_new, &mut self.k[6]).is_err() {
            return false;
        }
        self.y_new.iter().all(|v| v.is_finite())
    }

    fn error_norm(&self, h: f64) -> f64 {
        let n = self.y.len();
        let mut acc = 0.0;
        for i in 0..n {
            let err = h
                * (E1 * self.k[0][i]
                    + E3 * self.k[2][i]
                    + E4 * self.k[3][i]
                    + E5 * self.k[4][i]
                    + E6 * self.k[5][i]
                    + E7 * self.k[6][i]);
            let sc = self.scale(self.y[i], self.y_new[i]);
            acc += (err / sc).powi(2);
        }
        (acc / n as f64).sqrt()
    }

    /// Takes one accepted step. When `t_stop` is given the step never passes it.
    fn step(&mut self, t_stop: Option<f64>) -> Result<()> {
        let h_min = 16.0 * f64::EPSILON * self.t.abs().max(1.0);
        let mut h = self.h.min(self.cfg.max_step);
        let mut clipped = false;
        if let Some(stop) = t_stop {
            if self.t + h >= stop {
                h = stop - self.t;
                clipped = true;
            }
        }
        loop {
            if self.steps >= self.cfg.max_internal_steps {
                return Err(Error::Divergence {
                    t: self.t,
                    max_steps: self.cfg.max_internal_steps,
                });
            }
            if h < h_min && !clipped {
                return Err(Error::BlowUp {
                    t: self.t,
                    cause: format!("step size underflow ({h:e}) in mode {}", self.mode),
                });
            }
            self.steps += 1;
            if !self.stages(h) {
                h *= FAC_MIN;
                clipped = false;
                continue;
            }
            let err = self.error_norm(h);
            if !err.is_finite() {
                h *= FAC_MIN;
                clipped = false;
                continue;
            }
            let fac = if err == 0.0 {
                FAC_MAX
            } else {
                (SAFETY * err.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
            };
            if err <= 1.0 {
                self.accept(h);
                if !clipped {
                    self.h = (h * fac).min(self.cfg.max_step);
                }
                return Ok(());
            }
            h *= fac.min(1.0);
            clipped = false;
        }
    }

    fn accept(&mut self, h: f64) {
        let n = self.y.len();
        for c in self.cont.iter_mut() {
            c.resize(n, 0.0);
        }
        for i in 0..n {
            let dy = self.y_new[i] - self.y[i];
            let bspl = h * self.k[0][i] - dy;
            self.cont[0][i] = self.y[i];
            self.cont[1][i] = dy;
            self.cont[2][i] = bspl;
            self.cont[3][i] = dy - h * self.k[6][i] - bspl;
            self.cont[4][i] = h
                * (D1 * self.k[0][i]
                    + D3 * self.k[2][i]
                    + D4 * self.k[3][i]
                    + D5 * self.k[4][i]
                    + D6 * self.k[5][i]
                    + D7 * self.k[6][i]);
        }
        self.t_old = self.t;
        self.h_old = h;
        self.t += h;
        std::mem::swap(&mut self.y, &mut self.y_new);
        // first-same-as-last
        let (first, rest) = self.k.split_at_mut(1);
        std::mem::swap(&mut first[0], &mut rest[5]);
    }

    /// State of the last accepted step at time `t` in `[t_old, t]`.
    fn dense(&self, t: f64) -> Vec<f64> {
        let s = if self.h_old > 0.0 { (t - self.t_old) / self.h_old } else { 1.0 };
        let s1 = 1.0 - s;
        (0..self.y.len())
            .map(|i| {
                self.cont[0][i]
                    + s * (self.cont[1][i]
                        + s1 * (self.cont[2][i] + s * (self.cont[3][i] + s1 * self.cont[4][i])))
            })
            .collect()
    }
}

fn blow_up(t: f64, e: Error) -> Error {
    match e {
        Error::Singularity { .. } => Error::BlowUp { t, cause: e.to_string() },
        other => other,
    }
}

/// Integrates the flow of `s.mode` from `t0` to `t1` without handling jumps.
///
/// Returns the state at `t1` together with every accepted intermediate state
/// (time, state), the last of which is the state at `t1`.
pub fn integrate_segment<M: HybridModel + ?Sized>(
    model: &M,
    s: &State,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<(State, Vec<(f64, State)>)> {
    cfg.validate()?;
    if !(t1 > t0) {
        return Err(Error::InvalidArgument(format!("need t1 > t0, got [{t0}, {t1}]")));
    }
    if !s.is_finite() {
        return Err(Error::InvalidArgument("initial state is not finite".into()));
    }
    let mut solver = Dopri5::new(model, cfg, s.mode, t0, &s.x)?;
    let mut visited = Vec::new();
    while solver.t < t1 {
        solver.step(Some(t1))?;
        visited.push((solver.t, State::new(s.mode, solver.y.clone())));
    }
    Ok((State::new(s.mode, solver.y.clone()), visited))
}

/// Result of locating a guard crossing.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpLocation {
    pub t: f64,
    pub state: State,
    pub iterations: usize,
}

/// Bisects `[t_lo, t_hi]` until the bracket is narrower than `tol`.
///
/// `state_at` evaluates the continuous state inside the bracket. The guard
/// must be disabled at `t_lo` and enabled at `t_hi`; the returned state is
/// the first bracket end where it is enabled.
pub fn locate_jump<M, F>(
    model: &M,
    mode: usize,
    state_at: F,
    t_lo: f64,
    t_hi: f64,
    tol: f64,
) -> Result<JumpLocation>
where
    M: HybridModel + ?Sized,
    F: Fn(f64) -> Vec<f64>,
{
    let enabled = |t: f64| model.guard(&State::new(mode, state_at(t))).is_some();
    if !(t_hi > t_lo) || enabled(t_lo) || !enabled(t_hi) || !(tol > 0.0) {
        return Err(Error::Contract(format!(
            "invalid jump bracket [{t_lo}, {t_hi}]: guard must switch from disabled to enabled"
        )));
    }
    let (mut lo, mut hi) = (t_lo, t_hi);
    let mut iterations = 0;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if enabled(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
        iterations += 1;
    }
    Ok(JumpLocation {
        t: hi,
        state: State::new(mode, state_at(hi)),
        iterations,
    })
}

/// Something the hybrid simulation passed through.
#[derive(Debug, Clone, Copy)]
pub enum SimEvent<'s> {
    /// The `index`-th point of the fixed-step trace.
    Grid { index: usize, t: f64, state: &'s State },
    /// End of an accepted solver step.
    Step { t: f64, state: &'s State },
    /// Discrete transition.
    Jump { t: f64, pre: &'s State, post: &'s State },
}

/// Number of trace steps `k = floor(T/h)`, robust to representation error in
/// `T/h` (e.g. 5/0.01).
pub fn grid_steps(horizon: f64, h: f64) -> usize {
    let ratio = horizon / h;
    let rounded = ratio.round();
    if (ratio - rounded).abs() <= 1e-9 * rounded.max(1.0) {
        rounded as usize
    } else {
        ratio.floor() as usize
    }
}

/// Runs the hybrid simulation from `s0` over `[0, horizon]`, reporting grid
/// points (multiples of `h`), accepted steps and jumps to `visit` in time
/// order. Stops early when `visit` breaks. Returns the number of grid points
/// emitted.
///
/// Solver steps are never clipped to the horizon, so the step sequence for a
/// shorter horizon is a prefix of the sequence for a longer one.
pub fn drive<M, V>(
    model: &M,
    s0: &State,
    horizon: f64,
    h: f64,
    cfg: &IntegratorConfig,
    mut visit: V,
) -> Result<usize>
where
    M: HybridModel + ?Sized,
    V: FnMut(SimEvent<'_>) -> ControlFlow<()>,
{
    cfg.validate()?;
    model.check_state(s0)?;
    if !(horizon > 0.0 && h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need T > 0 and h > 0, got T = {horizon}, h = {h}"
        )));
    }
    if !s0.is_finite() {
        return Err(Error::InvalidArgument("initial state is not finite".into()));
    }
    let k_max = grid_steps(horizon, h);
    let guard_tol = cfg.guard_tol_for(horizon);

    let mut next_grid = 0usize;
    if visit(SimEvent::Grid { index: 0, t: 0.0, state: s0 }).is_break() {
        return Ok(1);
    }
    next_grid += 1;

    let mut t = 0.0;
    let mut state = s0.clone();
    let mut refractory = false;
    if model.guard(&state).is_some() {
        let post = model.reset(&state)?;
        if visit(SimEvent::Jump { t, pre: &state, post: &post }).is_break() {
            return Ok(next_grid);
        }
        refractory = model.guard(&post).is_some();
        state = post;
    }

    let mut steps_total = 0usize;
    'segments: loop {
        let mut solver = Dopri5::new(model, cfg, state.mode, t, &state.x)?;
        solver.steps = steps_total;
        loop {
            if solver.t >= horizon && next_grid > k_max {
                return Ok(next_grid);
            }
            solver.step(None)?;
            steps_total = solver.steps;
            let end = State::new(state.mode, solver.y.clone());
            let mut enabled = model.guard(&end).is_some();
            if refractory {
                if !enabled {
                    refractory = false;
                }
                enabled = false;
            }
            let (t_old, t_new) = (solver.t_old, solver.t);

            if enabled {
                let loc = locate_jump(model, state.mode, |tau| solver.dense(tau), t_old, t_new, guard_tol)?;
                if loc.t > horizon {
                    // the jump happens past the horizon: finish the grid and stop
                    emit_grid(&solver, state.mode, t_new.min(horizon), k_max, h, &mut next_grid, &mut visit)?;
                    return Ok(next_grid);
                }
                if emit_grid(&solver, state.mode, loc.t, k_max, h, &mut next_grid, &mut visit)? {
                    return Ok(next_grid);
                }
                let post = model.reset(&loc.state)?;
                if visit(SimEvent::Jump { t: loc.t, pre: &loc.state, post: &post }).is_break() {
                    return Ok(next_grid);
                }
                refractory = model.guard(&post).is_some();
                t = loc.t;
                state = post;
                continue 'segments;
            }

            if emit_grid(&solver, state.mode, t_new, k_max, h, &mut next_grid, &mut visit)? {
                return Ok(next_grid);
            }
            if t_new <= horizon && visit(SimEvent::Step { t: t_new, state: &end }).is_break() {
                return Ok(next_grid);
            }
        }
    }
}

/// Emits the grid points with time `<= until` covered by the solver's last
/// step. Returns `true` when the visitor asked to stop.
fn emit_grid<M, V>(
    solver: &Dopri5<'_, M>,
    mode: usize,
    until: f64,
    k_max: usize,
    h: f64,
    next_grid: &mut usize,
    visit: &mut V,
) -> Result<bool>
where
    M: HybridModel + ?Sized,
    V: FnMut(SimEvent<'_>) -> ControlFlow<()>,
{
    while *next_grid <= k_max {
        let tk = *next_grid as f64 * h;
        if tk > until {
            break;
        }
        let s = State::new(mode, solver.dense(tk));
        if !s.is_finite() {
            return Err(Error::BlowUp { t: tk, cause: "non-finite interpolated state".into() });
        }
        let flow = visit(SimEvent::Grid { index: *next_grid, t: tk, state: &s });
        *next_grid += 1;
        if flow.is_break() {
            return Ok(true);
        }
    }
    Ok(false)
}

/// A recorded jump: time, pre-jump and post-jump state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpRecord {
    pub t: f64,
    pub pre: State,
    pub post: State,
}

/// Fixed-step trace `(M(s,0), M(s,h), ..., M(s,kh))` with `k = floor(T/h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub step: f64,
    pub states: Vec<State>,
    pub jumps: Vec<JumpRecord>,
    /// Set when integration failed before the horizon; `states` then holds
    /// the prefix computed so far.
    pub partial: Option<Error>,
}

impl SimTrace {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.states.len()).map(|i| i as f64 * self.step)
    }

    pub fn is_complete(&self) -> bool {
        self.partial.is_none()
    }

    /// Writes `t,mode,x1..xn,jump_flag`. `jump_flag` is 1 on the first grid
    /// point at or after each jump.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let n = self.states.first().map_or(0, |s| s.x.len());
        let mut header = vec!["t".to_string(), "mode".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.push("jump_flag".into());
        writeln!(out, "{}", header.join(","))?;
        let mut pending = self.jumps.iter().map(|j| j.t).peekable();
        for (i, s) in self.states.iter().enumerate() {
            let t = i as f64 * self.step;
            let mut flag = 0;
            while pending.peek().is_some_and(|&tj| tj <= t) {
                pending.next();
                flag = 1;
            }
            let mut row = vec![fmt_f64(t), s.mode.to_string()];
            row.extend(s.x.iter().map(|v| fmt_f64(*v)));
            row.push(flag.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Shortest decimal representation that parses back to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn simulate<M: HybridModel + ?Sized>(
    model: &M,
    s0: &State,
    horizon: f64,
    h: f64,
    cfg: &IntegratorConfig,
) -> Result<SimTrace> {
    let mut states = Vec::with_capacity(grid_steps(horizon, h) + 1);
    let mut jumps = Vec::new();
    let run = drive(model, s0, horizon, h, cfg, |ev| {
        match ev {
            SimEvent::Grid { state, .. } => states.push(state.clone()),
            SimEvent::Jump { t, pre, post } => jumps.push(JumpRecord { t, pre: pre.clone(), post: post.clone() }),
            SimEvent::Step { .. } => {}
        }
        ControlFlow::Continue(())
    });
    match run {
        Ok(_) => Ok(SimTrace { step: h, states, jumps, partial: None }),
        Err(e @ (Error::InvalidArgument(_) | Error::Contract(_))) => Err(e),
        Err(e) => Ok(SimTrace { step: h, states, jumps, partial: Some(e) }),
    }
}

/// Simulation-equivalent time-bounded reachability of the model's unsafe set.
///
/// A blow-up before the horizon without an earlier unsafe hit is an error,
/// not a label.
pub fn reach_label<M: HybridModel + ?Sized>(
    model: &M,
    s0: &State,
    horizon: f64,
    h: f64,
    cfg: &IntegratorConfig,
) -> Result<bool> {
    model.check_state(s0)?;
    if model.unsafe_contains(s0) {
        return Ok(true);
    }
    let strict = cfg.unsafe_check == UnsafeCheck::AllSteps;
    let mut hit = false;
    drive(model, s0, horizon, h, cfg, |ev| {
        hit = match ev {
            SimEvent::Grid { state, .. } => model.unsafe_contains(state),
            SimEvent::Step { state, .. } => strict && model.unsafe_contains(state),
            SimEvent::Jump { pre, post, .. } => {
                strict && (model.unsafe_contains(pre) || model.unsafe_contains(post))
            }
        };
        if hit {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    Ok(hit)
}
