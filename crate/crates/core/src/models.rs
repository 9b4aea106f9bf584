//! Hybrid-system benchmarks: inverted pendulum, spiking neuron and quadcopter.
//!
//! Every model is deterministic. Continuous state lives in `State::x`; the
//! discrete location lives in `State::mode` (zero-based).

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_4;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of the hybrid state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub mode: usize,
    pub x: Vec<f64>,
}

impl State {
    pub fn new(mode: usize, x: Vec<f64>) -> Self {
        State { mode, x }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite())
    }
}

/// Axis-aligned box, one closed interval per continuous variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::InvalidArgument(format!(
                "box bounds have lengths {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidArgument("box requires lo <= hi".into()));
        }
        Ok(DomainBox { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn clip(&self, x: &mut [f64]) {
        for (v, (lo, hi)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*lo, *hi);
        }
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}

/// Static description of a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub dim: usize,
    pub mode_count: usize,
    pub var_names: Vec<String>,
    pub domain: DomainBox,
    pub default_t: f64,
    pub default_h: f64,
    pub params: BTreeMap<String, f64>,
}

/// Dynamics, jumps and unsafe set of a deterministic hybrid system.
pub trait HybridModel: Send + Sync {
    fn spec(&self) -> &ModelSpec;

    /// Writes the time-derivative of `x` in `mode` into `dx`.
    fn derivative(&self, mode: usize, x: &[f64], dx: &mut [f64]) -> Result<()>;

    /// Target mode of the jump enabled at `s`, if any.
    fn guard(&self, s: &State) -> Option<usize>;

    /// Post-jump state. Fails when no jump is enabled at `s`.
    fn reset(&self, s: &State) -> Result<State>;

    fn unsafe_contains(&self, s: &State) -> bool;

    /// Mode assigned to freshly sampled initial states.
    fn initial_mode(&self) -> usize {
        0
    }

    fn check_state(&self, s: &State) -> Result<()> {
        let spec = self.spec();
        if s.x.len() != spec.dim {
            return Err(Error::InvalidArgument(format!(
                "{} expects {} variables, got {}",
                spec.name,
                spec.dim,
                s.x.len()
            )));
        }
        if s.mode >= spec.mode_count {
            return Err(Error::InvalidArgument(format!(
                "{} has {} modes, got mode {}",
                spec.name, spec.mode_count, s.mode
            )));
        }
        Ok(())
    }
}

fn finite(model: &'static str, term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Singularity { model, term })
    }
}

fn apply_overrides(
    model: &str,
    params: &mut BTreeMap<String, f64>,
    overrides: &BTreeMap<String, f64>,
) -> Result<()> {
    for (k, v) in overrides {
        match params.get_mut(k) {
            Some(slot) => *slot = *v,
            None => {
                return Err(Error::InvalidArgument(format!(
                    "model {model} has no parameter '{k}' (known: {})",
                    params.keys().cloned().collect::<Vec<_>>().join(", ")
                )))
            }
        }
    }
    Ok(())
}

fn check_horizon(spec: &ModelSpec) -> Result<()> {
    let (t, h) = (spec.default_t, spec.default_h);
    if !(t > 0.0 && h > 0.0 && h <= t) {
        return Err(Error::InvalidArgument(format!(
            "{}: need 0 < h <= T, got T = {t}, h = {h}",
            spec.name
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Inverted pendulum

/// Inverted pendulum on a cart under a switching energy-based controller.
///
/// Variables: `theta` (rad), `omega` (rad/s). Unsafe when |theta| > pi/4.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: ModelSpec,
    /// Exponent of omega in the energy term `0.5 * omega^p + (cos theta - 1)`.
    energy_exponent: i32,
    switch_radius: f64,
}

impl Pendulum {
    pub fn new() -> Self {
        Self::with_params(&BTreeMap::new()).expect("default pendulum parameters are valid")
    }

    pub fn with_params(overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let mut params = BTreeMap::from([
            ("T".to_string(), 5.0),
            ("h".to_string(), 0.01),
            ("energy_exponent".to_string(), 1.0),
            ("switch_radius".to_string(), 1.85),
        ]);
        apply_overrides("pendulum", &mut params, overrides)?;
        let energy_exponent = params["energy_exponent"];
        if energy_exponent != 1.0 && energy_exponent != 2.0 {
            return Err(Error::InvalidArgument(
                "pendulum energy_exponent must be 1 or 2".into(),
            ));
        }
        let spec = ModelSpec {
            name: "pendulum".into(),
            dim: 2,
            mode_count: 1,
            var_names: vec!["theta".into(), "omega".into()],
            domain: DomainBox::new(vec![-FRAC_PI_4, -1.5], vec![FRAC_PI_4, 1.5])?,
            default_t: params["T"],
            default_h: params["h"],
            params: params.clone(),
        };
        check_horizon(&spec)?;
        Ok(Pendulum {
            spec,
            energy_exponent: energy_exponent as i32,
            switch_radius: params["switch_radius"],
        })
    }

    pub fn energy(&self, theta: f64, omega: f64) -> f64 {
        0.5 * omega.powi(self.energy_exponent) + (theta.cos() - 1.0)
    }

    /// Force ratio `u = F / g` chosen by the four-branch controller.
    pub fn control_input(&self, theta: f64, omega: f64) -> Result<f64> {
        let e = self.energy(theta, omega);
        let u = if (-1.0..=1.0).contains(&e) {
            if omega.abs() + theta.abs() <= self.switch_radius {
                (2.0 * omega + theta + theta.sin()) / theta.cos()
            } else {
                0.0
            }
        } else if e < -1.0 {
            omega / (1.0 + omega.abs()) * theta.cos()
        } else if e > 1.0 {
            -omega / (1.0 + omega.abs()) * theta.cos()
        } else {
            f64::NAN
        };
        finite("pendulum", "control input u (cos(theta) divisor)", u)
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl HybridModel for Pendulum {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn derivative(&self, _mode: usize, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let (theta, omega) = (x[0], x[1]);
        let u = self.control_input(theta, omega)?;
        dx[0] = omega;
        dx[1] = finite("pendulum", "omega rate", theta.sin() - theta.cos() * u)?;
        Ok(())
    }

    fn guard(&self, _s: &State) -> Option<usize> {
        None
    }

    fn reset(&self, _s: &State) -> Result<State> {
        Err(Error::Contract("pendulum has no jumps".into()))
    }

    fn unsafe_contains(&self, s: &State) -> bool {
        s.x[0] < -FRAC_PI_4 || s.x[0] > FRAC_PI_4
    }
}

// ---------------------------------------------------------------------------
// Spiking neuron

/// Izhikevich spiking neuron with reset on spike.
///
/// Variables: membrane potential `v` (mV) and recovery `u`. Unsafe when the
/// potential undershoots the resting region, `v <= -68.5`.
#[derive(Debug, Clone)]
pub struct Neuron {
    spec: ModelSpec,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    input: f64,
    spike: f64,
    floor: f64,
}

impl Neuron {
    pub fn new() -> Self {
        Self::with_params(&BTreeMap::new()).expect("default neuron parameters are valid")
    }

    pub fn with_params(overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let mut params = BTreeMap::from([
            ("T".to_string(), 20.0),
            ("h".to_string(), 0.01),
            ("a".to_string(), 0.02),
            ("b".to_string(), 0.2),
            ("c".to_string(), -65.0),
            ("d".to_string(), 8.0),
            ("I".to_string(), 40.0),
            ("v_spike".to_string(), 30.0),
            ("v_unsafe".to_string(), -68.5),
        ]);
        apply_overrides("neuron", &mut params, overrides)?;
        let spike = params["v_spike"];
        let floor = params["v_unsafe"];
        let spec = ModelSpec {
            name: "neuron".into(),
            dim: 2,
            mode_count: 1,
            var_names: vec!["v".into(), "u".into()],
            domain: DomainBox::new(vec![floor, 0.0], vec![spike, 25.0])?,
            default_t: params["T"],
            default_h: params["h"],
            params: params.clone(),
        };
        check_horizon(&spec)?;
        if params["c"] >= spike {
            return Err(Error::InvalidArgument(
                "neuron reset potential c must lie below the spike threshold".into(),
            ));
        }
        Ok(Neuron {
            spec,
            a: params["a"],
            b: params["b"],
            c: params["c"],
            d: params["d"],
            input: params["I"],
            spike,
            floor,
        })
    }
}

impl Default for Neuron {
    fn default() -> Self {
        Self::new()
    }
}

impl HybridModel for Neuron {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn derivative(&self, _mode: usize, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let (v, u) = (x[0], x[1]);
        dx[0] = finite("neuron", "v rate", 0.04 * v * v + 5.0 * v + 140.0 - u + self.input)?;
        dx[1] = finite("neuron", "u rate", self.a * (self.b * v - u))?;
        Ok(())
    }

    fn guard(&self, s: &State) -> Option<usize> {
        (s.x[0] >= self.spike).then_some(0)
    }

    fn reset(&self, s: &State) -> Result<State> {
        if self.guard(s).is_none() {
            return Err(Error::Contract(format!(
                "neuron reset requires v >= {}, got v = {}",
                self.spike, s.x[0]
            )));
        }
        Ok(State::new(0, vec![self.c, s.x[1] + self.d]))
    }

    fn unsafe_contains(&self, s: &State) -> bool {
        s.x[0] <= self.floor
    }
}

// ---------------------------------------------------------------------------
// Quadcopter

/// Two-mode quadcopter altitude controller.
///
/// Variables, in order: body rates `wx, wy, wz` (rad/s), roll `phi`, pitch
/// `theta` (rad), vertical speed `zdot` (m/s) and altitude `z` (m). The rotor
/// speeds are fixed per mode: mode 0 (ascent) spins rotors (1, 0, 1, 0), mode
/// 1 (descent) spins (0, 1, 0, 1). Ascent switches to descent when `z`
/// reaches 500, descent switches back when `z` falls to 200. Unsafe when
/// `z <= 0`.
#[derive(Debug, Clone)]
pub struct Quadcopter {
    spec: ModelSpec,
    arm: f64,
    thrust: f64,
    drag: f64,
    mass: f64,
    yaw_drag: f64,
    gravity: f64,
    ixx: f64,
    iyy: f64,
    izz: f64,
    upper: f64,
    lower: f64,
    printed_ascent_signs: bool,
}

impl Quadcopter {
    pub const ASCENT: usize = 0;
    pub const DESCENT: usize = 1;

    pub fn new() -> Self {
        Self::with_params(&BTreeMap::new()).expect("default quadcopter parameters are valid")
    }

    pub fn with_params(overrides: &BTreeMap<String, f64>) -> Result<Self> {
        let mut params = BTreeMap::from([
            ("T".to_string(), 15.0),
            ("h".to_string(), 0.05),
            ("L".to_string(), 0.23),
            ("k".to_string(), 5.2),
            ("kd".to_string(), 7.5e-7),
            ("m".to_string(), 0.65),
            ("b".to_string(), 3.13e-5),
            ("g".to_string(), 9.8),
            ("Ixx".to_string(), 0.0075),
            ("Iyy".to_string(), 0.0075),
            ("Izz".to_string(), 0.013),
            ("z_upper".to_string(), 500.0),
            ("z_lower".to_string(), 200.0),
            ("printed_ascent_signs".to_string(), 0.0),
        ]);
        apply_overrides("quadcopter", &mut params, overrides)?;
        let spec = ModelSpec {
            name: "quadcopter".into(),
            dim: 7,
            mode_count: 2,
            var_names: ["wx", "wy", "wz", "phi", "theta", "zdot", "z"]
                .into_iter()
                .map(String::from)
                .collect(),
            domain: DomainBox::new(
                vec![-0.05, 0.0, -0.1, -0.2, -1.0, -150.0, 50.0],
                vec![0.05, 0.1, 0.1, 0.2, 0.4, 150.0, 100.0],
            )?,
            default_t: params["T"],
            default_h: params["h"],
            params: params.clone(),
        };
        check_horizon(&spec)?;
        if params["z_lower"] >= params["z_upper"] {
            return Err(Error::InvalidArgument(
                "quadcopter z_lower must lie below z_upper".into(),
            ));
        }
        Ok(Quadcopter {
            spec,
            arm: params["L"],
            thrust: params["k"],
            drag: params["kd"],
            mass: params["m"],
            yaw_drag: params["b"],
            gravity: params["g"],
            ixx: params["Ixx"],
            iyy: params["Iyy"],
            izz: params["Izz"],
            upper: params["z_upper"],
            lower: params["z_lower"],
            printed_ascent_signs: params["printed_ascent_signs"] != 0.0,
        })
    }

    pub fn rotor_speeds(mode: usize) -> [f64; 4] {
        if mode == Self::ASCENT {
            [1.0, 0.0, 1.0, 0.0]
        } else {
            [0.0, 1.0, 0.0, 1.0]
        }
    }
}

impl Default for Quadcopter {
    fn default() -> Self {
        Self::new()
    }
}

impl HybridModel for Quadcopter {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn derivative(&self, mode: usize, x: &[f64], dx: &mut [f64]) -> Result<()> {
        const NAME: &str = "quadcopter";
        let [wx, wy, wz, phi, theta, zdot, _z] = [x[0], x[1], x[2], x[3], x[4], x[5], x[6]];
        let [r1, r2, r3, r4] = Self::rotor_speeds(mode).map(|w| w * w);

        dx[0] = (self.arm * self.thrust * (r1 - r3) - (self.iyy - self.izz) * wy * wz) / self.ixx;
        dx[1] = (self.arm * self.thrust * (r2 - r4) - (self.izz - self.ixx) * wx * wz) / self.iyy;
        dx[2] = (self.yaw_drag * (r1 - r2 + r3 - r4) - (self.ixx - self.iyy) * wx * wy) / self.izz;

        // Euler-angle kinematics: invert the body-rate map
        //   wx = phi' - sin(theta) psi'
        //   wy = cos(phi) theta' + sin(phi) cos(theta) psi'
        //   wz = -sin(phi) theta' + cos(phi) cos(theta) psi'
        let (sp, cp) = phi.sin_cos();
        let (st, ct) = theta.sin_cos();
        let denom = finite(NAME, "sin(phi)^2 cos(theta) / cos(phi)", sp * sp * ct / cp)? + cp * ct;
        let psi_rate = finite(NAME, "yaw rate (cos(theta) divisor)", (sp / cp * wy + wz) / denom)?;
        dx[3] = finite(NAME, "roll rate", wx + st * psi_rate)?;
        dx[4] = finite(NAME, "pitch rate (cos(phi) divisor)", (wy - sp * ct * psi_rate) / cp)?;

        let lift = ct * self.thrust * (r1 + r2 + r3 + r4);
        let accel = if mode == Self::ASCENT {
            if self.printed_ascent_signs {
                (self.gravity + lift + self.drag * zdot) / self.mass
            } else {
                (-self.gravity + lift - self.drag * zdot) / self.mass
            }
        } else {
            (-self.gravity - lift - self.drag * zdot) / self.mass
        };
        dx[5] = finite(NAME, "vertical acceleration", accel)?;
        dx[6] = zdot;
        Ok(())
    }

    fn guard(&self, s: &State) -> Option<usize> {
        let z = s.x[6];
        match s.mode {
            Self::ASCENT if z >= self.upper => Some(Self::DESCENT),
            Self::DESCENT if z <= self.lower => Some(Self::ASCENT),
            _ => None,
        }
    }

    fn reset(&self, s: &State) -> Result<State> {
        match self.guard(s) {
            Some(target) => Ok(State::new(target, s.x.clone())),
            None => Err(Error::Contract(format!(
                "quadcopter has no jump enabled in mode {} at z = {}",
                s.mode, s.x[6]
            ))),
        }
    }

    fn unsafe_contains(&self, s: &State) -> bool {
        s.x[6] <= 0.0
    }
}

// ---------------------------------------------------------------------------
// Registry

pub const REGISTERED_MODELS: [&str; 3] = ["pendulum", "neuron", "quadcopter"];

/// One of the registered benchmarks, selectable by name.
#[derive(Debug, Clone)]
pub enum Benchmark {
    Pendulum(Pendulum),
    Neuron(Neuron),
    Quadcopter(Quadcopter),
}

impl Benchmark {
    pub fn by_name(name: &str) -> Result<Self> {
        Self::with_params(name, &BTreeMap::new())
    }

    pub fn with_params(name: &str, overrides: &BTreeMap<String, f64>) -> Result<Self> {
        match name {
            "pendulum" => Ok(Benchmark::Pendulum(Pendulum::with_params(overrides)?)),
            "neuron" => Ok(Benchmark::Neuron(Neuron::with_params(overrides)?)),
            "quadcopter" => Ok(Benchmark::Quadcopter(Quadcopter::with_params(overrides)?)),
            other => Err(Error::UnknownModel {
                name: other.to_string(),
                registered: REGISTERED_MODELS.join(", "),
            }),
        }
    }

    fn inner(&self) -> &dyn HybridModel {
        match self {
            Benchmark::Pendulum(m) => m,
            Benchmark::Neuron(m) => m,
            Benchmark::Quadcopter(m) => m,
        }
    }
}

impl HybridModel for Benchmark {
    fn spec(&self) -> &ModelSpec {
        self.inner().spec()
    }

    #[inline]
    fn derivative(&self, mode: usize, x: &[f64], dx: &mut [f64]) -> Result<()> {
        match self {
            Benchmark::Pendulum(m) => m.derivative(mode, x, dx),
            Benchmark::Neuron(m) => m.derivative(mode, x, dx),
            Benchmark::Quadcopter(m) => m.derivative(mode, x, dx),
        }
    }

    fn guard(&self, s: &State) -> Option<usize> {
        self.inner().guard(s)
    }

    fn reset(&self, s: &State) -> Result<State> {
        self.inner().reset(s)
    }

    fn unsafe_contains(&self, s: &State) -> bool {
        self.inner().unsafe_contains(s)
    }

    fn initial_mode(&self) -> usize {
        self.inner().initial_mode()
    }
}
