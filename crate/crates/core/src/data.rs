//! Labeled datasets of initial states: uniform and adaptive sampling,
//! splitting and CSV persistence.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{DomainBox, HybridModel, State};
use crate::sim::{fmt_f64, reach_label, IntegratorConfig};

/// Replacement draws allowed per sample slot before generation gives up.
const MAX_ATTEMPTS: u64 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub state: State,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    /// Extra neighbors drawn around each positive uniform draw.
    pub extra_per_positive: usize,
    /// Half-width of the neighborhood box as a fraction of each domain
    /// width. A single entry applies to every axis.
    pub radius: Vec<f64>,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        AdaptiveConfig { extra_per_positive: 3, radius: vec![0.05] }
    }
}

impl AdaptiveConfig {
    /// Settings tuned so adaptive datasets land near the class balance used
    /// for training in the reference experiments.
    pub fn for_model(name: &str) -> Self {
        match name {
            "pendulum" => AdaptiveConfig { extra_per_positive: 3, radius: vec![0.02] },
            _ => AdaptiveConfig::default(),
        }
    }

    /// Sampling strategy for training data of a benchmark.
    pub fn training_strategy(name: &str) -> Strategy {
        match name {
            "pendulum" => Strategy::Adaptive(AdaptiveConfig::for_model(name)),
            _ => Strategy::Uniform,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.radius.len() != 1 && self.radius.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "adaptive radius needs 1 or {dim} entries, got {}",
                self.radius.len()
            )));
        }
        if self.radius.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::InvalidArgument("adaptive radius must lie in (0, 1]".into()));
        }
        Ok(())
    }

    fn radius_for(&self, axis: usize) -> f64 {
        if self.radius.len() == 1 {
            self.radius[0]
        } else {
            self.radius[axis]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    Adaptive(AdaptiveConfig),
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Adaptive(_) => "adaptive",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub model: String,
    pub t_bound: f64,
    pub h: f64,
    pub strategy: Strategy,
    pub seed: u64,
    pub samples: Vec<Sample>,
    /// Draws dropped because their simulation failed.
    pub discarded: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label).count()
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.positives() as f64 / self.samples.len() as f64
    }

    /// Same metadata, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset { samples, discarded: 0, ..self.clone() }
    }

    /// Bounding box of the sampled states, used for input normalization.
    /// Degenerate axes are widened symmetrically.
    pub fn bounds(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::EmptyDataset(self.model.clone()))?;
        let mut lo = first.state.x.clone();
        let mut hi = first.state.x.clone();
        for s in &self.samples {
            for (i, v) in s.state.x.iter().enumerate() {
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
        }
        for i in 0..lo.len() {
            if hi[i] <= lo[i] {
                let pad = lo[i].abs().max(1.0) * 1e-6;
                lo[i] -= pad;
                hi[i] += pad;
            }
        }
        Ok((lo, hi))
    }
}

/// Independent generator for one sample slot.
pub fn derived_rng(seed: u64, index: u64, attempt: u64) -> ChaCha8Rng {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ attempt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// One state drawn uniformly from `domain` (mode 0).
pub fn sample_uniform<R: Rng + ?Sized>(domain: &DomainBox, rng: &mut R) -> State {
    let x = domain
        .lo
        .iter()
        .zip(&domain.hi)
        .map(|(&lo, &hi)| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
        .collect();
    State::new(0, x)
}

fn sample_neighbor<R: Rng + ?Sized>(center: &State, domain: &DomainBox, cfg: &AdaptiveConfig, rng: &mut R) -> State {
    let x = (0..domain.dim())
        .map(|i| {
            let r = cfg.radius_for(i) * domain.width(i);
            let lo = (center.x[i] - r).max(domain.lo[i]);
            let hi = (center.x[i] + r).min(domain.hi[i]);
            if hi > lo {
                rng.gen_range(lo..=hi)
            } else {
                lo
            }
        })
        .collect();
    State::new(center.mode, x)
}

/// Stream identifiers keep uniform draws and neighbor draws disjoint.
fn neighbor_stream(parent: u64, j: usize) -> u64 {
    (1u64 << 63) | (parent << 8) | j as u64
}

struct Labeler<'a, M: HybridModel + ?Sized> {
    model: &'a M,
    t_bound: f64,
    h: f64,
    cfg: &'a IntegratorConfig,
    seed: u64,
}

impl<M: HybridModel + ?Sized> Labeler<'_, M> {
    /// Draws from `draw` until the simulation succeeds. Returns the sample and
    /// the number of discarded attempts.
    fn label_slot<F>(&self, stream: u64, draw: F) -> Result<(Sample, usize)>
    where
        F: Fn(&mut ChaCha8Rng) -> State,
    {
        let mut last_err = None;
        for attempt in 0..MAX_ATTEMPTS {
            let mut rng = derived_rng(self.seed, stream, attempt);
            let mut state = draw(&mut rng);
            state.mode = self.model.initial_mode();
            match reach_label(self.model, &state, self.t_bound, self.h, self.cfg) {
                Ok(label) => return Ok((Sample { state, label }, attempt as usize)),
                Err(e) if e.is_numerical() => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Infeasible("no draw could be labeled".into())))
    }
}

/// Labels `count` sampled states of `model` by simulation.
///
/// Uniform draw `i` uses a generator derived from `(seed, i)`, so the result
/// does not depend on the number of worker threads.
pub fn generate_dataset<M: HybridModel + ?Sized>(
    model: &M,
    count: usize,
    strategy: &Strategy,
    t_bound: f64,
    h: f64,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<Dataset> {
    generate_in_box(model, &model.spec().domain, count, strategy, t_bound, h, seed, cfg)
}

pub fn check_settings(t_bound: f64, h: f64, cfg: &IntegratorConfig) -> Result<()> {
    if !(t_bound > 0.0 && h > 0.0 && h <= t_bound) {
        return Err(Error::InvalidArgument(format!("need 0 < h <= T, got T = {t_bound}, h = {h}")));
    }
    cfg.validate()
}

/// Uniform draws with indices in `range`, labeled in parallel. Each entry
/// carries the number of draws discarded for that slot.
pub fn label_uniform_range<M: HybridModel + ?Sized>(
    model: &M,
    domain: &DomainBox,
    range: std::ops::Range<u64>,
    t_bound: f64,
    h: f64,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<Vec<(Sample, usize)>> {
    check_settings(t_bound, h, cfg)?;
    let labeler = Labeler { model, t_bound, h, cfg, seed };
    range
        .into_par_iter()
        .map(|i| labeler.label_slot(i, |rng| sample_uniform(domain, rng)))
        .collect()
}

/// As [`generate_dataset`], drawing from `domain` instead of the model's
/// sampling domain.
#[allow(clippy::too_many_arguments)]
pub fn generate_in_box<M: HybridModel + ?Sized>(
    model: &M,
    domain: &DomainBox,
    count: usize,
    strategy: &Strategy,
    t_bound: f64,
    h: f64,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    if domain.dim() != model.spec().dim {
        return Err(Error::InvalidArgument("sampling box has the wrong dimension".into()));
    }
    check_settings(t_bound, h, cfg)?;
    let labeler = Labeler { model, t_bound, h, cfg, seed };
    let uniform = |rng: &mut ChaCha8Rng| sample_uniform(domain, rng);

    let (samples, discarded) = match strategy {
        Strategy::Uniform => {
            let slots: Vec<(Sample, usize)> = (0..count as u64)
                .into_par_iter()
                .map(|i| labeler.label_slot(i, uniform))
                .collect::<Result<_>>()?;
            let discarded = slots.iter().map(|s| s.1).sum();
            (slots.into_iter().map(|s| s.0).collect::<Vec<_>>(), discarded)
        }
        Strategy::Adaptive(acfg) => {
            acfg.validate(domain.dim())?;
            let mut samples = Vec::with_capacity(count);
            let mut discarded = 0;
            let mut next_index = 0u64;
            while samples.len() < count {
                let remaining = count - samples.len();
                let batch = remaining.div_ceil(1 + acfg.extra_per_positive) as u64;
                let heads: Vec<(Sample, usize)> = (next_index..next_index + batch)
                    .into_par_iter()
                    .map(|i| labeler.label_slot(i, uniform))
                    .collect::<Result<_>>()?;
                let jobs: Vec<(u64, usize)> = heads
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.0.label)
                    .flat_map(|(k, _)| (0..acfg.extra_per_positive).map(move |j| (k as u64, j)))
                    .collect();
                let neighbors: Vec<(Sample, usize)> = jobs
                    .par_iter()
                    .map(|&(k, j)| {
                        let center = &heads[k as usize].0.state;
                        labeler.label_slot(neighbor_stream(next_index + k, j), |rng| {
                            sample_neighbor(center, domain, acfg, rng)
                        })
                    })
                    .collect::<Result<_>>()?;
                let mut nb = neighbors.into_iter();
                for (head, lost) in heads {
                    discarded += lost;
                    let positive = head.label;
                    samples.push(head);
                    if positive {
                        for _ in 0..acfg.extra_per_positive {
                            let (s, lost) = nb.next().expect("one neighbor per job");
                            discarded += lost;
                            samples.push(s);
                        }
                    }
                }
                samples.truncate(count);
                next_index += batch;
            }
            (samples, discarded)
        }
    };
    Ok(Dataset {
        model: model.spec().name.clone(),
        t_bound,
        h,
        strategy: strategy.clone(),
        seed,
        samples,
        discarded,
    })
}

/// Number of persisted labels that disagree with a fresh simulation.
pub fn verify_labels<M: HybridModel + ?Sized>(model: &M, data: &Dataset, cfg: &IntegratorConfig) -> Result<usize> {
    let mismatches: Vec<bool> = data
        .samples
        .par_iter()
        .map(|s| reach_label(model, &s.state, data.t_bound, data.h, cfg).map(|l| l != s.label))
        .collect::<Result<_>>()?;
    Ok(mismatches.into_iter().filter(|m| *m).count())
}

/// Seeded partition into a `fraction` part and the rest. Both parts keep the
/// original sample order.
pub fn split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let n = data.len();
    let take = (fraction * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = derived_rng(seed, u64::MAX, 0);
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let mut chosen = vec![false; n];
    for &i in &idx[..take] {
        chosen[i] = true;
    }
    let (mut a, mut b) = (Vec::with_capacity(take), Vec::with_capacity(n - take));
    for (s, c) in data.samples.iter().zip(chosen) {
        if c {
            a.push(s.clone());
        } else {
            b.push(s.clone());
        }
    }
    Ok((data.with_samples(a), data.with_samples(b)))
}

pub fn write_csv<W: Write>(data: &Dataset, mut out: W) -> std::io::Result<()> {
    writeln!(out, "# model={}", data.model)?;
    writeln!(out, "# T={}", fmt_f64(data.t_bound))?;
    writeln!(out, "# h={}", fmt_f64(data.h))?;
    writeln!(out, "# strategy={}", data.strategy)?;
    writeln!(out, "# seed={}", data.seed)?;
    if let Strategy::Adaptive(a) = &data.strategy {
        writeln!(out, "# adaptive_n={}", a.extra_per_positive)?;
        let r: Vec<String> = a.radius.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(out, "# adaptive_radius={}", r.join(";"))?;
    }
    writeln!(out, "# discarded={}", data.discarded)?;
    let dim = data.samples.first().map_or(0, |s| s.state.x.len());
    let mut header = vec!["mode".to_string()];
    header.extend((1..=dim).map(|i| format!("x{i}")));
    header.push("label".into());
    writeln!(out, "{}", header.join(","))?;
    let mut line = String::new();
    for s in &data.samples {
        line.clear();
        line.push_str(&s.state.mode.to_string());
        for v in &s.state.x {
            line.push(',');
            line.push_str(&fmt_f64(*v));
        }
        line.push_str(if s.label { ",1" } else { ",0" });
        writeln!(out, "{line}")?;
    }
    out.flush()
}

pub fn save_csv(data: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(data, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

fn parse_field<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid value '{value}' for {key}"),
    })
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Dataset> {
    let mut meta = std::collections::BTreeMap::new();
    let mut header: Option<usize> = None;
    let mut samples = Vec::new();
    let mut meta_lines = std::collections::BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
                meta_lines.insert(k.trim().to_string(), lineno);
            }
            continue;
        }
        let Some(dim) = header else {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 3 || cols[0] != "mode" || cols[cols.len() - 1] != "label" {
                return Err(Error::Parse {
                    line: lineno,
                    message: "expected header 'mode,x1..xn,label'".into(),
                });
            }
            header = Some(cols.len() - 2);
            continue;
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != dim + 2 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} columns, found {}", dim + 2, cols.len()),
            });
        }
        let mode = parse_field(lineno, "mode", cols[0])?;
        let x = cols[1..=dim]
            .iter()
            .map(|c| parse_field::<f64>(lineno, "state", c))
            .collect::<Result<Vec<_>>>()?;
        let label = match cols[dim + 1].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Parse { line: lineno, message: format!("label must be 0 or 1, got '{other}'") })
            }
        };
        samples.push(Sample { state: State::new(mode, x), label });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no samples in dataset file".into()));
    }
    let get = |k: &str| -> Result<(&String, usize)> {
        meta.get(k)
            .map(|v| (v, meta_lines[k]))
            .ok_or_else(|| Error::Parse { line: 1, message: format!("missing '# {k}=' header") })
    };
    let (model, _) = get("model")?;
    let (t, lt) = get("T")?;
    let (h, lh) = get("h")?;
    let (seed, ls) = get("seed")?;
    let (strategy, lst) = get("strategy")?;
    let strategy = match strategy.as_str() {
        "uniform" => Strategy::Uniform,
        "adaptive" => {
            let (n, ln) = get("adaptive_n")?;
            let (r, lr) = get("adaptive_radius")?;
            Strategy::Adaptive(AdaptiveConfig {
                extra_per_positive: parse_field(ln, "adaptive_n", n)?,
                radius: r
                    .split(';')
                    .map(|v| parse_field(lr, "adaptive_radius", v))
                    .collect::<Result<_>>()?,
            })
        }
        other => return Err(Error::Parse { line: lst, message: format!("unknown strategy '{other}'") }),
    };
    let discarded = match meta.get("discarded") {
        Some(v) => parse_field(meta_lines["discarded"], "discarded", v)?,
        None => 0,
    };
    Ok(Dataset {
        model: model.clone(),
        t_bound: parse_field(lt, "T", t)?,
        h: parse_field(lh, "h", h)?,
        strategy,
        seed: parse_field(ls, "seed", seed)?,
        samples,
        discarded,
    })
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(BufReader::new(file))
}
