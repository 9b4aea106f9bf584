//! Statistical assessment of reachability classifiers: point metrics with
//! Wilson intervals, sequential certification, region heatmaps, adaptation,
//! threshold and time-bound sweeps.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{derived_rng, generate_dataset, generate_in_box, label_uniform_range, AdaptiveConfig, Dataset, Strategy};
use crate::error::{Error, Result};
use crate::models::{DomainBox, HybridModel, State};
use crate::nn::{adapt, fit, Arch, Classifier, Ensemble, Model, Network, TrainConfig, TrainLog};
use crate::sim::{fmt_f64, reach_label, IntegratorConfig};

pub const DEFAULT_ALPHA: f64 = 0.01;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Inverse of the standard normal CDF: Acklam's rational approximation
/// followed by one Halley refinement step.
pub fn normal_quantile(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("quantile level must lie in (0, 1), got {q}")));
    }
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    const LOW: f64 = 0.02425;
    let x = if q < LOW {
        let t = (-2.0 * q.ln()).sqrt();
        (((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    } else if q <= 1.0 - LOW {
        let t = q - 0.5;
        let r = t * t;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * t
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let t = (-2.0 * (1.0 - q).ln()).sqrt();
        -(((((C[0] * t + C[1]) * t + C[2]) * t + C[3]) * t + C[4]) * t + C[5])
            / ((((D[0] * t + D[1]) * t + D[2]) * t + D[3]) * t + 1.0)
    };
    let e = normal_cdf(x) - q;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    Ok(x - u / (1.0 + x * u / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// Wilson score interval for a binomial proportion at confidence `1 - alpha`.
pub fn wilson_ci(p_hat: f64, n: usize, alpha: f64) -> Result<Interval> {
    if n == 0 || !(0.0..=1.0).contains(&p_hat) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "Wilson interval needs n > 0, p in [0, 1] and alpha in (0, 1); got n = {n}, p = {p_hat}, alpha = {alpha}"
        )));
    }
    let z = normal_quantile(1.0 - alpha / 2.0)?;
    let n = n as f64;
    let z2n = z * z / n;
    let denom = 1.0 + z2n;
    let center = (p_hat + z2n / 2.0) / denom;
    let half = z / denom * (p_hat * (1.0 - p_hat) / n + z2n / (4.0 * n)).sqrt();
    Ok(Interval { lo: (center - half).max(0.0), hi: (center + half).min(1.0) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Counts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn n(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (false, false) => self.tn += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    fn merge(self, o: Counts) -> Counts {
        Counts { tp: self.tp + o.tp, tn: self.tn + o.tn, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub alpha: f64,
    pub acc: f64,
    #[serde(rename = "fn")]
    pub fn_rate: f64,
    #[serde(rename = "fp")]
    pub fp_rate: f64,
    pub ci_acc: Interval,
    pub ci_fn: Interval,
    pub ci_fp: Interval,
    pub counts: Counts,
}

impl MetricsReport {
    pub fn from_counts(counts: Counts, alpha: f64) -> Result<Self> {
        let n = counts.n();
        if n == 0 {
            return Err(Error::EmptyDataset("no samples to evaluate".into()));
        }
        let nf = n as f64;
        let acc = (counts.tp + counts.tn) as f64 / nf;
        let fn_rate = counts.fn_ as f64 / nf;
        let fp_rate = counts.fp as f64 / nf;
        Ok(MetricsReport {
            n,
            alpha,
            acc,
            fn_rate,
            fp_rate,
            ci_acc: wilson_ci(acc, n, alpha)?,
            ci_fn: wilson_ci(fn_rate, n, alpha)?,
            ci_fp: wilson_ci(fp_rate, n, alpha)?,
            counts,
        })
    }

    fn csv_fields(&self) -> String {
        [
            self.acc,
            self.ci_acc.lo,
            self.ci_acc.hi,
            self.fn_rate,
            self.ci_fn.lo,
            self.ci_fn.hi,
            self.fp_rate,
            self.ci_fp.lo,
            self.ci_fp.hi,
        ]
        .iter()
        .map(|v| fmt_f64(*v))
        .collect::<Vec<_>>()
        .join(",")
    }
}

const METRIC_COLUMNS: &str = "acc,acc_lo,acc_hi,fn,fn_lo,fn_hi,fp,fp_lo,fp_hi";

pub fn evaluate<C: Classifier + ?Sized>(classifier: &C, data: &Dataset, alpha: f64) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("{} test set is empty", data.model)));
    }
    check_dim(classifier, data)?;
    let counts = data
        .samples
        .par_iter()
        .map(|s| {
            let mut c = Counts::default();
            c.record(classifier.classify(&s.state.x), s.label);
            c
        })
        .reduce(Counts::default, Counts::merge);
    MetricsReport::from_counts(counts, alpha)
}

fn check_dim<C: Classifier + ?Sized>(classifier: &C, data: &Dataset) -> Result<()> {
    match data.samples.first() {
        Some(s) if s.state.x.len() != classifier.input_dim() => Err(Error::InvalidArgument(format!(
            "classifier expects {} inputs, dataset has {}",
            classifier.input_dim(),
            s.state.x.len()
        ))),
        _ => Ok(()),
    }
}

/// Ground truth by simulation, usable wherever a classifier is expected.
pub struct Oracle<'a, M: HybridModel + ?Sized> {
    pub model: &'a M,
    pub t_bound: f64,
    pub h: f64,
    pub cfg: IntegratorConfig,
}

impl<M: HybridModel + ?Sized> Classifier for Oracle<'_, M> {
    fn input_dim(&self) -> usize {
        self.model.spec().dim
    }
    fn score(&self, x: &[f64]) -> f64 {
        self.classify(x) as u8 as f64
    }
    fn classify(&self, x: &[f64]) -> bool {
        let s = State::new(self.model.initial_mode(), x.to_vec());
        reach_label(self.model, &s, self.t_bound, self.h, &self.cfg).unwrap_or(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Acc,
    Fn,
    Fp,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "acc" => Ok(Metric::Acc),
            "fn" => Ok(Metric::Fn),
            "fp" => Ok(Metric::Fp),
            _ => Err(Error::InvalidArgument(format!("unknown metric '{s}' (expected acc, fn or fp)"))),
        }
    }
}

impl Metric {
    /// Whether one classified sample counts as a success for the test.
    /// Upper-bound guarantees on FN/FP rates are tested through their
    /// complement events.
    pub fn success(self, predicted: bool, truth: bool) -> bool {
        match self {
            Metric::Acc => predicted == truth,
            Metric::Fn => !(truth && !predicted),
            Metric::Fp => !(predicted && !truth),
        }
    }

    /// Required success probability for a guarantee at level `theta`.
    pub fn success_level(self, theta: f64) -> f64 {
        match self {
            Metric::Acc => theta,
            Metric::Fn | Metric::Fp => 1.0 - theta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SprtConfig {
    pub metric: Metric,
    pub theta: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub max_samples: usize,
}

impl Default for SprtConfig {
    fn default() -> Self {
        SprtConfig { metric: Metric::Acc, theta: 0.995, delta: 0.001, alpha: 0.01, beta: 0.01, max_samples: 50_000 }
    }
}

impl SprtConfig {
    /// Indifference region `(p1, p0)` on the success probability.
    pub fn hypotheses(&self) -> Result<(f64, f64)> {
        let level = self.metric.success_level(self.theta);
        let (p1, p0) = (level - self.delta, level + self.delta);
        if !(0.0 < p1 && p1 < p0 && p0 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < theta - delta < theta + delta < 1 on the success scale, got ({p1}, {p0})"
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0 && self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidArgument("alpha and beta must lie in (0, 1)".into()));
        }
        if self.max_samples == 0 {
            return Err(Error::InvalidArgument("max_samples must be positive".into()));
        }
        Ok((p1, p0))
    }

    /// Wald's stopping bounds `(A, B)`.
    pub fn bounds(&self) -> (f64, f64) {
        ((1.0 - self.beta) / self.alpha, self.beta / (1.0 - self.alpha))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Satisfied,
    Violated,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SprtVerdict {
    pub decision: Decision,
    pub samples_used: usize,
    pub successes: usize,
    pub log_ratio: f64,
    pub log_a: f64,
    pub log_b: f64,
}

/// Wald's sequential probability ratio test over a stream of success
/// indicators. `Satisfied` accepts `p >= p0`, `Violated` accepts `p <= p1`.
pub fn sprt_certify<I: IntoIterator<Item = bool>>(stream: I, cfg: &SprtConfig) -> Result<SprtVerdict> {
    let (p1, p0) = cfg.hypotheses()?;
    let (a, b) = cfg.bounds();
    let (log_a, log_b) = (a.ln(), b.ln());
    let step_success = (p1 / p0).ln();
    let step_failure = ((1.0 - p1) / (1.0 - p0)).ln();
    let (mut successes, mut failures) = (0usize, 0usize);
    let mut ratio = 0.0;
    let mut decision = Decision::Undetermined;
    for outcome in stream.into_iter().take(cfg.max_samples) {
        if outcome {
            successes += 1;
        } else {
            failures += 1;
        }
        ratio = step_success * successes as f64 + step_failure * failures as f64;
        if ratio <= log_b {
            decision = Decision::Satisfied;
            break;
        }
        if ratio >= log_a {
            decision = Decision::Violated;
            break;
        }
    }
    Ok(SprtVerdict { decision, samples_used: successes + failures, successes, log_ratio: ratio, log_a, log_b })
}

/// Fresh uniform samples labeled by simulation, classified on demand and
/// turned into success indicators for `metric`. Labels are computed in
/// parallel batches ahead of the consumer.
pub struct CertificationStream<'a, M: HybridModel + ?Sized, C: Classifier + ?Sized> {
    model: &'a M,
    classifier: &'a C,
    metric: Metric,
    t_bound: f64,
    h: f64,
    cfg: &'a IntegratorConfig,
    seed: u64,
    next: u64,
    buffer: std::collections::VecDeque<bool>,
    pub error: Option<Error>,
    pub batch: u64,
}

impl<'a, M: HybridModel + ?Sized, C: Classifier + ?Sized> CertificationStream<'a, M, C> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &'a M,
        classifier: &'a C,
        metric: Metric,
        t_bound: f64,
        h: f64,
        cfg: &'a IntegratorConfig,
        seed: u64,
    ) -> Self {
        CertificationStream {
            model,
            classifier,
            metric,
            t_bound,
            h,
            cfg,
            seed,
            next: 0,
            buffer: Default::default(),
            error: None,
            batch: 256,
        }
    }
}

impl<M: HybridModel + ?Sized, C: Classifier + ?Sized> Iterator for CertificationStream<'_, M, C> {
    type Item = bool;

    fn next(&mut self) -> Option<bool> {
        if self.buffer.is_empty() && self.error.is_none() {
            let range = self.next..self.next + self.batch;
            self.next += self.batch;
            let domain = &self.model.spec().domain;
            match label_uniform_range(self.model, domain, range, self.t_bound, self.h, self.seed, self.cfg) {
                Ok(slots) => {
                    let metric = self.metric;
                    let classifier = self.classifier;
                    let outcomes: Vec<bool> = slots
                        .par_iter()
                        .map(|(s, _)| metric.success(classifier.classify(&s.state.x), s.label))
                        .collect();
                    self.buffer.extend(outcomes);
                }
                Err(e) => self.error = Some(e),
            }
        }
        self.buffer.pop_front()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCell {
    pub row: usize,
    pub col: usize,
    pub axis1: Interval,
    pub axis2: Interval,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub axes: (usize, usize),
    pub axis_names: (String, String),
    pub rows: usize,
    pub cols: usize,
    pub per_cell: usize,
    pub cells: Vec<RegionCell>,
}

impl RegionReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "row,col,axis1_lo,axis1_hi,axis2_lo,axis2_hi,{METRIC_COLUMNS}")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.row,
                c.col,
                fmt_f64(c.axis1.lo),
                fmt_f64(c.axis1.hi),
                fmt_f64(c.axis2.lo),
                fmt_f64(c.axis2.hi),
                c.metrics.csv_fields()
            )?;
        }
        out.flush()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionConfig {
    /// Variables spanning the grid; rows split the first, columns the second.
    pub axes: (usize, usize),
    pub rows: usize,
    pub cols: usize,
    pub per_cell: usize,
    pub t_bound: f64,
    pub h: f64,
    pub seed: u64,
    pub alpha: f64,
}

/// Metrics on a grid of cells over two state variables. Each cell gets a
/// fresh uniform dataset; the remaining variables range over the full
/// sampling domain.
pub fn region_analysis<M, C>(classifier: &C, model: &M, rc: &RegionConfig, cfg: &IntegratorConfig) -> Result<RegionReport>
where
    M: HybridModel + ?Sized,
    C: Classifier + ?Sized,
{
    let spec = model.spec();
    let (a1, a2) = rc.axes;
    if spec.dim < 2 || a1 >= spec.dim || a2 >= spec.dim || a1 == a2 {
        return Err(Error::InvalidArgument(format!(
            "region axes must be two distinct variables of {} ({} variables)",
            spec.name, spec.dim
        )));
    }
    if rc.per_cell == 0 || rc.rows == 0 || rc.cols == 0 {
        return Err(Error::InvalidArgument("grid dimensions and per-cell count must be positive".into()));
    }
    if classifier.input_dim() != spec.dim {
        return Err(Error::InvalidArgument("classifier input dimension does not match the model".into()));
    }
    let d = &spec.domain;
    let edge = |axis: usize, k: usize, parts: usize| d.lo[axis] + d.width(axis) * k as f64 / parts as f64;
    let mut cells = Vec::with_capacity(rc.rows * rc.cols);
    for row in 0..rc.rows {
        for col in 0..rc.cols {
            let axis1 = Interval { lo: edge(a1, row, rc.rows), hi: edge(a1, row + 1, rc.rows) };
            let axis2 = Interval { lo: edge(a2, col, rc.cols), hi: edge(a2, col + 1, rc.cols) };
            let (mut lo, mut hi) = (d.lo.clone(), d.hi.clone());
            (lo[a1], hi[a1]) = (axis1.lo, axis1.hi);
            (lo[a2], hi[a2]) = (axis2.lo, axis2.hi);
            let cell_box = DomainBox::new(lo, hi)?;
            let cell_seed = derived_rng(rc.seed, (row * rc.cols + col) as u64, u64::MAX).next_u64_seed();
            let data = generate_in_box(model, &cell_box, rc.per_cell, &Strategy::Uniform, rc.t_bound, rc.h, cell_seed, cfg)?;
            let metrics = evaluate(classifier, &data, rc.alpha)?;
            cells.push(RegionCell { row, col, axis1, axis2, metrics });
        }
    }
    Ok(RegionReport {
        axes: rc.axes,
        axis_names: (spec.var_names[a1].clone(), spec.var_names[a2].clone()),
        rows: rc.rows,
        cols: rc.cols,
        per_cell: rc.per_cell,
        cells,
    })
}

trait SeedExt {
    fn next_u64_seed(self) -> u64;
}

impl SeedExt for rand_chacha::ChaCha8Rng {
    fn next_u64_seed(mut self) -> u64 {
        rand::RngCore::next_u64(&mut self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub iterations: usize,
    pub per_iter_samples: usize,
    pub learning_rate: f64,
    pub freeze_biases: bool,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig { iterations: 10, per_iter_samples: 10_000, learning_rate: 0.001, freeze_biases: true, seed: 1 }
    }
}

impl AdaptationConfig {
    /// Learning rates used for each benchmark in the reference experiments.
    pub fn learning_rate_for(model: &str) -> f64 {
        match model {
            "neuron" => 0.0005,
            "quadcopter" => 0.002,
            _ => 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationStep {
    pub iteration: usize,
    pub false_negatives: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationReport {
    pub initial: MetricsReport,
    pub steps: Vec<AdaptationStep>,
    /// Every false-negative state used for adaptation.
    pub accumulated: Vec<Vec<f64>>,
    /// Fraction of `accumulated` the final network classifies as positive.
    pub reclassified: f64,
}

/// Repeatedly draws a fresh dataset, collects the false negatives of the
/// current network on it, adapts on them and re-evaluates on `fixed_test`.
pub fn adaptation_loop<M: HybridModel + ?Sized>(
    net: &Network,
    model: &M,
    ac: &AdaptationConfig,
    fixed_test: &Dataset,
    cfg: &IntegratorConfig,
    alpha: f64,
) -> Result<(Network, AdaptationReport)> {
    let initial = evaluate(net, fixed_test, alpha)?;
    let mut current = net.clone();
    let mut steps = Vec::with_capacity(ac.iterations);
    let mut accumulated = Vec::new();
    for it in 0..ac.iterations {
        let seed = derived_rng(ac.seed, it as u64, 1).next_u64_seed();
        let fresh = generate_dataset(model, ac.per_iter_samples, &Strategy::Uniform, fixed_test.t_bound, fixed_test.h, seed, cfg)?;
        let fns: Vec<Vec<f64>> = fresh
            .samples
            .iter()
            .filter(|s| s.label && !current.classify(&s.state.x))
            .map(|s| s.state.x.clone())
            .collect();
        current = adapt(&current, &fns, ac.learning_rate, ac.freeze_biases);
        let metrics = evaluate(&current, fixed_test, alpha)?;
        steps.push(AdaptationStep { iteration: it + 1, false_negatives: fns.len(), metrics });
        accumulated.extend(fns);
    }
    let reclassified = if accumulated.is_empty() {
        1.0
    } else {
        accumulated.iter().filter(|x| current.classify(x)).count() as f64 / accumulated.len() as f64
    };
    Ok((current, AdaptationReport { initial, steps, accumulated, reclassified }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    /// What `value` holds: "theta" or "T".
    pub parameter: String,
    pub points: Vec<SweepPoint>,
}

impl SweepReport {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{},{METRIC_COLUMNS}", self.parameter)?;
        for p in &self.points {
            writeln!(out, "{},{}", fmt_f64(p.value), p.metrics.csv_fields())?;
        }
        out.flush()
    }
}

/// `0.01, 0.02, ..., 0.99`.
pub fn default_theta_grid() -> Vec<f64> {
    (1..=99).map(|i| i as f64 / 100.0).collect()
}

/// Metrics for each threshold from one pass of scoring.
pub fn threshold_sweep<C: Classifier + ?Sized>(classifier: &C, data: &Dataset, thetas: &[f64], alpha: f64) -> Result<SweepReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset(format!("{} sweep set is empty", data.model)));
    }
    check_dim(classifier, data)?;
    let scores: Vec<f64> = data.samples.par_iter().map(|s| classifier.score(&s.state.x)).collect();
    let points = thetas
        .iter()
        .map(|&theta| {
            let mut c = Counts::default();
            for (score, s) in scores.iter().zip(&data.samples) {
                c.record(*score >= theta, s.label);
            }
            Ok(SweepPoint { value: theta, metrics: MetricsReport::from_counts(c, alpha)? })
        })
        .collect::<Result<_>>()?;
    Ok(SweepReport { parameter: "theta".into(), points })
}

/// Threshold with the lowest FN rate among those losing at most
/// `max_acc_loss` accuracy against `baseline_acc`; ties go to the larger
/// threshold.
pub fn select_threshold_min_fn(sweep: &SweepReport, max_acc_loss: f64, baseline_acc: f64) -> Result<&SweepPoint> {
    if sweep.points.is_empty() {
        return Err(Error::InvalidArgument("empty threshold sweep".into()));
    }
    let floor = baseline_acc - max_acc_loss - 1e-12;
    let mut best: Option<&SweepPoint> = None;
    for p in sweep.points.iter().filter(|p| p.metrics.acc >= floor) {
        best = match best {
            None => Some(p),
            Some(b) => {
                let better = p.metrics.counts.fn_ < b.metrics.counts.fn_
                    || (p.metrics.counts.fn_ == b.metrics.counts.fn_ && p.value > b.value);
                Some(if better { p } else { b })
            }
        };
    }
    best.ok_or_else(|| {
        Error::Infeasible(format!(
            "no threshold keeps accuracy within {max_acc_loss} of {baseline_acc}; loosen the accuracy-loss bound"
        ))
    })
}

/// Trains `arch` on `data`. Ensemble member 0 uses `data`; the others draw
/// a fresh dataset of the same size and strategy.
pub fn train_classifier<M: HybridModel + ?Sized>(
    arch: Arch,
    model: &M,
    data: &Dataset,
    tc: &TrainConfig,
    cfg: &IntegratorConfig,
) -> Result<(Model, Vec<TrainLog>)> {
    let members = arch.members();
    let mut nets = Vec::with_capacity(members.len());
    let mut logs = Vec::with_capacity(members.len());
    for (i, member) in members.iter().enumerate() {
        let member_cfg = TrainConfig { seed: tc.seed.wrapping_add(i as u64), ..tc.clone() };
        let (net, log) = if i == 0 {
            fit(*member, data, &member_cfg)?
        } else {
            let seed = derived_rng(data.seed, i as u64, 2).next_u64_seed();
            let extra = generate_dataset(model, data.len(), &data.strategy, data.t_bound, data.h, seed, cfg)?;
            fit(*member, &extra, &member_cfg)?
        };
        nets.push(net);
        logs.push(log);
    }
    let model = if arch.is_ensemble() {
        Model::Ensemble(Ensemble::new(nets)?)
    } else {
        Model::Network(nets.pop().expect("one member"))
    };
    Ok((model, logs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeboundConfig {
    pub t_grid: Vec<f64>,
    pub train_size: usize,
    pub test_size: usize,
    pub arch: Arch,
    pub h: f64,
    pub seed: u64,
    pub alpha: f64,
}

/// For each horizon: relabel, retrain from scratch and test.
pub fn timebound_analysis<M: HybridModel + ?Sized>(
    model: &M,
    tb: &TimeboundConfig,
    tc: &TrainConfig,
    cfg: &IntegratorConfig,
) -> Result<SweepReport> {
    if tb.t_grid.is_empty() || tb.t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("time grid must be nonempty and increasing".into()));
    }
    let name = &model.spec().name;
    let mut points = Vec::with_capacity(tb.t_grid.len());
    for (k, &t) in tb.t_grid.iter().enumerate() {
        let train_seed = derived_rng(tb.seed, k as u64, 3).next_u64_seed();
        let test_seed = derived_rng(tb.seed, k as u64, 4).next_u64_seed();
        let train = generate_dataset(model, tb.train_size, &AdaptiveConfig::training_strategy(name), t, tb.h, train_seed, cfg)?;
        let test = generate_dataset(model, tb.test_size, &Strategy::Uniform, t, tb.h, test_seed, cfg)?;
        let metrics = if train.positives() == 0 || train.positives() == train.len() {
            // one-class data: the constant classifier is exact on its labels
            let constant = train.positives() > 0;
            let mut c = Counts::default();
            test.samples.iter().for_each(|s| c.record(constant, s.label));
            MetricsReport::from_counts(c, tb.alpha)?
        } else {
            let (clf, _) = train_classifier(tb.arch, model, &train, tc, cfg)?;
            evaluate(&clf, &test, tb.alpha)?
        };
        points.push(SweepPoint { value: t, metrics });
    }
    Ok(SweepReport { parameter: "T".into(), points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::models::{Neuron, Pendulum};
    use proptest::prelude::{prop_assert, proptest};

    fn dataset(samples: Vec<(Vec<f64>, bool)>) -> Dataset {
        Dataset {
            model: "test".into(),
            t_bound: 1.0,
            h: 0.1,
            strategy: Strategy::Uniform,
            seed: 0,
            samples: samples.into_iter().map(|(x, label)| Sample { state: State::new(0, x), label }).collect(),
            discarded: 0,
        }
    }

    /// Classifies by the sign of the first coordinate; score is a ramp.
    struct Ramp;

    impl Classifier for Ramp {
        fn input_dim(&self) -> usize {
            1
        }
        fn score(&self, x: &[f64]) -> f64 {
            (0.5 + x[0]).clamp(0.0, 1.0)
        }
        fn classify(&self, x: &[f64]) -> bool {
            self.score(x) >= 0.5
        }
    }

    #[test]
    fn quantiles() {
        assert!(normal_quantile(0.5).unwrap().abs() < 1e-15);
        assert!((normal_quantile(0.975).unwrap() - 1.959963984540054).abs() < 1e-5);
        assert!((normal_quantile(0.995).unwrap() - 2.5758293035489).abs() < 1e-5);
        for q in [1e-12, 1e-6, 0.01, 0.02425, 0.3, 0.7, 0.97575, 0.999, 1.0 - 1e-9] {
            let x = normal_quantile(q).unwrap();
            assert!((normal_cdf(x) - q).abs() < 1e-10 * q.max(1e-3), "q = {q}");
        }
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
    }

    #[test]
    fn wilson_edges() {
        let z = normal_quantile(0.995).unwrap();
        let n = 5000;
        let k = z * z / n as f64;
        let one = wilson_ci(1.0, n, 0.01).unwrap();
        assert!((one.lo - 1.0 / (1.0 + k)).abs() < 1e-15 && one.hi == 1.0);
        let zero = wilson_ci(0.0, n, 0.01).unwrap();
        assert!(zero.lo == 0.0 && (zero.hi - k / (1.0 + k)).abs() < 1e-15);
        let ci = wilson_ci(0.9999, 10_000, 0.01).unwrap();
        assert!((ci.lo - 0.99915).abs() < 1e-5 && (ci.hi - 0.99999).abs() < 1e-5);
        assert!(wilson_ci(0.5, 0, 0.01).is_err());
    }

    #[test]
    fn evaluate_counts() {
        let d = dataset(vec![
            (vec![0.4], true),
            (vec![-0.4], false),
            (vec![0.2], false),
            (vec![-0.2], true),
        ]);
        let m = evaluate(&Ramp, &d, 0.01).unwrap();
        assert_eq!((m.acc, m.fp_rate, m.fn_rate), (0.5, 0.25, 0.25));
        let perfect = dataset(vec![(vec![0.4], true), (vec![-0.4], false)]);
        let m = evaluate(&Ramp, &perfect, 0.01).unwrap();
        assert_eq!((m.acc, m.fn_rate, m.fp_rate), (1.0, 0.0, 0.0));
        assert!(evaluate(&Ramp, &dataset(vec![]), 0.01).is_err());
    }

    #[test]
    fn sprt_bounds_and_closed_form() {
        let cfg = SprtConfig::default();
        let (a, b) = cfg.bounds();
        assert!((a - 99.0).abs() < 1e-12 && (b - 0.01 / 0.99).abs() < 1e-15);
        let v = sprt_certify(std::iter::repeat(true), &cfg).unwrap();
        assert_eq!(v.decision, Decision::Satisfied);
        assert_eq!(v.samples_used, 2287);
        let v = sprt_certify(std::iter::repeat(false), &cfg).unwrap();
        assert_eq!(v.decision, Decision::Violated);
        let v = sprt_certify(std::iter::repeat(true).take(100), &cfg).unwrap();
        assert_eq!((v.decision, v.samples_used), (Decision::Undetermined, 100));
    }

    #[test]
    fn sprt_complement_events() {
        assert!(Metric::Fn.success(true, false));
        assert!(!Metric::Fn.success(false, true));
        assert!(!Metric::Fp.success(true, false));
        let cfg = SprtConfig { metric: Metric::Fn, theta: 0.005, ..Default::default() };
        assert_eq!(cfg.hypotheses().unwrap(), (0.995 - 0.001, 0.995 + 0.001));
        let bad = SprtConfig { theta: 0.9995, ..Default::default() };
        assert!(bad.hypotheses().is_err());
    }

    #[test]
    fn sprt_alternating_undetermined_at_cap() {
        let cfg = SprtConfig { max_samples: 500, ..Default::default() };
        // success rate 0.995 sits in the indifference region
        let stream = (0..).map(|i| i % 200 != 0);
        let v = sprt_certify(stream, &cfg).unwrap();
        assert_eq!(v.decision, Decision::Undetermined);
        assert_eq!(v.samples_used, 500);
    }

    #[test]
    fn sweep_monotone_and_degenerate() {
        let d = dataset((0..40).map(|i| (vec![(i as f64 - 20.0) / 40.0], i % 3 == 0)).collect());
        let mut grid = vec![0.0];
        grid.extend(default_theta_grid());
        grid.push(1.1);
        let s = threshold_sweep(&Ramp, &d, &grid, 0.01).unwrap();
        for w in s.points.windows(2) {
            assert!(w[1].metrics.fn_rate >= w[0].metrics.fn_rate);
            assert!(w[1].metrics.fp_rate <= w[0].metrics.fp_rate);
        }
        let first = &s.points[0].metrics;
        assert_eq!(first.fn_rate, 0.0);
        assert_eq!(first.fp_rate, 1.0 - d.positive_fraction());
        let last = &s.points.last().unwrap().metrics;
        assert_eq!((last.fp_rate, last.fn_rate), (0.0, d.positive_fraction()));
    }

    fn point(value: f64, acc_counts: (usize, usize, usize)) -> SweepPoint {
        let (fp, fn_, n) = acc_counts;
        let c = Counts { tp: 0, tn: n - fp - fn_, fp, fn_ };
        SweepPoint { value, metrics: MetricsReport::from_counts(c, 0.01).unwrap() }
    }

    #[test]
    fn threshold_selection() {
        let sweep = SweepReport {
            parameter: "theta".into(),
            points: vec![point(0.1, (30, 0, 100)), point(0.3, (5, 2, 100)), point(0.5, (2, 2, 100)), point(0.7, (0, 6, 100))],
        };
        // fn constant (2) on the feasible set {0.3, 0.5, 0.7}: largest wins
        let p = select_threshold_min_fn(&sweep, 0.03, 0.96).unwrap();
        assert_eq!(p.value, 0.5);
        let p = select_threshold_min_fn(&sweep, 1.0, 0.96).unwrap();
        assert_eq!(p.value, 0.1);
        assert!(matches!(select_threshold_min_fn(&sweep, 0.0, 1.0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn certification_stream_with_oracle_is_satisfied() {
        let p = Pendulum::new();
        let cfg = IntegratorConfig::default();
        let oracle = Oracle { model: &p, t_bound: 5.0, h: 0.01, cfg: cfg.clone() };
        let stream = CertificationStream::new(&p, &oracle, Metric::Acc, 5.0, 0.01, &cfg, 3);
        let v = sprt_certify(stream, &SprtConfig::default()).unwrap();
        assert_eq!((v.decision, v.samples_used), (Decision::Satisfied, 2287));
    }

    #[test]
    fn region_cells_inside_unsafe_set() {
        let p = Pendulum::new();
        let cfg = IntegratorConfig::default();
        let oracle = Oracle { model: &p, t_bound: 1.0, h: 0.01, cfg: cfg.clone() };
        let rc = RegionConfig { axes: (0, 1), rows: 2, cols: 2, per_cell: 20, t_bound: 1.0, h: 0.01, seed: 4, alpha: 0.01 };
        let r = region_analysis(&oracle, &p, &rc, &cfg).unwrap();
        assert_eq!(r.cells.len(), 4);
        assert!(r.cells.iter().all(|c| c.metrics.acc == 1.0 && c.metrics.fn_rate == 0.0));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("row,col,axis1_lo,axis1_hi,axis2_lo,axis2_hi,acc,acc_lo,acc_hi,fn,fn_lo,fn_hi,fp,fp_lo,fp_hi\n"));
        let bad = RegionConfig { per_cell: 0, ..rc };
        assert!(region_analysis(&oracle, &p, &bad, &cfg).is_err());
    }

    #[test]
    fn adaptation_without_false_negatives_is_identity() {
        let n = Neuron::new();
        let cfg = IntegratorConfig::default();
        // a network that always says "reachable" has no false negatives
        let mut net = Arch::Snn.build(n.spec().domain.lo.clone(), n.spec().domain.hi.clone()).unwrap();
        net.layers.last_mut().unwrap().biases[0] = 10.0;
        let test = generate_dataset(&n, 50, &Strategy::Uniform, 2.0, 0.01, 1, &cfg).unwrap();
        let ac = AdaptationConfig { iterations: 3, per_iter_samples: 30, ..Default::default() };
        let (after, report) = adaptation_loop(&net, &n, &ac, &test, &cfg, 0.01).unwrap();
        assert_eq!(after, net);
        assert!(report.steps.iter().all(|s| s.false_negatives == 0 && s.metrics == report.initial));
    }

    #[test]
    fn timebound_all_negative_labels() {
        let p = Pendulum::new();
        let cfg = IntegratorConfig::default();
        let tb = TimeboundConfig { t_grid: vec![0.02], train_size: 30, test_size: 30, arch: Arch::Snn, h: 0.01, seed: 2, alpha: 0.01 };
        let r = timebound_analysis(&p, &tb, &TrainConfig::default(), &cfg).unwrap();
        // states start inside the domain, so nothing can leave |theta| <= pi/4 that fast
        assert!(r.points[0].metrics.acc >= 0.9);
    }

    proptest! {
        #[test]
        fn wilson_contains_estimate(k in 0usize..=1000, n in 1usize..=1000, alpha in 0.001f64..0.2) {
            let k = k.min(n);
            let p = k as f64 / n as f64;
            let ci = wilson_ci(p, n, alpha).unwrap();
            prop_assert!(ci.lo <= p + 1e-15 && p <= ci.hi + 1e-15);
            let wider = wilson_ci(p, n, alpha).unwrap();
            let more = wilson_ci(p, n * 2, alpha).unwrap();
            prop_assert!(more.width() <= wider.width() + 1e-15);
        }

        #[test]
        fn counts_identity(tp in 0usize..50, tn in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let c = Counts { tp, tn, fp, fn_ };
            if c.n() > 0 {
                let m = MetricsReport::from_counts(c, 0.01).unwrap();
                let total = (c.tp + c.tn) + c.fp + c.fn_;
                prop_assert!(total == c.n());
                prop_assert!((m.acc + m.fn_rate + m.fp_rate - 1.0).abs() < 1e-12);
            }
        }
    }
}
