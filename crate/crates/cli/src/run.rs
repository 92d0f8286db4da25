use std::f64::consts::PI;
use std::sync::Arc;

use opdisc::acceptance::{run_criterion, CRITERIA};
use opdisc::decompose::{decompose, BlockKind, DecomposeConfig};
use opdisc::discretize::{convergence_scan, default_probes, linearize, subspace_samples};
use opdisc::galerkin_fem::{fem_convergence, singularity_scan, ConvexNonlinearity, GalerkinKind};
use opdisc::invert::{chain_inverse, global_inverse_check, InversionConfig};
use opdisc::layers::{make_layer, InvertibleResidualChain, NeuralOperatorLayer, ResidualChain};
use opdisc::monotone::{bilipschitz_on, pairwise_alpha_on, small_gain_certificate, CertificateOutcome};
use opdisc::nogo_isotopy::{default_t_grid, truncated_det_scan};
use opdisc::quant::quant_report;
use opdisc::report::{csv, fmt_float};
use opdisc::spectral_core::sample_ball;
use opdisc::{BasisKind, Error, LinearOperatorExpr, Map, Space, Subspace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::*;

#[derive(Clone, Debug, Serialize)]
pub struct Assertion {
    pub name: String,
    pub passed: bool,
    pub value: String,
}

/// Result of one experiment: files to write and the checks it made.
#[derive(Debug)]
pub struct Outcome {
    pub name: String,
    pub kind: &'static str,
    pub assertions: Vec<Assertion>,
    pub artifacts: Vec<(String, String)>,
}

impl Outcome {
    fn new(e: &Experiment) -> Self {
        Outcome {
            name: e.name().to_string(),
            kind: e.kind(),
            assertions: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, value: impl ToString) {
        self.assertions.push(Assertion {
            name: name.to_string(),
            passed,
            value: value.to_string(),
        });
    }

    fn csv(&mut self, body: String) {
        self.artifacts.push((format!("{}.csv", self.name), body));
    }

    fn json(&mut self, mut body: Value) {
        if let Value::Object(map) = &mut body {
            map.insert("assertions".into(), json!(self.assertions));
        }
        let text = serde_json::to_string_pretty(&body).expect("report serializes") + "\n";
        self.artifacts.push((format!("{}.json", self.name), text));
    }

    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.passed)
    }
}

/// Failures split by whether the input or the run is at fault.
#[derive(Debug)]
pub enum RunError {
    Config(String),
    Run(String),
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match innermost(&e) {
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::Json(_) => RunError::Config(e.to_string()),
            _ => RunError::Run(e.to_string()),
        }
    }
}

fn innermost(e: &Error) -> &Error {
    match e {
        Error::Stage { source, .. } => innermost(source),
        other => other,
    }
}

fn seed_of(seed: Option<u64>) -> u64 {
    seed.expect("validated configs carry seeds")
}

fn build_layer(source: &LayerSource, seed: u64) -> Result<NeuralOperatorLayer, Error> {
    match source {
        LayerSource::Generate { space, spec, seed: own } => {
            make_layer(Arc::new(Space::new(space.clone())?), own.unwrap_or(seed), spec)
        }
        LayerSource::Doc(doc) => NeuralOperatorLayer::from_doc(doc.clone()),
    }
}

pub fn run(e: &Experiment) -> Result<Outcome, RunError> {
    let mut out = Outcome::new(e);
    match e {
        Experiment::MonotoneCheck(x) => monotone_check(x, &mut out)?,
        Experiment::DiscretizeScan(x) => discretize_scan(x, &mut out)?,
        Experiment::Decompose(x) => decompose_run(x, &mut out)?,
        Experiment::Invert(x) => invert_run(x, &mut out)?,
        Experiment::NogoGalerkin(x) => nogo_galerkin(x, &mut out)?,
        Experiment::NogoIsotopy(x) => nogo_isotopy(x, &mut out)?,
        Experiment::FemSolve(x) => fem_solve(x, &mut out)?,
        Experiment::QuantReport(x) => quant(x, &mut out)?,
        Experiment::Accept(x) => accept(x, &mut out)?,
    }
    Ok(out)
}

fn monotone_check(x: &MonotoneCheck, out: &mut Outcome) -> Result<(), RunError> {
    let seed = seed_of(x.seed);
    let layer = build_layer(&x.layer, seed)?;
    let certificate = small_gain_certificate(&layer)?;
    let mut rows = Vec::new();
    for &d in &x.dims {
        if d == 0 || d > layer.dim() {
            return Err(RunError::Config(format!("dimension {d} outside 1..={}", layer.dim())));
        }
        let v = Subspace::prefix(d);
        let samples = subspace_samples(layer.dim(), &v, x.radius, x.samples, seed);
        let fv = linearize(&layer, v);
        let alpha = pairwise_alpha_on(&fv, &samples, x.radius, seed)?.alpha;
        let (lo, hi) = bilipschitz_on(&fv, &samples)?;
        rows.push((d, alpha, lo, hi));
    }
    // A rejected certificate is a valid outcome; only certified layers are held to their constant.
    if let CertificateOutcome::Certified(c) = &certificate {
        let worst = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        out.check("monotonicity_preserved", worst >= c.alpha - 1e-6, fmt_float(worst));
    }
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.0.to_string(), fmt_float(r.1), fmt_float(r.2), fmt_float(r.3)])
        .collect();
    out.csv(csv(&["dim", "alpha_hat", "c_lower", "c_upper"], &table));
    out.json(json!({"kind": out.kind, "seed": seed, "certificate": certificate}));
    Ok(())
}

fn discretize_scan(x: &DiscretizeScan, out: &mut Outcome) -> Result<(), RunError> {
    let seed = seed_of(x.seed);
    let layer = build_layer(&x.layer, seed)?;
    let probes = if x.probes == 0 { Vec::new() } else { default_probes(layer.dim(), x.probes, seed) };
    let report = convergence_scan(&layer, &x.dims, x.radius, x.samples, seed, &probes, &x.name)?;
    out.check("epsilon_error", report.max_epsilon_error() <= 1e-12, fmt_float(report.max_epsilon_error()));
    if x.expect_decreasing {
        out.check("strictly_decreasing", report.strictly_decreasing(), report.strictly_decreasing());
    }
    out.csv(report.to_csv());
    out.json(json!({"kind": out.kind, "metadata": report.metadata}));
    Ok(())
}

fn decompose_run(x: &DecomposeExperiment, out: &mut Outcome) -> Result<(), RunError> {
    let seed = seed_of(x.seed);
    let layer = build_layer(&x.layer, seed)?;
    let mut cfg = DecomposeConfig::new(x.epsilon, x.r1, seed);
    cfg.h = x.h;
    cfg.pairs = x.pairs.unwrap_or(cfg.pairs);
    cfg.composite_samples = x.composite_samples.unwrap_or(cfg.composite_samples);
    cfg.composite_tol = x.composite_tol.unwrap_or(cfg.composite_tol);
    cfg.max_blocks = x.max_blocks.unwrap_or(cfg.max_blocks);
    let result = decompose(&layer, &cfg)?;
    out.check("block_lipschitz", result.max_block_lipschitz() < x.epsilon, fmt_float(result.max_block_lipschitz()));
    out.check(
        "composite_error",
        result.diagnostics.composite_error <= cfg.composite_tol,
        fmt_float(result.diagnostics.composite_error),
    );
    out.check(
        "block_alpha",
        result.min_block_alpha() >= 1.0 - x.epsilon - 1e-6,
        fmt_float(result.min_block_alpha()),
    );
    let rows: Vec<Vec<String>> = result
        .blocks
        .iter()
        .map(|b| {
            let (kind, from, to) = match &b.kind {
                BlockKind::Rotation => ("rotation", String::new(), String::new()),
                BlockKind::Stretch => ("stretch", String::new(), String::new()),
                BlockKind::Path { t_from, t_to } => ("path", fmt_float(*t_from), fmt_float(*t_to)),
                BlockKind::Peel => ("peel", String::new(), String::new()),
            };
            vec![
                b.index.to_string(),
                kind.to_string(),
                from,
                to,
                fmt_float(b.lipschitz),
                fmt_float(b.alpha),
                fmt_float(b.det_at_zero),
            ]
        })
        .collect();
    out.csv(csv(&["index", "kind", "t_from", "t_to", "lipschitz", "alpha", "det_at_zero"], &rows));
    out.json(json!({"kind": out.kind, "config": cfg, "result": result}));
    Ok(())
}

fn invert_run(x: &InvertExperiment, out: &mut Outcome) -> Result<(), RunError> {
    let seed = seed_of(x.seed);
    let spec = &x.chain;
    let widths = spec.widths.clone().unwrap_or_else(|| vec![4 * spec.n, 4 * spec.n]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = ResidualChain::random(
        &mut rng,
        spec.ambient_dim,
        spec.n,
        spec.blocks,
        &widths,
        spec.activation,
        spec.lip,
        spec.cert_radius,
    )?;
    let chain = match InvertibleResidualChain::new(chain, x.delta) {
        Ok(c) => c,
        // Refusal is a recorded outcome, not a failure.
        Err(Error::Refused(reason)) => {
            out.json(json!({"kind": out.kind, "seed": seed, "refused": reason}));
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    let cfg = InversionConfig {
        tol: x.tol,
        max_iter: x.max_iter,
        ..InversionConfig::default()
    };
    let mut roundtrip = 0.0f64;
    let mut overshoot = i64::MIN;
    let mut decreasing = true;
    let mut first_trace = None;
    for sample in sample_ball(spec.ambient_dim, x.radius, x.samples, 1.0, seed) {
        let y = chain.chain.apply(&sample);
        let (back, trace) = chain_inverse(&chain.chain, &LinearOperatorExpr::Identity, &y, &cfg)?;
        roundtrip = roundtrip.max(back.distance(&sample));
        for b in &trace.blocks {
            overshoot = overshoot.max(b.iterations as i64 - b.a_priori_bound as i64);
            decreasing &= b.decreasing_after_first();
        }
        first_trace.get_or_insert(trace);
    }
    out.check("roundtrip", roundtrip <= x.roundtrip_tol, fmt_float(roundtrip));
    out.check("iterations_within_bound", overshoot <= 5, overshoot);
    out.check("residuals_decreasing", decreasing, decreasing);
    let global = if chain.is_globally_certified() {
        let report = global_inverse_check(&chain, x.radius, x.samples.max(2), seed, &cfg)?;
        out.check("block_alpha", report.min_block_alpha() >= 1.0 - x.delta - 1e-6, fmt_float(report.min_block_alpha()));
        Some(report)
    } else {
        None
    };
    let mut rows = Vec::new();
    if let Some(trace) = &first_trace {
        // Blocks are inverted last to first.
        let count = trace.blocks.len();
        for (i, b) in trace.blocks.iter().enumerate() {
            for (it, r) in b.residuals.iter().enumerate() {
                rows.push(vec![(count - 1 - i).to_string(), it.to_string(), fmt_float(*r)]);
            }
        }
    }
    out.csv(csv(&["block", "iteration", "residual"], &rows));
    out.json(json!({
        "kind": out.kind,
        "seed": seed,
        "delta": x.delta,
        "roundtrip": roundtrip,
        "first_trace": first_trace,
        "global": global,
    }));
    Ok(())
}

fn unit_grid(points: usize) -> Result<Vec<f64>, RunError> {
    if points < 2 {
        return Err(RunError::Config("grid needs at least two points".into()));
    }
    Ok((0..points).map(|i| i as f64 / (points - 1) as f64).collect())
}

fn nogo_galerkin(x: &NogoGalerkin, out: &mut Outcome) -> Result<(), RunError> {
    let basis = x.basis.unwrap_or(match x.path {
        GalerkinKind::A => BasisKind::Fourier,
        GalerkinKind::B => BasisKind::FemHat,
    });
    let scan = singularity_scan(x.path, x.n, basis, &unit_grid(x.grid)?, x.bisect_tol)?;
    out.check(
        "endpoint_signs_differ",
        scan.endpoint_signs.0 * scan.endpoint_signs.1 < 0,
        format!("{:?}", scan.endpoint_signs),
    );
    match x.path {
        GalerkinKind::A => out.check("det_at_star", scan.det_at_star.abs() < 1e-10, fmt_float(scan.det_at_star)),
        GalerkinKind::B => out.check("min_sv_at_star", scan.min_sv_at_star < 1e-8, fmt_float(scan.min_sv_at_star)),
    }
    out.csv(scan.to_csv());
    out.json(json!({
        "kind": out.kind,
        "path": x.path,
        "n": x.n,
        "basis": basis,
        "endpoint_signs": scan.endpoint_signs,
        "bracket": scan.bracket,
        "s_star": scan.s_star,
        "det_at_star": scan.det_at_star,
        "min_sv_at_star": scan.min_sv_at_star,
    }));
    Ok(())
}

fn nogo_isotopy(x: &NogoIsotopy, out: &mut Outcome) -> Result<(), RunError> {
    if x.grid < 2 {
        return Err(RunError::Config("grid needs at least two points".into()));
    }
    let scan = truncated_det_scan(x.m, &default_t_grid(x.grid - 1, x.dyadic), x.bisect_tol)?;
    let (d0, d1) = scan.endpoint_dets;
    out.check(
        "endpoint_dets",
        (d0 - 1.0).abs() < 1e-12 && (d1 + 1.0).abs() < 1e-12,
        format!("({},{})", fmt_float(d0), fmt_float(d1)),
    );
    let bracketed = scan.crossings.iter().any(|c| c.bracket.1 - c.bracket.0 < 1e-6);
    out.check("crossing_bracketed", bracketed, scan.crossings.len());
    out.check("orthogonality", scan.orthogonality_defect <= 1e-10, fmt_float(scan.orthogonality_defect));
    out.csv(scan.to_csv());
    out.json(json!({
        "kind": out.kind,
        "m": x.m,
        "rho": "quintic smoothstep",
        "crossings": scan.crossings,
        "aligned_det_defect": scan.aligned_det_defect,
        "orthogonality_defect": scan.orthogonality_defect,
        "valid_t_ranges": scan.valid_t_ranges,
    }));
    Ok(())
}

fn fem_solve(x: &FemSolve, out: &mut Outcome) -> Result<(), RunError> {
    let amplitude = x.amplitude.unwrap_or(match x.g {
        ConvexNonlinearity::Zero => -PI * PI,
        ConvexNonlinearity::Linear => -(PI * PI + 1.0),
        ConvexNonlinearity::Cubic => -10.0,
    });
    let table = fem_convergence(move |t: f64| amplitude * (PI * t).sin(), x.g, &x.meshes, x.tol)?;
    out.check("energy_decreasing", table.rows.iter().all(|r| r.energy_decreasing), true);
    if let Some([lo, hi]) = x.expect_ratio {
        let ratios: Vec<f64> = table.rows.iter().filter_map(|r| r.ratio).collect();
        out.check(
            "ratio_band",
            ratios.iter().all(|r| (lo..=hi).contains(r)),
            ratios.iter().map(|r| fmt_float(*r)).collect::<Vec<_>>().join(";"),
        );
    }
    out.csv(table.to_csv());
    out.json(json!({"kind": out.kind, "g": x.g, "amplitude": amplitude, "reference_elements": table.reference_elements}));
    Ok(())
}

fn quant(x: &QuantReportExperiment, out: &mut Outcome) -> Result<(), RunError> {
    let seed = seed_of(x.seed);
    let layer = build_layer(&x.layer, seed)?;
    let report = quant_report(&layer, &x.dims, x.radius, x.samples, seed)?;
    out.csv(report.to_csv());
    out.json(json!({"kind": out.kind, "report": report}));
    Ok(())
}

fn accept(x: &Accept, out: &mut Outcome) -> Result<(), RunError> {
    let seed = seed_of(x.seed);
    let ids: Vec<u8> = x.criteria.clone().unwrap_or_else(|| CRITERIA.iter().map(|c| c.0).collect());
    let mut outcomes = Vec::new();
    for id in ids {
        let o = run_criterion(id, seed)?;
        println!("{}", o.line());
        out.check(&format!("criterion_{id}"), o.passed, &o.detail);
        outcomes.push(o);
    }
    out.json(json!({"kind": out.kind, "seed": seed, "criteria": outcomes}));
    Ok(())
}
