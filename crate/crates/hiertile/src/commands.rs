//! The four pipeline commands, independent of argument parsing.

use std::fmt::Write as _;

use hiertile_core::codegen::{generate, CodegenError, KernelSource};
use hiertile_core::sim::{check_ownership, run_with, Matrix, OwnershipReport, RaceReport, SimConfig, SimError};
use hiertile_core::spec::SpecKind;
use hiertile_core::validate::format_trace;
use sha2::{Digest, Sha256};

use crate::matrix_io::{InputGen, Values};
use crate::oracle;
use crate::script::Loaded;

pub fn elaborate(l: &Loaded) -> String {
    format_trace(&l.report.trace)
}

pub fn codegen(l: &Loaded) -> Result<KernelSource, CodegenError> {
    generate(&l.root, &l.tree)
}

/// Seeded inputs for the root spec: A and B, or the Move source.
pub fn inputs(l: &Loaded, seed: u64, values: Values) -> Vec<Matrix> {
    let mut g = InputGen::new(seed, values);
    match &l.root.kind {
        SpecKind::MatMul { a, b, .. } => vec![g.matrix(a.rows, a.cols), g.matrix(b.rows, b.cols)],
        SpecKind::Move { src, .. } => vec![g.matrix(src.rows, src.cols)],
        SpecKind::LaneMma { .. } => Vec::new(),
    }
}

/// First 16 hex digits of SHA-256 over the output's little-endian bits.
pub fn digest(m: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((m.rows as u64).to_le_bytes());
    h.update((m.cols as u64).to_le_bytes());
    for v in &m.data {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().take(8).fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub inputs: Vec<Matrix>,
    pub output: Matrix,
    pub races: RaceReport,
    pub access_log: Vec<String>,
    pub digest: String,
}

pub fn simulate(l: &Loaded, inputs: Vec<Matrix>, record_log: bool) -> Result<Simulation, SimError> {
    let refs: Vec<&Matrix> = inputs.iter().collect();
    let cfg = SimConfig { record_log, ..SimConfig::default() };
    let r = run_with(&l.root, &l.tree, &refs, &cfg)?;
    let names: Vec<String> = r.regions.iter().map(|(n, _)| n.clone()).collect();
    let access_log = r.log.iter().map(|a| a.to_line(&names)).collect();
    let digest = digest(&r.output);
    Ok(Simulation { inputs, output: r.output, races: r.races, access_log, digest })
}

pub fn reference(l: &Loaded, inputs: &[Matrix]) -> Matrix {
    match &l.root.kind {
        SpecKind::Move { .. } => oracle::copy(&l.root, &inputs[0]),
        _ => oracle::matmul(&l.root, &inputs[0], &inputs[1]),
    }
}

#[derive(Clone, Debug)]
pub struct Verdict {
    pub pass: bool,
    pub max_error: Option<f32>,
    pub tolerance: f32,
    pub races: RaceReport,
    pub ownership: OwnershipReport,
    pub error: Option<SimError>,
}

impl Verdict {
    pub fn summary(&self) -> String {
        let mut s = String::from(if self.pass { "PASS" } else { "FAIL" });
        match self.max_error {
            Some(e) => {
                let _ = write!(s, "\nmax abs error: {e} (tolerance {})", self.tolerance);
            }
            None => s.push_str("\nmax abs error: n/a"),
        }
        let _ = write!(s, "\nraces: {}", self.races.total);
        for r in self.races.races.iter().take(8) {
            let _ = write!(s, "\n  {r}");
        }
        let _ = write!(s, "\nownership violations: {}", self.ownership.violations.len());
        for v in self.ownership.violations.iter().take(8) {
            let _ = write!(s, "\n  {v}");
        }
        if let Some(e) = &self.error {
            let _ = write!(s, "\nerror: {e}");
        }
        s
    }
}

/// Simulation against the oracle plus race and ownership checks.
pub fn verify(l: &Loaded, seed: u64, values: Values, tolerance: f32) -> Verdict {
    let ownership = match check_ownership(&l.root, &l.tree) {
        Ok(o) => o,
        Err(e) => {
            return Verdict {
                pass: false,
                max_error: None,
                tolerance,
                races: RaceReport::default(),
                ownership: OwnershipReport::default(),
                error: Some(e),
            }
        }
    };
    if !ownership.is_ok() {
        return Verdict { pass: false, max_error: None, tolerance, races: RaceReport::default(), ownership, error: None };
    }
    let ins = inputs(l, seed, values);
    match simulate(l, ins, false) {
        Ok(sim) => {
            let want = reference(l, &sim.inputs);
            let err = sim.output.max_abs_diff(&want);
            let pass = err <= tolerance && sim.races.is_empty();
            Verdict { pass, max_error: Some(err), tolerance, races: sim.races, ownership, error: None }
        }
        Err(e) => Verdict { pass: false, max_error: None, tolerance, races: RaceReport::default(), ownership, error: Some(e) },
    }
}
