//! Model definition, validation, and derived static quantities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A Markov-modulated fluid network.
///
/// `d` stations exchange fluid through a fixed substochastic routing matrix
/// `P` (`p[(k, l)]` is the fraction of station `k`'s output routed to station
/// `l`; the rest leaves the network). A background Markov chain with
/// generator `Q` on `m` states switches the exogenous input rates
/// `lambda[(k, i)]` and the potential release rates `mu[(k, i)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelConfig", into = "ModelConfig")]
pub struct MmfnModel {
    /// Number of stations (≥ 2).
    pub d: usize,
    /// Number of background states (≥ 2).
    pub m: usize,
    /// Exogenous input rates, `d × m` (station × background state), ≥ 0.
    pub lambda: DMatrix<f64>,
    /// Potential release rates, `d × m`, ≥ 0.
    pub mu: DMatrix<f64>,
    /// Routing fractions, `d × d`, strictly substochastic.
    pub p: DMatrix<f64>,
    /// Background generator, `m × m`: nonnegative off-diagonals, zero row
    /// sums, irreducible.
    pub q: DMatrix<f64>,
}

/// On-disk shape of a model file: plain row-major nested arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelConfig {
    d: usize,
    m: usize,
    lambda: Vec<Vec<f64>>,
    mu: Vec<Vec<f64>>,
    #[serde(rename = "P")]
    p: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
}

fn rows_to_matrix(rows: &[Vec<f64>], nr: usize, nc: usize, name: &str) -> std::result::Result<DMatrix<f64>, String> {
    if rows.len() != nr {
        return Err(format!("{name}: expected {nr} rows, got {}", rows.len()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != nc {
            return Err(format!("{name}: row {i} has {} entries, expected {nc}", r.len()));
        }
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

impl TryFrom<ModelConfig> for MmfnModel {
    type Error = String;

    fn try_from(c: ModelConfig) -> std::result::Result<Self, String> {
        let lambda = rows_to_matrix(&c.lambda, c.d, c.m, "lambda")?;
        let mu = rows_to_matrix(&c.mu, c.d, c.m, "mu")?;
        let p = rows_to_matrix(&c.p, c.d, c.d, "P")?;
        let q = rows_to_matrix(&c.q, c.m, c.m, "Q")?;
        MmfnModel::new(lambda, mu, p, q).map_err(|e| e.to_string())
    }
}

impl From<MmfnModel> for ModelConfig {
    fn from(mm: MmfnModel) -> Self {
        let rows = |a: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..a.nrows()).map(|i| (0..a.ncols()).map(|j| a[(i, j)]).collect()).collect()
        };
        ModelConfig {
            d: mm.d,
            m: mm.m,
            lambda: rows(&mm.lambda),
            mu: rows(&mm.mu),
            p: rows(&mm.p),
            q: rows(&mm.q),
        }
    }
}

impl MmfnModel {
    /// Builds a model from its four matrices, running only the structural
    /// checks (consistent dimensions, finite entries, nonnegative rates).
    /// Semantic invariants are checked separately by [`validate_model`].
    pub fn new(
        lambda: DMatrix<f64>,
        mu: DMatrix<f64>,
        p: DMatrix<f64>,
        q: DMatrix<f64>,
    ) -> Result<Self> {
        let d = lambda.nrows();
        let m = lambda.ncols();
        if d < 2 {
            return Err(Error::Parse(format!("need at least 2 stations, got {d}")));
        }
        if m < 2 {
            return Err(Error::Parse(format!("need at least 2 background states, got {m}")));
        }
        if mu.shape() != (d, m) {
            return Err(Error::Parse(format!(
                "mu has shape {:?}, expected ({d}, {m})",
                mu.shape()
            )));
        }
        if p.shape() != (d, d) {
            return Err(Error::Parse(format!("P has shape {:?}, expected ({d}, {d})", p.shape())));
        }
        if q.shape() != (m, m) {
            return Err(Error::Parse(format!("Q has shape {:?}, expected ({m}, {m})", q.shape())));
        }
        for a in [&lambda, &mu, &p, &q] {
            if a.iter().any(|x| !x.is_finite()) {
                return Err(Error::Parse("non-finite entry in model matrices".into()));
            }
        }
        if lambda.iter().any(|&x| x < 0.0) || mu.iter().any(|&x| x < 0.0) {
            return Err(Error::Parse("negative rate entry in lambda or mu".into()));
        }
        Ok(MmfnModel { d, m, lambda, mu, p, q })
    }

    /// A magnitude scale for tolerance decisions: the largest rate appearing
    /// anywhere in the model, floored at 1.
    pub fn rate_scale(&self) -> f64 {
        let mut s = 1.0f64;
        for a in [&self.lambda, &self.mu, &self.q] {
            for &x in a.iter() {
                s = s.max(x.abs());
            }
        }
        s
    }
}

/// Outcome of a single validation check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub name: String,
    pub pass: bool,
    /// For failures, a concrete witness (offending index / value / state).
    pub witness: Option<String>,
}

/// Result of [`validate_model`]: every invariant with pass/fail and witness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
    pub pass: bool,
}

impl ValidationReport {
    /// Short comma-separated list of failed check names.
    pub fn failed_names(&self) -> String {
        self.checks
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.name.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// Directed reachability from `start` over `adj`; returns the first
/// unreachable node, if any.
fn first_unreachable(n: usize, adj: &[Vec<usize>], start: usize) -> Option<usize> {
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(u) = stack.pop() {
        for &w in &adj[u] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    seen.iter().position(|&s| !s)
}

/// Checks that the support graph of `a` (edge i→j when `a[(i,j)] > 0`,
/// ignoring the diagonal) is strongly connected. Returns a witness on
/// failure.
fn irreducible_support(a: &DMatrix<f64>) -> std::result::Result<(), String> {
    let n = a.nrows();
    let mut fwd = vec![Vec::new(); n];
    let mut rev = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && a[(i, j)] > 0.0 {
                fwd[i].push(j);
                rev[j].push(i);
            }
        }
    }
    // Strongly connected iff node 0 reaches everything and everything
    // reaches node 0.
    if let Some(u) = first_unreachable(n, &fwd, 0) {
        return Err(format!("state {u} is not reachable from state 0"));
    }
    if let Some(u) = first_unreachable(n, &rev, 0) {
        return Err(format!("state 0 is not reachable from state {u}"));
    }
    Ok(())
}

/// Power-iteration certificate that the routing matrix is a strict
/// contraction. With row sums at most one, `‖Pⁿ·1‖_∞ = ‖Pⁿ‖_∞` is
/// nonincreasing; it drops below 1 if and only if the spectral radius is
/// strictly less than 1 (`‖Pⁿ‖_∞ ≥ ρⁿ`). Returns (contracts, ρ estimate).
fn routing_contracts(p: &DMatrix<f64>) -> (bool, f64) {
    let d = p.nrows();
    let cap = 1000 * d.max(100);
    let mut v = DVector::from_element(d, 1.0);
    let mut norm = 1.0f64;
    for n in 1..=cap {
        v = p * &v;
        norm = v.amax();
        if norm < 0.5 {
            return (true, norm.powf(1.0 / n as f64));
        }
        if norm > 1.0 + 1e-9 {
            // Row sums exceed one; the row-sum check reports the details.
            return (false, norm.powf(1.0 / n as f64));
        }
    }
    (false, norm)
}

/// Runs every semantic invariant check and reports pass/fail with witnesses.
///
/// Checks, in order: routing entries lie in [0, 1]; routing row sums are at
/// most 1; the routing matrix is a strict contraction (spectral radius < 1);
/// `Q` has nonnegative off-diagonals and zero row sums; `Q` is irreducible;
/// the routing matrix augmented with an external node is irreducible.
pub fn validate_model(model: &MmfnModel) -> ValidationReport {
    let mut checks = Vec::new();
    let scale = model.rate_scale();

    // Routing entries within [0, 1].
    let mut witness = None;
    'outer: for k in 0..model.d {
        for l in 0..model.d {
            let x = model.p[(k, l)];
            if !((-1e-12..=1.0 + 1e-12).contains(&x)) {
                witness = Some(format!("P[{k}][{l}] = {x} outside [0, 1]"));
                break 'outer;
            }
        }
    }
    checks.push(ValidationCheck {
        name: "routing_entries_in_unit_interval".into(),
        pass: witness.is_none(),
        witness,
    });

    // Row sums at most one.
    let mut witness = None;
    for k in 0..model.d {
        let s: f64 = model.p.row(k).iter().sum();
        if s > 1.0 + 1e-12 {
            witness = Some(format!("routing row {k} sums to {s} > 1"));
            break;
        }
    }
    checks.push(ValidationCheck {
        name: "routing_rows_substochastic".into(),
        pass: witness.is_none(),
        witness,
    });

    // Strict substochasticity overall: spectral radius < 1.
    let (contracts, rho) = routing_contracts(&model.p);
    checks.push(ValidationCheck {
        name: "routing_spectral_radius_lt_1".into(),
        pass: contracts,
        witness: if contracts {
            None
        } else {
            Some(format!("power iteration did not contract; spectral radius estimate {rho}"))
        },
    });

    // Q is a generator: nonnegative off-diagonals, zero row sums.
    let mut witness = None;
    'gen: for i in 0..model.m {
        for j in 0..model.m {
            if i != j && model.q[(i, j)] < 0.0 {
                witness = Some(format!("Q[{i}][{j}] = {} is negative", model.q[(i, j)]));
                break 'gen;
            }
        }
        let s: f64 = model.q.row(i).iter().sum();
        if s.abs() > 1e-12 * scale {
            witness = Some(format!("Q row {i} sums to {s}, not 0"));
            break 'gen;
        }
    }
    checks.push(ValidationCheck {
        name: "q_generator_shape".into(),
        pass: witness.is_none(),
        witness,
    });

    // Q irreducible.
    let w = irreducible_support(&model.q).err();
    checks.push(ValidationCheck {
        name: "q_irreducible".into(),
        pass: w.is_none(),
        witness: w.map(|s| format!("Q support graph not strongly connected: {s}")),
    });

    // Augmented routing irreducible (external node 0 feeds every station
    // with positive mean input and collects every station's leakage).
    let w = match augmented_routing(model) {
        Ok(pbar) => irreducible_support(&pbar)
            .err()
            .map(|s| format!("augmented routing not strongly connected: {s} (node 0 = outside)")),
        Err(e) => Some(e.to_string()),
    };
    checks.push(ValidationCheck {
        name: "augmented_routing_irreducible".into(),
        pass: w.is_none(),
        witness: w,
    });

    let pass = checks.iter().all(|c| c.pass);
    ValidationReport { checks, pass }
}

/// The routing matrix augmented with an external node 0: entry (0, k) is the
/// share of total exogenous input entering station k, entry (k, 0) the
/// fraction of station k's output leaving the network.
pub fn augmented_routing(model: &MmfnModel) -> Result<DMatrix<f64>> {
    let d = model.d;
    let total: f64 = model.lambda.iter().sum();
    if total <= 0.0 {
        return Err(Error::Validation(
            "all exogenous input rates are zero; external input shares are undefined".into(),
        ));
    }
    let mut pbar = DMatrix::zeros(d + 1, d + 1);
    for k in 0..d {
        let lk: f64 = model.lambda.row(k).iter().sum();
        pbar[(0, k + 1)] = lk / total;
        let row_sum: f64 = model.p.row(k).iter().sum();
        pbar[(k + 1, 0)] = 1.0 - row_sum;
        for l in 0..d {
            pbar[(k + 1, l + 1)] = model.p[(k, l)];
        }
    }
    Ok(pbar)
}

/// Static quantities derived from a validated model: the reflection matrix
/// `R = I − Pᵗ` with its cached inverse, and the net flow rates
/// `v_k(i) = λ_k(i) + Σ_ℓ μ_ℓ(i) p_{ℓ,k} − μ_k(i)`.
#[derive(Clone, Debug)]
pub struct DerivedModel {
    pub model: MmfnModel,
    /// Reflection matrix `R = I − Pᵗ`, a nonsingular M-matrix.
    pub r: DMatrix<f64>,
    /// Cached inverse of `R`, entrywise nonnegative.
    pub r_inv: DMatrix<f64>,
    /// Net flow rates, `d × m`: the drift of buffer k in background state i
    /// while all buffers are busy.
    pub v: DMatrix<f64>,
}

/// Validates the model and computes [`DerivedModel`].
pub fn derive(model: MmfnModel) -> Result<DerivedModel> {
    let report = validate_model(&model);
    if !report.pass {
        return Err(Error::Validation(report.failed_names()));
    }
    let d = model.d;
    let r = DMatrix::identity(d, d) - model.p.transpose();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Validation("reflection matrix is singular".into()))?;

    // Residual guard on the cached inverse.
    let resid = (&r * &r_inv - DMatrix::<f64>::identity(d, d)).amax();
    if resid > 1e-12 {
        return Err(Error::NonConvergence(format!(
            "inverse of the reflection matrix has residual {resid:.3e} > 1e-12"
        )));
    }
    // M-matrix inverse nonnegativity (up to roundoff).
    if let Some(bad) = r_inv.iter().find(|&&x| x < -1e-12) {
        return Err(Error::Validation(format!(
            "inverse reflection matrix has negative entry {bad}; routing is not substochastic"
        )));
    }

    // v = λ + Pᵗ μ − μ, columnwise over background states.
    let v = &model.lambda + model.p.transpose() * &model.mu - &model.mu;

    Ok(DerivedModel { model, r, r_inv, v })
}

impl DerivedModel {
    /// Convenience constructor: validate + derive.
    pub fn new(model: MmfnModel) -> Result<Self> {
        derive(model)
    }

    pub fn d(&self) -> usize {
        self.model.d
    }

    pub fn m(&self) -> usize {
        self.model.m
    }

    /// Magnitude scale for tolerances, see [`MmfnModel::rate_scale`].
    pub fn rate_scale(&self) -> f64 {
        self.model.rate_scale()
    }

    /// Column `i` of `v` as a vector: per-station drift in background state i.
    pub fn v_state(&self, i: usize) -> DVector<f64> {
        self.v.column(i).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star_model() -> MmfnModel {
        // Two independent stations sharing a symmetric two-state background.
        MmfnModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]),
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
        )
        .unwrap()
    }

    #[test]
    fn star_topology_passes_all_checks() {
        let report = validate_model(&star_model());
        assert!(report.pass, "failed: {}", report.failed_names());
        assert_eq!(report.checks.len(), 6);
    }

    #[test]
    fn absorbing_background_state_fails_irreducibility() {
        let mut m = star_model();
        m.q = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, 0.0]);
        let report = validate_model(&m);
        assert!(!report.pass);
        let bad: Vec<_> = report.checks.iter().filter(|c| !c.pass).collect();
        assert_eq!(bad.len(), 1);
        assert_eq!(bad[0].name, "q_irreducible");
        assert!(bad[0].witness.as_deref().unwrap().contains("state 0 is not reachable"));
    }

    #[test]
    fn superstochastic_row_fails() {
        let mut m = star_model();
        m.p = DMatrix::from_row_slice(2, 2, &[0.6, 0.6, 0.0, 0.0]);
        let report = validate_model(&m);
        assert!(!report.pass);
        assert!(report.failed_names().contains("routing_rows_substochastic"));
    }

    #[test]
    fn negative_rates_rejected_structurally() {
        let err = MmfnModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, -0.1, 1.0, 1.0]),
            DMatrix::from_element(2, 2, 1.0),
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn tandem_reflection_and_net_flow() {
        // Full feed-forward: everything from station 1 goes to station 2.
        let m = MmfnModel::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.2, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.5, 1.6, 1.9, 1.15]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[-0.7, 0.7, 1.1, -1.1]),
        )
        .unwrap();
        let dm = derive(m).unwrap();
        assert_eq!(dm.r, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 1.0]));
        // v_1(i) = λ_1(i) − μ_1(i); v_2(i) = λ_2(i) + μ_1(i) − μ_2(i).
        let expect = DMatrix::from_row_slice(2, 2, &[0.5, -1.4, -0.4, 0.45]);
        assert!((dm.v.clone() - expect).amax() < 1e-14);
    }

    #[test]
    fn inverse_reflection_matches_neumann_series() {
        // Oracle: Σ (Pᵗ)ⁿ truncated far beyond convergence.
        let p = DMatrix::from_row_slice(
            3,
            3,
            &[0.1, 0.3, 0.2, 0.25, 0.05, 0.3, 0.2, 0.2, 0.1],
        );
        let m = MmfnModel::new(
            DMatrix::from_element(3, 2, 1.0),
            DMatrix::from_element(3, 2, 5.0),
            p,
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
        )
        .unwrap();
        let dm = derive(m).unwrap();
        let expect = DMatrix::from_row_slice(
            3,
            3,
            &[
                1.3659793814432994,
                0.4896907216494844,
                0.4123711340206186,
                0.5326460481099655,
                1.3230240549828176,
                0.4123711340206186,
                0.4810996563573884,
                0.5498281786941579,
                1.3402061855670109,
            ],
        );
        assert!((dm.r_inv.clone() - expect).amax() < 1e-12);
        assert!(dm.r_inv.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn augmented_routing_shares() {
        // Symmetric inputs: external node splits 50/50, everything exits.
        let pbar = augmented_routing(&star_model()).unwrap();
        assert_eq!(pbar[(0, 0)], 0.0);
        assert_eq!(pbar[(0, 1)], 0.5);
        assert_eq!(pbar[(0, 2)], 0.5);
        assert_eq!(pbar[(1, 0)], 1.0);
        assert_eq!(pbar[(2, 0)], 1.0);

        // Single-input tandem: all external input enters station 1.
        let tandem = MmfnModel::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.2, 0.0, 0.0]),
            DMatrix::from_element(2, 2, 3.0),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]),
        )
        .unwrap();
        let pbar = augmented_routing(&tandem).unwrap();
        assert_eq!(pbar[(0, 1)], 1.0);
        assert_eq!(pbar[(0, 2)], 0.0);

        // All-zero input is an error.
        let mut z = star_model();
        z.lambda = DMatrix::zeros(2, 2);
        assert!(augmented_routing(&z).is_err());
    }

    #[test]
    fn json_roundtrip_is_stable() {
        let text = r#"{"d":2,"m":2,"lambda":[[2.0,0.2],[0.0,0.0]],"mu":[[1.5,1.6],[1.9,1.15]],"P":[[0.0,1.0],[0.0,0.0]],"Q":[[-0.7,0.7],[1.1,-1.1]]}"#;
        let model: MmfnModel = serde_json::from_str(text).unwrap();
        let out = serde_json::to_string(&model).unwrap();
        let model2: MmfnModel = serde_json::from_str(&out).unwrap();
        assert_eq!(model, model2);
        assert_eq!(out, serde_json::to_string(&model2).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let text = r#"{"d":2,"m":2,"lambda":[[1.0,1.0]],"mu":[[1.0,1.0],[1.0,1.0]],"P":[[0.0,0.0],[0.0,0.0]],"Q":[[-1.0,1.0],[1.0,-1.0]]}"#;
        assert!(serde_json::from_str::<MmfnModel>(text).is_err());
    }
}
