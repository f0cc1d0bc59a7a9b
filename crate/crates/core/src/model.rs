//! Diffusive measurement models: a Hamiltonian H(θ), a single measured
//! Lindblad channel L(θ) with detection efficiency η(θ), and the one-step
//! partial Kraus map
//!
//!   K_dy(X) = M_dy X M_dy† + (1−η)·L X L†·dt,
//!   M_dy   = I − (iH + ½L†L)·dt + √η·L·dy,
//!
//! evaluated with exact operator products (no first-order truncation in dt).
//!
//! Estimated parameters live in *working coordinates*: entries tagged `Sqrt`
//! in the [`ParamSpec`] hold the square root of the natural value (so κ ≥ 0
//! and η ≥ 0 are automatic), the rest coincide with the natural value. All
//! model maps and their derivatives are expressed in working coordinates.

use num_complex::Complex64;
use smallvec::SmallVec;

use crate::algebra::{pauli_x, pauli_z, Operator, HERMITICITY_TOL};
use crate::error::{Error, Result};

/// Coordinate map between a natural parameter and its working coordinate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reparam {
    /// working = natural
    Identity,
    /// working = √natural (requires a non-negative natural lower bound)
    Sqrt,
}

/// Declaration of one estimated parameter: name, coordinate map and
/// box constraints in natural coordinates.
#[derive(Clone, Debug)]
pub struct ParamDef {
    pub name: String,
    pub reparam: Reparam,
    pub lo: f64,
    pub hi: f64,
}

impl ParamDef {
    pub fn new(name: &str, reparam: Reparam, lo: f64, hi: f64) -> Self {
        ParamDef {
            name: name.to_owned(),
            reparam,
            lo,
            hi,
        }
    }
}

/// Ordered list of estimated parameters.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    defs: Vec<ParamDef>,
}

impl ParamSpec {
    pub fn new(defs: Vec<ParamDef>) -> Result<Self> {
        if defs.is_empty() {
            return Err(Error::InvalidArgument(
                "parameter specification must declare at least one parameter".into(),
            ));
        }
        for (i, d) in defs.iter().enumerate() {
            if d.name.is_empty() {
                return Err(Error::InvalidArgument(format!("parameter {i} has no name")));
            }
            if defs[..i].iter().any(|p| p.name == d.name) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate parameter name `{}`",
                    d.name
                )));
            }
            if !(d.lo < d.hi) {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{}` has empty bounds [{}, {}]",
                    d.name, d.lo, d.hi
                )));
            }
            if d.reparam == Reparam::Sqrt && d.lo < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "sqrt-reparametrized parameter `{}` needs a non-negative lower bound",
                    d.name
                )));
            }
        }
        Ok(ParamSpec { defs })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.defs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defs.is_empty()
    }

    pub fn defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn names(&self) -> Vec<&str> {
        self.defs.iter().map(|d| d.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.defs.iter().position(|d| d.name == name)
    }

    /// Converts natural coordinates to working coordinates, validating the
    /// natural-coordinate bounds.
    pub fn to_working(&self, natural: &[f64]) -> Result<Vec<f64>> {
        self.check_len(natural)?;
        let mut w = Vec::with_capacity(self.len());
        for (d, &x) in self.defs.iter().zip(natural) {
            if !x.is_finite() || x < d.lo || x > d.hi {
                return Err(Error::OutOfBounds {
                    name: d.name.clone(),
                    value: x,
                    lo: d.lo,
                    hi: d.hi,
                });
            }
            w.push(match d.reparam {
                Reparam::Identity => x,
                Reparam::Sqrt => x.sqrt(),
            });
        }
        Ok(w)
    }

    /// Converts working coordinates back to natural coordinates.
    pub fn to_natural(&self, working: &[f64]) -> Vec<f64> {
        self.defs
            .iter()
            .zip(working)
            .map(|(d, &w)| match d.reparam {
                Reparam::Identity => w,
                Reparam::Sqrt => w * w,
            })
            .collect()
    }

    /// Box constraints mapped to working coordinates.
    pub fn working_bounds(&self, j: usize) -> (f64, f64) {
        let d = &self.defs[j];
        match d.reparam {
            Reparam::Identity => (d.lo, d.hi),
            Reparam::Sqrt => (d.lo.max(0.0).sqrt(), d.hi.sqrt()),
        }
    }

    /// Clamps a working-coordinate vector into its box constraints.
    pub fn clamp_working(&self, w: &mut [f64]) {
        for j in 0..self.len().min(w.len()) {
            let (lo, hi) = self.working_bounds(j);
            w[j] = w[j].clamp(lo, hi);
        }
    }

    /// Validates length, finiteness and working-coordinate bounds.
    pub fn validate_working(&self, w: &[f64]) -> Result<()> {
        self.check_len(w)?;
        for (j, (&x, d)) in w.iter().zip(self.defs.iter()).enumerate() {
            let (lo, hi) = self.working_bounds(j);
            if !x.is_finite() || x < lo || x > hi {
                return Err(Error::OutOfBounds {
                    name: d.name.clone(),
                    value: x,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter vector has {} entries, spec declares {}",
                v.len(),
                self.len()
            )));
        }
        Ok(())
    }
}

/// A continuously monitored system with one diffusive measurement channel.
/// All maps take the parameter vector in working coordinates.
pub trait DiffusiveModel {
    fn dim(&self) -> usize;
    /// Discretization step of the measurement record.
    fn dt(&self) -> f64;
    fn params(&self) -> &ParamSpec;
    /// Hamiltonian H(w), Hermitian.
    fn hamiltonian(&self, w: &[f64]) -> Operator;
    /// ∂H/∂w_j.
    fn hamiltonian_deriv(&self, w: &[f64], j: usize) -> Operator;
    /// Measured channel operator L(w).
    fn lindblad(&self, w: &[f64]) -> Operator;
    /// ∂L/∂w_j.
    fn lindblad_deriv(&self, w: &[f64], j: usize) -> Operator;
    /// √η(w) ∈ [0, 1].
    fn sqrt_efficiency(&self, w: &[f64]) -> f64;
    /// ∂√η/∂w_j.
    fn sqrt_efficiency_deriv(&self, w: &[f64], j: usize) -> f64;
}

/// Two-level system under homodyne-type monitoring:
/// H = (Δ/2)σz + (Ω/2)σx, L = √κ·σz, with detection efficiency η.
///
/// Parameters, in order: `omega`, `delta`, `eta`, `kappa`; η and κ use sqrt
/// working coordinates, so the working vector is (Ω, Δ, √η, √κ).
#[derive(Clone, Debug)]
pub struct TwoLevelModel {
    dt: f64,
    spec: ParamSpec,
    // Constant operator building blocks, cached: the filter rebuilds the
    // model operators every step.
    sz: Operator,
    half_sx: Operator,
    half_sz: Operator,
    zero: Operator,
}

/// Canonical parameter order of [`TwoLevelModel`].
pub const TWO_LEVEL_PARAMS: [&str; 4] = ["omega", "delta", "eta", "kappa"];
const IDX_OMEGA: usize = 0;
const IDX_DELTA: usize = 1;
const IDX_ETA: usize = 2;
const IDX_KAPPA: usize = 3;

impl TwoLevelModel {
    pub fn new(dt: f64) -> Result<Self> {
        Self::with_bounds(
            dt,
            [
                (f64::NEG_INFINITY, f64::INFINITY),
                (f64::NEG_INFINITY, f64::INFINITY),
                (0.0, 1.0),
                (0.0, f64::INFINITY),
            ],
        )
    }

    /// Same model with custom natural-coordinate box constraints, given in
    /// canonical order (Ω, Δ, η, κ). The η interval must stay inside [0, 1]
    /// and the κ interval inside [0, ∞); the canonical sqrt working
    /// coordinates for η and κ are kept.
    pub fn with_bounds(dt: f64, bounds: [(f64, f64); 4]) -> Result<Self> {
        if !(dt >= 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "dt = {dt} must be finite and non-negative"
            )));
        }
        let (elo, ehi) = bounds[IDX_ETA];
        if !(0.0..=1.0).contains(&elo) || !(0.0..=1.0).contains(&ehi) {
            return Err(Error::InvalidArgument(format!(
                "eta bounds [{elo}, {ehi}] must lie within [0, 1]"
            )));
        }
        if bounds[IDX_KAPPA].0 < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "kappa lower bound {} must be non-negative",
                bounds[IDX_KAPPA].0
            )));
        }
        let reparams = [
            Reparam::Identity,
            Reparam::Identity,
            Reparam::Sqrt,
            Reparam::Sqrt,
        ];
        let defs = TWO_LEVEL_PARAMS
            .iter()
            .zip(reparams)
            .zip(bounds)
            .map(|((name, reparam), (lo, hi))| ParamDef::new(name, reparam, lo, hi))
            .collect();
        let spec = ParamSpec::new(defs)?;
        Ok(TwoLevelModel {
            dt,
            spec,
            sz: pauli_z(),
            half_sx: pauli_x().scale_re(0.5),
            half_sz: pauli_z().scale_re(0.5),
            zero: Operator::zeros(2),
        })
    }
}

impl DiffusiveModel for TwoLevelModel {
    fn dim(&self) -> usize {
        2
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn params(&self) -> &ParamSpec {
        &self.spec
    }

    fn hamiltonian(&self, w: &[f64]) -> Operator {
        let mut h = self.half_sz.scale_re(w[IDX_DELTA]);
        h.add_scaled_re_assign(&self.half_sx, w[IDX_OMEGA]);
        h
    }

    fn hamiltonian_deriv(&self, _w: &[f64], j: usize) -> Operator {
        match j {
            IDX_OMEGA => self.half_sx.clone(),
            IDX_DELTA => self.half_sz.clone(),
            _ => self.zero.clone(),
        }
    }

    fn lindblad(&self, w: &[f64]) -> Operator {
        self.sz.scale_re(w[IDX_KAPPA])
    }

    fn lindblad_deriv(&self, _w: &[f64], j: usize) -> Operator {
        if j == IDX_KAPPA {
            self.sz.clone()
        } else {
            self.zero.clone()
        }
    }

    fn sqrt_efficiency(&self, w: &[f64]) -> f64 {
        w[IDX_ETA]
    }

    fn sqrt_efficiency_deriv(&self, _w: &[f64], j: usize) -> f64 {
        if j == IDX_ETA {
            1.0
        } else {
            0.0
        }
    }
}

/// Builds the two-level example model at the given natural parameters;
/// returns the model together with the working-coordinate vector.
pub fn two_level_example(
    omega: f64,
    delta: f64,
    eta: f64,
    kappa: f64,
    dt: f64,
) -> Result<(TwoLevelModel, Vec<f64>)> {
    let model = TwoLevelModel::new(dt)?;
    let w = model.params().to_working(&[omega, delta, eta, kappa])?;
    Ok((model, w))
}

/// Wraps a model with a subset of its working coordinates pinned to fixed
/// values; only the remaining coordinates are exposed as estimable
/// parameters. A pinned parameter disappears from the gradient and
/// sensitivity machinery entirely — the wrapped model sees it as a constant.
#[derive(Clone, Debug)]
pub struct FixedParamModel<M> {
    inner: M,
    /// Full-length working vector; pinned slots keep their fixed values,
    /// free slots are overwritten on every evaluation.
    template: Vec<f64>,
    /// Inner indices of the free coordinates, ascending.
    free: Vec<usize>,
    spec: ParamSpec,
}

impl<M: DiffusiveModel> FixedParamModel<M> {
    /// Pins the named parameters at the working values they hold in
    /// `full_working` (a complete, valid working vector for `inner`); all
    /// other parameters remain estimable. At least one must remain free.
    pub fn new(inner: M, full_working: &[f64], pinned: &[&str]) -> Result<Self> {
        let inner_spec = inner.params();
        inner_spec.validate_working(full_working)?;
        let mut is_pinned = vec![false; inner_spec.len()];
        for name in pinned {
            let j = inner_spec.index_of(name).ok_or_else(|| {
                Error::InvalidArgument(format!("cannot pin unknown parameter `{name}`"))
            })?;
            if is_pinned[j] {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{name}` pinned twice"
                )));
            }
            is_pinned[j] = true;
        }
        let free: Vec<usize> = (0..inner_spec.len()).filter(|&j| !is_pinned[j]).collect();
        let defs: Vec<ParamDef> = free.iter().map(|&j| inner_spec.defs()[j].clone()).collect();
        let spec = ParamSpec::new(defs).map_err(|_| {
            Error::InvalidArgument("at least one parameter must remain free".into())
        })?;
        Ok(FixedParamModel {
            template: full_working.to_vec(),
            free,
            spec,
            inner,
        })
    }

    pub fn inner(&self) -> &M {
        &self.inner
    }

    /// Expands free-coordinate values into the full working vector of the
    /// wrapped model.
    pub fn full_working(&self, w: &[f64]) -> Vec<f64> {
        let mut full = self.template.clone();
        for (&slot, &val) in self.free.iter().zip(w) {
            full[slot] = val;
        }
        full
    }
}

impl<M: DiffusiveModel> DiffusiveModel for FixedParamModel<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn dt(&self) -> f64 {
        self.inner.dt()
    }

    fn params(&self) -> &ParamSpec {
        &self.spec
    }

    fn hamiltonian(&self, w: &[f64]) -> Operator {
        self.inner.hamiltonian(&self.full_working(w))
    }

    fn hamiltonian_deriv(&self, w: &[f64], j: usize) -> Operator {
        self.inner
            .hamiltonian_deriv(&self.full_working(w), self.free[j])
    }

    fn lindblad(&self, w: &[f64]) -> Operator {
        self.inner.lindblad(&self.full_working(w))
    }

    fn lindblad_deriv(&self, w: &[f64], j: usize) -> Operator {
        self.inner
            .lindblad_deriv(&self.full_working(w), self.free[j])
    }

    fn sqrt_efficiency(&self, w: &[f64]) -> f64 {
        self.inner.sqrt_efficiency(&self.full_working(w))
    }

    fn sqrt_efficiency_deriv(&self, w: &[f64], j: usize) -> f64 {
        self.inner
            .sqrt_efficiency_deriv(&self.full_working(w), self.free[j])
    }
}

/// One-step Kraus data at a given parameter point and outcome: the operator
/// M_dy plus the inefficiency channel (L, weight (1−η)·dt).
#[derive(Clone, Debug)]
pub struct KrausStep {
    pub m: Operator,
    pub l: Operator,
    /// (1−η)·dt
    pub loss_weight: f64,
}

/// Applies the partial Kraus map: K(X) = M X M† + loss_weight · L X L†.
pub fn apply_partial_kraus(ks: &KrausStep, x: &Operator) -> Result<Operator> {
    if ks.m.dim() != x.dim() {
        return Err(Error::DimensionMismatch(ks.m.dim(), x.dim()));
    }
    let mut out = ks.m.matmul(x).matmul(&ks.m.adjoint());
    if ks.loss_weight != 0.0 {
        out.add_scaled_re_assign(&ks.l.matmul(x).matmul(&ks.l.adjoint()), ks.loss_weight);
    }
    Ok(out)
}

/// Quadratic polynomial in the outcome: value = z + u·dy + v·dy².
/// Traces of the Kraus map and of its parameter derivatives have this form.
#[derive(Clone, Copy, Debug)]
pub struct TraceQuad {
    pub z: f64,
    pub u: f64,
    pub v: f64,
}

impl TraceQuad {
    #[inline]
    pub fn eval(&self, dy: f64) -> f64 {
        self.z + dy * (self.u + dy * self.v)
    }

    /// Average over dy ~ N(0, dt): z + v·dt.
    #[inline]
    pub fn gaussian_mean(&self, dt: f64) -> f64 {
        self.z + self.v * dt
    }
}

/// Everything about the Kraus map at a fixed parameter point that does not
/// depend on the outcome or the state: operator ingredients, their parameter
/// derivatives, and cached products for O(n²) trace evaluation.
pub struct KrausContext {
    dim: usize,
    dt: f64,
    sqrt_eta: f64,
    eta: f64,
    /// (1−η)·dt
    loss_weight: f64,
    l: Operator,
    /// L†
    ld: Operator,
    /// M at dy = 0: I − (iH + ½L†L)·dt
    m0: Operator,
    /// M₀†
    m0d: Operator,
    /// L†L
    g: Operator,
    /// M₀†M₀
    s: Operator,
    /// M₀†L
    t: Operator,
    per_param: SmallVec<[ParamDerivs; 4]>,
}

/// Per-parameter derivative data (all in working coordinates).
pub(crate) struct ParamDerivs {
    /// ∂L/∂w_j
    pub(crate) dl: Operator,
    /// ∂M₀/∂w_j = −(i·∂H + ½(∂L†·L + L†·∂L))·dt
    pub(crate) dm0: Operator,
    /// ∂(√η·L)/∂w_j = ∂√η·L + √η·∂L
    pub(crate) db: Operator,
    /// ∂(1−η)dt/∂w_j = −2√η·∂√η·dt
    pub(crate) dloss: f64,
    /// ∂L/∂w_j ≡ 0 (lets hot paths skip the loss-derivative terms)
    pub(crate) dl_zero: bool,
    /// true when the parameter does not enter M or the loss channel at all
    pub(crate) inert: bool,
}

impl KrausContext {
    pub fn new<M: DiffusiveModel + ?Sized>(model: &M, w: &[f64]) -> Result<Self> {
        let spec = model.params();
        spec.validate_working(w)?;
        let dim = model.dim();
        let dt = model.dt();
        if !(dt >= 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "dt = {dt} must be finite and non-negative"
            )));
        }
        let h = model.hamiltonian(w);
        if h.dim() != dim {
            return Err(Error::DimensionMismatch(h.dim(), dim));
        }
        if !h.is_hermitian(HERMITICITY_TOL) {
            return Err(Error::InvalidOperator(
                "model Hamiltonian is not Hermitian".into(),
            ));
        }
        let l = model.lindblad(w);
        if l.dim() != dim {
            return Err(Error::DimensionMismatch(l.dim(), dim));
        }
        let sqrt_eta = model.sqrt_efficiency(w);
        if !(0.0..=1.0).contains(&sqrt_eta) {
            return Err(Error::OutOfBounds {
                name: "sqrt_efficiency".into(),
                value: sqrt_eta,
                lo: 0.0,
                hi: 1.0,
            });
        }
        let eta = sqrt_eta * sqrt_eta;
        let loss_weight = (1.0 - eta) * dt;
        let ld = l.adjoint();
        let g = ld.matmul(&l);
        // M₀ = I − (iH + ½L†L)·dt
        let mut m0 = Operator::identity(dim);
        m0.add_scaled_assign(&h, Complex64::new(0.0, -dt));
        m0.add_scaled_re_assign(&g, -0.5 * dt);
        let m0d = m0.adjoint();
        let s = m0d.matmul(&m0);
        let t = m0d.matmul(&l);

        let mut per_param: SmallVec<[ParamDerivs; 4]> = SmallVec::with_capacity(spec.len());
        for j in 0..spec.len() {
            let dh = model.hamiltonian_deriv(w, j);
            let dl = model.lindblad_deriv(w, j);
            let dse = model.sqrt_efficiency_deriv(w, j);
            let dl_zero = dl.max_abs() == 0.0;
            let inert = dh.max_abs() == 0.0 && dl_zero && dse == 0.0;
            // ∂M₀ = −(i·∂H + ½(∂L†L + L†∂L))·dt
            let mut dm0 = Operator::zeros(dim);
            dm0.add_scaled_assign(&dh, Complex64::new(0.0, -dt));
            if !dl_zero {
                let dld_l = dl.adjoint().matmul(&l);
                dm0.add_scaled_re_assign(&dld_l, -0.5 * dt);
                dm0.add_scaled_re_assign(&dld_l.adjoint(), -0.5 * dt);
            }
            let mut db = dl.scale_re(sqrt_eta);
            db.add_scaled_re_assign(&l, dse);
            per_param.push(ParamDerivs {
                dloss: -2.0 * sqrt_eta * dse * dt,
                dl_zero,
                dl,
                dm0,
                db,
                inert,
            });
        }
        Ok(KrausContext {
            dim,
            dt,
            sqrt_eta,
            eta,
            loss_weight,
            l,
            ld,
            m0,
            m0d,
            g,
            s,
            t,
            per_param,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.dt
    }

    #[inline]
    pub fn sqrt_eta(&self) -> f64 {
        self.sqrt_eta
    }

    #[inline]
    pub fn eta(&self) -> f64 {
        self.eta
    }

    #[inline]
    pub fn loss_weight(&self) -> f64 {
        self.loss_weight
    }

    #[inline]
    pub fn lindblad(&self) -> &Operator {
        &self.l
    }

    #[inline]
    pub(crate) fn lindblad_adjoint(&self) -> &Operator {
        &self.ld
    }

    #[inline]
    pub(crate) fn m0_adjoint(&self) -> &Operator {
        &self.m0d
    }

    #[inline]
    pub(crate) fn param_derivs(&self, j: usize) -> &ParamDerivs {
        &self.per_param[j]
    }

    #[inline]
    pub fn n_params(&self) -> usize {
        self.per_param.len()
    }

    /// M_dy = M₀ + √η·dy·L.
    pub fn m_at(&self, dy: f64) -> Operator {
        let mut m = self.m0.clone();
        m.add_scaled_re_assign(&self.l, self.sqrt_eta * dy);
        m
    }

    /// Packages the step operators at a given outcome.
    pub fn kraus_step(&self, dy: f64) -> KrausStep {
        KrausStep {
            m: self.m_at(dy),
            l: self.l.clone(),
            loss_weight: self.loss_weight,
        }
    }

    /// K_dy(X) = M X M† + (1−η)·dt·L X L†.
    pub fn apply(&self, x: &Operator, dy: f64) -> Operator {
        let m = self.m_at(dy);
        let mut out = m.matmul(x).matmul(&m.adjoint());
        if self.loss_weight != 0.0 {
            out.add_scaled_re_assign(&self.l.matmul(x).matmul(&self.l.adjoint()), self.loss_weight);
        }
        out
    }

    /// ∂K_dy/∂w_j applied to a fixed Hermitian X.
    pub fn apply_deriv(&self, j: usize, x: &Operator, dy: f64) -> Operator {
        let pd = &self.per_param[j];
        let m = self.m_at(dy);
        // ∂M = ∂M₀ + dy·∂b
        let mut dm = pd.dm0.clone();
        dm.add_scaled_re_assign(&pd.db, dy);
        // W + W† with W = ∂M·X·M†
        let w_op = dm.matmul(x).matmul(&m.adjoint());
        let mut out = w_op.clone();
        out.add_adjoint_assign(&w_op);
        if pd.dloss != 0.0 {
            out.add_scaled_re_assign(&self.l.matmul(x).matmul(&self.l.adjoint()), pd.dloss);
        }
        if self.loss_weight != 0.0 && !pd.dl_zero {
            let v_op = pd.dl.matmul(x).matmul(&self.l.adjoint());
            out.add_scaled_re_assign(&v_op, self.loss_weight);
            out.add_scaled_re_assign(&v_op.adjoint(), self.loss_weight);
        }
        out
    }

    /// Coefficients of Tr(K_dy(X)) as a quadratic in dy, for Hermitian X:
    /// z = Tr(X·M₀†M₀) + (1−η)dt·Tr(X·L†L), u = 2√η·Re Tr(X·M₀†L),
    /// v = η·Tr(X·L†L).
    #[inline]
    pub fn trace_coeffs(&self, x: &Operator) -> TraceQuad {
        let xg = x.trace_prod(&self.g).re;
        TraceQuad {
            z: x.trace_prod(&self.s).re + self.loss_weight * xg,
            u: 2.0 * self.sqrt_eta * x.trace_prod(&self.t).re,
            v: self.eta * xg,
        }
    }

    /// Coefficients of Tr(∂K_dy/∂w_j (X)) as a quadratic in dy, Hermitian X.
    #[inline]
    pub fn deriv_trace_coeffs(&self, j: usize, x: &Operator) -> TraceQuad {
        if self.per_param[j].inert {
            return TraceQuad {
                z: 0.0,
                u: 0.0,
                v: 0.0,
            };
        }
        let q = x.matmul(&self.m0d);
        let r = x.matmul(&self.ld);
        self.deriv_trace_coeffs_with(j, &q, &r, x)
    }

    /// [`Self::deriv_trace_coeffs`] with the shared products Q = X·M₀† and
    /// R = X·L† supplied by the caller, so the per-parameter work reduces to
    /// O(n²) trace contractions. Every trace of a parameter derivative
    /// contracts X against one of ∂M₀, ∂(√η L), ∂L through Q or R:
    /// e.g. Tr(X·M₀†·∂M₀) = Tr(Q·∂M₀).
    #[inline]
    pub(crate) fn deriv_trace_coeffs_with(
        &self,
        j: usize,
        q: &Operator,
        r: &Operator,
        x: &Operator,
    ) -> TraceQuad {
        let pd = &self.per_param[j];
        if pd.inert {
            return TraceQuad {
                z: 0.0,
                u: 0.0,
                v: 0.0,
            };
        }
        let mut z = 2.0 * q.trace_prod(&pd.dm0).re;
        if pd.dloss != 0.0 {
            z += pd.dloss * x.trace_prod(&self.g).re;
        }
        if self.loss_weight != 0.0 && !pd.dl_zero {
            z += 2.0 * self.loss_weight * r.trace_prod(&pd.dl).re;
        }
        TraceQuad {
            z,
            u: 2.0 * (self.sqrt_eta * r.trace_prod(&pd.dm0) + q.trace_prod(&pd.db)).re,
            v: 2.0 * self.sqrt_eta * r.trace_prod(&pd.db).re,
        }
    }

    /// Measured expectation s = Tr((L+L†)ρ) for Hermitian ρ.
    #[inline]
    pub fn expectation(&self, rho: &Operator) -> f64 {
        2.0 * rho.trace_prod(&self.l).re
    }
}

/// Builds the one-step Kraus data M_dy, L, (1−η)dt at working coordinates
/// `w` and outcome `dy`.
pub fn kraus_operator<M: DiffusiveModel + ?Sized>(
    model: &M,
    w: &[f64],
    dy: f64,
) -> Result<KrausStep> {
    Ok(KrausContext::new(model, w)?.kraus_step(dy))
}

/// ∂K_dy/∂w_j applied to a fixed Hermitian X, at working coordinates `w`.
pub fn apply_partial_kraus_deriv<M: DiffusiveModel + ?Sized>(
    model: &M,
    w: &[f64],
    j: usize,
    x: &Operator,
    dy: f64,
) -> Result<Operator> {
    let ctx = KrausContext::new(model, w)?;
    if j >= ctx.n_params() {
        return Err(Error::InvalidArgument(format!(
            "parameter index {j} out of range for {} parameters",
            ctx.n_params()
        )));
    }
    Ok(ctx.apply_deriv(j, x, dy))
}
