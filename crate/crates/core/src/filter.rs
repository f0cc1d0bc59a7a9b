//! Quantum filter, per-parameter sensitivity (tangent) filters, and the
//! per-step log-likelihood and gradient increments.
//!
//! One step of the coupled recursion, at a candidate working parameter
//! vector w and record sample dy, reads
//!
//! ```text
//! ρ̃'  = K_dy(ρ̃) / Tr K_dy(ρ̃)
//! ξ_j' = [∂_j K_dy(ρ̃) + K_dy(ξ_j)] / Tr K_dy(ρ̃)
//!        − Tr[∂_j K_dy(ρ̃) + K_dy(ξ_j)] · ρ̃' / Tr K_dy(ρ̃)
//! ```
//!
//! where ξ_j = ∂ρ̃/∂w_j is the filter sensitivity; the second line is the
//! exact derivative of the first, so the recursion propagates the gradient
//! of the filtered state without storing the record history.
//!
//! The conditional outcome density of dy given ρ̃ is
//! Tr K_dy(ρ̃)·N(dy; 0, dt) / Z(ρ̃), with the normalization
//! Z = ∫ Tr K_y(ρ̃)·N(y; 0, dt) dy = z + v·dt evaluated exactly from the
//! quadratic trace polynomial Tr K_y(ρ̃) = z + u·y + v·y². The normalized
//! per-step log-likelihood increment and its parameter gradient are
//!
//! ```text
//! Δℓ   = ln[ Tr K_dy(ρ̃) / Z ]
//! g_j  = X_j(dy)/Tr K_dy(ρ̃) − (z_{X_j} + v_{X_j}·dt)/Z ,
//! X_j  = Tr[∂_j K_dy(ρ̃) + K_dy(ξ_j)]
//! ```
//!
//! so that an uninformative channel (detection efficiency zero, where u and
//! v vanish identically) contributes exactly zero log-likelihood and exactly
//! zero gradient — the record then carries no information and the estimate
//! must not move. Z − 1 is O(dt²) and is reported as a diagnostic.

use smallvec::SmallVec;

use crate::algebra::{
    DensityOperator, TangentOperator, DEGENERATE_TRACE_THRESHOLD, STRICT_POSITIVITY_TOL,
};
use crate::error::{Error, Result};
use crate::model::{DiffusiveModel, KrausContext};

/// Per-parameter gradient storage; inline (no heap) for up to 4 parameters.
pub type GradVec = SmallVec<[f64; 4]>;

/// Joint filter state: conditional density matrix, one sensitivity operator
/// per model parameter, the accumulated log-likelihood, and the number of
/// completed steps.
#[derive(Clone, Debug)]
pub struct FilterState {
    pub rho: DensityOperator,
    pub xi: Vec<TangentOperator>,
    pub loglik: f64,
    pub step: usize,
}

impl FilterState {
    /// Fresh state with all sensitivities at zero (the conventional
    /// initialization: a fixed ρ̃₀ does not depend on the parameters).
    pub fn new(rho0: DensityOperator, n_params: usize) -> Self {
        let dim = rho0.dim();
        FilterState {
            rho: rho0,
            xi: vec![TangentOperator::zero(dim); n_params],
            loglik: 0.0,
            step: 0,
        }
    }
}

/// Scalar outputs of one coupled step.
#[derive(Clone, Debug)]
pub struct StepScalars {
    /// Normalized log-likelihood increment ln[Tr K_dy(ρ̃)/Z].
    pub dloglik: f64,
    /// Gradient of the log-likelihood increment per working parameter.
    pub grad: GradVec,
    /// dy − √η·Tr[(L+L†)ρ̃]·dt, with ρ̃ the pre-update state.
    pub innovation: f64,
    /// Measured signal expectation s = Tr[(L+L†)ρ̃] before the update.
    pub expectation: f64,
    /// Tr K_dy(ρ̃) before renormalization.
    pub trace_kraus: f64,
    /// Z − 1: deviation of the outcome-averaged map trace from unity
    /// (O(dt²) discretization diagnostic).
    pub trace_defect: f64,
}

/// Advances state, sensitivities and log-likelihood by one record sample,
/// in place, and returns the per-step scalars.
///
/// All right-hand sides use the pre-update ρ̃, ξ and the same dy. With
/// `strict_positivity` the updated state must keep its smallest eigenvalue
/// above −[`STRICT_POSITIVITY_TOL`]; by default the state is only
/// re-Hermitized and renormalized (scrub policy).
pub fn advance(
    ctx: &KrausContext,
    fs: &mut FilterState,
    dy: f64,
    strict_positivity: bool,
) -> Result<StepScalars> {
    let p = ctx.n_params();
    if fs.xi.len() != p {
        return Err(Error::InvalidArgument(format!(
            "state carries {} sensitivity operators, model has {} parameters",
            fs.xi.len(),
            p
        )));
    }
    if fs.rho.dim() != ctx.dim() {
        return Err(Error::DimensionMismatch(fs.rho.dim(), ctx.dim()));
    }
    if !dy.is_finite() {
        return Err(Error::NonFinite(format!(
            "record sample at step {}",
            fs.step
        )));
    }
    let dt = ctx.dt();
    let step = fs.step;
    let rho = fs.rho.op();

    // Scalar route: likelihood increment and innovation from the quadratic
    // trace polynomial of the map.
    let q = ctx.trace_coeffs(rho);
    let tk = q.eval(dy);
    let z_norm = q.gaussian_mean(dt);
    if !(tk > DEGENERATE_TRACE_THRESHOLD && z_norm > DEGENERATE_TRACE_THRESHOLD) {
        return Err(Error::DegenerateUpdate {
            step,
            trace: tk.min(z_norm),
            threshold: DEGENERATE_TRACE_THRESHOLD,
        });
    }
    let dloglik = (tk / z_norm).ln();
    let s = ctx.expectation(rho);
    let innovation = dy - ctx.sqrt_eta() * s * dt;

    // Matrix route: state and sensitivity updates.
    let m = ctx.m_at(dy);
    let mdag = m.adjoint();
    let m_rho = m.matmul(rho);
    let mut k_rho = m_rho.matmul(&mdag);
    let lw = ctx.loss_weight();
    let l_rho = ctx.lindblad().matmul(rho);
    // ρ is Hermitian, so ρL† = (Lρ)† and ρM† = (Mρ)† come for free.
    let rho_ldag = l_rho.adjoint();
    let l_rho_ldag = l_rho.matmul(ctx.lindblad_adjoint());
    if lw != 0.0 {
        k_rho.add_scaled_re_assign(&l_rho_ldag, lw);
    }
    let k_rho = k_rho.hermitize();
    let tk_m = k_rho.trace().re;
    if !(tk_m > DEGENERATE_TRACE_THRESHOLD) {
        return Err(Error::DegenerateUpdate {
            step,
            trace: tk_m,
            threshold: DEGENERATE_TRACE_THRESHOLD,
        });
    }
    let inv_tk = 1.0 / tk_m;
    let rho_next = k_rho.scale_re(inv_tk);
    if strict_positivity {
        let lam = rho_next.smallest_eigenvalue();
        if lam < -STRICT_POSITIVITY_TOL {
            return Err(Error::PositivityViolation {
                step,
                eigenvalue: lam,
            });
        }
    }
    let rho_mdag = m_rho.adjoint();
    let rho_m0dag = rho.matmul(ctx.m0_adjoint());

    let mut grad: GradVec = SmallVec::with_capacity(p);
    for j in 0..p {
        let pd = ctx.param_derivs(j);
        let xi_op = fs.xi[j].op();

        // Numerator ∂_j K_dy(ρ̃) + K_dy(ξ_j), all at pre-update quantities.
        let mut num = m.matmul(xi_op).matmul(&mdag);
        if lw != 0.0 {
            let l_xi = ctx.lindblad().matmul(xi_op);
            num.add_scaled_re_assign(&l_xi.matmul(ctx.lindblad_adjoint()), lw);
        }
        if !pd.inert {
            // W + W† with W = (∂M₀ + dy·∂(√η L))·(ρM†).
            let mut dm = pd.dm0.clone();
            dm.add_scaled_re_assign(&pd.db, dy);
            let w_op = dm.matmul(&rho_mdag);
            num.add_scaled_re_assign(&w_op, 1.0);
            num.add_adjoint_assign(&w_op);
            if pd.dloss != 0.0 {
                num.add_scaled_re_assign(&l_rho_ldag, pd.dloss);
            }
            if lw != 0.0 && !pd.dl_zero {
                // (1−η)dt·(V + V†) with V = ∂L·(ρL†).
                let v_op = pd.dl.matmul(&rho_ldag).scale_re(lw);
                num.add_scaled_re_assign(&v_op, 1.0);
                num.add_adjoint_assign(&v_op);
            }
        }
        let x_tr = num.trace().re;

        // Gradient increment from the trace polynomials (pre-update ξ_j).
        let qx = ctx.trace_coeffs(xi_op);
        let qd = ctx.deriv_trace_coeffs_with(j, &rho_m0dag, &rho_ldag, rho);
        let zx = qx.z + qd.z;
        let ux = qx.u + qd.u;
        let vx = qx.v + qd.v;
        grad.push((zx + dy * (ux + dy * vx)) / tk - (zx + vx * dt) / z_norm);

        // ξ_j' = num/Tr K − Tr(num)·ρ̃'/Tr K, re-Hermitized.
        let mut xi_next = num.scale_re(inv_tk);
        xi_next.add_scaled_re_assign(&rho_next, -x_tr * inv_tk);
        fs.xi[j] = TangentOperator::from_parts_unchecked(xi_next.hermitize());
    }

    fs.rho = DensityOperator::from_renormalized_unchecked(rho_next);
    fs.loglik += dloglik;
    fs.step += 1;

    Ok(StepScalars {
        dloglik,
        grad,
        innovation,
        expectation: s,
        trace_kraus: tk,
        trace_defect: z_norm - 1.0,
    })
}

/// Sensitivity-free fast path: advances only the state and returns it with
/// the normalized log-likelihood increment. Produces bit-identical results
/// to the state/likelihood parts of [`advance`].
pub fn propagate(
    ctx: &KrausContext,
    rho: &DensityOperator,
    dy: f64,
) -> Result<(DensityOperator, f64)> {
    if rho.dim() != ctx.dim() {
        return Err(Error::DimensionMismatch(rho.dim(), ctx.dim()));
    }
    if !dy.is_finite() {
        return Err(Error::NonFinite("record sample".into()));
    }
    let q = ctx.trace_coeffs(rho.op());
    let tk = q.eval(dy);
    let z_norm = q.gaussian_mean(ctx.dt());
    if !(tk > DEGENERATE_TRACE_THRESHOLD && z_norm > DEGENERATE_TRACE_THRESHOLD) {
        return Err(Error::DegenerateTrace {
            trace: tk.min(z_norm),
            threshold: DEGENERATE_TRACE_THRESHOLD,
        });
    }
    let dloglik = (tk / z_norm).ln();
    let m = ctx.m_at(dy);
    let mdag = m.adjoint();
    let m_rho = m.matmul(rho.op());
    let mut k_rho = m_rho.matmul(&mdag);
    if ctx.loss_weight() != 0.0 {
        let l_rho = ctx.lindblad().matmul(rho.op());
        k_rho.add_scaled_re_assign(&l_rho.matmul(ctx.lindblad_adjoint()), ctx.loss_weight());
    }
    let k_rho = k_rho.hermitize();
    let tr = k_rho.trace().re;
    if !(tr > DEGENERATE_TRACE_THRESHOLD) {
        return Err(Error::DegenerateTrace {
            trace: tr,
            threshold: DEGENERATE_TRACE_THRESHOLD,
        });
    }
    Ok((
        DensityOperator::from_renormalized_unchecked(k_rho.scale_re(1.0 / tr)),
        dloglik,
    ))
}

/// One filter update at working parameters `w`: returns the state with
/// ρ̃ advanced and Δℓ accumulated, sensitivities left untouched.
pub fn filter_step<M: DiffusiveModel + ?Sized>(
    model: &M,
    w: &[f64],
    fs: &FilterState,
    dy: f64,
) -> Result<FilterState> {
    let ctx = KrausContext::new(model, w)?;
    let mut next = fs.clone();
    advance(&ctx, &mut next, dy, false)?;
    next.xi = fs.xi.clone();
    Ok(next)
}

/// One sensitivity update for parameter `j`, from the PRE-update ρ̃ and ξ_j.
pub fn sensitivity_step<M: DiffusiveModel + ?Sized>(
    model: &M,
    w: &[f64],
    fs: &FilterState,
    dy: f64,
    j: usize,
) -> Result<TangentOperator> {
    let ctx = KrausContext::new(model, w)?;
    check_param_index(&ctx, j)?;
    let mut next = fs.clone();
    advance(&ctx, &mut next, dy, false)?;
    Ok(next.xi.swap_remove(j))
}

/// Innovation dy − √η·Tr[(L+L†)ρ̃]·dt.
pub fn innovation<M: DiffusiveModel + ?Sized>(
    model: &M,
    w: &[f64],
    rho: &DensityOperator,
    dy: f64,
) -> Result<f64> {
    let ctx = KrausContext::new(model, w)?;
    if rho.dim() != ctx.dim() {
        return Err(Error::DimensionMismatch(rho.dim(), ctx.dim()));
    }
    Ok(dy - ctx.sqrt_eta() * ctx.expectation(rho.op()) * ctx.dt())
}

/// Normalized log-likelihood increment Δℓ = ln[Tr K_dy(ρ̃)/Z] in exact
/// Kraus form (see the module docs for the normalization Z).
pub fn loglik_increment<M: DiffusiveModel + ?Sized>(
    model: &M,
    w: &[f64],
    rho: &DensityOperator,
    dy: f64,
) -> Result<f64> {
    let ctx = KrausContext::new(model, w)?;
    if rho.dim() != ctx.dim() {
        return Err(Error::DimensionMismatch(rho.dim(), ctx.dim()));
    }
    let q = ctx.trace_coeffs(rho.op());
    let tk = q.eval(dy);
    let z_norm = q.gaussian_mean(ctx.dt());
    if !(tk > DEGENERATE_TRACE_THRESHOLD && z_norm > DEGENERATE_TRACE_THRESHOLD) {
        return Err(Error::DegenerateTrace {
            trace: tk.min(z_norm),
            threshold: DEGENERATE_TRACE_THRESHOLD,
        });
    }
    Ok((tk / z_norm).ln())
}

/// First-order (Itô-expansion) log-likelihood increment
/// √η·s·(dy − (√η/2)·s·dt) with s = Tr[(L+L†)ρ̃]. Provided for comparison;
/// the exact Kraus form above is what the estimator integrates.
pub fn loglik_increment_ito<M: DiffusiveModel + ?Sized>(
    model: &M,
    w: &[f64],
    rho: &DensityOperator,
    dy: f64,
) -> Result<f64> {
    let ctx = KrausContext::new(model, w)?;
    if rho.dim() != ctx.dim() {
        return Err(Error::DimensionMismatch(rho.dim(), ctx.dim()));
    }
    let s = ctx.expectation(rho.op());
    let se = ctx.sqrt_eta();
    Ok(se * s * (dy - 0.5 * se * s * ctx.dt()))
}

/// Gradient of the normalized log-likelihood increment with respect to
/// working parameter `j`, using the PRE-update ρ̃ and ξ_j.
pub fn grad_increment<M: DiffusiveModel + ?Sized>(
    model: &M,
    w: &[f64],
    fs: &FilterState,
    dy: f64,
    j: usize,
) -> Result<f64> {
    let ctx = KrausContext::new(model, w)?;
    check_param_index(&ctx, j)?;
    let mut next = fs.clone();
    let scalars = advance(&ctx, &mut next, dy, false)?;
    Ok(scalars.grad[j])
}

fn check_param_index(ctx: &KrausContext, j: usize) -> Result<()> {
    if j >= ctx.n_params() {
        return Err(Error::InvalidArgument(format!(
            "parameter index {j} out of range for {} parameters",
            ctx.n_params()
        )));
    }
    Ok(())
}
