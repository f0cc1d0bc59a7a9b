//! Shared helpers for the integration suite: an independently coded
//! Gauss–Hermite quadrature, a straight-line 2×2 reference filter, and a few
//! statistics utilities. The reference implementations deliberately avoid
//! the library's operator types and trace shortcuts, so agreement with them
//! is a meaningful cross-check rather than a tautology.
#![allow(dead_code)]

use num_complex::Complex64;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

pub type C = Complex64;
/// Row-major 2×2 complex matrix.
pub type Mat2 = [[C; 2]; 2];

pub const Z0: C = C::new(0.0, 0.0);

pub fn c(re: f64, im: f64) -> C {
    C::new(re, im)
}

// ---------------------------------------------------------------------------
// Gauss–Hermite quadrature (physicists' convention)
// ---------------------------------------------------------------------------

/// Nodes and weights for ∫ e^{−x²} f(x) dx ≈ Σ wᵢ f(xᵢ), found by Newton
/// iteration on the orthonormal Hermite three-term recurrence. Roots are
/// returned in descending order.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2, "need at least two quadrature nodes");
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0_f64;
    for i in 0..(n + 1) / 2 {
        // Stroud–Secrest style initial guesses, refined by Newton.
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        let mut converged = false;
        for _ in 0..100 {
            // Evaluate the orthonormal Hermite polynomial and its derivative.
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() <= 1e-15 * (1.0 + z.abs()) {
                converged = true;
                break;
            }
        }
        assert!(converged, "Hermite root iteration stalled at node {i}");
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// ∫ f(y)·N(y; mean, var) dy by n-point Gauss–Hermite (y = mean + x·√(2·var)).
pub fn gaussian_expect(mut f: impl FnMut(f64) -> f64, mean: f64, var: f64, n: usize) -> f64 {
    assert!(var >= 0.0);
    let (x, w) = gauss_hermite(n);
    let s = (2.0 * var).sqrt();
    let total: f64 = x
        .iter()
        .zip(&w)
        .map(|(&xi, &wi)| wi * f(mean + s * xi))
        .sum();
    total / std::f64::consts::PI.sqrt()
}

// ---------------------------------------------------------------------------
// Raw 2×2 matrix arithmetic
// ---------------------------------------------------------------------------

pub fn mat_identity() -> Mat2 {
    [[c(1.0, 0.0), Z0], [Z0, c(1.0, 0.0)]]
}

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[Z0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

pub fn mat_adjoint(a: &Mat2) -> Mat2 {
    [
        [a[0][0].conj(), a[1][0].conj()],
        [a[0][1].conj(), a[1][1].conj()],
    ]
}

pub fn mat_add(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[Z0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][j] + b[i][j];
        }
    }
    out
}

pub fn mat_sub(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[Z0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][j] - b[i][j];
        }
    }
    out
}

pub fn mat_scale(s: C, a: &Mat2) -> Mat2 {
    let mut out = [[Z0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = s * a[i][j];
        }
    }
    out
}

pub fn mat_trace(a: &Mat2) -> C {
    a[0][0] + a[1][1]
}

pub fn mat_max_abs(a: &Mat2) -> f64 {
    let mut m = 0.0_f64;
    for row in a {
        for e in row {
            m = m.max(e.norm());
        }
    }
    m
}

pub fn mat_max_abs_diff(a: &Mat2, b: &Mat2) -> f64 {
    mat_max_abs(&mat_sub(a, b))
}

/// ρ = ½(I + x·σx + y·σy + z·σz); valid whenever x² + y² + z² ≤ 1.
pub fn rho_from_bloch(x: f64, y: f64, z: f64) -> Mat2 {
    [
        [c(0.5 * (1.0 + z), 0.0), c(0.5 * x, -0.5 * y)],
        [c(0.5 * x, 0.5 * y), c(0.5 * (1.0 - z), 0.0)],
    ]
}

// ---------------------------------------------------------------------------
// Straight-line reference filter for the two-level model
// ---------------------------------------------------------------------------

/// Reference two-level model, built directly from its dense matrices:
/// H = (Δ/2)σz + (Ω/2)σx, L = √κ·σz, measurement efficiency η.
pub struct RawTwoLevel {
    pub h: Mat2,
    pub l: Mat2,
    pub eta: f64,
    pub sqrt_eta: f64,
    pub dt: f64,
}

pub fn raw_two_level(omega: f64, delta: f64, eta: f64, kappa: f64, dt: f64) -> RawTwoLevel {
    let sk = kappa.sqrt();
    RawTwoLevel {
        h: [
            [c(0.5 * delta, 0.0), c(0.5 * omega, 0.0)],
            [c(0.5 * omega, 0.0), c(-0.5 * delta, 0.0)],
        ],
        l: [[c(sk, 0.0), Z0], [Z0, c(-sk, 0.0)]],
        eta,
        sqrt_eta: eta.sqrt(),
        dt,
    }
}

/// Natural (Ω, Δ, η, κ) from working (Ω, Δ, √η, √κ) coordinates.
pub fn natural_from_working(w: &[f64]) -> (f64, f64, f64, f64) {
    (w[0], w[1], w[2] * w[2], w[3] * w[3])
}

pub fn raw_from_working(w: &[f64], dt: f64) -> RawTwoLevel {
    let (omega, delta, eta, kappa) = natural_from_working(w);
    raw_two_level(omega, delta, eta, kappa, dt)
}

impl RawTwoLevel {
    /// M_dy = I − (iH + ½L†L)·dt + √η·dy·L.
    pub fn m(&self, dy: f64) -> Mat2 {
        let ldl = mat_mul(&mat_adjoint(&self.l), &self.l);
        let i_unit = c(0.0, 1.0);
        let mut out = mat_identity();
        for r in 0..2 {
            for q in 0..2 {
                out[r][q] = out[r][q] - (i_unit * self.h[r][q] + ldl[r][q] * 0.5) * self.dt
                    + self.l[r][q] * (self.sqrt_eta * dy);
            }
        }
        out
    }

    /// K_dy(X) = M X M† + (1−η)·dt·L X L†.
    pub fn kraus_apply(&self, x: &Mat2, dy: f64) -> Mat2 {
        let m = self.m(dy);
        let mut out = mat_mul(&mat_mul(&m, x), &mat_adjoint(&m));
        let lxl = mat_mul(&mat_mul(&self.l, x), &mat_adjoint(&self.l));
        let lw = (1.0 - self.eta) * self.dt;
        for r in 0..2 {
            for q in 0..2 {
                out[r][q] += lxl[r][q] * lw;
            }
        }
        out
    }

    pub fn trace_kraus(&self, x: &Mat2, dy: f64) -> f64 {
        mat_trace(&self.kraus_apply(x, dy)).re
    }

    /// Outcome-averaged map trace Z(X) = ∫ Tr K_y(X)·N(y; 0, dt) dy, by
    /// 64-point quadrature of the raw matrix trace.
    pub fn z_quadrature(&self, x: &Mat2) -> f64 {
        gaussian_expect(|y| self.trace_kraus(x, y), 0.0, self.dt, 64)
    }

    /// State part of one filter step: ρ̃′ = K_dy(ρ̃)/Tr K_dy(ρ̃).
    pub fn propagate_state(&self, rho: &Mat2, dy: f64) -> Mat2 {
        let k = self.kraus_apply(rho, dy);
        let tk = mat_trace(&k).re;
        assert!(tk > 0.0, "reference filter hit a non-positive map trace");
        mat_scale(c(1.0 / tk, 0.0), &k)
    }

    /// One full filter step; returns (ρ̃′, Δℓ) with Δℓ = ln[Tr K_dy(ρ̃)/Z(ρ̃)]
    /// and Z evaluated by quadrature.
    pub fn filter_step(&self, rho: &Mat2, dy: f64) -> (Mat2, f64) {
        let k = self.kraus_apply(rho, dy);
        let tk = mat_trace(&k).re;
        assert!(tk > 0.0, "reference filter hit a non-positive map trace");
        let z = self.z_quadrature(rho);
        (mat_scale(c(1.0 / tk, 0.0), &k), (tk / z).ln())
    }

    /// Total normalized log-likelihood of a record from ρ₀.
    pub fn loglik_total(&self, rho0: &Mat2, dys: &[f64]) -> f64 {
        let mut rho = *rho0;
        let mut ll = 0.0;
        for &dy in dys {
            let (next, dl) = self.filter_step(&rho, dy);
            rho = next;
            ll += dl;
        }
        ll
    }

    /// Final filter state after consuming a record (no likelihood, no
    /// quadrature — used by finite-difference replays).
    pub fn replay_state(&self, rho0: &Mat2, dys: &[f64]) -> Mat2 {
        let mut rho = *rho0;
        for &dy in dys {
            rho = self.propagate_state(&rho, dy);
        }
        rho
    }
}

// ---------------------------------------------------------------------------
// Bridges between the raw oracle and the library types
// ---------------------------------------------------------------------------

use qmle::algebra::{DensityOperator, Operator};
use qmle::model::{two_level_example, TwoLevelModel};
use qmle::sim::{simulate, TruthSchedule};

pub fn op_from_mat(m: &Mat2) -> Operator {
    Operator::from_fn(2, |i, j| m[i][j])
}

pub fn mat_from_op(op: &Operator) -> Mat2 {
    assert_eq!(op.dim(), 2);
    [
        [op.get(0, 0), op.get(0, 1)],
        [op.get(1, 0), op.get(1, 1)],
    ]
}

pub fn density_from_bloch(b: [f64; 3]) -> DensityOperator {
    DensityOperator::new(op_from_mat(&rho_from_bloch(b[0], b[1], b[2]))).unwrap()
}

/// Fig-scale truth used throughout the suite: (Ω, Δ, η, κ) = (1, 0.2, 0.7, 0.1).
pub const TRUTH: [f64; 4] = [1.0, 0.2, 0.7, 0.1];
/// A deliberately offset starting estimate for the same parameters.
pub const OFFSET_START: [f64; 4] = [1.3, 0.3, 0.6, 0.15];

/// Model + working coordinates at natural parameters.
pub fn model_at(theta: [f64; 4], dt: f64) -> (TwoLevelModel, Vec<f64>) {
    two_level_example(theta[0], theta[1], theta[2], theta[3], dt).unwrap()
}

/// Seeded measurement record of `steps` samples generated at a static truth,
/// starting from ρ₀ = |0⟩⟨0|.
pub fn record_at(theta: [f64; 4], dt: f64, steps: usize, seed: u64) -> Vec<f64> {
    let (model, _) = model_at(theta, dt);
    let schedule = TruthSchedule::constant(theta.to_vec());
    let rho0 = qmle::algebra::ket_projector(2, 0).unwrap();
    simulate(&model, &schedule, steps, seed, &rho0, steps)
        .unwrap()
        .dy
}

/// Unbounded dy stream that co-simulates the truth one sample at a time, so
/// long runs never materialize the record. With `refresh` = 1 it reproduces
/// the batch simulator's output bit for bit; larger values rebuild a
/// time-varying truth's one-step map only every `refresh` steps (legitimate
/// when the truth drifts negligibly in between).
pub struct SimStream<'a> {
    model: &'a TwoLevelModel,
    schedule: &'a TruthSchedule,
    noise: qmle::sim::GaussianStream,
    rho: DensityOperator,
    ctx: qmle::model::KrausContext,
    theta: Vec<f64>,
    sqrt_dt: f64,
    k: usize,
    refresh: usize,
    is_static: bool,
}

impl<'a> SimStream<'a> {
    pub fn new(
        model: &'a TwoLevelModel,
        schedule: &'a TruthSchedule,
        seed: u64,
        rho0: DensityOperator,
        refresh: usize,
    ) -> Self {
        use qmle::model::DiffusiveModel;
        assert!(refresh >= 1);
        let theta = schedule.theta_at(0.0);
        let ctx =
            qmle::model::KrausContext::new(model, &model.params().to_working(&theta).unwrap())
                .unwrap();
        SimStream {
            model,
            schedule,
            noise: qmle::sim::GaussianStream::new(seed),
            rho: rho0,
            ctx,
            theta,
            sqrt_dt: model.dt().sqrt(),
            k: 0,
            refresh,
            is_static: schedule.is_static(),
        }
    }
}

impl Iterator for SimStream<'_> {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        use qmle::model::DiffusiveModel;
        if !self.is_static && self.k > 0 && self.k % self.refresh == 0 {
            let t = self.k as f64 * self.model.dt();
            self.schedule.write_theta_at(t, &mut self.theta);
            self.ctx = qmle::model::KrausContext::new(
                self.model,
                &self.model.params().to_working(&self.theta).unwrap(),
            )
            .unwrap();
        }
        let dw = self.sqrt_dt * self.noise.standard_normal();
        let (next, dy) = qmle::sim::step_true(&self.ctx, &self.rho, dw).unwrap();
        self.rho = next;
        self.k += 1;
        Some(dy)
    }
}

// ---------------------------------------------------------------------------
// Deterministic draws and statistics
// ---------------------------------------------------------------------------

/// Deterministic uniform stream for generating test points (independent of
/// the library's noise generator).
pub struct UniformStream {
    rng: ChaCha12Rng,
}

impl UniformStream {
    pub fn new(seed: u64) -> Self {
        UniformStream {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn in_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Random Bloch vector of norm ≤ radius.
    pub fn bloch(&mut self, radius: f64) -> [f64; 3] {
        loop {
            let x = self.in_range(-1.0, 1.0);
            let y = self.in_range(-1.0, 1.0);
            let z = self.in_range(-1.0, 1.0);
            if x * x + y * y + z * z <= 1.0 {
                return [radius * x, radius * y, radius * z];
            }
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
pub fn std_dev(xs: &[f64]) -> f64 {
    assert!(xs.len() >= 2);
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}
