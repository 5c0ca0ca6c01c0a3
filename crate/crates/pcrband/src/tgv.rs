//! Compressible Taylor-Green vortex on a triply periodic cube.
//!
//! Solves the conservative compressible Navier-Stokes equations
//! `d(phi)/dt + div F + div G = 0` for `phi = (rho, rho u, rho E)` with an
//! ideal-gas closure, Newtonian stress
//! `sigma = mu (grad u + grad u^T) + (beta - 2 mu / 3) (div u) I` and
//! Fourier heat flux `q = -kappa grad T`. Primitive variables live at the
//! grid collocation points; all fluxes are constructed at the staggered
//! locations of each direction with the sixth-order compact interpolation
//! and staggered derivative schemes, and the flux divergence returns to
//! the collocation points through the staggered derivative. Time
//! advancement is classical fourth-order Runge-Kutta with an acoustic CFL
//! time step. The cube may be pencil-decomposed along the first axis.

use crate::compactfd::{join_field, CompactOp, DistCompactOp, Field3, SchemeSpec, Staggering};
use crate::error::{Result, SolverError};
use crate::partition::PartitionLayout;
use crate::transport::{allreduce_max, allreduce_sum, Communicator, Mode, Tag, World};

use std::f64::consts::PI;

const TAG_REDUCE_DT: Tag = 0x40;
const TAG_REDUCE_DIAG: Tag = 0x41;

/// Physical and numerical constants of the flow case.
#[derive(Debug, Clone, Copy)]
pub struct FlowConfig {
    pub re: f64,
    pub pr: f64,
    pub gamma: f64,
    pub gas_constant: f64,
    pub rho0: f64,
    pub v_ref: f64,
    pub l_ref: f64,
    pub p_ref: f64,
    pub beta_bulk: f64,
    pub cfl: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            re: 1600.0,
            pr: 0.7,
            gamma: 5.0 / 3.0,
            gas_constant: 1.0,
            rho0: 1.0,
            v_ref: 1.0,
            l_ref: 1.0,
            p_ref: 100.0,
            beta_bulk: 0.0,
            cfl: 0.5,
        }
    }
}

impl FlowConfig {
    /// Shear viscosity from the Reynolds number.
    pub fn mu(&self) -> f64 {
        self.rho0 * self.v_ref * self.l_ref / self.re
    }

    /// Heat conductivity from the Prandtl number.
    pub fn kappa(&self) -> f64 {
        self.gamma * self.gas_constant * self.mu() / ((self.gamma - 1.0) * self.pr)
    }

    /// Mach number of the initial condition.
    pub fn mach(&self) -> f64 {
        self.v_ref / (self.gamma * self.p_ref / self.rho0).sqrt()
    }
}

/// Conservative flow variables on (a chunk of) the collocated grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub rho: Field3,
    pub mom: [Field3; 3],
    pub et: Field3,
}

impl FlowState {
    pub fn zeros(n: [usize; 3]) -> Self {
        Self {
            rho: Field3::zeros(n),
            mom: [Field3::zeros(n), Field3::zeros(n), Field3::zeros(n)],
            et: Field3::zeros(n),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.rho.dims()
    }

    pub fn add_scaled(&mut self, c: f64, other: &FlowState) {
        self.rho.add_scaled(c, &other.rho);
        for k in 0..3 {
            self.mom[k].add_scaled(c, &other.mom[k]);
        }
        self.et.add_scaled(c, &other.et);
    }

    pub fn max_abs_diff(&self, other: &FlowState) -> f64 {
        let mut d = self.rho.max_abs_diff(&other.rho);
        for k in 0..3 {
            d = d.max(self.mom[k].max_abs_diff(&other.mom[k]));
        }
        d.max(self.et.max_abs_diff(&other.et))
    }
}

/// Classical four-stage Runge-Kutta step over any state with an axpy.
pub fn rk4_step<S, F>(state: &S, dt: f64, mut rhs: F) -> Result<S>
where
    S: Clone,
    S: RkState,
    F: FnMut(&S) -> Result<S>,
{
    let k1 = rhs(state)?;
    let mut s2 = state.clone();
    s2.add_scaled(dt / 2.0, &k1);
    let k2 = rhs(&s2)?;
    let mut s3 = state.clone();
    s3.add_scaled(dt / 2.0, &k2);
    let k3 = rhs(&s3)?;
    let mut s4 = state.clone();
    s4.add_scaled(dt, &k3);
    let k4 = rhs(&s4)?;
    let mut out = state.clone();
    out.add_scaled(dt / 6.0, &k1);
    out.add_scaled(dt / 3.0, &k2);
    out.add_scaled(dt / 3.0, &k3);
    out.add_scaled(dt / 6.0, &k4);
    Ok(out)
}

/// Axpy contract required by the Runge-Kutta stepper.
pub trait RkState {
    fn add_scaled(&mut self, c: f64, other: &Self);
}

impl RkState for FlowState {
    fn add_scaled(&mut self, c: f64, other: &Self) {
        FlowState::add_scaled(self, c, other)
    }
}

impl RkState for f64 {
    fn add_scaled(&mut self, c: f64, other: &Self) {
        *self += c * other;
    }
}

/// Initial Taylor-Green state on global rows `[row0, row0 + dims[0])` of
/// an `n^3` cube.
pub fn init_taylor_green_chunk(
    cfg: &FlowConfig,
    n: usize,
    row0: usize,
    dims: [usize; 3],
) -> FlowState {
    let h = 2.0 * PI * cfg.l_ref / n as f64;
    let (v, l, rho0) = (cfg.v_ref, cfg.l_ref, cfg.rho0);
    let coord = |i: usize| i as f64 * h;
    let mut state = FlowState::zeros(dims);
    state.rho = Field3::from_fn(dims, |_, _, _| rho0);
    let u0 = Field3::from_fn(dims, |i, j, k| {
        let (x, y, z) = (coord(row0 + i), coord(j), coord(k));
        v * (x / l).sin() * (y / l).cos() * (z / l).cos()
    });
    let v0 = Field3::from_fn(dims, |i, j, k| {
        let (x, y, z) = (coord(row0 + i), coord(j), coord(k));
        -v * (x / l).cos() * (y / l).sin() * (z / l).cos()
    });
    let p0 = Field3::from_fn(dims, |i, j, k| {
        let (x, y, z) = (coord(row0 + i), coord(j), coord(k));
        cfg.p_ref
            + rho0 * v * v / 16.0
                * ((2.0 * x / l).cos() + (2.0 * y / l).cos())
                * ((2.0 * z / l).cos() + 2.0)
    });
    // rho E = P / (gamma - 1) + rho |u|^2 / 2 for an ideal gas.
    state.et = Field3::from_fn(dims, |i, j, k| {
        let uu = u0.at(i, j, k);
        let vv = v0.at(i, j, k);
        p0.at(i, j, k) / (cfg.gamma - 1.0) + 0.5 * rho0 * (uu * uu + vv * vv)
    });
    state.mom[0] = u0.map(|x| rho0 * x);
    state.mom[1] = v0.map(|x| rho0 * x);
    state.mom[2] = Field3::zeros(dims);
    state
}

/// Whole-cube initial state (single rank).
pub fn init_taylor_green(cfg: &FlowConfig, n: usize) -> FlowState {
    init_taylor_green_chunk(cfg, n, 0, [n, n, n])
}

struct Primitives {
    rho: Field3,
    u: [Field3; 3],
    press: Field3,
    temp: Field3,
}

fn primitives(cfg: &FlowConfig, state: &FlowState) -> Result<Primitives> {
    let dims = state.dims();
    let mut u = [
        Field3::zeros(dims),
        Field3::zeros(dims),
        Field3::zeros(dims),
    ];
    for k in 0..3 {
        u[k] = state.mom[k].zip_with(&state.rho, |m, r| m / r);
    }
    let mut press = Field3::zeros(dims);
    {
        let pd = press.data_mut();
        for (idx, pv) in pd.iter_mut().enumerate() {
            let r = state.rho.data()[idx];
            if r <= 0.0 {
                return Err(SolverError::NonPhysicalState {
                    what: "density",
                    value: r,
                });
            }
            let ke = 0.5
                * (state.mom[0].data()[idx] * state.mom[0].data()[idx]
                    + state.mom[1].data()[idx] * state.mom[1].data()[idx]
                    + state.mom[2].data()[idx] * state.mom[2].data()[idx])
                / r;
            let p = (cfg.gamma - 1.0) * (state.et.data()[idx] - ke);
            if p <= 0.0 {
                return Err(SolverError::NonPhysicalState {
                    what: "pressure",
                    value: p,
                });
            }
            *pv = p;
        }
    }
    let temp = press.zip_with(&state.rho, |p, r| p / (r * cfg.gas_constant));
    Ok(Primitives {
        rho: state.rho.clone(),
        u,
        press,
        temp,
    })
}

/// One rank's operators and geometry for the flow solve. The cube is
/// decomposed along axis 0; axes 1 and 2 stay rank-local.
pub struct TgvRank {
    cfg: FlowConfig,
    n: usize,
    h: f64,
    layout: PartitionLayout,
    rank: usize,
    dist_interp: DistCompactOp,
    dist_sd_ts: DistCompactOp,
    dist_sd_tc: DistCompactOp,
    dist_colloc: DistCompactOp,
    local_interp: CompactOp,
    local_sd_ts: CompactOp,
    local_sd_tc: CompactOp,
    local_colloc: CompactOp,
}

impl TgvRank {
    /// Collective setup: factor all compact operators once.
    pub fn build(comm: &Communicator, cfg: FlowConfig, n: usize) -> Result<Self> {
        if n < 16 {
            return Err(SolverError::DimensionMismatch {
                context: "tgv grid extent",
                expected: 16,
                got: n,
            });
        }
        let h = 2.0 * PI * cfg.l_ref / n as f64;
        let layout = PartitionLayout::balanced(n, comm.world_size(), 1, true)?;
        let interp = SchemeSpec::staggered_interp_6(Staggering::ToStaggered);
        let sd_ts = SchemeSpec::staggered_d1_6(h, Staggering::ToStaggered);
        let sd_tc = SchemeSpec::staggered_d1_6(h, Staggering::ToCollocated);
        let colloc = SchemeSpec::collocated_d1_6(h);
        Ok(Self {
            cfg,
            n,
            h,
            rank: comm.rank().0,
            dist_interp: DistCompactOp::build(comm, interp, n, 0, &layout)?,
            dist_sd_ts: DistCompactOp::build(comm, sd_ts, n, 0, &layout)?,
            dist_sd_tc: DistCompactOp::build(comm, sd_tc, n, 0, &layout)?,
            dist_colloc: DistCompactOp::build(comm, colloc, n, 0, &layout)?,
            local_interp: CompactOp::new(interp, n)?,
            local_sd_ts: CompactOp::new(sd_ts, n)?,
            local_sd_tc: CompactOp::new(sd_tc, n)?,
            local_colloc: CompactOp::new(colloc, n)?,
            layout,
        })
    }

    pub fn layout(&self) -> &PartitionLayout {
        &self.layout
    }

    pub fn grid_spacing(&self) -> f64 {
        self.h
    }

    /// This rank's chunk of the initial condition.
    pub fn init_chunk(&self) -> FlowState {
        let c = self.layout.chunk(self.rank);
        init_taylor_green_chunk(
            &self.cfg,
            self.n,
            self.layout.offset(self.rank),
            [c, self.n, self.n],
        )
    }

    fn interp(&self, comm: &Communicator, f: &Field3, axis: usize) -> Result<Field3> {
        if axis == 0 {
            self.dist_interp.apply(comm, f)
        } else {
            self.local_interp.apply(f, axis)
        }
    }

    fn sd_ts(&self, comm: &Communicator, f: &Field3, axis: usize) -> Result<Field3> {
        if axis == 0 {
            self.dist_sd_ts.apply(comm, f)
        } else {
            self.local_sd_ts.apply(f, axis)
        }
    }

    fn sd_tc(&self, comm: &Communicator, f: &Field3, axis: usize) -> Result<Field3> {
        if axis == 0 {
            self.dist_sd_tc.apply(comm, f)
        } else {
            self.local_sd_tc.apply(f, axis)
        }
    }

    fn colloc(&self, comm: &Communicator, f: &Field3, axis: usize) -> Result<Field3> {
        if axis == 0 {
            self.dist_colloc.apply(comm, f)
        } else {
            self.local_colloc.apply(f, axis)
        }
    }

    /// Spatial right-hand side `-(div F + div G)` of the conservative
    /// system. Collective over the world.
    pub fn flow_rhs(&self, comm: &Communicator, state: &FlowState) -> Result<FlowState> {
        let cfg = &self.cfg;
        let pr = primitives(cfg, state)?;
        let dims = state.dims();
        let mu = cfg.mu();
        let kappa = cfg.kappa();
        let lambda = cfg.beta_bulk - 2.0 * mu / 3.0;
        let mut ddt = FlowState::zeros(dims);

        for d in 0..3 {
            // Primitive values at the d-staggered flux locations.
            let rb = self.interp(comm, &pr.rho, d)?;
            let ub = [
                self.interp(comm, &pr.u[0], d)?,
                self.interp(comm, &pr.u[1], d)?,
                self.interp(comm, &pr.u[2], d)?,
            ];
            let pb = self.interp(comm, &pr.press, d)?;

            // Velocity and temperature gradients at the staggered points:
            // along d by the staggered derivative, along the other axes by
            // the collocated derivative of the staggered interpolants.
            let dud = [
                self.sd_ts(comm, &pr.u[0], d)?,
                self.sd_ts(comm, &pr.u[1], d)?,
                self.sd_ts(comm, &pr.u[2], d)?,
            ];
            let dtd = self.sd_ts(comm, &pr.temp, d)?;

            let mut div_u = dud[d].clone();
            for e in 0..3 {
                if e != d {
                    div_u.add_scaled(1.0, &self.colloc(comm, &ub[e], e)?);
                }
            }

            // sigma_dj at the staggered points.
            let mut sigma: [Field3; 3] = [
                Field3::zeros(dims),
                Field3::zeros(dims),
                Field3::zeros(dims),
            ];
            for j in 0..3 {
                if j == d {
                    let mut s = dud[d].map(|v| 2.0 * mu * v);
                    s.add_scaled(lambda, &div_u);
                    sigma[j] = s;
                } else {
                    let cross = self.colloc(comm, &ub[d], j)?;
                    sigma[j] = dud[j].zip_with(&cross, |a, b| mu * (a + b));
                }
            }

            let q = dtd.map(|v| -kappa * v);

            // Total energy density and fluxes at the staggered points.
            let e_tot = Field3::from_fn(dims, |i, j, k| {
                let uu = ub[0].at(i, j, k);
                let vv = ub[1].at(i, j, k);
                let ww = ub[2].at(i, j, k);
                let r = rb.at(i, j, k);
                pb.at(i, j, k) / (cfg.gamma - 1.0) + 0.5 * r * (uu * uu + vv * vv + ww * ww)
            });

            let flux_mass = rb.zip_with(&ub[d], |r, u| r * u);
            let mut flux_mom: [Field3; 3] = [
                Field3::zeros(dims),
                Field3::zeros(dims),
                Field3::zeros(dims),
            ];
            for j in 0..3 {
                flux_mom[j] = Field3::from_fn(dims, |i, jj, k| {
                    let mut f = rb.at(i, jj, k) * ub[d].at(i, jj, k) * ub[j].at(i, jj, k)
                        - sigma[j].at(i, jj, k);
                    if j == d {
                        f += pb.at(i, jj, k);
                    }
                    f
                });
            }
            let flux_e = Field3::from_fn(dims, |i, j, k| {
                let mut f =
                    ub[d].at(i, j, k) * (e_tot.at(i, j, k) + pb.at(i, j, k)) + q.at(i, j, k);
                for jj in 0..3 {
                    f -= ub[jj].at(i, j, k) * sigma[jj].at(i, j, k);
                }
                f
            });

            ddt.rho.add_scaled(-1.0, &self.sd_tc(comm, &flux_mass, d)?);
            for j in 0..3 {
                ddt.mom[j].add_scaled(-1.0, &self.sd_tc(comm, &flux_mom[j], d)?);
            }
            ddt.et.add_scaled(-1.0, &self.sd_tc(comm, &flux_e, d)?);
        }
        Ok(ddt)
    }

    /// Acoustic CFL time step from the current state (collective max).
    pub fn time_step(&self, comm: &Communicator, state: &FlowState) -> Result<f64> {
        let cfg = &self.cfg;
        let pr = primitives(cfg, state)?;
        let mut wave = 0.0f64;
        for idx in 0..pr.rho.data().len() {
            let speed = (pr.u[0].data()[idx].powi(2)
                + pr.u[1].data()[idx].powi(2)
                + pr.u[2].data()[idx].powi(2))
            .sqrt();
            let c = (cfg.gamma * pr.press.data()[idx] / pr.rho.data()[idx]).sqrt();
            wave = wave.max(speed + c);
        }
        let global = allreduce_max(comm, TAG_REDUCE_DT, &[wave]).map_err(SolverError::from)?;
        Ok(cfg.cfl * self.h / global[0])
    }

    /// Volume integrals of the conserved quantities plus kinetic energy
    /// and enstrophy (collective sum; equal-weight periodic quadrature).
    pub fn diagnostics(
        &self,
        comm: &Communicator,
        state: &FlowState,
        step: usize,
        time: f64,
    ) -> Result<Diagnostics> {
        let pr = primitives(&self.cfg, state)?;
        let cell = self.h * self.h * self.h;
        let mut sums = [0.0f64; 7];
        sums[0] = state.rho.sum();
        for k in 0..3 {
            sums[1 + k] = state.mom[k].sum();
        }
        sums[4] = state.et.sum();
        for idx in 0..state.rho.data().len() {
            let r = state.rho.data()[idx];
            let ke = 0.5
                * (state.mom[0].data()[idx].powi(2)
                    + state.mom[1].data()[idx].powi(2)
                    + state.mom[2].data()[idx].powi(2))
                / r;
            sums[5] += ke;
        }
        // Vorticity from collocated derivatives of the velocity.
        let dw_dy = self.colloc(comm, &pr.u[2], 1)?;
        let dv_dz = self.colloc(comm, &pr.u[1], 2)?;
        let du_dz = self.colloc(comm, &pr.u[0], 2)?;
        let dw_dx = self.colloc(comm, &pr.u[2], 0)?;
        let dv_dx = self.colloc(comm, &pr.u[1], 0)?;
        let du_dy = self.colloc(comm, &pr.u[0], 1)?;
        for idx in 0..dw_dy.data().len() {
            let ox = dw_dy.data()[idx] - dv_dz.data()[idx];
            let oy = du_dz.data()[idx] - dw_dx.data()[idx];
            let oz = dv_dx.data()[idx] - du_dy.data()[idx];
            sums[6] += 0.5 * (ox * ox + oy * oy + oz * oz);
        }
        let totals = allreduce_sum(comm, TAG_REDUCE_DIAG, &sums).map_err(SolverError::from)?;
        Ok(Diagnostics {
            step,
            time,
            mass: totals[0] * cell,
            momentum: [totals[1] * cell, totals[2] * cell, totals[3] * cell],
            total_energy: totals[4] * cell,
            kinetic_energy: totals[5] * cell,
            enstrophy: totals[6] * cell,
        })
    }
}

/// Volume-integrated flow diagnostics at one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostics {
    pub step: usize,
    pub time: f64,
    pub mass: f64,
    pub momentum: [f64; 3],
    pub total_energy: f64,
    pub kinetic_energy: f64,
    pub enstrophy: f64,
}

/// Result of a simulation run.
pub struct TgvRun {
    /// Diagnostics per step, starting with the initial state at step 0.
    pub diagnostics: Vec<Diagnostics>,
    pub dt: f64,
    /// Final conservative state gathered onto the caller.
    pub final_state: FlowState,
}

/// Run the Taylor-Green vortex for `steps` RK4 steps on `p` simulated
/// ranks. The constant time step comes from the initial state.
pub fn run_tgv(cfg: &FlowConfig, n: usize, steps: usize, p: usize, mode: Mode) -> Result<TgvRun> {
    let cfg = *cfg;
    let run = World::run(p, mode, move |comm| {
        let rank = TgvRank::build(comm, cfg, n)?;
        let mut state = rank.init_chunk();
        let dt = rank.time_step(comm, &state)?;
        let mut diags = vec![rank.diagnostics(comm, &state, 0, 0.0)?];
        for s in 1..=steps {
            state = rk4_step(&state, dt, |st| rank.flow_rhs(comm, st))?;
            diags.push(rank.diagnostics(comm, &state, s, s as f64 * dt)?);
        }
        Ok((state, dt, diags))
    })?;

    let layout = PartitionLayout::balanced(n, p, 1, true)?;
    let chunks_rho: Vec<Field3> = run.results.iter().map(|r| r.0.rho.clone()).collect();
    let mut final_state = FlowState::zeros([n, n, n]);
    final_state.rho = join_field(&chunks_rho, 0, &layout);
    for k in 0..3 {
        let chunks: Vec<Field3> = run.results.iter().map(|r| r.0.mom[k].clone()).collect();
        final_state.mom[k] = join_field(&chunks, 0, &layout);
    }
    let chunks_et: Vec<Field3> = run.results.iter().map(|r| r.0.et.clone()).collect();
    final_state.et = join_field(&chunks_et, 0, &layout);

    let (_, dt, diags) = &run.results[0];
    Ok(TgvRun {
        diagnostics: diags.clone(),
        dt: *dt,
        final_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_constants() {
        let cfg = FlowConfig::default();
        assert!((cfg.mu() - 1.0 / 1600.0).abs() < 1e-18);
        assert!((cfg.mach() - 0.0775).abs() < 1e-4, "Ma = {}", cfg.mach());
        // kappa = gamma R mu / ((gamma - 1) Pr)
        let expect = (5.0 / 3.0) * (1.0 / 1600.0) / ((2.0 / 3.0) * 0.7);
        assert!((cfg.kappa() - expect).abs() < 1e-15);
    }

    #[test]
    fn initial_condition_closed_form_values() {
        let cfg = FlowConfig::default();
        let s = init_taylor_green(&cfg, 16);
        // At the origin: u = v = w = 0 and P = 100 + (1/16) * 2 * 3.
        assert_eq!(s.mom[0].at(0, 0, 0), 0.0);
        assert_eq!(s.mom[1].at(0, 0, 0), 0.0);
        assert_eq!(s.mom[2].at(0, 0, 0), 0.0);
        let p000 = (cfg.gamma - 1.0) * s.et.at(0, 0, 0);
        assert!((p000 - 100.375).abs() < 1e-12, "P(0,0,0) = {p000}");
        // Odd symmetry: zero mean velocity.
        let mean = s.mom[0].sum() / s.mom[0].data().len() as f64;
        assert!(mean.abs() < 1e-14);
        let meanv = s.mom[1].sum() / s.mom[1].data().len() as f64;
        assert!(meanv.abs() < 1e-14);
    }

    #[test]
    fn initial_kinetic_energy_matches_integral() {
        // Closed form: KE = rho0 V^2 (2 pi l)^3 / 8 = pi^3 for unit
        // parameters; the discrete equal-weight sum is exact for these
        // low-wavenumber trigonometric products.
        let cfg = FlowConfig::default();
        let run = World::run(1, Mode::Lockstep, |comm| {
            let rank = TgvRank::build(comm, cfg, 16)?;
            let state = rank.init_chunk();
            rank.diagnostics(comm, &state, 0, 0.0)
        })
        .unwrap();
        let ke = run.results[0].kinetic_energy;
        let exact = PI.powi(3);
        assert!(
            ((ke - exact) / exact).abs() < 1e-12,
            "KE = {ke}, expected {exact}"
        );
        // Momentum components vanish by odd symmetry.
        for c in run.results[0].momentum {
            assert!(c.abs() < 1e-13);
        }
    }

    #[test]
    fn quiescent_state_is_an_equilibrium() {
        let cfg = FlowConfig::default();
        let n = 16;
        let run = World::run(1, Mode::Lockstep, |comm| {
            let rank = TgvRank::build(comm, cfg, n)?;
            let mut state = FlowState::zeros([n, n, n]);
            state.rho = Field3::from_fn([n, n, n], |_, _, _| 1.0);
            state.et = Field3::from_fn([n, n, n], |_, _, _| 100.0 / (cfg.gamma - 1.0));
            let ddt = rank.flow_rhs(comm, &state)?;
            let diag = rank.diagnostics(comm, &state, 0, 0.0)?;
            Ok((
                ddt.rho.max_abs(),
                ddt.mom[0]
                    .max_abs()
                    .max(ddt.mom[1].max_abs())
                    .max(ddt.mom[2].max_abs()),
                ddt.et.max_abs(),
                diag,
            ))
        })
        .unwrap();
        let (drho, dmom, det, diag) = &run.results[0];
        assert!(*drho <= 1e-12, "d rho = {drho}");
        assert!(*dmom <= 1e-12, "d mom = {dmom}");
        assert!(*det <= 1e-12, "d E = {det}");
        assert_eq!(diag.kinetic_energy, 0.0);
        assert_eq!(diag.enstrophy, 0.0);
    }

    #[test]
    fn constant_velocity_has_no_viscous_response() {
        // Uniform advection: all gradients vanish, so the right-hand side
        // reduces to pure translation-invariant transport (zero here since
        // every flux field is constant).
        let cfg = FlowConfig::default();
        let n = 16;
        let run = World::run(1, Mode::Lockstep, |comm| {
            let rank = TgvRank::build(comm, cfg, n)?;
            let mut state = FlowState::zeros([n, n, n]);
            let (u, v, w) = (0.3, -0.2, 0.1);
            state.rho = Field3::from_fn([n, n, n], |_, _, _| 1.0);
            state.mom[0] = Field3::from_fn([n, n, n], |_, _, _| u);
            state.mom[1] = Field3::from_fn([n, n, n], |_, _, _| v);
            state.mom[2] = Field3::from_fn([n, n, n], |_, _, _| w);
            state.et = Field3::from_fn([n, n, n], |_, _, _| {
                100.0 / (cfg.gamma - 1.0) + 0.5 * (u * u + v * v + w * w)
            });
            let ddt = rank.flow_rhs(comm, &state)?;
            Ok(ddt
                .rho
                .max_abs()
                .max(ddt.mom[0].max_abs())
                .max(ddt.mom[1].max_abs())
                .max(ddt.mom[2].max_abs())
                .max(ddt.et.max_abs()))
        })
        .unwrap();
        assert!(run.results[0] <= 1e-11, "rhs = {}", run.results[0]);
    }

    #[test]
    fn mass_rhs_sums_to_zero_on_tgv_state() {
        let cfg = FlowConfig::default();
        let n = 16;
        let run = World::run(1, Mode::Lockstep, |comm| {
            let rank = TgvRank::build(comm, cfg, n)?;
            let state = rank.init_chunk();
            let ddt = rank.flow_rhs(comm, &state)?;
            Ok(ddt.rho.sum())
        })
        .unwrap();
        assert!(run.results[0].abs() <= 1e-12, "sum = {}", run.results[0]);
    }

    #[test]
    fn rk4_scalar_linear_problem_is_fourth_order() {
        // One step of d phi / dt = lambda phi matches the degree-4 Taylor
        // polynomial of exp(lambda dt) exactly.
        let lambda = -0.7;
        let dt = 0.01;
        let phi = 2.0f64;
        let out = rk4_step(&phi, dt, |s: &f64| Ok(lambda * s)).unwrap();
        let z = lambda * dt;
        let taylor = 1.0 + z + z * z / 2.0 + z * z * z / 6.0 + z * z * z * z / 24.0;
        assert!((out - phi * taylor).abs() < 1e-15);
        // Against the exact exponential the defect is O(dt^5).
        assert!((out - phi * z.exp()).abs() < (phi * z.powi(5)).abs());
    }

    #[test]
    fn rhs_zero_leaves_state_bitwise_unchanged() {
        let cfg = FlowConfig::default();
        let s = init_taylor_green(&cfg, 16);
        let out = rk4_step(&s, 0.01, |st: &FlowState| Ok(FlowState::zeros(st.dims()))).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn nonphysical_state_is_reported() {
        let cfg = FlowConfig::default();
        let n = 16;
        let out = World::run(1, Mode::Lockstep, |comm| {
            let rank = TgvRank::build(comm, cfg, n)?;
            let mut state = rank.init_chunk();
            state.rho = Field3::from_fn(state.dims(), |_, _, _| -1.0);
            rank.flow_rhs(comm, &state)
        });
        match out {
            Err(SolverError::NonPhysicalState { .. }) => {}
            other => panic!("expected NonPhysicalState, got ok={:?}", other.is_ok()),
        }
    }

    #[test]
    fn short_run_conserves_and_agrees_across_ranks() {
        let cfg = FlowConfig::default();
        let n = 16;
        let steps = 10;
        let a = run_tgv(&cfg, n, steps, 1, Mode::Lockstep).unwrap();
        let d0 = &a.diagnostics[0];
        let dn = &a.diagnostics[steps];
        assert!(((dn.mass - d0.mass) / d0.mass).abs() < 1e-12);
        assert!(((dn.total_energy - d0.total_energy) / d0.total_energy).abs() < 1e-12);

        let b = run_tgv(&cfg, n, steps, 2, Mode::Lockstep).unwrap();
        assert_eq!(a.dt, b.dt, "max reduction is exact across p");
        let diff = a.final_state.max_abs_diff(&b.final_state);
        assert!(diff < 1e-11, "p=1 vs p=2 diff {diff}");
    }
}
