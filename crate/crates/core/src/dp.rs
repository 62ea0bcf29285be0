//! Backward-induction construction of the per-stage reward-to-go tables.
//!
//! The sufficient statistic after measuring k slots is (p_hat, p_tail): the
//! joint probability of the leading already-measured hypothesis and the common
//! joint probability shared by every unmeasured slot. J*_k(p_hat, p_tail) is
//! the best achievable probability of a correct final decision from stage k
//! onward; it is built on a rectangular grid from the analytic last stage
//! backwards, maximizing over the slot control at every cell.

use crate::baselines::{binary_optimal_angle, binary_pc_optimal};
use crate::error::{Error, Result};
use crate::grid::{Axis, GridSpec, Interpolation};
use crate::model::{
    normalize_phi, projector_kernel, Association, LocalMeasurement, ModulationConfig,
    TransitionKernel,
};
use crate::numeric::{golden_section_max, linspace};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

/// Number of control samples in the coarse per-cell scan (projector angle).
pub const PHI_SCAN_POINTS: usize = 720;
/// Bracket width the per-cell golden refinement shrinks the control to.
pub const CONTROL_REFINE_TOL: f64 = 1e-8;

/// Identity of the current leading hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HatLabel {
    /// Resolved to a concrete slot index (1-based).
    Symbol(u32),
    /// Placeholder used during backward planning; resolved by the retrace.
    Previous,
    /// No slot measured yet.
    Unset,
}

/// Sufficient statistic of the measurement history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SystemState {
    /// Joint probability of the leading already-measured hypothesis.
    pub p_hat: f64,
    /// Joint probability shared by each not-yet-measured slot hypothesis.
    pub p_tail: f64,
    pub hat_label: HatLabel,
}

impl SystemState {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_hat >= 0.0 && self.p_tail >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "negative joint probability ({}, {})",
                self.p_hat, self.p_tail
            )));
        }
        if self.p_hat + self.p_tail > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "joint probabilities ({}, {}) exceed total mass",
                self.p_hat, self.p_tail
            )));
        }
        Ok(())
    }
}

/// Which pair of per-outcome children attained a cell's maximum:
/// the first letter position is outcome 0, the second outcome 1;
/// "keep" retains the incumbent leader, "switch" promotes the new slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchCase {
    /// (keep, keep)
    A,
    /// (keep, switch)
    B,
    /// (switch, keep)
    C,
    /// (switch, switch)
    D,
}

impl BranchCase {
    pub fn from_keeps(keep0: bool, keep1: bool) -> Self {
        match (keep0, keep1) {
            (true, true) => BranchCase::A,
            (true, false) => BranchCase::B,
            (false, true) => BranchCase::C,
            (false, false) => BranchCase::D,
        }
    }

    /// True when outcome `z` keeps the incumbent leader.
    pub fn keeps(self, z: u8) -> bool {
        matches!(
            (self, z),
            (BranchCase::A, _) | (BranchCase::B, 0) | (BranchCase::C, 1)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchCase::A => "A",
            BranchCase::B => "B",
            BranchCase::C => "C",
            BranchCase::D => "D",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(BranchCase::A),
            "B" => Ok(BranchCase::B),
            "C" => Ok(BranchCase::C),
            "D" => Ok(BranchCase::D),
            other => Err(Error::InvalidArgument(format!(
                "unknown branch case {other:?}"
            ))),
        }
    }
}

/// Local-measurement family the optimizer searches over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    Projective,
    Kennedy,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Projective => "projective",
            Family::Kennedy => "kennedy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "projective" => Ok(Family::Projective),
            "kennedy" => Ok(Family::Kennedy),
            other => Err(Error::InvalidArgument(format!(
                "unknown measurement family {other:?} (expected projective or kennedy)"
            ))),
        }
    }
}

/// Per-cell optimal controls, stored per family.
#[derive(Clone, Debug)]
pub enum ControlTable {
    /// Projector angle per cell.
    Projective(Vec<f64>),
    /// Displacement and association per cell.
    Kennedy {
        beta: Vec<f64>,
        association: Vec<Association>,
    },
}

impl ControlTable {
    fn len(&self) -> usize {
        match self {
            ControlTable::Projective(v) => v.len(),
            ControlTable::Kennedy { beta, .. } => beta.len(),
        }
    }
}

/// One stage's reward-to-go values, optimal controls, and branch tags on a
/// rectangular grid. Values are stored row-major with p_hat contiguous:
/// index = iv·n_u + iu.
#[derive(Clone, Debug)]
pub struct RewardTable {
    pub stage: u32,
    pub u_axis: Axis,
    pub v_axis: Axis,
    pub interpolation: Interpolation,
    pub values: Vec<f64>,
    pub controls: ControlTable,
    pub branches: Vec<BranchCase>,
}

impl RewardTable {
    pub fn n_u(&self) -> usize {
        self.u_axis.n
    }

    pub fn n_v(&self) -> usize {
        self.v_axis.n
    }

    #[inline]
    fn idx(&self, iu: usize, iv: usize) -> usize {
        iv * self.u_axis.n + iu
    }

    pub fn value(&self, iu: usize, iv: usize) -> f64 {
        self.values[self.idx(iu, iv)]
    }

    pub fn branch(&self, iu: usize, iv: usize) -> BranchCase {
        self.branches[self.idx(iu, iv)]
    }

    pub fn control(&self, iu: usize, iv: usize) -> LocalMeasurement {
        match &self.controls {
            ControlTable::Projective(phi) => LocalMeasurement::Projective {
                phi: phi[self.idx(iu, iv)],
            },
            ControlTable::Kennedy { beta, association } => LocalMeasurement::GeneralizedKennedy {
                beta: beta[self.idx(iu, iv)],
                association: association[self.idx(iu, iv)],
            },
        }
    }

    /// Interpolated value at an arbitrary state; out-of-domain queries are
    /// clamped to the boundary and flagged.
    pub fn value_probe(&self, u: f64, v: f64) -> (f64, bool) {
        let (iu, tu, cu) = self.u_axis.locate(u);
        let (iv, tv, cv) = self.v_axis.locate(v);
        let (tu, tv) = match self.interpolation {
            Interpolation::Bilinear => (tu, tv),
            Interpolation::Nearest => (round_frac(tu), round_frac(tv)),
        };
        let n_u = self.u_axis.n;
        let base = iv * n_u + iu;
        let r0 = lerp(self.values[base], self.values[base + 1], tu);
        let r1 = lerp(self.values[base + n_u], self.values[base + n_u + 1], tu);
        (lerp(r0, r1, tv), cu || cv)
    }

    pub fn value_at(&self, u: f64, v: f64) -> f64 {
        self.value_probe(u, v).0
    }

    /// Interpolated control at an arbitrary state. Projector angles blend on
    /// the doubled-angle circle so the π-periodic wrap at ±π/2 cannot tear the
    /// interpolation; Kennedy displacements blend linearly and the association
    /// comes from the dominant corner.
    pub fn control_probe(&self, u: f64, v: f64) -> (LocalMeasurement, bool) {
        let (iu, tu, cu) = self.u_axis.locate(u);
        let (iv, tv, cv) = self.v_axis.locate(v);
        let (tu, tv) = match self.interpolation {
            Interpolation::Bilinear => (tu, tv),
            Interpolation::Nearest => (round_frac(tu), round_frac(tv)),
        };
        let n_u = self.u_axis.n;
        let base = iv * n_u + iu;
        let corners = [base, base + 1, base + n_u, base + n_u + 1];
        let weights = [
            (1.0 - tu) * (1.0 - tv),
            tu * (1.0 - tv),
            (1.0 - tu) * tv,
            tu * tv,
        ];
        let clamped = cu || cv;
        let m = match &self.controls {
            ControlTable::Projective(phi) => {
                let (mut x, mut y) = (0.0, 0.0);
                for (&c, &w) in corners.iter().zip(&weights) {
                    let (s, co) = (2.0 * phi[c]).sin_cos();
                    x += w * co;
                    y += w * s;
                }
                // Fully antipodal corners cancel; fall back to the heaviest one.
                let angle = if x * x + y * y < 1e-24 {
                    phi[heaviest(&corners, &weights)]
                } else {
                    0.5 * y.atan2(x)
                };
                LocalMeasurement::Projective {
                    phi: normalize_phi(angle),
                }
            }
            ControlTable::Kennedy { beta, association } => {
                let mut b = 0.0;
                for (&c, &w) in corners.iter().zip(&weights) {
                    b += w * beta[c];
                }
                LocalMeasurement::GeneralizedKennedy {
                    beta: b,
                    association: association[heaviest(&corners, &weights)],
                }
            }
        };
        (m, clamped)
    }

    fn validate_shape(&self) -> Result<()> {
        let n = self.u_axis.n * self.v_axis.n;
        if self.values.len() != n || self.controls.len() != n || self.branches.len() != n {
            return Err(Error::InvalidGrid(format!(
                "table stage {} has inconsistent cell counts",
                self.stage
            )));
        }
        Ok(())
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

#[inline]
fn round_frac(t: f64) -> f64 {
    if t >= 0.5 {
        1.0
    } else {
        0.0
    }
}

fn heaviest(corners: &[usize; 4], weights: &[f64; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if weights[i] > weights[best] {
            best = i;
        }
    }
    corners[best]
}

/// Summary of the last-stage cross-check between the kernel-built reward and
/// the equivalent closed-form expression (Kennedy family only).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GkCrossCheck {
    pub cells: u64,
    /// Cells where the two expressions disagreed beyond 1e-9.
    pub flagged: u64,
    pub max_gap: f64,
}

/// Output of a full backward pass.
#[derive(Clone, Debug)]
pub struct DpResult {
    pub cfg: ModulationConfig,
    pub family: Family,
    pub grid: GridSpec,
    /// Optimized probability of a correct decision from the equiprobable start.
    pub pc: f64,
    /// Control of the first slot's measurement.
    pub first_control: LocalMeasurement,
    /// Stage tables in the order they are built: stage M−1 down to stage 1.
    pub tables: Vec<RewardTable>,
    /// Child-state lookups that fell outside the grid during construction
    /// (zero for any grid covering [0, 1/M]²).
    pub clamped: u64,
    pub gk_crosscheck: Option<GkCrossCheck>,
}

impl DpResult {
    /// Table for stage k (1 ≤ k ≤ M−1).
    pub fn stage_table(&self, k: u32) -> Result<&RewardTable> {
        let m = self.cfg.m();
        if k < 1 || k > m - 1 {
            return Err(Error::InvalidArgument(format!(
                "stage {k} outside 1..={}",
                m - 1
            )));
        }
        Ok(&self.tables[(m - 1 - k) as usize])
    }

    /// Crude bound on the interpolation bias of `pc`, used when comparing
    /// against exact references.
    pub fn grid_tolerance(&self) -> f64 {
        self.cfg.m() as f64 * self.grid.u_step().max(self.grid.v_step())
    }
}

/// Tail-probability axis for a stage: from the equiprobable start, after k
/// slots the tail mass never exceeds 1/(M−k+1) for any cardinality that can
/// query this table (the smallest such cardinality is M−k+1, whose prior is
/// exactly that), so rows above that bound are unreachable and skipped.
pub(crate) fn stage_v_axis(m: u32, stage: u32, grid: &GridSpec) -> Axis {
    let bound = (1.0 / (m - stage + 1) as f64).min(grid.v_max);
    let h = grid.v_step();
    let n = (((bound / h) - 1e-9).ceil() as usize + 1).min(grid.n_v).max(2);
    Axis::new(n, h)
}

pub(crate) fn u_axis(grid: &GridSpec) -> Axis {
    Axis::new(grid.n_u, grid.u_step())
}

/// Analytic last-stage table: one slot remains, so the cell value is the
/// optimal two-hypothesis probability ½[u+v+√((u+v)²−4uvγ)] and the control
/// is the angle achieving it. Outcome 0 keeps the leader, outcome 1 decides
/// the final slot, hence branch B everywhere.
pub fn last_stage_table(cfg: &ModulationConfig, grid: &GridSpec) -> RewardTable {
    let m = cfg.m();
    let ua = u_axis(grid);
    let va = stage_v_axis(m, m - 1, grid);
    let theta = cfg.theta();
    let n = ua.n * va.n;
    let mut values = vec![0.0; n];
    let mut phis = vec![0.0; n];
    values
        .par_chunks_mut(ua.n)
        .zip(phis.par_chunks_mut(ua.n))
        .enumerate()
        .for_each(|(iv, (vrow, prow))| {
            let v = va.node(iv);
            for iu in 0..ua.n {
                let u = ua.node(iu);
                vrow[iu] = binary_pc_optimal(u, v, cfg);
                prow[iu] = binary_optimal_angle(u, v, theta);
            }
        });
    RewardTable {
        stage: m - 1,
        u_axis: ua,
        v_axis: va,
        interpolation: grid.interpolation,
        values,
        controls: ControlTable::Projective(phis),
        branches: vec![BranchCase::B; n],
    }
}

/// The four child evaluations of one cell under one kernel: per outcome z the
/// leader either survives (u·p̌_{z|0}) or is replaced by the just-measured
/// slot (v·p̌_{z|1}); the tail always scales by p̌_{z|0}.
pub(crate) struct BranchEval {
    pub e0_keep: f64,
    pub e0_switch: f64,
    pub e1_keep: f64,
    pub e1_switch: f64,
    pub clamps: u32,
}

impl BranchEval {
    #[inline]
    pub fn value(&self) -> f64 {
        self.e0_keep.max(self.e0_switch) + self.e1_keep.max(self.e1_switch)
    }

    /// Ties prefer keeping the incumbent (deterministic A ≻ B ≻ C ≻ D).
    #[inline]
    pub fn branch(&self) -> BranchCase {
        BranchCase::from_keeps(self.e0_keep >= self.e0_switch, self.e1_keep >= self.e1_switch)
    }
}

/// Fixed-row probe into a table: the tail coordinate is located once, then
/// leader coordinates stream along the row pair.
pub(crate) struct RowProbe<'a> {
    r0: &'a [f64],
    r1: &'a [f64],
    tv: f64,
    u_axis: Axis,
    nearest: bool,
    pub clamped: bool,
}

impl<'a> RowProbe<'a> {
    pub(crate) fn new(table: &'a RewardTable, v: f64) -> Self {
        let (iv, tv, cv) = table.v_axis.locate(v);
        let tv = if table.interpolation == Interpolation::Nearest {
            round_frac(tv)
        } else {
            tv
        };
        let n_u = table.u_axis.n;
        let base = iv * n_u;
        RowProbe {
            r0: &table.values[base..base + n_u],
            r1: &table.values[base + n_u..base + 2 * n_u],
            tv,
            u_axis: table.u_axis,
            nearest: table.interpolation == Interpolation::Nearest,
            clamped: cv,
        }
    }

    #[inline]
    pub(crate) fn at(&mut self, u: f64) -> f64 {
        let (iu, tu, cu) = self.u_axis.locate(u);
        let tu = if self.nearest { round_frac(tu) } else { tu };
        self.clamped |= cu;
        let a = lerp(self.r0[iu], self.r0[iu + 1], tu);
        let b = lerp(self.r1[iu], self.r1[iu + 1], tu);
        lerp(a, b, self.tv)
    }
}

/// Evaluates the four children of cell (u, v) under `kernel` against the
/// stage-(k+1) table.
pub(crate) fn eval_branches(
    next: &RewardTable,
    kernel: &TransitionKernel,
    u: f64,
    v: f64,
) -> BranchEval {
    let p = kernel.entries();
    let mut probe0 = RowProbe::new(next, p[0][0] * v);
    let mut probe1 = RowProbe::new(next, p[1][0] * v);
    let e0_keep = probe0.at(p[0][0] * u);
    let e0_switch = probe0.at(p[0][1] * v);
    let e1_keep = probe1.at(p[1][0] * u);
    let e1_switch = probe1.at(p[1][1] * v);
    let clamps = (probe0.clamped as u32) + (probe1.clamped as u32);
    BranchEval {
        e0_keep,
        e0_switch,
        e1_keep,
        e1_switch,
        clamps,
    }
}

/// Uniform projector-angle scan grid over one period.
pub(crate) fn phi_scan() -> Vec<f64> {
    linspace(
        -std::f64::consts::FRAC_PI_2,
        std::f64::consts::FRAC_PI_2,
        PHI_SCAN_POINTS,
    )
}

struct RowOut {
    values: Vec<f64>,
    phis: Vec<f64>,
    branches: Vec<BranchCase>,
    clamps: u64,
}

/// One backward-induction step for the projective family: builds the stage-k
/// table (k = next.stage − 1 ≥ 1) by maximizing, per cell, the sum of the two
/// per-outcome best children over the projector angle.
pub fn backward_step(
    next: &RewardTable,
    cfg: &ModulationConfig,
    grid: &GridSpec,
) -> Result<(RewardTable, u64)> {
    if next.stage < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot step below stage 1 (next stage = {})",
            next.stage
        )));
    }
    let stage = next.stage - 1;
    let theta = cfg.theta();
    let ua = u_axis(grid);
    let va = stage_v_axis(cfg.m(), stage, grid);
    let phis = phi_scan();
    let kernels: Vec<TransitionKernel> =
        phis.iter().map(|&p| projector_kernel(theta, p)).collect();
    let scan_step = phis[1] - phis[0];

    let rows: Vec<RowOut> = (0..va.n)
        .into_par_iter()
        .map(|iv| {
            let v = va.node(iv);
            let mut best = vec![f64::NEG_INFINITY; ua.n];
            let mut best_idx = vec![0u16; ua.n];
            let mut clamps = 0u64;
            for (pi, kernel) in kernels.iter().enumerate() {
                let p = kernel.entries();
                let mut probe0 = RowProbe::new(next, p[0][0] * v);
                let mut probe1 = RowProbe::new(next, p[1][0] * v);
                let e0_switch = probe0.at(p[0][1] * v);
                let e1_switch = probe1.at(p[1][1] * v);
                for iu in 0..ua.n {
                    let u = ua.node(iu);
                    let e0 = probe0.at(p[0][0] * u).max(e0_switch);
                    let e1 = probe1.at(p[1][0] * u).max(e1_switch);
                    let val = e0 + e1;
                    if val > best[iu] {
                        best[iu] = val;
                        best_idx[iu] = pi as u16;
                    }
                }
                clamps += (probe0.clamped as u64) + (probe1.clamped as u64);
            }
            let mut values = vec![0.0; ua.n];
            let mut phis_out = vec![0.0; ua.n];
            let mut branches = vec![BranchCase::A; ua.n];
            for iu in 0..ua.n {
                let u = ua.node(iu);
                let center = phis[best_idx[iu] as usize];
                let (phi_ref, val_ref) = golden_section_max(
                    |phi| eval_branches(next, &projector_kernel(theta, phi), u, v).value(),
                    center - scan_step,
                    center + scan_step,
                    CONTROL_REFINE_TOL,
                );
                let (phi_star, _) = if val_ref >= best[iu] {
                    (phi_ref, val_ref)
                } else {
                    (center, best[iu])
                };
                let ev = eval_branches(next, &projector_kernel(theta, phi_star), u, v);
                clamps += ev.clamps as u64;
                values[iu] = ev.value().max(best[iu]);
                phis_out[iu] = normalize_phi(phi_star);
                branches[iu] = ev.branch();
            }
            RowOut {
                values,
                phis: phis_out,
                branches,
                clamps,
            }
        })
        .collect();

    let mut values = Vec::with_capacity(ua.n * va.n);
    let mut phis_out = Vec::with_capacity(ua.n * va.n);
    let mut branches = Vec::with_capacity(ua.n * va.n);
    let mut clamps = 0u64;
    for row in rows {
        values.extend(row.values);
        phis_out.extend(row.phis);
        branches.extend(row.branches);
        clamps += row.clamps;
    }
    Ok((
        RewardTable {
            stage,
            u_axis: ua,
            v_axis: va,
            interpolation: grid.interpolation,
            values,
            controls: ControlTable::Projective(phis_out),
            branches,
        },
        clamps,
    ))
}

/// First-slot optimization against a stage table: from the equiprobable start
/// over `m` symbols, outcome z leaves the measured slot as leader with mass
/// p̌_{z|1}/m and every other slot at p̌_{z|0}/m.
pub(crate) fn first_step_value(table: &RewardTable, kernel: &TransitionKernel, m: f64) -> (f64, bool) {
    let p = kernel.entries();
    let (a, ca) = table.value_probe(p[0][1] / m, p[0][0] / m);
    let (b, cb) = table.value_probe(p[1][1] / m, p[1][0] / m);
    (a + b, ca || cb)
}

fn first_step_projective(table: &RewardTable, cfg_m: u32, theta: f64) -> (f64, f64, u64) {
    let m = cfg_m as f64;
    let phis = phi_scan();
    let mut clamps = 0u64;
    let mut best = f64::NEG_INFINITY;
    let mut best_phi = phis[0];
    for &phi in &phis {
        let (val, cl) = first_step_value(table, &projector_kernel(theta, phi), m);
        clamps += cl as u64;
        if val > best {
            best = val;
            best_phi = phi;
        }
    }
    let step = phis[1] - phis[0];
    let (phi_ref, val_ref) = golden_section_max(
        |phi| first_step_value(table, &projector_kernel(theta, phi), m).0,
        best_phi - step,
        best_phi + step,
        CONTROL_REFINE_TOL,
    );
    if val_ref >= best {
        (val_ref, normalize_phi(phi_ref), clamps)
    } else {
        (best, normalize_phi(best_phi), clamps)
    }
}

fn check_grid_covers(cfg: &ModulationConfig, grid: &GridSpec) -> Result<()> {
    let cap = 1.0 / cfg.m() as f64;
    if grid.u_max < cap - 1e-12 || grid.v_max < cap - 1e-12 {
        return Err(Error::InvalidGrid(format!(
            "grid extent ({}, {}) does not cover the prior cap 1/{}",
            grid.u_max,
            grid.v_max,
            cfg.m()
        )));
    }
    Ok(())
}

/// Full backward pass for the projective family: analytic stage M−1, then
/// backward steps down to stage 1, then the closed first-slot optimization.
pub fn run_backward(cfg: &ModulationConfig, grid: &GridSpec) -> Result<DpResult> {
    check_grid_covers(cfg, grid)?;
    let m = cfg.m();
    let mut tables = vec![last_stage_table(cfg, grid)];
    let mut clamped = 0u64;
    for _ in (1..=m.saturating_sub(2)).rev() {
        let (table, clamps) = backward_step(tables.last().unwrap(), cfg, grid)?;
        clamped += clamps;
        tables.push(table);
    }
    let (pc, phi0, clamps) = first_step_projective(tables.last().unwrap(), m, cfg.theta());
    clamped += clamps;
    Ok(DpResult {
        cfg: *cfg,
        family: Family::Projective,
        grid: *grid,
        pc,
        first_control: LocalMeasurement::Projective { phi: phi0 },
        tables,
        clamped,
        gk_crosscheck: None,
    })
}

/// First-slot result computed by querying an existing table set: the tables of
/// an M̃-slot run serve any smaller cardinality m_i, whose stage-1 planning
/// equals the donor's stage M̃−m_i+1 (only the number of remaining slots
/// matters), provided the donor grid covers [0, 1/m_i].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FirstMeasurement {
    pub pc: f64,
    pub control: LocalMeasurement,
}

pub fn reuse_tables(donor: &DpResult, m_i: u32) -> Result<FirstMeasurement> {
    let m_donor = donor.cfg.m();
    if m_i < 2 || m_i > m_donor {
        return Err(Error::InvalidArgument(format!(
            "reuse cardinality {m_i} outside 2..={m_donor}"
        )));
    }
    let stage = m_donor - m_i + 1;
    let table = donor.stage_table(stage)?;
    let cap = 1.0 / m_i as f64;
    if table.u_axis.max() < cap - 1e-12 || table.v_axis.max() < cap - 1e-12 {
        return Err(Error::InvalidGrid(format!(
            "donor stage-{stage} table extent ({}, {}) does not cover 1/{m_i}",
            table.u_axis.max(),
            table.v_axis.max()
        )));
    }
    match donor.family {
        Family::Projective => {
            let (pc, phi, _) = first_step_projective(table, m_i, donor.cfg.theta());
            Ok(FirstMeasurement {
                pc,
                control: LocalMeasurement::Projective { phi },
            })
        }
        Family::Kennedy => {
            let (pc, control, _) =
                crate::gk::first_step_kennedy(table, m_i, donor.cfg.mean_photons());
            Ok(FirstMeasurement { pc, control })
        }
    }
}

// ---------------------------------------------------------------------------
// Text serialization and caching
// ---------------------------------------------------------------------------

const TABLES_HEADER: &str = "# qppm-tables v1";
const SUMMARY_HEADER: &str = "qppm-summary v1";

fn fmt_control(c: &LocalMeasurement) -> String {
    match c {
        LocalMeasurement::Projective { phi } => format!("{phi}"),
        LocalMeasurement::GeneralizedKennedy { beta, association } => {
            format!("{beta};{}", association.name())
        }
        LocalMeasurement::Povm { a, b } => format!("{a};{b};povm"),
    }
}

fn parse_control(s: &str, family: Family, line: usize) -> Result<LocalMeasurement> {
    let bad = |msg: String| Error::Parse { line, message: msg };
    match family {
        Family::Projective => {
            let phi: f64 = s
                .parse()
                .map_err(|_| bad(format!("bad projector angle {s:?}")))?;
            Ok(LocalMeasurement::Projective { phi })
        }
        Family::Kennedy => {
            let (b, a) = s
                .split_once(';')
                .ok_or_else(|| bad(format!("bad kennedy control {s:?}")))?;
            let beta: f64 = b
                .parse()
                .map_err(|_| bad(format!("bad displacement {b:?}")))?;
            let association =
                Association::parse(a).map_err(|e| bad(e.to_string()))?;
            Ok(LocalMeasurement::GeneralizedKennedy { beta, association })
        }
    }
}

/// Writes every stage table as CSV (`stage,u,v,value,control,branch`), with
/// enough metadata in leading comment lines to rebuild the tables exactly.
pub fn write_tables<W: Write>(result: &DpResult, mut w: W) -> Result<()> {
    writeln!(w, "{TABLES_HEADER}")?;
    writeln!(
        w,
        "# family={} m={} gamma={} interp={} n_u={} u_step={}",
        result.family.name(),
        result.cfg.m(),
        result.cfg.gamma(),
        result.grid.interpolation.name(),
        result.grid.n_u,
        result.grid.u_step(),
    )?;
    for t in &result.tables {
        writeln!(
            w,
            "# stage={} n_v={} v_step={}",
            t.stage, t.v_axis.n, t.v_axis.step
        )?;
    }
    writeln!(w, "stage,u,v,value,control,branch")?;
    let mut line = String::new();
    for t in &result.tables {
        for iv in 0..t.n_v() {
            let v = t.v_axis.node(iv);
            for iu in 0..t.n_u() {
                let u = t.u_axis.node(iu);
                line.clear();
                let _ = write!(
                    line,
                    "{},{},{},{},{},{}",
                    t.stage,
                    u,
                    v,
                    t.value(iu, iv),
                    fmt_control(&t.control(iu, iv)),
                    t.branch(iu, iv).name()
                );
                writeln!(w, "{line}")?;
            }
        }
    }
    Ok(())
}

struct StageMeta {
    stage: u32,
    n_v: usize,
    v_step: f64,
}

fn parse_kv<'a>(part: &'a str, key: &str, line: usize) -> Result<&'a str> {
    part.strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or(Error::Parse {
            line,
            message: format!("expected {key}=..., found {part:?}"),
        })
}

/// Reads tables previously written by [`write_tables`]. The caller supplies
/// the config the tables are expected to describe; a mismatch is an error.
pub fn read_tables<R: BufRead>(r: R, cfg: &ModulationConfig) -> Result<(Vec<RewardTable>, Family)> {
    let mut lines = r.lines().enumerate();
    let (n0, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty table file".into(),
    })?;
    let first = first?;
    if first.trim() != TABLES_HEADER {
        return Err(Error::Parse {
            line: n0 + 1,
            message: format!("unrecognized header {first:?}"),
        });
    }
    let (n1, meta) = lines.next().ok_or(Error::Parse {
        line: 2,
        message: "missing metadata line".into(),
    })?;
    let meta = meta?;
    let parts: Vec<&str> = meta.trim_start_matches('#').split_whitespace().collect();
    if parts.len() != 6 {
        return Err(Error::Parse {
            line: n1 + 1,
            message: "malformed metadata line".into(),
        });
    }
    let family = Family::parse(parse_kv(parts[0], "family", n1 + 1)?)
        .map_err(|e| Error::Parse { line: n1 + 1, message: e.to_string() })?;
    let m: u32 = parse_kv(parts[1], "m", n1 + 1)?.parse().map_err(|_| Error::Parse {
        line: n1 + 1,
        message: "bad m".into(),
    })?;
    let gamma: f64 = parse_kv(parts[2], "gamma", n1 + 1)?
        .parse()
        .map_err(|_| Error::Parse {
            line: n1 + 1,
            message: "bad gamma".into(),
        })?;
    if m != cfg.m() || gamma.to_bits() != cfg.gamma().to_bits() {
        return Err(Error::Parse {
            line: n1 + 1,
            message: format!(
                "tables describe (m={m}, gamma={gamma}), expected (m={}, gamma={})",
                cfg.m(),
                cfg.gamma()
            ),
        });
    }
    let interp = Interpolation::parse(parse_kv(parts[3], "interp", n1 + 1)?)
        .map_err(|e| Error::Parse { line: n1 + 1, message: e.to_string() })?;
    let n_u: usize = parse_kv(parts[4], "n_u", n1 + 1)?.parse().map_err(|_| Error::Parse {
        line: n1 + 1,
        message: "bad n_u".into(),
    })?;
    let u_step: f64 = parse_kv(parts[5], "u_step", n1 + 1)?
        .parse()
        .map_err(|_| Error::Parse {
            line: n1 + 1,
            message: "bad u_step".into(),
        })?;

    let mut stages: Vec<StageMeta> = Vec::new();
    let mut header_seen = false;
    let mut body: Vec<(usize, String)> = Vec::new();
    for (i, l) in lines {
        let l = l?;
        if !header_seen {
            if let Some(rest) = l.strip_prefix("# stage=") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: "malformed stage metadata".into(),
                    });
                }
                let stage: u32 = parts[0].parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: "bad stage".into(),
                })?;
                let n_v: usize = parse_kv(parts[1], "n_v", i + 1)?.parse().map_err(|_| {
                    Error::Parse {
                        line: i + 1,
                        message: "bad n_v".into(),
                    }
                })?;
                let v_step: f64 = parse_kv(parts[2], "v_step", i + 1)?
                    .parse()
                    .map_err(|_| Error::Parse {
                        line: i + 1,
                        message: "bad v_step".into(),
                    })?;
                stages.push(StageMeta { stage, n_v, v_step });
                continue;
            }
            if l.trim() == "stage,u,v,value,control,branch" {
                header_seen = true;
                continue;
            }
            return Err(Error::Parse {
                line: i + 1,
                message: format!("unexpected line before column header: {l:?}"),
            });
        }
        if !l.is_empty() {
            body.push((i + 1, l));
        }
    }
    if !header_seen {
        return Err(Error::Parse {
            line: 0,
            message: "missing column header".into(),
        });
    }

    let mut tables = Vec::with_capacity(stages.len());
    let mut cursor = 0usize;
    for sm in &stages {
        let ua = Axis::new(n_u, u_step);
        let va = Axis::new(sm.n_v, sm.v_step);
        let cells = n_u * sm.n_v;
        if body.len() < cursor + cells {
            return Err(Error::Parse {
                line: body.last().map(|(l, _)| *l).unwrap_or(0),
                message: format!(
                    "stage {} truncated: expected {cells} rows",
                    sm.stage
                ),
            });
        }
        let mut values = Vec::with_capacity(cells);
        let mut phi = Vec::new();
        let mut beta = Vec::new();
        let mut assoc = Vec::new();
        let mut branches = Vec::with_capacity(cells);
        for idx in 0..cells {
            let (ln, row) = &body[cursor + idx];
            let cols: Vec<&str> = row.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Parse {
                    line: *ln,
                    message: format!("expected 6 columns, found {}", cols.len()),
                });
            }
            let stage: u32 = cols[0].parse().map_err(|_| Error::Parse {
                line: *ln,
                message: "bad stage column".into(),
            })?;
            if stage != sm.stage {
                return Err(Error::Parse {
                    line: *ln,
                    message: format!("expected stage {}, found {stage}", sm.stage),
                });
            }
            let u: f64 = cols[1].parse().map_err(|_| Error::Parse {
                line: *ln,
                message: "bad u column".into(),
            })?;
            let v: f64 = cols[2].parse().map_err(|_| Error::Parse {
                line: *ln,
                message: "bad v column".into(),
            })?;
            let (iu, iv) = (idx % n_u, idx / n_u);
            if (u - ua.node(iu)).abs() > 1e-12 || (v - va.node(iv)).abs() > 1e-12 {
                return Err(Error::Parse {
                    line: *ln,
                    message: format!("row coordinates ({u}, {v}) off the expected node"),
                });
            }
            let value: f64 = cols[3].parse().map_err(|_| Error::Parse {
                line: *ln,
                message: "bad value column".into(),
            })?;
            values.push(value);
            match parse_control(cols[4], family, *ln)? {
                LocalMeasurement::Projective { phi: p } => phi.push(p),
                LocalMeasurement::GeneralizedKennedy { beta: b, association } => {
                    beta.push(b);
                    assoc.push(association);
                }
                LocalMeasurement::Povm { .. } => {
                    return Err(Error::Parse {
                        line: *ln,
                        message: "povm controls are not tabulated".into(),
                    })
                }
            }
            branches.push(BranchCase::parse(cols[5]).map_err(|e| Error::Parse {
                line: *ln,
                message: e.to_string(),
            })?);
        }
        cursor += cells;
        let controls = match family {
            Family::Projective => ControlTable::Projective(phi),
            Family::Kennedy => ControlTable::Kennedy {
                beta,
                association: assoc,
            },
        };
        let table = RewardTable {
            stage: sm.stage,
            u_axis: ua,
            v_axis: va,
            interpolation: interp,
            values,
            controls,
            branches,
        };
        table.validate_shape()?;
        tables.push(table);
    }
    if cursor != body.len() {
        return Err(Error::Parse {
            line: body[cursor].0,
            message: "trailing rows after last declared stage".into(),
        });
    }
    Ok((tables, family))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable cache key for a (config, family, grid) triple.
pub fn cache_key(cfg: &ModulationConfig, family: Family, grid: &GridSpec) -> String {
    let desc = format!(
        "v1|{}|m={}|g={:016x}|u={:016x}x{}|v={:016x}x{}|i={}|scan={}x{}",
        family.name(),
        cfg.m(),
        cfg.gamma().to_bits(),
        grid.u_max.to_bits(),
        grid.n_u,
        grid.v_max.to_bits(),
        grid.n_v,
        grid.interpolation.name(),
        PHI_SCAN_POINTS,
        crate::gk::BETA_SCAN_POINTS,
    );
    format!("{:016x}", fnv1a(desc.as_bytes()))
}

/// Writes a result into `dir/<key>/` (tables.csv + summary.txt); returns the
/// entry directory.
pub fn store_result(dir: &Path, result: &DpResult) -> Result<PathBuf> {
    let entry = dir.join(cache_key(&result.cfg, result.family, &result.grid));
    std::fs::create_dir_all(&entry)?;
    let mut tw = std::io::BufWriter::new(std::fs::File::create(entry.join("tables.csv"))?);
    write_tables(result, &mut tw)?;
    tw.flush()?;
    let mut s = String::new();
    let _ = writeln!(s, "{SUMMARY_HEADER}");
    let _ = writeln!(s, "family={}", result.family.name());
    let _ = writeln!(s, "m={}", result.cfg.m());
    let _ = writeln!(s, "gamma={}", result.cfg.gamma());
    let _ = writeln!(s, "pc={}", result.pc);
    let _ = writeln!(s, "control0={}", fmt_control(&result.first_control));
    let _ = writeln!(s, "clamped={}", result.clamped);
    if let Some(cc) = result.gk_crosscheck {
        let _ = writeln!(s, "crosscheck={},{},{}", cc.cells, cc.flagged, cc.max_gap);
    }
    std::fs::write(entry.join("summary.txt"), s)?;
    Ok(entry)
}

/// Loads a cached result if a matching entry exists. Returns Ok(None) when
/// the entry is absent; a present-but-inconsistent entry is an error so
/// callers can warn and recompute.
pub fn load_result(
    dir: &Path,
    cfg: &ModulationConfig,
    family: Family,
    grid: &GridSpec,
) -> Result<Option<DpResult>> {
    let entry = dir.join(cache_key(cfg, family, grid));
    let summary_path = entry.join("summary.txt");
    let tables_path = entry.join("tables.csv");
    if !summary_path.exists() || !tables_path.exists() {
        return Ok(None);
    }
    let summary = std::fs::read_to_string(&summary_path)?;
    let mut pc = None;
    let mut control0 = None;
    let mut clamped = 0u64;
    let mut crosscheck = None;
    for (i, line) in summary.lines().enumerate() {
        if i == 0 {
            if line.trim() != SUMMARY_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unrecognized summary header {line:?}"),
                });
            }
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            match k {
                "pc" => {
                    pc = Some(v.parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 1,
                        message: "bad pc".into(),
                    })?)
                }
                "control0" => control0 = Some(parse_control(v, family, i + 1)?),
                "clamped" => {
                    clamped = v.parse().map_err(|_| Error::Parse {
                        line: i + 1,
                        message: "bad clamp count".into(),
                    })?
                }
                "crosscheck" => {
                    let parts: Vec<&str> = v.split(',').collect();
                    if parts.len() != 3 {
                        return Err(Error::Parse {
                            line: i + 1,
                            message: "bad crosscheck record".into(),
                        });
                    }
                    crosscheck = Some(GkCrossCheck {
                        cells: parts[0].parse().map_err(|_| Error::Parse {
                            line: i + 1,
                            message: "bad crosscheck cells".into(),
                        })?,
                        flagged: parts[1].parse().map_err(|_| Error::Parse {
                            line: i + 1,
                            message: "bad crosscheck flags".into(),
                        })?,
                        max_gap: parts[2].parse().map_err(|_| Error::Parse {
                            line: i + 1,
                            message: "bad crosscheck gap".into(),
                        })?,
                    });
                }
                _ => {}
            }
        }
    }
    let pc = pc.ok_or(Error::Parse {
        line: 0,
        message: "summary missing pc".into(),
    })?;
    let first_control = control0.ok_or(Error::Parse {
        line: 0,
        message: "summary missing control0".into(),
    })?;
    let reader = std::io::BufReader::new(std::fs::File::open(&tables_path)?);
    let (tables, file_family) = read_tables(reader, cfg)?;
    if file_family != family {
        return Err(Error::Parse {
            line: 0,
            message: format!(
                "cached tables are {}, expected {}",
                file_family.name(),
                family.name()
            ),
        });
    }
    // The key encodes the grid, but verify the stored axes anyway.
    if tables.is_empty()
        || tables[0].u_axis.n != grid.n_u
        || (tables[0].u_axis.max() - grid.u_max).abs() > 1e-12
        || tables[0].interpolation != grid.interpolation
    {
        return Err(Error::Parse {
            line: 0,
            message: "cached table axes disagree with the requested grid".into(),
        });
    }
    Ok(Some(DpResult {
        cfg: *cfg,
        family,
        grid: *grid,
        pc,
        first_control,
        tables,
        clamped,
        gk_crosscheck: crosscheck,
    }))
}
