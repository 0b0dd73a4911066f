//! Cycle-level systolic-array simulation of a locked FFN layer.
//!
//! The model is logical: every PE performs one multiply-accumulate per
//! cycle, values hop one unit per cycle, and there are no stalls, memory
//! hierarchies, or clock gating. What the simulator is faithful about is
//! structure: where the permutation fabric sits (at the array's output
//! lanes), when its trigger arms it (only while the key matrix is being
//! computed), and how per-lane delay elements line up skewed output lanes so
//! each fabric group sees one logical row per cycle.
//!
//! Pinned schedules, worked on a 4x4 array (K_t rows of stationary weights,
//! N_t output lanes):
//!
//! Weight-stationary. PE(r,c) holds the weight for reduction index r and
//! output lane c. Activation row t enters PE row r at cycle t + r and moves
//! right one lane per cycle, so MAC(t, r, c) fires at cycle t + r + c and
//! lane c drains output row t at cycle t + c + K_t - 1:
//!
//! ```text
//! lane:        0    1    2    3
//! row 0 at:    3    4    5    6      (K_t = 4; lane c lags lane 0 by c)
//! row 1 at:    4    5    6    7
//! ```
//!
//! A tile therefore takes M + K_t + N_t - 2 cycles, which collapses to
//! M*K*N total on a 1x1 array. Lanes emerge skewed, so the locking module
//! delays lane j by (m - 1) - (j mod m): every lane of a group of m then
//! presents the same logical row in the same cycle.
//!
//! Output-stationary. PE(i,j) owns output element (i,j); operands arrive
//! skewed so MAC(i, j, k) fires at cycle k + i + j. Rows drain in lockstep,
//! all lanes of row i together at cycle K + i + N_t - 2, so no alignment
//! delays are needed. A tile takes K + M_t + N_t - 2 cycles, again M*K*N
//! total on a 1x1 array.
//!
//! Multi-round accumulation differs by dataflow. A weight-stationary array
//! reloads weights per reduction chunk and drains a partial-sum matrix each
//! round; in the key phase every drained partial passes through the fabric
//! and the accumulator sums routed partials, which is correct because the
//! fabric is linear: sum_r(A_r K) = (sum_r A_r) K. An output-stationary
//! array accumulates across rounds inside the PEs and drains once, so the
//! fabric applies exactly once per output row.

use crate::error::{Error, Result};
use crate::fabric::{control_bits_for, BenesFabric, KeyBits};
use crate::linalg::{apply_permutation, DenseMatrix};
use crate::locker::LockedFfn;
use crate::model::FfnKind;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Stop recording individual events past this count; exact totals are kept
/// in the trace counters regardless.
pub const MAX_TRACE_EVENTS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataflow {
    WeightStationary,
    OutputStationary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystolicConfig {
    pub rows: usize,
    pub cols: usize,
    pub dataflow: Dataflow,
    /// Fabric group width: the locking module shuffles m consecutive output
    /// lanes per fabric. Must divide `cols` so column tiles never split a
    /// group.
    pub m: usize,
}

impl SystolicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Input(format!(
                "array must have positive dimensions, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.m == 0 || self.cols % self.m != 0 {
            return Err(Error::Input(format!(
                "fabric group size {} does not divide the {} output lanes",
                self.m, self.cols
            )));
        }
        Ok(())
    }
}

/// Which product the array is computing when an event fires. The fabric
/// trigger arms only for `Key`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Standalone,
    Up,
    Key,
    Down,
}

impl Phase {
    fn label(self) -> &'static str {
        match self {
            Phase::Standalone => "matmul",
            Phase::Up => "up",
            Phase::Key => "key",
            Phase::Down => "down",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent {
    /// One multiply-accumulate at PE (row, col) of the array.
    Mac { cycle: u64, pe_row: usize, pe_col: usize },
    /// Output lane `lane` emits element (row, col) of the phase's product;
    /// `last` marks the reduction round that finalizes the element.
    Drain { cycle: u64, lane: usize, row: usize, col: usize, last: bool },
    /// The locking-module trigger arms (key-matrix computation starts).
    TriggerArm { cycle: u64 },
    /// The trigger disarms (key-matrix computation done).
    TriggerDisarm { cycle: u64 },
    /// One fabric routed logical row `row` of group `group`; `displaced`
    /// counts lanes that moved (0 = identity routing).
    FabricApply { cycle: u64, group: usize, row: usize, displaced: usize },
}

impl SimEvent {
    fn cycle(&self) -> u64 {
        match *self {
            SimEvent::Mac { cycle, .. }
            | SimEvent::Drain { cycle, .. }
            | SimEvent::TriggerArm { cycle }
            | SimEvent::TriggerDisarm { cycle }
            | SimEvent::FabricApply { cycle, .. } => cycle,
        }
    }

    fn text_line(&self, phase: Phase) -> String {
        match *self {
            SimEvent::Mac { cycle, pe_row, pe_col } => {
                format!("{cycle}\tpe[{pe_row},{pe_col}]\tmac\t{}", phase.label())
            }
            SimEvent::Drain { cycle, lane, row, col, last } => format!(
                "{cycle}\tlane[{lane}]\tdrain\t{} out[{row},{col}]{}",
                phase.label(),
                if last { " final" } else { "" }
            ),
            SimEvent::TriggerArm { cycle } => {
                format!("{cycle}\ttrigger\tarm\t{}", phase.label())
            }
            SimEvent::TriggerDisarm { cycle } => {
                format!("{cycle}\ttrigger\tdisarm\t{}", phase.label())
            }
            SimEvent::FabricApply { cycle, group, row, displaced } => format!(
                "{cycle}\tfabric[{group}]\tapply\t{} row {row} displaced {displaced}",
                phase.label()
            ),
        }
    }
}

/// Exact totals for one simulation, exported as the JSON summary.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TraceSummary {
    pub cycles: u64,
    pub macs: u64,
    pub drains: u64,
    pub fabric_applications: u64,
    pub fabric_applications_off_key: u64,
    pub events_recorded: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct SimTrace {
    /// Cycle-stamped events in emission order, capped at
    /// [`MAX_TRACE_EVENTS`]; trigger and fabric events are always kept.
    pub events: Vec<(Phase, SimEvent)>,
    pub truncated: bool,
    pub cycles: u64,
    pub macs: u64,
    pub drains: u64,
    pub fabric_applications: u64,
    /// Fabric activity outside the key phase. The trigger design makes this
    /// zero; it is counted so tests can assert the invariant.
    pub fabric_applications_off_key: u64,
    /// The simulated layer/matmul result.
    pub output: DenseMatrix<f32>,
}

impl SimTrace {
    fn new() -> Self {
        SimTrace {
            events: Vec::new(),
            truncated: false,
            cycles: 0,
            macs: 0,
            drains: 0,
            fabric_applications: 0,
            fabric_applications_off_key: 0,
            output: DenseMatrix::zeros(0, 0),
        }
    }

    fn push(&mut self, phase: Phase, event: SimEvent) {
        self.cycles = self.cycles.max(event.cycle() + 1);
        let keep_always = matches!(
            event,
            SimEvent::TriggerArm { .. }
                | SimEvent::TriggerDisarm { .. }
                | SimEvent::FabricApply { .. }
        );
        match &event {
            SimEvent::Mac { .. } => self.macs += 1,
            SimEvent::Drain { .. } => self.drains += 1,
            SimEvent::FabricApply { .. } => {
                self.fabric_applications += 1;
                if phase != Phase::Key {
                    self.fabric_applications_off_key += 1;
                }
            }
            _ => {}
        }
        if self.events.len() < MAX_TRACE_EVENTS || keep_always {
            self.events.push((phase, event));
        } else {
            self.truncated = true;
        }
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            cycles: self.cycles,
            macs: self.macs,
            drains: self.drains,
            fabric_applications: self.fabric_applications,
            fabric_applications_off_key: self.fabric_applications_off_key,
            events_recorded: self.events.len(),
            truncated: self.truncated,
        }
    }

    /// Line-oriented export: one `cycle<TAB>unit<TAB>event<TAB>detail` line
    /// per recorded event.
    pub fn text_lines(&self) -> String {
        let mut out = String::new();
        for (phase, e) in &self.events {
            out.push_str(&e.text_line(*phase));
            out.push('\n');
        }
        out
    }
}

/// Closed-form cycle count for one weight-stationary tile: stream M rows
/// through K_t stationary rows and N_t lanes.
pub fn ws_tile_cycles(m_rows: usize, k_t: usize, n_t: usize) -> u64 {
    (m_rows + k_t + n_t - 2) as u64
}

/// Closed-form cycle count for one output-stationary tile: reduce over k
/// into an M_t x N_t block and drain rows in lockstep.
pub fn os_tile_cycles(k: usize, m_t: usize, n_t: usize) -> u64 {
    (k + m_t + n_t - 2) as u64
}

fn chunk_spans(total: usize, max: usize) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = 0;
    while start < total {
        let len = max.min(total - start);
        spans.push((start, len));
        start += len;
    }
    spans
}

/// Split `total` into `rounds` near-equal contiguous spans.
fn round_spans(total: usize, rounds: usize) -> Result<Vec<(usize, usize)>> {
    if rounds == 0 || rounds > total {
        return Err(Error::Input(format!(
            "{rounds} accumulation rounds cannot cover a reduction of {total}"
        )));
    }
    let base = total / rounds;
    let extra = total % rounds;
    let mut spans = Vec::with_capacity(rounds);
    let mut start = 0;
    for r in 0..rounds {
        let len = base + usize::from(r < extra);
        spans.push((start, len));
        start += len;
    }
    Ok(spans)
}

/// Internal accumulator shared by all phases of one simulation.
struct Sim {
    cfg: SystolicConfig,
    trace: SimTrace,
    /// First free cycle: each phase/tile starts here.
    offset: u64,
}

impl Sim {
    fn new(cfg: SystolicConfig) -> Self {
        Sim { cfg, trace: SimTrace::new(), offset: 0 }
    }

    fn advance(&mut self, cycles: u64) {
        self.offset += cycles;
        self.trace.cycles = self.trace.cycles.max(self.offset);
    }

    /// Plain on-array matmul (no fabric): both dataflows, full tiling.
    /// Logs MACs and drains, verifies every output element is finalized
    /// exactly once, and advances the cycle offset by the closed-form tile
    /// latencies.
    fn matmul_phase(
        &mut self,
        phase: Phase,
        a: &DenseMatrix<f32>,
        b: &DenseMatrix<f32>,
    ) -> Result<DenseMatrix<f32>> {
        if a.cols() != b.rows() {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut c = DenseMatrix::zeros(m, n);
        let mut finalized = vec![0u32; m * n];
        match self.cfg.dataflow {
            Dataflow::WeightStationary => {
                let k_chunks = chunk_spans(k, self.cfg.rows);
                let last_chunk = k_chunks.len() - 1;
                for (ci, &(k0, kt)) in k_chunks.iter().enumerate() {
                    for &(c0, nt) in &chunk_spans(n, self.cfg.cols) {
                        for t in 0..m {
                            for r in 0..kt {
                                for lane in 0..nt {
                                    let cycle = self.offset + (t + r + lane) as u64;
                                    self.trace.push(
                                        phase,
                                        SimEvent::Mac { cycle, pe_row: r, pe_col: lane },
                                    );
                                    let add = a.get(t, k0 + r) * b.get(k0 + r, c0 + lane);
                                    c.set(t, c0 + lane, c.get(t, c0 + lane) + add);
                                }
                            }
                            for lane in 0..nt {
                                let cycle = self.offset + (t + lane + kt - 1) as u64;
                                let last = ci == last_chunk;
                                self.trace.push(
                                    phase,
                                    SimEvent::Drain { cycle, lane, row: t, col: c0 + lane, last },
                                );
                                if last {
                                    finalized[t * n + c0 + lane] += 1;
                                }
                            }
                        }
                        self.advance(ws_tile_cycles(m, kt, nt));
                    }
                }
            }
            Dataflow::OutputStationary => {
                for &(i0, mt) in &chunk_spans(m, self.cfg.rows) {
                    for &(j0, nt) in &chunk_spans(n, self.cfg.cols) {
                        for kk in 0..k {
                            for i in 0..mt {
                                for j in 0..nt {
                                    let cycle = self.offset + (kk + i + j) as u64;
                                    self.trace
                                        .push(phase, SimEvent::Mac { cycle, pe_row: i, pe_col: j });
                                    let add = a.get(i0 + i, kk) * b.get(kk, j0 + j);
                                    c.set(i0 + i, j0 + j, c.get(i0 + i, j0 + j) + add);
                                }
                            }
                        }
                        for i in 0..mt {
                            let cycle = self.offset + (k + i + nt - 2) as u64;
                            for j in 0..nt {
                                self.trace.push(
                                    phase,
                                    SimEvent::Drain {
                                        cycle,
                                        lane: j,
                                        row: i0 + i,
                                        col: j0 + j,
                                        last: true,
                                    },
                                );
                                finalized[(i0 + i) * n + j0 + j] += 1;
                            }
                        }
                        self.advance(os_tile_cycles(k, mt, nt));
                    }
                }
            }
        }
        if finalized.iter().any(|&f| f != 1) {
            return Err(Error::Simulator(
                "an output element was finalized zero or multiple times".into(),
            ));
        }
        Ok(c)
    }
}

/// Simulate `a x b` on the array. Returns the product (equal to the
/// software matmul) and the cycle-stamped trace.
pub fn systolic_matmul(
    a: &DenseMatrix<f32>,
    b: &DenseMatrix<f32>,
    cfg: &SystolicConfig,
) -> Result<(DenseMatrix<f32>, SimTrace)> {
    cfg.validate()?;
    let mut sim = Sim::new(*cfg);
    let c = sim.matmul_phase(Phase::Standalone, a, b)?;
    sim.trace.output = c.clone();
    Ok((c, sim.trace))
}

/// Per-lane delay elements in front of the locking module, sized so the m
/// lanes of each fabric group present the same logical row in one cycle.
/// Weight-stationary lanes drain skewed (lane j lags lane 0 by j cycles), so
/// lane j waits (m-1) - (j mod m) cycles; output-stationary rows drain in
/// lockstep and need no delay.
pub fn trigger_schedule(cfg: &SystolicConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    Ok(match cfg.dataflow {
        Dataflow::WeightStationary => {
            (0..cfg.cols).map(|j| (cfg.m - 1) - (j % cfg.m)).collect()
        }
        Dataflow::OutputStationary => vec![0; cfg.cols],
    })
}

/// One drained (but not yet aligned) key-phase value.
struct PendingLane {
    row: usize,
    lane_in_group: usize,
    value: f32,
}

/// Simulate one locked FFN layer end to end: the up projection (activation
/// applied as elements finalize), the key matrix U x R as dense tiles with
/// the fabric armed at the output lanes, and the folded down projection.
/// `forced_rounds` overrides the number of reduction rounds of the key
/// matrix; `None` uses the array's natural chunking.
pub fn locked_layer_sim(
    locked: &LockedFfn<f32>,
    bits: &KeyBits,
    x: &DenseMatrix<f32>,
    cfg: &SystolicConfig,
    forced_rounds: Option<usize>,
) -> Result<(DenseMatrix<f32>, SimTrace)> {
    cfg.validate()?;
    locked.ffn.validate()?;
    bits.validate()?;
    if bits.n != locked.n() || bits.m != locked.m {
        return Err(Error::Input(format!(
            "key is shaped (n={}, m={}), lock expects (n={}, m={})",
            bits.n,
            bits.m,
            locked.n(),
            locked.m
        )));
    }
    if bits.m == 0 {
        return Err(Error::Input("negation key supplied to the fabric simulator".into()));
    }
    if cfg.m != locked.m {
        return Err(Error::Input(format!(
            "array fabric is built for groups of {}, lock uses groups of {}",
            cfg.m, locked.m
        )));
    }
    if x.cols() != locked.d_model() {
        return Err(Error::Shape(format!(
            "input width {} does not match d_model {}",
            x.cols(),
            locked.d_model()
        )));
    }
    let d_ff = locked.d_ff();
    let n = locked.n();
    let m = locked.m;

    // Per-group routing, precomputed once. Groups past the protected width
    // have no fabric hardware and pass through untouched.
    let covered_groups = n / m;
    let group_perms: Vec<Vec<usize>> = if m == 1 {
        (0..covered_groups).map(|_| vec![0]).collect()
    } else {
        let fabric = BenesFabric::new(m)?;
        let per = control_bits_for(m, m);
        (0..covered_groups)
            .map(|g| fabric.permutation_of(&bits.bits[g * per..(g + 1) * per]))
            .collect::<Result<_>>()?
    };
    let delays = trigger_schedule(cfg)?;

    let mut sim = Sim::new(*cfg);

    // Up phase: U = sigma(X * W_up), gated variant combines two products.
    let u = {
        let pre = sim.matmul_phase(Phase::Up, x, &locked.ffn.w_up)?;
        match locked.ffn.kind {
            FfnKind::Standard => {
                let mut u = pre;
                for v in u.data_mut() {
                    *v = locked.ffn.activation.apply(*v);
                }
                u
            }
            FfnKind::Gated => {
                let gate =
                    sim.matmul_phase(Phase::Up, x, locked.ffn.w_gate.as_ref().expect("validated"))?;
                let mut u = pre;
                for (v, g) in u.data_mut().iter_mut().zip(gate.data()) {
                    *v *= locked.ffn.activation.apply(*g);
                }
                u
            }
        }
    };

    // Key phase: Z = (U * R) routed by the fabric. R runs on the array as an
    // ordinary dense operand.
    let r_full = locked.rotation.dense_full(d_ff);
    let z = sim_key_phase(&mut sim, &u, &r_full, &group_perms, &delays, forced_rounds)?;

    // Down phase: Y = Z * W_down, fabric disarmed.
    let y = sim.matmul_phase(Phase::Down, &z, &locked.ffn.w_down)?;
    sim.trace.output = y.clone();
    Ok((y, sim.trace))
}

/// The key-matrix computation with the locking module active: every drained
/// value passes its lane's delay element, groups are collected per cycle,
/// checked for alignment, routed, and accumulated.
fn sim_key_phase(
    sim: &mut Sim,
    u: &DenseMatrix<f32>,
    r_full: &DenseMatrix<f32>,
    group_perms: &[Vec<usize>],
    delays: &[usize],
    forced_rounds: Option<usize>,
) -> Result<DenseMatrix<f32>> {
    let (t_rows, d_ff) = (u.rows(), u.cols());
    let m = sim.cfg.m;
    let covered_groups = group_perms.len();
    let mut z = DenseMatrix::zeros(t_rows, d_ff);
    let mut finalized = vec![0u32; t_rows * d_ff];

    sim.trace.push(Phase::Key, SimEvent::TriggerArm { cycle: sim.offset });

    match sim.cfg.dataflow {
        Dataflow::WeightStationary => {
            // Reduction rounds: each drains a partial through the locking
            // module; the accumulator sums routed partials.
            let spans = match forced_rounds {
                Some(rounds) => {
                    let spans = round_spans(d_ff, rounds)?;
                    if spans.iter().any(|&(_, len)| len > sim.cfg.rows) {
                        return Err(Error::Input(format!(
                            "{rounds} rounds leave reduction chunks wider than the {} array rows",
                            sim.cfg.rows
                        )));
                    }
                    spans
                }
                None => chunk_spans(d_ff, sim.cfg.rows),
            };
            let last_round = spans.len() - 1;
            for (ri, &(k0, kt)) in spans.iter().enumerate() {
                for &(c0, nt) in &chunk_spans(d_ff, sim.cfg.cols) {
                    // Aligned arrivals: (arrival cycle, global group) -> lanes.
                    let mut buckets: BTreeMap<(u64, usize), Vec<PendingLane>> = BTreeMap::new();
                    for t in 0..t_rows {
                        for r in 0..kt {
                            for lane in 0..nt {
                                let cycle = sim.offset + (t + r + lane) as u64;
                                sim.trace
                                    .push(Phase::Key, SimEvent::Mac { cycle, pe_row: r, pe_col: lane });
                            }
                        }
                        for lane in 0..nt {
                            let col = c0 + lane;
                            let raw_cycle = sim.offset + (t + lane + kt - 1) as u64;
                            let last = ri == last_round;
                            sim.trace.push(
                                Phase::Key,
                                SimEvent::Drain { cycle: raw_cycle, lane, row: t, col, last },
                            );
                            if last {
                                finalized[t * d_ff + col] += 1;
                            }
                            let mut partial = 0.0f32;
                            for r in 0..kt {
                                partial += u.get(t, k0 + r) * r_full.get(k0 + r, col);
                            }
                            let group = col / m;
                            if group < covered_groups {
                                let arrival = raw_cycle + delays[lane] as u64;
                                buckets.entry((arrival, group)).or_default().push(PendingLane {
                                    row: t,
                                    lane_in_group: col % m,
                                    value: partial,
                                });
                            } else {
                                // Past the protected width: no delay elements,
                                // no fabric; accumulate the raw drain.
                                z.set(t, col, z.get(t, col) + partial);
                            }
                        }
                    }
                    for ((cycle, group), pending) in buckets {
                        let row = aligned_row(&pending, m)?;
                        accumulate_routed(
                            sim,
                            &mut z,
                            &group_perms[group],
                            group,
                            row,
                            cycle,
                            &pending,
                        )?;
                    }
                    sim.advance(ws_tile_cycles(t_rows, kt, nt));
                }
            }
        }
        Dataflow::OutputStationary => {
            // Rounds only partition the MAC stream; the PEs accumulate in
            // place across rounds and the fabric sees one drain per row.
            if let Some(rounds) = forced_rounds {
                round_spans(d_ff, rounds)?;
            }
            for &(i0, mt) in &chunk_spans(t_rows, sim.cfg.rows) {
                for &(j0, nt) in &chunk_spans(d_ff, sim.cfg.cols) {
                    for kk in 0..d_ff {
                        for i in 0..mt {
                            for j in 0..nt {
                                let cycle = sim.offset + (kk + i + j) as u64;
                                sim.trace
                                    .push(Phase::Key, SimEvent::Mac { cycle, pe_row: i, pe_col: j });
                            }
                        }
                    }
                    for i in 0..mt {
                        let row = i0 + i;
                        let cycle = sim.offset + (d_ff + i + nt - 2) as u64;
                        let mut pending_per_group: BTreeMap<usize, Vec<PendingLane>> =
                            BTreeMap::new();
                        for j in 0..nt {
                            let col = j0 + j;
                            sim.trace.push(
                                Phase::Key,
                                SimEvent::Drain { cycle, lane: j, row, col, last: true },
                            );
                            finalized[row * d_ff + col] += 1;
                            let mut total = 0.0f32;
                            for kk in 0..d_ff {
                                total += u.get(row, kk) * r_full.get(kk, col);
                            }
                            let group = col / m;
                            if group < covered_groups {
                                pending_per_group.entry(group).or_default().push(PendingLane {
                                    row,
                                    lane_in_group: col % m,
                                    value: total,
                                });
                            } else {
                                z.set(row, col, total);
                            }
                        }
                        for (group, pending) in pending_per_group {
                            let row = aligned_row(&pending, m)?;
                            accumulate_routed(
                                sim,
                                &mut z,
                                &group_perms[group],
                                group,
                                row,
                                cycle,
                                &pending,
                            )?;
                        }
                    }
                    sim.advance(os_tile_cycles(d_ff, mt, nt));
                }
            }
        }
    }

    sim.trace.push(Phase::Key, SimEvent::TriggerDisarm { cycle: sim.offset });
    if finalized.iter().any(|&f| f != 1) {
        return Err(Error::Simulator(
            "a key-matrix element was finalized zero or multiple times".into(),
        ));
    }
    Ok(z)
}

/// The delay elements must hand the fabric a complete group carrying one
/// logical row. Anything else is a scheduling bug, not a user error.
fn aligned_row(pending: &[PendingLane], m: usize) -> Result<usize> {
    if pending.len() != m {
        return Err(Error::Simulator(format!(
            "trigger misalignment: {} of {m} lanes arrived in the same cycle",
            pending.len()
        )));
    }
    let row = pending[0].row;
    if pending.iter().any(|p| p.row != row) {
        return Err(Error::Simulator(
            "trigger misalignment: lanes of one group carry different rows".into(),
        ));
    }
    let mut seen = vec![false; m];
    for p in pending {
        if p.lane_in_group >= m || seen[p.lane_in_group] {
            return Err(Error::Simulator(
                "trigger misalignment: duplicate lane within a group".into(),
            ));
        }
        seen[p.lane_in_group] = true;
    }
    Ok(row)
}

fn accumulate_routed(
    sim: &mut Sim,
    z: &mut DenseMatrix<f32>,
    perm: &[usize],
    group: usize,
    row: usize,
    cycle: u64,
    pending: &[PendingLane],
) -> Result<()> {
    let m = perm.len();
    let mut lanes = vec![0.0f32; m];
    for p in pending {
        lanes[p.lane_in_group] = p.value;
    }
    let routed = apply_permutation(perm, &lanes)?;
    let displaced = perm.iter().enumerate().filter(|&(i, &p)| i != p).count();
    sim.trace
        .push(Phase::Key, SimEvent::FabricApply { cycle, group, row, displaced });
    for (s, v) in routed.into_iter().enumerate() {
        let col = group * m + s;
        z.set(row, col, z.get(row, col) + v);
    }
    Ok(())
}

/// Reference result for tests: the software path the simulator must match.
pub fn software_reference(
    locked: &LockedFfn<f32>,
    bits: &KeyBits,
    x: &DenseMatrix<f32>,
) -> Result<DenseMatrix<f32>> {
    crate::locker::run_locked_ffn(locked, bits, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{key_material, random_group_local_permutation};
    use crate::linalg::{is_permutation, matmul};
    use crate::locker::{fold_weights, LockSpec};
    use crate::model::{Activation, FfnBlock};
    use crate::rng::{Seed, SplitMix64};

    fn cfg(rows: usize, cols: usize, dataflow: Dataflow, m: usize) -> SystolicConfig {
        SystolicConfig { rows, cols, dataflow, m }
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix<f32> {
        let mut rng = SplitMix64::new(Seed(seed));
        DenseMatrix::from_fn(rows, cols, |_, _| rng.next_gaussian() as f32)
    }

    #[test]
    fn identity_times_matrix_is_exact() {
        let a = DenseMatrix::<f32>::identity(4);
        let b = random_matrix(4, 6, 1);
        for df in [Dataflow::WeightStationary, Dataflow::OutputStationary] {
            let (c, trace) = systolic_matmul(&a, &b, &cfg(2, 3, df, 1)).unwrap();
            assert_eq!(c, b);
            assert_eq!(trace.macs, 4 * 4 * 6);
            assert_eq!(trace.fabric_applications, 0);
        }
    }

    #[test]
    fn both_dataflows_match_the_software_matmul() {
        let a = random_matrix(8, 8, 2);
        let b = random_matrix(8, 8, 3);
        let oracle = matmul(&a, &b).unwrap();
        for df in [Dataflow::WeightStationary, Dataflow::OutputStationary] {
            let (c, _) = systolic_matmul(&a, &b, &cfg(4, 4, df, 2)).unwrap();
            assert!(c.max_rel_diff(&oracle).unwrap() < 1e-4);
        }
    }

    #[test]
    fn ragged_shapes_match_the_software_matmul() {
        // Shapes that do not divide the array exercise partial tiles.
        let cases = [(5usize, 7usize, 9usize), (3, 10, 4), (1, 1, 1), (6, 2, 11)];
        for (i, &(m, k, n)) in cases.iter().enumerate() {
            let a = random_matrix(m, k, 10 + i as u64);
            let b = random_matrix(k, n, 20 + i as u64);
            let oracle = matmul(&a, &b).unwrap();
            for df in [Dataflow::WeightStationary, Dataflow::OutputStationary] {
                let (c, _) = systolic_matmul(&a, &b, &cfg(4, 4, df, 1)).unwrap();
                assert!(c.max_rel_diff(&oracle).unwrap() < 1e-4, "{m}x{k}x{n} {df:?}");
            }
        }
    }

    #[test]
    fn degenerate_single_pe_cycle_count() {
        let a = random_matrix(3, 5, 4);
        let b = random_matrix(5, 2, 5);
        for df in [Dataflow::WeightStationary, Dataflow::OutputStationary] {
            let (c, trace) = systolic_matmul(&a, &b, &cfg(1, 1, df, 1)).unwrap();
            let oracle = matmul(&a, &b).unwrap();
            assert!(c.max_rel_diff(&oracle).unwrap() < 1e-4);
            assert_eq!(trace.cycles, 3 * 5 * 2, "{df:?}");
        }
    }

    #[test]
    fn closed_form_cycles_for_tiled_square_case() {
        let a = random_matrix(8, 8, 6);
        let b = random_matrix(8, 8, 7);
        // 2 reduction chunks x 2 column tiles, each 8 + 4 + 4 - 2 = 14.
        let (_, trace) =
            systolic_matmul(&a, &b, &cfg(4, 4, Dataflow::WeightStationary, 1)).unwrap();
        assert_eq!(trace.cycles, 4 * 14);
        // 2 row tiles x 2 column tiles, each 8 + 4 + 4 - 2 = 14.
        let (_, trace) =
            systolic_matmul(&a, &b, &cfg(4, 4, Dataflow::OutputStationary, 1)).unwrap();
        assert_eq!(trace.cycles, 4 * 14);
    }

    #[test]
    fn trace_text_and_summary_are_consistent() {
        let a = random_matrix(2, 2, 8);
        let b = random_matrix(2, 2, 9);
        let (_, trace) = systolic_matmul(&a, &b, &cfg(2, 2, Dataflow::WeightStationary, 1)).unwrap();
        let text = trace.text_lines();
        assert_eq!(text.lines().count(), trace.events.len());
        assert!(text.contains("\tmac\t"));
        assert!(text.contains("\tdrain\t"));
        let summary = trace.summary();
        assert_eq!(summary.macs, 8);
        assert_eq!(summary.cycles, trace.cycles);
        assert!(!summary.truncated);
        let json = serde_json::to_string(&summary).unwrap();
        assert!(json.contains("\"fabric_applications\":0"));
    }

    #[test]
    fn trigger_schedule_matches_pinned_examples() {
        let ws = cfg(4, 8, Dataflow::WeightStationary, 4);
        assert_eq!(trigger_schedule(&ws).unwrap(), vec![3, 2, 1, 0, 3, 2, 1, 0]);
        let os = cfg(4, 8, Dataflow::OutputStationary, 4);
        assert_eq!(trigger_schedule(&os).unwrap(), vec![0; 8]);
        let bad = cfg(4, 8, Dataflow::WeightStationary, 3);
        assert!(trigger_schedule(&bad).is_err());
    }

    fn locked_fixture(seed: u64, d_model: usize, d_ff: usize, n: usize, m: usize) -> (FfnBlock<f32>, LockedFfn<f32>, KeyBits) {
        let mut rng = SplitMix64::new(Seed(seed));
        let mut gauss =
            |rows: usize, cols: usize| DenseMatrix::from_fn(rows, cols, |_, _| rng.next_gaussian() as f32);
        let ffn = FfnBlock::standard(gauss(d_model, d_ff), gauss(d_ff, d_model), Activation::Relu)
            .unwrap();
        let mut neurons: Vec<usize> = (0..d_ff).collect();
        let mut shuffle_rng = SplitMix64::new(Seed(seed ^ 0xAA));
        shuffle_rng.shuffle(&mut neurons);
        neurons.truncate(n);
        let spec = LockSpec {
            protected_block: 0,
            protected_neurons: neurons,
            group_size: m,
            hadamard_seed: Seed(seed ^ 0xBB),
            key_perm: random_group_local_permutation(n, m, Seed(seed ^ 0xCC)).unwrap(),
            tau: 5.0,
        };
        let (folded, rotation) = fold_weights(&ffn, &spec, true).unwrap();
        let key = key_material(&spec.key_perm, m).unwrap();
        (ffn, LockedFfn { ffn: folded, m, rotation }, key.key_bits())
    }

    #[test]
    fn locked_layer_matches_software_path_both_dataflows() {
        let (original, locked, bits) = locked_fixture(11, 6, 16, 8, 4);
        let x = random_matrix(5, 6, 12);
        let oracle = software_reference(&locked, &bits, &x).unwrap();
        let unlocked = original.forward(&x).unwrap();
        for df in [Dataflow::WeightStationary, Dataflow::OutputStationary] {
            let (y, trace) = locked_layer_sim(&locked, &bits, &x, &cfg(8, 8, df, 4), None).unwrap();
            assert!(y.max_rel_diff(&oracle).unwrap() < 1e-4, "{df:?} vs software");
            assert!(y.max_rel_diff(&unlocked).unwrap() < 1e-4, "{df:?} vs original FFN");
            assert_eq!(trace.fabric_applications_off_key, 0);
            assert!(trace.fabric_applications > 0);
        }
    }

    #[test]
    fn gated_layer_matches_software_path() {
        let mut rng = SplitMix64::new(Seed(31));
        let mut gauss =
            |rows: usize, cols: usize| DenseMatrix::from_fn(rows, cols, |_, _| rng.next_gaussian() as f32);
        let ffn = FfnBlock::gated(gauss(6, 16), gauss(6, 16), gauss(16, 6), Activation::Silu)
            .unwrap();
        let spec = LockSpec {
            protected_block: 0,
            protected_neurons: (0..8).collect(),
            group_size: 4,
            hadamard_seed: Seed(32),
            key_perm: random_group_local_permutation(8, 4, Seed(33)).unwrap(),
            tau: 5.0,
        };
        let (folded, rotation) = fold_weights(&ffn, &spec, true).unwrap();
        let locked = LockedFfn { ffn: folded, m: 4, rotation };
        let bits = key_material(&spec.key_perm, 4).unwrap().key_bits();
        let x = random_matrix(4, 6, 34);
        let oracle = ffn.forward(&x).unwrap();
        for df in [Dataflow::WeightStationary, Dataflow::OutputStationary] {
            let (y, _) = locked_layer_sim(&locked, &bits, &x, &cfg(8, 8, df, 4), None).unwrap();
            assert!(y.max_rel_diff(&oracle).unwrap() < 1e-4, "{df:?}");
        }
    }

    #[test]
    fn all_zero_key_with_identity_lock_passes_through() {
        let (original, _, _) = locked_fixture(41, 6, 16, 8, 4);
        let spec = LockSpec {
            protected_block: 0,
            protected_neurons: (0..8).collect(),
            group_size: 4,
            hadamard_seed: Seed(42),
            key_perm: (0..8).collect(),
            tau: 5.0,
        };
        let (folded, rotation) = fold_weights(&original, &spec, true).unwrap();
        let locked = LockedFfn { ffn: folded, m: 4, rotation };
        let zero = KeyBits { n: 8, m: 4, bits: vec![false; control_bits_for(8, 4)] };
        // The all-zero pattern routes identity, matching the identity secret.
        assert!(is_permutation(&zero.permutation().unwrap()));
        assert_eq!(zero.permutation().unwrap(), (0..8).collect::<Vec<_>>());
        let x = random_matrix(3, 6, 43);
        let (y, trace) =
            locked_layer_sim(&locked, &zero, &x, &cfg(8, 8, Dataflow::WeightStationary, 4), None)
                .unwrap();
        let oracle = original.forward(&x).unwrap();
        assert!(y.max_rel_diff(&oracle).unwrap() < 1e-4);
        // Fabric events present, all with identity routing.
        let mut applies = 0;
        for (phase, e) in &trace.events {
            if let SimEvent::FabricApply { displaced, .. } = e {
                assert_eq!(*phase, Phase::Key);
                assert_eq!(*displaced, 0);
                applies += 1;
            }
        }
        assert!(applies > 0);
    }

    #[test]
    fn round_counts_do_not_change_the_result() {
        let (_, locked, bits) = locked_fixture(51, 6, 16, 8, 4);
        let x = random_matrix(5, 6, 52);
        for df in [Dataflow::WeightStationary, Dataflow::OutputStationary] {
            let base = locked_layer_sim(&locked, &bits, &x, &cfg(16, 8, df, 4), Some(1))
                .unwrap()
                .0;
            for rounds in [2usize, 4] {
                let (y, _) =
                    locked_layer_sim(&locked, &bits, &x, &cfg(16, 8, df, 4), Some(rounds)).unwrap();
                assert!(y.max_rel_diff(&base).unwrap() < 1e-4, "{df:?} rounds={rounds}");
            }
        }
    }

    #[test]
    fn ws_multi_round_applies_fabric_each_round() {
        let (_, locked, bits) = locked_fixture(61, 6, 16, 8, 4);
        let x = random_matrix(2, 6, 62);
        let count = |rounds| {
            let (_, trace) = locked_layer_sim(
                &locked,
                &bits,
                &x,
                &cfg(16, 8, Dataflow::WeightStationary, 4),
                Some(rounds),
            )
            .unwrap();
            trace.fabric_applications
        };
        // Each reduction round drains a partial through the fabric.
        assert_eq!(count(2), 2 * count(1));
        assert_eq!(count(4), 4 * count(1));
        // Output-stationary drains once regardless of rounds.
        let os_count = |rounds| {
            let (_, trace) = locked_layer_sim(
                &locked,
                &bits,
                &x,
                &cfg(16, 8, Dataflow::OutputStationary, 4),
                Some(rounds),
            )
            .unwrap();
            trace.fabric_applications
        };
        assert_eq!(os_count(4), os_count(1));
    }

    #[test]
    fn trigger_arms_exactly_once_and_only_in_key_phase() {
        let (_, locked, bits) = locked_fixture(71, 6, 16, 8, 4);
        let x = random_matrix(3, 6, 72);
        let (_, trace) =
            locked_layer_sim(&locked, &bits, &x, &cfg(8, 8, Dataflow::WeightStationary, 4), None)
                .unwrap();
        let arms: Vec<_> = trace
            .events
            .iter()
            .filter(|(_, e)| matches!(e, SimEvent::TriggerArm { .. }))
            .collect();
        let disarms: Vec<_> = trace
            .events
            .iter()
            .filter(|(_, e)| matches!(e, SimEvent::TriggerDisarm { .. }))
            .collect();
        assert_eq!(arms.len(), 1);
        assert_eq!(disarms.len(), 1);
        assert_eq!(trace.fabric_applications_off_key, 0);
        for (phase, e) in &trace.events {
            if matches!(e, SimEvent::FabricApply { .. }) {
                assert_eq!(*phase, Phase::Key);
            }
        }
    }

    #[test]
    fn wrong_shapes_and_keys_are_rejected() {
        let (_, locked, bits) = locked_fixture(81, 6, 16, 8, 4);
        let x = random_matrix(3, 6, 82);
        // Group size mismatch with the lock.
        let bad_cfg = cfg(8, 8, Dataflow::WeightStationary, 2);
        assert!(matches!(
            locked_layer_sim(&locked, &bits, &x, &bad_cfg, None),
            Err(Error::Input(_))
        ));
        // Key sized for a different lock.
        let other = key_material(&random_group_local_permutation(16, 4, Seed(1)).unwrap(), 4)
            .unwrap()
            .key_bits();
        assert!(matches!(
            locked_layer_sim(&locked, &other, &x, &cfg(8, 8, Dataflow::WeightStationary, 4), None),
            Err(Error::Input(_))
        ));
        // Input width mismatch.
        let bad_x = random_matrix(3, 5, 83);
        assert!(matches!(
            locked_layer_sim(&locked, &bits, &bad_x, &cfg(8, 8, Dataflow::WeightStationary, 4), None),
            Err(Error::Shape(_))
        ));
        // Infeasible round counts for weight-stationary.
        assert!(locked_layer_sim(
            &locked,
            &bits,
            &x,
            &cfg(4, 8, Dataflow::WeightStationary, 4),
            Some(1)
        )
        .is_err());
        assert!(locked_layer_sim(
            &locked,
            &bits,
            &x,
            &cfg(16, 8, Dataflow::WeightStationary, 4),
            Some(17)
        )
        .is_err());
        // Misconfigured array.
        assert!(systolic_matmul(
            &random_matrix(2, 2, 1),
            &random_matrix(2, 2, 2),
            &cfg(0, 4, Dataflow::WeightStationary, 1)
        )
        .is_err());
        assert!(systolic_matmul(
            &random_matrix(2, 3, 1),
            &random_matrix(2, 2, 2),
            &cfg(4, 4, Dataflow::WeightStationary, 1)
        )
        .is_err());
    }

    #[test]
    fn unprotected_lanes_bypass_the_fabric() {
        // n = 8 protected lanes of a 16-wide FFN: groups 2 and 3 are
        // uncovered, so fabric events only name groups 0 and 1.
        let (_, locked, bits) = locked_fixture(91, 6, 16, 8, 4);
        let x = random_matrix(3, 6, 92);
        let (_, trace) =
            locked_layer_sim(&locked, &bits, &x, &cfg(8, 8, Dataflow::WeightStationary, 4), None)
                .unwrap();
        for (_, e) in &trace.events {
            if let SimEvent::FabricApply { group, .. } = e {
                assert!(*group < 2, "fabric event on uncovered group {group}");
            }
        }
    }

    #[test]
    fn event_cap_truncates_but_counts_exactly() {
        // 40x40x40 on a 4x4 array: 64000 MACs exceeds the cap.
        let a = random_matrix(40, 40, 101);
        let b = random_matrix(40, 40, 102);
        let (c, trace) =
            systolic_matmul(&a, &b, &cfg(4, 4, Dataflow::OutputStationary, 1)).unwrap();
        assert!(trace.truncated);
        assert_eq!(trace.macs, 40 * 40 * 40);
        assert!(trace.events.len() <= MAX_TRACE_EVENTS);
        let oracle = matmul(&a, &b).unwrap();
        assert!(c.max_rel_diff(&oracle).unwrap() < 1e-4);
    }
}
