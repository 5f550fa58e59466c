//! The cycle engine.
//!
//! Work is cut into steps: a super tile (one tile per TEU, tiles placed along
//! the mesh-assigned indices) times one temporal tile. Inside a step every
//! TEU runs the same loop, phase -> lane group -> temporal point, issuing one
//! 32-lane MAC per cycle when its operands are available. Lanes outside the
//! TEU's own range are masked.
//!
//! Per cycle, in order: DRAM service, DRAM landings into the GLB, GLB
//! arbitration (deliveries into TEU buffers and PSum drains out of them),
//! TEU issue, prefetch issue.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::rc::Rc;

use crate::bfn::{verify_routing, BankAccess, RouteCache};
use crate::schedule::{MeshAxis, VmPlan};
use crate::tensor::{InTensor, OutTensor, Tensor};
use crate::workload::{advance, Workload};

use super::config::ArchConfig;
use super::memory::{Dram, Txn};
use super::result::SimResult;
use super::SimError;

const LANES: usize = 32;
const MAXR: usize = 8;

/// Mesh directions; data moving `East` goes to the next column.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dir {
    North = 0,
    South = 1,
    East = 2,
    West = 3,
}

#[derive(Debug, Default)]
struct Fifo {
    entries: VecDeque<(u64, [i16; LANES])>,
    start_len: usize,
}

/// A constructed mesh: TEU count and the directional FIFO links.
#[derive(Debug)]
pub struct Machine {
    cfg: ArchConfig,
    fifos: Vec<Option<Fifo>>,
    heatmap: Option<Vec<[u64; LANES]>>,
}

#[derive(Default)]
pub struct RunOptions {
    /// Compute values; when false only timing and traffic are modeled.
    pub functional: bool,
    /// CSV sink for `cycle,teu,event,bytes` records.
    pub trace: Option<Box<dyn Write>>,
    /// Count bank hits per TEU and operand.
    pub heatmap: bool,
    /// Cycles without any progress before the run is declared deadlocked.
    pub deadlock_cycles: Option<u64>,
}

impl RunOptions {
    pub fn functional() -> Self {
        RunOptions {
            functional: true,
            ..Default::default()
        }
    }

    pub fn timing() -> Self {
        RunOptions::default()
    }
}

pub fn build_machine(cfg: &ArchConfig) -> Result<Machine, super::ConfigError> {
    cfg.validate()?;
    let (rows, cols) = (cfg.mesh_rows, cfg.mesh_cols);
    let mut fifos = Vec::with_capacity(rows * cols * 4);
    for r in 0..rows {
        for c in 0..cols {
            for d in [Dir::North, Dir::South, Dir::East, Dir::West] {
                let exists = match d {
                    Dir::North => r > 0,
                    Dir::South => r + 1 < rows,
                    Dir::East => c + 1 < cols,
                    Dir::West => c > 0,
                };
                fifos.push(exists.then(Fifo::default));
            }
        }
    }
    Ok(Machine {
        cfg: cfg.clone(),
        fifos,
        heatmap: None,
    })
}

impl Machine {
    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn teus(&self) -> usize {
        self.cfg.teus()
    }

    pub fn n_pe(&self) -> usize {
        self.cfg.n_pe()
    }

    /// Directional FIFO links (two per neighboring TEU pair).
    pub fn links(&self) -> usize {
        self.fifos.iter().filter(|f| f.is_some()).count()
    }

    /// Bank hit counts from the last run, indexed `teu * 2 + operand`.
    pub fn heatmap(&self) -> Option<&[[u64; LANES]]> {
        self.heatmap.as_deref()
    }

    fn fifo_index(&self, r: usize, c: usize, d: Dir) -> usize {
        (r * self.cfg.mesh_cols + c) * 4 + d as usize
    }
}

/// Shape shared by every TEU during one step.
#[derive(Clone, Debug)]
struct Step {
    /// Global origin of TEU (0,0)'s tile.
    origin: Vec<usize>,
    /// Common clipped tile extents.
    clip: Vec<usize>,
    groups: Vec<usize>,
    /// Non-empty phase chunks as `(phase, lo, hi)` on the split index.
    phases: Vec<(usize, usize, usize)>,
    first_of_super: bool,
    last_of_super: bool,
    /// PSum half used by this super tile (always 0 without ping-pong).
    bank: usize,
}

/// Inclusive global box per tensor dim.
type GBox = (Vec<i64>, Vec<i64>);

#[derive(Debug)]
struct Fetch {
    step: usize,
    need: u64,
    fills: [Option<Vec<GBox>>; 2],
}

#[derive(Debug)]
struct Drain {
    group: usize,
    base: Vec<usize>,
    mask: u32,
    bytes: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Local,
    Own,
    Recv(usize),
}

struct Teu {
    r: usize,
    c: usize,
    step: usize,
    started: bool,
    phase_i: usize,
    gidx: Vec<usize>,
    group: usize,
    /// PSum slot group: `bank * groups_max + group`.
    slot: usize,
    tpt: Vec<usize>,
    at_start: bool,
    origin: Vec<usize>,
    valid: Vec<usize>,
    roles: [Role; 2],
    pushes: [[Option<usize>; 2]; 2],
    mac_mask: u32,
    read_mask: [u32; 2],
    pattern: [usize; 2],
    gcoord: [[i64; MAXR]; 2],
    bufs: [Vec<i16>; 2],
    psum: Vec<i32>,
    pending_drain: Vec<bool>,
    drains: VecDeque<Drain>,
    fetches: VecDeque<Fetch>,
    need_total: u64,
    arrived: u64,
    delivered: u64,
    last_key: [Vec<GBox>; 2],
}

enum Outcome {
    Issued { macs: u32, words: u32 },
    Stall(StallCause),
    Done,
}

#[derive(Clone, Copy)]
enum StallCause {
    Dram,
    Glb,
    FifoEmpty,
    FifoFull,
}

impl StallCause {
    fn name(self) -> &'static str {
        match self {
            StallCause::Dram => "stall_dram",
            StallCause::Glb => "stall_glb",
            StallCause::FifoEmpty => "stall_fifo_empty",
            StallCause::FifoFull => "stall_fifo_full",
        }
    }
}

struct Engine<'a> {
    m: &'a mut Machine,
    w: &'a Workload,
    plan: &'a VmPlan,
    inputs: &'a [InTensor],
    functional: bool,
    steps: Vec<Step>,
    groups_max: usize,
    lane_delta: Vec<[usize; MAXR]>,
    lane_off: [Vec<i64>; 2],
    p: usize,
    split: Option<usize>,
    teus: Vec<Teu>,
    dram: Dram,
    glb_rr: usize,
    glb_out_bytes: u64,
    issued_upto: Option<usize>,
    patterns: HashMap<(usize, u32), usize>,
    routes: RouteCache,
    output: Option<OutTensor>,
    out_strides: Vec<usize>,
    res: SimResult,
    trace: Option<csv::Writer<Box<dyn Write>>>,
    heat: Option<Vec<[u64; LANES]>>,
    now: u64,
}

pub fn run(
    m: &mut Machine,
    w: &Workload,
    plan: &VmPlan,
    inputs: &[InTensor],
    mut opts: RunOptions,
) -> Result<SimResult, SimError> {
    w.validate()?;
    if opts.functional {
        w.check_inputs(inputs)?;
    }
    check_plan(m, w, plan)?;
    let deadlock = opts
        .deadlock_cycles
        .unwrap_or(10_000 + 4 * m.cfg.dram_latency_cycles);
    for f in m.fifos.iter_mut().flatten() {
        f.entries.clear();
        f.start_len = 0;
    }
    let trace = opts.trace.take().map(|sink| {
        let mut wtr = csv::Writer::from_writer(sink);
        wtr.write_record(["cycle", "teu", "event", "bytes"])
            .expect("trace header");
        wtr
    });
    let heat = opts.heatmap.then(|| vec![[0u64; LANES]; m.teus() * 2]);
    let mut e = Engine::new(m, w, plan, inputs, opts.functional, trace, heat);
    let mut last_progress = 0u64;
    loop {
        let progressed = e.cycle()?;
        if progressed {
            last_progress = e.now;
        }
        e.now += 1;
        if e.finished() {
            break;
        }
        if e.now - last_progress > deadlock {
            return Err(SimError::Deadlock { cycle: e.now });
        }
    }
    Ok(e.finish())
}

fn check_plan(m: &Machine, w: &Workload, plan: &VmPlan) -> Result<(), SimError> {
    let cfg = &m.cfg;
    let prog = &plan.program;
    let mismatch = |s: String| Err(SimError::PlanMismatch(s));
    if prog.tile != plan.scheme.extents || prog.tile.len() != w.rank() {
        return mismatch("program tile differs from the tile scheme".into());
    }
    if prog.lanes.lanes() != LANES {
        return mismatch(format!("program has {} lanes", prog.lanes.lanes()));
    }
    if (plan.sharing.mesh_rows, plan.sharing.mesh_cols) != (cfg.mesh_rows, cfg.mesh_cols) {
        return mismatch("sharing plan built for another mesh".into());
    }
    if prog.psum_slots() as u64 > cfg.psum_words() {
        return mismatch(format!(
            "{} PSum slots exceed {} words",
            prog.psum_slots(),
            cfg.psum_words()
        ));
    }
    for lay in &prog.layouts {
        if lay.size_words() > cfg.operand_half_words() {
            return mismatch(format!(
                "layout of {} words exceeds the {}-word buffer half",
                lay.size_words(),
                cfg.operand_half_words()
            ));
        }
    }
    for op in &w.operands {
        if op.shape.len() > MAXR
            || op.map.matrix.iter().flatten().any(|&c| c < 0)
            || op.map.offset.iter().any(|&c| c < 0)
        {
            return Err(SimError::Unsupported(format!(
                "operand {} needs a non-negative index map of rank <= {MAXR}",
                op.name
            )));
        }
    }
    if w.parallel_count > MAXR {
        return Err(SimError::Unsupported("too many parallel indices".into()));
    }
    Ok(())
}

fn build_steps(w: &Workload, plan: &VmPlan, banks: usize) -> Vec<Step> {
    let p = w.parallel_count;
    let ext = w.extents();
    let tile = &plan.scheme.extents;
    let (r, c) = (plan.sharing.mesh_rows, plan.sharing.mesh_cols);
    let a = plan.sharing.assignment;
    let mesh_len = |d: usize| {
        let mut l = 1;
        if d == a.rows {
            l *= r;
        }
        if d == a.cols {
            l *= c;
        }
        l
    };
    let n_super: Vec<usize> = (0..p)
        .map(|d| ext[d].div_ceil(tile[d] * mesh_len(d)))
        .collect();
    let n_temp: Vec<usize> = (p..w.rank()).map(|d| ext[d].div_ceil(tile[d])).collect();
    let phases = plan.sharing.phases;
    let mut steps = Vec::new();
    let mut sidx = vec![0usize; p];
    let mut n = 0;
    loop {
        let mut tidx = vec![0usize; w.rank() - p];
        let mut first = true;
        loop {
            let mut origin = vec![0usize; w.rank()];
            let mut clip = vec![0usize; w.rank()];
            for d in 0..p {
                origin[d] = sidx[d] * tile[d] * mesh_len(d);
                clip[d] = tile[d].min(ext[d] - origin[d]);
            }
            for (k, d) in (p..w.rank()).enumerate() {
                origin[d] = tidx[k] * tile[d];
                clip[d] = tile[d].min(ext[d] - origin[d]);
            }
            let groups = (0..p)
                .map(|d| clip[d].div_ceil(plan.program.lanes.factor(d)))
                .collect();
            let chunks = match plan.sharing.split_index {
                Some(s) if phases > 1 => (0..phases)
                    .map(|ph| {
                        let (lo, hi) = plan.sharing.phase_chunk(clip[s], ph);
                        (ph, lo, hi)
                    })
                    .filter(|&(_, lo, hi)| hi > lo)
                    .collect(),
                _ => vec![(0, 0, usize::MAX)],
            };
            let more = advance(&mut tidx, &n_temp);
            steps.push(Step {
                origin,
                clip,
                groups,
                phases: chunks,
                first_of_super: first,
                last_of_super: !more,
                bank: n % banks,
            });
            first = false;
            if !more {
                break;
            }
        }
        n += 1;
        if !advance(&mut sidx, &n_super) {
            break;
        }
    }
    steps
}

impl<'a> Engine<'a> {
    fn new(
        m: &'a mut Machine,
        w: &'a Workload,
        plan: &'a VmPlan,
        inputs: &'a [InTensor],
        functional: bool,
        trace: Option<csv::Writer<Box<dyn Write>>>,
        heat: Option<Vec<[u64; LANES]>>,
    ) -> Self {
        let cfg = m.cfg.clone();
        let p = w.parallel_count;
        let prog = &plan.program;
        let lane_delta = (0..LANES)
            .map(|n| {
                let mut d = [0usize; MAXR];
                for (i, delta) in prog.lanes.decode(n) {
                    d[i] = delta;
                }
                d
            })
            .collect();
        let groups_max = prog.group_count();
        let banks = psum_banks(prog.psum_slots() as u64, cfg.psum_words());
        let teus = (0..cfg.teus())
            .map(|t| Teu {
                r: t / cfg.mesh_cols,
                c: t % cfg.mesh_cols,
                step: 0,
                started: false,
                phase_i: 0,
                gidx: vec![0; p],
                group: 0,
                slot: 0,
                tpt: vec![0; w.rank() - p],
                at_start: true,
                origin: vec![0; w.rank()],
                valid: vec![0; p],
                roles: [Role::Local; 2],
                pushes: [[None; 2]; 2],
                mac_mask: 0,
                read_mask: [0; 2],
                pattern: [0; 2],
                gcoord: [[0; MAXR]; 2],
                bufs: if functional {
                    [
                        vec![0; prog.layouts[0].size_words() as usize],
                        vec![0; prog.layouts[1].size_words() as usize],
                    ]
                } else {
                    [Vec::new(), Vec::new()]
                },
                psum: if functional {
                    vec![0; banks * groups_max * LANES]
                } else {
                    Vec::new()
                },
                pending_drain: vec![false; banks * groups_max],
                drains: VecDeque::new(),
                fetches: VecDeque::new(),
                need_total: 0,
                arrived: 0,
                delivered: 0,
                last_key: [Vec::new(), Vec::new()],
            })
            .collect();
        let res = SimResult::new("vectormesh", &w.name, cfg.n_pe(), cfg.clock_hz);
        let mut e = Engine {
            dram: Dram::new(cfg.dram_bytes_per_cycle(), cfg.dram_latency_cycles),
            m,
            w,
            plan,
            inputs,
            functional,
            steps: build_steps(w, plan, banks),
            groups_max,
            lane_delta,
            lane_off: [prog.offsets[0].clone(), prog.offsets[1].clone()],
            p,
            split: plan.sharing.split_index.filter(|_| plan.sharing.phases > 1),
            teus,
            glb_rr: 0,
            glb_out_bytes: 0,
            issued_upto: None,
            patterns: HashMap::new(),
            routes: RouteCache::default(),
            output: functional.then(|| Tensor::zeros(&w.output_shape)),
            out_strides: crate::tensor::row_major_strides(&w.output_shape),
            res,
            trace,
            heat,
            now: 0,
        };
        e.issue_prefetch(0);
        if e.steps.len() > 1 {
            e.issue_prefetch(1);
        }
        for t in 0..e.teus.len() {
            e.enter_step(t);
        }
        e
    }

    fn finished(&self) -> bool {
        self.teus
            .iter()
            .all(|t| t.step == self.steps.len() && t.drains.is_empty())
            && self.dram.idle()
    }

    fn finish(mut self) -> SimResult {
        self.res.cycles = self.now;
        self.res.dram_read_bytes = self.dram.read_bytes;
        self.res.dram_write_bytes = self.dram.write_bytes;
        self.res.glb_fill_bytes = self.dram.read_bytes;
        self.res.output = self.output.take();
        if let Some(t) = self.trace.as_mut() {
            t.flush().ok();
        }
        self.m.heatmap = self.heat.take();
        self.res
    }

    /// Tile origin of TEU `t` in `step`.
    fn teu_origin(&self, t: usize, step: &Step) -> Vec<usize> {
        let a = self.plan.sharing.assignment;
        let (r, c) = (self.teus[t].r, self.teus[t].c);
        let tile = &self.plan.scheme.extents;
        let mut o = step.origin.clone();
        if a.rows == a.cols {
            o[a.rows] += (r * self.m.cfg.mesh_cols + c) * tile[a.rows];
        } else {
            o[a.rows] += r * tile[a.rows];
            o[a.cols] += c * tile[a.cols];
        }
        o
    }

    fn teu_valid(&self, origin: &[usize], step: &Step) -> Vec<usize> {
        let ext = self.w.extents();
        (0..self.p)
            .map(|d| step.clip[d].min(ext[d].saturating_sub(origin[d])))
            .collect()
    }

    fn role_of(&self, t: usize, x: usize, phase: usize) -> (Role, [Option<usize>; 2]) {
        let sp = &self.plan.sharing;
        let (r, c) = (self.teus[t].r, self.teus[t].c);
        match sp.operands[x].forward {
            None => (Role::Local, [None, None]),
            Some(MeshAxis::Cols) => {
                let o = sp.owner_col(phase);
                let east =
                    (c + 1 < self.m.cfg.mesh_cols).then(|| self.m.fifo_index(r, c, Dir::East));
                let west = (c > 0).then(|| self.m.fifo_index(r, c, Dir::West));
                if c == o {
                    (Role::Own, [east, west])
                } else if c > o {
                    (
                        Role::Recv(self.m.fifo_index(r, c - 1, Dir::East)),
                        [east, None],
                    )
                } else {
                    (
                        Role::Recv(self.m.fifo_index(r, c + 1, Dir::West)),
                        [west, None],
                    )
                }
            }
            Some(MeshAxis::Rows) => {
                let o = sp.owner_row(phase);
                let south =
                    (r + 1 < self.m.cfg.mesh_rows).then(|| self.m.fifo_index(r, c, Dir::South));
                let north = (r > 0).then(|| self.m.fifo_index(r, c, Dir::North));
                if r == o {
                    (Role::Own, [south, north])
                } else if r > o {
                    (
                        Role::Recv(self.m.fifo_index(r - 1, c, Dir::South)),
                        [south, None],
                    )
                } else {
                    (
                        Role::Recv(self.m.fifo_index(r + 1, c, Dir::North)),
                        [north, None],
                    )
                }
            }
        }
    }

    /// Boxes of operand `x` that TEU `t` must hold for `step`.
    fn operand_boxes(&self, t: usize, x: usize, step: &Step) -> Vec<GBox> {
        let w = self.w;
        let op = &w.operands[x];
        let origin = self.teu_origin(t, step);
        let valid = self.teu_valid(&origin, step);
        let mut ext: Vec<usize> = step.clip.clone();
        for d in 0..self.p {
            if !op.map.invariant_to(d) {
                ext[d] = valid[d];
            }
        }
        if ext
            .iter()
            .enumerate()
            .any(|(d, &e)| e == 0 && !op.map.invariant_to(d))
        {
            return Vec::new();
        }
        let base = op.map.apply(&origin);
        let chunk_box = |lo_s: usize, hi_s: usize| -> Option<GBox> {
            let mut lo = vec![0i64; op.shape.len()];
            let mut hi = vec![0i64; op.shape.len()];
            for (rr, row) in op.map.matrix.iter().enumerate() {
                let mut a = 0i64;
                let mut b = 0i64;
                for (d, &coef) in row.iter().enumerate() {
                    let (mn, mx) = if Some(d) == self.split {
                        (lo_s, hi_s - 1)
                    } else {
                        (0, ext[d].max(1) - 1)
                    };
                    a += coef * mn as i64;
                    b += coef * mx as i64;
                }
                lo[rr] = (base[rr] + a).max(0);
                hi[rr] = (base[rr] + b).min(op.shape[rr] as i64 - 1);
                if hi[rr] < lo[rr] {
                    return None;
                }
            }
            Some((lo, hi))
        };
        match self.plan.sharing.operands[x].forward {
            None => chunk_box(0, step.clip[self.split.unwrap_or(0)].max(1))
                .into_iter()
                .collect(),
            Some(axis) => {
                let (r, c) = (self.teus[t].r, self.teus[t].c);
                step.phases
                    .iter()
                    .filter(|&&(ph, _, _)| match axis {
                        MeshAxis::Cols => self.plan.sharing.owner_col(ph) == c,
                        MeshAxis::Rows => self.plan.sharing.owner_row(ph) == r,
                    })
                    .filter_map(|&(_, lo, hi)| chunk_box(lo, hi))
                    .collect()
            }
        }
    }

    fn issue_prefetch(&mut self, k: usize) {
        let step = self.steps[k].clone();
        let wb = self.m.cfg.word_bytes;
        let mut wanted: [Vec<(usize, Vec<GBox>)>; 2] = [Vec::new(), Vec::new()];
        for t in 0..self.teus.len() {
            let mut need = 0u64;
            let mut fills: [Option<Vec<GBox>>; 2] = [None, None];
            for (x, fill) in fills.iter_mut().enumerate() {
                let boxes = self.operand_boxes(t, x, &step);
                if boxes == self.teus[t].last_key[x] {
                    continue;
                }
                let words: u64 = boxes.iter().map(box_volume).sum();
                need += words * wb;
                if words > 0 {
                    wanted[x].push((t, boxes.clone()));
                }
                *fill = Some(boxes.clone());
                self.teus[t].last_key[x] = boxes;
            }
            let teu = &mut self.teus[t];
            teu.need_total += need;
            teu.fetches.push_back(Fetch {
                step: k,
                need: teu.need_total,
                fills,
            });
        }
        // One DRAM read per operand covering the union of the TEU boxes.
        for list in wanted {
            if list.is_empty() {
                continue;
            }
            let mut all: Vec<GBox> = list.iter().flat_map(|(_, b)| b.iter().cloned()).collect();
            all.sort();
            all.dedup();
            let bytes = union_volume(&all) * wb;
            let dests: Vec<(usize, u64)> = list
                .iter()
                .map(|(t, b)| (*t, b.iter().map(box_volume).sum::<u64>() * wb))
                .collect();
            self.dram.push(Txn::Read {
                bytes,
                dests: Rc::from(dests),
            });
        }
        self.issued_upto = Some(k);
    }

    /// Sets up TEU `t` for its current step (cursor at the start).
    fn enter_step(&mut self, t: usize) {
        let k = self.teus[t].step;
        if k >= self.steps.len() {
            return;
        }
        let step = self.steps[k].clone();
        let origin = self.teu_origin(t, &step);
        let valid = self.teu_valid(&origin, &step);
        let teu = &mut self.teus[t];
        teu.origin = origin;
        teu.valid = valid;
        teu.started = false;
        teu.phase_i = 0;
        self.enter_phase(t);
    }

    fn enter_phase(&mut self, t: usize) {
        let step = &self.steps[self.teus[t].step];
        let (ph, lo, _) = step.phases[self.teus[t].phase_i];
        let mut roles = [Role::Local; 2];
        let mut pushes = [[None; 2]; 2];
        for x in 0..2 {
            let (r, p) = self.role_of(t, x, ph);
            roles[x] = r;
            pushes[x] = p;
        }
        let split = self.split;
        let p = self.p;
        let teu = &mut self.teus[t];
        teu.roles = roles;
        teu.pushes = pushes;
        teu.gidx.iter_mut().for_each(|g| *g = 0);
        teu.group = 0;
        teu.tpt.iter_mut().for_each(|v| *v = 0);
        if let Some(s) = split {
            teu.tpt[s - p] = lo;
        }
        teu.at_start = true;
        self.enter_group(t);
    }

    fn enter_group(&mut self, t: usize) {
        let step = &self.steps[self.teus[t].step];
        let w = self.w;
        let p = self.p;
        let prog = &self.plan.program;
        let teu = &self.teus[t];
        let mut gorig = [0usize; MAXR];
        for d in 0..p {
            gorig[d] = teu.gidx[d] * prog.lanes.factor(d);
        }
        let mut mac = 0u32;
        let mut read = [0u32; 2];
        for (n, delta) in self.lane_delta.iter().enumerate() {
            let mut in_clip = true;
            let mut in_valid = [true; MAXR];
            for d in 0..p {
                let l = gorig[d] + delta[d];
                in_clip &= l < step.clip[d];
                in_valid[d] = l < teu.valid[d];
            }
            if !in_clip {
                continue;
            }
            if in_valid[..p].iter().all(|&v| v) {
                mac |= 1 << n;
            }
            for (x, rm) in read.iter_mut().enumerate() {
                let map = &w.operands[x].map;
                if (0..p).all(|d| map.invariant_to(d) || in_valid[d]) {
                    *rm |= 1 << n;
                }
            }
        }
        let mut gcoord = [[0i64; MAXR]; 2];
        for (x, gc) in gcoord.iter_mut().enumerate() {
            for (rr, row) in w.operands[x].map.matrix.iter().enumerate() {
                gc[rr] = (0..p).map(|d| row[d] * gorig[d] as i64).sum();
            }
        }
        let mut pattern = [0usize; 2];
        for x in 0..2 {
            let next = self.patterns.len();
            pattern[x] = *self.patterns.entry((x, read[x])).or_insert(next);
        }
        let gcount: usize = step.groups.iter().product();
        let teu = &mut self.teus[t];
        teu.group = flat_index(&teu.gidx, &step.groups);
        teu.slot = step.bank * self.groups_max + teu.group;
        debug_assert!(teu.group < gcount);
        teu.mac_mask = mac;
        teu.read_mask = read;
        teu.gcoord = gcoord;
        teu.pattern = pattern;
    }

    /// Advances the loop cursor of TEU `t` past the op just issued.
    fn advance_cursor(&mut self, t: usize) {
        let p = self.p;
        let split = self.split;
        let k = self.teus[t].step;
        let step = &self.steps[k];
        let (_, lo, hi) = step.phases[self.teus[t].phase_i];
        let teu = &mut self.teus[t];
        teu.at_start = false;
        // Temporal odometer with the split index confined to its chunk.
        let mut more = false;
        for q in (0..teu.tpt.len()).rev() {
            let d = p + q;
            let (start, end) = if Some(d) == split {
                (lo, hi)
            } else {
                (0, step.clip[d])
            };
            teu.tpt[q] += 1;
            if teu.tpt[q] < end {
                more = true;
                break;
            }
            teu.tpt[q] = start;
        }
        if more {
            return;
        }
        // Group finished.
        let last_phase = teu.phase_i + 1 == step.phases.len();
        if last_phase && step.last_of_super && teu.mac_mask != 0 {
            let mut base = vec![0usize; p];
            for (d, b) in base.iter_mut().enumerate() {
                *b = teu.origin[d] + teu.gidx[d] * self.plan.program.lanes.factor(d);
            }
            teu.pending_drain[teu.slot] = true;
            teu.drains.push_back(Drain {
                group: teu.slot,
                base,
                mask: teu.mac_mask,
                bytes: teu.mac_mask.count_ones() as u64 * self.m.cfg.psum_bytes,
            });
        }
        teu.at_start = true;
        if advance(&mut teu.gidx, &step.groups) {
            self.enter_group(t);
            return;
        }
        teu.phase_i += 1;
        if teu.phase_i < step.phases.len() {
            self.enter_phase(t);
            return;
        }
        teu.step += 1;
        let f = teu.fetches.pop_front();
        debug_assert_eq!(f.map(|f| f.step), Some(k));
        self.enter_step(t);
    }

    fn first_touch(&self, t: usize) -> bool {
        let teu = &self.teus[t];
        teu.phase_i == 0 && teu.at_start && self.steps[teu.step].first_of_super
    }

    fn try_issue(&mut self, t: usize) -> Result<Outcome, SimError> {
        let now = self.now;
        if self.teus[t].step >= self.steps.len() {
            return Ok(Outcome::Done);
        }
        if !self.teus[t].started {
            let k = self.teus[t].step;
            let teu = &self.teus[t];
            let Some(f) = teu.fetches.front().filter(|f| f.step == k) else {
                return Ok(Outcome::Stall(StallCause::Dram));
            };
            if teu.delivered < f.need {
                let cause = if teu.arrived >= f.need {
                    StallCause::Glb
                } else {
                    StallCause::Dram
                };
                return Ok(Outcome::Stall(cause));
            }
            if self.functional {
                self.fill(t);
            }
            self.teus[t].started = true;
        }
        let first = self.first_touch(t);
        let teu = &self.teus[t];
        if first && teu.pending_drain[teu.slot] {
            return Ok(Outcome::Stall(StallCause::Glb));
        }
        for x in 0..2 {
            if let Role::Recv(f) = teu.roles[x] {
                let fifo = self.m.fifos[f].as_ref().expect("link exists");
                if !fifo.entries.front().is_some_and(|&(c, _)| c < now) {
                    return Ok(Outcome::Stall(StallCause::FifoEmpty));
                }
            }
        }
        let depth = self.m.cfg.fifo_depth_entries;
        for x in 0..2 {
            for f in teu.pushes[x].iter().flatten() {
                if self.m.fifos[*f].as_ref().expect("link exists").start_len >= depth {
                    return Ok(Outcome::Stall(StallCause::FifoFull));
                }
            }
        }
        self.issue(t)
    }

    fn issue(&mut self, t: usize) -> Result<Outcome, SimError> {
        let now = self.now;
        let p = self.p;
        let w = self.w;
        let prog = &self.plan.program;
        let first = self.first_touch(t);
        let mut vals = [[0i16; LANES]; 2];
        let mut words = 0u32;
        for x in 0..2 {
            let teu = &self.teus[t];
            match teu.roles[x] {
                Role::Recv(f) => {
                    let (_, v) = self.m.fifos[f]
                        .as_mut()
                        .expect("link exists")
                        .entries
                        .pop_front()
                        .expect("checked non-empty");
                    vals[x] = v;
                }
                Role::Local | Role::Own => {
                    let mask = teu.read_mask[x];
                    if mask == 0 {
                        continue;
                    }
                    let map = &w.operands[x].map;
                    let mut coord = [0usize; MAXR];
                    let rank = map.matrix.len();
                    for (rr, row) in map.matrix.iter().enumerate() {
                        let mut v = teu.gcoord[x][rr];
                        for (q, &tp) in teu.tpt.iter().enumerate() {
                            v += row[p + q] * tp as i64;
                        }
                        coord[rr] = v as usize;
                    }
                    let base = prog.layouts[x].address(&coord[..rank]) as i64;
                    let residue = (base & (LANES as i64 - 1)) as u32;
                    let pat = teu.pattern[x];
                    self.res.bank_checks += 1;
                    if !self.routes.is_verified(pat, residue) {
                        let addrs = (0..LANES)
                            .map(|n| {
                                (mask >> n & 1 == 1).then(|| (base + self.lane_off[x][n]) as u32)
                            })
                            .collect();
                        let access = BankAccess::new(addrs, 5).map_err(|e| SimError::Bank {
                            cycle: now,
                            teu: t,
                            operand: x,
                            detail: e.to_string(),
                        })?;
                        verify_routing(&access).map_err(|e| SimError::Bank {
                            cycle: now,
                            teu: t,
                            operand: x,
                            detail: e.to_string(),
                        })?;
                        self.routes.mark(pat, residue);
                    }
                    words += mask.count_ones();
                    if let Some(h) = self.heat.as_mut() {
                        let row = &mut h[t * 2 + x];
                        for n in 0..LANES {
                            if mask >> n & 1 == 1 {
                                row[((base + self.lane_off[x][n]) & 31) as usize] += 1;
                            }
                        }
                    }
                    if self.functional {
                        let buf = &teu.bufs[x];
                        let off = &self.lane_off[x];
                        for n in 0..LANES {
                            if mask >> n & 1 == 1 {
                                vals[x][n] = buf[(base + off[n]) as usize];
                            }
                        }
                    }
                }
            }
        }
        for x in 0..2 {
            let teu = &self.teus[t];
            let fwd_words = match teu.roles[x] {
                Role::Recv(_) | Role::Own => teu.read_mask[x].count_ones() as u64,
                Role::Local => 0,
            };
            for f in teu.pushes[x] {
                if let Some(f) = f {
                    self.m.fifos[f]
                        .as_mut()
                        .expect("link exists")
                        .entries
                        .push_back((now, vals[x]));
                    self.res.fifo_words_transferred += fwd_words;
                    if let Some(tr) = self.trace.as_mut() {
                        tr.serialize((now, t, "fifo_push", fwd_words * self.m.cfg.word_bytes))
                            .ok();
                    }
                }
            }
        }
        let teu = &mut self.teus[t];
        let mac = teu.mac_mask;
        if self.functional {
            let slot = teu.slot * LANES;
            let ps = &mut teu.psum[slot..slot + LANES];
            if first {
                ps.iter_mut().for_each(|v| *v = 0);
            }
            for n in 0..LANES {
                if mac >> n & 1 == 1 {
                    ps[n] = ps[n].wrapping_add(vals[0][n] as i32 * vals[1][n] as i32);
                }
            }
        }
        let macs = mac.count_ones();
        self.res.macs += macs as u64;
        self.advance_cursor(t);
        Ok(Outcome::Issued { macs, words })
    }

    fn fill(&mut self, t: usize) {
        let k = self.teus[t].step;
        let step = self.steps[k].clone();
        let origin = self.teu_origin(t, &step);
        let fills = {
            let f = self.teus[t].fetches.front_mut().expect("fetch for step");
            [f.fills[0].take(), f.fills[1].take()]
        };
        for (x, fill) in fills.into_iter().enumerate() {
            let Some(boxes) = fill else { continue };
            let op = &self.w.operands[x];
            let base = op.map.apply(&origin);
            let lay = &self.plan.program.layouts[x];
            let src = &self.inputs[x];
            let buf = &mut self.teus[t].bufs[x];
            buf.iter_mut().for_each(|v| *v = 0);
            let rank = op.shape.len();
            for (lo, hi) in boxes {
                let ext: Vec<usize> = (0..rank).map(|r| (hi[r] - lo[r] + 1) as usize).collect();
                let mut idx = vec![0usize; rank];
                let mut g = vec![0usize; rank];
                let mut l = [0usize; MAXR];
                loop {
                    for r in 0..rank {
                        g[r] = lo[r] as usize + idx[r];
                        l[r] = (g[r] as i64 - base[r]) as usize;
                    }
                    buf[lay.address(&l[..rank]) as usize] = src.get(&g);
                    if !advance(&mut idx, &ext) {
                        break;
                    }
                }
            }
        }
    }

    fn glb_arbitrate(&mut self) -> bool {
        let n = self.teus.len();
        let mut budget = self.m.cfg.glb_bytes_per_cycle().floor() as u64;
        let cap = self.m.cfg.glb_bytes;
        let mut progressed = false;
        let slots = 2 * n;
        let start = self.glb_rr;
        let mut last_served = None;
        for i in 0..slots {
            if budget == 0 {
                break;
            }
            let s = (start + i) % slots;
            if s < n {
                let teu = &mut self.teus[s];
                let pending = teu.arrived - teu.delivered;
                if pending == 0 {
                    continue;
                }
                let take = pending.min(budget);
                teu.delivered += take;
                budget -= take;
                self.res.glb_read_bytes += take;
                progressed = true;
                last_served = Some(s);
                if let Some(tr) = self.trace.as_mut() {
                    tr.serialize((self.now, s, "glb_deliver", take)).ok();
                }
            } else {
                let t = s - n;
                let Some(d) = self.teus[t].drains.front() else {
                    continue;
                };
                if d.bytes > budget || self.glb_out_bytes + d.bytes > cap {
                    continue;
                }
                let d = self.teus[t].drains.pop_front().expect("front exists");
                budget -= d.bytes;
                self.glb_out_bytes += d.bytes;
                self.res.glb_write_bytes += d.bytes;
                self.dram.push(Txn::Write { bytes: d.bytes });
                if let Some(out) = self.output.as_mut() {
                    let teu = &self.teus[t];
                    let od = out.data_mut();
                    for lane in 0..LANES {
                        if d.mask >> lane & 1 == 1 {
                            let mut off = 0;
                            for dd in 0..self.p {
                                off +=
                                    (d.base[dd] + self.lane_delta[lane][dd]) * self.out_strides[dd];
                            }
                            od[off] = teu.psum[d.group * LANES + lane];
                        }
                    }
                }
                self.teus[t].pending_drain[d.group] = false;
                progressed = true;
                last_served = Some(s);
                if let Some(tr) = self.trace.as_mut() {
                    tr.serialize((self.now, t, "drain", d.bytes)).ok();
                }
            }
        }
        self.glb_rr = match last_served {
            Some(s) => (s + 1) % slots,
            None => (start + 1) % slots,
        };
        progressed
    }

    fn cycle(&mut self) -> Result<bool, SimError> {
        let now = self.now;
        let mut progressed = false;
        let served = self.dram.serve(now);
        progressed |= served.busy;
        self.glb_out_bytes -= served.write_bytes;
        {
            let teus = &mut self.teus;
            self.dram.land(now, |t, b| {
                teus[t].arrived += b;
                progressed = true;
            });
        }
        progressed |= self.glb_arbitrate();
        for f in self.m.fifos.iter_mut().flatten() {
            f.start_len = f.entries.len();
        }
        for t in 0..self.teus.len() {
            let out = self.try_issue(t)?;
            let (event, bytes) = match out {
                Outcome::Issued { macs, words } => {
                    progressed = true;
                    if macs == 0 {
                        self.res.stalls.tile_bubble += 1;
                    }
                    ("mac", words as u64 * self.m.cfg.word_bytes)
                }
                Outcome::Stall(c) => {
                    let s = &mut self.res.stalls;
                    match c {
                        StallCause::Dram => s.dram += 1,
                        StallCause::Glb => s.glb += 1,
                        StallCause::FifoEmpty => s.fifo_empty += 1,
                        StallCause::FifoFull => s.fifo_full += 1,
                    }
                    (c.name(), 0)
                }
                Outcome::Done => {
                    self.res.stalls.tile_bubble += 1;
                    ("idle", 0)
                }
            };
            if let Some(tr) = self.trace.as_mut() {
                tr.serialize((now, t, event, bytes)).ok();
            }
        }
        let min_step = self.teus.iter().map(|t| t.step).min().unwrap_or(0);
        while let Some(k) = self.issued_upto {
            if k + 1 < self.steps.len() && k < min_step + 1 {
                self.issue_prefetch(k + 1);
            } else {
                break;
            }
        }
        Ok(progressed)
    }
}

/// Two PSum halves alternate between super tiles when a tile fits in one.
pub(crate) fn psum_banks(slots: u64, psum_words: u64) -> usize {
    if 2 * slots <= psum_words {
        2
    } else {
        1
    }
}

fn box_volume(b: &GBox) -> u64 {
    b.0.iter()
        .zip(&b.1)
        .map(|(&lo, &hi)| (hi - lo + 1) as u64)
        .product()
}

/// Volume of a union of boxes, by recursive slab decomposition.
fn union_volume(boxes: &[GBox]) -> u64 {
    match boxes {
        [] => 0,
        [b] => box_volume(b),
        _ => slab_volume(boxes, 0),
    }
}

fn slab_volume(boxes: &[GBox], d: usize) -> u64 {
    if boxes.is_empty() {
        return 0;
    }
    if d == boxes[0].0.len() {
        return 1;
    }
    let mut cuts: Vec<i64> = boxes.iter().flat_map(|b| [b.0[d], b.1[d] + 1]).collect();
    cuts.sort_unstable();
    cuts.dedup();
    let mut total = 0;
    for w in cuts.windows(2) {
        let inside: Vec<GBox> = boxes
            .iter()
            .filter(|b| b.0[d] <= w[0] && w[1] - 1 <= b.1[d])
            .cloned()
            .collect();
        if !inside.is_empty() {
            total += (w[1] - w[0]) as u64 * slab_volume(&inside, d + 1);
        }
    }
    total
}

fn flat_index(idx: &[usize], ext: &[usize]) -> usize {
    idx.iter().zip(ext).fold(0, |acc, (&i, &e)| acc * e + i)
}
