//! Kernel-level task DAG construction from an elimination list, weight
//! and critical-path analysis, and communication/makespan cost models
//! for the distributed setting.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt;

use crate::kernels::{kernel_weight, KernelKind};
use crate::tile_store::Distribution;
use crate::trees::{validate_list, EliminationList};
use crate::{invalid, Error, Result};

/// One kernel-level task. `row` is the victim row for pair kernels and
/// the factored row for GEQRT/UNMQR; `col` is the update column of
/// UNMQR/TSMQR/TTMQR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Task {
    pub kind: KernelKind,
    pub row: usize,
    pub piv: Option<usize>,
    pub panel: usize,
    pub col: Option<usize>,
    pub process: usize,
}

impl Task {
    /// `KIND(i,piv,k,j)` with `-` for absent fields.
    pub fn label(&self) -> String {
        let piv = self.piv.map_or("-".to_string(), |p| p.to_string());
        let col = self.col.map_or("-".to_string(), |j| j.to_string());
        format!("{}({},{},{},{})", self.kind, self.row, piv, self.panel, col)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@P{}", self.label(), self.process)
    }
}

/// Dataflow task graph; edges always point from earlier to later
/// canonical positions, so task order is already topological.
#[derive(Debug, Clone)]
pub struct TaskDag {
    mt: usize,
    nt: usize,
    dist: Distribution,
    tasks: Vec<Task>,
    edges: Vec<(usize, usize)>,
    succs: Vec<Vec<usize>>,
    preds: Vec<Vec<usize>>,
}

impl TaskDag {
    pub fn mt(&self) -> usize {
        self.mt
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn dist(&self) -> &Distribution {
        &self.dist
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn successors(&self, t: usize) -> &[usize] {
        &self.succs[t]
    }

    pub fn predecessors(&self, t: usize) -> &[usize] {
        &self.preds[t]
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Task counts per kernel kind, indexed by [`KernelKind::index`].
    pub fn kind_counts(&self) -> [usize; 6] {
        let mut counts = [0usize; 6];
        for t in &self.tasks {
            counts[t.kind.index()] += 1;
        }
        counts
    }

    /// Longest chain of task weights along edges, in `b^3/3` units.
    pub fn critical_path_weighted(&self) -> u64 {
        let mut dp = vec![0u64; self.tasks.len()];
        let mut best = 0;
        for i in 0..self.tasks.len() {
            let incoming = self.preds[i].iter().map(|&u| dp[u]).max().unwrap_or(0);
            dp[i] = incoming + self.tasks[i].kind.weight();
            best = best.max(dp[i]);
        }
        best
    }

    /// Weights per task in `b^3/3` units; downstream bound used as the
    /// scheduling priority.
    fn bottom_levels(&self) -> Vec<u64> {
        let n = self.tasks.len();
        let mut bl = vec![0u64; n];
        for i in (0..n).rev() {
            let out = self.succs[i].iter().map(|&v| bl[v]).max().unwrap_or(0);
            bl[i] = out + self.tasks[i].kind.weight();
        }
        bl
    }

    /// Graphviz rendering with per-edge cross-process attributes.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph taskdag {\n");
        for (i, t) in self.tasks.iter().enumerate() {
            out.push_str(&format!("  t{} [label=\"{}\"];\n", i, t));
        }
        for &(u, v) in &self.edges {
            let xproc = self.tasks[u].process != self.tasks[v].process;
            out.push_str(&format!("  t{u} -> t{v} [xproc={xproc}];\n"));
        }
        out.push_str("}\n");
        out
    }
}

type TileCoord = (usize, usize);

/// Tiles read and written by a task under the elimination algorithm's
/// access pattern (reflector data lives at the factored tile).
fn task_accesses(t: &Task) -> (Vec<TileCoord>, Vec<TileCoord>) {
    match t.kind {
        KernelKind::Geqrt => (vec![], vec![(t.row, t.panel)]),
        KernelKind::Unmqr => (vec![(t.row, t.panel)], vec![(t.row, t.col.unwrap())]),
        KernelKind::Tsqrt | KernelKind::Ttqrt => {
            (vec![], vec![(t.piv.unwrap(), t.panel), (t.row, t.panel)])
        }
        KernelKind::Tsmqr | KernelKind::Ttmqr => {
            let j = t.col.unwrap();
            (vec![(t.row, t.panel)], vec![(t.piv.unwrap(), j), (t.row, j)])
        }
    }
}

/// One task spec before placement: kind, row, pivot, panel, column.
pub(crate) type TaskSpec = (KernelKind, usize, Option<usize>, usize, Option<usize>);

/// Tasks of the elimination algorithm in canonical creation order,
/// without placement. Shared by DAG construction and Q reconstruction.
pub(crate) fn task_sequence(list: &EliminationList) -> Vec<TaskSpec> {
    let (mt, nt) = (list.mt(), list.nt());
    let mut seq = Vec::new();
    let mut geqrt_done: HashSet<(usize, usize)> = HashSet::new();
    let mut unmqr_done: HashSet<(usize, usize, usize)> = HashSet::new();

    let ensure_panel = |seq: &mut Vec<TaskSpec>,
                            geqrt_done: &mut HashSet<(usize, usize)>,
                            unmqr_done: &mut HashSet<(usize, usize, usize)>,
                            row: usize,
                            k: usize| {
        if geqrt_done.insert((row, k)) {
            seq.push((KernelKind::Geqrt, row, None, k, None));
        }
        for j in k + 1..nt {
            if unmqr_done.insert((row, k, j)) {
                seq.push((KernelKind::Unmqr, row, None, k, Some(j)));
            }
        }
    };

    for e in list.iter() {
        let (k, i, piv) = (e.panel, e.victim, e.pivot);
        ensure_panel(&mut seq, &mut geqrt_done, &mut unmqr_done, piv, k);
        if e.ts {
            seq.push((KernelKind::Tsqrt, i, Some(piv), k, None));
            for j in k + 1..nt {
                seq.push((KernelKind::Tsmqr, i, Some(piv), k, Some(j)));
            }
        } else {
            ensure_panel(&mut seq, &mut geqrt_done, &mut unmqr_done, i, k);
            seq.push((KernelKind::Ttqrt, i, Some(piv), k, None));
            for j in k + 1..nt {
                seq.push((KernelKind::Ttmqr, i, Some(piv), k, Some(j)));
            }
        }
    }

    // Panels without eliminations still triangularize their diagonal.
    for k in 0..mt.min(nt) {
        if !geqrt_done.contains(&(k, k)) {
            ensure_panel(&mut seq, &mut geqrt_done, &mut unmqr_done, k, k);
        }
    }
    seq
}

/// Build the kernel-level DAG of a valid, flagged elimination list.
///
/// Tasks are placed at the owner of their written victim-row tile;
/// edges cover every read-after-write, write-after-read, and
/// write-after-write pair on each tile in canonical order.
pub fn build_dag(list: &EliminationList, dist: &Distribution) -> Result<TaskDag> {
    let violations = validate_list(list);
    if !violations.is_empty() {
        let first = violations[0].to_string();
        return Err(Error::Validation(violations.len(), first));
    }
    let (mt, nt) = (list.mt(), list.nt());
    let mut tasks = Vec::new();
    for (kind, row, piv, panel, col) in task_sequence(list) {
        let (wrow, wcol) = match kind {
            KernelKind::Geqrt => (row, panel),
            KernelKind::Unmqr => (row, col.unwrap()),
            KernelKind::Tsqrt | KernelKind::Ttqrt => (row, panel),
            KernelKind::Tsmqr | KernelKind::Ttmqr => (row, col.unwrap()),
        };
        let process = dist.owner(mt, nt, wrow, wcol)?;
        tasks.push(Task { kind, row, piv, panel, col, process });
    }

    #[derive(Default)]
    struct TileState {
        last_writer: Option<usize>,
        readers: Vec<usize>,
    }
    let mut state: HashMap<(usize, usize), TileState> = HashMap::new();
    let mut edge_set: HashSet<(usize, usize)> = HashSet::new();
    let mut edges = Vec::new();
    let mut add_edge = |edges: &mut Vec<(usize, usize)>, u: usize, v: usize| {
        if u != v && edge_set.insert((u, v)) {
            edges.push((u, v));
        }
    };

    for (idx, t) in tasks.iter().enumerate() {
        let (reads, writes) = task_accesses(t);
        for tile in reads {
            let s = state.entry(tile).or_default();
            if let Some(w) = s.last_writer {
                add_edge(&mut edges, w, idx);
            }
            s.readers.push(idx);
        }
        for tile in writes {
            let s = state.entry(tile).or_default();
            if let Some(w) = s.last_writer {
                add_edge(&mut edges, w, idx);
            }
            for &r in &s.readers {
                add_edge(&mut edges, r, idx);
            }
            s.last_writer = Some(idx);
            s.readers.clear();
        }
    }

    let n = tasks.len();
    let mut succs = vec![Vec::new(); n];
    let mut preds = vec![Vec::new(); n];
    for &(u, v) in &edges {
        debug_assert!(u < v, "canonical order is topological");
        succs[u].push(v);
        preds[v].push(u);
    }
    Ok(TaskDag { mt, nt, dist: *dist, tasks, edges, succs, preds })
}

/// Sum of task weights in `b^3/3` units; `6*mt*nt^2 - 2*nt^3` for every
/// valid list when `mt >= nt`.
pub fn total_weight(dag: &TaskDag) -> u64 {
    dag.tasks.iter().map(|t| t.kind.weight()).sum()
}

/// Longest weighted chain of the DAG.
pub fn critical_path_weighted(dag: &TaskDag) -> u64 {
    dag.critical_path_weighted()
}

/// Count inter-process dataflow: cross-process edges deduplicated per
/// (source task, destination process), plus one write-back per task
/// output tile whose owner is a different process.
pub fn count_dataflow_messages(dag: &TaskDag) -> usize {
    let mut flows: HashSet<(usize, usize)> = HashSet::new();
    for &(u, v) in &dag.edges {
        let (pu, pv) = (dag.tasks[u].process, dag.tasks[v].process);
        if pu != pv {
            flows.insert((u, pv));
        }
    }
    let mut count = flows.len();
    for t in &dag.tasks {
        let (_, writes) = task_accesses(t);
        for (i, j) in writes {
            let owner = dag.dist.owner(dag.mt, dag.nt, i, j).expect("task tiles are in range");
            if owner != t.process {
                count += 1;
            }
        }
    }
    count
}

/// Count pivot-tile movements for one panel under the migrating-pivot
/// model: an elimination runs at the victim row's owner, the pivot tile
/// moves there when not already resident, and each pivot pays one final
/// message if it ends away from its home process.
pub fn migrating_pivot_comms(list: &EliminationList, dist: &Distribution, panel: usize) -> Result<usize> {
    let (mt, nt) = (list.mt(), list.nt());
    let mut location: HashMap<usize, usize> = HashMap::new();
    let mut home: HashMap<usize, usize> = HashMap::new();
    let mut messages = 0usize;
    for e in list.iter().filter(|e| e.panel == panel) {
        let exec = dist.owner(mt, nt, e.victim, panel.min(nt - 1))?;
        let piv_home = dist.owner(mt, nt, e.pivot, panel.min(nt - 1))?;
        home.entry(e.pivot).or_insert(piv_home);
        let loc = location.entry(e.pivot).or_insert(piv_home);
        if *loc != exec {
            messages += 1;
            *loc = exec;
        }
    }
    for (pivot, loc) in &location {
        if loc != &home[pivot] {
            messages += 1;
        }
    }
    Ok(messages)
}

/// Attainable speedup of a block row distribution over `p` processes.
pub fn block_speedup_bound(mt: usize, nt: usize, p: usize) -> Result<f64> {
    if mt == 0 || nt == 0 || p == 0 {
        return Err(invalid("dimensions and process count must be positive"));
    }
    if nt > mt {
        return Err(invalid(format!("bound requires mt >= nt, got {mt}x{nt}")));
    }
    // Single rounding so the square case is exactly (2/3) * p.
    Ok(p as f64 * ((3 * mt - nt) as f64 / (3 * mt) as f64))
}

/// Cost model of the makespan simulator: per-kernel weight multipliers
/// (unit `b^3/3` flops) and an additive latency per inter-process edge.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub multipliers: [f64; 6],
    pub message_cost: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { multipliers: [1.0; 6], message_cost: 0.0 }
    }
}

impl CostModel {
    pub fn with_message_cost(message_cost: f64) -> Self {
        CostModel { message_cost, ..Default::default() }
    }

    /// Scale TT kernels by the measured TS/TT sequential rate ratio
    /// (7.21 vs 6.28 GFlop/s), so a TT flop costs more time.
    #[allow(clippy::approx_constant)]
    pub fn measured() -> Self {
        let mut m = CostModel::default();
        let ratio = 7.21 / 6.28;
        m.multipliers[KernelKind::Ttqrt.index()] = ratio;
        m.multipliers[KernelKind::Ttmqr.index()] = ratio;
        m
    }

    fn duration(&self, kind: KernelKind) -> f64 {
        kernel_weight(kind) as f64 * self.multipliers[kind.index()]
    }
}

/// One scheduled task of the makespan simulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimSlot {
    pub task: usize,
    pub process: usize,
    pub core: usize,
    pub start: f64,
    pub end: f64,
}

/// Result of [`simulate_makespan`].
#[derive(Debug, Clone)]
pub struct SimResult {
    pub makespan: f64,
    pub slots: Vec<SimSlot>,
}

impl SimResult {
    /// CSV trace `task,process,core,start,end` in dispatch order.
    pub fn trace_csv(&self, dag: &TaskDag) -> String {
        let mut out = String::from("task,process,core,start,end\n");
        for s in &self.slots {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                dag.tasks()[s.task].label(),
                s.process,
                s.core,
                s.start,
                s.end
            ));
        }
        out
    }
}

#[derive(PartialEq)]
struct Pri(f64, Reverse<usize>);

impl Eq for Pri {}

impl PartialOrd for Pri {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pri {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then_with(|| self.1.cmp(&other.1))
    }
}

/// Deterministic list-scheduling simulation: every process runs
/// `cores_per_proc` workers, a task starts once all predecessors have
/// finished plus one message latency per cross-process incoming edge,
/// and ready tasks are prioritized by longest bottom level.
pub fn simulate_makespan(
    dag: &TaskDag,
    procs: usize,
    cores_per_proc: usize,
    model: &CostModel,
) -> Result<SimResult> {
    if procs == 0 || cores_per_proc == 0 {
        return Err(invalid("process and core counts must be positive"));
    }
    if let Some(t) = dag.tasks.iter().find(|t| t.process >= procs) {
        return Err(invalid(format!("task {} placed on process {} >= {procs}", t.label(), t.process)));
    }
    let n = dag.len();
    if n == 0 {
        return Ok(SimResult { makespan: 0.0, slots: Vec::new() });
    }

    let bl = dag.bottom_levels();
    let mut pending = vec![0usize; n];
    for &(_, v) in &dag.edges {
        pending[v] += 1;
    }
    let mut ready_at = vec![0.0f64; n];
    let mut finish = vec![0.0f64; n];

    // Event queue: (time, rank, idx). Completions run before arrivals
    // at the same instant so freed cores can pick up new work.
    let mut events: BinaryHeap<Reverse<(u64, u8, usize)>> = BinaryHeap::new();
    let key = |t: f64| -> u64 { t.to_bits() }; // non-negative floats sort by bits
    let mut ready_heaps: Vec<BinaryHeap<Pri>> = (0..procs).map(|_| BinaryHeap::new()).collect();
    let mut cores: Vec<BinaryHeap<Reverse<(u64, usize)>>> = (0..procs)
        .map(|_| (0..cores_per_proc).map(|c| Reverse((key(0.0), c))).collect())
        .collect();

    for (i, &p) in pending.iter().enumerate() {
        if p == 0 {
            events.push(Reverse((key(0.0), 1, i)));
        }
    }

    let mut slots = Vec::with_capacity(n);
    let mut makespan = 0.0f64;
    let mut done = 0usize;

    while let Some(Reverse((tbits, rank, idx))) = events.pop() {
        let now = f64::from_bits(tbits);
        let proc = dag.tasks[idx].process;
        if rank == 0 {
            // Completion: wake successors.
            for &v in &dag.succs[idx] {
                let msg = if dag.tasks[v].process != proc { model.message_cost } else { 0.0 };
                ready_at[v] = ready_at[v].max(finish[idx] + msg);
                pending[v] -= 1;
                if pending[v] == 0 {
                    events.push(Reverse((key(ready_at[v]), 1, v)));
                }
            }
        } else {
            ready_heaps[proc].push(Pri(bl[idx] as f64, Reverse(idx)));
        }
        // Dispatch everything possible on this process at `now`.
        while let Some(&Reverse((free_bits, core))) = cores[proc].peek() {
            if f64::from_bits(free_bits) > now || ready_heaps[proc].is_empty() {
                break;
            }
            cores[proc].pop();
            let Pri(_, Reverse(task)) = ready_heaps[proc].pop().unwrap();
            let start = now;
            let end = start + model.duration(dag.tasks[task].kind);
            finish[task] = end;
            makespan = makespan.max(end);
            slots.push(SimSlot { task, process: proc, core, start, end });
            cores[proc].push(Reverse((key(end), core)));
            events.push(Reverse((key(end), 0, task)));
            done += 1;
        }
    }

    debug_assert_eq!(done, n, "all tasks must be scheduled");
    Ok(SimResult { makespan, slots })
}
