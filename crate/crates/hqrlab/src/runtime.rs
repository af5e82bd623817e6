//! Parallel dataflow execution of a task DAG on a shared-memory worker
//! pool, Q reconstruction from stored reflectors, and factorization
//! checks.
//!
//! The executor honors exactly the DAG's edges: a task becomes ready
//! when its last predecessor finishes, so every tile sees a fixed write
//! sequence and the result is bitwise identical for any worker count.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crossbeam::deque::{Injector, Steal, Stealer, Worker};
use serde::Serialize;

use crate::kernels::{self, KernelKind, ReflectorKey, ReflectorStore};
use crate::taskgraph::{task_sequence, Task, TaskDag};
use crate::tile_store::{DenseMatrix, Tile, TileMatrix};
use crate::trees::EliminationList;
use crate::{invalid, Error, Result};

/// One executed task in the wall-clock trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceEvent {
    pub task: usize,
    pub worker: usize,
    pub start_ns: u128,
    pub end_ns: u128,
}

/// Outcome of one parallel factorization.
#[derive(Debug, Clone, Serialize)]
pub struct ExecutionReport {
    pub elapsed_secs: f64,
    pub workers: usize,
    pub task_counts: BTreeMap<String, usize>,
    /// `||Q^T Q - I||_F`, filled in by the verification step.
    pub orth_err: Option<f64>,
    /// `||A - QR||_F / ||A||_F`, filled in by the verification step.
    pub resid: Option<f64>,
    #[serde(skip)]
    pub trace: Vec<TraceEvent>,
}

/// Machine epsilon used by all acceptance thresholds (2^-52).
pub const EPS: f64 = f64::EPSILON;

/// Orthogonality acceptance threshold `50 * eps * N`.
pub fn orthogonality_threshold(n_scalar: usize) -> f64 {
    50.0 * EPS * n_scalar as f64
}

/// Residual acceptance threshold `50 * eps * sqrt(N)`.
pub fn residual_threshold(n_scalar: usize) -> f64 {
    50.0 * EPS * (n_scalar as f64).sqrt()
}

struct TileCells {
    nt: usize,
    cells: Vec<Mutex<Tile>>,
}

impl TileCells {
    fn lock(&self, i: usize, j: usize) -> std::sync::MutexGuard<'_, Tile> {
        self.cells[i * self.nt + j].lock().unwrap()
    }
}

fn run_task(task: &Task, tiles: &TileCells, store: &ReflectorStore) -> Result<()> {
    match task.kind {
        KernelKind::Geqrt => {
            let mut t = tiles.lock(task.row, task.panel);
            let h = kernels::geqrt(&mut t);
            store.insert(ReflectorKey::Panel { row: task.row, panel: task.panel }, h)?;
        }
        KernelKind::Unmqr => {
            let key = ReflectorKey::Panel { row: task.row, panel: task.panel };
            let h = store
                .get(&key)
                .ok_or_else(|| Error::CorruptedStore(format!("missing {key}")))?;
            let mut c = tiles.lock(task.row, task.col.unwrap());
            kernels::unmqr(&h, &mut c)?;
        }
        KernelKind::Tsqrt | KernelKind::Ttqrt => {
            let piv = task.piv.unwrap();
            let mut top = tiles.lock(piv, task.panel);
            let mut bot = tiles.lock(task.row, task.panel);
            let h = if task.kind == KernelKind::Tsqrt {
                kernels::tsqrt(&mut top, &mut bot)
            } else {
                kernels::ttqrt(&mut top, &mut bot)
            };
            store.insert(
                ReflectorKey::Pair { victim: task.row, pivot: piv, panel: task.panel },
                h,
            )?;
        }
        KernelKind::Tsmqr | KernelKind::Ttmqr => {
            let piv = task.piv.unwrap();
            let key = ReflectorKey::Pair { victim: task.row, pivot: piv, panel: task.panel };
            let h = store
                .get(&key)
                .ok_or_else(|| Error::CorruptedStore(format!("missing {key}")))?;
            let j = task.col.unwrap();
            let mut top = tiles.lock(piv, j);
            let mut bot = tiles.lock(task.row, j);
            if task.kind == KernelKind::Tsmqr {
                kernels::tsmqr(&h, &mut top, &mut bot)?;
            } else {
                kernels::ttmqr(&h, &mut top, &mut bot)?;
            }
        }
    }
    Ok(())
}

/// Execute a task DAG in place: `a` is overwritten with the R factor
/// (explicit zeros in killed tiles) and all reflectors land in the
/// returned store. Results are bitwise identical for any worker count.
pub fn execute(a: &mut TileMatrix, dag: &TaskDag, workers: usize) -> Result<(ReflectorStore, ExecutionReport)> {
    if workers == 0 {
        return Err(invalid("need at least one worker"));
    }
    if a.mt() != dag.mt() || a.nt() != dag.nt() {
        return Err(invalid(format!(
            "matrix is {}x{} tiles but the DAG was built for {}x{}",
            a.mt(),
            a.nt(),
            dag.mt(),
            dag.nt()
        )));
    }
    let (mt, nt, b) = (a.mt(), a.nt(), a.b());
    let n = dag.len();
    let store = ReflectorStore::new();
    let placeholder = TileMatrix::zeros(mt, nt, b)?;
    let owned = std::mem::replace(a, placeholder);
    let tiles = TileCells {
        nt,
        cells: owned.into_tiles().into_iter().map(Mutex::new).collect(),
    };

    // Successors sorted by ascending bottom level: a finishing worker
    // pushes them LIFO, so it continues with the heaviest successor of
    // the task it just ran.
    let mut bottom = vec![0u64; n];
    for i in (0..n).rev() {
        let out = dag.successors(i).iter().map(|&v| bottom[v]).max().unwrap_or(0);
        bottom[i] = out + dag.tasks()[i].kind.weight();
    }
    let mut succs_by_level: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = dag.successors(i).to_vec();
        s.sort_by_key(|&v| (bottom[v], std::cmp::Reverse(v)));
        succs_by_level.push(s);
    }

    let pending: Vec<AtomicUsize> = (0..n).map(|_| AtomicUsize::new(0)).collect();
    for &(_, v) in dag.edges() {
        pending[v].fetch_add(1, Ordering::Relaxed);
    }
    let injector = Injector::new();
    for (i, p) in pending.iter().enumerate() {
        if p.load(Ordering::Relaxed) == 0 {
            injector.push(i);
        }
    }

    let locals: Vec<Worker<usize>> = (0..workers).map(|_| Worker::new_lifo()).collect();
    let stealers: Vec<Stealer<usize>> = locals.iter().map(|w| w.stealer()).collect();
    let completed = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let t0 = Instant::now();

    let mut traces: Vec<Vec<TraceEvent>> = Vec::new();
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (wid, local) in locals.into_iter().enumerate() {
            let stealers = &stealers;
            let injector = &injector;
            let pending = &pending;
            let completed = &completed;
            let failure = &failure;
            let tiles = &tiles;
            let store = &store;
            let succs_by_level = &succs_by_level;
            handles.push(scope.spawn(move || {
                let mut trace = Vec::new();
                'outer: loop {
                    let next = local.pop().or_else(|| {
                        loop {
                            match injector.steal() {
                                Steal::Success(t) => return Some(t),
                                Steal::Empty => break,
                                Steal::Retry => {}
                            }
                        }
                        for s in stealers {
                            loop {
                                match s.steal() {
                                    Steal::Success(t) => return Some(t),
                                    Steal::Empty => break,
                                    Steal::Retry => {}
                                }
                            }
                        }
                        None
                    });
                    let Some(task_idx) = next else {
                        if completed.load(Ordering::Acquire) == n || failure.lock().unwrap().is_some() {
                            break 'outer;
                        }
                        std::thread::yield_now();
                        continue;
                    };
                    let start_ns = t0.elapsed().as_nanos();
                    let result = run_task(&dag.tasks()[task_idx], tiles, store);
                    let end_ns = t0.elapsed().as_nanos();
                    trace.push(TraceEvent { task: task_idx, worker: wid, start_ns, end_ns });
                    if let Err(e) = result {
                        *failure.lock().unwrap() = Some(e);
                        break 'outer;
                    }
                    for &succ in &succs_by_level[task_idx] {
                        if pending[succ].fetch_sub(1, Ordering::AcqRel) == 1 {
                            local.push(succ);
                        }
                    }
                    completed.fetch_add(1, Ordering::Release);
                }
                trace
            }));
        }
        for h in handles {
            traces.push(h.join().expect("worker panicked"));
        }
    });

    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let elapsed_secs = t0.elapsed().as_secs_f64();

    let tiles_back: Vec<Tile> = tiles
        .cells
        .into_iter()
        .map(|m| m.into_inner().unwrap())
        .collect();
    *a = TileMatrix::from_tiles(mt, nt, b, tiles_back);

    let mut trace: Vec<TraceEvent> = traces.into_iter().flatten().collect();
    trace.sort_by_key(|e| (e.start_ns, e.task));
    let mut task_counts = BTreeMap::new();
    for e in &trace {
        *task_counts.entry(dag.tasks()[e.task].kind.name().to_string()).or_insert(0) += 1;
    }

    let expected = dag.kind_counts();
    for kind in crate::kernels::KERNEL_KINDS {
        let got = task_counts.get(kind.name()).copied().unwrap_or(0);
        if got != expected[kind.index()] {
            return Err(Error::CorruptedStore(format!(
                "{kind} ran {got} times, DAG has {}",
                expected[kind.index()]
            )));
        }
    }

    Ok((
        store,
        ExecutionReport { elapsed_secs, workers, task_counts, orth_err: None, resid: None, trace },
    ))
}

/// Reconstruct the orthonormal factor by applying the stored
/// elimination transformations, in reverse canonical order, to the
/// leading columns of the identity. Returns an `M x min(M, N)` matrix.
pub fn build_q(store: &ReflectorStore, list: &EliminationList, b: usize) -> Result<DenseMatrix> {
    if b == 0 {
        return Err(invalid("tile size must be positive"));
    }
    let m = list.mt() * b;
    let k = m.min(list.nt() * b);
    let mut q = DenseMatrix::eye(m, k);
    let seq = task_sequence(list);
    for &(kind, row, piv, panel, _) in seq.iter().rev() {
        match kind {
            KernelKind::Geqrt => {
                let key = ReflectorKey::Panel { row, panel };
                let h = store
                    .get(&key)
                    .ok_or_else(|| Error::CorruptedStore(format!("missing {key}")))?;
                h.apply_q_dense(&mut q, row * b, None);
            }
            KernelKind::Tsqrt | KernelKind::Ttqrt => {
                let pivot = piv.unwrap();
                let key = ReflectorKey::Pair { victim: row, pivot, panel };
                let h = store
                    .get(&key)
                    .ok_or_else(|| Error::CorruptedStore(format!("missing {key}")))?;
                h.apply_q_dense(&mut q, pivot * b, Some(row * b));
            }
            _ => {}
        }
    }
    Ok(q)
}

/// Factorization checks: `||Q^T Q - I||_F` and `||A - QR||_F / ||A||_F`.
pub fn verify(a0: &TileMatrix, q: &DenseMatrix, r: &TileMatrix) -> Result<(f64, f64)> {
    let m = a0.scalar_rows();
    let n = a0.scalar_cols();
    let k = m.min(n);
    if r.mt() != a0.mt() || r.nt() != a0.nt() || r.b() != a0.b() {
        return Err(invalid("R factor shape does not match the input matrix"));
    }
    if q.rows() != m || q.cols() != k {
        return Err(invalid(format!(
            "Q is {}x{}, expected {m}x{k}",
            q.rows(),
            q.cols()
        )));
    }

    let mut orth = 0.0f64;
    for i in 0..k {
        for j in 0..k {
            let mut acc = 0.0;
            for l in 0..m {
                acc += q.get(l, i) * q.get(l, j);
            }
            let want = if i == j { 1.0 } else { 0.0 };
            orth += (acc - want) * (acc - want);
        }
    }
    let orth = orth.sqrt();

    let mut resid_sq = 0.0f64;
    let mut norm_sq = 0.0f64;
    for j in 0..n {
        for i in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += q.get(i, l) * r.scalar(l, j);
            }
            let a = a0.scalar(i, j);
            resid_sq += (a - acc) * (a - acc);
            norm_sq += a * a;
        }
    }
    let resid = if norm_sq > 0.0 { (resid_sq / norm_sq).sqrt() } else { resid_sq.sqrt() };
    Ok((orth, resid))
}

/// CSV execution trace `task,kind,i,piv,k,j,worker,start_ns,end_ns`.
pub fn trace_csv(dag: &TaskDag, report: &ExecutionReport) -> String {
    let mut out = String::from("task,kind,i,piv,k,j,worker,start_ns,end_ns\n");
    for e in &report.trace {
        let t = &dag.tasks()[e.task];
        let piv = t.piv.map_or("-".into(), |p: usize| p.to_string());
        let col = t.col.map_or("-".into(), |j: usize| j.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.task, t.kind, t.row, piv, t.panel, col, e.worker, e.start_ns, e.end_ns
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hqr::{gen_hqr, HqrConfig};
    use crate::kernels::geqrt;
    use crate::taskgraph::build_dag;
    use crate::tile_store::Distribution;
    use crate::trees::{gen_tree, TreeKind};

    fn one_proc() -> Distribution {
        Distribution::Cyclic2d { p: 1, q: 1 }
    }

    fn factor(mt: usize, nt: usize, b: usize, seed: u64, kind: TreeKind, workers: usize)
        -> (TileMatrix, TileMatrix, ReflectorStore, EliminationList, ExecutionReport) {
        let a0 = TileMatrix::make_random(mt, nt, b, seed).unwrap();
        let list = gen_tree(kind, mt, nt).unwrap();
        let dag = build_dag(&list, &one_proc()).unwrap();
        let mut a = a0.clone();
        let (store, report) = execute(&mut a, &dag, workers).unwrap();
        (a0, a, store, list, report)
    }

    #[test]
    fn single_tile_matches_geqrt() {
        let a0 = TileMatrix::make_random(1, 1, 4, 5).unwrap();
        let list = gen_tree(TreeKind::FlatTree, 1, 1).unwrap();
        let dag = build_dag(&list, &one_proc()).unwrap();
        let mut a = a0.clone();
        let (store, _) = execute(&mut a, &dag, 1).unwrap();
        let mut expect = a0.tile(0, 0).clone();
        let _ = geqrt(&mut expect);
        assert_eq!(a.tile(0, 0), &expect);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn result_is_bitwise_deterministic_across_workers() {
        let (_, r1, s1, _, _) = factor(8, 4, 4, 11, TreeKind::Greedy, 1);
        let (_, r8, s8, _, _) = factor(8, 4, 4, 11, TreeKind::Greedy, 8);
        assert_eq!(r1, r8);
        assert!(s1.bits_eq(&s8));
    }

    #[test]
    fn killed_tiles_are_explicit_zeros() {
        let (_, r, _, _, _) = factor(6, 3, 4, 3, TreeKind::BinaryTree, 2);
        for k in 0..3 {
            for i in k + 1..6 {
                assert_eq!(r.tile(i, k), &Tile::zeros(4), "tile ({i},{k})");
            }
        }
    }

    #[test]
    fn factorization_verifies_within_thresholds() {
        let (a0, r, store, list, _) = factor(8, 4, 8, 1, TreeKind::Greedy, 4);
        let q = build_q(&store, &list, 8).unwrap();
        let (orth, resid) = verify(&a0, &q, &r).unwrap();
        let n = a0.scalar_cols();
        assert!(orth <= orthogonality_threshold(n), "orth {orth:e}");
        assert!(resid <= residual_threshold(n), "resid {resid:e}");
    }

    #[test]
    fn hierarchical_config_verifies() {
        let cfg = HqrConfig {
            mt: 12,
            nt: 4,
            p: 3,
            q: 1,
            a: 2,
            low: TreeKind::Greedy,
            high: TreeKind::Fibonacci,
            domino: true,
            dist: Distribution::Cyclic2d { p: 3, q: 1 },
        };
        let list = gen_hqr(&cfg).unwrap();
        let dag = build_dag(&list, &cfg.dist).unwrap();
        let a0 = TileMatrix::make_random(12, 4, 8, 2).unwrap();
        let mut a = a0.clone();
        let (store, _) = execute(&mut a, &dag, 4).unwrap();
        let q = build_q(&store, &list, 8).unwrap();
        let (orth, resid) = verify(&a0, &q, &a).unwrap();
        let n = a0.scalar_cols();
        assert!(orth <= orthogonality_threshold(n), "orth {orth:e}");
        assert!(resid <= residual_threshold(n), "resid {resid:e}");
    }

    #[test]
    fn identity_input_gives_identity_like_q() {
        let b = 4;
        let mut a0 = TileMatrix::zeros(4, 2, b).unwrap();
        for i in 0..a0.scalar_rows().min(a0.scalar_cols()) {
            let (ti, tj) = (i / b, i / b);
            if tj < a0.nt() {
                a0.tile_mut(ti, tj).set(i % b, i % b, 1.0);
            }
        }
        let list = gen_tree(TreeKind::Greedy, 4, 2).unwrap();
        let dag = build_dag(&list, &one_proc()).unwrap();
        let mut a = a0.clone();
        let (store, _) = execute(&mut a, &dag, 2).unwrap();
        let q = build_q(&store, &list, b).unwrap();
        let (orth, _) = verify(&a0, &q, &a).unwrap();
        assert!(orth <= 10.0 * b as f64 * EPS);
        for j in 0..q.cols() {
            for i in 0..q.rows() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((q.get(i, j).abs() - want).abs() <= 10.0 * b as f64 * EPS);
            }
        }
    }

    #[test]
    fn different_trees_same_diagonal_magnitudes() {
        let (a0, r_flat, s_flat, l_flat, _) = factor(12, 4, 4, 9, TreeKind::FlatTree, 2);
        let (_, r_greedy, s_greedy, l_greedy, _) = factor(12, 4, 4, 9, TreeKind::Greedy, 2);
        let b = 4;
        for d in 0..16 {
            let x = r_flat.scalar(d, d).abs();
            let y = r_greedy.scalar(d, d).abs();
            assert!((x - y).abs() <= 100.0 * b as f64 * EPS, "diag {d}: {x} vs {y}");
        }
        let q1 = build_q(&s_flat, &l_flat, b).unwrap();
        let q2 = build_q(&s_greedy, &l_greedy, b).unwrap();
        let (_, resid1) = verify(&a0, &q1, &r_flat).unwrap();
        let (_, resid2) = verify(&a0, &q2, &r_greedy).unwrap();
        let n = a0.scalar_cols();
        assert!(resid1 <= residual_threshold(n) && resid2 <= residual_threshold(n));
    }

    #[test]
    fn trace_respects_dependencies_and_counts() {
        let list = gen_tree(TreeKind::BinaryTree, 6, 3).unwrap();
        let dag = build_dag(&list, &one_proc()).unwrap();
        let mut a = TileMatrix::make_random(6, 3, 4, 4).unwrap();
        let (_, report) = execute(&mut a, &dag, 3).unwrap();
        assert_eq!(report.trace.len(), dag.len());
        let mut end = vec![0u128; dag.len()];
        for e in &report.trace {
            end[e.task] = e.end_ns;
        }
        for e in &report.trace {
            for &u in dag.predecessors(e.task) {
                assert!(end[u] <= e.start_ns, "task {} started before pred {u} ended", e.task);
            }
        }
        let total: usize = report.task_counts.values().sum();
        assert_eq!(total, dag.len());
    }

    #[test]
    fn wide_matrix_factorizes_and_verifies() {
        let (mt, nt, b) = (2usize, 3usize, 4usize);
        let a0 = TileMatrix::make_random(mt, nt, b, 13).unwrap();
        let list = gen_tree(TreeKind::Greedy, mt, nt).unwrap();
        let dag = build_dag(&list, &one_proc()).unwrap();
        let mut a = a0.clone();
        let (store, _) = execute(&mut a, &dag, 2).unwrap();
        let q = build_q(&store, &list, b).unwrap();
        assert_eq!((q.rows(), q.cols()), (mt * b, mt * b));
        let (orth, resid) = verify(&a0, &q, &a).unwrap();
        let n = a0.scalar_cols();
        assert!(orth <= orthogonality_threshold(n));
        assert!(resid <= residual_threshold(n));
    }

    #[test]
    fn trace_csv_lists_every_task() {
        let list = gen_tree(TreeKind::FlatTree, 3, 2).unwrap();
        let dag = build_dag(&list, &one_proc()).unwrap();
        let mut a = TileMatrix::make_random(3, 2, 2, 1).unwrap();
        let (_, report) = execute(&mut a, &dag, 1).unwrap();
        let csv = trace_csv(&dag, &report);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("task,kind,i,piv,k,j,worker,start_ns,end_ns"));
        assert_eq!(lines.count(), dag.len());
    }

    #[test]
    fn execute_rejects_mismatched_shapes() {
        let list = gen_tree(TreeKind::FlatTree, 4, 2).unwrap();
        let dag = build_dag(&list, &one_proc()).unwrap();
        let mut wrong = TileMatrix::make_random(4, 3, 4, 1).unwrap();
        assert!(execute(&mut wrong, &dag, 1).is_err());
        let mut ok = TileMatrix::make_random(4, 2, 4, 1).unwrap();
        assert!(execute(&mut ok, &dag, 0).is_err());
    }

    #[test]
    fn build_q_fails_on_missing_reflectors() {
        let list = gen_tree(TreeKind::FlatTree, 2, 1).unwrap();
        let store = ReflectorStore::new();
        assert!(matches!(build_q(&store, &list, 2), Err(Error::CorruptedStore(_))));
    }

    #[test]
    fn verify_exact_and_perturbed() {
        let a0 = {
            let mut m = TileMatrix::zeros(1, 1, 2).unwrap();
            m.tile_mut(0, 0).set(0, 0, 1.0);
            m.tile_mut(0, 0).set(1, 1, 1.0);
            m
        };
        let q = DenseMatrix::eye(2, 2);
        let (orth, resid) = verify(&a0, &q, &a0).unwrap();
        assert_eq!((orth, resid), (0.0, 0.0));

        let mut r = a0.clone();
        r.tile_mut(0, 0).set(0, 1, 1.0);
        let (_, resid) = verify(&a0, &q, &r).unwrap();
        let norm = a0.to_dense().norm_fro();
        assert!(resid >= 0.5 / norm);

        let bad_q = DenseMatrix::eye(3, 2);
        assert!(verify(&a0, &bad_q, &a0).is_err());
    }
}
