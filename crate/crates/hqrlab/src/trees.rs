//! Elimination-list generation, unit-time scheduling, and validation
//! for the flat, binary, greedy, and Fibonacci reduction trees.
//!
//! An elimination `elim(victim, pivot, panel)` combines rows `victim`
//! and `pivot` to zero out tile `(victim, panel)`. The ordered list of
//! eliminations fully determines a tiled QR algorithm. Steps are
//! assigned under the unit-time model: one elimination (with its
//! updates) per time unit, rows disjoint within a step.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{invalid, Error, Result};

/// One orthogonal row combination zeroing tile `(victim, panel)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Elimination {
    pub victim: usize,
    pub pivot: usize,
    pub panel: usize,
    /// Unit-model time step (1-based, 0 = unscheduled).
    pub step: usize,
    /// True when the kill uses TS kernels (square victim inside a
    /// flat-tree domain), false for TT kernels.
    pub ts: bool,
}

/// An ordered elimination list for an `mt x nt` tile matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EliminationList {
    mt: usize,
    nt: usize,
    elims: Vec<Elimination>,
}

impl EliminationList {
    pub fn new(mt: usize, nt: usize, elims: Vec<Elimination>) -> Self {
        EliminationList { mt, nt, elims }
    }

    pub fn mt(&self) -> usize {
        self.mt
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    pub fn panels(&self) -> usize {
        self.mt.min(self.nt)
    }

    pub fn elims(&self) -> &[Elimination] {
        &self.elims
    }

    pub fn len(&self) -> usize {
        self.elims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elims.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Elimination> {
        self.elims.iter()
    }

    /// CSV table `row,panel,killer,step`, one line per elimination,
    /// sorted by (row, panel) to match the killer/step table layout.
    pub fn table_csv(&self) -> String {
        let mut rows: Vec<&Elimination> = self.elims.iter().collect();
        rows.sort_by_key(|e| (e.victim, e.panel));
        let mut out = String::from("row,panel,killer,step\n");
        for e in rows {
            out.push_str(&format!("{},{},{},{}\n", e.victim, e.panel, e.pivot, e.step));
        }
        out
    }
}

/// The four base reduction-tree shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TreeKind {
    #[serde(rename = "flat")]
    FlatTree,
    #[serde(rename = "binary")]
    BinaryTree,
    #[serde(rename = "greedy")]
    Greedy,
    #[serde(rename = "fibonacci")]
    Fibonacci,
}

pub const TREE_KINDS: [TreeKind; 4] =
    [TreeKind::FlatTree, TreeKind::BinaryTree, TreeKind::Greedy, TreeKind::Fibonacci];

impl fmt::Display for TreeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TreeKind::FlatTree => "flat",
            TreeKind::BinaryTree => "binary",
            TreeKind::Greedy => "greedy",
            TreeKind::Fibonacci => "fibonacci",
        };
        f.write_str(s)
    }
}

impl FromStr for TreeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "flat" | "flattree" => Ok(TreeKind::FlatTree),
            "binary" | "binarytree" => Ok(TreeKind::BinaryTree),
            "greedy" => Ok(TreeKind::Greedy),
            "fibonacci" => Ok(TreeKind::Fibonacci),
            other => Err(invalid(format!("unknown tree kind '{other}'"))),
        }
    }
}

/// One reduction over a sorted leaf set; `leaves[0]` survives.
#[derive(Debug, Clone)]
pub(crate) struct ReductionGroup {
    pub kind: TreeKind,
    pub ts: bool,
    pub leaves: Vec<usize>,
}

/// All reductions of one panel, in canonical order.
#[derive(Debug, Clone)]
pub(crate) struct PanelPlan {
    pub panel: usize,
    pub groups: Vec<ReductionGroup>,
}

/// Static (time-independent) victim/killer pairs of a tree shape over
/// leaf positions. Greedy has no static shape; its pairing is decided
/// by the scheduler.
fn tree_pairs(leaves: &[usize], kind: TreeKind) -> Vec<(usize, usize)> {
    let h = leaves.len();
    let mut pairs = Vec::new();
    if h < 2 {
        return pairs;
    }
    match kind {
        TreeKind::FlatTree => {
            for j in 1..h {
                pairs.push((leaves[j], leaves[0]));
            }
        }
        TreeKind::BinaryTree => {
            // Distance-doubling: round s pairs position j with j - 2^s
            // whenever j mod 2^(s+1) == 2^s.
            let mut stride = 1usize;
            while stride < h {
                let mut j = stride;
                while j < h {
                    pairs.push((leaves[j], leaves[j - stride]));
                    j += 2 * stride;
                }
                stride *= 2;
            }
        }
        TreeKind::Fibonacci => {
            // Kill waves of generalized Fibonacci sizes 1,1,2,3,5,...
            // from the bottom; each wave is killed by the rows directly
            // above it, clamped so killers exist above the wave.
            let (mut fa, mut fb) = (1usize, 1usize);
            let mut lo = h;
            while lo > 1 {
                let z = fa.min(lo / 2);
                for idx in 0..z {
                    pairs.push((leaves[lo - z + idx], leaves[lo - 2 * z + idx]));
                }
                lo -= z;
                let next = fa + fb;
                fa = fb;
                fb = next;
            }
        }
        TreeKind::Greedy => unreachable!("greedy pairing is schedule-driven"),
    }
    pairs
}

enum GroupState {
    Static {
        pairs: Vec<(usize, usize)>,
        fired: Vec<Option<usize>>,
    },
    Pool {
        alive: Vec<usize>,
        fired: Vec<(usize, usize, usize)>,
        complete: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Involvement {
    Pair(usize, usize),
    Member(usize),
}

/// Run the unit-time simulation over panel plans and return the
/// elimination list in canonical (structural) order with steps.
///
/// Firing rules for `elim(v, p, k)` at step `t`:
/// (a) both rows zeroed in panel `k-1` at a step `< t`;
/// (b) neither row participates in another elimination at step `t`;
/// (c) per row and panel, eliminations fire in structural order
///     (a pivot chain advances one kill per step, and a row is never
///     killed while it still owes earlier kills).
/// Greedy groups pick their pairs at fire time: among the present
/// leaves sorted ascending, the bottom `floor(r/2)` rows are killed by
/// the rows `floor(r/2)` positions above them.
pub(crate) fn generate_from_plans(mt: usize, nt: usize, plans: &[PanelPlan]) -> EliminationList {
    let mut states: Vec<GroupState> = Vec::new();
    let mut meta: Vec<(usize, bool)> = Vec::new(); // (panel, ts) per group
    let mut queues: HashMap<(usize, usize), VecDeque<Involvement>> = HashMap::new();
    let mut total = 0usize;

    for plan in plans {
        for group in &plan.groups {
            debug_assert!(group.leaves.windows(2).all(|w| w[0] < w[1]));
            if group.leaves.len() < 2 {
                continue;
            }
            let g = states.len();
            total += group.leaves.len() - 1;
            meta.push((plan.panel, group.ts));
            if group.kind == TreeKind::Greedy {
                for &x in &group.leaves {
                    queues.entry((plan.panel, x)).or_default().push_back(Involvement::Member(g));
                }
                states.push(GroupState::Pool { alive: group.leaves.clone(), fired: Vec::new(), complete: false });
            } else {
                let pairs = tree_pairs(&group.leaves, group.kind);
                for (pi, &(v, p)) in pairs.iter().enumerate() {
                    queues.entry((plan.panel, v)).or_default().push_back(Involvement::Pair(g, pi));
                    queues.entry((plan.panel, p)).or_default().push_back(Involvement::Pair(g, pi));
                }
                let fired = vec![None; pairs.len()];
                states.push(GroupState::Static { pairs, fired });
            }
        }
    }

    let mut zeroed: HashMap<(usize, usize), usize> = HashMap::new();
    let mut done = 0usize;
    let mut t = 0usize;
    let limit = 4 * total + mt * nt + 16;

    while done < total {
        t += 1;
        assert!(t <= limit, "reduction plan deadlocked at step {t}");
        let mut busy: HashSet<usize> = HashSet::new();

        for g in 0..states.len() {
            let (panel, _) = meta[g];
            let ready = |x: usize, zeroed: &HashMap<(usize, usize), usize>| -> bool {
                panel == 0 || zeroed.get(&(x, panel - 1)).is_some_and(|&s| s < t)
            };
            match &mut states[g] {
                GroupState::Static { pairs, fired } => {
                    for pi in 0..pairs.len() {
                        if fired[pi].is_some() {
                            continue;
                        }
                        let (v, p) = pairs[pi];
                        if busy.contains(&v) || busy.contains(&p) {
                            continue;
                        }
                        if !ready(v, &zeroed) || !ready(p, &zeroed) {
                            continue;
                        }
                        let want = Involvement::Pair(g, pi);
                        if queues.get(&(panel, v)).and_then(|q| q.front()) != Some(&want)
                            || queues.get(&(panel, p)).and_then(|q| q.front()) != Some(&want)
                        {
                            continue;
                        }
                        fired[pi] = Some(t);
                        zeroed.insert((v, panel), t);
                        busy.insert(v);
                        busy.insert(p);
                        queues.get_mut(&(panel, v)).unwrap().pop_front();
                        queues.get_mut(&(panel, p)).unwrap().pop_front();
                        done += 1;
                    }
                }
                GroupState::Pool { alive, fired, complete } => {
                    if *complete {
                        continue;
                    }
                    let present: Vec<usize> = alive
                        .iter()
                        .copied()
                        .filter(|&x| {
                            !busy.contains(&x)
                                && ready(x, &zeroed)
                                && queues.get(&(panel, x)).and_then(|q| q.front())
                                    == Some(&Involvement::Member(g))
                        })
                        .collect();
                    let r = present.len();
                    let z = r / 2;
                    for idx in 0..z {
                        let v = present[r - z + idx];
                        let p = present[r - 2 * z + idx];
                        fired.push((v, p, t));
                        zeroed.insert((v, panel), t);
                        busy.insert(v);
                        busy.insert(p);
                        queues.get_mut(&(panel, v)).unwrap().pop_front();
                        alive.retain(|&x| x != v);
                        done += 1;
                    }
                    if alive.len() == 1 {
                        let survivor = alive[0];
                        let q = queues.get_mut(&(panel, survivor)).unwrap();
                        debug_assert_eq!(q.front(), Some(&Involvement::Member(g)));
                        q.pop_front();
                        *complete = true;
                    }
                }
            }
        }
    }

    let mut elims = Vec::with_capacity(total);
    for (g, state) in states.iter().enumerate() {
        let (panel, ts) = meta[g];
        match state {
            GroupState::Static { pairs, fired } => {
                for (pi, &(v, p)) in pairs.iter().enumerate() {
                    elims.push(Elimination { victim: v, pivot: p, panel, step: fired[pi].unwrap(), ts });
                }
            }
            GroupState::Pool { fired, .. } => {
                for &(v, p, s) in fired {
                    elims.push(Elimination { victim: v, pivot: p, panel, step: s, ts });
                }
            }
        }
    }
    EliminationList { mt, nt, elims }
}

/// Generate the elimination list of one base tree over all panels.
pub fn gen_tree(kind: TreeKind, mt: usize, nt: usize) -> Result<EliminationList> {
    if mt == 0 || nt == 0 {
        return Err(invalid(format!("matrix must have at least one tile, got {mt}x{nt}")));
    }
    let plans: Vec<PanelPlan> = (0..mt.min(nt))
        .map(|k| PanelPlan {
            panel: k,
            groups: vec![ReductionGroup { kind, ts: false, leaves: (k..mt).collect() }],
        })
        .collect();
    Ok(generate_from_plans(mt, nt, &plans))
}

/// A single validity violation, referring to list indices where known.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: Option<usize>,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    /// Panel, victim, or pivot outside the subdiagonal region.
    OutOfRange { victim: usize, pivot: usize, panel: usize },
    /// Tile eliminated more than once.
    Duplicate { victim: usize, panel: usize },
    /// A subdiagonal tile is never eliminated.
    Missing { victim: usize, panel: usize },
    /// A row participates before all its earlier-panel tiles are zeroed.
    NotReady { row: usize, needed_panel: usize },
    /// The pivot tile was zeroed earlier in the list.
    DeadPivot { pivot: usize, panel: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ViolationKind::OutOfRange { victim, pivot, panel } => {
                write!(f, "elim({victim},{pivot},{panel}) is out of range")
            }
            ViolationKind::Duplicate { victim, panel } => {
                write!(f, "tile ({victim},{panel}) eliminated more than once")
            }
            ViolationKind::Missing { victim, panel } => {
                write!(f, "tile ({victim},{panel}) is never eliminated")
            }
            ViolationKind::NotReady { row, needed_panel } => {
                write!(f, "row {row} used before its tile in panel {needed_panel} is zeroed")
            }
            ViolationKind::DeadPivot { pivot, panel } => {
                write!(f, "row {pivot} used as killer after tile ({pivot},{panel}) was zeroed")
            }
        }?;
        if let Some(i) = self.index {
            write!(f, " (list index {i})")?;
        }
        Ok(())
    }
}

/// Check coverage, readiness, and annihilator rules. Violations are
/// data, not errors; an empty vector means the list is valid.
pub fn validate_list(list: &EliminationList) -> Vec<Violation> {
    let (mt, nt) = (list.mt, list.nt);
    let panels = mt.min(nt);
    let mut violations = Vec::new();
    let mut position: HashMap<(usize, usize), usize> = HashMap::new();

    for (idx, e) in list.elims.iter().enumerate() {
        let in_range = e.panel < panels
            && e.victim > e.panel
            && e.victim < mt
            && e.pivot >= e.panel
            && e.pivot < mt
            && e.pivot != e.victim;
        if !in_range {
            violations.push(Violation {
                index: Some(idx),
                kind: ViolationKind::OutOfRange { victim: e.victim, pivot: e.pivot, panel: e.panel },
            });
            continue;
        }
        if position.insert((e.victim, e.panel), idx).is_some() {
            violations.push(Violation {
                index: Some(idx),
                kind: ViolationKind::Duplicate { victim: e.victim, panel: e.panel },
            });
        }
    }

    for k in 0..panels {
        for i in k + 1..mt {
            if !position.contains_key(&(i, k)) {
                violations.push(Violation { index: None, kind: ViolationKind::Missing { victim: i, panel: k } });
            }
        }
    }

    for (idx, e) in list.elims.iter().enumerate() {
        if e.panel >= panels || e.victim <= e.panel || e.victim >= mt {
            continue; // already reported as out of range
        }
        for row in [e.victim, e.pivot] {
            for kp in 0..e.panel {
                match position.get(&(row, kp)) {
                    Some(&pos) if pos < idx => {}
                    _ => {
                        violations.push(Violation {
                            index: Some(idx),
                            kind: ViolationKind::NotReady { row, needed_panel: kp },
                        });
                    }
                }
            }
        }
        if let Some(&pos) = position.get(&(e.pivot, e.panel)) {
            if pos < idx {
                violations.push(Violation {
                    index: Some(idx),
                    kind: ViolationKind::DeadPivot { pivot: e.pivot, panel: e.panel },
                });
            }
        }
    }

    violations
}

fn validation_error(violations: Vec<Violation>) -> Error {
    let first = violations.first().map(|v| v.to_string()).unwrap_or_default();
    Error::Validation(violations.len(), first)
}

/// Assign earliest-start unit steps to a valid list, firing
/// eliminations greedily in list order under the rules of
/// [`generate_from_plans`]. Deterministic and idempotent.
pub fn unit_schedule(list: &EliminationList) -> Result<EliminationList> {
    let violations = validate_list(list);
    if !violations.is_empty() {
        return Err(validation_error(violations));
    }
    let n = list.elims.len();
    let mut queues: HashMap<(usize, usize), VecDeque<usize>> = HashMap::new();
    for (idx, e) in list.elims.iter().enumerate() {
        queues.entry((e.panel, e.victim)).or_default().push_back(idx);
        queues.entry((e.panel, e.pivot)).or_default().push_back(idx);
    }
    let mut steps = vec![0usize; n];
    let mut zeroed: HashMap<(usize, usize), usize> = HashMap::new();
    let mut done = 0usize;
    let mut t = 0usize;
    while done < n {
        t += 1;
        assert!(t <= 4 * n + 16, "unit schedule stalled at step {t}");
        let mut busy: HashSet<usize> = HashSet::new();
        for (idx, e) in list.elims.iter().enumerate() {
            if steps[idx] != 0 {
                continue;
            }
            if busy.contains(&e.victim) || busy.contains(&e.pivot) {
                continue;
            }
            let ready = |x: usize| -> bool {
                e.panel == 0 || zeroed.get(&(x, e.panel - 1)).is_some_and(|&s| s < t)
            };
            if !ready(e.victim) || !ready(e.pivot) {
                continue;
            }
            if queues[&(e.panel, e.victim)].front() != Some(&idx)
                || queues[&(e.panel, e.pivot)].front() != Some(&idx)
            {
                continue;
            }
            steps[idx] = t;
            zeroed.insert((e.victim, e.panel), t);
            busy.insert(e.victim);
            busy.insert(e.pivot);
            queues.get_mut(&(e.panel, e.victim)).unwrap().pop_front();
            queues.get_mut(&(e.panel, e.pivot)).unwrap().pop_front();
            done += 1;
        }
    }
    let elims = list
        .elims
        .iter()
        .zip(steps)
        .map(|(e, step)| Elimination { step, ..*e })
        .collect();
    Ok(EliminationList { mt: list.mt, nt: list.nt, elims })
}

/// Largest step of a scheduled list (0 when there are no eliminations).
pub fn critical_path_unit(list: &EliminationList) -> usize {
    list.elims.iter().map(|e| e.step).max().unwrap_or(0)
}
