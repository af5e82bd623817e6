//! The hierarchical elimination-list generator over a virtual cluster
//! grid, plus presets reproducing prior algorithms.
//!
//! Rows are dealt cyclically to `p` virtual clusters (row `i` lives on
//! cluster `i mod p` at local index `i / p`). For a panel `k`, each
//! cluster's local view splits into four levels: the TS level (flat
//! domains of `a` rows killed by their head with TS kernels), the low
//! level (a TT tree over the domain heads, rooted at the local
//! diagonal), the coupling level (a domino chain from the cluster's top
//! row down to the local diagonal), and the high level (a TT tree over
//! the `p` top rows, rooted at the panel's diagonal row).

use serde::{Deserialize, Serialize};

use crate::tile_store::Distribution;
use crate::trees::{
    generate_from_plans, EliminationList, PanelPlan, ReductionGroup, TreeKind,
};
use crate::{invalid, Result};

/// All parameters of the hierarchical algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HqrConfig {
    pub mt: usize,
    pub nt: usize,
    /// Virtual cluster grid rows.
    pub p: usize,
    /// Virtual cluster grid columns; affects data placement only, never
    /// the shape of the row-reduction trees.
    #[serde(default = "default_one")]
    pub q: usize,
    /// TS domain size in tiles; `a = 1` uses TT kernels only.
    pub a: usize,
    /// Intra-cluster tree over domain heads.
    pub low: TreeKind,
    /// Inter-cluster tree over the top rows.
    pub high: TreeKind,
    /// Couple local and global reductions through the domino chain.
    pub domino: bool,
    /// Data distribution used for task placement and communication
    /// analysis.
    pub dist: Distribution,
}

fn default_one() -> usize {
    1
}

impl HqrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mt == 0 || self.nt == 0 {
            return Err(invalid(format!("matrix must have at least one tile, got {}x{}", self.mt, self.nt)));
        }
        if self.p == 0 || self.q == 0 || self.a == 0 {
            return Err(invalid("p, q, and a must all be positive"));
        }
        Ok(())
    }
}

/// Reduction level of a subdiagonal tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TileLevel {
    /// Killed inside a TS domain by the domain head.
    Ts0,
    /// A domain head strictly below the local diagonal, killed by the
    /// low-level tree.
    Low1,
    /// Between the cluster's top row and the local diagonal, killed by
    /// the domino chain.
    Domino2,
    /// A cluster's top row for this panel, killed by the high-level tree.
    High3,
    /// The panel's diagonal tile; never killed.
    Root,
}

/// Per-panel geometry of one cluster's local view.
struct ClusterView {
    /// Global row of the cluster's top tile for this panel.
    top: usize,
    /// Local index of the top tile.
    t_c: usize,
    /// Local row count of the cluster.
    m_loc: usize,
}

fn cluster_view(cfg: &HqrConfig, c: usize, k: usize) -> Option<ClusterView> {
    if c >= cfg.mt {
        return None;
    }
    let m_loc = (cfg.mt - c).div_ceil(cfg.p);
    let t_c = if c >= k { 0 } else { (k - c).div_ceil(cfg.p) };
    if t_c >= m_loc {
        return None;
    }
    Some(ClusterView { top: t_c * cfg.p + c, t_c, m_loc })
}

/// Classify tile `(i, k)` into its reduction level.
pub fn tile_level(cfg: &HqrConfig, i: usize, k: usize) -> Result<TileLevel> {
    cfg.validate()?;
    if k >= cfg.mt.min(cfg.nt) {
        return Err(invalid(format!("panel {k} out of range")));
    }
    if i < k || i >= cfg.mt {
        return Err(invalid(format!("tile ({i},{k}) is not on or below the diagonal")));
    }
    if i == k {
        return Ok(TileLevel::Root);
    }
    let c = i % cfg.p;
    let l = i / cfg.p;
    let view = cluster_view(cfg, c, k).expect("row below diagonal implies an active cluster");
    let ld = k;
    if l == view.t_c {
        return Ok(TileLevel::High3);
    }
    if l <= ld {
        return Ok(TileLevel::Domino2);
    }
    // Strictly below the local diagonal: domain structure decides.
    let s = (l / cfg.a) * cfg.a;
    if l == s && s > ld {
        Ok(TileLevel::Low1)
    } else {
        Ok(TileLevel::Ts0)
    }
}

/// Build the hierarchical elimination list: per panel, TS domains, the
/// low-level reduction rooted at the local diagonal, the domino chain,
/// and the high-level reduction of the top rows, scheduled under the
/// unit-time model.
pub fn gen_hqr(cfg: &HqrConfig) -> Result<EliminationList> {
    cfg.validate()?;
    let panels = cfg.mt.min(cfg.nt);
    let mut plans = Vec::with_capacity(panels);

    for k in 0..panels {
        let ld = k;
        let mut ts_groups = Vec::new();
        let mut low_groups = Vec::new();
        let mut domino_groups = Vec::new();
        let mut tops = Vec::new();

        for c in 0..cfg.p {
            let Some(view) = cluster_view(cfg, c, k) else { continue };
            tops.push(view.top);
            let to_global = |l: usize| l * cfg.p + c;

            // TS domains and the heads they leave for the low level.
            let mut heads = Vec::new();
            if ld + 1 < view.m_loc {
                let mut s = (ld / cfg.a) * cfg.a;
                while s < view.m_loc {
                    let end = (s + cfg.a).min(view.m_loc);
                    if end > ld {
                        let head = s.max(ld);
                        if head + 1 < end {
                            ts_groups.push(ReductionGroup {
                                kind: TreeKind::FlatTree,
                                ts: true,
                                leaves: (head..end).map(to_global).collect(),
                            });
                        }
                        if s > ld {
                            heads.push(s);
                        }
                    }
                    s += cfg.a;
                }
            }

            let dom_end = ld.min(view.m_loc - 1);
            if cfg.domino {
                if ld < view.m_loc {
                    let mut leaves = vec![ld];
                    leaves.extend(&heads);
                    low_groups.push(ReductionGroup {
                        kind: cfg.low,
                        ts: false,
                        leaves: leaves.into_iter().map(to_global).collect(),
                    });
                }
                if dom_end > view.t_c {
                    domino_groups.push(ReductionGroup {
                        kind: TreeKind::FlatTree,
                        ts: false,
                        leaves: (view.t_c..=dom_end).map(to_global).collect(),
                    });
                }
            } else {
                // Domino off: the coupling region merges into the low
                // tree, whose survivor becomes the cluster's top row.
                let mut leaves: Vec<usize> = (view.t_c..=dom_end).collect();
                leaves.extend(&heads);
                low_groups.push(ReductionGroup {
                    kind: cfg.low,
                    ts: false,
                    leaves: leaves.into_iter().map(to_global).collect(),
                });
            }
        }

        tops.sort_unstable();
        debug_assert_eq!(tops.first().copied(), Some(k));

        let mut groups = ts_groups;
        groups.append(&mut low_groups);
        groups.append(&mut domino_groups);
        if tops.len() >= 2 {
            groups.push(ReductionGroup { kind: cfg.high, ts: false, leaves: tops });
        }
        plans.push(PanelPlan { panel: k, groups });
    }

    Ok(generate_from_plans(cfg.mt, cfg.nt, &plans))
}

/// Hierarchical parameters reproducing the block-row binary-tree
/// algorithm: one virtual cluster, TS domains of `mt / r` rows under a
/// binary tree, block data distribution over `r` processes.
pub fn preset_slhd10(mt: usize, nt: usize, r: usize) -> Result<HqrConfig> {
    if mt == 0 || nt == 0 || r == 0 {
        return Err(invalid("dimensions and process count must be positive"));
    }
    if !mt.is_multiple_of(r) {
        return Err(invalid(format!("process count {r} must divide mt={mt}")));
    }
    Ok(HqrConfig {
        mt,
        nt,
        p: 1,
        q: 1,
        a: mt / r,
        low: TreeKind::BinaryTree,
        high: TreeKind::BinaryTree,
        domino: false,
        dist: Distribution::Block1d { r },
    })
}

/// Hierarchical parameters reproducing the plain flat-tree tile QR:
/// one global TS flat tree in which the diagonal kills everything
/// sequentially.
pub fn preset_bbd10(mt: usize, nt: usize) -> HqrConfig {
    HqrConfig {
        mt,
        nt,
        p: 1,
        q: 1,
        a: mt,
        low: TreeKind::FlatTree,
        high: TreeKind::FlatTree,
        domino: false,
        dist: Distribution::Cyclic2d { p: 1, q: 1 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trees::{critical_path_unit, gen_tree, validate_list, TREE_KINDS};

    fn cfg(mt: usize, nt: usize, p: usize, a: usize, low: TreeKind, high: TreeKind, domino: bool) -> HqrConfig {
        HqrConfig {
            mt,
            nt,
            p,
            q: 1,
            a,
            low,
            high,
            domino,
            dist: Distribution::Cyclic2d { p, q: 1 },
        }
    }

    fn has(list: &EliminationList, victim: usize, pivot: usize, panel: usize) -> bool {
        list.iter().any(|e| e.victim == victim && e.pivot == pivot && e.panel == panel)
    }

    #[test]
    fn degenerate_hierarchy_equals_base_trees() {
        for kind in TREE_KINDS {
            for (mt, nt) in [(12, 3), (8, 5), (16, 2)] {
                let hqr = gen_hqr(&cfg(mt, nt, 1, 1, kind, kind, false)).unwrap();
                let base = gen_tree(kind, mt, nt).unwrap();
                assert_eq!(hqr, base, "{kind} {mt}x{nt}");
            }
        }
    }

    #[test]
    fn bbd10_is_flat_tree_with_ts_kernels() {
        for (mt, nt) in [(12, 1), (12, 3), (2, 1), (9, 4)] {
            let preset = gen_hqr(&preset_bbd10(mt, nt)).unwrap();
            let flat = gen_tree(TreeKind::FlatTree, mt, nt).unwrap();
            assert_eq!(preset.len(), flat.len());
            for (a, b) in preset.iter().zip(flat.iter()) {
                assert_eq!((a.victim, a.pivot, a.panel, a.step), (b.victim, b.pivot, b.panel, b.step));
                assert!(a.ts);
                assert!(!b.ts);
            }
        }
    }

    #[test]
    fn slhd10_parameters() {
        let c = preset_slhd10(12, 2, 3).unwrap();
        assert_eq!((c.p, c.a), (1, 4));
        assert_eq!(c.dist, Distribution::Block1d { r: 3 });
        assert_eq!(c.low, TreeKind::BinaryTree);
        assert!(!c.domino);

        assert_eq!(preset_slhd10(12, 2, 1).unwrap().a, 12);
        assert_eq!(preset_slhd10(12, 2, 12).unwrap().a, 1);
        assert!(preset_slhd10(12, 2, 5).is_err());

        // a = 1 degenerates to the pure binary tree over all rows.
        let pure = gen_hqr(&preset_slhd10(12, 2, 12).unwrap()).unwrap();
        let binary = gen_tree(TreeKind::BinaryTree, 12, 2).unwrap();
        for (a, b) in pure.iter().zip(binary.iter()) {
            assert_eq!((a.victim, a.pivot, a.panel), (b.victim, b.pivot, b.panel));
        }
    }

    #[test]
    fn worked_example_couplings() {
        // 24x10 tiles on a 3x1 virtual grid with domains of 2.
        let c = cfg(24, 10, 3, 2, TreeKind::FlatTree, TreeKind::FlatTree, true);
        let list = gen_hqr(&c).unwrap();
        assert!(validate_list(&list).is_empty());
        // Domino kills inside clusters 1 and 2 for panel 1.
        assert!(has(&list, 4, 1, 1));
        assert!(has(&list, 5, 2, 1));
        // Inter-cluster high-level eliminations of panel 0.
        assert!(has(&list, 1, 0, 0));
        assert!(has(&list, 2, 0, 0));
    }

    #[test]
    fn worked_example_tile_levels() {
        let c = cfg(24, 10, 3, 2, TreeKind::FlatTree, TreeKind::FlatTree, true);
        assert_eq!(tile_level(&c, 4, 1).unwrap(), TileLevel::Domino2);
        assert_eq!(tile_level(&c, 6, 2).unwrap(), TileLevel::Domino2);
        assert_eq!(tile_level(&c, 1, 0).unwrap(), TileLevel::High3);
        assert_eq!(tile_level(&c, 2, 0).unwrap(), TileLevel::High3);
        assert_eq!(tile_level(&c, 0, 0).unwrap(), TileLevel::Root);
        assert!(tile_level(&c, 0, 1).is_err());
    }

    #[test]
    fn level_partition_counts() {
        let c = cfg(13, 6, 3, 2, TreeKind::Greedy, TreeKind::BinaryTree, true);
        for k in 0..6 {
            let mut high_or_root = 0;
            for i in k..13 {
                match tile_level(&c, i, k).unwrap() {
                    TileLevel::High3 | TileLevel::Root => high_or_root += 1,
                    _ => {}
                }
            }
            assert_eq!(high_or_root, 3.min(13 - k), "panel {k}");
        }
    }

    #[test]
    fn ts_flags_match_tile_levels() {
        for domino in [true, false] {
            let c = cfg(12, 5, 2, 2, TreeKind::Greedy, TreeKind::Fibonacci, domino);
            let list = gen_hqr(&c).unwrap();
            assert!(validate_list(&list).is_empty());
            for e in list.iter() {
                let level = tile_level(&c, e.victim, e.panel).unwrap();
                assert_eq!(e.ts, level == TileLevel::Ts0, "elim {e:?} level {level:?}");
            }
        }
    }

    #[test]
    fn lattice_is_valid() {
        for p in 1..=4 {
            for a in [1, 2, 4] {
                for domino in [true, false] {
                    let c = cfg(11, 4, p, a, TreeKind::Greedy, TreeKind::BinaryTree, domino);
                    let list = gen_hqr(&c).unwrap();
                    let v = validate_list(&list);
                    assert!(v.is_empty(), "p={p} a={a} domino={domino}: {:?}", v[0]);
                }
            }
        }
    }

    #[test]
    fn hierarchical_lists_reschedule_stably() {
        for p in [2, 3] {
            for a in [1, 2] {
                for domino in [true, false] {
                    let c = cfg(13, 5, p, a, TreeKind::Greedy, TreeKind::BinaryTree, domino);
                    let list = gen_hqr(&c).unwrap();
                    let re = crate::trees::unit_schedule(&list).unwrap();
                    assert_eq!(list, re, "p={p} a={a} domino={domino}");
                }
            }
        }
        // Greedy high-level trees pair at schedule time as well.
        for (low, high) in [
            (TreeKind::Greedy, TreeKind::Greedy),
            (TreeKind::FlatTree, TreeKind::Greedy),
            (TreeKind::Fibonacci, TreeKind::Greedy),
        ] {
            let c = cfg(16, 6, 4, 2, low, high, true);
            let list = gen_hqr(&c).unwrap();
            let re = crate::trees::unit_schedule(&list).unwrap();
            assert_eq!(list, re, "low={low} high={high}");
        }
    }

    #[test]
    fn q_never_changes_the_tree_shape() {
        let base = gen_hqr(&cfg(10, 4, 3, 2, TreeKind::Greedy, TreeKind::FlatTree, true)).unwrap();
        let mut wide = cfg(10, 4, 3, 2, TreeKind::Greedy, TreeKind::FlatTree, true);
        wide.q = 4;
        wide.dist = Distribution::Cyclic2d { p: 3, q: 4 };
        assert_eq!(gen_hqr(&wide).unwrap(), base);
    }

    #[test]
    fn tall_skinny_ts_fraction_tends_to_half() {
        let c = cfg(200, 1, 1, 2, TreeKind::FlatTree, TreeKind::FlatTree, true);
        let list = gen_hqr(&c).unwrap();
        let ts = list.iter().filter(|e| e.ts).count();
        let frac = ts as f64 / list.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn hqr_beats_or_ties_flat_on_unit_critical_path() {
        // Sanity: the hierarchy never loses to the plain flat tree.
        let c = cfg(16, 4, 4, 2, TreeKind::Greedy, TreeKind::Greedy, true);
        let hqr_cp = critical_path_unit(&gen_hqr(&c).unwrap());
        let flat_cp = critical_path_unit(&gen_tree(TreeKind::FlatTree, 16, 4).unwrap());
        assert!(hqr_cp <= flat_cp);
    }

    #[test]
    fn config_json_schema() {
        let text = r#"{"mt":24,"nt":10,"p":3,"q":1,"a":2,"low":"greedy","high":"fibonacci",
                       "domino":true,"dist":{"kind":"cyclic2d","p":3,"q":1}}"#;
        let cfg: HqrConfig = serde_json::from_str(text).unwrap();
        assert_eq!((cfg.mt, cfg.nt, cfg.p, cfg.q, cfg.a), (24, 10, 3, 1, 2));
        assert_eq!((cfg.low, cfg.high, cfg.domino), (TreeKind::Greedy, TreeKind::Fibonacci, true));
        assert_eq!(cfg.dist, Distribution::Cyclic2d { p: 3, q: 1 });

        let round: HqrConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(round, cfg);

        for (dist, json) in [
            (Distribution::Cyclic1d { r: 4 }, r#"{"kind":"cyclic1d","r":4}"#),
            (Distribution::Block1d { r: 2 }, r#"{"kind":"block1d","r":2}"#),
        ] {
            assert_eq!(serde_json::to_string(&dist).unwrap(), json);
        }

        // q defaults to 1 when omitted.
        let cfg: HqrConfig = serde_json::from_str(
            r#"{"mt":4,"nt":2,"p":1,"a":1,"low":"flat","high":"flat",
                "domino":false,"dist":{"kind":"cyclic1d","r":1}}"#,
        )
        .unwrap();
        assert_eq!(cfg.q, 1);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg(4, 2, 1, 1, TreeKind::FlatTree, TreeKind::FlatTree, false);
        c.p = 0;
        assert!(gen_hqr(&c).is_err());
        c.p = 1;
        c.a = 0;
        assert!(gen_hqr(&c).is_err());
        c.a = 1;
        c.mt = 0;
        assert!(gen_hqr(&c).is_err());
    }
}
