//! The six tile kernels of the tiled QR elimination, implemented with
//! Householder reflectors, plus their weight model.
//!
//! A kernel either factors (GEQRT, TSQRT, TTQRT) and produces a
//! [`Reflector`], or applies a stored reflector to trailing tiles
//! (UNMQR, TSMQR, TTMQR). Reflectors are kept out-of-place in a
//! [`ReflectorStore`] keyed by panel or elimination identity, never
//! packed into the matrix.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::tile_store::{DenseMatrix, Tile};
use crate::{invalid, Result};

/// Kernel kinds in the order of the elimination algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    Geqrt,
    Unmqr,
    Tsqrt,
    Tsmqr,
    Ttqrt,
    Ttmqr,
}

pub const KERNEL_KINDS: [KernelKind; 6] = [
    KernelKind::Geqrt,
    KernelKind::Unmqr,
    KernelKind::Tsqrt,
    KernelKind::Tsmqr,
    KernelKind::Ttqrt,
    KernelKind::Ttmqr,
];

impl KernelKind {
    /// Kernel weight in units of `b^3/3` floating-point operations.
    pub fn weight(self) -> u64 {
        match self {
            KernelKind::Geqrt => 4,
            KernelKind::Unmqr => 6,
            KernelKind::Tsqrt => 6,
            KernelKind::Tsmqr => 12,
            KernelKind::Ttqrt => 2,
            KernelKind::Ttmqr => 6,
        }
    }

    pub fn index(self) -> usize {
        match self {
            KernelKind::Geqrt => 0,
            KernelKind::Unmqr => 1,
            KernelKind::Tsqrt => 2,
            KernelKind::Tsmqr => 3,
            KernelKind::Ttqrt => 4,
            KernelKind::Ttmqr => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::Geqrt => "GEQRT",
            KernelKind::Unmqr => "UNMQR",
            KernelKind::Tsqrt => "TSQRT",
            KernelKind::Tsmqr => "TSMQR",
            KernelKind::Ttqrt => "TTQRT",
            KernelKind::Ttmqr => "TTMQR",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Kernel weight in `b^3/3` flop units.
pub fn kernel_weight(kind: KernelKind) -> u64 {
    kind.weight()
}

/// Compact Householder data of one factorization kernel.
///
/// For GEQRT, `v` is unit-lower-trapezoidal (unit diagonal stored
/// explicitly) and the reflector `j` acts on rows `j..b` of one tile.
/// For TSQRT/TTQRT, `v` holds the bottom-tile part of each Householder
/// vector; the top part is implicitly `e_j`, so reflector `j` acts on
/// top row `j` and the whole bottom tile.
#[derive(Debug, Clone)]
pub struct Reflector {
    kind: KernelKind,
    b: usize,
    v: Tile,
    tau: Vec<f64>,
}

impl Reflector {
    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn b(&self) -> usize {
        self.b
    }

    pub fn v(&self) -> &Tile {
        &self.v
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    /// Bitwise equality, used by determinism checks.
    pub fn bits_eq(&self, other: &Reflector) -> bool {
        self.kind == other.kind
            && self.b == other.b
            && self.v.as_slice().iter().zip(other.v.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.tau.iter().zip(&other.tau).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Householder vector of `[alpha; x]`: returns `(beta, v0, tau)` where
/// the reflector maps the column to `[beta; 0]`, `v = [1; x / v0]`.
/// A zero `x` yields `tau = 0` (identity reflector, beta = alpha).
fn householder(alpha: f64, x: &[f64]) -> (f64, f64, f64) {
    let sigma: f64 = x.iter().map(|v| v * v).sum();
    if sigma == 0.0 {
        (alpha, 1.0, 0.0)
    } else {
        let mu = (alpha * alpha + sigma).sqrt();
        let beta = if alpha >= 0.0 { -mu } else { mu };
        let v0 = alpha - beta;
        let tau = (beta - alpha) / beta;
        (beta, v0, tau)
    }
}

/// Factor one tile: `A = Q_H * R`. `A` is overwritten with `R`
/// (explicit zeros below the diagonal); returns the reflector.
pub fn geqrt(a: &mut Tile) -> Reflector {
    let b = a.b();
    let mut v = Tile::zeros(b);
    let mut tau = vec![0.0; b];
    let mut x = vec![0.0; b];
    for (j, tj) in tau.iter_mut().enumerate() {
        let sub = b - j - 1;
        for (idx, i) in (j + 1..b).enumerate() {
            x[idx] = a.get(i, j);
        }
        let (beta, v0, t) = householder(a.get(j, j), &x[..sub]);
        *tj = t;
        v.set(j, j, 1.0);
        if t != 0.0 {
            for i in j + 1..b {
                v.set(i, j, a.get(i, j) / v0);
            }
        }
        a.set(j, j, beta);
        for i in j + 1..b {
            a.set(i, j, 0.0);
        }
        if t != 0.0 {
            for l in j + 1..b {
                let mut w = a.get(j, l);
                for i in j + 1..b {
                    w += v.get(i, j) * a.get(i, l);
                }
                a.set(j, l, a.get(j, l) - t * w);
                for i in j + 1..b {
                    a.set(i, l, a.get(i, l) - t * v.get(i, j) * w);
                }
            }
        }
    }
    Reflector { kind: KernelKind::Geqrt, b, v, tau }
}

/// Apply `Q_H^T` from a GEQRT reflector to one tile.
pub fn unmqr(h: &Reflector, c: &mut Tile) -> Result<()> {
    if h.kind != KernelKind::Geqrt {
        return Err(invalid(format!("unmqr needs a GEQRT reflector, got {}", h.kind)));
    }
    if c.b() != h.b {
        return Err(invalid("tile size does not match reflector"));
    }
    let b = h.b;
    for (j, &t) in h.tau.iter().enumerate() {
        if t == 0.0 {
            continue;
        }
        for l in 0..b {
            let mut w = c.get(j, l);
            for i in j + 1..b {
                w += h.v.get(i, j) * c.get(i, l);
            }
            c.set(j, l, c.get(j, l) - t * w);
            for i in j + 1..b {
                c.set(i, l, c.get(i, l) - t * h.v.get(i, j) * w);
            }
        }
    }
    Ok(())
}

/// Shared factorization of a stacked pair `[top; bot]` where `top` is
/// upper-triangular. `top` becomes the combined `R`, `bot` is zeroed.
fn factor_pair(top: &mut Tile, bot: &mut Tile, kind: KernelKind) -> Reflector {
    let b = top.b();
    debug_assert_eq!(b, bot.b());
    let mut v = Tile::zeros(b);
    let mut tau = vec![0.0; b];
    for (j, tj) in tau.iter_mut().enumerate() {
        let (beta, v0, t) = householder(top.get(j, j), bot.col(j));
        *tj = t;
        if t != 0.0 {
            for i in 0..b {
                v.set(i, j, bot.get(i, j) / v0);
            }
        }
        top.set(j, j, beta);
        for i in 0..b {
            bot.set(i, j, 0.0);
        }
        if t != 0.0 {
            for l in j + 1..b {
                let mut w = top.get(j, l);
                for i in 0..b {
                    w += v.get(i, j) * bot.get(i, l);
                }
                top.set(j, l, top.get(j, l) - t * w);
                for i in 0..b {
                    bot.set(i, l, bot.get(i, l) - t * v.get(i, j) * w);
                }
            }
        }
    }
    Reflector { kind, b, v, tau }
}

fn apply_pair_qt(h: &Reflector, c_top: &mut Tile, c_bot: &mut Tile) {
    let b = h.b;
    for (j, &t) in h.tau.iter().enumerate() {
        if t == 0.0 {
            continue;
        }
        for l in 0..b {
            let mut w = c_top.get(j, l);
            for i in 0..b {
                w += h.v.get(i, j) * c_bot.get(i, l);
            }
            c_top.set(j, l, c_top.get(j, l) - t * w);
            for i in 0..b {
                c_bot.set(i, l, c_bot.get(i, l) - t * h.v.get(i, j) * w);
            }
        }
    }
}

/// Kill a square tile with a triangle: `[R; A] = Q_H * [R'; 0]`.
/// `r` becomes `R'`, `a` is zeroed; returns the TSQRT reflector.
pub fn tsqrt(r: &mut Tile, a: &mut Tile) -> Reflector {
    factor_pair(r, a, KernelKind::Tsqrt)
}

/// Apply `Q_H^T` from a TSQRT reflector to a stacked tile pair.
pub fn tsmqr(h: &Reflector, c_top: &mut Tile, c_bot: &mut Tile) -> Result<()> {
    if h.kind != KernelKind::Tsqrt {
        return Err(invalid(format!("tsmqr needs a TSQRT reflector, got {}", h.kind)));
    }
    if c_top.b() != h.b || c_bot.b() != h.b {
        return Err(invalid("tile size does not match reflector"));
    }
    apply_pair_qt(h, c_top, c_bot);
    Ok(())
}

/// Kill a triangle with a triangle: `[R_top; R_bot] = Q_H * [R'; 0]`.
///
/// The triangular structure of the bottom tile is exploited only
/// logically; the stacked factorization is shared with [`tsqrt`] and
/// leaves the stored `V` upper-triangular when the input really is.
pub fn ttqrt(r_top: &mut Tile, r_bot: &mut Tile) -> Reflector {
    factor_pair(r_top, r_bot, KernelKind::Ttqrt)
}

/// Apply `Q_H^T` from a TTQRT reflector to a stacked tile pair.
pub fn ttmqr(h: &Reflector, c_top: &mut Tile, c_bot: &mut Tile) -> Result<()> {
    if h.kind != KernelKind::Ttqrt {
        return Err(invalid(format!("ttmqr needs a TTQRT reflector, got {}", h.kind)));
    }
    if c_top.b() != h.b || c_bot.b() != h.b {
        return Err(invalid("tile size does not match reflector"));
    }
    apply_pair_qt(h, c_top, c_bot);
    Ok(())
}

impl Reflector {
    /// Apply the forward transformation `Q_H` to rows of a dense matrix.
    ///
    /// `top` is the scalar row offset of the (only, for GEQRT) row
    /// block; pair reflectors additionally take the victim block at
    /// `bot`. Used for Q reconstruction.
    pub fn apply_q_dense(&self, w: &mut DenseMatrix, top: usize, bot: Option<usize>) {
        let b = self.b;
        let cols = w.cols();
        match self.kind {
            KernelKind::Geqrt => {
                debug_assert!(bot.is_none());
                for j in (0..b).rev() {
                    let t = self.tau[j];
                    if t == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        let mut acc = w.get(top + j, c);
                        for i in j + 1..b {
                            acc += self.v.get(i, j) * w.get(top + i, c);
                        }
                        w.set(top + j, c, w.get(top + j, c) - t * acc);
                        for i in j + 1..b {
                            w.set(top + i, c, w.get(top + i, c) - t * self.v.get(i, j) * acc);
                        }
                    }
                }
            }
            KernelKind::Tsqrt | KernelKind::Ttqrt => {
                let bot = bot.expect("pair reflector needs a bottom row block");
                for j in (0..b).rev() {
                    let t = self.tau[j];
                    if t == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        let mut acc = w.get(top + j, c);
                        for i in 0..b {
                            acc += self.v.get(i, j) * w.get(bot + i, c);
                        }
                        w.set(top + j, c, w.get(top + j, c) - t * acc);
                        for i in 0..b {
                            w.set(bot + i, c, w.get(bot + i, c) - t * self.v.get(i, j) * acc);
                        }
                    }
                }
            }
            _ => unreachable!("update kernels carry no reflector"),
        }
    }

    /// Adjoint counterpart of [`Reflector::apply_q_dense`].
    pub fn apply_qt_dense(&self, w: &mut DenseMatrix, top: usize, bot: Option<usize>) {
        let b = self.b;
        let cols = w.cols();
        match self.kind {
            KernelKind::Geqrt => {
                for j in 0..b {
                    let t = self.tau[j];
                    if t == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        let mut acc = w.get(top + j, c);
                        for i in j + 1..b {
                            acc += self.v.get(i, j) * w.get(top + i, c);
                        }
                        w.set(top + j, c, w.get(top + j, c) - t * acc);
                        for i in j + 1..b {
                            w.set(top + i, c, w.get(top + i, c) - t * self.v.get(i, j) * acc);
                        }
                    }
                }
            }
            KernelKind::Tsqrt | KernelKind::Ttqrt => {
                let bot = bot.expect("pair reflector needs a bottom row block");
                for j in 0..b {
                    let t = self.tau[j];
                    if t == 0.0 {
                        continue;
                    }
                    for c in 0..cols {
                        let mut acc = w.get(top + j, c);
                        for i in 0..b {
                            acc += self.v.get(i, j) * w.get(bot + i, c);
                        }
                        w.set(top + j, c, w.get(top + j, c) - t * acc);
                        for i in 0..b {
                            w.set(bot + i, c, w.get(bot + i, c) - t * self.v.get(i, j) * acc);
                        }
                    }
                }
            }
            _ => unreachable!("update kernels carry no reflector"),
        }
    }

    /// Materialize the orthogonal factor (`b x b` for GEQRT, `2b x 2b`
    /// for pair kernels) by applying the reflector to the identity.
    pub fn materialize_q(&self) -> DenseMatrix {
        let n = match self.kind {
            KernelKind::Geqrt => self.b,
            _ => 2 * self.b,
        };
        let mut q = DenseMatrix::eye(n, n);
        match self.kind {
            KernelKind::Geqrt => self.apply_q_dense(&mut q, 0, None),
            _ => self.apply_q_dense(&mut q, 0, Some(self.b)),
        }
        q
    }
}

/// Key of a stored reflector: the panel factorization `GEQRT(row, k)`
/// or the pair elimination `(victim, pivot, k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ReflectorKey {
    Panel { row: usize, panel: usize },
    Pair { victim: usize, pivot: usize, panel: usize },
}

impl fmt::Display for ReflectorKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ReflectorKey::Panel { row, panel } => write!(f, "panel({row},{panel})"),
            ReflectorKey::Pair { victim, pivot, panel } => write!(f, "pair({victim},{pivot},{panel})"),
        }
    }
}

/// Per-factorization reflector storage. Supports concurrent insertion
/// of distinct keys; each key is written exactly once.
#[derive(Debug, Default)]
pub struct ReflectorStore {
    inner: Mutex<HashMap<ReflectorKey, Arc<Reflector>>>,
}

impl ReflectorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, key: ReflectorKey, r: Reflector) -> Result<()> {
        let mut g = self.inner.lock().unwrap();
        if g.insert(key, Arc::new(r)).is_some() {
            return Err(crate::Error::CorruptedStore(format!("key {key} written twice")));
        }
        Ok(())
    }

    pub fn get(&self, key: &ReflectorKey) -> Option<Arc<Reflector>> {
        self.inner.lock().unwrap().get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keys in sorted order, for deterministic comparisons.
    pub fn sorted_keys(&self) -> Vec<ReflectorKey> {
        let mut keys: Vec<_> = self.inner.lock().unwrap().keys().copied().collect();
        keys.sort();
        keys
    }

    /// Bitwise equality of two stores, used by determinism checks.
    pub fn bits_eq(&self, other: &ReflectorStore) -> bool {
        let a = self.sorted_keys();
        if a != other.sorted_keys() {
            return false;
        }
        a.iter().all(|k| {
            let x = self.get(k).unwrap();
            let y = other.get(k).unwrap();
            x.bits_eq(&y)
        })
    }
}
