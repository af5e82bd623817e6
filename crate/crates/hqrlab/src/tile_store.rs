//! Tiled-matrix storage, deterministic generation, and process-grid
//! data distributions.
//!
//! A [`TileMatrix`] is an `mt x nt` grid of square `b x b` tiles of
//! `f64`, each tile stored contiguously in column-major order so that a
//! task can read or write one tile independently of all others.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{invalid, Result};

/// Magic bytes of the on-disk matrix container.
pub const MATRIX_MAGIC: [u8; 4] = *b"TQRM";
/// Container format version.
pub const MATRIX_VERSION: u32 = 1;

/// One square `b x b` tile, column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    b: usize,
    data: Vec<f64>,
}

impl Tile {
    pub fn zeros(b: usize) -> Self {
        Tile { b, data: vec![0.0; b * b] }
    }

    pub fn from_fn(b: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut t = Tile::zeros(b);
        for j in 0..b {
            for i in 0..b {
                t.data[j * b + i] = f(i, j);
            }
        }
        t
    }

    pub fn identity(b: usize) -> Self {
        Tile::from_fn(b, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn b(&self) -> usize {
        self.b
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.b + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.b + i] = v;
    }

    /// Column-major backing slice.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// One column of the tile.
    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.b..(j + 1) * self.b]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Dense column-major matrix, used for verification and I/O support.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// The first `cols` columns of the identity.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = DenseMatrix::zeros(rows, cols);
        for c in 0..cols.min(rows) {
            m.set(c, c, 1.0);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.rows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.rows + i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn norm_fro(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// SplitMix64 pseudo-random generator.
///
/// Constants are the ones published by Steele, Lea and Flood: the state
/// advances by `0x9E3779B97F4A7C15` and the output mixer uses
/// `0xBF58476D1CE4E5B9` / `0x94D049BB133111EB` with shifts 30/27/31.
/// Fixed here so that generated matrices are reproducible across
/// platforms and across reimplementations in other languages.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[-1, 1)`: the top 53 bits scaled to `[0,1)`, then
    /// mapped by `2u - 1`. Exact in IEEE double arithmetic.
    pub fn next_unit(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0);
        2.0 * u - 1.0
    }
}

/// An `mt x nt` grid of `b x b` tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct TileMatrix {
    mt: usize,
    nt: usize,
    b: usize,
    tiles: Vec<Tile>,
}

impl TileMatrix {
    /// All-zero matrix.
    pub fn zeros(mt: usize, nt: usize, b: usize) -> Result<Self> {
        if mt == 0 || nt == 0 || b == 0 {
            return Err(invalid(format!("tile dimensions must be positive, got {mt}x{nt} tiles of {b}")));
        }
        Ok(TileMatrix { mt, nt, b, tiles: vec![Tile::zeros(b); mt * nt] })
    }

    /// Deterministic pseudo-random matrix with entries uniform in `[-1, 1)`.
    ///
    /// A single [`SplitMix64`] stream seeded with `seed` fills tiles in
    /// row-major tile order, column-major within each tile, so identical
    /// `(mt, nt, b, seed)` yields bit-identical matrices everywhere.
    pub fn make_random(mt: usize, nt: usize, b: usize, seed: u64) -> Result<Self> {
        let mut m = TileMatrix::zeros(mt, nt, b)?;
        let mut rng = SplitMix64::new(seed);
        for ti in 0..mt {
            for tj in 0..nt {
                let t = m.tile_mut(ti, tj);
                for v in t.as_mut_slice() {
                    *v = rng.next_unit();
                }
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn mt(&self) -> usize {
        self.mt
    }

    #[inline]
    pub fn nt(&self) -> usize {
        self.nt
    }

    #[inline]
    pub fn b(&self) -> usize {
        self.b
    }

    /// Scalar row count `M = mt * b`.
    pub fn scalar_rows(&self) -> usize {
        self.mt * self.b
    }

    /// Scalar column count `N = nt * b`.
    pub fn scalar_cols(&self) -> usize {
        self.nt * self.b
    }

    #[inline]
    pub fn tile(&self, i: usize, j: usize) -> &Tile {
        &self.tiles[i * self.nt + j]
    }

    #[inline]
    pub fn tile_mut(&mut self, i: usize, j: usize) -> &mut Tile {
        &mut self.tiles[i * self.nt + j]
    }

    pub(crate) fn into_tiles(self) -> Vec<Tile> {
        self.tiles
    }

    pub(crate) fn from_tiles(mt: usize, nt: usize, b: usize, tiles: Vec<Tile>) -> Self {
        debug_assert_eq!(tiles.len(), mt * nt);
        TileMatrix { mt, nt, b, tiles }
    }

    #[inline]
    pub fn scalar(&self, i: usize, j: usize) -> f64 {
        self.tile(i / self.b, j / self.b).get(i % self.b, j % self.b)
    }

    /// Expand to one dense column-major matrix.
    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.scalar_rows(), self.scalar_cols());
        for ti in 0..self.mt {
            for tj in 0..self.nt {
                let t = self.tile(ti, tj);
                for j in 0..self.b {
                    for i in 0..self.b {
                        d.set(ti * self.b + i, tj * self.b + j, t.get(i, j));
                    }
                }
            }
        }
        d
    }

    /// Repack a dense matrix into tiles; inverse of [`TileMatrix::to_dense`].
    pub fn from_dense(d: &DenseMatrix, mt: usize, nt: usize, b: usize) -> Result<Self> {
        if d.rows() != mt * b || d.cols() != nt * b {
            return Err(invalid(format!(
                "dense matrix is {}x{}, expected {}x{} for {mt}x{nt} tiles of {b}",
                d.rows(),
                d.cols(),
                mt * b,
                nt * b
            )));
        }
        let mut m = TileMatrix::zeros(mt, nt, b)?;
        for ti in 0..mt {
            for tj in 0..nt {
                let t = m.tile_mut(ti, tj);
                for j in 0..b {
                    for i in 0..b {
                        t.set(i, j, d.get(ti * b + i, tj * b + j));
                    }
                }
            }
        }
        Ok(m)
    }

    /// Serialize into the `TQRM` binary container: header
    /// `{magic, version, mt, nt, b}` (u32 little-endian) followed by
    /// tiles in row-major tile order, each tile column-major f64 LE.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&MATRIX_MAGIC)?;
        w.write_all(&MATRIX_VERSION.to_le_bytes())?;
        w.write_all(&(self.mt as u32).to_le_bytes())?;
        w.write_all(&(self.nt as u32).to_le_bytes())?;
        w.write_all(&(self.b as u32).to_le_bytes())?;
        for ti in 0..self.mt {
            for tj in 0..self.nt {
                for v in self.tile(ti, tj).as_slice() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MATRIX_MAGIC {
            return Err(invalid("bad magic, not a TQRM matrix file"));
        }
        let mut u = [0u8; 4];
        r.read_exact(&mut u)?;
        let version = u32::from_le_bytes(u);
        if version != MATRIX_VERSION {
            return Err(invalid(format!("unsupported TQRM version {version}")));
        }
        r.read_exact(&mut u)?;
        let mt = u32::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let nt = u32::from_le_bytes(u) as usize;
        r.read_exact(&mut u)?;
        let b = u32::from_le_bytes(u) as usize;
        let mut m = TileMatrix::zeros(mt, nt, b)?;
        let mut f = [0u8; 8];
        for ti in 0..mt {
            for tj in 0..nt {
                let t = m.tile_mut(ti, tj);
                for idx in 0..b * b {
                    r.read_exact(&mut f)?;
                    t.as_mut_slice()[idx] = f64::from_le_bytes(f);
                }
            }
        }
        Ok(m)
    }
}

/// Tile-to-process data distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    /// 2D cyclic over a `p x q` process grid: `owner(i,j) = (i mod p)*q + (j mod q)`.
    Cyclic2d { p: usize, q: usize },
    /// Row-cyclic over `r` processes: `owner(i,.) = i mod r`.
    Cyclic1d { r: usize },
    /// Row blocks of `ceil(mt/r)` rows: `owner(i,.) = i / ceil(mt/r)`.
    Block1d { r: usize },
}

impl Distribution {
    pub fn num_processes(&self) -> usize {
        match *self {
            Distribution::Cyclic2d { p, q } => p * q,
            Distribution::Cyclic1d { r } | Distribution::Block1d { r } => r,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            Distribution::Cyclic2d { p, q } => p >= 1 && q >= 1,
            Distribution::Cyclic1d { r } | Distribution::Block1d { r } => r >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid("distribution process counts must be positive"))
        }
    }

    /// Owning process of tile `(i, j)`.
    pub fn owner(&self, mt: usize, nt: usize, i: usize, j: usize) -> Result<usize> {
        self.check()?;
        if i >= mt || j >= nt {
            return Err(invalid(format!("tile ({i},{j}) out of range for {mt}x{nt}")));
        }
        Ok(match *self {
            Distribution::Cyclic2d { p, q } => (i % p) * q + (j % q),
            Distribution::Cyclic1d { r } => i % r,
            Distribution::Block1d { r } => i / mt.div_ceil(r),
        })
    }

    /// Map a tile row to `(process, local row)` in the process's local view.
    pub fn local_index(&self, mt: usize, i: usize) -> Result<(usize, usize)> {
        self.check()?;
        if i >= mt {
            return Err(invalid(format!("tile row {i} out of range for mt={mt}")));
        }
        Ok(match *self {
            Distribution::Cyclic2d { p, .. } => (i % p, i / p),
            Distribution::Cyclic1d { r } => (i % r, i / r),
            Distribution::Block1d { r } => {
                let rows_per = mt.div_ceil(r);
                (i / rows_per, i - (i / rows_per) * rows_per)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn dense_roundtrip_is_identity(mt in 1usize..6, nt in 1usize..6, b in 1usize..5, seed in 0u64..1000) {
            let m = TileMatrix::make_random(mt, nt, b, seed).unwrap();
            let back = TileMatrix::from_dense(&m.to_dense(), mt, nt, b).unwrap();
            prop_assert_eq!(m, back);
        }

        #[test]
        fn owner_is_a_partition_and_local_index_a_bijection(
            mt in 1usize..20, nt in 1usize..8, p in 1usize..5, q in 1usize..4
        ) {
            for dist in [
                Distribution::Cyclic2d { p, q },
                Distribution::Cyclic1d { r: p },
                Distribution::Block1d { r: p },
            ] {
                let mut count = vec![0usize; dist.num_processes()];
                for i in 0..mt {
                    for j in 0..nt {
                        count[dist.owner(mt, nt, i, j).unwrap()] += 1;
                    }
                }
                prop_assert_eq!(count.iter().sum::<usize>(), mt * nt);
                let mut seen = std::collections::HashSet::new();
                let mut rows_of = vec![vec![]; dist.num_processes()];
                for i in 0..mt {
                    let (proc, local) = dist.local_index(mt, i).unwrap();
                    prop_assert!(seen.insert((proc, local)));
                    rows_of[proc].push(local);
                }
                for mut locals in rows_of {
                    locals.sort_unstable();
                    for (want, got) in locals.into_iter().enumerate() {
                        prop_assert_eq!(want, got);
                    }
                }
            }
        }
    }

    #[test]
    fn random_is_deterministic_and_in_range() {
        let a = TileMatrix::make_random(4, 4, 8, 42).unwrap();
        let b = TileMatrix::make_random(4, 4, 8, 42).unwrap();
        assert_eq!(a, b);
        for ti in 0..4 {
            for tj in 0..4 {
                for &v in a.tile(ti, tj).as_slice() {
                    assert!((-1.0..1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn random_single_entry_in_range() {
        for s in [0u64, 1, 7, 12345] {
            let m = TileMatrix::make_random(1, 1, 1, s).unwrap();
            let v = m.tile(0, 0).get(0, 0);
            assert!((-1.0..1.0).contains(&v));
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = TileMatrix::make_random(4, 4, 8, 42).unwrap();
        let b = TileMatrix::make_random(4, 4, 8, 43).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(TileMatrix::make_random(0, 1, 1, 1).is_err());
        assert!(TileMatrix::make_random(1, 0, 1, 1).is_err());
        assert!(TileMatrix::make_random(1, 1, 0, 1).is_err());
    }

    #[test]
    fn dense_roundtrip_identity() {
        let m = TileMatrix::make_random(3, 2, 4, 7).unwrap();
        let d = m.to_dense();
        let back = TileMatrix::from_dense(&d, 3, 2, 4).unwrap();
        assert_eq!(m, back);

        let one = TileMatrix::from_dense(&{
            let mut d = DenseMatrix::zeros(1, 1);
            d.set(0, 0, 0.25);
            d
        }, 1, 1, 1)
        .unwrap();
        assert_eq!(one.tile(0, 0).get(0, 0), 0.25);
    }

    #[test]
    fn from_dense_rejects_wrong_shape() {
        let d = DenseMatrix::zeros(8, 8);
        assert!(TileMatrix::from_dense(&d, 3, 2, 4).is_err());
    }

    #[test]
    fn container_roundtrip() {
        let m = TileMatrix::make_random(2, 3, 4, 9).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = TileMatrix::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn owner_formulas_match_layout_table() {
        // Rows of each process under block and cyclic layouts for mt=12, r=3.
        let cyc = Distribution::Cyclic1d { r: 3 };
        for i in [0, 3, 6, 9] {
            assert_eq!(cyc.owner(12, 1, i, 0).unwrap(), 0);
        }
        let blk = Distribution::Block1d { r: 3 };
        for i in [4, 5, 6, 7] {
            assert_eq!(blk.owner(12, 1, i, 0).unwrap(), 1);
        }
        let one = Distribution::Cyclic2d { p: 1, q: 1 };
        for i in 0..5 {
            for j in 0..4 {
                assert_eq!(one.owner(5, 4, i, j).unwrap(), 0);
            }
        }
    }

    #[test]
    fn owner_rejects_out_of_range() {
        let d = Distribution::Cyclic1d { r: 2 };
        assert!(d.owner(4, 2, 4, 0).is_err());
        assert!(d.owner(4, 2, 0, 2).is_err());
    }

    #[test]
    fn local_index_examples() {
        let cyc = Distribution::Cyclic1d { r: 3 };
        assert_eq!(cyc.local_index(24, 4).unwrap(), (1, 1));
        assert_eq!(cyc.local_index(24, 6).unwrap(), (0, 2));
        let id = Distribution::Cyclic1d { r: 1 };
        for k in 0..6 {
            assert_eq!(id.local_index(6, k).unwrap(), (0, k));
        }
        let blk = Distribution::Block1d { r: 3 };
        assert_eq!(blk.local_index(12, 5).unwrap(), (1, 1));
        assert!(blk.local_index(12, 12).is_err());
    }

    #[test]
    fn owner_partitions_evenly() {
        let d = Distribution::Cyclic2d { p: 2, q: 3 };
        let (mt, nt) = (8, 9);
        let mut counts = vec![0usize; d.num_processes()];
        for i in 0..mt {
            for j in 0..nt {
                counts[d.owner(mt, nt, i, j).unwrap()] += 1;
            }
        }
        for c in counts {
            assert_eq!(c, mt * nt / 6);
        }
    }

    #[test]
    fn local_index_is_bijective_per_process() {
        for dist in [Distribution::Cyclic1d { r: 3 }, Distribution::Block1d { r: 3 }] {
            let mt = 13;
            let mut seen = std::collections::HashSet::new();
            let mut per_proc = vec![Vec::new(); dist.num_processes()];
            for i in 0..mt {
                let (p, l) = dist.local_index(mt, i).unwrap();
                assert!(seen.insert((p, l)), "duplicate local index for {dist:?}");
                per_proc[p].push(l);
            }
            for rows in per_proc {
                let mut rows = rows;
                rows.sort_unstable();
                for (expect, got) in rows.iter().enumerate() {
                    assert_eq!(expect, *got);
                }
            }
        }
    }
}
