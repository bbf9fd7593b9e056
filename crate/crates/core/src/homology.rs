//! Morse chain complex over Z or Z/2, the check that the boundary squares to
//! zero, and homology via Smith normal form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ring {
    Z,
    Z2,
}

impl std::str::FromStr for Ring {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "z" => Ok(Ring::Z),
            "z2" | "z/2" => Ok(Ring::Z2),
            other => Err(Error::Config(format!("unknown ring {other}"))),
        }
    }
}

/// Dense integer matrix, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<i64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        Self { rows: r, cols: c, data: rows.iter().flatten().copied().collect() }
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: i64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        assert_eq!(self.cols, other.rows);
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc: i64 = 0;
                for k in 0..self.cols {
                    let t = self.get(i, k).checked_mul(other.get(k, j)).ok_or(Error::Overflow)?;
                    acc = acc.checked_add(t).ok_or(Error::Overflow)?;
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    pub fn reduce_mod2(&self) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x.rem_euclid(2)).collect() }
    }
}

/// Nonzero invariant factors of an integer matrix (diagonal of its Smith
/// normal form), ascending in divisibility.
pub fn smith_invariants(m: &IntMatrix) -> Result<Vec<i64>> {
    let mut a = m.clone();
    let (rows, cols) = (a.rows, a.cols);
    let mut out = Vec::new();
    let mut t = 0;
    while t < rows.min(cols) {
        // Pivot: smallest nonzero absolute value in the remaining block.
        let mut best: Option<(usize, usize)> = None;
        for i in t..rows {
            for j in t..cols {
                let v = a.get(i, j);
                if v != 0 && best.is_none_or(|(bi, bj)| v.abs() < a.get(bi, bj).abs()) {
                    best = Some((i, j));
                }
            }
        }
        let Some((pi, pj)) = best else { break };
        swap_rows(&mut a, t, pi);
        swap_cols(&mut a, t, pj);
        loop {
            let p = a.get(t, t);
            let mut done = true;
            for i in t + 1..rows {
                let q = a.get(i, t) / p;
                if q != 0 {
                    row_axpy(&mut a, i, t, -q)?;
                }
                if a.get(i, t) != 0 {
                    done = false;
                }
            }
            for j in t + 1..cols {
                let q = a.get(t, j) / p;
                if q != 0 {
                    col_axpy(&mut a, j, t, -q)?;
                }
                if a.get(t, j) != 0 {
                    done = false;
                }
            }
            if !done {
                // A remainder is smaller than the pivot: move it in and repeat.
                let mut best = (t, t);
                for i in t + 1..rows {
                    if a.get(i, t) != 0 && a.get(i, t).abs() < a.get(best.0, best.1).abs() {
                        best = (i, t);
                    }
                }
                for j in t + 1..cols {
                    if a.get(t, j) != 0 && a.get(t, j).abs() < a.get(best.0, best.1).abs() {
                        best = (t, j);
                    }
                }
                swap_rows(&mut a, t, best.0);
                swap_cols(&mut a, t, best.1);
                continue;
            }
            // Divisibility: the pivot must divide the rest of the block.
            let p = a.get(t, t);
            let bad = (t + 1..rows).flat_map(|i| (t + 1..cols).map(move |j| (i, j))).find(|&(i, j)| a.get(i, j) % p != 0);
            match bad {
                Some((i, _)) => row_axpy(&mut a, t, i, 1)?,
                None => break,
            }
        }
        out.push(a.get(t, t).abs());
        t += 1;
    }
    Ok(out)
}

fn swap_rows(a: &mut IntMatrix, i: usize, j: usize) {
    if i != j {
        for c in 0..a.cols {
            a.data.swap(i * a.cols + c, j * a.cols + c);
        }
    }
}

fn swap_cols(a: &mut IntMatrix, i: usize, j: usize) {
    if i != j {
        for r in 0..a.rows {
            a.data.swap(r * a.cols + i, r * a.cols + j);
        }
    }
}

/// row_dst += k * row_src
fn row_axpy(a: &mut IntMatrix, dst: usize, src: usize, k: i64) -> Result<()> {
    for c in 0..a.cols {
        let v = a.get(src, c).checked_mul(k).and_then(|x| x.checked_add(a.get(dst, c))).ok_or(Error::Overflow)?;
        a.set(dst, c, v);
    }
    Ok(())
}

fn col_axpy(a: &mut IntMatrix, dst: usize, src: usize, k: i64) -> Result<()> {
    for r in 0..a.rows {
        let v = a.get(r, src).checked_mul(k).and_then(|x| x.checked_add(a.get(r, dst))).ok_or(Error::Overflow)?;
        a.set(r, dst, v);
    }
    Ok(())
}

/// Rank over Z/2 by Gaussian elimination.
pub fn rank_mod2(m: &IntMatrix) -> usize {
    let mut a = m.reduce_mod2();
    let mut rank = 0;
    for c in 0..a.cols {
        let Some(p) = (rank..a.rows).find(|&r| a.get(r, c) != 0) else { continue };
        swap_rows(&mut a, rank, p);
        for r in 0..a.rows {
            if r != rank && a.get(r, c) != 0 {
                for k in 0..a.cols {
                    let v = (a.get(r, k) + a.get(rank, k)) % 2;
                    a.set(r, k, v);
                }
            }
        }
        rank += 1;
    }
    rank
}

/// One contribution to a boundary coefficient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Contribution {
    pub from: String,
    pub to: String,
    /// Trajectory or broken pair that produced it.
    pub source: String,
    pub sign: i8,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub grade: usize,
    pub from: String,
    pub to: String,
    pub value: i64,
    pub contributions: Vec<Contribution>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainComplex {
    pub ring: Ring,
    /// Generator names per grade.
    pub generators: Vec<Vec<String>>,
    /// `boundaries[k]` maps grade `k` to grade `k - 1` (rows: grade `k - 1`);
    /// `boundaries[0]` is the empty map.
    pub boundaries: Vec<IntMatrix>,
    pub provenance: Vec<ProvenanceEntry>,
}

/// Assemble the complex from generators `(name, grade)` and signed
/// contributions between grades differing by one.
pub fn build_chain_complex(generators: &[(String, usize)], contributions: &[Contribution], ring: Ring) -> Result<ChainComplex> {
    let top = generators.iter().map(|g| g.1).max().unwrap_or(0);
    let mut by_grade = vec![Vec::new(); top + 1];
    for (name, k) in generators {
        by_grade[*k].push(name.clone());
    }
    let locate = |name: &str| -> Result<(usize, usize)> {
        for (k, g) in by_grade.iter().enumerate() {
            if let Some(i) = g.iter().position(|n| n == name) {
                return Ok((k, i));
            }
        }
        Err(Error::IncompleteData(format!("unknown generator {name}")))
    };
    let mut boundaries: Vec<IntMatrix> = (0..=top).map(|k| IntMatrix::zeros(if k == 0 { 0 } else { by_grade[k - 1].len() }, by_grade[k].len())).collect();
    let mut provenance: Vec<ProvenanceEntry> = Vec::new();
    for c in contributions {
        let (kf, i) = locate(&c.from)?;
        let (kt, j) = locate(&c.to)?;
        if kf != kt + 1 {
            return Err(Error::IncompleteData(format!("contribution {} from {} (grade {kf}) to {} (grade {kt})", c.source, c.from, c.to)));
        }
        let m = &mut boundaries[kf];
        let delta = match ring {
            Ring::Z => c.sign as i64,
            Ring::Z2 => 1,
        };
        let v = m.get(j, i).checked_add(delta).ok_or(Error::Overflow)?;
        m.set(j, i, if ring == Ring::Z2 { v.rem_euclid(2) } else { v });
        match provenance.iter_mut().find(|p| p.from == c.from && p.to == c.to) {
            Some(p) => p.contributions.push(c.clone()),
            None => provenance.push(ProvenanceEntry { grade: kf, from: c.from.clone(), to: c.to.clone(), value: 0, contributions: vec![c.clone()] }),
        }
    }
    for p in &mut provenance {
        let (kf, i) = locate(&p.from)?;
        let (_, j) = locate(&p.to)?;
        p.value = boundaries[kf].get(j, i);
    }
    Ok(ChainComplex { ring, generators: by_grade, boundaries, provenance })
}

impl ChainComplex {
    pub fn rank(&self, k: usize) -> usize {
        self.generators.get(k).map_or(0, |g| g.len())
    }

    pub fn euler_characteristic(&self) -> i64 {
        (0..self.generators.len()).map(|k| if k % 2 == 0 { 1 } else { -1 } * self.rank(k) as i64).sum()
    }
}

/// Exact check of `d_{k-1} d_k = 0` for all `k`.
pub fn verify_d_squared(cc: &ChainComplex) -> bool {
    first_nonzero_square(cc).is_none()
}

fn first_nonzero_square(cc: &ChainComplex) -> Option<usize> {
    for k in 2..cc.boundaries.len() {
        let (a, b) = (&cc.boundaries[k - 1], &cc.boundaries[k]);
        if a.rows == 0 || b.cols == 0 || a.cols == 0 {
            continue;
        }
        match a.mul(b) {
            Ok(p) => {
                let p = if cc.ring == Ring::Z2 { p.reduce_mod2() } else { p };
                if !p.is_zero() {
                    return Some(k);
                }
            }
            Err(_) => return Some(k),
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomologyGroup {
    pub grade: usize,
    pub rank: usize,
    pub torsion: Vec<i64>,
}

pub fn homology_ranks(cc: &ChainComplex) -> Result<Vec<HomologyGroup>> {
    if let Some(k) = first_nonzero_square(cc) {
        return Err(Error::NotAComplex(format!("d_{} d_{} != 0", k - 1, k)));
    }
    let n = cc.generators.len();
    // Invariant factors of d_k for k = 1..n-1.
    let mut inv: Vec<Vec<i64>> = vec![Vec::new(); n + 1];
    let mut rank: Vec<usize> = vec![0; n + 1];
    for k in 1..n {
        let m = &cc.boundaries[k];
        match cc.ring {
            Ring::Z => {
                inv[k] = smith_invariants(m)?;
                rank[k] = inv[k].len();
            }
            Ring::Z2 => rank[k] = rank_mod2(m),
        }
    }
    Ok((0..n)
        .map(|k| HomologyGroup {
            grade: k,
            rank: cc.rank(k) - rank[k] - rank[k + 1],
            torsion: inv[k + 1].iter().copied().filter(|&d| d > 1).collect(),
        })
        .collect())
}

pub fn betti(groups: &[HomologyGroup]) -> Vec<usize> {
    groups.iter().map(|g| g.rank).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn contrib(from: &str, to: &str, sign: i8) -> Contribution {
        Contribution { from: from.into(), to: to.into(), source: format!("{from}->{to}"), sign }
    }

    fn torus_generators() -> Vec<(String, usize)> {
        [("p", 2), ("q", 1), ("r", 1), ("s", 0)].iter().map(|(n, k)| (n.to_string(), *k)).collect()
    }

    #[test]
    fn boundary_of_two_torsion() {
        assert_eq!(smith_invariants(&IntMatrix::from_rows(&[vec![2]])).unwrap(), vec![2]);
        let cc = build_chain_complex(&[("a".into(), 1), ("b".into(), 0)], &[contrib("a", "b", 1), contrib("a", "b", 1)], Ring::Z).unwrap();
        let h = homology_ranks(&cc).unwrap();
        assert_eq!(betti(&h), vec![0, 0]);
        assert_eq!(h[0].torsion, vec![2]);
    }

    #[test]
    fn torus_with_cancelling_pairs() {
        // both index-one differences are hit twice with opposite signs
        let c = vec![contrib("p", "q", 1), contrib("p", "q", -1), contrib("r", "s", 1), contrib("r", "s", -1)];
        for ring in [Ring::Z, Ring::Z2] {
            let cc = build_chain_complex(&torus_generators(), &c, ring).unwrap();
            assert!(cc.boundaries.iter().all(|m| m.is_zero()));
            assert!(verify_d_squared(&cc));
            assert_eq!(betti(&homology_ranks(&cc).unwrap()), vec![1, 2, 1]);
        }
    }

    #[test]
    fn sphere_complex() {
        let cc = build_chain_complex(&[("max".into(), 2), ("min".into(), 0)], &[], Ring::Z).unwrap();
        assert!(verify_d_squared(&cc));
        assert_eq!(betti(&homology_ranks(&cc).unwrap()), vec![1, 0, 1]);
    }

    #[test]
    fn corrupted_complex_is_rejected() {
        let gens = torus_generators();
        let good = build_chain_complex(&gens, &[contrib("p", "q", 1), contrib("q", "s", 1), contrib("p", "r", 1), contrib("r", "s", -1)], Ring::Z).unwrap();
        assert!(verify_d_squared(&good));
        let mut bad = good.clone();
        let v = bad.boundaries[1].get(0, 1);
        bad.boundaries[1].set(0, 1, -v);
        assert!(!verify_d_squared(&bad));
        assert!(matches!(homology_ranks(&bad), Err(Error::NotAComplex(_))));
    }

    #[test]
    fn grade_mismatch_and_unknown_generator() {
        let gens = torus_generators();
        assert!(build_chain_complex(&gens, &[contrib("p", "s", 1)], Ring::Z).is_err());
        assert!(build_chain_complex(&gens, &[contrib("p", "x", 1)], Ring::Z).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let big = IntMatrix::from_rows(&[vec![i64::MAX, i64::MAX]]);
        let col = IntMatrix::from_rows(&[vec![2], vec![2]]);
        assert!(matches!(big.mul(&col), Err(Error::Overflow)));
    }

    #[test]
    fn ring_parsing() {
        assert_eq!("Z".parse::<Ring>().unwrap(), Ring::Z);
        assert_eq!("z2".parse::<Ring>().unwrap(), Ring::Z2);
        assert!("q".parse::<Ring>().is_err());
    }

    fn float_rank(m: &IntMatrix) -> usize {
        if m.rows == 0 || m.cols == 0 {
            return 0;
        }
        nalgebra::DMatrix::from_fn(m.rows, m.cols, |i, j| m.get(i, j) as f64).rank(1e-9)
    }

    /// Random unimodular matrix together with its inverse.
    fn unimodular(n: usize, ops: &[(usize, usize, i64)]) -> (IntMatrix, IntMatrix) {
        let mut u = IntMatrix::zeros(n, n);
        let mut ui = IntMatrix::zeros(n, n);
        for i in 0..n {
            u.set(i, i, 1);
            ui.set(i, i, 1);
        }
        for &(a, b, c) in ops {
            let (a, b) = (a % n, b % n);
            if a == b {
                continue;
            }
            // u <- E u with E adding c * row b to row a; ui <- ui E^{-1}
            for j in 0..n {
                let v = u.get(a, j) + c * u.get(b, j);
                u.set(a, j, v);
            }
            for i in 0..n {
                let v = ui.get(i, b) - c * ui.get(i, a);
                ui.set(i, b, v);
            }
        }
        (u, ui)
    }

    proptest! {
        #[test]
        fn invariant_factors_divide_and_count_rank(rows in 1usize..5, cols in 1usize..5, seed in proptest::collection::vec(-4i64..5, 16)) {
            let m = IntMatrix { rows, cols, data: seed[..rows * cols].to_vec() };
            let inv = smith_invariants(&m).unwrap();
            prop_assert_eq!(inv.len(), float_rank(&m));
            prop_assert!(inv.iter().all(|&d| d > 0));
            for w in inv.windows(2) {
                prop_assert_eq!(w[1] % w[0], 0);
            }
            prop_assert_eq!(rank_mod2(&m), inv.iter().filter(|&&d| d % 2 != 0).count());
        }

        #[test]
        fn homology_survives_change_of_basis(
            bound1 in proptest::collection::vec(1i64..4, 0..3),
            bound2 in proptest::collection::vec(1i64..4, 0..3),
            free in (0usize..3, 0usize..3, 0usize..3),
            ops in proptest::collection::vec((0usize..8, 0usize..8, -2i64..3), 0..12),
        ) {
            // C_1 = [boundary part of d1 | targets of d2 | free], C_0 = [hit by d1 | free], C_2 = [source of d2 | free]
            let (a, b) = (bound1.len(), bound2.len());
            let n0 = a + free.0;
            let n1 = a + b + free.1;
            let n2 = b + free.2;
            let mut d1 = IntMatrix::zeros(n0, n1);
            for (i, &t) in bound1.iter().enumerate() {
                d1.set(i, i, t);
            }
            let mut d2 = IntMatrix::zeros(n1, n2);
            for (i, &t) in bound2.iter().enumerate() {
                d2.set(a + i, i, t);
            }
            let (u0, _) = unimodular(n0.max(1), &ops);
            let (u1, u1i) = unimodular(n1.max(1), &ops.iter().rev().copied().collect::<Vec<_>>());
            let (_, u2i) = unimodular(n2.max(1), &ops[ops.len() / 2..]);
            let conj = |u: &IntMatrix, d: &IntMatrix, vi: &IntMatrix| -> IntMatrix {
                if d.rows == 0 || d.cols == 0 { return d.clone(); }
                u.mul(d).unwrap().mul(vi).unwrap()
            };
            let d1c = conj(&u0, &d1, &u1i);
            let d2c = conj(&u1, &d2, &u2i);
            let names = |k: usize, n: usize| (0..n).map(move |i| (format!("g{k}_{i}"), k));
            let gens: Vec<Vec<String>> = vec![names(0, n0).map(|x| x.0).collect(), names(1, n1).map(|x| x.0).collect(), names(2, n2).map(|x| x.0).collect()];
            let cc = ChainComplex { ring: Ring::Z, generators: gens.clone(), boundaries: vec![IntMatrix::zeros(0, n0), d1c.clone(), d2c.clone()], provenance: Vec::new() };
            prop_assert!(verify_d_squared(&cc));
            let h = homology_ranks(&cc).unwrap();
            prop_assert_eq!(betti(&h), vec![n0 - a, n1 - a - b, n2 - b]);
            // invariant factors of a diagonal need not equal its entries, but their product does
            prop_assert_eq!(bound1.iter().product::<i64>(), h[0].torsion.iter().product::<i64>());
            let z2 = ChainComplex { ring: Ring::Z2, generators: gens, boundaries: vec![IntMatrix::zeros(0, n0), d1c.reduce_mod2(), d2c.reduce_mod2()], provenance: Vec::new() };
            let h2 = homology_ranks(&z2).unwrap();
            let even = |g: &HomologyGroup| g.torsion.iter().filter(|t| *t % 2 == 0).count();
            for k in 0..3 {
                prop_assert_eq!(h2[k].rank, h[k].rank + even(&h[k]) + if k > 0 { even(&h[k - 1]) } else { 0 });
            }
            let euler: i64 = h.iter().map(|g| if g.grade % 2 == 0 { 1 } else { -1 } * g.rank as i64).sum();
            prop_assert_eq!(euler, cc.euler_characteristic());
        }
    }
}
