//! Combinatorics of broken-trajectory strata: the moduli catalog, index
//! tuples and their contractions, the partial order on tuples, and validity
//! of chart covers given as boxes in travel-time coordinates.
//!
//! Tuples are written top-first: `(i1, ..., in)` with the target of entry
//! `m` equal to the source of entry `m + 1`. Catalog indices are 1-based.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MorseSetup;

const TIE: f64 = 1e-9;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub index: usize,
    pub source: usize,
    pub target: usize,
    pub label: String,
    pub energy: f64,
}

/// All ordered pairs of critical points with positive energy, sorted by
/// energy and then by the value at the source.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModuliCatalog {
    pub crit_ids: Vec<String>,
    pub crit_values: Vec<f64>,
    pub entries: Vec<CatalogEntry>,
    #[serde(skip)]
    lookup: BTreeMap<(usize, usize), usize>,
}

impl ModuliCatalog {
    pub fn from_values(ids: &[String], values: &[f64]) -> Self {
        let n = values.len();
        let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).filter(|&(a, b)| values[a] - values[b] > TIE).collect();
        pairs.sort_by(|&(a, b), &(c, d)| {
            let (e1, e2) = (values[a] - values[b], values[c] - values[d]);
            if (e1 - e2).abs() > TIE {
                e1.total_cmp(&e2)
            } else {
                values[a].total_cmp(&values[c])
            }
        });
        let entries: Vec<CatalogEntry> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| CatalogEntry {
                index: i + 1,
                source: a,
                target: b,
                label: format!("{}->{}", ids[a], ids[b]),
                energy: values[a] - values[b],
            })
            .collect();
        let lookup = entries.iter().map(|e| ((e.source, e.target), e.index)).collect();
        Self {
            crit_ids: ids.to_vec(),
            crit_values: values.to_vec(),
            entries,
            lookup,
        }
    }

    pub fn from_setup(setup: &MorseSetup) -> Self {
        let ids: Vec<String> = setup.critical_points.iter().map(|c| c.id.clone()).collect();
        let values: Vec<f64> = setup.critical_points.iter().map(|c| c.value).collect();
        Self::from_values(&ids, &values)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> Result<&CatalogEntry> {
        i.checked_sub(1).and_then(|k| self.entries.get(k)).ok_or_else(|| Error::InvalidTuple(format!("no catalog entry {i}")))
    }

    pub fn source(&self, i: usize) -> Result<usize> {
        Ok(self.entry(i)?.source)
    }

    pub fn target(&self, i: usize) -> Result<usize> {
        Ok(self.entry(i)?.target)
    }

    pub fn index_of(&self, source: usize, target: usize) -> Result<usize> {
        self.lookup.get(&(source, target)).copied().ok_or_else(|| Error::MissingModuli {
            from: self.crit_ids.get(source).cloned().unwrap_or_default(),
            to: self.crit_ids.get(target).cloned().unwrap_or_default(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IndexTuple(pub Vec<usize>);

impl IndexTuple {
    pub fn new(catalog: &ModuliCatalog, entries: Vec<usize>) -> Result<Self> {
        let t = IndexTuple(entries);
        t.validate(catalog)?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, catalog: &ModuliCatalog) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidTuple("empty tuple".into()));
        }
        for w in self.0.windows(2) {
            if catalog.target(w[0])? != catalog.source(w[1])? {
                return Err(Error::InvalidTuple(format!("{self}: entries {} and {} do not chain", w[0], w[1])));
            }
        }
        catalog.entry(*self.0.last().unwrap())?;
        Ok(())
    }

    /// Spelling in gluing order (lowest piece first), as used for chart names
    /// like `43` for the tuple `(3, 4)`.
    pub fn gluing_order_name(&self) -> String {
        self.0.iter().rev().map(|i| i.to_string()).collect::<Vec<_>>().join(if self.0.iter().any(|&i| i > 9) { "," } else { "" })
    }
}

impl std::fmt::Display for IndexTuple {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (k, i) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{i}")?;
        }
        write!(f, ")")
    }
}

pub fn contract_full(catalog: &ModuliCatalog, tuple: &IndexTuple) -> Result<usize> {
    tuple.validate(catalog)?;
    catalog.index_of(catalog.source(tuple.0[0])?, catalog.target(*tuple.0.last().unwrap())?)
}

/// A contiguous sub-tuple `tuple[start .. start + len]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubTuple {
    pub start: usize,
    pub len: usize,
}

pub fn contract_along(catalog: &ModuliCatalog, tuple: &IndexTuple, collection: &[SubTuple]) -> Result<IndexTuple> {
    tuple.validate(catalog)?;
    let mut subs = collection.to_vec();
    subs.sort();
    let mut cursor = 0;
    for s in &subs {
        if s.len == 0 {
            return Err(Error::InvalidCollection("empty sub-tuple".into()));
        }
        if s.start < cursor {
            return Err(Error::InvalidCollection(format!("sub-tuples overlap at position {}", s.start)));
        }
        if s.start + s.len > tuple.len() {
            return Err(Error::InvalidCollection(format!("sub-tuple {}..{} exceeds length {}", s.start, s.start + s.len, tuple.len())));
        }
        cursor = s.start + s.len;
    }
    let mut out = Vec::new();
    let mut i = 0;
    let mut it = subs.iter().peekable();
    while i < tuple.len() {
        match it.peek() {
            Some(s) if s.start == i => {
                out.push(contract_full(catalog, &IndexTuple(tuple.0[i..i + s.len].to_vec()))?);
                i += s.len;
                it.next();
            }
            _ => {
                out.push(tuple.0[i]);
                i += 1;
            }
        }
    }
    IndexTuple::new(catalog, out)
}

/// All ways of cutting a tuple of length `n` into consecutive blocks, as
/// collections of the blocks longer than one.
pub fn collections(n: usize) -> Vec<Vec<SubTuple>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    (0u64..1 << (n - 1))
        .map(|mask| {
            let mut out = Vec::new();
            let mut start = 0;
            for i in 0..n {
                let cut = i + 1 == n || mask & (1 << i) != 0;
                if cut {
                    if i + 1 - start > 1 {
                        out.push(SubTuple { start, len: i + 1 - start });
                    }
                    start = i + 1;
                }
            }
            out
        })
        .collect()
}

/// `j <= i` when `j` arises from `i` by contracting a sub-index collection.
pub fn tuple_leq(catalog: &ModuliCatalog, j: &IndexTuple, i: &IndexTuple) -> Result<bool> {
    let (cj, ci) = (contract_full(catalog, j)?, contract_full(catalog, i)?);
    if cj != ci {
        return Err(Error::IncomparableContractions(cj, ci));
    }
    if j.len() > i.len() {
        return Ok(false);
    }
    for c in collections(i.len()) {
        if &contract_along(catalog, i, &c)? == j {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Every index tuple whose full contraction is entry `l`, shortest first.
pub fn enumerate_strata(catalog: &ModuliCatalog, l: usize) -> Result<Vec<IndexTuple>> {
    let e = catalog.entry(l)?;
    let mut out = Vec::new();
    let mut stack = vec![(e.source, Vec::<usize>::new())];
    while let Some((at, path)) = stack.pop() {
        for entry in catalog.entries.iter().filter(|x| x.source == at) {
            let v = catalog.crit_values[entry.target];
            if v < catalog.crit_values[e.target] - TIE {
                continue;
            }
            let mut p = path.clone();
            p.push(entry.index);
            if entry.target == e.target {
                out.push(IndexTuple(p));
            } else {
                stack.push((entry.target, p));
            }
        }
    }
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    Ok(out)
}

/// All valid tuples of length at most `max_len`.
pub fn all_tuples(catalog: &ModuliCatalog, max_len: usize) -> Vec<IndexTuple> {
    let mut out: Vec<IndexTuple> = Vec::new();
    let mut frontier: Vec<Vec<usize>> = catalog.entries.iter().map(|e| vec![e.index]).collect();
    for _ in 0..max_len {
        let mut next = Vec::new();
        for t in &frontier {
            out.push(IndexTuple(t.clone()));
            let end = catalog.entries[*t.last().unwrap() - 1].target;
            for e in catalog.entries.iter().filter(|e| e.source == end) {
                let mut n = t.clone();
                n.push(e.index);
                next.push(n);
            }
        }
        frontier = next;
    }
    out
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CombinatoricsReport {
    pub max_len: usize,
    pub tuples: usize,
    pub substitutions: usize,
    pub associativity_checks: usize,
    pub order_checks: usize,
    pub violations: Vec<String>,
}

impl CombinatoricsReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn shift_after(s: &SubTuple, contracted: &SubTuple) -> SubTuple {
    if s.start > contracted.start {
        SubTuple { start: s.start + 1 - contracted.len, len: s.len }
    } else {
        *s
    }
}

/// Exhaustive check that iterated contraction agrees with simultaneous
/// contraction for all tuples up to `max_len`, plus the partial-order axioms.
pub fn check_iterated_equals_simultaneous(catalog: &ModuliCatalog, max_len: usize) -> Result<CombinatoricsReport> {
    let tuples = all_tuples(catalog, max_len);
    let mut rep = CombinatoricsReport { max_len, tuples: tuples.len(), ..Default::default() };
    let mut violations = Vec::new();
    for k in &tuples {
        let n = k.len();
        let full = contract_full(catalog, k)?;
        // Substitution of I = K[m..m+len] into J at slot m.
        for start in 0..n {
            for len in 1..=n - start {
                let sub = SubTuple { start, len };
                let i = IndexTuple(k.0[start..start + len].to_vec());
                let ci = contract_full(catalog, &i)?;
                let mut jv = k.0[..start].to_vec();
                jv.push(ci);
                jv.extend_from_slice(&k.0[start + len..]);
                let j = IndexTuple(jv);
                rep.substitutions += 1;
                if j.validate(catalog).is_err() {
                    violations.push(format!("{j} from {k} is not a valid tuple"));
                    continue;
                }
                if contract_along(catalog, k, &[sub])? != j {
                    violations.push(format!("contracting {k} along {i} does not give {j}"));
                }
                if contract_full(catalog, &j)? != full {
                    violations.push(format!("{j} and {k} have different full contractions"));
                }
                if !tuple_leq(catalog, &j, k)? {
                    violations.push(format!("{j} <= {k} fails"));
                }
            }
        }
        // Disjoint pairs in either order, and nested pairs, against the
        // simultaneous contraction.
        let subs: Vec<SubTuple> = (0..n).flat_map(|s| (2..=n - s).map(move |l| SubTuple { start: s, len: l })).collect();
        for a in &subs {
            for b in &subs {
                if a.start + a.len <= b.start {
                    let both = contract_along(catalog, k, &[*a, *b])?;
                    let ab = contract_along(catalog, &contract_along(catalog, k, &[*a])?, &[shift_after(b, a)])?;
                    let ba = contract_along(catalog, &contract_along(catalog, k, &[*b])?, &[*a])?;
                    rep.associativity_checks += 1;
                    if ab != both || ba != both {
                        violations.push(format!("{k}: contracting {a:?} and {b:?} depends on the order"));
                    }
                } else if b.start <= a.start && a.start + a.len <= b.start + b.len && a != b {
                    let direct = contract_along(catalog, k, &[*b])?;
                    let inner = contract_along(catalog, k, &[*a])?;
                    let outer = SubTuple { start: b.start, len: b.len - a.len + 1 };
                    let nested = contract_along(catalog, &inner, &[outer])?;
                    rep.associativity_checks += 1;
                    if nested != direct {
                        violations.push(format!("{k}: nested contraction {a:?} inside {b:?} differs"));
                    }
                }
            }
        }
    }
    // Partial-order axioms within each stratum.
    let mut by_full: BTreeMap<usize, Vec<&IndexTuple>> = BTreeMap::new();
    for t in &tuples {
        by_full.entry(contract_full(catalog, t)?).or_default().push(t);
    }
    for group in by_full.values() {
        let m = group.len();
        let mut leq = vec![vec![false; m]; m];
        for a in 0..m {
            for b in 0..m {
                leq[a][b] = tuple_leq(catalog, group[a], group[b])?;
                rep.order_checks += 1;
            }
        }
        for a in 0..m {
            if !leq[a][a] {
                violations.push(format!("reflexivity fails for {}", group[a]));
            }
            for b in 0..m {
                if a != b && leq[a][b] && leq[b][a] {
                    violations.push(format!("antisymmetry fails for {} and {}", group[a], group[b]));
                }
                if !leq[a][b] {
                    continue;
                }
                for c in 0..m {
                    if leq[b][c] && !leq[a][c] {
                        violations.push(format!("transitivity fails for {}, {}, {}", group[a], group[b], group[c]));
                    }
                }
            }
        }
    }
    rep.violations = violations;
    Ok(rep)
}

/// Closed axis-aligned box in travel-time coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Box2 {
    pub fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        Self { lo: [x.0, y.0], hi: [x.1, y.1] }
    }

    /// Intersection with nonempty interior.
    pub fn overlaps(&self, other: &Self) -> bool {
        (0..2).all(|k| self.lo[k].max(other.lo[k]) < self.hi[k].min(other.hi[k]))
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|k| self.lo[k] <= p[k] && p[k] <= self.hi[k])
    }
}

/// Chart region: a union of boxes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChartRegion {
    pub tuple: IndexTuple,
    pub name: String,
    pub boxes: Vec<Box2>,
}

impl ChartRegion {
    pub fn overlaps(&self, other: &Self) -> bool {
        self.boxes.iter().any(|a| other.boxes.iter().any(|b| a.overlaps(b)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoverReport {
    pub charts: Vec<String>,
    pub checked_pairs: usize,
    pub violations: Vec<String>,
    pub uncovered_points: usize,
    pub valid: bool,
}

/// Check that two charts meet exactly when their tuples are comparable,
/// and that the union covers `domain` (sampled on a grid).
pub fn validate_chart_cover(catalog: &ModuliCatalog, charts: &[ChartRegion], domain: &Box2) -> Result<CoverReport> {
    let mut violations = Vec::new();
    let mut checked = 0;
    for a in 0..charts.len() {
        for b in a + 1..charts.len() {
            let (ca, cb) = (&charts[a], &charts[b]);
            let comparable = tuple_leq(catalog, &ca.tuple, &cb.tuple)? || tuple_leq(catalog, &cb.tuple, &ca.tuple)?;
            let meet = ca.overlaps(cb);
            checked += 1;
            if comparable != meet {
                violations.push(format!(
                    "W{} and W{}: {} but {}",
                    ca.name,
                    cb.name,
                    if comparable { "comparable" } else { "incomparable" },
                    if meet { "overlapping" } else { "disjoint" }
                ));
            }
        }
    }
    let n = 200;
    let mut uncovered = 0;
    for i in 0..=n {
        for j in 0..=n {
            let p = [
                domain.lo[0] + (domain.hi[0] - domain.lo[0]) * i as f64 / n as f64,
                domain.lo[1] + (domain.hi[1] - domain.lo[1]) * j as f64 / n as f64,
            ];
            if !charts.iter().any(|c| c.boxes.iter().any(|b| b.contains(p))) {
                uncovered += 1;
            }
        }
    }
    if uncovered > 0 {
        violations.push(format!("{uncovered} grid points of the domain are not covered"));
    }
    Ok(CoverReport {
        charts: charts.iter().map(|c| c.name.clone()).collect(),
        checked_pairs: checked,
        valid: violations.is_empty(),
        violations,
        uncovered_points: uncovered,
    })
}

/// The reference box layout of a top stratum `{(l), (a,b), (c,d), (a,e,d)}`
/// over `[0,4]^2`. With `mutant` the `(a,b)` box is enlarged until it meets
/// the incomparable `(c,d)` box.
pub fn reference_layout(catalog: &ModuliCatalog, l: usize, mutant: bool) -> Result<(Vec<ChartRegion>, Box2)> {
    let strata = enumerate_strata(catalog, l)?;
    let single = strata.iter().find(|t| t.len() == 1);
    let triple = strata.iter().find(|t| t.len() == 3);
    let (Some(single), Some(triple)) = (single, triple) else {
        return Err(Error::InvalidTuple(format!("stratum {l} does not have the three-level shape")));
    };
    if strata.len() != 4 {
        return Err(Error::InvalidTuple(format!("stratum {l} has {} tuples, expected 4", strata.len())));
    }
    let upper = strata.iter().find(|t| t.len() == 2 && t.0[0] == triple.0[0]);
    let lower = strata.iter().find(|t| t.len() == 2 && t.0[1] == triple.0[2]);
    let (Some(upper), Some(lower)) = (upper, lower) else {
        return Err(Error::InvalidTuple(format!("stratum {l} does not have the three-level shape")));
    };
    let region = |t: &IndexTuple, boxes: Vec<Box2>| ChartRegion { tuple: t.clone(), name: t.gluing_order_name(), boxes };
    let upper_box = if mutant { Box2::new((0.0, 2.0), (0.0, 3.5)) } else { Box2::new((0.0, 1.0), (0.0, 2.4)) };
    let charts = vec![
        region(upper, vec![upper_box]),
        region(lower, vec![Box2::new((1.6, 4.0), (3.0, 4.0))]),
        region(triple, vec![Box2::new((0.0, 2.0), (2.0, 4.0))]),
        region(single, vec![Box2::new((0.8, 4.0), (0.0, 2.2)), Box2::new((1.8, 4.0), (2.2, 3.2))]),
    ];
    Ok((charts, Box2::new((0.0, 4.0), (0.0, 4.0))))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StratumReport {
    pub entry: usize,
    pub label: String,
    pub tuples: Vec<IndexTuple>,
    pub gluing_order_names: Vec<String>,
}

pub fn strata_report(catalog: &ModuliCatalog) -> Result<Vec<StratumReport>> {
    catalog
        .entries
        .iter()
        .map(|e| {
            let tuples = enumerate_strata(catalog, e.index)?;
            Ok(StratumReport {
                entry: e.index,
                label: e.label.clone(),
                gluing_order_names: tuples.iter().map(|t| t.gluing_order_name()).collect(),
                tuples,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn torus() -> ModuliCatalog {
        let ids: Vec<String> = ["p", "q", "r", "s"].iter().map(|s| s.to_string()).collect();
        ModuliCatalog::from_values(&ids, &[3.0, 1.0, -1.0, -3.0])
    }

    fn t(v: &[usize]) -> IndexTuple {
        IndexTuple(v.to_vec())
    }

    #[test]
    fn catalog_order_breaks_ties_by_source_value() {
        let cat = torus();
        let labels: Vec<&str> = cat.entries.iter().map(|e| e.label.as_str()).collect();
        assert_eq!(labels, ["r->s", "q->r", "p->q", "q->s", "p->r", "p->s"]);
    }

    #[test]
    fn full_contractions() {
        let cat = torus();
        assert_eq!(contract_full(&cat, &t(&[2, 1])).unwrap(), 4);
        assert_eq!(contract_full(&cat, &t(&[3, 2, 1])).unwrap(), 6);
        assert_eq!(contract_full(&cat, &t(&[5])).unwrap(), 5);
        assert!(matches!(contract_full(&cat, &t(&[1, 2])), Err(Error::InvalidTuple(_))));
        assert!(matches!(contract_full(&cat, &t(&[7])), Err(Error::InvalidTuple(_))));
    }

    #[test]
    fn partial_contractions() {
        let cat = torus();
        let k = t(&[3, 2, 1]);
        assert_eq!(contract_along(&cat, &k, &[SubTuple { start: 1, len: 2 }]).unwrap(), t(&[3, 4]));
        assert_eq!(contract_along(&cat, &k, &[SubTuple { start: 0, len: 2 }]).unwrap(), t(&[5, 1]));
        assert_eq!(contract_along(&cat, &k, &[]).unwrap(), k);
        let overlapping = [SubTuple { start: 0, len: 2 }, SubTuple { start: 1, len: 2 }];
        assert!(matches!(contract_along(&cat, &k, &overlapping), Err(Error::InvalidCollection(_))));
        assert!(matches!(contract_along(&cat, &k, &[SubTuple { start: 2, len: 2 }]), Err(Error::InvalidCollection(_))));
    }

    #[test]
    fn order_examples() {
        let cat = torus();
        assert!(tuple_leq(&cat, &t(&[6]), &t(&[3, 2, 1])).unwrap());
        assert!(tuple_leq(&cat, &t(&[3, 4]), &t(&[3, 2, 1])).unwrap());
        assert!(!tuple_leq(&cat, &t(&[3, 2, 1]), &t(&[3, 4])).unwrap());
        assert!(!tuple_leq(&cat, &t(&[3, 4]), &t(&[5, 1])).unwrap());
        assert!(!tuple_leq(&cat, &t(&[5, 1]), &t(&[3, 4])).unwrap());
        assert!(matches!(tuple_leq(&cat, &t(&[4]), &t(&[5])), Err(Error::IncomparableContractions(4, 5))));
    }

    #[test]
    fn strata_of_torus_entries() {
        let cat = torus();
        assert_eq!(enumerate_strata(&cat, 6).unwrap(), vec![t(&[6]), t(&[3, 4]), t(&[5, 1]), t(&[3, 2, 1])]);
        assert_eq!(enumerate_strata(&cat, 1).unwrap(), vec![t(&[1])]);
        assert_eq!(enumerate_strata(&cat, 4).unwrap(), vec![t(&[4]), t(&[2, 1])]);
        assert_eq!(t(&[3, 4]).gluing_order_name(), "43");
    }

    #[test]
    fn reference_cover_and_mutant() {
        let cat = torus();
        let (charts, domain) = reference_layout(&cat, 6, false).unwrap();
        let ok = validate_chart_cover(&cat, &charts, &domain).unwrap();
        assert!(ok.valid, "{:?}", ok.violations);
        assert_eq!(ok.checked_pairs, 6);
        let (charts, domain) = reference_layout(&cat, 6, true).unwrap();
        let bad = validate_chart_cover(&cat, &charts, &domain).unwrap();
        assert!(!bad.valid);
        assert!(bad.violations.iter().any(|v| v.contains("incomparable")));
        assert!(reference_layout(&cat, 4, false).is_err());
    }

    #[test]
    fn single_chart_covers_lowest_stratum() {
        let cat = torus();
        let domain = Box2::new((0.0, 1.0), (0.0, 1.0));
        let chart = ChartRegion { tuple: t(&[1]), name: "1".into(), boxes: vec![domain.clone()] };
        assert!(validate_chart_cover(&cat, &[chart], &domain).unwrap().valid);
        let short = ChartRegion { tuple: t(&[1]), name: "1".into(), boxes: vec![Box2::new((0.0, 0.5), (0.0, 1.0))] };
        let rep = validate_chart_cover(&cat, &[short], &domain).unwrap();
        assert!(!rep.valid && rep.uncovered_points > 0);
    }

    #[test]
    fn torus_combinatorics_have_no_violations() {
        let rep = check_iterated_equals_simultaneous(&torus(), 3).unwrap();
        assert!(rep.passed(), "{:?}", rep.violations);
        assert!(rep.tuples > 6 && rep.order_checks > 0);
    }

    #[test]
    fn collections_count_compositions() {
        for n in 1..7 {
            assert_eq!(collections(n).len(), 1 << (n - 1));
        }
    }

    proptest! {
        // A generic chain of critical values: every tuple of length <= 3 obeys
        // the contraction and order axioms, and the strata of each entry are
        // exactly the compositions of the critical points in between.
        #[test]
        fn chains_obey_contraction_axioms(mut values in proptest::collection::vec(-10.0f64..10.0, 2..6)) {
            values.sort_by(|a, b| b.total_cmp(a));
            values.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
            let ids: Vec<String> = (0..values.len()).map(|i| format!("c{i}")).collect();
            let cat = ModuliCatalog::from_values(&ids, &values);
            let n = values.len();
            prop_assert_eq!(cat.len(), n * (n - 1) / 2);
            let rep = check_iterated_equals_simultaneous(&cat, 3).unwrap();
            prop_assert!(rep.passed(), "{:?}", rep.violations);
            for e in &cat.entries {
                let gap = e.target - e.source - 1;
                prop_assert_eq!(enumerate_strata(&cat, e.index).unwrap().len(), 1 << gap);
            }
        }
    }
}
