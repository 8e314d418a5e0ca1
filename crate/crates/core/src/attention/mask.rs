use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Attention span of one self-attention layer.
///
/// `Window(w)` admits key offsets `|i − j| ≤ ⌊w/2⌋`, so `w` is the full span
/// of the band around the diagonal. Serialized as `"full"` or the integer span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WindowSpec {
    Full,
    Window(usize),
}

impl WindowSpec {
    /// Largest admitted `|i − j|`; `None` for full attention.
    pub fn half_width(self) -> Option<usize> {
        match self {
            WindowSpec::Full => None,
            WindowSpec::Window(w) => Some(w / 2),
        }
    }

    /// Span used for ordering schedules; full attention compares above any window.
    pub fn span(self) -> usize {
        match self {
            WindowSpec::Full => usize::MAX,
            WindowSpec::Window(w) => w,
        }
    }

    /// True when this window admits every pair of a length-`n` sequence.
    pub fn covers(self, n: usize) -> bool {
        self.half_width().is_none_or(|h| h + 1 >= n)
    }

    pub fn validate(self) -> Result<()> {
        match self {
            WindowSpec::Window(0) => Err(Error::config("window size must be at least 1")),
            _ => Ok(()),
        }
    }

    pub fn build(self, n: usize) -> Result<AttentionMask> {
        match self {
            WindowSpec::Full => AttentionMask::full(n),
            WindowSpec::Window(w) => AttentionMask::windowed(n, w),
        }
    }
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WindowSpec::Full => f.write_str("full"),
            WindowSpec::Window(w) => write!(f, "{w}"),
        }
    }
}

impl std::str::FromStr for WindowSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(WindowSpec::Full);
        }
        let w: usize = s.parse().map_err(|_| Error::Parse(format!("window must be 'full' or an integer, got {s:?}")))?;
        let spec = WindowSpec::Window(w);
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for WindowSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            WindowSpec::Full => s.serialize_str("full"),
            WindowSpec::Window(w) => s.serialize_u64(*w as u64),
        }
    }
}

impl<'de> Deserialize<'de> for WindowSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Span(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Span(w) => Ok(WindowSpec::Window(w)),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Boolean allow-matrix over (query position, key position).
#[derive(Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n_query: usize,
    n_key: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n_query: usize, n_key: usize, f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut f = f;
        let mut allow = Vec::with_capacity(n_query * n_key);
        for i in 0..n_query {
            for j in 0..n_key {
                allow.push(f(i, j));
            }
        }
        Self { n_query, n_key, allow }
    }

    pub fn full(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::input("mask length must be at least 1"));
        }
        Ok(Self { n_query: n, n_key: n, allow: vec![true; n * n] })
    }

    pub fn windowed(n: usize, w: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::input("mask length must be at least 1"));
        }
        if w == 0 {
            return Err(Error::config("window size must be at least 1"));
        }
        let half = w / 2;
        let mut allow = vec![false; n * n];
        for i in 0..n {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            allow[i * n + lo..=i * n + hi].fill(true);
        }
        Ok(Self { n_query: n, n_key: n, allow })
    }

    /// Opens every row and column listed in `positions`. Never removes entries.
    pub fn with_global(mut self, positions: &BTreeSet<usize>) -> Result<Self> {
        let n = self.n_key;
        for &g in positions {
            if g >= self.n_query || g >= self.n_key {
                return Err(Error::Index { index: g, len: self.n_query.min(self.n_key) });
            }
            self.allow[g * n..(g + 1) * n].fill(true);
            for i in 0..self.n_query {
                self.allow[i * n + g] = true;
            }
        }
        Ok(self)
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn n_key(&self) -> usize {
        self.n_key
    }

    pub fn allow(&self) -> &[bool] {
        &self.allow
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.n_key + j]
    }

    pub fn count_allowed(&self) -> usize {
        self.allow.iter().filter(|&&a| a).count()
    }

    pub fn is_full(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    /// Entry-wise subset test.
    pub fn is_subset_of(&self, other: &AttentionMask) -> bool {
        self.n_query == other.n_query
            && self.n_key == other.n_key
            && self.allow.iter().zip(&other.allow).all(|(&a, &b)| !a || b)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.n_query * (self.n_key + 1));
        for i in 0..self.n_query {
            for j in 0..self.n_key {
                s.push(if self.allowed(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        let n_key = rows.first().map_or(0, |r| r.len());
        let mut allow = Vec::with_capacity(rows.len() * n_key);
        for r in &rows {
            if r.len() != n_key {
                return Err(Error::Parse("ragged mask rows".into()));
            }
            for c in r.chars() {
                allow.push(match c {
                    '1' => true,
                    '0' => false,
                    other => return Err(Error::Parse(format!("unexpected mask character {other:?}"))),
                });
            }
        }
        Ok(Self { n_query: rows.len(), n_key, allow })
    }

    /// Binary PGM (P5); allowed entries are white.
    pub fn write_pgm<W: Write>(&self, w: &mut W) -> Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.n_key, self.n_query)?;
        let pixels: Vec<u8> = self.allow.iter().map(|&a| if a { 255 } else { 0 }).collect();
        w.write_all(&pixels)?;
        Ok(())
    }
}

impl fmt::Debug for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "AttentionMask {}x{}", self.n_query, self.n_key)?;
        if self.n_query <= 32 && self.n_key <= 32 {
            f.write_str(&self.to_text())?;
        }
        Ok(())
    }
}

pub fn build_full_mask(n: usize) -> Result<AttentionMask> {
    AttentionMask::full(n)
}

pub fn build_windowed_mask(n: usize, w: usize) -> Result<AttentionMask> {
    AttentionMask::windowed(n, w)
}

pub fn add_global(mask: AttentionMask, positions: &BTreeSet<usize>) -> Result<AttentionMask> {
    mask.with_global(positions)
}

/// Positions of tokens whose id is in `rule`.
pub fn mark_global_tokens(tokens: &[u32], rule: &BTreeSet<u32>) -> BTreeSet<usize> {
    tokens.iter().enumerate().filter(|(_, t)| rule.contains(t)).map(|(i, _)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_window(n: usize, w: usize) -> Vec<bool> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push(i.abs_diff(j) <= w / 2);
            }
        }
        v
    }

    #[test]
    fn full_mask_cases() {
        assert_eq!(build_full_mask(1).unwrap().to_text(), "1\n");
        assert!(build_full_mask(3).unwrap().is_full());
        assert_eq!(build_full_mask(5).unwrap(), build_windowed_mask(5, 9).unwrap());
        assert!(build_full_mask(0).is_err());
    }

    #[test]
    fn windowed_mask_cases() {
        let id = build_windowed_mask(4, 1).unwrap();
        assert_eq!(id.to_text(), "1000\n0100\n0010\n0001\n");

        let tri = build_windowed_mask(5, 2).unwrap();
        assert_eq!(tri.allow(), brute_window(5, 2).as_slice());
        assert_eq!(tri.to_text(), "11000\n11100\n01110\n00111\n00011\n");

        for w in 8..12 {
            assert!(build_windowed_mask(5, w).unwrap().is_full());
        }
        assert!(matches!(build_windowed_mask(5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn global_union_cases() {
        let base = build_windowed_mask(4, 1).unwrap();
        assert_eq!(add_global(base.clone(), &BTreeSet::new()).unwrap(), base);

        let g = add_global(base, &BTreeSet::from([2])).unwrap();
        assert_eq!(g.count_allowed(), 10);
        assert_eq!(g.to_text(), "1010\n0110\n1111\n0011\n");

        let full = build_full_mask(4).unwrap();
        assert_eq!(add_global(full.clone(), &BTreeSet::from([0, 3])).unwrap(), full);

        let err = add_global(build_full_mask(4).unwrap(), &BTreeSet::from([4])).unwrap_err();
        assert!(matches!(err, Error::Index { index: 4, len: 4 }));
    }

    #[test]
    fn marks_specials() {
        let rule = BTreeSet::from([14, 15]);
        assert!(mark_global_tokens(&[1, 2, 3], &rule).is_empty());
        assert_eq!(mark_global_tokens(&[0, 14, 1, 15], &rule), BTreeSet::from([1, 3]));
    }

    #[test]
    fn window_spec_serde() {
        let v: Vec<WindowSpec> = serde_json::from_str(r#"[10, "full", "Full", 400]"#).unwrap();
        assert_eq!(v, vec![WindowSpec::Window(10), WindowSpec::Full, WindowSpec::Full, WindowSpec::Window(400)]);
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"[10,"full","full",400]"#);
        assert!(serde_json::from_str::<WindowSpec>(r#""wide""#).is_err());
        assert!("0".parse::<WindowSpec>().is_err());
    }

    #[test]
    fn text_and_pgm_output() {
        let m = build_windowed_mask(3, 2).unwrap();
        assert_eq!(AttentionMask::from_text(&m.to_text()).unwrap(), m);
        let mut pgm = Vec::new();
        m.write_pgm(&mut pgm).unwrap();
        assert!(pgm.starts_with(b"P5\n3 3\n255\n"));
        assert_eq!(pgm.len(), 11 + 9);
    }

    proptest! {
        #[test]
        fn window_monotone_in_span(n in 1usize..40, w1 in 1usize..80, extra in 0usize..40) {
            let a = build_windowed_mask(n, w1).unwrap();
            let b = build_windowed_mask(n, w1 + extra).unwrap();
            prop_assert!(a.is_subset_of(&b));
            for i in 0..n {
                prop_assert!(a.allowed(i, i));
            }
        }

        #[test]
        fn global_never_removes(n in 1usize..30, w in 1usize..60, picks in proptest::collection::btree_set(0usize..30, 0..5)) {
            let picks: BTreeSet<usize> = picks.into_iter().filter(|&p| p < n).collect();
            let base = build_windowed_mask(n, w).unwrap();
            let g = add_global(base.clone(), &picks).unwrap();
            prop_assert!(base.is_subset_of(&g));
        }
    }
}
