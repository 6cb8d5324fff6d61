/// Finite index range on the integer lattice.
///
/// States use the vacuum convention outside their window (Toda: a = 1/2,
/// b = 0; Ablowitz-Ladik: alpha = 0), so a window plus the vacuum values
/// determines a full sequence on Z.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeWindow {
    start: i64,
    len: usize,
}

impl LatticeWindow {
    pub fn new(start: i64, len: usize) -> Self {
        assert!(len >= 1, "window length must be >= 1");
        LatticeWindow { start, len }
    }

    /// Window centered (as nearly as possible) on site 0.
    pub fn centered(len: usize) -> Self {
        Self::new(-(len as i64) / 2, len)
    }

    pub fn start(&self) -> i64 {
        self.start
    }

    /// One past the last site.
    pub fn end(&self) -> i64 {
        self.start + self.len as i64
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, n: i64) -> bool {
        n >= self.start && n < self.end()
    }

    /// Offset of site `n` within the window; `None` if outside.
    pub fn index_of(&self, n: i64) -> Option<usize> {
        self.contains(n).then(|| (n - self.start) as usize)
    }

    /// Panicking variant of `index_of` for interior bookkeeping.
    pub fn offset(&self, n: i64) -> usize {
        self.index_of(n)
            .unwrap_or_else(|| panic!("site {n} outside window [{}, {})", self.start, self.end()))
    }

    pub fn site(&self, idx: usize) -> i64 {
        debug_assert!(idx < self.len);
        self.start + idx as i64
    }

    pub fn sites(&self) -> impl Iterator<Item = i64> + Clone {
        self.start..self.end()
    }

    /// Symmetrically padded window.
    pub fn padded(&self, pad: usize) -> Self {
        LatticeWindow {
            start: self.start - pad as i64,
            len: self.len + 2 * pad,
        }
    }

    /// Smallest window containing both operands.
    pub fn hull(&self, other: &LatticeWindow) -> Self {
        let start = self.start.min(other.start);
        let end = self.end().max(other.end());
        LatticeWindow::new(start, (end - start) as usize)
    }
}
