use crate::window::LatticeWindow;

/// Per-site values on a window, zero (default) outside.
#[derive(Debug, Clone)]
pub struct Series<T> {
    window: LatticeWindow,
    values: Vec<T>,
}

impl<T: Copy + Default> Series<T> {
    pub fn new(window: LatticeWindow, values: Vec<T>) -> Self {
        assert_eq!(values.len(), window.len());
        Series { window, values }
    }

    pub fn from_fn(window: LatticeWindow, f: impl FnMut(i64) -> T) -> Self {
        let values: Vec<T> = window.sites().map(f).collect();
        Series { window, values }
    }

    pub fn window(&self) -> &LatticeWindow {
        &self.window
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn at(&self, n: i64) -> T {
        match self.window.index_of(n) {
            Some(i) => self.values[i],
            None => T::default(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, T)> + '_ {
        self.window.sites().zip(self.values.iter().copied())
    }
}

impl<T: Copy + Default + std::iter::Sum<T>> Series<T> {
    pub fn sum(&self) -> T {
        self.values.iter().copied().sum()
    }
}

impl Series<f64> {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, v| m.min(*v))
    }
}

impl Series<num_complex::Complex64> {
    pub fn max_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.norm()))
    }
}
