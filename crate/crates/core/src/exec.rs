//! Per-item data parallelism with a sequential fallback.
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] fans work out over
//! rayon's pool; without it both variants run on the calling thread. Results
//! always come back in input order, so reductions over them are deterministic.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// True when this build can actually run work on more than one thread.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// `f(index, item)` over every item, results in input order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            use rayon::prelude::*;
            return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
        }
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }

    /// Like [`Exec::map`] but stops at the first error (by index).
    pub fn try_map<T, R, E, F>(self, items: &[T], f: F) -> Result<Vec<R>, E>
    where
        T: Sync,
        R: Send,
        E: Send,
        F: Fn(usize, &T) -> Result<R, E> + Sync + Send,
    {
        self.map(items, f).into_iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_modes_agree_and_keep_order() {
        let items: Vec<u64> = (0..257).collect();
        let seq = Exec::Sequential.map(&items, |i, x| (i as u64) * 1000 + x * x);
        let par = Exec::Parallel.map(&items, |i, x| (i as u64) * 1000 + x * x);
        assert_eq!(seq, par);
    }

    #[test]
    fn try_map_reports_first_error() {
        let items = [1, 2, 3, 4];
        let r: Result<Vec<i32>, usize> =
            Exec::Parallel.try_map(&items, |i, &x| if x > 2 { Err(i) } else { Ok(x) });
        assert_eq!(r, Err(2));
    }
}
