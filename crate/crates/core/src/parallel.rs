//! Data-parallel helpers. With the `parallel` feature (default) the
//! [`Execution::Parallel`] path runs on rayon; without it every path is a
//! plain sequential loop.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when `Parallel` actually fans out in this build.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_range<R, F>(self, range: std::ops::Range<u64>, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(u64) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => range.into_par_iter().map(f).collect(),
            _ => range.map(f).collect(),
        }
    }

    pub fn for_each_mut<T, F>(self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(&mut T) + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => items.par_iter_mut().for_each(f),
            _ => items.iter_mut().for_each(f),
        }
    }

    /// Count of indices in `range` satisfying `pred`.
    pub fn count_range<F>(self, range: std::ops::Range<u64>, pred: F) -> u64
    where
        F: Fn(u64) -> bool + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => range.into_par_iter().filter(|&i| pred(i)).count() as u64,
            _ => range.filter(|&i| pred(i)).count() as u64,
        }
    }
}
