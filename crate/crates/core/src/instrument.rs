//! Operation counters.
//!
//! Counters are thread-local so a run measured on one thread is not polluted by
//! work on other threads. Workers that want their counts included take a
//! [`MacCounts`] snapshot and merge it into the caller's total.

use std::cell::Cell;
use std::ops::AddAssign;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Multiply-accumulate tallies.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCounts {
    /// Every matmul multiply-accumulate, forward and backward.
    pub matmul_macs: u64,
    /// Query/key pairs evaluated by attention calls (`m * n` per call,
    /// independent of head count). This is the unit of the attention cost model.
    pub attention_pairs: u64,
    /// Multiply-accumulates of the score (`Q K^T`) and mixing (`A V`) products.
    pub attention_macs: u64,
}

impl AddAssign for MacCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.matmul_macs += rhs.matmul_macs;
        self.attention_pairs += rhs.attention_pairs;
        self.attention_macs += rhs.attention_macs;
    }
}

thread_local! {
    static COUNTS: Cell<MacCounts> = const { Cell::new(MacCounts { matmul_macs: 0, attention_pairs: 0, attention_macs: 0 }) };
}

static COSINE_ZERO_NORM: AtomicU64 = AtomicU64::new(0);

pub(crate) fn record_matmul(macs: u64) {
    COUNTS.with(|c| {
        let mut v = c.get();
        v.matmul_macs += macs;
        c.set(v);
    });
}

pub(crate) fn record_attention(queries: usize, keys: usize, width: usize) {
    COUNTS.with(|c| {
        let mut v = c.get();
        let pairs = (queries * keys) as u64;
        v.attention_pairs += pairs;
        v.attention_macs += 2 * pairs * width as u64;
        c.set(v);
    });
}

/// Current thread's counts.
pub fn snapshot() -> MacCounts {
    COUNTS.with(Cell::get)
}

/// Returns the current thread's counts and resets them to zero.
pub fn take() -> MacCounts {
    COUNTS.with(|c| c.replace(MacCounts::default()))
}

/// Runs `f` and returns its result together with the counts it produced.
/// Counts accumulated before the call are preserved.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, MacCounts) {
    let before = take();
    let out = f();
    let during = take();
    COUNTS.with(|c| {
        let mut total = before;
        total += during;
        c.set(total);
    });
    (out, during)
}

pub(crate) fn record_zero_norm_cosine() {
    COSINE_ZERO_NORM.fetch_add(1, Ordering::Relaxed);
}

/// Number of cosine similarities evaluated with a zero-norm operand (process-wide).
pub fn zero_norm_cosines() -> u64 {
    COSINE_ZERO_NORM.load(Ordering::Relaxed)
}
