//! A counting wrapper around the system allocator.
//!
//! Install it with `#[global_allocator]` in a binary; the counters stay at
//! zero otherwise and [`installed`] reports `false`.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);
static MAX_SINGLE: AtomicUsize = AtomicUsize::new(0);
static SEEN: AtomicBool = AtomicBool::new(false);

pub struct CountingAlloc;

impl CountingAlloc {
    fn grow(size: usize) {
        let now = CURRENT.fetch_add(size, Ordering::Relaxed) + size;
        PEAK.fetch_max(now, Ordering::Relaxed);
        MAX_SINGLE.fetch_max(size, Ordering::Relaxed);
        SEEN.store(true, Ordering::Relaxed);
    }
}

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc_zeroed(layout) };
        if !p.is_null() {
            Self::grow(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
            Self::grow(new_size);
        }
        p
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub current: usize,
    pub peak: usize,
    pub max_single: usize,
}

pub fn installed() -> bool {
    drop(std::hint::black_box(vec![0u8; 1]));
    SEEN.load(Ordering::Relaxed)
}

pub fn snapshot() -> Snapshot {
    Snapshot {
        current: CURRENT.load(Ordering::Relaxed),
        peak: PEAK.load(Ordering::Relaxed),
        max_single: MAX_SINGLE.load(Ordering::Relaxed),
    }
}

/// Starts a new measurement window: peak drops to the current level and the
/// largest-allocation record is cleared.
pub fn reset() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    MAX_SINGLE.store(0, Ordering::Relaxed);
}

/// Raises the window records to at least the given values.
pub fn merge(peak: usize, max_single: usize) {
    PEAK.fetch_max(peak, Ordering::Relaxed);
    MAX_SINGLE.fetch_max(max_single, Ordering::Relaxed);
}
