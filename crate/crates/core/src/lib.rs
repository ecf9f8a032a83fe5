//! Path-star graph search as next-token prediction.
//!
//! The crate covers the whole experimental loop: sampling path-star and
//! tree-star graphs, tokenizing them, building supervision interventions
//! (masking, auxiliary multi-token targets, scratchpads, tree smoothing),
//! a small decoder-only transformer with hand-written backpropagation, an
//! online training loop and oracle-checked evaluation.

pub mod evaluator;
pub mod graph;
pub mod nnet;
pub mod rng;
pub mod supervision;
pub mod tokenizer;
pub mod trainer;

pub use graph::{NodeId, PathStarGraph, ShuffleMode, StarTree, TaskGraph, TreeVariant};
pub use tokenizer::{Layout, QueryMode, Token, TokenizedExample, Vocabulary};

/// Keeps large buffers on the heap between steps instead of returning them
/// to the OS. Training allocates and frees the same activation sizes every
/// step, and on glibc each fresh mapping costs a page fault per 4 KiB.
/// No-op on other platforms. Call once at process start.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        const M_TRIM_THRESHOLD: libc::c_int = -1;
        const M_TOP_PAD: libc::c_int = -2;
        const M_MMAP_THRESHOLD: libc::c_int = -3;
        // SAFETY: mallopt only adjusts allocator tunables.
        unsafe {
            libc::mallopt(M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(M_TRIM_THRESHOLD, i32::MAX);
            libc::mallopt(M_TOP_PAD, 512 << 20);
        }
    }
}
