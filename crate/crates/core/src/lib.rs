//! Runtime and toolkit for compact attention-condenser classifiers used in
//! electroluminescence solar-cell defect inspection.

pub mod arch;
pub mod bench;
pub mod condenser;
pub mod explore;
pub mod tensor;
pub mod train;

pub use tensor::{ParamGroup, ParamTensor, Scalar, Shape, Tensor, TensorError};

/// Keeps freed multi-megabyte activation buffers in the process heap
/// instead of returning them to the kernel after every step. Idempotent;
/// a no-op outside glibc targets.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 64 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        });
    }
}
