//! Flush-to-zero for training loops.
//!
//! Saturated sigmoids push gradients into the subnormal range, where x86
//! arithmetic is one to two orders of magnitude slower. [`FlushDenormals`]
//! sets FTZ/DAZ on the calling thread for its lifetime. Pool threads are
//! switched once and stay switched, so concurrent guards cannot change the
//! mode under a running computation and results stay reproducible.

#[cfg(target_arch = "x86_64")]
mod imp {
    const FTZ_DAZ: u32 = (1 << 15) | (1 << 6);

    pub fn get() -> u32 {
        let mut csr: u32 = 0;
        // SAFETY: stmxcsr only writes the 4-byte MXCSR value to `csr`.
        unsafe { std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr, options(nostack)) };
        csr
    }

    pub fn set(csr: u32) {
        // SAFETY: the value comes from `get` with only FTZ/DAZ toggled.
        unsafe { std::arch::asm!("ldmxcsr [{}]", in(reg) &csr, options(nostack)) };
    }

    pub fn flushing(csr: u32) -> u32 {
        csr | FTZ_DAZ
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod imp {
    pub fn get() -> u32 {
        0
    }
    pub fn set(_: u32) {}
    pub fn flushing(csr: u32) -> u32 {
        csr
    }
}

fn init_pool() {
    #[cfg(feature = "parallel")]
    {
        static POOL: std::sync::Once = std::sync::Once::new();
        POOL.call_once(|| {
            rayon::broadcast(|_| imp::set(imp::flushing(imp::get())));
        });
    }
}

/// Restores the previous floating-point mode when dropped.
pub struct FlushDenormals {
    prev: u32,
}

impl FlushDenormals {
    pub fn enable() -> Self {
        init_pool();
        let prev = imp::get();
        imp::set(imp::flushing(prev));
        Self { prev }
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        imp::set(self.prev);
    }
}
