//! Scoped flush-to-zero mode for subnormal floats.
//!
//! As a network trains, probabilities of confidently rejected classes and
//! the gradients derived from them decay into the subnormal range, where
//! x86 arithmetic is many times slower than on normal values. While a
//! [`FlushSubnormals`] guard is alive, subnormal results and operands are
//! treated as zero (the FTZ and DAZ bits of MXCSR); dropping the guard
//! restores the previous mode. Elsewhere the guard does nothing.

/// Flush-to-zero (bit 15) and denormals-are-zero (bit 6).
#[cfg(target_arch = "x86_64")]
const FTZ_DAZ: u32 = 0x8040;

pub(crate) struct FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    pub fn new() -> Self {
        let saved = read_mxcsr();
        write_mxcsr(saved | FTZ_DAZ);
        FlushSubnormals { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    pub fn new() -> Self {
        FlushSubnormals {}
    }
}

impl Drop for FlushSubnormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        write_mxcsr(self.saved);
    }
}

#[cfg(target_arch = "x86_64")]
fn read_mxcsr() -> u32 {
    let mut value = 0u32;
    // SAFETY: stmxcsr stores the 32-bit SSE control register into `value`.
    unsafe {
        std::arch::asm!("stmxcsr [{}]", in(reg) &mut value, options(nostack, preserves_flags))
    };
    value
}

#[cfg(target_arch = "x86_64")]
fn write_mxcsr(value: u32) {
    // SAFETY: ldmxcsr loads a register value read from MXCSR with only the
    // FTZ and DAZ mode bits changed; reserved bits stay as they were.
    unsafe {
        std::arch::asm!("ldmxcsr [{}]", in(reg) &value, options(nostack, readonly, preserves_flags))
    };
}
