//! Page arithmetic helpers

/// Size of a page (in Bytes)
pub const PAGE_SIZE: usize = 0x1000;

pub(crate) const PAGE_SIZE_U64: u64 = PAGE_SIZE as u64;

/// Align an address up to the next page boundary
pub const fn page_align(addr: u64) -> u64 {
    (addr + (PAGE_SIZE_U64 - 1)) & !(PAGE_SIZE_U64 - 1)
}

/// Align an address down to its page
pub const fn page_floor(addr: u64) -> u64 {
    addr & !(PAGE_SIZE_U64 - 1)
}

pub const fn is_page_aligned(addr: u64) -> bool {
    addr & (PAGE_SIZE_U64 - 1) == 0
}

/// Check whether a page is entirely made of zeroes
pub fn is_zero_page(page: &[u8]) -> bool {
    page.iter().all(|b| *b == 0)
}

/// Parse an unsigned integer written in hex, with or without a leading `0x`
pub fn parse_hex(s: &str) -> Option<u64> {
    let s = s.trim();
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    if digits.is_empty() {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}
