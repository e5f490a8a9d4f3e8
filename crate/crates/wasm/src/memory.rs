//! Linear memory with a configurable page size.

use crate::error::HostMemOutOfBounds;

pub const DEFAULT_PAGE_SIZE: u32 = 65536;
pub const MIN_PAGE_SIZE: u32 = 256;

/// Byte pattern written into guard regions.
pub const GUARD_PATTERN: u8 = 0xA5;

/// Linear memory of one instance.
///
/// The backing buffer optionally carries guard regions of `guard` bytes on
/// both sides of the accessible range, filled with [`GUARD_PATTERN`]. They
/// are never reachable through any accessor and exist so tests can prove
/// that no access escapes the sandbox.
#[derive(Clone, Debug)]
pub struct LinearMemory {
    buf: Vec<u8>,
    guard: usize,
    len: usize,
    page_size: u32,
    /// Hard cap in pages (declared maximum, instance limits, address space).
    max_pages: u32,
    /// Soft cap that the embedder may lower between invocations.
    limit_pages: u32,
}

impl LinearMemory {
    pub fn new(initial_pages: u32, max_pages: u32, page_size: u32, guard: usize) -> Self {
        let len = initial_pages as usize * page_size as usize;
        let mut buf = vec![GUARD_PATTERN; guard * 2 + len];
        buf[guard..guard + len].fill(0);
        Self {
            buf,
            guard,
            len,
            page_size,
            max_pages,
            limit_pages: max_pages,
        }
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.buf[self.guard..self.guard + self.len]
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.buf[self.guard..self.guard + self.len]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn page_size(&self) -> u32 {
        self.page_size
    }

    pub fn pages(&self) -> u32 {
        (self.len / self.page_size as usize) as u32
    }

    pub fn max_pages(&self) -> u32 {
        self.max_pages
    }

    /// Current growth limit in pages.
    pub fn limit_pages(&self) -> u32 {
        self.limit_pages
    }

    /// Lower (or restore) the growth limit, never above the hard cap.
    pub fn set_limit_pages(&mut self, pages: u32) {
        self.limit_pages = pages.min(self.max_pages);
    }

    /// `memory.grow`: previous page count, or `-1` when the request exceeds
    /// the limits or cannot be allocated.
    pub fn grow(&mut self, delta: u32) -> i32 {
        let old = self.pages();
        let Some(new) = old.checked_add(delta) else {
            return -1;
        };
        if new > self.limit_pages {
            return -1;
        }
        if delta == 0 {
            return old as i32;
        }
        let extra = delta as usize * self.page_size as usize;
        if self.buf.try_reserve(extra).is_err() {
            return -1;
        }
        let end = self.guard + self.len;
        self.buf.splice(end..end, std::iter::repeat_n(0u8, extra));
        self.len += extra;
        old as i32
    }

    /// Bounds check for an access of `width` bytes at `addr + offset`.
    /// Returns the start index into [`Self::data`].
    #[inline]
    pub fn effective(&self, addr: u32, offset: u32, width: usize) -> Option<usize> {
        let ea = addr as u64 + offset as u64;
        if ea + width as u64 > self.len as u64 {
            None
        } else {
            Some(ea as usize)
        }
    }

    /// Host-side read.
    pub fn read(&self, offset: u32, len: u32) -> Result<&[u8], HostMemOutOfBounds> {
        match self.effective(offset, 0, len as usize) {
            Some(start) => Ok(&self.data()[start..start + len as usize]),
            None => Err(HostMemOutOfBounds {
                offset,
                len,
                memory_len: self.len,
            }),
        }
    }

    /// Host-side write.
    pub fn write(&mut self, offset: u32, bytes: &[u8]) -> Result<(), HostMemOutOfBounds> {
        let len = u32::try_from(bytes.len()).map_err(|_| HostMemOutOfBounds {
            offset,
            len: u32::MAX,
            memory_len: self.len,
        })?;
        match self.effective(offset, 0, bytes.len()) {
            Some(start) => {
                self.data_mut()[start..start + bytes.len()].copy_from_slice(bytes);
                Ok(())
            }
            None => Err(HostMemOutOfBounds {
                offset,
                len,
                memory_len: self.len,
            }),
        }
    }

    /// True when both guard regions still hold the guard pattern.
    pub fn guard_intact(&self) -> bool {
        let tail = self.guard + self.len;
        self.buf[..self.guard].iter().all(|&b| b == GUARD_PATTERN)
            && self.buf[tail..].iter().all(|&b| b == GUARD_PATTERN)
            && self.buf.len() == tail + self.guard
    }
}
