//! Little-endian read/write helpers shared by the binary formats.

use crate::tensor::Real;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

#[derive(Debug)]
pub(crate) struct Truncated;

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], Truncated> {
        if self.remaining() < n {
            return Err(Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, Truncated> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, Truncated> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, Truncated> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, Truncated> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, Truncated> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// `n` reals stored with `width` bytes each, converted to `T`.
    pub(crate) fn reals<T: Real>(&mut self, n: usize, width: usize) -> Result<Vec<T>, Truncated> {
        let bytes = self.take(n.checked_mul(width).ok_or(Truncated)?)?;
        Ok(bytes
            .chunks_exact(width)
            .map(|c| match width {
                4 => T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect())
    }
}

/// Appends `values` with `width` bytes each (4 = f32, 8 = f64).
pub(crate) fn put_reals<T: Real>(out: &mut Vec<u8>, values: &[T], width: usize) {
    for v in values {
        match width {
            4 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            _ => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}
