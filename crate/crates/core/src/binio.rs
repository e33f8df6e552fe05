//! Little-endian helpers shared by the model and feature file formats.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// 64-bit content hash: the first eight bytes of SHA-256, little-endian.
pub fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

pub fn hash_hex(bytes: &[u8]) -> String {
    format!("{:016x}", hash64(bytes))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 4]) -> Self {
        Encoder { buf: magic.to_vec() }
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.write_u32::<LittleEndian>(v).expect("vec write");
        self
    }

    pub fn len(&mut self, v: usize) -> &mut Self {
        self.u32(u32::try_from(v).expect("length fits in u32"))
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.write_u64::<LittleEndian>(v).expect("vec write");
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.write_f64::<LittleEndian>(v).expect("vec write");
        self
    }

    pub fn f64s<'a>(&mut self, vals: impl IntoIterator<Item = &'a f64>) -> &mut Self {
        for v in vals {
            self.f64(*v);
        }
        self
    }

    /// Row-major dump of a matrix.
    pub fn matrix(&mut self, m: &DMatrix<f64>) -> &mut Self {
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                self.f64(m[(r, c)]);
            }
        }
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.len(s.len());
        self.buf.write_all(s.as_bytes()).expect("vec write");
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Decoder<'a> {
    cur: Cursor<&'a [u8]>,
    context: String,
}

impl<'a> Decoder<'a> {
    pub fn new(bytes: &'a [u8], magic: &[u8; 4], context: impl Into<String>) -> Result<Self> {
        let context = context.into();
        if bytes.len() < 4 || &bytes[..4] != magic {
            return Err(Error::format(
                context,
                format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        let mut cur = Cursor::new(bytes);
        cur.set_position(4);
        Ok(Decoder { cur, context })
    }

    fn truncated(&self) -> Error {
        Error::format(
            self.context.clone(),
            format!("truncated at byte {}", self.cur.position()),
        )
    }

    pub fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(self.context.clone(), reason)
    }

    pub fn version(&mut self) -> Result<u32> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(self.fail(format!("unsupported version {v}")));
        }
        Ok(v)
    }

    pub fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(|_| self.truncated())
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.cur
            .read_u32::<LittleEndian>()
            .map_err(|_| self.truncated())
    }

    pub fn len(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.cur
            .read_u64::<LittleEndian>()
            .map_err(|_| self.truncated())
    }

    pub fn f64(&mut self) -> Result<f64> {
        self.cur
            .read_f64::<LittleEndian>()
            .map_err(|_| self.truncated())
    }

    fn ensure_remaining(&self, n_f64: usize) -> Result<()> {
        let left = self.remaining();
        if n_f64.checked_mul(8).is_none_or(|need| need > left) {
            return Err(self.truncated());
        }
        Ok(())
    }

    pub fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        self.ensure_remaining(n)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn vector(&mut self, n: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.f64_vec(n)?))
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let data = self.f64_vec(rows.saturating_mul(cols))?;
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        if n > self.remaining() {
            return Err(self.truncated());
        }
        let mut buf = vec![0u8; n];
        self.cur
            .read_exact(&mut buf)
            .map_err(|_| self.truncated())?;
        String::from_utf8(buf).map_err(|_| self.fail("identifier is not UTF-8"))
    }

    pub fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        if n > self.remaining() {
            return Err(self.truncated());
        }
        let mut buf = vec![0u8; n];
        self.cur
            .read_exact(&mut buf)
            .map_err(|_| self.truncated())?;
        Ok(buf)
    }

    pub fn remaining(&self) -> usize {
        let total = self.cur.get_ref().len() as u64;
        (total - self.cur.position().min(total)) as usize
    }

    /// Fails if any payload is left unread.
    pub fn finish(self) -> Result<()> {
        let left = self.remaining();
        if left != 0 {
            return Err(self.fail(format!("{left} trailing bytes")));
        }
        Ok(())
    }
}

pub(crate) fn check_finite_matrix(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite entries")))
    }
}
