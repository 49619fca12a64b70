//! Little-endian binary reading with typed errors that carry the file path
//! and what was being read when the stream ended.

use std::io::{self, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt};

use crate::error::{Error, Result};

pub(crate) struct Reader<R> {
    inner: R,
    path: PathBuf,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, path: &Path) -> Self {
        Reader {
            inner,
            path: path.to_path_buf(),
        }
    }

    fn wrap(&self, e: io::Error, what: &str) -> Error {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated {
                path: self.path.clone(),
                detail: format!("file ends inside {what}"),
            }
        } else {
            Error::Io(e)
        }
    }

    pub fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        self.inner.read_u8().map_err(|e| self.wrap(e, what))
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        self.inner
            .read_u16::<LittleEndian>()
            .map_err(|e| self.wrap(e, what))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        self.inner
            .read_u32::<LittleEndian>()
            .map_err(|e| self.wrap(e, what))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        self.inner
            .read_u64::<LittleEndian>()
            .map_err(|e| self.wrap(e, what))
    }

    pub fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut out = vec![0f32; n];
        self.inner
            .read_f32_into::<LittleEndian>(&mut out)
            .map_err(|e| self.wrap(e, what))?;
        Ok(out)
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut out = vec![0u8; n];
        self.inner
            .read_exact(&mut out)
            .map_err(|e| self.wrap(e, what))?;
        Ok(out)
    }

    /// Check the 4-byte magic; short reads report truncation, mismatches
    /// report the bytes found.
    pub fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let mut found = [0u8; 4];
        self.inner
            .read_exact(&mut found)
            .map_err(|e| self.wrap(e, "magic"))?;
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.clone(),
                expected,
                found,
            });
        }
        Ok(())
    }

    /// The format describes the full file; anything after it is corruption.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.corrupt("trailing bytes after final record")),
            Err(e) => Err(Error::Io(e)),
        }
    }
}
