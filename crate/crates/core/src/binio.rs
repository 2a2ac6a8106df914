//! Little-endian primitives shared by the binary file formats.
//!
//! Every on-disk artifact (sparse index, encoder checkpoint, embedding
//! store, HNSW graph) starts with a 4-byte magic and a `u32` version and
//! stores all integers and floats little-endian. Strings are length-prefixed
//! UTF-8. These helpers keep the per-format code free of byte fiddling.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f32<W: Write>(w: &mut W, v: f32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    write_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

pub fn read_u32<R: Read>(r: &mut R, path: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_u64<R: Read>(r: &mut R, path: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(buf))
}

pub fn read_f32<R: Read>(r: &mut R, path: &str) -> Result<f32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(f32::from_le_bytes(buf))
}

/// Reads a length-prefixed UTF-8 string, rejecting absurd lengths so a
/// corrupt prefix does not trigger a giant allocation.
pub fn read_str<R: Read>(r: &mut R, path: &str) -> Result<String> {
    let len = read_u64(r, path)? as usize;
    if len > MAX_STRING_LEN {
        return Err(Error::format(
            "string",
            path,
            format!("length {len} exceeds limit {MAX_STRING_LEN}"),
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    String::from_utf8(buf)
        .map_err(|e| Error::format("string", path, e.to_string()))
}

/// Guard against corrupt length prefixes; no id, term, or token in this
/// engine comes anywhere near this size.
const MAX_STRING_LEN: usize = 1 << 24;

/// Writes the common `magic || version` header.
pub fn write_header<W: Write>(w: &mut W, magic: [u8; 4], version: u32) -> std::io::Result<()> {
    w.write_all(&magic)?;
    write_u32(w, version)
}

/// Checks the magic and returns the version.
pub fn read_header<R: Read>(r: &mut R, path: &str, magic: [u8; 4]) -> Result<u32> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got).map_err(|e| Error::io(path, e))?;
    if got != magic {
        return Err(Error::BadMagic {
            path: path.to_string(),
            expected: magic,
        });
    }
    read_u32(r, path)
}

/// Fails unless the version matches the single supported revision.
pub fn expect_version(what: &'static str, path: &str, got: u32, want: u32) -> Result<()> {
    if got != want {
        return Err(Error::UnsupportedVersion {
            what,
            version: got,
            path: path.to_string(),
        });
    }
    Ok(())
}
