//! Binary container shared by model weights (`EMBW`) and probes (`EMBP`).
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      [u8; 4]
//! version    u32            (currently 1)
//! n_fields   u32
//! fields     [u64; n_fields] kind-specific config header
//! n_values   u64            number of f32 values in the payload
//! checksum   [u8; 32]       SHA-256 of the payload bytes
//! payload    [f32; n_values] row-major tensors in the kind's fixed order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: [u8; 4] = *b"EMBW";
pub const PROBE_MAGIC: [u8; 4] = *b"EMBP";

pub fn payload_digest(payload: &[f32]) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in payload {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

pub fn write_container(path: &Path, magic: [u8; 4], fields: &[u64], payload: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(fields.len() as u32).to_le_bytes())?;
    for f in fields {
        w.write_all(&f.to_le_bytes())?;
    }
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(&payload_digest(payload))?;
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| format_err(path, format!("truncated header ({what})")))
}

/// Returns the header fields and payload after validating magic, version and
/// checksum. A payload shorter than declared fails the checksum.
pub fn read_container(path: &Path, magic: [u8; 4]) -> Result<(Vec<u64>, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut m = [0u8; 4];
    read_exact_or(&mut r, &mut m, path, "magic")?;
    if m != magic {
        return Err(format_err(
            path,
            format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&m)
            ),
        ));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b4, path, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    read_exact_or(&mut r, &mut b4, path, "field count")?;
    let n_fields = u32::from_le_bytes(b4) as usize;
    let mut fields = Vec::with_capacity(n_fields);
    for _ in 0..n_fields {
        read_exact_or(&mut r, &mut b8, path, "fields")?;
        fields.push(u64::from_le_bytes(b8));
    }
    read_exact_or(&mut r, &mut b8, path, "payload length")?;
    let n_values = u64::from_le_bytes(b8) as usize;
    let mut digest = [0u8; 32];
    read_exact_or(&mut r, &mut digest, path, "checksum")?;

    let mut bytes = Vec::with_capacity(n_values * 4);
    r.read_to_end(&mut bytes)?;
    if bytes.len() != n_values * 4 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let payload: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if payload_digest(&payload) != digest {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    Ok((fields, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let payload = vec![1.5f32, -2.0, 3.25];
        write_container(&p, PROBE_MAGIC, &[7, 9], &payload).unwrap();
        let (f, back) = read_container(&p, PROBE_MAGIC).unwrap();
        assert_eq!(f, vec![7, 9]);
        assert_eq!(back, payload);

        assert!(matches!(
            read_container(&p, WEIGHTS_MAGIC),
            Err(Error::Format { .. })
        ));

        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_container(&p, PROBE_MAGIC), Err(Error::Checksum(_))));
    }
}
