//! Little-endian f64 block I/O shared by the model and dataset
//! container formats.

use std::io::{Read, Write};

use crate::error::FormatError;

pub(crate) fn write_f64_slice(w: &mut impl Write, data: &[f64]) -> std::io::Result<()> {
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64_vec(r: &mut impl Read, count: usize) -> Result<Vec<f64>, FormatError> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes).map_err(|_| FormatError::BlockSize {
        expected: count,
        got: 0,
    })?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}
