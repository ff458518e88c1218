//! `EDT1` tensor dumps: an ASCII header `EDT1 <ndim> <d0> <d1> ...\n`
//! followed by the row-major values as little-endian `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tensor, TensorError};

const MAX_HEADER: usize = 4096;

pub fn write_edt_to<W: Write>(w: &mut W, t: &Tensor) -> Result<(), TensorError> {
    let mut header = format!("EDT1 {}", t.ndim());
    for d in t.shape() {
        header.push_str(&format!(" {d}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_edt_from<R: Read>(r: &mut R) -> Result<Tensor, TensorError> {
    let mut header = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        header.push(byte[0]);
        if header.len() > MAX_HEADER {
            return Err(TensorError::Format("header too long".into()));
        }
    }
    let header = String::from_utf8(header).map_err(|_| TensorError::Format("header is not UTF-8".into()))?;
    let mut fields = header.split(' ');
    if fields.next() != Some("EDT1") {
        return Err(TensorError::Format(format!("bad magic in header {header:?}")));
    }
    let parse = |s: Option<&str>| -> Result<usize, TensorError> {
        s.and_then(|s| s.parse().ok())
            .ok_or_else(|| TensorError::Format(format!("malformed header {header:?}")))
    };
    let ndim = parse(fields.next())?;
    let shape = (0..ndim).map(|_| parse(fields.next())).collect::<Result<Vec<_>, _>>()?;
    if fields.next().is_some() {
        return Err(TensorError::Format(format!("trailing fields in header {header:?}")));
    }
    let numel: usize = shape.iter().product();
    let mut buf = vec![0u8; numel * 8];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_edt(path: impl AsRef<Path>, t: &Tensor) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_edt_to(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_edt(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    read_edt_from(&mut BufReader::new(File::open(path)?))
}
