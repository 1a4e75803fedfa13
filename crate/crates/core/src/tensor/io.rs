//! Tensor file format: an ASCII header line `tensor f64 <d0> ... <dk>\n`
//! followed by the values as little-endian f64 in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let mut header = String::from("tensor f64");
    for d in t.shape() {
        header.push(' ');
        header.push_str(&d.to_string());
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_tensor<R: Read>(r: R) -> Result<Tensor> {
    let mut r = BufReader::new(r);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let header = header
        .strip_suffix('\n')
        .ok_or_else(|| Error::Format("missing header newline".into()))?;
    let mut fields = header.split(' ');
    if fields.next() != Some("tensor") || fields.next() != Some("f64") {
        return Err(Error::Format(format!("bad header {header:?}")));
    }
    let shape = fields
        .map(|f| {
            f.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad extent {f:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let mut bytes = vec![0u8; numel * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated payload, expected {numel} values")))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

impl Tensor {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        write_tensor(f, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        read_tensor(File::open(path)?)
    }
}

/// Render a 2-D map as an 8-bit binary PGM: each value is scaled by 255,
/// rounded and clamped to `[0, 255]`. A 1-D tensor renders as a single row.
pub fn write_pgm<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let (h, wd) = match t.shape() {
        [n] => (1, *n),
        [h, w] => (*h, *w),
        s => return Err(Error::Invalid(format!("PGM needs a 1-D or 2-D map, got {s:?}"))),
    };
    write!(w, "P5\n{wd} {h}\n255\n")?;
    let px: Vec<u8> = t
        .data()
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&px)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_bit_exact() {
        let t = Tensor::new(&[2, 1], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(buf.starts_with(b"tensor f64 2 1\n"));
        assert_eq!(buf.len(), 15 + 16);
        assert_eq!(&buf[15..23], &1.0f64.to_le_bytes());
        assert_eq!(read_tensor(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_truncated_and_trailing() {
        let t = Tensor::ones(&[3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        buf.push(0);
        assert!(read_tensor(&buf[..]).is_err());
        assert!(read_tensor(&b"tensor f32 1\n\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn pgm_scales_and_rounds() {
        let t = Tensor::new(&[1, 3], vec![0.0, 0.5, 1.2]).unwrap();
        let mut buf = Vec::new();
        write_pgm(&mut buf, &t).unwrap();
        assert_eq!(&buf[..11], b"P5\n3 1\n255\n");
        assert_eq!(&buf[11..], &[0u8, 128, 255]);
    }
}
