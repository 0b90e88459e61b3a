//! `.tseq` matrix files: one JSON header line, then row-major little-endian
//! f32 payload.
//!
//! ```text
//! {"shape":[rows,cols],"dtype":"f32"}\n<rows*cols*4 bytes>
//! ```

use std::io::{self, BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    shape: [usize; 2],
    dtype: String,
}

pub fn write_tseq<W: Write>(mut w: W, m: &Array2<f64>) -> io::Result<()> {
    let header = Header { shape: [m.nrows(), m.ncols()], dtype: "f32".into() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(m.len() * 4);
    for v in m.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn tseq_bytes(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tseq(&mut out, m).expect("writing to a Vec cannot fail");
    out
}

pub fn read_tseq<R: BufRead>(mut r: R) -> io::Result<Array2<f64>> {
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let header: Header = serde_json::from_slice(&line).map_err(io::Error::other)?;
    if header.dtype != "f32" {
        return Err(io::Error::other(format!("unsupported dtype {}", header.dtype)));
    }
    let [rows, cols] = header.shape;
    let mut payload = vec![0u8; rows * cols * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(io::Error::other)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload_layout() {
        let m = Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let bytes = tseq_bytes(&m);
        let header = br#"{"shape":[2,3],"dtype":"f32"}"#;
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 1 + 24);
        assert_eq!(&bytes[header.len() + 1..header.len() + 5], &1.0f32.to_le_bytes());
        assert_eq!(read_tseq(&bytes[..]).unwrap(), m);
    }
}
