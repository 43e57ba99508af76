//! On-disk formats.
//!
//! * F32M grid: `"F32M"`, `u32` version (1), `u32` h, `u32` w, then `h * w`
//!   little-endian `f32` row-major.
//! * Annotation CSV: header `x,y`, one head per line.
//! * Labeled-heights CSV: header `y_h,h_px`.
//! * PFDC checkpoint: `"PFDC"`, `u32` version (1), `u32` entry count, then per
//!   entry `u16` name length, name bytes, `u8` rank, `rank x u32` dims and the
//!   `f32` payload; a trailing `u64` CRC-64/XZ of every preceding byte.
//! * Images: binary PPM (`P6`, maxval 255).
//!
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::tensor::{Grid2, Tensor4};

const F32M_MAGIC: &[u8; 4] = b"F32M";
const PFDC_MAGIC: &[u8; 4] = b"PFDC";
const VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// Little-endian cursor over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Length(format!(
                "need {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Length("payload overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn encode_f32m(g: &Grid2) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * g.data().len());
    out.extend_from_slice(F32M_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(g.h() as u32).to_le_bytes());
    out.extend_from_slice(&(g.w() as u32).to_le_bytes());
    for v in g.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_f32m(bytes: &[u8]) -> Result<Grid2> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != F32M_MAGIC {
        return Err(Error::Format("bad F32M magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported F32M version {version}")));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let data = r.f32s(h * w)?;
    if r.remaining() != 0 {
        return Err(Error::Length(format!("{} trailing bytes", r.remaining())));
    }
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::Data("NaN in map".into()));
    }
    Grid2::from_vec(h, w, data)
}

pub fn write_f32m(path: impl AsRef<Path>, g: &Grid2) -> Result<()> {
    fs::write(path, encode_f32m(g))?;
    Ok(())
}

pub fn read_f32m(path: impl AsRef<Path>) -> Result<Grid2> {
    decode_f32m(&fs::read(path)?)
}

fn parse_pairs(text: &str, header: [&str; 2]) -> Result<Vec<(f32, f32)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let hdr = rdr.headers().map_err(|e| Error::Format(e.to_string()))?;
    if hdr.len() != 2 || hdr.get(0) != Some(header[0]) || hdr.get(1) != Some(header[1]) {
        return Err(Error::Format(format!("expected header {},{}", header[0], header[1])));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        if rec.len() != 2 {
            return Err(Error::Format(format!("expected 2 fields, got {}", rec.len())));
        }
        let parse = |s: &str| -> Result<f32> {
            let v: f32 = s.parse().map_err(|_| Error::Format(format!("not a number: {s:?}")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value {s:?}")));
            }
            Ok(v)
        };
        out.push((parse(&rec[0])?, parse(&rec[1])?));
    }
    Ok(out)
}

fn format_pairs(points: &[(f32, f32)], header: [&str; 2]) -> String {
    let mut s = format!("{},{}\n", header[0], header[1]);
    for (a, b) in points {
        s.push_str(&format!("{a},{b}\n"));
    }
    s
}

/// Head points `(x, y)` from `x,y` CSV text.
pub fn parse_annotations(text: &str) -> Result<Vec<(f32, f32)>> {
    parse_pairs(text, ["x", "y"])
}

pub fn format_annotations(points: &[(f32, f32)]) -> String {
    format_pairs(points, ["x", "y"])
}

/// Labeled `(y_h, h_px)` samples from `y_h,h_px` CSV text.
pub fn parse_heights(text: &str) -> Result<Vec<(f32, f32)>> {
    parse_pairs(text, ["y_h", "h_px"])
}

pub fn format_heights(samples: &[(f32, f32)]) -> String {
    format_pairs(samples, ["y_h", "h_px"])
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

/// Ordered collection of named tensors. Entry order is preserved on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: &[usize], data: &[f32]) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        self.entries.push(NamedTensor {
            name: name.into(),
            dims: dims.to_vec(),
            data: data.to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry {name:?}")))
    }

    /// Stores a `u64` exactly as four 16-bit limbs.
    pub fn push_u64(&mut self, name: &str, v: u64) {
        let limbs: Vec<f32> = (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect();
        self.push(name, &[4], &limbs);
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let e = self.require(name)?;
        if e.data.len() != 4 {
            return Err(Error::Format(format!("{name}: expected 4 limbs")));
        }
        Ok(e.data
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &l)| acc | ((l as u64) << (16 * i))))
    }

    /// Stores UTF-8 text one byte per element.
    pub fn push_text(&mut self, name: &str, text: &str) {
        let bytes: Vec<f32> = text.bytes().map(|b| b as f32).collect();
        self.push(name, &[bytes.len()], &bytes);
    }

    pub fn get_text(&self, name: &str) -> Result<String> {
        let bytes: Vec<u8> = self.require(name)?.data.iter().map(|&b| b as u8).collect();
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(PFDC_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let name = e.name.as_bytes();
            if name.len() > u16::MAX as usize || e.dims.len() > u8::MAX as usize {
                return Err(Error::Format(format!("entry {:?} too large for header", e.name)));
            }
            if e.dims.iter().product::<usize>() != e.data.len() {
                return Err(Error::Shape(format!("entry {:?} dims/data mismatch", e.name)));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = CRC64.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() >= 4 && &bytes[..4] != PFDC_MAGIC {
            return Err(Error::Format("bad PFDC magic".into()));
        }
        if bytes.len() < 4 + 4 + 4 + 8 {
            return Err(Error::Length(format!("checkpoint of {} bytes", bytes.len())));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut r = Reader::new(body);
        r.take(4)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
            let rank = r.u8()? as usize;
            let dims = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let data = r.f32s(dims.iter().product())?;
            entries.push(NamedTensor { name, dims, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Length(format!("{} unexpected bytes before checksum", r.remaining())));
        }
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if stored != CRC64.checksum(body) {
            return Err(Error::Format("checkpoint checksum mismatch".into()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Encodes a `1 x 3 x H x W` tensor with values in `[0, 1]` as binary PPM.
pub fn encode_ppm(img: &Tensor4) -> Result<Vec<u8>> {
    let [n, c, h, w] = img.shape();
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("PPM needs 1x3xHxW, got {:?}", img.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                out.push((img.get(0, ch, i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor4> {
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Length("truncated PPM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P6" {
        return Err(Error::Format(format!("not a binary PPM: {:?}", tokens[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field {s:?}")));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Length(format!("PPM payload {} < {need}", bytes.len().saturating_sub(pos))));
    }
    let mut img = Tensor4::new([1, 3, h, w], crate::tensor::Fill::Const(0.0))?;
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                img.set(0, ch, i, j, bytes[pos + (i * w + j) * 3 + ch] as f32 / 255.0);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32m_layout() {
        let g = Grid2::from_vec(1, 1, vec![1.5]).unwrap();
        let b = encode_f32m(&g);
        let mut want = b"F32M".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1.5f32.to_le_bytes());
        assert_eq!(b, want);
        assert_eq!(decode_f32m(&b).unwrap(), g);
    }

    #[test]
    fn f32m_errors() {
        let g = Grid2::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut b = encode_f32m(&g);
        assert!(matches!(decode_f32m(&b[..b.len() - 1]), Err(Error::Length(_))));
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(decode_f32m(&extra), Err(Error::Length(_))));
        b[0] = b'X';
        assert!(matches!(decode_f32m(&b), Err(Error::Format(_))));
        let nan = encode_f32m(&Grid2::from_vec(1, 1, vec![f32::NAN]).unwrap());
        assert!(matches!(decode_f32m(&nan), Err(Error::Data(_))));
    }

    #[test]
    fn annotation_csv() {
        assert_eq!(parse_annotations("x,y\n3.5,7.0\n").unwrap(), vec![(3.5, 7.0)]);
        assert!(matches!(parse_annotations("a,b\n1,2\n"), Err(Error::Format(_))));
        assert!(matches!(parse_annotations("x,y\n1,zz\n"), Err(Error::Format(_))));
        let pts = vec![(0.25, 1.0), (10.0, 3.75)];
        assert_eq!(parse_annotations(&format_annotations(&pts)).unwrap(), pts);
        assert_eq!(parse_heights("y_h,h_px\n100,87.5\n").unwrap(), vec![(100.0, 87.5)]);
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut ck = Checkpoint::new();
        ck.push("a.kernel", &[2, 1, 3, 3], &(0..18).map(|v| v as f32 * 0.1).collect::<Vec<_>>());
        ck.push("b", &[1], &[-0.0]);
        ck.push_u64("rng", 0xDEAD_BEEF_0123_4567);
        ck.push_text("config", "seed=3\nlr=1e-4\n");
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode().unwrap(), bytes);
        assert_eq!(back.get_u64("rng").unwrap(), 0xDEAD_BEEF_0123_4567);
        assert_eq!(back.get_text("config").unwrap(), "seed=3\nlr=1e-4\n");

        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 20]), Err(Error::Length(_)) | Err(Error::Format(_))));
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(Checkpoint::decode(&flipped).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let data: Vec<f32> = (0..3 * 2 * 3).map(|v| v as f32 / 255.0).collect();
        let img = Tensor4::from_vec([1, 3, 2, 3], data).unwrap();
        let b = encode_ppm(&img).unwrap();
        assert!(b.starts_with(b"P6\n3 2\n255\n"));
        let back = decode_ppm(&b).unwrap();
        for (a, c) in back.data().iter().zip(img.data()) {
            assert!((a - c).abs() < 1e-6);
        }
        assert!(matches!(decode_ppm(&b[..b.len() - 1]), Err(Error::Length(_))));
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(Error::Format(_))));
    }

    proptest::proptest! {
        #[test]
        fn f32m_round_trips_bit_exact(h in 1usize..6, w in 1usize..6, bits in proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO | proptest::num::f32::INFINITE, 36)) {
            let g = Grid2::from_vec(h, w, bits[..h * w].to_vec()).unwrap();
            let back = decode_f32m(&encode_f32m(&g)).unwrap();
            let same = back.data().iter().zip(g.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            proptest::prop_assert!(same);
        }
    }
}
