//! NPY v1.0 for the three element types the tool exchanges: `<f4` cubes,
//! `<u2` label rasters and `<f8` parameter tensors. C order only.

use std::fmt;

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const PREAMBLE: usize = 10;
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F4,
    U2,
    F8,
}

impl Dtype {
    pub fn descr(self) -> &'static str {
        match self {
            Dtype::F4 => "<f4",
            Dtype::U2 => "<u2",
            Dtype::F8 => "<f8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F4 => 4,
            Dtype::U2 => 2,
            Dtype::F8 => 8,
        }
    }

    fn from_descr(s: &str) -> Option<Self> {
        match s {
            "<f4" => Some(Dtype::F4),
            "<u2" => Some(Dtype::U2),
            "<f8" => Some(Dtype::F8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NpyData {
    F4(Vec<f32>),
    U2(Vec<u16>),
    F8(Vec<f64>),
}

impl NpyData {
    pub fn dtype(&self) -> Dtype {
        match self {
            NpyData::F4(_) => Dtype::F4,
            NpyData::U2(_) => Dtype::U2,
            NpyData::F8(_) => Dtype::F8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NpyData::F4(v) => v.len(),
            NpyData::U2(v) => v.len(),
            NpyData::F8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

/// Where and why decoding stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FormatError {
    pub offset: usize,
    pub detail: String,
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "byte {}: {}", self.offset, self.detail)
    }
}

impl std::error::Error for FormatError {}

fn fail<T>(offset: usize, detail: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError {
        offset,
        detail: detail.into(),
    })
}

fn header_text(dtype: Dtype, shape: &[usize]) -> String {
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut h = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {dims}, }}",
        dtype.descr()
    );
    let unpadded = PREAMBLE + h.len() + 1;
    h.extend(std::iter::repeat_n(' ', unpadded.next_multiple_of(ALIGN) - unpadded));
    h.push('\n');
    h
}

/// Panics if `shape` does not describe `data.len()` elements or the header
/// would overflow the v1.0 length field; both are caller bugs.
pub fn encode(shape: &[usize], data: &NpyData) -> Vec<u8> {
    assert_eq!(shape.iter().product::<usize>(), data.len(), "shape does not match payload");
    let header = header_text(data.dtype(), shape);
    let hlen = u16::try_from(header.len()).expect("npy header too long for v1.0");
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + data.len() * data.dtype().size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&hlen.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match data {
        NpyData::F4(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::U2(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        NpyData::F8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

// Minimal reader for the dict literal numpy writes. Offsets are absolute.
struct DictParser<'a> {
    text: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> DictParser<'a> {
    fn at(&self) -> usize {
        self.base + self.pos
    }

    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.text.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), FormatError> {
        if self.eat(c) {
            Ok(())
        } else {
            fail(self.at(), format!("expected `{}` in header", c as char))
        }
    }

    fn string(&mut self) -> Result<&'a str, FormatError> {
        self.skip_ws();
        let quote = match self.text.get(self.pos) {
            Some(&q @ (b'\'' | b'"')) => q,
            _ => return fail(self.at(), "expected a quoted string in header"),
        };
        let start = self.pos + 1;
        let len = self.text[start..]
            .iter()
            .position(|&c| c == quote)
            .ok_or(FormatError {
                offset: self.base + start,
                detail: "unterminated string in header".into(),
            })?;
        self.pos = start + len + 1;
        std::str::from_utf8(&self.text[start..start + len]).or_else(|_| fail(self.base + start, "header is not UTF-8"))
    }

    fn word(&mut self) -> &'a [u8] {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        &self.text[start..self.pos]
    }

    fn shape(&mut self) -> Result<Vec<usize>, FormatError> {
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            if self.eat(b')') {
                return Ok(dims);
            }
            let at = self.at();
            let w = self.word();
            let d = std::str::from_utf8(w)
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or(FormatError {
                    offset: at,
                    detail: "shape entries must be non-negative integers".into(),
                })?;
            dims.push(d);
            if !self.eat(b',') {
                self.expect(b')')?;
                return Ok(dims);
            }
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<NpyArray, FormatError> {
    if bytes.len() < PREAMBLE || &bytes[..6] != MAGIC {
        return fail(0, "missing NPY magic");
    }
    if bytes[6..8] != [1, 0] {
        return fail(6, format!("unsupported NPY version {}.{}", bytes[6], bytes[7]));
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = PREAMBLE + hlen;
    if bytes.len() < data_start {
        return fail(8, format!("header length {hlen} runs past the end of the file"));
    }
    let mut p = DictParser {
        text: &bytes[PREAMBLE..data_start],
        pos: 0,
        base: PREAMBLE,
    };
    let (mut descr, mut fortran, mut shape) = (None, None, None);
    p.expect(b'{')?;
    while !p.eat(b'}') {
        let key_at = p.at();
        let key = p.string()?;
        p.expect(b':')?;
        match key {
            "descr" => {
                p.skip_ws();
                let at = p.at();
                let s = p.string()?;
                descr = Some(Dtype::from_descr(s).ok_or(FormatError {
                    offset: at,
                    detail: format!("unsupported dtype {s}"),
                })?);
            }
            "fortran_order" => {
                p.skip_ws();
                let at = p.at();
                fortran = Some(match p.word() {
                    b"False" => false,
                    b"True" => true,
                    _ => return fail(at, "fortran_order must be True or False"),
                });
            }
            "shape" => shape = Some(p.shape()?),
            other => return fail(key_at, format!("unexpected header key {other}")),
        }
        if !p.eat(b',') {
            p.expect(b'}')?;
            break;
        }
    }
    let (Some(dtype), Some(fortran), Some(shape)) = (descr, fortran, shape) else {
        return fail(PREAMBLE, "header lacks descr, fortran_order or shape");
    };
    if fortran {
        return fail(PREAMBLE, "Fortran-ordered arrays are not supported");
    }
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or(FormatError {
            offset: PREAMBLE,
            detail: "shape overflows".into(),
        })?;
    let payload = &bytes[data_start..];
    let expected = count.saturating_mul(dtype.size());
    if payload.len() != expected {
        return fail(
            data_start,
            format!(
                "shape {shape:?} needs {expected} payload bytes, found {}",
                payload.len()
            ),
        );
    }
    let data = match dtype {
        Dtype::F4 => NpyData::F4(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U2 => NpyData::U2(
            payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F8 => NpyData::F8(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(NpyArray { shape, data })
}
