//! RGB images as `[3, H, W]` tensors with values in `[0, 1]`, stored as binary PPM.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::DataError;
use crate::tensor::Tensor;

/// `(width, height)` of a `[3, H, W]` image.
pub fn image_size(img: &Tensor) -> Result<(usize, usize), DataError> {
    match *img.shape() {
        [3, h, w] => Ok((w, h)),
        _ => Err(DataError::ImageShape(img.shape().to_vec())),
    }
}

/// Parses a P6 header, returning `(width, height, payload offset)`.
fn parse_header(bytes: &[u8]) -> Result<(usize, usize, usize), DataError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(DataError::Ppm("bad magic (expected P6)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(DataError::Ppm("malformed header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DataError::Ppm("header value out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(DataError::Ppm("missing whitespace after header".into()));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(DataError::Ppm(format!("invalid dimensions {w}x{h}")));
    }
    if maxval != 255 {
        return Err(DataError::Ppm(format!("unsupported maxval {maxval}")));
    }
    Ok((w, h, pos + 1))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, DataError> {
    let (w, h, offset) = parse_header(bytes)?;
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| DataError::Ppm(format!("invalid dimensions {w}x{h}")))?;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(DataError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let mut data = vec![0.0; expected];
    let plane = w * h;
    for (i, px) in payload[..expected].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data).expect("shape matches payload"))
}

/// Encodes with values clamped to `[0, 1]` and rounded to 8 bits.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>, DataError> {
    let (w, h) = image_size(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = w * h;
    let d = img.data();
    out.reserve(plane * 3);
    for i in 0..plane {
        for c in 0..3 {
            let v = d[c * plane + i];
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_ppm(path: &Path) -> Result<Tensor, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_ppm(&bytes)
}

pub fn save_ppm(img: &Tensor, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_ppm(img)?).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads only the header of a PPM file; returns `(width, height)`.
pub fn read_ppm_size(path: &Path) -> Result<(usize, usize), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut head = Vec::with_capacity(512);
    fs::File::open(path)
        .map_err(io)?
        .take(512)
        .read_to_end(&mut head)
        .map_err(io)?;
    let (w, h, _) = parse_header(&head)?;
    Ok((w, h))
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_bilinear(img: &Tensor, width: usize, height: usize) -> Result<Tensor, DataError> {
    let (w, h) = image_size(img)?;
    if (w, h) == (width, height) {
        return Ok(img.clone());
    }
    let src = img.data();
    let mut out = vec![0.0; 3 * width * height];
    let sample = |pos: usize, out_n: usize, in_n: usize| {
        let f = ((pos as f64 + 0.5) * in_n as f64 / out_n as f64 - 0.5).clamp(0.0, (in_n - 1) as f64);
        let i = f.floor() as usize;
        let j = (i + 1).min(in_n - 1);
        (i, j, f - i as f64)
    };
    for y in 0..height {
        let (y0, y1, fy) = sample(y, height, h);
        for x in 0..width {
            let (x0, x1, fx) = sample(x, width, w);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| src[(c * h + yy) * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(c * height + y) * width + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(Tensor::new(&[3, height, width], out).expect("shape matches"))
}
