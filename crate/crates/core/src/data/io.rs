//! Binary PPM/PGM and `key=value` metadata files.

use std::fs;
use std::path::{Path, PathBuf};

use super::Sample;
use crate::error::{Error, Result};
use crate::raster::{Mask, RgbImage};

/// Parsed netpbm header: width, height and the payload offset.
struct Header {
    width: usize,
    height: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8], path: &Path, magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            0,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        // whitespace and comments before each field
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
            return Err(Error::format(path, start, format!("expected {name}")));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .filter(|&v| v > 0 && v < 1 << 20)
            .ok_or_else(|| Error::format(path, start, format!("bad {name}")))?;
        fields[i] = v;
    }
    if fields[2] != 255 {
        return Err(Error::format(
            path,
            pos,
            format!("maxval {} unsupported", fields[2]),
        ));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, pos, "expected whitespace after maxval"));
    }
    Ok(Header {
        width: fields[0],
        height: fields[1],
        payload: pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], path: &Path, hd: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = hd.width * hd.height * channels;
    let have = bytes.len() - hd.payload;
    if have < need {
        return Err(Error::format(
            path,
            bytes.len(),
            format!("truncated payload: {have} of {need} bytes"),
        ));
    }
    if have > need {
        return Err(Error::format(
            path,
            hd.payload + need,
            format!("{} trailing bytes", have - need),
        ));
    }
    Ok(&bytes[hd.payload..])
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let hd = parse_header(bytes, path, b"P6")?;
    let data = payload(bytes, path, &hd, 3)?;
    RgbImage::from_raw(hd.height, hd.width, data.to_vec())
}

/// Raw 8-bit grayscale, values written as given.
pub fn encode_pgm(h: usize, w: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// Grayscale raster as stored, without value checks.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Mask> {
    let hd = parse_header(bytes, path, b"P5")?;
    let data = payload(bytes, path, &hd, 1)?;
    Mask::from_raw(hd.height, hd.width, data.to_vec())
}

/// Binary label stored as 0/255.
pub fn encode_binary_pgm(mask: &Mask) -> Vec<u8> {
    let data: Vec<u8> = mask
        .data
        .iter()
        .map(|&v| if v != 0 { 255 } else { 0 })
        .collect();
    encode_pgm(mask.height, mask.width, &data)
}

pub fn decode_binary_pgm(bytes: &[u8], path: &Path) -> Result<Mask> {
    let hd = parse_header(bytes, path, b"P5")?;
    let data = payload(bytes, path, &hd, 1)?;
    let mut out = Vec::with_capacity(data.len());
    for (i, &v) in data.iter().enumerate() {
        match v {
            0 => out.push(0),
            255 => out.push(1),
            _ => {
                return Err(Error::format(
                    path,
                    hd.payload + i,
                    format!("label value {v} is neither 0 nor 255"),
                ))
            }
        }
    }
    Mask::from_raw(hd.height, hd.width, out)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&read(path)?, path)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    write(path, &encode_ppm(img))
}

pub fn read_pgm(path: &Path) -> Result<Mask> {
    decode_pgm(&read(path)?, path)
}

pub fn write_pgm(path: &Path, h: usize, w: usize, data: &[u8]) -> Result<()> {
    write(path, &encode_pgm(h, w, data))
}

pub fn write_binary_pgm(path: &Path, mask: &Mask) -> Result<()> {
    write(path, &encode_binary_pgm(mask))
}

pub fn read_binary_pgm(path: &Path) -> Result<Mask> {
    decode_binary_pgm(&read(path)?, path)
}

/// Non-empty, non-comment lines with their byte offsets.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').filter_map(move |raw| {
        let at = offset;
        offset += raw.len();
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((at, line))
    })
}

pub fn parse_meta(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    content_lines(text)
        .map(|(at, line)| {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, at, "expected key=value"))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::format(path, at, "empty key"));
            }
            Ok((k.to_string(), v.trim().to_string()))
        })
        .collect()
}

pub fn format_meta(meta: &[(String, String)]) -> String {
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn image_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.ppm"))
}

pub fn mask_path(dir: &Path, stem: &str, task: usize) -> PathBuf {
    dir.join(format!("{stem}.task{task}.pgm"))
}

pub fn meta_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.meta"))
}

pub fn write_sample(dir: &Path, stem: &str, s: &Sample) -> Result<()> {
    write_ppm(&image_path(dir, stem), &s.image)?;
    for (k, m) in s.masks.iter().enumerate() {
        write_binary_pgm(&mask_path(dir, stem, k), m)?;
    }
    write(&meta_path(dir, stem), format_meta(&s.meta).as_bytes())
}

/// Reads a sample with `tasks` masks. Every mask must match the image.
pub fn read_sample(dir: &Path, stem: &str, tasks: usize) -> Result<Sample> {
    let image = read_ppm(&image_path(dir, stem))?;
    let mut masks = Vec::with_capacity(tasks);
    for k in 0..tasks {
        let p = mask_path(dir, stem, k);
        if !p.is_file() {
            return Err(Error::format(&p, 0, format!("missing mask for task {k}")));
        }
        let m = read_binary_pgm(&p)?;
        if m.height != image.height || m.width != image.width {
            return Err(Error::format(
                &p,
                0,
                format!(
                    "mask is {}x{}, image is {}x{}",
                    m.height, m.width, image.height, image.width
                ),
            ));
        }
        masks.push(m);
    }
    let mp = meta_path(dir, stem);
    let meta = if mp.is_file() {
        let bytes = read(&mp)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::format(&mp, e.utf8_error().valid_up_to(), "not UTF-8"))?;
        parse_meta(&text, &mp)?
    } else {
        Vec::new()
    };
    Ok(Sample { image, masks, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let mut b = b"P5\n# made by hand\n3 # width\n2\n255\n".to_vec();
        b.extend_from_slice(&[0, 255, 0, 255, 255, 0]);
        let m = decode_binary_pgm(&b, Path::new("t.pgm")).unwrap();
        assert_eq!((m.height, m.width), (2, 3));
        assert_eq!(m.data, vec![0, 1, 0, 1, 1, 0]);
    }

    #[test]
    fn non_binary_label_is_located() {
        let mut b = encode_pgm(2, 2, &[0, 255, 7, 0]);
        let off = b.len() - 2;
        match decode_binary_pgm(&b, Path::new("t.pgm")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, off),
            r => panic!("{r:?}"),
        }
        b.truncate(b.len() - 1);
        assert!(matches!(
            decode_binary_pgm(&b, Path::new("t.pgm")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::from_raw(1, 2, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let back = decode_ppm(&encode_ppm(&img), Path::new("x")).unwrap();
        assert_eq!(back, img);
        assert!(decode_ppm(b"P3\n1 1\n255\n", Path::new("x")).is_err());
    }

    #[test]
    fn meta_lines() {
        let m = parse_meta("# c\nseed=4\n\n a = b c \n", Path::new("m")).unwrap();
        assert_eq!(
            m,
            vec![("seed".into(), "4".into()), ("a".into(), "b c".into())]
        );
        match parse_meta("x=1\nbroken\n", Path::new("m")) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            r => panic!("{r:?}"),
        }
    }
}
