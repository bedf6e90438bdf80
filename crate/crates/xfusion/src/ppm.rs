//! Binary portable pixmaps (P6) for rendered and sampled images.

use xfusion_core::synth::{ImageLatent, CHANNELS, IMAGE_SIZE};

use crate::error::{CliError, CliResult};

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

/// Encodes `img` with each pixel repeated `scale`×`scale` times.
pub fn encode_ppm(img: &ImageLatent, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let side = IMAGE_SIZE * scale;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            for c in 0..CHANNELS {
                out.push(to_byte(img.get(c, y / scale, x / scale)));
            }
        }
    }
    out
}

/// Decodes a P6 image whose side is a multiple of the latent size, sampling the top-left
/// pixel of each block.
pub fn decode_ppm(bytes: &[u8]) -> CliResult<ImageLatent> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
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
            return Err(CliError::user("ppm: truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(CliError::user(format!("ppm: expected P6, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| CliError::user(format!("ppm: bad header field `{s}`")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(CliError::user(format!("ppm: max value {max}, expected 255")));
    }
    if w != h || w == 0 || w % IMAGE_SIZE != 0 {
        return Err(CliError::user(format!("ppm: {w}x{h} is not a multiple of {IMAGE_SIZE}x{IMAGE_SIZE}")));
    }
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != w * h * CHANNELS {
        return Err(CliError::user(format!(
            "ppm: {} pixel bytes, expected {}",
            data.len(),
            w * h * CHANNELS
        )));
    }
    let scale = w / IMAGE_SIZE;
    let mut img = ImageLatent::blank();
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            for c in 0..CHANNELS {
                img.set(c, y, x, from_byte(data[((y * scale) * w + x * scale) * CHANNELS + c]));
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use xfusion_core::eval::OracleClassifier;
    use xfusion_core::synth::{render_scene, SceneSpec};

    #[test]
    fn renders_survive_the_round_trip() {
        for s in SceneSpec::all() {
            let img = render_scene(&s);
            for scale in [1, 4] {
                let back = decode_ppm(&encode_ppm(&img, scale)).unwrap();
                assert!(back.mean_abs_error(&img) < 1e-2);
                assert_eq!(OracleClassifier.classify(&back), Some(s));
            }
        }
    }

    #[test]
    fn header_is_standard() {
        let bytes = encode_ppm(&ImageLatent::blank(), 2);
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 32 * 32 * 3);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let good = encode_ppm(&ImageLatent::blank(), 1);
        assert!(decode_ppm(&good[..good.len() - 1]).is_err());
        assert!(decode_ppm(b"P3\n16 16\n255\n").is_err());
        assert!(decode_ppm(b"P6\n15 15\n255\n").is_err());
        assert!(decode_ppm(b"P6\n").is_err());
    }
}
