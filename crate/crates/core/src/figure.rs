//! Side-by-side grayscale comparison images with metric captions.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::volume::Plane;

const GAP: usize = 4;
const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;
const TEXT_SCALE: usize = 2;

/// 3x5 bitmaps, one row per `u8`, most significant of the low three bits on
/// the left.
fn glyph(c: char) -> Option<[u8; GLYPH_H]> {
    Some(match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '/' => [1, 1, 2, 4, 4],
        '-' => [0, 0, 7, 0, 0],
        'H' => [5, 5, 7, 5, 5],
        'R' => [6, 5, 6, 5, 5],
        'i' => [2, 0, 2, 2, 2],
        'n' => [0, 6, 5, 5, 5],
        'f' => [3, 4, 6, 4, 4],
        ' ' => [0; GLYPH_H],
        _ => return None,
    })
}

/// Formats `psnr/ssim` for a caption; infinite PSNR renders as `inf`.
pub fn metric_caption(psnr: f64, ssim: f64) -> String {
    let p = if psnr.is_infinite() { "inf".to_string() } else { format!("{psnr:.2}") };
    format!("{p}/{ssim:.3}")
}

struct Canvas {
    width: usize,
    pixels: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    fn text(&mut self, x0: usize, y0: usize, text: &str) {
        for (k, c) in text.chars().enumerate() {
            let Some(rows) = glyph(c) else { continue };
            let gx = x0 + k * (GLYPH_W + 1) * TEXT_SCALE;
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                        for dy in 0..TEXT_SCALE {
                            for dx in 0..TEXT_SCALE {
                                self.put(gx + col * TEXT_SCALE + dx, y0 + r * TEXT_SCALE + dy, 255);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Lays `panels` out left to right on a black background, each with its
/// caption underneath, and returns (width, height, 8-bit gray pixels).
/// Intensities are clamped to [0, 1].
pub fn render_comparison(panels: &[(Plane, String)]) -> Result<(usize, usize, Vec<u8>)> {
    ensure!(!panels.is_empty(), "comparison needs at least one panel");
    let caption_w = |s: &str| s.chars().count() * (GLYPH_W + 1) * TEXT_SCALE;
    let col_w: Vec<usize> = panels.iter().map(|(p, c)| p.cols().max(caption_w(c))).collect();
    let img_h = panels.iter().map(|(p, _)| p.rows()).max().unwrap_or(0);
    let width = col_w.iter().sum::<usize>() + GAP * (panels.len() + 1);
    let height = img_h + GLYPH_H * TEXT_SCALE + 3 * GAP;
    let mut canvas = Canvas {
        width,
        pixels: vec![0; width * height],
    };
    let mut x0 = GAP;
    for ((plane, caption), w) in panels.iter().zip(&col_w) {
        for r in 0..plane.rows() {
            for c in 0..plane.cols() {
                let v = (plane.get(r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                canvas.put(x0 + c, GAP + r, v);
            }
        }
        canvas.text(x0, img_h + 2 * GAP, caption);
        x0 += w + GAP;
    }
    Ok((width, height, canvas.pixels))
}

pub fn write_comparison_png(path: impl AsRef<Path>, panels: &[(Plane, String)]) -> Result<()> {
    let path = path.as_ref();
    let (w, h, pixels) = render_comparison(panels)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| Error::Format {
        what: "png",
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(&pixels).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panels_are_placed_and_clamped() {
        let a = Plane::from_fn(2, 3, |_, _| 2.0).unwrap();
        let b = Plane::from_fn(4, 2, |r, _| r as f32 / 3.0).unwrap();
        let (w, h, px) = render_comparison(&[(a, String::new()), (b, "1".into())]).unwrap();
        assert_eq!(w, 3 + (GLYPH_W + 1) * TEXT_SCALE + 3 * GAP);
        assert_eq!(h, 4 + GLYPH_H * TEXT_SCALE + 3 * GAP);
        assert_eq!(px[GAP * w + GAP], 255);
        let bx = GAP + 3 + GAP;
        assert_eq!(px[(GAP + 3) * w + bx], 255);
        assert_eq!(px[GAP * w + bx], 0);
    }

    #[test]
    fn captions_cover_metric_text() {
        let text = metric_caption(f64::INFINITY, 0.5) + &metric_caption(-1.25, 1.0) + "HR";
        assert!(text.chars().all(|c| glyph(c).is_some()), "{text}");
        assert_eq!(metric_caption(32.617, 0.95132), "32.62/0.951");
    }

    #[test]
    fn png_round_trips_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        let p = Plane::from_fn(5, 6, |r, c| (r + c) as f32 / 10.0).unwrap();
        write_comparison_png(&path, &[(p, "HR".into())]).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(&path).unwrap()));
        let reader = decoder.read_info().unwrap();
        let (w, h, _) = render_comparison(&[(Plane::from_fn(5, 6, |_, _| 0.0).unwrap(), "HR".into())]).unwrap();
        assert_eq!((reader.info().width as usize, reader.info().height as usize), (w, h));
    }
}
