//! Embedded 5x7 bitmap font covering `0-9` and `A-Z`.

use crate::error::{Error, Result};

pub const GLYPH_WIDTH: usize = 5;
pub const GLYPH_HEIGHT: usize = 7;

/// Rows top to bottom; bit 4 is the leftmost column.
const DIGITS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
];

const LETTERS: [[u8; 7]; 26] = [
    [0b01110, 0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001],
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110],
    [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110],
    [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100],
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111],
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000],
    [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111],
    [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001],
    [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
    [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100],
    [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001],
    [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111],
    [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001],
    [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001],
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000],
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101],
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001],
    [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110],
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100],
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110],
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
    [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
    [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001],
    [0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100],
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111],
];

/// Row-major binary image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitmap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
}

impl Bitmap {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.pixels[row * self.width + col]
    }
}

fn rows_of(ch: char) -> Option<&'static [u8; 7]> {
    match ch.to_ascii_uppercase() {
        c @ '0'..='9' => Some(&DIGITS[c as usize - '0' as usize]),
        c @ 'A'..='Z' => Some(&LETTERS[c as usize - 'A' as usize]),
        _ => None,
    }
}

/// Glyph width at a given rendered height.
pub fn glyph_width(height_px: usize) -> usize {
    ((GLYPH_WIDTH * height_px) as f64 / GLYPH_HEIGHT as f64).round() as usize
}

/// Renders `ch` at `height_px` rows by nearest-neighbour scaling of the 5x7 source.
/// Lowercase letters render as their uppercase form.
pub fn render_glyph(ch: char, height_px: usize) -> Result<Bitmap> {
    let rows = rows_of(ch).ok_or_else(|| Error::InvalidInput(format!("character `{ch}` not in the alphabet")))?;
    if height_px < GLYPH_HEIGHT {
        return Err(Error::InvalidInput(format!("glyph height {height_px} below {GLYPH_HEIGHT}")));
    }
    let width = glyph_width(height_px);
    let mut pixels = Vec::with_capacity(width * height_px);
    for r in 0..height_px {
        let src_r = r * GLYPH_HEIGHT / height_px;
        for c in 0..width {
            let src_c = c * GLYPH_WIDTH / width;
            pixels.push(rows[src_r] >> (GLYPH_WIDTH - 1 - src_c) & 1 == 1);
        }
    }
    Ok(Bitmap {
        width,
        height: height_px,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ascii(b: &Bitmap) -> Vec<String> {
        (0..b.height)
            .map(|r| (0..b.width).map(|c| if b.get(r, c) { '#' } else { '.' }).collect())
            .collect()
    }

    #[test]
    fn identity_scale() {
        let a = render_glyph('A', 7).unwrap();
        assert_eq!(ascii(&a), [".###.", "#...#", "#...#", "#...#", "#####", "#...#", "#...#"]);
    }

    #[test]
    fn double_scale_makes_blocks() {
        let small = render_glyph('A', 7).unwrap();
        let big = render_glyph('A', 14).unwrap();
        assert_eq!((big.width, big.height), (10, 14));
        for r in 0..14 {
            for c in 0..10 {
                assert_eq!(big.get(r, c), small.get(r / 2, c / 2));
            }
        }
    }

    #[test]
    fn rejects_unknown_and_small() {
        assert!(render_glyph('#', 7).is_err());
        assert!(render_glyph('A', 6).is_err());
        assert_eq!(render_glyph('q', 9).unwrap(), render_glyph('Q', 9).unwrap());
    }

    #[test]
    fn glyphs_are_distinct() {
        let all: Vec<Bitmap> = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"
            .chars()
            .map(|c| render_glyph(c, 7).unwrap())
            .collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i], all[j], "{i} vs {j}");
            }
        }
    }
}
