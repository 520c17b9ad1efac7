//! Procedural digit images in the MNIST IDX convention, for desk-scale digit
//! transfer runs. Each sample is a hand-designed 8x8 glyph with a random
//! shift, per-pixel intensity jitter and background noise, so a handful of
//! labelled samples is not enough to nail a class.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Domain};
use crate::error::Result;
use crate::numerics::Matrix;
use crate::rng::stream_rng;

pub const IMAGE_SIDE: usize = 8;
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Appearance applied to a whole domain's images, giving the two domains a
/// structural gap on top of the class split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigitStyle {
    #[default]
    Plain,
    /// Photographic negative: v -> 1 - v.
    Inverted,
    /// 3x3 box blur, border-clamped.
    Blurred,
}

fn apply_style(img: &mut [f64], style: DigitStyle) {
    match style {
        DigitStyle::Plain => {}
        DigitStyle::Inverted => {
            for v in img.iter_mut() {
                *v = 1.0 - *v;
            }
        }
        DigitStyle::Blurred => {
            let side = IMAGE_SIDE as isize;
            let src = img.to_vec();
            for r in 0..side {
                for c in 0..side {
                    let mut acc = 0.0;
                    let mut count = 0.0;
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            let rr = r + dr;
                            let cc = c + dc;
                            if rr >= 0 && rr < side && cc >= 0 && cc < side {
                                acc += src[(rr * side + cc) as usize];
                                count += 1.0;
                            }
                        }
                    }
                    img[(r * side + c) as usize] = acc / count;
                }
            }
        }
    }
}

/// 8x8 glyphs for digits 0-9, one string row per pixel row.
const GLYPHS: [[&str; 8]; 10] = [
    [
        "..####..",
        ".##..##.",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        ".#....#.",
        ".##..##.",
        "..####..",
    ],
    [
        "...##...",
        "..###...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "...##...",
        "..####..",
    ],
    [
        "..####..",
        ".#...##.",
        ".....##.",
        "....##..",
        "...##...",
        "..##....",
        ".##.....",
        ".######.",
    ],
    [
        "..####..",
        ".#...##.",
        ".....##.",
        "...###..",
        ".....##.",
        ".....##.",
        ".#...##.",
        "..####..",
    ],
    [
        "....##..",
        "...###..",
        "..#.##..",
        ".#..##..",
        ".######.",
        "....##..",
        "....##..",
        "....##..",
    ],
    [
        ".######.",
        ".##.....",
        ".##.....",
        ".#####..",
        ".....##.",
        ".....##.",
        ".#...##.",
        "..####..",
    ],
    [
        "..####..",
        ".##.....",
        ".#......",
        ".#####..",
        ".##..##.",
        ".#....#.",
        ".##..##.",
        "..####..",
    ],
    [
        ".######.",
        ".....##.",
        "....##..",
        "....##..",
        "...##...",
        "...##...",
        "..##....",
        "..##....",
    ],
    [
        "..####..",
        ".##..##.",
        ".##..##.",
        "..####..",
        ".##..##.",
        ".#....#.",
        ".##..##.",
        "..####..",
    ],
    [
        "..####..",
        ".##..##.",
        ".#....#.",
        ".##..##.",
        "..#####.",
        "......#.",
        ".....##.",
        "..####..",
    ],
];

fn render(digit: usize, rng: &mut ChaCha8Rng, noise: f64, shift: usize) -> Vec<f64> {
    let glyph = &GLYPHS[digit];
    let s = shift as isize;
    let dx: isize = rng.gen_range(-s..=s);
    let dy: isize = rng.gen_range(-s..=s);
    let stroke_floor = rng.gen_range(0.55..0.8);
    let mut img = vec![0.0; IMAGE_DIM];
    for (r, px) in img.iter_mut().enumerate() {
        let row = (r / IMAGE_SIDE) as isize - dy;
        let col = (r % IMAGE_SIDE) as isize - dx;
        let on = row >= 0
            && row < IMAGE_SIDE as isize
            && col >= 0
            && col < IMAGE_SIDE as isize
            && glyph[row as usize].as_bytes()[col as usize] == b'#';
        let value: f64 = if on {
            // Occasionally drop a stroke pixel entirely.
            if rng.gen_bool(0.08) {
                rng.gen_range(0.0..0.2)
            } else {
                rng.gen_range(stroke_floor..1.0)
            }
        } else {
            rng.gen_range(0.0..noise)
        };
        *px = value.clamp(0.0, 1.0);
    }
    img
}

/// Generate `per_class` samples for each digit in `classes`. The background
/// noise level and the style are the difficulty knobs.
#[allow(clippy::too_many_arguments)]
pub fn generate(classes: &[usize], per_class: usize, noise: f64, style: DigitStyle, shift: usize, seed: u64, stream: &str, domain: Domain) -> Result<Dataset> {
    let mut rng = stream_rng(seed, &format!("digits.{stream}"));
    let n = classes.len() * per_class;
    let mut samples = Matrix::zeros(n, IMAGE_DIM);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for &digit in classes {
        assert!(digit < 10, "digit classes are 0-9");
        for _ in 0..per_class {
            let mut img = render(digit, &mut rng, noise, shift);
            apply_style(&mut img, style);
            for (c, &v) in img.iter().enumerate() {
                samples.set(row, c, v);
            }
            labels.push(digit);
            row += 1;
        }
    }
    Dataset::new(samples, labels, domain)
}
