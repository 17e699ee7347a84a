//! Side-by-side comparison grids with labels drawn from a built-in 3x5
//! pixel glyph table.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ifblend::data::{load_rgb, save_png, BitDepth};
use ifblend::Tensor;

use crate::config::ConfigError;

const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;
const SCALE: usize = 2;
const PAD: usize = 3;
const GAP: usize = 4;
const BACKGROUND: f32 = 0.12;

/// Rows top to bottom, `#` lit.
const GLYPHS: &[(char, &str)] = &[
    ('0', "####.##.##.####"),
    ('1', ".#.##..#..#.###"),
    ('2', "###..#####..###"),
    ('3', "###..#.##..####"),
    ('4', "#.##.####..#..#"),
    ('5', "####..###..####"),
    ('6', "####..####.####"),
    ('7', "###..#..#.#..#."),
    ('8', "####.#####.####"),
    ('9', "####.####..####"),
    ('a', ".#.#.#####.##.#"),
    ('b', "##.#.###.#.###."),
    ('c', ".###..#..#...##"),
    ('d', "##.#.##.##.###."),
    ('e', "####..##.#..###"),
    ('f', "####..##.#..#.."),
    ('g', ".###..#.##.#.##"),
    ('h', "#.##.#####.##.#"),
    ('i', "###.#..#..#.###"),
    ('j', "..#..#..##.#.#."),
    ('k', "#.##.###.#.##.#"),
    ('l', "#..#..#..#..###"),
    ('m', "#.########.##.#"),
    ('n', "##.#.##.##.##.#"),
    ('o', ".#.#.##.##.#.#."),
    ('p', "##.#.###.#..#.."),
    ('q', ".#.#.##.####.##"),
    ('r', "##.#.###.#.##.#"),
    ('s', ".###...#...###."),
    ('t', "###.#..#..#..#."),
    ('u', "#.##.##.##.####"),
    ('v', "#.##.##.##.#.#."),
    ('w', "#.##.########.#"),
    ('x', "#.##.#.#.#.##.#"),
    ('y', "#.##.#.#..#..#."),
    ('z', "###..#.#.#..###"),
    ('-', "......###......"),
    ('_', "............###"),
    ('.', ".............#."),
    (' ', "..............."),
    ('?', "###..#.#.....#."),
];

fn glyph(c: char) -> [bool; GLYPH_W * GLYPH_H] {
    let c = c.to_ascii_lowercase();
    let rows = GLYPHS.iter().find(|(g, _)| *g == c).or_else(|| GLYPHS.iter().find(|(g, _)| *g == '?')).unwrap().1;
    let mut out = [false; GLYPH_W * GLYPH_H];
    for (o, ch) in out.iter_mut().zip(rows.chars()) {
        *o = ch == '#';
    }
    out
}

/// Height of a label strip in pixels.
pub fn strip_height() -> usize {
    GLYPH_H * SCALE + 2 * PAD
}

/// A `[1, 3, strip_height, width]` strip with `text` in light pixels on a
/// dark background; text that does not fit is cut.
pub fn label_strip(text: &str, width: usize) -> Tensor {
    let h = strip_height();
    let mut t = Tensor::full([1, 3, h, width], BACKGROUND);
    let advance = (GLYPH_W + 1) * SCALE;
    let hw = h * width;
    for (i, c) in text.chars().enumerate() {
        let x0 = PAD + i * advance;
        if x0 + GLYPH_W * SCALE > width {
            break;
        }
        let g = glyph(c);
        for gy in 0..GLYPH_H {
            for gx in 0..GLYPH_W {
                if !g[gy * GLYPH_W + gx] {
                    continue;
                }
                for dy in 0..SCALE {
                    for dx in 0..SCALE {
                        let idx = (PAD + gy * SCALE + dy) * width + x0 + gx * SCALE + dx;
                        for ch in 0..3 {
                            t.data_mut()[ch * hw + idx] = 0.95;
                        }
                    }
                }
            }
        }
    }
    t
}

/// Places labeled images left to right, each under its label strip, padded
/// to the tallest image.
pub fn compose(cells: &[(String, Tensor)]) -> Tensor {
    let max_h = cells.iter().map(|(_, t)| t.h()).max().unwrap_or(0);
    let total_h = strip_height() + max_h;
    let total_w = cells.iter().map(|(_, t)| t.w()).sum::<usize>() + GAP * cells.len().saturating_sub(1);
    let mut out = Tensor::full([1, 3, total_h, total_w.max(1)], BACKGROUND);
    let ow = out.w();
    let mut x0 = 0;
    for (label, img) in cells {
        let (h, w) = (img.h(), img.w());
        let strip = label_strip(label, w);
        for ch in 0..3 {
            let dst = out.plane_mut(0, ch);
            for y in 0..strip.h() {
                dst[y * ow + x0..y * ow + x0 + w].copy_from_slice(&strip.plane(0, ch)[y * w..(y + 1) * w]);
            }
            let src = img.plane(0, ch);
            for y in 0..h {
                let row = (strip_height() + y) * ow + x0;
                dst[row..row + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        x0 += w + GAP;
    }
    out
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for e in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let p = e?.path();
        if p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(s.to_string());
            }
        }
    }
    Ok(out)
}

/// Writes `<out>/<stem>.png` for every stem shared by all columns. Columns
/// whose stems differ are an error listing what each one lacks.
pub fn build_grids(columns: &[(String, PathBuf)], out: &Path) -> Result<Vec<PathBuf>> {
    if columns.is_empty() {
        bail!(ConfigError("grid needs at least one column".into()));
    }
    let sets: Vec<BTreeSet<String>> = columns.iter().map(|(_, d)| png_stems(d)).collect::<Result<_>>()?;
    let all: BTreeSet<String> = sets.iter().flatten().cloned().collect();
    let mut problems = Vec::new();
    for ((label, _), set) in columns.iter().zip(&sets) {
        let missing: Vec<&str> = all.difference(set).map(String::as_str).collect();
        if !missing.is_empty() {
            problems.push(format!("{label} lacks {}", missing.join(", ")));
        }
    }
    if !problems.is_empty() {
        bail!(ConfigError(format!("stem mismatch: {}", problems.join("; "))));
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    for stem in &all {
        let cells = columns
            .iter()
            .map(|(label, dir)| Ok((label.clone(), load_rgb(&dir.join(format!("{stem}.png")))?.0)))
            .collect::<Result<Vec<_>>>()?;
        let path = out.join(format!("{stem}.png"));
        save_png(&path, &compose(&cells), BitDepth::Eight)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyph_table_is_well_formed() {
        for (c, rows) in GLYPHS {
            assert_eq!(rows.len(), GLYPH_W * GLYPH_H, "{c}");
            assert!(rows.chars().all(|ch| ch == '#' || ch == '.'), "{c}");
        }
        assert_eq!(glyph('A'), glyph('a'));
        assert_eq!(glyph('%'), glyph('?'));
    }

    #[test]
    fn strip_draws_text_and_clips() {
        let s = label_strip("ab", 40);
        assert_eq!(s.shape(), [1, 3, strip_height(), 40]);
        assert!(s.data().iter().any(|&v| v > 0.5));
        let empty = label_strip("", 10);
        assert!(empty.data().iter().all(|&v| v == BACKGROUND));
        let tiny = label_strip("long label", 4);
        assert!(tiny.data().iter().all(|&v| v == BACKGROUND));
    }

    #[test]
    fn compose_pads_to_the_tallest_cell() {
        let a = Tensor::full([1, 3, 10, 8], 1.0);
        let b = Tensor::full([1, 3, 6, 5], 0.5);
        let g = compose(&[("a".into(), a), ("b".into(), b)]);
        assert_eq!(g.shape(), [1, 3, strip_height() + 10, 8 + GAP + 5]);
        let top = strip_height();
        assert_eq!(g.at([0, 0, top, 0]), 1.0);
        assert_eq!(g.at([0, 0, top, 8 + GAP]), 0.5);
        assert_eq!(g.at([0, 0, top + 9, 8 + GAP]), BACKGROUND);
    }
}
