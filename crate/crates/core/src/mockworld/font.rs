//! Embedded 5x7 bitmap glyphs. Every glyph has ink in its top and bottom
//! rows, so a glyph rendered at height `h` measures exactly `h` pixels.

pub const GLYPH_COLS: usize = 5;
pub const GLYPH_ROWS: usize = 7;

#[rustfmt::skip]
const GLYPHS: &[(char, [&str; GLYPH_ROWS])] = &[
    ('A', [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
    ('B', ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."]),
    ('C', [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."]),
    ('D', ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."]),
    ('E', ["#####", "#....", "#....", "####.", "#....", "#....", "#####"]),
    ('F', ["#####", "#....", "#....", "####.", "#....", "#....", "#...."]),
    ('H', ["#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"]),
    ('K', ["#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"]),
    ('L', ["#....", "#....", "#....", "#....", "#....", "#....", "#####"]),
    ('M', ["#...#", "##.##", "#.#.#", "#.#.#", "#...#", "#...#", "#...#"]),
    ('N', ["#...#", "##..#", "#.#.#", "#..##", "#...#", "#...#", "#...#"]),
    ('P', ["####.", "#...#", "#...#", "####.", "#....", "#....", "#...."]),
    ('R', ["####.", "#...#", "#...#", "####.", "#.#..", "#..#.", "#...#"]),
    ('T', ["#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."]),
    ('U', ["#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."]),
    ('V', ["#...#", "#...#", "#...#", "#...#", "#...#", ".#.#.", "..#.."]),
    ('X', ["#...#", "#...#", ".#.#.", "..#..", ".#.#.", "#...#", "#...#"]),
    ('Z', ["#####", "....#", "...#.", "..#..", ".#...", "#....", "#####"]),
    ('2', [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"]),
    ('3', ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."]),
    ('4', ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."]),
    ('5', ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."]),
    ('7', ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."]),
    ('8', [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."]),
    ('9', [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."]),
];

/// Characters that can be rendered.
pub fn alphabet() -> impl Iterator<Item = char> {
    GLYPHS.iter().map(|(c, _)| *c)
}

pub fn alphabet_len() -> usize {
    GLYPHS.len()
}

pub fn glyph_at(index: usize) -> char {
    GLYPHS[index].0
}

fn rows(c: char) -> Option<&'static [&'static str; GLYPH_ROWS]> {
    GLYPHS.iter().find(|(g, _)| *g == c).map(|(_, r)| r)
}

/// Rendered width for a glyph of the given height.
pub fn glyph_width(height: u32) -> u32 {
    ((height as f64 * GLYPH_COLS as f64 / GLYPH_ROWS as f64).round() as u32).max(1)
}

/// Whether pixel `(x, y)` of a `width`x`height` rendering of `c` is ink
/// (nearest-neighbour scaling of the bitmap).
pub fn is_ink(c: char, width: u32, height: u32, x: u32, y: u32) -> bool {
    let Some(rows) = rows(c) else { return false };
    let col = (x as usize * GLYPH_COLS) / width as usize;
    let row = (y as usize * GLYPH_ROWS) / height as usize;
    rows[row].as_bytes()[col] == b'#'
}
