/// Display colour of class `class` among `classes`: black for background,
/// otherwise HSV(360·(k−1)/K, 0.75, 0.95) converted by the sector formula and
/// rounded half-up to 8 bits.
pub fn class_color(class: u16, classes: usize) -> [u8; 3] {
    if class == 0 || classes == 0 {
        return [0, 0, 0];
    }
    let (s, v) = (0.75, 0.95);
    let h = 360.0 * (class as f64 - 1.0) / classes as f64;
    let chroma = v * s;
    let hp = h / 60.0;
    let x = chroma * (1.0 - libm::fabs(libm::fmod(hp, 2.0) - 1.0));
    let (r, g, b) = match hp as u32 {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    let m = v - chroma;
    let q = |c: f64| libm::floor((c + m) * 255.0 + 0.5) as u8;
    [q(r), q(g), q(b)]
}
