//! Named colours shared by the synthetic renderer, the toy embedders and the
//! mock recaptioner.

pub const PALETTE: [(&str, [f32; 3]); 10] = [
    ("red", [0.9, 0.1, 0.1]),
    ("orange", [0.95, 0.55, 0.1]),
    ("yellow", [0.95, 0.9, 0.15]),
    ("green", [0.15, 0.75, 0.2]),
    ("cyan", [0.1, 0.85, 0.9]),
    ("blue", [0.1, 0.2, 0.9]),
    ("purple", [0.6, 0.15, 0.8]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
    ("gray", [0.5, 0.5, 0.5]),
];

pub fn rgb(name: &str) -> Option<[f32; 3]> {
    PALETTE.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

pub fn index(name: &str) -> Option<usize> {
    PALETTE.iter().position(|(n, _)| *n == name)
}

pub fn dist2(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn nearest(c: [f32; 3]) -> &'static str {
    PALETTE
        .iter()
        .min_by(|a, b| dist2(a.1, c).total_cmp(&dist2(b.1, c)))
        .map(|(n, _)| *n)
        .expect("palette is non-empty")
}

/// Soft assignment of one pixel over the palette (sums to 1).
pub fn soft_assign(c: [f32; 3], out: &mut [f32; PALETTE.len()]) {
    const SIGMA2: f32 = 2.0 * 0.12 * 0.12;
    let mut total = 0.0;
    for (o, (_, p)) in out.iter_mut().zip(PALETTE.iter()) {
        *o = (-dist2(c, *p) / SIGMA2).exp();
        total += *o;
    }
    if total > 0.0 {
        out.iter_mut().for_each(|o| *o /= total);
    }
}

/// Mean soft palette assignment over a frame's pixels.
pub fn histogram(frame: &crate::backbone::Frame) -> [f32; PALETTE.len()] {
    let mut hist = [0f32; PALETTE.len()];
    let mut tmp = [0f32; PALETTE.len()];
    let mut n = 0usize;
    for px in frame.iter_pixels() {
        soft_assign(px, &mut tmp);
        hist.iter_mut().zip(&tmp).for_each(|(h, t)| *h += t);
        n += 1;
    }
    hist.iter_mut().for_each(|h| *h /= n as f32);
    hist
}

pub fn l1(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Frame;

    #[test]
    fn histogram_of_flat_frame_is_peaked() {
        let f = Frame::filled(4, 4, rgb("blue").unwrap());
        let h = histogram(&f);
        assert!((h.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        assert!(h[index("blue").unwrap()] > 0.99);
        assert_eq!(nearest([0.8, 0.2, 0.15]), "red");
    }
}
