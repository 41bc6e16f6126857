use crate::error::{Error, Result};

/// Anchor colours at 0, 0.25, 0.5, 0.75 and 1 (blue, cyan, green, yellow, red).
pub const ANCHORS: [[f64; 3]; 5] = [
    [0.0, 0.0, 0.5],
    [0.0, 0.75, 1.0],
    [0.5, 1.0, 0.5],
    [1.0, 0.75, 0.0],
    [0.5, 0.0, 0.0],
];

/// RGB colour of a normalised amplitude.
pub fn color(v: f64) -> Result<[f64; 3]> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("colormap input {v} outside [0, 1]")));
    }
    let pos = v * 4.0;
    let seg = (pos.floor() as usize).min(3);
    let t = pos - seg as f64;
    let (a, b) = (ANCHORS[seg], ANCHORS[seg + 1]);
    Ok([
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ])
}
