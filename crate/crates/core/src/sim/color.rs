//! Appearance palette: hue buckets, per-segment hue slots, backgrounds.
//!
//! The hue circle splits into 8 buckets of 45 degrees. Within a bucket, 16
//! evenly spaced slots leave a margin at both bucket edges; slot 0 colors
//! the capsule bodies and slots 1..=14 color the per-segment marker spheres,
//! so every foreground pixel stays inside its caption's bucket while the
//! marker hue identifies the segment.

pub const HUE_CLASSES: usize = 8;
pub const BACKGROUND_CLASSES: usize = 4;
pub const BUCKET_DEG: f64 = 360.0 / HUE_CLASSES as f64;
pub const SLOTS_PER_BUCKET: usize = 16;

/// Neutral gray levels, one per background class.
pub const BACKGROUND_LEVELS: [f32; BACKGROUND_CLASSES] = [0.16, 0.36, 0.56, 0.76];

/// Near-black, hueless; detected as the accessory blob.
pub const ACCESSORY_COLOR: [f32; 3] = [0.03, 0.03, 0.03];

/// Hue angle in degrees for a slot of a bucket. Slots sit at fractions
/// (c+1)/16 of the bucket, keeping ~2.8 degrees of margin at each edge.
pub fn slot_hue_deg(hue_class: usize, slot: usize) -> f64 {
    assert!(hue_class < HUE_CLASSES && slot + 1 < SLOTS_PER_BUCKET);
    (hue_class as f64 + (slot as f64 + 1.0) / SLOTS_PER_BUCKET as f64) * BUCKET_DEG
}

/// Fully saturated RGB for a hue angle (degrees, any real).
pub fn rgb_from_hue(deg: f64) -> [f32; 3] {
    let h = deg.rem_euclid(360.0) / 60.0;
    let x = (1.0 - (h % 2.0 - 1.0).abs()) as f32;
    match h as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

/// Hue angle (degrees in [0,360)), saturation, and value of an RGB pixel.
pub fn hsv_of_rgb(rgb: [f32; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb.map(f64::from);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let hue = if d <= 1e-12 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let sat = if max <= 1e-12 { 0.0 } else { d / max };
    (hue, sat, max)
}

pub fn segment_color(hue_class: usize, segment: usize) -> [f32; 3] {
    rgb_from_hue(slot_hue_deg(hue_class, segment + 1))
}

pub fn body_color(hue_class: usize) -> [f32; 3] {
    rgb_from_hue(slot_hue_deg(hue_class, 0))
}

pub fn background_color(class: usize) -> [f32; 3] {
    let v = BACKGROUND_LEVELS[class];
    [v, v, v]
}

/// Bucket index of a hue angle.
pub fn hue_bucket(deg: f64) -> usize {
    (deg.rem_euclid(360.0) / BUCKET_DEG) as usize % HUE_CLASSES
}

/// Nearest slot index within the bucket, with the distance in slot widths.
pub fn nearest_slot(deg: f64) -> (usize, usize, f64) {
    let bucket = hue_bucket(deg);
    let offset = deg.rem_euclid(360.0) - bucket as f64 * BUCKET_DEG;
    let width = BUCKET_DEG / SLOTS_PER_BUCKET as f64;
    let raw = offset / width - 1.0;
    let slot = raw.round().clamp(0.0, (SLOTS_PER_BUCKET - 2) as f64);
    (bucket, slot as usize, (raw - slot).abs())
}
