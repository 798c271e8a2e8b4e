//! Deterministic grayscale rasterization of the arm and the target.

use crate::env::kinematics::chain_points;

pub const IMAGE_SIZE: usize = 100;
/// Pixels spanned by the arm's total reach from the image center.
pub const REACH_PIXELS: f64 = 45.0;

pub const LINK_INTENSITY: f32 = 0.5;
pub const EFFECTOR_INTENSITY: f32 = 0.75;
pub const TARGET_INTENSITY: f32 = 1.0;
const LINK_HALF_WIDTH: f64 = 1.5;
const EFFECTOR_RADIUS: f64 = 2.0;
const TARGET_RADIUS: f64 = 3.0;

/// 100×100 row-major image with intensities in `[0, 1]`.
///
/// Stored as one byte per pixel counting quarter intensities: every level
/// the rasterizer writes is a multiple of 1/4, and a rollout holds
/// thousands of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    quarters: Vec<u8>,
}

fn quarters(value: f32) -> u8 {
    (value * 4.0).round() as u8
}

impl GrayImage {
    pub fn blank() -> Self {
        Self {
            quarters: vec![0; IMAGE_SIZE * IMAGE_SIZE],
        }
    }

    pub fn pixels(&self) -> impl Iterator<Item = f32> + '_ {
        self.quarters.iter().map(|&q| q as f32 / 4.0)
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.quarters[row * IMAGE_SIZE + col] as f32 / 4.0
    }

    pub fn to_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.quarters.iter().map(|&q| q as f64 / 4.0)
    }

    /// Binary PGM (P5), 8 bits per pixel.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n").into_bytes();
        out.extend(
            self.pixels()
                .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    fn fill_where(&mut self, value: f32, bbox: [f64; 4], inside: impl Fn(f64, f64) -> bool) {
        let [x0, y0, x1, y1] = bbox;
        let code = quarters(value);
        let clamp = |v: f64| v.floor().clamp(0.0, (IMAGE_SIZE - 1) as f64) as usize;
        if x1 < 0.0 || y1 < 0.0 || x0 >= IMAGE_SIZE as f64 || y0 >= IMAGE_SIZE as f64 {
            return;
        }
        for row in clamp(y0)..=clamp(y1) {
            for col in clamp(x0)..=clamp(x1) {
                if inside(col as f64 + 0.5, row as f64 + 0.5) {
                    self.quarters[row * IMAGE_SIZE + col] = code;
                }
            }
        }
    }

    fn disc(&mut self, center: [f64; 2], radius: f64, value: f32) {
        let [cx, cy] = center;
        let bbox = [cx - radius, cy - radius, cx + radius, cy + radius];
        self.fill_where(value, bbox, |x, y| {
            (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius
        });
    }

    fn segment(&mut self, a: [f64; 2], b: [f64; 2], half_width: f64, value: f32) {
        let bbox = [
            a[0].min(b[0]) - half_width,
            a[1].min(b[1]) - half_width,
            a[0].max(b[0]) + half_width,
            a[1].max(b[1]) + half_width,
        ];
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len2 = dx * dx + dy * dy;
        self.fill_where(value, bbox, |x, y| {
            let t = if len2 > 0.0 {
                (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (px, py) = (a[0] + t * dx - x, a[1] + t * dy - y);
            px * px + py * py <= half_width * half_width
        });
    }
}

/// World meters → continuous pixel coordinates (x right, y down), with the
/// base at the image center and the total reach spanning [`REACH_PIXELS`].
pub fn world_to_pixel(p: [f64; 2], total_reach: f64) -> [f64; 2] {
    let scale = REACH_PIXELS / total_reach;
    let c = IMAGE_SIZE as f64 / 2.0;
    [c + p[0] * scale, c - p[1] * scale]
}

/// Pixel (row, col) containing a world point, if it is inside the image.
pub fn pixel_of(p: [f64; 2], total_reach: f64) -> Option<(usize, usize)> {
    let [x, y] = world_to_pixel(p, total_reach);
    let range = 0.0..IMAGE_SIZE as f64;
    (range.contains(&x) && range.contains(&y)).then(|| (y.floor() as usize, x.floor() as usize))
}

/// Draw links, then the end-effector, then the target on top.
pub fn render(angles: &[f64], links: &[f64], target: [f64; 2]) -> GrayImage {
    let reach: f64 = links.iter().sum();
    let mut img = GrayImage::blank();
    let points: Vec<[f64; 2]> = chain_points(angles, links)
        .into_iter()
        .map(|p| world_to_pixel(p, reach))
        .collect();
    for pair in points.windows(2) {
        img.segment(pair[0], pair[1], LINK_HALF_WIDTH, LINK_INTENSITY);
    }
    img.disc(*points.last().unwrap(), EFFECTOR_RADIUS, EFFECTOR_INTENSITY);
    img.disc(world_to_pixel(target, reach), TARGET_RADIUS, TARGET_INTENSITY);
    img
}
