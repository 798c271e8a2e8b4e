use std::f64::consts::PI;

/// Wrap an angle into `(−π, π]`.
pub fn wrap_angle(x: f64) -> f64 {
    let mut r = x - 2.0 * PI * ((x - PI) / (2.0 * PI)).ceil();
    if r <= -PI {
        r += 2.0 * PI;
    }
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Base plus every joint/end-effector position along the chain, in meters.
///
/// Joint `i` sits at the end of link `i`; the last entry is the end-effector.
pub fn chain_points(angles: &[f64], links: &[f64]) -> Vec<[f64; 2]> {
    let mut points = Vec::with_capacity(angles.len() + 1);
    let (mut x, mut y, mut heading) = (0.0, 0.0, 0.0);
    points.push([x, y]);
    for (q, l) in angles.iter().zip(links) {
        heading += q;
        x += l * heading.cos();
        y += l * heading.sin();
        points.push([x, y]);
    }
    points
}

/// End-effector position `Σ_i L_i (cos Σ_{k≤i} q_k, sin Σ_{k≤i} q_k)`.
pub fn forward_kinematics(angles: &[f64], links: &[f64]) -> [f64; 2] {
    *chain_points(angles, links).last().unwrap()
}
