//! Minimal 2-vector helpers shared across the crate.

pub type Vec2 = [f64; 2];

pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn scale(a: Vec2, k: f64) -> Vec2 {
    [a[0] * k, a[1] * k]
}

pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

/// Unit vector from `a` toward `b`, or `[0, 0]` when they coincide.
pub fn unit_toward(a: Vec2, b: Vec2) -> Vec2 {
    let d = sub(b, a);
    let n = norm(d);
    if n > 0.0 {
        scale(d, 1.0 / n)
    } else {
        [0.0, 0.0]
    }
}
