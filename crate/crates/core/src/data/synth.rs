//! Procedural test images.
//!
//! Smooth color gradients overlaid with soft-edged shapes, oriented gratings
//! and mild grain. They carry both flat regions and high-frequency detail,
//! which is what the rescaling network has to learn to separate. Output is
//! already on the 8-bit grid so it survives a PNG round trip unchanged.

use rand::Rng;

use super::ImageRGB;
use crate::error::Result;

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

enum Shape {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Rect {
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
    },
}

impl Shape {
    /// Coverage in `[0, 1]` with an antialiased edge of width `soft` pixels.
    fn coverage(&self, x: f64, y: f64, soft: f64) -> f64 {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                let r = (u * u + v * v).sqrt();
                let edge = soft / rx.min(ry);
                1.0 - smoothstep(1.0 - edge, 1.0 + edge, r)
            }
            Shape::Rect { x0, y0, x1, y1 } => {
                let inside_x = smoothstep(x0 - soft, x0 + soft, x) * (1.0 - smoothstep(x1 - soft, x1 + soft, x));
                let inside_y = smoothstep(y0 - soft, y0 + soft, y) * (1.0 - smoothstep(y1 - soft, y1 + soft, y));
                inside_x * inside_y
            }
        }
    }
}

struct Grating {
    freq: f64,
    angle: f64,
    phase: f64,
    amplitude: f64,
    cx: f64,
    cy: f64,
    radius: f64,
}

pub fn natural_image<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize) -> Result<ImageRGB> {
    let (wf, hf) = (width as f64, height as f64);
    let corners = [
        random_color(rng),
        random_color(rng),
        random_color(rng),
        random_color(rng),
    ];
    let n_shapes = rng.random_range(4..9);
    let shapes: Vec<(Shape, [f64; 3], f64, f64)> = (0..n_shapes)
        .map(|_| {
            let shape = if rng.random_bool(0.6) {
                Shape::Ellipse {
                    cx: rng.random_range(0.0..wf),
                    cy: rng.random_range(0.0..hf),
                    rx: rng.random_range(0.05..0.35) * wf,
                    ry: rng.random_range(0.05..0.35) * hf,
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                }
            } else {
                let (xa, xb) = (rng.random_range(0.0..wf), rng.random_range(0.0..wf));
                let (ya, yb) = (rng.random_range(0.0..hf), rng.random_range(0.0..hf));
                Shape::Rect {
                    x0: xa.min(xb),
                    y0: ya.min(yb),
                    x1: xa.max(xb) + 2.0,
                    y1: ya.max(yb) + 2.0,
                }
            };
            let opacity = rng.random_range(0.5..1.0);
            let soft = rng.random_range(0.5..2.5);
            (shape, random_color(rng), opacity, soft)
        })
        .collect();
    let gratings: Vec<Grating> = (0..rng.random_range(1..4))
        .map(|_| Grating {
            freq: rng.random_range(0.15..0.9),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            amplitude: rng.random_range(0.03..0.12),
            cx: rng.random_range(0.0..wf),
            cy: rng.random_range(0.0..hf),
            radius: rng.random_range(0.2..0.6) * wf.max(hf),
        })
        .collect();
    let grain: Vec<f64> = (0..width * height).map(|_| rng.random_range(-0.015..0.015)).collect();

    ImageRGB::from_fn(width, height, |c, x, y| {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        let (u, v) = (xf / wf, yf / hf);
        let mut value = (1.0 - u) * (1.0 - v) * corners[0][c]
            + u * (1.0 - v) * corners[1][c]
            + (1.0 - u) * v * corners[2][c]
            + u * v * corners[3][c];
        for (shape, color, opacity, soft) in &shapes {
            let a = opacity * shape.coverage(xf, yf, *soft);
            value = (1.0 - a) * value + a * color[c];
        }
        for g in &gratings {
            let (s, co) = g.angle.sin_cos();
            let d = ((xf - g.cx).powi(2) + (yf - g.cy).powi(2)).sqrt();
            let envelope = (-(d / g.radius).powi(2)).exp();
            value += g.amplitude * envelope * (g.freq * (co * xf + s * yf) + g.phase).sin();
        }
        value += grain[y * width + x];
        (value.clamp(0.0, 1.0) * 255.0).round() / 255.0
    })
}
