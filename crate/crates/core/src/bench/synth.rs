//! Procedural face-like images: smooth, bilaterally symmetric layouts of a
//! head, hair, eyes, brows, nose and mouth on a graded background, with
//! per-identity low-frequency texture.

use crate::imaging::{BinaryMask, Image};
use crate::rng::RngStream;

/// Geometry and colors of one synthetic identity, in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    center: [f64; 2],
    radii: [f64; 2],
    skin: [f64; 3],
    hair: [f64; 3],
    hair_line: f64,
    background: [[f64; 3]; 2],
    eye_dx: f64,
    eye_y: f64,
    eye_size: [f64; 2],
    eye_color: [f64; 3],
    brow_gap: f64,
    brow_darkness: f64,
    nose_len: f64,
    mouth_y: f64,
    mouth_w: f64,
    lip: [f64; 3],
    blobs: Vec<Blob>,
}

#[derive(Debug, Clone, PartialEq)]
struct Blob {
    center: [f64; 2],
    sigma: f64,
    amplitude: [f64; 3],
    mirrored: bool,
}

/// Small per-view perturbation emulating camera movement and exposure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewJitter {
    /// Shift in pixels.
    pub dy: f64,
    pub dx: f64,
    pub gain: f64,
}

impl ViewJitter {
    pub const NONE: ViewJitter = ViewJitter {
        dy: 0.0,
        dx: 0.0,
        gain: 1.0,
    };

    pub fn sample(rng: &mut RngStream) -> Self {
        Self {
            dy: rng.uniform(-0.15, 0.15),
            dx: rng.uniform(-0.15, 0.15),
            gain: rng.uniform(0.98, 1.02),
        }
    }
}

impl FaceParams {
    pub fn sample(rng: &mut RngStream) -> Self {
        let tone = rng.uniform(0.55, 0.85);
        let skin = [tone, tone * rng.uniform(0.72, 0.84), tone * rng.uniform(0.58, 0.72)];
        let hair_level = rng.uniform(0.15, 0.25);
        let hair = [hair_level, hair_level * rng.uniform(0.7, 0.95), hair_level * rng.uniform(0.5, 0.9)];
        let level = rng.uniform(0.48, 0.52);
        let background = [
            [level + rng.uniform(-0.02, 0.02), level + rng.uniform(-0.02, 0.02), level + rng.uniform(-0.02, 0.02)],
            [level + rng.uniform(-0.02, 0.02), level + rng.uniform(-0.02, 0.02), level + rng.uniform(-0.02, 0.02)],
        ];
        let eye_level = rng.uniform(0.08, 0.3);
        let blobs = (0..4)
            .map(|_| Blob {
                center: [rng.uniform(0.3, 0.75), rng.uniform(0.3, 0.5)],
                sigma: rng.uniform(0.05, 0.12),
                amplitude: [rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12), rng.uniform(-0.12, 0.12)],
                mirrored: rng.bernoulli(0.7),
            })
            .collect();
        Self {
            center: [0.52, 0.5],
            radii: [rng.uniform(0.43, 0.45), rng.uniform(0.34, 0.36)],
            skin,
            hair,
            hair_line: rng.uniform(0.22, 0.26),
            background,
            eye_dx: rng.uniform(0.1, 0.14),
            eye_y: rng.uniform(0.42, 0.47),
            eye_size: [rng.uniform(0.025, 0.04), rng.uniform(0.04, 0.065)],
            eye_color: [eye_level, eye_level * 0.9, eye_level * 0.85],
            brow_gap: rng.uniform(0.05, 0.08),
            brow_darkness: rng.uniform(0.3, 0.7),
            nose_len: rng.uniform(0.08, 0.14),
            mouth_y: rng.uniform(0.66, 0.72),
            mouth_w: rng.uniform(0.07, 0.12),
            lip: [rng.uniform(0.5, 0.75), rng.uniform(0.25, 0.4), rng.uniform(0.25, 0.4)],
            blobs,
        }
    }

    pub fn render(&self, h: usize, w: usize, jitter: ViewJitter) -> Image {
        Image::from_fn(h, w, 3, |y, x, c| {
            let v = (y as f64 + 0.5 - jitter.dy) / h as f64;
            let u = (x as f64 + 0.5 - jitter.dx) / w as f64;
            (self.shade(v, u, c) * jitter.gain).clamp(0.0, 1.0)
        })
    }

    fn shade(&self, v: f64, u: f64, c: usize) -> f64 {
        let [cy, cx] = self.center;
        let [ry, rx] = self.radii;
        let bg = self.background[0][c] + (self.background[1][c] - self.background[0][c]) * v;

        let head = ellipse_weight(v, u, [cy - 0.04, cx], [ry + 0.07, rx + 0.06], 0.03);
        let mut out = mix(bg, self.hair[c], head);

        let face_r = ((v - cy) / ry).powi(2) + ((u - cx) / rx).powi(2);
        let face = smooth_edge(1.0 - face_r.sqrt(), 0.06) * smooth_edge(v - (cy - ry + self.hair_line * ry), 0.04);
        let lighting = 1.0 - 0.18 * ((u - cx) / rx).powi(2) - 0.1 * ((v - cy) / ry).max(0.0).powi(2);
        let mut skin = self.skin[c] * lighting;
        for b in &self.blobs {
            skin += b.amplitude[c] * gaussian(v, u, b.center, b.sigma);
            if b.mirrored {
                skin += b.amplitude[c] * gaussian(v, u, [b.center[0], 2.0 * cx - b.center[1]], b.sigma);
            }
        }
        out = mix(out, skin, face);

        for side in [-1.0, 1.0] {
            let ex = cx + side * self.eye_dx;
            let eye = ellipse_weight(v, u, [self.eye_y, ex], self.eye_size, 0.012);
            out = mix(out, self.eye_color[c], eye * face);
            let brow = ellipse_weight(v, u, [self.eye_y - self.brow_gap, ex], [0.012, self.eye_size[1] * 1.3], 0.01);
            out = mix(out, self.hair[c], brow * self.brow_darkness * face);
        }
        let nose = gaussian(v, u, [self.eye_y + self.nose_len, cx + 0.015], 0.025);
        out *= 1.0 - 0.2 * nose * face;
        let mouth = ellipse_weight(v, u, [self.mouth_y, cx], [0.018, self.mouth_w], 0.012);
        mix(out, self.lip[c], mouth * face)
    }
}

fn smooth_edge(d: f64, width: f64) -> f64 {
    let t = (d / width).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn ellipse_weight(v: f64, u: f64, center: [f64; 2], radii: [f64; 2], soft: f64) -> f64 {
    let r = (((v - center[0]) / radii[0]).powi(2) + ((u - center[1]) / radii[1]).powi(2)).sqrt();
    smooth_edge((1.0 - r) * radii[0].min(radii[1]), soft)
}

fn gaussian(v: f64, u: f64, center: [f64; 2], sigma: f64) -> f64 {
    let d2 = (v - center[0]).powi(2) + (u - center[1]).powi(2);
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn mix(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Identity parameters for identity `index` of the population `seed`.
pub fn identity(seed: u64, index: usize) -> FaceParams {
    FaceParams::sample(&mut RngStream::new(seed).fork(index as u64))
}

/// `count` canonical (unjittered) faces.
pub fn synth_faces(seed: u64, count: usize, h: usize, w: usize) -> Vec<Image> {
    (0..count)
        .map(|i| identity(seed, i).render(h, w, ViewJitter::NONE))
        .collect()
}

/// `k` jittered views of one identity.
pub fn synth_views(face: &FaceParams, k: usize, h: usize, w: usize, rng: &mut RngStream) -> Vec<Image> {
    (0..k).map(|_| face.render(h, w, ViewJitter::sample(rng))).collect()
}

/// The projection region: the central face area from brows to chin.
pub fn face_mask(h: usize, w: usize) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| {
        let v = (y as f64 + 0.5) / h as f64;
        let u = (x as f64 + 0.5) / w as f64;
        ((v - 0.55) / 0.36).powi(2) + ((u - 0.5) / 0.29).powi(2) <= 1.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_faces() {
        assert_eq!(synth_faces(3, 4, 32, 32), synth_faces(3, 4, 32, 32));
        assert_ne!(synth_faces(3, 2, 32, 32), synth_faces(4, 2, 32, 32));
    }

    #[test]
    fn views_differ_pairwise() {
        let face = identity(1, 0);
        let views = synth_views(&face, 5, 64, 64, &mut RngStream::new(2));
        for i in 0..5 {
            for j in i + 1..5 {
                let mse: f64 = views[i]
                    .data()
                    .iter()
                    .zip(views[j].data())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    / views[i].data().len() as f64;
                assert!(mse > 0.0);
            }
        }
    }

    #[test]
    fn mask_covers_central_face() {
        let mask = face_mask(64, 64);
        assert!(mask.at(34, 33));
        assert!(!mask.at(0, 0));
        let frac = mask.count() as f64 / 4096.0;
        assert!((0.15..0.35).contains(&frac), "{frac}");
    }
}
