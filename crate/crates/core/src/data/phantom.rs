use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tomo::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhantomKind {
    SheppLogan,
    RandomEllipses,
    DentalLike,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shepp-logan" => Ok(Self::SheppLogan),
            "random-ellipses" => Ok(Self::RandomEllipses),
            "dental-like" => Ok(Self::DentalLike),
            other => Err(Error::invalid(format!(
                "unknown phantom kind {other:?} (expected shepp-logan, random-ellipses or dental-like)"
            ))),
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SheppLogan => "shepp-logan",
            Self::RandomEllipses => "random-ellipses",
            Self::DentalLike => "dental-like",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub image_size: usize,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, image_size: usize, seed: u64) -> Self {
        Self {
            kind,
            image_size,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.image_size < 32 || !self.image_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "phantom image_size must be even and >= 32, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// How an ellipse combines with what is already painted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Blend {
    Add,
    Replace,
}

/// Ellipse in normalised coordinates: the image spans `[-1, 1]²`, `y` up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub value: f64,
    pub a: f64,
    pub b: f64,
    pub x0: f64,
    pub y0: f64,
    /// Rotation in degrees, counter-clockwise.
    pub phi: f64,
    pub blend: Blend,
}

impl Ellipse {
    const fn add(value: f64, a: f64, b: f64, x0: f64, y0: f64, phi: f64) -> Self {
        Self {
            value,
            a,
            b,
            x0,
            y0,
            phi,
            blend: Blend::Add,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.phi.to_radians().sin_cos();
        let (dx, dy) = (x - self.x0, y - self.y0);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Modified Shepp-Logan table (Toft's contrast-enhanced variant).
const SHEPP_LOGAN: [Ellipse; 10] = [
    Ellipse::add(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    Ellipse::add(-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    Ellipse::add(-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    Ellipse::add(-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    Ellipse::add(0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    Ellipse::add(0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    Ellipse::add(0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    Ellipse::add(0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    Ellipse::add(0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    Ellipse::add(0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
];

/// Paints the ellipses in order at pixel centres and clamps to `[0, 1]`.
pub fn rasterize(ellipses: &[Ellipse], size: usize) -> Array2<f32> {
    let half = size as f64 / 2.0;
    Array2::from_shape_fn((size, size), |(i, j)| {
        let x = (j as f64 + 0.5 - half) / half;
        let y = (half - i as f64 - 0.5) / half;
        let mut v = 0.0;
        for e in ellipses.iter().filter(|e| e.contains(x, y)) {
            match e.blend {
                Blend::Add => v += e.value,
                Blend::Replace => v = e.value,
            }
        }
        v.clamp(0.0, 1.0) as f32
    })
}

/// Geometry of a dental-like phantom; exposed so tests can inspect the teeth.
#[derive(Debug, Clone, PartialEq)]
pub struct DentalLayout {
    pub soft_tissue: Vec<Ellipse>,
    pub bone: Vec<Ellipse>,
    pub teeth: Vec<Ellipse>,
    /// Centre and radius of the circle the teeth are placed on.
    pub arc_center: (f64, f64),
    pub arc_radius: f64,
}

impl DentalLayout {
    pub fn ellipses(&self) -> Vec<Ellipse> {
        self.soft_tissue
            .iter()
            .chain(&self.bone)
            .chain(&self.teeth)
            .copied()
            .collect()
    }
}

pub fn dental_layout(seed: u64) -> DentalLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |scale: f64| rng.random_range(-scale..=scale);

    let soft_tissue = vec![
        Ellipse::add(0.25 + jitter(0.03), 0.8 + jitter(0.04), 0.68 + jitter(0.04), 0.0, 0.0, jitter(5.0)),
        Ellipse::add(0.06, 0.22 + jitter(0.04), 0.12 + jitter(0.03), jitter(0.1), -0.35 + jitter(0.05), jitter(20.0)),
        Ellipse::add(-0.08, 0.1 + jitter(0.03), 0.07 + jitter(0.02), jitter(0.2), 0.05 + jitter(0.05), jitter(30.0)),
    ];

    let arc_center = (jitter(0.03), -0.05 + jitter(0.03));
    let arc_radius = 0.52 + jitter(0.03);
    let n_teeth = 10 + (jitter(1.0).abs() * 4.0) as usize;
    // The arch opens downwards, spanning the upper part of the circle.
    let (first, last) = (200.0f64 + jitter(10.0), 340.0f64 + jitter(10.0));
    let bone = (0..2 * n_teeth)
        .map(|k| {
            let theta = (first + (last - first) * k as f64 / (2 * n_teeth - 1) as f64).to_radians();
            Ellipse::add(
                0.3,
                0.09,
                0.07,
                arc_center.0 + arc_radius * theta.cos(),
                arc_center.1 - arc_radius * theta.sin(),
                theta.to_degrees() + 90.0,
            )
        })
        .collect();
    let teeth = (0..n_teeth)
        .map(|k| {
            let theta = (first + (last - first) * (k as f64 + 0.5) / n_teeth as f64).to_radians();
            Ellipse {
                value: 0.85 + jitter(0.1).abs() + jitter(0.05).abs(),
                a: 0.045 + jitter(0.008),
                b: 0.08 + jitter(0.012),
                x0: arc_center.0 + arc_radius * theta.cos(),
                y0: arc_center.1 - arc_radius * theta.sin(),
                phi: -theta.to_degrees() - 90.0,
                blend: Blend::Replace,
            }
        })
        .collect();
    DentalLayout {
        soft_tissue,
        bone,
        teeth,
        arc_center,
        arc_radius,
    }
}

fn random_ellipses(seed: u64) -> Vec<Ellipse> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Ellipse::add(
        rng.random_range(0.2..0.4),
        rng.random_range(0.6..0.8),
        rng.random_range(0.6..0.8),
        0.0,
        0.0,
        rng.random_range(0.0..180.0),
    )];
    let n = rng.random_range(3..=8);
    for _ in 0..n {
        let r = rng.random_range(0.0..0.45);
        let t = rng.random_range(0.0..2.0 * PI);
        out.push(Ellipse::add(
            rng.random_range(-0.2..0.6),
            rng.random_range(0.05..0.25),
            rng.random_range(0.05..0.25),
            r * t.cos(),
            r * t.sin(),
            rng.random_range(0.0..180.0),
        ));
    }
    out
}

/// Deterministic phantom with values in `[0, 1]`, supported inside the
/// inscribed circle.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Image> {
    spec.validate()?;
    let ellipses = match spec.kind {
        PhantomKind::SheppLogan => SHEPP_LOGAN.to_vec(),
        PhantomKind::RandomEllipses => random_ellipses(spec.seed),
        PhantomKind::DentalLike => dental_layout(spec.seed).ellipses(),
    };
    Image::new(rasterize(&ellipses, spec.image_size), (0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for k in [PhantomKind::SheppLogan, PhantomKind::RandomEllipses, PhantomKind::DentalLike] {
            assert_eq!(k.to_string().parse::<PhantomKind>().unwrap(), k);
        }
        assert!("phantom".parse::<PhantomKind>().is_err());
    }

    #[test]
    fn size_is_validated() {
        for n in [31, 30, 65] {
            assert!(generate_phantom(&PhantomSpec::new(PhantomKind::SheppLogan, n, 0)).is_err());
        }
    }

    #[test]
    fn deterministic() {
        for kind in [PhantomKind::SheppLogan, PhantomKind::RandomEllipses, PhantomKind::DentalLike] {
            let spec = PhantomSpec::new(kind, 64, 9);
            assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        }
    }

    #[test]
    fn shepp_logan_extrema() {
        let img = generate_phantom(&PhantomSpec::new(PhantomKind::SheppLogan, 128, 0)).unwrap();
        let max = img.data().iter().cloned().fold(f32::MIN, f32::max);
        let min = img.data().iter().cloned().fold(f32::MAX, f32::min);
        assert_eq!((min, max), (0.0, 1.0));
    }

    #[test]
    fn random_ellipses_depend_on_seed() {
        let a = generate_phantom(&PhantomSpec::new(PhantomKind::RandomEllipses, 64, 1)).unwrap();
        let b = generate_phantom(&PhantomSpec::new(PhantomKind::RandomEllipses, 64, 2)).unwrap();
        let d: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
        assert!(d > 0.0);
    }

    #[test]
    fn dental_teeth_on_an_arc() {
        for seed in 0..20 {
            let layout = dental_layout(seed);
            assert!(layout.teeth.len() >= 8);
            for t in &layout.teeth {
                assert!(t.value >= 0.8 && t.value <= 1.0);
                let r = (t.x0 - layout.arc_center.0).hypot(t.y0 - layout.arc_center.1);
                assert!((r - layout.arc_radius).abs() < 1e-9);
            }
            let img = rasterize(&layout.ellipses(), 128);
            for t in &layout.teeth {
                let j = ((t.x0 + 1.0) * 64.0) as usize;
                let i = ((1.0 - t.y0) * 64.0) as usize;
                assert!(img[[i, j]] >= 0.8, "seed {seed}: tooth at ({i}, {j}) is {}", img[[i, j]]);
            }
        }
    }

    #[test]
    fn support_inside_field_of_view() {
        for kind in [PhantomKind::SheppLogan, PhantomKind::RandomEllipses, PhantomKind::DentalLike] {
            for seed in 0..5 {
                let img = generate_phantom(&PhantomSpec::new(kind, 64, seed)).unwrap();
                let fov = crate::tomo::fov_mask(64);
                assert!(img.data().iter().zip(fov.iter()).all(|(&v, &inside)| inside || v == 0.0));
            }
        }
    }
}
