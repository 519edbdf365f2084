use std::f64::consts::PI;

use rayon::prelude::*;

use crate::error::{invalid, Result};

pub const BANDWIDTH_FLOOR: f64 = 1e-6;
pub const DENSITY_FLOOR: f64 = 1e-12;

/// Axis-aligned rectangle `[x0, x1] × [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneBox {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl PlaneBox {
    pub fn bounding(points: &[[f64; 2]]) -> PlaneBox {
        points.iter().fold(
            PlaneBox {
                x0: f64::INFINITY,
                x1: f64::NEG_INFINITY,
                y0: f64::INFINITY,
                y1: f64::NEG_INFINITY,
            },
            |b, p| PlaneBox {
                x0: b.x0.min(p[0]),
                x1: b.x1.max(p[0]),
                y0: b.y0.min(p[1]),
                y1: b.y1.max(p[1]),
            },
        )
    }

    pub fn union(&self, other: &PlaneBox) -> PlaneBox {
        PlaneBox {
            x0: self.x0.min(other.x0),
            x1: self.x1.max(other.x1),
            y0: self.y0.min(other.y0),
            y1: self.y1.max(other.y1),
        }
    }

    pub fn expand(&self, mx: f64, my: f64) -> PlaneBox {
        PlaneBox {
            x0: self.x0 - mx,
            x1: self.x1 + mx,
            y0: self.y0 - my,
            y1: self.y1 + my,
        }
    }

    /// Midpoints of `resolution` equal cells along each axis, and the cell area.
    pub fn midpoints(&self, resolution: usize) -> (Vec<f64>, Vec<f64>, f64) {
        let dx = (self.x1 - self.x0) / resolution as f64;
        let dy = (self.y1 - self.y0) / resolution as f64;
        let xs = (0..resolution).map(|i| self.x0 + (i as f64 + 0.5) * dx).collect();
        let ys = (0..resolution).map(|i| self.y0 + (i as f64 + 0.5) * dy).collect();
        (xs, ys, dx * dy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOptions {
    /// Cells per axis.
    pub resolution: usize,
    /// Integrate over the tight bounding box instead of expanding it by
    /// three bandwidths on every side.
    pub strict_box: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            resolution: 256,
            strict_box: false,
        }
    }
}

/// Gaussian product-kernel density in the plane with Scott's-rule bandwidths.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityModel {
    points: Vec<[f64; 2]>,
    bandwidth: [f64; 2],
}

fn gaussian(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
}

impl DensityModel {
    /// `h_i = σ_i · N^(-1/6)` with σ the sample standard deviation.
    pub fn fit(points: &[[f64; 2]]) -> Result<DensityModel> {
        let n = points.len();
        if n < 2 {
            return Err(invalid!("kernel density needs at least 2 points, got {}", n));
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(invalid!("kernel density points must be finite"));
        }
        let factor = (n as f64).powf(-1.0 / 6.0);
        let mut bandwidth = [0.0; 2];
        for (axis, h) in bandwidth.iter_mut().enumerate() {
            let mean = points.iter().map(|p| p[axis]).sum::<f64>() / n as f64;
            let var = points.iter().map(|p| (p[axis] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            *h = var.sqrt() * factor;
            if !(*h >= BANDWIDTH_FLOOR) {
                log::warn!("zero spread along axis {}, bandwidth floored at {}", axis, BANDWIDTH_FLOOR);
                *h = BANDWIDTH_FLOOR;
            }
        }
        Ok(DensityModel {
            points: points.to_vec(),
            bandwidth,
        })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn bandwidth(&self) -> [f64; 2] {
        self.bandwidth
    }

    pub fn bounding_box(&self) -> PlaneBox {
        PlaneBox::bounding(&self.points)
    }

    pub fn density(&self, x: [f64; 2]) -> f64 {
        let [hx, hy] = self.bandwidth;
        let s: f64 = self
            .points
            .iter()
            .map(|p| gaussian((x[0] - p[0]) / hx) * gaussian((x[1] - p[1]) / hy))
            .sum();
        s / (self.points.len() as f64 * hx * hy)
    }

    /// Density at every midpoint of a `resolution × resolution` grid over
    /// `area`, row-major with x as the slow index.
    pub fn grid(&self, area: &PlaneBox, resolution: usize) -> Vec<f64> {
        let (xs, ys, _) = area.midpoints(resolution);
        let [hx, hy] = self.bandwidth;
        let n = self.points.len();
        let kx: Vec<f64> = self
            .points
            .iter()
            .flat_map(|p| xs.iter().map(move |x| gaussian((x - p[0]) / hx) / hx))
            .collect();
        let ky: Vec<f64> = self
            .points
            .iter()
            .flat_map(|p| ys.iter().map(move |y| gaussian((y - p[1]) / hy) / hy))
            .collect();
        let mut out = vec![0.0; resolution * resolution];
        out.par_chunks_mut(resolution).enumerate().for_each(|(a, row)| {
            for j in 0..n {
                let w = kx[j * resolution + a];
                if w == 0.0 {
                    continue;
                }
                for (o, k) in row.iter_mut().zip(&ky[j * resolution..(j + 1) * resolution]) {
                    *o += w * k;
                }
            }
            row.iter_mut().for_each(|o| *o /= n as f64);
        });
        out
    }

    /// Midpoint-rule integral of the density over `area`.
    pub fn integrate(&self, area: &PlaneBox, resolution: usize) -> f64 {
        let (_, _, cell) = area.midpoints(resolution);
        self.grid(area, resolution).iter().sum::<f64>() * cell
    }
}

/// `∫ p log(p / q)` by the midpoint rule over the joint bounding box of both
/// point sets. Densities are floored at 1e-12 inside the logarithm.
pub fn kl_divergence(p: &DensityModel, q: &DensityModel, opts: &GridOptions) -> Result<f64> {
    if opts.resolution == 0 {
        return Err(invalid!("grid resolution must be positive"));
    }
    let mut area = p.bounding_box().union(&q.bounding_box());
    if !opts.strict_box {
        let h = p.bandwidth.iter().chain(&q.bandwidth).fold(0.0f64, |m, &v| m.max(v));
        area = area.expand(3.0 * h, 3.0 * h);
    }
    if !(area.x1 > area.x0 && area.y1 > area.y0) {
        return Err(invalid!("integration box is degenerate"));
    }
    let (_, _, cell) = area.midpoints(opts.resolution);
    let gp = p.grid(&area, opts.resolution);
    let gq = q.grid(&area, opts.resolution);
    let kl: f64 = gp
        .iter()
        .zip(&gq)
        .map(|(&a, &b)| if a > 0.0 { a * (a.max(DENSITY_FLOOR) / b.max(DENSITY_FLOOR)).ln() } else { 0.0 })
        .sum();
    Ok(kl * cell)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(n: usize) -> Vec<[f64; 2]> {
        (0..n).map(|i| [((i * 37) % 11) as f64 * 0.3, ((i * 53) % 7) as f64 * 0.5]).collect()
    }

    #[test]
    fn grid_matches_pointwise_density() {
        let m = DensityModel::fit(&lattice(30)).unwrap();
        let area = m.bounding_box().expand(1.0, 1.0);
        let g = m.grid(&area, 8);
        let (xs, ys, _) = area.midpoints(8);
        for a in 0..8 {
            for b in 0..8 {
                let d = m.density([xs[a], ys[b]]);
                assert!((g[a * 8 + b] - d).abs() <= 1e-12 * d.max(1.0));
            }
        }
    }

    #[test]
    fn integrates_to_one() {
        let m = DensityModel::fit(&lattice(50)).unwrap();
        let [hx, hy] = m.bandwidth();
        let area = m.bounding_box().expand(6.0 * hx, 6.0 * hy);
        assert!((m.integrate(&area, 256) - 1.0).abs() < 0.01);
    }

    #[test]
    fn self_divergence_is_zero() {
        let m = DensityModel::fit(&lattice(40)).unwrap();
        assert!(kl_divergence(&m, &m, &GridOptions::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn zero_spread_is_floored() {
        let m = DensityModel::fit(&[[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]]).unwrap();
        assert_eq!(m.bandwidth()[0], BANDWIDTH_FLOOR);
        assert!(DensityModel::fit(&[[0.0, 0.0]]).is_err());
    }
}
