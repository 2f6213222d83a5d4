use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EnvError, Result};
use crate::group::{Component, FactorSpec, GroupSpec, WorldState};
use crate::nn::Tensor;

/// Observation function from world states to images or vectors in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Renderer {
    /// Basis vector of dimension `|W|` at the state's enumeration index.
    OneHot {},
    /// A filled disk on a black background. The spec is
    /// `[Cyclic(nx), Cyclic(ny)]` optionally followed by a color factor:
    /// `Cyclic(k)` picks `colors[c]`, `Symmetric(3)` permutes the channels of
    /// `colors[0]`.
    Flatland {
        grid: [usize; 2],
        colors: Vec<[f32; 3]>,
        image_px: usize,
        disk_radius_px: usize,
    },
    /// Rotating wedge dials laid out in a row of square tiles. The spec is
    /// `[Symmetric(n), Cyclic(angles[0]), ..., Cyclic(angles[n-1])]`; object
    /// `i` has `i + 2` wedges and sits in tile `slots[i]`.
    Dials { angles: Vec<usize>, tile_px: usize },
}

impl Renderer {
    pub fn flatland_default(colors: Vec<[f32; 3]>) -> Self {
        Renderer::Flatland { grid: [5, 5], colors, image_px: 16, disk_radius_px: 1 }
    }

    /// Checks that the renderer can draw every state of `spec`.
    pub fn check(&self, spec: &GroupSpec) -> Result<()> {
        let f = &spec.factors;
        match self {
            Renderer::OneHot {} => {
                spec.enumerable_order()?;
                Ok(())
            }
            Renderer::Flatland { grid, colors, image_px, disk_radius_px } => {
                if f.len() < 2 || f.len() > 3 {
                    return Err(mismatch("flatland needs 2 or 3 factors"));
                }
                if f[0] != FactorSpec::Cyclic(grid[0]) || f[1] != FactorSpec::Cyclic(grid[1]) {
                    return Err(mismatch(format!("flatland grid {grid:?} vs factors {:?}", &f[..2])));
                }
                match f.get(2) {
                    None if colors.len() == 1 => {}
                    Some(FactorSpec::Cyclic(k)) if colors.len() == *k => {}
                    Some(FactorSpec::Symmetric(3)) if colors.len() == 1 => {}
                    other => {
                        return Err(mismatch(format!("color factor {other:?} with {} colors", colors.len())));
                    }
                }
                if colors.iter().flatten().any(|c| !(0.0..=1.0).contains(c)) {
                    return Err(mismatch("color channels must lie in [0, 1]"));
                }
                let cells = grid[0].max(grid[1]);
                if *disk_radius_px == 0 || 2 * cells * disk_radius_px > *image_px {
                    return Err(mismatch(format!(
                        "disk radius {disk_radius_px} must be in 1..={} for {cells} cells on {image_px} px",
                        image_px / (2 * cells)
                    )));
                }
                Ok(())
            }
            Renderer::Dials { angles, tile_px } => {
                let n = angles.len();
                if n == 0 || f.len() != n + 1 || f[0] != FactorSpec::Symmetric(n) {
                    return Err(mismatch(format!("dials with {n} objects vs factors {f:?}")));
                }
                for (i, &k) in angles.iter().enumerate() {
                    if f[i + 1] != FactorSpec::Cyclic(k) {
                        return Err(mismatch(format!("object {i} has {k} angles but factor is {:?}", f[i + 1])));
                    }
                }
                if *tile_px < 6 || tile_px % 2 != 0 {
                    return Err(mismatch("tile_px must be even and at least 6"));
                }
                Ok(())
            }
        }
    }

    pub fn obs_shape(&self, spec: &GroupSpec) -> Result<Vec<usize>> {
        self.check(spec)?;
        Ok(match self {
            Renderer::OneHot {} => vec![spec.enumerable_order()?],
            Renderer::Flatland { image_px, .. } => vec![*image_px, *image_px, 3],
            Renderer::Dials { angles, tile_px } => vec![*tile_px, tile_px * angles.len()],
        })
    }

    pub fn render(&self, spec: &GroupSpec, w: &WorldState) -> Result<Vec<f32>> {
        self.check(spec)?;
        spec.check_state(w)?;
        Ok(self.render_unchecked(spec, w))
    }

    fn render_unchecked(&self, spec: &GroupSpec, w: &WorldState) -> Vec<f32> {
        match self {
            Renderer::OneHot {} => {
                let mut v = vec![0.0; spec.order() as usize];
                v[spec.state_index(w)] = 1.0;
                v
            }
            Renderer::Flatland { colors, image_px, disk_radius_px, grid } => {
                let (x, y) = (cyclic(&w.coords[0]), cyclic(&w.coords[1]));
                let color = match w.coords.get(2) {
                    None => colors[0],
                    Some(Component::Cyclic(c)) => colors[*c],
                    Some(Component::Perm(p)) => [colors[0][p[0]], colors[0][p[1]], colors[0][p[2]]],
                };
                draw_disk(*image_px, *disk_radius_px, cell_center(x, grid[0], *image_px), cell_center(y, grid[1], *image_px), color)
            }
            Renderer::Dials { angles, tile_px } => {
                let slots = match &w.coords[0] {
                    Component::Perm(p) => p,
                    Component::Cyclic(_) => unreachable!("checked by check_state"),
                };
                let n = angles.len();
                let width = tile_px * n;
                let mut img = vec![0.0; tile_px * width];
                for (obj, &k) in angles.iter().enumerate() {
                    let tile = draw_dial(*tile_px, obj + 2, cyclic(&w.coords[obj + 1]), k);
                    let x0 = slots[obj] * tile_px;
                    for r in 0..*tile_px {
                        img[r * width + x0..r * width + x0 + tile_px].copy_from_slice(&tile[r * tile_px..(r + 1) * tile_px]);
                    }
                }
                img
            }
        }
    }

    /// Renders every state in enumeration order as `[|W|, obs_dim]` and
    /// verifies that no two states share an observation.
    pub fn render_all(&self, spec: &GroupSpec) -> Result<Tensor> {
        let shape = self.obs_shape(spec)?;
        let n = spec.enumerable_order()?;
        let dim: usize = shape.iter().product();
        let rows: Vec<Vec<f32>> = (0..n).into_par_iter().map(|i| self.render_unchecked(spec, &spec.state_at(i))).collect();
        check_injective(&rows)?;
        let data: Vec<f32> = rows.into_iter().flatten().collect();
        Ok(Tensor::new(data, vec![n, dim]).expect("rows have the observation size"))
    }
}

/// Fails with the first pair of indices whose rows are bitwise equal.
pub fn check_injective(rows: &[Vec<f32>]) -> Result<()> {
    let mut seen: HashMap<Vec<u32>, usize> = HashMap::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let key: Vec<u32> = r.iter().map(|v| v.to_bits()).collect();
        if let Some(&j) = seen.get(&key) {
            return Err(EnvError::NotInjective { first: j, second: i });
        }
        seen.insert(key, i);
    }
    Ok(())
}

fn mismatch(msg: impl Into<String>) -> EnvError {
    EnvError::Mismatch(msg.into())
}

fn cyclic(c: &Component) -> usize {
    match c {
        Component::Cyclic(v) => *v,
        Component::Perm(_) => unreachable!("checked by check_state"),
    }
}

/// Integer center of cell `i` out of `n` along an axis of `px` pixels.
fn cell_center(i: usize, n: usize, px: usize) -> i64 {
    ((2 * i + 1) * px / (2 * n)) as i64
}

fn draw_disk(px: usize, radius: usize, cx: i64, cy: i64, color: [f32; 3]) -> Vec<f32> {
    let mut img = vec![0.0; px * px * 3];
    let r2 = (radius * radius) as i64;
    for y in 0..px as i64 {
        for x in 0..px as i64 {
            if (x - cx).pow(2) + (y - cy).pow(2) <= r2 {
                let o = ((y as usize) * px + x as usize) * 3;
                img[o..o + 3].copy_from_slice(&color);
            }
        }
    }
    img
}

/// A dial of `wedges` filled sectors, each half of its `1/wedges` turn,
/// rotated by `step / (k · wedges)` turns. After `k` steps the pattern maps
/// onto itself, so the rotation factor acts as `Z/k`.
fn draw_dial(tile: usize, wedges: usize, step: usize, k: usize) -> Vec<f32> {
    let mut img = vec![0.0; tile * tile];
    // Pixel centers in doubled coordinates: offsets are odd integers.
    let r = (tile - 2) as i64;
    let bounds: Vec<((f64, f64), (f64, f64))> = (0..wedges)
        .map(|j| {
            let start = step as f64 / (k * wedges) as f64 + j as f64 / wedges as f64;
            let end = start + 0.5 / wedges as f64;
            (turn_cos_sin(start), turn_cos_sin(end))
        })
        .collect();
    for y in 0..tile {
        for x in 0..tile {
            let dx = (2 * x + 1) as i64 - tile as i64;
            let dy = tile as i64 - (2 * y + 1) as i64;
            if dx * dx + dy * dy > r * r {
                continue;
            }
            let (px, py) = (dx as f64, dy as f64);
            let inside = bounds.iter().any(|&((ax, ay), (bx, by))| ax * py - ay * px >= 0.0 && px * by - py * bx > 0.0);
            if inside {
                img[y * tile + x] = 1.0;
            }
        }
    }
    img
}

/// `(cos, sin)` of `t` turns using only basic IEEE operations, so results do
/// not depend on the platform math library.
fn turn_cos_sin(t: f64) -> (f64, f64) {
    let t = t - t.round();
    let x = t * 2.0 * std::f64::consts::PI;
    let (mut c, mut s) = (0.0, 0.0);
    let mut term = 1.0;
    for n in 0..30 {
        if n % 2 == 0 {
            c += if n % 4 == 0 { term } else { -term };
        } else {
            s += if n % 4 == 1 { term } else { -term };
        }
        term = term * x / (n + 1) as f64;
    }
    (c, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(f: &[FactorSpec]) -> GroupSpec {
        GroupSpec::new(f.to_vec()).unwrap()
    }

    fn rgb() -> Vec<[f32; 3]> {
        vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    }

    #[test]
    fn one_hot_example() {
        let g = spec(&[FactorSpec::Cyclic(2), FactorSpec::Cyclic(2)]);
        let w = g.state_at(2);
        assert_eq!(Renderer::OneHot {}.render(&g, &w).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn turn_trig_is_accurate() {
        for i in 0..64 {
            let t = i as f64 / 64.0 - 0.3;
            let (c, s) = turn_cos_sin(t);
            let x = t * std::f64::consts::TAU;
            assert!((c - x.cos()).abs() < 1e-12 && (s - x.sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn flatland_centers_and_radius() {
        let centers: Vec<i64> = (0..5).map(|i| cell_center(i, 5, 16)).collect();
        assert_eq!(centers, vec![1, 4, 8, 11, 14]);
        let g = spec(&[FactorSpec::Cyclic(5), FactorSpec::Cyclic(5), FactorSpec::Cyclic(3)]);
        let r = Renderer::flatland_default(rgb());
        let w = WorldState { coords: vec![Component::Cyclic(0), Component::Cyclic(2), Component::Cyclic(1)] };
        let img = r.render(&g, &w).unwrap();
        let lit: Vec<(usize, usize)> = (0..256).filter(|p| img[p * 3 + 1] == 1.0).map(|p| (p % 16, p / 16)).collect();
        assert_eq!(lit, vec![(1, 7), (0, 8), (1, 8), (2, 8), (1, 9)]);
        assert!(img.iter().enumerate().all(|(i, &v)| v == 0.0 || i % 3 == 1));
        assert_eq!(img, r.render(&g, &w).unwrap());
    }

    #[test]
    fn flatland_fixture_is_injective() {
        let g = spec(&[FactorSpec::Cyclic(5), FactorSpec::Cyclic(5), FactorSpec::Cyclic(3)]);
        let all = Renderer::flatland_default(rgb()).render_all(&g).unwrap();
        assert_eq!(all.shape(), &[75, 768]);
        let rows: Vec<&[f32]> = (0..75).map(|i| all.row(i)).collect();
        for i in 0..75 {
            for j in i + 1..75 {
                assert_ne!(rows[i], rows[j], "states {i} and {j} collide");
            }
        }
        let flp = spec(&[FactorSpec::Cyclic(5), FactorSpec::Cyclic(5), FactorSpec::Symmetric(3)]);
        Renderer::flatland_default(vec![[1.0 / 3.0, 2.0 / 3.0, 1.0]]).render_all(&flp).unwrap();
    }

    #[test]
    fn collisions_are_detected() {
        let g = spec(&[FactorSpec::Cyclic(5), FactorSpec::Cyclic(5), FactorSpec::Cyclic(2)]);
        let r = Renderer::flatland_default(vec![[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(r.render_all(&g), Err(EnvError::NotInjective { .. })));
    }

    #[test]
    fn flatland_rejects_bad_geometry() {
        let g = spec(&[FactorSpec::Cyclic(5), FactorSpec::Cyclic(5), FactorSpec::Cyclic(3)]);
        let big = Renderer::Flatland { grid: [5, 5], colors: rgb(), image_px: 16, disk_radius_px: 2 };
        assert!(big.check(&g).is_err());
        let wrong = Renderer::Flatland { grid: [4, 5], colors: rgb(), image_px: 16, disk_radius_px: 1 };
        assert!(wrong.check(&g).is_err());
        assert!(Renderer::flatland_default(rgb()[..2].to_vec()).check(&g).is_err());
    }

    #[test]
    fn dials_are_injective_and_cyclic() {
        let cases: [&[usize]; 2] = [&[7, 5], &[5, 5, 3]];
        for angles in cases {
            let mut f = vec![FactorSpec::Symmetric(angles.len())];
            f.extend(angles.iter().map(|&k| FactorSpec::Cyclic(k)));
            let g = spec(&f);
            let r = Renderer::Dials { angles: angles.to_vec(), tile_px: 12 };
            let all = r.render_all(&g).unwrap();
            assert_eq!(all.shape()[1], 144 * angles.len());
            assert!(all.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        for (wedges, k) in [(2, 7), (3, 5), (4, 3)] {
            assert_eq!(draw_dial(12, wedges, k, k), draw_dial(12, wedges, 0, k));
            assert_ne!(draw_dial(12, wedges, 1, k), draw_dial(12, wedges, 0, k));
        }
    }

    #[test]
    fn dial_wedge_counts_identify_objects() {
        // A ring of pixels crosses each filled wedge once.
        for wedges in 2..6 {
            let img = draw_dial(24, wedges, 0, 1);
            let ring: Vec<bool> = (0..360)
                .map(|deg| {
                    let (c, s) = turn_cos_sin(deg as f64 / 360.0 + 0.001);
                    let x = (12.0 + 8.0 * c).floor() as usize;
                    let y = (12.0 - 8.0 * s).floor() as usize;
                    img[y * 24 + x] == 1.0
                })
                .collect();
            let runs = (0..360).filter(|&i| ring[i] && !ring[(i + 359) % 360]).count();
            assert_eq!(runs, wedges);
        }
    }

    #[test]
    fn dials_swap_moves_tiles() {
        let g = spec(&[FactorSpec::Symmetric(2), FactorSpec::Cyclic(7), FactorSpec::Cyclic(5)]);
        let r = Renderer::Dials { angles: vec![7, 5], tile_px: 12 };
        let w = WorldState { coords: vec![Component::Perm(vec![0, 1]), Component::Cyclic(3), Component::Cyclic(2)] };
        let swapped = WorldState { coords: vec![Component::Perm(vec![1, 0]), Component::Cyclic(3), Component::Cyclic(2)] };
        let (a, b) = (r.render(&g, &w).unwrap(), r.render(&g, &swapped).unwrap());
        for y in 0..12 {
            assert_eq!(&a[y * 24..y * 24 + 12], &b[y * 24 + 12..y * 24 + 24]);
            assert_eq!(&a[y * 24 + 12..y * 24 + 24], &b[y * 24..y * 24 + 12]);
        }
    }

    #[test]
    fn renderer_json_schema() {
        let r: Renderer = serde_json::from_str(r#"{"kind":"dials","angles":[7,5],"tile_px":12}"#).unwrap();
        assert_eq!(r, Renderer::Dials { angles: vec![7, 5], tile_px: 12 });
        assert!(serde_json::from_str::<Renderer>(r#"{"kind":"one_hot","extra":1}"#).is_err());
        let one: Renderer = serde_json::from_str(r#"{"kind":"one_hot"}"#).unwrap();
        assert_eq!(one, Renderer::OneHot {});
    }
}
