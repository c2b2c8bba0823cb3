//! Deterministic, aliased rasterization. A pixel is painted when its center
//! falls inside the shape, so every object stays inside its own cell and
//! before/after differences are exact.

use ndarray::Array3;

use super::{Cell, Image, SceneDescription, ShapeKind, Size, GRID};

/// Light-gray background.
pub const BACKGROUND: [u8; 3] = [200, 200, 200];

/// Pixel range `[start, end)` of a cell along one axis.
pub fn cell_bounds(index: usize, canvas: usize) -> (usize, usize) {
    (index * canvas / GRID, (index + 1) * canvas / GRID)
}

fn radius(size: Size, extent: f64) -> f64 {
    match size {
        Size::Small => 0.22 * extent,
        Size::Large => 0.4 * extent,
    }
}

fn covers(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        // Apex up; the half-width grows linearly from 0 at the top to r at the base.
        ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

pub fn render_scene(scene: &SceneDescription) -> Image {
    let canvas = scene.canvas();
    let mut img = Array3::<u8>::zeros((3, canvas, canvas));
    for (c, &v) in BACKGROUND.iter().enumerate() {
        img.index_axis_mut(ndarray::Axis(0), c).fill(v);
    }
    for obj in scene.objects() {
        draw(&mut img, obj.cell, canvas, obj.attributes.shape, obj.attributes.size, obj.attributes.color.rgb());
    }
    img.mapv(|v| v as f32 / 255.0)
}

fn draw(img: &mut Array3<u8>, cell: Cell, canvas: usize, shape: ShapeKind, size: Size, rgb: [u8; 3]) {
    let (y0, y1) = cell_bounds(cell.row(), canvas);
    let (x0, x1) = cell_bounds(cell.col(), canvas);
    let cy = (y0 + y1) as f64 / 2.0;
    let cx = (x0 + x1) as f64 / 2.0;
    let r = radius(size, (y1 - y0).min(x1 - x0) as f64);
    for y in y0..y1 {
        for x in x0..x1 {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            if covers(shape, dx, dy, r) {
                for (c, &v) in rgb.iter().enumerate() {
                    img[[c, y, x]] = v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{Attributes, Color, SceneObject};

    fn is_background(img: &Image, y: usize, x: usize) -> bool {
        (0..3).all(|c| img[[c, y, x]] == BACKGROUND[c] as f32 / 255.0)
    }

    #[test]
    fn empty_scene_is_uniform_background() {
        let img = render_scene(&SceneDescription::empty(64).unwrap());
        assert_eq!(img.shape(), &[3, 64, 64]);
        for y in 0..64 {
            for x in 0..64 {
                assert!(is_background(&img, y, x));
            }
        }
    }

    #[test]
    fn large_square_is_centered_in_middle_cell() {
        let scene = SceneDescription::new(
            vec![SceneObject {
                attributes: Attributes {
                    size: Size::Large,
                    color: Color::Red,
                    shape: ShapeKind::Square,
                },
                cell: Cell::new(1, 1).unwrap(),
            }],
            64,
        )
        .unwrap();
        let img = render_scene(&scene);
        let painted: Vec<(usize, usize)> = (0..64)
            .flat_map(|y| (0..64).map(move |x| (y, x)))
            .filter(|&(y, x)| !is_background(&img, y, x))
            .collect();
        let (ymin, ymax) = (painted.iter().map(|p| p.0).min().unwrap(), painted.iter().map(|p| p.0).max().unwrap());
        let (xmin, xmax) = (painted.iter().map(|p| p.1).min().unwrap(), painted.iter().map(|p| p.1).max().unwrap());
        // Filled and square.
        assert_eq!(ymax - ymin, xmax - xmin);
        assert_eq!(painted.len(), (ymax - ymin + 1) * (xmax - xmin + 1));
        // Centered in the middle cell [21, 42).
        assert_eq!(ymin + ymax, 21 + 42 - 1);
        assert_eq!(xmin + xmax, 21 + 42 - 1);
        for &(y, x) in &painted {
            assert_eq!(img[[0, y, x]], 220.0 / 255.0);
        }
    }

    #[test]
    fn rendering_is_bit_identical() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let scene = SceneDescription::random(&mut rng, 64, 3, 9).unwrap();
        assert_eq!(render_scene(&scene), render_scene(&scene));
    }
}
