//! Procedural multi-view scenes for the toy training task.
//!
//! A scene is a textured background plus 2-4 textured rectangles at distinct
//! integer disparities. Views are rendered per-rectangle: in view `(u, v)` a
//! rectangle with disparity `d` sits at its base position shifted by
//! `d * (u - u_c, v - v_c)`, with its texture anchored to the rectangle.
//! Rectangle pairs share textures, so within a pair disparity is the only
//! distinguishing cue and per-view appearance alone cannot separate their
//! classes. Labels are rectangle ids at the center view; nearer rectangles
//! (larger disparity) occlude farther ones.

use crate::lightfield::{LightField, LightFieldError};
use crate::metrics::{LabelGrid, RealGrid};
use crate::seeds;
use rand::seq::SliceRandom;
use rand::Rng;

/// Spatial side length of generated scenes, in pixels.
pub const SCENE_SIZE: usize = 32;
/// Angular side length of generated scenes.
pub const SCENE_ANGULAR: usize = 5;
/// Background plus up to four rectangle classes.
pub const NUM_CLASSES: usize = 5;

const DISPARITY_MENU: [f64; 4] = [-2.0, -1.0, 1.0, 2.0];

/// One scene rectangle in base (center-view) coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneRect {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub disparity: f64,
    pub texture: usize,
    pub class: u32,
}

impl SceneRect {
    /// Whether this rectangle covers pixel `(x, y)` in the view with angular
    /// offset `(du, dv)`.
    fn covers(&self, x: f64, y: f64, du: f64, dv: f64) -> bool {
        let lx = x - self.disparity * du;
        let ly = y - self.disparity * dv;
        lx >= self.x0 as f64
            && lx < (self.x0 + self.width) as f64
            && ly >= self.y0 as f64
            && ly < (self.y0 + self.height) as f64
    }
}

/// A generated light field with its center-view pixel labels.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub light_field: LightField,
    /// Rectangle id (+1) per center-view pixel, 0 for background.
    pub pixel_labels: LabelGrid,
    pub rects: Vec<SceneRect>,
}

impl SyntheticScene {
    /// Labels at token resolution: each `patch_size`-square cell takes the
    /// label of its center pixel.
    pub fn token_labels(&self, patch_size: usize) -> LabelGrid {
        let g = SCENE_SIZE / patch_size;
        let mut data = Vec::with_capacity(g * g);
        for gy in 0..g {
            for gx in 0..g {
                let y = gy * patch_size + patch_size / 2;
                let x = gx * patch_size + patch_size / 2;
                data.push(self.pixel_labels.at(y, x));
            }
        }
        LabelGrid::new(g, g, data)
    }

    /// Binary saliency target at token resolution: 1 where any rectangle is.
    pub fn token_saliency(&self, patch_size: usize) -> RealGrid {
        let labels = self.token_labels(patch_size);
        let data = labels
            .data()
            .iter()
            .map(|&l| if l > 0 { 1.0 } else { 0.0 })
            .collect();
        RealGrid::new(labels.height(), labels.width(), data)
    }
}

/// Three-component sinusoid texture; one bank per texture id.
struct Texture {
    components: [(f64, f64, f64, f64); 3], // (amplitude, kx, ky, phase)
}

impl Texture {
    fn generate<R: Rng>(rng: &mut R) -> Self {
        let amps = [0.17, 0.12, 0.09];
        let mut components = [(0.0, 0.0, 0.0, 0.0); 3];
        for (i, c) in components.iter_mut().enumerate() {
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let freq: f64 = rng.random_range(0.55..1.45);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            *c = (amps[i], freq * theta.cos(), freq * theta.sin(), phase);
        }
        Texture { components }
    }

    fn value(&self, x: f64, y: f64) -> f32 {
        let mut v = 0.5;
        for (a, kx, ky, phase) in self.components {
            v += a * (kx * x + ky * y + phase).sin();
        }
        v.clamp(0.0, 1.0) as f32
    }
}

/// Generates a scene deterministically from a seed.
pub fn make_synthetic_task(seed: u64) -> SyntheticScene {
    let mut rng = seeds::rng(seed, "scene");
    let textures: Vec<Texture> = (0..3)
        .map(|i| Texture::generate(&mut seeds::rng(seed, &format!("texture{i}"))))
        .collect();
    let background = &textures[2];

    let n_rects = rng.random_range(2..=4usize);
    let mut menu = DISPARITY_MENU;
    menu.shuffle(&mut rng);
    let mut rects = Vec::with_capacity(n_rects);
    for i in 0..n_rects {
        let width = rng.random_range(10..=16usize);
        let height = rng.random_range(10..=16usize);
        let x0 = rng.random_range(2..=SCENE_SIZE - 2 - width);
        let y0 = rng.random_range(2..=SCENE_SIZE - 2 - height);
        rects.push(SceneRect {
            x0,
            y0,
            width,
            height,
            disparity: menu[i],
            // pairs (0,1) and (2,3) share a texture
            texture: i / 2,
            class: (i + 1) as u32,
        });
    }
    // farthest first, so the largest disparity paints last (occludes)
    let mut paint_order: Vec<usize> = (0..rects.len()).collect();
    paint_order.sort_by(|&a, &b| {
        rects[a]
            .disparity
            .partial_cmp(&rects[b].disparity)
            .expect("disparities are finite")
    });

    let a = SCENE_ANGULAR;
    let center = (a - 1) as f64 / 2.0;
    let light_field = LightField::from_fn(a, a, SCENE_SIZE, SCENE_SIZE, 1, |v, u, y, x, _| {
        let du = u as f64 - center;
        let dv = v as f64 - center;
        let (xf, yf) = (x as f64, y as f64);
        let mut value = background.value(xf, yf);
        for &ri in &paint_order {
            let r = &rects[ri];
            if r.covers(xf, yf, du, dv) {
                value = textures[r.texture].value(xf - r.disparity * du, yf - r.disparity * dv);
            }
        }
        value
    })
    .expect("scene dimensions are valid");

    let mut labels = Vec::with_capacity(SCENE_SIZE * SCENE_SIZE);
    for y in 0..SCENE_SIZE {
        for x in 0..SCENE_SIZE {
            let mut label = 0u32;
            for &ri in &paint_order {
                let r = &rects[ri];
                if r.covers(x as f64, y as f64, 0.0, 0.0) {
                    label = r.class;
                }
            }
            labels.push(label);
        }
    }
    SyntheticScene {
        light_field,
        pixel_labels: LabelGrid::new(SCENE_SIZE, SCENE_SIZE, labels),
        rects,
    }
}

/// A full-frame textured plane at one disparity: every view is the same
/// continuous texture sampled with a `disparity * (du, dv)` shift. The plane
/// comes back into focus at slope `-disparity`.
pub fn textured_plane_field(
    seed: u64,
    angular: usize,
    height: usize,
    width: usize,
    disparity: f64,
) -> Result<LightField, LightFieldError> {
    let texture = Texture::generate(&mut seeds::rng(seed, "plane-texture"));
    let center = (angular - 1) as f64 / 2.0;
    LightField::from_fn(angular, angular, height, width, 1, |v, u, y, x, _| {
        let du = u as f64 - center;
        let dv = v as f64 - center;
        texture.value(x as f64 - disparity * du, y as f64 - disparity * dv)
    })
}
