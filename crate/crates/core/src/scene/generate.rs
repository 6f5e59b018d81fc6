use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::RngStream;
use crate::scene::{BoundingBox, Image, SceneObject};

/// Parameters of the synthetic road-scene renderer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Horizon row as a fraction of the height.
    pub horizon: f64,
    /// Bottom band holding the ego vehicle, as a fraction of the height.
    pub ego_band: f64,
    /// Peak amplitude of the background texture, in 8-bit levels.
    pub texture: f64,
    /// Probability that a placed object is put in the ego lane.
    pub in_path_prob: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 48,
            width: 48,
            min_objects: 2,
            max_objects: 5,
            horizon: 0.35,
            ego_band: 0.125,
            texture: 30.0,
            in_path_prob: 0.5,
        }
    }
}

impl SceneSpec {
    pub fn horizon_row(&self) -> usize {
        (self.height as f64 * self.horizon).round() as usize
    }

    /// First row of the reserved ego region.
    pub fn ego_row(&self) -> usize {
        self.height - (self.height as f64 * self.ego_band).round() as usize
    }

    fn road_half_width(&self, y: f64) -> f64 {
        let (yh, h, w) = (
            self.horizon_row() as f64,
            self.height as f64,
            self.width as f64,
        );
        let t = ((y - yh) / (h - yh)).clamp(0.0, 1.0);
        0.04 * w + t * (0.48 * w - 0.04 * w)
    }

    /// Horizontal extent of the ego lane at row `y`.
    pub fn ego_lane(&self, y: f64) -> (f64, f64) {
        let c = self.width as f64 / 2.0;
        let hw = 0.5 * self.road_half_width(y);
        (c - hw, c + hw)
    }

    fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::Config(format!(
                "scene {}x{} is too small",
                self.width, self.height
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        if !(0.1..0.8).contains(&self.horizon) || !(0.0..0.4).contains(&self.ego_band) {
            return Err(Error::Config("horizon/ego_band out of range".into()));
        }
        if self.ego_row() <= self.horizon_row() + 4 {
            return Err(Error::Config(
                "no room between horizon and ego region".into(),
            ));
        }
        Ok(())
    }
}

const CAR_COLORS: [[f64; 3]; 7] = [
    [200.0, 30.0, 30.0],
    [30.0, 60.0, 190.0],
    [230.0, 200.0, 40.0],
    [235.0, 235.0, 235.0],
    [25.0, 25.0, 30.0],
    [40.0, 150.0, 60.0],
    [230.0, 120.0, 20.0],
];

fn fill(img: &mut Image, x0: i64, y0: i64, x1: i64, y1: i64, rgb: [f64; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    for y in y0.max(0)..y1.min(h) {
        for x in x0.max(0)..x1.min(w) {
            img.set(y as usize, x as usize, rgb);
        }
    }
}

fn jitter(rgb: [f64; 3], amp: f64, rng: &mut RngStream) -> [f64; 3] {
    let n = if amp > 0.0 {
        rng.gen_range(-amp..amp)
    } else {
        0.0
    };
    [rgb[0] + n, rgb[1] + n, rgb[2] + n]
}

fn render_background(spec: &SceneSpec, rng: &mut RngStream) -> Image {
    let (h, w) = (spec.height, spec.width);
    let yh = spec.horizon_row();
    let amp = spec.texture;
    let smooth = 0.15 * amp;
    let mut img = Image::filled(h, w, [0.0; 3]);

    // coarse texture shared by 2x2 pixel blocks
    let (bh, bw) = (h.div_ceil(2), w.div_ceil(2));
    let blocks: Vec<f64> = (0..bh * bw)
        .map(|_| {
            if amp > 0.0 {
                rng.gen_range(-amp..amp)
            } else {
                0.0
            }
        })
        .collect();
    let block = |y: usize, x: usize| blocks[(y / 2) * bw + x / 2];

    for y in 0..h {
        for x in 0..w {
            let rgb = if y < yh {
                let t = y as f64 / yh as f64;
                jitter(
                    [120.0 + 50.0 * t, 160.0 + 35.0 * t, 215.0 + 10.0 * t],
                    smooth,
                    rng,
                )
            } else {
                let hw = spec.road_half_width(y as f64 + 0.5);
                let xc = x as f64 + 0.5;
                if (xc - w as f64 / 2.0).abs() <= hw {
                    jitter([95.0, 95.0, 100.0], smooth, rng)
                } else {
                    let n = block(y, x);
                    jitter([85.0 + n, 125.0 + n, 65.0 + 0.5 * n], smooth, rng)
                }
            };
            img.set(y, x, rgb);
        }
    }

    // facades with window grids between the sky and the horizon
    let top = (yh as f64 * 0.3).round() as i64;
    let mut x = 0i64;
    while x < w as i64 {
        let fw = rng.gen_range(3..9);
        let y0 = rng.gen_range(0..=top.max(0));
        let base = [
            rng.gen_range(110.0..170.0),
            rng.gen_range(100.0..150.0),
            rng.gen_range(90.0..140.0),
        ];
        for yy in y0..yh as i64 {
            for xx in x..(x + fw).min(w as i64) {
                let (uy, ux) = (yy as usize, xx as usize);
                let window = if (yy - y0) % 3 == 1 && (xx - x) % 2 == 1 {
                    -55.0
                } else {
                    0.0
                };
                let n = block(uy, ux) + window;
                img.set(
                    uy,
                    ux,
                    jitter([base[0] + n, base[1] + n, base[2] + n], smooth, rng),
                );
            }
        }
        x += fw;
    }

    // lane markings
    for y in yh..h {
        let yc = y as f64 + 0.5;
        let hw = spec.road_half_width(yc);
        let c = w as f64 / 2.0;
        for edge in [c - hw, c + hw] {
            let xi = edge.floor() as i64;
            if xi >= 0 && (xi as usize) < w {
                img.set(y, xi as usize, [200.0, 200.0, 200.0]);
            }
        }
        if (y / 3) % 2 == 0 {
            img.set(y, w / 2, [220.0, 220.0, 200.0]);
        }
    }

    // ego hood
    let ego = spec.ego_row();
    let c = w as i64 / 2;
    let half = (w as f64 * 0.35) as i64;
    for y in ego..h {
        for x in (c - half).max(0) as usize..((c + half) as usize).min(w) {
            let base = if y == ego {
                [90.0, 90.0, 105.0]
            } else {
                [45.0, 45.0, 55.0]
            };
            img.set(y, x, jitter(base, smooth, rng));
        }
    }
    img
}

fn draw_car(img: &mut Image, b: &BoundingBox, body: [f64; 3]) {
    let (x1, y1, x2, y2) = (b.x1 as i64, b.y1 as i64, b.x2 as i64, b.y2 as i64);
    let (bw, bh) = (x2 - x1, y2 - y1);
    fill(img, x1, y1, x2, y2, body);
    let glass_h = (bh / 3).max(1);
    fill(
        img,
        x1 + bw / 5,
        y1,
        x2 - bw / 5,
        y1 + glass_h,
        [40.0, 55.0, 75.0],
    );
}

fn draw_person(img: &mut Image, b: &BoundingBox, shirt: [f64; 3]) {
    let (x1, y1, x2, y2) = (b.x1 as i64, b.y1 as i64, b.x2 as i64, b.y2 as i64);
    let bh = y2 - y1;
    let head = (bh / 5).max(1);
    let legs = (bh * 2 / 5).max(1);
    fill(img, x1, y1, x2, y1 + head, [225.0, 185.0, 150.0]);
    fill(img, x1, y1 + head, x2, y2 - legs, shirt);
    fill(img, x1, y2 - legs, x2, y2, [35.0, 35.0, 60.0]);
}

/// Renders a deterministic synthetic road scene for `seed`.
///
/// Objects never intersect the ego band at the bottom of the image, and each
/// carries its ground-truth vertical distance to that band (pixels) and an
/// ego-lane flag.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<(Image, Vec<SceneObject>)> {
    spec.validate()?;
    let root = RngStream::new(seed);
    let mut rng = root.fork_named("scene/layout");
    let mut tex = root.fork_named("scene/texture");
    let mut img = render_background(spec, &mut tex);

    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let (yh, ego, w) = (
        spec.horizon_row() as f64,
        spec.ego_row() as f64,
        spec.width as f64,
    );
    let mut objects = Vec::with_capacity(count);
    for id in 0..count {
        let is_car = rng.gen_bool(0.7);
        let want_path = rng.gen_bool(spec.in_path_prob);
        let mut placed = None;
        for _ in 0..100 {
            let y2 = rng.gen_range(yh + 3.0..=ego).floor();
            let s = ((y2 - yh) / (ego - yh)).clamp(0.0, 1.0);
            let (bw, bh) = if is_car {
                ((6.0 + 20.0 * s).round(), (4.0 + 12.0 * s).round())
            } else {
                ((3.0 + 5.0 * s).round(), (7.0 + 13.0 * s).round())
            };
            let (l, r) = spec.ego_lane(y2);
            let cx = if want_path {
                rng.gen_range(l..=r)
            } else if rng.gen_bool(0.5) {
                rng.gen_range(bw / 2.0..=l.max(bw / 2.0 + 1.0))
            } else {
                rng.gen_range(r.min(w - bw / 2.0 - 1.0)..=w - bw / 2.0)
            };
            let x1 = (cx - bw / 2.0).round();
            let b = BoundingBox {
                x1,
                y1: y2 - bh,
                x2: x1 + bw,
                y2,
            };
            if b.validate(spec.height, spec.width).is_ok() && b.y2 <= ego {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::Scene(format!(
                "could not place object {} of {count} after 100 attempts",
                id + 1
            ))
        })?;
        let center = (bbox.x1 + bbox.x2) / 2.0;
        let (l, r) = spec.ego_lane(bbox.y2);
        let color = CAR_COLORS[rng.gen_range(0..CAR_COLORS.len())];
        objects.push((
            SceneObject {
                track_id: id as i64 + 1,
                name: if is_car {
                    "car".into()
                } else {
                    "person".into()
                },
                class: if is_car { 2 } else { 0 },
                confidence: 1.0,
                bbox,
                ego_distance: Some(ego - bbox.y2),
                in_path: Some(center >= l && center <= r),
            },
            color,
        ));
    }
    // far objects first so nearer ones occlude them
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[a].0.bbox.y2.total_cmp(&objects[b].0.bbox.y2));
    for i in order {
        let (o, color) = &objects[i];
        if o.class == 2 {
            draw_car(&mut img, &o.bbox, *color);
        } else {
            draw_person(&mut img, &o.bbox, *color);
        }
    }
    Ok((img, objects.into_iter().map(|(o, _)| o).collect()))
}
