//! Synthetic camera-trap data with known answers: scenes with sidecar
//! ground truth for the oracle detector, colour-patch crops for classifier
//! training, and frame-sequence videos.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::oracle::{class_color, write_sidecar, SidecarObject};
use crate::types::{BBox, DetectionCategory, ImageRef};
use crate::video::{FrameSequence, VideoMeta};

/// Labels the oracle classifier maps to the red, green and blue channels.
pub const DEFAULT_LABELS: [&str; 3] = ["opossum", "agouti", "peccary"];

const BACKGROUND: [u8; 3] = [96, 96, 96];
const PERSON_COLOR: [u8; 3] = [200, 200, 60];
const VEHICLE_COLOR: [u8; 3] = [60, 200, 200];

/// A noisy square patch whose brightest channel is `class % 3`.
pub fn color_patch(class: usize, size: u32, rng: &mut impl Rng) -> RgbImage {
    let dominant = class % 3;
    let base: [i32; 3] = std::array::from_fn(|c| if c == dominant { rng.random_range(150..=230) } else { rng.random_range(20..=110) });
    RgbImage::from_fn(size, size, |_, _| {
        Rgb(std::array::from_fn(|c| (base[c] + rng.random_range(-25..=25)).clamp(0, 255) as u8))
    })
}

fn fill(img: &mut RgbImage, b: &BBox, color: [u8; 3]) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = (b.x_min() * w).floor() as u32;
    let y0 = (b.y_min() * h).floor() as u32;
    let x1 = ((b.x_max() * w).ceil() as u32).min(img.width());
    let y1 = ((b.y_max() * h).ceil() as u32).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

/// Draws `objects` on a flat background: animals in their class colour,
/// people and vehicles in fixed colours.
pub fn render_scene(width: u32, height: u32, objects: &[SidecarObject], labels: &[&str]) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb(BACKGROUND));
    for o in objects {
        let color = match o.category {
            DetectionCategory::Animal => labels
                .iter()
                .position(|l| *l == o.label)
                .and_then(class_color)
                .unwrap_or([160, 90, 40]),
            DetectionCategory::Person => PERSON_COLOR,
            DetectionCategory::Vehicle => VEHICLE_COLOR,
        };
        fill(&mut img, &o.bbox, color);
    }
    img
}

/// Writes the scene as a PNG plus its sidecar.
pub fn write_scene(path: &Path, width: u32, height: u32, objects: &[SidecarObject], labels: &[&str]) -> std::io::Result<ImageRef> {
    render_scene(width, height, objects, labels)
        .save(path)
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    write_sidecar(path, objects)?;
    Ok(ImageRef::new(path).with_dimensions(width, height).expect("non-empty"))
}

/// Random non-overlapping-ish objects for one scene.
pub fn random_objects(rng: &mut impl Rng, max_objects: usize, labels: &[&str]) -> Vec<SidecarObject> {
    let n = rng.random_range(0..=max_objects);
    let mut out: Vec<SidecarObject> = Vec::with_capacity(n);
    // objects live in disjoint vertical bands so boxes never overlap
    let band = 1.0 / max_objects.max(1) as f64;
    for k in 0..n {
        let w = rng.random_range(0.1..0.3);
        let h = rng.random_range(0.3 * band..0.9 * band);
        let x = rng.random_range(0.0..1.0 - w);
        let y = k as f64 * band + rng.random_range(0.0..(band - h));
        let roll: f64 = rng.random();
        let (category, label) = if roll < 0.7 {
            (DetectionCategory::Animal, labels[rng.random_range(0..labels.len())].to_string())
        } else if roll < 0.85 {
            (DetectionCategory::Person, String::new())
        } else {
            (DetectionCategory::Vehicle, String::new())
        };
        let bbox = BBox::new(x, y, w, h).expect("generated inside the unit square");
        out.push(SidecarObject { bbox, category, label, confidence: Some(rng.random_range(0.5..1.0)) });
    }
    out
}

/// `n` scenes named `img_00000.png`... in `dir`, deterministic in `seed`.
pub fn generate_corpus(dir: &Path, n: usize, seed: u64) -> std::io::Result<Vec<ImageRef>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let objects = random_objects(&mut rng, 4, &DEFAULT_LABELS);
            write_scene(&dir.join(format!("img_{i:05}.png")), 160, 120, &objects, &DEFAULT_LABELS)
        })
        .collect()
}

/// Writes a frame-sequence video: `round(native_fps * duration_s)` frames,
/// frame `i` showing `objects(i)`.
pub fn write_frame_sequence(
    dir: &Path,
    native_fps: f64,
    duration_s: f64,
    objects: impl Fn(usize) -> Vec<SidecarObject>,
) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let n = ((native_fps * duration_s).round() as usize).max(1);
    for i in 0..n {
        write_scene(&dir.join(format!("frame_{i:06}.png")), 64, 48, &objects(i), &DEFAULT_LABELS)?;
    }
    FrameSequence::write_meta(dir, VideoMeta { native_fps, duration_s })?;
    Ok(dir.to_path_buf())
}

/// A single animal filling the middle of the frame.
pub fn animal(label: &str) -> SidecarObject {
    SidecarObject {
        bbox: BBox::new(0.3, 0.3, 0.4, 0.4).expect("valid"),
        category: DetectionCategory::Animal,
        label: label.to_string(),
        confidence: Some(0.9),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::oracle::read_sidecar;

    #[test]
    fn corpus_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = generate_corpus(a.path(), 5, 42).unwrap();
        generate_corpus(b.path(), 5, 42).unwrap();
        for r in &ra {
            let name = r.path.file_name().unwrap();
            assert_eq!(std::fs::read(&r.path).unwrap(), std::fs::read(b.path().join(name)).unwrap());
            assert_eq!(read_sidecar(&r.path).unwrap(), read_sidecar(&b.path().join(name)).unwrap());
        }
    }

    #[test]
    fn patches_have_dominant_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for class in 0..3 {
            let p = color_patch(class, 8, &mut rng);
            let mut sums = [0u32; 3];
            for px in p.pixels() {
                for c in 0..3 {
                    sums[c] += px.0[c] as u32;
                }
            }
            let top = (0..3).max_by_key(|&c| sums[c]).unwrap();
            assert_eq!(top, class);
        }
    }
}
