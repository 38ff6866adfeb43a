//! Synthetic paired (stimulus, ROI evidence) records.
//!
//! Each record renders one colored shape (disk / square / triangle / cross)
//! on a dark background and derives ROI evidence from it:
//! early tiles carry local edge energy (location), mid ROIs carry global
//! contour statistics (no position information), and late ROIs lean one-hot
//! toward the category.

use crate::config::SynthLayout;
use crate::error::{Error, Result};
use crate::io::{hdt1, ppm};
use crate::rng::DetRng;
use crate::roi::{RoiGroup, RoiSpec, SubjectRecord};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CATEGORY_NAMES: [&str; 4] = ["disk", "square", "triangle", "cross"];

#[derive(Clone, Copy, Debug)]
struct ShapeParams {
    category: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    hue: f64,
    background: f64,
}

fn sample_shape(rng: &mut DetRng, layout: &SynthLayout) -> ShapeParams {
    let size = layout.image_size as f64;
    let category = rng.index(layout.categories);
    let r = rng.range(5.5, 8.5) * (size / 64.0);
    let stretch = rng.range(0.78, 1.22);
    // margin is independent of the sampled size: a size-dependent margin
    // would couple contour statistics to position and leak location into
    // the mid group.
    let margin = 8.5 * 1.22 * (size / 64.0) + 2.0;
    // choose the tile uniformly first so position classes are balanced,
    // then place the center within that tile's admissible band
    let grid = layout.early_grid;
    let tx = rng.index(grid);
    let ty = rng.index(grid);
    let band = |t: usize| {
        let (lo, hi) = tile_bounds(layout.image_size, grid, t);
        ((lo as f64).max(margin), (hi as f64).min(size - margin))
    };
    let (xlo, xhi) = band(tx);
    let (ylo, yhi) = band(ty);
    let cx = rng.range(xlo, xhi);
    let cy = rng.range(ylo, yhi);
    ShapeParams {
        category,
        cx,
        cy,
        rx: r * stretch,
        ry: r / stretch,
        hue: rng.uniform(),
        background: rng.range(0.04, 0.12),
    }
}

fn inside(p: &ShapeParams, x: f64, y: f64) -> bool {
    let dx = x - p.cx;
    let dy = y - p.cy;
    match p.category {
        0 => (dx / p.rx).powi(2) + (dy / p.ry).powi(2) <= 1.0,
        1 => dx.abs() <= p.rx && dy.abs() <= p.ry,
        2 => {
            // isoceles triangle, apex up
            let t = (dy + p.ry) / (2.0 * p.ry);
            (0.0..=1.0).contains(&t) && dx.abs() <= t * p.rx
        }
        _ => {
            (dx.abs() <= 0.35 * p.rx && dy.abs() <= p.ry)
                || (dy.abs() <= 0.35 * p.ry && dx.abs() <= p.rx)
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).clamp(0.0, 5.9999);
    let i = h6 as usize;
    let f = h6 - i as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, t],
    }
}

fn render(p: &ShapeParams, size: usize) -> (Tensor<f32>, Vec<bool>) {
    let rgb = hsv_to_rgb(p.hue, 0.85, 0.9);
    let plane = size * size;
    let mut img = vec![p.background as f32; 3 * plane];
    let mut mask = vec![false; plane];
    for y in 0..size {
        for x in 0..size {
            if inside(p, x as f64, y as f64) {
                mask[y * size + x] = true;
                for c in 0..3 {
                    img[c * plane + y * size + x] = rgb[c] as f32;
                }
            }
        }
    }
    (
        Tensor::from_vec(vec![3, size, size], img).expect("image shape"),
        mask,
    )
}

pub fn luminance(img: &Tensor<f32>) -> Vec<f32> {
    let s = img.shape();
    let plane = s[1] * s[2];
    let d = img.data();
    (0..plane)
        .map(|p| 0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p])
        .collect()
}

/// Central-difference gradient magnitude of a luminance plane
/// (zero on the one-pixel border).
pub fn edge_energy(luma: &[f32], size: usize) -> Vec<f32> {
    let mut e = vec![0.0f32; size * size];
    for y in 1..size - 1 {
        for x in 1..size - 1 {
            let gx = 0.5 * (luma[y * size + x + 1] - luma[y * size + x - 1]);
            let gy = 0.5 * (luma[(y + 1) * size + x] - luma[(y - 1) * size + x]);
            e[y * size + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    e
}

/// Per-tile pixel bounds for an NxN grid over a `size`-pixel axis.
pub fn tile_bounds(size: usize, grid: usize, idx: usize) -> (usize, usize) {
    let lo = idx * size / grid;
    let hi = (idx + 1) * size / grid;
    (lo, hi)
}

fn tile_mask(size: usize, grid: usize, ty: usize, tx: usize) -> Tensor<f32> {
    let mut m = vec![0.0f32; size * size];
    let (y0, y1) = tile_bounds(size, grid, ty);
    let (x0, x1) = tile_bounds(size, grid, tx);
    for y in y0..y1 {
        for x in x0..x1 {
            m[y * size + x] = 1.0;
        }
    }
    Tensor::from_vec(vec![size, size], m).expect("mask shape")
}

fn quadrant_mask(size: usize, count: usize, idx: usize) -> Tensor<f32> {
    // 4 quadrants; further mid ROIs (if configured) reuse them cyclically.
    let q = idx % 4.min(count.max(1));
    let half = size / 2;
    let (y0, y1) = if q / 2 == 0 { (0, half) } else { (half, size) };
    let (x0, x1) = if q % 2 == 0 { (0, half) } else { (half, size) };
    let mut m = vec![0.0f32; size * size];
    for y in y0..y1 {
        for x in x0..x1 {
            m[y * size + x] = 1.0;
        }
    }
    Tensor::from_vec(vec![size, size], m).expect("mask shape")
}

/// Contour statistics computed from the rendered shape mask. All are
/// position-free by construction.
struct ContourStats {
    aspect: f64,
    curvature: f64,
    edge_density: f64,
    fill: f64,
}

fn contour_stats(mask: &[bool], energy: &[f32], size: usize) -> ContourStats {
    let (mut x0, mut x1, mut y0, mut y1) = (size, 0usize, size, 0usize);
    let mut area = 0usize;
    let mut boundary = 0usize;
    for y in 0..size {
        for x in 0..size {
            if !mask[y * size + x] {
                continue;
            }
            area += 1;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
            let edge = x == 0
                || x + 1 == size
                || y == 0
                || y + 1 == size
                || !mask[y * size + x - 1]
                || !mask[y * size + x + 1]
                || !mask[(y - 1) * size + x]
                || !mask[(y + 1) * size + x];
            if edge {
                boundary += 1;
            }
        }
    }
    if area == 0 {
        return ContourStats {
            aspect: 0.5,
            curvature: 0.0,
            edge_density: 0.0,
            fill: 0.0,
        };
    }
    let bw = (x1 - x0 + 1) as f64;
    let bh = (y1 - y0 + 1) as f64;
    let ipq = (boundary * boundary) as f64 / (4.0 * std::f64::consts::PI * area as f64);
    let mut esum = 0.0f64;
    for y in y0..=y1 {
        for x in x0..=x1 {
            esum += energy[y * size + x] as f64;
        }
    }
    ContourStats {
        aspect: bw / (bw + bh),
        curvature: ((ipq - 0.8) / 3.0).clamp(0.0, 1.0),
        edge_density: (esum / (bw * bh) / 0.25).clamp(0.0, 1.0),
        fill: (area as f64 / (bw * bh)).clamp(0.0, 1.0),
    }
}

/// Generate one record. Deterministic in (seed, index).
pub fn synth_record(seed: u64, index: usize, layout: &SynthLayout) -> SubjectRecord {
    let mut rng = DetRng::derive(seed, index as u64);
    let shape = sample_shape(&mut rng, layout);
    let size = layout.image_size;
    let (stimulus, mask) = render(&shape, size);
    let luma = luminance(&stimulus);
    let energy = edge_energy(&luma, size);

    let mut rois = Vec::with_capacity(layout.roi_count());

    // early: tile edge energy, max-normalized
    let g = layout.early_grid;
    let mut tile_energy = vec![0.0f64; g * g];
    for ty in 0..g {
        let (ylo, yhi) = tile_bounds(size, g, ty);
        for tx in 0..g {
            let (xlo, xhi) = tile_bounds(size, g, tx);
            let mut acc = 0.0f64;
            for y in ylo..yhi {
                for x in xlo..xhi {
                    acc += energy[y * size + x] as f64;
                }
            }
            tile_energy[ty * g + tx] = acc;
        }
    }
    let emax = tile_energy.iter().cloned().fold(0.0f64, f64::max);
    for ty in 0..g {
        for tx in 0..g {
            let a = if emax > 0.0 {
                tile_energy[ty * g + tx] / emax
            } else {
                0.0
            };
            rois.push(RoiSpec {
                id: format!("e{}{}", ty, tx),
                group: RoiGroup::Early,
                mask: tile_mask(size, g, ty, tx),
                amplitude: a as f32,
            });
        }
    }

    // mid: global contour statistics on quadrant masks
    let stats = contour_stats(&mask, &energy, size);
    let mid_values = [
        stats.aspect,
        stats.curvature,
        stats.edge_density,
        stats.fill,
    ];
    for i in 0..layout.mid_count {
        rois.push(RoiSpec {
            id: format!("m{i}"),
            group: RoiGroup::Mid,
            mask: quadrant_mask(size, layout.mid_count, i),
            amplitude: mid_values[i % mid_values.len()] as f32,
        });
    }

    // late: one-hot-lean category evidence on full-field masks
    for k in 0..layout.categories {
        let base = if k == shape.category { 0.85 } else { 0.05 };
        let a = base + 0.1 * rng.uniform();
        rois.push(RoiSpec {
            id: format!("l{k}"),
            group: RoiGroup::Late,
            mask: Tensor::full(vec![size, size], 1.0),
            amplitude: a as f32,
        });
    }

    SubjectRecord {
        id: index,
        rois,
        stimulus,
        label: shape.category,
    }
}

pub fn synth_dataset(seed: u64, n: usize, layout: &SynthLayout) -> Result<Vec<SubjectRecord>> {
    if n == 0 {
        return Err(Error::Config("dataset size n must be >= 1".to_string()));
    }
    Ok((0..n).map(|i| synth_record(seed, i, layout)).collect())
}

// ── on-disk dataset layout ──────────────────────────────────────────

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct RoiEntry {
    pub id: String,
    pub group: RoiGroup,
    pub mask: String,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct RecordManifest {
    pub id: usize,
    pub label: usize,
    pub stimulus: String,
    pub amplitudes: String,
    pub rois: Vec<RoiEntry>,
}

#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n: usize,
    pub layout: SynthLayout,
    pub records: Vec<String>,
}

fn mkdirs(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Write one record as masks + amplitudes (HDT1), stimulus (PPM) and a JSON
/// manifest, under `dir`.
pub fn export_record(rec: &SubjectRecord, dir: &Path) -> Result<()> {
    mkdirs(dir)?;
    let rois: Vec<RoiEntry> = rec
        .rois
        .iter()
        .map(|r| RoiEntry {
            id: r.id.clone(),
            group: r.group,
            mask: format!("mask_{}.hdt1", r.id),
        })
        .collect();
    for r in &rec.rois {
        hdt1::write(dir.join(format!("mask_{}.hdt1", r.id)), &r.mask)?;
    }
    let amps = Tensor::from_vec(vec![rec.rois.len()], rec.amplitudes())?;
    hdt1::write(dir.join("amplitudes.hdt1"), &amps)?;
    ppm::write(dir.join("stimulus.ppm"), &rec.stimulus)?;
    write_json(
        &dir.join("manifest.json"),
        &RecordManifest {
            id: rec.id,
            label: rec.label,
            stimulus: "stimulus.ppm".to_string(),
            amplitudes: "amplitudes.hdt1".to_string(),
            rois,
        },
    )
}

pub fn import_record(dir: &Path) -> Result<SubjectRecord> {
    let manifest: RecordManifest = read_json(&dir.join("manifest.json"))?;
    let amps: Tensor<f32> = hdt1::read(dir.join(&manifest.amplitudes))?;
    if amps.numel() != manifest.rois.len() {
        return Err(Error::Integrity(format!(
            "{}: amplitude count {} != roi count {}",
            dir.display(),
            amps.numel(),
            manifest.rois.len()
        )));
    }
    let mut rois = Vec::with_capacity(manifest.rois.len());
    for (entry, &a) in manifest.rois.iter().zip(amps.data()) {
        rois.push(RoiSpec {
            id: entry.id.clone(),
            group: entry.group,
            mask: hdt1::read(dir.join(&entry.mask))?,
            amplitude: a,
        });
    }
    let stimulus = ppm::read(dir.join(&manifest.stimulus))?;
    let rec = SubjectRecord {
        id: manifest.id,
        rois,
        stimulus,
        label: manifest.label,
    };
    rec.validate()?;
    Ok(rec)
}

pub fn export_dataset(
    records: &[SubjectRecord],
    seed: u64,
    layout: &SynthLayout,
    dir: &Path,
) -> Result<()> {
    mkdirs(dir)?;
    let mut names = Vec::with_capacity(records.len());
    for rec in records {
        let name = format!("rec_{:04}", rec.id);
        export_record(rec, &dir.join(&name))?;
        names.push(name);
    }
    write_json(
        &dir.join("dataset.json"),
        &DatasetManifest {
            seed,
            n: records.len(),
            layout: layout.clone(),
            records: names,
        },
    )
}

pub fn import_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SubjectRecord>)> {
    let manifest: DatasetManifest = read_json(&dir.join("dataset.json"))?;
    let records = manifest
        .records
        .iter()
        .map(|name| import_record(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi::GROUPS;

    #[test]
    fn deterministic_given_seed() {
        let layout = SynthLayout::default();
        let a = synth_dataset(9, 2, &layout).unwrap();
        let b = synth_dataset(9, 2, &layout).unwrap();
        for (ra, rb) in a.iter().zip(b.iter()) {
            assert_eq!(ra.label, rb.label);
            assert_eq!(ra.stimulus.data(), rb.stimulus.data());
            for (x, y) in ra.rois.iter().zip(rb.rois.iter()) {
                assert_eq!(x.amplitude.to_bits(), y.amplitude.to_bits());
            }
        }
    }

    #[test]
    fn records_validate_and_partition() {
        let layout = SynthLayout::default();
        for rec in synth_dataset(3, 8, &layout).unwrap() {
            rec.validate().unwrap();
            let spans = rec.group_spans().unwrap();
            let total: usize = spans.iter().map(|(_, l)| l).sum();
            assert_eq!(total, layout.roi_count());
            assert_eq!(spans[0].1, layout.early_count());
            assert_eq!(spans[1].1, layout.mid_count);
            assert_eq!(spans[2].1, layout.categories);
            let _ = GROUPS;
        }
    }

    #[test]
    fn centered_disk_peaks_at_center_tile() {
        // build the center-disk case directly and recompute tile energies
        let layout = SynthLayout::default();
        let p = ShapeParams {
            category: 0,
            cx: 31.5,
            cy: 31.5,
            rx: 7.0,
            ry: 7.0,
            hue: 0.1,
            background: 0.05,
        };
        let (img, _) = render(&p, layout.image_size);
        let luma = luminance(&img);
        let energy = edge_energy(&luma, layout.image_size);
        let g = layout.early_grid;
        let mut best = (0usize, -1.0f64);
        for t in 0..g * g {
            let (ty, tx) = (t / g, t % g);
            let (y0, y1) = tile_bounds(layout.image_size, g, ty);
            let (x0, x1) = tile_bounds(layout.image_size, g, tx);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += energy[y * layout.image_size + x] as f64;
                }
            }
            if acc > best.1 {
                best = (t, acc);
            }
        }
        assert_eq!(best.0, g * g / 2, "center tile must carry maximal edge energy");
    }

    #[test]
    fn late_amplitude_peaks_at_true_category() {
        let layout = SynthLayout::default();
        for rec in synth_dataset(17, 32, &layout).unwrap() {
            let spans = rec.group_spans().unwrap();
            let (start, len) = spans[2];
            let late = &rec.rois[start..start + len];
            let argmax = late
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.amplitude.partial_cmp(&b.1.amplitude).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, rec.label);
        }
    }

    #[test]
    fn export_import_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let layout = SynthLayout::default();
        let recs = synth_dataset(5, 3, &layout).unwrap();
        export_dataset(&recs, 5, &layout, tmp.path()).unwrap();
        let (manifest, back) = import_dataset(tmp.path()).unwrap();
        assert_eq!(manifest.n, 3);
        for (a, b) in recs.iter().zip(back.iter()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.rois.len(), b.rois.len());
            for (x, y) in a.rois.iter().zip(b.rois.iter()) {
                assert_eq!(x.id, y.id);
                assert_eq!(x.group, y.group);
                assert_eq!(x.amplitude.to_bits(), y.amplitude.to_bits());
                assert_eq!(x.mask.data(), y.mask.data());
            }
            // stimulus within PPM quantization
            for (p, q) in a.stimulus.data().iter().zip(b.stimulus.data().iter()) {
                assert!((p - q).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn zero_records_rejected() {
        assert!(synth_dataset(1, 0, &SynthLayout::default()).is_err());
    }
}
