//! Generator identifiability and locality audits on the synthetic corpus.

use hidream_core::config::SynthLayout;
use hidream_core::probe::linear_probe_accuracy;
use hidream_core::synth::{luminance, synth_dataset, tile_bounds};
use hidream_core::roi::RoiGroup;

/// Tile index of the stimulus shape's center of mass, computed from pixels
/// only (independent of the ROI evidence).
fn position_label(rec: &hidream_core::roi::SubjectRecord, grid: usize) -> usize {
    let size = rec.stimulus.shape()[1];
    let luma = luminance(&rec.stimulus);
    let bg = luma.iter().cloned().fold(f32::INFINITY, f32::min);
    let (mut sx, mut sy, mut sw) = (0.0f64, 0.0f64, 0.0f64);
    for y in 0..size {
        for x in 0..size {
            let w = (luma[y * size + x] - bg).max(0.0) as f64;
            sx += w * x as f64;
            sy += w * y as f64;
            sw += w;
        }
    }
    let (cx, cy) = (sx / sw, sy / sw);
    let mut t = (0, 0);
    for i in 0..grid {
        let (lo, hi) = tile_bounds(size, grid, i);
        if (cy as usize) >= lo && (cy as usize) < hi {
            t.0 = i;
        }
        if (cx as usize) >= lo && (cx as usize) < hi {
            t.1 = i;
        }
    }
    t.0 * grid + t.1
}

#[test]
fn late_amplitudes_identify_category() {
    let layout = SynthLayout::default();
    let records = synth_dataset(42, 512, &layout).unwrap();
    let features: Vec<Vec<f32>> = records
        .iter()
        .map(|r| {
            r.rois
                .iter()
                .filter(|roi| roi.group == RoiGroup::Late)
                .map(|roi| roi.amplitude)
                .collect()
        })
        .collect();
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    let acc = linear_probe_accuracy(&features, &labels, layout.categories, 1, 200).unwrap();
    assert!(acc > 0.95, "late-group category probe accuracy {acc} <= 0.95");
}

#[test]
fn zeroing_early_amplitudes_removes_position_information() {
    let layout = SynthLayout::default();
    let records = synth_dataset(43, 512, &layout).unwrap();
    let grid = layout.early_grid;
    let labels: Vec<usize> = records.iter().map(|r| position_label(r, grid)).collect();
    let classes = grid * grid;

    let features_full: Vec<Vec<f32>> = records.iter().map(|r| r.amplitudes()).collect();
    let features_no_early: Vec<Vec<f32>> = records
        .iter()
        .map(|r| {
            r.rois
                .iter()
                .map(|roi| {
                    if roi.group == RoiGroup::Early {
                        0.0
                    } else {
                        roi.amplitude
                    }
                })
                .collect()
        })
        .collect();

    let acc_full = linear_probe_accuracy(&features_full, &labels, classes, 2, 400).unwrap();
    let acc_blind = linear_probe_accuracy(&features_no_early, &labels, classes, 2, 400).unwrap();
    let chance = 1.0 / classes as f64;

    // position must be recoverable with early evidence present...
    assert!(
        acc_full > 0.5,
        "position probe with early evidence too weak: {acc_full}"
    );
    // ...and collapse to chance without it.
    assert!(
        (acc_blind - chance).abs() <= 0.05,
        "position probe without early evidence should be at chance {chance}, got {acc_blind}"
    );
}
