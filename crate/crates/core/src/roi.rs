//! ROI data model: per-region masks, scalar summaries, and the grouped
//! record structure the adapter consumes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum RoiGroup {
    Early,
    Mid,
    Late,
}

pub const GROUPS: [RoiGroup; 3] = [RoiGroup::Early, RoiGroup::Mid, RoiGroup::Late];

impl RoiGroup {
    pub fn tag(self) -> char {
        match self {
            RoiGroup::Early => 'e',
            RoiGroup::Mid => 'm',
            RoiGroup::Late => 'l',
        }
    }

    pub fn index(self) -> usize {
        match self {
            RoiGroup::Early => 0,
            RoiGroup::Mid => 1,
            RoiGroup::Late => 2,
        }
    }
}

/// One region of interest: a binary 2D mask and a scalar amplitude.
#[derive(Clone, Debug)]
pub struct RoiSpec {
    pub id: String,
    pub group: RoiGroup,
    /// Binary [h, w] map.
    pub mask: Tensor<f32>,
    /// Regional summary in [0, 1].
    pub amplitude: f32,
}

impl RoiSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mask.rank() != 2 {
            return Err(Error::Dim {
                op: "roi_mask",
                lhs: self.mask.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        let mut any = false;
        for &v in self.mask.data() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::Contract(format!(
                    "roi {}: mask values must be 0/1, found {v}",
                    self.id
                )));
            }
            any |= v == 1.0;
        }
        if !any {
            return Err(Error::DegenerateRoi(format!("roi {} has an empty mask", self.id)));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(Error::Contract(format!(
                "roi {}: amplitude {} outside [0,1]",
                self.id, self.amplitude
            )));
        }
        Ok(())
    }
}

/// One paired (stimulus, ROI evidence) sample. ROIs are stored grouped:
/// all early, then all mid, then all late.
#[derive(Clone, Debug)]
pub struct SubjectRecord {
    pub id: usize,
    pub rois: Vec<RoiSpec>,
    /// [3, H, W] image in [0, 1].
    pub stimulus: Tensor<f32>,
    /// Synthetic ground-truth category.
    pub label: usize,
}

impl SubjectRecord {
    /// (start, len) of each group's contiguous span in `rois`.
    pub fn group_spans(&self) -> Result<[(usize, usize); 3]> {
        let mut spans = [(0usize, 0usize); 3];
        let mut cursor = 0usize;
        for (gi, g) in GROUPS.iter().enumerate() {
            let start = cursor;
            while cursor < self.rois.len() && self.rois[cursor].group == *g {
                cursor += 1;
            }
            spans[gi] = (start, cursor - start);
        }
        if cursor != self.rois.len() {
            return Err(Error::Contract(
                "rois must be ordered early, mid, late".to_string(),
            ));
        }
        Ok(spans)
    }

    pub fn amplitudes(&self) -> Vec<f32> {
        self.rois.iter().map(|r| r.amplitude).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rois {
            r.validate()?;
        }
        self.group_spans()?;
        if self.stimulus.rank() != 3 || self.stimulus.shape()[0] != 3 {
            return Err(Error::Dim {
                op: "stimulus",
                lhs: self.stimulus.shape().to_vec(),
                rhs: vec![3, 0, 0],
            });
        }
        if self.stimulus.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Contract("stimulus values outside [0,1]".to_string()));
        }
        Ok(())
    }
}

/// Stand-in for a 4D beta volume with per-ROI voxel masks.
#[derive(Clone, Debug)]
pub struct VolumeStub {
    /// [T, H, W, D]
    pub betas: Tensor<f32>,
    pub roi_voxel_masks: Vec<(String, Tensor<f32>)>,
}

impl VolumeStub {
    fn mask_mean(&self, mask: &Tensor<f32>, trs: &[usize]) -> Result<f64> {
        let bs = self.betas.shape();
        let (t_len, spatial): (usize, usize) = (bs[0], bs[1] * bs[2] * bs[3]);
        if mask.numel() != spatial {
            return Err(Error::Dim {
                op: "summarize_volume",
                lhs: bs.to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        if trs.is_empty() || trs.iter().any(|&t| t >= t_len) {
            return Err(Error::Contract(format!(
                "TR selection must be nonempty and within 0..{t_len}"
            )));
        }
        let active: Vec<usize> = mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        if active.is_empty() {
            return Err(Error::DegenerateRoi("empty voxel mask".to_string()));
        }
        let mut acc = 0.0f64;
        for &t in trs {
            let vol = &self.betas.data()[t * spatial..(t + 1) * spatial];
            for &i in &active {
                acc += vol[i] as f64;
            }
        }
        Ok(acc / (trs.len() * active.len()) as f64)
    }

    /// Mean masked beta per ROI over the selected TRs, then min-max
    /// normalized across the subject's ROIs. A degenerate (zero) range maps
    /// every amplitude to 0.
    pub fn summarize_all(&self, trs: &[usize]) -> Result<Vec<(String, f32)>> {
        let means: Vec<(String, f64)> = self
            .roi_voxel_masks
            .iter()
            .map(|(id, m)| Ok((id.clone(), self.mask_mean(m, trs)?)))
            .collect::<Result<_>>()?;
        let lo = means.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        let hi = means.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        Ok(means
            .into_iter()
            .map(|(id, v)| {
                let a = if range > 0.0 { (v - lo) / range } else { 0.0 };
                (id, a as f32)
            })
            .collect())
    }

    pub fn summarize(&self, roi_id: &str, trs: &[usize]) -> Result<f32> {
        let all = self.summarize_all(trs)?;
        all.into_iter()
            .find(|(id, _)| id == roi_id)
            .map(|(_, a)| a)
            .ok_or_else(|| Error::Contract(format!("unknown roi id {roi_id}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume_with_means(means: &[f32]) -> VolumeStub {
        // 1 TR, one voxel per ROI along D
        let d = means.len();
        let betas = Tensor::from_vec(vec![1, 1, 1, d], means.to_vec()).unwrap();
        let masks = (0..d)
            .map(|i| {
                let mut m = vec![0.0f32; d];
                m[i] = 1.0;
                (format!("r{i}"), Tensor::from_vec(vec![1, 1, d], m).unwrap())
            })
            .collect();
        VolumeStub {
            betas,
            roi_voxel_masks: masks,
        }
    }

    #[test]
    fn min_max_arithmetic() {
        let vol = volume_with_means(&[2.0, 4.0, 3.0]);
        let a = vol.summarize_all(&[0]).unwrap();
        let values: Vec<f32> = a.iter().map(|(_, v)| *v).collect();
        assert_eq!(values, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn constant_volume_maps_to_zero() {
        let vol = volume_with_means(&[5.0, 5.0, 5.0]);
        for (_, a) in vol.summarize_all(&[0]).unwrap() {
            assert_eq!(a, 0.0);
        }
    }

    #[test]
    fn empty_mask_is_degenerate() {
        let mut vol = volume_with_means(&[1.0, 2.0]);
        vol.roi_voxel_masks[0].1 = Tensor::zeros(vec![1, 1, 2]);
        assert!(matches!(
            vol.summarize_all(&[0]),
            Err(Error::DegenerateRoi(_))
        ));
    }

    #[test]
    fn out_of_range_trs_rejected() {
        let vol = volume_with_means(&[1.0, 2.0]);
        assert!(vol.summarize_all(&[3]).is_err());
        assert!(vol.summarize_all(&[]).is_err());
    }
}
