use serde::{Deserialize, Serialize};

use super::group::group_probability;
use super::model::RelationScorer;
use crate::error::{Error, Result};
use crate::features::{extract_features, ExtractorSpec, ImageRecord};
use crate::par::Exec;

/// Occluder colour: mid grey (128/255 ≈ 0.5 intensity).
pub const OCCLUSION_FILL: [u8; 3] = [128, 128, 128];

/// Occlusion saliency grid. `values[r * cols + c]` is the drop in group
/// probability when the patch at `(c·stride, r·stride)` is greyed out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
    pub stride: usize,
    pub baseline: f64,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

pub fn occlusion_heatmap<S, M>(
    scorer: &S,
    image: &ImageRecord,
    members: &[M],
    patch: usize,
    stride: usize,
    extractor: ExtractorSpec,
    exec: Exec,
) -> Result<Heatmap>
where
    S: RelationScorer + ?Sized,
    M: AsRef<[f64]> + Sync,
{
    image.validate()?;
    if stride == 0 || patch == 0 {
        return Err(Error::invalid("patch and stride must be at least 1"));
    }
    if patch > image.width.min(image.height) {
        return Err(Error::invalid(format!(
            "patch {patch} exceeds image size {}x{}",
            image.width, image.height
        )));
    }
    let base = extract_features(image, extractor)?;
    let baseline = group_probability(scorer, base.as_slice(), members)?;
    let rows = (image.height - patch) / stride + 1;
    let cols = (image.width - patch) / stride + 1;
    let values = exec
        .map(rows * cols, |cell| -> Result<f64> {
            let (r, c) = (cell / cols, cell % cols);
            let mut occluded = image.clone();
            occluded.fill_rect(c * stride, r * stride, patch, patch, OCCLUSION_FILL);
            let f = extract_features(&occluded, extractor)?;
            Ok(baseline - group_probability(scorer, f.as_slice(), members)?)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Heatmap {
        rows,
        cols,
        patch,
        stride,
        baseline,
        values,
    })
}
