//! Class activation maps for global-average-pooling heads.

use serde::{Deserialize, Serialize};

use super::model::{FusedInputs, GradeModel};
use super::GradeError;
use crate::data::NUM_GRADES;
use crate::nn::tensor::resize_bilinear;
use crate::nn::{Graph, Mode, Tensor};

/// Row-major map with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl CamMap {
    /// Position of the largest value, lowest index on ties, as `(x, y)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Bilinear resize to `size x size`, renormalized.
    pub fn upsample(&self, size: usize) -> CamMap {
        let t = Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&v| v as f32).collect(),
        );
        let up = resize_bilinear(&t, size, size);
        normalized(size, size, up.data().iter().map(|&v| f64::from(v)).collect())
    }
}

/// Min-max normalization; a constant map becomes all zeros.
fn normalized(width: usize, height: usize, raw: Vec<f64>) -> CamMap {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = if span > 0.0 && span.is_finite() {
        raw.iter().map(|v| (v - lo) / span).collect()
    } else {
        vec![0.0; raw.len()]
    };
    CamMap { width, height, data }
}

/// `sum_c weights[c] * features[c]` over maps `features` `[c, h, w]`
/// (one sample), min-max normalized.
pub fn cam_from_features(features: &[f32], channels: usize, height: usize, width: usize, weights: &[f32]) -> CamMap {
    assert_eq!(features.len(), channels * height * width);
    assert!(weights.len() >= channels);
    let plane = height * width;
    let mut raw = vec![0.0f64; plane];
    for c in 0..channels {
        let w = f64::from(weights[c]);
        for (r, &v) in raw.iter_mut().zip(&features[c * plane..(c + 1) * plane]) {
            *r += w * f64::from(v);
        }
    }
    normalized(width, height, raw)
}

/// CAM of sample `index` of `inputs` for `class_index`: grades `0..5`,
/// then laser marks (5) and membranes (6) when the model has auxiliary
/// heads. The map has the resolution of the final encoder features.
pub fn class_activation_map(
    model: &GradeModel,
    inputs: &FusedInputs,
    index: usize,
    class_index: usize,
) -> Result<CamMap, GradeError> {
    let (conv, row) = if class_index < NUM_GRADES {
        (&model.head, class_index)
    } else if class_index < NUM_GRADES + 2 && model.aux.is_some() {
        (model.aux.as_ref().expect("checked"), class_index - NUM_GRADES)
    } else {
        return Err(GradeError::Unsupported(format!(
            "class index {class_index} has no pooled head"
        )));
    };
    if index >= inputs.len() {
        return Err(GradeError::ShapeMismatch(format!("sample {index} of {}", inputs.len())));
    }
    let sample = inputs.gather(&[index]);
    let mut g = Graph::new();
    g.freeze(model.store.id());
    let x = g.input(sample.images);
    let sf = sample.seg_features.map(|t| g.input(t));
    let out = model.forward(&mut g, x, sf, Mode::Eval)?;
    let f = g.value(out.features);
    let [_, c, h, w] = f.dims();
    let weights = model.store.value(conv.weight);
    let pooled = conv.in_c;
    let row_w = &weights.data()[row * pooled..(row + 1) * pooled];
    Ok(cam_from_features(f.sample(0), c, h, w, row_w))
}
