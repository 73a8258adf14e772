use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::Prediction;
use crate::data::{rle_decode, rle_encode, BBox, Rle};
use crate::error::{Error, Result};

/// One entry of a COCO results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultEntry {
    /// A number when the image id parses as one, otherwise the string.
    pub image_id: Value,
    pub category_id: u32,
    pub bbox: [f64; 4],
    pub score: f64,
    pub segmentation: Rle,
}

fn id_value(id: &str) -> Value {
    match id.parse::<u64>() {
        Ok(n) => Value::from(n),
        Err(_) => Value::from(id),
    }
}

fn id_string(v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(Error::parse(format!("image_id must be a string or number, got {other}"))),
    }
}

pub fn results_json(predictions: &[Prediction]) -> Result<Vec<ResultEntry>> {
    predictions
        .iter()
        .map(|p| {
            Ok(ResultEntry {
                image_id: id_value(&p.image_id),
                category_id: p.category,
                bbox: p.bbox.to_array(),
                score: p.score,
                segmentation: rle_encode(&p.mask)?,
            })
        })
        .collect()
}

pub fn predictions_from_results(entries: &[ResultEntry]) -> Result<Vec<Prediction>> {
    entries
        .iter()
        .map(|e| {
            let [x, y, w, h] = e.bbox;
            Ok(Prediction {
                image_id: id_string(&e.image_id)?,
                category: e.category_id,
                score: e.score,
                bbox: BBox::new(x, y, w, h),
                mask: rle_decode(&e.segmentation)?,
            })
        })
        .collect()
}
