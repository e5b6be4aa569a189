//! Handcrafted evaluation fixture with hand-computed scores.

use grasp::evalkit::{Prediction, Predictor};
use grasp::geometry::BinaryMask;
use grasp::pgm::GrayImage;
use grasp::synthdata::{SceneInstance, ShapeClass};
use grasp::Result;

/// Returns stored masks, looked up by the instance seed.
pub struct FixedPredictor(pub Vec<(BinaryMask, BinaryMask)>);

impl Predictor for FixedPredictor {
    fn predict(&self, instance: &SceneInstance, _: &BinaryMask) -> Result<Prediction> {
        let (amodal, occluded) = self.0[instance.seed as usize].clone();
        Ok(Prediction {
            amodal,
            occluded,
            passes: 1,
            gate: None,
            attention: None,
        })
    }
}

fn rect(r0: usize, r1: usize, c0: usize, c1: usize) -> BinaryMask {
    BinaryMask::from_fn(8, 8, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
}

/// Three 8×8 instances whose amodal IoUs are 16/16, 4/8 and 4/16, and whose
/// occluded IoUs are 8/8, 2/4 and (third instance fully visible) excluded.
/// The third occluded prediction is nonempty, so including it would score 0.
pub fn three_instances() -> (Vec<SceneInstance>, FixedPredictor) {
    let image = GrayImage::new(8, 8, vec![0; 64]).unwrap();
    let make = |v: BinaryMask, a: BinaryMask, seed| {
        SceneInstance::from_masks(image.clone(), v, a, ShapeClass::Rectangle, seed, 0).unwrap()
    };
    let instances = vec![
        make(rect(0, 2, 0, 4), rect(0, 4, 0, 4), 0),
        make(rect(0, 1, 0, 4), rect(0, 2, 0, 4), 1),
        make(rect(0, 2, 0, 2), rect(0, 2, 0, 2), 2),
    ];
    let predictions = vec![
        (rect(0, 4, 0, 4), rect(2, 4, 0, 4)),
        (rect(0, 1, 0, 4), rect(1, 2, 0, 2)),
        (rect(0, 4, 0, 4), rect(3, 4, 0, 4)),
    ];
    (instances, FixedPredictor(predictions))
}

/// `(1 + 1/2 + 1/4) / 3`.
pub const FIXTURE_FULL_MIOU: f64 = 7.0 / 12.0;
/// `(1 + 1/2) / 2`.
pub const FIXTURE_OCC_MIOU: f64 = 0.75;
