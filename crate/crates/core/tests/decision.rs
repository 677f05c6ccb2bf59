mod common;

use bleedscope::category::{Category, FrameLabel};
use bleedscope::model::{classify_frame, PredictionSet};
use bleedscope::Tensor;
use common::criteria::{decision_rule, half_probability_row};

#[test]
fn exhaustive_decision_rule() {
    decision_rule().unwrap();
}

#[test]
fn just_above_one_half_is_bleeding() {
    let mut row = half_probability_row(Category::Bleed);
    row[0] += 1e-9;
    let preds = PredictionSet {
        logits: Tensor::matrix(&[row.to_vec()]).unwrap(),
        boxes: Tensor::matrix(&[vec![0.5, 0.5, 0.2, 0.2]]).unwrap(),
    };
    let d = classify_frame(&preds, 0.5);
    assert_eq!(d.frame_label, FrameLabel::Bleeding);
    assert_eq!(d.regions.len(), 1);
    assert_eq!(d.regions[0].query, 0);
}

#[test]
fn non_bleed_regions_alone_do_not_flag_the_frame() {
    let preds = PredictionSet {
        logits: Tensor::matrix(&[vec![-5.0, 5.0, 0.0], vec![0.0, 0.0, 5.0]]).unwrap(),
        boxes: Tensor::matrix(&[vec![0.5, 0.5, 0.2, 0.2], vec![0.3, 0.3, 0.1, 0.1]]).unwrap(),
    };
    let d = classify_frame(&preds, 0.5);
    assert_eq!(d.frame_label, FrameLabel::NonBleeding);
    assert_eq!(d.regions.len(), 1);
    assert_eq!(d.regions[0].category, Category::NonBleed);
}
