use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::category::{Category, FrameLabel};
use crate::data::AnnotationRecord;
use crate::error::DataError;

pub fn one_hot(category: Category, n: usize) -> Result<Vec<f64>, DataError> {
    let index = category.index();
    if index >= n {
        return Err(DataError::OneHotRange { index, n });
    }
    let mut v = vec![0.0; n];
    v[index] = 1.0;
    Ok(v)
}

/// Per label: seeded shuffle, then the first `floor(ratio * count)` indices go
/// to train. Both outputs are sorted.
pub fn stratified_split_indices(
    labels: &[FrameLabel],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::BadRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for label in [FrameLabel::Bleeding, FrameLabel::NonBleeding] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if idx.is_empty() {
            return Err(DataError::EmptyLabel(label.as_str()));
        }
        idx.shuffle(&mut rng);
        let n_train = (ratio * idx.len() as f64).floor() as usize;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn stratified_split(
    records: &[AnnotationRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<AnnotationRecord>, Vec<AnnotationRecord>), DataError> {
    let labels: Vec<FrameLabel> = records.iter().map(|r| r.frame_label).collect();
    let (train, val) = stratified_split_indices(&labels, ratio, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok((pick(&train), pick(&val)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(Category::Bleed, 3).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(one_hot(Category::Background, 3).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(
            one_hot(Category::Background, 2),
            Err(DataError::OneHotRange { index: 2, n: 2 })
        ));
    }

    fn labels(bleeding: usize, clean: usize) -> Vec<FrameLabel> {
        let mut v = vec![FrameLabel::Bleeding; bleeding];
        v.extend(vec![FrameLabel::NonBleeding; clean]);
        v
    }

    #[test]
    fn counts_disjoint_exhaustive() {
        let l = labels(13, 7);
        let (train, val) = stratified_split_indices(&l, 0.8, 3).unwrap();
        let count = |idx: &[usize], lab| idx.iter().filter(|&&i| l[i] == lab).count();
        assert_eq!(count(&train, FrameLabel::Bleeding), 10);
        assert_eq!(count(&train, FrameLabel::NonBleeding), 5);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn seed_controls_split() {
        let l = labels(50, 50);
        let a = stratified_split_indices(&l, 0.8, 1).unwrap();
        assert_eq!(a, stratified_split_indices(&l, 0.8, 1).unwrap());
        assert_ne!(a, stratified_split_indices(&l, 0.8, 2).unwrap());
    }

    #[test]
    fn rejects_empty_label_and_bad_ratio() {
        assert!(matches!(
            stratified_split_indices(&labels(4, 0), 0.8, 0),
            Err(DataError::EmptyLabel("non-bleeding"))
        ));
        assert!(stratified_split_indices(&labels(4, 4), 1.0, 0).is_err());
        assert!(stratified_split_indices(&labels(4, 4), f64::NAN, 0).is_err());
    }
}
