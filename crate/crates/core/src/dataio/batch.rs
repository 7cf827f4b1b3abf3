use super::corpus::{subsample_labels, Utterance};
use crate::layers::subsampled_len;
use crate::tensor::Tensor;

/// Utterances zero-padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// Each `[n_mels × T_max]`.
    pub features: Vec<Tensor>,
    /// Real input frames per utterance.
    pub valid: Vec<usize>,
    /// Per-utterance validity over the padded input frames.
    pub mask: Vec<Vec<bool>>,
    /// Labels at the subsampled rate, valid frames only.
    pub labels: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn padded_len(&self) -> usize {
        self.features.first().map_or(0, |f| f.dim(1))
    }
}

pub fn pad_batch(utts: &[&Utterance]) -> Batch {
    let t_max = utts.iter().map(|u| u.len()).max().unwrap_or(0);
    let mut b = Batch {
        ids: Vec::with_capacity(utts.len()),
        features: Vec::with_capacity(utts.len()),
        valid: Vec::with_capacity(utts.len()),
        mask: Vec::with_capacity(utts.len()),
        labels: Vec::with_capacity(utts.len()),
    };
    for u in utts {
        let (m, t) = (u.features.dim(0), u.len());
        let mut data = vec![0.0; m * t_max];
        for bin in 0..m {
            data[bin * t_max..bin * t_max + t]
                .copy_from_slice(&u.features.data()[bin * t..(bin + 1) * t]);
        }
        b.ids.push(u.id.clone());
        b.features
            .push(Tensor::new([m, t_max], data).expect("padded shape"));
        b.valid.push(t);
        b.mask.push((0..t_max).map(|i| i < t).collect());
        b.labels
            .push(subsample_labels(&u.labels, subsampled_len(t)));
    }
    b
}

/// Consecutive batches of at most `batch_size` utterances.
pub fn batch_pad(utts: &[Utterance], batch_size: usize) -> Vec<Batch> {
    let refs: Vec<&Utterance> = utts.iter().collect();
    refs.chunks(batch_size.max(1)).map(pad_batch).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(id: &str, t: usize) -> Utterance {
        Utterance::new(id, Tensor::from_fn([80, t], |i| i as f64), vec![1; t]).unwrap()
    }

    #[test]
    fn equal_lengths_need_no_padding() {
        let b = &batch_pad(&[utt("a", 10), utt("b", 10)], 128)[0];
        assert!(b.mask.iter().flatten().all(|&v| v));
        assert_eq!(b.features[0], utt("a", 10).features);
    }

    #[test]
    fn tail_padding_is_masked() {
        let b = &batch_pad(&[utt("a", 10), utt("b", 7)], 128)[0];
        assert_eq!(b.padded_len(), 10);
        assert_eq!(b.mask[1].iter().filter(|&&v| !v).count(), 3);
        assert_eq!(b.valid, vec![10, 7]);
        assert_eq!(b.labels[1].len(), subsampled_len(7));
        let f = &b.features[1];
        assert!((0..80).all(|m| f.data()[m * 10 + 7..m * 10 + 10].iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn chunks_by_batch_size() {
        let utts: Vec<Utterance> = (0..5).map(|i| utt(&format!("u{i}"), 8 + i)).collect();
        let batches = batch_pad(&utts, 2);
        assert_eq!(
            batches.iter().map(Batch::len).collect::<Vec<_>>(),
            vec![2, 2, 1]
        );
    }
}
