use crate::numerics::AttentionMask;

/// Lower-triangular (inclusive): position `i` sees `j <= i`.
pub fn build_left_mask(len: usize) -> AttentionMask {
    AttentionMask::from_fn(len, len, |i, j| j <= i)
}

/// Upper-triangular (inclusive): position `i` sees `j >= i`.
pub fn build_right_mask(len: usize) -> AttentionMask {
    AttentionMask::from_fn(len, len, |i, j| j >= i)
}

/// Frame `i` sees every frame of its own chunk and of all earlier chunks.
pub fn build_chunk_mask(frames: usize, chunk_size: usize) -> AttentionMask {
    assert!(chunk_size >= 1, "chunk size must be positive");
    AttentionMask::from_fn(frames, frames, |i, j| j / chunk_size <= i / chunk_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn left_and_right_examples() {
        assert_eq!(build_left_mask(1).to_rows(), vec![vec![true]]);
        assert_eq!(build_right_mask(1).to_rows(), vec![vec![true]]);
        assert_eq!(
            build_left_mask(3).to_rows(),
            vec![
                vec![true, false, false],
                vec![true, true, false],
                vec![true, true, true]
            ]
        );
        assert_eq!(
            build_right_mask(2).to_rows(),
            vec![vec![true, true], vec![false, true]]
        );
        for l in 1..=16 {
            assert_eq!(build_right_mask(l), build_left_mask(l).transpose());
        }
    }

    #[test]
    fn chunk_examples() {
        assert_eq!(build_chunk_mask(5, 5), AttentionMask::full(5, 5));
        assert_eq!(build_chunk_mask(5, 9), AttentionMask::full(5, 5));
        assert_eq!(
            build_chunk_mask(4, 2).to_rows(),
            vec![
                vec![true, true, false, false],
                vec![true, true, false, false],
                vec![true, true, true, true],
                vec![true, true, true, true]
            ]
        );
        assert_eq!(build_chunk_mask(6, 1), build_left_mask(6));
    }
}
