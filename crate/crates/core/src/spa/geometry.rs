//! Sample-axis and token-axis geometry of the half-patch shift.

/// Rotates a sample axis left by `shift` positions: output `i` is input `(i + shift) mod n`.
pub fn rotate_left<T: Copy>(values: &[T], shift: usize) -> Vec<T> {
    let n = values.len();
    (0..n).map(|i| values[(i + shift) % n]).collect()
}

/// Sample indices covered by shifted patch `j` when an axis of `len` samples
/// is partitioned into `patch`-sized patches offset by half a patch.
pub fn shifted_patch(len: usize, patch: usize, j: usize) -> Vec<usize> {
    let start = j * patch + patch / 2;
    (start..start + patch).map(|i| i % len).collect()
}

/// Index of the unshifted patch containing `sample`.
pub fn patch_of(sample: usize, patch: usize) -> usize {
    sample / patch
}

/// Index of the shifted patch containing `sample`.
pub fn shifted_patch_of(sample: usize, len: usize, patch: usize) -> usize {
    ((sample + len - patch / 2) % len) / patch
}

/// Token rotation realizing a half-patch shift at token granularity:
/// half a token rounded up, i.e. one token whenever a segment has more than one.
pub fn token_shift(segment_len: usize) -> usize {
    if segment_len > 1 {
        1
    } else {
        0
    }
}

/// How a token sequence is rotated by the shifted blocks: leading `pinned`
/// tokens stay put and each following segment rotates independently.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShiftLayout {
    pub pinned: usize,
    pub segments: Vec<usize>,
}

impl ShiftLayout {
    pub fn single(count: usize) -> Self {
        Self {
            pinned: 0,
            segments: vec![count],
        }
    }

    pub fn tokens_per_group(&self) -> usize {
        self.pinned + self.segments.iter().sum::<usize>()
    }

    /// Row gather for `groups` stacked copies: shifted row `i` reads row `perm[i]`.
    pub fn permutation(&self, groups: usize) -> Vec<usize> {
        let per = self.tokens_per_group();
        let mut perm = Vec::with_capacity(per * groups);
        for g in 0..groups {
            let base = g * per;
            perm.extend(base..base + self.pinned);
            let mut off = base + self.pinned;
            for &len in &self.segments {
                let s = token_shift(len);
                perm.extend((0..len).map(|i| off + (i + s) % len));
                off += len;
            }
        }
        perm
    }

    pub fn inverse_permutation(&self, groups: usize) -> Vec<usize> {
        let perm = self.permutation(groups);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        inv
    }

    /// Rows of the shifted sequence holding a wrapped-around token.
    pub fn wrap_rows(&self, groups: usize) -> Vec<usize> {
        let per = self.tokens_per_group();
        let mut rows = Vec::new();
        for g in 0..groups {
            let mut off = g * per + self.pinned;
            for &len in &self.segments {
                rows.push(off + len - 1);
                off += len;
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_rotation() {
        let axis: Vec<usize> = (0..8).collect();
        assert_eq!(rotate_left(&axis, 2), vec![2, 3, 4, 5, 6, 7, 0, 1]);
        assert_eq!(shifted_patch(8, 4, 0), vec![2, 3, 4, 5]);
        assert_eq!(shifted_patch(8, 4, 1), vec![6, 7, 0, 1]);
    }

    #[test]
    fn stage0_first_shifted_patch() {
        assert_eq!(shifted_patch(512, 32, 0), (16..48).collect::<Vec<_>>());
    }

    #[test]
    fn layout_permutation() {
        let l = ShiftLayout {
            pinned: 1,
            segments: vec![3, 2],
        };
        assert_eq!(l.permutation(1), vec![0, 2, 3, 1, 5, 4]);
        assert_eq!(l.wrap_rows(2), vec![3, 5, 9, 11]);
        let single = ShiftLayout::single(1);
        assert_eq!(single.permutation(3), vec![0, 1, 2]);
    }
}
