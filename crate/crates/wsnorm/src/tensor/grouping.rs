//! Equal-size group views used by reductions and broadcasts.
//!
//! Every normalization in this crate is "standardize over some partition of
//! the elements": weight rows, channels across the batch, or channel groups
//! within a sample. All three partitions slice a row-major buffer into
//! equal-size groups, so one abstraction serves the tape's `group_mean` and
//! `group_broadcast` ops. Accumulation visits elements in ascending flat
//! index order within each group, keeping reductions deterministic.

/// A partition of a flat row-major buffer into equal-size groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// Rows of a 2-D `[rows, cols]` tensor; group `r` covers row `r`.
    /// Also used for 4-D weights `[o, i, kh, kw]` read as `o` rows of
    /// length `i * kh * kw`.
    Rows { rows: usize, cols: usize },
    /// Channels of a 4-D `[batch, channels, spatial…]` tensor; group `c`
    /// gathers channel `c` across the whole batch (the batch-norm partition).
    Channels {
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    /// Per-sample channel groups of a 4-D tensor (the group-norm partition);
    /// group id is `b * groups + g`.
    ChannelGroups {
        batch: usize,
        groups: usize,
        channels_per_group: usize,
        spatial: usize,
    },
}

impl Grouping {
    pub fn group_count(&self) -> usize {
        match *self {
            Grouping::Rows { rows, .. } => rows,
            Grouping::Channels { channels, .. } => channels,
            Grouping::ChannelGroups { batch, groups, .. } => batch * groups,
        }
    }

    pub fn group_size(&self) -> usize {
        match *self {
            Grouping::Rows { cols, .. } => cols,
            Grouping::Channels { batch, spatial, .. } => batch * spatial,
            Grouping::ChannelGroups {
                channels_per_group,
                spatial,
                ..
            } => channels_per_group * spatial,
        }
    }

    pub fn total_len(&self) -> usize {
        self.group_count() * self.group_size()
    }

    /// Adds each group's elements into `out[group]`. `out` is not cleared.
    pub fn sum_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.total_len());
        debug_assert_eq!(out.len(), self.group_count());
        match *self {
            Grouping::Rows { rows, cols } => {
                for r in 0..rows {
                    let mut acc = 0.0;
                    for v in &x[r * cols..(r + 1) * cols] {
                        acc += v;
                    }
                    out[r] += acc;
                }
            }
            Grouping::Channels {
                batch,
                channels,
                spatial,
            } => {
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * spatial;
                        let mut acc = 0.0;
                        for v in &x[base..base + spatial] {
                            acc += v;
                        }
                        out[c] += acc;
                    }
                }
            }
            Grouping::ChannelGroups {
                batch,
                groups,
                channels_per_group,
                spatial,
            } => {
                let span = channels_per_group * spatial;
                for b in 0..batch {
                    for g in 0..groups {
                        let base = (b * groups + g) * span;
                        let mut acc = 0.0;
                        for v in &x[base..base + span] {
                            acc += v;
                        }
                        out[b * groups + g] += acc;
                    }
                }
            }
        }
    }

    /// Writes `vals[group]` to every element of that group.
    pub fn broadcast_into(&self, vals: &[f64], out: &mut [f64]) {
        debug_assert_eq!(vals.len(), self.group_count());
        debug_assert_eq!(out.len(), self.total_len());
        match *self {
            Grouping::Rows { rows, cols } => {
                for r in 0..rows {
                    out[r * cols..(r + 1) * cols].fill(vals[r]);
                }
            }
            Grouping::Channels {
                batch,
                channels,
                spatial,
            } => {
                for b in 0..batch {
                    for c in 0..channels {
                        let base = (b * channels + c) * spatial;
                        out[base..base + spatial].fill(vals[c]);
                    }
                }
            }
            Grouping::ChannelGroups {
                batch,
                groups,
                channels_per_group,
                spatial,
            } => {
                let span = channels_per_group * spatial;
                for b in 0..batch {
                    for g in 0..groups {
                        let base = (b * groups + g) * span;
                        out[base..base + span].fill(vals[b * groups + g]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_and_broadcast() {
        let g = Grouping::Rows { rows: 2, cols: 3 };
        let x = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        let mut sums = [0.0; 2];
        g.sum_into(&x, &mut sums);
        assert_eq!(sums, [6.0, 60.0]);

        let mut out = [0.0; 6];
        g.broadcast_into(&[1.0, 2.0], &mut out);
        assert_eq!(out, [1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn channel_groups_cross_batch_for_channels_variant() {
        // batch=2, channels=2, spatial=2; channel 0 holds 1,2 (b0) and 5,6 (b1)
        let g = Grouping::Channels {
            batch: 2,
            channels: 2,
            spatial: 2,
        };
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let mut sums = [0.0; 2];
        g.sum_into(&x, &mut sums);
        assert_eq!(sums, [1.0 + 2.0 + 5.0 + 6.0, 3.0 + 4.0 + 7.0 + 8.0]);
    }

    #[test]
    fn sample_groups_stay_within_batch_entry() {
        // batch=2, groups=2, cpg=1, spatial=2: group (b,g) covers its own span
        let g = Grouping::ChannelGroups {
            batch: 2,
            groups: 2,
            channels_per_group: 1,
            spatial: 2,
        };
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let mut sums = [0.0; 4];
        g.sum_into(&x, &mut sums);
        assert_eq!(sums, [3.0, 7.0, 11.0, 15.0]);
    }
}
