//! Recall@K, mean rank and median rank over a clip similarity matrix.
//!
//! Serialized key=value reports list fields in this order:
//! `direction, n, r@1, r@5, r@10, r@50, mean_rank, median_rank`.
//! Table rows use [`TABLE_HEADER`].

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aggregation::ClipSimilarityMatrix;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Real};

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    AudioToVisual,
    VisualToAudio,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::AudioToVisual, Direction::VisualToAudio];

    pub fn name(self) -> &'static str {
        match self {
            Direction::AudioToVisual => "a2v",
            Direction::VisualToAudio => "v2a",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How a candidate scoring exactly as high as the true match is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    /// Only strictly greater scores push the true match down.
    #[default]
    FavorQuery,
    /// Equal scores also count against the query.
    AgainstQuery,
}

/// Rank of each query's true match (the diagonal entry), 1-based.
pub fn ranks<T: Real>(c: &ClipSimilarityMatrix<T>, direction: Direction) -> Result<Vec<usize>> {
    ranks_with(&c.values, direction, TieRule::FavorQuery)
}

pub fn ranks_with<T: Real>(c: &Matrix<T>, direction: Direction, ties: TieRule) -> Result<Vec<usize>> {
    let n = c.rows();
    if n != c.cols() {
        return Err(Error::shape("ranks", "square matrix", format!("{}x{}", c.rows(), c.cols())));
    }
    let rank_of = |q: usize| {
        let score = |j: usize| match direction {
            Direction::AudioToVisual => c[(q, j)],
            Direction::VisualToAudio => c[(j, q)],
        };
        let truth = score(q);
        1 + (0..n)
            .filter(|&j| j != q)
            .filter(|&j| match ties {
                TieRule::FavorQuery => score(j) > truth,
                TieRule::AgainstQuery => score(j) >= truth,
            })
            .count()
    };
    Ok((0..n).into_par_iter().map(rank_of).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// `(K, percentage)` for each K in [`RECALL_KS`].
    pub recall_at: Vec<(usize, f64)>,
    pub mean_rank: f64,
    pub median_rank: f64,
    pub n: usize,
}

pub const TABLE_HEADER: &str = "label\tdirection\tn\tr@1\tr@5\tr@10\tr@50\tmean_rank\tmedian_rank";

impl RetrievalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    pub fn to_key_value(&self) -> String {
        let mut s = format!("direction={}\nn={}\n", self.direction, self.n);
        for (k, v) in &self.recall_at {
            s.push_str(&format!("r@{k}={v:.4}\n"));
        }
        s.push_str(&format!("mean_rank={:.4}\nmedian_rank={:.4}\n", self.mean_rank, self.median_rank));
        s
    }

    pub fn table_row(&self, label: &str) -> String {
        let recalls: Vec<String> = self.recall_at.iter().map(|(_, v)| format!("{v:.4}")).collect();
        format!(
            "{label}\t{}\t{}\t{}\t{:.4}\t{:.4}",
            self.direction,
            self.n,
            recalls.join("\t"),
            self.mean_rank,
            self.median_rank
        )
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn report(ranks: &[usize], direction: Direction) -> Result<RetrievalReport> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("report needs at least one rank".into()));
    }
    let n = ranks.len();
    let recall_at = RECALL_KS
        .iter()
        .map(|&k| (k, 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64))
        .collect();
    let mut sorted: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    sorted.sort_by(f64::total_cmp);
    Ok(RetrievalReport {
        direction,
        recall_at,
        mean_rank: sorted.iter().sum::<f64>() / n as f64,
        median_rank: median(&sorted),
        n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomBaseline {
    /// Empirical metrics averaged over trials (audio-to-visual; the other
    /// direction has the same distribution).
    pub report: RetrievalReport,
    pub trials: usize,
    /// Closed-form uniform-rank expectation `(N + 1) / 2`.
    pub expected_mean_rank: f64,
    /// The same expectation reported under a ceiling convention, `N/2 + 1`.
    pub expected_mean_rank_upper: f64,
}

/// Scores i.i.d. uniform matrices with the same rank pipeline.
///
/// Rows are drawn and ranked one at a time so memory stays `O(N)`.
pub fn random_baseline(n: usize, trials: usize, seed: u64) -> Result<RandomBaseline> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("random_baseline needs N >= 2, got {n}")));
    }
    if trials == 0 {
        return Err(Error::InvalidArgument("random_baseline needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut recall_sum = [0.0f64; RECALL_KS.len()];
    let (mut mean_sum, mut median_sum) = (0.0, 0.0);
    let mut row = vec![0.0f64; n];
    for _ in 0..trials {
        let mut ranks = Vec::with_capacity(n);
        for q in 0..n {
            rng.fill(&mut row[..]);
            let truth = row[q];
            ranks.push(1 + row.iter().enumerate().filter(|&(j, &s)| j != q && s > truth).count());
        }
        let r = report(&ranks, Direction::AudioToVisual)?;
        for (acc, (_, v)) in recall_sum.iter_mut().zip(&r.recall_at) {
            *acc += v;
        }
        mean_sum += r.mean_rank;
        median_sum += r.median_rank;
    }
    let t = trials as f64;
    Ok(RandomBaseline {
        report: RetrievalReport {
            direction: Direction::AudioToVisual,
            recall_at: RECALL_KS.iter().zip(recall_sum).map(|(&k, s)| (k, s / t)).collect(),
            mean_rank: mean_sum / t,
            median_rank: median_sum / t,
            n,
        },
        trials,
        expected_mean_rank: (n as f64 + 1.0) / 2.0,
        expected_mean_rank_upper: n as f64 / 2.0 + 1.0,
    })
}

/// `100 · (new − base) / base`.
pub fn relative_improvement(new: f64, base: f64) -> Result<f64> {
    if base == 0.0 || !base.is_finite() || !new.is_finite() {
        return Err(Error::InvalidArgument(format!("relative improvement over base {base} is undefined")));
    }
    Ok(100.0 * (new - base) / base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::ClipKind;
    use proptest::prelude::*;

    fn clip(rows: &[Vec<f64>]) -> ClipSimilarityMatrix<f64> {
        ClipSimilarityMatrix::new(Matrix::from_f64_rows(rows).unwrap(), ClipKind::Dense).unwrap()
    }

    /// Full sort of each row, rank = 1 + position of the first entry equal to
    /// the truth in descending order (ties in the query's favor).
    fn sort_oracle(c: &[Vec<f64>], dir: Direction) -> Vec<usize> {
        let n = c.len();
        (0..n)
            .map(|q| {
                let mut scores: Vec<(f64, usize)> = (0..n)
                    .map(|j| (if dir == Direction::AudioToVisual { c[q][j] } else { c[j][q] }, j))
                    .collect();
                let truth = scores[q].0;
                scores.sort_by(|a, b| b.0.total_cmp(&a.0));
                1 + scores.iter().position(|&(s, _)| s == truth).unwrap()
            })
            .collect()
    }

    #[test]
    fn identity_gives_rank_one() {
        let c = clip(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        for d in Direction::BOTH {
            assert_eq!(ranks(&c, d).unwrap(), vec![1, 1, 1]);
        }
    }

    #[test]
    fn smallest_diagonal_ranks_last() {
        let c = clip(&[vec![0.0, 1.0, 2.0], vec![1.0, -1.0, 2.0], vec![1.0, 2.0, -3.0]]);
        assert_eq!(ranks(&c, Direction::AudioToVisual).unwrap(), vec![3, 3, 3]);
    }

    #[test]
    fn non_square_rejected() {
        let m = Matrix::<f64>::zeros(2, 3);
        assert!(ranks_with(&m, Direction::AudioToVisual, TieRule::FavorQuery).is_err());
    }

    #[test]
    fn tie_rules_differ_only_on_ties() {
        let m = Matrix::<f64>::from_f64_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(ranks_with(&m, Direction::AudioToVisual, TieRule::FavorQuery).unwrap(), vec![1, 1]);
        assert_eq!(ranks_with(&m, Direction::AudioToVisual, TieRule::AgainstQuery).unwrap(), vec![2, 1]);
    }

    #[test]
    fn random_4x4_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.random_range(0..3) as f64).collect()).collect();
            let c = clip(&rows);
            for d in Direction::BOTH {
                assert_eq!(ranks(&c, d).unwrap(), sort_oracle(&rows, d));
            }
        }
    }

    #[test]
    fn report_examples() {
        let r = report(&[1, 1, 1], Direction::AudioToVisual).unwrap();
        assert_eq!(r.recall(1), Some(100.0));
        assert_eq!((r.mean_rank, r.median_rank), (1.0, 1.0));

        let all: Vec<usize> = (1..=100).collect();
        assert_eq!(report(&all, Direction::VisualToAudio).unwrap().mean_rank, 50.5);

        let r = report(&[58, 61, 3, 200], Direction::VisualToAudio).unwrap();
        assert_eq!(r.median_rank, 59.5);
        assert!(report(&[], Direction::AudioToVisual).is_err());
    }

    #[test]
    fn serialization_order_is_fixed() {
        let r = report(&[1, 2, 7, 60], Direction::AudioToVisual).unwrap();
        assert_eq!(
            r.to_key_value(),
            "direction=a2v\nn=4\nr@1=25.0000\nr@5=50.0000\nr@10=75.0000\nr@50=75.0000\nmean_rank=17.5000\nmedian_rank=4.5000\n"
        );
        assert_eq!(r.table_row("dense"), "dense\ta2v\t4\t25.0000\t50.0000\t75.0000\t75.0000\t17.5000\t4.5000");
        assert_eq!(TABLE_HEADER.split('\t').count(), r.table_row("x").split('\t').count());
    }

    #[test]
    fn published_r1_improvement() {
        let rel = relative_improvement(9.90, 6.22).unwrap();
        assert!((rel - 59.2).abs() <= 0.05, "{rel}");
        assert!(relative_improvement(1.0, 0.0).is_err());
    }

    #[test]
    fn random_baseline_small_cases() {
        let two = random_baseline(2, 4000, 1).unwrap();
        assert!((two.report.mean_rank - 1.5).abs() < 0.03);
        let hundred = random_baseline(100, 50, 2).unwrap();
        let rel = (hundred.report.mean_rank - hundred.expected_mean_rank).abs() / hundred.expected_mean_rank;
        assert!(rel < 0.05, "{}", hundred.report.mean_rank);
        assert!(random_baseline(1, 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn monotone_transform_keeps_ranks(vals in proptest::collection::vec(-3.0f64..3.0, 25)) {
            let rows: Vec<Vec<f64>> = vals.chunks(5).map(|c| c.to_vec()).collect();
            let transformed: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| (2.0 * x).exp() + 1.0).collect()).collect();
            for d in Direction::BOTH {
                prop_assert_eq!(ranks(&clip(&rows), d).unwrap(), ranks(&clip(&transformed), d).unwrap());
            }
        }

        #[test]
        fn recall_is_monotone_and_ranks_bounded(rs in proptest::collection::vec(1usize..80, 1..80)) {
            let r = report(&rs, Direction::AudioToVisual).unwrap();
            let v: Vec<f64> = r.recall_at.iter().map(|x| x.1).collect();
            prop_assert!(v.windows(2).all(|w| w[0] <= w[1]));
            let max = *rs.iter().max().unwrap() as f64;
            prop_assert!(r.mean_rank >= 1.0 && r.mean_rank <= max);
            prop_assert!(r.median_rank >= 1.0 && r.median_rank <= max);
        }

        #[test]
        fn dominant_diagonal_gives_ones(vals in proptest::collection::vec(-1.0f64..1.0, 36)) {
            let mut rows: Vec<Vec<f64>> = vals.chunks(6).map(|c| c.to_vec()).collect();
            for (i, r) in rows.iter_mut().enumerate() { r[i] = 5.0; }
            for d in Direction::BOTH {
                prop_assert_eq!(ranks(&clip(&rows), d).unwrap(), vec![1; 6]);
            }
        }
    }
}
