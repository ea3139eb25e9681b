//! Points accounts, threshold-triggered rewards and the points-proportional
//! lottery.
//!
//! Winners keep their points after a lottery, so odds compound over time.
//! A single lottery hands out up to `prizes_per_lottery` prizes through
//! sequential weighted draws without replacement.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::UserId;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RewardError {
    #[error("no account holds any points")]
    NoEligibleAccounts,
    #[error("a lottery needs at least one prize")]
    NoPrizes,
    #[error("account {0} appears more than once")]
    DuplicateAccount(UserId),
    #[error("invalid reward config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointsAccount {
    pub user_id: UserId,
    pub milli_points: u64,
}

impl PointsAccount {
    pub fn new(user_id: impl Into<UserId>, milli_points: u64) -> Self {
        Self {
            user_id: user_id.into(),
            milli_points,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RewardConfig {
    /// Communal-total step, in milli-points, that triggers a lottery.
    pub lottery_threshold: u64,
    /// Communal-total step, in milli-points, that triggers a communal lunch.
    pub communal_threshold: u64,
    pub prizes_per_lottery: u32,
    pub rng_seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lottery_threshold: 10_000_000,
            communal_threshold: 50_000_000,
            prizes_per_lottery: 3,
            rng_seed: 0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if self.lottery_threshold == 0 || self.communal_threshold == 0 {
            return Err(RewardError::InvalidConfig("thresholds must be positive"));
        }
        if self.prizes_per_lottery == 0 {
            return Err(RewardError::NoPrizes);
        }
        Ok(())
    }

    /// Seed of the `ordinal`-th lottery (0-based) under this config.
    pub fn lottery_seed(&self, ordinal: u64) -> u64 {
        splitmix64(self.rng_seed ^ splitmix64(ordinal))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RewardEvent {
    Lottery,
    CommunalLunch,
}

/// Number of multiples of `step` passed when going from `prev` to `new`.
fn crossings(prev: u64, new: u64, step: u64) -> u64 {
    (new / step).saturating_sub(prev / step)
}

/// Events triggered by the communal total moving from `prev_total` to
/// `new_total`: one per threshold multiple crossed, lotteries first.
pub fn check_thresholds(prev_total: u64, new_total: u64, cfg: &RewardConfig) -> Vec<RewardEvent> {
    let lotteries = crossings(prev_total, new_total, cfg.lottery_threshold);
    let lunches = crossings(prev_total, new_total, cfg.communal_threshold);
    core::iter::repeat_n(RewardEvent::Lottery, lotteries as usize)
        .chain(core::iter::repeat_n(RewardEvent::CommunalLunch, lunches as usize))
        .collect()
}

/// Draws up to `prizes` distinct winners with probability proportional to
/// their points. Draws stop early once every account with points has won.
pub fn run_lottery(
    accounts: &[PointsAccount],
    prizes: u32,
    seed: u64,
) -> Result<Vec<UserId>, RewardError> {
    if prizes == 0 {
        return Err(RewardError::NoPrizes);
    }
    for (i, a) in accounts.iter().enumerate() {
        if accounts[..i].iter().any(|b| b.user_id == a.user_id) {
            return Err(RewardError::DuplicateAccount(a.user_id.clone()));
        }
    }
    let mut pool: Vec<&PointsAccount> = accounts.iter().filter(|a| a.milli_points > 0).collect();
    if pool.is_empty() {
        return Err(RewardError::NoEligibleAccounts);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut winners = Vec::with_capacity(prizes as usize);
    while winners.len() < prizes as usize && !pool.is_empty() {
        let total: u128 = pool.iter().map(|a| u128::from(a.milli_points)).sum();
        let mut ticket = rng.gen_range(0..total);
        let pos = pool
            .iter()
            .position(|a| {
                let w = u128::from(a.milli_points);
                if ticket < w {
                    true
                } else {
                    ticket -= w;
                    false
                }
            })
            .expect("ticket is below the pool total");
        winners.push(pool.remove(pos).user_id.clone());
    }
    Ok(winners)
}

/// Single-draw win probability of each account.
pub fn win_probabilities(accounts: &[PointsAccount]) -> Vec<(UserId, f64)> {
    let total: u128 = accounts.iter().map(|a| u128::from(a.milli_points)).sum();
    accounts
        .iter()
        .map(|a| {
            let p = if total == 0 {
                0.0
            } else {
                a.milli_points as f64 / total as f64
            };
            (a.user_id.clone(), p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use RewardEvent::*;

    fn cfg(lottery: u64) -> RewardConfig {
        RewardConfig {
            lottery_threshold: lottery,
            communal_threshold: u64::MAX,
            ..RewardConfig::default()
        }
    }

    #[test]
    fn threshold_examples() {
        let c = cfg(10_000_000);
        assert_eq!(check_thresholds(9_950_000, 10_050_000, &c), vec![Lottery]);
        assert!(check_thresholds(0, 0, &c).is_empty());
        assert_eq!(check_thresholds(9_000_000, 21_000_000, &c), vec![Lottery, Lottery]);
        assert!(check_thresholds(10_000_000, 19_999_999, &c).is_empty());
    }

    #[test]
    fn both_thresholds_fire_independently() {
        let c = RewardConfig {
            lottery_threshold: 10,
            communal_threshold: 25,
            ..RewardConfig::default()
        };
        assert_eq!(
            check_thresholds(5, 31, &c),
            vec![Lottery, Lottery, Lottery, CommunalLunch]
        );
    }

    #[test]
    fn lottery_examples() {
        let one = [PointsAccount::new("a", 5)];
        assert_eq!(run_lottery(&one, 1, 7).unwrap(), vec![UserId::from("a")]);

        let two = [PointsAccount::new("a", 1), PointsAccount::new("b", 1)];
        let mut w = run_lottery(&two, 2, 3).unwrap();
        w.sort();
        assert_eq!(w, vec![UserId::from("a"), UserId::from("b")]);
    }

    #[test]
    fn lottery_errors() {
        let zero = [PointsAccount::new("a", 0), PointsAccount::new("b", 0)];
        assert_eq!(run_lottery(&zero, 1, 0), Err(RewardError::NoEligibleAccounts));
        assert_eq!(run_lottery(&[], 1, 0), Err(RewardError::NoEligibleAccounts));
        let one = [PointsAccount::new("a", 5)];
        assert_eq!(run_lottery(&one, 0, 0), Err(RewardError::NoPrizes));
        let dup = [PointsAccount::new("a", 5), PointsAccount::new("a", 1)];
        assert!(matches!(run_lottery(&dup, 1, 0), Err(RewardError::DuplicateAccount(_))));
    }

    #[test]
    fn zero_point_accounts_never_win() {
        let accts = [
            PointsAccount::new("a", 0),
            PointsAccount::new("b", 10),
            PointsAccount::new("c", 0),
        ];
        for seed in 0..200 {
            assert_eq!(run_lottery(&accts, 3, seed).unwrap(), vec![UserId::from("b")]);
        }
    }

    #[test]
    fn lottery_is_reproducible() {
        let accts: Vec<_> = (0..10)
            .map(|i| PointsAccount::new(alloc::format!("u{i}").as_str(), 100 + i * 37))
            .collect();
        for seed in 0..50 {
            assert_eq!(
                run_lottery(&accts, 4, seed).unwrap(),
                run_lottery(&accts, 4, seed).unwrap()
            );
        }
    }

    #[test]
    fn probabilities_follow_points() {
        let p = win_probabilities(&[PointsAccount::new("a", 300), PointsAccount::new("b", 100)]);
        assert_eq!(p[0].1, 0.75);
        assert_eq!(p[1].1, 0.25);
    }

    #[test]
    fn lottery_seeds_differ_per_ordinal() {
        let c = RewardConfig::default();
        assert_ne!(c.lottery_seed(0), c.lottery_seed(1));
        assert_eq!(c.lottery_seed(5), c.lottery_seed(5));
    }
}
