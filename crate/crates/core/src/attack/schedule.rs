use super::{PositionPolicy, Schedule};
use crate::error::{invalid_state, Result};
use crate::linalg::SeededRng;

/// Whether injection fires at 1-based step `t`.
pub fn should_inject(schedule: &Schedule, t: usize) -> bool {
    match *schedule {
        Schedule::EveryStep => true,
        Schedule::EveryN { n, offset } => t % n == offset % n,
        Schedule::OneShot(t0) => t == t0,
        Schedule::Bernoulli { p, seed } => SeededRng::stream(seed, &[0x7363_6864, t as u64]).coin(p),
    }
}

/// Target positions (ascending) among `cache_len` cached entries.
///
/// `prev_attention` is the previous step's head-averaged attention at the
/// lowest attacked layer; `TopAttention` without it falls back to `LastM`.
pub fn select_positions(
    policy: &PositionPolicy,
    cache_len: usize,
    t: usize,
    prev_attention: Option<&[f64]>,
) -> Result<Vec<usize>> {
    if cache_len == 0 {
        return Err(invalid_state!("position selection on an empty cache"));
    }
    let last = |m: usize| (cache_len.saturating_sub(m)..cache_len).collect::<Vec<_>>();
    Ok(match *policy {
        PositionPolicy::LastM(m) => last(m),
        PositionPolicy::RandomK { k, seed } => {
            if k >= cache_len {
                (0..cache_len).collect()
            } else {
                let mut rng = SeededRng::stream(seed, &[0x706f_73, t as u64]);
                let mut idx: Vec<usize> = (0..cache_len).collect();
                for i in 0..k {
                    let j = i + rng.below(cache_len - i);
                    idx.swap(i, j);
                }
                let mut chosen = idx[..k].to_vec();
                chosen.sort_unstable();
                chosen
            }
        }
        PositionPolicy::TopAttention(k) => match prev_attention {
            None => last(k),
            Some(att) => {
                let n = att.len().min(cache_len);
                let mut idx: Vec<usize> = (0..n).collect();
                // stable sort keeps lower positions first among ties
                idx.sort_by(|a, b| att[*b].total_cmp(&att[*a]));
                let mut chosen = idx[..k.min(n)].to_vec();
                chosen.sort_unstable();
                chosen
            }
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_rules() {
        let every5 = Schedule::EveryN { n: 5, offset: 0 };
        assert!(should_inject(&every5, 5) && should_inject(&every5, 10));
        assert!((1..5).all(|t| !should_inject(&every5, t)));
        let shifted = Schedule::EveryN { n: 5, offset: 1 };
        assert!(should_inject(&shifted, 1) && should_inject(&shifted, 6) && !should_inject(&shifted, 5));
        assert!((1..100).all(|t| should_inject(&Schedule::EveryStep, t)));
        assert!((1..100).all(|t| should_inject(&Schedule::Bernoulli { p: 1.0, seed: 3 }, t)));
        assert!((1..100).all(|t| !should_inject(&Schedule::Bernoulli { p: 0.0, seed: 3 }, t)));
        assert!(should_inject(&Schedule::OneShot(7), 7) && !should_inject(&Schedule::OneShot(7), 8));
    }

    #[test]
    fn bernoulli_rate() {
        let s = Schedule::Bernoulli { p: 0.3, seed: 11 };
        let hits = (1..=20_000).filter(|t| should_inject(&s, *t)).count();
        assert!((hits as f64 / 20_000.0 - 0.3).abs() < 0.015);
    }

    #[test]
    fn policies() {
        assert_eq!(select_positions(&PositionPolicy::LastM(3), 10, 11, None).unwrap(), vec![7, 8, 9]);
        assert_eq!(select_positions(&PositionPolicy::LastM(30), 2, 3, None).unwrap(), vec![0, 1]);
        let all = select_positions(&PositionPolicy::RandomK { k: 10, seed: 1 }, 10, 11, None).unwrap();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let some = select_positions(&PositionPolicy::RandomK { k: 3, seed: 1 }, 10, 11, None).unwrap();
        assert_eq!(some.len(), 3);
        assert!(some.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(some, select_positions(&PositionPolicy::RandomK { k: 3, seed: 1 }, 10, 11, None).unwrap());

        let uniform = vec![0.25; 4];
        assert_eq!(select_positions(&PositionPolicy::TopAttention(2), 4, 5, Some(&uniform)).unwrap(), vec![0, 1]);
        let peaked = [0.1, 0.5, 0.1, 0.3];
        assert_eq!(select_positions(&PositionPolicy::TopAttention(2), 4, 5, Some(&peaked)).unwrap(), vec![1, 3]);
        assert_eq!(select_positions(&PositionPolicy::TopAttention(2), 4, 5, None).unwrap(), vec![2, 3]);
        assert!(select_positions(&PositionPolicy::LastM(1), 0, 1, None).is_err());
    }
}
