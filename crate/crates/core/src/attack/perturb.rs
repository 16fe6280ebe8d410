use super::{AttackConfig, Family, RotationKind};
use crate::error::{invalid_arg, Result};
use crate::linalg::{gaussian_sample, givens_rotation, norm2, random_plane_rotation, SeededRng};

/// Perturbation of one cached key for the stochastic families.
///
/// Gaussian draws `N(0, σ²I)`; Zeroing returns `−k` with probability `r`
/// (zero otherwise); Rotation returns `R(θ)k − k`. The optimized family is
/// handled by [`super::optimize_perturbation`].
pub fn make_delta(config: &AttackConfig, key: &[f64], rng: &mut SeededRng) -> Result<Vec<f64>> {
    let d = key.len();
    match config.family {
        Family::Gaussian => gaussian_sample(rng, config.sigma, d),
        Family::Zeroing => Ok(if rng.coin(config.r) {
            key.iter().map(|x| -x).collect()
        } else {
            vec![0.0; d]
        }),
        Family::Rotation => {
            let r = match config.rotation {
                RotationKind::Givens => givens_rotation(config.theta, d)?,
                RotationKind::RandomPlane => random_plane_rotation(config.theta, d, rng)?,
            };
            let rk = r.matvec(key);
            Ok(rk.iter().zip(key).map(|(a, b)| a - b).collect())
        }
        Family::Optimized => Err(invalid_arg!("optimized perturbations come from the optimizer")),
    }
}

/// Radial projection onto the ℓ2 ball of radius `epsilon`.
pub fn project_ball(g: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(invalid_arg!("projection radius must be > 0, got {epsilon}"));
    }
    let n = norm2(g);
    if n <= epsilon {
        return Ok(g.to_vec());
    }
    let s = epsilon / n;
    Ok(g.iter().map(|x| x * s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(family: Family) -> AttackConfig {
        AttackConfig { family, ..AttackConfig::default() }
    }

    #[test]
    fn zeroing_and_rotation_contracts() {
        let k = vec![0.3, -1.2, 0.7, 2.0];
        let mut rng = SeededRng::new(1);
        let z = make_delta(&AttackConfig { r: 1.0, ..cfg(Family::Zeroing) }, &k, &mut rng).unwrap();
        assert_eq!(z, vec![-0.3, 1.2, -0.7, -2.0]);
        let z0 = make_delta(&AttackConfig { r: 0.0, ..cfg(Family::Zeroing) }, &k, &mut rng).unwrap();
        assert_eq!(z0, vec![0.0; 4]);

        let r0 = make_delta(&AttackConfig { theta: 0.0, ..cfg(Family::Rotation) }, &k, &mut rng).unwrap();
        assert_eq!(r0, vec![0.0; 4]);
    }

    #[test]
    fn gaussian_distribution() {
        let c = AttackConfig { sigma: 0.5, ..cfg(Family::Gaussian) };
        let mut rng = SeededRng::new(2);
        let draws: Vec<f64> = (0..4000).flat_map(|_| make_delta(&c, &[0.0; 16], &mut rng).unwrap()).collect();
        let var = draws.iter().map(|x| x * x).sum::<f64>() / draws.len() as f64;
        assert!((var.sqrt() - 0.5).abs() < 0.01);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_ball(&[0.1, 0.2], 1.0).unwrap(), vec![0.1, 0.2]);
        let p = project_ball(&[3.0, 4.0], 1.0).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert!(project_ball(&[1.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm(k in prop::collection::vec(-10.0f64..10.0, 16), theta in -360.0f64..360.0, plane: bool, seed: u64) {
            let c = AttackConfig {
                theta,
                rotation: if plane { RotationKind::RandomPlane } else { RotationKind::Givens },
                ..cfg(Family::Rotation)
            };
            let d = make_delta(&c, &k, &mut SeededRng::new(seed)).unwrap();
            let moved: Vec<f64> = k.iter().zip(&d).map(|(a, b)| a + b).collect();
            let (n0, n1) = (norm2(&k), norm2(&moved));
            prop_assert!((n0 - n1).abs() <= 1e-9 * n0.max(1e-300));
        }

        #[test]
        fn projection_bounded(g in prop::collection::vec(-100.0f64..100.0, 1..32), eps in 1e-6f64..10.0) {
            let p = project_ball(&g, eps).unwrap();
            prop_assert!(norm2(&p) <= eps * (1.0 + 1e-12));
        }
    }
}
