use kvlab::attack::{
    optimize_perturbation, AdvLoss, CacheObjective, GradientMode, Objective, OptimizationTarget, OptimizerConfig,
    UpdateRule,
};
use kvlab::cache::KVCache;
use kvlab::linalg::{norm2, SeededRng};
use kvlab::model::{forward_step, init_weights, ModelConfig, Token, Weights};

fn setup(seed: u64, len: usize) -> (Weights, KVCache, SeededRng) {
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, vocab: 32, max_seq: 32, seed };
    let w = init_weights(&cfg).unwrap();
    let mut rng = SeededRng::stream(seed, &[1]);
    let mut cache = KVCache::for_model(&cfg);
    for _ in 0..len {
        forward_step(&w, &mut cache, rng.below(32) as Token).unwrap();
    }
    (w, cache, rng)
}

fn central_difference(obj: &dyn Objective, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += h;
            down[i] -= h;
            (obj.value(&up).unwrap() - obj.value(&down).unwrap()) / (2.0 * h)
        })
        .collect()
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    for trial in 0..20u64 {
        let (w, cache, mut rng) = setup(trial, 5);
        let pos = rng.below(cache.len());
        let heads: Vec<usize> = if trial % 3 == 0 { vec![0, 1] } else { vec![(trial % 2) as usize] };
        let loss = if trial % 2 == 0 { AdvLoss::KlFromClean } else { AdvLoss::TargetTokenLogProb(rng.below(32) as Token) };
        let target = OptimizationTarget { layer: 1, heads: &heads, pos, token: rng.below(32) as Token };
        let obj = CacheObjective::new(&w, &cache, target, loss).unwrap();
        let delta: Vec<f64> = (0..8).map(|_| 0.5 * rng.normal()).collect();
        let analytic = obj.analytic_gradient(&delta).unwrap();
        let fd = central_difference(&obj, &delta, 1e-5);
        let err: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let rel = norm2(&err) / norm2(&fd).max(1e-12);
        assert!(rel <= 1e-4, "trial {trial}: relative error {rel}");
    }
}

#[test]
fn optimized_delta_beats_same_norm_random_search() {
    let trials = 100;
    let mut wins = 0;
    for trial in 0..trials as u64 {
        let (w, cache, mut rng) = setup(1000 + trial, 6);
        let target = OptimizationTarget {
            layer: (trial % 2) as usize,
            heads: &[(trial / 2 % 2) as usize],
            pos: rng.below(cache.len()),
            token: rng.below(32) as Token,
        };
        let goal = rng.below(32) as Token;
        let cfg = OptimizerConfig {
            steps: 10,
            step_size: 0.2,
            epsilon: 1.0,
            loss: AdvLoss::TargetTokenLogProb(goal),
            gradient: GradientMode::FiniteDifference { h: 1e-4 },
            update: UpdateRule::ProjectGradient,
        };
        let obj = CacheObjective::new(&w, &cache, target, cfg.loss).unwrap();
        let delta = optimize_perturbation(&w, &cache, target, &cfg).unwrap();
        assert!(norm2(&delta) <= cfg.epsilon + 1e-12);
        let optimized = obj.value(&delta).unwrap();
        let radius = norm2(&delta);
        let best_random = (0..20)
            .map(|_| {
                let r: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
                let n = norm2(&r);
                obj.value(&r.iter().map(|x| radius * x / n).collect::<Vec<_>>()).unwrap()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        if optimized >= best_random {
            wins += 1;
        }
    }
    assert!(wins >= 90, "optimized won {wins}/{trials}");
}
