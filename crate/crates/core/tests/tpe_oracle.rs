//! TPE against an exhaustively enumerated synthetic objective.

use rand::Rng;
use slice_forecast::learners::Hyperparams;
use slice_forecast::rng::seeded;
use slice_forecast::tuning::{run_study, SearchSpace, StudyConfig};
use slice_forecast::Result;

/// Smooth bowl over normalized grid coordinates plus a fixed pseudo-random
/// ripple, so the optimum is not trivially at a corner.
struct Synthetic {
    sizes: Vec<usize>,
    centre: Vec<f64>,
    weight: Vec<f64>,
    ripple: Vec<f64>,
}

impl Synthetic {
    fn new(space: &SearchSpace, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let sizes: Vec<usize> = space.dims.iter().map(|d| d.values.len()).collect();
        let n: usize = sizes.iter().product();
        Synthetic {
            centre: sizes.iter().map(|_| rng.random::<f64>()).collect(),
            weight: sizes.iter().map(|_| 0.5 + rng.random::<f64>()).collect(),
            ripple: (0..n).map(|_| 0.05 * rng.random::<f64>()).collect(),
            sizes,
        }
    }

    fn flat(&self, choice: &[usize]) -> usize {
        choice.iter().zip(&self.sizes).fold(0, |acc, (&c, &n)| acc * n + c)
    }

    fn value(&self, choice: &[usize]) -> f64 {
        let bowl: f64 = choice
            .iter()
            .zip(&self.sizes)
            .zip(self.centre.iter().zip(&self.weight))
            .map(|((&c, &n), (&m, &w))| {
                let x = c as f64 / (n - 1) as f64;
                w * (x - m) * (x - m)
            })
            .sum();
        bowl + self.ripple[self.flat(choice)]
    }

    fn all_values(&self) -> Vec<f64> {
        let n: usize = self.sizes.iter().product();
        let mut out = Vec::with_capacity(n);
        let mut choice = vec![0usize; self.sizes.len()];
        for _ in 0..n {
            out.push(self.value(&choice));
            for d in (0..choice.len()).rev() {
                choice[d] += 1;
                if choice[d] < self.sizes[d] {
                    break;
                }
                choice[d] = 0;
            }
        }
        out
    }
}

fn random_search(obj: &Synthetic, trials: usize, seed: u64) -> f64 {
    let mut rng = seeded(seed ^ 0x5eed);
    (0..trials)
        .map(|_| {
            let c: Vec<usize> = obj.sizes.iter().map(|&n| rng.random_range(0..n)).collect();
            obj.value(&c)
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn tpe_reaches_top_five_percent_and_beats_random_search() {
    let space = SearchSpace::full();
    let obj = Synthetic::new(&space, 2024);
    let mut grid = obj.all_values();
    assert_eq!(grid.len(), space.grid_size());
    grid.sort_by(f64::total_cmp);
    let cutoff = grid[grid.len() * 5 / 100];

    let objective = |hp: &Hyperparams, _seed: u64| -> Result<f64> {
        let choice = space.locate(hp).expect("hyperparams come from the grid");
        Ok(obj.value(&choice))
    };
    let base = Hyperparams::default();
    let (mut hits, mut tpe_sum, mut rand_sum) = (0, 0.0, 0.0);
    for seed in 0..20u64 {
        let cfg = StudyConfig {
            n_trials: 50,
            seed,
            ..StudyConfig::default()
        };
        let study = run_study(&objective, &space, &base, &cfg).unwrap();
        let best = study.best_trial().objective.unwrap();
        hits += usize::from(best <= cutoff);
        tpe_sum += best;
        rand_sum += random_search(&obj, 50, seed);
    }
    let (tpe_mean, rand_mean) = (tpe_sum / 20.0, rand_sum / 20.0);
    println!("top-5% hits {hits}/20, mean best tpe {tpe_mean:.5} random {rand_mean:.5}, cutoff {cutoff:.5}");
    assert!(hits >= 18, "{hits}/20 studies reached the top 5%");
    assert!(tpe_mean <= rand_mean, "tpe {tpe_mean} vs random {rand_mean}");
}

#[test]
fn tpe_finds_the_single_dimension_optimum() {
    let space = SearchSpace::for_model(slice_forecast::learners::ModelKind::Knn);
    let objective = |hp: &Hyperparams, _seed: u64| -> Result<f64> { Ok((hp.k as f64 - 10.0).abs()) };
    let study = run_study(&objective, &space, &Hyperparams::default(), &StudyConfig {
        n_trials: 20,
        seed: 3,
        ..StudyConfig::default()
    })
    .unwrap();
    assert_eq!(study.best_trial().hyperparams.k, 10);
}
