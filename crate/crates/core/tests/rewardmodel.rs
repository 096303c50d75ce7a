use std::sync::OnceLock;

use genloop::generator::{generate_candidates, GenConfig, GenState};
use genloop::gradecorpus::{build_graded_dataset, GradeConfig, GradedExample};
use genloop::rewardmodel::*;
use genloop::seeding::rng_for;
use genloop::world::*;
use neuralcore::{finite_diff_check, Graph, Tensor};
use rand::Rng;

fn split(seed: u64) -> Split {
    make_split(&SplitConfig { train: 500, val: 400, test: 1, ..SplitConfig::default() }, seed).unwrap()
}

fn graded(sources: &[VqaTriplet], per: usize, seed: u64) -> Vec<GradedExample> {
    build_graded_dataset(sources, [per; 4], seed, &GradeConfig::default()).unwrap()
}

/// Reward model trained on 4 x 400 graded examples, plus a held-out graded set.
fn trained() -> &'static (RewardNet, Vec<GradedExample>, Vec<f64>) {
    static CELL: OnceLock<(RewardNet, Vec<GradedExample>, Vec<f64>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let s = split(21);
        let mut net = RewardNet::new(64, 1);
        let trace = train_rm(&mut net, &graded(&s.train, 400, 2), &RmTrainConfig { seed: 3, ..RmTrainConfig::default() }).unwrap();
        (net, graded(&s.val, 100, 4), trace)
    })
}

fn grade_means(net: &RewardNet, set: &[GradedExample]) -> [f64; 4] {
    let scores = net.score_all(&set.iter().map(|e| e.triplet.clone()).collect::<Vec<_>>()).unwrap();
    let mut sum = [0.0; 4];
    let mut n = [0usize; 4];
    for (e, s) in set.iter().zip(scores) {
        sum[e.grade as usize - 1] += s;
        n[e.grade as usize - 1] += 1;
    }
    [0, 1, 2, 3].map(|g| sum[g] / n[g] as f64)
}

fn ordered_with_gap(m: [f64; 4], gap: f64) -> bool {
    m.windows(2).all(|w| w[0] - w[1] >= gap)
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let s = split(5);
    let items = graded(&s.train, 2, 6);
    let feats: Vec<f64> = items.iter().flat_map(|e| featurize(&e.triplet).unwrap()).map(f64::from).collect();
    let targets: Vec<f64> = items.iter().map(|e| e.target_score).collect();
    for seed in 0..3 {
        let net = RewardNet::new(3, seed);
        let params = net.params.cast::<f64>();
        let report = finite_diff_check(
            &params,
            |p, g: &mut Graph<f64>| {
                let x = Tensor::new(vec![items.len(), feature_dim()], feats.clone()).unwrap();
                rm_loss(g, p, &net.spec, x, &targets).unwrap()
            },
            1e-3,
        );
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

fn random_triplet(rng: &mut impl Rng, pool: &[VqaTriplet]) -> VqaTriplet {
    let mut t = pool[rng.gen_range(0..pool.len())].clone();
    let len = rng.gen_range(0..16);
    t.answer = (0..len).map(|_| Token(rng.gen_range(0..vocab().len()) as u16)).collect();
    t
}

#[test]
fn scores_stay_inside_the_open_range() {
    let pool = generate_candidates(&GenState::new(&ModalityMixture::default()).unwrap(), &GenConfig::default(), 500, 7).unwrap();
    let mut rng = rng_for(8, &[]);
    let items: Vec<VqaTriplet> = (0..10_000).map(|i| if i % 2 == 0 { random_triplet(&mut rng, &pool) } else { pool[i % 500].clone() }).collect();
    let mut big = RewardNet::new(16, 9);
    for i in 0..big.params.len() {
        big.params.value_mut(i).data_mut().iter_mut().for_each(|w| *w *= 50.0);
    }
    for net in [&trained().0, &RewardNet::new(16, 10), &big] {
        for s in net.score_all(&items).unwrap() {
            assert!(s > -6.0 && s < 10.0, "score {s}");
        }
    }
}

#[test]
fn scoring_is_deterministic() {
    let (net, held, _) = trained();
    let items: Vec<VqaTriplet> = held.iter().take(50).map(|e| e.triplet.clone()).collect();
    assert_eq!(net.score_all(&items).unwrap(), net.score_all(&items).unwrap());
    for t in &items {
        assert_eq!(net.score(t).unwrap(), net.score(t).unwrap());
    }
}

#[test]
fn trained_model_orders_held_out_grades() {
    let (net, held, _) = trained();
    let m = grade_means(net, held);
    assert!(ordered_with_gap(m, 1.0), "{m:?}");
}

#[test]
fn small_balanced_corpus_trains_below_mse_four() {
    let s = split(13);
    let corpus = graded(&s.train, 100, 14);
    let mut net = RewardNet::new(64, 15);
    let trace = train_rm(&mut net, &corpus, &RmTrainConfig { epochs: 200, seed: 16, ..RmTrainConfig::default() }).unwrap();
    assert!(*trace.last().unwrap() < 4.0, "final mse {}", trace.last().unwrap());
}

fn prefs(n: usize, seed: u64) -> Vec<PreferenceRecord> {
    let state = GenState::new(&ModalityMixture::default()).unwrap();
    generate_candidates(&state, &GenConfig::default(), n, seed)
        .unwrap()
        .into_iter()
        .map(|triplet| {
            let target = derive_pref_target(&triplet);
            PreferenceRecord { triplet, target, iteration: 1 }
        })
        .collect()
}

#[test]
fn continual_update_keeps_grade_order_and_fits_new_preferences() {
    let (net, held, _) = trained();
    let s = split(21);
    let replay = graded(&s.train, 400, 2);
    let (new, holdout) = (prefs(1000, 30), prefs(500, 31));
    let cfg = RmTrainConfig { epochs: 20, seed: 32, ..RmTrainConfig::default() };
    let next = continual_update(net, &new, &replay, &cfg).unwrap();
    let m = grade_means(&next, held);
    assert!(m.windows(2).all(|w| w[0] > w[1]), "{m:?}");
    let (before, after) = (net.mse(&holdout).unwrap(), next.mse(&holdout).unwrap());
    assert!(after <= before, "held-out preference mse {before} -> {after}");
}

#[test]
fn empty_replay_is_a_config_error() {
    let r = continual_update(&RewardNet::new(4, 0), &prefs(3, 1), &[], &RmTrainConfig::default());
    assert!(matches!(r, Err(genloop::GenError::Config(_))));
}
