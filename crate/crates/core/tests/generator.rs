use genloop::generator::*;
use genloop::world::vocab::{END_THINK, THINK};
use genloop::world::*;
use proptest::prelude::*;

fn meta_state() -> GenState {
    GenState::only_strategy(StrategyKind::MetaCognitive, &ModalityMixture::default()).unwrap()
}

#[test]
fn meta_cognitive_agreement_and_task_coverage() {
    let c = generate_candidates(&meta_state(), &GenConfig::default(), 4000, 11).unwrap();
    assert!(c.iter().all(|t| t.strategy == Some(StrategyKind::MetaCognitive)));
    let agree = c.iter().filter(|t| extract(&t.answer) == Some(oracle_value(&t.image, &t.question))).count() as f64 / 4000.0;
    assert!((agree - 0.9).abs() <= 0.02, "agreement {agree}");
    for task in Task::ALL {
        let share = c.iter().filter(|t| t.question.task == task).count() as f64 / 4000.0;
        assert!((share - 0.25).abs() <= 0.01, "{}: {share}", task.name());
    }
}

#[test]
fn wrong_answers_stay_in_domain() {
    let cfg = GenConfig { p: [0.0; 3], ..GenConfig::default() };
    let st = GenState::new(&ModalityMixture::default()).unwrap();
    for t in generate_candidates(&st, &cfg, 500, 2).unwrap() {
        let v = extract(&t.answer).unwrap();
        assert!(t.question.task.in_domain(v));
        assert_ne!(v, oracle_value(&t.image, &t.question));
    }
}

#[test]
fn rationale_policies() {
    let image = (0..).map(|s| render_image(s, Modality::CT)).find(|i| i.findings.len() == 2).unwrap();
    let q = render_question(Task::Counting, 0, &image).unwrap();
    assert!(render_rationale(&image, &q, RationalePolicy::None).is_empty());
    let trace = render_rationale(&image, &q, RationalePolicy::Trace);
    assert_eq!(trace.first(), Some(&THINK));
    assert_eq!(trace.last(), Some(&END_THINK));
    let listed: Vec<Token> = image.findings.iter().map(|f| tok(f.shape.word())).collect();
    assert_eq!(&trace[1..trace.len() - 1], listed.as_slice());
    let checked = render_rationale(&image, &q, RationalePolicy::TraceWithSelfCheck);
    assert_eq!(checked[checked.len() - 2], Task::Counting.type_token());
}

#[test]
fn generator_strategies_are_ordered() {
    let p = GenConfig::default().p;
    assert!(p[0] < p[1] && p[1] < p[2]);
    assert_eq!(p, [0.6, 0.75, 0.9]);
}

fn one_cell(kind: StrategyKind, task: Task, modality: Modality) -> VqaTriplet {
    let cfg = GenConfig::default();
    let only = GenState::only_strategy(kind, &ModalityMixture::only(modality)).unwrap();
    generate_candidates(&only, &cfg, 200, 5)
        .unwrap()
        .into_iter()
        .find(|t| t.question.task == task && t.image.modality == modality)
        .unwrap()
}

#[test]
fn reweighting_ratio_is_exp_eta_delta() {
    let st = GenState::new(&ModalityMixture::uniform()).unwrap();
    let a = one_cell(StrategyKind::Direct, Task::Counting, Modality::CT);
    let b = one_cell(StrategyKind::StepByStep, Task::Location, Modality::MRI);
    let cell = |t: &VqaTriplet| (t.strategy.unwrap(), t.question.global_template(), t.image.modality);
    let (ca, cb) = (cell(&a), cell(&b));
    let before = st.weight(ca.0, ca.1, ca.2) / st.weight(cb.0, cb.1, cb.2);
    let next = self_update(&st, &[(a.clone(), 10.0), (b.clone(), 0.0)], 0.1).unwrap();
    let after = next.weight(ca.0, ca.1, ca.2) / next.weight(cb.0, cb.1, cb.2);
    assert!((after / before - 1f64.exp()).abs() < 1e-12);
    assert!(next.weight(ca.0, ca.1, ca.2) > st.weight(ca.0, ca.1, ca.2));
    assert_eq!(self_update(&st, &[], 0.1).unwrap(), st);
}

fn simplex(s: &GenState) -> bool {
    (s.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9 && s.weights.iter().all(|&w| w > 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn self_update_preserves_the_simplex(seed in any::<u64>(), rewards in proptest::collection::vec(-6.0f64..=10.0, 1..40)) {
        let st = GenState::new(&ModalityMixture::default()).unwrap();
        let c = generate_candidates(&st, &GenConfig::default(), rewards.len(), seed).unwrap();
        let acc: Vec<(VqaTriplet, f64)> = c.into_iter().zip(rewards).collect();
        let next = self_update(&st, &acc, 0.1).unwrap();
        prop_assert!(simplex(&next));
        prop_assert_eq!(next.updates, 1);
    }

    #[test]
    fn favoured_cell_converges_monotonically(seed in any::<u64>()) {
        let mut st = GenState::new(&ModalityMixture::default()).unwrap();
        let t = generate_candidates(&st, &GenConfig::default(), 1, seed).unwrap().remove(0);
        let (k, g, m) = (t.strategy.unwrap(), t.question.global_template(), t.image.modality);
        let mut last = st.weight(k, g, m);
        for _ in 0..100 {
            st = self_update(&st, &[(t.clone(), 10.0)], 0.1).unwrap();
            let w = st.weight(k, g, m);
            prop_assert!(w >= last);
            prop_assert!(simplex(&st));
            last = w;
        }
        prop_assert!(last > 0.999, "weight {}", last);
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), n in 1usize..50) {
        let st = GenState::new(&ModalityMixture::default()).unwrap();
        let cfg = GenConfig::default();
        prop_assert_eq!(generate_candidates(&st, &cfg, n, seed).unwrap(), generate_candidates(&st, &cfg, n, seed).unwrap());
    }
}
