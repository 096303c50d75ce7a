use std::collections::HashSet;

use genloop::world::*;
use proptest::prelude::*;

const POLICIES: [RationalePolicy; 3] = [RationalePolicy::None, RationalePolicy::Trace, RationalePolicy::TraceWithSelfCheck];

#[test]
fn modality_frequencies_match_mixture() {
    let mix = ModalityMixture::default();
    let n = 10_000;
    let mut counts = [0usize; 8];
    for seed in 0..n {
        counts[sample_image(seed, &mix).unwrap().modality as usize] += 1;
    }
    for m in Modality::ALL {
        let p = mix.weight(m);
        let freq = counts[m as usize] as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * sigma, "{}: {freq} vs {p}", m.word());
        assert!((freq - p).abs() <= 0.02);
    }
}

#[test]
fn every_template_renders_and_round_trips() {
    let v = vocab();
    for seed in 0..200 {
        let image = sample_image(seed, &ModalityMixture::uniform()).unwrap();
        for task in Task::ALL {
            for template in 0..TEMPLATES_PER_TASK {
                let q = render_question(task, template, &image).unwrap();
                assert_eq!(v.tokenize(&v.detokenize(&q.tokens)).unwrap(), q.tokens);
                for policy in POLICIES {
                    let a = oracle_answer(&image, &q, policy);
                    assert_eq!(v.tokenize(&v.detokenize(&a)).unwrap(), a);
                }
            }
        }
    }
}

#[test]
fn every_vocabulary_word_round_trips() {
    let v = vocab();
    for i in 0..v.len() {
        let t = Token(i as u16);
        assert_eq!(v.tokenize(v.word(t)).unwrap(), vec![t]);
    }
}

#[test]
fn oracle_is_self_consistent() {
    for seed in 0..1000 {
        let image = sample_image(seed, &ModalityMixture::default()).unwrap();
        let again = render_image(seed, image.modality);
        assert_eq!(image, again);
        for task in Task::ALL {
            let q = render_question(task, (seed % TEMPLATES_PER_TASK as u64) as u8, &image).unwrap();
            assert_eq!(oracle_value(&image, &q), oracle_value(&again, &q));
            assert_eq!(oracle_answer(&image, &q, RationalePolicy::Trace), oracle_answer(&again, &q, RationalePolicy::Trace));
        }
    }
}

#[test]
fn split_of_100_20_20_has_140_unique_pairs() {
    let split = make_split(&SplitConfig { train: 100, val: 20, test: 20, ..SplitConfig::default() }, 3).unwrap();
    let keys: HashSet<PairKey> = split.train.iter().chain(&split.val).chain(&split.test).map(VqaTriplet::pair_key).collect();
    assert_eq!(keys.len(), 140);
}

proptest! {
    #[test]
    fn images_are_well_formed(seed in any::<u64>()) {
        let image = sample_image(seed, &ModalityMixture::default()).unwrap();
        prop_assert!((1..=6).contains(&image.findings.len()));
        let cells: HashSet<(u8, u8)> = image.findings.iter().map(|f| (f.row, f.col)).collect();
        prop_assert_eq!(cells.len(), image.findings.len());
        prop_assert!(image.findings.iter().all(|f| (f.row as usize) < GRID && (f.col as usize) < GRID));
        prop_assert_eq!(sample_image(seed, &ModalityMixture::default()).unwrap(), image);
    }

    #[test]
    fn oracle_answers_have_one_in_domain_span(seed in any::<u64>(), t in 0usize..4, template in 0u8..2, p in 0usize..3) {
        let image = sample_image(seed, &ModalityMixture::default()).unwrap();
        let task = Task::ALL[t];
        let template = template % TEMPLATES_PER_TASK;
        let q = render_question(task, template, &image).unwrap();
        let a = oracle_answer(&image, &q, POLICIES[p]);
        let value = extract(&a);
        prop_assert_eq!(value, Some(oracle_value(&image, &q)));
        prop_assert!(task.in_domain(value.unwrap()));
        prop_assert_eq!(extract(&a), value);
    }
}
