use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ohd_core::corpus::{build_cooccurrence_table, build_frequency_table, canonical_name, ImageRecord};
use ohd_core::countergen::{
    enumerate_insertion_subsets, enumerate_removal_subsets, generate_sample, select_hallucination_objects,
    CorpusStats, GenerationOptions, NegativeKind,
};
use ohd_core::encoder::{score, BatchInput, DualEncoder, ToyEncoderParams, TrainableEncoder};
use ohd_core::evalhall::{
    benchmark_accuracy, chair, pope_metrics, select_caption, CaptionScorer, CoverFormula, Lexicon, PopeLabel,
    PopeQuestion, Selection, CANDIDATES_PER_SAMPLE,
};
use ohd_core::objective::{
    loss_i2t, loss_t2i, margin_enhanced, margin_positive, total_loss, total_loss_with_grad, BatchScores, LossConfig,
};
use ohd_core::synth::{object_vocabulary, synthetic_corpus, SynthConfig};

const OBJECTS: &[&str] = &["dog", "cat", "car", "bench", "tree", "kite", "bus", "sofa", "lamp", "cup"];

fn record_strategy(id: usize) -> impl Strategy<Value = ImageRecord> {
    proptest::sample::subsequence(OBJECTS.to_vec(), 1..=5)
        .prop_map(move |objs| ImageRecord::from_names(&format!("r{id}"), &objs, &["a caption."]).unwrap())
}

fn records_strategy() -> impl Strategy<Value = Vec<ImageRecord>> {
    (1usize..12).prop_flat_map(|n| (0..n).map(record_strategy).collect::<Vec<_>>())
}

fn scores_strategy(max_b: usize, max_k: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (1..=max_b, 0..=max_k).prop_flat_map(|(b, k)| {
        (
            proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, b), b),
            proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, k), b),
        )
    })
}

fn batch(pos: &[Vec<f64>], neg: &[Vec<f64>]) -> BatchScores {
    BatchScores::from_rows(pos, neg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // -- corpus ---------------------------------------------------------

    #[test]
    fn canonical_name_is_idempotent(raw in "[ a-zA-Z]{0,12}[a-zA-Z][ a-zA-Z]{0,12}") {
        let once = canonical_name(&raw).unwrap();
        prop_assert_eq!(canonical_name(&once).unwrap(), once.clone());
        prop_assert_eq!(once.trim(), once.as_str());
    }

    #[test]
    fn frequency_table_ignores_record_order(records in records_strategy(), seed in any::<u64>()) {
        let mut shuffled = records.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(build_frequency_table(&records), build_frequency_table(&shuffled));
    }

    #[test]
    fn cooccurrence_is_symmetric_and_self_free(records in records_strategy()) {
        let table = build_cooccurrence_table(&records);
        for a in OBJECTS {
            prop_assert_eq!(table.count(a, a), 0);
            for b in OBJECTS {
                prop_assert_eq!(table.count(a, b), table.count(b, a));
                let brute = records.iter().filter(|r| a != b && r.has_object(a) && r.has_object(b)).count() as u64;
                prop_assert_eq!(table.count(a, b), brute);
            }
        }
        prop_assert!(table.pairs().all(|(a, b, _)| a < b));
    }

    // -- countergen ------------------------------------------------------

    #[test]
    fn hallucination_objects_are_absent_and_distinct(
        records in records_strategy(),
        k in 1usize..=3,
        kind in proptest::sample::select(NegativeKind::INSERTIONS.to_vec()),
        seed in any::<u64>(),
    ) {
        let freq = build_frequency_table(&records);
        let cooc = build_cooccurrence_table(&records);
        let record = &records[0];
        match select_hallucination_objects(record, &freq, &cooc, kind, k, &mut ChaCha8Rng::seed_from_u64(seed)) {
            Ok(objs) => {
                prop_assert_eq!(objs.len(), k);
                prop_assert!(objs.iter().all(|o| !record.has_object(o)));
                prop_assert_eq!(objs.iter().collect::<BTreeSet<_>>().len(), k);
            }
            Err(_) => {
                let absent = freq.vocabulary().filter(|o| !record.has_object(o)).count();
                prop_assert!(absent < k);
            }
        }
    }

    #[test]
    fn subset_enumeration_sizes(objs in proptest::sample::subsequence(OBJECTS.to_vec(), 3)) {
        let objs: Vec<String> = objs.into_iter().map(str::to_owned).collect();
        let ins = enumerate_insertion_subsets(&objs).unwrap();
        let rem = enumerate_removal_subsets(&objs).unwrap();
        prop_assert_eq!(ins.len(), 7);
        prop_assert_eq!(rem.len(), 6);
        prop_assert_eq!(ins, enumerate_insertion_subsets(&objs).unwrap());
    }

    // -- encoder ---------------------------------------------------------

    #[test]
    fn embeddings_unit_and_scores_bounded(seed in any::<u64>(), texts in proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,4}", 1..5)) {
        let enc = ToyEncoderParams::random(128, 8, 0.3, seed).unwrap();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let t = enc.encode_texts(&refs).unwrap();
        let img = ImageRecord::from_names("i", &["dog", "cat"], &["x"]).unwrap();
        let i = enc.encode_images(&[&img]).unwrap();
        for e in t.iter().chain(&i) {
            let n: f64 = e.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }
        let m = score(&i, &t, enc.logit_scale()).unwrap();
        for j in 0..t.len() {
            prop_assert!(m.get(0, j).abs() <= enc.logit_scale() * (1.0 + 1e-12));
        }
    }

    // -- objective -------------------------------------------------------

    #[test]
    fn i2t_without_negatives_is_vanilla((pos, _) in scores_strategy(6, 0)) {
        let b = pos.len();
        let vanilla: f64 = (0..b)
            .map(|i| -(pos[i][i].exp() / pos[i].iter().map(|s| s.exp()).sum::<f64>()).ln())
            .sum::<f64>() / b as f64;
        prop_assert!((loss_i2t(&batch(&pos, &[])).unwrap() - vanilla).abs() < 1e-12);
    }

    #[test]
    fn components_nonnegative_and_total_identity((pos, neg) in scores_strategy(5, 4)) {
        let cfg = LossConfig::default();
        let br = total_loss(&batch(&pos, &neg), &cfg).unwrap();
        for v in [br.l_i2t, br.l_t2i, br.l1, br.l2, br.total] {
            prop_assert!(v >= 0.0);
        }
        let expect = 0.5 * (br.l_i2t + br.l_t2i) + cfg.lambda1 * br.l1 + cfg.lambda2 * br.l2;
        prop_assert!((br.total - expect).abs() < 1e-9);
    }

    #[test]
    fn enhanced_negative_order_is_irrelevant((pos, neg) in scores_strategy(4, 4), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shuffled: Vec<Vec<f64>> = neg.iter().map(|r| { let mut r = r.clone(); r.shuffle(&mut rng); r }).collect();
        let cfg = LossConfig::default();
        let a = total_loss(&batch(&pos, &neg), &cfg).unwrap();
        let b = total_loss(&batch(&pos, &shuffled), &cfg).unwrap();
        for (x, y) in [(a.l_i2t, b.l_i2t), (a.l_t2i, b.l_t2i), (a.l1, b.l1), (a.l2, b.l2)] {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_the_positive_never_hurts((pos, neg) in scores_strategy(4, 3), i in 0usize..4, delta in 0.0f64..5.0) {
        let i = i % pos.len();
        let mut up = pos.clone();
        up[i][i] += delta;
        let (a, b) = (batch(&pos, &neg), batch(&up, &neg));
        prop_assert!(loss_i2t(&b).unwrap() <= loss_i2t(&a).unwrap() + 1e-12);
        prop_assert!(loss_t2i(&b).unwrap() <= loss_t2i(&a).unwrap() + 1e-12);
        prop_assert!(margin_positive(&b, 2.0).unwrap() <= margin_positive(&a, 2.0).unwrap() + 1e-12);
        // the enhanced margin does not look at the diagonal
        prop_assert_eq!(margin_enhanced(&b, 2.0).unwrap(), margin_enhanced(&a, 2.0).unwrap());
    }

    #[test]
    fn score_gradient_matches_finite_differences((pos, neg) in scores_strategy(4, 3)) {
        let cfg = LossConfig::default();
        let base = batch(&pos, &neg);
        let (_, grad) = total_loss_with_grad(&base, &cfg).unwrap();
        let h = 1e-6;
        let f = |s: &BatchScores| total_loss(s, &cfg).unwrap().total;
        let (b, k) = (base.b(), base.k());
        let near_kink = |s: &BatchScores| {
            (0..b).any(|i| {
                (0..b).filter(|&j| j != i).any(|j| (cfg.tau1 - s.pos(i, i) + s.pos(i, j)).abs() < 1e-3
                    || (0..k).any(|kk| (cfg.tau2 - s.neg(i, kk) + s.pos(i, j)).abs() < 1e-3))
                    || (0..k).any(|kk| (cfg.tau1 - s.pos(i, i) + s.neg(i, kk)).abs() < 1e-3)
            })
        };
        prop_assume!(!near_kink(&base));
        for i in 0..b {
            for j in 0..b {
                let (mut p, mut m) = (base.clone(), base.clone());
                p.set_pos(i, j, base.pos(i, j) + h);
                m.set_pos(i, j, base.pos(i, j) - h);
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                prop_assert!((fd - grad.pos(i, j)).abs() < 1e-6, "pos {} {}: fd {} vs {}", i, j, fd, grad.pos(i, j));
            }
            for kk in 0..k {
                let (mut p, mut m) = (base.clone(), base.clone());
                p.set_neg(i, kk, base.neg(i, kk) + h);
                m.set_neg(i, kk, base.neg(i, kk) - h);
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                prop_assert!((fd - grad.neg(i, kk)).abs() < 1e-6);
            }
        }
    }

    // -- evalhall --------------------------------------------------------

    #[test]
    fn selection_invariant_under_affine_maps(
        grid in proptest::collection::vec(-64i32..64, CANDIDATES_PER_SAMPLE),
        shift in -32i32..32,
        scale_pow in -4i32..5,
    ) {
        // Eighths and powers of two keep every transform exact in f64.
        let scores: Vec<f64> = grid.iter().map(|&g| g as f64 / 8.0).collect();
        let base = select_caption(&scores, 0).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift as f64).collect();
        let scaled: Vec<f64> = scores.iter().map(|s| s * 2f64.powi(scale_pow)).collect();
        prop_assert_eq!(select_caption(&shifted, 0).unwrap(), base);
        prop_assert_eq!(select_caption(&scaled, 0).unwrap(), base);
    }

    #[test]
    fn pope_matches_confusion_matrix(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 0..40)) {
        let label = |b: bool| if b { PopeLabel::Yes } else { PopeLabel::No };
        let qs: Vec<PopeQuestion> = pairs.iter().enumerate().map(|(i, (g, _))| PopeQuestion {
            image_id: format!("i{i}"), object: "dog".into(), label: label(*g),
        }).collect();
        let answers: Vec<PopeLabel> = pairs.iter().map(|(_, a)| label(*a)).collect();
        let r = pope_metrics(&qs, &answers).unwrap();
        let tp = pairs.iter().filter(|(g, a)| *g && *a).count();
        let fp = pairs.iter().filter(|(g, a)| !*g && *a).count();
        let fneg = pairs.iter().filter(|(g, a)| *g && !*a).count();
        let n = pairs.len();
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, rc) = (div(tp, tp + fp), div(tp, tp + fneg));
        prop_assert_eq!(r.precision, p);
        prop_assert_eq!(r.recall, rc);
        prop_assert_eq!(r.f1, if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 });
        prop_assert_eq!(r.yes_ratio, div(tp + fp, n));
        prop_assert_eq!(r.accuracy, div(n - fp - fneg, n));
    }

    #[test]
    fn chair_matches_set_algebra(
        caps in proptest::collection::vec(
            (0usize..4, proptest::sample::subsequence(OBJECTS.to_vec(), 0..4)),
            0..=20,
        ),
        golds in proptest::collection::vec(proptest::sample::subsequence(OBJECTS.to_vec(), 0..5), 4),
    ) {
        let lex = Lexicon::bundled();
        let gold: HashMap<String, BTreeSet<String>> = golds.iter().enumerate()
            .map(|(i, g)| (format!("g{i}"), g.iter().map(|s| s.to_string()).collect())).collect();
        let captions: Vec<(String, String)> = caps.iter().map(|(img, objs)| {
            let body: Vec<String> = objs.iter().map(|o| format!("a {o}")).collect();
            (format!("g{img}"), format!("there is {} here.", body.join(" and ")))
        }).collect();
        let r = chair(&captions, &gold, &lex, CoverFormula::Coverage).unwrap();

        let (mut h, mut m, mut with_h, mut cov, mut gt) = (0, 0, 0, 0, 0);
        for (img, objs) in &caps {
            let mentioned: BTreeSet<String> = objs.iter().map(|s| s.to_string()).collect();
            let g = &gold[&format!("g{img}")];
            let hall = mentioned.difference(g).count();
            h += hall;
            m += mentioned.len();
            with_h += usize::from(hall > 0);
            cov += mentioned.intersection(g).count();
            gt += g.len();
        }
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        prop_assert_eq!((r.c_s, r.c_i, r.cover), (div(h, m), div(with_h, caps.len()), div(cov, gt)));
        prop_assert!(r.hallucinated_mentions <= r.total_mentions && r.covered_gt <= r.total_gt);
        for v in [r.c_s, r.c_i, r.cover] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_samples_keep_their_shape(seed in any::<u64>(), sparse in any::<bool>()) {
        let records = synthetic_corpus(&SynthConfig {
            images: 12,
            seed,
            sparse_fraction: if sparse { 0.5 } else { 0.0 },
            ..SynthConfig::default()
        });
        let stats = CorpusStats::from_records(&records);
        for record in &records {
            let gen = |s: u64| generate_sample(record, &record.captions[0], &stats, None,
                &GenerationOptions::default(), &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            let sample = gen(seed);
            sample.validate().unwrap();
            prop_assert_eq!(&sample, &gen(seed));
            for n in &sample.negatives {
                prop_assert_ne!(&n.text, &sample.positive);
                if n.spec.kind.is_insertion() {
                    prop_assert!(n.spec.objects.iter().all(|o| !record.has_object(o)));
                }
                if n.spec.kind == NegativeKind::Remove {
                    prop_assert!(n.spec.objects.iter().all(|o| record.has_object(o)));
                }
            }
        }
    }

    #[test]
    fn toy_gradients_match_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let d = rng.gen_range(2..=8);
        let enc = ToyEncoderParams::random(8, d, 0.5, seed).unwrap();
        let vocab = object_vocabulary();
        let img = |i: usize| ImageRecord::from_names(&format!("i{i}"), &[vocab[i], vocab[i + 5]], &["x"]).unwrap();
        let images = [img(0), img(1)];
        let input = BatchInput {
            images: images.iter().collect(),
            positives: vec!["a dog on a bench", "two cats"],
            negatives: vec![vec!["a red dog"], vec!["a cat and a kite"]],
        };
        let cfg = LossConfig { lambda1: 0.0, lambda2: 0.0, ..LossConfig::default() };
        let (scores, tape) = enc.forward(&input).unwrap();
        let (_, ds) = total_loss_with_grad(&scores, &cfg).unwrap();
        let g = enc.backward(&tape, &ds);
        let h = 1e-5;
        let loss = |p: &ToyEncoderParams| total_loss(&p.forward(&input).unwrap().0, &cfg).unwrap().total;
        for idx in (0..enc.text_table.len()).step_by(3) {
            let (mut p, mut m) = (enc.clone(), enc.clone());
            p.text_table[idx] += h;
            m.text_table[idx] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            prop_assert!((fd - g.text_table[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }
}

/// Scores the positive caption 1 and everything else 0, or the reverse.
struct Oracle {
    negate: bool,
    positives: HashMap<String, String>,
}

impl CaptionScorer for Oracle {
    fn score_candidates(&mut self, image_id: &str, _: Option<&ImageRecord>, candidates: &[&str]) -> ohd_core::Result<Vec<f64>> {
        let positive = &self.positives[image_id];
        Ok(candidates
            .iter()
            .map(|c| {
                let hit = if *c == positive { 1.0 } else { 0.0 };
                if self.negate { -hit } else { hit }
            })
            .collect())
    }
}

#[test]
fn oracle_scorer_is_perfect_and_its_negation_is_not() {
    let records = synthetic_corpus(&SynthConfig { images: 30, seed: 5, ..SynthConfig::default() });
    let stats = CorpusStats::from_records(&records);
    let set = ohd_core::countergen::generate_benchmark(&records, &stats, None, &Default::default())
        .unwrap()
        .set;
    let positives: HashMap<String, String> = set.samples.iter().map(|s| (s.image_id.clone(), s.positive.clone())).collect();
    let mut oracle = Oracle { negate: false, positives: positives.clone() };
    assert_eq!(benchmark_accuracy(&set.samples, None, &mut oracle).unwrap().accuracy, 1.0);
    let mut anti = Oracle { negate: true, positives };
    let report = benchmark_accuracy(&set.samples, None, &mut anti).unwrap();
    assert_eq!(report.accuracy, 0.0);
    assert_eq!(report.wins + report.ties + report.confusion.values().sum::<usize>(), report.n);
    assert!(matches!(
        select_caption(&[0.0; CANDIDATES_PER_SAMPLE], 0).unwrap(),
        Selection::Tie
    ));
}
