use std::cmp::Reverse;
use std::collections::BTreeSet;

use rand::Rng;

use super::NegativeKind;
use crate::corpus::{CooccurrenceTable, FrequencyTable, ImageRecord};
use crate::{Error, Result};

/// Pick `k` objects absent from `record` to insert into its caption.
///
/// * random: uniform without replacement over the vocabulary
/// * popular: highest per-image frequency
/// * adversarial: highest summed co-occurrence with the annotated objects
///
/// Ranked strategies break ties lexicographically.
pub fn select_hallucination_objects<R: Rng + ?Sized>(
    record: &ImageRecord,
    freq: &FrequencyTable,
    cooc: &CooccurrenceTable,
    strategy: NegativeKind,
    k: usize,
    rng: &mut R,
) -> Result<Vec<String>> {
    select_excluding(record, freq, cooc, strategy, k, &BTreeSet::new(), rng)
}

/// As [`select_hallucination_objects`], additionally skipping `exclude`.
pub(crate) fn select_excluding<R: Rng + ?Sized>(
    record: &ImageRecord,
    freq: &FrequencyTable,
    cooc: &CooccurrenceTable,
    strategy: NegativeKind,
    k: usize,
    exclude: &BTreeSet<String>,
    rng: &mut R,
) -> Result<Vec<String>> {
    if !strategy.is_insertion() {
        return Err(Error::validation(format!(
            "{strategy} is not an insertion strategy"
        )));
    }
    let present = record.object_set();
    let eligible: Vec<&str> = freq
        .vocabulary()
        .filter(|o| !present.contains(o) && !exclude.contains(*o))
        .collect();
    if eligible.len() < k {
        return Err(Error::Generation(format!(
            "{}: {strategy} needs {k} absent objects, vocabulary offers {}",
            record.image_id,
            eligible.len()
        )));
    }
    let picked: Vec<&str> = match strategy {
        NegativeKind::InsertRandom => rand::seq::index::sample(rng, eligible.len(), k)
            .into_iter()
            .map(|i| eligible[i])
            .collect(),
        NegativeKind::InsertPopular => {
            let mut ranked = eligible;
            ranked.sort_by_key(|o| (Reverse(freq.count(o)), *o));
            ranked.truncate(k);
            ranked
        }
        NegativeKind::InsertAdversarial => {
            let mut ranked: Vec<(u64, &str)> = eligible
                .into_iter()
                .map(|o| (cooc.affinity(o, present.iter().copied()), o))
                .collect();
            ranked.sort_by_key(|&(score, o)| (Reverse(score), o));
            ranked.into_iter().take(k).map(|(_, o)| o).collect()
        }
        NegativeKind::Remove | NegativeKind::Alter => unreachable!(),
    };
    Ok(picked.into_iter().map(str::to_owned).collect())
}

/// All nonempty subsets of three objects (7), ordered by size then
/// lexicographically.
pub fn enumerate_insertion_subsets(objects: &[String]) -> Result<Vec<Vec<String>>> {
    subsets_up_to(objects, 3)
}

/// Subsets of size one or two of three objects (6), same ordering.
pub fn enumerate_removal_subsets(objects: &[String]) -> Result<Vec<Vec<String>>> {
    subsets_up_to(objects, 2)
}

fn subsets_up_to(objects: &[String], max_size: usize) -> Result<Vec<Vec<String>>> {
    if objects.len() != 3 {
        return Err(Error::validation(format!(
            "expected exactly 3 objects, got {}",
            objects.len()
        )));
    }
    let mut sorted = objects.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != objects.len() {
        return Err(Error::validation(format!("objects are not distinct: {objects:?}")));
    }
    Ok(subsets_of(&sorted, max_size))
}

/// Nonempty subsets of `items` up to `max_size`, in (size, index-lexicographic)
/// order. Works for any arity; used for the short removal sets of sparse images.
pub(crate) fn subsets_of(items: &[String], max_size: usize) -> Vec<Vec<String>> {
    let n = items.len();
    let mut out = Vec::new();
    for size in 1..=max_size.min(n) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            out.push(idx.iter().map(|&i| items[i].clone()).collect());
            // advance to the next combination in lexicographic order
            let Some(pos) = (0..size).rev().find(|&p| idx[p] != p + n - size) else {
                break;
            };
            idx[pos] += 1;
            for q in pos + 1..size {
                idx[q] = idx[q - 1] + 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_cooccurrence_table, build_frequency_table};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn rec(id: &str, objs: &[&str]) -> ImageRecord {
        ImageRecord::from_names(id, objs, &["c."]).unwrap()
    }

    /// Corpus where dog:9, cat:5, car:3, tree:1 (per-image presence).
    fn popular_corpus() -> Vec<ImageRecord> {
        let mut recs = Vec::new();
        for i in 0..9 {
            let mut objs = vec!["dog"];
            if i < 5 {
                objs.push("cat");
            }
            if i < 3 {
                objs.push("car");
            }
            if i < 1 {
                objs.push("tree");
            }
            recs.push(rec(&i.to_string(), &objs));
        }
        recs
    }

    #[test]
    fn popular_ranks_by_frequency_excluding_present() {
        let corpus = popular_corpus();
        let freq = build_frequency_table(&corpus);
        assert_eq!(freq.count("dog"), 9);
        assert_eq!(freq.count("tree"), 1);
        let cooc = build_cooccurrence_table(&corpus);
        let target = rec("t", &["dog"]);
        let picked = select_hallucination_objects(
            &target,
            &freq,
            &cooc,
            NegativeKind::InsertPopular,
            3,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(picked, s(&["cat", "car", "tree"]));
    }

    #[test]
    fn popular_ties_break_lexicographically() {
        let corpus = vec![rec("1", &["b", "a", "c", "d"])];
        let freq = build_frequency_table(&corpus);
        let cooc = build_cooccurrence_table(&corpus);
        let target = rec("t", &["c"]);
        let picked = select_hallucination_objects(
            &target,
            &freq,
            &cooc,
            NegativeKind::InsertPopular,
            2,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(picked, s(&["a", "b"]));
    }

    #[test]
    fn adversarial_ranks_by_cooccurrence_with_annotations() {
        // Hand-counted co-occurrence with "dog": leash 3, ball 2, cat 1, car 0.
        let corpus = vec![
            rec("1", &["dog", "leash", "ball"]),
            rec("2", &["dog", "leash"]),
            rec("3", &["dog", "leash", "ball"]),
            rec("4", &["dog", "cat"]),
            rec("5", &["car", "cat"]),
            rec("6", &["car", "cat"]),
            rec("7", &["car", "ball"]),
            rec("8", &["cat"]),
        ];
        let freq = build_frequency_table(&corpus);
        let cooc = build_cooccurrence_table(&corpus);
        assert_eq!(cooc.affinity("leash", ["dog"]), 3);
        let target = rec("t", &["dog"]);
        let picked = select_hallucination_objects(
            &target,
            &freq,
            &cooc,
            NegativeKind::InsertAdversarial,
            3,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(picked, s(&["leash", "ball", "cat"]));
        // popular ranks differently: cat is the most frequent absent object
        let popular = select_hallucination_objects(
            &target,
            &freq,
            &cooc,
            NegativeKind::InsertPopular,
            1,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(popular, s(&["cat"]));
    }

    #[test]
    fn random_is_seeded_and_excludes_present() {
        let corpus: Vec<_> = (0..20)
            .map(|i| rec(&i.to_string(), &[&format!("obj{i}"), "common"]))
            .collect();
        let freq = build_frequency_table(&corpus);
        let cooc = build_cooccurrence_table(&corpus);
        let target = rec("t", &["common", "obj3"]);
        let run = |seed| {
            select_hallucination_objects(
                &target,
                &freq,
                &cooc,
                NegativeKind::InsertRandom,
                3,
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        let a = run(11);
        assert_eq!(a, run(11));
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|o| o != "common" && o != "obj3"));
        let distinct: BTreeSet<_> = a.iter().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn insufficient_vocabulary_is_a_generation_error() {
        let corpus = vec![rec("1", &["a", "b"])];
        let freq = build_frequency_table(&corpus);
        let cooc = build_cooccurrence_table(&corpus);
        let err = select_hallucination_objects(
            &rec("t", &["a"]),
            &freq,
            &cooc,
            NegativeKind::InsertPopular,
            3,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(Error::Generation(_))));
    }

    #[test]
    fn non_insertion_strategy_rejected() {
        let freq = FrequencyTable::default();
        let cooc = CooccurrenceTable::default();
        assert!(select_hallucination_objects(
            &rec("t", &["a"]),
            &freq,
            &cooc,
            NegativeKind::Remove,
            1,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .is_err());
    }

    #[test]
    fn insertion_subsets_of_three() {
        let subsets = enumerate_insertion_subsets(&s(&["a", "b", "c"])).unwrap();
        let expected: Vec<Vec<String>> = [
            &["a"][..],
            &["b"],
            &["c"],
            &["a", "b"],
            &["a", "c"],
            &["b", "c"],
            &["a", "b", "c"],
        ]
        .iter()
        .map(|x| s(x))
        .collect();
        assert_eq!(subsets, expected);
    }

    #[test]
    fn removal_subsets_of_three() {
        let subsets = enumerate_removal_subsets(&s(&["c", "a", "b"])).unwrap();
        assert_eq!(subsets.len(), 6);
        assert_eq!(subsets[0], s(&["a"]));
        assert_eq!(subsets[5], s(&["b", "c"]));
        assert!(subsets.iter().all(|x| x.len() <= 2));
    }

    #[test]
    fn subset_arity_and_distinctness_checked() {
        assert!(enumerate_insertion_subsets(&s(&["a", "b"])).is_err());
        assert!(enumerate_insertion_subsets(&s(&["a", "a", "b"])).is_err());
        assert!(enumerate_removal_subsets(&s(&["a", "b", "c", "d"])).is_err());
    }

    #[test]
    fn subset_counts_match_binomial_sums() {
        let items = s(&["a", "b", "c", "d", "e"]);
        // C(5,1)+C(5,2)+C(5,3) = 5+10+10
        assert_eq!(subsets_of(&items, 3).len(), 25);
        assert_eq!(subsets_of(&items[..2], 2).len(), 3);
        assert_eq!(subsets_of(&items[..1], 2).len(), 1);
        assert!(subsets_of(&[], 2).is_empty());
    }
}
