use std::collections::{BTreeSet, HashSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::llm::{LlmClient, RetryPolicy};
use super::prompt::{render_prompt, PromptTemplate};
use super::rewrite::rewrite_caption;
use super::select::{enumerate_insertion_subsets, select_excluding, subsets_of};
use super::template::contains_object;
use super::{NegativeCaption, NegativeKind, NegativeSpec, Provenance};
use crate::corpus::{
    build_cooccurrence_table, build_frequency_table, BenchmarkSample, BenchmarkSet, CooccurrenceTable,
    FrequencyTable, ImageRecord, REMOVAL_SLOTS,
};
use crate::hashing::{derive_seed, item_seed};
use crate::{Error, Result, GENERATOR_VERSION};

const OBJECTS_PER_STRATEGY: usize = 3;
const MAX_ATTEMPTS: u64 = 3;

/// Frequency and co-occurrence statistics of the source corpus.
#[derive(Debug, Clone, Default)]
pub struct CorpusStats {
    pub freq: FrequencyTable,
    pub cooc: CooccurrenceTable,
}

impl CorpusStats {
    pub fn from_records(records: &[ImageRecord]) -> Self {
        Self {
            freq: build_frequency_table(records),
            cooc: build_cooccurrence_table(records),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenerationOptions {
    pub retry: RetryPolicy,
    /// Use the template grammar when the model fails or its output is rejected.
    pub allow_fallback: bool,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            allow_fallback: true,
        }
    }
}

/// Build all 27 negatives for one image and caption.
///
/// Insertion objects are chosen popular first, then adversarial, then random,
/// each strategy excluding the objects picked before it so that no two
/// insertion negatives name the same object set. Negatives are emitted in
/// kind order: random, popular, adversarial, remove, alter.
pub fn generate_sample(
    record: &ImageRecord,
    caption: &str,
    stats: &CorpusStats,
    client: Option<&dyn LlmClient>,
    opts: &GenerationOptions,
    rng: &mut ChaCha8Rng,
) -> Result<BenchmarkSample> {
    if !record.captions.iter().any(|c| c == caption) {
        return Err(Error::validation(format!(
            "{}: caption is not one of the record's captions",
            record.image_id
        )));
    }
    let annotate = |e: Error| match e {
        Error::Generation(m) => Error::Generation(format!("{}: {m}", record.image_id)),
        Error::Llm(m) => Error::Llm(format!("{}: {m}", record.image_id)),
        other => other,
    };

    let mut exclude = BTreeSet::new();
    let mut chosen = std::collections::BTreeMap::new();
    for kind in [
        NegativeKind::InsertPopular,
        NegativeKind::InsertAdversarial,
        NegativeKind::InsertRandom,
    ] {
        let objs = select_excluding(
            record,
            &stats.freq,
            &stats.cooc,
            kind,
            OBJECTS_PER_STRATEGY,
            &exclude,
            rng,
        )?;
        exclude.extend(objs.iter().cloned());
        chosen.insert(kind, objs);
    }

    let mut specs = Vec::with_capacity(27);
    for kind in NegativeKind::INSERTIONS {
        for (i, subset) in enumerate_insertion_subsets(&chosen[&kind])?.into_iter().enumerate() {
            specs.push(NegativeSpec {
                kind,
                objects: subset,
                combo_index: i,
            });
        }
    }

    let mut removal_base: Vec<String> = record.object_names().map(str::to_owned).collect();
    if removal_base.len() > OBJECTS_PER_STRATEGY {
        removal_base = rand::seq::index::sample(rng, removal_base.len(), OBJECTS_PER_STRATEGY)
            .into_iter()
            .map(|i| removal_base[i].clone())
            .collect();
    }
    removal_base.sort();
    let removals = subsets_of(&removal_base, 2);
    let n_removals = removals.len();
    for (i, subset) in removals.into_iter().enumerate() {
        specs.push(NegativeSpec {
            kind: NegativeKind::Remove,
            objects: subset,
            combo_index: i,
        });
    }
    for i in 0..REMOVAL_SLOTS - n_removals {
        specs.push(NegativeSpec {
            kind: NegativeKind::Alter,
            objects: Vec::new(),
            combo_index: i,
        });
    }

    // One seed per negative, so later negatives do not depend on how much
    // randomness earlier rewrites consumed.
    let base_seed = rng.next_u64();
    let mut taken: HashSet<String> = HashSet::new();
    taken.insert(caption.to_owned());
    let mut negatives = Vec::with_capacity(specs.len());
    let mut extra_alters = 0;
    for spec in specs {
        let neg = match produce_negative(spec.clone(), caption, client, opts, base_seed, &taken, &annotate) {
            // Removing every object can leave an empty or duplicate caption;
            // the slot then becomes an alteration, as for sparse records.
            Err(Error::Generation(_)) if spec.kind == NegativeKind::Remove => {
                let alter = NegativeSpec {
                    kind: NegativeKind::Alter,
                    objects: Vec::new(),
                    combo_index: REMOVAL_SLOTS + extra_alters,
                };
                extra_alters += 1;
                produce_negative(alter, caption, client, opts, base_seed, &taken, &annotate)?
            }
            other => other?,
        };
        taken.insert(neg.text.clone());
        negatives.push(neg);
    }
    // Keep kind order and positional combo indices, which is what the file
    // format reconstructs on load.
    negatives.sort_by_key(|n| n.spec.kind);
    for (i, n) in negatives.iter_mut().filter(|n| n.spec.kind == NegativeKind::Alter).enumerate() {
        n.spec.combo_index = i;
    }

    let sample = BenchmarkSample {
        image_id: record.image_id.clone(),
        positive: caption.to_owned(),
        negatives,
    };
    sample.validate()?;
    Ok(sample)
}

/// Rewrite `caption` for one spec, retrying with fresh seeds until the text
/// differs from everything in `taken`.
fn produce_negative(
    spec: NegativeSpec,
    caption: &str,
    client: Option<&dyn LlmClient>,
    opts: &GenerationOptions,
    base_seed: u64,
    taken: &HashSet<String>,
    annotate: &dyn Fn(Error) -> Error,
) -> Result<NegativeCaption> {
    let template = match spec.kind {
        k if k.is_insertion() => PromptTemplate::Add,
        NegativeKind::Remove => PromptTemplate::RemoveObject,
        _ => PromptTemplate::AlterObject,
    };
    let request = render_prompt(template, caption, &spec.objects)?;
    for attempt in 0..MAX_ATTEMPTS {
        let seed = derive_seed(base_seed, &[spec.kind as u64, spec.combo_index as u64, attempt]);
        let mut neg_rng = ChaCha8Rng::seed_from_u64(seed);
        let out = rewrite_caption(&request, client, &mut neg_rng, taken, &opts.retry, opts.allow_fallback)
            .map_err(|e| annotate_spec(annotate(e), &spec))?;
        if taken.contains(&out.text) {
            continue;
        }
        if spec.kind.is_insertion() && out.provenance == Provenance::Template {
            debug_assert!(spec.objects.iter().all(|o| out.text.contains(o.as_str())));
        }
        if spec.kind == NegativeKind::Remove {
            debug_assert!(spec.objects.iter().all(|o| !contains_object(&out.text, o)));
        }
        return Ok(NegativeCaption {
            text: out.text,
            spec,
            provenance: out.provenance,
            model_id: out.model_id,
        });
    }
    Err(annotate_spec(
        annotate(Error::Generation(format!(
            "could not produce a distinct caption in {MAX_ATTEMPTS} attempts"
        ))),
        &spec,
    ))
}

fn annotate_spec(e: Error, spec: &NegativeSpec) -> Error {
    let ctx = format!("[{} #{} {:?}]", spec.kind, spec.combo_index, spec.objects);
    match e {
        Error::Generation(m) => Error::Generation(format!("{m} {ctx}")),
        Error::Llm(m) => Error::Llm(format!("{m} {ctx}")),
        other => other,
    }
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub name: String,
    pub source_corpus: String,
    pub seed: u64,
    /// Which caption of each record becomes the positive.
    pub caption_index: usize,
    /// Skip images whose generation fails instead of aborting.
    pub skip_failures: bool,
    /// Worker threads; 0 or 1 runs on the calling thread.
    pub jobs: usize,
    pub config_hash: Option<String>,
    pub generation: GenerationOptions,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            name: "benchmark".into(),
            source_corpus: String::new(),
            seed: 0,
            caption_index: 0,
            skip_failures: false,
            jobs: 1,
            config_hash: None,
            generation: GenerationOptions::default(),
        }
    }
}

#[derive(Debug)]
pub struct BuildOutcome {
    pub set: BenchmarkSet,
    /// Images left out because generation failed (only with `skip_failures`).
    pub skipped: Vec<(String, Error)>,
}

/// Generate a benchmark over `records`. Each image draws from its own stream
/// seeded with `seed ^ hash(image_id)`, so the output does not depend on
/// `jobs` or on the order in which workers finish.
pub fn generate_benchmark(
    records: &[ImageRecord],
    stats: &CorpusStats,
    client: Option<&dyn LlmClient>,
    opts: &BuildOptions,
) -> Result<BuildOutcome> {
    let one = |record: &ImageRecord| -> Result<BenchmarkSample> {
        let caption = record
            .captions
            .get(opts.caption_index)
            .or_else(|| record.captions.first())
            .expect("records have at least one caption");
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(opts.seed, &record.image_id));
        generate_sample(record, caption, stats, client, &opts.generation, &mut rng)
    };
    let results = run_jobs(records, opts.jobs, one);

    let mut samples = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    for (record, result) in records.iter().zip(results) {
        match result {
            Ok(s) => samples.push(s),
            Err(e) if opts.skip_failures => skipped.push((record.image_id.clone(), e)),
            Err(e) => return Err(e),
        }
    }
    let set = BenchmarkSet {
        name: opts.name.clone(),
        samples,
        seed: opts.seed,
        generator_version: GENERATOR_VERSION.to_owned(),
        source_corpus: opts.source_corpus.clone(),
        config_hash: opts.config_hash.clone(),
    };
    set.validate()?;
    Ok(BuildOutcome { set, skipped })
}

#[cfg(feature = "parallel")]
fn run_jobs<T, F>(records: &[ImageRecord], jobs: usize, f: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(&ImageRecord) -> Result<T> + Sync,
{
    use rayon::prelude::*;
    if jobs <= 1 {
        return records.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(|| records.par_iter().map(&f).collect()),
        Err(_) => records.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_jobs<T, F>(records: &[ImageRecord], _jobs: usize, f: F) -> Vec<Result<T>>
where
    F: Fn(&ImageRecord) -> Result<T>,
{
    records.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthetic_corpus, SynthConfig};

    fn corpus() -> Vec<ImageRecord> {
        synthetic_corpus(&SynthConfig {
            images: 60,
            ..SynthConfig::default()
        })
    }

    #[test]
    fn full_sample_has_seven_seven_seven_six() {
        let recs = corpus();
        let stats = CorpusStats::from_records(&recs);
        let rec = recs.iter().find(|r| r.objects.len() >= 3).unwrap();
        let sample = generate_sample(
            rec,
            &rec.captions[0],
            &stats,
            None,
            &GenerationOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let counts = sample.kind_counts();
        assert_eq!(counts[&NegativeKind::InsertRandom], 7);
        assert_eq!(counts[&NegativeKind::InsertPopular], 7);
        assert_eq!(counts[&NegativeKind::InsertAdversarial], 7);
        assert_eq!(counts[&NegativeKind::Remove], 6);
        assert_eq!(counts[&NegativeKind::Alter], 0);
        let present = rec.object_set();
        for n in &sample.negatives {
            if n.spec.kind.is_insertion() {
                assert!(n.spec.objects.iter().all(|o| !present.contains(o.as_str())));
                assert!(n.spec.objects.iter().all(|o| n.text.contains(o.as_str())));
            }
            if n.spec.kind == NegativeKind::Remove {
                assert!(n.spec.objects.iter().all(|o| present.contains(o.as_str())));
            }
        }
    }

    #[test]
    fn sparse_records_fill_with_alterations() {
        let recs = corpus();
        let stats = CorpusStats::from_records(&recs);
        for (names, removes) in [(&["dog"][..], 1usize), (&["dog", "frisbee"][..], 3), (&[][..], 0)] {
            let rec = ImageRecord::from_names("sparse", names, &["a dog catches a frisbee in the park."])
                .unwrap();
            let sample = generate_sample(
                &rec,
                &rec.captions[0],
                &stats,
                None,
                &GenerationOptions::default(),
                &mut ChaCha8Rng::seed_from_u64(5),
            )
            .unwrap();
            let counts = sample.kind_counts();
            assert_eq!(sample.negatives.len(), 27);
            assert_eq!(counts[&NegativeKind::Remove], removes);
            assert_eq!(counts[&NegativeKind::Alter], 6 - removes);
        }
    }

    #[test]
    fn template_generation_is_deterministic() {
        let recs = corpus();
        let stats = CorpusStats::from_records(&recs);
        let rec = &recs[3];
        let run = || {
            generate_sample(
                rec,
                &rec.captions[0],
                &stats,
                None,
                &GenerationOptions::default(),
                &mut ChaCha8Rng::seed_from_u64(99),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn caption_must_belong_to_record() {
        let recs = corpus();
        let stats = CorpusStats::from_records(&recs);
        let err = generate_sample(
            &recs[0],
            "something else",
            &stats,
            None,
            &GenerationOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn generation_errors_name_the_image() {
        let recs = vec![ImageRecord::from_names("lonely", &["dog"], &["a dog."]).unwrap()];
        let stats = CorpusStats::from_records(&recs);
        let err = generate_sample(
            &recs[0],
            "a dog.",
            &stats,
            None,
            &GenerationOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        assert!(err.to_string().contains("lonely"), "{err}");
    }

    #[test]
    fn parallel_build_matches_serial() {
        let recs = corpus();
        let stats = CorpusStats::from_records(&recs);
        let serial = generate_benchmark(&recs, &stats, None, &BuildOptions::default()).unwrap();
        let parallel = generate_benchmark(
            &recs,
            &stats,
            None,
            &BuildOptions {
                jobs: 4,
                ..BuildOptions::default()
            },
        )
        .unwrap();
        assert_eq!(serial.set, parallel.set);
        assert!(serial.skipped.is_empty());
    }

    #[test]
    fn skip_failures_collects_bad_images() {
        let mut recs = corpus();
        // every object in the vocabulary: nothing left to insert
        let all: Vec<String> = CorpusStats::from_records(&recs).freq.vocabulary().map(str::to_owned).collect();
        let names: Vec<&str> = all.iter().map(String::as_str).collect();
        recs.push(ImageRecord::from_names("everything", &names, &["a busy scene."]).unwrap());
        let stats = CorpusStats::from_records(&recs);
        assert!(generate_benchmark(&recs, &stats, None, &BuildOptions::default()).is_err());
        let out = generate_benchmark(
            &recs,
            &stats,
            None,
            &BuildOptions {
                skip_failures: true,
                ..BuildOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.skipped.len(), 1);
        assert_eq!(out.skipped[0].0, "everything");
        assert_eq!(out.set.samples.len(), recs.len() - 1);
    }

    #[test]
    fn removing_every_object_falls_through_to_alter() {
        let mut recs = corpus();
        let rec = ImageRecord::from_names("pair", &["cat", "sofa"], &["a cat on a sofa."]).unwrap();
        recs.push(rec.clone());
        let stats = CorpusStats::from_records(&recs);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sample = generate_sample(&rec, "a cat on a sofa.", &stats, None, &GenerationOptions::default(), &mut rng)
            .unwrap();
        let counts = sample.kind_counts();
        assert_eq!((counts[&NegativeKind::Remove], counts[&NegativeKind::Alter]), (2, 4));
        let alters: Vec<usize> = sample
            .negatives
            .iter()
            .filter(|n| n.spec.kind == NegativeKind::Alter)
            .map(|n| n.spec.combo_index)
            .collect();
        assert_eq!(alters, [0, 1, 2, 3]);
        assert!(sample.negatives.windows(2).all(|w| w[0].spec.kind <= w[1].spec.kind));
    }
}
