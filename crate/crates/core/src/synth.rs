//! Seeded synthetic corpora: scenes with correlated objects and captions that
//! mention every annotated object. Used by tests, the acceptance suite, the
//! CLI `synth` command and the browser demo.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ImageRecord, ObjectAnnotation};
use crate::countergen::template::indefinite_article;

const SCENES: &[(&str, &[&str])] = &[
    ("kitchen", &["oven", "sink", "bowl", "cup", "knife", "bottle", "microwave", "spoon"]),
    ("street", &["car", "bus", "truck", "bicycle", "motorcycle", "bench", "sign"]),
    ("park", &["dog", "frisbee", "bench", "tree", "kite", "ball", "bird"]),
    ("living room", &["sofa", "television", "lamp", "book", "cat", "clock", "vase", "remote"]),
    ("beach", &["umbrella", "surfboard", "boat", "towel", "bird", "bucket"]),
    ("farm", &["horse", "cow", "sheep", "fence", "tractor", "goat"]),
    ("office", &["laptop", "keyboard", "mouse", "chair", "phone", "book", "desk"]),
];

const COLORS: &[&str] = &["red", "blue", "white", "black", "green", "brown"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub images: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Fraction of images that get only one or two objects.
    pub sparse_fraction: f64,
    /// Probability that an object is drawn from a different scene.
    pub stray_probability: f64,
    pub color_probability: f64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            images: 200,
            seed: 0,
            min_objects: 3,
            max_objects: 5,
            sparse_fraction: 0.0,
            stray_probability: 0.15,
            color_probability: 0.2,
            id_prefix: "img".into(),
        }
    }
}

/// Every object label the generator can emit, sorted and deduplicated.
pub fn object_vocabulary() -> Vec<&'static str> {
    let mut v: Vec<&str> = SCENES.iter().flat_map(|(_, objs)| objs.iter().copied()).collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn phrase(color: Option<&str>, object: &str) -> String {
    match color {
        Some(c) => format!("{} {c} {object}", indefinite_article(c)),
        None => format!("{} {object}", indefinite_article(object)),
    }
}

fn list(phrases: &[String]) -> String {
    match phrases {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

pub fn synthetic_corpus(cfg: &SynthConfig) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let vocab = object_vocabulary();
    (0..cfg.images)
        .map(|i| {
            let (scene, scene_objs) = SCENES[rng.gen_range(0..SCENES.len())];
            let n = if rng.gen_bool(cfg.sparse_fraction.clamp(0.0, 1.0)) {
                rng.gen_range(1..=2)
            } else {
                rng.gen_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects))
            };
            let mut objects: Vec<&str> = Vec::with_capacity(n);
            while objects.len() < n.min(vocab.len()) {
                let pool: &[&str] = if rng.gen_bool(cfg.stray_probability) { &vocab } else { scene_objs };
                let pick = pool[rng.gen_range(0..pool.len())];
                if !objects.contains(&pick) {
                    objects.push(pick);
                }
            }
            objects.shuffle(&mut rng);
            let phrases: Vec<String> = objects
                .iter()
                .map(|o| {
                    let color = rng
                        .gen_bool(cfg.color_probability)
                        .then(|| COLORS[rng.gen_range(0..COLORS.len())]);
                    phrase(color, o)
                })
                .collect();
            let body = list(&phrases);
            let caption = match rng.gen_range(0..3) {
                0 => format!("{body} in the {scene}."),
                1 => format!("a photo of {body} in the {scene}."),
                _ => format!("there is {body} in the {scene}."),
            };
            let short = format!("the {scene} with {}.", list(&phrases[..phrases.len().min(2)]));
            ImageRecord::new(
                format!("{}{i:05}", cfg.id_prefix),
                format!("synthetic://{}{i:05}.jpg", cfg.id_prefix),
                objects
                    .iter()
                    .map(|o| ObjectAnnotation::new(o).expect("vocabulary names are valid"))
                    .collect(),
                vec![caption, short],
            )
            .expect("synthetic records are valid")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::countergen::template::contains_object;

    #[test]
    fn deterministic_and_sized() {
        let cfg = SynthConfig {
            images: 30,
            seed: 4,
            ..SynthConfig::default()
        };
        let a = synthetic_corpus(&cfg);
        assert_eq!(a, synthetic_corpus(&cfg));
        assert_eq!(a.len(), 30);
        for r in &a {
            assert!((3..=5).contains(&r.objects.len()));
            for o in r.object_names() {
                assert!(contains_object(&r.captions[0], o), "{o} missing from {}", r.captions[0]);
            }
        }
    }

    #[test]
    fn sparse_fraction_yields_small_records() {
        let recs = synthetic_corpus(&SynthConfig {
            images: 50,
            sparse_fraction: 1.0,
            ..SynthConfig::default()
        });
        assert!(recs.iter().all(|r| (1..=2).contains(&r.objects.len())));
    }
}
