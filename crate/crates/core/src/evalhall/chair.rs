use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{canonical_name, ImageRecord};
use crate::encoder::tokenize;
use crate::{Error, Result};

/// Surface form → canonical object map with longest-match extraction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    entries: HashMap<Vec<String>, String>,
    longest: usize,
}

/// Irregular plurals of bundled objects.
const IRREGULAR_PLURALS: &[(&str, &str)] = &[
    ("knife", "knives"),
    ("mouse", "mice"),
    ("sheep", "sheep"),
    ("person", "people"),
    ("man", "men"),
    ("woman", "women"),
    ("child", "children"),
];

const BUNDLED_SYNONYMS: &[(&str, &str)] = &[
    ("puppy", "dog"),
    ("kitten", "cat"),
    ("automobile", "car"),
    ("couch", "sofa"),
    ("tv", "television"),
    ("bike", "bicycle"),
    ("motorbike", "motorcycle"),
    ("cell phone", "phone"),
    ("cellphone", "phone"),
    ("computer mouse", "mouse"),
    ("notebook computer", "laptop"),
    ("cup of coffee", "cup"),
    ("sailboat", "boat"),
    ("pony", "horse"),
    ("lamb", "sheep"),
    ("man", "person"),
    ("woman", "person"),
    ("child", "person"),
    ("person", "person"),
];

fn plural(noun: &str) -> String {
    let last = noun.rsplit(' ').next().unwrap_or(noun);
    let head = &noun[..noun.len() - last.len()];
    if let Some((_, p)) = IRREGULAR_PLURALS.iter().find(|(s, _)| *s == last) {
        return format!("{head}{p}");
    }
    if let Some(stem) = noun.strip_suffix('y') {
        if !stem.ends_with(['a', 'e', 'i', 'o', 'u']) {
            return format!("{stem}ies");
        }
    }
    if ["s", "sh", "ch", "x", "z"].iter().any(|e| last.ends_with(e)) {
        format!("{noun}es")
    } else {
        format!("{noun}s")
    }
}

impl Lexicon {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut lex = Lexicon::default();
        for (surface, canonical) in pairs {
            lex.insert(surface, canonical)?;
        }
        Ok(lex)
    }

    pub fn insert(&mut self, surface: &str, canonical: &str) -> Result<()> {
        let tokens = tokenize(surface);
        if tokens.is_empty() {
            return Err(Error::validation(format!("lexicon surface form {surface:?} has no tokens")));
        }
        self.longest = self.longest.max(tokens.len());
        self.entries.insert(tokens, canonical_name(canonical)?);
        Ok(())
    }

    /// Every synthetic-corpus object in singular and plural, plus a few
    /// common synonyms.
    pub fn bundled() -> Self {
        let mut lex = Lexicon::default();
        let add = |lex: &mut Lexicon, surface: &str, canonical: &str| {
            lex.insert(surface, canonical).expect("bundled entries are valid");
            lex.insert(&plural(surface), canonical).expect("bundled entries are valid");
        };
        for obj in crate::synth::object_vocabulary() {
            add(&mut lex, obj, obj);
        }
        for (surface, canonical) in BUNDLED_SYNONYMS {
            add(&mut lex, surface, canonical);
        }
        lex
    }

    /// Tab-separated `surface<TAB>canonical` lines; `#` starts a comment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lex = Lexicon::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let (surface, canonical) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected surface<TAB>canonical"))?;
            lex.insert(surface, canonical)
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Canonical objects mentioned in `text`: scan left to right, take the
    /// longest surface form starting at each token, skip past it.
    pub fn mentions(&self, text: &str) -> BTreeSet<String> {
        let tokens = tokenize(text);
        let mut found = BTreeSet::new();
        let mut i = 0;
        while i < tokens.len() {
            let max = self.longest.min(tokens.len() - i);
            match (1..=max).rev().find_map(|len| self.entries.get(&tokens[i..i + len]).map(|c| (len, c))) {
                Some((len, canonical)) => {
                    found.insert(canonical.clone());
                    i += len;
                }
                None => i += 1,
            }
        }
        found
    }
}

/// Which numerator Cover uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverFormula {
    /// Covered ground-truth objects over all ground-truth objects.
    #[default]
    Coverage,
    /// Captions with a hallucination over all ground-truth objects, kept
    /// for auditing against published numbers.
    Printed,
}

impl FromStr for CoverFormula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coverage" => Ok(CoverFormula::Coverage),
            "printed" => Ok(CoverFormula::Printed),
            other => Err(Error::validation(format!("unknown cover formula {other:?} (coverage|printed)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairReport {
    pub c_s: f64,
    pub c_i: f64,
    pub cover: f64,
    pub hallucinated_mentions: usize,
    pub total_mentions: usize,
    pub captions_with_hallucination: usize,
    pub total_captions: usize,
    pub covered_gt: usize,
    pub total_gt: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Ground-truth object sets keyed by image id.
pub fn gold_sets(records: &[ImageRecord]) -> HashMap<String, BTreeSet<String>> {
    records
        .iter()
        .map(|r| (r.image_id.clone(), r.object_names().map(str::to_owned).collect()))
        .collect()
}

/// Each caption contributes its distinct mentioned objects; multiple captions
/// of one image each count its ground truth toward Cover.
pub fn chair(
    captions: &[(String, String)],
    gold: &HashMap<String, BTreeSet<String>>,
    lexicon: &Lexicon,
    formula: CoverFormula,
) -> Result<ChairReport> {
    let (mut hallucinated, mut mentions, mut with_h, mut covered, mut total_gt) = (0, 0, 0, 0, 0);
    for (image_id, text) in captions {
        let truth = gold
            .get(image_id)
            .ok_or_else(|| Error::validation(format!("no gold objects for image {image_id}")))?;
        let found = lexicon.mentions(text);
        let h = found.iter().filter(|o| !truth.contains(*o)).count();
        hallucinated += h;
        mentions += found.len();
        with_h += usize::from(h > 0);
        covered += found.len() - h;
        total_gt += truth.len();
    }
    let cover_num = match formula {
        CoverFormula::Coverage => covered,
        CoverFormula::Printed => with_h,
    };
    Ok(ChairReport {
        c_s: ratio(hallucinated, mentions),
        c_i: ratio(with_h, captions.len()),
        cover: ratio(cover_num, total_gt).min(1.0),
        hallucinated_mentions: hallucinated,
        total_mentions: mentions,
        captions_with_hallucination: with_h,
        total_captions: captions.len(),
        covered_gt: covered,
        total_gt,
    })
}

/// `image_id<TAB>caption` per line.
pub fn load_captions(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let (id, caption) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected image_id<TAB>caption"))?;
        if id.trim().is_empty() {
            return Err(Error::parse(path, i + 1, "empty image_id"));
        }
        out.push((id.trim().to_owned(), caption.to_owned()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold(id: &str, objs: &[&str]) -> HashMap<String, BTreeSet<String>> {
        HashMap::from([(id.to_owned(), objs.iter().map(|s| s.to_string()).collect())])
    }

    #[test]
    fn longest_match_wins() {
        let lex = Lexicon::from_pairs([("hot dog", "hot dog"), ("dog", "dog")]).unwrap();
        assert_eq!(lex.mentions("A hot dog on a plate"), BTreeSet::from(["hot dog".to_owned()]));
        assert_eq!(
            lex.mentions("a dog eats a hot dog."),
            BTreeSet::from(["dog".to_owned(), "hot dog".to_owned()])
        );
    }

    #[test]
    fn bundled_lexicon_handles_plurals_and_synonyms() {
        let lex = Lexicon::bundled();
        let m = lex.mentions("Two puppies and three knives near the buses.");
        assert_eq!(m, ["bus", "dog", "knife"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn one_in_three_hallucinated() {
        let lex = Lexicon::bundled();
        let caps = vec![("a".to_owned(), "a dog, a cat and a car.".to_owned())];
        let r = chair(&caps, &gold("a", &["dog", "car"]), &lex, CoverFormula::Coverage).unwrap();
        assert_eq!(r.c_s, 1.0 / 3.0);
        assert_eq!(r.c_i, 1.0);
        assert_eq!(r.cover, 1.0);
    }

    #[test]
    fn half_coverage() {
        let lex = Lexicon::bundled();
        let caps = vec![("a".to_owned(), "a dog on the grass.".to_owned())];
        let r = chair(&caps, &gold("a", &["dog", "car"]), &lex, CoverFormula::Coverage).unwrap();
        assert_eq!(r.cover, 0.5);
        assert_eq!(r.c_s, 0.0);
        assert_eq!(r.c_i, 0.0);
        let p = chair(&caps, &gold("a", &["dog", "car"]), &lex, CoverFormula::Printed).unwrap();
        assert_eq!(p.cover, 0.0);
    }

    #[test]
    fn missing_gold_is_an_error() {
        let caps = vec![("zz".to_owned(), "a dog".to_owned())];
        assert!(chair(&caps, &gold("a", &["dog"]), &Lexicon::bundled(), CoverFormula::Coverage).is_err());
    }

    #[test]
    fn lexicon_and_caption_files() {
        let dir = tempfile::tempdir().unwrap();
        let lp = dir.path().join("lex.tsv");
        fs::write(&lp, "# surface\tcanonical\ndog\tdog\npuppies\tDog\n").unwrap();
        let lex = Lexicon::load(&lp).unwrap();
        assert_eq!(lex.mentions("puppies"), BTreeSet::from(["dog".to_owned()]));
        fs::write(&lp, "dog dog\n").unwrap();
        assert!(matches!(Lexicon::load(&lp), Err(Error::Parse { line: 1, .. })));

        let cp = dir.path().join("caps.tsv");
        fs::write(&cp, "a\ta dog.\n\nb\ta cat.\n").unwrap();
        assert_eq!(load_captions(&cp).unwrap().len(), 2);
    }
}
