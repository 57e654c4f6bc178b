use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use super::llm::{LlmClient, LlmFailure, RetryPolicy};
use super::prompt::{PromptRequest, PromptTemplate};
use super::template::{alter_candidates, contains_object, insert_objects, remove_objects};
use super::Provenance;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Rewrite {
    pub text: String,
    pub provenance: Provenance,
    pub model_id: Option<String>,
}

/// Produce one negative caption for `request`.
///
/// With a client the model answer is used if it passes validation: nonempty,
/// different from the source caption and from everything in `avoid`, and for
/// insertion it must mention every requested object, for removal none of
/// them. Transient failures are retried with exponential backoff. Anything
/// else falls through to the template grammar unless `allow_fallback` is off.
pub fn rewrite_caption<R: Rng + ?Sized>(
    request: &PromptRequest,
    client: Option<&dyn LlmClient>,
    rng: &mut R,
    avoid: &HashSet<String>,
    retry: &RetryPolicy,
    allow_fallback: bool,
) -> Result<Rewrite> {
    if let Some(client) = client {
        match query_llm(request, client, retry) {
            Ok(text) => match validate_llm_output(request, &text, avoid) {
                Ok(()) => {
                    return Ok(Rewrite {
                        text,
                        provenance: Provenance::Llm,
                        model_id: Some(client.model_id().to_owned()),
                    })
                }
                Err(reason) if !allow_fallback => {
                    return Err(Error::Llm(format!(
                        "{} rejected model output: {reason}",
                        client.model_id()
                    )))
                }
                Err(_) => {}
            },
            Err(e) if !allow_fallback => return Err(e),
            Err(_) => {}
        }
    }
    let text = template_rewrite(request, rng, avoid)?;
    Ok(Rewrite {
        text,
        provenance: Provenance::Template,
        model_id: None,
    })
}

fn query_llm(request: &PromptRequest, client: &dyn LlmClient, retry: &RetryPolicy) -> Result<String> {
    let mut attempt = 0;
    loop {
        match client.send(&request.rendered) {
            Ok(text) => return Ok(clean_output(&text)),
            Err(LlmFailure::Transient(_)) if attempt < retry.max_retries => {
                std::thread::sleep(retry.delay(attempt));
                attempt += 1;
            }
            Err(failure) => {
                return Err(Error::Llm(format!(
                    "{} failed after {} attempts: {failure}",
                    client.model_id(),
                    attempt + 1
                )))
            }
        }
    }
}

/// Models often wrap the answer in quotes or prefix it with a label.
fn clean_output(text: &str) -> String {
    let mut t = text.trim();
    if let Some((head, rest)) = t.split_once(':') {
        if head.len() < 20 && head.to_lowercase().contains("sentence") {
            t = rest.trim();
        }
    }
    t.trim_matches(|c| c == '"' || c == '\u{201c}' || c == '\u{201d}')
        .trim()
        .to_owned()
}

fn validate_llm_output(request: &PromptRequest, text: &str, avoid: &HashSet<String>) -> std::result::Result<(), String> {
    if text.is_empty() {
        return Err("empty output".into());
    }
    if text == request.caption {
        return Err("output equals the source caption".into());
    }
    if avoid.contains(text) {
        return Err("output duplicates another candidate".into());
    }
    match request.template {
        PromptTemplate::Add => {
            let lower = text.to_lowercase();
            if let Some(missing) = request
                .objects
                .iter()
                .find(|o| !lower.contains(&o.to_lowercase()))
            {
                return Err(format!("inserted text lacks {missing:?}"));
            }
        }
        PromptTemplate::RemoveObject => {
            if let Some(kept) = request.objects.iter().find(|o| contains_object(text, o)) {
                return Err(format!("removed text still mentions {kept:?}"));
            }
        }
        PromptTemplate::AlterObject => {}
    }
    Ok(())
}

fn pick_alteration<R: Rng + ?Sized>(
    base: &str,
    protected: &[String],
    forbidden: &[String],
    source: &str,
    avoid: &HashSet<String>,
    rng: &mut R,
) -> Option<String> {
    let candidates: Vec<String> = alter_candidates(base, protected, forbidden)
        .into_iter()
        .filter(|c| c != source && !avoid.contains(c))
        .collect();
    candidates.choose(rng).cloned()
}

fn template_rewrite<R: Rng + ?Sized>(
    request: &PromptRequest,
    rng: &mut R,
    avoid: &HashSet<String>,
) -> Result<String> {
    let caption = request.caption.as_str();
    let usable = |t: &str| !t.trim().is_empty() && t != caption && !avoid.contains(t);
    let text = match request.template {
        PromptTemplate::Add => {
            let inserted = insert_objects(caption, &request.objects);
            if usable(&inserted) {
                Some(inserted)
            } else {
                pick_alteration(&inserted, &request.objects, &[], caption, avoid, rng)
            }
        }
        PromptTemplate::RemoveObject => {
            let stripped = remove_objects(caption, &request.objects);
            if usable(&stripped) {
                Some(stripped)
            } else {
                // Objects not mentioned in the caption (or the result already
                // taken): alter what is left instead.
                let base = if stripped.trim().is_empty() { caption } else { &stripped };
                pick_alteration(base, &[], &request.objects, caption, avoid, rng)
            }
        }
        PromptTemplate::AlterObject => pick_alteration(caption, &[], &[], caption, avoid, rng),
    };
    text.ok_or_else(|| {
        Error::Generation(format!(
            "no {:?} rewrite of {caption:?} left that differs from the other candidates",
            request.template
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::countergen::prompt::render_prompt;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    struct Canned {
        replies: Vec<Result<String, LlmFailure>>,
        calls: AtomicUsize,
    }

    impl Canned {
        fn new(replies: Vec<Result<String, LlmFailure>>) -> Self {
            Self {
                replies,
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl LlmClient for Canned {
        fn send(&self, _prompt: &str) -> std::result::Result<String, LlmFailure> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies[i.min(self.replies.len() - 1)].clone()
        }

        fn model_id(&self) -> &str {
            "canned-1"
        }
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_retries: 2,
            base_delay: Duration::ZERO,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn add_request() -> PromptRequest {
        render_prompt(PromptTemplate::Add, "a dog runs in a park.", &["cat".into()]).unwrap()
    }

    #[test]
    fn template_add_without_client() {
        let out = rewrite_caption(&add_request(), None, &mut rng(), &HashSet::new(), &fast_retry(), true)
            .unwrap();
        assert_eq!(out.text, "a dog runs in a park with a cat.");
        assert_eq!(out.provenance, Provenance::Template);
        assert_eq!(out.model_id, None);
    }

    #[test]
    fn template_remove_drops_object() {
        let req = render_prompt(PromptTemplate::RemoveObject, "a dog and a cat sit.", &["cat".into()]).unwrap();
        let out = rewrite_caption(&req, None, &mut rng(), &HashSet::new(), &fast_retry(), true).unwrap();
        assert!(!out.text.contains("cat"));
        assert_eq!(out.text, "a dog sit.");
    }

    #[test]
    fn template_remove_of_unmentioned_object_alters_instead() {
        let req = render_prompt(PromptTemplate::RemoveObject, "a dog runs in a park.", &["bench".into()]).unwrap();
        let out = rewrite_caption(&req, None, &mut rng(), &HashSet::new(), &fast_retry(), true).unwrap();
        assert_ne!(out.text, "a dog runs in a park.");
        assert!(!contains_object(&out.text, "bench"));
    }

    #[test]
    fn llm_output_used_when_valid() {
        let client = Canned::new(vec![Ok("\"a dog and a cat run in a park.\"".into())]);
        let out = rewrite_caption(&add_request(), Some(&client), &mut rng(), &HashSet::new(), &fast_retry(), true)
            .unwrap();
        assert_eq!(out.text, "a dog and a cat run in a park.");
        assert_eq!(out.provenance, Provenance::Llm);
        assert_eq!(out.model_id.as_deref(), Some("canned-1"));
    }

    #[test]
    fn llm_output_missing_object_falls_back() {
        let client = Canned::new(vec![Ok("a dog runs quickly in a park.".into())]);
        let out = rewrite_caption(&add_request(), Some(&client), &mut rng(), &HashSet::new(), &fast_retry(), true)
            .unwrap();
        assert_eq!(out.provenance, Provenance::Template);
        assert_eq!(out.text, "a dog runs in a park with a cat.");
    }

    #[test]
    fn llm_removal_that_keeps_object_falls_back() {
        let req = render_prompt(PromptTemplate::RemoveObject, "a dog and a cat sit.", &["cat".into()]).unwrap();
        let client = Canned::new(vec![Ok("a dog and cats sit.".into())]);
        let out = rewrite_caption(&req, Some(&client), &mut rng(), &HashSet::new(), &fast_retry(), true).unwrap();
        assert_eq!(out.provenance, Provenance::Template);
    }

    #[test]
    fn transient_failures_are_retried() {
        let client = Canned::new(vec![
            Err(LlmFailure::Transient("503".into())),
            Err(LlmFailure::Transient("timeout".into())),
            Ok("a dog runs in a park next to a cat.".into()),
        ]);
        let out = rewrite_caption(&add_request(), Some(&client), &mut rng(), &HashSet::new(), &fast_retry(), false)
            .unwrap();
        assert_eq!(out.provenance, Provenance::Llm);
        assert_eq!(client.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn hard_failure_without_fallback_is_an_error() {
        let client = Canned::new(vec![Err(LlmFailure::Transient("503".into()))]);
        let err = rewrite_caption(&add_request(), Some(&client), &mut rng(), &HashSet::new(), &fast_retry(), false);
        assert!(matches!(err, Err(Error::Llm(_))));
        // 1 call + 2 retries
        assert_eq!(client.calls.load(Ordering::SeqCst), 3);

        let fatal = Canned::new(vec![Err(LlmFailure::Fatal("401".into()))]);
        let err = rewrite_caption(&add_request(), Some(&fatal), &mut rng(), &HashSet::new(), &fast_retry(), false);
        assert!(matches!(err, Err(Error::Llm(_))));
        assert_eq!(fatal.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn hard_failure_with_fallback_uses_template() {
        let client = Canned::new(vec![Err(LlmFailure::Fatal("401".into()))]);
        let out = rewrite_caption(&add_request(), Some(&client), &mut rng(), &HashSet::new(), &fast_retry(), true)
            .unwrap();
        assert_eq!(out.provenance, Provenance::Template);
    }

    #[test]
    fn alteration_avoids_taken_texts() {
        let req = render_prompt(PromptTemplate::AlterObject, "a red car.", &[]).unwrap();
        let mut avoid = HashSet::new();
        for _ in 0..5 {
            let out = rewrite_caption(&req, None, &mut rng(), &avoid, &fast_retry(), true).unwrap();
            assert!(avoid.insert(out.text));
        }
    }

    #[test]
    fn clean_output_strips_labels_and_quotes() {
        assert_eq!(clean_output("New sentence: \"a cat.\""), "a cat.");
        assert_eq!(clean_output("  a cat.  "), "a cat.");
    }
}
