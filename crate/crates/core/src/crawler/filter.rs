use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ImageCandidate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    pub min_width: u32,
    pub min_height: u32,
    pub allowed_mimes: BTreeSet<String>,
    /// At least 1.
    pub max_images_per_entity: usize,
    /// Substrings that disqualify an image URL.
    pub blocked_url_patterns: Vec<String>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            min_width: 64,
            min_height: 64,
            allowed_mimes: ["image/jpeg", "image/png", "image/gif", "image/webp"]
                .into_iter()
                .map(String::from)
                .collect(),
            max_images_per_entity: 25,
            blocked_url_patterns: vec!["/static/images/".into(), "Special:".into()],
        }
    }
}

impl FilterPolicy {
    pub fn with_cap(mut self, cap: usize) -> Self {
        self.max_images_per_entity = cap.max(1);
        self
    }

    pub fn with_min_dim(mut self, dim: u32) -> Self {
        self.min_width = dim;
        self.min_height = dim;
        self
    }

    /// Every predicate except the per-entity cap. Unknown dimensions pass.
    pub fn check(&self, c: &ImageCandidate) -> Option<RejectReason> {
        if self.blocked_url_patterns.iter().any(|p| !p.is_empty() && c.image_url.contains(p.as_str())) {
            return Some(RejectReason::BlockedUrl);
        }
        if !self.allowed_mimes.contains(&c.mime) {
            return Some(RejectReason::BadMime);
        }
        if self.too_small(c.width, c.height) {
            return Some(RejectReason::TooSmall);
        }
        None
    }

    pub fn too_small(&self, width: Option<u32>, height: Option<u32>) -> bool {
        width.is_some_and(|w| w < self.min_width) || height.is_some_and(|h| h < self.min_height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooSmall,
    BadMime,
    BlockedUrl,
    OverCap,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::TooSmall => "too_small",
            RejectReason::BadMime => "bad_mime",
            RejectReason::BlockedUrl => "blocked_url",
            RejectReason::OverCap => "over_cap",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterOutcome {
    pub accepted: Vec<ImageCandidate>,
    pub rejected: Vec<(ImageCandidate, RejectReason)>,
}

/// Partitions candidates. The cap is applied last, keeping the earliest
/// candidates in document order.
pub fn filter_images(candidates: &[ImageCandidate], policy: &FilterPolicy) -> FilterOutcome {
    let cap = policy.max_images_per_entity.max(1);
    let mut out = FilterOutcome::default();
    for c in candidates {
        match policy.check(c) {
            Some(reason) => out.rejected.push((c.clone(), reason)),
            None if out.accepted.len() >= cap => out.rejected.push((c.clone(), RejectReason::OverCap)),
            None => out.accepted.push(c.clone()),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cand(url: &str, w: Option<u32>, h: Option<u32>) -> ImageCandidate {
        ImageCandidate {
            page_url: "https://w/wiki/A".into(),
            image_url: url.into(),
            mime: super::super::mime_from_url(url),
            width: w,
            height: h,
            author: None,
            date: None,
        }
    }

    #[test]
    fn cap_keeps_document_order() {
        let cs: Vec<_> = (0..10).map(|i| cand(&format!("https://u/{i}.jpg"), Some(100), Some(100))).collect();
        let out = filter_images(&cs, &FilterPolicy::default().with_cap(5));
        assert_eq!(out.accepted, cs[..5]);
        assert_eq!(out.rejected.len(), 5);
        assert!(out.rejected.iter().all(|(_, r)| *r == RejectReason::OverCap));
    }

    #[test]
    fn small_and_svg_rejected() {
        let p = FilterPolicy::default();
        let out =
            filter_images(&[cand("https://u/a.jpg", Some(50), Some(50)), cand("https://u/logo.svg", None, None)], &p);
        assert!(out.accepted.is_empty());
        assert_eq!(out.rejected[0].1, RejectReason::TooSmall);
        assert_eq!(out.rejected[1].1, RejectReason::BadMime);
    }

    #[test]
    fn blocked_patterns() {
        let out = filter_images(
            &[cand("https://en.wikipedia.org/static/images/icon.png", Some(200), Some(200))],
            &FilterPolicy::default(),
        );
        assert_eq!(out.rejected[0].1, RejectReason::BlockedUrl);
    }

    fn arb_candidate() -> impl Strategy<Value = ImageCandidate> {
        (
            prop_oneof![Just("jpg"), Just("png"), Just("svg"), Just("gif"), Just("tiff")],
            prop::option::of(0u32..200),
            prop::option::of(0u32..200),
            any::<bool>(),
            0u32..1000,
        )
            .prop_map(|(ext, w, h, blocked, n)| {
                let dir = if blocked { "static/images" } else { "upload" };
                cand(&format!("https://u/{dir}/{n}.{ext}"), w, h)
            })
    }

    proptest! {
        #[test]
        fn partition_property(cs in prop::collection::vec(arb_candidate(), 0..40), cap in 1usize..10, min in 0u32..128) {
            let policy = FilterPolicy::default().with_cap(cap).with_min_dim(min);
            let out = filter_images(&cs, &policy);
            prop_assert_eq!(out.accepted.len() + out.rejected.len(), cs.len());
            prop_assert!(out.accepted.len() <= cap);
            for a in &out.accepted {
                prop_assert_eq!(policy.check(a), None);
            }
            for (c, r) in &out.rejected {
                match policy.check(c) {
                    Some(reason) => prop_assert_eq!(reason, *r),
                    None => prop_assert_eq!(*r, RejectReason::OverCap),
                }
            }
            // accepted preserves input order
            let mut it = cs.iter();
            for a in &out.accepted {
                prop_assert!(it.any(|c| c == a));
            }
        }
    }
}
