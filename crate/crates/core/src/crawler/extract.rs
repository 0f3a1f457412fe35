use std::sync::OnceLock;

use regex::Regex;
use scraper::{ElementRef, Html, Selector};
use url::Url;

use super::{mime_from_url, ImageCandidate, PageDocument};

fn meta_key_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(date|author)\s*=\s*").unwrap())
}

/// `date=...` / `author=...` pairs from free text such as a figure caption.
fn parse_meta(text: &str) -> (Option<String>, Option<String>) {
    let keys: Vec<_> = meta_key_re().captures_iter(text).collect();
    let (mut author, mut date) = (None, None);
    for (i, cap) in keys.iter().enumerate() {
        let whole = cap.get(0).unwrap();
        let end = keys.get(i + 1).map_or(text.len(), |next| next.get(0).unwrap().start());
        let value = text[whole.end()..end]
            .split(['\n', ';', '|'])
            .next()
            .unwrap_or_default()
            .trim()
            .trim_end_matches([',', '.'])
            .trim();
        if value.is_empty() {
            continue;
        }
        match cap[1].to_ascii_lowercase().as_str() {
            "date" if date.is_none() => date = Some(value.to_owned()),
            "author" if author.is_none() => author = Some(value.to_owned()),
            _ => {}
        }
    }
    (author, date)
}

fn nearest_figure(img: ElementRef<'_>) -> Option<ElementRef<'_>> {
    img.ancestors().filter_map(ElementRef::wrap).find(|e| e.value().name() == "figure")
}

/// Image candidates in document order. Relative sources are resolved against
/// the page URL; non-HTTP sources are dropped. Author/date come from the img's
/// `data-author`/`data-date` attributes, else from `author=`/`date=` in the
/// enclosing figure's caption.
pub fn extract_images(page: &PageDocument) -> Vec<ImageCandidate> {
    if !page.html.contains('<') {
        tracing::warn!(url = %page.url, "page body is not HTML; no images extracted");
        return Vec::new();
    }
    let Ok(base) = Url::parse(&page.url) else {
        tracing::warn!(url = %page.url, "page url is not absolute; no images extracted");
        return Vec::new();
    };
    let doc = Html::parse_document(&page.html);
    let img_sel = Selector::parse("img").unwrap();
    let caption_sel = Selector::parse("figcaption").unwrap();

    let mut out = Vec::new();
    for img in doc.select(&img_sel) {
        let el = img.value();
        let Some(src) = el.attr("src").or_else(|| el.attr("data-src")).map(str::trim) else {
            continue;
        };
        let Ok(abs) = base.join(src) else { continue };
        if !matches!(abs.scheme(), "http" | "https") {
            continue;
        }
        let dim = |name: &str| el.attr(name).and_then(|v| v.trim().trim_end_matches("px").parse::<u32>().ok());

        let (mut author, mut date) = (
            el.attr("data-author").map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()),
            el.attr("data-date").map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()),
        );
        if author.is_none() || date.is_none() {
            if let Some(fig) = nearest_figure(img) {
                let caption: String = fig.select(&caption_sel).flat_map(|c| c.text()).collect::<Vec<_>>().join(" ");
                let (a, d) = parse_meta(&caption);
                author = author.or(a);
                date = date.or(d);
            }
        }

        let image_url = abs.to_string();
        out.push(ImageCandidate {
            page_url: page.url.clone(),
            mime: mime_from_url(&image_url),
            image_url,
            width: dim("width"),
            height: dim("height"),
            author,
            date,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(html: &str) -> PageDocument {
        PageDocument {
            title: "Amsterdam".into(),
            url: "https://en.wikipedia.org/wiki/Amsterdam".into(),
            status: 200,
            html: html.into(),
            retries: 0,
        }
    }

    #[test]
    fn three_images_in_document_order() {
        let c = extract_images(&page(
            r#"<p><img src="https://a.org/1.jpg"></p><div><img src="https://a.org/2.png"><img src="https://a.org/3.gif"></div>"#,
        ));
        let urls: Vec<_> = c.iter().map(|c| c.image_url.as_str()).collect();
        assert_eq!(urls, ["https://a.org/1.jpg", "https://a.org/2.png", "https://a.org/3.gif"]);
        assert_eq!(c[1].mime, "image/png");
    }

    #[test]
    fn relative_sources_are_absolutized() {
        let c = extract_images(&page(r#"<img src="/static/a.png"><img src="//upload.wikimedia.org/x/b.jpg">"#));
        assert_eq!(c[0].image_url, "https://en.wikipedia.org/static/a.png");
        assert_eq!(c[1].image_url, "https://upload.wikimedia.org/x/b.jpg");
    }

    #[test]
    fn figure_caption_metadata() {
        let c = extract_images(&page(
            r#"<figure><img src="a.jpg" width="220" height="150"><figcaption>Canal view. date=2019-05-01; author=Jan de Vries</figcaption></figure>
               <img src="b.jpg">"#,
        ));
        assert_eq!(c[0].date.as_deref(), Some("2019-05-01"));
        assert_eq!(c[0].author.as_deref(), Some("Jan de Vries"));
        assert_eq!((c[0].width, c[0].height), (Some(220), Some(150)));
        assert_eq!((c[1].author.clone(), c[1].date.clone()), (None, None));
    }

    #[test]
    fn attributes_take_precedence() {
        let c = extract_images(&page(
            r#"<figure><img src="a.jpg" data-date="2001-01-01"><figcaption>date=2019-05-01 author=X</figcaption></figure>"#,
        ));
        assert_eq!(c[0].date.as_deref(), Some("2001-01-01"));
        assert_eq!(c[0].author.as_deref(), Some("X"));
    }

    #[test]
    fn data_uris_and_garbage_are_skipped() {
        assert!(extract_images(&page(r#"<img src="data:image/png;base64,AAAA">"#)).is_empty());
        assert!(extract_images(&page("not html at all")).is_empty());
        assert!(extract_images(&page("<img>")).is_empty());
    }
}
