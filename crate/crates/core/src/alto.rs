//! METS/ALTO OCR parsing into word tokens with page-normalized boxes.
//!
//! Elements are matched by local name so ALTO v1 through v4 (and ALTO
//! embedded in a METS wrapper) parse the same way. Coordinates are divided
//! by the ALTO `Page` element's own `WIDTH`/`HEIGHT`, which makes the result
//! independent of the file's measurement unit.

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::NormBox;

#[derive(Debug, Error)]
pub enum AltoError {
    #[error("malformed XML at byte {offset}: {message}")]
    Malformed { offset: u64, message: String },
    #[error("cannot resolve coordinate units: {0}")]
    UnitResolution(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordToken {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: NormBox,
    pub order_index: usize,
}

/// What the coordinates were divided by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleBasis {
    PageDimensions,
    /// The `Page` element had no usable dimensions; the far edge of the
    /// token extent was used instead.
    TokenExtent,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleNote {
    pub basis: ScaleBasis,
    pub measurement_unit: Option<String>,
    /// ALTO units per image pixel along x and y.
    pub units_per_pixel: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AltoPage {
    pub source_width: f64,
    pub source_height: f64,
    pub tokens: Vec<WordToken>,
    pub scale_note: ScaleNote,
    /// `String` elements seen in the document.
    pub string_count: usize,
    /// `String` elements that produced no token (missing coordinates, empty
    /// content or a zero-area box).
    pub skipped: usize,
}

struct RawWord {
    text: String,
    hpos: f64,
    vpos: f64,
    width: f64,
    height: f64,
}

fn attr_map(e: &BytesStart<'_>) -> Result<Vec<(Vec<u8>, String)>, String> {
    let mut out = Vec::new();
    for attr in e.attributes() {
        let attr = attr.map_err(|err| err.to_string())?;
        let value = attr
            .unescape_value()
            .map_err(|err| err.to_string())?
            .into_owned();
        out.push((attr.key.local_name().as_ref().to_vec(), value));
    }
    Ok(out)
}

fn get<'a>(attrs: &'a [(Vec<u8>, String)], key: &str) -> Option<&'a str> {
    attrs
        .iter()
        .find(|(k, _)| k.as_slice() == key.as_bytes())
        .map(|(_, v)| v.as_str())
}

fn get_f64(attrs: &[(Vec<u8>, String)], key: &str) -> Option<f64> {
    get(attrs, key)
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|v| v.is_finite())
}

/// Parses ALTO XML. `image_width`/`image_height` are the pixel dimensions of
/// the page image the tokens will be matched against; they only feed the
/// [`ScaleNote`].
pub fn parse_alto(xml: &[u8], image_width: u32, image_height: u32) -> Result<AltoPage, AltoError> {
    let mut reader = Reader::from_reader(xml);
    let mut page_dims: Option<(f64, f64)> = None;
    let mut unit: Option<String> = None;
    let mut words: Vec<Option<RawWord>> = Vec::new();
    let mut depth: usize = 0;
    let mut saw_element = false;

    let malformed = |reader: &Reader<&[u8]>, message: String| AltoError::Malformed {
        offset: reader.error_position(),
        message,
    };

    loop {
        let event = reader
            .read_event()
            .map_err(|e| malformed(&reader, e.to_string()))?;
        let (elem, is_empty) = match event {
            Event::Start(e) => {
                depth += 1;
                (e, false)
            }
            Event::Empty(e) => (e, true),
            Event::End(_) => {
                depth = depth.saturating_sub(1);
                continue;
            }
            Event::Eof => break,
            _ => continue,
        };
        saw_element = true;
        match elem.local_name().as_ref() {
            b"MeasurementUnit" if !is_empty => {
                let text = reader
                    .read_text(elem.name())
                    .map_err(|e| malformed(&reader, e.to_string()))?;
                depth = depth.saturating_sub(1);
                unit = Some(text.trim().to_string());
            }
            b"Page" if page_dims.is_none() => {
                let attrs = attr_map(&elem).map_err(|m| malformed(&reader, m))?;
                if let (Some(w), Some(h)) = (get_f64(&attrs, "WIDTH"), get_f64(&attrs, "HEIGHT")) {
                    if w > 0.0 && h > 0.0 {
                        page_dims = Some((w, h));
                    }
                }
            }
            b"String" => {
                let attrs = attr_map(&elem).map_err(|m| malformed(&reader, m))?;
                let coords = (
                    get_f64(&attrs, "HPOS"),
                    get_f64(&attrs, "VPOS"),
                    get_f64(&attrs, "WIDTH"),
                    get_f64(&attrs, "HEIGHT"),
                );
                let text: String = get(&attrs, "CONTENT")
                    .unwrap_or_default()
                    .chars()
                    .filter(|c| !c.is_whitespace())
                    .collect();
                words.push(match coords {
                    (Some(hpos), Some(vpos), Some(width), Some(height)) if !text.is_empty() => {
                        Some(RawWord {
                            text,
                            hpos,
                            vpos,
                            width,
                            height,
                        })
                    }
                    _ => None,
                });
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err(AltoError::Malformed {
            offset: xml.len() as u64,
            message: format!("document ended with {depth} unclosed element(s)"),
        });
    }
    if !saw_element {
        return Err(AltoError::Malformed {
            offset: 0,
            message: "no XML elements found".into(),
        });
    }

    let string_count = words.len();
    let (basis, (page_w, page_h)) = match page_dims {
        Some(dims) => (ScaleBasis::PageDimensions, dims),
        None => {
            let extent = words.iter().flatten().fold((0.0f64, 0.0f64), |acc, w| {
                (acc.0.max(w.hpos + w.width), acc.1.max(w.vpos + w.height))
            });
            if extent.0 <= 0.0 || extent.1 <= 0.0 {
                return Err(AltoError::UnitResolution(
                    "Page element has no WIDTH/HEIGHT and no positioned words".into(),
                ));
            }
            log::warn!("ALTO Page lacks dimensions; normalizing by token extent {extent:?}");
            (ScaleBasis::TokenExtent, extent)
        }
    };

    let mut tokens = Vec::with_capacity(string_count);
    for w in words.into_iter().flatten() {
        let bbox = NormBox::from_pixels(w.hpos, w.vpos, w.width, w.height, page_w, page_h);
        if let Ok(bbox) = bbox {
            tokens.push(WordToken {
                text: w.text,
                bbox,
                order_index: tokens.len(),
            });
        }
    }
    let skipped = string_count - tokens.len();

    Ok(AltoPage {
        source_width: page_w,
        source_height: page_h,
        tokens,
        scale_note: ScaleNote {
            basis,
            measurement_unit: unit,
            units_per_pixel: (
                page_w / f64::from(image_width.max(1)),
                page_h / f64::from(image_height.max(1)),
            ),
        },
        string_count,
        skipped,
    })
}
