//! Plain-text pixmaps (PPM `P3`, maxval 255).
//!
//! Channel values `v ∈ [0, 1]` are stored as `round(255·v)`, so images whose
//! values are multiples of 1/255 (binary silhouettes included) round-trip
//! exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoders::ImageInput;
use crate::error::{Error, ParseErrorKind, Result};
use crate::tensor::Tensor;

pub const MAXVAL: u32 = 255;

pub fn ppm_string(image: &ImageInput) -> String {
    let (h, w) = (image.height(), image.width());
    let mut s = String::with_capacity(h * w * 12 + 32);
    let _ = write!(s, "P3\n{w} {h}\n{MAXVAL}\n");
    for row in image.pixels().data().chunks(w * 3) {
        let vals: Vec<String> = row
            .iter()
            .map(|v| ((v * MAXVAL as f64).round() as u32).to_string())
            .collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
    s
}

pub fn save_ppm(path: impl AsRef<Path>, image: &ImageInput) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ppm_string(image)).map_err(|e| Error::io(path, e))
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<ImageInput> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&text, path)
}

pub fn parse_ppm(text: &str, path: &Path) -> Result<ImageInput> {
    let err = |line: usize, kind| Error::Parse {
        path: path.to_path_buf(),
        line,
        kind,
    };
    // whitespace-separated tokens with their line numbers; `#` starts a comment
    let mut toks = text.lines().enumerate().flat_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("");
        l.split_whitespace().map(move |t| (i + 1, t))
    });
    let mut last_line = 1;
    let mut header_num = |toks: &mut dyn Iterator<Item = (usize, &str)>, what: &str| {
        match toks.next() {
            Some((line, t)) => {
                last_line = line;
                t.parse::<usize>()
                    .map_err(|_| err(line, ParseErrorKind::MalformedHeader(format!("bad {what} {t:?}"))))
            }
            None => Err(err(last_line, ParseErrorKind::MalformedHeader(format!("missing {what}")))),
        }
    };
    match toks.next() {
        Some((_, "P3")) => {}
        Some((line, t)) => {
            return Err(err(line, ParseErrorKind::MalformedHeader(format!("magic {t:?} is not P3"))))
        }
        None => return Err(err(1, ParseErrorKind::MalformedHeader("empty file".into()))),
    }
    let w = header_num(&mut toks, "width")?;
    let h = header_num(&mut toks, "height")?;
    let maxval = header_num(&mut toks, "maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(err(last_line, ParseErrorKind::MalformedHeader(format!("{w}x{h} maxval {maxval}"))));
    }
    let want = w * h * 3;
    let mut data = Vec::with_capacity(want);
    let mut line = last_line;
    for (l, t) in toks {
        line = l;
        let v: u32 = t
            .parse()
            .ok()
            .filter(|&v| v as usize <= maxval)
            .ok_or_else(|| err(l, ParseErrorKind::NonNumeric(t.into())))?;
        data.push(v as f64 / maxval as f64);
    }
    if data.len() != want {
        return Err(err(
            line,
            ParseErrorKind::CountMismatch {
                declared: want,
                found: data.len(),
            },
        ));
    }
    ImageInput::new(Tensor::new(vec![h, w, 3], data)?)
}
