//! On-disk corpus layout: `<dir>/<domain>/<class>/<index>.ppm` (binary P6,
//! 8-bit) plus a tab-separated `manifest.tsv` listing every sample in order.

use super::{Corpus, DomainCorpus, Image, Result, SynthError};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "path\ty\tdomain";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn encode_ppm(img: &Image) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Image> {
    let bad = |msg: &str| SynthError::Ppm {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut next_token = || -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token().as_deref() != Some("P6") {
        return Err(bad("missing P6 magic"));
    }
    let mut num = || -> Option<usize> { next_token()?.parse().ok() };
    let (w, h, max) = match (num(), num(), num()) {
        (Some(w), Some(h), Some(m)) => (w, h, m),
        _ => return Err(bad("malformed header")),
    };
    if max != 255 || w == 0 || h == 0 {
        return Err(bad("only non-empty 8-bit images are supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = &bytes[pos + 1..];
    if body.len() != 3 * w * h {
        return Err(bad(&format!(
            "expected {} raster bytes, found {}",
            3 * w * h,
            body.len()
        )));
    }
    let mut img = Image::filled(3, h, w, 0.0);
    for (i, px) in body.chunks(3).enumerate() {
        for c in 0..3 {
            img.set(c, i / w, i % w, px[c] as f64 / 255.0);
        }
    }
    Ok(img)
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for domain in &corpus.domains {
        let mut per_class = [0usize; 2];
        for (img, &y) in domain.images.iter().zip(&domain.labels) {
            let rel = format!("{}/{}/{:05}.ppm", domain.id, y, per_class[y]);
            per_class[y] += 1;
            let path = dir.join(&rel);
            let parent = path.parent().expect("file has a parent");
            fs::create_dir_all(parent).map_err(io_err(parent))?;
            fs::write(&path, encode_ppm(img)).map_err(io_err(&path))?;
            manifest.push_str(&format!("{rel}\t{y}\t{}\n", domain.id));
        }
    }
    let path = dir.join(MANIFEST_NAME);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(manifest.as_bytes()).map_err(io_err(&path))?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(SynthError::Manifest {
                line: 1,
                msg: format!("expected header {MANIFEST_HEADER:?}, found {other:?}"),
            })
        }
    }
    let mut corpus = Corpus::default();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [rel, y, domain] = fields[..] else {
            return Err(SynthError::Manifest {
                line: lineno,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        };
        let y: usize = match y.parse() {
            Ok(v @ (0 | 1)) => v,
            _ => {
                return Err(SynthError::Manifest {
                    line: lineno,
                    msg: format!("class must be 0 or 1, found {y:?}"),
                })
            }
        };
        let file = dir.join(rel);
        let bytes = fs::read(&file).map_err(io_err(&file))?;
        let img = decode_ppm(&bytes, &file)?;
        let slot = match corpus.domains.iter().position(|d| d.id == domain) {
            Some(k) => k,
            None => {
                corpus.domains.push(DomainCorpus {
                    id: domain.to_string(),
                    images: Vec::new(),
                    labels: Vec::new(),
                });
                corpus.domains.len() - 1
            }
        };
        corpus.domains[slot].images.push(img);
        corpus.domains[slot].labels.push(y);
    }
    Ok(corpus)
}
