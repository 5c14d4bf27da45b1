//! Annotation CSV reading and writing.
//!
//! Columns: `id, video_id, frame_idx, f0 .. f{d-1}, v, a, expr, au_1 .. au_26`
//! (the canonical AUs only) and an optional `compound`. Blank cells are
//! missing labels. `expr` is an index or an emotion name; `compound` is an
//! index into the compound profile list used for scoring.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::{HeterogeneousSample, SequenceKey};
use crate::relatedness::{CANONICAL_AUS, EMOTIONS, NUM_AUS};

fn au_column(au: u32) -> String {
    format!("au_{au}")
}

/// Header for samples with `feature_dim` features.
pub fn header(feature_dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["id", "video_id", "frame_idx"].iter().map(|s| s.to_string()).collect();
    h.extend((0..feature_dim).map(|i| format!("f{i}")));
    h.extend(["v", "a", "expr"].iter().map(|s| s.to_string()));
    h.extend(CANONICAL_AUS.iter().map(|&au| au_column(au)));
    h.push("compound".into());
    h
}

pub fn write_samples<W: Write>(writer: W, samples: &[HeterogeneousSample]) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(dim))?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for s in samples {
        if s.features.len() != dim {
            return Err(Error::Data(format!(
                "sample `{}` has {} features, expected {dim}",
                s.id,
                s.features.len()
            )));
        }
        let mut row = vec![
            s.id.clone(),
            opt(s.sequence_key.as_ref().map(|k| k.video.clone())),
            opt(s.sequence_key.as_ref().map(|k| k.frame.to_string())),
        ];
        row.extend(s.features.iter().map(|f| f.to_string()));
        row.push(opt(s.va.map(|va| va[0].to_string())));
        row.push(opt(s.va.map(|va| va[1].to_string())));
        row.push(opt(s.expr.map(|e| e.to_string())));
        for k in 0..NUM_AUS {
            let y = s.au.as_ref().and_then(|a| a.get(k).copied().flatten());
            row.push(opt(y.map(|b| u8::from(b).to_string())));
        }
        row.push(opt(s.compound.map(|c| c.to_string())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save(path: &Path, samples: &[HeterogeneousSample]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(Error::at(path))?;
    write_samples(std::io::BufWriter::new(f), samples)
}

pub fn load(path: &Path) -> Result<Vec<HeterogeneousSample>> {
    let f = std::fs::File::open(path).map_err(Error::at(path))?;
    read_samples(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        e => e,
    })
}

struct Layout {
    id: usize,
    video: Option<usize>,
    frame: Option<usize>,
    features: Vec<usize>,
    v: Option<usize>,
    a: Option<usize>,
    expr: Option<usize>,
    aus: Vec<Option<usize>>,
    compound: Option<usize>,
}

impl Layout {
    fn from_header(h: &csv::StringRecord) -> Result<Self> {
        let find = |name: &str| h.iter().position(|c| c.trim() == name);
        if find("feature_file").is_some() {
            return Err(Error::Data("feature-file references are not supported; inline f0..fN columns".into()));
        }
        let id = find("id").ok_or_else(|| Error::Data("missing `id` column".into()))?;
        let mut features = Vec::new();
        while let Some(i) = find(&format!("f{}", features.len())) {
            features.push(i);
        }
        if features.is_empty() {
            return Err(Error::Data("no feature columns (f0, f1, ...)".into()));
        }
        for c in h.iter().map(str::trim) {
            if let Some(n) = c.strip_prefix("au_") {
                let known = n.parse::<u32>().is_ok_and(|n| CANONICAL_AUS.contains(&n));
                if !known {
                    return Err(Error::Data(format!("unknown AU column `{c}`")));
                }
            }
        }
        let (v, a) = (find("v"), find("a"));
        if v.is_some() != a.is_some() {
            return Err(Error::Data("`v` and `a` columns must appear together".into()));
        }
        Ok(Self {
            id,
            video: find("video_id"),
            frame: find("frame_idx"),
            features,
            v,
            a,
            expr: find("expr"),
            aus: CANONICAL_AUS.iter().map(|&au| find(&au_column(au))).collect(),
            compound: find("compound"),
        })
    }
}

pub fn read_samples<R: Read>(reader: R) -> Result<Vec<HeterogeneousSample>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let layout = Layout::from_header(r.headers()?)?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = line + 2;
        let cell = |i: Option<usize>| i.and_then(|i| rec.get(i)).filter(|c| !c.is_empty());
        let bad = |what: &str, c: &str| Error::Data(format!("row {row}: bad {what} `{c}`"));
        let num = |what: &str, c: &str| c.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| bad(what, c));

        let id = rec.get(layout.id).unwrap_or_default().to_string();
        let features = layout
            .features
            .iter()
            .map(|&i| num("feature", rec.get(i).unwrap_or_default()))
            .collect::<Result<Vec<_>>>()?;
        let va = match (cell(layout.v), cell(layout.a)) {
            (Some(v), Some(a)) => Some([num("valence", v)?, num("arousal", a)?]),
            (None, None) => None,
            _ => return Err(Error::Data(format!("row {row}: valence and arousal must both be present or both blank"))),
        };
        let expr = cell(layout.expr)
            .map(|c| {
                c.parse::<usize>()
                    .ok()
                    .filter(|&e| e < EMOTIONS.len())
                    .or_else(|| EMOTIONS.iter().position(|n| n.eq_ignore_ascii_case(c)))
                    .ok_or_else(|| bad("expression", c))
            })
            .transpose()?;
        let au_cells = layout
            .aus
            .iter()
            .map(|&i| match cell(i) {
                None => Ok(None),
                Some("0") => Ok(Some(false)),
                Some("1") => Ok(Some(true)),
                Some(c) => Err(bad("AU value", c)),
            })
            .collect::<Result<Vec<_>>>()?;
        let au = au_cells.iter().any(Option::is_some).then_some(au_cells);
        let sequence_key = match (cell(layout.video), cell(layout.frame)) {
            (Some(v), Some(f)) => Some(SequenceKey {
                video: v.to_string(),
                frame: f.parse().map_err(|_| bad("frame index", f))?,
            }),
            (None, None) => None,
            _ => return Err(Error::Data(format!("row {row}: video_id and frame_idx must both be present or both blank"))),
        };
        let compound = cell(layout.compound)
            .map(|c| c.parse::<usize>().map_err(|_| bad("compound index", c)))
            .transpose()?;
        let sample = HeterogeneousSample {
            id,
            features,
            va,
            expr,
            au,
            au_weights: None,
            sequence_key,
            compound,
        };
        sample.validate().map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        out.push(sample);
    }
    Ok(out)
}
