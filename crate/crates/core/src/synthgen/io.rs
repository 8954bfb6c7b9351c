//! `meta.csv` + `images.bin` dataset files.
//!
//! `images.bin`: magic `SYNFUND1`, then `u32` count, channels, height, width
//! (little-endian), then `count * channels * height * width` little-endian
//! `f32` pixels in row-major order, image order matching `meta.csv` rows.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::split::{SplitAssignment, SplitName};
use super::{Dataset, Sa, Sample, SynthError};

pub const IMAGES_MAGIC: &[u8; 8] = b"SYNFUND1";
pub const META_HEADER: &str = "image_id,patient_id,dr,age,sex,education,insurance,obesity";

/// Write `meta.csv` and `images.bin` into `dir`, including the `split`
/// column when an assignment is given.
pub fn save_dataset(dataset: &Dataset, splits: Option<&SplitAssignment>, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    let mut meta = String::from(META_HEADER);
    if splits.is_some() {
        meta.push_str(",split");
    }
    meta.push('\n');
    for s in &dataset.samples {
        meta.push_str(&format!("{},{},{}", s.image_id, s.patient_id, s.dr_label));
        for g in s.sa {
            meta.push_str(&format!(",{g}"));
        }
        if let Some(sp) = splits {
            let name = sp
                .split_of(&s.patient_id)
                .ok_or_else(|| SynthError::Split(format!("patient {} is not assigned", s.patient_id)))?;
            meta.push_str(&format!(",{name}"));
        }
        meta.push('\n');
    }
    fs::write(dir.join("meta.csv"), meta)?;

    let mut bin = Vec::with_capacity(24 + dataset.len() * dataset.pixels_per_image() * 4);
    bin.write_all(IMAGES_MAGIC)?;
    for v in [dataset.len(), dataset.channels, dataset.height, dataset.width] {
        bin.write_all(&(v as u32).to_le_bytes())?;
    }
    for s in &dataset.samples {
        for &p in &s.image {
            bin.write_all(&p.to_le_bytes())?;
        }
    }
    fs::write(dir.join("images.bin"), bin)?;
    Ok(())
}

struct MetaRow {
    image_id: String,
    patient_id: String,
    dr: u8,
    sa: [u8; 5],
    split: Option<SplitName>,
}

fn parse_bit(field: &str, row: usize, col: &str) -> Result<u8, SynthError> {
    match field {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(SynthError::Metadata {
            row,
            msg: format!("column `{col}` must be 0 or 1, got `{other}`"),
        }),
    }
}

fn parse_meta(text: &str) -> Result<(Vec<MetaRow>, bool), SynthError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| SynthError::Metadata {
        row: 0,
        msg: "empty meta.csv".into(),
    })?;
    let has_split = if header == META_HEADER {
        false
    } else if header == format!("{META_HEADER},split") {
        true
    } else {
        return Err(SynthError::Metadata {
            row: 0,
            msg: format!("unexpected header `{header}`"),
        });
    };
    let width = if has_split { 9 } else { 8 };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != width {
            return Err(SynthError::Metadata {
                row,
                msg: format!("expected {width} fields, found {}", f.len()),
            });
        }
        let mut sa = [0u8; 5];
        for a in Sa::ALL {
            sa[a.index()] = parse_bit(f[3 + a.index()], row, a.name())?;
        }
        let split = if has_split {
            Some(f[8].parse().map_err(|msg| SynthError::Metadata { row, msg })?)
        } else {
            None
        };
        rows.push(MetaRow {
            image_id: f[0].to_string(),
            patient_id: f[1].to_string(),
            dr: parse_bit(f[2], row, "dr")?,
            sa,
            split,
        });
    }
    Ok((rows, has_split))
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Read a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Option<SplitAssignment>), SynthError> {
    let bin = fs::read(dir.join("images.bin"))?;
    if bin.len() < 24 || &bin[..8] != IMAGES_MAGIC {
        return Err(SynthError::MalformedHeader(if bin.len() < 8 {
            "file shorter than the magic bytes".into()
        } else if &bin[..8] != IMAGES_MAGIC {
            format!("bad magic {:?}", String::from_utf8_lossy(&bin[..8]))
        } else {
            "header shorter than 24 bytes".into()
        }));
    }
    let (count, channels, height, width) = (
        read_u32(&bin, 8) as usize,
        read_u32(&bin, 12) as usize,
        read_u32(&bin, 16) as usize,
        read_u32(&bin, 20) as usize,
    );
    if channels == 0 || height == 0 || width == 0 {
        return Err(SynthError::MalformedHeader(format!(
            "zero dimension in header ({channels}x{height}x{width})"
        )));
    }
    let per = channels * height * width;
    let expected = count
        .checked_mul(per)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| SynthError::MalformedHeader("tensor size overflows".into()))?;
    let found = bin.len() - 24;
    if found < expected {
        return Err(SynthError::TruncatedTensor { expected, found });
    }
    if found > expected {
        return Err(SynthError::MalformedHeader(format!(
            "{} trailing bytes after the tensor block",
            found - expected
        )));
    }

    let text = fs::read_to_string(dir.join("meta.csv"))?;
    let (rows, has_split) = parse_meta(&text)?;
    if rows.len() != count {
        return Err(SynthError::CountMismatch {
            meta: rows.len(),
            tensors: count,
        });
    }

    let mut patient_sa: HashMap<&str, [u8; 5]> = HashMap::new();
    for (i, r) in rows.iter().enumerate() {
        let prev = patient_sa.entry(&r.patient_id).or_insert(r.sa);
        if *prev != r.sa {
            return Err(SynthError::Metadata {
                row: i + 1,
                msg: format!("patient {} has inconsistent attributes", r.patient_id),
            });
        }
    }

    let pixels = &bin[24..];
    let mut samples = Vec::with_capacity(count);
    let mut tags = Vec::with_capacity(count);
    for (i, r) in rows.into_iter().enumerate() {
        let chunk = &pixels[i * per * 4..(i + 1) * per * 4];
        let image = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tags.extend(r.split);
        samples.push(Sample {
            image,
            dr_label: r.dr,
            sa: r.sa,
            patient_id: r.patient_id,
            image_id: r.image_id,
        });
    }
    let dataset = Dataset {
        channels,
        height,
        width,
        samples,
    };
    let splits = if has_split {
        Some(SplitAssignment::from_tags(&dataset, &tags)?)
    } else {
        None
    };
    Ok((dataset, splits))
}
