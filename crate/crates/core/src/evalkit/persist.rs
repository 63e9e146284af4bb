//! On-disk layout of benchmark sequences and tracking output.
//!
//! A sequence directory holds `00000001.ppm, 00000002.ppm, ...`, `gt.txt`
//! and `init.txt` with one `x y w h` row per line, and `params.txt` with
//! `key=value` generator settings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::generate::{GeneratorParams, SequenceRecord};
use super::report::fmt6;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::Frame;

pub fn frame_file_name(index: usize) -> String {
    format!("{:08}.ppm", index + 1)
}

fn boxes_text(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        let _ = writeln!(s, "{} {} {} {}", fmt6(b.x), fmt6(b.y), fmt6(b.w), fmt6(b.h));
    }
    s
}

pub fn params_text(p: &GeneratorParams, seed: u64) -> String {
    format!(
        "seed={seed}\nframe_size={}\nnum_frames={}\ntarget_size={}\ntarget_sides={}\nhue_drift={}\nscale_drift={}\ndistractors={}\ndistractor_hue_jitter={}\nmotion_step={}\nmomentum={}\n",
        p.frame_size,
        p.num_frames,
        p.target_size,
        p.target_sides,
        p.hue_drift,
        p.scale_drift,
        p.distractors,
        p.distractor_hue_jitter,
        p.motion_step,
        p.momentum
    )
}

pub fn write_sequence(dir: &Path, rec: &SequenceRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in rec.frames.iter().enumerate() {
        f.save_ppm(&dir.join(frame_file_name(i)))?;
    }
    fs::write(dir.join("gt.txt"), boxes_text(&rec.gt))?;
    fs::write(dir.join("init.txt"), boxes_text(&rec.gt[..1.min(rec.gt.len())]))?;
    fs::write(dir.join("params.txt"), params_text(&rec.params, rec.seed))?;
    Ok(())
}

/// Parses whitespace-separated `x y w h` rows; blank lines are skipped.
pub fn parse_boxes(path: &Path, text: &str) -> Result<Vec<BBox>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if vals.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected 4 values, got {}", n + 1, vals.len())));
        }
        out.push(BBox::new(vals[0], vals[1], vals[2], vals[3]));
    }
    Ok(out)
}

pub fn read_boxes(path: &Path) -> Result<Vec<BBox>> {
    parse_boxes(path, &fs::read_to_string(path)?)
}

/// Image files in `dir` with a portable-pixmap extension, sorted by name.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "ppm" | "pgm" | "pnm" | "pbm"))
        })
        .collect();
    paths.sort();
    Ok(paths)
}

#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub name: String,
    pub frames: Vec<Frame>,
    pub init: BBox,
    pub gt: Option<Vec<BBox>>,
}

pub fn read_sequence(dir: &Path) -> Result<LoadedSequence> {
    let paths = frame_paths(dir)?;
    if paths.is_empty() {
        return Err(Error::format(dir, "no image frames"));
    }
    let frames = paths.iter().map(|p| Frame::load(p)).collect::<Result<Vec<_>>>()?;
    let init_path = dir.join("init.txt");
    let init = *read_boxes(&init_path)?
        .first()
        .ok_or_else(|| Error::format(&init_path, "no box"))?;
    let gt_path = dir.join("gt.txt");
    let gt = if gt_path.exists() { Some(read_boxes(&gt_path)?) } else { None };
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Ok(LoadedSequence { name, frames, init, gt })
}

/// `frame_index,x,y,w,h,score` with 1-based frame indices.
pub fn boxes_csv(boxes: &[BBox], scores: &[f64]) -> String {
    let mut s = String::from("frame_index,x,y,w,h,score\n");
    for (i, (b, sc)) in boxes.iter().zip(scores).enumerate() {
        let _ = writeln!(s, "{},{},{},{},{},{}", i + 1, fmt6(b.x), fmt6(b.y), fmt6(b.w), fmt6(b.h), fmt6(*sc));
    }
    s
}

pub fn read_boxes_csv(path: &Path) -> Result<(Vec<BBox>, Vec<f64>)> {
    let text = fs::read_to_string(path)?;
    let mut boxes = Vec::new();
    let mut scores = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        if vals.len() != 6 {
            return Err(Error::format(path, format!("line {}: expected 6 columns", n + 1)));
        }
        boxes.push(BBox::new(vals[1], vals[2], vals[3], vals[4]));
        scores.push(vals[5]);
    }
    Ok((boxes, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::generate::generate;

    #[test]
    fn sequence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = GeneratorParams {
            frame_size: 64,
            num_frames: 3,
            target_size: 16.0,
            ..GeneratorParams::default()
        };
        let rec = generate(&p, 5).unwrap();
        write_sequence(dir.path(), &rec).unwrap();
        let back = read_sequence(dir.path()).unwrap();
        assert_eq!(back.frames, rec.frames);
        let gt = back.gt.unwrap();
        for (a, b) in gt.iter().zip(&rec.gt) {
            assert!((a.x - b.x).abs() < 1e-3 && (a.w - b.w).abs() < 1e-3);
        }
        assert_eq!(back.init, gt[0]);
    }

    #[test]
    fn malformed_box_file() {
        let p = Path::new("x.txt");
        assert!(parse_boxes(p, "1 2 3\n").is_err());
        assert!(parse_boxes(p, "1 2 a 4\n").is_err());
        assert_eq!(parse_boxes(p, "\n1 2 3 4\n").unwrap().len(), 1);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.csv");
        let boxes = vec![BBox::new(1.5, 2.0, 3.25, 4.0), BBox::new(0.1, 0.2, 0.3, 0.4)];
        fs::write(&path, boxes_csv(&boxes, &[1.0, 0.5])).unwrap();
        let (b, s) = read_boxes_csv(&path).unwrap();
        assert_eq!(b, boxes);
        assert_eq!(s, vec![1.0, 0.5]);
    }
}
