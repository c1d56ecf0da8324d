//! Per-frame diagnostics on disk: score, gate and offset maps as binary
//! graymaps and router scores as CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dam::Modality;
use crate::data::Frame;
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};
use crate::tracker::FrameResult;

/// Quantizes `[H, W]` values mapped from `[lo, hi]` to `0..=255`.
pub fn quantize(map: &Tensor, lo: f64, hi: f64) -> Result<Frame> {
    let (h, w) = map.dims2()?;
    let span = hi - lo;
    let data = map
        .data()
        .iter()
        .map(|&v| {
            let u = if span > 0.0 { (v - lo) / span } else { 0.0 };
            (u * 255.0).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Frame::new(w, h, 1, data)
}

/// Writes `[H, W]` values in `[lo, hi]` as a binary PGM.
pub fn write_graymap(path: &Path, map: &Tensor, lo: f64, hi: f64) -> Result<()> {
    quantize(map, lo, hi)?.save(path)
}

/// Reads a graymap back to `[H, W]` values in `[lo, hi]`.
pub fn read_graymap(path: &Path, lo: f64, hi: f64) -> Result<Tensor> {
    let f = Frame::load(path)?;
    if f.channels != 1 {
        return Err(Error::Image(format!("{} is not a graymap", path.display())));
    }
    let data = f.data.iter().map(|&b| lo + (hi - lo) * b as f64 / 255.0).collect();
    Tensor::new(&[f.height, f.width], data, DType::F64)
}

/// Files written for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpedFiles {
    pub score: PathBuf,
    pub gates: [PathBuf; 2],
    pub offsets: [[PathBuf; 2]; 2],
    /// Value ranges of every min-max normalized map.
    pub ranges: PathBuf,
    pub router: PathBuf,
}

/// Per-cell offset length of an `[H, W, 2]` field.
pub fn offset_magnitude(offsets: &Tensor) -> Result<Tensor> {
    let s = offsets.shape();
    if s.len() != 3 || s[2] != 2 {
        return Err(Error::invalid("offset_magnitude", format!("expected [H, W, 2], got {s:?}")));
    }
    let data = offsets.data().chunks(2).map(|p| p[0].hypot(p[1])).collect();
    Tensor::new(&[s[0], s[1]], data, DType::F64)
}

/// Writes the score map (values in `[0, 1]`), both gate maps and all four
/// offset-length fields (min-max normalized; ranges in `ranges.csv`) and
/// the router scores of one frame into `out_dir`.
pub fn dump_maps(result: &FrameResult, out_dir: &Path) -> Result<DumpedFiles> {
    std::fs::create_dir_all(out_dir)?;
    let tag = format!("{:06}", result.frame);
    let score = out_dir.join(format!("score_{tag}.pgm"));
    write_graymap(&score, &result.score_map, 0.0, 1.0)?;

    let mut ranges = String::from("map,min,max\n");
    let mut normalized = |name: String, map: &Tensor| -> Result<PathBuf> {
        let (lo, hi) = map.min_max();
        let path = out_dir.join(format!("{name}_{tag}.pgm"));
        write_graymap(&path, map, lo, hi)?;
        writeln!(ranges, "{name},{lo},{hi}").expect("writing to a String");
        Ok(path)
    };
    let gates = [
        normalized(format!("gate_{}", Modality::Rgb.name()), &result.gate_maps[0])?,
        normalized(format!("gate_{}", Modality::Tir.name()), &result.gate_maps[1])?,
    ];
    let mut offset_path = |m: Modality, kind: usize| -> Result<PathBuf> {
        let label = if kind == 0 { "initial" } else { "dynamic" };
        normalized(
            format!("offset_{}_{label}", m.name()),
            &offset_magnitude(&result.offsets[m.index()][kind])?,
        )
    };
    let offsets = [
        [offset_path(Modality::Rgb, 0)?, offset_path(Modality::Rgb, 1)?],
        [offset_path(Modality::Tir, 0)?, offset_path(Modality::Tir, 1)?],
    ];
    let ranges_path = out_dir.join(format!("ranges_{tag}.csv"));
    std::fs::write(&ranges_path, ranges)?;

    let router = out_dir.join(format!("router_{tag}.csv"));
    std::fs::write(&router, router_scores_csv(result))?;
    Ok(DumpedFiles {
        score,
        gates,
        offsets,
        ranges: ranges_path,
        router,
    })
}

/// `modality,layer,score,selected` rows with 1-based layers.
pub fn router_scores_csv(result: &FrameResult) -> String {
    let mut out = String::from("modality,layer,score,selected\n");
    for m in Modality::BOTH {
        let scores = &result.router_scores[m.index()];
        let selected = &result.selected[m.index()];
        for (l, s) in scores.data().iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", m.name(), l + 1, s, selected.contains(&(l + 1)) as u8);
        }
    }
    out
}

/// `frame,modality,selected` rows over a run; 1-based layers separated by
/// `;`.
pub fn router_trace_csv(frames: &[FrameResult]) -> String {
    let mut out = String::from("frame,modality,selected\n");
    for f in frames {
        for m in Modality::BOTH {
            let layers: Vec<String> = f.selected[m.index()].iter().map(|l| l.to_string()).collect();
            let _ = writeln!(out, "{},{},{}", f.frame, m.name(), layers.join(";"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result() -> FrameResult {
        let mut score = Tensor::zeros(&[4, 4], DType::F64);
        for (i, v) in score.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin().abs();
        }
        let field = Tensor::new(&[2, 2, 2], vec![0.0, 1.0, 3.0, 4.0, -1.0, 0.0, 0.5, 0.5], DType::F64).unwrap();
        FrameResult {
            frame: 7,
            bbox: crate::head::BBox::new(0.0, 0.0, 1.0, 1.0),
            score: 0.9,
            score_map: score.clone(),
            gate_maps: [score.scale(3.0), score.scale(-1.0)],
            selected: [vec![1, 3, 4], vec![1, 2, 4]],
            router_scores: [
                Tensor::new(&[1, 4], vec![0.1, 0.2, 0.3, 0.4], DType::F64).unwrap(),
                Tensor::new(&[1, 4], vec![0.4, 0.3, 0.2, 0.1], DType::F64).unwrap(),
            ],
            offsets: [[field.clone(), field.clone()], [field.clone(), field]],
            template_updated: false,
        }
    }

    #[test]
    fn score_map_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let r = result();
        let files = dump_maps(&r, dir.path()).unwrap();
        let back = read_graymap(&files.score, 0.0, 1.0).unwrap();
        assert_eq!(back.shape(), r.score_map.shape());
        for (a, b) in back.data().iter().zip(r.score_map.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let gate = read_graymap(&files.gates[0], 0.0, 1.0).unwrap();
        let (lo, hi) = gate.min_max();
        assert_eq!((lo, hi), (0.0, 1.0));
        let router = std::fs::read_to_string(&files.router).unwrap();
        assert_eq!(router.lines().count(), 9);
        assert!(router.contains("rgb,3,0.3,1"));
    }

    #[test]
    fn offset_lengths() {
        let m = offset_magnitude(&result().offsets[0][0]).unwrap();
        assert_eq!(m.data(), &[1.0, 5.0, 1.0, 0.5f64.hypot(0.5)]);
    }

    #[test]
    fn trace_lists_one_based_layers() {
        let csv = router_trace_csv(&[result()]);
        assert_eq!(csv, "frame,modality,selected\n7,rgb,1;3;4\n7,tir,1;2;4\n");
    }

    #[test]
    fn unwritable_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        std::fs::write(&file, b"x").unwrap();
        assert!(dump_maps(&result(), &file.join("sub")).is_err());
    }
}
