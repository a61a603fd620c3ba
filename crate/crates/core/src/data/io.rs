//! On-disk formats: binary flow files, point CSVs, and PNG frame folders.
//!
//! Flow file: `ETFL`, then little-endian u32 height, width and a zero
//! reserved word, then row-major f32 `(dx, dy)` pairs.
//!
//! Track and label files share one CSV layout (see [`TRACK_HEADER`]). In a
//! label file, rows with an uncertainty value are anchors (frame 0 and the
//! last frame, value = match score); rows without one are pseudo labels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::types::{Anchor, FlowField, Frame, Label, PointQuery, PointTrack, PseudoLabelSet, TrackPoint};

pub const FLOW_MAGIC: &[u8; 4] = b"ETFL";
pub const FLOW_HEADER_BYTES: usize = 16;
pub const TRACK_HEADER: &str = "frame,point_id,x,y,visible,uncertainty";

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let (h, w, _) = flow.vectors.dim();
    let mut out = Vec::with_capacity(FLOW_HEADER_BYTES + h * w * 8);
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in flow.vectors.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    let err = |field: &str, offset: usize, reason: String| Error::Format { file: "flow file", field: field.into(), offset, reason };
    if bytes.len() < FLOW_HEADER_BYTES {
        return Err(err("header", bytes.len(), format!("file is {} bytes, header needs {FLOW_HEADER_BYTES}", bytes.len())));
    }
    if &bytes[0..4] != FLOW_MAGIC {
        return Err(err("magic", 0, format!("expected \"ETFL\", found {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let (h, w, reserved) = (word(4) as usize, word(8) as usize, word(12));
    if h == 0 {
        return Err(err("height", 4, "must be positive".into()));
    }
    if w == 0 {
        return Err(err("width", 8, "must be positive".into()));
    }
    if reserved != 0 {
        return Err(err("reserved", 12, format!("must be 0, found {reserved}")));
    }
    let expected = FLOW_HEADER_BYTES + h * w * 8;
    if bytes.len() != expected {
        return Err(err("payload", FLOW_HEADER_BYTES, format!("{h}x{w} needs {expected} bytes in total, file has {}", bytes.len())));
    }
    let mut v = Array3::zeros((h, w, 2));
    for (k, slot) in v.iter_mut().enumerate() {
        let off = FLOW_HEADER_BYTES + 4 * k;
        let x = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
        if !x.is_finite() {
            return Err(err("payload", off, "non-finite value".into()));
        }
        *slot = x as f64;
    }
    Ok(FlowField { vectors: v, source_index: 0, target_index: 0 })
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    fs::write(path, encode_flow(flow))?;
    Ok(())
}

/// Frame indices are not stored; the result has `source_index = target_index = 0`.
pub fn read_flow(path: &Path) -> Result<FlowField> {
    decode_flow(&fs::read(path)?)
}

struct Row {
    frame: usize,
    point_id: u32,
    x: f64,
    y: f64,
    visible: bool,
    uncertainty: Option<f64>,
}

fn push_row(out: &mut String, r: &Row) {
    let _ = write!(out, "{},{},{},{},{},", r.frame, r.point_id, r.x, r.y, u8::from(r.visible));
    if let Some(u) = r.uncertainty {
        let _ = write!(out, "{u}");
    }
    out.push('\n');
}

fn parse_rows(text: &str, file: &'static str) -> Result<Vec<Row>> {
    let err = |field: &str, offset: usize, reason: String| Error::Format { file, field: field.into(), offset, reason };
    let header_end = text.find('\n').unwrap_or(text.len());
    let header = text[..header_end].trim_end_matches('\r');
    if header != TRACK_HEADER {
        return Err(err("header", 0, format!("expected `{TRACK_HEADER}`, found `{header}`")));
    }
    let mut rows = Vec::new();
    let mut offset = (header_end + 1).min(text.len());
    for line in text[offset..].split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let body = line.trim_end_matches('\n').trim_end_matches('\r');
        if body.is_empty() {
            continue;
        }
        let mut fields = Vec::with_capacity(6);
        let mut pos = start;
        for f in body.split(',') {
            fields.push((f, pos));
            pos += f.len() + 1;
        }
        if fields.len() != 6 {
            return Err(err("row", start, format!("expected 6 fields, found {}", fields.len())));
        }
        let num = |i: usize, name: &str| -> Result<f64> {
            let (f, at) = fields[i];
            match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(name, at, format!("expected a finite number, found `{f}`"))),
            }
        };
        let (ff, fo) = fields[0];
        let frame = ff.parse::<usize>().map_err(|_| err("frame", fo, format!("expected an integer, found `{ff}`")))?;
        let (pf, po) = fields[1];
        let point_id = pf.parse::<u32>().map_err(|_| err("point_id", po, format!("expected an integer, found `{pf}`")))?;
        let x = num(2, "x")?;
        let y = num(3, "y")?;
        let visible = match fields[4] {
            ("0", _) => false,
            ("1", _) => true,
            (f, at) => return Err(err("visible", at, format!("expected 0 or 1, found `{f}`"))),
        };
        let uncertainty = if fields[5].0.is_empty() { None } else { Some(num(5, "uncertainty")?) };
        rows.push(Row { frame, point_id, x, y, visible, uncertainty });
    }
    Ok(rows)
}

/// Rows are written frame-major, then by point id.
pub fn encode_tracks(tracks: &[PointTrack]) -> String {
    let mut rows: Vec<Row> = tracks
        .iter()
        .flat_map(|t| {
            t.points.iter().map(move |p| Row {
                frame: p.frame,
                point_id: t.id,
                x: p.x,
                y: p.y,
                visible: p.visible,
                uncertainty: p.uncertainty,
            })
        })
        .collect();
    rows.sort_by_key(|r| (r.frame, r.point_id));
    let mut out = format!("{TRACK_HEADER}\n");
    for r in &rows {
        push_row(&mut out, r);
    }
    out
}

/// Each track's query is its earliest row.
pub fn decode_tracks(text: &str) -> Result<Vec<PointTrack>> {
    let mut by_id: BTreeMap<u32, Vec<TrackPoint>> = BTreeMap::new();
    for r in parse_rows(text, "track file")? {
        by_id.entry(r.point_id).or_default().push(TrackPoint {
            frame: r.frame,
            x: r.x,
            y: r.y,
            visible: r.visible,
            uncertainty: r.uncertainty,
        });
    }
    let mut tracks = Vec::with_capacity(by_id.len());
    for (id, mut points) in by_id {
        points.sort_by_key(|p| p.frame);
        if let Some(w) = points.windows(2).find(|w| w[0].frame == w[1].frame) {
            return Err(Error::Format {
                file: "track file",
                field: "frame".into(),
                offset: 0,
                reason: format!("point {id} has two rows for frame {}", w[0].frame),
            });
        }
        let first = points[0];
        tracks.push(PointTrack { id, query: PointQuery { frame_index: first.frame, x: first.x, y: first.y }, points });
    }
    Ok(tracks)
}

pub fn write_tracks(path: &Path, tracks: &[PointTrack]) -> Result<()> {
    fs::write(path, encode_tracks(tracks))?;
    Ok(())
}

pub fn read_tracks(path: &Path) -> Result<Vec<PointTrack>> {
    decode_tracks(&fs::read_to_string(path)?)
}

pub fn encode_labels(set: &PseudoLabelSet) -> String {
    let mut rows = Vec::new();
    for a in &set.anchors {
        rows.push(Row { frame: 0, point_id: a.point_id, x: a.x1, y: a.y1, visible: true, uncertainty: Some(a.score) });
        rows.push(Row {
            frame: set.last_frame,
            point_id: a.point_id,
            x: a.x_t,
            y: a.y_t,
            visible: true,
            uncertainty: Some(a.score),
        });
    }
    for (&frame, labels) in &set.labels {
        for l in labels {
            rows.push(Row { frame, point_id: l.point_id, x: l.x, y: l.y, visible: l.visible, uncertainty: None });
        }
    }
    // anchors first within a frame, then labels, each by id
    rows.sort_by_key(|r| (r.frame, r.uncertainty.is_none(), r.point_id));
    let mut out = format!("{TRACK_HEADER}\n");
    for r in &rows {
        push_row(&mut out, r);
    }
    out
}

/// Survivors are recovered as the ids that carry labels.
pub fn decode_labels(text: &str) -> Result<PseudoLabelSet> {
    let rows = parse_rows(text, "label file")?;
    let mut set = PseudoLabelSet::default();
    let mut first: BTreeMap<u32, &Row> = BTreeMap::new();
    let mut last: BTreeMap<u32, &Row> = BTreeMap::new();
    for r in &rows {
        if r.uncertainty.is_some() {
            if r.frame == 0 {
                first.insert(r.point_id, r);
            } else {
                set.last_frame = set.last_frame.max(r.frame);
                last.insert(r.point_id, r);
            }
        } else {
            set.labels.entry(r.frame).or_default().push(Label { point_id: r.point_id, x: r.x, y: r.y, visible: r.visible });
        }
    }
    for (id, a) in &first {
        let b = last.get(id).ok_or_else(|| Error::Format {
            file: "label file",
            field: "point_id".into(),
            offset: 0,
            reason: format!("anchor {id} has no last-frame row"),
        })?;
        set.anchors.push(Anchor {
            point_id: *id,
            x1: a.x,
            y1: a.y,
            x_t: b.x,
            y_t: b.y,
            score: a.uncertainty.unwrap_or(0.0),
        });
    }
    let mut survivors: Vec<u32> = set.labels.values().flatten().map(|l| l.point_id).collect();
    survivors.sort_unstable();
    survivors.dedup();
    set.survivors = survivors;
    Ok(set)
}

pub fn write_labels(path: &Path, set: &PseudoLabelSet) -> Result<()> {
    fs::write(path, encode_labels(set))?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<PseudoLabelSet> {
    decode_labels(&fs::read_to_string(path)?)
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:06}.png"))
}

/// Writes `%06d.png` RGB8 files, numbered by position in `frames`.
pub fn write_video(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        write_png(&frame_path(dir, i), f)?;
    }
    Ok(())
}

pub fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = frame.size();
    let data: Vec<u8> = frame.pixels.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer.write_image_data(&data).map_err(|e| Error::Png(e.to_string()))?;
    writer.finish().map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

pub fn read_png(path: &Path, index: usize) -> Result<Frame> {
    let file = fs::File::open(path)?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let ch = info.color_type.samples();
    let bytes = &buf[..info.buffer_size()];
    let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let base = (y * w + x) * ch;
        let v = match ch {
            1 | 2 => bytes[base],
            _ => bytes[base + c],
        };
        v as f64 / 255.0
    });
    Frame::new(pixels, index)
}

/// Reads every `NNNNNN.png` in `dir` in numeric order.
pub fn read_video(dir: &Path) -> Result<Vec<Frame>> {
    let mut numbered = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if path.extension().is_some_and(|e| e == "png") && stem.len() == 6 {
            if let Ok(n) = stem.parse::<usize>() {
                numbered.push((n, path));
            }
        }
    }
    if numbered.is_empty() {
        return Err(Error::EmptyVideo);
    }
    numbered.sort();
    numbered.into_iter().enumerate().map(|(i, (_, p))| read_png(&p, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_file_is_144_bytes() {
        let bytes = encode_flow(&FlowField::zeros(4, 4, 0, 1));
        assert_eq!(bytes.len(), 144);
        assert_eq!(&bytes[..4], b"ETFL");
        assert_eq!(encode_flow(&decode_flow(&bytes).unwrap()), bytes);
    }

    #[test]
    fn flow_errors_name_field_and_offset() {
        let mut bytes = encode_flow(&FlowField::zeros(4, 4, 0, 1));
        bytes[12] = 1;
        match decode_flow(&bytes) {
            Err(Error::Format { field, offset, .. }) => assert_eq!((field.as_str(), offset), ("reserved", 12)),
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(decode_flow(&bytes), Err(Error::Format { offset: 0, .. })));
        let short = &encode_flow(&FlowField::zeros(4, 4, 0, 1))[..100];
        assert!(matches!(decode_flow(short), Err(Error::Format { offset: 16, .. })));
    }

    #[test]
    fn csv_errors_point_at_field() {
        let text = format!("{TRACK_HEADER}\n0,1,2.5,zz,1,\n");
        match decode_tracks(&text) {
            Err(Error::Format { field, offset, .. }) => {
                assert_eq!(field, "y");
                assert_eq!(&text[offset..offset + 2], "zz");
            }
            other => panic!("{other:?}"),
        }
        assert!(decode_tracks("frame,id\n").is_err());
    }

    #[test]
    fn empty_label_file() {
        let text = encode_labels(&PseudoLabelSet::default());
        assert_eq!(text, format!("{TRACK_HEADER}\n"));
        let set = decode_labels(&text).unwrap();
        assert_eq!(set.survivor_count(), 0);
        assert_eq!(set, PseudoLabelSet::default());
    }

    #[test]
    fn png_roundtrip_is_exact_on_8bit_levels() {
        let dir = tempfile::tempdir().unwrap();
        let frame = Frame::new(Array3::from_shape_fn((9, 11, 3), |(y, x, c)| ((y * 31 + x * 7 + c * 50) % 256) as f64 / 255.0), 0)
            .unwrap();
        write_video(dir.path(), std::slice::from_ref(&frame)).unwrap();
        assert!(dir.path().join("000000.png").exists());
        assert_eq!(read_video(dir.path()).unwrap()[0], frame);
    }
}
