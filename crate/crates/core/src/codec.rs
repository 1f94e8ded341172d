//! Grid target encoding for the rotated-box detector.
//!
//! The image is tiled into square cells (16 px by default, giving a 30 x 40
//! grid for a 480 x 640 frame). Each cell holds eight channels:
//!
//! | index | meaning                                   | scale        |
//! |-------|-------------------------------------------|--------------|
//! | 0..3  | `p_blue`, `p_green`, `p_background`       | probability  |
//! | 3, 4  | box center offset from the cell's top-left corner | / cell |
//! | 5     | box width                                 | / image width |
//! | 6     | box height                                | / image height |
//! | 7     | box angle                                 | / pi         |
//!
//! A cell carries a box iff that box's center falls inside it. When several
//! centers share a cell, the instance with the larger fraction of its own
//! mask inside the cell wins and the others get no target at all.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::geom::{mask_region_rect, BrickClass, GeomError, InstanceMask, RotatedBox};

pub const CHANNELS: usize = 8;
const TENSOR_MAGIC: u16 = 0x5242;

pub const CH_BLUE: usize = 0;
pub const CH_GREEN: usize = 1;
pub const CH_BACKGROUND: usize = 2;
pub const CH_X: usize = 3;
pub const CH_Y: usize = 4;
pub const CH_W: usize = 5;
pub const CH_H: usize = 6;
pub const CH_THETA: usize = 7;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("box center ({cx:.3}, {cy:.3}) lies outside the {w}x{h} image")]
    OutOfFrame { cx: f64, cy: f64, w: u32, h: u32 },
    #[error("box size {bw:.3} x {bh:.3} exceeds the normalisation range {w} x {h}")]
    BoxTooLarge { bw: f64, bh: f64, w: u32, h: u32 },
    #[error("invalid encoding config: {0}")]
    InvalidConfig(String),
    #[error("tensor format error: {0}")]
    Format(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingConfig {
    pub image_w: u32,
    pub image_h: u32,
    pub cell: u32,
    pub theta_max: f64,
    pub conf_threshold: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self { image_w: 640, image_h: 480, cell: 16, theta_max: PI, conf_threshold: 0.5 }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.cell == 0 || self.image_w == 0 || self.image_h == 0 {
            return Err(CodecError::InvalidConfig("zero image or cell size".into()));
        }
        if !self.image_w.is_multiple_of(self.cell) || !self.image_h.is_multiple_of(self.cell) {
            return Err(CodecError::InvalidConfig(format!(
                "image {}x{} is not divisible into {} px cells",
                self.image_w, self.image_h, self.cell
            )));
        }
        if !(self.theta_max > 0.0) {
            return Err(CodecError::InvalidConfig("theta_max must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.conf_threshold) {
            return Err(CodecError::InvalidConfig("conf_threshold must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        (self.image_h / self.cell) as usize
    }

    pub fn cols(&self) -> usize {
        (self.image_w / self.cell) as usize
    }
}

/// Dense `rows x cols x 8` tensor, row-major.
///
/// Values are kept as `f64` in memory; the on-disk format stores `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl GridTensor {
    /// All cells background.
    pub fn background(rows: usize, cols: usize) -> Self {
        let mut data = vec![0.0; rows * cols * CHANNELS];
        for cell in data.chunks_exact_mut(CHANNELS) {
            cell[CH_BACKGROUND] = 1.0;
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, CodecError> {
        if data.len() != rows * cols * CHANNELS {
            return Err(CodecError::Format(format!(
                "{} values do not fill a {rows}x{cols}x{CHANNELS} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let i = (row * self.cols + col) * CHANNELS;
        &self.data[i..i + CHANNELS]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.cols + col) * CHANNELS;
        &mut self.data[i..i + CHANNELS]
    }

    /// Cells whose class channels are not pure background.
    pub fn object_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows)
            .flat_map(move |r| (0..self.cols).map(move |c| (r, c)))
            .filter(|&(r, c)| self.cell(r, c)[CH_BACKGROUND] < 1.0)
    }

    /// Checks the per-cell invariants: probabilities sum to one and every
    /// channel lies in `[0, 1]`.
    pub fn check_invariants(&self) -> Result<(), CodecError> {
        for r in 0..self.rows {
            for c in 0..self.cols {
                let cell = self.cell(r, c);
                if let Some(v) = cell.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(CodecError::Format(format!("cell ({r},{c}) has value {v} outside [0,1]")));
                }
                let sum = cell[CH_BLUE] + cell[CH_GREEN] + cell[CH_BACKGROUND];
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(CodecError::Format(format!("cell ({r},{c}) probabilities sum to {sum}")));
                }
            }
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CodecError> {
        let dims = [self.rows, self.cols, CHANNELS];
        if dims.iter().any(|&d| d > u16::MAX as usize) {
            return Err(CodecError::Format("tensor dimension exceeds u16".into()));
        }
        let mut buf = Vec::with_capacity(8 + self.data.len() * 4);
        buf.extend_from_slice(&TENSOR_MAGIC.to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(d as u16).to_le_bytes());
        }
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a tensor and checks its shape against `cfg`.
    pub fn read_from(mut r: impl Read, cfg: &EncodingConfig) -> Result<Self, CodecError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 8 {
            return Err(CodecError::Format("truncated header".into()));
        }
        let field = |i: usize| u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]);
        let (magic, rows, cols, ch) = (field(0), field(1) as usize, field(2) as usize, field(3) as usize);
        if magic != TENSOR_MAGIC {
            return Err(CodecError::Format(format!("bad magic 0x{magic:04x}")));
        }
        if (rows, cols, ch) != (cfg.rows(), cfg.cols(), CHANNELS) {
            return Err(CodecError::Format(format!(
                "shape {rows}x{cols}x{ch}, expected {}x{}x{CHANNELS}",
                cfg.rows(),
                cfg.cols()
            )));
        }
        let body = &bytes[8..];
        if body.len() != rows * cols * ch * 4 {
            return Err(CodecError::Format(format!(
                "payload has {} bytes, expected {}",
                body.len(),
                rows * cols * ch * 4
            )));
        }
        let data = body.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        Ok(Self { rows, cols, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        self.write_to(io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn read(path: impl AsRef<Path>, cfg: &EncodingConfig) -> Result<Self, CodecError> {
        Self::read_from(io::BufReader::new(std::fs::File::open(path)?), cfg)
    }
}

/// One ground-truth instance: its mask pixels and class.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRegion {
    pub id: u16,
    pub class_id: BrickClass,
    pub pixels: Vec<(u32, u32)>,
}

/// The box an instance contributes and the cell it landed in.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CellAssignment {
    pub id: u16,
    pub row: usize,
    pub col: usize,
    pub rect: RotatedBox,
}

/// Result of encoding: the tensor and which instances survived.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub tensor: GridTensor,
    pub assigned: Vec<CellAssignment>,
    pub dropped: Vec<u16>,
}

pub fn regions_of(mask: &InstanceMask) -> Vec<InstanceRegion> {
    let classes = mask.class_map();
    mask.regions().into_iter().map(|(id, pixels)| InstanceRegion { id, class_id: classes[&id], pixels }).collect()
}

pub fn encode_mask(mask: &InstanceMask, cfg: &EncodingConfig) -> Result<Encoded, CodecError> {
    encode(&regions_of(mask), cfg)
}

type Candidate = (f64, u16, RotatedBox);

/// Encodes instance regions into a grid tensor.
pub fn encode(instances: &[InstanceRegion], cfg: &EncodingConfig) -> Result<Encoded, CodecError> {
    cfg.validate()?;
    let cell = cfg.cell as f64;
    // (row, col) -> candidates as (fraction of mask inside the cell, id, rect)
    let mut by_cell: BTreeMap<(usize, usize), Vec<Candidate>> = BTreeMap::new();
    for inst in instances {
        let rect = mask_region_rect(&inst.pixels, inst.class_id)?;
        let (w, h) = (cfg.image_w as f64, cfg.image_h as f64);
        if !(rect.cx >= 0.0 && rect.cx < w && rect.cy >= 0.0 && rect.cy < h) {
            return Err(CodecError::OutOfFrame { cx: rect.cx, cy: rect.cy, w: cfg.image_w, h: cfg.image_h });
        }
        if rect.w > w || rect.h > h || rect.theta / cfg.theta_max >= 1.0 {
            return Err(CodecError::BoxTooLarge { bw: rect.w, bh: rect.h, w: cfg.image_w, h: cfg.image_h });
        }
        let col = (rect.cx / cell).floor() as usize;
        let row = (rect.cy / cell).floor() as usize;
        let (u0, v0) = (col as u32 * cfg.cell, row as u32 * cfg.cell);
        let inside =
            inst.pixels.iter().filter(|&&(u, v)| u >= u0 && u < u0 + cfg.cell && v >= v0 && v < v0 + cfg.cell).count();
        let fraction = inside as f64 / inst.pixels.len() as f64;
        by_cell.entry((row, col)).or_default().push((fraction, inst.id, rect));
    }

    let mut tensor = GridTensor::background(cfg.rows(), cfg.cols());
    let mut assigned = Vec::new();
    let mut dropped = Vec::new();
    for ((row, col), mut cands) in by_cell {
        // larger fraction wins; equal fractions fall back to the lower id
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let (_, id, rect) = cands[0];
        dropped.extend(cands[1..].iter().map(|c| c.1));
        let ch = tensor.cell_mut(row, col);
        ch[CH_BACKGROUND] = 0.0;
        ch[match rect.class_id {
            BrickClass::Blue => CH_BLUE,
            BrickClass::Green => CH_GREEN,
        }] = 1.0;
        ch[CH_X] = (rect.cx - col as f64 * cell) / cell;
        ch[CH_Y] = (rect.cy - row as f64 * cell) / cell;
        ch[CH_W] = rect.w / cfg.image_w as f64;
        ch[CH_H] = rect.h / cfg.image_h as f64;
        ch[CH_THETA] = rect.theta / cfg.theta_max;
        assigned.push(CellAssignment { id, row, col, rect });
    }
    dropped.sort_unstable();
    Ok(Encoded { tensor, assigned, dropped })
}

/// Decodes every confident cell into a box, in row-major cell order.
pub fn decode(t: &GridTensor, cfg: &EncodingConfig) -> Vec<RotatedBox> {
    let cell = cfg.cell as f64;
    let mut out = Vec::new();
    for row in 0..t.rows() {
        for col in 0..t.cols() {
            let ch = t.cell(row, col);
            let (class_id, p) = if ch[CH_GREEN] > ch[CH_BLUE] {
                (BrickClass::Green, ch[CH_GREEN])
            } else {
                (BrickClass::Blue, ch[CH_BLUE])
            };
            if !(p > cfg.conf_threshold && p > ch[CH_BACKGROUND]) {
                continue;
            }
            let decoded = RotatedBox::new(
                (col as f64 + ch[CH_X]) * cell,
                (row as f64 + ch[CH_Y]) * cell,
                ch[CH_W] * cfg.image_w as f64,
                ch[CH_H] * cfg.image_h as f64,
                ch[CH_THETA] * cfg.theta_max,
                class_id,
                p.clamp(0.0, 1.0),
            );
            // zero-size predictions carry no box
            if let Ok(b) = decoded {
                out.push(b);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::mask_region_rect;
    use proptest::prelude::*;

    fn rect_pixels(u0: u32, v0: u32, w: u32, h: u32) -> Vec<(u32, u32)> {
        (u0..u0 + w).flat_map(|u| (v0..v0 + h).map(move |v| (u, v))).collect()
    }

    #[test]
    fn single_brick_cell_and_offsets() {
        // pixels 320..330 x 238..248 -> box center (325, 243)
        let inst = InstanceRegion { id: 1, class_id: BrickClass::Blue, pixels: rect_pixels(320, 238, 10, 10) };
        let enc = encode(&[inst], &EncodingConfig::default()).unwrap();
        assert_eq!(enc.assigned.len(), 1);
        let a = enc.assigned[0];
        assert_eq!((a.row, a.col), (15, 20));
        let ch = enc.tensor.cell(15, 20);
        assert_eq!(ch[CH_X], 5.0 / 16.0);
        assert_eq!(ch[CH_Y], 3.0 / 16.0);
        assert_eq!(ch[CH_BLUE], 1.0);
        assert_eq!(ch[CH_BACKGROUND], 0.0);
        assert_eq!(enc.tensor.object_cells().count(), 1);
        enc.tensor.check_invariants().unwrap();
    }

    #[test]
    fn empty_scene_is_all_background() {
        let enc = encode(&[], &EncodingConfig::default()).unwrap();
        assert_eq!((enc.tensor.rows(), enc.tensor.cols()), (30, 40));
        for r in 0..30 {
            for c in 0..40 {
                let ch = enc.tensor.cell(r, c);
                assert_eq!(ch[CH_BACKGROUND], 1.0);
                assert!(ch[CH_X..].iter().all(|&v| v == 0.0));
            }
        }
        assert!(decode(&enc.tensor, &EncodingConfig::default()).is_empty());
    }

    #[test]
    fn shared_cell_keeps_larger_fraction() {
        // Both centers land in cell (15, 20). A is compact and mostly inside
        // the cell; B is a long thin bar whose center is there too.
        let a = InstanceRegion { id: 1, class_id: BrickClass::Blue, pixels: rect_pixels(322, 242, 6, 6) };
        let b = InstanceRegion { id: 2, class_id: BrickClass::Green, pixels: rect_pixels(285, 246, 80, 2) };
        let ra = mask_region_rect(&a.pixels, BrickClass::Blue).unwrap();
        let rb = mask_region_rect(&b.pixels, BrickClass::Green).unwrap();
        assert_eq!(((ra.cx / 16.0) as u32, (ra.cy / 16.0) as u32), (20, 15));
        assert_eq!(((rb.cx / 16.0) as u32, (rb.cy / 16.0) as u32), (20, 15));
        for order in [vec![a.clone(), b.clone()], vec![b.clone(), a.clone()]] {
            let enc = encode(&order, &EncodingConfig::default()).unwrap();
            assert_eq!(enc.assigned.len(), 1);
            assert_eq!(enc.assigned[0].id, 1);
            assert_eq!(enc.dropped, vec![2]);
            // the loser gets no target anywhere
            assert_eq!(enc.tensor.object_cells().count(), 1);
            assert_eq!(enc.tensor.cell(15, 20)[CH_BLUE], 1.0);
        }
    }

    #[test]
    fn decode_threshold_rule() {
        let cfg = EncodingConfig::default();
        let mut t = GridTensor::background(30, 40);
        let ch = t.cell_mut(3, 4);
        ch[CH_BLUE] = 0.4;
        ch[CH_BACKGROUND] = 0.6;
        ch[CH_W] = 0.1;
        ch[CH_H] = 0.1;
        assert!(decode(&t, &cfg).is_empty());
        let ch = t.cell_mut(3, 4);
        ch[CH_BLUE] = 0.7;
        ch[CH_BACKGROUND] = 0.3;
        let out = decode(&t, &cfg);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.7);
        assert_eq!(out[0].class_id, BrickClass::Blue);
    }

    #[test]
    fn out_of_frame_center() {
        let cfg = EncodingConfig { image_w: 64, image_h: 48, ..Default::default() };
        let inst = InstanceRegion { id: 1, class_id: BrickClass::Blue, pixels: rect_pixels(70, 10, 4, 4) };
        assert!(matches!(encode(&[inst], &cfg), Err(CodecError::OutOfFrame { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(EncodingConfig { cell: 7, ..Default::default() }.validate().is_err());
        assert!(EncodingConfig { cell: 0, ..Default::default() }.validate().is_err());
        let c = EncodingConfig { cell: 32, ..Default::default() };
        c.validate().unwrap();
        assert_eq!((c.rows(), c.cols()), (15, 20));
    }

    #[test]
    fn translation_by_one_cell_shifts_assignment() {
        let cfg = EncodingConfig::default();
        let pix = vec![(100, 100), (101, 100), (107, 103), (104, 109), (99, 104)];
        let moved: Vec<(u32, u32)> = pix.iter().map(|&(u, v)| (u + 16, v + 16)).collect();
        let a = encode(&[InstanceRegion { id: 1, class_id: BrickClass::Green, pixels: pix }], &cfg).unwrap();
        let b = encode(&[InstanceRegion { id: 1, class_id: BrickClass::Green, pixels: moved }], &cfg).unwrap();
        let (ca, cb) = (a.assigned[0], b.assigned[0]);
        assert_eq!((cb.row, cb.col), (ca.row + 1, ca.col + 1));
        for (x, y) in a.tensor.cell(ca.row, ca.col).iter().zip(b.tensor.cell(cb.row, cb.col)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn file_round_trip_and_shape_errors() {
        let cfg = EncodingConfig::default();
        let mut t = GridTensor::background(30, 40);
        t.cell_mut(1, 2)[CH_X] = 0.25;
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..2], &[0x42, 0x52]);
        assert_eq!(buf.len(), 8 + 30 * 40 * 8 * 4);
        assert_eq!(GridTensor::read_from(&buf[..], &cfg).unwrap(), t);

        let mut bad = GridTensor::background(31, 40);
        bad.cell_mut(0, 0)[CH_X] = 0.5;
        let mut buf = Vec::new();
        bad.write_to(&mut buf).unwrap();
        assert!(matches!(GridTensor::read_from(&buf[..], &cfg), Err(CodecError::Format(_))));

        let mut trunc = Vec::new();
        t.write_to(&mut trunc).unwrap();
        trunc.pop();
        assert!(matches!(GridTensor::read_from(&trunc[..], &cfg), Err(CodecError::Format(_))));
        let mut magic = Vec::new();
        t.write_to(&mut magic).unwrap();
        magic[0] = 0;
        assert!(matches!(GridTensor::read_from(&magic[..], &cfg), Err(CodecError::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn file_round_trip_is_bitwise(values in prop::collection::vec(0.0f32..=1.0, 4 * 5 * CHANNELS)) {
            let cfg = EncodingConfig { image_w: 80, image_h: 64, ..Default::default() };
            let t = GridTensor::from_vec(4, 5, values.iter().map(|&v| v as f64).collect()).unwrap();
            let mut buf = Vec::new();
            t.write_to(&mut buf).unwrap();
            let back = GridTensor::read_from(&buf[..], &cfg).unwrap();
            for (a, b) in back.as_slice().iter().zip(t.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
