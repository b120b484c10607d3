//! Boxes, IoU, conventional NMS and Cross-slice NMS: local suppression in
//! each slice, then an area-priority sweep over the union.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub class: u32,
    #[serde(default)]
    pub slice: u32,
}

pub type BoxSet = Vec<DetBox>;

impl DetBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, score: f64, class: u32, slice: u32) -> Result<Self> {
        let b = Self { x1, y1, x2, y2, score, class, slice };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.x1, self.y1, self.x2, self.y2, self.score];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite box {self:?}")));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(Error::Validation(format!("box with non-positive area {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::Validation(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, o: &DetBox) -> f64 {
        let w = (self.x2.min(o.x2) - self.x1.max(o.x1)).max(0.0);
        let h = (self.y2.min(o.y2) - self.y1.max(o.y1)).max(0.0);
        w * h
    }
}

pub fn iou(a: &DetBox, b: &DetBox) -> f64 {
    let inter = a.intersection(b);
    inter / (a.area() + b.area() - inter)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnmsConfig {
    pub tau: f64,
    pub tau_local: f64,
}

impl Default for CnmsConfig {
    fn default() -> Self {
        Self { tau: 0.5, tau_local: 0.5 }
    }
}

impl CnmsConfig {
    pub fn new(tau: f64, tau_local: f64) -> Result<Self> {
        let c = Self { tau, tau_local };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for t in [self.tau, self.tau_local] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("IoU threshold {t} outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Ordering among boxes whose primary key (score or area) is equal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Score descending, then lower index (area sweep); lower index (NMS).
    #[default]
    Standard,
    /// Fault-injection variant: later boxes win ties.
    Reversed,
}

/// Keeps boxes in `order` unless an already kept box of the same class
/// overlaps it with IoU ≥ `tau`.
fn greedy(boxes: &[DetBox], order: &[usize], tau: f64) -> BoxSet {
    let mut kept: Vec<DetBox> = Vec::new();
    for &i in order {
        let b = &boxes[i];
        if !kept.iter().any(|k| k.class == b.class && iou(k, b) >= tau) {
            kept.push(*b);
        }
    }
    kept
}

pub fn nms(boxes: &[DetBox], tau_local: f64) -> BoxSet {
    nms_with(boxes, tau_local, TieBreak::Standard)
}

/// Conventional per-class NMS by descending score.
pub fn nms_with(boxes: &[DetBox], tau_local: f64, tie: TieBreak) -> BoxSet {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b].score.total_cmp(&boxes[a].score).then(match tie {
            TieBreak::Standard => a.cmp(&b),
            TieBreak::Reversed => b.cmp(&a),
        })
    });
    greedy(boxes, &order, tau_local)
}

/// The cross-slice sweep: repeatedly take the largest remaining box and drop
/// every same-class box with IoU ≥ `tau` against it.
pub fn area_priority(union: &[DetBox], tau: f64, tie: TieBreak) -> BoxSet {
    let mut order: Vec<usize> = (0..union.len()).collect();
    order.sort_by(|&a, &b| {
        let (ba, bb) = (&union[a], &union[b]);
        let key = bb.area().total_cmp(&ba.area());
        match tie {
            TieBreak::Standard => key.then(bb.score.total_cmp(&ba.score)).then(a.cmp(&b)),
            TieBreak::Reversed => key.then(b.cmp(&a)),
        }
    });
    greedy(union, &order, tau)
}

pub fn cnms(b1: &[DetBox], b2: &[DetBox], cfg: &CnmsConfig) -> BoxSet {
    cnms_multi(&[b1.to_vec(), b2.to_vec()], cfg)
}

pub fn cnms_multi(sets: &[BoxSet], cfg: &CnmsConfig) -> BoxSet {
    cnms_multi_with(sets, cfg, TieBreak::Standard)
}

/// Local NMS in every set, union in set order, then the area sweep.
pub fn cnms_multi_with(sets: &[BoxSet], cfg: &CnmsConfig, tie: TieBreak) -> BoxSet {
    let union: BoxSet = sets.iter().flat_map(|s| nms_with(s, cfg.tau_local, tie)).collect();
    area_priority(&union, cfg.tau, tie)
}

/// Conventional merge: local NMS per set, then score NMS over the union.
pub fn nms_multi(sets: &[BoxSet], cfg: &CnmsConfig) -> BoxSet {
    let union: BoxSet = sets.iter().flat_map(|s| nms(s, cfg.tau_local)).collect();
    nms(&union, cfg.tau)
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<BoxSet> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let b: DetBox = serde_json::from_str(&line)?;
        b.validate()?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write>(mut w: W, boxes: &[DetBox]) -> Result<()> {
    for b in boxes {
        serde_json::to_writer(&mut w, b)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_csv<R: std::io::Read>(r: R) -> Result<BoxSet> {
    let mut out = Vec::new();
    for rec in csv::Reader::from_reader(r).deserialize() {
        let b: DetBox = rec?;
        b.validate()?;
        out.push(b);
    }
    Ok(out)
}

pub fn write_csv<W: Write>(w: W, boxes: &[DetBox]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for b in boxes {
        wr.serialize(b)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> DetBox {
        DetBox::new(x1, y1, x2, y2, score, 0, 0).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0, 0.5)), 0.0);
        assert!((iou(&a, &bx(5.0, 0.0, 15.0, 10.0, 0.5)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn validation_rejects_degenerate_boxes() {
        assert!(DetBox::new(0.0, 0.0, 0.0, 5.0, 0.5, 0, 0).is_err());
        assert!(DetBox::new(0.0, 0.0, 1.0, 1.0, 1.5, 0, 0).is_err());
        assert!(DetBox::new(0.0, f64::NAN, 1.0, 1.0, 0.5, 0, 0).is_err());
        assert!(CnmsConfig::new(0.0, 0.5).is_err());
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.5).is_empty());
        let a = bx(0.0, 0.0, 10.0, 10.0, 0.9);
        let b = bx(0.0, 0.0, 10.0, 10.0, 0.8);
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
        let mut other = b;
        other.class = 1;
        assert_eq!(nms(&[a, other], 0.5), vec![a, other]);
    }

    #[test]
    fn cnms_examples() {
        let cfg = CnmsConfig::default();
        assert!(cnms(&[], &[], &cfg).is_empty());
        let small = bx(0.0, 0.0, 10.0, 10.0, 0.9);
        let large = bx(0.0, 0.0, 12.0, 12.0, 0.6);
        assert!((iou(&small, &large) - 100.0 / 144.0).abs() < 1e-15);
        assert_eq!(cnms(&[small], &[large], &cfg), vec![large]);
        assert_eq!(nms_multi(&[vec![small], vec![large]], &cfg), vec![small]);

        let far = bx(50.0, 50.0, 60.0, 60.0, 0.4);
        let out = cnms(&[small], &[far], &cfg);
        assert_eq!(out.len(), 2);
        assert!(out.contains(&small) && out.contains(&far));
    }

    #[test]
    fn area_ties_prefer_score_then_index() {
        let a = bx(0.0, 0.0, 10.0, 10.0, 0.5);
        let b = bx(1.0, 0.0, 11.0, 10.0, 0.7);
        let c = bx(2.0, 0.0, 12.0, 10.0, 0.7);
        let out = area_priority(&[a, b, c], 0.5, TieBreak::Standard);
        assert_eq!(out, vec![b]);
        let out = area_priority(&[a, b, c], 0.5, TieBreak::Reversed);
        assert_eq!(out, vec![c]);
    }

    #[test]
    fn jsonl_and_csv_round_trip() {
        let boxes = vec![bx(0.0, 1.0, 2.0, 3.5, 0.25), DetBox::new(4.0, 4.0, 9.0, 9.0, 1.0, 3, 7).unwrap()];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &boxes).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"class\":0"));
        assert_eq!(read_jsonl(&buf[..]).unwrap(), boxes);
        let mut buf = Vec::new();
        write_csv(&mut buf, &boxes).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("x1,y1,x2,y2,score,class,slice"));
        assert_eq!(read_csv(&buf[..]).unwrap(), boxes);
        assert!(read_jsonl(&b"{\"x1\":1,\"y1\":1,\"x2\":1,\"y2\":2,\"score\":0.5,\"class\":0}\n"[..]).is_err());
    }
}
