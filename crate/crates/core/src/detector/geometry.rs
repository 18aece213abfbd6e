use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates (centre + size).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Unchecked construction from corners `(x0, y0)`-`(x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { cx: (x0 + x1) / 2.0, cy: (y0 + y1) / 2.0, w: x1 - x0, h: y1 - y0 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || !(self.w > 0.0) || !(self.h > 0.0) {
            return Err(Error::InvalidArgument(format!("degenerate box {self:?}")));
        }
        let [x0, y0, x1, y1] = self.corners();
        if x1 <= 0.0 || y1 <= 0.0 || x0 >= 1.0 || y0 >= 1.0 {
            return Err(Error::InvalidArgument(format!("box {self:?} does not overlap the image")));
        }
        Ok(())
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cx + self.w / 2.0, self.cy + self.h / 2.0]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection with the unit square.
    pub fn clipped(&self) -> Self {
        let [x0, y0, x1, y1] = self.corners();
        Self::from_corners(x0.max(0.0), y0.max(0.0), x1.min(1.0), y1.min(1.0))
    }
}

pub fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    iw * ih
}

/// Area of the smallest axis-aligned box enclosing both.
pub fn enclosing_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0))
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// `1 - IoU + (A_c - A_p - A_g + I) / A_c`.
pub fn box_loss(pred: &BoundingBox, truth: &BoundingBox) -> Result<f64> {
    let ac = enclosing_area(pred, truth);
    if !(ac > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate enclosing box for {pred:?}, {truth:?}")));
    }
    let i = intersection_area(pred, truth);
    let (ap, ag) = (pred.area(), truth.area());
    Ok(1.0 - iou(pred, truth) + (ac - ap - ag + i) / ac)
}

/// [`box_loss`] and its gradient with respect to `(cx, cy, w, h)` of `pred`.
pub fn box_loss_grad(pred: &BoundingBox, truth: &BoundingBox) -> Result<(f64, [f64; 4])> {
    let loss = box_loss(pred, truth)?;
    let [px0, py0, px1, py1] = pred.corners();
    let [gx0, gy0, gx1, gy1] = truth.corners();
    let step = |c: bool| if c { 1.0 } else { 0.0 };

    let iw_raw = px1.min(gx1) - px0.max(gx0);
    let ih_raw = py1.min(gy1) - py0.max(gy0);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let ap = pred.area();
    let union = ap + truth.area() - inter;
    let cw = px1.max(gx1) - px0.min(gx0);
    let ch = py1.max(gy1) - py0.min(gy0);
    let c = cw * ch;

    // loss = 2 - I/U - U/C with U = A_p + A_g - I
    let dl_di = -(union + inter) / (union * union) + 1.0 / c;
    let dl_dap = inter / (union * union) - 1.0 / c;
    let dl_dc = union / (c * c);

    // corner partials [x0, y0, x1, y1]
    let mut dcorner = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        dcorner[0] += dl_di * ih * -step(px0 > gx0);
        dcorner[2] += dl_di * ih * step(px1 < gx1);
        dcorner[1] += dl_di * iw * -step(py0 > gy0);
        dcorner[3] += dl_di * iw * step(py1 < gy1);
    }
    dcorner[0] += dl_dc * ch * -step(px0 < gx0);
    dcorner[2] += dl_dc * ch * step(px1 > gx1);
    dcorner[1] += dl_dc * cw * -step(py0 < gy0);
    dcorner[3] += dl_dc * cw * step(py1 > gy1);

    let grad = [
        dcorner[0] + dcorner[2],
        dcorner[1] + dcorner[3],
        0.5 * (dcorner[2] - dcorner[0]) + dl_dap * pred.h,
        0.5 * (dcorner[3] - dcorner[1]) + dl_dap * pred.w,
    ];
    Ok((loss, grad))
}
