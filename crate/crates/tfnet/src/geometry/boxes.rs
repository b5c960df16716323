//! 2D and 3D box types and corner generation.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 < x2 && y1 < y2, "degenerate Box2D");
        Self { x1, y1, x2, y2 }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x1 && u <= self.x2 && v >= self.y1 && v <= self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn iou(&self, other: &Box2D) -> f64 {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Amodal 3D box: (cx, cy, cz) is the bottom-face center in rectified
/// camera coordinates (y down), theta rotates about the y axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }
}

/// 8 corners, bottom face first (y = cy), then top face (y = cy - h).
/// Within each face the footprint signs over (l, w) run
/// (+,+), (+,-), (-,-), (-,+), matching the tape's corner op.
pub fn box3d_corners(b: &Box3D) -> [[f64; 3]; 8] {
    let (s, c) = b.theta.sin_cos();
    let mut out = [[0.0; 3]; 8];
    for (k, &(sx, sy, sz)) in crate::tensor::CORNER_SIGNS.iter().enumerate() {
        let x = sx * b.l / 2.0;
        let z = sz * b.w / 2.0;
        out[k] = [
            b.cx + c * x + s * z,
            b.cy + sy * b.h,
            b.cz - s * x + c * z,
        ];
    }
    out
}
