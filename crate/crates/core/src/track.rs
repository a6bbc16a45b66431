//! Closed-circuit geometry in curvilinear coordinates.
//!
//! A [`Track`] is the centerline resampled at a fixed spacing with pose, curvature and
//! half-widths per sample. Curvature is interpolated linearly between samples and the pose
//! follows the matching clothoid, pinned to the stored samples at both ends of each cell.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RESAMPLE_SPACING: f64 = 0.1;
/// Extra distance beyond the widest half-width that still localizes.
pub const LOCALIZATION_MARGIN: f64 = 2.0;
const CLOSURE_TOL_POS: f64 = 1e-3;
const CLOSURE_TOL_HEADING: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Straight {
        length: f64,
    },
    /// Circular arc; a positive angle turns left.
    Arc {
        radius: f64,
        angle_deg: f64,
    },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Straight { length } => length,
            Segment::Arc { radius, angle_deg } => radius * angle_deg.to_radians().abs(),
        }
    }

    fn curvature(&self) -> f64 {
        match *self {
            Segment::Straight { .. } => 0.0,
            Segment::Arc { radius, angle_deg } => angle_deg.signum() / radius,
        }
    }

    /// Pose after travelling `d` metres from `(x, y, h)`.
    fn advance(&self, (x, y, h): (f64, f64, f64), d: f64) -> (f64, f64, f64) {
        let k = self.curvature();
        if k == 0.0 {
            (x + d * h.cos(), y + d * h.sin(), h)
        } else {
            let h1 = h + k * d;
            (
                x + (h1.sin() - h.sin()) / k,
                y - (h1.cos() - h.cos()) / k,
                h1,
            )
        }
    }
}

/// Segment list describing a track layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub segments: Vec<Segment>,
    pub half_width_left: f64,
    pub half_width_right: f64,
    #[serde(default = "default_closed")]
    pub closed: bool,
}

fn default_closed() -> bool {
    true
}

impl TrackSpec {
    /// Rounded rectangle with four different corner radii, about 180 m long.
    pub fn default_circuit() -> Self {
        let s = |length| Segment::Straight { length };
        let a = |radius| Segment::Arc {
            radius,
            angle_deg: 90.0,
        };
        Self {
            segments: vec![
                s(40.0),
                a(12.0),
                s(20.0),
                a(8.0),
                s(40.0),
                a(10.0),
                s(24.0),
                a(6.0),
            ],
            half_width_left: 2.0,
            half_width_right: 2.0,
            closed: true,
        }
    }

    pub fn circle(radius: f64, half_width: f64) -> Self {
        Self {
            segments: vec![Segment::Arc {
                radius,
                angle_deg: 360.0,
            }],
            half_width_left: half_width,
            half_width_right: half_width,
            closed: true,
        }
    }

    pub fn stadium(straight: f64, radius: f64, half_width: f64) -> Self {
        Self {
            segments: vec![
                Segment::Straight { length: straight },
                Segment::Arc {
                    radius,
                    angle_deg: 180.0,
                },
                Segment::Straight { length: straight },
                Segment::Arc {
                    radius,
                    angle_deg: 180.0,
                },
            ],
            half_width_left: half_width,
            half_width_right: half_width,
            closed: true,
        }
    }

    pub fn length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSample {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    /// Unwrapped heading, continuous along the track.
    pub heading: f64,
    pub curvature: f64,
    pub w_left: f64,
    pub w_right: f64,
}

/// Curvilinear coordinates of a pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrenetPose {
    pub s: f64,
    /// Signed lateral offset, positive to the left of the centerline.
    pub e_y: f64,
    /// Heading error wrapped to (-pi, pi].
    pub e_theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    samples: Vec<TrackSample>,
    length: f64,
    closed: bool,
    spacing: f64,
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Builds and resamples a track from its segment list.
pub fn make_synthetic_track(spec: &TrackSpec) -> Result<Track> {
    if spec.segments.is_empty() {
        return Err(Error::invalid("track needs at least one segment"));
    }
    for seg in &spec.segments {
        let ok = match *seg {
            Segment::Straight { length } => length > 0.0,
            Segment::Arc { radius, angle_deg } => radius > 0.0 && angle_deg != 0.0,
        };
        if !ok {
            return Err(Error::invalid(format!("degenerate segment {seg:?}")));
        }
    }
    if !(spec.half_width_left > 0.5 && spec.half_width_right > 0.5) {
        return Err(Error::invalid("half-widths must exceed 0.5 m"));
    }
    // segment start poses and abscissae
    let mut starts = Vec::with_capacity(spec.segments.len());
    let mut pose = (0.0, 0.0, 0.0);
    let mut s0 = 0.0;
    for seg in &spec.segments {
        starts.push((s0, pose));
        pose = seg.advance(pose, seg.length());
        s0 += seg.length();
    }
    let length = s0;
    if spec.closed {
        let pos_err = pose.0.hypot(pose.1);
        let turn = pose.2 / (2.0 * PI);
        let heading_err = (turn - turn.round()).abs() * 2.0 * PI;
        if pos_err > CLOSURE_TOL_POS || heading_err > CLOSURE_TOL_HEADING || turn.round() == 0.0 {
            return Err(Error::invalid(format!(
                "track does not close: end offset {pos_err:.4} m, heading offset {heading_err:.4} rad"
            )));
        }
    }
    let n = (length / RESAMPLE_SPACING).round().max(4.0) as usize;
    let ds = length / n as f64;
    let count = if spec.closed { n } else { n + 1 };
    let mut samples = Vec::with_capacity(count);
    let mut seg_idx = 0;
    for i in 0..count {
        let s = i as f64 * ds;
        while seg_idx + 1 < spec.segments.len() && s >= starts[seg_idx + 1].0 - 1e-12 {
            seg_idx += 1;
        }
        let seg = &spec.segments[seg_idx];
        let (x, y, h) = seg.advance(starts[seg_idx].1, s - starts[seg_idx].0);
        samples.push(TrackSample {
            s,
            x,
            y,
            heading: h,
            curvature: seg.curvature(),
            w_left: spec.half_width_left,
            w_right: spec.half_width_right,
        });
    }
    Track::from_samples(samples, length, spec.closed)
}

impl Track {
    pub fn from_samples(samples: Vec<TrackSample>, length: f64, closed: bool) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::invalid("track needs at least two samples"));
        }
        if samples[0].s != 0.0 || samples.windows(2).any(|w| w[1].s <= w[0].s) {
            return Err(Error::invalid(
                "sample abscissae must start at 0 and increase",
            ));
        }
        if samples.iter().any(|p| !(p.w_left > 0.5 && p.w_right > 0.5)) {
            return Err(Error::invalid("half-widths must exceed 0.5 m"));
        }
        let last = samples.last().unwrap().s;
        if closed && last >= length || !closed && (last - length).abs() > 1e-9 {
            return Err(Error::invalid("track length inconsistent with samples"));
        }
        let spacing = length
            / if closed {
                samples.len()
            } else {
                samples.len() - 1
            } as f64;
        Ok(Self {
            samples,
            length,
            closed,
            spacing,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn samples(&self) -> &[TrackSample] {
        &self.samples
    }

    pub fn max_half_width(&self) -> f64 {
        self.samples
            .iter()
            .map(|p| p.w_left.max(p.w_right))
            .fold(0.0, f64::max)
    }

    /// Wraps `s` into `[0, L)` on closed tracks; validates the range on open ones.
    pub fn wrap_s(&self, s: f64) -> Result<f64> {
        if !s.is_finite() {
            return Err(Error::invalid("abscissa must be finite"));
        }
        if self.closed {
            Ok(s.rem_euclid(self.length))
        } else if (0.0..=self.length).contains(&s) {
            Ok(s)
        } else {
            Err(Error::invalid(format!(
                "s = {s} outside open track [0, {}]",
                self.length
            )))
        }
    }

    /// Cell index and fractional position, plus the sample after the cell (wrapping).
    fn locate(&self, s: f64) -> Result<(usize, usize, f64)> {
        let s = self.wrap_s(s)?;
        let n = self.samples.len();
        let mut i = ((s / self.spacing).floor() as usize).min(n - 1);
        // guard against round-off near cell boundaries
        while i > 0 && self.samples[i].s > s {
            i -= 1;
        }
        while i + 1 < n && self.samples[i + 1].s <= s {
            i += 1;
        }
        let j = if i + 1 < n {
            i + 1
        } else if self.closed {
            0
        } else {
            i
        };
        let s_next = if i + 1 < n {
            self.samples[i + 1].s
        } else {
            self.length
        };
        let width = s_next - self.samples[i].s;
        let frac = if width > 0.0 {
            (s - self.samples[i].s) / width
        } else {
            0.0
        };
        Ok((i, j, frac))
    }

    pub fn curvature_at(&self, s: f64) -> Result<f64> {
        let (i, j, f) = self.locate(s)?;
        Ok(self.samples[i].curvature * (1.0 - f) + self.samples[j].curvature * f)
    }

    /// Raw lateral bounds `(e_y_lb, e_y_ub)`; left is positive.
    pub fn bounds_at(&self, s: f64) -> Result<(f64, f64)> {
        let (i, j, f) = self.locate(s)?;
        let (a, b) = (&self.samples[i], &self.samples[j]);
        let wl = a.w_left * (1.0 - f) + b.w_left * f;
        let wr = a.w_right * (1.0 - f) + b.w_right * f;
        Ok((-wr, wl))
    }

    fn heading_of_next(&self, i: usize, j: usize) -> f64 {
        if j > i {
            self.samples[j].heading
        } else {
            // wrap: same physical heading as sample 0, unwrapped past the last sample
            let h0 = self.samples[0].heading;
            let end = self.samples[i].heading + self.spacing * self.samples[i].curvature;
            h0 + 2.0 * PI * ((end - h0) / (2.0 * PI)).round()
        }
    }

    /// Centerline pose `(x, y, heading)` at `s`.
    ///
    /// Positions follow a cubic Hermite curve through the samples with unit tangents along the
    /// sample headings. The returned heading is the direction of that curve, so the normal used
    /// by [`Track::frenet_to_global`] is exactly orthogonal to the centerline.
    pub fn pose_at(&self, s: f64) -> Result<(f64, f64, f64)> {
        let (i, j, f) = self.locate(s)?;
        if i == j {
            let p = &self.samples[i];
            return Ok((p.x, p.y, p.heading));
        }
        let a = &self.samples[i];
        let b = &self.samples[j];
        let h = self.spacing;
        let hb = self.heading_of_next(i, j);
        let (ta, tb) = (a.heading.sin_cos(), hb.sin_cos());
        let (f2, f3) = (f * f, f * f * f);
        let (h00, h10, h01, h11) = (
            2.0 * f3 - 3.0 * f2 + 1.0,
            f3 - 2.0 * f2 + f,
            3.0 * f2 - 2.0 * f3,
            f3 - f2,
        );
        let x = h00 * a.x + h10 * h * ta.1 + h01 * b.x + h11 * h * tb.1;
        let y = h00 * a.y + h10 * h * ta.0 + h01 * b.y + h11 * h * tb.0;
        let (d00, d10, d01, d11) = (
            6.0 * f2 - 6.0 * f,
            3.0 * f2 - 4.0 * f + 1.0,
            6.0 * f - 6.0 * f2,
            3.0 * f2 - 2.0 * f,
        );
        let dx = (d00 * a.x + d01 * b.x) / h + d10 * ta.1 + d11 * tb.1;
        let dy = (d00 * a.y + d01 * b.y) / h + d10 * ta.0 + d11 * tb.0;
        let heading = a.heading + wrap_angle(dy.atan2(dx) - a.heading);
        Ok((x, y, heading))
    }

    pub fn frenet_to_global(&self, s: f64, e_y: f64, e_theta: f64) -> Result<(f64, f64, f64)> {
        let (x, y, h) = self.pose_at(s)?;
        Ok((
            x - e_y * h.sin(),
            y + e_y * h.cos(),
            wrap_angle(h + e_theta),
        ))
    }

    fn dist2(&self, s: f64, x: f64, y: f64) -> f64 {
        let (cx, cy, _) = self.pose_at(s).expect("wrapped abscissa");
        (cx - x).powi(2) + (cy - y).powi(2)
    }

    /// Projects a global pose onto the centerline.
    pub fn global_to_frenet(&self, x: f64, y: f64, psi: f64) -> Result<FrenetPose> {
        if !(x.is_finite() && y.is_finite() && psi.is_finite()) {
            return Err(Error::Localization("non-finite pose".into()));
        }
        let (best, _) = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (p.x - x).powi(2) + (p.y - y).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let s_best = self.samples[best].s;
        let (mut lo, mut hi) = (s_best - self.spacing, s_best + self.spacing);
        if !self.closed {
            lo = lo.max(0.0);
            hi = hi.min(self.length);
        }
        // golden-section search on the squared distance
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = hi - g * (hi - lo);
        let mut d = lo + g * (hi - lo);
        let mut fc = self.dist2(c, x, y);
        let mut fd = self.dist2(d, x, y);
        while hi - lo > 1e-9 {
            if fc < fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - g * (hi - lo);
                fc = self.dist2(c, x, y);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + g * (hi - lo);
                fd = self.dist2(d, x, y);
            }
        }
        let s = self.wrap_s(0.5 * (lo + hi))?;
        let (cx, cy, h) = self.pose_at(s)?;
        let e_y = -(x - cx) * h.sin() + (y - cy) * h.cos();
        let dist = (x - cx).hypot(y - cy);
        if dist > self.max_half_width() + LOCALIZATION_MARGIN {
            return Err(Error::Localization(format!(
                "pose ({x:.2}, {y:.2}) is {dist:.2} m from the centerline"
            )));
        }
        Ok(FrenetPose {
            s,
            e_y,
            e_theta: wrap_angle(psi - h),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "# gpkart track v1")?;
        writeln!(out, "# length={:?}", self.length)?;
        writeln!(out, "# closed={}", self.closed)?;
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(["s", "x", "y", "heading", "curvature", "w_left", "w_right"])?;
            for p in &self.samples {
                w.serialize((p.s, p.x, p.y, p.heading, p.curvature, p.w_left, p.w_right))?;
            }
            w.flush()?;
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut length = None;
        let mut closed = None;
        for line in text.lines().take_while(|l| l.starts_with('#')) {
            let body = line.trim_start_matches('#').trim();
            if let Some(v) = body.strip_prefix("length=") {
                length = Some(v.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?);
            } else if let Some(v) = body.strip_prefix("closed=") {
                closed = Some(v.parse::<bool>().map_err(|e| Error::Parse(e.to_string()))?);
            }
        }
        let (length, closed) = match (length, closed) {
            (Some(l), Some(c)) => (l, c),
            _ => return Err(Error::Parse("track header needs length and closed".into())),
        };
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let mut samples = Vec::new();
        for rec in rdr.deserialize() {
            let (s, x, y, heading, curvature, w_left, w_right): (
                f64,
                f64,
                f64,
                f64,
                f64,
                f64,
                f64,
            ) = rec?;
            samples.push(TrackSample {
                s,
                x,
                y,
                heading,
                curvature,
                w_left,
                w_right,
            });
        }
        Self::from_samples(samples, length, closed)
    }
}
