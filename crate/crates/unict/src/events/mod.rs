//! Asynchronous event streams: parsing, frame windowing, and accumulation
//! into spatio-temporal voxel grids.
//!
//! An event is a `(t, x, y, p)` tuple produced when a pixel's log intensity
//! crosses the contrast threshold. A slice of them is accumulated into a
//! `[B, H, W]` grid by scaling timestamps to `[0, B-1]` and splitting each
//! event's polarity bilinearly over the two neighbouring time bins.

use crate::tensor::{Scalar, Tensor};

pub mod io;

pub use io::{
    open_events, sniff_format, write_events_binary, write_events_text, EventFormat, EventReader,
};

#[derive(Debug, thiserror::Error)]
pub enum EventError {
    #[error("window duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("timestamp {t} outside window [{t0}, {t1}]")]
    OutsideWindow { t: f64, t0: f64, t1: f64 },
    #[error("events are not sorted by timestamp at index {0}")]
    Unsorted(usize),
    #[error("frame timestamps must be strictly increasing at index {0}")]
    BadFrameTimes(usize),
    #[error("need at least two frame timestamps, got {0}")]
    TooFewFrames(usize),
    #[error("event at ({x}, {y}) outside {width}x{height} grid")]
    CoordsOutOfBounds {
        x: u16,
        y: u16,
        width: usize,
        height: usize,
    },
    #[error("line {line}: polarity {value} not in {{-1, 0, 1}}")]
    BadPolarity { value: i64, line: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("byte offset {offset}: {msg}")]
    BinaryParse { offset: u64, msg: String },
    #[error("not an event file (bad magic)")]
    BadMagic,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T, E = EventError> = std::result::Result<T, E>;

/// One asynchronous brightness-change event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    /// Seconds.
    pub t: f64,
    /// Pixel column.
    pub x: u16,
    /// Pixel row.
    pub y: u16,
    /// Polarity, -1 or +1.
    pub p: i8,
}

/// Time-ordered events inside one frame interval.
#[derive(Debug, Clone)]
pub struct EventSlice {
    events: Vec<EventRecord>,
    t0: f64,
    dt: f64,
}

impl EventSlice {
    /// Validates ordering and that every timestamp lies in `[t0, t0 + dt]`.
    pub fn new(events: Vec<EventRecord>, t0: f64, dt: f64) -> Result<Self> {
        if dt <= 0.0 {
            return Err(EventError::NonPositiveDuration(dt));
        }
        let t1 = t0 + dt;
        for (i, e) in events.iter().enumerate() {
            if e.t < t0 || e.t > t1 {
                return Err(EventError::OutsideWindow { t: e.t, t0, t1 });
            }
            if i > 0 && e.t < events[i - 1].t {
                return Err(EventError::Unsorted(i));
            }
        }
        Ok(Self { events, t0, dt })
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn polarity_sum(&self) -> f64 {
        self.events.iter().map(|e| e.p as f64).sum()
    }
}

/// Dense `[B, H, W]` accumulation of one event slice.
#[derive(Debug, Clone)]
pub struct VoxelGrid<T: Scalar> {
    data: Tensor<T>,
    bins: usize,
    height: usize,
    width: usize,
}

impl<T: Scalar> VoxelGrid<T> {
    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn voxel(&self, bin: usize, y: usize, x: usize) -> T {
        self.data.data()[(bin * self.height + y) * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.sum_f64()
    }
}

/// Map a timestamp into bin coordinates: `t* = (B-1)(t - t0) / dt`.
pub fn scale_timestamp(t: f64, t0: f64, dt: f64, bins: usize) -> Result<f64> {
    if dt <= 0.0 {
        return Err(EventError::NonPositiveDuration(dt));
    }
    if t < t0 || t > t0 + dt {
        return Err(EventError::OutsideWindow {
            t,
            t0,
            t1: t0 + dt,
        });
    }
    Ok((bins as f64 - 1.0) * (t - t0) / dt)
}

/// Accumulate a slice into a `[bins, height, width]` grid.
///
/// Each event deposits its polarity at its pixel, split over the two bins
/// adjacent to `t*` with weights `max(0, 1 - |b - t*|)`; a `t*` landing
/// exactly on an integer bin gives that bin the full weight. Accumulation
/// runs in f64 and casts once at the end, so grid mass matches the slice's
/// polarity sum to fp precision.
pub fn voxelize<T: Scalar>(
    slice: &EventSlice,
    height: usize,
    width: usize,
    bins: usize,
) -> Result<VoxelGrid<T>> {
    let mut acc = vec![0.0f64; bins * height * width];
    let plane = height * width;
    for e in slice.events() {
        if (e.x as usize) >= width || (e.y as usize) >= height {
            return Err(EventError::CoordsOutOfBounds {
                x: e.x,
                y: e.y,
                width,
                height,
            });
        }
        let t_star = scale_timestamp(e.t, slice.t0, slice.dt, bins)?;
        let pixel = e.y as usize * width + e.x as usize;
        let b0 = t_star.floor() as usize;
        let frac = t_star - b0 as f64;
        let p = e.p as f64;
        acc[b0 * plane + pixel] += p * (1.0 - frac);
        if frac > 0.0 && b0 + 1 < bins {
            acc[(b0 + 1) * plane + pixel] += p * frac;
        }
    }
    let data = Tensor::from_vec(
        acc.into_iter().map(T::from_f64).collect(),
        &[bins, height, width],
    )?;
    Ok(VoxelGrid {
        data,
        bins,
        height,
        width,
    })
}

/// Split a sorted stream into per-frame slices.
///
/// Slice `k` (1-based over `frame_ts`) covers `[frame_ts[k-1], frame_ts[k])`;
/// only the final slice includes its right endpoint so the last event is
/// never lost. Events before the first or after the last frame are dropped.
pub fn window_events(
    events: &[EventRecord],
    frame_ts: &[f64],
) -> Result<Vec<EventSlice>> {
    if frame_ts.len() < 2 {
        return Err(EventError::TooFewFrames(frame_ts.len()));
    }
    for i in 1..frame_ts.len() {
        if frame_ts[i] <= frame_ts[i - 1] {
            return Err(EventError::BadFrameTimes(i));
        }
    }
    for i in 1..events.len() {
        if events[i].t < events[i - 1].t {
            return Err(EventError::Unsorted(i));
        }
    }
    let n_slices = frame_ts.len() - 1;
    let mut slices = Vec::with_capacity(n_slices);
    let mut cursor = 0usize;
    // skip events before the first frame
    while cursor < events.len() && events[cursor].t < frame_ts[0] {
        cursor += 1;
    }
    for k in 0..n_slices {
        let (lo, hi) = (frame_ts[k], frame_ts[k + 1]);
        let last = k == n_slices - 1;
        let mut bucket = Vec::new();
        while cursor < events.len() {
            let t = events[cursor].t;
            if t < hi || (last && t == hi) {
                bucket.push(events[cursor]);
                cursor += 1;
            } else {
                break;
            }
        }
        slices.push(EventSlice::new(bucket, lo, hi - lo)?);
    }
    Ok(slices)
}
