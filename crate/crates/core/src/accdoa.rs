//! Activity-coupled Cartesian DOA targets.
//!
//! Each (frame, class) cell holds a 3-vector whose direction is the DOA and
//! whose length is the activity: exactly 1 for an active class, 0 otherwise.
//! Decoding declares a class active when the predicted length exceeds a
//! threshold `tau` (strictly).

use crate::error::{shape_err, Error, Result};
use crate::events::{EventList, EventRecord};
use crate::geometry::Vec3;
use crate::tensor::{Scalar, Tensor};

/// `[frames, classes, 3]` ACCDOA tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AccdoaTensor {
    tensor: Tensor,
}

impl AccdoaTensor {
    pub fn zeros(frames: usize, classes: usize) -> Self {
        Self {
            tensor: Tensor::zeros([frames, classes, 3]),
        }
    }

    pub fn from_tensor(tensor: Tensor) -> Result<Self> {
        match tensor.shape() {
            [_, _, 3] => Ok(Self { tensor }),
            [t, 3] => {
                let t = *t;
                Ok(Self {
                    tensor: tensor.reshape([t, 1, 3])?,
                })
            }
            s => Err(shape_err(format!(
                "ACCDOA tensor must be [T, C, 3], got {s:?}"
            ))),
        }
    }

    /// Concatenates per-class `[T, 3]` (or `[T, 1, 3]`) slices along the class axis.
    pub fn from_class_slices(slices: &[Tensor]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| shape_err("no class slices"))?;
        let frames = first.shape()[0];
        let classes = slices.len();
        let mut out = Tensor::zeros([frames, classes, 3]);
        for (c, s) in slices.iter().enumerate() {
            if s.len() != frames * 3 || s.shape()[0] != frames {
                return Err(shape_err(format!(
                    "class slice {c} has shape {:?}, expected [{frames}, 3]",
                    s.shape()
                )));
            }
            for t in 0..frames {
                let dst = (t * classes + c) * 3;
                out.data_mut()[dst..dst + 3].copy_from_slice(&s.data()[t * 3..t * 3 + 3]);
            }
        }
        Ok(Self { tensor: out })
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn vector(&self, frame: usize, class: usize) -> Vec3 {
        let i = (frame * self.classes() + class) * 3;
        let d = self.tensor.data();
        [d[i] as f64, d[i + 1] as f64, d[i + 2] as f64]
    }

    pub fn set_vector(&mut self, frame: usize, class: usize, v: Vec3) {
        let i = (frame * self.classes() + class) * 3;
        let d = self.tensor.data_mut();
        for k in 0..3 {
            d[i + k] = v[k] as Scalar;
        }
    }

    /// `D[:, class, :]` as a `[T, 3]` tensor.
    pub fn class_slice(&self, class: usize) -> Tensor {
        let frames = self.frames();
        let mut data = Vec::with_capacity(frames * 3);
        for t in 0..frames {
            let i = (t * self.classes() + class) * 3;
            data.extend_from_slice(&self.tensor.data()[i..i + 3]);
        }
        Tensor::new([frames, 3], data).expect("slice shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub target: AccdoaTensor,
    /// Records dropped because an earlier record already claimed the same
    /// (frame, class) cell.
    pub collisions: usize,
}

/// Builds the target tensor. Records are taken in list order, so when two
/// records share a cell the earlier one (earlier onset, for lists produced
/// by scene rendering) is kept and the collision is counted.
pub fn encode(events: &EventList, frames: usize, classes: usize) -> Result<Encoded> {
    let mut target = AccdoaTensor::zeros(frames, classes);
    let mut taken = vec![false; frames * classes];
    let mut collisions = 0;
    for r in events {
        if r.frame >= frames {
            return Err(Error::InvalidArgument(format!(
                "event frame {} outside 0..{frames}",
                r.frame
            )));
        }
        if r.class_id >= classes {
            return Err(Error::InvalidArgument(format!(
                "event class {} outside 0..{classes}",
                r.class_id
            )));
        }
        let cell = r.frame * classes + r.class_id;
        if taken[cell] {
            collisions += 1;
            continue;
        }
        taken[cell] = true;
        target.set_vector(r.frame, r.class_id, r.doa());
    }
    Ok(Encoded { target, collisions })
}

/// Emits one event per cell whose vector length is strictly greater than
/// `tau`, with the vector normalized to unit length. Zero-length cells are
/// never emitted, whatever `tau` is.
pub fn decode(pred: &AccdoaTensor, tau: f64) -> EventList {
    let mut out = EventList::new();
    for t in 0..pred.frames() {
        for c in 0..pred.classes() {
            let v = pred.vector(t, c);
            let n = crate::geometry::norm(v);
            if n > tau && n > 0.0 {
                if let Some(r) = EventRecord::from_doa(t, c, v) {
                    out.push(r);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_event_encodes_to_unit_y() {
        let events: EventList = [EventRecord::new(0, 2, 90.0, 0.0)].into_iter().collect();
        let enc = encode(&events, 3, 4).unwrap();
        let v = enc.target.vector(0, 2);
        assert!(v[0].abs() < 1e-7 && (v[1] - 1.0).abs() < 1e-7 && v[2].abs() < 1e-7);
        let nonzero = enc
            .target
            .tensor()
            .data()
            .iter()
            .filter(|x| x.abs() > 1e-7)
            .count();
        assert_eq!(nonzero, 1);
        assert_eq!(enc.collisions, 0);
    }

    #[test]
    fn empty_list_is_all_zero() {
        let enc = encode(&EventList::new(), 5, 3).unwrap();
        assert!(enc.target.tensor().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn out_of_range_is_rejected() {
        let e: EventList = [EventRecord::new(5, 0, 0.0, 0.0)].into_iter().collect();
        assert!(encode(&e, 5, 1).is_err());
        let e: EventList = [EventRecord::new(0, 3, 0.0, 0.0)].into_iter().collect();
        assert!(encode(&e, 5, 3).is_err());
    }

    #[test]
    fn collision_keeps_first_and_counts() {
        let e: EventList = [
            EventRecord::new(1, 0, 0.0, 0.0),
            EventRecord::new(1, 0, 90.0, 0.0),
        ]
        .into_iter()
        .collect();
        let enc = encode(&e, 2, 1).unwrap();
        assert_eq!(enc.collisions, 1);
        assert!((enc.target.vector(1, 0)[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn decode_threshold_examples() {
        let mut p = AccdoaTensor::zeros(2, 1);
        p.set_vector(0, 0, [0.6, 0.0, 0.0]);
        p.set_vector(1, 0, [0.4, 0.2, 0.1]);
        let ev = decode(&p, 0.5);
        assert_eq!(ev.len(), 1);
        let r = ev.records()[0];
        assert_eq!((r.frame, r.class_id), (0, 0));
        let d = r.doa();
        assert!((d[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_cells_never_decode() {
        let p = AccdoaTensor::zeros(4, 3);
        assert!(decode(&p, -1.0).is_empty());
        assert!(decode(&p, 0.0).is_empty());
    }

    #[test]
    fn class_slices_round_trip() {
        let mut p = AccdoaTensor::zeros(3, 2);
        p.set_vector(2, 1, [0.1, 0.2, 0.3]);
        p.set_vector(0, 0, [-0.5, 0.0, 0.5]);
        let slices = [p.class_slice(0), p.class_slice(1)];
        assert_eq!(AccdoaTensor::from_class_slices(&slices).unwrap(), p);
    }
}
