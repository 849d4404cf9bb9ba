//! Binary activity labels and sigmoid posteriors, both laid out speaker × frame.

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Binary speech activity, one row per speaker.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivityMatrix {
    speakers: usize,
    frames: usize,
    data: Vec<u8>,
}

impl ActivityMatrix {
    pub fn zeros(speakers: usize, frames: usize) -> Self {
        ActivityMatrix {
            speakers,
            frames,
            data: vec![0; speakers * frames],
        }
    }

    pub fn from_vec(speakers: usize, frames: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != speakers * frames {
            return Err(Error::shape(
                "activity",
                format!("{speakers}x{frames} needs {} values, got {}", speakers * frames, data.len()),
            ));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Contract(format!("activity value {bad} is not binary")));
        }
        Ok(ActivityMatrix {
            speakers,
            frames,
            data,
        })
    }

    /// Builds from rows of 0/1 values. An empty slice gives a 0×0 matrix.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let frames = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != frames) {
            return Err(Error::shape("activity", "ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::from_vec(rows.len(), frames, data)
    }

    /// No speakers over `frames` frames.
    pub fn empty(frames: usize) -> Self {
        Self::zeros(0, frames)
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn row(&self, s: usize) -> &[u8] {
        &self.data[s * self.frames..(s + 1) * self.frames]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        (0..self.speakers).map(|s| self.row(s))
    }

    pub fn set(&mut self, s: usize, t: usize, active: bool) {
        self.data[s * self.frames + t] = u8::from(active);
    }

    pub fn get(&self, s: usize, t: usize) -> bool {
        self.data[s * self.frames + t] == 1
    }

    /// Appends a row; its length must equal the frame count.
    pub fn push_row(&mut self, row: &[u8]) -> Result<()> {
        if row.len() != self.frames {
            return Err(Error::shape(
                "activity push_row",
                format!("row of {} frames into {} frames", row.len(), self.frames),
            ));
        }
        if row.iter().any(|&v| v > 1) {
            return Err(Error::Contract("activity row is not binary".into()));
        }
        self.data.extend_from_slice(row);
        self.speakers += 1;
        Ok(())
    }

    /// Row `s` as 0.0/1.0 values.
    pub fn row_f64(&self, s: usize) -> Vec<f64> {
        self.row(s).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.speakers,
            self.frames,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("consistent shape")
    }

    /// Returns the matrix whose row `i` is `self.row(order[i])`.
    pub fn select_rows(&self, order: &[usize]) -> Result<Self> {
        let mut out = ActivityMatrix::zeros(0, self.frames);
        for &r in order {
            if r >= self.speakers {
                return Err(Error::shape("select_rows", format!("row {r} of {}", self.speakers)));
            }
            out.push_row(self.row(r))?;
        }
        Ok(out)
    }

    /// Pads with all-zero rows up to `speakers` rows.
    pub fn zero_padded(&self, speakers: usize) -> Result<Self> {
        if speakers < self.speakers {
            return Err(Error::Config(format!(
                "{} label rows exceed the {speakers} output rows",
                self.speakers
            )));
        }
        let mut data = self.data.clone();
        data.resize(speakers * self.frames, 0);
        Ok(ActivityMatrix {
            speakers,
            frames: self.frames,
            data,
        })
    }

    /// Number of active speakers in frame `t`.
    pub fn active_at(&self, t: usize) -> usize {
        (0..self.speakers).filter(|&s| self.get(s, t)).count()
    }
}

/// Sigmoid outputs in `[0, 1]`, one row per speaker iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix(Matrix);

impl PosteriorMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("posterior outside [0, 1]".into()));
        }
        Ok(PosteriorMatrix(m))
    }

    pub fn from_rows(rows: &[Vec<f64>], frames: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * frames);
        for r in rows {
            if r.len() != frames {
                return Err(Error::shape("posterior", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(Matrix::from_vec(rows.len(), frames, data)?)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn num_rows(&self) -> usize {
        self.0.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, s: usize) -> &[f64] {
        self.0.row(s)
    }
}
