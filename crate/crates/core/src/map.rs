//! Raster containers shared by every stage: class-probability maps, hard
//! label maps and model input images. All are row-major with interleaved
//! channels, i.e. `data[(y * width + x) * channels + c]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The five-class label space: background, capillary, artery, vein, FAZ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Capillary = 1,
    Artery = 2,
    Vein = 3,
    Faz = 4,
}

pub const NUM_CLASSES: usize = 5;

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::Background,
        Class::Capillary,
        Class::Artery,
        Class::Vein,
        Class::Faz,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "background",
            Class::Capillary => "capillary",
            Class::Artery => "artery",
            Class::Vein => "vein",
            Class::Faz => "faz",
        }
    }
}

/// Per-pixel class probabilities, `height × width × channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ProbabilityMap {
    /// Wraps a buffer after checking its length and value range.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Argument(format!(
                "probability map dims must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Argument(format!(
                "buffer of {} values does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("probability {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Crate-internal constructor for buffers produced by operations that
    /// preserve the value range by construction.
    pub(crate) fn from_raw(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::from_raw(
            height,
            width,
            channels,
            vec![0.0; height * width * channels],
        )
    }

    /// Every pixel set to the one-hot vector of its label.
    pub fn one_hot(labels: &LabelMap, channels: usize) -> Self {
        let mut map = Self::zeros(labels.height(), labels.width(), channels);
        for (i, &l) in labels.data().iter().enumerate() {
            map.data[i * channels + l as usize] = 1.0;
        }
        map
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub(crate) fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    /// True when every pixel's channel sum is within `tol` of one.
    pub fn is_normalized(&self, tol: f64) -> bool {
        self.pixels()
            .all(|p| (p.iter().sum::<f64>() - 1.0).abs() <= tol)
    }

    /// Hard labels; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMap {
        let data = self.pixels().map(|p| argmax(p) as u8).collect();
        LabelMap::from_raw(self.height, self.width, data)
    }

    pub fn require_channels(&self, expected: usize) -> Result<()> {
        if self.channels != expected {
            return Err(Error::Layout {
                expected,
                got: self.channels,
            });
        }
        Ok(())
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-pixel class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Argument(format!(
                "label buffer of {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::Argument(format!("class id {v} out of range")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Self {
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, class: Class) -> Self {
        Self::from_raw(height, width, vec![class as u8; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: Class) {
        self.data[y * self.width + x] = class as u8;
    }

    /// Binary mask of one class.
    pub fn mask(&self, class: Class) -> Vec<bool> {
        self.data.iter().map(|&v| v == class as u8).collect()
    }

    pub fn count(&self, class: Class) -> usize {
        self.data.iter().filter(|&&v| v == class as u8).count()
    }
}

/// Model input: real-valued multi-channel image with no range constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels || height == 0 || width == 0 {
            return Err(Error::Argument(format!(
                "image buffer of {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}
