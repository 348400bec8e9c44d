use crate::{Error, Result};

/// Side length of every nodule patch.
pub const PATCH_SIDE: usize = 32;
pub const PATCH_PIXELS: usize = PATCH_SIDE * PATCH_SIDE;

/// 32x32 row-major grid of unit-interval intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch(Vec<f32>);

impl Patch {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != PATCH_PIXELS {
            return Err(Error::InvalidInput(format!(
                "patch needs {PATCH_PIXELS} values, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "patch intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn filled(value: f32) -> Result<Self> {
        Self::new(vec![value; PATCH_PIXELS])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.0[y * PATCH_SIDE + x]
    }

    pub fn map_coords(&self, f: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut out = vec![0.0; PATCH_PIXELS];
        for y in 0..PATCH_SIDE {
            for x in 0..PATCH_SIDE {
                let (sy, sx) = f(y, x);
                out[y * PATCH_SIDE + x] = self.0[sy * PATCH_SIDE + sx];
            }
        }
        Self(out)
    }
}

/// Binary mask of arbitrary size, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    /// 32x32 mask from `{0, 1}` values; anything else is rejected.
    pub fn from_binary_values(values: &[f32]) -> Result<Self> {
        if values.len() != PATCH_PIXELS {
            return Err(Error::InvalidInput(format!(
                "mask needs {PATCH_PIXELS} values, got {}",
                values.len()
            )));
        }
        let bits = values
            .iter()
            .map(|&v| match v {
                0.0 => Ok(false),
                1.0 => Ok(true),
                other => Err(Error::InvalidInput(format!("mask value {other} is not 0 or 1"))),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            width: PATCH_SIDE,
            height: PATCH_SIDE,
            bits,
        })
    }

    /// Pixels strictly above `threshold`.
    pub fn threshold(width: usize, height: usize, values: &[f32], threshold: f32) -> Result<Self> {
        Self::new(width, height, values.iter().map(|&v| v > threshold).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn to_values(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn same_size(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map_coords(&self, f: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let mut out = Mask::empty(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let (sy, sx) = f(y, x);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }
}
