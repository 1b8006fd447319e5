//! Measurement archive: per-image block measurements on disk.
//!
//! Byte layout, all integers little endian:
//!
//! ```text
//! magic        8 bytes  "CSMEASUR"
//! version      u32      currently 1
//! n            u32      patch length
//! m            u32      measurements per patch
//! mss          u8       1 if y is mean-subtracted
//! fingerprint  u64      FNV-1a hash of the sampling matrix (row-major f64 bytes)
//! count        u32      number of records
//! record       repeated `count` times:
//!   nlen       u16      name length
//!   name       nlen     UTF-8
//!   n, m       u32, u32
//!   height     u32      original image size
//!   width      u32
//!   rows       u32      patch grid
//!   cols       u32
//!   pad_bottom u32
//!   pad_right  u32
//!   data       rows·cols × (m + 1) f64, row-major: y then the mean channel
//! ```

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::imaging::{extract_patches, GridShape, Image};
use crate::sampling::{sample_patches, SamplingOperator};

pub const MAGIC: &[u8; 8] = b"CSMEASUR";
pub const VERSION: u32 = 1;

/// FNV-1a over the row-major little-endian bytes of `a` and its shape.
pub fn fingerprint(a: ArrayView2<'_, f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(&(a.nrows() as u64).to_le_bytes());
    eat(&(a.ncols() as u64).to_le_bytes());
    for v in a.iter() {
        eat(&v.to_le_bytes());
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementRecord {
    pub name: String,
    pub grid: GridShape,
    /// `P × m`.
    pub y: Array2<f64>,
    /// `y_{m+1} = n·x̄` per patch.
    pub mean_channel: Array1<f64>,
}

impl MeasurementRecord {
    /// Patch means to feed the reconstruction: zero without mean subtraction.
    pub fn means(&self, mss: bool) -> Array1<f64> {
        if mss {
            &self.mean_channel / self.grid.n() as f64
        } else {
            Array1::zeros(self.mean_channel.len())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementArchive {
    pub n: usize,
    pub m: usize,
    pub mss: bool,
    pub fingerprint: u64,
    pub records: Vec<MeasurementRecord>,
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "measurement archive",
        reason: reason.into(),
    }
}

fn u32_of(v: usize) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| format_err(format!("{v} does not fit in 32 bits")))
}

impl MeasurementArchive {
    pub fn new(op: &SamplingOperator, mss: bool) -> Self {
        MeasurementArchive {
            n: op.n(),
            m: op.m(),
            mss,
            fingerprint: fingerprint(op.matrix.view()),
            records: Vec::new(),
        }
    }

    /// Measures `image` patch by patch and appends the record.
    pub fn push_image(&mut self, op: &SamplingOperator, image: &Image) -> Result<()> {
        self.check_operator(op)?;
        let side = (self.n as f64).sqrt().round() as usize;
        let grid = extract_patches(image, side)?;
        let (y, _) = sample_patches(op, grid.patches.view(), self.mss)?;
        self.records.push(MeasurementRecord {
            name: image.name.clone(),
            grid: grid.shape(),
            y,
            mean_channel: grid.patches.sum_axis(ndarray::Axis(1)),
        });
        Ok(())
    }

    /// Fails unless `op` is the operator the archive was made with.
    pub fn check_operator(&self, op: &SamplingOperator) -> Result<()> {
        if op.n() != self.n || op.m() != self.m || fingerprint(op.matrix.view()) != self.fingerprint {
            return Err(Error::Config(format!(
                "archive was measured with a different {}x{} operator (fingerprint {:016x})",
                self.m, self.n, self.fingerprint
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.n)?);
        out.extend_from_slice(&u32_of(self.m)?);
        out.push(self.mss as u8);
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&u32_of(self.records.len())?);
        for r in &self.records {
            let name_len = u16::try_from(r.name.len()).map_err(|_| format_err("record name too long"))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            let g = r.grid;
            for v in [self.n, self.m, g.height, g.width, g.rows, g.cols, g.pad_bottom(), g.pad_right()] {
                out.extend_from_slice(&u32_of(v)?);
            }
            for (row, mean) in r.y.rows().into_iter().zip(&r.mean_channel) {
                for v in row.iter().chain(std::iter::once(mean)) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "measurement archive");
        if r.take(8)? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let m = r.u32()? as usize;
        let mss = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(format_err(format!("bad mean-subtraction flag {v}"))),
        };
        let fingerprint = r.u64()?;
        let count = r.u32()?;
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n || m == 0 {
            return Err(format_err(format!("n = {n}, m = {m} is not a square patch layout")));
        }
        let mut records = Vec::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| format_err(e.to_string()))?;
            let mut h = [0usize; 8];
            for v in &mut h {
                *v = r.u32()? as usize;
            }
            let [rn, rm, height, width, rows, cols, pad_bottom, pad_right] = h;
            let grid = GridShape::for_image(height, width, side)?;
            if (rn, rm) != (n, m)
                || (grid.rows, grid.cols, grid.pad_bottom(), grid.pad_right()) != (rows, cols, pad_bottom, pad_right)
            {
                return Err(format_err(format!("record {name} has an inconsistent header")));
            }
            let p = grid.count();
            let mut data = Array2::zeros((p, m + 1));
            for v in data.iter_mut() {
                *v = r.f64()?;
            }
            records.push(MeasurementRecord {
                name,
                grid,
                y: data.slice(s![.., ..m]).to_owned(),
                mean_channel: data.column(m).to_owned(),
            });
        }
        if !r.at_end() {
            return Err(format_err("trailing bytes"));
        }
        Ok(MeasurementArchive {
            n,
            m,
            mss,
            fingerprint,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        MeasurementArchive::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synthetic_images;
    use crate::sampling::{init_whitened, measurement_count};

    #[test]
    fn constant_image_measures_zero() {
        let op = init_whitened(measurement_count(0.25, 16), 16, 1).unwrap();
        let mut ar = MeasurementArchive::new(&op, true);
        ar.push_image(&op, &Image::new("c", Array2::from_elem((8, 12), 0.4))).unwrap();
        let rec = &ar.records[0];
        assert_eq!(rec.y.dim(), (6, 4));
        assert!(rec.y.iter().all(|v| v.abs() < 1e-14));
        assert!(rec.mean_channel.iter().all(|v| (v - 6.4).abs() < 1e-12));
        assert!(rec.means(true).iter().all(|v| (v - 0.4).abs() < 1e-14));
    }

    #[test]
    fn full_scale_record_size() {
        let op = init_whitened(measurement_count(0.25, 1089), 1089, 2).unwrap();
        let mut ar = MeasurementArchive::new(&op, true);
        ar.push_image(&op, &synthetic_images(1, 40, 40, 1)[0]).unwrap();
        assert_eq!(ar.records[0].y.dim(), (4, 272));
        assert_eq!(ar.records[0].grid.pad_bottom(), 26);
    }

    #[test]
    fn round_trip_and_validation() {
        let op = init_whitened(5, 16, 3).unwrap();
        let mut ar = MeasurementArchive::new(&op, false);
        for img in synthetic_images(2, 9, 7, 4) {
            ar.push_image(&op, &img).unwrap();
        }
        let bytes = ar.to_bytes().unwrap();
        let back = MeasurementArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back, ar);
        assert!(back.check_operator(&op).is_ok());
        let other = init_whitened(5, 16, 4).unwrap();
        assert!(matches!(back.check_operator(&other), Err(Error::Config(_))));
        assert!(MeasurementArchive::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] ^= 1;
        assert!(MeasurementArchive::from_bytes(&bad).is_err());
    }

    #[test]
    fn fingerprint_sees_every_entry() {
        let a = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let mut b = a.clone();
        b[[2, 3]] += 1e-12;
        assert_ne!(fingerprint(a.view()), fingerprint(b.view()));
        assert_ne!(fingerprint(a.view()), fingerprint(a.t()));
        assert_eq!(fingerprint(a.view()), fingerprint(a.clone().view()));
    }
}
