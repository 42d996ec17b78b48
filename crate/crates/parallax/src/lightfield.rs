//! 4D light-field container, the LFR file format, sub-aperture extraction,
//! and view-selection strategies.
//!
//! A light field stores `L(v, u, y, x, c)` row-major: angular row, angular
//! column, then the spatial image plane. Samples are f32 in `[0, 1]`;
//! constructors clamp finite out-of-range values and reject non-finite ones.
//!
//! LFR format (little-endian): magic `LFR1`, five u32 fields
//! `A_v, A_u, H, W, C` (24 header bytes total), then `A_v*A_u*H*W*C` f32
//! samples in `(v, u, y, x, c)` row-major order.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

const LFR_MAGIC: [u8; 4] = *b"LFR1";
/// Magic (4) + five u32 dimension fields.
pub const LFR_HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum LightFieldError {
    #[error("bad magic {0:?}, expected {LFR_MAGIC:?}")]
    BadMagic([u8; 4]),
    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },
    #[error("file has {0} trailing bytes after the payload")]
    TrailingData(u64),
    #[error("zero or overflowing dimensions {0:?}")]
    DimensionOverflow([usize; 5]),
    #[error("sample {index} is not finite")]
    NonFiniteSample { index: usize },
    #[error("data length {got} does not match dimensions (expected {want})")]
    DataLengthMismatch { got: usize, want: usize },
    #[error("view ({u}, {v}) out of range for a {a_u}x{a_v} angular grid")]
    OutOfRange {
        u: usize,
        v: usize,
        a_u: usize,
        a_v: usize,
    },
    #[error("requested {requested} views but the field has only {available}")]
    KTooLarge { requested: usize, available: usize },
    #[error("view selection needs at least one view")]
    EmptySelection,
    #[error("duplicate coordinate {0} in explicit selection")]
    DuplicateCoord(ViewCoord),
    #[error("strategy '{0}' is not a named selection strategy")]
    UnknownStrategy(String),
    #[error("the explicit strategy requires coordinates; use ViewSelection::explicit")]
    ExplicitRequiresCoords,
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// A single 2D image plane, `H x W x C` f32 row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * channels);
        Image {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image::new(height, width, channels, vec![0.0; height * width * channels])
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }
}

/// Angular coordinate of one sub-aperture view: `u` is the column, `v` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ViewCoord {
    pub u: usize,
    pub v: usize,
}

impl ViewCoord {
    pub fn new(u: usize, v: usize) -> Self {
        ViewCoord { u, v }
    }
}

impl fmt::Display for ViewCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.u, self.v)
    }
}

/// Immutable 4D light field of sub-aperture views.
#[derive(Debug, Clone, PartialEq)]
pub struct LightField {
    angular_rows: usize,
    angular_cols: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl LightField {
    /// Validates dimensions, clamps finite samples to `[0, 1]` and rejects
    /// non-finite ones.
    pub fn new(
        angular_rows: usize,
        angular_cols: usize,
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f32>,
    ) -> Result<Self, LightFieldError> {
        let want = checked_len(angular_rows, angular_cols, height, width, channels)?;
        if data.len() != want {
            return Err(LightFieldError::DataLengthMismatch {
                got: data.len(),
                want,
            });
        }
        for (index, v) in data.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(LightFieldError::NonFiniteSample { index });
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(LightField {
            angular_rows,
            angular_cols,
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a field procedurally from a per-sample function `(v,u,y,x,c)`.
    pub fn from_fn(
        angular_rows: usize,
        angular_cols: usize,
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize, usize, usize) -> f32,
    ) -> Result<Self, LightFieldError> {
        let len = checked_len(angular_rows, angular_cols, height, width, channels)?;
        let mut data = Vec::with_capacity(len);
        for v in 0..angular_rows {
            for u in 0..angular_cols {
                for y in 0..height {
                    for x in 0..width {
                        for c in 0..channels {
                            data.push(f(v, u, y, x, c));
                        }
                    }
                }
            }
        }
        LightField::new(angular_rows, angular_cols, height, width, channels, data)
    }

    pub fn angular_rows(&self) -> usize {
        self.angular_rows
    }

    pub fn angular_cols(&self) -> usize {
        self.angular_cols
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

    pub fn num_views(&self) -> usize {
        self.angular_rows * self.angular_cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Flat offset of `(v, u, y, x, c)`.
    pub fn index(&self, v: usize, u: usize, y: usize, x: usize, c: usize) -> usize {
        ((((v * self.angular_cols + u) * self.height) + y) * self.width + x) * self.channels + c
    }

    pub fn sample(&self, v: usize, u: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(v, u, y, x, c)]
    }

    /// Integer center view `((A_u-1)/2, (A_v-1)/2)`, rounding toward the
    /// top-left on even grids.
    pub fn center(&self) -> ViewCoord {
        ViewCoord::new((self.angular_cols - 1) / 2, (self.angular_rows - 1) / 2)
    }

    /// Copies out the sub-aperture image at `coord`.
    pub fn extract_view(&self, coord: ViewCoord) -> Result<Image, LightFieldError> {
        if coord.u >= self.angular_cols || coord.v >= self.angular_rows {
            return Err(LightFieldError::OutOfRange {
                u: coord.u,
                v: coord.v,
                a_u: self.angular_cols,
                a_v: self.angular_rows,
            });
        }
        let len = self.height * self.width * self.channels;
        let start = self.index(coord.v, coord.u, 0, 0, 0);
        Ok(Image::new(
            self.height,
            self.width,
            self.channels,
            self.data[start..start + len].to_vec(),
        ))
    }
}

fn checked_len(
    a_v: usize,
    a_u: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Result<usize, LightFieldError> {
    let dims = [a_v, a_u, h, w, c];
    if dims.contains(&0) {
        return Err(LightFieldError::DimensionOverflow(dims));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(LightFieldError::DimensionOverflow(dims))
}

/// Writes the LFR representation of a light field; bit-exact inverse of
/// [`load_lfr`].
pub fn save_lfr(lf: &LightField, path: impl AsRef<Path>) -> Result<(), LightFieldError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_lfr(lf, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn write_lfr(lf: &LightField, out: &mut impl Write) -> Result<(), LightFieldError> {
    let dims = [
        lf.angular_rows,
        lf.angular_cols,
        lf.height,
        lf.width,
        lf.channels,
    ];
    out.write_all(&LFR_MAGIC)?;
    for d in dims {
        let d32 =
            u32::try_from(d).map_err(|_| LightFieldError::DimensionOverflow([0, 0, 0, 0, 0]))?;
        out.write_all(&d32.to_le_bytes())?;
    }
    for v in &lf.data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads an LFR file back into a validated [`LightField`].
pub fn load_lfr(path: impl AsRef<Path>) -> Result<LightField, LightFieldError> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    read_lfr(&mut BufReader::new(file), len)
}

pub fn read_lfr(input: &mut impl Read, total_len: u64) -> Result<LightField, LightFieldError> {
    if total_len < LFR_HEADER_LEN as u64 {
        return Err(LightFieldError::TruncatedFile {
            expected: LFR_HEADER_LEN as u64,
            found: total_len,
        });
    }
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != LFR_MAGIC {
        return Err(LightFieldError::BadMagic(magic));
    }
    let mut dims = [0usize; 5];
    let mut buf4 = [0u8; 4];
    for d in dims.iter_mut() {
        input.read_exact(&mut buf4)?;
        *d = u32::from_le_bytes(buf4) as usize;
    }
    let [a_v, a_u, h, w, c] = dims;
    let count = checked_len(a_v, a_u, h, w, c)?;
    let expected = LFR_HEADER_LEN as u64 + 4 * count as u64;
    if total_len < expected {
        return Err(LightFieldError::TruncatedFile {
            expected,
            found: total_len,
        });
    }
    if total_len > expected {
        return Err(LightFieldError::TrailingData(total_len - expected));
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut buf4)?;
        data.push(f32::from_le_bytes(buf4));
    }
    LightField::new(a_v, a_u, h, w, c, data)
}

/// The four named strategies plus explicit user-supplied coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionStrategy {
    /// Top-left and bottom-right corners plus the center view (K = 3).
    CornersPlusCenter,
    /// Greedy farthest-point selection in (u, v), seeded at the center.
    SparseMaxDivergence,
    /// Center plus the K-1 views closest to it in angular distance.
    MinAngularDifference,
    /// Center plus the four mid-edge views (K = 5).
    FixedFive,
    Explicit,
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SelectionStrategy::CornersPlusCenter => "corners-plus-center",
            SelectionStrategy::SparseMaxDivergence => "sparse-max-divergence",
            SelectionStrategy::MinAngularDifference => "min-angular-difference",
            SelectionStrategy::FixedFive => "fixed-five",
            SelectionStrategy::Explicit => "explicit",
        };
        f.write_str(name)
    }
}

impl FromStr for SelectionStrategy {
    type Err = LightFieldError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "corners-plus-center" | "corners" => Ok(SelectionStrategy::CornersPlusCenter),
            "sparse-max-divergence" | "sparse" => Ok(SelectionStrategy::SparseMaxDivergence),
            "min-angular-difference" | "nearest" => Ok(SelectionStrategy::MinAngularDifference),
            "fixed-five" => Ok(SelectionStrategy::FixedFive),
            other => Err(LightFieldError::UnknownStrategy(other.to_string())),
        }
    }
}

/// An ordered, pairwise-distinct list of view coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewSelection {
    strategy: SelectionStrategy,
    coords: Vec<ViewCoord>,
}

impl ViewSelection {
    /// Wraps user-supplied coordinates, validating range and distinctness.
    pub fn explicit(
        lf: &LightField,
        coords: Vec<ViewCoord>,
    ) -> Result<Self, LightFieldError> {
        if coords.is_empty() {
            return Err(LightFieldError::EmptySelection);
        }
        for (i, c) in coords.iter().enumerate() {
            if c.u >= lf.angular_cols() || c.v >= lf.angular_rows() {
                return Err(LightFieldError::OutOfRange {
                    u: c.u,
                    v: c.v,
                    a_u: lf.angular_cols(),
                    a_v: lf.angular_rows(),
                });
            }
            if coords[..i].contains(c) {
                return Err(LightFieldError::DuplicateCoord(*c));
            }
        }
        Ok(ViewSelection {
            strategy: SelectionStrategy::Explicit,
            coords,
        })
    }

    pub fn strategy(&self) -> SelectionStrategy {
        self.strategy
    }

    pub fn coords(&self) -> &[ViewCoord] {
        &self.coords
    }

    pub fn k(&self) -> usize {
        self.coords.len()
    }

    /// Extracts the selected sub-aperture images in selection order.
    pub fn extract(&self, lf: &LightField) -> Result<Vec<Image>, LightFieldError> {
        self.coords.iter().map(|&c| lf.extract_view(c)).collect()
    }
}

/// Runs one of the named strategies. `CornersPlusCenter` and `FixedFive`
/// ignore `k` (they force 3 and 5, shrinking only when the grid has fewer
/// distinct views); the other two return exactly `k` views.
pub fn select_views(
    lf: &LightField,
    strategy: SelectionStrategy,
    k: usize,
) -> Result<ViewSelection, LightFieldError> {
    let total = lf.num_views();
    let center = lf.center();
    let coords = match strategy {
        SelectionStrategy::Explicit => return Err(LightFieldError::ExplicitRequiresCoords),
        SelectionStrategy::CornersPlusCenter => dedup(vec![
            ViewCoord::new(0, 0),
            ViewCoord::new(lf.angular_cols() - 1, lf.angular_rows() - 1),
            center,
        ]),
        SelectionStrategy::FixedFive => {
            let hu = (lf.angular_cols() - 1) / 2;
            let hv = (lf.angular_rows() - 1) / 2;
            let mut edges = vec![
                ViewCoord::new(center.u, center.v - hv),
                ViewCoord::new(center.u - hu, center.v),
                ViewCoord::new(center.u + hu, center.v),
                ViewCoord::new(center.u, center.v + hv),
            ];
            edges.sort_by_key(|c| (c.v, c.u));
            let mut all = vec![center];
            all.extend(edges);
            dedup(all)
        }
        SelectionStrategy::MinAngularDifference => {
            check_k(k, total)?;
            let mut rest: Vec<ViewCoord> = grid_coords(lf)
                .filter(|c| *c != center)
                .collect();
            rest.sort_by_key(|c| (dist2(*c, center), c.v, c.u));
            let mut coords = vec![center];
            coords.extend(rest.into_iter().take(k - 1));
            coords
        }
        SelectionStrategy::SparseMaxDivergence => {
            check_k(k, total)?;
            let mut selected = vec![center];
            let mut candidates: Vec<ViewCoord> =
                grid_coords(lf).filter(|c| *c != center).collect();
            while selected.len() < k {
                // farthest-point: maximize the min distance to the selected set
                let best = candidates
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        let da = min_dist2(**a, &selected);
                        let db = min_dist2(**b, &selected);
                        // ties broken row-major: later comparisons prefer
                        // smaller (v, u), so order the key accordingly
                        da.cmp(&db)
                            .then_with(|| (b.v, b.u).cmp(&(a.v, a.u)))
                    })
                    .map(|(i, _)| i)
                    .expect("candidates cannot be empty while selected < k");
                selected.push(candidates.remove(best));
            }
            selected
        }
    };
    Ok(ViewSelection { strategy, coords })
}

fn check_k(k: usize, total: usize) -> Result<(), LightFieldError> {
    if k == 0 {
        return Err(LightFieldError::EmptySelection);
    }
    if k > total {
        return Err(LightFieldError::KTooLarge {
            requested: k,
            available: total,
        });
    }
    Ok(())
}

fn grid_coords(lf: &LightField) -> impl Iterator<Item = ViewCoord> + '_ {
    (0..lf.angular_rows())
        .flat_map(move |v| (0..lf.angular_cols()).map(move |u| ViewCoord::new(u, v)))
}

fn dist2(a: ViewCoord, b: ViewCoord) -> u64 {
    let du = a.u.abs_diff(b.u) as u64;
    let dv = a.v.abs_diff(b.v) as u64;
    du * du + dv * dv
}

fn min_dist2(c: ViewCoord, selected: &[ViewCoord]) -> u64 {
    selected.iter().map(|&s| dist2(c, s)).min().unwrap_or(0)
}

fn dedup(coords: Vec<ViewCoord>) -> Vec<ViewCoord> {
    let mut out: Vec<ViewCoord> = Vec::with_capacity(coords.len());
    for c in coords {
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(seed: u64, a_v: usize, a_u: usize, h: usize, w: usize, c: usize) -> LightField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LightField::from_fn(a_v, a_u, h, w, c, |_, _, _, _, _| rng.random_range(0.0..1.0))
            .unwrap()
    }

    #[test]
    fn constant_field_has_expected_sample_count() {
        let lf = LightField::from_fn(9, 9, 32, 32, 3, |_, _, _, _, _| 0.5).unwrap();
        assert_eq!(lf.data().len(), 248_832);
        assert!(lf.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constructor_rejects_zero_dims_and_bad_lengths() {
        assert!(matches!(
            LightField::new(0, 1, 2, 2, 1, vec![]),
            Err(LightFieldError::DimensionOverflow(_))
        ));
        assert!(matches!(
            LightField::new(1, 1, 2, 2, 1, vec![0.0; 3]),
            Err(LightFieldError::DataLengthMismatch { got: 3, want: 4 })
        ));
        assert!(matches!(
            LightField::new(1, 1, 1, 1, 1, vec![f32::NAN]),
            Err(LightFieldError::NonFiniteSample { index: 0 })
        ));
    }

    #[test]
    fn constructor_clamps_out_of_range_samples() {
        let lf = LightField::new(1, 1, 1, 2, 1, vec![-0.5, 1.5]).unwrap();
        assert_eq!(lf.data(), &[0.0, 1.0]);
    }

    #[test]
    fn extract_view_is_a_copy_with_correct_indexing() {
        let lf = random_field(3, 3, 3, 4, 5, 2);
        let coord = ViewCoord::new(2, 1);
        let img = lf.extract_view(coord).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..2 {
                    assert_eq!(img.at(y, x, c), lf.sample(1, 2, y, x, c));
                }
            }
        }
    }

    #[test]
    fn extract_view_out_of_range() {
        let lf = random_field(0, 2, 3, 2, 2, 1);
        // u bound is angular_cols = 3
        assert!(lf.extract_view(ViewCoord::new(3, 0)).is_err());
        assert!(matches!(
            lf.extract_view(ViewCoord::new(0, 2)),
            Err(LightFieldError::OutOfRange { .. })
        ));
    }

    #[test]
    fn lfr_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("field.lfr");
        let lf = random_field(42, 2, 3, 4, 5, 2);
        save_lfr(&lf, &path).unwrap();
        let back = load_lfr(&path).unwrap();
        assert_eq!(lf, back);
    }

    #[test]
    fn lfr_file_size_matches_header_plus_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.lfr");
        let lf = LightField::from_fn(1, 1, 2, 2, 1, |_, _, _, _, _| 0.25).unwrap();
        save_lfr(&lf, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 24 + 16);
    }

    #[test]
    fn lfr_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.lfr");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_lfr(&path),
            Err(LightFieldError::BadMagic(m)) if &m == b"XXXX"
        ));
    }

    #[test]
    fn lfr_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.lfr");
        let lf = LightField::from_fn(1, 1, 2, 2, 1, |_, _, _, _, _| 0.5).unwrap();
        save_lfr(&lf, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_lfr(&path),
            Err(LightFieldError::TruncatedFile { .. })
        ));
    }

    #[test]
    fn lfr_zero_dimension_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zero.lfr");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"LFR1");
        for d in [1u32, 0, 2, 2, 1] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_lfr(&path),
            Err(LightFieldError::DimensionOverflow(_))
        ));
    }

    #[test]
    fn save_to_unwritable_path_is_io_failure() {
        let lf = LightField::from_fn(1, 1, 1, 1, 1, |_, _, _, _, _| 0.0).unwrap();
        let err = save_lfr(&lf, "/nonexistent-dir/file.lfr").unwrap_err();
        assert!(matches!(err, LightFieldError::Io(_)));
    }

    #[test]
    fn corners_plus_center_on_9x9() {
        let lf = LightField::from_fn(9, 9, 2, 2, 1, |_, _, _, _, _| 0.5).unwrap();
        let sel = select_views(&lf, SelectionStrategy::CornersPlusCenter, 3).unwrap();
        assert_eq!(
            sel.coords(),
            &[
                ViewCoord::new(0, 0),
                ViewCoord::new(8, 8),
                ViewCoord::new(4, 4)
            ]
        );
    }

    #[test]
    fn fixed_five_on_9x9() {
        let lf = LightField::from_fn(9, 9, 2, 2, 1, |_, _, _, _, _| 0.5).unwrap();
        let sel = select_views(&lf, SelectionStrategy::FixedFive, 5).unwrap();
        assert_eq!(
            sel.coords(),
            &[
                ViewCoord::new(4, 4),
                ViewCoord::new(4, 0),
                ViewCoord::new(0, 4),
                ViewCoord::new(8, 4),
                ViewCoord::new(4, 8)
            ]
        );
    }

    #[test]
    fn min_angular_difference_picks_the_four_neighbors() {
        // Oracle: brute-force sort of all coords by (distance^2, v, u).
        let lf = LightField::from_fn(9, 9, 2, 2, 1, |_, _, _, _, _| 0.5).unwrap();
        let sel = select_views(&lf, SelectionStrategy::MinAngularDifference, 5).unwrap();
        assert_eq!(
            sel.coords(),
            &[
                ViewCoord::new(4, 4),
                ViewCoord::new(4, 3),
                ViewCoord::new(3, 4),
                ViewCoord::new(5, 4),
                ViewCoord::new(4, 5)
            ]
        );

        let mut brute: Vec<ViewCoord> = (0..9)
            .flat_map(|v| (0..9).map(move |u| ViewCoord::new(u, v)))
            .filter(|c| *c != ViewCoord::new(4, 4))
            .collect();
        brute.sort_by_key(|c| (dist2(*c, ViewCoord::new(4, 4)), c.v, c.u));
        for k in 1..=20 {
            let sel = select_views(&lf, SelectionStrategy::MinAngularDifference, k).unwrap();
            assert_eq!(sel.coords()[0], ViewCoord::new(4, 4));
            assert_eq!(&sel.coords()[1..], &brute[..k - 1], "k = {k}");
        }
    }

    #[test]
    fn one_by_one_field_any_strategy() {
        let lf = LightField::from_fn(1, 1, 2, 2, 1, |_, _, _, _, _| 0.5).unwrap();
        for strategy in [
            SelectionStrategy::CornersPlusCenter,
            SelectionStrategy::SparseMaxDivergence,
            SelectionStrategy::MinAngularDifference,
            SelectionStrategy::FixedFive,
        ] {
            let sel = select_views(&lf, strategy, 1).unwrap();
            assert_eq!(sel.coords(), &[ViewCoord::new(0, 0)], "{strategy}");
        }
    }

    #[test]
    fn sparse_covers_the_grid_at_full_k() {
        let lf = LightField::from_fn(3, 4, 2, 2, 1, |_, _, _, _, _| 0.5).unwrap();
        let sel = select_views(&lf, SelectionStrategy::SparseMaxDivergence, 12).unwrap();
        assert_eq!(sel.k(), 12);
        let mut seen: Vec<ViewCoord> = sel.coords().to_vec();
        seen.sort_by_key(|c| (c.v, c.u));
        let expected: Vec<ViewCoord> = (0..3)
            .flat_map(|v| (0..4).map(move |u| ViewCoord::new(u, v)))
            .collect();
        assert_eq!(seen, expected);
    }

    #[test]
    fn sparse_first_pick_is_a_farthest_corner() {
        let lf = LightField::from_fn(9, 9, 2, 2, 1, |_, _, _, _, _| 0.5).unwrap();
        let sel = select_views(&lf, SelectionStrategy::SparseMaxDivergence, 4).unwrap();
        assert_eq!(sel.coords()[0], ViewCoord::new(4, 4));
        // all four corners are equidistant; row-major tie-break picks (0,0)
        assert_eq!(sel.coords()[1], ViewCoord::new(0, 0));
    }

    #[test]
    fn selection_is_deterministic() {
        let lf = random_field(9, 5, 5, 2, 2, 1);
        for strategy in [
            SelectionStrategy::SparseMaxDivergence,
            SelectionStrategy::MinAngularDifference,
        ] {
            let a = select_views(&lf, strategy, 4).unwrap();
            let b = select_views(&lf, strategy, 4).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn k_too_large_is_rejected() {
        let lf = LightField::from_fn(2, 2, 2, 2, 1, |_, _, _, _, _| 0.5).unwrap();
        assert!(matches!(
            select_views(&lf, SelectionStrategy::MinAngularDifference, 5),
            Err(LightFieldError::KTooLarge {
                requested: 5,
                available: 4
            })
        ));
    }

    #[test]
    fn explicit_selection_validates() {
        let lf = LightField::from_fn(2, 2, 2, 2, 1, |_, _, _, _, _| 0.5).unwrap();
        let ok = ViewSelection::explicit(
            &lf,
            vec![ViewCoord::new(0, 0), ViewCoord::new(1, 1)],
        )
        .unwrap();
        assert_eq!(ok.k(), 2);
        assert!(matches!(
            ViewSelection::explicit(&lf, vec![ViewCoord::new(0, 0), ViewCoord::new(0, 0)]),
            Err(LightFieldError::DuplicateCoord(_))
        ));
        assert!(matches!(
            ViewSelection::explicit(&lf, vec![ViewCoord::new(2, 0)]),
            Err(LightFieldError::OutOfRange { .. })
        ));
    }
}
