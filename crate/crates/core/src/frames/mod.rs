//! Raw capacitive frames, normalization and the screen coordinate system.

mod capv;

pub use capv::{read_capv, write_capv, CapSequence, CAPV_MAGIC, CAPV_VERSION};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SENSOR_COLS: usize = 71;
pub const SENSOR_ROWS: usize = 41;
pub const GRID_COLS: usize = 128;
pub const GRID_ROWS: usize = 96;
pub const PAD_LEFT: usize = 28;
pub const PAD_TOP: usize = 27;
/// Normalized values at or below this are treated as noise.
pub const CLAMP_THRESHOLD: f64 = 0.6;

/// Physical layout of the sensor and its padded network grid.
///
/// Millimetres are anchored at the top-left sensor corner, x to the right,
/// y down the screen, z toward the user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScreenGeometry {
    pub width_mm: f64,
    pub height_mm: f64,
    pub cols: usize,
    pub rows: usize,
    pub padded_cols: usize,
    pub padded_rows: usize,
    pub pad_left: usize,
    pub pad_top: usize,
}

impl Default for ScreenGeometry {
    fn default() -> Self {
        ScreenGeometry {
            width_mm: 345.0,
            height_mm: 195.0,
            cols: SENSOR_COLS,
            rows: SENSOR_ROWS,
            padded_cols: GRID_COLS,
            padded_rows: GRID_ROWS,
            pad_left: PAD_LEFT,
            pad_top: PAD_TOP,
        }
    }
}

impl ScreenGeometry {
    pub fn pitch_x(&self) -> f64 {
        self.width_mm / self.cols as f64
    }

    pub fn pitch_y(&self) -> f64 {
        self.height_mm / self.rows as f64
    }

    /// Padded-grid pixel `(col, row)` to screen millimetres. Integer
    /// coordinates address pixel centres.
    pub fn pixel_to_mm(&self, col: f64, row: f64) -> (f64, f64) {
        (
            (col - self.pad_left as f64 + 0.5) * self.pitch_x(),
            (row - self.pad_top as f64 + 0.5) * self.pitch_y(),
        )
    }

    pub fn mm_to_pixel(&self, x_mm: f64, y_mm: f64) -> (f64, f64) {
        (
            x_mm / self.pitch_x() + self.pad_left as f64 - 0.5,
            y_mm / self.pitch_y() + self.pad_top as f64 - 0.5,
        )
    }

    /// Column a horizontally flipped grid puts column `col` at.
    pub fn mirror_col(&self, col: usize) -> usize {
        self.padded_cols - 1 - col
    }

    /// x coordinate after flipping the padded grid left-to-right.
    ///
    /// The flip axis is the centre of the padded grid, which sits half a
    /// pixel right of the screen midline because the padding is uneven.
    pub fn mirror_x(&self, x_mm: f64) -> f64 {
        2.0 * self.flip_axis_x() - x_mm
    }

    /// x of the vertical line the padded-grid flip reflects about.
    pub fn flip_axis_x(&self) -> f64 {
        (self.padded_cols as f64 / 2.0 - self.pad_left as f64) * self.pitch_x()
    }

    /// Whether a point lies over the physical sensor area.
    pub fn on_screen(&self, x_mm: f64, y_mm: f64) -> bool {
        (0.0..=self.width_mm).contains(&x_mm) && (0.0..=self.height_mm).contains(&y_mm)
    }

    /// Centre of sensor cell `(col, row)` in millimetres (sensor indices).
    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.pitch_x(),
            (row as f64 + 0.5) * self.pitch_y(),
        )
    }
}

/// One raw sensor frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapFrame {
    pub cols: usize,
    pub rows: usize,
    pub grid: Vec<u8>,
    pub timestamp_ms: u64,
}

impl CapFrame {
    pub fn new(cols: usize, rows: usize, grid: Vec<u8>, timestamp_ms: u64) -> Result<Self> {
        if grid.len() != cols * rows {
            return Err(Error::InvalidInput(format!(
                "{cols}x{rows} frame needs {} cells, got {}",
                cols * rows,
                grid.len()
            )));
        }
        Ok(CapFrame {
            cols,
            rows,
            grid,
            timestamp_ms,
        })
    }

    /// A sensor-sized frame filled with `value`.
    pub fn uniform(value: u8, timestamp_ms: u64) -> Self {
        CapFrame {
            cols: SENSOR_COLS,
            rows: SENSOR_ROWS,
            grid: vec![value; SENSOR_COLS * SENSOR_ROWS],
            timestamp_ms,
        }
    }

    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.grid[row * self.cols + col]
    }
}

/// Normalized, clamped and padded frame: the network's two input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct NormFrame {
    /// `GRID_ROWS x GRID_COLS`, row-major.
    pub values: Vec<f64>,
    pub validity: Vec<f64>,
}

impl NormFrame {
    pub fn value(&self, col: usize, row: usize) -> f64 {
        self.values[row * GRID_COLS + col]
    }

    /// Left-right flip of both channels.
    pub fn mirrored(&self) -> NormFrame {
        let flip = |src: &[f64]| {
            let mut out = vec![0.0; src.len()];
            for (dst, line) in out.chunks_mut(GRID_COLS).zip(src.chunks(GRID_COLS)) {
                for (c, &v) in line.iter().enumerate() {
                    dst[GRID_COLS - 1 - c] = v;
                }
            }
            out
        };
        NormFrame {
            values: flip(&self.values),
            validity: flip(&self.validity),
        }
    }

    /// Writes the frame into batch slot `slot` of an `[n, 2, 96, 128]` tensor.
    pub fn write_into<T: Real>(&self, batch: &mut Tensor<T>, slot: usize) {
        let plane = GRID_ROWS * GRID_COLS;
        let dst = &mut batch.data_mut()[slot * 2 * plane..(slot + 1) * 2 * plane];
        for (d, &v) in dst[..plane].iter_mut().zip(&self.values) {
            *d = T::of(v);
        }
        for (d, &v) in dst[plane..].iter_mut().zip(&self.validity) {
            *d = T::of(v);
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(&[1, 2, GRID_ROWS, GRID_COLS]);
        self.write_into(&mut t, 0);
        t
    }

    /// Any nonzero value in the 3x3 neighbourhood of padded pixel `(col, row)`.
    pub fn active_near(&self, col: usize, row: usize) -> bool {
        let rows = row.saturating_sub(1)..=(row + 1).min(GRID_ROWS - 1);
        rows.into_iter().any(|r| {
            let cols = col.saturating_sub(1)..=(col + 1).min(GRID_COLS - 1);
            cols.into_iter().any(|c| self.value(c, r) != 0.0)
        })
    }
}

/// Normalizes to [0, 1], zeroes values at or below the noise threshold and
/// centres the sensor image in the padded grid.
pub fn preprocess(frame: &CapFrame) -> Result<NormFrame> {
    if frame.cols != SENSOR_COLS || frame.rows != SENSOR_ROWS || frame.grid.len() != SENSOR_COLS * SENSOR_ROWS {
        return Err(Error::InvalidInput(format!(
            "capacitive frame is {}x{} ({} cells), expected {SENSOR_COLS}x{SENSOR_ROWS}",
            frame.cols,
            frame.rows,
            frame.grid.len()
        )));
    }
    let mut values = vec![0.0; GRID_ROWS * GRID_COLS];
    let mut validity = vec![0.0; GRID_ROWS * GRID_COLS];
    for r in 0..SENSOR_ROWS {
        for c in 0..SENSOR_COLS {
            let v = frame.grid[r * SENSOR_COLS + c] as f64 / 255.0;
            let i = (r + PAD_TOP) * GRID_COLS + c + PAD_LEFT;
            values[i] = if v <= CLAMP_THRESHOLD { 0.0 } else { v };
            validity[i] = 1.0;
        }
    }
    Ok(NormFrame { values, validity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_cell(raw: u8) -> f64 {
        let mut f = CapFrame::uniform(0, 0);
        f.grid[0] = raw;
        preprocess(&f).unwrap().value(PAD_LEFT, PAD_TOP)
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(one_cell(255), 1.0);
        assert_eq!(one_cell(128), 0.0);
        assert!((one_cell(178) - 0.698_039_215_686_274_5).abs() < 1e-12);
        // 153/255 is exactly 0.6 and still clamps
        assert_eq!(one_cell(153), 0.0);
        assert!(one_cell(154) > 0.6);
    }

    #[test]
    fn padding_layout() {
        let g = ScreenGeometry::default();
        assert_eq!(g.pad_left + g.cols + 29, g.padded_cols);
        assert_eq!(g.pad_top + g.rows + 28, g.padded_rows);
        let n = preprocess(&CapFrame::uniform(200, 0)).unwrap();
        assert_eq!(n.validity.iter().sum::<f64>(), 2911.0);
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                let inside = (PAD_LEFT..PAD_LEFT + SENSOR_COLS).contains(&c)
                    && (PAD_TOP..PAD_TOP + SENSOR_ROWS).contains(&r);
                assert_eq!(n.validity[r * GRID_COLS + c], if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn rejects_wrong_dimensions() {
        let f = CapFrame::new(70, 41, vec![0; 70 * 41], 0).unwrap();
        assert!(preprocess(&f).is_err());
        assert!(CapFrame::new(71, 41, vec![0; 10], 0).is_err());
    }

    #[test]
    fn mm_mapping_examples() {
        let g = ScreenGeometry::default();
        assert!(g.pixel_to_mm(27.5, 0.0).0.abs() < 1e-12);
        assert!((g.pixel_to_mm(28.0, 0.0).0 - 0.5 * 345.0 / 71.0).abs() < 1e-12);
        assert!((g.pixel_to_mm(28.0, 0.0).0 - 2.4296).abs() < 1e-4);
        let (_, y) = g.pixel_to_mm(0.0, 26.5);
        assert!(y.abs() < 1e-12);
    }

    #[test]
    fn mirror_x_is_involution_and_matches_column_flip() {
        let g = ScreenGeometry::default();
        for c in 0..GRID_COLS {
            let x = g.pixel_to_mm(c as f64, 0.0).0;
            let xm = g.pixel_to_mm(g.mirror_col(c) as f64, 0.0).0;
            assert!((g.mirror_x(x) - xm).abs() < 1e-9);
            assert!((g.mirror_x(g.mirror_x(x)) - x).abs() < 1e-9);
        }
    }

    #[test]
    fn norm_frame_mirror_is_involution() {
        let mut f = CapFrame::uniform(0, 0);
        f.grid[5] = 250;
        f.grid[300] = 180;
        let n = preprocess(&f).unwrap();
        assert_ne!(n.mirrored(), n);
        assert_eq!(n.mirrored().mirrored(), n);
    }

    #[test]
    fn active_near_checks_three_by_three() {
        let mut f = CapFrame::uniform(0, 0);
        f.grid[10 * SENSOR_COLS + 10] = 255;
        let n = preprocess(&f).unwrap();
        let (c, r) = (10 + PAD_LEFT, 10 + PAD_TOP);
        assert!(n.active_near(c + 1, r - 1));
        assert!(!n.active_near(c + 2, r));
        assert!(!n.active_near(0, 0));
    }

    proptest! {
        #[test]
        fn mm_pixel_round_trip(col in -10.0f64..140.0, row in -10.0f64..110.0) {
            let g = ScreenGeometry::default();
            let (x, y) = g.pixel_to_mm(col, row);
            let (c2, r2) = g.mm_to_pixel(x, y);
            let (x2, y2) = g.pixel_to_mm(c2, r2);
            prop_assert!((c2 - col).abs() < 1e-9 && (r2 - row).abs() < 1e-9);
            prop_assert!((x2 - x).abs() < 1e-9 && (y2 - y).abs() < 1e-9);
        }

        #[test]
        fn no_values_in_clamped_band(grid in proptest::collection::vec(any::<u8>(), SENSOR_COLS * SENSOR_ROWS)) {
            let n = preprocess(&CapFrame::new(SENSOR_COLS, SENSOR_ROWS, grid.clone(), 0).unwrap()).unwrap();
            prop_assert!(n.values.iter().all(|&v| v == 0.0 || (v > 0.6 && v <= 1.0)));
            // re-quantizing the valid region reproduces the same frame
            let mut back = vec![0u8; SENSOR_COLS * SENSOR_ROWS];
            for r in 0..SENSOR_ROWS {
                for c in 0..SENSOR_COLS {
                    back[r * SENSOR_COLS + c] = (n.value(c + PAD_LEFT, r + PAD_TOP) * 255.0).round() as u8;
                }
            }
            let again = preprocess(&CapFrame::new(SENSOR_COLS, SENSOR_ROWS, back, 0).unwrap()).unwrap();
            prop_assert_eq!(again, n);
        }
    }
}
