//! Mask comparisons used by diagnostics and the toy harness.

use crate::error::{Error, Result};
use crate::glyph::contour_mask;

fn check(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    Ok(())
}

/// Intersection over union; two empty masks count as identical.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    check(a, b)?;
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of pixels where the masks disagree.
pub fn mismatch(a: &[bool], b: &[bool]) -> Result<f64> {
    check(a, b)?;
    let diff = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.len().max(1) as f64)
}

/// Number of contour pixels (4-neighbour class changes) in a mask.
pub fn boundary_length(mask: &[bool], height: usize, width: usize) -> Result<usize> {
    if mask.len() != height * width {
        return Err(Error::shape("mask size does not match dimensions"));
    }
    Ok(contour_mask(mask, height, width).into_iter().filter(|&c| c).count())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_values() {
        let a = [true, true, false, false];
        let b = [true, false, true, false];
        assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(mismatch(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn square_boundary() {
        // 4×4 square inside 6×6: 12 inner-ring pixels plus 4·4 edge neighbours.
        let m: Vec<bool> = (0..36).map(|i| (1..5).contains(&(i / 6)) && (1..5).contains(&(i % 6))).collect();
        assert_eq!(boundary_length(&m, 6, 6).unwrap(), 28);
    }
}
