//! Region similarity (mask IoU) and contour accuracy (boundary F-measure).

use crate::dataset::BinaryMask;

use super::EvalError;

/// DAVIS-style default boundary tolerance: 0.8% of the image diagonal,
/// rounded up.
pub fn default_boundary_tolerance(h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    (0.008 * diag).ceil() as usize
}

fn check_shapes(pred: &BinaryMask, gt: &BinaryMask) -> Result<(), EvalError> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(EvalError::ShapeMismatch {
            pred: (pred.h, pred.w),
            gt: (gt.h, gt.w),
        });
    }
    Ok(())
}

/// Intersection-over-union of two binary masks; 1 when both are empty.
pub fn region_similarity(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, EvalError> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.pixels.iter().zip(&gt.pixels) {
        inter += usize::from(p == 1 && g == 1);
        union += usize::from(p == 1 || g == 1);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Boundary pixels: mask pixels with a background 4-neighbor or on the image
/// border.
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.h, mask.w);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != 1 {
                continue;
            }
            let on_border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let has_bg_neighbor = (y > 0 && mask.get(y - 1, x) == 0)
                || (y + 1 < h && mask.get(y + 1, x) == 0)
                || (x > 0 && mask.get(y, x - 1) == 0)
                || (x + 1 < w && mask.get(y, x + 1) == 0);
            if on_border || has_bg_neighbor {
                out.push((y, x));
            }
        }
    }
    out
}

fn within_tolerance(p: (usize, usize), others: &[(usize, usize)], tol: usize) -> bool {
    others.iter().any(|&(y, x)| {
        let dy = p.0.abs_diff(y);
        let dx = p.1.abs_diff(x);
        dy.max(dx) <= tol
    })
}

/// Boundary F-measure with Chebyshev-distance matching at tolerance `tol`.
/// Both boundaries empty scores 1; exactly one empty scores 0.
pub fn contour_accuracy(pred: &BinaryMask, gt: &BinaryMask, tol: usize) -> Result<f64, EvalError> {
    check_shapes(pred, gt)?;
    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let matched_pred = bp.iter().filter(|&&p| within_tolerance(p, &bg, tol)).count();
    let matched_gt = bg.iter().filter(|&&g| within_tolerance(g, &bp, tol)).count();
    let precision = matched_pred as f64 / bp.len() as f64;
    let recall = matched_gt as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn jf_mean(j: f64, f: f64) -> f64 {
    0.5 * (j + f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let pixels = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| u8::from(c == '#')))
            .collect();
        BinaryMask::new(h, w, pixels).unwrap()
    }

    #[test]
    fn identical_nonempty_masks_have_full_overlap() {
        let m = mask_from(&["..#.", ".##.", "...."]);
        assert_eq!(region_similarity(&m, &m).unwrap(), 1.0);
        assert_eq!(contour_accuracy(&m, &m, 0).unwrap(), 1.0);
    }

    #[test]
    fn both_empty_masks_score_one() {
        let a = BinaryMask::zeros(3, 3);
        assert_eq!(region_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(contour_accuracy(&a, &a, 1).unwrap(), 1.0);
    }

    #[test]
    fn exactly_one_empty_boundary_scores_zero() {
        let a = BinaryMask::zeros(3, 3);
        let b = mask_from(&["...", ".#.", "..."]);
        assert_eq!(region_similarity(&a, &b).unwrap(), 0.0);
        assert_eq!(contour_accuracy(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn two_by_two_fixture_is_one_third() {
        // pred occupies (0,0),(0,1); gt occupies (0,1),(1,1)
        let pred = mask_from(&["##", ".."]);
        let gt = mask_from(&[".#", ".#"]);
        let j = region_similarity(&pred, &gt).unwrap();
        assert!((j - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn region_similarity_is_symmetric() {
        let a = mask_from(&["#..", "##.", "..."]);
        let b = mask_from(&["##.", ".#.", "..#"]);
        assert_eq!(
            region_similarity(&a, &b).unwrap(),
            region_similarity(&b, &a).unwrap()
        );
    }

    #[test]
    fn disjoint_distant_blobs_score_zero_at_tol_zero() {
        let a = mask_from(&["#.......", "........", "........", "........"]);
        let b = mask_from(&["........", "........", "........", ".......#"]);
        assert_eq!(contour_accuracy(&a, &b, 0).unwrap(), 0.0);
    }

    #[test]
    fn shifted_square_matches_fully_at_tol_one() {
        let mut base = vec![0u8; 8 * 8];
        let mut shifted = vec![0u8; 8 * 8];
        for y in 2..6 {
            for x in 2..6 {
                base[y * 8 + x] = 1;
                shifted[y * 8 + x + 1] = 1;
            }
        }
        let a = BinaryMask::new(8, 8, base).unwrap();
        let b = BinaryMask::new(8, 8, shifted).unwrap();
        assert_eq!(contour_accuracy(&a, &b, 1).unwrap(), 1.0);
        assert!(contour_accuracy(&a, &b, 0).unwrap() < 1.0);
    }

    #[test]
    fn max_tolerance_saturates_to_one() {
        let a = mask_from(&["#...", "....", "....", "...."]);
        let b = mask_from(&["....", "....", "....", "...#"]);
        assert_eq!(contour_accuracy(&a, &b, 4).unwrap(), 1.0);
    }

    #[test]
    fn contour_accuracy_is_symmetric() {
        let a = mask_from(&["##..", "##..", "....", "...."]);
        let b = mask_from(&["....", ".##.", ".##.", "...."]);
        for tol in 0..3 {
            assert_eq!(
                contour_accuracy(&a, &b, tol).unwrap(),
                contour_accuracy(&b, &a, tol).unwrap()
            );
        }
    }

    #[test]
    fn jf_mean_fixtures() {
        assert_eq!(jf_mean(1.0, 1.0), 1.0);
        assert_eq!(jf_mean(0.0, 1.0), 0.5);
    }

    #[test]
    fn default_tolerance_matches_diagonal_rule() {
        assert_eq!(default_boundary_tolerance(32, 32), 1);
        assert_eq!(default_boundary_tolerance(480, 854), 8);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = BinaryMask::zeros(2, 2);
        let b = BinaryMask::zeros(3, 3);
        assert!(matches!(
            region_similarity(&a, &b),
            Err(EvalError::ShapeMismatch { .. })
        ));
    }
}
