use crate::error::{Error, Result};
use crate::grid::{check_same, par_sum, Volume};

pub const DICE_SMOOTH: f64 = 1e-5;

/// Soft Dice loss over per-label probability channels:
/// `1 - mean_l (2 Σ a·b + s) / (Σ a + Σ b + s)`.
///
/// Returns the loss and its gradient with respect to each `warped` channel.
pub fn soft_dice_loss(warped: &[Volume], fixed: &[Volume]) -> Result<(f64, Vec<Volume>)> {
    if warped.is_empty() {
        return Err(Error::InvalidArgument("soft Dice needs at least one label".into()));
    }
    if warped.len() != fixed.len() {
        return Err(Error::ShapeMismatch(format!(
            "soft Dice label sets differ: {} vs {}",
            warped.len(),
            fixed.len()
        )));
    }
    let labels = warped.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(warped.len());
    for (a, b) in warped.iter().zip(fixed) {
        check_same(a.shape(), b.shape(), "soft_dice_loss")?;
        let (ad, bd) = (a.data(), b.data());
        let inter = par_sum(ad.len(), |i| ad[i] * bd[i]);
        let sa = par_sum(ad.len(), |i| ad[i]);
        let sb = par_sum(bd.len(), |i| bd[i]);
        let num = 2.0 * inter + DICE_SMOOTH;
        let den = sa + sb + DICE_SMOOTH;
        total += num / den;
        let g = bd
            .iter()
            .map(|&bq| -(2.0 * bq * den - num) / (den * den) / labels)
            .collect();
        grads.push(Volume::from_raw(*a.shape(), g));
    }
    Ok((1.0 - total / labels, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;

    fn mask(shape: GridShape, f: impl Fn(usize, usize, usize) -> bool) -> Volume {
        Volume::from_fn(shape, |x, y, z| if f(x, y, z) { 1.0 } else { 0.0 })
    }

    #[test]
    fn examples() {
        let s = GridShape::cube(6).unwrap();
        let a = mask(s, |x, _, _| x < 3);
        let b = mask(s, |x, _, _| x >= 3);
        let (same, _) = soft_dice_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap();
        assert!(same.abs() < 1e-4);
        let (disj, _) = soft_dice_loss(std::slice::from_ref(&a), &[b]).unwrap();
        assert!((disj - 1.0).abs() < 1e-6);
        // Equal-size masks sharing half their voxels.
        let c = mask(s, |x, y, _| x < 3 && y < 3 || x >= 3 && y >= 3);
        let d = mask(s, |_, y, _| y < 3);
        let (half, _) = soft_dice_loss(&[c], &[d]).unwrap();
        assert!((half - 0.5).abs() < 1e-6);
        assert!(soft_dice_loss(&[], &[]).is_err());
    }
}
