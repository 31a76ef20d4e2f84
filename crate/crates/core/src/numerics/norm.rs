use super::NumericsError;

/// Spectral norm of a product of diagonal matrices given by their diagonals.
///
/// For diagonal factors the product is diagonal, so the spectral norm is
/// the largest absolute entry of the elementwise product.
pub fn diag_product_specnorm<V: AsRef<[f64]>>(diags: &[V]) -> Result<f64, NumericsError> {
    let first = diags.first().ok_or(NumericsError::EmptyProduct)?.as_ref();
    let dim = first.len();
    if dim == 0 {
        return Err(NumericsError::EmptyProduct);
    }
    let mut prod = first.to_vec();
    for (i, diag) in diags.iter().enumerate().skip(1) {
        let diag = diag.as_ref();
        if diag.len() != dim {
            return Err(NumericsError::LengthMismatch {
                index: i,
                expected: dim,
                found: diag.len(),
            });
        }
        for (p, v) in prod.iter_mut().zip(diag) {
            *p *= v;
        }
    }
    Ok(prod.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
}

/// Euclidean norm accumulated over several slices.
pub fn l2_norm<'a, I>(parts: I) -> f64
where
    I: IntoIterator<Item = &'a [f64]>,
{
    parts
        .into_iter()
        .flat_map(|p| p.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

pub fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
