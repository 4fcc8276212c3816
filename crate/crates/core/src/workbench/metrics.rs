use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mean over `projections` random unit directions of the 1-D 2-Wasserstein
/// distance between the projected point sets. `a`, `b`: `[n, dim]`.
pub fn sliced_w2(a: &Tensor, b: &Tensor, projections: usize, seed: u64) -> Result<f64> {
    if a.shape().len() != 2 || a.shape() != b.shape() {
        return Err(Error::shape("sliced_w2", a.shape(), b.shape()));
    }
    let (n, dim) = (a.shape()[0], a.shape()[1]);
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "sliced_w2 needs at least 2 samples, got {n}"
        )));
    }
    if projections == 0 {
        return Err(Error::Empty("projections"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let (mut pa, mut pb) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..projections {
        let dir = loop {
            let v = Tensor::randn(&[dim], &mut rng);
            let norm = v.l2_norm();
            if norm > 1e-12 {
                break v.data().iter().map(|x| x / norm).collect::<Vec<_>>();
            }
        };
        let project = |pts: &Tensor, out: &mut [f64]| {
            for (o, p) in out.iter_mut().zip(pts.data().chunks_exact(dim)) {
                *o = p.iter().zip(&dir).map(|(x, d)| x * d).sum();
            }
            out.sort_by(f64::total_cmp);
        };
        project(a, &mut pa);
        project(b, &mut pb);
        let ms = pa
            .iter()
            .zip(&pb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n as f64;
        total += ms.sqrt();
    }
    Ok(total / projections as f64)
}

/// Mean squared 5-point Laplacian over interior grid points, divided by the
/// population variance of the field. A constant field scores 0.
pub fn detail_energy(field: &[f64], height: usize, width: usize) -> Result<f64> {
    if height < 3 || width < 3 {
        return Err(Error::InvalidParameter(format!(
            "detail energy needs a grid of at least 3x3, got {height}x{width}"
        )));
    }
    if field.len() != height * width {
        return Err(Error::shape(
            "detail_energy",
            &[field.len()],
            &[height, width],
        ));
    }
    let n = field.len() as f64;
    let mean = field.iter().sum::<f64>() / n;
    let var = field.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Ok(0.0);
    }
    let at = |y: usize, x: usize| field[y * width + x];
    let mut acc = 0.0;
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            let lap = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
            acc += lap * lap;
        }
    }
    Ok(acc / ((height - 2) * (width - 2)) as f64 / var)
}

/// [`detail_energy`] averaged over samples and channels of `[n, h * w, channels]`.
pub fn detail_energy_samples(samples: &Tensor, height: usize, width: usize) -> Result<f64> {
    let s = samples.shape();
    if s.len() != 3 || s[1] != height * width {
        return Err(Error::shape("detail_energy", s, &[0, height * width, 0]));
    }
    let (n, tok, ch) = (s[0], s[1], s[2]);
    if n == 0 || ch == 0 {
        return Err(Error::Empty("samples"));
    }
    let mut total = 0.0;
    let mut field = vec![0.0; tok];
    for sample in samples.data().chunks_exact(tok * ch) {
        for c in 0..ch {
            for (f, p) in field.iter_mut().zip(sample.chunks_exact(ch)) {
                *f = p[c];
            }
            total += detail_energy(&field, height, width)?;
        }
    }
    Ok(total / (n * ch) as f64)
}
