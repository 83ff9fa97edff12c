//! Central finite-difference oracle for parameter gradients.
//!
//! Independent of the reverse pass: it only ever evaluates the forward
//! function. Relative error per coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Cap on coordinates probed per parameter tensor; `None` checks all.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords_per_param: None, seed: 0 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (parameter name, flat index, analytic, numeric) at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares reverse-mode gradients of `loss` against central differences.
pub fn check_gradients<E, F>(params: &mut ParamStore<f64>, opts: &GradCheckOptions, loss: F) -> Result<GradCheckReport, E>
where
    F: for<'a> Fn(&mut Tape<'a, f64>) -> Result<Var, E>,
    E: From<super::AutodiffError>,
{
    let analytic = {
        let mut tape = Tape::new(params);
        let l = loss(&mut tape)?;
        tape.backward(l)?
    };
    let eval = |p: &ParamStore<f64>| -> Result<f64, E> {
        let mut tape = Tape::inference(p);
        let l = loss(&mut tape)?;
        Ok(tape.item(l))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < n => {
                let mut c = sample(&mut rng, n, cap).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + opts.eps;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig - opts.eps;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), i, a, numeric));
            }
        }
    }
    Ok(report)
}
