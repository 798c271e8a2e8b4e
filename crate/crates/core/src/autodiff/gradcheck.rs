//! Central finite-difference certification of stored gradients.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{ParamId, ParamStore};
use crate::error::Result;

/// Below this magnitude both derivatives count as zero for the relative error.
/// Central differences of an O(10) loss at h = 1e-5 carry about 2e-10 of
/// round-off, so smaller gradients cannot be resolved to 1e-4 anyway.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Which entries of each tensor get an individual finite-difference probe.
#[derive(Clone, Copy, Debug)]
pub enum Entries {
    All,
    /// At most this many entries chosen uniformly without replacement.
    Sample(usize),
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    /// Flat entry index, or `None` for the whole-tensor directional probe.
    pub entry: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: usize,
    /// Probes judged by their one-sided differences because the two sides
    /// disagreed (the step crossed a ReLU kink).
    pub kinks: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    fn record(&mut self, m: Mismatch) {
        self.probes += 1;
        if self.worst.is_none() || m.rel_error > self.max_rel_error {
            self.max_rel_error = m.rel_error;
            self.worst = Some(m);
        }
    }
}

/// Central differences above this error get the one-sided second look.
const SUSPECT: f64 = 1e-5;
/// One-sided derivatives further apart than this mark a kink inside the step.
const KINK_SPLIT: f64 = 1e-5;

struct Probe {
    numeric: f64,
    rel_error: f64,
    kink: bool,
}

/// Finite-difference derivative of `f(s)` at `s = 0`.
///
/// A central difference that disagrees with `analytic` is re-examined with
/// second-order one-sided differences `(−3f(0) + 4f(±h/2) − f(±h)) / ±h`.
/// If those two disagree with each other, `f` has a kink within `h` and the
/// analytic value only has to match the side the kink does not cut.
fn probe(analytic: f64, h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<Probe> {
    let (up, down) = (f(h)?, f(-h)?);
    let numeric = (up - down) / (2.0 * h);
    let rel_error = relative_error(analytic, numeric);
    if rel_error <= SUSPECT {
        return Ok(Probe { numeric, rel_error, kink: false });
    }
    let (mid, half_up, half_down) = (f(0.0)?, f(h / 2.0)?, f(-h / 2.0)?);
    let right = (-3.0 * mid + 4.0 * half_up - up) / h;
    let left = (3.0 * mid - 4.0 * half_down + down) / h;
    if relative_error(right, left) <= KINK_SPLIT {
        return Ok(Probe { numeric, rel_error, kink: false });
    }
    let (side, err) = [right, left]
        .into_iter()
        .map(|d| (d, relative_error(analytic, d)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("two sides");
    Ok(Probe { numeric: side, rel_error: err, kink: true })
}

/// Compare the gradients already stored in `store` for `ids` against central
/// differences of `loss` with step `h`.
///
/// Each tensor gets per-entry probes (per `entries`) plus one directional
/// probe along a random Gaussian direction covering all of its entries.
pub fn check_stored_gradients<R: Rng>(
    store: &mut ParamStore,
    ids: &[ParamId],
    entries: Entries,
    h: f64,
    rng: &mut R,
    mut loss: impl FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for &id in ids {
        let numel = store.value(id).numel();
        let name = store.get(id).name.clone();
        let picks: Vec<usize> = match entries {
            Entries::All => (0..numel).collect(),
            Entries::Sample(k) if k >= numel => (0..numel).collect(),
            Entries::Sample(k) => {
                let mut v = sample(rng, numel, k).into_vec();
                v.sort_unstable();
                v
            }
        };
        for i in picks {
            let orig = store.value(id).data()[i];
            let analytic = store.grad(id).data()[i];
            let p = probe(analytic, h, |s| {
                store.get_mut(id).value.data_mut()[i] = orig + s;
                let l = loss(store);
                store.get_mut(id).value.data_mut()[i] = orig;
                l
            })?;
            report.kinks += usize::from(p.kink);
            report.record(Mismatch {
                param: name.clone(),
                entry: Some(i),
                analytic,
                numeric: p.numeric,
                rel_error: p.rel_error,
            });
        }

        let dir: Vec<f64> = (0..numel).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        let dir: Vec<f64> = dir.iter().map(|d| d / norm).collect();
        let orig = store.value(id).clone();
        let analytic: f64 = store.grad(id).data().iter().zip(&dir).map(|(g, d)| g * d).sum();
        let p = probe(analytic, h, |s| {
            for ((v, o), d) in store.get_mut(id).value.data_mut().iter_mut().zip(orig.data()).zip(&dir) {
                *v = o + s * d;
            }
            let l = loss(store);
            store.get_mut(id).value.data_mut().copy_from_slice(orig.data());
            l
        })?;
        report.kinks += usize::from(p.kink);
        report.record(Mismatch {
            param: name,
            entry: None,
            analytic,
            numeric: p.numeric,
            rel_error: p.rel_error,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relu_at(x: f64) -> impl FnMut(f64) -> Result<f64> {
        move |s| Ok((x + s).max(0.0))
    }

    #[test]
    fn kink_inside_the_step_is_judged_one_sided() {
        let p = probe(1.0, 1e-5, relu_at(3e-6)).unwrap();
        assert!(p.kink && p.rel_error < 1e-9);
        let p = probe(0.0, 1e-5, relu_at(-3e-6)).unwrap();
        assert!(p.kink && p.rel_error < 1e-9);
        // A wrong slope is wrong on both sides.
        let p = probe(0.5, 1e-5, relu_at(3e-6)).unwrap();
        assert!(p.rel_error > 0.4);
    }

    #[test]
    fn smooth_mismatch_is_not_excused() {
        let p = probe(2.0, 1e-5, |s| Ok((1.0 + s).powi(2) * 1.01)).unwrap();
        assert!(!p.kink);
        assert!((p.rel_error - 0.02 / 2.02).abs() < 1e-6);
        let p = probe(2.02, 1e-5, |s| Ok((1.0 + s).powi(2) * 1.01)).unwrap();
        assert!(p.rel_error < 1e-8);
    }
}
