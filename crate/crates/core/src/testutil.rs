// Finite-difference oracles for unit tests.

use rand::Rng;

use crate::nn::{Grads, ParamStore};

pub(crate) const FD_STEP: f64 = 1e-5;

/// Overwrites every parameter with `U(-scale, scale)` draws.
pub(crate) fn randomize<R: Rng>(store: &mut ParamStore, scale: f64, rng: &mut R) {
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

/// Central differences of `loss` with respect to every parameter scalar.
pub(crate) fn numeric_param_grads(
    store: &ParamStore,
    loss: &dyn Fn(&ParamStore) -> f64,
) -> Vec<Vec<f64>> {
    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for pi in 0..store.len() {
        let n = store.params()[pi].value.numel();
        let mut g = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.params()[pi].value.data()[i];
            work.params_mut()[pi].value.data_mut()[i] = orig + FD_STEP;
            let plus = loss(&work);
            work.params_mut()[pi].value.data_mut()[i] = orig - FD_STEP;
            let minus = loss(&work);
            work.params_mut()[pi].value.data_mut()[i] = orig;
            g.push((plus - minus) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    out
}

/// `|a - n| / max(|a|, |n|, 1e-6)`, maximized over all entries.
pub(crate) fn max_rel_error(analytic: &Grads, numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.iter().zip(n))
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Chronologically split `C x T` bundle of phase-shifted sines (period 24)
/// plus uniform noise of half-width `noise`.
pub(crate) fn sine_bundle(c: usize, t: usize, noise: f64, seed: u64) -> crate::data::DatasetBundle {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(c * t);
    for ch in 0..c {
        for i in 0..t {
            let phase = ch as f64 * 0.9;
            let v = (2.0 * std::f64::consts::PI * i as f64 / 24.0 + phase).sin() + 0.5 * ch as f64;
            data.push(v + if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 });
        }
    }
    let series = crate::data::MultivariateSeries::new(
        crate::tensor::Tensor::new(vec![c, t], data).unwrap(),
        (1..=c).map(|i| format!("ch{i}")).collect(),
    )
    .unwrap();
    crate::data::chronological_split(series, crate::data::RATIO_6_2_2).unwrap()
}
