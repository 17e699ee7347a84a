//! Shared helpers for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::params::{EntryKind, ParamStore};
use crate::tensor::{Float, Tensor};

pub fn rand_tensor<T: Float>(shape: [usize; 4], seed: u64, lo: f64, hi: f64) -> Tensor<T> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(r.gen_range(lo..hi)))
}

fn probe(shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |[a, b, c, d]| (((a * 7 + b * 5 + c * 3 + d) % 13) as f64 - 6.0) / 6.0)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, Var) -> Result<Var> + 'a;

fn objective(store: &ParamStore<f64>, x: &Tensor<f64>, training: bool, build: &Build) -> f64 {
    let mut g = Tape::<f64>::new(training, 3);
    let xv = g.input(x.clone(), false);
    let y = build(&mut g, store, xv).unwrap();
    let yv = g.value(y);
    yv.data().iter().zip(probe(yv.shape()).data()).map(|(a, b)| a * b).sum()
}

fn close(fd: f64, an: f64, tol: f64) -> bool {
    (fd - an).abs() <= tol * (1e-4 + fd.abs().max(an.abs()))
}

/// Central-difference check of `sum(build(x) * probe)` against the tape's
/// gradient, for every input element and the first `per_param` elements of
/// each parameter.
pub fn grad_check(
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    training: bool,
    per_param: usize,
    tol: f64,
    build: &Build,
) {
    let mut g = Tape::<f64>::new(training, 3);
    let xv = g.input(x.clone(), true);
    let y = build(&mut g, store, xv).unwrap();
    let p = g.constant(probe(g.shape(y)));
    let prod = g.mul(y, p).unwrap();
    let l = g.mean_all(prod);
    let n = g.value(prod).len() as f64;
    let grads = g.backward(l).unwrap();
    let h = 1e-6;
    let gx = grads.wrt(xv).unwrap();
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let fd = (objective(store, &xp, training, build) - objective(store, &xm, training, build)) / (2.0 * h * n);
        let an = gx.data()[i];
        assert!(close(fd, an, tol), "input elem {i}: fd {fd} vs analytic {an}");
    }
    for id in store.ids().filter(|&id| store.kind(id) == EntryKind::Param) {
        let ga = grads.param(id).unwrap_or_else(|| panic!("no gradient for {}", store.name(id)));
        for i in 0..per_param.min(ga.len()) {
            let (mut sp, mut sm) = (store.clone(), store.clone());
            sp.get_mut(id).data_mut()[i] += h;
            sm.get_mut(id).data_mut()[i] -= h;
            let fd = (objective(&sp, x, training, build) - objective(&sm, x, training, build)) / (2.0 * h * n);
            let an = ga.data()[i];
            assert!(close(fd, an, tol), "{}[{i}]: fd {fd} vs analytic {an}", store.name(id));
        }
    }
}
