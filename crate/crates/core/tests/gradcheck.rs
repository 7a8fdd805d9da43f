mod common;

use common::*;
use pucycle::baselines::BaselineKind;
use pucycle::cycle::LayerSizes;

#[test]
fn cycle_gradients_match_finite_differences_small() {
    for seed in 0..10 {
        let (p, u) = check_cycle(small_sizes(), seed, usize::MAX);
        assert!(p.passes(), "prediction seed {seed}: {p:?}");
        assert!(u.passes(), "update seed {seed}: {u:?}");
    }
}

#[test]
fn baseline_gradients_match_finite_differences_small() {
    for kind in [BaselineKind::OneToOne, BaselineKind::Encoder] {
        for seed in 0..10 {
            let e = check_baseline(kind, small_sizes(), seed, usize::MAX);
            assert!(e.passes(), "{kind:?} seed {seed}: {e:?}");
        }
    }
}

#[test]
fn default_size_gradients_match_on_a_parameter_sample() {
    let (p, u) = check_cycle(LayerSizes::default(), 3, 300);
    assert!(p.passes() && u.passes(), "{p:?} {u:?}");
    let e = check_baseline(BaselineKind::OneToOne, LayerSizes::default(), 3, 300);
    assert!(e.passes(), "{e:?}");
}
