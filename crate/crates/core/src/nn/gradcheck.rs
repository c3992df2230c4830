//! Central finite differences on individual parameter coordinates.

use super::{Ctx, Mode, ParamId, ParamStore};
use crate::autodiff::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordCheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_err(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compares tape gradients of the scalar built by `f` against central differences
/// with step `step` at each `(param, flat index)` coordinate.
pub fn check_params(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    mode: Mode,
    step: f64,
    f: impl Fn(&mut Ctx<'_>) -> Var,
) -> Vec<CoordCheck> {
    let eval = |s: &ParamStore, grads: bool| {
        let mut g = Graph::new();
        let bound = s.bind(&mut g);
        let loss = {
            let mut cx = Ctx::new(&mut g, &bound, mode);
            f(&mut cx)
        };
        let value = g.value(loss).item();
        let grads = grads.then(|| {
            let mut gr = g.backward(loss);
            bound.grads(&mut gr)
        });
        (value, grads)
    };
    let (_, grads) = eval(store, true);
    let grads = grads.expect("requested gradients");
    let mut probe = store.clone();
    coords
        .iter()
        .map(|&(param, index)| {
            let original = store.get(param).data()[index];
            probe.get_mut(param).data_mut()[index] = original + step;
            let plus = eval(&probe, false).0;
            probe.get_mut(param).data_mut()[index] = original - step;
            let minus = eval(&probe, false).0;
            probe.get_mut(param).data_mut()[index] = original;
            CoordCheck {
                param,
                index,
                analytic: grads[param.index()].as_ref().map_or(0.0, |t| t.data()[index]),
                numeric: (plus - minus) / (2.0 * step),
            }
        })
        .collect()
}
