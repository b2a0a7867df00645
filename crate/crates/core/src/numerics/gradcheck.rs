use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    pub loss: f64,
}

/// Which parameters to perturb.
#[derive(Debug, Clone, Default)]
pub enum Selection {
    #[default]
    All,
    Only(Vec<ParamId>),
}

/// Compares reverse-mode gradients against central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε` for every entry of every selected parameter.
///
/// `loss_fn` builds the loss on a fresh graph from the current parameter
/// values and must return a scalar node.
pub fn check_gradients<F>(params: &mut ParamStore, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    check_gradients_with(params, eps, &Selection::All, loss_fn)
}

pub fn check_gradients_with<F>(
    params: &mut ParamStore,
    eps: f64,
    selection: &Selection,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let (graph, loss) = record(params, eps, &mut loss_fn)?;
    sweep(params, eps, selection, &graph, loss, |params, _, _| {
        let mut g = Graph::new();
        let v = loss_fn(params, &mut g)?;
        scalar(&g, v)
    })
}

/// Same check, but each perturbed loss is obtained by [`Graph::replay`] of
/// the recorded graph, so only nodes downstream of the perturbed parameter
/// are recomputed. `loss_fn` must build a graph whose value depends on the
/// parameters only through recorded ops (every custom scalar needs a
/// recompute rule).
pub fn check_gradients_replayed<F>(
    params: &mut ParamStore,
    eps: f64,
    selection: &Selection,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let (graph, loss) = record(params, eps, &mut loss_fn)?;
    sweep(params, eps, selection, &graph, loss, |params, id, j| {
        let t = graph.replay_entry(params, id, j, loss)?;
        t.item().ok_or_else(|| Error::Contract("gradient check needs a scalar loss".into()))
    })
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    g.scalar_value(v).ok_or_else(|| Error::Contract("gradient check needs a scalar loss".into()))
}

fn record<F>(params: &ParamStore, eps: f64, loss_fn: &mut F) -> Result<(Graph, Var)>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(alloc::format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let mut graph = Graph::new();
    let loss = loss_fn(params, &mut graph)?;
    scalar(&graph, loss)?;
    Ok((graph, loss))
}

fn sweep<E>(
    params: &mut ParamStore,
    eps: f64,
    selection: &Selection,
    graph: &Graph,
    loss: Var,
    mut eval: E,
) -> Result<GradCheckReport>
where
    E: FnMut(&ParamStore, ParamId, usize) -> Result<f64>,
{
    let loss_value = scalar(graph, loss)?;
    let grads = graph.backward(loss)?;

    let saved: Vec<_> = params.iter().map(|(_, p)| p.grad.clone()).collect();
    params.zero_grads();
    grads.accumulate_into(params);
    let analytic: Vec<_> = params.iter().map(|(_, p)| p.grad.clone()).collect();
    for (p, g) in params.iter_mut().zip(saved) {
        p.grad = g;
    }

    let ids: Vec<ParamId> = match selection {
        Selection::All => params.iter().map(|(id, _)| id).collect(),
        Selection::Only(ids) => ids.clone(),
    };

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, entries_checked: 0, loss: loss_value };
    for id in ids {
        let n = params.value(id).numel();
        for j in 0..n {
            let original = params.value(id).data()[j];
            params.get_mut(id).value.data_mut()[j] = original + eps;
            let plus = eval(params, id, j);
            params.get_mut(id).value.data_mut()[j] = original - eps;
            let minus = eval(params, id, j);
            params.get_mut(id).value.data_mut()[j] = original;
            let (plus, minus) = (plus?, minus?);

            let numeric = (plus - minus) / (2.0 * eps);
            let exact = analytic[id.0].data()[j];
            let err = (exact - numeric).abs() / 1.0f64.max(exact.abs()).max(numeric.abs());
            if !err.is_finite() {
                return Err(Error::NonFinite { context: alloc::format!("gradient check of {}", params.get(id).name) });
            }
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((params.get(id).name.clone(), j));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
