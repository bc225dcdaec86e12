use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hierd2t::config::Scenario;
use hierd2t::decoder::example_loss;
use hierd2t::tensor::{grad_check, Graph, Init, ParamId, ParamStore, Tensor, Var};
use hierd2t::Result;

use super::*;

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn param(store: &mut ParamStore, name: &str, rows: usize, cols: usize, seed: u64) -> ParamId {
    store.create(name, rows, cols, Init::Embedding, &mut rng(seed)).unwrap()
}

fn positive(store: &mut ParamStore, name: &str, rows: usize, cols: usize, seed: u64) -> ParamId {
    let id = param(store, name, rows, cols, seed);
    for x in store.value_mut(id).data_mut() {
        *x = 0.5 + x.abs();
    }
    id
}

/// Weighted sum against a fixed random tensor so every output coordinate
/// gets a distinct upstream gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n = shape[0] * shape[1];
    let mut r = rng(seed);
    let w: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
    let w = g.constant(Tensor::new(shape, w)?)?;
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

type OpCase = (&'static str, Box<dyn Fn(&mut ParamStore) -> Box<dyn FnMut(&mut Graph) -> Result<Var>>>);

fn cases() -> Vec<OpCase> {
    fn case(
        name: &'static str,
        build: impl Fn(&mut ParamStore) -> Box<dyn FnMut(&mut Graph) -> Result<Var>> + 'static,
    ) -> OpCase {
        (name, Box::new(build))
    }
    vec![
        case("matmul", |s| {
            let (a, b) = (param(s, "a", 3, 4, 1), param(s, "b", 4, 2, 2));
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.matmul(a, b)?;
                project(g, y, 9)
            })
        }),
        case("matmul_t", |s| {
            let (a, b) = (param(s, "a", 3, 4, 1), param(s, "b", 5, 4, 2));
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.matmul_t(a, b)?;
                project(g, y, 9)
            })
        }),
        case("add", |s| {
            let (a, b) = (param(s, "a", 2, 3, 1), param(s, "b", 2, 3, 2));
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.add(a, b)?;
                project(g, y, 9)
            })
        }),
        case("add_row", |s| {
            let (a, b) = (param(s, "a", 3, 4, 1), param(s, "b", 1, 4, 2));
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.add_row(a, b)?;
                project(g, y, 9)
            })
        }),
        case("mul", |s| {
            let (a, b) = (param(s, "a", 2, 3, 1), param(s, "b", 2, 3, 2));
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.mul(a, b)?;
                project(g, y, 9)
            })
        }),
        case("scale", |s| {
            let a = param(s, "a", 2, 3, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.scale(a, -2.5);
                project(g, y, 9)
            })
        }),
        case("relu", |s| {
            let a = param(s, "a", 3, 3, 1);
            for x in s.value_mut(a).data_mut() {
                // keep clear of the kink
                *x += 0.2 * x.signum();
            }
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.relu(a);
                project(g, y, 9)
            })
        }),
        case("tanh", |s| {
            let a = param(s, "a", 3, 3, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.tanh(a);
                project(g, y, 9)
            })
        }),
        case("sigmoid", |s| {
            let a = param(s, "a", 3, 3, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.sigmoid(a);
                project(g, y, 9)
            })
        }),
        case("log_sigmoid", |s| {
            let a = param(s, "a", 3, 3, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.log_sigmoid(a);
                project(g, y, 9)
            })
        }),
        case("log", |s| {
            let a = positive(s, "a", 3, 3, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.log(a);
                project(g, y, 9)
            })
        }),
        case("softmax_rows", |s| {
            let a = param(s, "a", 3, 4, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.softmax(a, 1)?;
                project(g, y, 9)
            })
        }),
        case("softmax_cols", |s| {
            let a = param(s, "a", 3, 4, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.softmax(a, 0)?;
                project(g, y, 9)
            })
        }),
        case("log_softmax", |s| {
            let a = param(s, "a", 3, 4, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.log_softmax(a)?;
                project(g, y, 9)
            })
        }),
        case("masked_softmax", |s| {
            let a = param(s, "a", 3, 3, 1);
            let mask = [true, false, true, true, true, false, false, true, true];
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.masked_softmax(a, &mask)?;
                project(g, y, 9)
            })
        }),
        case("segment_softmax", |s| {
            let a = param(s, "a", 1, 6, 1);
            let bounds: Rc<[usize]> = vec![0, 2, 3, 6].into();
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.segment_softmax(a, bounds.clone())?;
                project(g, y, 9)
            })
        }),
        case("layer_norm", |s| {
            let (x, gain, bias) = (param(s, "x", 3, 5, 1), param(s, "gain", 1, 5, 2), param(s, "bias", 1, 5, 3));
            Box::new(move |g| {
                let (x, gain, bias) = (g.param(x), g.param(gain), g.param(bias));
                let y = g.layer_norm(x, gain, bias)?;
                project(g, y, 9)
            })
        }),
        case("dropout", |s| {
            let a = param(s, "a", 4, 4, 1);
            Box::new(move |g| {
                let a = g.param(a);
                // same mask on every evaluation
                let mut r = ChaCha8Rng::seed_from_u64(5);
                let y = g.dropout_with(a, 0.3, true, &mut r)?;
                project(g, y, 9)
            })
        }),
        case("gather_rows", |s| {
            let a = param(s, "a", 4, 3, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.gather_rows(a, vec![2, 0, 2, 3].into())?;
                project(g, y, 9)
            })
        }),
        case("embedding_lookup", |s| {
            let a = param(s, "a", 5, 3, 1);
            Box::new(move |g| {
                let y = g.embedding_lookup(a, &[4, 1, 1])?;
                project(g, y, 9)
            })
        }),
        case("gather_cols", |s| {
            let a = param(s, "a", 2, 4, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.gather_cols(a, vec![3, 3, 0].into())?;
                project(g, y, 9)
            })
        }),
        case("pick", |s| {
            let a = param(s, "a", 3, 3, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.pick(a, vec![0, 4, 4, 8].into())?;
                project(g, y, 9)
            })
        }),
        case("concat_rows", |s| {
            let (a, b) = (param(s, "a", 2, 3, 1), param(s, "b", 1, 3, 2));
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.concat(&[a, b, a], 0)?;
                project(g, y, 9)
            })
        }),
        case("concat_cols", |s| {
            let (a, b) = (param(s, "a", 2, 3, 1), param(s, "b", 2, 1, 2));
            Box::new(move |g| {
                let (a, b) = (g.param(a), g.param(b));
                let y = g.concat(&[b, a], 1)?;
                project(g, y, 9)
            })
        }),
        case("mean_rows", |s| {
            let a = param(s, "a", 3, 4, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.mean(a, 0)?;
                project(g, y, 9)
            })
        }),
        case("mean_cols", |s| {
            let a = param(s, "a", 3, 4, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.mean(a, 1)?;
                project(g, y, 9)
            })
        }),
        case("slice_cols", |s| {
            let a = param(s, "a", 3, 5, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.slice_cols(a, 1, 4)?;
                project(g, y, 9)
            })
        }),
        case("sum", |s| {
            let a = param(s, "a", 3, 2, 1);
            Box::new(move |g| {
                let a = g.param(a);
                let y = g.mul(a, a)?;
                Ok(g.sum(y))
            })
        }),
    ]
}

/// Maximum relative error per differentiable operation.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|(name, build)| {
            let mut store = ParamStore::new();
            let f = build(&mut store);
            let report = grad_check(&mut store, EPS, f).unwrap();
            (name, report.max_rel_error)
        })
        .collect()
}

/// Maximum relative error of the full teacher-forced loss on a 2-entity,
/// 4-token fixture.
pub fn nll_error(scenario: Scenario) -> f64 {
    let fx = fixture(11, 2, 3, 4);
    let mut m = model(scenario, &fx.vocab, 3);
    let handles = m.clone();
    let report = grad_check(&mut m.params, EPS, |g| example_loss(g, &handles, &fx.prepared)).unwrap();
    report.max_rel_error
}
