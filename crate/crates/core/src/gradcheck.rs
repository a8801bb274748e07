//! Central finite-difference gradient oracle.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{semantic_forward_graph, PoolingMode};
use crate::error::{Error, Result};
use crate::model::{cotrain_objective, visual_stream, ModelVars};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Step is `step_scale · (1 + |w|)` per coordinate.
    pub step_scale: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// coordinates whose true gradient is ~0 are judged on absolute error.
    pub scale_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-5,
            step_scale: 1e-5,
            scale_floor: 1e-3,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckOptions {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordinateError {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub checked: usize,
    pub worst: Option<CoordinateError>,
    pub failures: Vec<CoordinateError>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst_error(&self) -> f64 {
        self.worst.map_or(0.0, |w| w.rel_error)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} checked={} failures={} worst_rel_error={:.3e}",
            self.checked,
            self.failures.len(),
            self.worst_error()
        )?;
        if let Some(w) = self.worst {
            write!(
                f,
                " at param {} coord {} (analytic {:.12e}, numeric {:.12e})",
                w.param, w.coord, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

fn evaluate<F>(params: &[Tensor], f: &F, differentiate: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| if differentiate { g.param(p) } else { g.constant(p.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Graph(format!(
            "grad_check: function returned shape {:?}, expected a scalar",
            g.value(out).shape()
        )));
    }
    Ok((g, vars, out))
}

/// Compares the analytic gradient of `f` at `params` with central finite
/// differences, coordinate by coordinate.
pub fn grad_check<F>(params: &[Tensor], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(params, &f, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|v| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        checked: 0,
        worst: None,
        failures: Vec::new(),
    };
    let mut probe = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        #[allow(clippy::needless_range_loop)] // `ci` also indexes the probe copy
        for ci in 0..param.numel() {
            let w = param.data()[ci];
            let h = opts.step_scale * (1.0 + w.abs());
            probe[pi].data_mut()[ci] = w + h;
            let (gp, _, op) = evaluate(&probe, &f, false)?;
            probe[pi].data_mut()[ci] = w - h;
            let (gm, _, om) = evaluate(&probe, &f, false)?;
            probe[pi].data_mut()[ci] = w;

            let numeric = (gp.value(op).data()[0] - gm.value(om).data()[0]) / (2.0 * h);
            let a = analytic[pi][ci];
            let entry = CoordinateError {
                param: pi,
                coord: ci,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, opts.scale_floor),
            };
            report.checked += 1;
            if report.worst.is_none_or(|wst| entry.rel_error > wst.rel_error) {
                report.worst = Some(entry);
            }
            if !(entry.rel_error <= opts.tolerance) {
                report.failures.push(entry);
            }
        }
    }
    Ok(report)
}

/// Named outcome of one entry of [`standard_suite`].
#[derive(Clone, Debug)]
pub struct NamedCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Contracts a non-scalar node with a fixed random probe so every output
/// coordinate carries a distinct upstream gradient.
fn probe(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = g.constant(uniform(&mut rng, &shape, 1.0));
    let m = g.mul(v, r)?;
    Ok(g.sum(m))
}

type SuiteFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Finite-difference checks for every differentiable operation of the engine,
/// the attention chain in both modes, and the full co-training objective on a
/// small instance (5 classes, width 4, 3-word titles, batch of 2).
pub fn standard_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(&'static str, Vec<Tensor>, SuiteFn)> = Vec::new();
    let mut t = |shape: &[usize]| uniform(&mut rng, shape, 1.0);

    cases.push((
        "linear",
        vec![t(&[3, 4]), t(&[3]), t(&[2, 4])],
        Box::new(move |g, p| {
            let y = g.linear(p[0], p[1], p[2])?;
            probe(g, y, seed)
        }),
    ));
    cases.push((
        "add",
        vec![t(&[2, 3]), t(&[2, 3])],
        Box::new(move |g, p| {
            let y = g.add(p[0], p[1])?;
            probe(g, y, seed)
        }),
    ));
    cases.push((
        "mul",
        vec![t(&[2, 3]), t(&[2, 3])],
        Box::new(move |g, p| {
            let y = g.mul(p[0], p[1])?;
            probe(g, y, seed)
        }),
    ));
    cases.push((
        "scale",
        vec![t(&[4])],
        Box::new(move |g, p| {
            let y = g.scale(p[0], -1.7);
            probe(g, y, seed)
        }),
    ));
    cases.push(("sum", vec![t(&[2, 3])], Box::new(|g, p| Ok(g.sum(p[0])))));
    cases.push((
        "elementwise_max",
        vec![t(&[2, 4]), t(&[2, 4])],
        Box::new(move |g, p| {
            let y = g.elementwise_max(p[0], p[1])?;
            probe(g, y, seed)
        }),
    ));
    cases.push((
        "mean_over_axis",
        vec![t(&[3, 4])],
        Box::new(move |g, p| {
            let a = g.mean_over_axis(p[0], 0)?;
            let b = g.mean_over_axis(p[0], 1)?;
            let la = probe(g, a, seed)?;
            let lb = probe(g, b, seed + 1)?;
            g.add(la, lb)
        }),
    ));
    cases.push((
        "tanh",
        vec![t(&[2, 3])],
        Box::new(move |g, p| {
            let y = g.tanh(p[0]);
            probe(g, y, seed)
        }),
    ));
    cases.push((
        "softmax",
        vec![t(&[2, 4])],
        Box::new(move |g, p| {
            let y = g.softmax(p[0])?;
            probe(g, y, seed)
        }),
    ));
    cases.push((
        "cross_entropy",
        vec![t(&[3, 5])],
        Box::new(|g, p| g.cross_entropy(p[0], &[4, 0, 2])),
    ));
    cases.push((
        "gather",
        vec![t(&[4, 3])],
        Box::new(move |g, p| {
            let y = g.gather(p[0], &[2, 0, 2, 3])?;
            probe(g, y, seed)
        }),
    ));
    cases.push((
        "row_mul",
        vec![t(&[3, 4]), t(&[4])],
        Box::new(move |g, p| {
            let y = g.row_mul(p[0], p[1])?;
            probe(g, y, seed)
        }),
    ));
    cases.push((
        "weighted_sum",
        vec![t(&[3]), t(&[3, 4])],
        Box::new(move |g, p| {
            let y = g.weighted_sum(p[0], p[1])?;
            probe(g, y, seed)
        }),
    ));
    cases.push((
        "stack",
        vec![t(&[3]), t(&[3])],
        Box::new(move |g, p| {
            let y = g.stack(&[p[0], p[1], p[0]])?;
            probe(g, y, seed)
        }),
    ));
    for (name, mode) in [
        ("attention_bilinear", PoolingMode::BilinearAttention),
        ("attention_mean", PoolingMode::MeanPooling),
    ] {
        cases.push((
            name,
            vec![t(&[6, 4])],
            Box::new(move |g, p| {
                let a = semantic_forward_graph(g, p[0], &[1, 4, 1, 5], mode)?;
                probe(g, a.embedding, seed)
            }),
        ));
    }
    // Full objective: raw input width 4, one tanh hidden layer of 4, d = 4,
    // C = 5, vocabulary of 6 words, titles of 3 words, batch of 2.
    cases.push((
        "cotrain_objective",
        vec![t(&[4, 4]), t(&[4]), t(&[4, 4]), t(&[4]), t(&[5, 4]), t(&[5]), t(&[6, 4])],
        Box::new(|g, p| {
            let vars = ModelVars {
                extractor: vec![(p[0], p[1]), (p[2], p[3])],
                classifier_weight: p[4],
                classifier_bias: p[5],
                embeddings: p[6],
            };
            let raw = g.constant(Tensor::matrix(&[vec![0.3, -0.8, 1.1, 0.05], vec![-0.6, 0.2, 0.4, -1.3]])?);
            let visual = visual_stream(g, &vars, raw)?;
            let s0 = semantic_forward_graph(g, vars.embeddings, &[0, 3, 5], PoolingMode::BilinearAttention)?;
            let s1 = semantic_forward_graph(g, vars.embeddings, &[2, 1, 4], PoolingMode::BilinearAttention)?;
            let semantic = g.stack(&[s0.embedding, s1.embedding])?;
            let lv = cotrain_objective(g, &vars, visual, Some(semantic), &[3, 1], 1.0, 0.5)?;
            Ok(lv.total)
        }),
    ));

    cases
        .into_iter()
        .map(|(name, params, f)| {
            Ok(NamedCheck {
                name,
                report: grad_check(&params, f, opts)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;

    #[test]
    fn linear_layer_passes() {
        let w = Tensor::matrix(&[vec![0.3, -1.1], vec![0.7, 0.2], vec![-0.4, 0.9]]).unwrap();
        let b = Tensor::vector(vec![0.1, -0.2, 0.05]);
        let x = Tensor::vector(vec![1.5, -0.5]);
        let r = grad_check(
            &[w, b, x],
            |g, p| {
                let y = g.linear(p[0], p[1], p[2])?;
                let t = g.tanh(y);
                Ok(g.sum(t))
            },
            GradCheckOptions::with_tolerance(1e-6),
        )
        .unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.checked, 6 + 3 + 2);
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        // x ↦ Σ x² with a wrong derivative 3x instead of 2x.
        let x = Tensor::vector(vec![0.5, -2.0]);
        let r = grad_check(
            &[x],
            |g, p| {
                let xv = g.value(p[0]).clone();
                let value = Tensor::scalar(xv.data().iter().map(|v| v * v).sum());
                let back = Arc::new(|inputs: &[&Tensor], up: &[f64]| {
                    vec![inputs[0].data().iter().map(|v| 3.0 * v * up[0]).collect()]
                });
                Ok(g.custom(&[p[0]], value, back))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures.len(), 2);
        assert_eq!(r.worst.unwrap().param, 0);
    }

    #[test]
    fn suite_passes() {
        for c in standard_suite(3, GradCheckOptions::default()).unwrap() {
            assert!(c.report.passed(), "{}: {}", c.name, c.report);
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-3), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-3) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-3) - 1e-6).abs() < 1e-18);
    }
}
