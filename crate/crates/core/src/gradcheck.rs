//! Finite-difference verification of every differentiable op kind.
//!
//! The checker rebuilds the forward graph at perturbed inputs and compares
//! central differences against the analytic backward pass. It is report-only:
//! callers decide what error level is acceptable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, TensorId};
use crate::tensor::{seeded_rng, Tensor};
use crate::Result;

const FD_STEP: f64 = 1e-5;

/// Max relative error per op kind, over all checked points and elements.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub per_op: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub points_per_op: usize,
}

impl GradcheckReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (op, err) in &self.per_op {
            out.push_str(&format!("{op:<20} max rel err {err:.3e}\n"));
        }
        out.push_str(&format!("overall              max rel err {:.3e}\n", self.max_rel_err));
        out
    }
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences, for every element of every input tensor. Returns the
/// max relative error. `build` must be a pure function of the inputs.
pub fn check_builder(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Graph, &[TensorId]) -> Result<TensorId>,
) -> Result<f64> {
    let eval = |points: &[Tensor]| -> Result<(f64, Option<Vec<Vec<f64>>>)> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = points.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
        let loss = build(&mut g, &ids)?;
        let value = g.value(loss).item();
        Ok((value, {
            let grads = g.backward(loss)?;
            Some(ids.iter().map(|&id| grads.get(id).map(|s| s.to_vec()).unwrap_or_default()).collect())
        }))
    };

    let (_, analytic) = eval(inputs)?;
    let analytic = analytic.unwrap();

    let mut max_rel = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[ti].data_mut()[ei] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[ti].data_mut()[ei] -= FD_STEP;
            let mut gp = Graph::new();
            let idsp: Vec<TensorId> = plus.iter().map(|t| gp.leaf(t.clone())).collect();
            let fp = gp.value(build(&mut gp, &idsp)?).item();
            let mut gm = Graph::new();
            let idsm: Vec<TensorId> = minus.iter().map(|t| gm.leaf(t.clone())).collect();
            let fm = gm.value(build(&mut gm, &idsm)?).item();
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let a = if analytic[ti].is_empty() { 0.0 } else { analytic[ti][ei] };
            let rel = (a - fd).abs() / fd.abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Like `rand_tensor` but keeps every element away from zero, for ops with a
/// kink there (relu, abs).
fn rand_tensor_off_kink(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let mag = rng.gen_range(0.2..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Run the finite-difference check over every differentiable op kind at
/// `points` random points each, deterministically from `seed`.
///
/// `ste-threshold` is skipped: its backward is the straight-through
/// surrogate by definition, which finite differences of the hard forward
/// cannot match.
pub fn gradcheck_with_points(seed: u64, points: usize) -> Result<GradcheckReport> {
    let mut per_op: Vec<(String, f64)> = Vec::new();
    let mut rng = seeded_rng(seed, GRADCHECK_STREAM);

    type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, BuildFn)>);
    type BuildFn = Box<dyn Fn(&mut Graph, &[TensorId]) -> Result<TensorId>>;

    // Scalar-reduce through a random constant weighting so that gradients are
    // non-degenerate (softmax rows always sum to 1, for instance).
    fn weighted_mean(weights: Tensor) -> impl Fn(&mut Graph, TensorId) -> Result<TensorId> {
        move |g: &mut Graph, x: TensorId| {
            let w = g.constant(weights.clone());
            let prod = g.mul(x, w)?;
            g.mean(prod)
        }
    }

    let cases: Vec<Case> = vec![
        ("matmul", Box::new(|rng| {
            let a = rand_tensor(vec![2, 3], rng, -1.0, 1.0);
            let b = rand_tensor(vec![3, 2], rng, -1.0, 1.0);
            let w = rand_tensor(vec![2, 2], rng, -1.0, 1.0);
            (vec![a, b], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.matmul(ids[0], ids[1])?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("add", Box::new(|rng| {
            let a = rand_tensor(vec![3, 4], rng, -1.0, 1.0);
            let b = rand_tensor(vec![3, 4], rng, -1.0, 1.0);
            let w = rand_tensor(vec![3, 4], rng, -1.0, 1.0);
            (vec![a, b], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.add(ids[0], ids[1])?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("add-bias", Box::new(|rng| {
            let a = rand_tensor(vec![3, 4], rng, -1.0, 1.0);
            let b = rand_tensor(vec![1, 4], rng, -1.0, 1.0);
            let w = rand_tensor(vec![3, 4], rng, -1.0, 1.0);
            (vec![a, b], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.add(ids[0], ids[1])?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("mul", Box::new(|rng| {
            let a = rand_tensor(vec![2, 5], rng, -1.0, 1.0);
            let b = rand_tensor(vec![2, 5], rng, -1.0, 1.0);
            let w = rand_tensor(vec![2, 5], rng, -1.0, 1.0);
            (vec![a, b], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.mul(ids[0], ids[1])?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("concat", Box::new(|rng| {
            let a = rand_tensor(vec![2, 3], rng, -1.0, 1.0);
            let b = rand_tensor(vec![2, 2], rng, -1.0, 1.0);
            let axis0 = rng.gen_bool(0.5);
            let (a, b) = if axis0 {
                (rand_tensor(vec![2, 3], rng, -1.0, 1.0), rand_tensor(vec![1, 3], rng, -1.0, 1.0))
            } else {
                (a, b)
            };
            let wshape = if axis0 { vec![3, 3] } else { vec![2, 5] };
            let w = rand_tensor(wshape, rng, -1.0, 1.0);
            let axis = if axis0 { 0 } else { 1 };
            (vec![a, b], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.concat(&[ids[0], ids[1]], axis)?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("sigmoid", Box::new(|rng| {
            let a = rand_tensor(vec![2, 4], rng, -2.0, 2.0);
            let w = rand_tensor(vec![2, 4], rng, -1.0, 1.0);
            (vec![a], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.sigmoid(ids[0])?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("tanh", Box::new(|rng| {
            let a = rand_tensor(vec![2, 4], rng, -2.0, 2.0);
            let w = rand_tensor(vec![2, 4], rng, -1.0, 1.0);
            (vec![a], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.tanh(ids[0])?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("relu", Box::new(|rng| {
            let a = rand_tensor_off_kink(vec![2, 4], rng);
            let w = rand_tensor(vec![2, 4], rng, -1.0, 1.0);
            (vec![a], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.relu(ids[0])?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("softmax", Box::new(|rng| {
            let a = rand_tensor(vec![3, 4], rng, -2.0, 2.0);
            let w = rand_tensor(vec![3, 4], rng, -1.0, 1.0);
            let axis = usize::from(rng.gen_bool(0.5));
            (vec![a], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.softmax(ids[0], axis)?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("embedding-lookup", Box::new(|rng| {
            let emb = rand_tensor(vec![5, 3], rng, -1.0, 1.0);
            let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let w = rand_tensor(vec![4, 3], rng, -1.0, 1.0);
            (vec![emb], Box::new(move |g: &mut Graph, tid: &[TensorId]| {
                let c = g.embedding_lookup(tid[0], &ids)?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("bce-loss", Box::new(|rng| {
            let pred = rand_tensor(vec![4], rng, 0.05, 0.95);
            let target: Vec<f64> = (0..4).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let yt = Tensor::new(vec![4], target).unwrap();
            (vec![pred], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let y = g.constant(yt.clone());
                g.bce_loss(ids[0], y)
            }) as BuildFn)
        })),
        ("mean", Box::new(|rng| {
            let a = rand_tensor(vec![3, 3], rng, -1.0, 1.0);
            (vec![a], Box::new(|g: &mut Graph, ids: &[TensorId]| g.mean(ids[0])) as BuildFn)
        })),
        ("sum", Box::new(|rng| {
            let a = rand_tensor(vec![2, 3], rng, -1.0, 1.0);
            let b = rand_tensor(vec![2, 3], rng, -1.0, 1.0);
            (vec![a], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let w = g.constant(b.clone());
                let p = g.mul(ids[0], w)?;
                g.sum(p)
            }) as BuildFn)
        })),
        ("transpose", Box::new(|rng| {
            let a = rand_tensor(vec![2, 4], rng, -1.0, 1.0);
            let w = rand_tensor(vec![4, 2], rng, -1.0, 1.0);
            (vec![a], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.transpose(ids[0])?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("scale", Box::new(|rng| {
            let a = rand_tensor(vec![2, 4], rng, -1.0, 1.0);
            let w = rand_tensor(vec![2, 4], rng, -1.0, 1.0);
            let f = rng.gen_range(-2.0..2.0);
            (vec![a], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.scale(ids[0], f)?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("abs", Box::new(|rng| {
            let a = rand_tensor_off_kink(vec![2, 4], rng);
            let w = rand_tensor(vec![2, 4], rng, -1.0, 1.0);
            (vec![a], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.abs(ids[0])?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
        ("layer-norm", Box::new(|rng| {
            let x = rand_tensor(vec![3, 4], rng, -1.0, 1.0);
            let gamma = rand_tensor(vec![1, 4], rng, 0.5, 1.5);
            let beta = rand_tensor(vec![1, 4], rng, -0.2, 0.2);
            let w = rand_tensor(vec![3, 4], rng, -1.0, 1.0);
            (vec![x, gamma, beta], Box::new(move |g: &mut Graph, ids: &[TensorId]| {
                let c = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                weighted_mean(w.clone())(g, c)
            }) as BuildFn)
        })),
    ];

    let mut overall = 0.0f64;
    for (name, make) in &cases {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let (inputs, build) = make(&mut rng);
            let err = check_builder(&inputs, &build)?;
            worst = worst.max(err);
        }
        overall = overall.max(worst);
        per_op.push((name.to_string(), worst));
    }

    Ok(GradcheckReport { per_op, max_rel_err: overall, points_per_op: points })
}

/// Default check: every op kind at 3 random points.
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    gradcheck_with_points(seed, 3)
}

const GRADCHECK_STREAM: u64 = 0x6772_6164; // "grad"

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ops_within_tolerance() {
        let report = gradcheck(0).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "gradcheck failed:\n{}",
            report.render()
        );
        assert_eq!(report.points_per_op, 3);
    }

    #[test]
    fn deterministic_given_seed() {
        let a = gradcheck(7).unwrap();
        let b = gradcheck(7).unwrap();
        let av: Vec<f64> = a.per_op.iter().map(|x| x.1).collect();
        let bv: Vec<f64> = b.per_op.iter().map(|x| x.1).collect();
        assert_eq!(av, bv);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        // 3-layer MLP with random weights: rel err < 1e-4 per element.
        use crate::tensor::seeded_rng;
        let mut rng = seeded_rng(3, 99);
        let x = rand_tensor(vec![1, 5], &mut rng, -1.0, 1.0);
        let w1 = rand_tensor(vec![5, 4], &mut rng, -1.0, 1.0);
        let b1 = rand_tensor(vec![1, 4], &mut rng, -0.5, 0.5);
        let w2 = rand_tensor(vec![4, 3], &mut rng, -1.0, 1.0);
        let b2 = rand_tensor(vec![1, 3], &mut rng, -0.5, 0.5);
        let w3 = rand_tensor(vec![3, 1], &mut rng, -1.0, 1.0);
        let target = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let inputs = vec![x, w1, b1, w2, b2, w3];
        let err = check_builder(&inputs, &move |g, ids| {
            let h1 = g.matmul(ids[0], ids[1])?;
            let h1 = g.add(h1, ids[2])?;
            let h1 = g.tanh(h1)?;
            let h2 = g.matmul(h1, ids[3])?;
            let h2 = g.add(h2, ids[4])?;
            let h2 = g.sigmoid(h2)?;
            let out = g.matmul(h2, ids[5])?;
            let p = g.sigmoid(out)?;
            let y = g.constant(target.clone());
            g.bce_loss(p, y)
        })
        .unwrap();
        assert!(err < 1e-4, "mlp fd error {err}");
    }
}
