//! Analytic gradients against central finite differences.

mod common;

use common::{gradcheck_student, max_rel_error, TOL};

use moe_distill::numerics::{Graph, ParamStore, Tensor, Var};
use moe_distill::taskctx::{infonce_loss, EncoderConfig, TaskEncoder};
use moe_distill::teachers::{collect, suite};
use moe_distill::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Store with trainable groups `x0, x1, ...` of the given shapes.
fn store(seed: u64, shapes: &[&[usize]]) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (i, shape) in shapes.iter().enumerate() {
        s.add(format!("x{i}"), random(&mut rng, shape), true).unwrap();
    }
    s
}

/// Contracts `out` with a fixed random tensor so every entry matters.
fn contract(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, g.value(out).shape());
    let w = g.input(w)?;
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

fn assert_kernel<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let s = store(7, shapes);
    let err = max_rel_error(&s, |g, b| {
        let vars: Vec<Var> = s.iter().map(|(id, _)| b.var(id)).collect();
        let out = f(g, &vars)?;
        contract(g, out, 99)
    });
    assert!(err < TOL, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_kernels() {
    assert_kernel("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    assert_kernel("add row broadcast", &[&[3, 4], &[4]], |g, v| g.add(v[0], v[1]));
    assert_kernel("sub col broadcast", &[&[3, 4], &[3, 1]], |g, v| g.sub(v[0], v[1]));
    assert_kernel("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]));
    assert_kernel("mul scalar", &[&[3, 4], &[1]], |g, v| g.mul(v[0], v[1]));
    assert_kernel("scale", &[&[2, 5]], |g, v| g.scale(v[0], -1.7));
    assert_kernel("gelu", &[&[3, 4]], |g, v| g.gelu(v[0]));
    assert_kernel("exp", &[&[3, 4]], |g, v| g.exp(v[0]));
    assert_kernel("log", &[&[3, 4]], |g, v| {
        let e = g.exp(v[0])?;
        g.log(e)
    });
}

#[test]
fn matrix_kernels() {
    assert_kernel("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    assert_kernel("batch_matmul", &[&[2, 3, 4], &[2, 4, 5]], |g, v| {
        g.batch_matmul(v[0], v[1], false)
    });
    assert_kernel("batch_matmul transposed", &[&[2, 3, 4], &[2, 5, 4]], |g, v| {
        g.batch_matmul(v[0], v[1], true)
    });
    assert_kernel("concat/slice", &[&[3, 2], &[3, 4]], |g, v| {
        let c = g.concat_cols(&[v[0], v[1]])?;
        g.slice_cols(c, 1, 4)
    });
    assert_kernel("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], vec![3, 4]));
    assert_kernel("gather", &[&[4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]));
    assert_kernel("scatter", &[&[4, 3]], |g, v| g.scatter_add_rows(v[0], &[1, 1, 0, 4], 5));
}

#[test]
fn reduction_and_normalization_kernels() {
    assert_kernel("sum_last", &[&[3, 4]], |g, v| g.sum_last(v[0]));
    assert_kernel("sum_rows", &[&[3, 4]], |g, v| g.sum_rows(v[0]));
    assert_kernel("softmax", &[&[3, 4]], |g, v| g.softmax(v[0]));
    assert_kernel("causal_softmax", &[&[2, 3, 3]], |g, v| g.causal_softmax(v[0], 3));
    assert_kernel("layer_norm", &[&[3, 5], &[5], &[5]], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    assert_kernel("l2_normalize", &[&[3, 4]], |g, v| g.l2_normalize(v[0], 1e-12));
    assert_kernel("topk_renorm", &[&[3, 4]], |g, v| {
        let p = g.softmax(v[0])?;
        g.topk_renorm(p, vec![vec![1], vec![0, 3], vec![2, 1]])
    });
    assert_kernel("mse", &[&[3, 2], &[3, 2]], |g, v| g.mse(v[0], v[1]));
    assert_kernel("balance_penalty", &[&[4]], |g, v| {
        let p = g.exp(v[0])?;
        g.balance_penalty(p, &[3.0, 1.0, 0.0, 4.0], 1e-9)
    });
}

#[test]
fn two_layer_network() {
    let s = store(3, &[&[5, 6], &[6], &[6, 2], &[2]]);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[4, 5]);
    let y = random(&mut rng, &[4, 2]);
    let ids: Vec<_> = s.iter().map(|(id, _)| id).collect();
    let err = max_rel_error(&s, |g, b| {
        let x = g.input(x.clone())?;
        let y = g.input(y.clone())?;
        let h = g.matmul(x, b.var(ids[0]))?;
        let h = g.add(h, b.var(ids[1]))?;
        let h = g.gelu(h)?;
        let out = g.matmul(h, b.var(ids[2]))?;
        let out = g.add(out, b.var(ids[3]))?;
        g.mse(out, y)
    });
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn infonce_on_four_anchors() {
    let data: Vec<_> = suite(40, 0.05)
        .iter()
        .take(2)
        .flat_map(|t| collect(t, 2, 5, 1).unwrap())
        .collect();
    let refs: Vec<_> = data.iter().collect();
    let labels: Vec<usize> = data.iter().map(|t| t.task_id).collect();
    let enc = TaskEncoder::new(EncoderConfig::default(), 4, 2).unwrap();
    let (_, grads) = enc.loss_and_grads(&refs, &labels).unwrap();
    let mut probe = enc.clone();
    // the loss is O(1/tau), so round-off in the difference quotient reaches
    // ~1e-10; gradients below 1e-5 are compared absolutely
    let h = 1e-5;
    let floor = 1e-5;
    let mut worst: f64 = 0.0;
    for (id, group) in enc.params.iter() {
        let analytic = grads.get(id).unwrap();
        for i in (0..group.tensor.len()).step_by(7) {
            let x = group.tensor.data()[i];
            probe.params.get_mut(id).tensor.data_mut()[i] = x + h;
            let up = probe.loss_and_grads(&refs, &labels).unwrap().0;
            probe.params.get_mut(id).tensor.data_mut()[i] = x - h;
            let down = probe.loss_and_grads(&refs, &labels).unwrap().0;
            probe.params.get_mut(id).tensor.data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    assert!(worst < TOL, "relative error {worst:e}");
}

#[test]
fn infonce_kernel_on_free_embeddings() {
    let s = store(5, &[&[4, 3]]);
    let id = s.iter().next().unwrap().0;
    let err = max_rel_error(&s, |g, b| {
        let z = g.l2_normalize(b.var(id), 1e-12)?;
        infonce_loss(g, z, &[0, 0, 1, 1], 0.1)
    });
    assert!(err < TOL, "relative error {err:e}");
}

/// Distillation loss plus the load-balancing term on a small student.
#[test]
fn student_distillation_and_balance_loss() {
    let err = gradcheck_student(0);
    assert!(err < TOL, "relative error {err:e}");
}
