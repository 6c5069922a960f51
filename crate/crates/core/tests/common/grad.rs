use std::sync::Arc;

use msgen_core::params::Bound;
use msgen_core::tensor::{finite_diff_check, GradCheck, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-5;
pub const H: f64 = 1e-3;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct Case {
    pub name: &'static str,
    pub params: Vec<Tensor>,
    pub f: Build,
}

fn case(name: &'static str, params: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Case {
    Case {
        name,
        params,
        f: Box::new(f),
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero and from each other by at least `gap`,
/// so kinks (clamp bounds, minimum ties) stay outside the stencil.
fn spaced(n: usize, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap * 2.0 + gap).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::vector(v).unwrap()
}

/// Reduces any output to a scalar through a fixed random projection, so every
/// output entry contributes with a distinct weight.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y).to_vec();
    let r = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let r = tape.leaf(r);
    let p = tape.mul(y, r).unwrap();
    tape.sum(p)
}

/// One case per differentiable tape operation, plus a small composite.
pub fn op_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng));
    let mut v = vec![
        case("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("matmul", vec![a.clone(), randn(&[4, 5], &mut rng)], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("matmul_t", vec![a.clone(), randn(&[6, 4], &mut rng)], |t, v| t.matmul_t(v[0], v[1]).unwrap()),
        case("add_row", vec![a.clone(), randn(&[4], &mut rng)], |t, v| t.add_row(v[0], v[1]).unwrap()),
    ];

    let m = spaced(12, 0.05, &mut rng);
    let alt = Tensor::vector((0..12).map(|i| if i % 2 == 0 { 0.3 } else { -0.3 }).collect()).unwrap();
    let m2 = m.axpy(1.0, &alt).unwrap();
    v.push(case("minimum", vec![m, m2], |t, v| t.minimum(v[0], v[1]).unwrap()));

    let u = randn(&[3, 5], &mut rng);
    v.extend([
        case("scale", vec![u.clone()], |t, v| t.scale(v[0], -1.7)),
        case("add_scalar", vec![u.clone()], |t, v| t.add_scalar(v[0], 0.3)),
        case("softmax_rows", vec![u.clone()], |t, v| t.softmax_rows(v[0])),
        case("sigmoid", vec![u.clone()], |t, v| t.sigmoid(v[0])),
        case("silu", vec![u.clone()], |t, v| t.silu(v[0])),
        case("exp", vec![u.clone()], |t, v| t.exp(v[0])),
        case("log_sigmoid", vec![u.clone()], |t, v| t.log_sigmoid(v[0])),
        case("sum", vec![u.clone()], |t, v| t.sum(v[0])),
        case("mean", vec![u.clone()], |t, v| t.mean(v[0])),
        case("sum_squares", vec![u.clone()], |t, v| t.sum_squares(v[0])),
        case("reshape", vec![u], |t, v| t.reshape(v[0], &[5, 3]).unwrap()),
        // Entries well inside and well outside [−0.4, 0.4].
        case("clamp", vec![spaced(16, 0.07, &mut rng)], |t, v| t.clamp(v[0], -0.4, 0.4)),
        case("rms_norm", vec![randn(&[4, 6], &mut rng), randn(&[6], &mut rng)], |t, v| {
            t.rms_norm(v[0], v[1]).unwrap()
        }),
    ]);

    let (a, b) = (randn(&[2, 3], &mut rng), randn(&[4, 3], &mut rng));
    let d = randn(&[5, 4], &mut rng);
    // Repeated indices accumulate.
    let idx: Arc<[usize]> = vec![0, 5, 5, 2, 1, 0, 3].into();
    v.extend([
        case("concat_rows", vec![a.clone(), b], |t, v| t.concat_rows(&[v[0], v[1]]).unwrap()),
        case("concat_cols", vec![a.clone(), randn(&[2, 5], &mut rng)], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
        case("slice_rows", vec![d.clone()], |t, v| t.slice_rows(v[0], 1, 4).unwrap()),
        case("slice_cols", vec![d], |t, v| t.slice_cols(v[0], 1, 3).unwrap()),
        case("gather", vec![a], move |t, v| t.gather(v[0], idx.clone(), &[7]).unwrap()),
    ]);

    let x = randn(&[5, 4], &mut rng);
    let wq = randn(&[4, 4], &mut rng).scale(0.5);
    let wk = randn(&[4, 4], &mut rng).scale(0.5);
    let g = randn(&[4], &mut rng);
    v.push(case("attention_composite", vec![x, wq, wk, g], |t, v| {
        let h = t.rms_norm(v[0], v[3]).unwrap();
        let q = t.matmul(h, v[1]).unwrap();
        let k = t.matmul(h, v[2]).unwrap();
        let s = t.matmul_t(q, k).unwrap();
        let s = t.scale(s, 0.5);
        let w = t.softmax_rows(s);
        let o = t.matmul(w, h).unwrap();
        let o = t.silu(o);
        t.add(o, v[0]).unwrap()
    }));
    v
}

pub fn run_case(c: &Case) -> GradCheck {
    finite_diff_check(
        |t, v| {
            let y = (c.f)(t, v);
            Ok(project(t, y, 99))
        },
        &c.params,
        H,
    )
    .unwrap()
}

/// Every parameter of a two-block HIA backbone plus the noisy latent.
pub fn backbone_check() -> GradCheck {
    let (model, params) = super::tiny_model(2, 11);
    let cond = super::condition(12, 2);
    let z = super::latent(13);
    let mut all = params.values().to_vec();
    all.push(z);
    let n = params.len();
    finite_diff_check(
        |t, v| {
            let p = Bound::from_vars(v[..n].to_vec());
            let ctx = model.context(t, &p, Some(&cond))?;
            let out = model.predict_velocity(t, &p, v[n], 0.37, &ctx)?;
            Ok(project(t, out, 14))
        },
        &all,
        H,
    )
    .unwrap()
}
