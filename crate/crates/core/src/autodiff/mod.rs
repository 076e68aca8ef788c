//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every gradient rule is itself written with recorded operations, so a
//! backward pass run with `create_graph = true` yields nodes that can be
//! differentiated again. This is what lets an outer objective see through
//! unrolled SGD steps.
//!
//! ```
//! use riskmeta::autodiff::{backward, Tape, Tensor};
//!
//! let tape = Tape::default();
//! let x = tape.var(Tensor::scalar(2.0));
//! let y = x.mul(&x).unwrap().mul(&x).unwrap(); // x³
//! let dy = backward(&y, &[x.clone()], true).unwrap().remove(0);
//! let d2y = backward(&dy, &[x], false).unwrap().remove(0);
//! assert_eq!(dy.item(), 12.0);
//! assert_eq!(d2y.item(), 12.0);
//! ```

mod tape;
mod tensor;

pub use tape::{argsort_desc, backward, log_sum_exp, softmax, OpKind, Tape, TapeMode, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: index {index} out of range for length {len}")]
    Index { op: &'static str, index: usize, len: usize },
    #[error("{op} expects {expected} inputs, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {0} is detached or constant and cannot be differentiated against")]
    Detached(usize),
    #[error("node belongs to a different tape")]
    ForeignTape,
    #[error("create_graph requested on a first-order tape")]
    HigherOrderDisabled,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;

    fn rel_close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-8)
    }

    /// Central finite differences of `f` at `x`.
    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += H;
                m[i] -= H;
                (f(&p) - f(&m)) / (2.0 * H)
            })
            .collect()
    }

    /// Builds `f(input)` on a fresh tape and returns its value.
    fn eval(build: &dyn Fn(&Var) -> Var, shape: &[usize], x: &[f64]) -> f64 {
        let tape = Tape::default();
        let v = tape.var(Tensor::new(shape.to_vec(), x.to_vec()));
        build(&v).item()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    #[test]
    fn record_examples() {
        let tape = Tape::default();
        let x = tape.var(Tensor::scalar(3.0));
        let sq = tape.record(OpKind::Mul, &[&x, &x]).unwrap();
        assert_eq!(sq.item(), 9.0);
        let z = tape.var(Tensor::vector(vec![0.0; 4]));
        assert_eq!(tape.record(OpKind::Softmax, &[&z]).unwrap().value().data(), &[0.25; 4]);
        let a = tape.var(Tensor::filled(&[2, 3], 1.0));
        let b = tape.var(Tensor::filled(&[3, 1], 1.0));
        let m = tape.record(OpKind::MatMul, &[&a, &b]).unwrap();
        assert_eq!(m.shape(), vec![2, 1]);
        assert_eq!(m.value().data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let tape = Tape::default();
        let a = tape.var(Tensor::filled(&[2, 3], 1.0));
        let b = tape.var(Tensor::filled(&[2, 3], 1.0));
        match a.matmul(&b) {
            Err(AutodiffError::Shape { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(matches!(tape.record(OpKind::Add, &[&a]), Err(AutodiffError::Arity { .. })));
    }

    #[test]
    fn first_derivatives() {
        let tape = Tape::default();
        let x = tape.var(Tensor::scalar(3.0));
        let y = x.square().unwrap();
        assert_eq!(backward(&y, &[x], false).unwrap()[0].item(), 6.0);

        let v = tape.var(Tensor::vector(vec![1., 2., 3., 4., 5.]));
        let m = v.mean().unwrap();
        assert_eq!(backward(&m, &[v], false).unwrap()[0].value().data(), &[0.2; 5]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let tape = Tape::default();
        let x = tape.var(Tensor::scalar(2.0));
        let y = x.mul(&x).unwrap().mul(&x).unwrap();
        let dy = backward(&y, std::slice::from_ref(&x), true).unwrap().remove(0);
        let d2 = backward(&dy, &[x], false).unwrap()[0].item();
        // finite differences of d(x^3)/dx computed through the engine
        let d1 = |p: f64| {
            let t = Tape::default();
            let x = t.var(Tensor::scalar(p));
            let y = x.mul(&x).unwrap().mul(&x).unwrap();
            backward(&y, &[x], false).unwrap()[0].item()
        };
        let fd = (d1(2.0 + H) - d1(2.0 - H)) / (2.0 * H);
        assert!(rel_close(d2, fd, 1e-6), "{d2} vs {fd}");
        assert!((d2 - 12.0).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_root_and_detached_wrt() {
        let tape = Tape::default();
        let v = tape.var(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(backward(&v, std::slice::from_ref(&v), false), Err(AutodiffError::NonScalarRoot(_))));
        let d = v.detach();
        let s = d.sum().unwrap();
        assert!(matches!(backward(&s, &[d], false), Err(AutodiffError::Detached(_))));
        let other = Tape::default();
        let w = other.var(Tensor::scalar(1.0));
        let s = v.sum().unwrap();
        assert!(matches!(backward(&s, &[w], false), Err(AutodiffError::ForeignTape)));
    }

    #[test]
    fn first_order_tape_rejects_create_graph() {
        let tape = Tape::new(TapeMode::FirstOrder);
        let x = tape.var(Tensor::scalar(1.0));
        let y = x.square().unwrap();
        assert_eq!(backward(&y, std::slice::from_ref(&x), true).unwrap_err(), AutodiffError::HigherOrderDisabled);
        assert_eq!(backward(&y, &[x], false).unwrap()[0].item(), 2.0);
    }

    #[test]
    fn detach_semantics() {
        let tape = Tape::default();
        let x = tape.var(Tensor::scalar(1.5));
        let y = tape.var(Tensor::scalar(4.0));
        let d = x.detach();
        assert_eq!(d.item(), x.item());
        let p = d.mul(&y).unwrap();
        assert_eq!(backward(&p, std::slice::from_ref(&x), false).unwrap()[0].item(), 0.0);
        let s = x.add(&x.detach()).unwrap();
        assert_eq!(backward(&s, &[x], false).unwrap()[0].item(), 1.0);
    }

    #[test]
    fn sort_desc_examples() {
        let tape = Tape::default();
        let l = tape.var(Tensor::vector(vec![0.1, 0.9, 0.5]));
        let (s, perm) = l.sort_desc().unwrap();
        assert_eq!(s.value().data(), &[0.9, 0.5, 0.1]);
        assert_eq!(perm, vec![1, 2, 0]);
        let top = s.gather(&[0]).unwrap().sum().unwrap();
        let g = backward(&top, &[l], false).unwrap().remove(0);
        assert_eq!(g.value().data(), &[0.0, 1.0, 0.0]);
        let fd = fd_grad(
            &|p| {
                let t = Tape::default();
                let v = t.var(Tensor::vector(p.to_vec()));
                v.sort_desc().unwrap().0.value().data()[0]
            },
            &[0.1, 0.9, 0.5],
        );
        for (a, b) in g.value().data().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-9);
        }

        let c = tape.var(Tensor::vector(vec![2.0; 3]));
        assert_eq!(c.sort_desc().unwrap().1, vec![0, 1, 2]);
        let m = tape.var(Tensor::filled(&[2, 2], 1.0));
        assert!(m.sort_desc().is_err());
    }

    #[test]
    fn gather_inverse_is_identity() {
        let tape = Tape::default();
        let x = tape.var(Tensor::vector(vec![3.0, -1.0, 2.5, 7.0]));
        let perm = [2, 0, 3, 1];
        let mut inv = [0; 4];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let y = x.gather(&perm).unwrap().gather(&inv).unwrap();
        assert_eq!(y.value().data(), x.value().data());
        let w = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let s = y.mul(&w).unwrap().sum().unwrap();
        assert_eq!(backward(&s, &[x], false).unwrap()[0].value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    type Build = Box<dyn Fn(&Var) -> Var>;

    /// Scalar-valued compositions exercising each op, plus the input shape and
    /// value range keeping them away from kinks and domain edges.
    fn compositions() -> Vec<(&'static str, Build, Vec<usize>, f64, f64)> {
        let w = Tensor::matrix(3, 2, vec![0.3, -0.7, 1.1, 0.4, -0.2, 0.9]);
        let w2 = w.clone();
        vec![
            ("add", Box::new(|x: &Var| x.add(&x.square().unwrap()).unwrap().sum().unwrap()), vec![4], -2.0, 2.0),
            ("sub", Box::new(|x: &Var| x.sub(&x.exp().unwrap()).unwrap().sum().unwrap()), vec![4], -1.0, 1.0),
            ("mul", Box::new(|x: &Var| x.mul(&x.exp().unwrap()).unwrap().sum().unwrap()), vec![4], -1.0, 1.0),
            ("div", Box::new(|x: &Var| x.exp().unwrap().div(x).unwrap().sum().unwrap()), vec![3], 0.5, 2.0),
            ("scale", Box::new(|x: &Var| x.scale(-3.5).unwrap().square().unwrap().mean().unwrap()), vec![3], -1.0, 1.0),
            (
                "matmul",
                Box::new(move |x: &Var| {
                    let c = x.tape().constant(w.clone());
                    x.matmul(&c).unwrap().square().unwrap().sum().unwrap()
                }),
                vec![2, 3],
                -1.0,
                1.0,
            ),
            (
                "matmul-rhs",
                Box::new(move |x: &Var| {
                    let c = x.tape().constant(w2.transpose());
                    c.matmul(x).unwrap().exp().unwrap().sum().unwrap()
                }),
                vec![3, 2],
                -1.0,
                1.0,
            ),
            ("relu", Box::new(|x: &Var| x.relu().unwrap().square().unwrap().sum().unwrap()), vec![5], 0.1, 2.0),
            ("log", Box::new(|x: &Var| x.log().unwrap().mul(x).unwrap().sum().unwrap()), vec![3], 0.5, 3.0),
            ("exp", Box::new(|x: &Var| x.exp().unwrap().mean().unwrap()), vec![3], -1.0, 1.0),
            ("sqrt", Box::new(|x: &Var| x.sqrt().unwrap().mul(x).unwrap().sum().unwrap()), vec![3], 0.5, 3.0),
            (
                "softmax",
                Box::new(|x: &Var| {
                    let c = x.tape().constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]));
                    x.softmax().unwrap().mul(&c).unwrap().square().unwrap().sum().unwrap()
                }),
                vec![4],
                -2.0,
                2.0,
            ),
            (
                "gather",
                Box::new(|x: &Var| {
                    let c = x.tape().constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
                    x.gather(&[3, 0, 0]).unwrap().square().unwrap().mul(&c).unwrap().sum().unwrap()
                }),
                vec![4],
                -1.0,
                1.0,
            ),
            (
                "log-softmax-select",
                Box::new(|x: &Var| {
                    x.log_softmax_rows().unwrap().select_per_row(&[1, 0]).unwrap().sum().unwrap().neg().unwrap()
                }),
                vec![2, 3],
                -2.0,
                2.0,
            ),
            (
                "row-broadcasts",
                Box::new(|x: &Var| {
                    let r = x.sum_rows().unwrap().square().unwrap();
                    let c = x.sum_cols().unwrap().exp().unwrap();
                    let m = r.broadcast_rows(2).unwrap().mul(&c.broadcast_cols(3).unwrap()).unwrap();
                    m.sum().unwrap()
                }),
                vec![2, 3],
                -1.0,
                1.0,
            ),
            (
                "transpose-expand",
                Box::new(|x: &Var| {
                    let s = x.mean().unwrap().expand(&[3, 2]).unwrap();
                    x.transpose().unwrap().mul(&s).unwrap().sum().unwrap()
                }),
                vec![2, 3],
                -1.0,
                1.0,
            ),
        ]
    }

    #[test]
    fn first_order_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (name, build, shape, lo, hi) in compositions() {
            for _ in 0..5 {
                let n = shape.iter().product();
                let x = random(&mut rng, n, lo, hi);
                let tape = Tape::default();
                let v = tape.var(Tensor::new(shape.clone(), x.clone()));
                let y = build(&v);
                let g = backward(&y, &[v], false).unwrap().remove(0);
                let fd = fd_grad(&|p| eval(build.as_ref(), &shape, p), &x);
                for (a, b) in g.value().data().iter().zip(&fd) {
                    assert!(rel_close(*a, *b, 1e-5), "{name}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn second_order_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (name, build, shape, lo, hi) in compositions() {
            let n: usize = shape.iter().product();
            let x = random(&mut rng, n, lo, hi);
            let u = random(&mut rng, n, -1.0, 1.0);
            // directional second derivative: d/dx <grad f(x), u>
            let first = |p: &[f64]| {
                let tape = Tape::default();
                let v = tape.var(Tensor::new(shape.clone(), p.to_vec()));
                let g = backward(&build(&v), &[v], false).unwrap().remove(0);
                g.value().data().iter().zip(&u).map(|(a, b)| a * b).sum::<f64>()
            };
            let tape = Tape::default();
            let v = tape.var(Tensor::new(shape.clone(), x.clone()));
            let g = backward(&build(&v), std::slice::from_ref(&v), true).unwrap().remove(0);
            let dir = g.mul(&tape.constant(Tensor::new(shape.clone(), u.clone()))).unwrap().sum().unwrap();
            let h = backward(&dir, &[v], false).unwrap().remove(0);
            let fd = fd_grad(&first, &x);
            for (a, b) in h.value().data().iter().zip(&fd) {
                let ok = rel_close(*a, *b, 1e-4) || (a - b).abs() < 1e-7;
                assert!(ok, "{name}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn replay_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::default();
        let x = tape.var(Tensor::matrix(4, 3, random(&mut rng, 12, -1.0, 1.0)));
        let w = tape.var(Tensor::matrix(3, 2, random(&mut rng, 6, -1.0, 1.0)));
        let b = tape.var(Tensor::vector(random(&mut rng, 2, -1.0, 1.0)));
        let logits = x.matmul(&w).unwrap().add_row(&b).unwrap().relu().unwrap();
        let loss = logits.log_softmax_rows().unwrap().select_per_row(&[0, 1, 1, 0]).unwrap().neg().unwrap();
        let (sorted, _) = loss.sort_desc().unwrap();
        let r = sorted.mean().unwrap();
        let g = backward(&r, &[w.clone(), b], true).unwrap();
        let gg = g[0].square().unwrap().sum().unwrap();
        backward(&gg, &[w], false).unwrap();
        let stored = tape.values();
        let replayed = tape.replay().unwrap();
        assert_eq!(stored.len(), replayed.len());
        for (s, r) in stored.iter().zip(&replayed) {
            let sb: Vec<u64> = s.data().iter().map(|v| v.to_bits()).collect();
            let rb: Vec<u64> = r.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(sb, rb);
        }
    }

    #[test]
    fn unreachable_wrt_gets_zeros() {
        let tape = Tape::default();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.var(Tensor::scalar(3.0));
        let s = x.sum().unwrap();
        let g = backward(&s, std::slice::from_ref(&y), false).unwrap();
        assert_eq!(g[0].item(), 0.0);
        assert!(!tape.depends_on(&s, &y));
        assert!(tape.depends_on(&s, &x));
    }
}
