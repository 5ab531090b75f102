use super::param::ParamVector;
use super::scalar::{Dual, Scalar};
use super::tape::{Adjoints, ParamNodes, Tape};
use super::{DiffError, NodeId, Result};

/// Scalar-valued function of one parameter vector, buildable on any tape.
pub trait DiffFn1 {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, x: &ParamNodes) -> Result<NodeId>;
}

/// Scalar-valued function of two parameter vectors.
pub trait DiffFn2 {
    fn build<S: Scalar>(&self, tape: &mut Tape<S>, x: &ParamNodes, y: &ParamNodes) -> Result<NodeId>;
}

/// Read per-segment adjoint values back into a vector with `nodes`' layout.
/// Segments without gradient flow come back as zeros. Non-finite entries fail
/// with the segment name.
pub fn read_param_grads<S: Scalar>(
    tape: &Tape<S>,
    adj: &Adjoints,
    nodes: &ParamNodes,
) -> Result<ParamVector> {
    read_parts(tape, adj, nodes, false)
}

/// Tangent parts of per-segment adjoints (forward-over-reverse results).
pub fn read_param_tangents<S: Scalar>(
    tape: &Tape<S>,
    adj: &Adjoints,
    nodes: &ParamNodes,
) -> Result<ParamVector> {
    read_parts(tape, adj, nodes, true)
}

fn read_parts<S: Scalar>(
    tape: &Tape<S>,
    adj: &Adjoints,
    nodes: &ParamNodes,
    tangents: bool,
) -> Result<ParamVector> {
    let mut out = ParamVector::zeros(nodes.layout.clone());
    for i in 0..nodes.layout.num_segments() {
        let seg = nodes.layout.segment(i);
        if let Some(gid) = adj.of(nodes.ids[i]) {
            let buf = tape.value(gid);
            let vals = if tangents { buf.tangent_vec() } else { buf.primal_vec() };
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(DiffError::NumericFault {
                    segment: seg.name.clone(),
                    context: "gradient extraction".into(),
                });
            }
            out.segment_mut(&seg.name).copy_from_slice(&vals);
        }
    }
    Ok(out)
}

/// Reverse-mode gradient of `f` at `x`.
pub fn grad<F: DiffFn1>(f: &F, x: &ParamVector) -> Result<ParamVector> {
    grad_with_value(f, x).map(|(g, _)| g)
}

/// Gradient plus the function value at `x`.
pub fn grad_with_value<F: DiffFn1>(f: &F, x: &ParamVector) -> Result<(ParamVector, f64)> {
    let mut tape: Tape<f64> = Tape::new();
    let leaves = tape.param_leaves(x, None, true)?;
    let root = f.build(&mut tape, &leaves)?;
    let value = tape.scalar_value(root)?;
    let adj = tape.backward(root)?;
    let g = read_param_grads(&tape, &adj, &leaves)?;
    Ok((g, value))
}

/// Hessian-vector product H(x) * v, computed as the directional derivative of
/// the reverse-mode gradient along `v` (forward-over-reverse). The Hessian is
/// never materialized.
pub fn hvp<F: DiffFn1>(f: &F, x: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    if !x.same_layout(v) {
        return Err(DiffError::LayoutMismatch("hvp direction must share x's layout".into()));
    }
    let mut tape: Tape<Dual> = Tape::new();
    let leaves = tape.param_leaves(x, Some(v), true)?;
    let root = f.build(&mut tape, &leaves)?;
    let adj = tape.backward(root)?;
    read_param_tangents(&tape, &adj, &leaves)
}

/// Mixed second-order partial: the gradient over `y` of <grad_x f(x, y), lambda>
/// with `lambda` held constant. Computed by seeding `x` with tangent `lambda`
/// and reading the tangent of the `y`-gradient, which equals the same
/// contraction for twice-differentiable `f`.
pub fn mixed_partial<F: DiffFn2>(
    f: &F,
    x: &ParamVector,
    y: &ParamVector,
    lambda: &ParamVector,
) -> Result<ParamVector> {
    if !x.same_layout(lambda) {
        return Err(DiffError::LayoutMismatch("lambda must share x's layout".into()));
    }
    let mut tape: Tape<Dual> = Tape::new();
    let x_leaves = tape.param_leaves(x, Some(lambda), true)?;
    let y_leaves = tape.param_leaves(y, None, true)?;
    let root = f.build(&mut tape, &x_leaves, &y_leaves)?;
    let adj = tape.backward(root)?;
    read_param_tangents(&tape, &adj, &y_leaves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{ParamLayout, SegmentSpec};

    fn vec2(a: f64, b: f64) -> ParamVector {
        let layout = ParamLayout::new(vec![SegmentSpec::new("x", 1, 2)]);
        ParamVector::from_flat(layout, vec![a, b]).unwrap()
    }

    fn scalar_param(name: &str, v: f64) -> ParamVector {
        let layout = ParamLayout::new(vec![SegmentSpec::new(name, 1, 1)]);
        ParamVector::from_flat(layout, vec![v]).unwrap()
    }

    /// f(x) = 0.5 * ||x||^2
    struct HalfNormSq;
    impl DiffFn1 for HalfNormSq {
        fn build<S: Scalar>(&self, t: &mut Tape<S>, x: &ParamNodes) -> Result<NodeId> {
            let xs = x.id("x");
            let sq = t.mul(xs, xs);
            let s = t.sum_all(sq);
            Ok(t.scale(s, 0.5))
        }
    }

    /// f(x) = x1^2 * x2
    struct Cubic;
    impl DiffFn1 for Cubic {
        fn build<S: Scalar>(&self, t: &mut Tape<S>, x: &ParamNodes) -> Result<NodeId> {
            let xs = x.id("x");
            let x1 = t.slice_cols(xs, 0, 1);
            let x2 = t.slice_cols(xs, 1, 1);
            let sq = t.mul(x1, x1);
            let p = t.mul(sq, x2);
            Ok(t.sum_all(p))
        }
    }

    struct ConstFn;
    impl DiffFn1 for ConstFn {
        fn build<S: Scalar>(&self, t: &mut Tape<S>, _x: &ParamNodes) -> Result<NodeId> {
            Ok(t.constant_scalar(3.25))
        }
    }

    /// f(x, y) = y * x^2 / 2 with scalar segments.
    struct Bilinear;
    impl DiffFn2 for Bilinear {
        fn build<S: Scalar>(&self, t: &mut Tape<S>, x: &ParamNodes, y: &ParamNodes) -> Result<NodeId> {
            let xs = x.id("theta");
            let ys = y.id("eta");
            let sq = t.mul(xs, xs);
            let p = t.mul(ys, sq);
            let s = t.sum_all(p);
            Ok(t.scale(s, 0.5))
        }
    }

    #[test]
    fn grad_of_quadratic_is_identity() {
        let x = vec2(1.0, 2.0);
        let g = grad(&HalfNormSq, &x).unwrap();
        assert_eq!(g.data(), &[1.0, 2.0]);
    }

    #[test]
    fn grad_of_cubic_matches_hand_oracle() {
        // By hand: grad = (2 x1 x2, x1^2) = (2, 1) at (1, 1).
        let g = grad(&Cubic, &vec2(1.0, 1.0)).unwrap();
        assert_eq!(g.data(), &[2.0, 1.0]);
    }

    #[test]
    fn grad_of_constant_is_zero_vector() {
        let g = grad(&ConstFn, &vec2(4.0, -2.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hvp_of_quadratic_is_direction() {
        // H = I so H v = v for any v.
        let x = vec2(0.3, -0.7);
        let v = vec2(2.5, -1.5);
        let hv = hvp(&HalfNormSq, &x, &v).unwrap();
        assert_eq!(hv.data(), &[2.5, -1.5]);
    }

    #[test]
    fn hvp_of_cubic_matches_hand_hessian() {
        // H = [[2 x2, 2 x1], [2 x1, 0]] = [[2,2],[2,0]] at (1,1); v = (1,0).
        let hv = hvp(&Cubic, &vec2(1.0, 1.0), &vec2(1.0, 0.0)).unwrap();
        assert_eq!(hv.data(), &[2.0, 2.0]);
    }

    #[test]
    fn hvp_with_zero_direction_is_zero() {
        let hv = hvp(&Cubic, &vec2(1.0, 1.0), &vec2(0.0, 0.0)).unwrap();
        assert_eq!(hv.data(), &[0.0, 0.0]);
    }

    #[test]
    fn hvp_rejects_layout_mismatch() {
        let x = vec2(1.0, 1.0);
        let bad = scalar_param("other", 1.0);
        assert!(matches!(hvp(&Cubic, &x, &bad), Err(DiffError::LayoutMismatch(_))));
    }

    #[test]
    fn hvp_is_linear_in_direction() {
        let x = vec2(0.4, 1.3);
        let v = vec2(0.2, -0.9);
        let w = vec2(1.1, 0.7);
        let (a, b) = (1.7, -0.6);
        let mut avbw = v.clone();
        avbw.scale(a);
        avbw.add_scaled(&w, b).unwrap();
        let lhs = hvp(&Cubic, &x, &avbw).unwrap();
        let hv = hvp(&Cubic, &x, &v).unwrap();
        let hw = hvp(&Cubic, &x, &w).unwrap();
        let mut rhs = hv.clone();
        rhs.scale(a);
        rhs.add_scaled(&hw, b).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data().iter()) {
            assert!((l - r).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixed_partial_matches_hand_oracle() {
        // f(x,y) = y x^2/2: grad_x f = y x, so grad_y <grad_x f, l> = x l = 6.
        let x = scalar_param("theta", 2.0);
        let y = scalar_param("eta", 5.0);
        let l = scalar_param("theta", 3.0);
        let m = mixed_partial(&Bilinear, &x, &y, &l).unwrap();
        assert_eq!(m.data(), &[6.0]);
    }

    #[test]
    fn mixed_partial_zero_cases() {
        // lambda = 0 gives a zero vector.
        let x = scalar_param("theta", 2.0);
        let y = scalar_param("eta", 5.0);
        let zero = scalar_param("theta", 0.0);
        let m = mixed_partial(&Bilinear, &x, &y, &zero).unwrap();
        assert_eq!(m.data(), &[0.0]);

        // f independent of y: zero vector with y's layout.
        struct NoY;
        impl DiffFn2 for NoY {
            fn build<S: Scalar>(&self, t: &mut Tape<S>, x: &ParamNodes, _y: &ParamNodes) -> Result<NodeId> {
                let xs = x.id("theta");
                let sq = t.mul(xs, xs);
                Ok(t.sum_all(sq))
            }
        }
        let l = scalar_param("theta", 1.0);
        let m = mixed_partial(&NoY, &x, &y, &l).unwrap();
        assert_eq!(m.data(), &[0.0]);
    }

    #[test]
    fn grad_reports_numeric_fault_with_segment_name() {
        struct LogFn;
        impl DiffFn1 for LogFn {
            fn build<S: Scalar>(&self, t: &mut Tape<S>, x: &ParamNodes) -> Result<NodeId> {
                let xs = x.id("x");
                let l = t.ln(xs);
                Ok(t.sum_all(l))
            }
        }
        let x = vec2(-1.0, 1.0);
        match grad(&LogFn, &x) {
            Err(DiffError::NumericFault { .. }) => {}
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }
}
