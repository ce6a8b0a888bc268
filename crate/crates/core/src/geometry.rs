//! Small fixed-size linear algebra: 3-vectors, 3×3 matrices, rigid transforms
//! and a one-sided Jacobi SVD for 3×3 matrices.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::Real;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(
    from = "[T; 3]",
    into = "[T; 3]",
    bound(serialize = "T: Copy + Serialize", deserialize = "T: Deserialize<'de>")
)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T> From<[T; 3]> for Vec3<T> {
    fn from([x, y, z]: [T; 3]) -> Self {
        Vec3 { x, y, z }
    }
}

impl<T> From<Vec3<T>> for [T; 3] {
    fn from(v: Vec3<T>) -> Self {
        [v.x, v.y, v.z]
    }
}

impl<T: Real> Vec3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Vec3 { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(
            U::lit(self.x.as_f64()),
            U::lit(self.y.as_f64()),
            U::lit(self.z.as_f64()),
        )
    }
}

impl<T: Real> Index<usize> for Vec3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> SubAssign for Vec3<T> {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn zero() -> Self {
        Mat3 {
            m: [[T::zero(); 3]; 3],
        }
    }

    pub fn identity() -> Self {
        let mut r = Self::zero();
        for i in 0..3 {
            r.m[i][i] = T::one();
        }
        r
    }

    pub fn from_rows(rows: [[T; 3]; 3]) -> Self {
        Mat3 { m: rows }
    }

    pub fn from_columns(c0: Vec3<T>, c1: Vec3<T>, c2: Vec3<T>) -> Self {
        let mut r = Self::zero();
        for (j, c) in [c0, c1, c2].into_iter().enumerate() {
            for i in 0..3 {
                r.m[i][j] = c[i];
            }
        }
        r
    }

    pub fn column(&self, j: usize) -> Vec3<T> {
        Vec3::new(self.m[0][j], self.m[1][j], self.m[2][j])
    }

    /// `a bᵀ`
    pub fn outer(a: Vec3<T>, b: Vec3<T>) -> Self {
        let mut r = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = a[i] * b[j];
            }
        }
        r
    }

    /// Rotation of `angle` radians about `axis` (Rodrigues). The axis is
    /// normalized; a zero axis gives the identity.
    pub fn rotation(axis: Vec3<T>, angle: T) -> Self {
        let len = axis.norm();
        if len == T::zero() {
            return Self::identity();
        }
        let axis = axis * (T::one() / len);
        let (s, c) = angle.sin_cos();
        let k = Mat3::from_rows([
            [T::zero(), -axis.z, axis.y],
            [axis.z, T::zero(), -axis.x],
            [-axis.y, axis.x, T::zero()],
        ]);
        Self::identity() + k.scale(s) + (k * k).scale(T::one() - c)
    }

    pub fn transpose(&self) -> Self {
        let mut r = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = self.m[j][i];
            }
        }
        r
    }

    pub fn det(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn scale(&self, s: T) -> Self {
        let mut r = *self;
        r.m.iter_mut().flatten().for_each(|x| *x = *x * s);
        r
    }

    pub fn frobenius_distance(&self, o: &Self) -> T {
        let mut acc = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let d = self.m[i][j] - o.m[i][j];
                acc = acc + d * d;
            }
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|x| x.is_finite())
    }

    /// `max(‖RᵀR − I‖_max, |det R − 1|)`
    pub fn rotation_defect(&self) -> T {
        let g = self.transpose() * *self;
        let mut worst = (self.det() - T::one()).abs();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((g.m[i][j] - target).abs());
            }
        }
        worst
    }
}

impl<T: Real> Add for Mat3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut r = self;
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = r.m[i][j] + o.m[i][j];
            }
        }
        r
    }
}

impl<T: Real> Mul for Mat3<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut r = Self::zero();
        for i in 0..3 {
            for j in 0..3 {
                r.m[i][j] = self.m[i][0] * o.m[0][j] + self.m[i][1] * o.m[1][j] + self.m[i][2] * o.m[2][j];
            }
        }
        r
    }
}

impl<T: Real> Mul<Vec3<T>> for Mat3<T> {
    type Output = Vec3<T>;
    fn mul(self, v: Vec3<T>) -> Vec3<T> {
        let m = &self.m;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }
}

/// An element of SE(3) acting as `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<T> {
    pub rotation: Mat3<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::identity(),
            translation: Vec3::zero(),
        }
    }

    pub fn new(rotation: Mat3<T>, translation: Vec3<T>) -> Self {
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self::new(Mat3::identity(), t)
    }

    pub fn apply(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    /// Rotation Frobenius distance and translation distance.
    pub fn distance(&self, other: &Self) -> (T, T) {
        (
            self.rotation.frobenius_distance(&other.rotation),
            (self.translation - other.translation).norm(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.is_finite() && self.translation.is_finite()
    }
}

/// `A = U diag(σ) Vᵀ` with σ descending and U, V orthogonal.
#[derive(Clone, Copy, Debug)]
pub struct Svd3<T> {
    pub u: Mat3<T>,
    pub sigma: [T; 3],
    pub v: Mat3<T>,
}

/// One-sided (Hestenes) Jacobi SVD. Columns of `A V` are orthogonalized by plane
/// rotations; their norms are the singular values.
pub fn svd3<T: Real>(a: &Mat3<T>) -> Svd3<T> {
    const MAX_SWEEPS: usize = 64;
    let mut w = *a;
    let mut v = Mat3::<T>::identity();
    let eps = T::epsilon();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let cp = w.column(p);
            let cq = w.column(q);
            let alpha = cp.norm_squared();
            let beta = cq.norm_squared();
            let gamma = cp.dot(cq);
            if gamma == T::zero() || gamma.abs() <= eps * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (gamma + gamma);
            let sign = if zeta >= T::zero() { T::one() } else { -T::one() };
            let t = sign / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
            let c = T::one() / (T::one() + t * t).sqrt();
            let s = c * t;
            for mat in [&mut w, &mut v] {
                for i in 0..3 {
                    let xp = mat.m[i][p];
                    let xq = mat.m[i][q];
                    mat.m[i][p] = c * xp - s * xq;
                    mat.m[i][q] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order = [0usize, 1, 2];
    let norms = [w.column(0).norm(), w.column(1).norm(), w.column(2).norm()];
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap_or(std::cmp::Ordering::Equal));
    let sigma = [norms[order[0]], norms[order[1]], norms[order[2]]];
    let v = Mat3::from_columns(v.column(order[0]), v.column(order[1]), v.column(order[2]));

    let floor = sigma[0] * eps * T::lit(8.0);
    let unit = |i: usize| {
        let c = w.column(order[i]);
        c * (T::one() / norms[order[i]])
    };
    let u0 = if sigma[0] > T::zero() {
        unit(0)
    } else {
        Vec3::new(T::one(), T::zero(), T::zero())
    };
    let u1 = if sigma[1] > floor && sigma[1] > T::zero() {
        unit(1)
    } else {
        any_orthogonal(u0)
    };
    let u2 = if sigma[2] > floor && sigma[2] > T::zero() {
        unit(2)
    } else {
        u0.cross(u1)
    };
    Svd3 {
        u: Mat3::from_columns(u0, u1, u2),
        sigma,
        v,
    }
}

fn any_orthogonal<T: Real>(u: Vec3<T>) -> Vec3<T> {
    let (ax, ay, az) = (u.x.abs(), u.y.abs(), u.z.abs());
    let e = if ax <= ay && ax <= az {
        Vec3::new(T::one(), T::zero(), T::zero())
    } else if ay <= az {
        Vec3::new(T::zero(), T::one(), T::zero())
    } else {
        Vec3::new(T::zero(), T::zero(), T::one())
    };
    let c = u.cross(e);
    c * (T::one() / c.norm())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(s: &Svd3<f64>) -> Mat3<f64> {
        let mut d = Mat3::zero();
        for i in 0..3 {
            d.m[i][i] = s.sigma[i];
        }
        s.u * d * s.v.transpose()
    }

    #[test]
    fn svd_reconstructs_general_matrix() {
        let a = Mat3::from_rows([[2.0, -1.0, 0.5], [0.3, 4.0, 1.0], [-2.0, 0.0, 1.5]]);
        let s = svd3(&a);
        assert!(reconstruct(&s).frobenius_distance(&a) < 1e-13);
        assert!(s.sigma[0] >= s.sigma[1] && s.sigma[1] >= s.sigma[2]);
        assert!((s.u.transpose() * s.u).frobenius_distance(&Mat3::identity()) < 1e-13);
        assert!((s.v.transpose() * s.v).frobenius_distance(&Mat3::identity()) < 1e-13);
    }

    #[test]
    fn svd_completes_basis_for_rank_one() {
        let a = Mat3::outer(Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.0, 2.0));
        let s = svd3(&a);
        assert!(s.sigma[1] < 1e-12 && s.sigma[2] < 1e-12);
        assert!(reconstruct(&s).frobenius_distance(&a) < 1e-12);
        assert!((s.u.transpose() * s.u).frobenius_distance(&Mat3::identity()) < 1e-12);
    }

    #[test]
    fn svd_of_zero_is_orthogonal() {
        let s = svd3(&Mat3::<f64>::zero());
        assert_eq!(s.sigma, [0.0; 3]);
        assert!((s.u.transpose() * s.u).frobenius_distance(&Mat3::identity()) < 1e-15);
    }

    #[test]
    fn transform_inverse_and_compose() {
        let r = Mat3::rotation(Vec3::new(0.0, 0.6, 0.8), 0.7);
        let t = RigidTransform::new(r, Vec3::new(1.0, -2.0, 0.5));
        let p = Vec3::new(0.3, 0.2, -0.9);
        let back = t.inverse().apply(t.apply(p));
        assert!((back - p).norm() < 1e-14);
        let id = t.compose(&t.inverse());
        let (dr, dt) = id.distance(&RigidTransform::identity());
        assert!(dr < 1e-14 && dt < 1e-14);
        assert!(r.rotation_defect() < 1e-14);
    }
}
