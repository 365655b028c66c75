//! Pinhole cameras, Gaussian covariance construction and the EWA projection
//! of a 3D Gaussian onto the image plane, together with the reverse-mode
//! derivatives of each step.
//!
//! Conventions: camera frame is x right, y down, z forward. Pixel `(i, j)`
//! covers `[i, i+1) x [j, j+1)` and is sampled at its center `(i+0.5, j+0.5)`.
//! Quaternions are stored `(w, x, y, z)`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector2, Vector3, Vector4};
use crate::error::{Error, Result};

/// Camera-frame depth below which a point is culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic variance (px²) added to every projected covariance.
pub const BLUR_FLOOR: f64 = 0.3;
/// Fraction of the image size by which the visibility window extends past each edge.
pub const GUARD_BAND: f64 = 0.3;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Matrix4<f64>,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        world_to_camera: Matrix4<f64>,
    ) -> Result<Self> {
        let cam = Camera {
            id,
            width,
            height,
            fx,
            fy,
            cx,
            cy,
            world_to_camera,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Builds a camera at `eye` looking at `target`; `up` is the world up direction.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        id: u32,
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = (-up).cross(&forward).normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(rot * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera::new(
            id,
            width,
            height,
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            m,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::InvalidCamera {
            id: self.id,
            reason,
        };
        if self.width == 0 || self.height == 0 {
            return Err(fail("image dimensions must be positive".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(fail(format!("focal lengths must be positive (fx={}, fy={})", self.fx, self.fy)));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(fail(format!(
                "principal point ({}, {}) outside the image",
                self.cx, self.cy
            )));
        }
        if self.world_to_camera.iter().any(|v| !v.is_finite()) {
            return Err(fail("pose contains non-finite entries".into()));
        }
        let r = self.rotation();
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        if ortho > ORTHONORMAL_TOL {
            return Err(fail(format!("rotation block is not orthonormal (error {ortho:e})")));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(fail(format!("rotation determinant is {det}, expected +1")));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    /// Pinhole projection of a camera-frame point. Assumes `z > 0`.
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Jacobian of the pinhole projection at a camera-frame point.
    pub fn projection_jacobian(&self, pc: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / pc.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * pc.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * pc.y * iz2,
        )
    }
}

/// Scale (log-domain) and orientation of one anisotropic Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianShape {
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
}

impl GaussianShape {
    pub fn new(log_scale: Vector3<f64>, rotation: Vector4<f64>) -> Self {
        GaussianShape { log_scale, rotation }
    }

    pub fn isotropic(scale: f64) -> Self {
        GaussianShape {
            log_scale: Vector3::repeat(scale.ln()),
            rotation: Vector4::new(1.0, 0.0, 0.0, 0.0),
        }
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }
}

/// Normalizes a quaternion, falling back to the identity for a zero vector.
pub fn normalize_quaternion(q: &Vector4<f64>) -> Vector4<f64> {
    let n = q.norm();
    if n < 1e-12 {
        Vector4::new(1.0, 0.0, 0.0, 0.0)
    } else {
        q / n
    }
}

/// Pulls a gradient on a normalized quaternion back to the raw quaternion.
pub fn normalize_quaternion_backward(raw: &Vector4<f64>, d_unit: &Vector4<f64>) -> Vector4<f64> {
    let n = raw.norm();
    if n < 1e-12 {
        return Vector4::zeros();
    }
    let unit = raw / n;
    (d_unit - unit * unit.dot(d_unit)) / n
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quaternion_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Contracts a gradient on the rotation matrix with d(R)/d(q).
fn quaternion_to_rotation_backward(q: &Vector4<f64>, dr: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = |r: usize, c: usize| dr[(r, c)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    Vector4::new(dw, dx, dy, dz)
}

/// `Σ = R diag(exp(s))² Rᵀ`, with the quaternion re-normalized first.
pub fn build_covariance(shape: &GaussianShape) -> Matrix3<f64> {
    let r = quaternion_to_rotation(&normalize_quaternion(&shape.rotation));
    let m = r * Matrix3::from_diagonal(&shape.scale());
    let sigma = m * m.transpose();
    // Exact symmetry regardless of rounding in the product.
    (sigma + sigma.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShapeGrad {
    pub log_scale: Vector3<f64>,
    pub rotation: Vector4<f64>,
}

/// Reverse-mode derivative of [`build_covariance`]. The rotation gradient is
/// taken with respect to the raw (unnormalized) quaternion, i.e. it is tangent
/// to the unit sphere.
pub fn build_covariance_backward(shape: &GaussianShape, d_sigma: &Matrix3<f64>) -> ShapeGrad {
    let unit = normalize_quaternion(&shape.rotation);
    let r = quaternion_to_rotation(&unit);
    let s = shape.scale();
    let m = r * Matrix3::from_diagonal(&s);
    let g = d_sigma + d_sigma.transpose();
    let dm = g * m;
    let dr = dm * Matrix3::from_diagonal(&s);
    let mut d_log_scale = Vector3::zeros();
    for i in 0..3 {
        let ds = r.column(i).dot(&dm.column(i));
        d_log_scale[i] = ds * s[i];
    }
    let d_unit = quaternion_to_rotation_backward(&unit, &dr);
    ShapeGrad {
        log_scale: d_log_scale,
        rotation: normalize_quaternion_backward(&shape.rotation, &d_unit),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected2D {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth_cam: f64,
    pub visible: bool,
}

/// EWA projection: perspective mean, `J W Σ Wᵀ Jᵀ` covariance plus the blur
/// floor, and visibility against the near plane and guard band.
pub fn project_gaussian(mean3d: &Vector3<f64>, sigma: &Matrix3<f64>, cam: &Camera) -> Projected2D {
    let pc = cam.to_camera(mean3d);
    if pc.z <= NEAR_PLANE {
        return Projected2D {
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::identity() * BLUR_FLOOR,
            depth_cam: pc.z,
            visible: false,
        };
    }
    let mean2d = cam.project_camera_point(&pc);
    let w = cam.rotation();
    let j = cam.projection_jacobian(&pc);
    let t = j * w;
    let mut cov2d = t * sigma * t.transpose();
    cov2d = (cov2d + cov2d.transpose()) * 0.5;
    cov2d[(0, 0)] += BLUR_FLOOR;
    cov2d[(1, 1)] += BLUR_FLOOR;

    let (wf, hf) = (cam.width as f64, cam.height as f64);
    let in_band = mean2d.x >= -GUARD_BAND * wf
        && mean2d.x <= (1.0 + GUARD_BAND) * wf
        && mean2d.y >= -GUARD_BAND * hf
        && mean2d.y <= (1.0 + GUARD_BAND) * hf;
    let det = cov2d.determinant();
    let visible = in_band && det > 0.0 && cov2d.iter().all(|v| v.is_finite());
    Projected2D {
        mean2d,
        cov2d,
        depth_cam: pc.z,
        visible,
    }
}

/// Upstream gradients of a [`Projected2D`]. `cov2d` is the full (symmetric) matrix gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGrad {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub depth_cam: f64,
}

impl Default for ProjectedGrad {
    fn default() -> Self {
        ProjectedGrad {
            mean2d: Vector2::zeros(),
            cov2d: Matrix2::zeros(),
            depth_cam: 0.0,
        }
    }
}

/// Reverse-mode derivative of [`project_gaussian`] with respect to the world
/// mean and the 3D covariance. Only meaningful for visible projections.
pub fn project_gaussian_backward(
    mean3d: &Vector3<f64>,
    sigma: &Matrix3<f64>,
    cam: &Camera,
    grad: &ProjectedGrad,
) -> (Vector3<f64>, Matrix3<f64>) {
    let pc = cam.to_camera(mean3d);
    let w = cam.rotation();
    let j = cam.projection_jacobian(&pc);
    let cov_cam = w * sigma * w.transpose();
    let g = grad.cov2d;

    let d_sigma = w.transpose() * (j.transpose() * g * j) * w;
    let dj = (g + g.transpose()) * j * cov_cam;

    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let (fx, fy) = (cam.fx, cam.fy);

    let mut d_pc = Vector3::new(0.0, 0.0, grad.depth_cam);
    // mean2d = (fx x/z + cx, fy y/z + cy)
    d_pc.x += grad.mean2d.x * fx * iz;
    d_pc.y += grad.mean2d.y * fy * iz;
    d_pc.z += -grad.mean2d.x * fx * x * iz2 - grad.mean2d.y * fy * y * iz2;
    // Jacobian entries as functions of the camera-frame point.
    d_pc.z += dj[(0, 0)] * (-fx * iz2);
    d_pc.x += dj[(0, 2)] * (-fx * iz2);
    d_pc.z += dj[(0, 2)] * (2.0 * fx * x * iz3);
    d_pc.z += dj[(1, 1)] * (-fy * iz2);
    d_pc.y += dj[(1, 2)] * (-fy * iz2);
    d_pc.z += dj[(1, 2)] * (2.0 * fy * y * iz3);

    (w.transpose() * d_pc, d_sigma)
}

/// Largest eigenvalue of a symmetric 2×2 matrix.
pub fn max_eigenvalue_2x2(m: &Matrix2<f64>) -> f64 {
    let mid = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    mid + (mid * mid - det).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_camera(fx: f64, fy: f64) -> Camera {
        Camera::new(0, 100, 100, fx, fy, 50.0, 50.0, Matrix4::identity()).unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let q = normalize_quaternion(&Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)));
        quaternion_to_rotation(&q)
    }

    fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
        let r = random_rotation(rng);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        Camera::new(
            1,
            64,
            48,
            rng.random_range(40.0..90.0),
            rng.random_range(40.0..90.0),
            rng.random_range(20.0..40.0),
            rng.random_range(20.0..30.0),
            m,
        )
        .unwrap()
    }

    /// A world mean in front of the camera near its optical axis.
    fn random_mean(rng: &mut ChaCha8Rng, cam: &Camera) -> Vector3<f64> {
        let pc = Vector3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(1.5..4.0),
        );
        cam.rotation().transpose() * (pc - cam.translation())
    }

    fn random_shape(rng: &mut ChaCha8Rng) -> GaussianShape {
        GaussianShape::new(
            Vector3::from_fn(|_, _| rng.random_range(-3.0..-0.5)),
            Vector4::from_fn(|_, _| rng.random_range(-1.0..1.0)),
        )
    }

    #[test]
    fn identity_shape_gives_identity_covariance() {
        let sigma = build_covariance(&GaussianShape::isotropic(1.0));
        assert!((sigma - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn axis_aligned_scale() {
        let shape = GaussianShape::new(
            Vector3::new(2f64.ln(), 0.0, 0.0),
            Vector4::new(1.0, 0.0, 0.0, 0.0),
        );
        let sigma = build_covariance(&shape);
        assert!((sigma - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).abs().max() < 1e-12);
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        // Oracle: explicit rotation matrix of +90° about z, multiplied out by hand.
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let expected = rz * Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0)) * rz.transpose();
        assert!((expected - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0))).abs().max() < 1e-15);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let shape = GaussianShape::new(Vector3::new(2f64.ln(), 0.0, 0.0), Vector4::new(h, 0.0, 0.0, h));
        assert!((build_covariance(&shape) - expected).abs().max() < 1e-12);
    }

    #[test]
    fn covariance_is_symmetric_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let sigma = build_covariance(&random_shape(&mut rng));
            assert!((sigma - sigma.transpose()).abs().max() <= 1e-12);
            let eig = sigma.symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e >= -1e-15), "{eig:?}");
        }
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let cam = test_camera(100.0, 100.0);
        let p = project_gaussian(&Vector3::new(0.0, 0.0, 1.0), &(Matrix3::identity() * 1e-4), &cam);
        assert!(p.visible);
        assert!((p.mean2d - Vector2::new(50.0, 50.0)).norm() < 1e-12);
        assert_eq!(p.depth_cam, 1.0);
    }

    #[test]
    fn point_source_hits_blur_floor() {
        let cam = test_camera(100.0, 100.0);
        let p = project_gaussian(&Vector3::new(0.1, -0.2, 2.0), &(Matrix3::identity() * 1e-14), &cam);
        assert!((p.cov2d - Matrix2::identity() * BLUR_FLOOR).abs().max() < 1e-8);
    }

    #[test]
    fn behind_near_plane_and_outside_guard_band_are_invisible() {
        let cam = test_camera(100.0, 100.0);
        let sigma = Matrix3::identity() * 0.01;
        assert!(!project_gaussian(&Vector3::new(0.0, 0.0, 0.005), &sigma, &cam).visible);
        assert!(!project_gaussian(&Vector3::new(0.0, 0.0, -1.0), &sigma, &cam).visible);
        // x = 1 at z = 1 lands at u = 150, beyond 130.
        assert!(!project_gaussian(&Vector3::new(1.0, 0.0, 1.0), &sigma, &cam).visible);
        assert!(project_gaussian(&Vector3::new(0.75, 0.0, 1.0), &sigma, &cam).visible);
    }

    #[test]
    fn projected_covariance_matches_numeric_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let cam = random_camera(&mut rng);
            let mean = random_mean(&mut rng, &cam);
            let sigma = build_covariance(&random_shape(&mut rng));
            let proj = project_gaussian(&mean, &sigma, &cam);

            // Numeric Jacobian of world point -> pixel, by central differences.
            let h = 1e-6;
            let mut jw = nalgebra::Matrix2x3::zeros();
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let plus = cam.project_camera_point(&cam.to_camera(&(mean + e)));
                let minus = cam.project_camera_point(&cam.to_camera(&(mean - e)));
                jw.set_column(k, &((plus - minus) / (2.0 * h)));
            }
            let expected = jw * sigma * jw.transpose() + Matrix2::identity() * BLUR_FLOOR;
            let rel = (proj.cov2d - expected).abs().max() / expected.abs().max();
            assert!(rel < 1e-4, "relative error {rel}");
        }
    }

    #[test]
    fn doubling_focal_length_scales_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mean = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(1.0..3.0),
            );
            let sigma = build_covariance(&random_shape(&mut rng));
            let a = project_gaussian(&mean, &sigma, &test_camera(40.0, 30.0));
            let b = project_gaussian(&mean, &sigma, &test_camera(80.0, 60.0));
            let c = Vector2::new(50.0, 50.0);
            assert!(((b.mean2d - c) - (a.mean2d - c) * 2.0).norm() < 1e-10);
            let floor = Matrix2::identity() * BLUR_FLOOR;
            let diff = (b.cov2d - floor) - (a.cov2d - floor) * 4.0;
            assert!(diff.abs().max() < 1e-10 * (b.cov2d.abs().max() + 1.0));
        }
    }

    /// Scalar probe `L = a·mean2d + <B, cov2d> + c·depth` used for gradient checks.
    struct Probe {
        a: Vector2<f64>,
        b: Matrix2<f64>,
        c: f64,
    }

    impl Probe {
        fn eval(&self, mean: &Vector3<f64>, shape: &GaussianShape, cam: &Camera) -> f64 {
            let p = project_gaussian(mean, &build_covariance(shape), cam);
            self.a.dot(&p.mean2d) + self.b.component_mul(&p.cov2d).sum() + self.c * p.depth_cam
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let cam = random_camera(&mut rng);
            let mean = random_mean(&mut rng, &cam);
            let shape = random_shape(&mut rng);
            let probe = Probe {
                a: Vector2::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                b: Matrix2::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                c: rng.random_range(-1.0..1.0),
            };
            let sigma = build_covariance(&shape);
            let grad = ProjectedGrad {
                mean2d: probe.a,
                cov2d: probe.b,
                depth_cam: probe.c,
            };
            let (d_mean, d_sigma) = project_gaussian_backward(&mean, &sigma, &cam, &grad);
            let d_shape = build_covariance_backward(&shape, &d_sigma);

            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let fd = (probe.eval(&(mean + e), &shape, &cam) - probe.eval(&(mean - e), &shape, &cam)) / (2.0 * h);
                worst = worst.max(rel_err(d_mean[k], fd));
            }
            for k in 0..3 {
                let mut plus = shape;
                let mut minus = shape;
                plus.log_scale[k] += h;
                minus.log_scale[k] -= h;
                let fd = (probe.eval(&mean, &plus, &cam) - probe.eval(&mean, &minus, &cam)) / (2.0 * h);
                worst = worst.max(rel_err(d_shape.log_scale[k], fd));
            }
            for k in 0..4 {
                let mut plus = shape;
                let mut minus = shape;
                plus.rotation[k] += h;
                minus.rotation[k] -= h;
                let fd = (probe.eval(&mean, &plus, &cam) - probe.eval(&mean, &minus, &cam)) / (2.0 * h);
                worst = worst.max(rel_err(d_shape.rotation[k], fd));
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn rejects_bad_cameras() {
        let bad_focal = Camera::new(3, 10, 10, 0.0, 1.0, 5.0, 5.0, Matrix4::identity());
        assert!(matches!(bad_focal, Err(Error::InvalidCamera { id: 3, .. })));
        let bad_pp = Camera::new(3, 10, 10, 1.0, 1.0, 10.0, 5.0, Matrix4::identity());
        assert!(bad_pp.is_err());
        let mut reflect = Matrix4::identity();
        reflect[(0, 0)] = -1.0;
        assert!(Camera::new(3, 10, 10, 1.0, 1.0, 5.0, 5.0, reflect).is_err());
        let mut skew = Matrix4::identity();
        skew[(0, 1)] = 0.1;
        assert!(Camera::new(3, 10, 10, 1.0, 1.0, 5.0, 5.0, skew).is_err());
    }

    #[test]
    fn look_at_points_forward() {
        let cam = Camera::look_at(
            0,
            64,
            64,
            60.0,
            60.0,
            Vector3::new(0.0, 1.0, 4.0),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let pc = cam.to_camera(&Vector3::zeros());
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12 && pc.z > 0.0);
        assert!((cam.center() - Vector3::new(0.0, 1.0, 4.0)).norm() < 1e-12);
        // World up maps to image up (negative y).
        let above = cam.to_camera(&Vector3::new(0.0, 0.5, 0.0));
        assert!(above.y < 0.0);
    }
}
