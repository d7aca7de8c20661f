//! Renderer behavior against closed-form oracles: ray-sphere depth,
//! analytic silhouette area, mask monotonicity in object scale, raster
//! coverage, and finite-difference gradients through both renderers.

use diffcore::{check::grad_check, ParamSet, Tape, Tensor, Var};
use hoirec::geom::{self, RigidTransform};
use hoirec::render::{
    blend, midpoint_tvals, render_hand, render_object, BlendConfig, Camera, DensityVars,
    RasterConfig, RasterMesh, RayVars, RenderOpts,
};
use hoirec::scene::pose::CameraParams;
use hoirec::scene::{AnalyticField, HandProxy, Shape};
use hoirec::HoiError;

fn axis_camera(dist: f64, res: usize) -> Camera {
    Camera::look_at(
        [0.0, 0.0, -dist],
        [0.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        CameraParams::new(1.0),
        res,
        res,
    )
}

fn render_sphere_mask_depth(
    radius: f64,
    dist: f64,
    res: usize,
    samples: usize,
    beta: f64,
) -> (Vec<f64>, Vec<f64>) {
    let field = AnalyticField::new(Shape::Sphere { radius });
    let cam = axis_camera(dist, res);
    let rays = cam.all_rays();
    let mut tape = Tape::new();
    let tvals = midpoint_tvals(rays.len(), samples, 0.05, 1.0);
    let rv = RayVars::from_batch(&mut tape, &rays, tvals);
    let density = DensityVars::constant(&mut tape, beta);
    let out = render_object(&mut tape, &field, &rv, density, &RenderOpts::new((0.05, 1.0))).unwrap();
    (
        tape.value(out.mask).data().to_vec(),
        tape.value(out.depth_raw).data().to_vec(),
    )
}

#[test]
fn far_field_renders_empty() {
    // A surface nowhere near the rays: mask and normalized depth all zero.
    let field = AnalyticField::new(Shape::Translated {
        offset: [0.0, 0.0, 100.0],
        shape: Box::new(Shape::Sphere { radius: 0.1 }),
    });
    let cam = axis_camera(0.4, 8);
    let rays = cam.all_rays();
    let mut tape = Tape::new();
    let tvals = midpoint_tvals(rays.len(), 32, 0.05, 1.0);
    let rv = RayVars::from_batch(&mut tape, &rays, tvals);
    let density = DensityVars::constant(&mut tape, 0.002);
    let out = render_object(&mut tape, &field, &rv, density, &RenderOpts::new((0.05, 1.0))).unwrap();
    for (m, d) in tape
        .value(out.mask)
        .data()
        .iter()
        .zip(tape.value(out.depth_norm).data().iter())
    {
        assert!(*m < 1e-9, "mask {m}");
        assert!(d.abs() < 1e-9, "normalized depth {d}");
    }
}

#[test]
fn center_pixel_hits_sphere_at_analytic_depth() {
    let (radius, dist, res, samples) = (0.1, 0.4, 9, 64);
    let (mask, depth) = render_sphere_mask_depth(radius, dist, res, samples, 0.002);
    let center = (res / 2) * res + res / 2;
    assert!(mask[center] > 0.99, "center mask {}", mask[center]);
    let spacing = (1.0 - 0.05) / samples as f64;
    let expect = dist - radius;
    assert!(
        (depth[center] - expect).abs() < 2.0 * spacing,
        "depth {} vs {} (spacing {})",
        depth[center],
        expect,
        spacing
    );
}

#[test]
fn silhouette_area_matches_projected_disc() {
    // Density sharp relative to the sphere so the soft shell spills less
    // than the 3% area budget.
    let (radius, dist, res) = (0.1, 0.4, 64);
    let (mask, _) = render_sphere_mask_depth(radius, dist, res, 64, 2e-4);
    let measured: f64 = mask.iter().sum::<f64>() / (res * res) as f64;
    // Tangent-cone silhouette: projected radius f r / sqrt(d^2 - r^2) on an
    // image plane spanning [-1,1]^2.
    let r_proj = radius / (dist * dist - radius * radius).sqrt();
    let analytic = std::f64::consts::PI * r_proj * r_proj / 4.0;
    let rel = (measured - analytic).abs() / analytic;
    assert!(rel < 0.03, "area {measured} vs {analytic} (rel {rel})");
}

#[test]
fn mask_is_monotone_in_sphere_radius() {
    let mut prev: Option<Vec<f64>> = None;
    for radius in [0.06, 0.08, 0.10, 0.12] {
        let (mask, _) = render_sphere_mask_depth(radius, 0.4, 16, 48, 0.002);
        if let Some(p) = prev {
            for (a, b) in p.iter().zip(mask.iter()) {
                assert!(*b >= *a - 1e-9, "mask shrank: {a} -> {b} at r={radius}");
            }
        }
        prev = Some(mask);
    }
}

#[test]
fn volumetric_gradients_match_finite_differences() {
    // d(mask sum)/d(ray origin z) through density, transmittance, weights.
    let field = AnalyticField::new(Shape::Sphere { radius: 0.1 });
    let mut params = ParamSet::new();
    params.push("shift", Tensor::from_vec(vec![0.0, 0.0, 0.0]));

    let eval = |ps: &ParamSet, tape: &mut Tape| -> Result<(Vec<Var>, Var), HoiError> {
        let leaves = ps.leaves(tape);
        let cam = axis_camera(0.35, 6);
        let rays = cam.all_rays();
        let o = tape.constant(rays.origins_tensor());
        let o = tape.add_row(o, leaves[0])?;
        let d = tape.constant(rays.dirs_tensor());
        let rv = RayVars { origins: o, dirs: d, tvals: midpoint_tvals(rays.len(), 24, 0.05, 1.0) };
        let density = DensityVars::constant(tape, 0.004);
        let out = render_object(tape, &field, &rv, density, &RenderOpts::new((0.05, 1.0)))?;
        let loss = tape.sum_all(out.mask);
        Ok((leaves, loss))
    };

    let mut tape = Tape::new();
    let (leaves, loss) = eval(&params, &mut tape).unwrap();
    tape.backward(loss).unwrap();
    let ad = vec![tape.grad(leaves[0]).unwrap().to_vec()];
    let err = grad_check(&params, &ad, 1e-6, |ps| {
        let mut t = Tape::new();
        let (_, loss) = eval(ps, &mut t).map_err(to_diff)?;
        Ok(t.value(loss).item())
    })
    .unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}

fn to_diff(e: HoiError) -> diffcore::DiffError {
    match e {
        HoiError::Diff(d) => d,
        other => diffcore::DiffError::Invalid(other.to_string()),
    }
}

fn unit_triangle_mesh() -> (Tensor, RasterMesh) {
    let verts = Tensor::new(
        vec![3, 3],
        vec![-0.5, -0.5, 0.5, 0.5, -0.5, 0.5, 0.0, 0.5, 0.5],
    )
    .unwrap();
    let mesh = RasterMesh {
        faces: vec![[0, 1, 2]],
        uv: vec![[0.0, 0.0], [1.0, 0.0], [0.5, 1.0]],
    };
    (verts, mesh)
}

fn grid_uv(res: usize) -> Vec<[f64; 2]> {
    let mut uv = Vec::with_capacity(res * res);
    for y in 0..res {
        for x in 0..res {
            uv.push([
                (2.0 * x as f64 + 1.0) / res as f64 - 1.0,
                (2.0 * y as f64 + 1.0) / res as f64 - 1.0,
            ]);
        }
    }
    uv
}

#[test]
fn frontal_triangle_covers_center_pixel() {
    let (verts, mesh) = unit_triangle_mesh();
    let mut tape = Tape::new();
    let v = tape.constant(verts);
    let f = tape.constant(Tensor::from_vec(vec![1.0]));
    let pp = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
    let uv = grid_uv(3);
    let out = render_hand(&mut tape, &mesh, v, f, pp, &uv, &RasterConfig::default()).unwrap();
    let mask = tape.value(out.mask).data();
    let depth = tape.value(out.depth_raw).data();
    let center = 4; // 3x3 grid
    assert!(mask[center] > 0.999, "center coverage {}", mask[center]);
    assert!((depth[center] - 0.5).abs() < 1e-9, "depth {}", depth[center]);
}

#[test]
fn raster_gradients_match_finite_differences() {
    // Loss mixes coverage and depth so both backward paths are exercised;
    // gradient of a translation applied to all vertices plus the focal.
    let (verts, mesh) = unit_triangle_mesh();
    let mut params = ParamSet::new();
    params.push("shift", Tensor::from_vec(vec![0.013, -0.008, 0.0]));
    params.push("focal", Tensor::from_vec(vec![1.1]));

    let eval = |ps: &ParamSet, tape: &mut Tape| -> Result<(Vec<Var>, Var), HoiError> {
        let leaves = ps.leaves(tape);
        let v0 = tape.constant(verts.clone());
        let v = tape.add_row(v0, leaves[0])?;
        let pp = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let uv = grid_uv(8);
        let out = render_hand(tape, &mesh, v, leaves[1], pp, &uv, &RasterConfig::default())?;
        let m = tape.sum_all(out.mask);
        let d = tape.sum_all(out.depth_raw);
        let dw = tape.mul_scalar(d, 0.05);
        let loss = tape.add(m, dw)?;
        Ok((leaves, loss))
    };

    let mut tape = Tape::new();
    let (leaves, loss) = eval(&params, &mut tape).unwrap();
    tape.backward(loss).unwrap();
    let ad: Vec<Vec<f64>> = leaves.iter().map(|l| tape.grad(*l).unwrap().to_vec()).collect();
    let err = grad_check(&params, &ad, 1e-5, |ps| {
        let mut t = Tape::new();
        let (_, loss) = eval(ps, &mut t).map_err(to_diff)?;
        Ok(t.value(loss).item())
    })
    .unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn palm_front_and_back_have_distinct_uv() {
    let proxy = HandProxy::default_proxy();
    let verts = proxy.skin_plain(&[0.0; 10], &[0.0; 45]).unwrap();
    let mesh = RasterMesh { faces: proxy.faces.clone(), uv: proxy.uv.clone() };
    let render_from = |cam: &Camera| -> Vec<f64> {
        let mut tape = Tape::new();
        let flat: Vec<f64> = verts.iter().flatten().copied().collect();
        let hv = tape.constant(Tensor::new(vec![verts.len(), 3], flat).unwrap());
        let mut cammed = Vec::with_capacity(verts.len() * 3);
        for v in &verts {
            cammed.extend_from_slice(&cam.cam_from_hand.apply(*v));
        }
        let vc = tape.constant(Tensor::new(vec![verts.len(), 3], cammed).unwrap());
        let f = tape.constant(Tensor::from_vec(vec![cam.intrinsics.focal]));
        let pp = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let uvpix = grid_uv(32);
        let out = render_hand(&mut tape, &mesh, vc, f, pp, &uvpix, &RasterConfig::default()).unwrap();
        let _ = hv;
        let p = out.pixel_count;
        let packed = tape.value(out.packed).data().to_vec();
        // keep (mask, u channel)
        let mut masked_u = vec![0.0; 2 * p];
        masked_u[..p].copy_from_slice(&packed[..p]);
        masked_u[p..].copy_from_slice(&packed[5 * p..6 * p]);
        masked_u
    };
    let k = CameraParams::new(4.0);
    let front = render_from(&Camera::look_at(
        [0.0, 0.06, 0.4],
        [0.0, 0.06, 0.0],
        [0.0, 1.0, 0.0],
        k,
        32,
        32,
    ));
    let back = render_from(&Camera::look_at(
        [0.0, 0.06, -0.4],
        [0.0, 0.06, 0.0],
        [0.0, 1.0, 0.0],
        k,
        32,
        32,
    ));
    let p = 32 * 32;
    let mut diff = 0.0;
    let mut count = 0.0;
    for i in 0..p {
        if front[i] > 0.5 && back[i] > 0.5 {
            diff += (front[p + i] - back[p + i]).abs();
            count += 1.0;
        }
    }
    assert!(count > 50.0, "hands overlap in {count} pixels");
    let mean = diff / count;
    assert!(mean > 0.1, "mean |u_front - u_back| = {mean}");
}

#[test]
fn blended_mask_gradient_through_pose_translation() {
    // 8x8 two-layer toy: volumetric sphere + hand triangle, blended; the
    // L1 loss gradient w.r.t. an object pose translation must match FD.
    let field = AnalyticField::new(Shape::Sphere { radius: 0.09 });
    let (verts, mesh) = unit_triangle_mesh();
    let mut params = ParamSet::new();
    params.push("obj_t", Tensor::from_vec(vec![0.005, -0.01, 0.02]));

    let eval = |ps: &ParamSet, tape: &mut Tape| -> Result<(Vec<Var>, Var), HoiError> {
        let leaves = ps.leaves(tape);
        let cam = axis_camera(0.4, 8);
        let rays = cam.all_rays();
        let o0 = tape.constant(rays.origins_tensor());
        // Translating the object is translating the rays the other way.
        let neg = tape.neg(leaves[0]);
        let o = tape.add_row(o0, neg)?;
        let d = tape.constant(rays.dirs_tensor());
        let rv = RayVars { origins: o, dirs: d, tvals: midpoint_tvals(rays.len(), 24, 0.05, 1.0) };
        let density = DensityVars::constant(tape, 0.004);
        let obj = render_object(tape, &field, &rv, density, &RenderOpts::new((0.05, 1.0)))?;

        let vcam = tape.constant(verts.clone());
        let f = tape.constant(Tensor::from_vec(vec![1.0]));
        let pp = tape.constant(Tensor::from_vec(vec![0.0, 0.0]));
        let hand = render_hand(tape, &mesh, vcam, f, pp, &grid_uv(8), &RasterConfig::default())?;

        let blended = blend(
            tape,
            hand.mask,
            hand.depth_raw,
            obj.mask,
            obj.depth_raw,
            &BlendConfig { gamma: 1e-2, near: 0.05, far: 1.0 },
        )?;
        // L1 against a fixed target
        let target_h = tape.constant(Tensor::full(vec![64], 0.3));
        let target_o = tape.constant(Tensor::full(vec![64], 0.4));
        let dh = tape.sub(blended.hand, target_h)?;
        let doo = tape.sub(blended.object, target_o)?;
        let ah = tape.abs(dh);
        let ao = tape.abs(doo);
        let s = tape.add(ah, ao)?;
        let loss = tape.mean_all(s);
        Ok((leaves, loss))
    };

    let mut tape = Tape::new();
    let (leaves, loss) = eval(&params, &mut tape).unwrap();
    tape.backward(loss).unwrap();
    let ad = vec![tape.grad(leaves[0]).unwrap().to_vec()];
    let err = grad_check(&params, &ad, 1e-6, |ps| {
        let mut t = Tape::new();
        let (_, loss) = eval(ps, &mut t).map_err(to_diff)?;
        Ok(t.value(loss).item())
    })
    .unwrap();
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn transformed_field_rotation_moves_the_level_set() {
    // Rotating the field rotates its silhouette: render an off-axis
    // translated sphere with and without a compensating rotation.
    let off = Shape::Translated {
        offset: [0.06, 0.0, 0.0],
        shape: Box::new(Shape::Sphere { radius: 0.05 }),
    };
    let rot = geom::axis_angle_to_mat([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
    let rotated = AnalyticField::with_transform(
        off.clone(),
        RigidTransform::new(rot, [0.0, 0.0, 0.0]),
    );
    // The level set of phi(R q) is the R^-1-rotated surface: Rot(z, 90deg)
    // sends (0, -0.06, 0) to (0.06, 0, 0), so the sphere appears at -y.
    let plain = AnalyticField::new(Shape::Translated {
        offset: [0.0, -0.06, 0.0],
        shape: Box::new(Shape::Sphere { radius: 0.05 }),
    });
    let mut direct = Vec::new();
    let mut via = Vec::new();
    for (field, sink) in [(&rotated, &mut via), (&plain, &mut direct)] {
        let cam = axis_camera(0.4, 24);
        let rays = cam.all_rays();
        let mut tape = Tape::new();
        let tvals = midpoint_tvals(rays.len(), 48, 0.05, 1.0);
        let rv = RayVars::from_batch(&mut tape, &rays, tvals);
        let density = DensityVars::constant(&mut tape, 0.002);
        let out =
            render_object(&mut tape, field, &rv, density, &RenderOpts::new((0.05, 1.0))).unwrap();
        *sink = tape.value(out.mask).data().to_vec();
    }
    for (a, b) in direct.iter().zip(via.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
}
