//! Geometry oracle suite behind `ca3d verify-geometry`.
//!
//! Projection-value checks compare the active model (possibly angle-
//! perturbed via the test hook) against references built at the canonical
//! 45°, so a perturbed angle keeps orthonormality green while the value
//! checks go red.

use ca3d_core::attention::column_bias;
use ca3d_core::geometry::{
    back_project, mat3_det, mat3_mul, mat3_transpose, mat3_vec, phantom_generate, project_volume,
    PhantomSpec, ProjectionModel, View,
};
use ca3d_core::{Rng, Tensor};

use crate::{CliError, CliResult, EXIT_VERIFY};

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        if pass {
            println!("PASS  {name}");
        } else {
            println!("FAIL  {name} ({detail})");
            self.failures += 1;
        }
    }
}

fn inner(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

pub fn verify_geometry(seed: u64, perturb_theta: f64) -> CliResult {
    let model = ProjectionModel::with_theta(std::f64::consts::FRAC_PI_4 + perturb_theta);
    let reference = ProjectionModel::default();
    let mut rng = Rng::new(seed);
    let mut suite = Suite { failures: 0 };

    // matrix identities
    let p = model.projection_matrix();
    let r = model.rotation_matrix();
    let pp = mat3_mul(&p, &p);
    let mut idem = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            idem = idem.max((pp[i][j] - p[i][j]).abs());
        }
    }
    suite.check("projection matrix idempotent (P*P = P)", idem < 1e-6, format!("max dev {idem:.2e}"));

    let rtr = mat3_mul(&mat3_transpose(&r), &r);
    let mut ortho = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            ortho = ortho.max((rtr[i][j] - id).abs());
        }
    }
    suite.check("rotation orthonormal (R^T R = I)", ortho < 1e-6, format!("max dev {ortho:.2e}"));
    let det = mat3_det(&r);
    suite.check("rotation determinant 1", (det - 1.0).abs() < 1e-6, format!("det {det}"));

    // point projections against the canonical matrices
    let pc = reference.projection_matrix();
    let rc = reference.rotation_matrix();
    let mut max_dev = 0.0f64;
    for _ in 0..1000 {
        let v = [
            rng.uniform(-50.0, 50.0) as f64,
            rng.uniform(-50.0, 50.0) as f64,
            rng.uniform(-50.0, 50.0) as f64,
        ];
        let cc = model.project_point(v, View::Cc);
        let cc_m = mat3_vec(&pc, &v);
        let mlo = model.project_point(v, View::Mlo);
        let mlo_m = mat3_vec(&pc, &mat3_vec(&rc, &v));
        for i in 0..3 {
            max_dev = max_dev.max((cc[i] - cc_m[i]).abs());
            max_dev = max_dev.max((mlo[i] - mlo_m[i]).abs());
        }
    }
    suite.check(
        "project_point matches P*p and P*R*p (1000 points)",
        max_dev < 1e-6,
        format!("max dev {max_dev:.2e}"),
    );

    let hand = model.project_point([1.0, 2.0, 3.0], View::Mlo);
    let dev = (hand[1] + 0.70711).abs();
    suite.check(
        "hand value (1,2,3) -> (1, -0.70711, 0) under MLO",
        (hand[0] - 1.0).abs() < 1e-6 && dev < 1e-5 && hand[2] == 0.0,
        format!("got ({}, {}, {})", hand[0], hand[1], hand[2]),
    );

    // round trips and adjoint identity (discrete operators)
    for view in [View::Cc, View::Mlo] {
        let mut worst = 0.0f32;
        for _ in 0..20 {
            let img = Tensor::from_vec(&[16, 16], rng.normal_vec(256)).unwrap();
            let vol = back_project(&img, view, 16).unwrap();
            let round = project_volume(&vol, view).unwrap();
            for (a, b) in round.data().iter().zip(img.data()) {
                worst = worst.max((a - b).abs());
            }
        }
        suite.check(
            &format!("project(back_project(img)) round trip, {view:?}"),
            worst < 1e-5,
            format!("max dev {worst:.2e}"),
        );

        let mut worst_adj = 0.0f64;
        let d = 16usize;
        for _ in 0..10 {
            let v = Tensor::from_vec(&[d, 16, 16], rng.normal_vec(d * 256)).unwrap();
            let img = Tensor::from_vec(&[16, 16], rng.normal_vec(256)).unwrap();
            let lhs = inner(project_volume(&v, view).unwrap().data(), img.data());
            let rhs = inner(v.data(), back_project(&img, view, d).unwrap().data()) / d as f64;
            worst_adj = worst_adj.max((lhs - rhs).abs());
        }
        suite.check(
            &format!("adjoint identity <Pv,img> = (1/D)<v,Bimg>, {view:?}"),
            worst_adj < 1e-4,
            format!("max dev {worst_adj:.2e}"),
        );
    }

    // column-bias spot checks
    let bias = column_bias(4, 8, 5.0).unwrap();
    let n = 32;
    let mut ok = true;
    let mut detail = String::new();
    for i in 0..n {
        for j in 0..n {
            let v = bias.data()[i * n + j];
            if v > 0.0 || (v - bias.data()[j * n + i]).abs() > 0.0 {
                ok = false;
                detail = format!("entry ({i},{j}) = {v}");
            }
            if i % 8 == j % 8 && v != 0.0 {
                ok = false;
                detail = format!("same-column entry ({i},{j}) = {v}");
            }
        }
    }
    suite.check("column bias symmetric, non-positive, zero on same columns", ok, detail);

    let delta5 = column_bias(1, 6, 5.0).unwrap().data()[5];
    suite.check(
        "column bias delta=5, sigma=5 -> -0.5",
        (delta5 + 0.5).abs() < 1e-7,
        format!("got {delta5}"),
    );

    // column-correspondence prior: paired profiles beat shuffled pairings
    let mut corr_paired = 0.0f64;
    let mut corr_shuffled = 0.0f64;
    let count = 50;
    for i in 0..count {
        let spec = PhantomSpec::new(32, seed ^ (10_000 + i));
        let vol = phantom_generate(&spec).unwrap();
        let cc = project_volume(&vol, View::Cc).unwrap();
        let mlo = project_volume(&vol, View::Mlo).unwrap();
        let prof = |img: &Tensor| -> Vec<f64> {
            (0..32)
                .map(|x| (0..32).map(|y| img.data()[y * 32 + x] as f64).sum())
                .collect()
        };
        let a = prof(&cc);
        let b = prof(&mlo);
        let mut shuffled = b.clone();
        for j in (1..shuffled.len()).rev() {
            shuffled.swap(j, rng.below(j + 1));
        }
        corr_paired += pearson(&a, &b);
        corr_shuffled += pearson(&a, &shuffled);
    }
    corr_paired /= count as f64;
    corr_shuffled /= count as f64;
    suite.check(
        "paired column profiles correlate above shuffled pairings (50 phantoms)",
        corr_paired > corr_shuffled,
        format!("paired {corr_paired:.3} vs shuffled {corr_shuffled:.3}"),
    );

    if suite.failures > 0 {
        return Err(CliError {
            code: EXIT_VERIFY,
            message: format!("{} geometry check(s) failed", suite.failures),
        });
    }
    println!("all geometry checks passed");
    Ok(())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-12)
}
